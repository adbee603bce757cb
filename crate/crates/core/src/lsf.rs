//! Latent style fusion: audio window → temporal-conv encoder → latent
//! dropout → per-frame style concatenation → temporal-conv decoder → β and
//! pose per motion frame.
//!
//! The encoder halves the time axis once with a strided residual block
//! (80 → 40 frames, the motion rate) and then resamples to the output length
//! (32) by reading the centre 32 frames, matching the window alignment of
//! [`crate::audio::window_pairs`].

use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::Optimizer;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{center_offset, AudioFeatureSequence, AUDIO_DIM, AUDIO_FPS, IN_LEN, OUT_LEN};
use crate::error::{Error, Result};
use crate::face_model::{EXP_DIM, POSE_DIM};
use crate::nn::{adam, mean_abs_diff, open_checkpoint, relu, save_checkpoint, CheckpointMeta, Conv1d, LossRow, ParamStore, TrainReport};
use crate::style::{MotionSeries, StyleCode, MOTION_FPS, STYLE_DIM};

pub const MODEL_TAG: &str = "lsf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsfConfig {
    pub latent_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub dropout_rate: f64,
    pub in_len: usize,
    pub out_len: usize,
    pub style_dim: usize,
    pub audio_dim: usize,
    pub beta_dim: usize,
    pub pose_dim: usize,
    pub seed: u64,
}

impl Default for LsfConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            encoder_blocks: 3,
            decoder_blocks: 3,
            dropout_rate: 0.5,
            in_len: IN_LEN,
            out_len: OUT_LEN,
            style_dim: STYLE_DIM,
            audio_dim: AUDIO_DIM,
            beta_dim: EXP_DIM,
            pose_dim: POSE_DIM,
            seed: 0,
        }
    }
}

impl LsfConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed = [
            ("style_dim", self.style_dim, STYLE_DIM),
            ("audio_dim", self.audio_dim, AUDIO_DIM),
            ("beta_dim", self.beta_dim, EXP_DIM),
            ("pose_dim", self.pose_dim, POSE_DIM),
        ];
        for (name, got, want) in fixed {
            if got != want {
                return Err(Error::Config(format!("{name} must be {want}, got {got}")));
            }
        }
        if self.latent_dim == 0 || self.encoder_blocks == 0 {
            return Err(Error::Config("latent_dim and encoder_blocks must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0,1), got {}", self.dropout_rate)));
        }
        center_offset(self.in_len, self.out_len).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug)]
struct ResBlock1d {
    conv1: Conv1d,
    conv2: Conv1d,
    shortcut: Option<Conv1d>,
}

impl ResBlock1d {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), channels, channels, 3, stride)?,
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), channels, channels, 3, 1)?,
            shortcut: if stride == 1 {
                None
            } else {
                Some(Conv1d::new(ps, &format!("{name}.shortcut"), channels, channels, 1, stride)?)
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_relu(x)?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        relu(&(h + skip)?)
    }
}

/// Linear interpolation matrix, shape `(from, to)`, that reads the `to`
/// output frames at the centre of a `from`-frame latent at the same frame
/// rate, so each output frame lines up in time with its latent frame.
fn resample_matrix(from: usize, to: usize) -> Array2<f64> {
    let mut m = Array2::zeros((from, to));
    let start = (from as f64 - to as f64) / 2.0;
    for j in 0..to {
        let pos = (start + j as f64).clamp(0.0, (from - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let frac = pos - lo as f64;
        m[[lo, j]] += 1.0 - frac;
        m[[hi, j]] += frac;
    }
    m
}

pub(crate) fn array_tensor(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("dims2"))
}

#[derive(Debug)]
pub struct LsfModel {
    config: LsfConfig,
    params: ParamStore,
    stem: Conv1d,
    encoder: Vec<ResBlock1d>,
    resample: Tensor,
    fuse: Conv1d,
    decoder: Vec<ResBlock1d>,
    beta_head: Conv1d,
    pose_head: Conv1d,
    dropout_rng: Mutex<ChaCha8Rng>,
    iteration: usize,
}

impl LsfModel {
    pub fn new(config: LsfConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: LsfConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, config.seed);
        let c = config.latent_dim;
        let stem = Conv1d::new(&mut ps, "enc.stem", AUDIO_DIM, c, 3, 1)?;
        let encoder = (0..config.encoder_blocks)
            .map(|i| ResBlock1d::new(&mut ps, &format!("enc.block{i}"), c, if i == 0 { 2 } else { 1 }))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv1d::new(&mut ps, "dec.fuse", c + STYLE_DIM, c, 1, 1)?;
        let decoder = (0..config.decoder_blocks)
            .map(|i| ResBlock1d::new(&mut ps, &format!("dec.block{i}"), c, 1))
            .collect::<Result<Vec<_>>>()?;
        let beta_head = Conv1d::new(&mut ps, "dec.beta_head", c, EXP_DIM, 1, 1)?;
        let pose_head = Conv1d::new(&mut ps, "dec.pose_head", c, POSE_DIM, 1, 1)?;
        let latent_len = config.in_len.div_ceil(2);
        let rm = resample_matrix(latent_len, config.out_len);
        let resample = array_tensor(rm.iter().copied().collect(), &[latent_len, config.out_len], dtype)?;
        let dropout_rng = Mutex::new(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xd20f)));
        Ok(Self {
            config,
            params: ps,
            stem,
            encoder,
            resample,
            fuse,
            decoder,
            beta_head,
            pose_head,
            dropout_rng,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &LsfConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn dropout_mask(&self, dims: &[usize]) -> Result<Tensor> {
        let keep = 1.0 - self.config.dropout_rate;
        let n: usize = dims.iter().product();
        let mut rng = self.dropout_rng.lock().expect("dropout rng poisoned");
        let data: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        array_tensor(data, dims, self.dtype())
    }

    /// Encoder half: `(B, in_len, 29)` → latent `(B, C, out_len)`.
    pub fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        let (_, t, d) = audio.dims3()?;
        if t != self.config.in_len || d != AUDIO_DIM {
            return Err(Error::invalid(format!(
                "audio batch must be (B, {}, {AUDIO_DIM}), got {:?}",
                self.config.in_len,
                audio.dims()
            )));
        }
        let mut h = self.stem.forward_relu(&audio.transpose(1, 2)?.contiguous()?)?;
        for block in &self.encoder {
            h = block.forward(&h)?;
        }
        Ok(h.broadcast_matmul(&self.resample)?)
    }

    /// Batched forward pass. `audio` is `(B, in_len, 29)`, `style` is
    /// `(B, 135)`; returns `(B, out_len, 64)` and `(B, out_len, 7)`.
    /// `dropout_mask`, if given, multiplies the latent; it must broadcast to
    /// `(B, latent_dim, out_len)`.
    pub fn forward_with_mask(&self, audio: &Tensor, style: &Tensor, dropout_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let b = audio.dim(0)?;
        if style.dims() != [b, STYLE_DIM] {
            return Err(Error::invalid(format!("style batch must be ({b}, {STYLE_DIM}), got {:?}", style.dims())));
        }
        let mut latent = self.encode(audio)?;
        if let Some(mask) = dropout_mask {
            latent = latent.broadcast_mul(mask)?;
        }
        let out_len = self.config.out_len;
        let style = style.unsqueeze(2)?.broadcast_as((b, STYLE_DIM, out_len))?;
        let mixed = Tensor::cat(&[&latent, &style], 1)?;
        let mut h = self.fuse.forward_relu(&mixed)?;
        for block in &self.decoder {
            h = block.forward(&h)?;
        }
        let beta = self.beta_head.forward(&h)?.transpose(1, 2)?.contiguous()?;
        let pose = self.pose_head.forward(&h)?.transpose(1, 2)?.contiguous()?;
        Ok((beta, pose))
    }

    /// Batched forward pass; `training` enables latent dropout drawn from
    /// the model's seeded dropout stream.
    pub fn forward_batch(&self, audio: &Tensor, style: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let mask = if training && self.config.dropout_rate > 0.0 {
            Some(self.dropout_mask(&[audio.dim(0)?, self.config.latent_dim, self.config.out_len])?)
        } else {
            None
        };
        self.forward_with_mask(audio, style, mask.as_ref())
    }

    /// Single-window forward pass: `(in_len × 29)` audio → `(out_len × 64, out_len × 7)`.
    pub fn forward(&self, audio: ArrayView2<'_, f64>, style: &StyleCode, training: bool) -> Result<(Array2<f64>, Array2<f64>)> {
        if audio.dim() != (self.config.in_len, AUDIO_DIM) {
            return Err(Error::invalid(format!(
                "audio window must be {}×{AUDIO_DIM}, got {:?}",
                self.config.in_len,
                audio.dim()
            )));
        }
        let a = array_tensor(audio.iter().copied().collect(), &[1, self.config.in_len, AUDIO_DIM], self.dtype())?;
        let st = array_tensor(style.values().to_vec(), &[1, STYLE_DIM], self.dtype())?;
        let (beta, pose) = self.forward_batch(&a, &st, training)?;
        Ok((tensor_array2(&beta.squeeze(0)?)?, tensor_array2(&pose.squeeze(0)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            model: MODEL_TAG.to_string(),
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.config.seed,
        };
        save_checkpoint(dir, &meta, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (container, meta) = open_checkpoint::<LsfConfig>(dir, MODEL_TAG)?;
        let mut model = Self::new(meta.config)?;
        model.params.read_blobs(&container)?;
        model.iteration = meta.iteration;
        Ok(model)
    }
}

/// `mean|β̂ − β| + mean|p̂ − p|` on tensors.
pub fn l1_loss(pred_beta: &Tensor, pred_pose: &Tensor, gt_beta: &Tensor, gt_pose: &Tensor) -> Result<Tensor> {
    Ok((mean_abs_diff(pred_beta, gt_beta)? + mean_abs_diff(pred_pose, gt_pose)?)?)
}

/// [`l1_loss`] on plain arrays.
pub fn l1_loss_arrays(
    pred_beta: ArrayView2<'_, f64>,
    pred_pose: ArrayView2<'_, f64>,
    gt_beta: ArrayView2<'_, f64>,
    gt_pose: ArrayView2<'_, f64>,
) -> Result<f64> {
    if pred_beta.dim() != gt_beta.dim() || pred_pose.dim() != gt_pose.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: β {:?} vs {:?}, p {:?} vs {:?}",
            pred_beta.dim(),
            gt_beta.dim(),
            pred_pose.dim(),
            gt_pose.dim()
        )));
    }
    let mean_abs = |a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>| (&a - &b).mapv(f64::abs).mean().unwrap_or(0.0);
    Ok(mean_abs(pred_beta, gt_beta) + mean_abs(pred_pose, gt_pose))
}

/// One training example. `style` must come from the same clip as the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfSample {
    pub audio: Array2<f64>,
    pub style: StyleCode,
    pub beta: Array2<f64>,
    pub pose: Array2<f64>,
}

/// Random-access training data.
pub trait LsfDataset {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<LsfSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LsfDataset for [LsfSample] {
    fn len(&self) -> usize {
        <[LsfSample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<LsfSample> {
        self.get(index).cloned().ok_or_else(|| Error::invalid(format!("sample {index} out of range")))
    }
}

impl LsfDataset for Vec<LsfSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<LsfSample> {
        self.as_slice().sample(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsfTrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl LsfTrainSettings {
    /// Full-scale schedule: Adam at 5e-4, batches of 128, 50 000 iterations.
    pub fn paper() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 128,
            iterations: 50_000,
            seed: 0,
        }
    }

    /// Desk-scale schedule used on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl Default for LsfTrainSettings {
    fn default() -> Self {
        Self::desk()
    }
}

/// Collates samples into `(audio, style, beta, pose)` tensors.
pub fn collate(samples: &[LsfSample], dtype: DType) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let b = samples.len();
    let (t_in, _) = samples[0].audio.dim();
    let (t_out, _) = samples[0].beta.dim();
    let mut audio = Vec::with_capacity(b * t_in * AUDIO_DIM);
    let mut style = Vec::with_capacity(b * STYLE_DIM);
    let mut beta = Vec::with_capacity(b * t_out * EXP_DIM);
    let mut pose = Vec::with_capacity(b * t_out * POSE_DIM);
    for s in samples {
        if s.audio.dim() != (t_in, AUDIO_DIM) || s.beta.dim() != (t_out, EXP_DIM) || s.pose.dim() != (t_out, POSE_DIM) {
            return Err(Error::invalid("samples in a batch must share window shapes"));
        }
        audio.extend(s.audio.iter());
        style.extend(s.style.values().iter());
        beta.extend(s.beta.iter());
        pose.extend(s.pose.iter());
    }
    Ok((
        array_tensor(audio, &[b, t_in, AUDIO_DIM], dtype)?,
        array_tensor(style, &[b, STYLE_DIM], dtype)?,
        array_tensor(beta, &[b, t_out, EXP_DIM], dtype)?,
        array_tensor(pose, &[b, t_out, POSE_DIM], dtype)?,
    ))
}

/// Adam on the L1 motion loss. Batches are drawn by walking seeded
/// per-epoch permutations of the dataset, so the run is fully determined
/// by `settings.seed` and the model's own seed.
pub fn train<D: LsfDataset + ?Sized>(model: &mut LsfModel, data: &D, settings: &LsfTrainSettings) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut opt = adam(model.params.vars(), settings.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport::default();
    for it in 0..settings.iterations {
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data.sample(order[cursor])?);
            cursor += 1;
        }
        let (audio, style, beta, pose) = collate(&batch, model.dtype())?;
        let (pb, pp) = model.forward_batch(&audio, &style, true)?;
        let loss = l1_loss(&pb, &pp, &beta, &pose)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        opt.backward_step(&loss)?;
        model.iteration += 1;
        report.rows.push(LossRow { iteration: it, loss: value });
        if it % 200 == 0 {
            log::debug!("lsf iteration {it}: loss {value:.5}");
        }
    }
    Ok(report)
}

/// How overlapping window outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    /// Tent weights, largest at the window centre.
    #[default]
    Crossfade,
    OverlapMean,
}

impl std::str::FromStr for Blend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossfade" => Ok(Self::Crossfade),
            "overlap_mean" | "overlap-mean" => Ok(Self::OverlapMean),
            other => Err(Error::invalid(format!("unknown blend mode `{other}`"))),
        }
    }
}

/// Motion frames dropped at the head of a synthesized series: output frame
/// 0 corresponds to this motion frame of the driving audio.
pub fn synthesis_offset(config: &LsfConfig) -> usize {
    center_offset(config.in_len, config.out_len).expect("validated config")
}

/// Start positions (in motion frames, relative to the output) of the
/// windows used to cover a feature sequence.
pub fn window_starts(audio_frames: usize, config: &LsfConfig, stride: usize) -> Result<Vec<usize>> {
    if audio_frames < config.in_len {
        return Err(Error::invalid(format!(
            "need at least {} audio frames ({} s), got {audio_frames}",
            config.in_len,
            config.in_len as f64 / AUDIO_FPS
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("window stride must be positive"));
    }
    let last = (audio_frames - config.in_len) / 2;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("nonempty") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Sliding-window synthesis over an arbitrary-length feature sequence.
///
/// Windows advance by `stride` motion frames (two audio frames each); the
/// tail is covered by one extra window aligned to the end. The output has
/// `(audio_frames − in_len)/2 + out_len` frames at 25 fps, starting at
/// [`synthesis_offset`] motion frames into the audio.
pub fn synthesize(
    model: &LsfModel,
    features: &AudioFeatureSequence,
    style: &StyleCode,
    stride: usize,
    blend: Blend,
) -> Result<MotionSeries> {
    let cfg = &model.config;
    let starts = window_starts(features.len(), cfg, stride)?;
    let out_len = cfg.out_len;
    let total = starts.last().expect("nonempty") + out_len;
    let weights: Vec<f64> = (0..out_len)
        .map(|k| match blend {
            Blend::Crossfade => (k + 1).min(out_len - k) as f64,
            Blend::OverlapMean => 1.0,
        })
        .collect();

    let mut beta_acc = Array2::<f64>::zeros((total, EXP_DIM));
    let mut pose_acc = Array2::<f64>::zeros((total, POSE_DIM));
    let mut wsum = vec![0.0; total];
    let frames = features.frames();
    for chunk in starts.chunks(64) {
        let mut audio = Vec::with_capacity(chunk.len() * cfg.in_len * AUDIO_DIM);
        for &s in chunk {
            audio.extend(frames.slice(s![2 * s..2 * s + cfg.in_len, ..]).iter());
        }
        let a = array_tensor(audio, &[chunk.len(), cfg.in_len, AUDIO_DIM], model.dtype())?;
        let st = array_tensor(style.values().to_vec(), &[1, STYLE_DIM], model.dtype())?
            .broadcast_as((chunk.len(), STYLE_DIM))?
            .contiguous()?;
        let (pb, pp) = model.forward_batch(&a, &st, false)?;
        for (i, &s) in chunk.iter().enumerate() {
            let b = tensor_array2(&pb.get(i)?)?;
            let p = tensor_array2(&pp.get(i)?)?;
            for k in 0..out_len {
                let w = weights[k];
                beta_acc.row_mut(s + k).scaled_add(w, &b.row(k));
                pose_acc.row_mut(s + k).scaled_add(w, &p.row(k));
                wsum[s + k] += w;
            }
        }
    }
    for (t, &w) in wsum.iter().enumerate() {
        beta_acc.row_mut(t).mapv_inplace(|x| x / w);
        pose_acc.row_mut(t).mapv_inplace(|x| x / w);
    }
    MotionSeries::new(beta_acc, pose_acc, MOTION_FPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> LsfConfig {
        LsfConfig {
            latent_dim: 8,
            encoder_blocks: 2,
            decoder_blocks: 1,
            seed: 4,
            ..LsfConfig::default()
        }
    }

    fn random_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn random_style(rng: &mut ChaCha8Rng) -> StyleCode {
        StyleCode::new(ndarray::Array1::from_shape_fn(STYLE_DIM, |_| rng.random_range(0.0..2.0))).unwrap()
    }

    #[test]
    fn resample_rows_sum_to_one_per_output() {
        let m = resample_matrix(40, 32);
        for j in 0..32 {
            assert!((m.column(j).sum() - 1.0).abs() < 1e-12);
        }
        // Identity when lengths match.
        assert_eq!(resample_matrix(5, 5), Array2::<f64>::eye(5));
        // Centre crop: output j reads latent frame j + 4.
        for j in 0..32 {
            assert_eq!(m[[j + 4, j]], 1.0);
        }
        let odd = resample_matrix(5, 2);
        assert_eq!(odd.column(0).to_vec(), vec![0.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = LsfModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let audio = random_array(&mut rng, IN_LEN, AUDIO_DIM);
        let style = random_style(&mut rng);
        let (b1, p1) = model.forward(audio.view(), &style, false).unwrap();
        let (b2, p2) = model.forward(audio.view(), &style, false).unwrap();
        assert_eq!(b1.dim(), (OUT_LEN, EXP_DIM));
        assert_eq!(p1.dim(), (OUT_LEN, POSE_DIM));
        assert_eq!((b1, p1), (b2, p2));
        assert!(model.forward(audio.slice(s![..79, ..]), &style, false).is_err());
    }

    #[test]
    fn dropout_only_acts_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let audio = random_array(&mut rng, IN_LEN, AUDIO_DIM);
        let style = random_style(&mut rng);
        let model = LsfModel::new(tiny()).unwrap();
        let eval = model.forward(audio.view(), &style, false).unwrap();
        assert_ne!(model.forward(audio.view(), &style, true).unwrap(), eval);

        let off = LsfModel::new(LsfConfig { dropout_rate: 0.0, ..tiny() }).unwrap();
        assert_eq!(
            off.forward(audio.view(), &style, true).unwrap(),
            off.forward(audio.view(), &style, false).unwrap()
        );
    }

    #[test]
    fn l1_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_array(&mut rng, 32, 64);
        let p = random_array(&mut rng, 32, 7);
        assert_eq!(l1_loss_arrays(b.view(), p.view(), b.view(), p.view()).unwrap(), 0.0);
        let ones_b = Array2::ones((32, 64));
        let ones_p = Array2::ones((32, 7));
        let zb = Array2::zeros((32, 64));
        let zp = Array2::zeros((32, 7));
        assert_eq!(l1_loss_arrays(ones_b.view(), ones_p.view(), zb.view(), zp.view()).unwrap(), 2.0);

        // Brute-force mean-abs oracle.
        let gb = random_array(&mut rng, 32, 64);
        let gp = random_array(&mut rng, 32, 7);
        let mut sb = 0.0;
        for i in 0..32 {
            for j in 0..64 {
                sb += (b[[i, j]] - gb[[i, j]]).abs();
            }
        }
        let mut sp = 0.0;
        for i in 0..32 {
            for j in 0..7 {
                sp += (p[[i, j]] - gp[[i, j]]).abs();
            }
        }
        let oracle = sb / (32.0 * 64.0) + sp / (32.0 * 7.0);
        let got = l1_loss_arrays(b.view(), p.view(), gb.view(), gp.view()).unwrap();
        assert!((got - oracle).abs() < 1e-7);
        let sym = l1_loss_arrays(gb.view(), gp.view(), b.view(), p.view()).unwrap();
        assert_eq!(got, sym);

        let t = |a: &Array2<f64>| array_tensor(a.iter().copied().collect(), &[a.nrows(), a.ncols()], DType::F64).unwrap();
        let tensor_loss = l1_loss(&t(&b), &t(&p), &t(&gb), &t(&gp)).unwrap().to_scalar::<f64>().unwrap();
        assert!((tensor_loss - oracle).abs() < 1e-7);
        assert!(l1_loss(&t(&b), &t(&p), &t(&gp), &t(&gb)).is_err());
        assert!(l1_loss_arrays(b.view(), p.view(), gp.view(), gb.view()).is_err());
    }

    #[test]
    fn one_step_changes_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = LsfSample {
            audio: random_array(&mut rng, IN_LEN, AUDIO_DIM),
            style: random_style(&mut rng),
            beta: random_array(&mut rng, OUT_LEN, EXP_DIM),
            pose: random_array(&mut rng, OUT_LEN, POSE_DIM),
        };
        let mut model = LsfModel::new(tiny()).unwrap();
        let before = model.params().snapshot().unwrap();
        let settings = LsfTrainSettings { iterations: 1, batch_size: 1, ..LsfTrainSettings::desk() };
        let report = train(&mut model, &vec![sample], &settings).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_ne!(model.params().snapshot().unwrap(), before);
        assert_eq!(model.iteration(), 1);

        let empty: Vec<LsfSample> = Vec::new();
        assert!(matches!(train(&mut model, &empty, &settings), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<LsfSample> = (0..5)
            .map(|_| LsfSample {
                audio: random_array(&mut rng, IN_LEN, AUDIO_DIM),
                style: random_style(&mut rng),
                beta: random_array(&mut rng, OUT_LEN, EXP_DIM),
                pose: random_array(&mut rng, OUT_LEN, POSE_DIM),
            })
            .collect();
        let settings = LsfTrainSettings { iterations: 4, batch_size: 3, ..LsfTrainSettings::desk() };
        let run = || {
            let mut m = LsfModel::new(tiny()).unwrap();
            let r = train(&mut m, &data, &settings).unwrap();
            (r, m.params().snapshot().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn synthesis_lengths_and_tiling() {
        let model = LsfModel::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let style = random_style(&mut rng);
        let one = AudioFeatureSequence::new(random_array(&mut rng, 80, AUDIO_DIM)).unwrap();
        assert_eq!(synthesize(&model, &one, &style, 16, Blend::Crossfade).unwrap().len(), 32);

        // 144 audio frames with stride 32 tile exactly: two abutting windows.
        let feats = AudioFeatureSequence::new(random_array(&mut rng, 144, AUDIO_DIM)).unwrap();
        let out = synthesize(&model, &feats, &style, 32, Blend::Crossfade).unwrap();
        assert_eq!(out.len(), 64);
        for (w, s) in [0usize, 32].into_iter().enumerate() {
            let window = feats.frames().slice(s![2 * s..2 * s + 80, ..]).to_owned();
            let (b, p) = model.forward(window.view(), &style, false).unwrap();
            let got_b = out.beta().slice(s![32 * w..32 * w + 32, ..]).to_owned();
            let got_p = out.pose().slice(s![32 * w..32 * w + 32, ..]).to_owned();
            assert!((&got_b - &b).mapv(f64::abs).iter().all(|&d| d < 1e-5));
            assert!((&got_p - &p).mapv(f64::abs).iter().all(|&d| d < 1e-5));
        }

        let ten = AudioFeatureSequence::new(random_array(&mut rng, 500, AUDIO_DIM)).unwrap();
        let out = synthesize(&model, &ten, &style, 16, Blend::OverlapMean).unwrap();
        assert_eq!(out.len(), 242);
        assert_eq!(out.fps(), MOTION_FPS);
        let again = synthesize(&model, &ten, &style, 16, Blend::OverlapMean).unwrap();
        assert_eq!(out, again);

        let short = AudioFeatureSequence::new(random_array(&mut rng, 79, AUDIO_DIM)).unwrap();
        assert!(synthesize(&model, &short, &style, 16, Blend::Crossfade).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = LsfModel::new(tiny()).unwrap();
        model.save(dir.path()).unwrap();
        let back = LsfModel::load(dir.path()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params().snapshot().unwrap(), model.params().snapshot().unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LsfModel::new(LsfConfig { dropout_rate: 1.0, ..tiny() }).is_err());
        assert!(LsfModel::new(LsfConfig { style_dim: 134, ..tiny() }).is_err());
        assert!(LsfModel::new(LsfConfig { in_len: 82, ..tiny() }).is_err());
    }
}
