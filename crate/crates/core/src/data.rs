//! Clip containers, ingestion of externally reconstructed parameter series,
//! a synthetic stylized-motion corpus, and a toy render set.
//!
//! Synthetic clips share a small set of slow latent processes between the
//! audio and the motion: the latents set the gains of four noise bands in
//! the audio and, through one fixed mixing matrix, the non-mouth motion
//! channels. The mouth channel follows the syllable envelope. A spec's amplitude scales then decide how strongly each clip
//! moves, which is exactly what the style code measures.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{center_offset, surrogate_features, AudioClip, AudioFeatureSequence};
use crate::container::{read_json, write_json, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::face_model::{FaceBasis, FaceParams, EXP_DIM, MOUTH_CHANNEL, POSE_DIM};
use crate::lsf::{LsfConfig, LsfDataset, LsfSample};
use crate::render::{extract_texture, rasterize_uv, sample_rgb, Frame, Framing, RGBTexture, RenderSample, UVImage};
use crate::style::{style_code, MotionSeries, StyleCode, MOTION_FPS};

pub const SAMPLE_RATE: u32 = 16_000;
pub const MIN_DURATION: f64 = 2.0;
/// Largest allowed gap between audio and motion durations of a clip.
pub const DURATION_TOLERANCE: f64 = 0.12;
/// Seed of the surrogate feature extractor used for every corpus clip.
pub const FEATURE_SEED: u64 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BETA_KIND: &str = "beta_series";
pub const POSE_KIND: &str = "pose_series";

const LATENT_DIM: usize = 4;
const MIX_SEED: u64 = 0x6d69_7865_7273;
/// Gaussian smoothing (motion frames) of the latent and noise processes.
const SMOOTHING: f64 = 3.0;
/// Share of each motion channel not explained by the latents.
const INDEPENDENT_SHARE: f64 = 0.3;
const BAND_EDGES_HZ: [(f64, f64); LATENT_DIM] = [(100.0, 400.0), (400.0, 1200.0), (1200.0, 3000.0), (3000.0, 7000.0)];
const AUDIO_LEVEL: f64 = 0.05;
/// Envelope floor so the band gains stay audible during pauses.
const ENVELOPE_FLOOR: f64 = 0.05;
const ROTATION_SCALE: f64 = 0.05;
const TRANSLATION_SCALE: f64 = 0.02;

/// One clip: motion, audio features and the cached style code.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    id: String,
    motion: MotionSeries,
    features: AudioFeatureSequence,
    style: StyleCode,
}

impl Clip {
    pub fn new(id: impl Into<String>, motion: MotionSeries, features: AudioFeatureSequence) -> Result<Self> {
        let gap = (features.duration() - motion.duration()).abs();
        if gap > DURATION_TOLERANCE {
            return Err(Error::Format(format!(
                "audio lasts {:.3} s but motion lasts {:.3} s",
                features.duration(),
                motion.duration()
            )));
        }
        let style = style_code(&motion)?;
        Ok(Self {
            id: id.into(),
            motion,
            features,
            style,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn motion(&self) -> &MotionSeries {
        &self.motion
    }

    pub fn features(&self) -> &AudioFeatureSequence {
        &self.features
    }

    pub fn style(&self) -> &StyleCode {
        &self.style
    }

    /// Writes `motion/`, `features/` and `style.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.motion.save(&dir.join("motion"))?;
        self.features.save(&dir.join("features"))?;
        self.style.save(&dir.join("style.json"))
    }

    /// Loads a clip and checks its cached style against a fresh one.
    pub fn load(dir: &Path) -> Result<Self> {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let clip = Self::new(id, MotionSeries::load(&dir.join("motion"))?, AudioFeatureSequence::load(&dir.join("features"))?)?;
        let cached = StyleCode::load(&dir.join("style.json"))?;
        let drift = cached.values().iter().zip(clip.style.values().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > 1e-6 {
            return Err(Error::Format(format!("cached style in {} differs from its motion by {drift:.3e}", dir.display())));
        }
        Ok(clip)
    }
}

/// Parameters of one synthetic speaking style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleGeneratorSpec {
    /// Per-channel amplitude of β (64 values).
    pub beta_scales: Vec<f64>,
    /// Scale of head rotation and translation movement.
    pub pose_jitter: f64,
    /// How strongly the speech envelope opens the mouth channel.
    pub mouth_gain: f64,
    pub seed: u64,
}

impl StyleGeneratorSpec {
    pub fn uniform(beta_scale: f64, pose_jitter: f64, mouth_gain: f64, seed: u64) -> Self {
        Self {
            beta_scales: vec![beta_scale; EXP_DIM],
            pose_jitter,
            mouth_gain,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_scales.len() != EXP_DIM {
            return Err(Error::dim(format!("beta_scales must have {EXP_DIM} values, got {}", self.beta_scales.len())));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !self.beta_scales.iter().all(|&x| ok(x)) || !ok(self.pose_jitter) || !ok(self.mouth_gain) {
            return Err(Error::invalid("style generator scales must be finite and nonnegative"));
        }
        Ok(())
    }

    /// The same style with a seed derived for clip `index`.
    pub fn for_clip(&self, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        Self {
            seed: rng.random(),
            ..self.clone()
        }
    }

    /// Multiplies every β scale by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            beta_scales: self.beta_scales.iter().map(|x| x * k).collect(),
            ..self.clone()
        }
    }
}

/// Syllable bumps: `(start, duration, amplitude)` in seconds.
fn syllables(rng: &mut ChaCha8Rng, duration: f64) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    let mut t = rng.random_range(0.0..0.2);
    while t < duration {
        if rng.random_bool(0.15) {
            t += rng.random_range(0.2..0.5);
            continue;
        }
        let d = rng.random_range(0.12..0.3);
        out.push((t, d, rng.random_range(0.5..1.0)));
        t += d;
    }
    out
}

fn envelope(syl: &[(f64, f64, f64)], t: f64) -> f64 {
    syl.iter()
        .filter(|&&(s, d, _)| t >= s && t < s + d)
        .map(|&(s, d, a)| a * (PI * (t - s) / d).sin().powi(2))
        .sum()
}

/// Gaussian-smoothed white noise with unit sample standard deviation.
fn smooth_noise(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    let radius = (3.0 * SMOOTHING).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * SMOOTHING * SMOOTHING)).exp()).collect();
    let pad = radius as usize;
    let white: Vec<f64> = (0..len + 2 * pad).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = Array1::from_shape_fn(len, |i| kernel.iter().enumerate().map(|(k, w)| w * white[i + k]).sum::<f64>());
    let mean = out.mean().unwrap_or(0.0);
    out -= mean;
    let sd = out.std(0.0);
    if sd > 0.0 {
        out /= sd;
    }
    out
}

/// Unit-norm rows mapping the latents onto the 64 β and 6 pose channels.
fn latent_mixing() -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED);
    let mut m: Array2<f64> = Array2::from_shape_fn((EXP_DIM + 6, LATENT_DIM), |_| StandardNormal.sample(&mut rng));
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

/// White noise band-limited to `[lo, hi]` Hz, unit RMS.
fn band_noise(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| if rms > 0.0 { v / rms } else { 0.0 }).collect()
}

fn interp(series: &Array1<f64>, pos: f64) -> f64 {
    let last = series.len() - 1;
    let pos = pos.clamp(0.0, last as f64);
    let i = (pos.floor() as usize).min(last.saturating_sub(1));
    let f = pos - i as f64;
    if last == 0 {
        series[0]
    } else {
        (1.0 - f) * series[i] + f * series[i + 1]
    }
}

/// A generated clip together with its waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClip {
    pub clip: Clip,
    pub audio: AudioClip,
}

/// Generates one synthetic clip of `duration` seconds; fully determined by
/// `spec`.
pub fn generate_clip_with_audio(id: &str, spec: &StyleGeneratorSpec, duration: f64) -> Result<GeneratedClip> {
    spec.validate()?;
    if !(duration >= MIN_DURATION) || !duration.is_finite() {
        return Err(Error::invalid(format!("clip duration must be at least {MIN_DURATION} s, got {duration}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_motion = (duration * MOTION_FPS).round() as usize;
    let n_samples = (duration * SAMPLE_RATE as f64).round() as usize;
    let syl = syllables(&mut rng, duration);
    let latents: Vec<Array1<f64>> = (0..LATENT_DIM).map(|_| smooth_noise(&mut rng, n_motion)).collect();
    let independent: Vec<Array1<f64>> = (0..EXP_DIM + 6).map(|_| smooth_noise(&mut rng, n_motion)).collect();
    let bands: Vec<Vec<f64>> = BAND_EDGES_HZ.iter().map(|&(lo, hi)| band_noise(&mut rng, n_samples, lo, hi)).collect();

    let samples: Vec<f64> = (0..n_samples)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            let env = envelope(&syl, t) + ENVELOPE_FLOOR;
            let mix: f64 = (0..LATENT_DIM).map(|k| (0.5 * interp(&latents[k], t * MOTION_FPS)).exp() * bands[k][n]).sum();
            let x = (AUDIO_LEVEL * env * mix).clamp(-1.0, 1.0);
            // Quantize as the 16-bit WAV will.
            (x * i16::MAX as f64).round() / i16::MAX as f64
        })
        .collect();
    let audio = AudioClip::new(samples, SAMPLE_RATE)?;
    let features = surrogate_features(&audio, FEATURE_SEED)?.quantized();

    let mixing = latent_mixing();
    let shared = (1.0 - INDEPENDENT_SHARE * INDEPENDENT_SHARE).sqrt();
    let channel = |c: usize, t: usize| -> f64 {
        let z: f64 = (0..LATENT_DIM).map(|k| mixing[[c, k]] * latents[k][t]).sum();
        shared * z + INDEPENDENT_SHARE * independent[c][t]
    };
    let mut beta = Array2::zeros((n_motion, EXP_DIM));
    let mut pose = Array2::zeros((n_motion, POSE_DIM));
    for t in 0..n_motion {
        for j in 0..EXP_DIM {
            beta[[t, j]] = spec.beta_scales[j] * channel(j, t);
        }
        // The mouth opens with the speech envelope plus a little independent noise.
        beta[[t, MOUTH_CHANNEL]] = spec.mouth_gain * envelope(&syl, t as f64 / MOTION_FPS)
            + spec.beta_scales[MOUTH_CHANNEL] * INDEPENDENT_SHARE * independent[MOUTH_CHANNEL][t];
        let r = ROTATION_SCALE * spec.pose_jitter;
        let q = [1.0, r * channel(EXP_DIM, t), r * channel(EXP_DIM + 1, t), r * channel(EXP_DIM + 2, t)];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..4 {
            pose[[t, k]] = q[k] / qn;
        }
        for k in 0..3 {
            pose[[t, 4 + k]] = TRANSLATION_SCALE * spec.pose_jitter * channel(EXP_DIM + 3 + k, t);
        }
    }
    let motion = MotionSeries::new(beta, pose, MOTION_FPS)?.quantized();
    Ok(GeneratedClip {
        clip: Clip::new(id, motion, features)?,
        audio,
    })
}

/// [`generate_clip_with_audio`] without the waveform.
pub fn generate_clip(spec: &StyleGeneratorSpec, duration: f64) -> Result<Clip> {
    Ok(generate_clip_with_audio(&format!("clip-{:016x}", spec.seed), spec, duration)?.clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How corpus clips are assigned to the test split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    #[default]
    AllTrain,
    /// Every clip of the listed spec indices is held out.
    HoldOutSpecs(Vec<usize>),
    /// The last `n` clips of every spec are held out.
    HoldOutClips(usize),
}

impl SplitRule {
    fn split(&self, spec_index: usize, clip_index: usize, clips_per_spec: usize) -> Split {
        let test = match self {
            Self::AllTrain => false,
            Self::HoldOutSpecs(specs) => specs.contains(&spec_index),
            Self::HoldOutClips(n) => clip_index + n >= clips_per_spec,
        };
        if test {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub spec_index: usize,
    pub split: Split,
    /// Clip directory relative to the corpus root.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub duration_s: f64,
    pub clips_per_spec: usize,
    pub split_rule: SplitRule,
    pub specs: Vec<StyleGeneratorSpec>,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(corpus: &Path) -> Result<Self> {
        read_json(&corpus.join(MANIFEST_FILE))
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &ManifestEntry> {
        self.clips.iter().filter(move |e| split.is_none_or(|s| e.split == s))
    }

    /// Loads every clip of `split` (all clips for `None`) in manifest order.
    pub fn load_clips(&self, corpus: &Path, split: Option<Split>) -> Result<Vec<Clip>> {
        self.entries(split).map(|e| Clip::load(&corpus.join(&e.path))).collect()
    }

    /// Clip counts per (spec, split).
    pub fn counts(&self) -> BTreeMap<(usize, Split), usize> {
        let mut m = BTreeMap::new();
        for e in &self.clips {
            *m.entry((e.spec_index, e.split)).or_insert(0) += 1;
        }
        m
    }
}

pub fn clip_id(spec_index: usize, clip_index: usize) -> String {
    format!("s{spec_index:02}_c{clip_index:03}")
}

/// Writes a synthetic corpus: `clips/<id>/` per clip (motion, features,
/// style and `audio.wav`) and a manifest written last.
pub fn build_corpus(
    specs: &[StyleGeneratorSpec],
    clips_per_spec: usize,
    duration: f64,
    split: &SplitRule,
    out: &Path,
) -> Result<Manifest> {
    if specs.is_empty() {
        return Err(Error::invalid("corpus needs at least one style spec"));
    }
    if let SplitRule::HoldOutSpecs(held) = split {
        if let Some(&bad) = held.iter().find(|&&i| i >= specs.len()) {
            return Err(Error::invalid(format!("held-out spec {bad} does not exist")));
        }
    }
    let mut entries = Vec::with_capacity(specs.len() * clips_per_spec);
    for (si, spec) in specs.iter().enumerate() {
        spec.validate()?;
        for ci in 0..clips_per_spec {
            let id = clip_id(si, ci);
            let rel = format!("clips/{id}");
            let dir = out.join(&rel);
            let generated = generate_clip_with_audio(&id, &spec.for_clip(ci), duration)?;
            generated.clip.save(&dir)?;
            generated.audio.write_wav(&dir.join("audio.wav"))?;
            entries.push(ManifestEntry {
                id,
                spec_index: si,
                split: split.split(si, ci, clips_per_spec),
                path: rel,
            });
        }
    }
    let manifest = Manifest {
        duration_s: duration,
        clips_per_spec,
        split_rule: split.clone(),
        specs: specs.to_vec(),
        clips: entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesMeta {
    frames: usize,
    dim: usize,
    fps: f64,
}

fn write_series(dir: &Path, kind: &str, data: &Array2<f64>, fps: f64) -> Result<()> {
    let (frames, dim) = data.dim();
    ContainerWriter::new(kind, SeriesMeta { frames, dim, fps })?
        .f64_as_f32("values", &[frames, dim], data.iter().copied())
        .write(dir)
}

fn read_series(dir: &Path, kind: &str, dim: usize) -> Result<(Array2<f64>, f64)> {
    let c = Container::open(dir, kind)?;
    let meta: SeriesMeta = c.meta()?;
    if meta.dim != dim {
        return Err(Error::dim(format!("{kind} in {} has {} channels, expected {dim}", dir.display(), meta.dim)));
    }
    let data = c.f32_shaped("values", &[meta.frames, dim])?;
    let arr = Array2::from_shape_vec((meta.frames, dim), data.into_iter().map(f64::from).collect()).expect("shape checked");
    Ok((arr, meta.fps))
}

/// Writes a clip as three separate reconstruction files: `beta/`, `pose/`
/// and `features/`.
pub fn export_reconstruction(clip: &Clip, dir: &Path) -> Result<()> {
    write_series(&dir.join("beta"), BETA_KIND, &clip.motion.beta().to_owned(), clip.motion.fps())?;
    write_series(&dir.join("pose"), POSE_KIND, &clip.motion.pose().to_owned(), clip.motion.fps())?;
    clip.features.save(&dir.join("features"))
}

/// Builds a validated clip from separately stored β (T×64), pose (T×7) and
/// audio feature (2T×29) files.
pub fn ingest_reconstruction(id: &str, beta_file: &Path, pose_file: &Path, feature_file: &Path) -> Result<Clip> {
    let (beta, fps_b) = read_series(beta_file, BETA_KIND, EXP_DIM)?;
    let (pose, fps_p) = read_series(pose_file, POSE_KIND, POSE_DIM)?;
    if fps_b != fps_p {
        return Err(Error::Format(format!("β is at {fps_b} fps but pose is at {fps_p} fps")));
    }
    let features = AudioFeatureSequence::load(feature_file)?;
    Clip::new(id, MotionSeries::new(beta, pose, fps_b)?, features)
}

/// Lazily cut LSF training windows over a set of clips.
#[derive(Debug)]
pub struct ClipWindows<'a> {
    clips: &'a [Clip],
    index: Vec<(usize, usize)>,
    in_len: usize,
    out_len: usize,
    offset: usize,
}

impl<'a> ClipWindows<'a> {
    /// Windows start every `stride` audio frames (even); see
    /// [`crate::audio::window_pairs`] for the alignment.
    pub fn new(clips: &'a [Clip], config: &LsfConfig, stride: usize) -> Result<Self> {
        if stride == 0 || stride % 2 != 0 {
            return Err(Error::invalid(format!("stride must be a positive even number of audio frames, got {stride}")));
        }
        let offset = center_offset(config.in_len, config.out_len)?;
        let mut index = Vec::new();
        for (ci, clip) in clips.iter().enumerate() {
            let mut a = 0;
            while a + config.in_len <= clip.features.len() && a / 2 + offset + config.out_len <= clip.motion.len() {
                index.push((ci, a));
                a += stride;
            }
        }
        Ok(Self {
            clips,
            index,
            in_len: config.in_len,
            out_len: config.out_len,
            offset,
        })
    }
}

impl LsfDataset for ClipWindows<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn sample(&self, i: usize) -> Result<LsfSample> {
        let &(ci, a) = self.index.get(i).ok_or_else(|| Error::invalid(format!("window {i} out of range")))?;
        let clip = &self.clips[ci];
        let m = a / 2 + self.offset;
        Ok(LsfSample {
            audio: clip.features.frames().slice(s![a..a + self.in_len, ..]).to_owned(),
            style: clip.style.clone(),
            beta: clip.motion.beta().slice(s![m..m + self.out_len, ..]).to_owned(),
            pose: clip.motion.pose().slice(s![m..m + self.out_len, ..]).to_owned(),
        })
    }
}

/// Procedural face colouring in UV space: skin with brows, eyes and lips.
pub fn procedural_skin(height: usize, width: usize, seed: u64) -> Result<RGBTexture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [f64; 3] = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let blob = |u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64| (-((u - cu) / su).powi(2) - ((v - cv) / sv).powi(2)).exp();
    let data = ndarray::Array3::from_shape_fn((3, height, width), |(c, i, j)| {
        let u = j as f64 / (width - 1) as f64;
        let v = i as f64 / (height - 1) as f64;
        let skin = [0.86, 0.66, 0.55][c] + tint[c] - 0.12 * (v - 0.5).powi(2) - 0.1 * (u - 0.5).powi(2);
        let eyes = blob(u, v, 0.35, 0.43, 0.05, 0.025).max(blob(u, v, 0.65, 0.43, 0.05, 0.025));
        let brows = blob(u, v, 0.35, 0.36, 0.07, 0.012).max(blob(u, v, 0.65, 0.36, 0.07, 0.012));
        let lips = blob(u, v, 0.5, 0.73, 0.09, 0.03);
        let nose = blob(u, v, 0.5, 0.58, 0.03, 0.05);
        let x = skin * (1.0 - eyes) + [0.15, 0.12, 0.1][c] * eyes;
        let x = x * (1.0 - brows) + [0.3, 0.2, 0.15][c] * brows;
        let x = x * (1.0 - lips) + [0.7, 0.25, 0.28][c] * lips;
        let x = x - 0.06 * nose;
        x.clamp(0.0, 1.0) as f32
    });
    RGBTexture::new(data)
}

/// Frames, portrait and textures of the toy render set.
#[derive(Debug, Clone)]
pub struct RenderToySet {
    pub framing: Framing,
    /// Ground-truth colouring the frames are drawn with.
    pub skin: RGBTexture,
    /// Neutral-pose frame of the identity.
    pub portrait: Frame,
    /// Texture extracted from the portrait; the network input.
    pub portrait_texture: RGBTexture,
    pub portrait_uv: UVImage,
    pub params: Vec<FaceParams>,
    pub samples: Vec<RenderSample>,
}

/// Builds `frames` posed renders of the synthetic basis: small head turns,
/// nods and mouth openings, coloured by [`procedural_skin`].
pub fn render_toy_set(basis: &FaceBasis, frames: usize, image_size: usize, texture_size: usize, seed: u64) -> Result<RenderToySet> {
    let framing = Framing::for_image(image_size, image_size);
    let skin = procedural_skin(texture_size, texture_size, seed)?;
    let neutral = FaceParams::neutral();
    let portrait_uv = rasterize_uv(basis, &neutral, image_size, image_size, &framing)?;
    let portrait = sample_rgb(&portrait_uv, &skin)?;
    let portrait_texture = extract_texture(&portrait, basis, &neutral, &framing, texture_size, texture_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7071);
    let mut params = Vec::with_capacity(frames);
    let mut samples = Vec::with_capacity(frames);
    for _ in 0..frames {
        let yaw: f64 = rng.random_range(-0.25..0.25);
        let pitch: f64 = rng.random_range(-0.15..0.15);
        let roll: f64 = rng.random_range(-0.1..0.1);
        let q = nalgebra::UnitQuaternion::from_euler_angles(pitch, yaw, roll);
        let pose = [q.w, q.i, q.j, q.k, rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0];
        let mut beta = Array1::zeros(EXP_DIM);
        beta[MOUTH_CHANNEL] = rng.random_range(0.0..1.5);
        for b in beta.iter_mut().skip(1) {
            *b += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        let p = FaceParams::new(Array1::zeros(crate::face_model::ID_DIM), beta, pose)?;
        let uv = rasterize_uv(basis, &p, image_size, image_size, &framing)?;
        let target = sample_rgb(&uv, &skin)?;
        samples.push(RenderSample {
            uv,
            texture: portrait_texture.clone(),
            target,
        });
        params.push(p);
    }
    Ok(RenderToySet {
        framing,
        skin,
        portrait,
        portrait_texture,
        portrait_uv,
        params,
        samples,
    })
}

/// Per-spec mean style code and RMS distance of codes to that mean.
pub fn style_spread(codes: &[StyleCode]) -> Result<(StyleCode, f64)> {
    if codes.is_empty() {
        return Err(Error::invalid("no style codes"));
    }
    let n = codes.len() as f64;
    let mut mean = Array1::<f64>::zeros(codes[0].values().len());
    for c in codes {
        mean += &c.values();
    }
    mean /= n;
    let mean = StyleCode::new(mean)?;
    let ms = codes.iter().map(|c| c.distance(&mean).powi(2)).sum::<f64>() / n;
    Ok((mean, ms.sqrt()))
}

/// Audio channel 0 at motion rate: every second feature frame.
pub fn energy_at_motion_rate(features: &AudioFeatureSequence) -> Array1<f64> {
    features.frames().column(0).iter().step_by(2).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use crate::audio::{window_pairs, IN_LEN, OUT_LEN};
    use crate::face_model::generate_synthetic_basis;
    use crate::render::masked_mean_abs_error;
    use crate::style::{BETA_STD, BETA_VEL_STD};

    fn corr_at_lag(a: &[f64], b: &[f64], lag: isize) -> f64 {
        let pairs: Vec<(f64, f64)> = (0..a.len() as isize)
            .filter_map(|i| {
                let j = i + lag;
                (j >= 0 && (j as usize) < b.len()).then(|| (a[i as usize], b[j as usize]))
            })
            .collect();
        let n = pairs.len() as f64;
        let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
        let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
        let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn silent_style_gives_zero_code() {
        let clip = generate_clip(&StyleGeneratorSpec::uniform(0.0, 0.0, 0.0, 3), 4.0).unwrap();
        assert!(clip.style().values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn doubling_scales_doubles_code() {
        let spec = StyleGeneratorSpec::uniform(0.5, 0.0, 0.0, 11);
        let a = generate_clip(&spec, 10.0).unwrap();
        let b = generate_clip(&spec.scaled(2.0), 10.0).unwrap();
        for k in BETA_STD.chain(BETA_VEL_STD) {
            let (x, y) = (a.style().values()[k], b.style().values()[k]);
            assert!((y / x - 2.0).abs() / 2.0 <= 0.15, "component {k}: {x} → {y}");
        }
    }

    #[test]
    fn mouth_follows_audio_energy() {
        for seed in 0..3 {
            let clip = generate_clip(&StyleGeneratorSpec::uniform(0.1, 0.5, 1.0, seed), 10.0).unwrap();
            let energy = energy_at_motion_rate(clip.features());
            let mouth: Vec<f64> = clip.motion().beta().column(MOUTH_CHANNEL).to_vec();
            let n = energy.len().min(mouth.len());
            let best = (-5..=5)
                .max_by(|&x, &y| corr_at_lag(&energy.to_vec()[..n], &mouth[..n], x).total_cmp(&corr_at_lag(&energy.to_vec()[..n], &mouth[..n], y)))
                .unwrap();
            assert!(best.abs() <= 1, "peak at lag {best}");
        }
    }

    #[test]
    fn short_duration_rejected() {
        let r = generate_clip(&StyleGeneratorSpec::uniform(1.0, 1.0, 1.0, 0), 1.5);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let mut bad = StyleGeneratorSpec::uniform(1.0, 1.0, 1.0, 0);
        bad.pose_jitter = -1.0;
        assert!(generate_clip(&bad, 3.0).is_err());
    }

    #[test]
    fn clip_durations_are_consistent() {
        for d in [2.0, 3.3, 7.01] {
            let clip = generate_clip(&StyleGeneratorSpec::uniform(1.0, 1.0, 1.0, 5), d).unwrap();
            assert!((clip.features().duration() - clip.motion().duration()).abs() <= DURATION_TOLERANCE);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = StyleGeneratorSpec::uniform(0.7, 1.2, 0.8, 21);
        assert_eq!(generate_clip_with_audio("x", &spec, 3.0).unwrap(), generate_clip_with_audio("x", &spec, 3.0).unwrap());
    }

    #[test]
    fn styles_four_times_apart_separate() {
        let lo = StyleGeneratorSpec::uniform(0.25, 0.25, 0.5, 1);
        let hi = StyleGeneratorSpec::uniform(1.0, 1.0, 0.5, 2);
        let codes = |s: &StyleGeneratorSpec| -> Vec<StyleCode> { (0..5).map(|i| generate_clip(&s.for_clip(i), 6.0).unwrap().style().clone()).collect() };
        let (ma, sa) = style_spread(&codes(&lo)).unwrap();
        let (mb, sb) = style_spread(&codes(&hi)).unwrap();
        assert!(ma.distance(&mb) > 3.0 * sa.max(sb), "{} vs {} / {}", ma.distance(&mb), sa, sb);
    }

    #[test]
    fn corpus_layout_split_and_determinism() {
        let specs: Vec<_> = (0..3).map(|i| StyleGeneratorSpec::uniform(0.5 * (i + 1) as f64, 1.0, 1.0, i as u64)).collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let rule = SplitRule::HoldOutSpecs(vec![2]);
        let m = build_corpus(&specs, 5, 2.0, &rule, a.path()).unwrap();
        assert_eq!(m.clips.len(), 15);
        assert_eq!(Manifest::load(a.path()).unwrap(), m);
        assert!(m.clips.iter().all(|e| (e.split == Split::Test) == (e.spec_index == 2)));
        let train = m.load_clips(a.path(), Some(Split::Train)).unwrap();
        assert_eq!(train.len(), 10);

        build_corpus(&specs, 5, 2.0, &rule, b.path()).unwrap();
        let files = |root: &Path| -> Vec<(PathBuf, Vec<u8>)> {
            let mut out = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                    }
                }
            }
            out.sort();
            out
        };
        assert_eq!(files(a.path()), files(b.path()));

        let per_clip = build_corpus(&specs, 4, 2.0, &SplitRule::HoldOutClips(1), b.path()).unwrap();
        assert_eq!(per_clip.entries(Some(Split::Test)).count(), 3);
        assert!(build_corpus(&[], 4, 2.0, &SplitRule::AllTrain, b.path()).is_err());
    }

    #[test]
    fn reconstruction_round_trip_and_validation() {
        let clip = generate_clip_with_audio("rt", &StyleGeneratorSpec::uniform(0.6, 0.6, 1.0, 8), 3.0).unwrap().clip;
        let dir = tempfile::tempdir().unwrap();
        export_reconstruction(&clip, dir.path()).unwrap();
        let back = ingest_reconstruction("rt", &dir.path().join("beta"), &dir.path().join("pose"), &dir.path().join("features")).unwrap();
        assert_eq!(back, clip);
        let fresh = style_code(back.motion()).unwrap();
        assert!(fresh.distance(back.style()) <= 1e-6);

        let narrow = Array2::<f64>::zeros((75, 63));
        write_series(&dir.path().join("beta63"), BETA_KIND, &narrow, MOTION_FPS).unwrap();
        let r = ingest_reconstruction("x", &dir.path().join("beta63"), &dir.path().join("pose"), &dir.path().join("features"));
        assert!(matches!(r, Err(Error::Dimension(_))));

        let short = Array2::<f64>::zeros((40, EXP_DIM));
        write_series(&dir.path().join("beta_short"), BETA_KIND, &short, MOTION_FPS).unwrap();
        write_series(&dir.path().join("pose_short"), POSE_KIND, &Array2::zeros((40, POSE_DIM)), MOTION_FPS).unwrap();
        let r = ingest_reconstruction("x", &dir.path().join("beta_short"), &dir.path().join("pose_short"), &dir.path().join("features"));
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn clip_container_round_trip_checks_cache() {
        let clip = generate_clip(&StyleGeneratorSpec::uniform(0.6, 0.6, 1.0, 9), 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(clip.id());
        clip.save(&path).unwrap();
        assert_eq!(Clip::load(&path).unwrap(), clip);
        StyleCode::zeros().save(&path.join("style.json")).unwrap();
        assert!(matches!(Clip::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn lazy_windows_match_eager_pairs() {
        let clips: Vec<Clip> = (0..2).map(|i| generate_clip(&StyleGeneratorSpec::uniform(0.5, 0.5, 1.0, i), 4.0).unwrap()).collect();
        let ds = ClipWindows::new(&clips, &LsfConfig::default(), 6).unwrap();
        let mut k = 0;
        for clip in &clips {
            for p in window_pairs(clip.features(), clip.motion(), IN_LEN, OUT_LEN, 6).unwrap() {
                let s = ds.sample(k).unwrap();
                assert_eq!((s.audio, s.beta, s.pose), (p.audio, p.beta, p.pose));
                assert_eq!(&s.style, clip.style());
                k += 1;
            }
        }
        assert_eq!(ds.len(), k);
        assert!(ClipWindows::new(&clips, &LsfConfig::default(), 3).is_err());
    }

    #[test]
    fn toy_texture_round_trip_is_close() {
        let basis = generate_synthetic_basis(0, 2500).unwrap();
        let set = render_toy_set(&basis, 2, 112, 32, 0).unwrap();
        let resampled = sample_rgb(&set.portrait_uv, &set.portrait_texture).unwrap();
        let err = masked_mean_abs_error(&resampled, &set.portrait, set.portrait_uv.mask()).unwrap();
        assert!(err <= 0.05, "round-trip error {err}");
        assert_eq!(set.samples.len(), 2);
        assert!(set.samples.iter().all(|s| s.uv.valid_count() > 1000));
    }
}
