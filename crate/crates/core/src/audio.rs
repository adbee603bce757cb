//! Per-frame audio driving features at 50 fps.
//!
//! Real ASR-derived features are ingested with [`AudioFeatureSequence::load`].
//! For self-contained experiments [`surrogate_features`] derives 29 channels
//! from raw audio: channel 0 is the frame log-energy envelope, channels 1..29
//! are log band energies passed through a seeded orthogonal mixing matrix.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::face_model::{EXP_DIM, POSE_DIM};
use crate::style::MotionSeries;

pub const AUDIO_DIM: usize = 29;
pub const AUDIO_FPS: f64 = 50.0;
pub const FEATURES_KIND: &str = "audio_features";

/// Default input/output window lengths (audio frames / motion frames).
pub const IN_LEN: usize = 80;
pub const OUT_LEN: usize = 32;

const ENERGY_FLOOR: f64 = 1e-8;
const NUM_BANDS: usize = AUDIO_DIM - 1;
const BAND_LOW_HZ: f64 = 50.0;
const BAND_HIGH_HZ: f64 = 8000.0;

/// Log-energy on a compressed scale: silence maps to -1, full-scale noise to about 1.
fn log_energy(e: f64) -> f64 {
    (e + ENERGY_FLOOR).log10() / 4.0 + 1.0
}

/// Value of channel 0 for a silent frame.
pub fn energy_floor_value() -> f64 {
    log_energy(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio clip is empty"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "{}: expected mono 16-bit PCM, found {} channel(s), {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| wav_error(path, e))?;
        }
        w.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// (frames × 29) driving features at 50 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    frames: Array2<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureMeta {
    frames: usize,
    dim: usize,
    fps: f64,
    duration_s: f64,
}

impl AudioFeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.ncols() != AUDIO_DIM {
            return Err(Error::Format(format!(
                "audio features must have {AUDIO_DIM} channels, got {}",
                frames.ncols()
            )));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / AUDIO_FPS
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn quantized(mut self) -> Self {
        self.frames.mapv_inplace(|x| x as f32 as f64);
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = FeatureMeta {
            frames: self.len(),
            dim: AUDIO_DIM,
            fps: AUDIO_FPS,
            duration_s: self.duration(),
        };
        ContainerWriter::new(FEATURES_KIND, meta)?
            .f64_as_f32("features", &[self.len(), AUDIO_DIM], self.frames.iter().copied())
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir, FEATURES_KIND)?;
        let meta: FeatureMeta = c.meta()?;
        if meta.dim != AUDIO_DIM {
            return Err(Error::Format(format!("feature dim must be {AUDIO_DIM}, header declares {}", meta.dim)));
        }
        if meta.fps != AUDIO_FPS {
            return Err(Error::Format(format!("feature fps must be {AUDIO_FPS}, header declares {}", meta.fps)));
        }
        if (meta.frames as f64 - meta.duration_s * AUDIO_FPS).abs() > 1.0 {
            return Err(Error::Format(format!(
                "{} frames inconsistent with declared duration {} s",
                meta.frames, meta.duration_s
            )));
        }
        let (shape, data) = c.f32("features")?;
        if shape != [meta.frames, AUDIO_DIM] {
            return Err(Error::Format(format!("features blob has shape {shape:?}, expected [{}, {AUDIO_DIM}]", meta.frames)));
        }
        let frames = Array2::from_shape_vec((meta.frames, AUDIO_DIM), data.into_iter().map(f64::from).collect())
            .expect("shape checked above");
        Self::new(frames)
    }
}

/// Seeded 28×28 orthogonal mixing matrix.
fn mixing_matrix(seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a0d1_0f3a_7c21);
    let g = DMatrix::from_fn(NUM_BANDS, NUM_BANDS, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the factorisation is unique.
    let mut q = q;
    for j in 0..NUM_BANDS {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Band edges (Hz), log-spaced.
fn band_edges(sample_rate: f64) -> Vec<f64> {
    let high = BAND_HIGH_HZ.min(sample_rate / 2.0);
    let low = BAND_LOW_HZ.min(high / 2.0);
    (0..=NUM_BANDS)
        .map(|b| low * (high / low).powf(b as f64 / NUM_BANDS as f64))
        .collect()
}

/// Deterministic stand-in for ASR features.
///
/// Frame `i` is centred at `i / 50` s and uses a Hann window spanning two
/// hops. Silence gives channel 0 = [`energy_floor_value`].
pub fn surrogate_features(clip: &AudioClip, seed: u64) -> Result<AudioFeatureSequence> {
    if clip.duration() < 0.1 {
        return Err(Error::invalid(format!("clip must last at least 0.1 s, got {:.3} s", clip.duration())));
    }
    let sr = clip.sample_rate as f64;
    let hop = sr / AUDIO_FPS;
    let win = (2.0 * hop).round().max(2.0) as usize;
    let n_frames = (clip.samples.len() as f64 * AUDIO_FPS / sr).floor() as usize;
    let hann: Vec<f64> = (0..win)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (k as f64 + 0.5) / win as f64).cos())
        .collect();
    let wsum: f64 = hann.iter().map(|w| w * w).sum();

    let edges = band_edges(sr);
    let bin_hz = sr / win as f64;
    let bands: Vec<(usize, usize)> = edges
        .windows(2)
        .map(|e| {
            let lo = (e[0] / bin_hz).floor() as usize;
            let hi = ((e[1] / bin_hz).ceil() as usize).max(lo + 1).min(win / 2 + 1);
            (lo.min(hi - 1), hi)
        })
        .collect();
    let mix = mixing_matrix(seed);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = Array2::zeros((n_frames, AUDIO_DIM));
    let mut band_log = nalgebra::DVector::<f64>::zeros(NUM_BANDS);
    for i in 0..n_frames {
        let start = (i as f64 * hop - win as f64 / 2.0).round() as isize;
        let mut energy = 0.0;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = start + k as isize;
            let x = if idx >= 0 && (idx as usize) < clip.samples.len() {
                clip.samples[idx as usize]
            } else {
                0.0
            };
            let v = x * hann[k];
            energy += v * v;
            *slot = Complex::new(v, 0.0);
        }
        out[[i, 0]] = log_energy(energy / wsum);
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / (hi - lo) as f64;
            band_log[b] = log_energy(p / wsum);
        }
        let mixed = &mix * &band_log;
        for b in 0..NUM_BANDS {
            out[[i, 1 + b]] = mixed[b];
        }
    }
    AudioFeatureSequence::new(out)
}

/// First motion frame under an audio window starting at audio frame 0,
/// when the two windows share their centre in wall-clock time.
pub fn center_offset(in_len: usize, out_len: usize) -> Result<usize> {
    if in_len % 4 != 0 || out_len % 2 != 0 || out_len == 0 || out_len > in_len / 2 {
        return Err(Error::invalid(format!(
            "window lengths in={in_len}, out={out_len} cannot be centre-aligned at a 2:1 frame-rate ratio"
        )));
    }
    Ok(in_len / 4 - out_len / 2)
}

/// One training example cut from a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub audio_start: usize,
    pub motion_start: usize,
    pub audio: Array2<f64>,
    pub beta: Array2<f64>,
    pub pose: Array2<f64>,
}

/// Cuts aligned (audio window, motion window) pairs.
///
/// Windows start at audio frames `0, stride, 2·stride, …`; the motion target
/// for an audio window at `a` starts at `a/2 + center_offset`. Windows whose
/// target would run past either series are dropped.
pub fn window_pairs(
    features: &AudioFeatureSequence,
    motion: &MotionSeries,
    in_len: usize,
    out_len: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    if (motion.fps() * 2.0 - AUDIO_FPS).abs() > 1e-9 {
        return Err(Error::invalid(format!("audio fps must be twice motion fps, motion fps is {}", motion.fps())));
    }
    if stride == 0 || stride % 2 != 0 {
        return Err(Error::invalid(format!("stride must be a positive even number of audio frames, got {stride}")));
    }
    let offset = center_offset(in_len, out_len)?;
    let mut pairs = Vec::new();
    let mut a = 0;
    while a + in_len <= features.len() && a / 2 + offset + out_len <= motion.len() {
        let m = a / 2 + offset;
        pairs.push(WindowPair {
            audio_start: a,
            motion_start: m,
            audio: features.frames.slice(s![a..a + in_len, ..]).to_owned(),
            beta: motion.beta().slice(s![m..m + out_len, ..]).to_owned(),
            pose: motion.pose().slice(s![m..m + out_len, ..]).to_owned(),
        });
        a += stride;
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "inputs too short for one window: {} audio frames, {} motion frames",
            features.len(),
            motion.len()
        )));
    }
    debug_assert!(pairs.iter().all(|p| p.beta.dim() == (out_len, EXP_DIM) && p.pose.dim() == (out_len, POSE_DIM)));
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style::MOTION_FPS;

    fn noise_clip(seconds: f64, seed: u64) -> AudioClip {
        let sr = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n).map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        AudioClip::new(samples, sr).unwrap()
    }

    fn ramp_motion(len: usize) -> MotionSeries {
        let beta = Array2::from_shape_fn((len, EXP_DIM), |(t, j)| (t * 100 + j) as f64);
        let pose = Array2::from_shape_fn((len, POSE_DIM), |(t, j)| (t * 10 + j) as f64);
        MotionSeries::new(beta, pose, MOTION_FPS).unwrap()
    }

    fn flat_features(len: usize) -> AudioFeatureSequence {
        AudioFeatureSequence::new(Array2::from_shape_fn((len, AUDIO_DIM), |(t, _)| t as f64)).unwrap()
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let clip = AudioClip::new(vec![0.0; 8000], 16_000).unwrap();
        let f = surrogate_features(&clip, 1).unwrap();
        assert_eq!(f.len(), 25);
        assert!(f.frames().column(0).iter().all(|&v| v == energy_floor_value()));
    }

    #[test]
    fn surrogate_is_deterministic_and_seeded() {
        let clip = noise_clip(1.0, 4);
        let a = surrogate_features(&clip, 9).unwrap();
        assert_eq!(a, surrogate_features(&clip, 9).unwrap());
        let b = surrogate_features(&clip, 10).unwrap();
        assert_eq!(a.frames().column(0), b.frames().column(0));
        assert_ne!(a, b);
        assert_eq!(a.frames().ncols(), AUDIO_DIM);
    }

    #[test]
    fn click_peaks_at_frame_fifty() {
        let mut samples = vec![0.0; 32_000];
        samples[16_000] = 0.9;
        let f = surrogate_features(&AudioClip::new(samples, 16_000).unwrap(), 0).unwrap();
        let ch0 = f.frames().column(0).to_vec();
        let (argmax, _) = ch0.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!((49..=51).contains(&argmax), "argmax {argmax}");
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 1000], 16_000).unwrap();
        assert!(matches!(surrogate_features(&clip, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn feature_container_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let f = surrogate_features(&noise_clip(10.0, 1), 3).unwrap().quantized();
        assert_eq!(f.len(), 500);
        f.save(dir.path()).unwrap();
        assert_eq!(AudioFeatureSequence::load(dir.path()).unwrap(), f);

        let bad = tempfile::tempdir().unwrap();
        ContainerWriter::new(FEATURES_KIND, FeatureMeta { frames: 4, dim: 30, fps: 50.0, duration_s: 0.08 })
            .unwrap()
            .f32("features", &[4, 30], vec![0.0; 120])
            .write(bad.path())
            .unwrap();
        assert!(matches!(AudioFeatureSequence::load(bad.path()), Err(Error::Format(_))));
        assert!(AudioFeatureSequence::new(Array2::zeros((4, 30))).is_err());
    }

    #[test]
    fn single_window_is_centre_aligned() {
        // 80 audio frames span 1.6 s with centre 0.8 s = motion frame 20;
        // 32 frames centred there are frames 4..=35.
        let pairs = window_pairs(&flat_features(80), &ramp_motion(40), IN_LEN, OUT_LEN, 2).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].motion_start, 4);
        assert_eq!(pairs[0].beta[[0, 0]], 400.0);
        assert_eq!(pairs[0].beta[[31, 0]], 3500.0);
    }

    #[test]
    fn stride_of_full_length_gives_one_window() {
        let pairs = window_pairs(&flat_features(160), &ramp_motion(80), IN_LEN, OUT_LEN, 160).unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn windows_never_overrun_motion() {
        for motion_len in [36, 40, 55, 80] {
            let pairs = window_pairs(&flat_features(200), &ramp_motion(motion_len), IN_LEN, OUT_LEN, 4).unwrap();
            for p in &pairs {
                assert_eq!(p.beta.nrows(), OUT_LEN);
                assert!(p.motion_start + OUT_LEN <= motion_len);
                assert!(p.audio_start + IN_LEN <= 200);
            }
        }
        assert!(window_pairs(&flat_features(79), &ramp_motion(40), IN_LEN, OUT_LEN, 2).is_err());
        assert!(window_pairs(&flat_features(80), &ramp_motion(35), IN_LEN, OUT_LEN, 2).is_err());
        assert!(window_pairs(&flat_features(80), &ramp_motion(40), IN_LEN, OUT_LEN, 3).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.0, 0.5, -0.5, 0.25], 16_000).unwrap();
        clip.write_wav(&path).unwrap();
        let back = AudioClip::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
