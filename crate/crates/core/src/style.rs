//! Motion-series statistics and style codes.
//!
//! A style code is the concatenation of the population standard deviations
//! of the expression series, its time derivative, and the pose derivative:
//! `σ(β) ⊕ σ(dβ/dt) ⊕ σ(dp/dt)`, 64 + 64 + 7 = 135 values. Derivatives are
//! forward differences scaled by the frame rate.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{read_json, write_json, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::face_model::{EXP_DIM, POSE_DIM};

pub const STYLE_DIM: usize = 2 * EXP_DIM + POSE_DIM;
pub const MOTION_FPS: f64 = 25.0;
pub const MOTION_KIND: &str = "motion_series";

/// Index ranges of the three style-code blocks.
pub const BETA_STD: std::ops::Range<usize> = 0..EXP_DIM;
pub const BETA_VEL_STD: std::ops::Range<usize> = EXP_DIM..2 * EXP_DIM;
pub const POSE_VEL_STD: std::ops::Range<usize> = 2 * EXP_DIM..STYLE_DIM;

/// Per-frame expression (L×64) and pose (L×7) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSeries {
    beta: Array2<f64>,
    pose: Array2<f64>,
    fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MotionMeta {
    frames: usize,
    fps: f64,
    beta_dim: usize,
    pose_dim: usize,
}

impl MotionSeries {
    pub fn new(beta: Array2<f64>, pose: Array2<f64>, fps: f64) -> Result<Self> {
        if beta.ncols() != EXP_DIM {
            return Err(Error::dim(format!("beta series must have {EXP_DIM} columns, got {}", beta.ncols())));
        }
        if pose.ncols() != POSE_DIM {
            return Err(Error::dim(format!("pose series must have {POSE_DIM} columns, got {}", pose.ncols())));
        }
        if beta.nrows() != pose.nrows() {
            return Err(Error::dim(format!(
                "beta and pose series lengths differ: {} vs {}",
                beta.nrows(),
                pose.nrows()
            )));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { beta, pose, fps })
    }

    pub fn len(&self) -> usize {
        self.beta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn beta(&self) -> ArrayView2<'_, f64> {
        self.beta.view()
    }

    pub fn pose(&self) -> ArrayView2<'_, f64> {
        self.pose.view()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>, f64) {
        (self.beta, self.pose, self.fps)
    }

    /// Frames `range` as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            beta: self.beta.slice(s![range.clone(), ..]).to_owned(),
            pose: self.pose.slice(s![range, ..]).to_owned(),
            fps: self.fps,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = MotionMeta {
            frames: self.len(),
            fps: self.fps,
            beta_dim: EXP_DIM,
            pose_dim: POSE_DIM,
        };
        ContainerWriter::new(MOTION_KIND, meta)?
            .f64_as_f32("beta", &[self.len(), EXP_DIM], self.beta.iter().copied())
            .f64_as_f32("pose", &[self.len(), POSE_DIM], self.pose.iter().copied())
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir, MOTION_KIND)?;
        let meta: MotionMeta = c.meta()?;
        if meta.beta_dim != EXP_DIM {
            return Err(Error::Format(format!("beta_dim must be {EXP_DIM}, header declares {}", meta.beta_dim)));
        }
        if meta.pose_dim != POSE_DIM {
            return Err(Error::Format(format!("pose_dim must be {POSE_DIM}, header declares {}", meta.pose_dim)));
        }
        let beta = c.f32_shaped("beta", &[meta.frames, EXP_DIM])?;
        let pose = c.f32_shaped("pose", &[meta.frames, POSE_DIM])?;
        let to_arr = |v: Vec<f32>, cols: usize| {
            Array2::from_shape_vec((meta.frames, cols), v.into_iter().map(f64::from).collect())
                .expect("shape checked above")
        };
        Self::new(to_arr(beta, EXP_DIM), to_arr(pose, POSE_DIM), meta.fps)
    }

    /// Rounds every value to the nearest f32, i.e. the on-disk precision.
    pub fn quantized(mut self) -> Self {
        self.beta.mapv_inplace(|x| x as f32 as f64);
        self.pose.mapv_inplace(|x| x as f32 as f64);
        self
    }
}

/// Forward difference along time: `out[i] = (x[i+1] - x[i]) * fps`.
pub fn derivative(series: ArrayView2<'_, f64>, fps: f64) -> Result<Array2<f64>> {
    let len = series.nrows();
    if len < 2 {
        return Err(Error::invalid(format!("derivative needs at least 2 frames, got {len}")));
    }
    Ok((&series.slice(s![1.., ..]) - &series.slice(s![..len - 1, ..])) * fps)
}

fn column_mean(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("nonempty")
}

fn column_std(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.std_axis(Axis(0), 0.0)
}

fn check_len(m: &MotionSeries) -> Result<()> {
    if m.len() < 3 {
        return Err(Error::invalid(format!("style statistics need at least 3 frames, got {}", m.len())));
    }
    Ok(())
}

/// The 135-dimensional style code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StyleCode(Array1<f64>);

impl TryFrom<Vec<f64>> for StyleCode {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }
}

impl From<StyleCode> for Vec<f64> {
    fn from(code: StyleCode) -> Self {
        code.0.to_vec()
    }
}

impl StyleCode {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.len() != STYLE_DIM {
            return Err(Error::dim(format!("style code must have {STYLE_DIM} values, got {}", values.len())));
        }
        if values.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("style code components must be finite and nonnegative"));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(Array1::zeros(STYLE_DIM))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn block_norm(&self, block: std::ops::Range<usize>) -> f64 {
        let b = self.0.slice(s![block]);
        b.dot(&b).sqrt()
    }

    /// L2 norm of the σ(dp/dt) block.
    pub fn pose_norm(&self) -> f64 {
        self.block_norm(POSE_VEL_STD)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let d = &self.0 - &other.0;
        d.dot(&d).sqrt()
    }

    /// Writes the code as a JSON array of 135 numbers.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn style_code(m: &MotionSeries) -> Result<StyleCode> {
    check_len(m)?;
    let dbeta = derivative(m.beta(), m.fps)?;
    let dpose = derivative(m.pose(), m.fps)?;
    let values = concatenate![
        Axis(0),
        column_std(m.beta()),
        column_std(dbeta.view()),
        column_std(dpose.view())
    ];
    Ok(StyleCode(values))
}

/// Means and population standard deviations of β, p and their derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStats {
    pub mean_beta: Array1<f64>,
    pub mean_pose: Array1<f64>,
    pub mean_dbeta: Array1<f64>,
    pub mean_dpose: Array1<f64>,
    pub std_beta: Array1<f64>,
    pub std_pose: Array1<f64>,
    pub std_dbeta: Array1<f64>,
    pub std_dpose: Array1<f64>,
}

impl ObservationStats {
    /// `(name, vector)` pairs in a fixed order, for reporting.
    pub fn named(&self) -> [(&'static str, &Array1<f64>); 8] {
        [
            ("mean_beta", &self.mean_beta),
            ("mean_pose", &self.mean_pose),
            ("mean_dbeta", &self.mean_dbeta),
            ("mean_dpose", &self.mean_dpose),
            ("std_beta", &self.std_beta),
            ("std_pose", &self.std_pose),
            ("std_dbeta", &self.std_dbeta),
            ("std_dpose", &self.std_dpose),
        ]
    }
}

pub fn observation_stats(m: &MotionSeries) -> Result<ObservationStats> {
    check_len(m)?;
    let dbeta = derivative(m.beta(), m.fps)?;
    let dpose = derivative(m.pose(), m.fps)?;
    Ok(ObservationStats {
        mean_beta: column_mean(m.beta()),
        mean_pose: column_mean(m.pose()),
        mean_dbeta: column_mean(dbeta.view()),
        mean_dpose: column_mean(dpose.view()),
        std_beta: column_std(m.beta()),
        std_pose: column_std(m.pose()),
        std_dbeta: column_std(dbeta.view()),
        std_dpose: column_std(dpose.view()),
    })
}

/// `(1 - lam)·a + lam·b`.
pub fn interpolate(a: &StyleCode, b: &StyleCode, lam: f64) -> Result<StyleCode> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("interpolation weight must lie in [0,1], got {lam}")));
    }
    if lam == 0.0 {
        return Ok(a.clone());
    }
    if lam == 1.0 {
        return Ok(b.clone());
    }
    Ok(StyleCode(&a.0 * (1.0 - lam) + &b.0 * lam))
}

/// Scores of the codes on their top two principal components.
///
/// The sign of each component is fixed so its largest-magnitude loading is
/// positive.
pub fn project_styles_2d(codes: &[StyleCode]) -> Result<Vec<[f64; 2]>> {
    if codes.len() < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 codes, got {}", codes.len())));
    }
    let n = codes.len();
    let mut m = DMatrix::<f64>::zeros(n, STYLE_DIM);
    for (i, c) in codes.iter().enumerate() {
        for (j, &v) in c.0.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    // Eigenvectors of the n×n Gram matrix give the scores directly and stay
    // well defined when the codes are rank deficient.
    let eig = (&m * m.transpose()).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = vec![[0.0; 2]; n];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let u = eig.eigenvectors.column(k);
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        let loadings = m.transpose() * u;
        let pivot = loadings.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i][slot] = sign * scale * u[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_series(seed: u64, len: usize) -> MotionSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |cols| Array2::from_shape_fn((len, cols), |_| StandardNormal.sample(&mut rng));
        let beta = gen(EXP_DIM);
        let pose = gen(POSE_DIM);
        MotionSeries::new(beta, pose, MOTION_FPS).unwrap()
    }

    /// Independent elementwise forward difference.
    fn diff_oracle(x: &Array2<f64>, fps: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..x.nrows() - 1 {
            let mut row = Vec::new();
            for j in 0..x.ncols() {
                row.push((x[[i + 1, j]] - x[[i, j]]) * fps);
            }
            out.push(row);
        }
        out
    }

    /// Two-pass population mean / std with explicit loops.
    fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = rows.len() as f64;
        let cols = rows[0].len();
        let mut mean = vec![0.0; cols];
        for r in rows {
            for j in 0..cols {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for r in rows {
            for j in 0..cols {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
    }

    fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
        x.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn max_diff(a: &[f64], b: ArrayView1<'_, f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let x = Array2::from_elem((10, 3), 4.2);
        assert!(derivative(x.view(), 25.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_of_ramp_is_slope() {
        let fps = 25.0;
        let c = [0.5, -2.0, 3.25];
        let x = Array2::from_shape_fn((12, 3), |(t, j)| c[j] * t as f64 / fps);
        let d = derivative(x.view(), fps).unwrap();
        for row in d.rows() {
            for j in 0..3 {
                assert!((row[j] - c[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_matches_elementwise_oracle() {
        let m = random_series(11, 40);
        let d = derivative(m.beta(), m.fps()).unwrap();
        let o = diff_oracle(&m.beta.to_owned(), m.fps());
        for (i, row) in o.iter().enumerate() {
            assert!(max_diff(row, d.row(i)) < 1e-7);
        }
        assert!(derivative(m.beta().slice(s![0..1, ..]), 25.0).is_err());
    }

    #[test]
    fn constant_motion_has_zero_code() {
        let m = MotionSeries::new(Array2::from_elem((20, EXP_DIM), 0.3), Array2::from_elem((20, POSE_DIM), -1.0), 25.0)
            .unwrap();
        let code = style_code(&m).unwrap();
        assert_eq!(code.values().len(), STYLE_DIM);
        assert!(code.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_series_is_rejected() {
        let m = random_series(1, 2);
        assert!(matches!(style_code(&m), Err(Error::InvalidArgument(_))));
        assert!(observation_stats(&m).is_err());
    }

    #[test]
    fn beta_scaling_scales_first_two_blocks() {
        let m = random_series(2, 50);
        let c = 2.5;
        let scaled = MotionSeries::new(&m.beta * c, m.pose.clone(), m.fps).unwrap();
        let a = style_code(&m).unwrap();
        let b = style_code(&scaled).unwrap();
        for i in 0..2 * EXP_DIM {
            assert!((b.0[i] - c * a.0[i]).abs() < 1e-7);
        }
        for i in POSE_VEL_STD {
            assert_eq!(a.0[i], b.0[i]);
        }
    }

    #[test]
    fn observation_stats_match_two_pass_oracle() {
        let m = random_series(5, 30);
        let st = observation_stats(&m).unwrap();
        let db = derivative(m.beta(), m.fps).unwrap();
        let dp = derivative(m.pose(), m.fps).unwrap();
        let checks = [
            (rows(&m.beta), &st.mean_beta, &st.std_beta),
            (rows(&m.pose), &st.mean_pose, &st.std_pose),
            (rows(&db), &st.mean_dbeta, &st.std_dbeta),
            (rows(&dp), &st.mean_dpose, &st.std_dpose),
        ];
        for (data, mean, std) in checks {
            let (om, os) = two_pass(&data);
            assert!(max_diff(&om, mean.view()) < 1e-7);
            assert!(max_diff(&os, std.view()) < 1e-7);
        }
        let code = style_code(&m).unwrap();
        assert_eq!(code.0.slice(s![BETA_STD]), st.std_beta);
        assert_eq!(code.0.slice(s![BETA_VEL_STD]), st.std_dbeta);
        assert_eq!(code.0.slice(s![POSE_VEL_STD]), st.std_dpose);
    }

    #[test]
    fn mean_of_constant_series_is_the_constant() {
        let m = MotionSeries::new(Array2::from_elem((5, EXP_DIM), 1.5), Array2::from_elem((5, POSE_DIM), 0.25), 25.0)
            .unwrap();
        let st = observation_stats(&m).unwrap();
        assert!(st.mean_beta.iter().all(|&v| v == 1.5));
        assert!(st.mean_pose.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let a = style_code(&random_series(1, 20)).unwrap();
        let b = style_code(&random_series(2, 20)).unwrap();
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let same = interpolate(&a, &a, 0.37).unwrap();
        assert!(max_diff(&a.0.to_vec(), same.values()) < 1e-12);
        let half = interpolate(&StyleCode::zeros(), &b, 0.5).unwrap();
        assert!(max_diff(&(&b.0 / 2.0).to_vec(), half.values()) < 1e-15);
        assert!(interpolate(&a, &b, 1.01).is_err());
        assert!(interpolate(&a, &b, -0.1).is_err());
    }

    #[test]
    fn pca_of_collinear_codes_has_flat_second_axis() {
        let dir = style_code(&random_series(3, 20)).unwrap();
        let codes: Vec<StyleCode> = (1..6).map(|k| StyleCode(&dir.0 * k as f64)).collect();
        let p = project_styles_2d(&codes).unwrap();
        let spread = p.iter().map(|xy| xy[0].abs()).fold(0.0, f64::max);
        assert!(p.iter().all(|xy| xy[1].abs() < 1e-6 * spread));
        assert!(project_styles_2d(&codes[..2]).is_err());
    }

    #[test]
    fn pca_contracts_distances_and_orders_variance() {
        let codes: Vec<StyleCode> = (0..8).map(|k| style_code(&random_series(100 + k, 15)).unwrap()).collect();
        let p = project_styles_2d(&codes).unwrap();
        for i in 0..codes.len() {
            for j in 0..codes.len() {
                let d2 = ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt();
                assert!(d2 <= codes[i].distance(&codes[j]) + 1e-9);
            }
        }
        let var = |k: usize| p.iter().map(|xy| xy[k] * xy[k]).sum::<f64>();
        assert!(var(0) >= var(1));
    }

    #[test]
    fn style_file_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.json");
        let code = style_code(&random_series(4, 20)).unwrap();
        code.save(&path).unwrap();
        assert_eq!(StyleCode::load(&path).unwrap(), code);
        std::fs::write(&path, "[1.0, 2.0]").unwrap();
        assert!(StyleCode::load(&path).is_err());
    }

    #[test]
    fn motion_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_series(8, 12).quantized();
        m.save(dir.path()).unwrap();
        assert_eq!(MotionSeries::load(dir.path()).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn code_is_offset_and_reversal_invariant(seed in 0u64..1000, len in 3usize..40, off in -5.0f64..5.0) {
            let m = random_series(seed, len);
            let base = style_code(&m).unwrap();
            let shifted = MotionSeries::new(&m.beta + off, &m.pose + off, m.fps).unwrap();
            let rev = MotionSeries::new(
                m.beta.slice(s![..;-1, ..]).to_owned(),
                m.pose.slice(s![..;-1, ..]).to_owned(),
                m.fps,
            ).unwrap();
            for other in [style_code(&shifted).unwrap(), style_code(&rev).unwrap()] {
                prop_assert!(max_diff(&base.0.to_vec(), other.values()) < 1e-7);
            }
            prop_assert!(base.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn interpolation_is_symmetric(seed in 0u64..1000, lam in 0.0f64..=1.0) {
            let a = style_code(&random_series(seed, 10)).unwrap();
            let b = style_code(&random_series(seed + 1, 10)).unwrap();
            let sum = &interpolate(&a, &b, lam).unwrap().0 + &interpolate(&b, &a, lam).unwrap().0;
            let want = &a.0 + &b.0;
            prop_assert!(max_diff(&want.to_vec(), sum.view()) < 1e-12);
        }

        #[test]
        fn self_concatenation_with_closed_seam_keeps_code(seed in 0u64..1000, len in 4usize..30) {
            // Make the first frame equal the last so the seam difference is zero.
            let mut m = random_series(seed, len);
            let first_b = m.beta.row(0).to_owned();
            let first_p = m.pose.row(0).to_owned();
            m.beta.row_mut(len - 1).assign(&first_b);
            m.pose.row_mut(len - 1).assign(&first_p);
            let doubled = MotionSeries::new(
                concatenate![Axis(0), m.beta.slice(s![..len - 1, ..]), m.beta.view()],
                concatenate![Axis(0), m.pose.slice(s![..len - 1, ..]), m.pose.view()],
                m.fps,
            ).unwrap();
            let a = style_code(&m).unwrap();
            let b = style_code(&doubled).unwrap();
            // β itself gains one extra copy of the seam frame, so only the
            // derivative blocks are compared exactly.
            prop_assert!(max_diff(&a.0.slice(s![EXP_DIM..]).to_vec(), b.0.slice(s![EXP_DIM..])) < 1e-9);

            // Plain repetition leaves the β standard deviations unchanged.
            let twice = MotionSeries::new(
                concatenate![Axis(0), m.beta.view(), m.beta.view()],
                concatenate![Axis(0), m.pose.view(), m.pose.view()],
                m.fps,
            ).unwrap();
            let c = style_code(&twice).unwrap();
            prop_assert!(max_diff(&a.0.slice(s![BETA_STD]).to_vec(), c.0.slice(s![BETA_STD])) < 1e-9);
        }
    }
}
