//! Affine 3D morphable face model: mean shape plus identity and expression
//! PCA bases, a 7-dof rigid pose, and orthographic projection.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};

pub const ID_DIM: usize = 80;
pub const EXP_DIM: usize = 64;
/// Quaternion (w, x, y, z) followed by translation (x, y, z).
pub const POSE_DIM: usize = 7;

/// Expression channel that opens the mouth in synthetic bases.
pub const MOUTH_CHANNEL: usize = 0;

pub const BASIS_KIND: &str = "face_basis";

#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    mean_shape: Array2<f64>,
    id_basis: Array3<f64>,
    exp_basis: Array3<f64>,
    vertex_uv: Array2<f64>,
    triangles: Vec<[usize; 3]>,
    lip_upper: usize,
    lip_lower: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisMeta {
    vertices: usize,
    faces: usize,
    id_dim: usize,
    exp_dim: usize,
    lip_upper_index: usize,
    lip_lower_index: usize,
}

impl FaceBasis {
    pub fn new(
        mean_shape: Array2<f64>,
        id_basis: Array3<f64>,
        exp_basis: Array3<f64>,
        vertex_uv: Array2<f64>,
        triangles: Vec<[usize; 3]>,
        lip_upper: usize,
        lip_lower: usize,
    ) -> Result<Self> {
        let n = mean_shape.nrows();
        if n < 4 {
            return Err(Error::invalid(format!("face basis needs at least 4 vertices, got {n}")));
        }
        if mean_shape.ncols() != 3 {
            return Err(Error::dim(format!("mean_shape must be N×3, got {:?}", mean_shape.dim())));
        }
        if id_basis.dim() != (n, 3, ID_DIM) {
            return Err(Error::dim(format!("id_basis must be {n}×3×{ID_DIM}, got {:?}", id_basis.dim())));
        }
        if exp_basis.dim() != (n, 3, EXP_DIM) {
            return Err(Error::dim(format!("exp_basis must be {n}×3×{EXP_DIM}, got {:?}", exp_basis.dim())));
        }
        if vertex_uv.dim() != (n, 2) {
            return Err(Error::dim(format!("vertex_uv must be {n}×2, got {:?}", vertex_uv.dim())));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if vertex_uv.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid("vertex UV coordinates must lie in [0,1]"));
        }
        let finite = mean_shape.iter().chain(id_basis.iter()).chain(exp_basis.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("basis tensors must be finite"));
        }
        if lip_upper >= n || lip_lower >= n {
            return Err(Error::invalid(format!("lip indices ({lip_upper}, {lip_lower}) out of range")));
        }
        Ok(Self {
            mean_shape,
            id_basis,
            exp_basis,
            vertex_uv,
            triangles,
            lip_upper,
            lip_lower,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.nrows()
    }

    pub fn mean_shape(&self) -> ArrayView2<'_, f64> {
        self.mean_shape.view()
    }

    pub fn id_basis(&self) -> &Array3<f64> {
        &self.id_basis
    }

    pub fn exp_basis(&self) -> &Array3<f64> {
        &self.exp_basis
    }

    pub fn vertex_uv(&self) -> ArrayView2<'_, f64> {
        self.vertex_uv.view()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn lip_indices(&self) -> (usize, usize) {
        (self.lip_upper, self.lip_lower)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.num_vertices();
        let meta = BasisMeta {
            vertices: n,
            faces: self.triangles.len(),
            id_dim: ID_DIM,
            exp_dim: EXP_DIM,
            lip_upper_index: self.lip_upper,
            lip_lower_index: self.lip_lower,
        };
        let tris = self.triangles.iter().flatten().map(|&i| i as i32).collect();
        ContainerWriter::new(BASIS_KIND, meta)?
            .f64_as_f32("mean_shape", &[n, 3], self.mean_shape.iter().copied())
            .f64_as_f32("id_basis", &[n, 3, ID_DIM], self.id_basis.iter().copied())
            .f64_as_f32("exp_basis", &[n, 3, EXP_DIM], self.exp_basis.iter().copied())
            .f64_as_f32("vertex_uv", &[n, 2], self.vertex_uv.iter().copied())
            .i32("triangles", &[self.triangles.len(), 3], tris)
            .write(dir)
    }
}

/// Loads a basis from a container directory.
pub fn load_basis(dir: &Path) -> Result<FaceBasis> {
    let c = Container::open(dir, BASIS_KIND)?;
    let meta: BasisMeta = c.meta()?;
    if meta.id_dim != ID_DIM {
        return Err(Error::dim(format!("id_dim must be {ID_DIM}, header declares {}", meta.id_dim)));
    }
    if meta.exp_dim != EXP_DIM {
        return Err(Error::dim(format!("exp_dim must be {EXP_DIM}, header declares {}", meta.exp_dim)));
    }
    let n = meta.vertices;
    let to_f64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    let mean = c.f32_shaped("mean_shape", &[n, 3])?;
    let id = c.f32_shaped("id_basis", &[n, 3, ID_DIM])?;
    let exp = c.f32_shaped("exp_basis", &[n, 3, EXP_DIM])?;
    let uv = c.f32_shaped("vertex_uv", &[n, 2])?;
    let (tri_shape, tris) = c.i32("triangles")?;
    if tri_shape != [meta.faces, 3] {
        return Err(Error::dim(format!("triangles: expected [{}, 3], found {tri_shape:?}", meta.faces)));
    }
    let mut triangles = Vec::with_capacity(meta.faces);
    for t in tris.chunks_exact(3) {
        if t.iter().any(|&i| i < 0) {
            return Err(Error::parse("triangles", format!("negative vertex index in {t:?}")));
        }
        triangles.push([t[0] as usize, t[1] as usize, t[2] as usize]);
    }
    let shape_err = |e: ndarray::ShapeError| Error::dim(e.to_string());
    FaceBasis::new(
        Array2::from_shape_vec((n, 3), to_f64(mean)).map_err(shape_err)?,
        Array3::from_shape_vec((n, 3, ID_DIM), to_f64(id)).map_err(shape_err)?,
        Array3::from_shape_vec((n, 3, EXP_DIM), to_f64(exp)).map_err(shape_err)?,
        Array2::from_shape_vec((n, 2), to_f64(uv)).map_err(shape_err)?,
        triangles,
        meta.lip_upper_index,
        meta.lip_lower_index,
    )
}

/// Identity, expression and pose coefficients for a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    alpha: Array1<f64>,
    beta: Array1<f64>,
    pose: [f64; POSE_DIM],
}

impl FaceParams {
    pub fn new(alpha: Array1<f64>, beta: Array1<f64>, pose: [f64; POSE_DIM]) -> Result<Self> {
        if alpha.len() != ID_DIM {
            return Err(Error::dim(format!("alpha must have length {ID_DIM}, got {}", alpha.len())));
        }
        if beta.len() != EXP_DIM {
            return Err(Error::dim(format!("beta must have length {EXP_DIM}, got {}", beta.len())));
        }
        quaternion_norm(&pose)?;
        Ok(Self { alpha, beta, pose })
    }

    /// Zero identity and expression, identity rotation, zero translation.
    pub fn neutral() -> Self {
        Self {
            alpha: Array1::zeros(ID_DIM),
            beta: Array1::zeros(EXP_DIM),
            pose: IDENTITY_POSE,
        }
    }

    /// Builds params from one frame of a motion series (zero identity).
    pub fn from_frame(beta: ArrayView1<'_, f64>, pose: ArrayView1<'_, f64>) -> Result<Self> {
        if pose.len() != POSE_DIM {
            return Err(Error::dim(format!("pose must have length {POSE_DIM}, got {}", pose.len())));
        }
        let mut p = [0.0; POSE_DIM];
        p.iter_mut().zip(pose.iter()).for_each(|(d, s)| *d = *s);
        Self::new(Array1::zeros(ID_DIM), beta.to_owned(), p)
    }

    pub fn alpha(&self) -> ArrayView1<'_, f64> {
        self.alpha.view()
    }

    pub fn beta(&self) -> ArrayView1<'_, f64> {
        self.beta.view()
    }

    pub fn pose(&self) -> &[f64; POSE_DIM] {
        &self.pose
    }
}

pub const IDENTITY_POSE: [f64; POSE_DIM] = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

fn quaternion_norm(pose: &[f64]) -> Result<f64> {
    let norm = pose[..4].iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::invalid("pose quaternion must have nonzero finite norm"));
    }
    Ok(norm)
}

/// S = S̄ + B_id·α + B_exp·β, as an N×3 matrix.
pub fn reconstruct_shape(basis: &FaceBasis, alpha: ArrayView1<'_, f64>, beta: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    if alpha.len() != ID_DIM || beta.len() != EXP_DIM {
        return Err(Error::invalid(format!(
            "expected alpha/beta lengths {ID_DIM}/{EXP_DIM}, got {}/{}",
            alpha.len(),
            beta.len()
        )));
    }
    let n = basis.num_vertices();
    let id = basis.id_basis.view().into_shape_with_order((n * 3, ID_DIM)).expect("standard layout");
    let exp = basis.exp_basis.view().into_shape_with_order((n * 3, EXP_DIM)).expect("standard layout");
    let offset = id.dot(&alpha) + exp.dot(&beta);
    let offset = offset.into_shape_with_order((n, 3)).expect("length 3N");
    Ok(&basis.mean_shape + &offset)
}

/// Unit rotation from the scalar-first quaternion in `pose[0..4]`.
pub fn pose_rotation(pose: &[f64]) -> Result<UnitQuaternion<f64>> {
    if pose.len() != POSE_DIM {
        return Err(Error::invalid(format!("pose must have length {POSE_DIM}, got {}", pose.len())));
    }
    quaternion_norm(pose)?;
    Ok(UnitQuaternion::from_quaternion(Quaternion::new(pose[0], pose[1], pose[2], pose[3])))
}

/// Applies the rigid pose to every vertex: R·v + t.
pub fn transform(shape: ArrayView2<'_, f64>, pose: &[f64]) -> Result<Array2<f64>> {
    if shape.ncols() != 3 {
        return Err(Error::dim(format!("shape must be N×3, got {:?}", shape.dim())));
    }
    let rot = pose_rotation(pose)?.to_rotation_matrix();
    let t = Vector3::new(pose[4], pose[5], pose[6]);
    let mut out = Array2::zeros(shape.raw_dim());
    for (src, mut dst) in shape.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let p = rot * Vector3::new(src[0], src[1], src[2]) + t;
        dst[0] = p.x;
        dst[1] = p.y;
        dst[2] = p.z;
    }
    Ok(out)
}

/// Orthographic projection of the posed shape onto the xy plane.
pub fn project(shape: ArrayView2<'_, f64>, pose: &[f64]) -> Result<Array2<f64>> {
    let posed = transform(shape, pose)?;
    Ok(posed.slice_move(ndarray::s![.., 0..2]))
}

/// Euclidean distance between the designated upper and lower lip vertices,
/// measured on the unposed reconstruction.
pub fn lip_distance(basis: &FaceBasis, params: &FaceParams) -> f64 {
    let vertex = |i: usize| -> [f64; 3] {
        let mut p = [0.0; 3];
        for (k, out) in p.iter_mut().enumerate() {
            *out = basis.mean_shape[[i, k]]
                + basis.id_basis.slice(ndarray::s![i, k, ..]).dot(&params.alpha)
                + basis.exp_basis.slice(ndarray::s![i, k, ..]).dot(&params.beta);
        }
        p
    };
    let a = vertex(basis.lip_upper);
    let b = vertex(basis.lip_lower);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ellipsoid radii of the synthetic head (x, y, z) in model units.
const HEAD_RADII: [f64; 3] = [0.8, 1.0, 0.9];
const LONGITUDE_SPAN: f64 = 75.0 * PI / 180.0;
const LATITUDE_SPAN: f64 = 70.0 * PI / 180.0;
const MOUTH_LATITUDE: f64 = -32.0 * PI / 180.0;
/// Peak per-unit deflection of random bases, as a fraction of head height.
const DEFLECTION_FRACTION: f64 = 0.01;
const MOUTH_DEFLECTION: f64 = 0.03;

/// Procedural stand-in for licensed face assets.
///
/// The mesh is a grid over the front of an ellipsoid facing +z with UVs taken
/// from grid coordinates (u along columns, v down rows). `n` vertices are
/// produced; any vertices beyond the largest grid that fits are left
/// unreferenced at the back of the head. Expression channel
/// [`MOUTH_CHANNEL`] opens the lips; the remaining channels are smooth
/// random deformation fields.
pub fn generate_synthetic_basis(seed: u64, n: usize) -> Result<FaceBasis> {
    if n < 4 {
        return Err(Error::invalid(format!("synthetic basis needs N >= 4, got {n}")));
    }
    let cols = ((n as f64).sqrt().floor() as usize).max(2);
    let rows = n / cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut angles = Vec::with_capacity(n);
    let mut mean = Array2::zeros((n, 3));
    let mut uv = Array2::zeros((n, 2));
    for r in 0..rows {
        for c in 0..cols {
            let u = c as f64 / (cols - 1) as f64;
            let v = r as f64 / (rows - 1) as f64;
            let lon = (2.0 * u - 1.0) * LONGITUDE_SPAN;
            let lat = (1.0 - 2.0 * v) * LATITUDE_SPAN;
            let i = r * cols + c;
            mean[[i, 0]] = HEAD_RADII[0] * lat.cos() * lon.sin();
            mean[[i, 1]] = HEAD_RADII[1] * lat.sin();
            mean[[i, 2]] = HEAD_RADII[2] * lat.cos() * lon.cos();
            uv[[i, 0]] = u;
            uv[[i, 1]] = v;
            angles.push((lat, lon));
        }
    }
    for i in rows * cols..n {
        mean[[i, 2]] = -HEAD_RADII[2];
        uv[[i, 0]] = 0.5;
        uv[[i, 1]] = 0.5;
        angles.push((0.0, PI));
    }

    let mut triangles = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let a = r * cols + c;
            let b = a + 1;
            let d = a + cols;
            let e = d + 1;
            triangles.push([a, d, b]);
            triangles.push([b, d, e]);
        }
    }

    // Lip landmarks: the centre column, straddling the mouth latitude.
    let mid_col = cols / 2;
    let row_of = |lat: f64| ((1.0 - lat / LATITUDE_SPAN) / 2.0 * (rows - 1) as f64).round() as usize;
    let upper_row = row_of(MOUTH_LATITUDE).min(rows - 2);
    let lip_upper = upper_row * cols + mid_col;
    let lip_lower = (upper_row + 1) * cols + mid_col;
    let seam_lat = 0.5 * (angles[lip_upper].0 + angles[lip_lower].0);
    let mouth_lon = angles[lip_upper].1;

    let head_height = 2.0 * HEAD_RADII[1];
    let mut id_basis = Array3::zeros((n, 3, ID_DIM));
    for k in 0..ID_DIM {
        let field = random_field(&mut rng, &mean, DEFLECTION_FRACTION * head_height);
        id_basis.slice_mut(ndarray::s![.., .., k]).assign(&field);
    }
    let mut exp_basis = Array3::zeros((n, 3, EXP_DIM));
    for k in 0..EXP_DIM {
        let field = if k == MOUTH_CHANNEL {
            mouth_field(&angles, seam_lat, mouth_lon, MOUTH_DEFLECTION * head_height)
        } else {
            random_field(&mut rng, &mean, DEFLECTION_FRACTION * head_height)
        };
        exp_basis.slice_mut(ndarray::s![.., .., k]).assign(&field);
    }

    // Round everything through f32 so a saved basis reloads bit-identically.
    let q = |a: &mut f64| *a = *a as f32 as f64;
    mean.iter_mut().for_each(q);
    uv.iter_mut().for_each(q);
    id_basis.iter_mut().for_each(q);
    exp_basis.iter_mut().for_each(q);

    FaceBasis::new(mean, id_basis, exp_basis, uv, triangles, lip_upper, lip_lower)
}

/// Sum of a few Gaussian bumps with random directions, scaled to `peak`.
fn random_field(rng: &mut ChaCha8Rng, mean: &Array2<f64>, peak: f64) -> Array2<f64> {
    let n = mean.nrows();
    let mut field = Array2::<f64>::zeros((n, 3));
    for _ in 0..3 {
        let centre = mean.row(rng.random_range(0..n)).to_owned();
        let width: f64 = rng.random_range(0.2..0.5);
        let mut dir = [0.0f64; 3];
        dir.iter_mut().for_each(|d| *d = rng.random_range(-1.0..1.0));
        let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
        let amp: f64 = rng.random_range(0.5..1.0);
        for (i, p) in mean.axis_iter(Axis(0)).enumerate() {
            let d2: f64 = p.iter().zip(centre.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = amp * (-d2 / (2.0 * width * width)).exp();
            for k in 0..3 {
                field[[i, k]] += w * dir[k] / len;
            }
        }
    }
    let max = field.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    if max > 0.0 {
        field *= peak / max;
    }
    field
}

/// Vertical lip-opening field: vertices above the lip seam move up, below it
/// move down, with Gaussian falloff around the mouth.
fn mouth_field(angles: &[(f64, f64)], seam_lat: f64, mouth_lon: f64, peak: f64) -> Array2<f64> {
    let sigma_lat = 12.0 * PI / 180.0;
    let sigma_lon = 25.0 * PI / 180.0;
    let mut field = Array2::zeros((angles.len(), 3));
    for (i, &(lat, lon)) in angles.iter().enumerate() {
        let dl = lat - seam_lat;
        let dn = lon - mouth_lon;
        let w = (-(dl * dl) / (2.0 * sigma_lat * sigma_lat) - (dn * dn) / (2.0 * sigma_lon * sigma_lon)).exp();
        let sign = if dl >= 0.0 { 1.0 } else { -1.0 };
        field[[i, 1]] = sign * peak * w;
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn basis() -> FaceBasis {
        generate_synthetic_basis(3, 400).unwrap()
    }

    #[test]
    fn zero_params_give_mean_shape() {
        let b = basis();
        let s = reconstruct_shape(&b, Array1::zeros(ID_DIM).view(), Array1::zeros(EXP_DIM).view()).unwrap();
        assert_eq!(s, b.mean_shape);
        assert_eq!(s.dim(), (400, 3));
    }

    #[test]
    fn expression_enters_affinely() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let alpha = randn(&mut rng, ID_DIM);
        let b1 = randn(&mut rng, EXP_DIM);
        let b2 = randn(&mut rng, EXP_DIM);
        let lhs = reconstruct_shape(&b, alpha.view(), (&b1 + &b2).view()).unwrap()
            - reconstruct_shape(&b, alpha.view(), b1.view()).unwrap();
        let exp = b.exp_basis.view().into_shape_with_order((1200, EXP_DIM)).unwrap();
        let rhs = exp.dot(&b2).into_shape_with_order((400, 3)).unwrap();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-6);
    }

    #[test]
    fn wrong_lengths_are_rejected() {
        let b = basis();
        let r = reconstruct_shape(&b, Array1::zeros(81).view(), Array1::zeros(EXP_DIM).view());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(FaceParams::new(Array1::zeros(ID_DIM), Array1::zeros(63), IDENTITY_POSE).is_err());
    }

    #[test]
    fn identity_pose_keeps_xy() {
        let b = basis();
        let p = project(b.mean_shape(), &IDENTITY_POSE).unwrap();
        assert_eq!(p, b.mean_shape.slice(ndarray::s![.., 0..2]));
    }

    #[test]
    fn quaternion_sign_does_not_matter() {
        let b = basis();
        let pose = [0.3, -0.2, 0.5, 0.1, 0.2, -0.1, 0.4];
        let neg = [-0.3, 0.2, -0.5, -0.1, 0.2, -0.1, 0.4];
        let a = project(b.mean_shape(), &pose).unwrap();
        let c = project(b.mean_shape(), &neg).unwrap();
        assert!(max_abs_diff(&a, &c) < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z_matches_rotation_matrix() {
        // Oracle: explicit Rz(90°) = [[0,-1,0],[1,0,0],[0,0,1]].
        let theta = PI / 2.0;
        let (s, c) = (theta / 2.0).sin_cos();
        let pose = [c, 0.0, 0.0, s, 0.0, 0.0, 0.0];
        let shape = ndarray::array![[1.0, 0.0, 0.0], [0.3, -0.7, 2.0]];
        let got = project(shape.view(), &pose).unwrap();
        let rz = ndarray::array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        let xy = shape.slice(ndarray::s![.., 0..2]);
        let want = xy.dot(&rz.t());
        assert!(max_abs_diff(&got, &want) < 1e-6);
        assert!((got[[0, 0]] - 0.0).abs() < 1e-6 && (got[[0, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let shape = Array2::zeros((4, 3));
        let r = project(shape.view(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn neutral_lip_gap_is_vertex_difference() {
        let b = basis();
        let (u, l) = b.lip_indices();
        let d = &b.mean_shape.row(u) - &b.mean_shape.row(l);
        let oracle = d.dot(&d).sqrt();
        assert_eq!(lip_distance(&b, &FaceParams::neutral()), oracle);
        assert!(oracle > 0.0);
    }

    #[test]
    fn lip_distance_ignores_pose_and_is_nonnegative() {
        let b = basis();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let alpha = randn(&mut rng, ID_DIM);
            let beta = randn(&mut rng, EXP_DIM) * 3.0;
            let still = FaceParams::new(alpha.clone(), beta.clone(), IDENTITY_POSE).unwrap();
            let moved = FaceParams::new(alpha, beta, [0.2, 0.5, -0.3, 0.9, 1.0, 2.0, -3.0]).unwrap();
            let d = lip_distance(&b, &still);
            assert!(d >= 0.0);
            assert_eq!(d, lip_distance(&b, &moved));
        }
    }

    #[test]
    fn mouth_channel_opens_lips() {
        let b = basis();
        let mut beta = Array1::zeros(EXP_DIM);
        let closed = lip_distance(&b, &FaceParams::neutral());
        beta[MOUTH_CHANNEL] = 1.0;
        let open = lip_distance(&b, &FaceParams::new(Array1::zeros(ID_DIM), beta, IDENTITY_POSE).unwrap());
        assert!(open > closed);
    }

    #[test]
    fn synthetic_basis_is_deterministic_and_well_formed() {
        let a = generate_synthetic_basis(7, 150).unwrap();
        let b = generate_synthetic_basis(7, 150).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id_basis().dim(), (150, 3, ID_DIM));
        assert_eq!(a.exp_basis().dim(), (150, 3, EXP_DIM));
        assert!(a.vertex_uv().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(a, generate_synthetic_basis(8, 150).unwrap());
        assert!(generate_synthetic_basis(1, 3).is_err());
        assert!(generate_synthetic_basis(1, 4).is_ok());
    }

    #[test]
    fn expression_deflection_is_about_one_percent() {
        let b = basis();
        let head = 2.0 * HEAD_RADII[1];
        for k in 1..EXP_DIM {
            let field = b.exp_basis.slice(ndarray::s![.., .., k]);
            let peak = field.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
            assert!((peak / head - DEFLECTION_FRACTION).abs() < 1e-3, "channel {k}: {peak}");
        }
    }

    #[test]
    fn basis_round_trips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_synthetic_basis(7, 64).unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(load_basis(dir.path()).unwrap(), b);
    }

    #[test]
    fn truncated_blob_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_basis(7, 64).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join("exp_basis.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match load_basis(dir.path()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "exp_basis"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_identity_column_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_synthetic_basis(7, 16).unwrap();
        b.save(dir.path()).unwrap();
        let n = b.num_vertices();
        // Rewrite the identity blob with 81 columns and declare it.
        let header_path = dir.path().join("header.json");
        let mut header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&header_path).unwrap()).unwrap();
        header["meta"]["id_dim"] = 81.into();
        std::fs::write(&header_path, header.to_string()).unwrap();
        std::fs::write(dir.path().join("id_basis.f32"), vec![0u8; n * 3 * 81 * 4]).unwrap();
        assert!(matches!(load_basis(dir.path()), Err(Error::Dimension(_))));
    }
}
