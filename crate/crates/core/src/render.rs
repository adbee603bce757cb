//! Deferred neural rendering: rasterize the posed mesh into a UV image,
//! look up a learned neural texture at every pixel, and translate the
//! sampled feature image into an RGB frame.
//!
//! Texture coordinates map `(u, v) ∈ [0,1]²` onto the texel grid
//! `[0, W_t−1] × [0, H_t−1]`; texel `(row i, col j)` sits exactly at
//! `(u, v) = (j/(W_t−1), i/(H_t−1))`. Image pixels have their centres at
//! `(col + 0.5, row + 0.5)`. Background pixels of a UV image hold −1 in both
//! channels.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::Optimizer;
use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::face_model::{project, reconstruct_shape, transform, FaceBasis, FaceParams};
use crate::nn::{adam, mean_abs_diff, open_checkpoint, save_checkpoint, sigmoid, CheckpointMeta, Conv2d, LossRow, ParamStore, TrainReport};

pub const IMAGE_SIZE: usize = 224;
pub const TEXTURE_SIZE: usize = 64;
pub const NEURAL_DIM: usize = 16;
pub const RGB_DIM: usize = 3;
pub const UV_SENTINEL: f32 = -1.0;
pub const MODEL_TAG: &str = "render";
pub const UV_KIND: &str = "uv_image";
pub const NEURAL_TEXTURE_KIND: &str = "neural_texture";
pub const PERCEPTUAL_KIND: &str = "perceptual_weights";

/// Depth slack (model units) when deciding whether a texel's surface point
/// is the one visible at its pixel.
const VISIBILITY_TOLERANCE: f64 = 0.05;

/// Per-pixel texture coordinates of a rasterized mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct UVImage {
    data: Array3<f32>,
    mask: Array2<bool>,
}

impl UVImage {
    pub fn new(data: Array3<f32>, mask: Array2<bool>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 2 || mask.dim() != (h, w) || h == 0 || w == 0 {
            return Err(Error::dim(format!("UV image must be 2×H×W with an H×W mask, got {:?} and {:?}", data.dim(), mask.dim())));
        }
        for ((i, j), &valid) in mask.indexed_iter() {
            let (u, v) = (data[[0, i, j]], data[[1, i, j]]);
            let ok = if valid {
                (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)
            } else {
                u == UV_SENTINEL && v == UV_SENTINEL
            };
            if !ok {
                return Err(Error::invalid(format!("pixel ({i},{j}) has uv ({u},{v}) inconsistent with mask {valid}")));
            }
        }
        Ok(Self { data, mask })
    }

    /// Builds an image from a per-pixel closure; `None` marks background.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Option<(f32, f32)>) -> Result<Self> {
        let mut data = Array3::from_elem((2, height, width), UV_SENTINEL);
        let mut mask = Array2::from_elem((height, width), false);
        for i in 0..height {
            for j in 0..width {
                if let Some((u, v)) = f(i, j) {
                    data[[0, i, j]] = u;
                    data[[1, i, j]] = v;
                    mask[[i, j]] = true;
                }
            }
        }
        Self::new(data, mask)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            data: Array3::from_elem((2, height, width), UV_SENTINEL),
            mask: Array2::from_elem((height, width), false),
        }
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn uv(&self, i: usize, j: usize) -> Option<(f32, f32)> {
        self.mask[[i, j]].then(|| (self.data[[0, i, j]], self.data[[1, i, j]]))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (h, w) = self.mask.dim();
        ContainerWriter::new(UV_KIND, serde_json::json!({ "height": h, "width": w }))?
            .f32("uv", &[2, h, w], self.data.iter().copied().collect())
            .i32("mask", &[h, w], self.mask.iter().map(|&m| m as i32).collect())
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir, UV_KIND)?;
        let (shape, data) = c.f32("uv")?;
        if shape.len() != 3 {
            return Err(Error::dim(format!("uv blob must be rank 3, got {shape:?}")));
        }
        let mask = c.i32("mask")?.1;
        let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).map_err(|e| Error::dim(e.to_string()))?;
        let mask = Array2::from_shape_vec((shape[1], shape[2]), mask.into_iter().map(|m| m != 0).collect())
            .map_err(|e| Error::dim(e.to_string()))?;
        Self::new(data, mask)
    }
}

/// Colour texture in `[0,1]`, `3 × H_t × W_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RGBTexture(Array3<f32>);

impl RGBTexture {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        check_texture_shape(&data, RGB_DIM)?;
        if data.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("RGB texture values must be finite and in [0,1]"));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }
}

/// Learned feature texture, `16 × H_t × W_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTexture(Array3<f32>);

impl NeuralTexture {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        check_texture_shape(&data, NEURAL_DIM)?;
        Ok(Self(data))
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let shape = self.0.shape().to_vec();
        ContainerWriter::new(NEURAL_TEXTURE_KIND, serde_json::json!({ "shape": shape }))?
            .f32("texture", &shape, self.0.iter().copied().collect())
            .write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir, NEURAL_TEXTURE_KIND)?;
        let (shape, data) = c.f32("texture")?;
        if shape.len() != 3 {
            return Err(Error::dim(format!("texture blob must be rank 3, got {shape:?}")));
        }
        Self::new(Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).map_err(|e| Error::dim(e.to_string()))?)
    }
}

fn check_texture_shape(data: &Array3<f32>, channels: usize) -> Result<()> {
    let (c, h, w) = data.dim();
    if c != channels || h < 2 || w < 2 {
        return Err(Error::dim(format!("texture must be {channels}×H_t×W_t with H_t,W_t ≥ 2, got {:?}", data.dim())));
    }
    Ok(())
}

/// Neural texture looked up at every pixel, `16 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledImage(Array3<f32>);

impl SampledImage {
    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }
}

/// RGB image in `[0,1]`, `3 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Array3<f32>);

impl Frame {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != RGB_DIM {
            return Err(Error::dim(format!("frame must be 3×H×W, got {:?}", data.dim())));
        }
        if data.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("frame values must be finite and in [0,1]"));
        }
        Ok(Self(data))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((RGB_DIM, height, width), |(c, _, _)| rgb[c]))
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(Array3::from_shape_fn((RGB_DIM, h as usize, w as usize), |(c, i, j)| {
            img.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
        }))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.0.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.0[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Bilinear read at continuous pixel-index coordinates, clamped to the
    /// image.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (_, h, w) = self.0.dim();
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let d = &self.0;
            *o = (1.0 - fx) * (1.0 - fy) * d[[c, y0, x0]]
                + fx * (1.0 - fy) * d[[c, y0, x1]]
                + (1.0 - fx) * fy * d[[c, y1, x0]]
                + fx * fy * d[[c, y1, x1]];
        }
        out
    }
}

/// Texel indices and weights of one bilinear lookup, in the fixed order
/// `(x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)`. Indices are `row·W_t + col`.
pub fn bilinear_taps(u: f32, v: f32, tex_h: usize, tex_w: usize) -> Result<([usize; 4], [f32; 4])> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("texture coordinates ({u}, {v}) outside [0,1]")));
    }
    if tex_h < 2 || tex_w < 2 {
        return Err(Error::dim(format!("texture must be at least 2×2, got {tex_h}×{tex_w}")));
    }
    let x = u * (tex_w - 1) as f32;
    let y = v * (tex_h - 1) as f32;
    let x0 = (x.floor() as usize).min(tex_w - 2);
    let y0 = (y.floor() as usize).min(tex_h - 2);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let i00 = y0 * tex_w + x0;
    Ok((
        [i00, i00 + 1, i00 + tex_w, i00 + tex_w + 1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    ))
}

/// Bilinear lookup of a `D × H_t × W_t` texture at `(u, v)`.
pub fn bilinear_sample(texture: ArrayView3<'_, f32>, u: f32, v: f32) -> Result<Array1<f32>> {
    let (d, th, tw) = texture.dim();
    let (idx, w) = bilinear_taps(u, v, th, tw)?;
    let at = |c: usize, k: usize| texture[[c, idx[k] / tw, idx[k] % tw]];
    Ok(Array1::from_shape_fn(d, |c| ((w[0] * at(c, 0) + w[1] * at(c, 1)) + w[2] * at(c, 2)) + w[3] * at(c, 3)))
}

/// Looks up any `D × H_t × W_t` texture at every valid pixel of `uv`;
/// background pixels get zero vectors.
pub fn sample_texture(uv: &UVImage, texture: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    let (d, th, tw) = texture.dim();
    let (h, w) = uv.mask.dim();
    let mut out = Array3::zeros((d, h, w));
    for i in 0..h {
        for j in 0..w {
            let Some((u, v)) = uv.uv(i, j) else { continue };
            let (idx, wt) = bilinear_taps(u, v, th, tw)?;
            for c in 0..d {
                let at = |k: usize| texture[[c, idx[k] / tw, idx[k] % tw]];
                out[[c, i, j]] = ((wt[0] * at(0) + wt[1] * at(1)) + wt[2] * at(2)) + wt[3] * at(3);
            }
        }
    }
    Ok(out)
}

/// UV texture sampling of a neural texture.
pub fn uv_texture_sampling(uv: &UVImage, texture: &NeuralTexture) -> Result<SampledImage> {
    Ok(SampledImage(sample_texture(uv, texture.data())?))
}

/// UV texture sampling of a colour texture, giving a frame.
pub fn sample_rgb(uv: &UVImage, texture: &RGBTexture) -> Result<Frame> {
    Ok(Frame(sample_texture(uv, texture.data())?))
}

/// Affine map from model-space `(x, y)` to pixel coordinates:
/// `(center_x + scale·x, center_y − scale·y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Framing {
    pub scale: f64,
    pub center_x: f64,
    pub center_y: f64,
}

impl Framing {
    /// Default framing: a unit-radius head fills 80% of the shorter side.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            scale: 0.4 * height.min(width) as f64,
            center_x: width as f64 / 2.0,
            center_y: height as f64 / 2.0,
        }
    }
}

/// Posed vertices in screen space: `(px, py, depth)` with larger depth
/// nearer the camera.
pub fn screen_vertices(basis: &FaceBasis, params: &FaceParams, framing: &Framing) -> Result<Array2<f64>> {
    let shape = reconstruct_shape(basis, params.alpha(), params.beta())?;
    let posed = transform(shape.view(), params.pose())?;
    let xy = project(shape.view(), params.pose())?;
    let n = posed.nrows();
    Ok(Array2::from_shape_fn((n, 3), |(i, k)| match k {
        0 => framing.center_x + framing.scale * xy[[i, 0]],
        1 => framing.center_y - framing.scale * xy[[i, 1]],
        _ => posed[[i, 2]],
    }))
}

fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Barycentric weights of `p` in triangle `a,b,c`, or `None` if the
/// triangle is degenerate.
fn barycentric(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> Option<[f64; 3]> {
    let area = edge(a.0, a.1, b.0, b.1, c.0, c.1);
    if area.abs() < 1e-12 {
        return None;
    }
    let w0 = edge(b.0, b.1, c.0, c.1, p.0, p.1) / area;
    let w1 = edge(c.0, c.1, a.0, a.1, p.0, p.1) / area;
    Some([w0, w1, 1.0 - w0 - w1])
}

const INSIDE_EPS: f64 = -1e-9;

/// Grid points `lo..=hi` (offset by `half`) covered by the interval
/// `[min, max]`, clamped to `0..n`.
fn covered_range(min: f64, max: f64, half: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (min - half).ceil().max(0.0);
    let hi = (max - half).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

struct Raster {
    uv: UVImage,
    depth: Array2<f64>,
}

fn rasterize(basis: &FaceBasis, screen: &Array2<f64>, height: usize, width: usize) -> Raster {
    let mut data = Array3::from_elem((2, height, width), UV_SENTINEL);
    let mut mask = Array2::from_elem((height, width), false);
    let mut depth = Array2::from_elem((height, width), f64::NEG_INFINITY);
    let vuv = basis.vertex_uv();
    for tri in basis.triangles() {
        let p = tri.map(|v| (screen[[v, 0]], screen[[v, 1]]));
        let xs = p.map(|q| q.0);
        let ys = p.map(|q| q.1);
        let min = |a: [f64; 3]| a.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |a: [f64; 3]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (Some((j0, j1)), Some((i0, i1))) = (covered_range(min(xs), max(xs), 0.5, width), covered_range(min(ys), max(ys), 0.5, height)) else {
            continue;
        };
        if barycentric(p[0], p[1], p[2], p[0]).is_none() {
            continue;
        }
        for i in i0..=i1 {
            for j in j0..=j1 {
                let Some(b) = barycentric(p[0], p[1], p[2], (j as f64 + 0.5, i as f64 + 0.5)) else { continue };
                if b.iter().any(|&w| w < INSIDE_EPS) {
                    continue;
                }
                let z: f64 = (0..3).map(|k| b[k] * screen[[tri[k], 2]]).sum();
                if z <= depth[[i, j]] {
                    continue;
                }
                depth[[i, j]] = z;
                mask[[i, j]] = true;
                for c in 0..2 {
                    let val: f64 = (0..3).map(|k| b[k] * vuv[[tri[k], c]]).sum();
                    data[[c, i, j]] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Raster {
        uv: UVImage { data, mask },
        depth,
    }
}

/// Rasterizes the posed mesh into an `H × W` UV image with a depth buffer;
/// zero-area triangles are skipped.
pub fn rasterize_uv(basis: &FaceBasis, params: &FaceParams, height: usize, width: usize, framing: &Framing) -> Result<UVImage> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let screen = screen_vertices(basis, params, framing)?;
    Ok(rasterize(basis, &screen, height, width).uv)
}

/// Inverse rasterization: every texel covered by a visible triangle reads
/// the portrait at the image location its surface point projects to.
/// Uncovered texels are zero.
pub fn extract_texture(
    portrait: &Frame,
    basis: &FaceBasis,
    params: &FaceParams,
    framing: &Framing,
    tex_h: usize,
    tex_w: usize,
) -> Result<RGBTexture> {
    if tex_h < 2 || tex_w < 2 {
        return Err(Error::dim(format!("texture must be at least 2×2, got {tex_h}×{tex_w}")));
    }
    let (h, w) = (portrait.height(), portrait.width());
    let screen = screen_vertices(basis, params, framing)?;
    let raster = rasterize(basis, &screen, h, w);
    let vuv = basis.vertex_uv();
    let mut tex = Array3::<f32>::zeros((RGB_DIM, tex_h, tex_w));
    for tri in basis.triangles() {
        let t = tri.map(|v| (vuv[[v, 0]] * (tex_w - 1) as f64, vuv[[v, 1]] * (tex_h - 1) as f64));
        let xs = t.map(|q| q.0);
        let ys = t.map(|q| q.1);
        let min = |a: [f64; 3]| a.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |a: [f64; 3]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (Some((a0, a1)), Some((b0, b1))) = (covered_range(min(xs), max(xs), 0.0, tex_w), covered_range(min(ys), max(ys), 0.0, tex_h)) else {
            continue;
        };
        if barycentric(t[0], t[1], t[2], t[0]).is_none() {
            continue;
        }
        for ty in b0..=b1 {
            for tx in a0..=a1 {
                let Some(b) = barycentric(t[0], t[1], t[2], (tx as f64, ty as f64)) else { continue };
                if b.iter().any(|&wt| wt < INSIDE_EPS) {
                    continue;
                }
                let interp = |k: usize| -> f64 { (0..3).map(|n| b[n] * screen[[tri[n], k]]).sum() };
                let (px, py, z) = (interp(0), interp(1), interp(2));
                if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                    continue;
                }
                let (pi, pj) = (py as usize, px as usize);
                // Silhouette points can land on pixels whose centre the mesh misses;
                // nothing occludes them there.
                if raster.uv.mask[[pi, pj]] && z < raster.depth[[pi, pj]] - VISIBILITY_TOLERANCE {
                    continue;
                }
                let rgb = portrait.sample(px - 0.5, py - 0.5);
                for c in 0..RGB_DIM {
                    tex[[c, ty, tx]] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
    }
    RGBTexture::new(tex)
}

/// Precomputed bilinear taps of one UV image against a texture size, used
/// by the differentiable tensor sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    height: usize,
    width: usize,
    tex_h: usize,
    tex_w: usize,
    index: [Vec<u32>; 4],
    weight: [Vec<f32>; 4],
    mask: Vec<u8>,
}

impl SamplingPlan {
    pub fn new(uv: &UVImage, tex_h: usize, tex_w: usize) -> Result<Self> {
        let (h, w) = uv.mask.dim();
        let mut index: [Vec<u32>; 4] = Default::default();
        let mut weight: [Vec<f32>; 4] = Default::default();
        let mut mask = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (idx, wt) = match uv.uv(i, j) {
                    Some((u, v)) => bilinear_taps(u, v, tex_h, tex_w)?,
                    None => ([0; 4], [0.0; 4]),
                };
                for k in 0..4 {
                    index[k].push(idx[k] as u32);
                    weight[k].push(wt[k]);
                }
                mask.push(uv.mask[[i, j]] as u8);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            tex_h,
            tex_w,
            index,
            weight,
            mask,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn texture_size(&self) -> (usize, usize) {
        (self.tex_h, self.tex_w)
    }
}

/// Bilinear gather over a `(B, D, H_t, W_t)` texture batch; the plans are
/// flattened with per-element texture offsets.
struct UvGather {
    batch: usize,
    channels: usize,
    texels: usize,
    pixels: usize,
    index: [Vec<u32>; 4],
    weight: [Vec<f32>; 4],
    mask: Vec<u8>,
}

trait Texel: Copy + Default + From<f32> + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign {}
impl Texel for f32 {}
impl Texel for f64 {}

impl UvGather {
    fn gather<T: Texel>(&self, tex: &[T]) -> Vec<T> {
        let (d, n, hw) = (self.channels, self.texels, self.pixels);
        let mut out = vec![T::default(); self.batch * d * hw];
        for b in 0..self.batch {
            for c in 0..d {
                let src = &tex[(b * d + c) * n..][..n];
                let dst = &mut out[(b * d + c) * hw..][..hw];
                for p in 0..hw {
                    let q = b * hw + p;
                    if self.mask[q] == 0 {
                        continue;
                    }
                    let tap = |k: usize| T::from(self.weight[k][q]) * src[self.index[k][q] as usize];
                    dst[p] = ((tap(0) + tap(1)) + tap(2)) + tap(3);
                }
            }
        }
        out
    }

    fn scatter<T: Texel>(&self, grad: &[T]) -> Vec<T> {
        let (d, n, hw) = (self.channels, self.texels, self.pixels);
        let mut out = vec![T::default(); self.batch * d * n];
        for b in 0..self.batch {
            for c in 0..d {
                let src = &grad[(b * d + c) * hw..][..hw];
                let dst = &mut out[(b * d + c) * n..][..n];
                for p in 0..hw {
                    let q = b * hw + p;
                    if self.mask[q] == 0 {
                        continue;
                    }
                    for k in 0..4 {
                        dst[self.index[k][q] as usize] += T::from(self.weight[k][q]) * src[p];
                    }
                }
            }
        }
        out
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("texture sampling needs a contiguous tensor"),
    }
}

impl candle_core::CustomOp1 for UvGather {
    fn name(&self) -> &'static str {
        "uv-gather"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.gather(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.gather(contiguous(v, layout)?)),
            _ => candle_core::bail!("texture sampling supports f32 and f64 only"),
        };
        Ok((out, (self.batch, self.channels, self.pixels).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.flatten_all()?;
        let out = match grad.dtype() {
            DType::F32 => Tensor::from_vec(self.scatter(&grad.to_vec1::<f32>()?), arg.shape(), arg.device())?,
            DType::F64 => Tensor::from_vec(self.scatter(&grad.to_vec1::<f64>()?), arg.shape(), arg.device())?,
            other => candle_core::bail!("texture sampling does not support {other:?}"),
        };
        Ok(Some(out))
    }
}

/// Differentiable UV texture sampling of a `(B, D, H_t, W_t)` texture batch
/// with one plan per batch element; returns `(B, D, H, W)`. Products and
/// sums follow [`bilinear_sample`] exactly, so f32 results match it bit for
/// bit.
pub fn sample_batch(texture: &Tensor, plans: &[&SamplingPlan]) -> Result<Tensor> {
    let (b, d, th, tw) = texture.dims4()?;
    if plans.len() != b || b == 0 {
        return Err(Error::invalid(format!("need one sampling plan per batch element ({b}), got {}", plans.len())));
    }
    let (h, w) = plans[0].image_size();
    if plans.iter().any(|p| p.image_size() != (h, w) || p.texture_size() != (th, tw)) {
        return Err(Error::invalid("sampling plans must share image and texture sizes"));
    }
    let op = UvGather {
        batch: b,
        channels: d,
        texels: th * tw,
        pixels: h * w,
        index: std::array::from_fn(|k| plans.iter().flat_map(|p| p.index[k].iter().copied()).collect()),
        weight: std::array::from_fn(|k| plans.iter().flat_map(|p| p.weight[k].iter().copied()).collect()),
        mask: plans.iter().flat_map(|p| p.mask.iter().copied()).collect(),
    };
    Ok(texture.reshape((b, d, th * tw))?.contiguous()?.apply_op1(op)?.reshape((b, d, h, w))?)
}

/// Stacks `C × H × W` arrays into a `(B, C, H, W)` tensor.
pub fn stack_images(images: &[ArrayView3<'_, f32>], dtype: DType) -> Result<Tensor> {
    let (c, h, w) = images.first().ok_or_else(|| Error::invalid("no images to stack"))?.dim();
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::invalid("images in a batch must share a shape"));
        }
        data.extend(img.iter());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("dims3"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub image_size: usize,
    pub texture_size: usize,
    pub texture_hidden: usize,
    pub translate_width: usize,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            texture_size: TEXTURE_SIZE,
            texture_hidden: 8,
            translate_width: 8,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 4, got {}", self.image_size)));
        }
        if self.texture_size < 2 || self.texture_size % 2 != 0 {
            return Err(Error::Config(format!("texture_size must be even and ≥ 2, got {}", self.texture_size)));
        }
        if self.texture_hidden == 0 || self.translate_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.reshape((b, c, 2 * h, 2 * w))?)
}

/// RGB texture → neural texture: one stride-2 level with a skip connection.
#[derive(Debug)]
pub struct TextureNet {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    merge: Conv2d,
    out: Conv2d,
}

impl TextureNet {
    pub fn new(ps: &mut ParamStore, hidden: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(ps, "texture.c1", RGB_DIM, hidden, 3, 1)?,
            c2: Conv2d::new(ps, "texture.c2", hidden, 2 * hidden, 3, 2)?,
            c3: Conv2d::new(ps, "texture.c3", 2 * hidden, 2 * hidden, 3, 1)?,
            merge: Conv2d::new(ps, "texture.merge", 3 * hidden, hidden, 1, 1)?,
            out: Conv2d::new(ps, "texture.out", hidden, NEURAL_DIM, 3, 1)?,
        })
    }

    /// `(B, 3, H_t, W_t)` → `(B, 16, H_t, W_t)`.
    pub fn forward(&self, rgb: &Tensor) -> Result<Tensor> {
        let e1 = self.c1.forward_relu(rgb)?;
        let e2 = self.c2.forward_relu(&e1)?;
        let e3 = self.c3.forward_relu(&e2)?;
        let m = Tensor::cat(&[&upsample2(&e3)?, &e1], 1)?;
        let m = self.merge.forward_relu(&m)?;
        self.out.forward(&m)
    }
}

/// Sampled feature image → RGB frame: a two-level encoder-decoder with skip
/// connections and a sigmoid head.
#[derive(Debug)]
pub struct TranslateNet {
    down1: Conv2d,
    down2: Conv2d,
    bottleneck: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    head: Conv2d,
}

impl TranslateNet {
    pub fn new(ps: &mut ParamStore, width: usize) -> Result<Self> {
        let w = width;
        Ok(Self {
            down1: Conv2d::new(ps, "translate.down1", NEURAL_DIM, w, 3, 2)?,
            down2: Conv2d::new(ps, "translate.down2", w, 2 * w, 3, 2)?,
            bottleneck: Conv2d::new(ps, "translate.bottleneck", 2 * w, 2 * w, 3, 1)?,
            up1: Conv2d::new(ps, "translate.up1", 3 * w, w, 3, 1)?,
            up2: Conv2d::new(ps, "translate.up2", w + NEURAL_DIM, w, 1, 1)?,
            head: Conv2d::new(ps, "translate.head", w, RGB_DIM, 1, 1)?,
        })
    }

    /// `(B, 16, H, W)` → `(B, 3, H, W)` in `[0,1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d1 = self.down1.forward_relu(x)?;
        let d2 = self.down2.forward_relu(&d1)?;
        let b = self.bottleneck.forward_relu(&d2)?;
        let u1 = self.up1.forward_relu(&Tensor::cat(&[&upsample2(&b)?, &d1], 1)?)?;
        let u2 = self.up2.forward_relu(&Tensor::cat(&[&upsample2(&u1)?, x], 1)?)?;
        sigmoid(&self.head.forward(&u2)?)
    }
}

/// The two trainable render networks and their parameters.
#[derive(Debug)]
pub struct RenderNets {
    config: RenderConfig,
    params: ParamStore,
    texture: TextureNet,
    translate: TranslateNet,
    iteration: usize,
}

impl RenderNets {
    pub fn new(config: RenderConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: RenderConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, config.seed);
        let texture = TextureNet::new(&mut ps, config.texture_hidden)?;
        let translate = TranslateNet::new(&mut ps, config.translate_width)?;
        Ok(Self {
            config,
            params: ps,
            texture,
            translate,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &RenderConfig {
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

    pub fn texture_net(&self) -> &TextureNet {
        &self.texture
    }

    pub fn translate_net(&self) -> &TranslateNet {
        &self.translate
    }

    /// Full pipeline on a batch: texture net, UV sampling, translation.
    pub fn forward_batch(&self, rgb: &Tensor, plans: &[&SamplingPlan]) -> Result<Tensor> {
        let neural = self.texture.forward(rgb)?;
        let sampled = sample_batch(&neural, plans)?;
        self.translate.forward(&sampled)
    }

    /// Neural texture for one RGB texture.
    pub fn texture_net_apply(&self, rgb: &RGBTexture) -> Result<NeuralTexture> {
        let (_, th, tw) = rgb.data().dim();
        if (th, tw) != (self.config.texture_size, self.config.texture_size) {
            return Err(Error::invalid(format!(
                "RGB texture must be 3×{n}×{n}, got {:?}",
                rgb.data().dim(),
                n = self.config.texture_size
            )));
        }
        let x = stack_images(&[rgb.data()], self.dtype())?;
        NeuralTexture::new(tensor_to_array3(&self.texture.forward(&x)?.squeeze(0)?)?)
    }

    /// Frame for one sampled feature image.
    pub fn translate(&self, sampled: &SampledImage) -> Result<Frame> {
        let n = self.config.image_size;
        if sampled.0.dim() != (NEURAL_DIM, n, n) {
            return Err(Error::invalid(format!("sampled image must be {NEURAL_DIM}×{n}×{n}, got {:?}", sampled.0.dim())));
        }
        let x = stack_images(&[sampled.data()], self.dtype())?;
        Frame::new(tensor_to_array3(&self.translate.forward(&x)?.squeeze(0)?)?)
    }

    /// Renders one frame from a UV image and the portrait's RGB texture.
    pub fn render(&self, uv: &UVImage, rgb: &RGBTexture) -> Result<Frame> {
        let neural = self.texture_net_apply(rgb)?;
        self.translate(&uv_texture_sampling(uv, &neural)?)
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
        let (container, meta) = open_checkpoint::<RenderConfig>(dir, MODEL_TAG)?;
        let mut nets = Self::new(meta.config)?;
        nets.params.read_blobs(&container)?;
        nets.iteration = meta.iteration;
        Ok(nets)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PerceptualMeta {
    strides: Vec<usize>,
}

/// Fixed feature extractor φ for the perceptual term: conv + ReLU stages.
#[derive(Debug)]
pub struct PerceptualExtractor {
    stages: Vec<Conv2d>,
}

impl PerceptualExtractor {
    /// Seeded random weights: 3→8 and 8→16 channels, 3×3, stride 2.
    pub fn seeded(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for (cin, cout) in [(RGB_DIM, 8), (8, 16)] {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(cout, dtype, &Device::Cpu)?;
            stages.push(Conv2d::from_tensors(weight, bias, 2)?);
        }
        Ok(Self { stages })
    }

    /// φ(x) = x.
    pub fn identity() -> Self {
        Self { stages: Vec::new() }
    }

    /// Loads pretrained stages from a weight container holding
    /// `stage{i}.weight` `(out, in, k, k)` and `stage{i}.bias` blobs.
    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let c = Container::open(dir, PERCEPTUAL_KIND)?;
        let meta: PerceptualMeta = c.meta()?;
        let mut stages = Vec::with_capacity(meta.strides.len());
        let mut cin = RGB_DIM;
        for (i, &stride) in meta.strides.iter().enumerate() {
            let (ws, w) = c.f32(&format!("stage{i}.weight"))?;
            if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
                return Err(Error::dim(format!("stage{i}.weight has shape {ws:?}, expected (out, {cin}, k, k) with odd k")));
            }
            let b = c.f32_shaped(&format!("stage{i}.bias"), &[ws[0]])?;
            let weight = Tensor::from_vec(w, ws.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            let bias = Tensor::from_vec(b, ws[0], &Device::Cpu)?.to_dtype(dtype)?;
            stages.push(Conv2d::from_tensors(weight, bias, stride)?);
            cin = ws[0];
        }
        Ok(Self { stages })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = PerceptualMeta {
            strides: self.stages.iter().map(|s| s.stride()).collect(),
        };
        let mut w = ContainerWriter::new(PERCEPTUAL_KIND, meta)?;
        for (i, s) in self.stages.iter().enumerate() {
            let weight = s.weight().to_dtype(DType::F32)?;
            w = w
                .f32(&format!("stage{i}.weight"), weight.dims(), weight.flatten_all()?.to_vec1()?)
                .f32(&format!("stage{i}.bias"), s.bias().dims(), s.bias().to_dtype(DType::F32)?.to_vec1()?);
        }
        w.write(dir)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            let w = s.weight().to_dtype(h.dtype())?;
            let b = s.bias().to_dtype(h.dtype())?;
            h = Conv2d::from_tensors(w, b, s.stride())?.forward_relu(&h)?;
        }
        Ok(h)
    }
}

/// `mean|pred − gt| + mean|φ(pred) − φ(gt)|` on `(B, 3, H, W)` tensors.
pub fn render_loss(pred: &Tensor, gt: &Tensor, phi: &PerceptualExtractor) -> Result<Tensor> {
    let pixel = mean_abs_diff(pred, gt)?;
    let feature = mean_abs_diff(&phi.forward(pred)?, &phi.forward(gt)?)?;
    Ok((pixel + feature)?)
}

/// [`render_loss`] on two frames, evaluated in f64.
pub fn render_loss_frames(pred: &Frame, gt: &Frame, phi: &PerceptualExtractor) -> Result<f64> {
    if pred.0.dim() != gt.0.dim() {
        return Err(Error::invalid(format!("frame shapes differ: {:?} vs {:?}", pred.0.dim(), gt.0.dim())));
    }
    let p = stack_images(&[pred.data()], DType::F64)?;
    let g = stack_images(&[gt.data()], DType::F64)?;
    Ok(render_loss(&p, &g, phi)?.to_scalar::<f64>()?)
}

/// One render training example: the UV image of a posed face, the RGB
/// texture extracted from the identity's portrait, and the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSample {
    pub uv: UVImage,
    pub texture: RGBTexture,
    pub target: Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderTrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl RenderTrainSettings {
    /// Full-scale schedule: lr 2e-4, batches of 6, one million iterations.
    pub fn paper() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 6,
            iterations: 1_000_000,
            seed: 0,
        }
    }

    /// Desk-scale schedule used on the toy set.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 4,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl Default for RenderTrainSettings {
    fn default() -> Self {
        Self::desk()
    }
}

/// Joint Adam optimisation of both render networks under [`render_loss`].
pub fn train_render(
    nets: &mut RenderNets,
    data: &[RenderSample],
    phi: &PerceptualExtractor,
    settings: &RenderTrainSettings,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("render dataset is empty"));
    }
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let n = nets.config.image_size;
    let t = nets.config.texture_size;
    for (i, s) in data.iter().enumerate() {
        if (s.uv.height(), s.uv.width()) != (n, n) || s.target.0.dim() != (RGB_DIM, n, n) || s.texture.0.dim() != (RGB_DIM, t, t) {
            return Err(Error::invalid(format!("sample {i} does not match the configured image/texture sizes")));
        }
    }
    let plans = data
        .iter()
        .map(|s| SamplingPlan::new(&s.uv, t, t))
        .collect::<Result<Vec<_>>>()?;
    let dtype = nets.dtype();
    let mut opt = adam(nets.params.vars(), settings.learning_rate)?;
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
            batch.push(order[cursor]);
            cursor += 1;
        }
        let rgb = stack_images(&batch.iter().map(|&i| data[i].texture.data()).collect::<Vec<_>>(), dtype)?;
        let gt = stack_images(&batch.iter().map(|&i| data[i].target.data()).collect::<Vec<_>>(), dtype)?;
        let batch_plans: Vec<&SamplingPlan> = batch.iter().map(|&i| &plans[i]).collect();
        let pred = nets.forward_batch(&rgb, &batch_plans)?;
        let loss = render_loss(&pred, &gt, phi)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        opt.backward_step(&loss)?;
        nets.iteration += 1;
        report.rows.push(LossRow { iteration: it, loss: value });
        if it % 100 == 0 {
            log::debug!("render iteration {it}: loss {value:.5}");
        }
    }
    Ok(report)
}

/// Mean absolute difference between two frames over the pixels where
/// `mask` is set.
pub fn masked_mean_abs_error(a: &Frame, b: &Frame, mask: &Array2<bool>) -> Result<f64> {
    if a.0.dim() != b.0.dim() || (a.height(), a.width()) != mask.dim() {
        return Err(Error::invalid("frame and mask shapes differ"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            for c in 0..RGB_DIM {
                sum += (a.0[[c, i, j]] - b.0[[c, i, j]]).abs() as f64;
            }
            count += RGB_DIM;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(sum / count as f64)
}
