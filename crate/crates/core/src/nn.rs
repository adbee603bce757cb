//! Small building blocks shared by the motion and render networks: a seeded
//! parameter store, convolution layers, and the checkpoint container.

use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Named trainable tensors, created in a fixed order from a seeded stream.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Uniform(-bound, bound) initialised parameter.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Flattened copy of every parameter, in creation order.
    pub fn snapshot(&self) -> Result<Vec<Vec<f64>>> {
        self.params
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
            .collect()
    }

    /// Adds every parameter to a checkpoint writer as an f32 blob.
    pub fn write_blobs(&self, mut writer: ContainerWriter) -> Result<ContainerWriter> {
        for (name, var) in &self.params {
            let data = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            writer = writer.f32(name, var.dims(), data);
        }
        Ok(writer)
    }

    /// Overwrites every parameter from a checkpoint; all names must be present.
    pub fn read_blobs(&self, container: &Container) -> Result<()> {
        for (name, var) in &self.params {
            let data = container.f32_shaped(name, var.dims())?;
            let t = Tensor::from_vec(data, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        let known: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = container.blob_names().find(|n| !known.contains(n)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Kernel size, stride and zero padding of a convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Window {
    fn output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.ph, w + 2 * self.pw);
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    /// Output columns `lo..hi` whose tap `kj` falls inside a row of width `w`.
    fn valid_columns(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let lo = if self.pw > kj { (self.pw - kj).div_ceil(self.sw) } else { 0 };
        let hi = if w + self.pw > kj { ((w - 1 + self.pw - kj) / self.sw + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    fn is_pointwise(&self) -> bool {
        (self.kh, self.kw, self.sh, self.sw, self.ph, self.pw) == (1, 1, 1, 1, 0, 0)
    }
}

/// `(B, C, H, W)` → `(B, C·kh·kw, Ho·Wo)` patch matrix.
fn im2col<T: Copy + Default>(x: &[T], (b, c, h, w): (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (ho, wo) = win.output(h, w).expect("window checked by caller");
    let l = ho * wo;
    let rows = c * win.kh * win.kw;
    let mut out = vec![T::default(); b * rows * l];
    for n in 0..b {
        for ci in 0..c {
            let src = &x[(n * c + ci) * h * w..][..h * w];
            for ki in 0..win.kh {
                for kj in 0..win.kw {
                    let r = (ci * win.kh + ki) * win.kw + kj;
                    let dst = &mut out[(n * rows + r) * l..][..l];
                    for oi in 0..ho {
                        let ii = (oi * win.sh + ki) as isize - win.ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let row = &src[ii as usize * w..][..w];
                        let (lo, hi) = win.valid_columns(kj, w, wo);
                        let out_row = &mut dst[oi * wo..][..wo];
                        if win.sw == 1 {
                            let start = lo + kj - win.pw;
                            out_row[lo..hi].copy_from_slice(&row[start..start + hi - lo]);
                        } else {
                            for (oj, o) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                                *o = row[oj * win.sw + kj - win.pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Copy + Default + std::ops::AddAssign>(cols: &[T], (b, c, h, w): (usize, usize, usize, usize), win: Window) -> Vec<T> {
    let (ho, wo) = win.output(h, w).expect("window checked by caller");
    let l = ho * wo;
    let rows = c * win.kh * win.kw;
    let mut out = vec![T::default(); b * c * h * w];
    for n in 0..b {
        for ci in 0..c {
            let dst = &mut out[(n * c + ci) * h * w..][..h * w];
            for ki in 0..win.kh {
                for kj in 0..win.kw {
                    let r = (ci * win.kh + ki) * win.kw + kj;
                    let src = &cols[(n * rows + r) * l..][..l];
                    for oi in 0..ho {
                        let ii = (oi * win.sh + ki) as isize - win.ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let (lo, hi) = win.valid_columns(kj, w, wo);
                        let in_row = &mut dst[ii as usize * w..][..w];
                        let g = &src[oi * wo..][..wo];
                        for oj in lo..hi {
                            in_row[oj * win.sw + kj - win.pw] += g[oj];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("patch extraction needs a contiguous tensor"),
    }
}

struct Im2Col(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let Some((ho, wo)) = self.0.output(h, w) else {
            candle_core::bail!("input {h}×{w} smaller than the {}×{} kernel", self.0.kh, self.0.kw)
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, dims, self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, dims, self.0)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c * self.0.kh * self.0.kw, ho * wo))))
    }
}

struct Col2Im {
    window: Window,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, self.dims, self.window)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, self.dims, self.window)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(self.dims)))
    }
}

/// Whole convolution layer as one graph node: patch matrix, product with the
/// `(O, C·kh·kw)` kernel, bias and an optional ReLU. The backward pass
/// rebuilds the patch matrix instead of keeping it alive.
struct ConvOp {
    window: Window,
    relu: bool,
}

impl ConvOp {
    fn patches(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if self.window.is_pointwise() {
            return x.reshape((b, c, h * w));
        }
        x.contiguous()?.apply_op1_no_bwd(&Im2Col(self.window))
    }

    fn forward<T: WithDType + Default>(
        &self,
        x: &[T],
        (b, c, h, w): (usize, usize, usize, usize),
        weight: &[T],
        bias: &[T],
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let o = bias.len();
        let (ho, wo) = self.window.output(h, w).expect("window checked by caller");
        let l = ho * wo;
        let k = c * self.window.kh * self.window.kw;
        let cols = if self.window.is_pointwise() {
            Tensor::from_slice(x, (b, c, l), &Device::Cpu)?
        } else {
            Tensor::from_vec(im2col(x, (b, c, h, w), self.window), (b, k, l), &Device::Cpu)?
        };
        let kernel = Tensor::from_slice(weight, (o, k), &Device::Cpu)?;
        let mut y = kernel.broadcast_matmul(&cols)?.flatten_all()?.to_vec1::<T>()?;
        let zero = T::from_f64(0.0);
        for (i, v) in y.iter_mut().enumerate() {
            *v += bias[(i / l) % o];
            if self.relu && *v < zero {
                *v = zero;
            }
        }
        Ok((T::to_cpu_storage_owned(y), Shape::from((b, o, ho, wo))))
    }
}

impl CustomOp3 for ConvOp {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                self.forward(contiguous_slice(x, l1)?, dims, contiguous_slice(w, l2)?, contiguous_slice(b, l3)?)
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                self.forward(contiguous_slice(x, l1)?, dims, contiguous_slice(w, l2)?, contiguous_slice(b, l3)?)
            }
            _ => candle_core::bail!("convolution needs matching f32 or f64 tensors"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let (_, o, ho, wo) = res.dims4()?;
        let grad = if self.relu {
            grad.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &ReluGrad)?
        } else {
            grad.contiguous()?
        };
        let g = grad.reshape((b, o, ho * wo))?;
        let gx = if x.track_op() {
            let gc = weight.detach().t()?.broadcast_matmul(&g)?;
            Some(if self.window.is_pointwise() {
                gc.reshape((b, c, h, w))?
            } else {
                gc.contiguous()?.apply_op1_no_bwd(&Col2Im {
                    window: self.window,
                    dims: (b, c, h, w),
                })?
            })
        } else {
            None
        };
        let gw = if weight.track_op() {
            let cols = self.patches(&x.detach())?;
            Some(g.matmul(&cols.transpose(1, 2)?)?.sum(0)?)
        } else {
            None
        };
        let gb = if bias.track_op() { Some(g.sum(2)?.sum(0)?) } else { None };
        Ok((gx, gw, gb))
    }
}

/// Convolution as a patch-matrix product; `weight` is `(O, C, kh, kw)` or
/// any shape with `O` leading and `C·kh·kw` trailing elements.
fn conv(x: &Tensor, weight: &Tensor, bias: &Tensor, window: Window, relu: bool) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let o = weight.dim(0)?;
    if weight.elem_count() != o * c * window.kh * window.kw || bias.dims() != [o] {
        return Err(Error::dim(format!(
            "kernel {:?} and bias {:?} do not fit {c} input channels",
            weight.dims(),
            bias.dims()
        )));
    }
    if window.output(h, w).is_none() {
        return Err(Error::invalid(format!("input {h}×{w} smaller than the {}×{} kernel", window.kh, window.kw)));
    }
    let kernel = weight.reshape((o, ()))?.contiguous()?;
    Ok(x.contiguous()?.apply_op3(&kernel, &bias.contiguous()?, ConvOp { window, relu })?)
}

/// 1-D convolution over `(batch, channels, time)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel], bound)?.as_tensor().clone(),
            bias: ps.zeros(&format!("{name}.bias"), &[cout])?.as_tensor().clone(),
            stride,
            padding: kernel / 2,
        })
    }

    fn apply(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let window = Window {
            kh: 1,
            kw: self.weight.dim(2)?,
            sh: 1,
            sw: self.stride,
            ph: 0,
            pw: self.padding,
        };
        Ok(conv(&x.unsqueeze(2)?, &self.weight, &self.bias, window, relu)?.squeeze(2)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `relu(forward(x))` as a single node.
    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }
}

/// 2-D convolution over `(batch, channels, height, width)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = (3.0 / (cin * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound)?.as_tensor().clone(),
            bias: ps.zeros(&format!("{name}.bias"), &[cout])?.as_tensor().clone(),
            stride,
            padding: kernel / 2,
        })
    }

    /// A layer with fixed, caller-supplied weights (not registered anywhere).
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let padding = weight.dim(3)? / 2;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn apply(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let k = self.weight.dim(3)?;
        let window = Window {
            kh: k,
            kw: k,
            sh: self.stride,
            sw: self.stride,
            ph: self.padding,
            pw: self.padding,
        };
        conv(x, &self.weight, &self.bias, window, relu)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `relu(forward(x))` as a single node.
    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }
}

struct Relu;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|&x| x.max(0.0)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|&x| x.max(0.0)).collect()),
            _ => candle_core::bail!("relu supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &ReluGrad)?))
    }
}

struct ReluGrad;

impl CustomOp2 for ReluGrad {
    fn name(&self) -> &'static str {
        "relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(y)) => CpuStorage::F32(
                contiguous_slice(g, l1)?.iter().zip(contiguous_slice(y, l2)?).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect(),
            ),
            (CpuStorage::F64(g), CpuStorage::F64(y)) => CpuStorage::F64(
                contiguous_slice(g, l1)?.iter().zip(contiguous_slice(y, l2)?).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect(),
            ),
            _ => candle_core::bail!("relu supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `max(x, 0)` with a single-pass gradient.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Relu)?)
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()),
            _ => candle_core::bail!("sigmoid supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &SigmoidGrad)?))
    }
}

struct SigmoidGrad;

impl CustomOp2 for SigmoidGrad {
    fn name(&self) -> &'static str {
        "sigmoid-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(y)) => CpuStorage::F32(
                contiguous_slice(g, l1)?.iter().zip(contiguous_slice(y, l2)?).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
            ),
            (CpuStorage::F64(g), CpuStorage::F64(y)) => CpuStorage::F64(
                contiguous_slice(g, l1)?.iter().zip(contiguous_slice(y, l2)?).map(|(&g, &y)| g * y * (1.0 - y)).collect(),
            ),
            _ => candle_core::bail!("sigmoid supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Logistic function with a single-pass gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// Mean absolute difference of two equally shaped tensors.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Plain Adam: AdamW with zero weight decay.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Checkpoint manifest stored in the container header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta<C> {
    pub model: String,
    pub config: C,
    pub iteration: usize,
    pub seed: u64,
}

pub fn save_checkpoint<C: Serialize>(dir: &Path, meta: &CheckpointMeta<C>, params: &ParamStore) -> Result<()> {
    let writer = ContainerWriter::new(CHECKPOINT_KIND, meta)?;
    params.write_blobs(writer)?.write(dir)
}

/// Opens a checkpoint and checks its model tag.
pub fn open_checkpoint<C: DeserializeOwned>(dir: &Path, model: &str) -> Result<(Container, CheckpointMeta<C>)> {
    let c = Container::open(dir, CHECKPOINT_KIND)?;
    let meta: CheckpointMeta<C> = c.meta()?;
    if meta.model != model {
        return Err(Error::Config(format!("checkpoint holds a `{}` model, expected `{model}`", meta.model)));
    }
    Ok((c, meta))
}

/// One `(iteration, loss)` row of a training report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: f64,
}

/// Per-iteration losses, written as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` rows.
    pub fn final_loss(&self, n: usize) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let tail = &self.rows[self.rows.len().saturating_sub(n.max(1))..];
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for row in &self.rows {
            text.push_str(&serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
