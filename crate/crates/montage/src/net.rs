//! The toy convolutional backbone with exact reverse-mode gradients.
//!
//! Stages of [3x3 same-pad conv -> ReLU -> 2x2 average pool] produce the
//! feature map X; a 1x1 convolution head maps X to per-position logits over
//! C+1 classes. Backward returns exact gradients for every parameter and,
//! on request, for the input (needed for ERF measurement).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MontageError, Result};
use crate::rng::stream_rng2;
use crate::tensor::Tensor;

/// Layer list: input channels, per-stage conv output channels, head classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Head output channels (C foreground classes + background).
    pub num_classes: usize,
}

impl Architecture {
    /// Downsample ratio alpha = 1 / 2^depth.
    pub fn alpha(&self) -> f64 {
        1.0 / (1 << self.stage_channels.len()) as f64
    }

    pub fn pool_factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    /// Channels of X; the input channels when there are no stages.
    pub fn feature_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.in_channels)
    }
}

/// Input/feature grid correspondence for one input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureGeometry {
    pub input_h: usize,
    pub input_w: usize,
    pub feature_h: usize,
    pub feature_w: usize,
    pub alpha: f64,
}

impl FeatureGeometry {
    pub fn for_input(arch: &Architecture, input_h: usize, input_w: usize) -> Result<Self> {
        let f = arch.pool_factor();
        if input_h % f != 0 || input_w % f != 0 {
            return Err(MontageError::ShapeMismatch {
                layer: "input".into(),
                expected: format!("spatial size divisible by {f}"),
                got: format!("{input_h}x{input_w}"),
            });
        }
        Ok(FeatureGeometry {
            input_h,
            input_w,
            feature_h: input_h / f,
            feature_w: input_w / f,
            alpha: 1.0 / f as f64,
        })
    }

    /// Input-space center of a feature cell.
    pub fn cell_center(&self, j: usize, k: usize) -> (f64, f64) {
        let f = 1.0 / self.alpha;
        ((k as f64 + 0.5) * f, (j as f64 + 0.5) * f)
    }
}

/// Learnable state of the toy network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub stage_weights: Vec<Tensor>, // (out, in, 3, 3)
    pub stage_biases: Vec<Tensor>,  // (out)
    pub head_weight: Tensor,        // (classes, feat)
    pub head_bias: Tensor,          // (classes)
}

impl NetworkParams {
    /// Fan-in-scaled uniform initialization, seeded.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut stage_weights = Vec::new();
        let mut stage_biases = Vec::new();
        let mut c_in = arch.in_channels;
        for (s, &c_out) in arch.stage_channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let limit = (1.0 / fan_in as f64).sqrt();
            let mut rng = stream_rng2(seed, 0x77, s as u64);
            let data = (0..c_out * c_in * 9)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
                .collect();
            stage_weights.push(Tensor::new(vec![c_out, c_in, 3, 3], data));
            stage_biases.push(Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        let fan_in = arch.feature_channels();
        let limit = (1.0 / fan_in as f64).sqrt();
        let mut rng = stream_rng2(seed, 0x77, HEAD_STREAM);
        let head_weight = Tensor::new(
            vec![arch.num_classes, fan_in],
            (0..arch.num_classes * fan_in)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
                .collect(),
        );
        let head_bias = Tensor::zeros(vec![arch.num_classes]);
        NetworkParams {
            arch,
            stage_weights,
            stage_biases,
            head_weight,
            head_bias,
        }
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            stage_weights: self.stage_weights.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
            stage_biases: self.stage_biases.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
            head_weight: Tensor::zeros(self.head_weight.shape.clone()),
            head_bias: Tensor::zeros(self.head_bias.shape.clone()),
            input: None,
        }
    }

    pub fn tensor_list(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (w, b) in self.stage_weights.iter().zip(&self.stage_biases) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    pub fn tensor_list_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for (w, b) in self.stage_weights.iter_mut().zip(self.stage_biases.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensor_list()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for t in self.tensor_list_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        assert_eq!(pos, flat.len());
    }

    pub fn num_params(&self) -> usize {
        self.tensor_list().iter().map(|t| t.numel()).sum()
    }
}

const HEAD_STREAM: u64 = 0x4845_4144; // "HEAD"

/// Shape-congruent gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub stage_weights: Vec<Tensor>,
    pub stage_biases: Vec<Tensor>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub input: Option<Tensor>,
}

impl Gradients {
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.stage_weights.iter_mut().zip(&other.stage_weights) {
            a.add_assign(b);
        }
        for (a, b) in self.stage_biases.iter_mut().zip(&other.stage_biases) {
            a.add_assign(b);
        }
        self.head_weight.add_assign(&other.head_weight);
        self.head_bias.add_assign(&other.head_bias);
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.stage_weights.iter_mut().chain(self.stage_biases.iter_mut()) {
            t.scale(k);
        }
        self.head_weight.scale(k);
        self.head_bias.scale(k);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.stage_weights.iter().zip(&self.stage_biases) {
            v.extend_from_slice(&w.data);
            v.extend_from_slice(&b.data);
        }
        v.extend_from_slice(&self.head_weight.data);
        v.extend_from_slice(&self.head_bias.data);
        v
    }
}

/// Cached activations for one sample's forward pass.
pub struct SampleForward {
    /// Input to each conv stage (stage 0 holds the image).
    pub stage_inputs: Vec<Tensor>,
    /// Conv output before ReLU, per stage.
    pub pre_activations: Vec<Tensor>,
    /// Feature map X after the last pool, shape (C_feat, fh, fw).
    pub features: Tensor,
    /// Per-position logits, shape (classes, fh, fw).
    pub logits: Tensor,
}

fn conv3x3_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let co = weight.shape[0];
    let mut out = Tensor::zeros(vec![co, h, w]);
    for o in 0..co {
        let b = bias.data[o];
        for y in 0..h {
            for v in out.row_mut(o, y) {
                *v = b;
            }
        }
        for i in 0..ci {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = weight.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = match kx {
                        0 => (1usize, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    let s0 = (x0 as isize + kx as isize - 1) as usize;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = input.row(i, sy as usize);
                        let dst = out.row_mut(o, y);
                        for (d, s) in dst[x0..x1].iter_mut().zip(&src[s0..s0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let co = weight.shape[0];
    let mut grad_w = Tensor::zeros(weight.shape.clone());
    let mut grad_b = Tensor::zeros(vec![co]);
    let mut grad_in = if want_input_grad {
        Some(Tensor::zeros(input.shape.clone()))
    } else {
        None
    };
    for o in 0..co {
        let mut bsum = 0.0;
        for y in 0..h {
            bsum += grad_out.row(o, y).iter().sum::<f64>();
        }
        grad_b.data[o] = bsum;
        for i in 0..ci {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let (x0, x1) = match kx {
                        0 => (1usize, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    let s0 = (x0 as isize + kx as isize - 1) as usize;
                    let mut wsum = 0.0;
                    let wv = weight.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let go = grad_out.row(o, y);
                        let src = input.row(i, sy as usize);
                        for (g, s) in go[x0..x1].iter().zip(&src[s0..s0 + (x1 - x0)]) {
                            wsum += g * s;
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            let dst = gi.row_mut(i, sy as usize);
                            for (d, g) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(&go[x0..x1]) {
                                *d += wv * g;
                            }
                        }
                    }
                    grad_w.data[((o * ci + i) * 3 + ky) * 3 + kx] = wsum;
                }
            }
        }
    }
    (grad_w, grad_b, grad_in)
}

fn relu_forward(t: &Tensor) -> Tensor {
    Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v.max(0.0)).collect())
}

/// ReLU subgradient at exactly 0 is 0.
fn relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avgpool2_forward(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            let r0 = t.row(ch, 2 * y);
            let r1 = t.row(ch, 2 * y + 1);
            let dst = out.row_mut(ch, y);
            for x in 0..ow {
                dst[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    out
}

fn avgpool2_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let c = grad_out.shape[0];
    let mut out = Tensor::zeros(vec![c, in_h, in_w]);
    for ch in 0..c {
        for y in 0..grad_out.shape[1] {
            let src = grad_out.row(ch, y);
            for dy in 0..2 {
                let dst = out.row_mut(ch, 2 * y + dy);
                for x in 0..src.len() {
                    let g = 0.25 * src[x];
                    dst[2 * x] = g;
                    dst[2 * x + 1] = g;
                }
            }
        }
    }
    out
}

fn head_forward(features: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (cf, h, w) = (features.shape[0], features.shape[1], features.shape[2]);
    let k = weight.shape[0];
    let mut out = Tensor::zeros(vec![k, h, w]);
    for o in 0..k {
        for y in 0..h {
            for v in out.row_mut(o, y) {
                *v = bias.data[o];
            }
        }
        for i in 0..cf {
            let wv = weight.data[o * cf + i];
            for y in 0..h {
                let src = features.row(i, y);
                let dst = out.row_mut(o, y);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

/// Forward pass on one sample of shape (in_channels, H, W).
pub fn forward_sample(params: &NetworkParams, input: &Tensor) -> Result<SampleForward> {
    if input.shape.len() != 3 || input.shape[0] != params.arch.in_channels {
        return Err(MontageError::ShapeMismatch {
            layer: "input".into(),
            expected: format!("({}, H, W)", params.arch.in_channels),
            got: format!("{:?}", input.shape),
        });
    }
    FeatureGeometry::for_input(&params.arch, input.shape[1], input.shape[2])?;

    let mut stage_inputs = Vec::with_capacity(params.stage_weights.len());
    let mut pre_activations = Vec::with_capacity(params.stage_weights.len());
    let mut cur = input.clone();
    for (w, b) in params.stage_weights.iter().zip(&params.stage_biases) {
        let pre = conv3x3_forward(&cur, w, b);
        let act = relu_forward(&pre);
        let pooled = avgpool2_forward(&act);
        stage_inputs.push(cur);
        pre_activations.push(pre);
        cur = pooled;
    }
    let features = cur;
    let logits = head_forward(&features, &params.head_weight, &params.head_bias);
    Ok(SampleForward {
        stage_inputs,
        pre_activations,
        features,
        logits,
    })
}

/// Reverse-mode pass for one sample. `grad_logits` feeds the head path,
/// `grad_features` injects directly on X (used for ERF probes); either may
/// be absent.
pub fn backward_sample(
    params: &NetworkParams,
    fwd: &SampleForward,
    grad_logits: Option<&Tensor>,
    grad_features: Option<&Tensor>,
    want_input_grad: bool,
) -> Result<Gradients> {
    let cf = fwd.features.shape[0];
    let (fh, fw) = (fwd.features.shape[1], fwd.features.shape[2]);
    let k = params.arch.num_classes;

    let mut grad_head_w = Tensor::zeros(params.head_weight.shape.clone());
    let mut grad_head_b = Tensor::zeros(vec![k]);
    let mut grad_x = Tensor::zeros(vec![cf, fh, fw]);

    if let Some(gl) = grad_logits {
        if gl.shape != fwd.logits.shape {
            return Err(MontageError::ShapeMismatch {
                layer: "head".into(),
                expected: format!("{:?}", fwd.logits.shape),
                got: format!("{:?}", gl.shape),
            });
        }
        for o in 0..k {
            let mut bsum = 0.0;
            for y in 0..fh {
                bsum += gl.row(o, y).iter().sum::<f64>();
            }
            grad_head_b.data[o] = bsum;
            for i in 0..cf {
                let wv = params.head_weight.data[o * cf + i];
                let mut wsum = 0.0;
                for y in 0..fh {
                    let g = gl.row(o, y);
                    let f = fwd.features.row(i, y);
                    for (gv, fv) in g.iter().zip(f) {
                        wsum += gv * fv;
                    }
                    let dst = grad_x.row_mut(i, y);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
                grad_head_w.data[o * cf + i] = wsum;
            }
        }
    }
    if let Some(gx) = grad_features {
        if gx.shape != fwd.features.shape {
            return Err(MontageError::ShapeMismatch {
                layer: "features".into(),
                expected: format!("{:?}", fwd.features.shape),
                got: format!("{:?}", gx.shape),
            });
        }
        grad_x.add_assign(gx);
    }

    let stages = params.stage_weights.len();
    let mut grad_sw = vec![Tensor::zeros(vec![0]); stages];
    let mut grad_sb = vec![Tensor::zeros(vec![0]); stages];
    let mut grad_cur = grad_x;
    // with no stages the input is X itself
    let mut input_grad = if stages == 0 && want_input_grad {
        Some(grad_cur.clone())
    } else {
        None
    };
    for s in (0..stages).rev() {
        let pre = &fwd.pre_activations[s];
        let mut g = avgpool2_backward(&grad_cur, pre.shape[1], pre.shape[2]);
        relu_backward(pre, &mut g);
        let need_below = s > 0 || want_input_grad;
        let (gw, gb, gi) =
            conv3x3_backward(&fwd.stage_inputs[s], &params.stage_weights[s], &g, need_below);
        grad_sw[s] = gw;
        grad_sb[s] = gb;
        match gi {
            Some(t) if s == 0 => input_grad = Some(t),
            Some(t) => grad_cur = t,
            None => break,
        }
    }

    Ok(Gradients {
        stage_weights: grad_sw,
        stage_biases: grad_sb,
        head_weight: grad_head_w,
        head_bias: grad_head_b,
        input: input_grad,
    })
}

/// Classic momentum SGD with L2-in-gradient weight decay:
/// `v <- m*v + g + wd*p; p <- p - lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Vec<Tensor>,
}

impl MomentumState {
    pub fn new(params: &NetworkParams) -> Self {
        MomentumState {
            velocity: params
                .tensor_list()
                .iter()
                .map(|t| Tensor::zeros(t.shape.clone()))
                .collect(),
        }
    }
}

pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    state: &mut MomentumState,
) {
    let mut grad_list: Vec<&Tensor> = Vec::new();
    for (w, b) in grads.stage_weights.iter().zip(&grads.stage_biases) {
        grad_list.push(w);
        grad_list.push(b);
    }
    grad_list.push(&grads.head_weight);
    grad_list.push(&grads.head_bias);

    for ((p, g), v) in params
        .tensor_list_mut()
        .into_iter()
        .zip(grad_list)
        .zip(state.velocity.iter_mut())
    {
        for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
}

/// Central finite-difference check on a random coordinate subsample.
/// Returns the maximum relative error over the sampled coordinates.
pub fn grad_check_flat<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let n = point.len();
    let mut rng: ChaCha8Rng = crate::rng::stream_rng(seed, 0x6763);
    // ReLU makes the loss piecewise smooth; a central difference straddling
    // a kink is meaningless. Each coordinate is probed at two step sizes and
    // skipped (with a replacement drawn) when the estimates disagree, which
    // only happens at a kink — an incorrect analytic gradient on a smooth
    // stretch still fails against both steps.
    let mut diff = |work: &mut Vec<f64>, i: usize, h: f64| -> f64 {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(work);
        work[i] = orig - h;
        let fm = f(work);
        work[i] = orig;
        (fp - fm) / (2.0 * h)
    };
    let exhaustive = n <= min_coords;
    let budget = if exhaustive { n } else { 8 * min_coords };
    let mut work = point.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for attempt in 0..budget {
        if !exhaustive && checked >= min_coords {
            break;
        }
        let i = if exhaustive {
            attempt
        } else {
            rng.gen_range(0..n)
        };
        let numeric = diff(&mut work, i, epsilon);
        let numeric_small = diff(&mut work, i, epsilon / 16.0);
        let agree = (numeric - numeric_small).abs()
            / numeric.abs().max(numeric_small.abs()).max(1e-6);
        if agree > 1e-3 {
            continue; // kink straddle at this scale
        }
        checked += 1;
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}

/// Finite-difference check of a loss over network parameters.
pub fn grad_check<F: FnMut(&NetworkParams) -> f64>(
    mut loss: F,
    params: &NetworkParams,
    analytic: &Gradients,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> f64 {
    let point = params.flatten();
    let grad = analytic.flatten();
    let mut scratch = params.clone();
    grad_check_flat(
        |flat| {
            scratch.unflatten_into(flat);
            loss(&scratch)
        },
        &point,
        &grad,
        epsilon,
        min_coords,
        seed,
    )
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MNTG";
const CHECKPOINT_VERSION: u32 = 1;

/// Save parameters: magic, version, architecture descriptor, then flat f64
/// little-endian arrays in fixed tensor order.
pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.arch.in_channels as u32).to_le_bytes());
    out.extend_from_slice(&(params.arch.stage_channels.len() as u32).to_le_bytes());
    for &c in &params.arch.stage_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.arch.num_classes as u32).to_le_bytes());
    for t in params.tensor_list() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|source| MontageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|source| MontageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |m: &str| MontageError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let mut pos = 4usize;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(MontageError::Checkpoint("truncated header".into()));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(err("unsupported version"));
    }
    let in_channels = read_u32(&mut pos)? as usize;
    let num_stages = read_u32(&mut pos)? as usize;
    let mut stage_channels = Vec::with_capacity(num_stages);
    for _ in 0..num_stages {
        stage_channels.push(read_u32(&mut pos)? as usize);
    }
    let num_classes = read_u32(&mut pos)? as usize;
    let arch = Architecture {
        in_channels,
        stage_channels,
        num_classes,
    };
    let mut params = NetworkParams::init(arch, 0);
    let expected = params.num_params() * 8;
    if bytes.len() - pos != expected {
        return Err(err("payload size mismatch"));
    }
    for t in params.tensor_list_mut() {
        for v in t.data.iter_mut() {
            *v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(stages: Vec<usize>, classes: usize) -> Architecture {
        Architecture {
            in_channels: 3,
            stage_channels: stages,
            num_classes: classes,
        }
    }

    /// Naive nested-loop convolution reference.
    fn conv_reference(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let co = weight.shape[0];
        let mut out = Tensor::zeros(vec![co, h, w]);
        for o in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.data[o];
                    for i in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y as isize + ky - 1;
                                let sx = x as isize + kx - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += input.at3(i, sy as usize, sx as usize)
                                        * weight.data
                                            [((o * ci + i) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    out.set3(o, y, x, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, 0);
        for &(ci, co, h, w) in &[(1usize, 1usize, 4usize, 5usize), (2, 3, 6, 6), (3, 2, 5, 7)] {
            let input = Tensor::new(vec![ci, h, w], (0..ci * h * w).map(|_| rng.gen::<f64>() - 0.5).collect());
            let weight = Tensor::new(vec![co, ci, 3, 3], (0..co * ci * 9).map(|_| rng.gen::<f64>() - 0.5).collect());
            let bias = Tensor::new(vec![co], (0..co).map(|_| rng.gen::<f64>()).collect());
            let fast = conv3x3_forward(&input, &weight, &bias);
            let slow = conv_reference(&input, &weight, &bias);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_on_5x5() {
        // center-tap kernel passes the input through
        let input = Tensor::new(vec![1, 5, 5], (0..25).map(|v| v as f64).collect());
        let mut weight = Tensor::zeros(vec![1, 1, 3, 3]);
        weight.data[4] = 1.0; // center tap
        let bias = Tensor::zeros(vec![1]);
        let out = conv3x3_forward(&input, &weight, &bias);
        assert_eq!(out.data, input.data);
        // shifted tap correlates: w[0][0] picks input at (y-1, x-1)
        let mut shift = Tensor::zeros(vec![1, 1, 3, 3]);
        shift.data[0] = 1.0;
        let out = conv3x3_forward(&input, &shift, &bias);
        assert_eq!(out.at3(0, 1, 1), 0.0 + input.at3(0, 0, 0));
        assert_eq!(out.at3(0, 0, 0), 0.0); // padding
        assert_eq!(out.at3(0, 4, 4), input.at3(0, 3, 3));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = tiny_arch(vec![4], 5);
        let mut params = NetworkParams::init(arch, 1);
        for t in params.tensor_list_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::new(vec![3, 8, 8], vec![0.3; 3 * 64]);
        let fwd = forward_sample(&params, &input).unwrap();
        assert!(fwd.logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_inputs_give_identical_logits() {
        let arch = tiny_arch(vec![4, 8], 3);
        let params = NetworkParams::init(arch, 9);
        let input = Tensor::new(vec![3, 8, 8], (0..192).map(|v| (v as f64).sin()).collect());
        let a = forward_sample(&params, &input).unwrap();
        let b = forward_sample(&params, &input).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let arch = tiny_arch(vec![4], 3);
        let params = NetworkParams::init(arch, 1);
        let input = Tensor::zeros(vec![2, 8, 8]);
        match forward_sample(&params, &input) {
            Err(MontageError::ShapeMismatch { layer, .. }) => assert_eq!(layer, "input"),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let arch = tiny_arch(vec![4], 3);
        let params = NetworkParams::init(arch.clone(), 1);
        let input = Tensor::new(vec![3, 8, 8], vec![0.5; 192]);
        let fwd = forward_sample(&params, &input).unwrap();
        let zero = Tensor::zeros(fwd.logits.shape.clone());
        let g = backward_sample(&params, &fwd, Some(&zero), None, true).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(g.input.unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_at_zero_has_zero_subgradient() {
        let pre = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]);
        let mut g = Tensor::new(vec![1, 1, 3], vec![5.0, 5.0, 5.0]);
        relu_backward(&pre, &mut g);
        assert_eq!(g.data, vec![0.0, 0.0, 5.0]);
    }

    fn weighted_logit_loss(params: &NetworkParams, input: &Tensor, weights: &[f64]) -> f64 {
        let fwd = forward_sample(params, input).unwrap();
        fwd.logits
            .data
            .iter()
            .zip(weights)
            .map(|(l, w)| l * w)
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let arch = tiny_arch(vec![3, 4], 3);
        let params = NetworkParams::init(arch, 5);
        let mut rng = crate::rng::stream_rng(11, 0);
        let input = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen::<f64>() - 0.5).collect());
        let fwd = forward_sample(&params, &input).unwrap();
        let weights: Vec<f64> = (0..fwd.logits.numel()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let upstream = Tensor::new(fwd.logits.shape.clone(), weights.clone());
        let analytic = backward_sample(&params, &fwd, Some(&upstream), None, false).unwrap();
        let max_rel = grad_check(
            |p| weighted_logit_loss(p, &input, &weights),
            &params,
            &analytic,
            1e-4,
            200,
            99,
        );
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        use rand::Rng;
        let arch = tiny_arch(vec![3], 2);
        let params = NetworkParams::init(arch, 5);
        let mut rng = crate::rng::stream_rng(13, 0);
        let input = Tensor::new(vec![3, 4, 4], (0..48).map(|_| rng.gen::<f64>() - 0.5).collect());
        let fwd = forward_sample(&params, &input).unwrap();
        let weights: Vec<f64> = (0..fwd.logits.numel()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let upstream = Tensor::new(fwd.logits.shape.clone(), weights.clone());
        let analytic = backward_sample(&params, &fwd, Some(&upstream), None, true).unwrap();
        let gi = analytic.input.unwrap();
        let max_rel = grad_check_flat(
            |flat| {
                let probe = Tensor::new(input.shape.clone(), flat.to_vec());
                weighted_logit_loss(&params, &probe, &weights)
            },
            &input.data,
            &gi.data,
            1e-4,
            48,
            3,
        );
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let point: Vec<f64> = vec![1.0, -2.0, 0.5];
        let analytic: Vec<f64> = point.iter().map(|v| 2.0 * v).collect();
        let err = grad_check_flat(
            |x| x.iter().map(|v| v * v).sum(),
            &point,
            &analytic,
            1e-4,
            3,
            1,
        );
        assert!(err < 1e-8, "quadratic error {err}");
        let err = grad_check_flat(|_| 3.0, &point, &[0.0, 0.0, 0.0], 1e-4, 3, 1);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sgd_examples() {
        let arch = tiny_arch(vec![1], 1);
        // lr = 0: params unchanged
        let mut p = NetworkParams::init(arch.clone(), 1);
        let before = p.flatten();
        let mut g = p.zeros_like();
        for t in g.stage_weights.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut st = MomentumState::new(&p);
        sgd_step(&mut p, &g, 0.0, 0.0, 0.9, &mut st);
        assert_eq!(p.flatten(), before);

        // scalar trace: p=1, g=1, lr=0.5 -> p=0.5
        let mut p = NetworkParams::init(arch.clone(), 1);
        for t in p.tensor_list_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut g = p.zeros_like();
        g.head_bias.data[0] = 1.0;
        let mut st = MomentumState::new(&p);
        sgd_step(&mut p, &g, 0.5, 0.0, 0.0, &mut st);
        assert_eq!(p.head_bias.data[0], 0.5);

        // two momentum steps from 0 with constant gradient 1 -> -2.9
        let mut p = NetworkParams::init(arch, 1);
        for t in p.tensor_list_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = p.zeros_like();
        g.head_bias.data[0] = 1.0;
        let mut st = MomentumState::new(&p);
        sgd_step(&mut p, &g, 1.0, 0.0, 0.9, &mut st);
        sgd_step(&mut p, &g, 1.0, 0.0, 0.9, &mut st);
        assert!((p.head_bias.data[0] - (-2.9)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let arch = tiny_arch(vec![4, 8], 5);
        let params = NetworkParams::init(arch, 17);
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        let input = Tensor::new(vec![3, 8, 8], (0..192).map(|v| (v as f64).cos()).collect());
        let a = forward_sample(&params, &input).unwrap();
        let b = forward_sample(&loaded, &input).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }
}
