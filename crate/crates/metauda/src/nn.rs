//! Neural layers and loss primitives shared by the detector and the domain
//! discriminators: convolution and pooling built on the gather primitive,
//! fully-connected layers, the gradient reversal layer and the least-squares
//! domain loss.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, ParameterSet, TensorData, Var};
use crate::{Error, Result};

/// 1 = source, 0 = target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainLabel {
    Source,
    Target,
}

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Gradient reversal with weight lambda_grl.
    Grl { lambda: f64 },
    /// Stride-1 convolution with explicit zero padding.
    Conv { in_ch: usize, out_ch: usize, kernel: usize, pad: usize },
    /// Fully connected (row-major x[N, in] * w[in, out] + b).
    Fc { in_dim: usize, out_dim: usize },
    Relu,
    /// Inverted dropout: training output has the same expectation as input.
    Dropout { keep: f64 },
    /// 2-D max pool, square window, stride == window.
    Pool { size: usize },
}

/// Dropout behaviour selector for a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Flat index table for im2col: rows are (c, ky, kx) taps, columns are output
/// positions. -1 marks zero padding.
fn conv_indices(c_in: usize, h: usize, w: usize, k: usize, pad: usize) -> (Rc<Vec<i64>>, usize, usize) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut idx = Vec::with_capacity(c_in * k * k * oh * ow);
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = oy as i64 + ky as i64 - pad as i64;
                        let ix = ox as i64 + kx as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            idx.push(-1);
                        } else {
                            idx.push((c * h * w) as i64 + iy * w as i64 + ix);
                        }
                    }
                }
            }
        }
    }
    (Rc::new(idx), oh, ow)
}

/// x: [C, H, W]; weight: [F, C, k, k]; bias: [F]. Stride 1.
pub fn conv2d(x: &Var, weight: &Var, bias: &Var, pad: usize) -> Var {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 3, "conv2d: input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv2d: weight must be [F,C,k,k]");
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (f, wc, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
    assert_eq!(c, wc, "conv2d: channel mismatch");
    let (idx, oh, ow) = conv_indices(c, h, w, k, pad);
    let cols = x.gather(idx, vec![c * k * k, oh * ow]);
    let wmat = weight.reshape(vec![f, c * k * k]);
    let y = wmat.matmul(&cols);
    let ones_row = Var::constant(x.graph(), vec![1, oh * ow], vec![1.0; oh * ow]);
    let b = bias.reshape(vec![f, 1]).matmul(&ones_row);
    y.add(&b).reshape(vec![f, oh, ow])
}

/// Max pool [C, H, W] with a square window and stride == window. The argmax
/// positions come from the current forward values, so the backward pass
/// routes gradient to the max element only.
pub fn maxpool2d(x: &Var, size: usize) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 3, "maxpool2d: input must be [C,H,W]");
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    assert!(h % size == 0 && w % size == 0, "maxpool2d: extents not divisible");
    let (oh, ow) = (h / size, w / size);
    let data = x.data();
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (oy * size) * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let cand = ch * h * w + (oy * size + dy) * w + (ox * size + dx);
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                }
                idx.push(best as i64);
            }
        }
    }
    x.gather(Rc::new(idx), vec![c, oh, ow])
}

/// x: [N, in]; weight: [in, out]; bias: [out].
pub fn fully_connected(x: &Var, weight: &Var, bias: &Var) -> Var {
    let n = x.shape()[0];
    let out = weight.shape()[1];
    let y = x.matmul(weight);
    let ones_col = Var::constant(x.graph(), vec![n, 1], vec![1.0; n]);
    let b = ones_col.matmul(&bias.reshape(vec![1, out]));
    y.add(&b)
}

/// Identity forward; backward multiplies upstream gradient by -lambda.
pub fn grl_apply(x: &Var, lambda_grl: f64) -> Var {
    x.grl(lambda_grl)
}

/// Least-squares domain loss: mean over all map positions of
/// y_d*(1-p)^2 + (1-y_d)*p^2 with p = sigmoid(pred). Bounded in [0, 1).
pub fn ls_domain_loss(pred: &Var, y_d: DomainLabel) -> Result<Var> {
    if pred.len() == 0 {
        return Err(Error::contract("ls_domain_loss: empty prediction map"));
    }
    let p = pred.sigmoid();
    let per_pos = match y_d {
        DomainLabel::Source => p.ones_like().sub(&p).square(),
        DomainLabel::Target => p.square(),
    };
    Ok(per_pos.mean_all())
}

/// Mean negative log-likelihood over (N, K) logits.
pub fn softmax_ce(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::contract("softmax_ce: logits must be (N, K)"));
    }
    if labels.len() != shape[0] {
        return Err(Error::contract("softmax_ce: one label per row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::contract(format!(
            "softmax_ce: label {bad} out of range for K={}",
            shape[1]
        )));
    }
    Ok(logits.softmax_ce(Rc::new(labels.to_vec())))
}

/// Mean smooth-L1 between equal-shape tensors.
pub fn smooth_l1(pred: &Var, target: &Var) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(Error::contract("smooth_l1: shape mismatch"));
    }
    Ok(pred.smooth_l1(target))
}

fn dropout(x: &Var, keep: f64, mode: &mut Mode) -> Var {
    match mode {
        Mode::Eval => x.clone(),
        Mode::Train(rng) => {
            let n = x.len();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = Var::constant(x.graph(), x.shape(), mask);
            x.mul(&m)
        }
    }
}

/// A sequential network whose parameters live under a fixed path prefix.
#[derive(Debug, Clone)]
pub struct Network {
    prefix: String,
    layers: Vec<LayerSpec>,
}

impl Network {
    /// Validates layer extents and adjacency. Discriminators are additionally
    /// required (by `build_discriminator`) to start with a GRL.
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Network> {
        let mut feat: Option<usize> = None; // channels for conv, dims for fc
        let mut kind: Option<&'static str> = None;
        for l in &layers {
            match l {
                LayerSpec::Grl { lambda } => {
                    if *lambda < 0.0 {
                        return Err(Error::contract("grl lambda must be non-negative"));
                    }
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    if *in_ch == 0 || *out_ch == 0 || *kernel == 0 {
                        return Err(Error::contract("conv extents must be positive"));
                    }
                    if kind == Some("fc") {
                        return Err(Error::contract("conv after fully-connected layer"));
                    }
                    if let Some(f) = feat {
                        if f != *in_ch {
                            return Err(Error::contract(format!(
                                "shape-incompatible layers: {f} features feed conv expecting {in_ch}"
                            )));
                        }
                    }
                    feat = Some(*out_ch);
                    kind = Some("conv");
                }
                LayerSpec::Fc { in_dim, out_dim } => {
                    if *in_dim == 0 || *out_dim == 0 {
                        return Err(Error::contract("fc extents must be positive"));
                    }
                    if kind == Some("conv") {
                        return Err(Error::contract("fc after conv layer not supported here"));
                    }
                    if let Some(f) = feat {
                        if f != *in_dim {
                            return Err(Error::contract(format!(
                                "shape-incompatible layers: {f} features feed fc expecting {in_dim}"
                            )));
                        }
                    }
                    feat = Some(*out_dim);
                    kind = Some("fc");
                }
                LayerSpec::Dropout { keep } => {
                    if !(*keep > 0.0 && *keep <= 1.0) {
                        return Err(Error::contract("dropout keep must be in (0, 1]"));
                    }
                }
                LayerSpec::Relu | LayerSpec::Pool { .. } => {}
            }
        }
        Ok(Network { prefix: prefix.into(), layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Centered-uniform init with scale 1/sqrt(fan_in); biases zero.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParameterSet {
        let mut params = ParameterSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    let fan_in = in_ch * kernel * kernel;
                    let w = init_uniform(rng, &[*out_ch, *in_ch, *kernel, *kernel], fan_in);
                    params.insert(format!("{}.{}.w", self.prefix, i), w);
                    params.insert(
                        format!("{}.{}.b", self.prefix, i),
                        TensorData::zeros(vec![*out_ch]),
                    );
                }
                LayerSpec::Fc { in_dim, out_dim } => {
                    let w = init_uniform(rng, &[*in_dim, *out_dim], *in_dim);
                    params.insert(format!("{}.{}.w", self.prefix, i), w);
                    params.insert(
                        format!("{}.{}.b", self.prefix, i),
                        TensorData::zeros(vec![*out_dim]),
                    );
                }
                _ => {}
            }
        }
        params
    }

    pub fn forward(&self, x: &Var, bound: &BoundParams, mode: &mut Mode) -> Var {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = match l {
                LayerSpec::Grl { lambda } => grl_apply(&cur, *lambda),
                LayerSpec::Conv { pad, .. } => {
                    let w = bound.var(&format!("{}.{}.w", self.prefix, i));
                    let b = bound.var(&format!("{}.{}.b", self.prefix, i));
                    conv2d(&cur, w, b, *pad)
                }
                LayerSpec::Fc { .. } => {
                    let w = bound.var(&format!("{}.{}.w", self.prefix, i));
                    let b = bound.var(&format!("{}.{}.b", self.prefix, i));
                    fully_connected(&cur, w, b)
                }
                LayerSpec::Relu => cur.relu(),
                LayerSpec::Dropout { keep } => dropout(&cur, *keep, mode),
                LayerSpec::Pool { size } => maxpool2d(&cur, *size),
            };
        }
        cur
    }
}

pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> TensorData {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    TensorData::new(shape.to_vec(), data)
}

/// A domain discriminator must start with a gradient reversal layer.
pub fn build_discriminator(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Network> {
    if !matches!(layers.first(), Some(LayerSpec::Grl { .. })) {
        return Err(Error::contract("discriminator spec must begin with a GRL layer"));
    }
    Network::new(prefix, layers)
}

/// Image-level discriminator: GRL; 1x1 conv -> width; two 3x3 convs at width;
/// 3x3 conv -> 1 score map. `width` defaults to 8 (the full-scale stack uses 64).
pub fn image_discriminator_spec(in_ch: usize, width: usize, lambda_grl: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Grl { lambda: lambda_grl },
        LayerSpec::Conv { in_ch, out_ch: width, kernel: 1, pad: 0 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_ch: width, out_ch: width, kernel: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_ch: width, out_ch: width, kernel: 3, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_ch: width, out_ch: 1, kernel: 3, pad: 1 },
    ]
}

/// Instance-level discriminator: GRL; FC in->width; FC width->width; FC width->1.
/// `width` defaults to 32 (the full-scale stack uses 1024).
pub fn instance_discriminator_spec(in_dim: usize, width: usize, lambda_grl: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Grl { lambda: lambda_grl },
        LayerSpec::Fc { in_dim, out_dim: width },
        LayerSpec::Relu,
        LayerSpec::Fc { in_dim: width, out_dim: width },
        LayerSpec::Relu,
        LayerSpec::Fc { in_dim: width, out_dim: 1 },
    ]
}
