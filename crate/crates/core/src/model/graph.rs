//! Minimal reverse-mode tape for the encoder-decoder.
//!
//! Every tensor is a single sample laid out as `channels × height × width`.
//! Parameters live in one flat vector; [`LayerSpec`] records where each
//! convolution's weights and biases sit inside it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), c * h * w);
        Tensor { c, h, w, data }
    }

    fn like(&self, data: Vec<f64>) -> Self {
        Tensor::from_data(self.c, self.h, self.w, data)
    }
}

/// Geometry and parameter offsets of one convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSpec {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn out_dim(&self, n: usize) -> usize {
        let pad = self.kernel / 2;
        (n + 2 * pad - self.kernel) / self.stride + 1
    }
}

pub(crate) type NodeId = usize;

enum Op {
    Leaf,
    Conv {
        layer: usize,
        input: NodeId,
        cols: Vec<f64>,
    },
    Relu {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Upsample2 {
        input: NodeId,
    },
    PixelShuffle {
        input: NodeId,
        factor: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Dropout behaviour for one pass.
pub(crate) enum DropoutMode {
    /// Identity; the inverted-dropout scaling makes this the mask expectation.
    Off,
    Sample { p: f64, rng: ChaCha8Rng },
}

pub(crate) struct Tape<'a> {
    layers: &'a [LayerSpec],
    params: &'a [f64],
    nodes: Vec<Node>,
    record: bool,
    dropout: DropoutMode,
}

fn im2col(x: &Tensor, spec: &LayerSpec, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let p = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * p];
    for ci in 0..x.c {
        let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride) as isize + kr as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride) as isize + kc as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], spec: &LayerSpec, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let p = oh * ow;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride) as isize + kr as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride) as isize + kc as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = alpha·op(a)·op(b) + beta·c` over row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every buffer is sized for the given dimensions and strides by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Tape<'a> {
    pub fn new(layers: &'a [LayerSpec], params: &'a [f64], record: bool, dropout: DropoutMode) -> Self {
        Tape {
            layers,
            params,
            nodes: Vec::new(),
            record,
            dropout,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn conv(&mut self, layer: usize, input: NodeId) -> NodeId {
        let spec = &self.layers[layer];
        let x = &self.nodes[input].value;
        debug_assert_eq!(x.c, spec.in_channels);
        let (oh, ow) = (spec.out_dim(x.h), spec.out_dim(x.w));
        let p = oh * ow;
        let cols = im2col(x, spec, oh, ow);
        let mut out = Tensor::zeros(spec.out_channels, oh, ow);
        let bias = &self.params[spec.bias_offset..spec.bias_offset + spec.out_channels];
        for (co, b) in bias.iter().enumerate() {
            out.data[co * p..(co + 1) * p].fill(*b);
        }
        let weight = &self.params[spec.weight_offset..spec.weight_offset + spec.weight_len()];
        let kk = spec.patch_len();
        gemm(spec.out_channels, kk, p, weight, (kk, 1), &cols, (p, 1), 1.0, &mut out.data);
        let cols = if self.record { cols } else { Vec::new() };
        self.push(Op::Conv { layer, input, cols }, out)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let out = x.like(x.data.iter().map(|v| v.max(0.0)).collect());
        self.push(Op::Relu { input }, out)
    }

    pub fn dropout(&mut self, input: NodeId) -> NodeId {
        match &mut self.dropout {
            DropoutMode::Off => input,
            DropoutMode::Sample { p, rng } => {
                let p = *p;
                if p == 0.0 {
                    return input;
                }
                let keep = 1.0 - p;
                let scale = 1.0 / keep;
                let n = self.nodes[input].value.data.len();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let x = &self.nodes[input].value;
                let out = x.like(x.data.iter().zip(&mask).map(|(v, m)| v * m).collect());
                self.push(Op::Dropout { input, mask }, out)
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        debug_assert_eq!((x.c, x.h, x.w), (y.c, y.h, y.w));
        let out = x.like(x.data.iter().zip(&y.data).map(|(u, v)| u + v).collect());
        self.push(Op::Add { a, b }, out)
    }

    /// Nearest-neighbour ×2 enlargement.
    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let (h, w) = (x.h * 2, x.w * 2);
        let mut out = Tensor::zeros(x.c, h, w);
        for c in 0..x.c {
            for r in 0..h {
                for col in 0..w {
                    out.data[(c * h + r) * w + col] = x.data[(c * x.h + r / 2) * x.w + col / 2];
                }
            }
        }
        self.push(Op::Upsample2 { input }, out)
    }

    /// Rearranges `(C·s², h, w)` into `(C, h·s, w·s)`.
    pub fn pixel_shuffle(&mut self, input: NodeId, factor: usize) -> NodeId {
        let x = &self.nodes[input].value;
        let s = factor;
        let c_out = x.c / (s * s);
        let (h, w) = (x.h * s, x.w * s);
        let mut out = Tensor::zeros(c_out, h, w);
        for c in 0..c_out {
            for r in 0..h {
                for col in 0..w {
                    let src_c = c * s * s + (r % s) * s + col % s;
                    out.data[(c * h + r) * w + col] =
                        x.data[(src_c * x.h + r / s) * x.w + col / s];
                }
            }
        }
        self.push(Op::PixelShuffle { input, factor }, out)
    }

    /// Propagates output gradients back to the parameters, accumulating
    /// into `grads` (same layout as the parameter vector). Returns the
    /// gradients that reached leaf nodes.
    pub fn backward(&self, seeds: Vec<(NodeId, Vec<f64>)>, grads: &mut [f64]) -> Vec<(NodeId, Vec<f64>)> {
        assert!(self.record, "backward on a tape recorded without caches");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        fn acc(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
            match slot {
                Some(s) => s.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(delta),
            }
        }
        for (id, s) in seeds {
            acc(&mut g[id], s);
        }
        let mut leaves = Vec::new();
        for id in (0..self.nodes.len()).rev() {
            let Some(dout) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => leaves.push((id, dout)),
                Op::Conv { layer, input, cols } => {
                    let spec = &self.layers[*layer];
                    let x = &self.nodes[*input].value;
                    let (oh, ow) = (node.value.h, node.value.w);
                    let p = oh * ow;
                    let kk = spec.patch_len();
                    let co = spec.out_channels;
                    for c in 0..co {
                        grads[spec.bias_offset + c] += dout[c * p..(c + 1) * p].iter().sum::<f64>();
                    }
                    let gw = &mut grads[spec.weight_offset..spec.weight_offset + spec.weight_len()];
                    // dW += dOut · colsᵀ
                    gemm(co, p, kk, &dout, (p, 1), cols, (1, p), 1.0, gw);
                    let weight = &self.params[spec.weight_offset..spec.weight_offset + spec.weight_len()];
                    let mut dcols = vec![0.0; kk * p];
                    // dCols = Wᵀ · dOut
                    gemm(kk, co, p, weight, (1, kk), &dout, (p, 1), 0.0, &mut dcols);
                    let dx = col2im(&dcols, spec, x.c, x.h, x.w, oh, ow);
                    acc(&mut g[*input], dx.data);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[*input].value.data;
                    let dx = dout.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                    acc(&mut g[*input], dx);
                }
                Op::Dropout { input, mask } => {
                    let dx = dout.iter().zip(mask).map(|(d, m)| d * m).collect();
                    acc(&mut g[*input], dx);
                }
                Op::Add { a, b } => {
                    acc(&mut g[*b], dout.clone());
                    acc(&mut g[*a], dout);
                }
                Op::Upsample2 { input } => {
                    let x = &self.nodes[*input].value;
                    let (h, w) = (node.value.h, node.value.w);
                    let mut dx = vec![0.0; x.data.len()];
                    for c in 0..x.c {
                        for r in 0..h {
                            for col in 0..w {
                                dx[(c * x.h + r / 2) * x.w + col / 2] += dout[(c * h + r) * w + col];
                            }
                        }
                    }
                    acc(&mut g[*input], dx);
                }
                Op::PixelShuffle { input, factor } => {
                    let x = &self.nodes[*input].value;
                    let s = *factor;
                    let (c_out, h, w) = (node.value.c, node.value.h, node.value.w);
                    let mut dx = vec![0.0; x.data.len()];
                    for c in 0..c_out {
                        for r in 0..h {
                            for col in 0..w {
                                let src_c = c * s * s + (r % s) * s + col % s;
                                dx[(src_c * x.h + r / s) * x.w + col / s] = dout[(c * h + r) * w + col];
                            }
                        }
                    }
                    acc(&mut g[*input], dx);
                }
            }
        }
        leaves
    }
}
