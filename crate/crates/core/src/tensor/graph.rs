//! Reverse-mode computation graph over dense `f32` tensors.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes and return [`Var`] handles; [`Graph::backward`] walks the
//! nodes in reverse creation order (which is already a topological order)
//! and fills gradients for every node reachable from a `requires_grad` leaf.
//! The graph is dropped after the optimizer step, freeing all buffers.
//!
//! Parallelism is limited to loops whose output elements are disjoint
//! (matmul rows, independent neurons), so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Channel layout for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayout {
    /// `[R, C, H, W]`, statistics over `R*H*W` per channel.
    Nchw,
    /// `[..., C]`, statistics over all leading dims per channel.
    LastDim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    /// Batch statistics like `Train`; used to refresh running stats
    /// without touching weights.
    Calibrate,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    Mul(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        batch: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        eps: f32,
        mode: BnMode,
        /// Statistics used for normalization: batch stats in train/calibrate
        /// mode, the supplied running stats in eval mode.
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    LifSeq {
        input: Var,
        t_steps: usize,
        u_th: f32,
        decay: f32,
        surrogate_width: f32,
        soft: bool,
        saved_u: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f32,
        saved_a: Vec<f32>,
    },
    NchwToTokens(Var),
    MeanTokens(Var),
    MeanTime {
        x: Var,
        t_steps: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Below this output size, matmul stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 14;

/// `c = op(A) * op(B)` for row-major slices; A is logically `m x k`,
/// B is `k x n`. `ta`/`tb` flag transposed storage. `accumulate` adds
/// into `c` instead of overwriting.
fn mm(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let row = |c_row: &mut [f32], i: usize| {
        if !accumulate {
            c_row.fill(0.0);
        }
        if !tb {
            for p in 0..k {
                let av = if ta { a[p * m + i] } else { a[i * k + p] };
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..p * n + n];
                for (cv, bv) in c_row.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        } else {
            for (j, cv) in c_row.iter_mut().enumerate() {
                let brow = &b[j * k..j * k + k];
                let mut acc = 0.0f32;
                if ta {
                    for p in 0..k {
                        acc += a[p * m + i] * brow[p];
                    }
                } else {
                    let arow = &a[i * k..i * k + k];
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                }
                *cv += acc;
            }
        }
    };
    if m * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    // col layout: [cin*kh*kw, ho*wo]
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[((c * kh + ki) * kw + kj) * hw..][..hw];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        dst[oi * wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            x[(c * h + ii as usize) * w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[((c * kh + ki) * kw + kj) * hw..][..hw];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        x[(c * h + ii as usize) * w + jj as usize] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Rectangular surrogate window derivative.
#[inline]
fn surrogate_window(u: f32, u_th: f32, a: f32) -> f32 {
    if (u - u_th).abs() < a {
        1.0 / (2.0 * a)
    } else {
        0.0
    }
}

/// Soft spike used by the finite-difference oracle path: the integral of the
/// rectangular window, a clamped ramp through (u_th, 0.5).
#[inline]
fn soft_spike(u: f32, u_th: f32, a: f32) -> f32 {
    ((u - u_th) / (2.0 * a) + 0.5).clamp(0.0, 1.0)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.wants_grad();
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push(shape, data, needs, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    /// Batch statistics a train/calibrate-mode BN node computed, for
    /// running-stat updates outside the graph.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mode: BnMode::Train, mean, var, .. }
            | Op::BatchNorm { mode: BnMode::Calibrate, mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Add(a, b)))
    }

    /// `x + bias`, bias broadcast over the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::Shape("add_bias on scalar".into()))?;
        if self.shape(b) != [d] {
            return Err(Error::Shape(format!(
                "add_bias: last dim {} vs bias {:?}",
                d,
                self.shape(b)
            )));
        }
        let bdata = self.data(b);
        let data: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data: Vec<f32> = self.data(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let data: Vec<f32> = self.data(x).iter().map(|v| v + c).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddScalar(x, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Mul(a, b)))
    }

    // ---- matmul / linear ----

    /// `[m,k] x [k,n]` or batched `[R,m,k] x [R,k,n]`. With `trans_b`, the
    /// second operand is stored `[n,k]` (resp. `[R,n,k]`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(Error::Shape(format!("matmul lhs rank {:?}", sa))),
        };
        if sb.len() != sa.len() {
            return Err(Error::Shape("matmul rank mismatch".into()));
        }
        let (bk, n) = {
            let (d0, d1) = if sb.len() == 2 { (sb[0], sb[1]) } else { (sb[1], sb[2]) };
            if trans_b {
                (d1, d0)
            } else {
                (d0, d1)
            }
        };
        if sb.len() == 3 && sb[0] != batch {
            return Err(Error::Shape("matmul batch mismatch".into()));
        }
        if bk != k {
            return Err(Error::Shape(format!("matmul inner dims: {k} vs {bk}")));
        }
        let mut data = vec![0.0f32; batch * m * n];
        for r in 0..batch {
            mm(
                &self.data(a)[r * m * k..(r + 1) * m * k],
                &self.data(b)[r * k * n..(r + 1) * k * n],
                &mut data[r * m * n..(r + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Op::Matmul { a, b, trans_b, m, k, n, batch }))
    }

    /// `y = x · wᵀ + b` over the last dim. `x` is rank 2 or 3, `w` is
    /// `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(Error::Shape("linear weight must be rank 2".into()));
        }
        let din = *sx.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if sw[1] != din {
            return Err(Error::Shape(format!("linear: input dim {} vs weight {:?}", din, sw)));
        }
        let dout = sw[0];
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let mut data = vec![0.0f32; rows * dout];
        mm(self.data(x), self.data(w), &mut data, rows, din, dout, false, true, false);
        if let Some(bv) = b {
            if self.shape(bv) != [dout] {
                return Err(Error::Shape("linear bias dim".into()));
            }
            let bd = self.data(bv);
            for (i, v) in data.iter_mut().enumerate() {
                *v += bd[i % dout];
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(shape, data, needs, Op::Linear { x, w, b, rows, din, dout }))
    }

    // ---- conv / pool ----

    /// Cross-correlation with zero padding. `x: [R,Cin,H,W]`,
    /// `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape("conv2d expects rank-4 input and weight".into()));
        }
        let (r, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return Err(Error::Shape(format!("conv2d channels: {cin} vs {wcin}")));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride 0".into()));
        }
        if (h + 2 * padding - kh) % stride != 0 || (wd + 2 * padding - kw) % stride != 0 {
            return Err(Error::Shape("conv2d non-integer output size".into()));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let hw = ho * wo;
        let mut data = vec![0.0f32; r * cout * hw];
        let mut col = vec![0.0f32; ckk * hw];
        for ri in 0..r {
            im2col(
                &self.data(x)[ri * cin * h * wd..(ri + 1) * cin * h * wd],
                cin, h, wd, kh, kw, stride, padding, ho, wo, &mut col,
            );
            mm(
                self.data(w),
                &col,
                &mut data[ri * cout * hw..(ri + 1) * cout * hw],
                cout, ckk, hw, false, false, false,
            );
        }
        if let Some(bv) = b {
            if self.shape(bv) != [cout] {
                return Err(Error::Shape("conv2d bias dim".into()));
            }
            let bd = self.data(bv).to_vec();
            for ri in 0..r {
                for c in 0..cout {
                    let base = (ri * cout + c) * hw;
                    for v in &mut data[base..base + hw] {
                        *v += bd[c];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|v| self.needs(v)).unwrap_or(false);
        Ok(self.push(vec![r, cout, ho, wo], data, needs, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape("maxpool2 expects rank-4 input".into()));
        }
        let (r, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape("maxpool2 odd spatial dims".into()));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0f32; r * c * ho * wo];
        let mut argmax = vec![0u32; r * c * ho * wo];
        let xd = self.data(x);
        for rc in 0..r * c {
            let xin = &xd[rc * h * w..(rc + 1) * h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut besti = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (oi * 2 + di) * w + oj * 2 + dj;
                            if xin[idx] > best {
                                best = xin[idx];
                                besti = idx;
                            }
                        }
                    }
                    let out_idx = rc * ho * wo + oi * wo + oj;
                    data[out_idx] = best;
                    argmax[out_idx] = (rc * h * w + besti) as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c, ho, wo], data, needs, Op::MaxPool2 { x, argmax }))
    }

    // ---- normalization ----

    /// Batch normalization. `gamma`/`beta` are `[C]`. In `Eval` mode the
    /// caller supplies running statistics; in `Train`/`Calibrate` mode batch
    /// statistics are computed and retrievable via [`Graph::bn_batch_stats`].
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        eps: f32,
        mode: BnMode,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let channels = match layout {
            BnLayout::Nchw => {
                if sx.len() != 4 {
                    return Err(Error::Shape("batchnorm Nchw expects rank-4".into()));
                }
                sx[1]
            }
            BnLayout::LastDim => *sx.last().ok_or_else(|| Error::Shape("batchnorm on scalar".into()))?,
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::Shape(format!(
                "batchnorm stats dim {} vs gamma {:?} beta {:?}",
                channels,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.data(x);
        let (mean, var) = match mode {
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| Error::Config("batchnorm eval mode needs running stats".into()))?;
                if rm.len() != channels || rv.len() != channels {
                    return Err(Error::Shape("batchnorm running stats dim".into()));
                }
                (rm.to_vec(), rv.to_vec())
            }
            BnMode::Train | BnMode::Calibrate => {
                let mut mean = vec![0.0f64; channels];
                let mut var = vec![0.0f64; channels];
                let count = (xd.len() / channels) as f64;
                self.for_each_channel(x, layout, |c, v| {
                    mean[c] += v as f64;
                });
                for m in &mut mean {
                    *m /= count;
                }
                self.for_each_channel(x, layout, |c, v| {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                });
                for v in &mut var {
                    *v /= count;
                }
                (
                    mean.iter().map(|&v| v as f32).collect(),
                    var.iter().map(|&v| v as f32).collect(),
                )
            }
        };
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0f32; xd.len()];
        match layout {
            BnLayout::LastDim => {
                for (i, (&v, out)) in xd.iter().zip(&mut data).enumerate() {
                    let c = i % channels;
                    *out = gd[c] * (v - mean[c]) * inv_std[c] + bd[c];
                }
            }
            BnLayout::Nchw => {
                let hw = sx[2] * sx[3];
                for (i, (&v, out)) in xd.iter().zip(&mut data).enumerate() {
                    let c = (i / hw) % channels;
                    *out = gd[c] * (v - mean[c]) * inv_std[c] + bd[c];
                }
            }
        }
        let needs = match mode {
            BnMode::Calibrate => false,
            _ => self.needs(x) || self.needs(gamma) || self.needs(beta),
        };
        Ok(self.push(
            sx,
            data,
            needs,
            Op::BatchNorm { x, gamma, beta, layout, eps, mode, mean, var },
        ))
    }

    fn for_each_channel(&self, x: Var, layout: BnLayout, mut f: impl FnMut(usize, f32)) {
        let sx = self.shape(x);
        let xd = self.data(x);
        match layout {
            BnLayout::LastDim => {
                let c = *sx.last().unwrap();
                for (i, &v) in xd.iter().enumerate() {
                    f(i % c, v);
                }
            }
            BnLayout::Nchw => {
                let c = sx[1];
                let hw = sx[2] * sx[3];
                for (i, &v) in xd.iter().enumerate() {
                    f((i / hw) % c, v);
                }
            }
        }
    }

    // ---- spiking ----

    /// Iterative LIF over `t_steps` time-steps folded into dim 0: the input
    /// is `[t_steps * B, ...]` where row block `t` holds step `t`. Membrane
    /// update `u_t = decay * u_{t-1} * (1 - y_{t-1}) + I_t`, spike when
    /// `u >= u_th`. With `soft` the hard step is replaced by the clamped
    /// ramp whose derivative is the rectangular surrogate window; the
    /// backward pass uses the window in both modes.
    pub fn lif_seq(
        &mut self,
        input: Var,
        t_steps: usize,
        u_th: f32,
        tau: f32,
        surrogate_width: f32,
        soft: bool,
    ) -> Result<Var> {
        if t_steps == 0 {
            return Err(Error::Config("lif_seq with zero time-steps".into()));
        }
        let sx = self.shape(input).to_vec();
        let total = self.nodes[input.0].data.len();
        if sx.is_empty() || sx[0] % t_steps != 0 {
            return Err(Error::Shape(format!(
                "lif_seq: dim0 {:?} not divisible by t={}",
                sx, t_steps
            )));
        }
        if tau <= 1.0 {
            return Err(Error::Config(format!("lif tau must be > 1, got {tau}")));
        }
        let decay = 1.0 - 1.0 / tau;
        let per_step = total / t_steps;
        let xd = &self.nodes[input.0].data;
        let mut data = vec![0.0f32; total];
        let mut saved_u = vec![0.0f32; total];
        {
            let mut u_prev = vec![0.0f32; per_step];
            let mut y_prev = vec![0.0f32; per_step];
            for t in 0..t_steps {
                let base = t * per_step;
                for j in 0..per_step {
                    let u = decay * u_prev[j] * (1.0 - y_prev[j]) + xd[base + j];
                    let y = if soft {
                        soft_spike(u, u_th, surrogate_width)
                    } else if u >= u_th {
                        1.0
                    } else {
                        0.0
                    };
                    saved_u[base + j] = u;
                    data[base + j] = y;
                    u_prev[j] = u;
                    y_prev[j] = y;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            sx,
            data,
            needs,
            Op::LifSeq { input, t_steps, u_th, decay, surrogate_width, soft, saved_u },
        ))
    }

    // ---- attention ----

    /// Softmax-free multi-head attention `out = scale * (Q Kᵀ) V` per head.
    /// Inputs are `[R, N, D]` with `D` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f32) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 {
            return Err(Error::Shape("attention expects [R,N,D]".into()));
        }
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::Shape("attention q/k/v shape mismatch".into()));
        }
        let (r, n, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attention: dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let mut data = vec![0.0f32; r * n * d];
        let mut saved_a = vec![0.0f32; r * heads * n * n];
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let gather = |src: &[f32], ri: usize, h: usize, buf: &mut [f32]| {
            for i in 0..n {
                let base = (ri * n + i) * d + h * dh;
                buf[i * dh..(i + 1) * dh].copy_from_slice(&src[base..base + dh]);
            }
        };
        let mut qh = vec![0.0f32; n * dh];
        let mut kh = vec![0.0f32; n * dh];
        let mut vh = vec![0.0f32; n * dh];
        let mut oh = vec![0.0f32; n * dh];
        for ri in 0..r {
            for h in 0..heads {
                gather(qd, ri, h, &mut qh);
                gather(kd, ri, h, &mut kh);
                gather(vd, ri, h, &mut vh);
                let a = &mut saved_a[(ri * heads + h) * n * n..][..n * n];
                mm(&qh, &kh, a, n, dh, n, false, true, false);
                mm(a, &vh, &mut oh, n, n, dh, false, false, false);
                for i in 0..n {
                    let base = (ri * n + i) * d + h * dh;
                    for c in 0..dh {
                        data[base + c] = scale * oh[i * dh + c];
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(sq, data, needs, Op::Attention { q, k, v, heads, scale, saved_a }))
    }

    // ---- reshapes / reductions ----

    /// `[R, C, H, W]` feature map to `[R, H*W, C]` token matrix.
    pub fn nchw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape("nchw_to_tokens expects rank-4".into()));
        }
        let (r, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xd = self.data(x);
        let mut data = vec![0.0f32; xd.len()];
        for ri in 0..r {
            for ci in 0..c {
                for p in 0..hw {
                    data[(ri * hw + p) * c + ci] = xd[(ri * c + ci) * hw + p];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, hw, c], data, needs, Op::NchwToTokens(x)))
    }

    /// Mean over the token axis: `[R, N, D]` -> `[R, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Shape("mean_tokens expects [R,N,D]".into()));
        }
        let (r, n, d) = (sx[0], sx[1], sx[2]);
        let xd = self.data(x);
        let mut data = vec![0.0f32; r * d];
        for ri in 0..r {
            for ni in 0..n {
                for di in 0..d {
                    data[ri * d + di] += xd[(ri * n + ni) * d + di];
                }
            }
        }
        let inv = 1.0 / n as f32;
        for v in &mut data {
            *v *= inv;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, d], data, needs, Op::MeanTokens(x)))
    }

    /// Mean over the time axis folded into dim 0: `[T*B, D]` -> `[B, D]`.
    pub fn mean_time(&mut self, x: Var, t_steps: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || t_steps == 0 || sx[0] % t_steps != 0 {
            return Err(Error::Shape(format!("mean_time: shape {:?}, t={}", sx, t_steps)));
        }
        let b = sx[0] / t_steps;
        let d = sx[1];
        let xd = self.data(x);
        let mut data = vec![0.0f32; b * d];
        for t in 0..t_steps {
            for bi in 0..b {
                for di in 0..d {
                    data[bi * d + di] += xd[((t * b) + bi) * d + di];
                }
            }
        }
        let inv = 1.0 / t_steps as f32;
        for v in &mut data {
            *v *= inv;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![b, d], data, needs, Op::MeanTime { x, t_steps }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![s], needs, Op::Sum(x))
    }

    /// Mean cross-entropy over rows of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 {
            return Err(Error::Shape("cross_entropy expects [B,K] logits".into()));
        }
        let (b, k) = (sx[0], sx[1]);
        if labels.len() != b {
            return Err(Error::Shape(format!("cross_entropy: {b} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let row = &xd[bi * k..(bi + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[bi * k + j] = e;
                denom += e;
            }
            for p in &mut probs[bi * k..(bi + 1) * k] {
                *p /= denom;
            }
            loss += -(probs[bi * k + labels[bi]].max(1e-30).ln() as f64);
        }
        let loss = (loss / b as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            needs,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    // ---- backward ----

    fn accumulate(&mut self, v: Var, contrib: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0f32; len]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Fills `grad` for every node
    /// reachable from a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].shape.is_empty() && self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward on non-scalar {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize) -> Result<()> {
        let dy = self.nodes[idx].grad.clone().unwrap();
        // Op context is read out before mutating grads to satisfy the borrow
        // checker; the saved buffers are moved out temporarily where large.
        match std::mem::replace(&mut self.nodes[idx].op, Op::Leaf) {
            Op::Leaf => {
                self.nodes[idx].op = Op::Leaf;
            }
            Op::Add(a, b) => {
                self.accumulate(a, &dy);
                self.accumulate(b, &dy);
                self.nodes[idx].op = Op::Add(a, b);
            }
            Op::AddBias(x, b) => {
                self.accumulate(x, &dy);
                let d = self.nodes[b.0].data.len();
                let mut db = vec![0.0f32; d];
                for (i, g) in dy.iter().enumerate() {
                    db[i % d] += g;
                }
                self.accumulate(b, &db);
                self.nodes[idx].op = Op::AddBias(x, b);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f32> = dy.iter().map(|g| g * c).collect();
                self.accumulate(x, &dx);
                self.nodes[idx].op = Op::Scale(x, c);
            }
            Op::AddScalar(x, c) => {
                self.accumulate(x, &dy);
                self.nodes[idx].op = Op::AddScalar(x, c);
            }
            Op::Mul(a, b) => {
                let da: Vec<f32> = dy.iter().zip(self.data(b)).map(|(g, v)| g * v).collect();
                let db: Vec<f32> = dy.iter().zip(self.data(a)).map(|(g, v)| g * v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
                self.nodes[idx].op = Op::Mul(a, b);
            }
            Op::Matmul { a, b, trans_b, m, k, n, batch } => {
                let mut da = vec![0.0f32; batch * m * k];
                let mut db = vec![0.0f32; self.nodes[b.0].data.len()];
                for r in 0..batch {
                    let dyr = &dy[r * m * n..(r + 1) * m * n];
                    let ar = &self.nodes[a.0].data[r * m * k..(r + 1) * m * k];
                    let br_len = if trans_b { n * k } else { k * n };
                    let br = &self.nodes[b.0].data[r * br_len..(r + 1) * br_len];
                    // dA = dY · op(B)ᵀ
                    if trans_b {
                        // B stored [n,k]: dA = dY · B
                        mm(dyr, br, &mut da[r * m * k..(r + 1) * m * k], m, n, k, false, false, false);
                        // dB(stored [n,k]) = dYᵀ · A
                        mm(dyr, ar, &mut db[r * n * k..(r + 1) * n * k], n, m, k, true, false, false);
                    } else {
                        // dA = dY · Bᵀ where B stored [k,n]
                        mm(dyr, br, &mut da[r * m * k..(r + 1) * m * k], m, n, k, false, true, false);
                        // dB = Aᵀ · dY
                        mm(ar, dyr, &mut db[r * k * n..(r + 1) * k * n], k, m, n, true, false, false);
                    }
                }
                if self.needs(a) {
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    self.accumulate(b, &db);
                }
                self.nodes[idx].op = Op::Matmul { a, b, trans_b, m, k, n, batch };
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                if self.needs(x) {
                    let mut dx = vec![0.0f32; rows * din];
                    mm(&dy, &self.nodes[w.0].data.clone(), &mut dx, rows, dout, din, false, false, false);
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0f32; dout * din];
                    mm(&dy, &self.nodes[x.0].data.clone(), &mut dw, dout, rows, din, true, false, false);
                    self.accumulate(w, &dw);
                }
                if let Some(bv) = b {
                    if self.needs(bv) {
                        let mut db = vec![0.0f32; dout];
                        for (i, g) in dy.iter().enumerate() {
                            db[i % dout] += g;
                        }
                        self.accumulate(bv, &db);
                    }
                }
                self.nodes[idx].op = Op::Linear { x, w, b, rows, din, dout };
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (r, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
                let ho = (h + 2 * padding - kh) / stride + 1;
                let wo = (wd + 2 * padding - kw) / stride + 1;
                let ckk = cin * kh * kw;
                let hw = ho * wo;
                let need_x = self.needs(x);
                let need_w = self.needs(w);
                let mut dx = if need_x { vec![0.0f32; r * cin * h * wd] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0f32; cout * ckk] } else { Vec::new() };
                let xdata = self.nodes[x.0].data.clone();
                let wdata = self.nodes[w.0].data.clone();
                let mut col = vec![0.0f32; ckk * hw];
                let mut dcol = vec![0.0f32; ckk * hw];
                for ri in 0..r {
                    let dyr = &dy[ri * cout * hw..(ri + 1) * cout * hw];
                    if need_w {
                        im2col(
                            &xdata[ri * cin * h * wd..(ri + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, stride, padding, ho, wo, &mut col,
                        );
                        // dW += dY · colᵀ  ([cout,hw] x [hw,ckk])
                        mm(dyr, &col, &mut dw, cout, hw, ckk, false, true, true);
                    }
                    if need_x {
                        // dcol = Wᵀ · dY  ([ckk,cout] x [cout,hw])
                        mm(&wdata, dyr, &mut dcol, ckk, cout, hw, true, false, false);
                        col2im_add(
                            &dcol, cin, h, wd, kh, kw, stride, padding, ho, wo,
                            &mut dx[ri * cin * h * wd..(ri + 1) * cin * h * wd],
                        );
                    }
                }
                if need_x {
                    self.accumulate(x, &dx);
                }
                if need_w {
                    self.accumulate(w, &dw);
                }
                if let Some(bv) = b {
                    if self.needs(bv) {
                        let mut db = vec![0.0f32; cout];
                        for ri in 0..r {
                            for c in 0..cout {
                                let base = (ri * cout + c) * hw;
                                db[c] += dy[base..base + hw].iter().sum::<f32>();
                            }
                        }
                        self.accumulate(bv, &db);
                    }
                }
                self.nodes[idx].op = Op::Conv2d { x, w, b, stride, padding };
            }
            Op::BatchNorm { x, gamma, beta, layout, eps, mode, mean, var } => {
                let channels = mean.len();
                let xd = self.nodes[x.0].data.clone();
                let count = (xd.len() / channels) as f32;
                let gd = self.nodes[gamma.0].data.clone();
                let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let channel_of = |i: usize| -> usize {
                    match layout {
                        BnLayout::LastDim => i % channels,
                        BnLayout::Nchw => {
                            let sx = &self.nodes[x.0].shape;
                            let hw = sx[2] * sx[3];
                            (i / hw) % channels
                        }
                    }
                };
                let mut dgamma = vec![0.0f32; channels];
                let mut dbeta = vec![0.0f32; channels];
                for (i, &g) in dy.iter().enumerate() {
                    let c = channel_of(i);
                    let xhat = (xd[i] - mean[c]) * inv_std[c];
                    dgamma[c] += g * xhat;
                    dbeta[c] += g;
                }
                if self.needs(x) {
                    let mut dx = vec![0.0f32; xd.len()];
                    match mode {
                        BnMode::Eval => {
                            for (i, &g) in dy.iter().enumerate() {
                                let c = channel_of(i);
                                dx[i] = g * gd[c] * inv_std[c];
                            }
                        }
                        BnMode::Train | BnMode::Calibrate => {
                            // dx = g/std * (dy - mean(dy) - xhat * mean(dy*xhat))
                            let mut sum_dy = vec![0.0f32; channels];
                            let mut sum_dy_xhat = vec![0.0f32; channels];
                            for (i, &g) in dy.iter().enumerate() {
                                let c = channel_of(i);
                                sum_dy[c] += g;
                                sum_dy_xhat[c] += g * (xd[i] - mean[c]) * inv_std[c];
                            }
                            for (i, &g) in dy.iter().enumerate() {
                                let c = channel_of(i);
                                let xhat = (xd[i] - mean[c]) * inv_std[c];
                                dx[i] = gd[c] * inv_std[c]
                                    * (g - sum_dy[c] / count - xhat * sum_dy_xhat[c] / count);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
                self.nodes[idx].op = Op::BatchNorm { x, gamma, beta, layout, eps, mode, mean, var };
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(x) {
                    let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += dy[o];
                    }
                    self.accumulate(x, &dx);
                }
                self.nodes[idx].op = Op::MaxPool2 { x, argmax };
            }
            Op::LifSeq { input, t_steps, u_th, decay, surrogate_width, soft, saved_u } => {
                if self.needs(input) {
                    let total = saved_u.len();
                    let per_step = total / t_steps;
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![0.0f32; total];
                    for j in 0..per_step {
                        let mut du_next = 0.0f32;
                        for t in (0..t_steps).rev() {
                            let i = t * per_step + j;
                            let u = saved_u[i];
                            let g = surrogate_window(u, u_th, surrogate_width);
                            let mut dy_total = dy[i];
                            let mut du = 0.0f32;
                            if t + 1 < t_steps {
                                // u_{t+1} = decay * u_t * (1 - y_t) + I_{t+1}
                                dy_total += du_next * (-decay * u);
                                du += du_next * decay * (1.0 - y[i]);
                            }
                            du += dy_total * g;
                            dx[i] = du;
                            du_next = du;
                        }
                    }
                    self.accumulate(input, &dx);
                }
                self.nodes[idx].op = Op::LifSeq { input, t_steps, u_th, decay, surrogate_width, soft, saved_u };
            }
            Op::Attention { q, k, v, heads, scale, saved_a } => {
                let sq = self.nodes[q.0].shape.clone();
                let (r, n, d) = (sq[0], sq[1], sq[2]);
                let dh = d / heads;
                let qd = self.nodes[q.0].data.clone();
                let kd = self.nodes[k.0].data.clone();
                let vd = self.nodes[v.0].data.clone();
                let mut dq = vec![0.0f32; r * n * d];
                let mut dk = vec![0.0f32; r * n * d];
                let mut dv = vec![0.0f32; r * n * d];
                let gather = |src: &[f32], ri: usize, h: usize, buf: &mut [f32]| {
                    for i in 0..n {
                        let base = (ri * n + i) * d + h * dh;
                        buf[i * dh..(i + 1) * dh].copy_from_slice(&src[base..base + dh]);
                    }
                };
                let scatter_add = |dst: &mut [f32], ri: usize, h: usize, buf: &[f32]| {
                    for i in 0..n {
                        let base = (ri * n + i) * d + h * dh;
                        for c in 0..dh {
                            dst[base + c] += buf[i * dh + c];
                        }
                    }
                };
                let mut kh_buf = vec![0.0f32; n * dh];
                let mut qh_buf = vec![0.0f32; n * dh];
                let mut vh_buf = vec![0.0f32; n * dh];
                let mut doh = vec![0.0f32; n * dh];
                let mut da = vec![0.0f32; n * n];
                let mut tmp = vec![0.0f32; n * dh];
                for ri in 0..r {
                    for h in 0..heads {
                        gather(&qd, ri, h, &mut qh_buf);
                        gather(&kd, ri, h, &mut kh_buf);
                        gather(&vd, ri, h, &mut vh_buf);
                        for i in 0..n {
                            let base = (ri * n + i) * d + h * dh;
                            for c in 0..dh {
                                doh[i * dh + c] = scale * dy[base + c];
                            }
                        }
                        let a = &saved_a[(ri * heads + h) * n * n..][..n * n];
                        // dA = dO · Vᵀ
                        mm(&doh, &vh_buf, &mut da, n, dh, n, false, true, false);
                        // dV = Aᵀ · dO
                        mm(a, &doh, &mut tmp, n, n, dh, true, false, false);
                        scatter_add(&mut dv, ri, h, &tmp);
                        // dQ = dA · K
                        mm(&da, &kh_buf, &mut tmp, n, n, dh, false, false, false);
                        scatter_add(&mut dq, ri, h, &tmp);
                        // dK = dAᵀ · Q
                        mm(&da, &qh_buf, &mut tmp, n, n, dh, true, false, false);
                        scatter_add(&mut dk, ri, h, &tmp);
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
                self.nodes[idx].op = Op::Attention { q, k, v, heads, scale, saved_a };
            }
            Op::NchwToTokens(x) => {
                if self.needs(x) {
                    let sx = self.nodes[x.0].shape.clone();
                    let (r, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let hw = h * w;
                    let mut dx = vec![0.0f32; dy.len()];
                    for ri in 0..r {
                        for ci in 0..c {
                            for p in 0..hw {
                                dx[(ri * c + ci) * hw + p] = dy[(ri * hw + p) * c + ci];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.nodes[idx].op = Op::NchwToTokens(x);
            }
            Op::MeanTokens(x) => {
                if self.needs(x) {
                    let sx = self.nodes[x.0].shape.clone();
                    let (r, n, d) = (sx[0], sx[1], sx[2]);
                    let inv = 1.0 / n as f32;
                    let mut dx = vec![0.0f32; r * n * d];
                    for ri in 0..r {
                        for ni in 0..n {
                            for di in 0..d {
                                dx[(ri * n + ni) * d + di] = dy[ri * d + di] * inv;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.nodes[idx].op = Op::MeanTokens(x);
            }
            Op::MeanTime { x, t_steps } => {
                if self.needs(x) {
                    let sx = self.nodes[x.0].shape.clone();
                    let b = sx[0] / t_steps;
                    let d = sx[1];
                    let inv = 1.0 / t_steps as f32;
                    let mut dx = vec![0.0f32; sx[0] * d];
                    for t in 0..t_steps {
                        for bi in 0..b {
                            for di in 0..d {
                                dx[(t * b + bi) * d + di] = dy[bi * d + di] * inv;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                self.nodes[idx].op = Op::MeanTime { x, t_steps };
            }
            Op::Sum(x) => {
                if self.needs(x) {
                    let dx = vec![dy[0]; self.nodes[x.0].data.len()];
                    self.accumulate(x, &dx);
                }
                self.nodes[idx].op = Op::Sum(x);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let mut dl = probs.clone();
                    for (bi, &l) in labels.iter().enumerate() {
                        dl[bi * k + l] -= 1.0;
                    }
                    let g = dy[0] / b as f32;
                    for v in &mut dl {
                        *v *= g;
                    }
                    self.accumulate(logits, &dl);
                }
                self.nodes[idx].op = Op::CrossEntropy { logits, labels, probs };
            }
        }
        Ok(())
    }
}
