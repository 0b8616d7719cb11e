//! The weight-entangled spiking-transformer supernet.
//!
//! All weight tensors live at the maximal dimensions of the search space;
//! any candidate architecture executes by taking leading slices of them.
//! The stem conv keeps its full width (candidate embed dims need not be
//! divisible by 8); from the second SPS stage on, channel widths follow
//! the candidate embed dim (e/4, e/2, e).
//!
//! Time-steps are folded into the leading tensor dimension: a batch of B
//! images simulated for T steps flows through every layer as a single
//! `[T*B, ...]` tensor, and the LIF op iterates over the fold internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{FiringStats, LifParams};
use crate::rng::Rng;
use crate::space::{validate, ArchSpec, Candidate, FixedBackbone, SearchSpace};
use crate::tensor::{BnLayout, BnMode, Graph, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Softmax-free attention scale.
pub const ATTN_SCALE: f32 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named flat registry of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Visit the common prefix `region` of two row-major arrays with shapes
/// `a_shape` and `b_shape`, yielding the flat offset pair per element.
pub fn region_for_each(
    a_shape: &[usize],
    b_shape: &[usize],
    region: &[usize],
    f: &mut impl FnMut(usize, usize),
) {
    assert_eq!(a_shape.len(), region.len());
    assert_eq!(b_shape.len(), region.len());
    fn rec(
        a_shape: &[usize],
        b_shape: &[usize],
        region: &[usize],
        dim: usize,
        ao: usize,
        bo: usize,
        f: &mut impl FnMut(usize, usize),
    ) {
        if dim == region.len() {
            f(ao, bo);
            return;
        }
        let astride: usize = a_shape[dim + 1..].iter().product();
        let bstride: usize = b_shape[dim + 1..].iter().product();
        for i in 0..region[dim] {
            rec(a_shape, b_shape, region, dim + 1, ao + i * astride, bo + i * bstride, f);
        }
    }
    rec(a_shape, b_shape, region, 0, 0, 0, f);
}

/// Copy the leading-slice region of a tensor into a dense buffer.
pub fn slice_prefix(t: &Tensor, region: &[usize]) -> Vec<f32> {
    let mut out = vec![0.0f32; region.iter().product()];
    let src = t.data();
    region_for_each(t.shape(), region, region, &mut |so, do_| out[do_] = src[so]);
    out
}

/// Add a region-shaped gradient back into the matching leading slice of
/// the full tensor.
pub fn scatter_add_region(full: &mut Tensor, region: &[usize], grad: &[f32]) {
    let shape = full.shape().to_vec();
    let dst = full.data_mut();
    region_for_each(&shape, region, region, &mut |fo, go| dst[fo] += grad[go]);
}

#[derive(Clone, Debug)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SsaBlock {
    pub q: LinearBlock,
    pub k: LinearBlock,
    pub v: LinearBlock,
    pub proj: LinearBlock,
    pub fc1: LinearBlock,
    pub fc2: LinearBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub max_embed: usize,
    pub max_depth: usize,
    pub max_hidden: usize,
    /// Output channels of the stem conv (fixed, not sliced per candidate).
    pub stem_width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
    pub surrogate_width: f32,
}

impl SupernetConfig {
    fn check(self) -> Result<Self> {
        if self.max_embed % 4 != 0 {
            return Err(Error::Config(format!(
                "max embed {} must be divisible by 4",
                self.max_embed
            )));
        }
        if self.input_hw.0 % 4 != 0 || self.input_hw.1 % 4 != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by the 4x downsampling",
                self.input_hw.0, self.input_hw.1
            )));
        }
        if self.max_depth == 0 || self.stem_width == 0 || self.max_hidden == 0 {
            return Err(Error::Config("degenerate supernet dimensions".into()));
        }
        Ok(self)
    }

    pub fn for_space(
        space: &SearchSpace,
        in_channels: usize,
        num_classes: usize,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        let tr = space.transformer.as_ref().ok_or_else(|| {
            Error::Config("the SNN-only space needs a fixed backbone (use for_backbone)".into())
        })?;
        let max_embed = tr.embed_dim.upper as usize;
        SupernetConfig {
            max_embed,
            max_depth: tr.depth.upper as usize,
            max_hidden: (tr.mlp_ratio.upper * max_embed as f64).round() as usize,
            stem_width: max_embed / 8,
            in_channels,
            num_classes,
            input_hw,
            surrogate_width: 1.0,
        }
        .check()
    }

    pub fn for_backbone(
        backbone: &FixedBackbone,
        in_channels: usize,
        num_classes: usize,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        SupernetConfig {
            max_embed: backbone.embed_dim,
            max_depth: backbone.depth,
            max_hidden: (backbone.mlp_ratio * backbone.embed_dim as f64).round() as usize,
            stem_width: (backbone.embed_dim / 8).max(1),
            in_channels,
            num_classes,
            input_hw,
            surrogate_width: 1.0,
        }
        .check()
    }
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub params: ParamStore,
    pub bns: Vec<BnParams>,
    pub sps: [ConvBlock; 4],
    pub rpe: ConvBlock,
    pub blocks: Vec<SsaBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Neuron traits of the fixed encoding stages.
    pub sps_lif: LifParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Calibrate,
}

/// A graph leaf bound to a supernet parameter slice.
#[derive(Clone, Debug)]
pub struct LeafBinding {
    pub param: ParamId,
    pub var: Var,
    pub region: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct BnObs {
    pub bn: usize,
    pub var: Var,
    pub width: usize,
}

pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
    /// Firing rate of the input spike train of every billed layer, in
    /// energy-catalog order and with catalog layer ids.
    pub firing: Vec<(String, FiringStats)>,
    pub leaves: Vec<LeafBinding>,
    pub bn_obs: Vec<BnObs>,
}

fn bind(
    params: &ParamStore,
    g: &mut Graph,
    leaves: &mut Vec<LeafBinding>,
    id: ParamId,
    region: Vec<usize>,
    train: bool,
) -> Var {
    let data = slice_prefix(params.get(id), &region);
    let var = g.leaf_from(region.clone(), data, train);
    leaves.push(LeafBinding { param: id, var, region });
    var
}

impl Supernet {
    pub fn new(config: SupernetConfig, rng: &mut Rng) -> Result<Self> {
        let config = config.check()?;
        let mut params = ParamStore::default();
        let mut bns = Vec::new();
        let me = config.max_embed;
        let mh = config.max_hidden;
        let conv = |params: &mut ParamStore,
                        bns: &mut Vec<BnParams>,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        rng: &mut Rng| {
            let std = (2.0 / (9 * c_in) as f32).sqrt();
            let w = params.add(format!("{name}.w"), Tensor::rand_normal(vec![c_out, c_in, 3, 3], std, rng));
            let b = params.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
            let bn = add_bn(params, bns, name, c_out);
            ConvBlock { w, b, bn }
        };
        fn add_bn(params: &mut ParamStore, bns: &mut Vec<BnParams>, name: &str, width: usize) -> usize {
            let gamma = params.add(format!("{name}.bn.gamma"), Tensor::full(vec![width], 1.0));
            let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(vec![width]));
            bns.push(BnParams {
                gamma,
                beta,
                running_mean: vec![0.0; width],
                running_var: vec![1.0; width],
            });
            bns.len() - 1
        }
        fn linear(
            params: &mut ParamStore,
            bns: &mut Vec<BnParams>,
            name: &str,
            d_out: usize,
            d_in: usize,
            rng: &mut Rng,
        ) -> LinearBlock {
            let std = (1.0 / d_in as f32).sqrt();
            let w = params.add(format!("{name}.w"), Tensor::rand_normal(vec![d_out, d_in], std, rng));
            let b = params.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
            let bn = add_bn(params, bns, name, d_out);
            LinearBlock { w, b, bn }
        }
        let sps = [
            conv(&mut params, &mut bns, "sps.conv1", config.stem_width, config.in_channels, rng),
            conv(&mut params, &mut bns, "sps.conv2", me / 4, config.stem_width, rng),
            conv(&mut params, &mut bns, "sps.conv3", me / 2, me / 4, rng),
            conv(&mut params, &mut bns, "sps.conv4", me, me / 2, rng),
        ];
        let rpe = conv(&mut params, &mut bns, "sps.rpe", me, me, rng);
        let mut blocks = Vec::with_capacity(config.max_depth);
        for i in 0..config.max_depth {
            let n = |s: &str| format!("block{i}.{s}");
            blocks.push(SsaBlock {
                q: linear(&mut params, &mut bns, &n("q"), me, me, rng),
                k: linear(&mut params, &mut bns, &n("k"), me, me, rng),
                v: linear(&mut params, &mut bns, &n("v"), me, me, rng),
                proj: linear(&mut params, &mut bns, &n("proj"), me, me, rng),
                fc1: linear(&mut params, &mut bns, &n("fc1"), mh, me, rng),
                fc2: linear(&mut params, &mut bns, &n("fc2"), me, mh, rng),
            });
        }
        let std = (1.0 / me as f32).sqrt();
        let head_w = params.add("head.w", Tensor::rand_normal(vec![config.num_classes, me], std, rng));
        let head_b = params.add("head.b", Tensor::zeros(vec![config.num_classes]));
        Ok(Supernet {
            config,
            params,
            bns,
            sps,
            rpe,
            blocks,
            head_w,
            head_b,
            sps_lif: LifParams::baseline(),
        })
    }

    /// Does the candidate architecture fit inside this supernet?
    pub fn check_spec(&self, spec: &ArchSpec) -> Result<()> {
        let c = &self.config;
        if spec.embed_dim > c.max_embed || spec.embed_dim % 4 != 0 {
            return Err(Error::Shape(format!(
                "embed dim {} exceeds supernet max {} or is not divisible by 4",
                spec.embed_dim, c.max_embed
            )));
        }
        if spec.depth > c.max_depth {
            return Err(Error::Shape(format!(
                "depth {} exceeds supernet max {}",
                spec.depth, c.max_depth
            )));
        }
        for (i, l) in spec.layers.iter().enumerate() {
            if l.mlp_hidden > c.max_hidden {
                return Err(Error::Shape(format!(
                    "layer {i} hidden {} exceeds supernet max {}",
                    l.mlp_hidden, c.max_hidden
                )));
            }
            if spec.embed_dim % l.heads != 0 {
                return Err(Error::Shape(format!(
                    "embed dim {} not divisible by {} heads (layer {i})",
                    spec.embed_dim, l.heads
                )));
            }
        }
        Ok(())
    }

    fn apply_bn(
        &self,
        g: &mut Graph,
        leaves: &mut Vec<LeafBinding>,
        bn_obs: &mut Vec<BnObs>,
        bn_idx: usize,
        width: usize,
        x: Var,
        layout: BnLayout,
        mode: Mode,
    ) -> Result<Var> {
        let train = mode == Mode::Train;
        let b = &self.bns[bn_idx];
        let gamma = bind(&self.params, g, leaves, b.gamma, vec![width], train);
        let beta = bind(&self.params, g, leaves, b.beta, vec![width], train);
        let v = match mode {
            Mode::Eval => g.batchnorm(
                x,
                gamma,
                beta,
                layout,
                BN_EPS,
                BnMode::Eval,
                Some((&b.running_mean[..width], &b.running_var[..width])),
            )?,
            Mode::Train => g.batchnorm(x, gamma, beta, layout, BN_EPS, BnMode::Train, None)?,
            Mode::Calibrate => {
                g.batchnorm(x, gamma, beta, layout, BN_EPS, BnMode::Calibrate, None)?
            }
        };
        if mode != Mode::Eval {
            bn_obs.push(BnObs { bn: bn_idx, var: v, width });
        }
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_stage(
        &self,
        g: &mut Graph,
        leaves: &mut Vec<LeafBinding>,
        bn_obs: &mut Vec<BnObs>,
        blk: &ConvBlock,
        c_out: usize,
        c_in: usize,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let train = mode == Mode::Train;
        let w = bind(&self.params, g, leaves, blk.w, vec![c_out, c_in, 3, 3], train);
        let b = bind(&self.params, g, leaves, blk.b, vec![c_out], train);
        let c = g.conv2d(x, w, Some(b), 1, 1)?;
        self.apply_bn(g, leaves, bn_obs, blk.bn, c_out, c, BnLayout::Nchw, mode)
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_bn(
        &self,
        g: &mut Graph,
        leaves: &mut Vec<LeafBinding>,
        bn_obs: &mut Vec<BnObs>,
        blk: &LinearBlock,
        d_out: usize,
        d_in: usize,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let train = mode == Mode::Train;
        let w = bind(&self.params, g, leaves, blk.w, vec![d_out, d_in], train);
        let b = bind(&self.params, g, leaves, blk.b, vec![d_out], train);
        let y = g.linear(x, w, Some(b))?;
        self.apply_bn(g, leaves, bn_obs, blk.bn, d_out, y, BnLayout::LastDim, mode)
    }

    /// Run a candidate architecture over a `[B, C, H, W]` image batch.
    ///
    /// The static input is replicated across the candidate's time-steps
    /// (direct coding) before the stem conv. In `Train` mode batch-norm
    /// running statistics are updated in place with momentum 0.1. With
    /// `soft` the hard spike is replaced by its clamped-ramp relaxation
    /// (used by finite-difference gradient oracles).
    pub fn forward(
        &mut self,
        spec: &ArchSpec,
        images: &Tensor,
        mode: Mode,
        soft: bool,
    ) -> Result<Forward> {
        self.check_spec(spec)?;
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || (shape[2], shape[3]) != self.config.input_hw
        {
            return Err(Error::Shape(format!(
                "expected [B, {}, {}, {}] images, got {shape:?}",
                self.config.in_channels, self.config.input_hw.0, self.config.input_hw.1
            )));
        }
        let t = spec.time_step;
        if t == 0 {
            return Err(Error::Config("time_step must be >= 1".into()));
        }
        let b = shape[0];
        let e = spec.embed_dim;
        let sw = self.config.surrogate_width;
        let mut g = Graph::new();
        let mut leaves = Vec::new();
        let mut bn_obs = Vec::new();
        let mut firing: Vec<(String, FiringStats)> = Vec::new();

        // Direct coding: the image drives every time-step identically.
        let mut folded = Vec::with_capacity(t * images.numel());
        for _ in 0..t {
            folded.extend_from_slice(images.data());
        }
        let x_in = g.leaf_from(vec![t * b, shape[1], shape[2], shape[3]], folded, false);

        let stem = self.config.stem_width;
        let lif = |g: &mut Graph, v: Var, p: &LifParams| g.lif_seq(v, t, p.u_th, p.tau, sw, soft);
        let record = |firing: &mut Vec<(String, FiringStats)>, g: &Graph, id: String, v: Var| {
            firing.push((id, FiringStats::from_spikes(g.data(v))));
        };

        // SPS: four conv-BN-LIF stages, pooling after stages 2 and 4,
        // then a conv position-encoding stage with a membrane shortcut.
        let c1 = self.conv_stage(&mut g, &mut leaves, &mut bn_obs, &self.sps[0].clone(), stem, self.config.in_channels, x_in, mode)?;
        let s1 = lif(&mut g, c1, &self.sps_lif.clone())?;
        record(&mut firing, &g, "sps.conv2".into(), s1);
        let c2 = self.conv_stage(&mut g, &mut leaves, &mut bn_obs, &self.sps[1].clone(), e / 4, stem, s1, mode)?;
        let s2 = lif(&mut g, c2, &self.sps_lif.clone())?;
        let p2 = g.maxpool2(s2)?;
        record(&mut firing, &g, "sps.conv3".into(), p2);
        let c3 = self.conv_stage(&mut g, &mut leaves, &mut bn_obs, &self.sps[2].clone(), e / 2, e / 4, p2, mode)?;
        let s3 = lif(&mut g, c3, &self.sps_lif.clone())?;
        record(&mut firing, &g, "sps.conv4".into(), s3);
        let c4 = self.conv_stage(&mut g, &mut leaves, &mut bn_obs, &self.sps[3].clone(), e, e / 2, s3, mode)?;
        let s4 = lif(&mut g, c4, &self.sps_lif.clone())?;
        let p4 = g.maxpool2(s4)?;
        record(&mut firing, &g, "sps.rpe".into(), p4);
        let cr = self.conv_stage(&mut g, &mut leaves, &mut bn_obs, &self.rpe.clone(), e, e, p4, mode)?;
        let rr = g.add(cr, p4)?;
        let s5 = lif(&mut g, rr, &self.sps_lif.clone())?;
        let mut x = g.nchw_to_tokens(s5)?;

        for (i, layer) in spec.layers.iter().enumerate() {
            let blk = self.blocks[i];
            let fr_x = FiringStats::from_spikes(g.data(x));
            for part in ["q", "k", "v"] {
                firing.push((format!("block{i}.{part}"), fr_x));
            }
            let mk = |net: &Supernet, g: &mut Graph, leaves: &mut Vec<LeafBinding>, bn_obs: &mut Vec<BnObs>, lb: &LinearBlock| -> Result<Var> {
                let y = net.linear_bn(g, leaves, bn_obs, lb, e, e, x, mode)?;
                g.lif_seq(y, t, layer.lif.u_th, layer.lif.tau, sw, soft)
            };
            let q = mk(self, &mut g, &mut leaves, &mut bn_obs, &blk.q)?;
            let k = mk(self, &mut g, &mut leaves, &mut bn_obs, &blk.k)?;
            let v = mk(self, &mut g, &mut leaves, &mut bn_obs, &blk.v)?;
            let mut qkv = FiringStats::from_spikes(g.data(q));
            qkv.merge(&FiringStats::from_spikes(g.data(k)));
            qkv.merge(&FiringStats::from_spikes(g.data(v)));
            firing.push((format!("block{i}.attn"), qkv));
            let a = g.attention(q, k, v, layer.heads, ATTN_SCALE)?;
            // Attention output is integer-valued spike arithmetic, not
            // binary; its "firing rate" is the nonzero fraction.
            record(&mut firing, &g, format!("block{i}.proj"), a);
            let pj = self.linear_bn(&mut g, &mut leaves, &mut bn_obs, &blk.proj, e, e, a, mode)?;
            let res = g.add(pj, x)?;
            let mid = lif(&mut g, res, &layer.lif.clone())?;
            record(&mut firing, &g, format!("block{i}.fc1"), mid);
            let h1 = self.linear_bn(&mut g, &mut leaves, &mut bn_obs, &blk.fc1, layer.mlp_hidden, e, mid, mode)?;
            let hs = lif(&mut g, h1, &layer.lif.clone())?;
            record(&mut firing, &g, format!("block{i}.fc2"), hs);
            let h2 = self.linear_bn(&mut g, &mut leaves, &mut bn_obs, &blk.fc2, e, layer.mlp_hidden, hs, mode)?;
            let res2 = g.add(h2, mid)?;
            x = lif(&mut g, res2, &layer.lif.clone())?;
        }

        record(&mut firing, &g, "head".into(), x);
        let pooled = g.mean_tokens(x)?;
        let rate = g.mean_time(pooled, t)?;
        let train = mode == Mode::Train;
        let hw = bind(&self.params, &mut g, &mut leaves, self.head_w, vec![self.config.num_classes, e], train);
        let hb = bind(&self.params, &mut g, &mut leaves, self.head_b, vec![self.config.num_classes], train);
        let logits = g.linear(rate, hw, Some(hb))?;

        if mode == Mode::Train {
            for obs in &bn_obs {
                let (m, v) = g
                    .bn_batch_stats(obs.var)
                    .ok_or_else(|| Error::Numeric("missing batch stats on a BN node".into()))?;
                let bn = &mut self.bns[obs.bn];
                for c in 0..obs.width {
                    bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * m[c];
                    bn.running_var[c] = (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * v[c];
                }
            }
        }
        Ok(Forward { graph: g, logits, firing, leaves, bn_obs })
    }

    /// Extract a standalone network holding copies of exactly the weight
    /// slices a candidate uses. Its forward pass must match the entangled
    /// forward bit-for-bit up to float associativity.
    pub fn extract(&self, spec: &ArchSpec) -> Result<Supernet> {
        self.check_spec(spec)?;
        let e = spec.embed_dim;
        let cfg = SupernetConfig {
            max_embed: e,
            max_depth: spec.depth,
            max_hidden: spec.layers.iter().map(|l| l.mlp_hidden).max().unwrap_or(1),
            stem_width: self.config.stem_width,
            in_channels: self.config.in_channels,
            num_classes: self.config.num_classes,
            input_hw: self.config.input_hw,
            surrogate_width: self.config.surrogate_width,
        };
        let mut out = Supernet::new(cfg, &mut Rng::new(0))?;
        out.sps_lif = self.sps_lif;
        let stem = self.config.stem_width;
        let copy = |src: &ParamStore, dst: &mut ParamStore, sid: ParamId, did: ParamId, region: &[usize]| {
            let s = src.get(sid);
            let sshape = s.shape().to_vec();
            let sdata = s.data().to_vec();
            let d = dst.get_mut(did);
            let dshape = d.shape().to_vec();
            let ddata = d.data_mut();
            region_for_each(&sshape, &dshape, region, &mut |so, do_| ddata[do_] = sdata[so]);
        };
        let copy_bn = |src_idx: usize, dst_idx: usize, width: usize, out: &mut Supernet| {
            copy(&self.params, &mut out.params, self.bns[src_idx].gamma, out.bns[dst_idx].gamma, &[width]);
            copy(&self.params, &mut out.params, self.bns[src_idx].beta, out.bns[dst_idx].beta, &[width]);
            out.bns[dst_idx].running_mean[..width]
                .copy_from_slice(&self.bns[src_idx].running_mean[..width]);
            out.bns[dst_idx].running_var[..width]
                .copy_from_slice(&self.bns[src_idx].running_var[..width]);
        };
        let conv_regions = [
            (self.sps[0], out.sps[0], [stem, self.config.in_channels, 3, 3], stem),
            (self.sps[1], out.sps[1], [e / 4, stem, 3, 3], e / 4),
            (self.sps[2], out.sps[2], [e / 2, e / 4, 3, 3], e / 2),
            (self.sps[3], out.sps[3], [e, e / 2, 3, 3], e),
            (self.rpe, out.rpe, [e, e, 3, 3], e),
        ];
        for (src, dst, region, width) in conv_regions {
            copy(&self.params, &mut out.params, src.w, dst.w, &region);
            copy(&self.params, &mut out.params, src.b, dst.b, &[width]);
            copy_bn(src.bn, dst.bn, width, &mut out);
        }
        for (i, layer) in spec.layers.iter().enumerate() {
            let s = self.blocks[i];
            let d = out.blocks[i];
            let pairs = [
                (s.q, d.q, [e, e], e),
                (s.k, d.k, [e, e], e),
                (s.v, d.v, [e, e], e),
                (s.proj, d.proj, [e, e], e),
                (s.fc1, d.fc1, [layer.mlp_hidden, e], layer.mlp_hidden),
                (s.fc2, d.fc2, [e, layer.mlp_hidden], e),
            ];
            for (sl, dl, region, width) in pairs {
                copy(&self.params, &mut out.params, sl.w, dl.w, &region);
                copy(&self.params, &mut out.params, sl.b, dl.b, &[width]);
                copy_bn(sl.bn, dl.bn, width, &mut out);
            }
        }
        copy(&self.params, &mut out.params, self.head_w, out.head_w, &[self.config.num_classes, e]);
        copy(&self.params, &mut out.params, self.head_b, out.head_b, &[self.config.num_classes]);
        Ok(out)
    }
}

/// Resolve and validate a candidate into an executable architecture for
/// this supernet.
pub fn build_subnet(
    net: &Supernet,
    candidate: &Candidate,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
) -> Result<ArchSpec> {
    let violations = validate(candidate, space);
    if !violations.is_empty() {
        return Err(Error::Config(format!("invalid candidate: {}", violations.join("; "))));
    }
    let spec = ArchSpec::resolve(candidate, backbone)?;
    net.check_spec(&spec)?;
    Ok(spec)
}

/// Eval-mode forward returning the logits tensor and the firing trace.
pub fn forward_classify(
    net: &mut Supernet,
    spec: &ArchSpec,
    images: &Tensor,
) -> Result<(Tensor, Vec<(String, FiringStats)>)> {
    let fwd = net.forward(spec, images, Mode::Eval, false)?;
    let shape = fwd.graph.shape(fwd.logits).to_vec();
    let data = fwd.graph.data(fwd.logits).to_vec();
    Ok((Tensor::new(shape, data)?, fwd.firing))
}
