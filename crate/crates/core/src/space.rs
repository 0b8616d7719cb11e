//! Search spaces and candidate encodings.
//!
//! Three spaces exist: two transformer spaces (`S_Ts`, `S_Tl`) searching
//! embed dim, MLP ratio, head count and depth alongside per-layer neuron
//! traits, and the SNN space (`S_S`) searching only per-block threshold,
//! decay and the time-step over a fixed backbone. Every dimension is an
//! inclusive arithmetic grid `(lower, upper, step)`.
//!
//! Candidate tuples mirror the published table order:
//! SNN candidates are `(threshold x4, tau x4, time-step)`; transformer
//! candidates are `(depth d, MLP ratio x d, head num x d, threshold x d,
//! tau x d, time-step, embed dim)`.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lif::LifParams;

/// Inclusive arithmetic choice grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchDim {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

/// Grid values are canonicalized to 1e-6 so enumeration, parsing and
/// mutation all agree bit-for-bit.
fn canon(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl SearchDim {
    pub fn new(lower: f64, upper: f64, step: f64) -> Result<Self> {
        if step <= 0.0 {
            return Err(Error::Config(format!("search dim step must be > 0, got {step}")));
        }
        if upper < lower {
            return Err(Error::Config(format!("search dim upper {upper} < lower {lower}")));
        }
        let n = ((upper - lower) / step).round();
        if (lower + n * step - upper).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "search dim upper {upper} not reachable from {lower} in steps of {step}"
            )));
        }
        Ok(SearchDim { lower, upper, step })
    }

    /// All values on the grid, both ends inclusive.
    pub fn choices(&self) -> Vec<f64> {
        let n = ((self.upper - self.lower) / self.step).round() as usize;
        (0..=n).map(|k| canon(self.lower + k as f64 * self.step)).collect()
    }

    pub fn contains(&self, v: f64) -> bool {
        self.choices().iter().any(|&c| (c - v).abs() < 1e-9)
    }
}

/// `enumerate_choices((2,4,1)) == [2,3,4]`.
pub fn enumerate_choices(dim: &SearchDim) -> Vec<f64> {
    dim.choices()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    STs,
    STl,
    SS,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpaceKind::STs => "s_ts",
            SpaceKind::STl => "s_tl",
            SpaceKind::SS => "s_s",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s_ts" => Ok(SpaceKind::STs),
            "s_tl" => Ok(SpaceKind::STl),
            "s_s" => Ok(SpaceKind::SS),
            other => Err(Error::Config(format!("unknown space kind '{other}' (s_ts|s_tl|s_s)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub embed_dim: SearchDim,
    pub mlp_ratio: SearchDim,
    pub head_num: SearchDim,
    pub depth: SearchDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnDims {
    pub u_th: SearchDim,
    pub tau: SearchDim,
    pub time_step: SearchDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub kind: SpaceKind,
    /// Present for the transformer spaces, absent for `S_S`.
    pub transformer: Option<TransformerDims>,
    pub snn: SnnDims,
    /// Number of per-block neuron genes in an `S_S` candidate.
    pub snn_blocks: usize,
}

impl SearchSpace {
    pub fn from_kind(kind: SpaceKind) -> Self {
        match kind {
            SpaceKind::STs => SearchSpace {
                kind,
                transformer: Some(TransformerDims {
                    embed_dim: SearchDim::new(336.0, 384.0, 12.0).unwrap(),
                    mlp_ratio: SearchDim::new(3.0, 4.0, 0.2).unwrap(),
                    head_num: SearchDim::new(6.0, 12.0, 6.0).unwrap(),
                    depth: SearchDim::new(2.0, 4.0, 1.0).unwrap(),
                }),
                snn: Self::snn_dims(),
                snn_blocks: 4,
            },
            SpaceKind::STl => SearchSpace {
                kind,
                transformer: Some(TransformerDims {
                    embed_dim: SearchDim::new(336.0, 480.0, 48.0).unwrap(),
                    mlp_ratio: SearchDim::new(3.0, 5.0, 0.2).unwrap(),
                    head_num: SearchDim::new(6.0, 12.0, 6.0).unwrap(),
                    depth: SearchDim::new(2.0, 6.0, 1.0).unwrap(),
                }),
                snn: Self::snn_dims(),
                snn_blocks: 4,
            },
            SpaceKind::SS => SearchSpace {
                kind,
                transformer: None,
                snn: Self::snn_dims(),
                snn_blocks: 4,
            },
        }
    }

    fn snn_dims() -> SnnDims {
        SnnDims {
            u_th: SearchDim::new(0.6, 2.0, 0.2).unwrap(),
            tau: SearchDim::new(1.25, 10.0, 0.25).unwrap(),
            time_step: SearchDim::new(2.0, 4.0, 1.0).unwrap(),
        }
    }

    pub fn s_ts() -> Self {
        Self::from_kind(SpaceKind::STs)
    }

    pub fn s_tl() -> Self {
        Self::from_kind(SpaceKind::STl)
    }

    pub fn s_s() -> Self {
        Self::from_kind(SpaceKind::SS)
    }

    pub fn max_depth(&self) -> usize {
        match &self.transformer {
            Some(t) => t.depth.upper as usize,
            None => self.snn_blocks,
        }
    }
}

/// Fixed transformer backbone used when searching only `S_S`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedBackbone {
    pub depth: usize,
    pub embed_dim: usize,
    pub head_num: usize,
    pub mlp_ratio: f64,
}

impl FixedBackbone {
    /// The Spikformer-4-384 reference backbone.
    pub fn spikformer_4_384() -> Self {
        FixedBackbone { depth: 4, embed_dim: 384, head_num: 12, mlp_ratio: 4.0 }
    }
}

/// `(threshold x4, tau x4, time-step)` genome.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSnn {
    pub u_th: Vec<f64>,
    pub tau: Vec<f64>,
    pub time_step: usize,
}

impl CandidateSnn {
    /// Baseline Spikformer parameter row `(1.0 x4, 2 x4, 4)`.
    pub fn baseline(blocks: usize) -> Self {
        CandidateSnn { u_th: vec![1.0; blocks], tau: vec![2.0; blocks], time_step: 4 }
    }
}

/// `(depth, mlp x d, heads x d, u_th x d, tau x d, time-step, embed)` genome.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateArch {
    pub depth: usize,
    pub mlp_ratio: Vec<f64>,
    pub head_num: Vec<usize>,
    pub u_th: Vec<f64>,
    pub tau: Vec<f64>,
    pub time_step: usize,
    pub embed_dim: usize,
}

impl CandidateArch {
    /// The Spikformer-4-384 row of the transformer candidate tables.
    pub fn spikformer_4_384() -> Self {
        CandidateArch {
            depth: 4,
            mlp_ratio: vec![4.0; 4],
            head_num: vec![12; 4],
            u_th: vec![1.0; 4],
            tau: vec![2.0; 4],
            time_step: 4,
            embed_dim: 384,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Candidate {
    Snn(CandidateSnn),
    Arch(CandidateArch),
}

impl Candidate {
    pub fn time_step(&self) -> usize {
        match self {
            Candidate::Snn(c) => c.time_step,
            Candidate::Arch(c) => c.time_step,
        }
    }

    /// Flat gene vector in tuple order, used by mutation and crossover.
    pub fn genes(&self) -> Vec<f64> {
        match self {
            Candidate::Snn(c) => {
                let mut g = c.u_th.clone();
                g.extend(&c.tau);
                g.push(c.time_step as f64);
                g
            }
            Candidate::Arch(c) => {
                let mut g = vec![c.depth as f64];
                g.extend(&c.mlp_ratio);
                g.extend(c.head_num.iter().map(|&h| h as f64));
                g.extend(&c.u_th);
                g.extend(&c.tau);
                g.push(c.time_step as f64);
                g.push(c.embed_dim as f64);
                g
            }
        }
    }

    /// Stable textual key for caches and dedup.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

fn fmt_tuple(f: &mut fmt::Formatter<'_>, values: &[f64]) -> fmt::Result {
    write!(f, "(")?;
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{}", canon(*v))?;
    }
    write!(f, ")")
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_tuple(f, &self.genes())
    }
}

impl std::str::FromStr for Candidate {
    type Err = Error;

    /// Parses either tuple layout; the layout is unambiguous from the token
    /// count (9 for SNN candidates, `4d+3` for transformer candidates).
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim();
        let inner = inner
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| Error::Config("candidate must be a parenthesized tuple".into()))?;
        let mut values = Vec::new();
        for (i, tok) in inner.split(',').enumerate() {
            let tok = tok.trim();
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Config(format!("candidate gene {}: '{}' is not a number", i + 1, tok)))?;
            values.push(canon(v));
        }
        let int_at = |i: usize, what: &str| -> Result<usize> {
            let v = values[i];
            if v.fract() != 0.0 || v < 0.0 {
                return Err(Error::Config(format!(
                    "candidate gene {} ({what}): {v} is not a non-negative integer",
                    i + 1
                )));
            }
            Ok(v as usize)
        };
        if values.len() == 9 {
            let time_step = int_at(8, "time-step")?;
            return Ok(Candidate::Snn(CandidateSnn {
                u_th: values[0..4].to_vec(),
                tau: values[4..8].to_vec(),
                time_step,
            }));
        }
        if values.is_empty() {
            return Err(Error::Config("empty candidate tuple".into()));
        }
        let depth = int_at(0, "depth")?;
        if depth == 0 || values.len() != 4 * depth + 3 {
            return Err(Error::Config(format!(
                "candidate tuple of {} genes does not match depth {} (expected {})",
                values.len(),
                depth,
                4 * depth + 3
            )));
        }
        let mut heads = Vec::with_capacity(depth);
        for i in 0..depth {
            heads.push(int_at(1 + depth + i, "head num")?);
        }
        let time_step = int_at(1 + 4 * depth, "time-step")?;
        let embed_dim = int_at(2 + 4 * depth, "embed dim")?;
        Ok(Candidate::Arch(CandidateArch {
            depth,
            mlp_ratio: values[1..1 + depth].to_vec(),
            head_num: heads,
            u_th: values[1 + 2 * depth..1 + 3 * depth].to_vec(),
            tau: values[1 + 3 * depth..1 + 4 * depth].to_vec(),
            time_step,
            embed_dim,
        }))
    }
}

impl Serialize for Candidate {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Candidate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e| D::Error::custom(format!("{e}")))
    }
}

/// Check every gene against its choice grid. Returns the empty vec for a
/// valid candidate, otherwise one message per violation.
pub fn validate(candidate: &Candidate, space: &SearchSpace) -> Vec<String> {
    let mut v = Vec::new();
    let check_dim = |v: &mut Vec<String>, dim: &SearchDim, value: f64, what: &str| {
        if !dim.contains(value) {
            v.push(format!(
                "{what} = {value} not in grid ({}, {}, {})",
                dim.lower, dim.upper, dim.step
            ));
        }
    };
    match candidate {
        Candidate::Snn(c) => {
            if space.kind != SpaceKind::SS {
                v.push(format!("SNN candidate under transformer space {}", space.kind));
            }
            if c.u_th.len() != space.snn_blocks {
                v.push(format!("expected {} thresholds, got {}", space.snn_blocks, c.u_th.len()));
            }
            if c.tau.len() != space.snn_blocks {
                v.push(format!("expected {} taus, got {}", space.snn_blocks, c.tau.len()));
            }
            for (i, &u) in c.u_th.iter().enumerate() {
                check_dim(&mut v, &space.snn.u_th, u, &format!("threshold[{i}]"));
            }
            for (i, &t) in c.tau.iter().enumerate() {
                check_dim(&mut v, &space.snn.tau, t, &format!("tau[{i}]"));
            }
            check_dim(&mut v, &space.snn.time_step, c.time_step as f64, "time-step");
        }
        Candidate::Arch(c) => {
            let Some(tr) = &space.transformer else {
                v.push("transformer candidate under the SNN-only space".into());
                return v;
            };
            check_dim(&mut v, &tr.depth, c.depth as f64, "depth");
            check_dim(&mut v, &tr.embed_dim, c.embed_dim as f64, "embed dim");
            check_dim(&mut v, &space.snn.time_step, c.time_step as f64, "time-step");
            for (name, len) in [
                ("mlp ratio", c.mlp_ratio.len()),
                ("head num", c.head_num.len()),
                ("threshold", c.u_th.len()),
                ("tau", c.tau.len()),
            ] {
                if len != c.depth {
                    v.push(format!("{name} list has {len} entries, depth is {}", c.depth));
                }
            }
            for (i, &m) in c.mlp_ratio.iter().enumerate() {
                check_dim(&mut v, &tr.mlp_ratio, m, &format!("mlp ratio[{i}]"));
            }
            for (i, &h) in c.head_num.iter().enumerate() {
                check_dim(&mut v, &tr.head_num, h as f64, &format!("head num[{i}]"));
                if h != 0 && c.embed_dim % h != 0 {
                    v.push(format!("embed dim {} not divisible by head num[{i}] = {h}", c.embed_dim));
                }
            }
            for (i, &u) in c.u_th.iter().enumerate() {
                check_dim(&mut v, &space.snn.u_th, u, &format!("threshold[{i}]"));
            }
            for (i, &t) in c.tau.iter().enumerate() {
                check_dim(&mut v, &space.snn.tau, t, &format!("tau[{i}]"));
            }
        }
    }
    v
}

/// Per-layer concrete dimensions resolved from a candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub mlp_hidden: usize,
    pub heads: usize,
    pub lif: LifParams,
}

/// A fully concrete architecture: what the model builder executes.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub embed_dim: usize,
    pub depth: usize,
    pub layers: Vec<LayerSpec>,
    pub time_step: usize,
    /// Neuron traits for the SPS encoding stages (fixed, not searched).
    pub sps_lif: LifParams,
}

/// MLP hidden width under a fractional ratio.
pub fn mlp_hidden(ratio: f64, embed: usize) -> usize {
    (ratio * embed as f64).round() as usize
}

impl ArchSpec {
    pub fn from_arch(c: &CandidateArch) -> Result<Self> {
        let mut layers = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            layers.push(LayerSpec {
                mlp_hidden: mlp_hidden(c.mlp_ratio[i], c.embed_dim),
                heads: c.head_num[i],
                lif: LifParams::new(c.u_th[i] as f32, c.tau[i] as f32)?,
            });
        }
        Ok(ArchSpec {
            embed_dim: c.embed_dim,
            depth: c.depth,
            layers,
            time_step: c.time_step,
            sps_lif: LifParams::baseline(),
        })
    }

    pub fn from_snn(c: &CandidateSnn, backbone: &FixedBackbone) -> Result<Self> {
        if c.u_th.len() != backbone.depth || c.tau.len() != backbone.depth {
            return Err(Error::Config(format!(
                "SNN candidate has {} blocks, backbone has {}",
                c.u_th.len(),
                backbone.depth
            )));
        }
        let mut layers = Vec::with_capacity(backbone.depth);
        for i in 0..backbone.depth {
            layers.push(LayerSpec {
                mlp_hidden: mlp_hidden(backbone.mlp_ratio, backbone.embed_dim),
                heads: backbone.head_num,
                lif: LifParams::new(c.u_th[i] as f32, c.tau[i] as f32)?,
            });
        }
        Ok(ArchSpec {
            embed_dim: backbone.embed_dim,
            depth: backbone.depth,
            layers,
            time_step: c.time_step,
            sps_lif: LifParams::baseline(),
        })
    }

    pub fn resolve(candidate: &Candidate, backbone: Option<&FixedBackbone>) -> Result<Self> {
        match candidate {
            Candidate::Arch(c) => Self::from_arch(c),
            Candidate::Snn(c) => {
                let b = backbone.ok_or_else(|| {
                    Error::Config("SNN candidate needs a fixed backbone".into())
                })?;
                Self::from_snn(c, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_grid_enumerates_inclusively() {
        let d = SearchDim::new(2.0, 4.0, 1.0).unwrap();
        assert_eq!(d.choices(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn embed_grid_small_space() {
        let d = SearchDim::new(336.0, 384.0, 12.0).unwrap();
        assert_eq!(d.choices(), vec![336.0, 348.0, 360.0, 372.0, 384.0]);
    }

    #[test]
    fn threshold_grid_has_eight_values() {
        let d = SearchDim::new(0.6, 2.0, 0.2).unwrap();
        let c = d.choices();
        assert_eq!(c.len(), 8);
        assert_eq!(c[0], 0.6);
        assert_eq!(c[1], 0.8);
        assert_eq!(*c.last().unwrap(), 2.0);
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(SearchDim::new(1.0, 2.0, 0.0).is_err());
        assert!(SearchDim::new(2.0, 1.0, 0.5).is_err());
        assert!(SearchDim::new(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn tau_grid_contains_table_values() {
        let d = SearchDim::new(1.25, 10.0, 0.25).unwrap();
        for v in [1.25, 1.5, 2.0, 2.5, 3.0, 5.0, 10.0] {
            assert!(d.contains(v), "{v}");
        }
        assert!(!d.contains(1.3));
        assert_eq!(d.choices().len(), 36);
    }

    #[test]
    fn pareto_table_row_is_valid_under_s_ts() {
        let c: Candidate = "(2, 3.6, 3.6, 6, 12, 1.8, 2.0, 5, 2, 4, 348)".parse().unwrap();
        let space = SearchSpace::s_ts();
        assert!(validate(&c, &space).is_empty());
        match &c {
            Candidate::Arch(a) => {
                assert_eq!(a.depth, 2);
                assert_eq!(a.embed_dim, 348);
                assert_eq!(a.head_num, vec![6, 12]);
                assert_eq!(a.tau, vec![5.0, 2.0]);
            }
            _ => panic!("expected transformer candidate"),
        }
    }

    #[test]
    fn invalid_depth_and_offgrid_embed_flagged() {
        let space = SearchSpace::s_ts();
        let mut c = CandidateArch::spikformer_4_384();
        c.depth = 5;
        c.mlp_ratio = vec![4.0; 5];
        c.head_num = vec![12; 5];
        c.u_th = vec![1.0; 5];
        c.tau = vec![2.0; 5];
        let v = validate(&Candidate::Arch(c), &space);
        assert!(v.iter().any(|m| m.contains("depth")), "{v:?}");

        let mut c2 = CandidateArch::spikformer_4_384();
        c2.embed_dim = 350;
        let v2 = validate(&Candidate::Arch(c2), &space);
        assert!(v2.iter().any(|m| m.contains("embed dim")), "{v2:?}");
    }

    #[test]
    fn baseline_snn_string_parses() {
        let c: Candidate = "(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)".parse().unwrap();
        assert_eq!(c, Candidate::Snn(CandidateSnn::baseline(4)));
        assert!(validate(&c, &SearchSpace::s_s()).is_empty());
    }

    #[test]
    fn malformed_tuple_errors_name_the_gene() {
        let err = "(1.0, oops, 1.0, 1.0, 2, 2, 2, 2, 4)".parse::<Candidate>().unwrap_err();
        assert!(err.to_string().contains("gene 2"), "{err}");
        assert!("1.0, 2".parse::<Candidate>().is_err());
        assert!("(2, 3.6, 6, 1.8, 5, 4, 348)".parse::<Candidate>().is_err());
    }

    #[test]
    fn tuple_roundtrip_is_value_exact() {
        let space = SearchSpace::s_tl();
        let samples = [
            "(3, 3.2, 3.6, 3.2, 6, 12, 6, 1.4, 1.8, 0.8, 3, 5, 5, 4, 480)",
            "(1.6, 0.6, 2.0, 1.8, 5, 10, 10, 1.5, 4)",
        ];
        for s in samples {
            let c: Candidate = s.parse().unwrap();
            let printed = c.to_string();
            let c2: Candidate = printed.parse().unwrap();
            assert_eq!(c, c2, "{s} -> {printed}");
        }
        let _ = space;
    }

    #[test]
    fn arch_spec_rounds_mlp_hidden() {
        assert_eq!(mlp_hidden(3.2, 348), 1114); // 1113.6 rounds up
        assert_eq!(mlp_hidden(4.0, 384), 1536);
    }

    #[test]
    fn snn_candidate_resolves_against_backbone() {
        let c = CandidateSnn::baseline(4);
        let spec = ArchSpec::from_snn(&c, &FixedBackbone::spikformer_4_384()).unwrap();
        assert_eq!(spec.depth, 4);
        assert_eq!(spec.embed_dim, 384);
        assert_eq!(spec.layers[0].mlp_hidden, 1536);
        assert_eq!(spec.time_step, 4);
        assert_eq!(spec.sps_lif, LifParams::baseline());
    }

    #[test]
    fn candidate_serde_uses_tuple_string() {
        let c: Candidate = "(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)".parse().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.starts_with("\"(1"), "{json}");
        let back: Candidate = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
    }
}
