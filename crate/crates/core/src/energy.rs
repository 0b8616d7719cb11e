//! Synaptic-operation energy model.
//!
//! FLOPs count multiply-accumulate operations (1 MAC = 1 FLOP). Spiking
//! layers replace MACs with accumulates, so their cost is counted as
//! `SOPs = fr x t x FLOPs` where `fr` is the firing rate of the layer's
//! input spike train. Total model energy bills the first encoding conv at
//! the MAC rate on raw FLOPs (its input is a dense image) and every
//! subsequent conv / FC / self-attention layer at the accumulate rate on
//! SOPs, using the 45 nm process constants.
//!
//! Energies are joules throughout; `paper_units` rescales for comparison
//! with published tables (see the note on that function).

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::ArchSpec;

/// Energy of one multiply-accumulate, 45 nm CMOS.
pub const E_MAC: f64 = 4.6e-12;
/// Energy of one accumulate, 45 nm CMOS.
pub const E_AC: f64 = 0.9e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Dense-input layer billed per MAC (the encoding conv).
    Ann,
    SnnConv,
    SnnFc,
    Ssa,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Ann => "ann",
            LayerKind::SnnConv => "snn_conv",
            LayerKind::SnnFc => "snn_fc",
            LayerKind::Ssa => "ssa",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann" => Ok(LayerKind::Ann),
            "snn_conv" => Ok(LayerKind::SnnConv),
            "snn_fc" => Ok(LayerKind::SnnFc),
            "ssa" => Ok(LayerKind::Ssa),
            other => Err(Error::Config(format!("unknown layer kind '{other}'"))),
        }
    }
}

/// Shape description sufficient to count a layer's MACs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerShape {
    Conv { kh: usize, kw: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize },
    Linear { tokens: usize, d_in: usize, d_out: usize },
    /// The two attention matmuls (Q.K^T and attn.V) across all heads;
    /// the four linear projections are counted as separate layers.
    Attention { heads: usize, tokens: usize, d_head: usize },
}

pub fn flops_of_layer(shape: &LayerShape) -> f64 {
    match *shape {
        LayerShape::Conv { kh, kw, c_in, c_out, h_out, w_out } => {
            (kh * kw * c_in * c_out * h_out * w_out) as f64
        }
        LayerShape::Linear { tokens, d_in, d_out } => (tokens * d_in * d_out) as f64,
        LayerShape::Attention { heads, tokens, d_head } => {
            2.0 * (heads * tokens * tokens * d_head) as f64
        }
    }
}

/// Eq-style accumulate count: `fr x t x flops`.
pub fn sops(flops: f64, fr: f64, time_step: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&fr) {
        return Err(Error::Numeric(format!("firing rate {fr} outside [0, 1]")));
    }
    if flops < 0.0 {
        return Err(Error::Numeric(format!("negative flops {flops}")));
    }
    Ok(fr * time_step as f64 * flops)
}

/// Power of a dense block: 4.6 pJ per MAC.
pub fn ann_block_power(flops: f64) -> f64 {
    E_MAC * flops
}

/// Power of a spiking block: 0.9 pJ per accumulate.
pub fn snn_block_power(sops: f64) -> f64 {
    E_AC * sops
}

/// Joules rescaled to the units used by the published comparison tables
/// (numerically, millijoules; the tables label them uJ, which the
/// derivation here does not reproduce — relative values match, absolute
/// scale does not, so the conversion is kept explicit and in one place).
pub fn paper_units(joules: f64) -> f64 {
    joules * 1e3
}

/// One layer of the static FLOPs catalog for an architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub layer_id: String,
    pub kind: LayerKind,
    pub flops: f64,
}

/// Static per-layer MAC counts for a concrete architecture on a given
/// input. Layer ids here are the ids the firing-rate trace must cover.
pub fn flops_catalog(
    spec: &ArchSpec,
    input_hw: (usize, usize),
    in_channels: usize,
    num_classes: usize,
) -> Result<Vec<CatalogEntry>> {
    let (h, w) = input_hw;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} not divisible by the 4x patch downsampling"
        )));
    }
    let e = spec.embed_dim;
    if e % 8 != 0 {
        return Err(Error::Shape(format!("embed dim {e} not divisible by 8")));
    }
    let conv = |kh, kw, ci, co, ho, wo| {
        flops_of_layer(&LayerShape::Conv { kh, kw, c_in: ci, c_out: co, h_out: ho, w_out: wo })
    };
    let lin = |tokens, di, dout| flops_of_layer(&LayerShape::Linear { tokens, d_in: di, d_out: dout });
    let tokens = (h / 4) * (w / 4);
    let mut cat = Vec::new();
    let mut push = |id: String, kind: LayerKind, flops: f64| {
        cat.push(CatalogEntry { layer_id: id, kind, flops });
    };
    // Patch-splitting stack: conv-BN-LIF x4 with 2x2 maxpool after
    // stages 2 and 4, then the relative-position conv.
    push("sps.conv1".into(), LayerKind::Ann, conv(3, 3, in_channels, e / 8, h, w));
    push("sps.conv2".into(), LayerKind::SnnConv, conv(3, 3, e / 8, e / 4, h, w));
    push("sps.conv3".into(), LayerKind::SnnConv, conv(3, 3, e / 4, e / 2, h / 2, w / 2));
    push("sps.conv4".into(), LayerKind::SnnConv, conv(3, 3, e / 2, e, h / 2, w / 2));
    push("sps.rpe".into(), LayerKind::SnnConv, conv(3, 3, e, e, h / 4, w / 4));
    for (i, layer) in spec.layers.iter().enumerate() {
        if e % layer.heads != 0 {
            return Err(Error::Shape(format!(
                "embed dim {e} not divisible by {} heads in block {i}",
                layer.heads
            )));
        }
        let d_head = e / layer.heads;
        push(format!("block{i}.q"), LayerKind::SnnFc, lin(tokens, e, e));
        push(format!("block{i}.k"), LayerKind::SnnFc, lin(tokens, e, e));
        push(format!("block{i}.v"), LayerKind::SnnFc, lin(tokens, e, e));
        push(
            format!("block{i}.attn"),
            LayerKind::Ssa,
            flops_of_layer(&LayerShape::Attention { heads: layer.heads, tokens, d_head }),
        );
        push(format!("block{i}.proj"), LayerKind::SnnFc, lin(tokens, e, e));
        push(format!("block{i}.fc1"), LayerKind::SnnFc, lin(tokens, e, layer.mlp_hidden));
        push(format!("block{i}.fc2"), LayerKind::SnnFc, lin(tokens, layer.mlp_hidden, e));
    }
    push("head".into(), LayerKind::SnnFc, lin(1, e, num_classes));
    Ok(cat)
}

/// Measured firing rate for one catalog layer's input spike train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrEntry {
    pub layer_id: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub fr: f64,
}

pub type FrTrace = Vec<FrEntry>;

/// Per-layer billed cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub fr_in: f64,
    pub sops: f64,
    pub joules: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// MACs of the dense-input encoding conv, billed at `e_mac`.
    pub first_layer_flops: f64,
    pub layer_costs: Vec<LayerCost>,
    pub e_mac: f64,
    pub e_ac: f64,
    pub total_energy: f64,
}

impl EnergyReport {
    /// Total if every layer ran as a dense ANN: 4.6 pJ x all MACs.
    pub fn ann_energy(&self) -> f64 {
        ann_block_power(self.layer_costs.iter().map(|c| c.flops).sum())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,kind,flops,fr,sops,joules\n");
        for c in &self.layer_costs {
            out.push_str(&format!(
                "{},{},{},{},{},{:e}\n",
                c.layer_id, c.kind, c.flops, c.fr_in, c.sops, c.joules
            ));
        }
        out
    }
}

/// Bill a catalog against a firing-rate trace.
///
/// Every non-dense catalog layer must have a trace entry; dense (`ann`)
/// layers are billed on raw FLOPs and ignore the trace.
pub fn model_energy(catalog: &[CatalogEntry], trace: &FrTrace, time_step: usize) -> Result<EnergyReport> {
    if time_step == 0 {
        return Err(Error::Config("time_step must be >= 1".into()));
    }
    let mut first_layer_flops = 0.0;
    let mut costs = Vec::with_capacity(catalog.len());
    let mut total = 0.0;
    for entry in catalog {
        let (fr_in, layer_sops, joules) = if entry.kind == LayerKind::Ann {
            first_layer_flops += entry.flops;
            (1.0, 0.0, ann_block_power(entry.flops))
        } else {
            let fr = trace
                .iter()
                .find(|t| t.layer_id == entry.layer_id)
                .map(|t| t.fr)
                .ok_or_else(|| {
                    Error::Data(format!("fr trace missing layer '{}'", entry.layer_id))
                })?;
            let s = sops(entry.flops, fr, time_step)?;
            (fr, s, snn_block_power(s))
        };
        total += joules;
        costs.push(LayerCost {
            layer_id: entry.layer_id.clone(),
            kind: entry.kind,
            flops: entry.flops,
            fr_in,
            sops: layer_sops,
            joules,
        });
    }
    Ok(EnergyReport {
        first_layer_flops,
        layer_costs: costs,
        e_mac: E_MAC,
        e_ac: E_AC,
        total_energy: total,
    })
}

/// A trace with one uniform firing rate for every spiking layer.
pub fn uniform_trace(catalog: &[CatalogEntry], fr: f64) -> FrTrace {
    catalog
        .iter()
        .filter(|e| e.kind != LayerKind::Ann)
        .map(|e| FrEntry { layer_id: e.layer_id.clone(), kind: e.kind, flops: e.flops, fr })
        .collect()
}

pub fn write_fr_trace(path: &Path, trace: &FrTrace) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in trace {
        writeln!(f, "{},{},{},{}", e.layer_id, e.kind, e.flops, e.fr)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_fr_trace(path: &Path) -> Result<FrTrace> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut trace = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Data(format!(
                "fr trace line {}: expected 4 comma-separated fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("fr trace line {}: bad {what}", lineno + 1));
        let kind: LayerKind = parts[1].trim().parse().map_err(|_| bad("kind"))?;
        let flops: f64 = parts[2].trim().parse().map_err(|_| bad("flops"))?;
        let fr: f64 = parts[3].trim().parse().map_err(|_| bad("fr"))?;
        if !(0.0..=1.0).contains(&fr) {
            return Err(bad("fr (outside [0, 1])"));
        }
        trace.push(FrEntry { layer_id: parts[0].trim().to_string(), kind, flops, fr });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ArchSpec, CandidateArch};

    #[test]
    fn linear_flops_closed_form() {
        let f = flops_of_layer(&LayerShape::Linear { tokens: 64, d_in: 348, d_out: 348 });
        assert_eq!(f, 7_750_656.0);
        assert_eq!(flops_of_layer(&LayerShape::Linear { tokens: 0, d_in: 348, d_out: 348 }), 0.0);
    }

    #[test]
    fn conv_flops_closed_form() {
        let f = flops_of_layer(&LayerShape::Conv {
            kh: 3,
            kw: 3,
            c_in: 3,
            c_out: 48,
            h_out: 32,
            w_out: 32,
        });
        assert_eq!(f, 1_327_104.0);
    }

    #[test]
    fn sops_direct_arithmetic() {
        assert_eq!(sops(12345.0, 0.0, 3).unwrap(), 0.0);
        assert_eq!(sops(777.0, 1.0, 1).unwrap(), 777.0);
        assert_eq!(sops(100.0, 0.5, 4).unwrap(), 200.0);
        assert!(sops(10.0, 1.5, 2).is_err());
        assert!(sops(10.0, -0.1, 2).is_err());
    }

    #[test]
    fn block_power_constants() {
        assert_eq!(ann_block_power(0.0), 0.0);
        assert_eq!(ann_block_power(1e9), 4.6e-3);
        assert_eq!(snn_block_power(0.0), 0.0);
        assert_eq!(snn_block_power(1e9), 0.9e-3);
    }

    #[test]
    fn snn_to_ann_power_ratio_is_exact() {
        // Same block, fr and t: ratio must be (0.9/4.6) * fr * t.
        let flops = 31_416.0;
        let (fr, t) = (0.35, 4);
        let s = sops(flops, fr, t).unwrap();
        let ratio = snn_block_power(s) / ann_block_power(flops);
        assert!((ratio - (0.9 / 4.6) * fr * t as f64).abs() < 1e-15);
    }

    fn two_layer_catalog() -> Vec<CatalogEntry> {
        vec![
            CatalogEntry { layer_id: "first".into(), kind: LayerKind::Ann, flops: 1000.0 },
            CatalogEntry { layer_id: "fc".into(), kind: LayerKind::SnnFc, flops: 1000.0 },
        ]
    }

    #[test]
    fn toy_two_layer_energy_by_hand() {
        let cat = two_layer_catalog();
        let trace = uniform_trace(&cat, 0.5);
        let r = model_energy(&cat, &trace, 2).unwrap();
        // 4.6e-12*1000 + 0.9e-12*(0.5*2*1000) = 5.5e-9
        assert!((r.total_energy - 5.5e-9).abs() < 1e-20);
        assert_eq!(r.first_layer_flops, 1000.0);
    }

    #[test]
    fn zero_trace_bills_only_the_encoder() {
        let cat = two_layer_catalog();
        let trace = uniform_trace(&cat, 0.0);
        let r = model_energy(&cat, &trace, 4).unwrap();
        assert_eq!(r.total_energy, E_MAC * 1000.0);
    }

    #[test]
    fn missing_trace_entry_is_an_error() {
        let cat = two_layer_catalog();
        let err = model_energy(&cat, &Vec::new(), 2).unwrap_err();
        assert!(err.to_string().contains("fc"), "{err}");
    }

    #[test]
    fn decomposition_and_monotonicity() {
        let spec = ArchSpec::from_arch(&CandidateArch::spikformer_4_384()).unwrap();
        let cat = flops_catalog(&spec, (32, 32), 3, 10).unwrap();
        let mut trace = uniform_trace(&cat, 0.2);
        let base = model_energy(&cat, &trace, 4).unwrap();
        let ac_sum: f64 = base.layer_costs.iter().map(|c| c.sops).sum();
        assert!(
            ((base.total_energy - E_MAC * base.first_layer_flops) - E_AC * ac_sum).abs()
                < base.total_energy * 1e-12
        );
        // Raising any single fr never lowers the total.
        for i in 0..trace.len() {
            let mut t2 = trace.clone();
            t2[i].fr += 0.3;
            let bumped = model_energy(&cat, &t2, 4).unwrap();
            assert!(bumped.total_energy >= base.total_energy, "layer {}", trace[i].layer_id);
        }
        // Linearity in fr: doubling every rate doubles the AC part.
        for e in &mut trace {
            e.fr *= 2.0;
        }
        let doubled = model_energy(&cat, &trace, 4).unwrap();
        let ac = base.total_energy - E_MAC * base.first_layer_flops;
        let ac2 = doubled.total_energy - E_MAC * doubled.first_layer_flops;
        assert!((ac2 - 2.0 * ac).abs() < ac * 1e-9);
    }

    #[test]
    fn spikformer_catalog_layer_counts() {
        let spec = ArchSpec::from_arch(&CandidateArch::spikformer_4_384()).unwrap();
        let cat = flops_catalog(&spec, (32, 32), 3, 10).unwrap();
        // 5 SPS convs + 7 per block x 4 + head
        assert_eq!(cat.len(), 5 + 28 + 1);
        assert_eq!(cat[0].flops, 1_327_104.0);
        let rpe = cat.iter().find(|e| e.layer_id == "sps.rpe").unwrap();
        assert_eq!(rpe.flops, (9 * 384 * 384 * 64) as f64);
        let attn = cat.iter().find(|e| e.layer_id == "block0.attn").unwrap();
        assert_eq!(attn.flops, (2 * 12 * 64 * 64 * 32) as f64);
    }

    #[test]
    fn fr_trace_file_roundtrip() {
        let spec = ArchSpec::from_arch(&CandidateArch::spikformer_4_384()).unwrap();
        let cat = flops_catalog(&spec, (32, 32), 3, 10).unwrap();
        let trace = uniform_trace(&cat, 0.35);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fr.trace");
        write_fr_trace(&path, &trace).unwrap();
        let back = read_fr_trace(&path).unwrap();
        assert_eq!(trace, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("sps.conv2,snn_conv,"));
    }

    #[test]
    fn csv_export_has_fixed_columns() {
        let cat = two_layer_catalog();
        let r = model_energy(&cat, &uniform_trace(&cat, 0.5), 2).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "layer_id,kind,flops,fr,sops,joules");
        assert!(lines.next().unwrap().starts_with("first,ann,1000,1,0,"));
        assert!(lines.next().unwrap().starts_with("fc,snn_fc,1000,0.5,1000,"));
    }

    #[test]
    fn reference_model_energy_near_published_row() {
        // Spikformer-4-384 at 32x32, uniform fr 0.35, t=4.
        let spec = ArchSpec::from_arch(&CandidateArch::spikformer_4_384()).unwrap();
        let cat = flops_catalog(&spec, (32, 32), 3, 10).unwrap();
        let r = model_energy(&cat, &uniform_trace(&cat, 0.35), 4).unwrap();
        let snn = paper_units(r.total_energy);
        let ann = paper_units(r.ann_energy());
        assert!((snn - 0.95).abs() / 0.95 < 0.25, "snn {snn}");
        assert!((ann - 3.97).abs() / 3.97 < 0.25, "ann {ann}");
    }
}
