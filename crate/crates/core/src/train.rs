//! Supernet training with single-path candidate sampling.
//!
//! Every batch samples one uniform candidate, runs its subnet forward
//! over the shared weights, and backpropagates through the surrogate
//! spike gradients. Only the weight slices the sampled subnet touches
//! are updated; optimizer moments live at full supernet size so a slice
//! keeps its history across candidates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, batch_indices_sequential, Dataset};
use crate::energy::{flops_catalog, model_energy, CatalogEntry, FrEntry, FrTrace, LayerKind};
use crate::error::{Error, Result};
use crate::evolution::random_candidate;
use crate::lif::FiringStats;
use crate::model::{build_subnet, Mode, ParamId, ParamStore, Supernet};
use crate::rng::{mix, Rng};
use crate::space::{ArchSpec, Candidate, FixedBackbone, SearchSpace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-decayed to zero over `epochs`.
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

pub fn cosine_lr(base: f32, epoch: usize, total_epochs: usize) -> f32 {
    let frac = epoch as f32 / total_epochs.max(1) as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * frac).cos())
}

/// Decoupled-weight-decay Adam with full-supernet moment buffers; each
/// step updates only the coordinates the sampled subnet touched.
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn moments(&self, id: ParamId) -> (&[f32], &[f32]) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Checkpoint support: full moment buffers and step counter.
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn from_state(
        lr: f32,
        weight_decay: f32,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    ) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step, m, v }
    }

    /// One optimizer step over the touched regions. `updates` carries,
    /// per parameter, the slice region and the gradient of that slice.
    pub fn apply(&mut self, params: &mut ParamStore, updates: &[(ParamId, Vec<usize>, Vec<f32>)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, region, grad) in updates {
            let full_shape = params.get(*id).shape().to_vec();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let data = params.get_mut(*id).data_mut();
            let mut k = 0usize;
            crate::model::region_for_each(&full_shape, region, region, &mut |fi, _si| {
                let g = grad[k];
                k += 1;
                m[fi] = self.beta1 * m[fi] + (1.0 - self.beta1) * g;
                v[fi] = self.beta2 * v[fi] + (1.0 - self.beta2) * g * g;
                let mh = m[fi] / bc1;
                let vh = v[fi] / bc2;
                data[fi] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[fi]);
            });
        }
    }
}

/// One optimization step on a sampled subnet; returns the batch loss.
pub fn train_step(
    net: &mut Supernet,
    opt: &mut AdamW,
    spec: &ArchSpec,
    images: &Tensor,
    labels: &[usize],
) -> Result<f32> {
    let mut fwd = net.forward(spec, images, Mode::Train, false)?;
    let loss = fwd.graph.cross_entropy(fwd.logits, labels)?;
    let loss_value = fwd.graph.scalar_value(loss);
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "training diverged: non-finite loss {loss_value} (step {})",
            opt.step
        )));
    }
    fwd.graph.backward(loss)?;
    // One leaf per bound slice; a parameter bound twice (it never is
    // today) would accumulate.
    let mut gathered: HashMap<usize, (Vec<usize>, Vec<f32>)> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    for leaf in &fwd.leaves {
        let Some(grad) = fwd.graph.grad(leaf.var) else { continue };
        match gathered.get_mut(&leaf.param.0) {
            Some((_, acc)) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += g;
                }
            }
            None => {
                gathered.insert(leaf.param.0, (leaf.region.clone(), grad.to_vec()));
                order.push(leaf.param.0);
            }
        }
    }
    let updates: Vec<(ParamId, Vec<usize>, Vec<f32>)> = order
        .into_iter()
        .map(|p| {
            let (region, grad) = gathered.remove(&p).unwrap();
            (ParamId(p), region, grad)
        })
        .collect();
    opt.apply(&mut net.params, &updates);
    Ok(loss_value)
}

/// One pass over the dataset with per-batch candidate sampling; returns
/// the sample-weighted mean loss.
pub fn train_epoch(
    net: &mut Supernet,
    opt: &mut AdamW,
    data: &Dataset,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f32> {
    opt.lr = cosine_lr(config.learning_rate, epoch, config.epochs);
    let mut rng = Rng::new(mix(config.seed, 0x5A3E_1E00 ^ epoch as u64));
    let mut total = 0.0f64;
    let mut count = 0usize;
    for batch in batch_indices(data.len(), config.batch_size, config.seed, epoch as u64) {
        let (images, labels) = data.gather(&batch);
        let candidate = random_candidate(space, &mut rng);
        let spec = build_subnet(net, &candidate, space, backbone)?;
        let loss = train_step(net, opt, &spec, &images, &labels).map_err(|e| {
            Error::Numeric(format!("epoch {epoch}, candidate {candidate}: {e}"))
        })?;
        total += loss as f64 * labels.len() as f64;
        count += labels.len();
    }
    if count == 0 {
        return Err(Error::Data("training dataset is empty".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Full training run; returns the per-epoch loss history.
pub fn train_supernet(
    net: &mut Supernet,
    data: &Dataset,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
    config: &TrainConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut opt = AdamW::new(&net.params, config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        history.push(train_epoch(net, &mut opt, data, space, backbone, config, epoch)?);
    }
    Ok(history)
}

/// Refresh BN running statistics for one subnet as the plain mean of the
/// calibration batches' batch statistics. Weights are untouched and the
/// operation is idempotent for fixed batches.
pub fn recalibrate_bn(net: &mut Supernet, spec: &ArchSpec, batches: &[Tensor]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::Config("BN recalibration needs at least one batch".into()));
    }
    let mut sums: HashMap<usize, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
    for images in batches {
        let fwd = net.forward(spec, images, Mode::Calibrate, false)?;
        for obs in &fwd.bn_obs {
            let (m, v) = fwd
                .graph
                .bn_batch_stats(obs.var)
                .ok_or_else(|| Error::Numeric("missing batch stats on a BN node".into()))?;
            let entry = sums
                .entry(obs.bn)
                .or_insert_with(|| (vec![0.0; obs.width], vec![0.0; obs.width], obs.width));
            for c in 0..obs.width {
                entry.0[c] += m[c] as f64;
                entry.1[c] += v[c] as f64;
            }
        }
    }
    let n = batches.len() as f64;
    for (bn, (ms, vs, width)) in sums {
        for c in 0..width {
            net.bns[bn].running_mean[c] = (ms[c] / n) as f32;
            net.bns[bn].running_var[c] = (vs[c] / n) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub candidate: Candidate,
    /// Top-1 fraction over the full eval split.
    pub accuracy: f64,
    pub fr_trace: FrTrace,
    pub energy_joules: f64,
}

/// Join the measured firing trace with the analytic FLOPs catalog.
pub fn fr_trace_from_firing(
    catalog: &[CatalogEntry],
    firing: &[(String, FiringStats)],
) -> Result<FrTrace> {
    let by_id: HashMap<&str, &FiringStats> =
        firing.iter().map(|(id, s)| (id.as_str(), s)).collect();
    catalog
        .iter()
        .filter(|e| e.kind != LayerKind::Ann)
        .map(|e| {
            let stats = by_id.get(e.layer_id.as_str()).ok_or_else(|| {
                Error::Data(format!("no firing measurement for layer {}", e.layer_id))
            })?;
            Ok(FrEntry { layer_id: e.layer_id.clone(), kind: e.kind, flops: e.flops, fr: stats.fr() })
        })
        .collect()
}

/// Top-1 accuracy, measured firing rates, and the resulting model energy
/// for one candidate with inherited (shared) weights.
pub fn evaluate(
    net: &mut Supernet,
    candidate: &Candidate,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let spec = build_subnet(net, candidate, space, backbone)?;
    let mut correct = 0usize;
    let mut firing: Vec<(String, FiringStats)> = Vec::new();
    for batch in batch_indices_sequential(data.len(), batch_size.max(1)) {
        let (images, labels) = data.gather(&batch);
        let fwd = net.forward(&spec, &images, Mode::Eval, false)?;
        let logits = fwd.graph.data(fwd.logits);
        let classes = net.config.num_classes;
        for (row, &label) in labels.iter().enumerate() {
            let scores = &logits[row * classes..(row + 1) * classes];
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap();
            correct += (pred == label) as usize;
        }
        if firing.is_empty() {
            firing = fwd.firing;
        } else {
            for ((_, acc), (_, s)) in firing.iter_mut().zip(&fwd.firing) {
                acc.merge(&s);
            }
        }
    }
    let catalog = flops_catalog(
        &spec,
        net.config.input_hw,
        net.config.in_channels,
        net.config.num_classes,
    )?;
    let fr_trace = fr_trace_from_firing(&catalog, &firing)?;
    let report = model_energy(&catalog, &fr_trace, spec.time_step)?;
    Ok(EvalResult {
        candidate: candidate.clone(),
        accuracy: correct as f64 / data.len() as f64,
        fr_trace,
        energy_joules: report.total_energy,
    })
}
