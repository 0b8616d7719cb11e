//! Evolutionary search over neuron traits and architectures.
//!
//! A population of candidates is scored by the accuracy-and-energy
//! balanced fitness; the top candidates parent the next generation via
//! uniform crossover and single-gene mutation. Raw accuracy and energy
//! are min-max scaled over every record seen so far in the run.
//!
//! Fitness direction: the published fitness is written as a weighted sum
//! that would reward HIGH energy if taken literally; since the stated
//! goal is a Pareto-optimal accuracy/energy balance, this implementation
//! maximizes `alpha * (1 - E_scaled) + (1 - alpha) * A_scaled` and flags
//! the sign flip here and in the CLI help.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::{flops_catalog, model_energy, FrEntry, FrTrace, LayerKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::{
    ArchSpec, Candidate, CandidateArch, CandidateSnn, FixedBackbone, SearchDim, SearchSpace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvoConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Top-k records by fitness that parent the next generation.
    pub parent_count: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    /// Energy weight in the fitness.
    pub alpha: f64,
    pub seed: u64,
    /// Hard cap on evaluations across all generations.
    pub total_sample_budget: Option<usize>,
    /// Keep parents in the next population.
    pub elitist: bool,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population_size: 50,
            generations: 20,
            parent_count: 10,
            mutation_prob: 0.2,
            crossover_prob: 0.5,
            alpha: 0.5,
            seed: 0,
            total_sample_budget: None,
            elitist: true,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.generations == 0 {
            return Err(Error::Config("population and generations must be >= 1".into()));
        }
        if self.parent_count == 0 || self.parent_count > self.population_size {
            return Err(Error::Config(format!(
                "parent_count {} must be in 1..={}",
                self.parent_count, self.population_size
            )));
        }
        for (name, p) in [
            ("mutation_prob", self.mutation_prob),
            ("crossover_prob", self.crossover_prob),
            ("alpha", self.alpha),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub candidate: Candidate,
    #[serde(rename = "accuracy")]
    pub raw_accuracy: f64,
    #[serde(rename = "energy_joules")]
    pub raw_energy: f64,
    #[serde(rename = "scaled_acc")]
    pub scaled_accuracy: f64,
    pub scaled_energy: f64,
    pub fitness: f64,
    pub generation: usize,
    pub seed: u64,
}

// ---- sampling, mutation, crossover ----

fn pick(dim: &SearchDim, rng: &mut Rng) -> f64 {
    let c = dim.choices();
    c[rng.below(c.len())]
}

/// Resample a gene uniformly from its grid excluding the current value.
fn resample(dim: &SearchDim, current: f64, rng: &mut Rng) -> f64 {
    let c: Vec<f64> = dim.choices().into_iter().filter(|v| (v - current).abs() >= 1e-9).collect();
    if c.is_empty() {
        current
    } else {
        c[rng.below(c.len())]
    }
}

/// Uniform candidate: depth first, then every remaining gene uniform over
/// its choice grid.
pub fn random_candidate(space: &SearchSpace, rng: &mut Rng) -> Candidate {
    match &space.transformer {
        None => Candidate::Snn(CandidateSnn {
            u_th: (0..space.snn_blocks).map(|_| pick(&space.snn.u_th, rng)).collect(),
            tau: (0..space.snn_blocks).map(|_| pick(&space.snn.tau, rng)).collect(),
            time_step: pick(&space.snn.time_step, rng) as usize,
        }),
        Some(tr) => {
            let depth = pick(&tr.depth, rng) as usize;
            let mut mlp = Vec::with_capacity(depth);
            let mut heads = Vec::with_capacity(depth);
            let mut u_th = Vec::with_capacity(depth);
            let mut tau = Vec::with_capacity(depth);
            for _ in 0..depth {
                mlp.push(pick(&tr.mlp_ratio, rng));
                heads.push(pick(&tr.head_num, rng) as usize);
                u_th.push(pick(&space.snn.u_th, rng));
                tau.push(pick(&space.snn.tau, rng));
            }
            Candidate::Arch(CandidateArch {
                depth,
                mlp_ratio: mlp,
                head_num: heads,
                u_th,
                tau,
                time_step: pick(&space.snn.time_step, rng) as usize,
                embed_dim: pick(&tr.embed_dim, rng) as usize,
            })
        }
    }
}

/// With probability `mutation_prob`, resample exactly one uniformly chosen
/// gene (excluding its current value). A depth change counts as one gene:
/// growing appends freshly random per-layer genes, shrinking truncates.
pub fn mutate(c: &Candidate, space: &SearchSpace, rng: &mut Rng, mutation_prob: f64) -> Candidate {
    if rng.next_f64() >= mutation_prob {
        return c.clone();
    }
    let mut out = c.clone();
    match &mut out {
        Candidate::Snn(s) => {
            let g = rng.below(2 * space.snn_blocks + 1);
            let blocks = space.snn_blocks;
            if g < blocks {
                s.u_th[g] = resample(&space.snn.u_th, s.u_th[g], rng);
            } else if g < 2 * blocks {
                s.tau[g - blocks] = resample(&space.snn.tau, s.tau[g - blocks], rng);
            } else {
                s.time_step = resample(&space.snn.time_step, s.time_step as f64, rng) as usize;
            }
        }
        Candidate::Arch(a) => {
            let Some(tr) = &space.transformer else { return out };
            let g = rng.below(3 + 4 * a.depth);
            match g {
                0 => {
                    let new_depth = resample(&tr.depth, a.depth as f64, rng) as usize;
                    if new_depth > a.depth {
                        for _ in a.depth..new_depth {
                            a.mlp_ratio.push(pick(&tr.mlp_ratio, rng));
                            a.head_num.push(pick(&tr.head_num, rng) as usize);
                            a.u_th.push(pick(&space.snn.u_th, rng));
                            a.tau.push(pick(&space.snn.tau, rng));
                        }
                    } else {
                        a.mlp_ratio.truncate(new_depth);
                        a.head_num.truncate(new_depth);
                        a.u_th.truncate(new_depth);
                        a.tau.truncate(new_depth);
                    }
                    a.depth = new_depth;
                }
                1 => a.time_step = resample(&space.snn.time_step, a.time_step as f64, rng) as usize,
                2 => a.embed_dim = resample(&tr.embed_dim, a.embed_dim as f64, rng) as usize,
                _ => {
                    let slot = (g - 3) / 4;
                    match (g - 3) % 4 {
                        0 => a.mlp_ratio[slot] = resample(&tr.mlp_ratio, a.mlp_ratio[slot], rng),
                        1 => {
                            a.head_num[slot] =
                                resample(&tr.head_num, a.head_num[slot] as f64, rng) as usize
                        }
                        2 => a.u_th[slot] = resample(&space.snn.u_th, a.u_th[slot], rng),
                        _ => a.tau[slot] = resample(&space.snn.tau, a.tau[slot], rng),
                    }
                }
            }
        }
    }
    out
}

/// Uniform gene-wise crossover at maximal-depth alignment: every gene is
/// independently inherited from either parent; per-layer slots beyond one
/// parent's depth come from the other.
pub fn crossover(a: &Candidate, b: &Candidate, rng: &mut Rng) -> Result<Candidate> {
    match (a, b) {
        (Candidate::Snn(a), Candidate::Snn(b)) => {
            if a.u_th.len() != b.u_th.len() {
                return Err(Error::Config("crossover parents have different block counts".into()));
            }
            let mut coin = |x: f64, y: f64| if rng.below(2) == 0 { x } else { y };
            let u_th = a.u_th.iter().zip(&b.u_th).map(|(&x, &y)| coin(x, y)).collect();
            let tau = a.tau.iter().zip(&b.tau).map(|(&x, &y)| coin(x, y)).collect();
            let time_step = coin(a.time_step as f64, b.time_step as f64) as usize;
            Ok(Candidate::Snn(CandidateSnn { u_th, tau, time_step }))
        }
        (Candidate::Arch(a), Candidate::Arch(b)) => {
            let depth = if rng.below(2) == 0 { a.depth } else { b.depth };
            let pick_slot = |rng: &mut Rng, i: usize, fa: &dyn Fn(&CandidateArch) -> f64| {
                match (i < a.depth, i < b.depth) {
                    (true, true) => {
                        if rng.below(2) == 0 {
                            fa(a)
                        } else {
                            fa(b)
                        }
                    }
                    (true, false) => fa(a),
                    _ => fa(b),
                }
            };
            let mut mlp = Vec::with_capacity(depth);
            let mut heads = Vec::with_capacity(depth);
            let mut u_th = Vec::with_capacity(depth);
            let mut tau = Vec::with_capacity(depth);
            for i in 0..depth {
                mlp.push(pick_slot(rng, i, &|c: &CandidateArch| c.mlp_ratio[i]));
                heads.push(pick_slot(rng, i, &|c: &CandidateArch| c.head_num[i] as f64) as usize);
                u_th.push(pick_slot(rng, i, &|c: &CandidateArch| c.u_th[i]));
                tau.push(pick_slot(rng, i, &|c: &CandidateArch| c.tau[i]));
            }
            let time_step = if rng.below(2) == 0 { a.time_step } else { b.time_step };
            let embed_dim = if rng.below(2) == 0 { a.embed_dim } else { b.embed_dim };
            Ok(Candidate::Arch(CandidateArch {
                depth,
                mlp_ratio: mlp,
                head_num: heads,
                u_th,
                tau,
                time_step,
                embed_dim,
            }))
        }
        _ => Err(Error::Config("crossover parents come from different spaces".into())),
    }
}

// ---- scaling and fitness ----

/// `(v - min) / (max - min)` per value; a degenerate (all-equal) input
/// maps to all-0.5.
pub fn minmax_scale(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Numeric("minmax_scale of an empty list".into()));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Numeric("minmax_scale over non-finite values".into()));
    }
    if max == min {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Balanced fitness, maximized: `alpha * (1 - E) + (1 - alpha) * A`.
pub fn f_aeb(scaled_accuracy: f64, scaled_energy: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&scaled_accuracy) || !(0.0..=1.0).contains(&scaled_energy) {
        return Err(Error::Numeric(format!(
            "scaled inputs ({scaled_accuracy}, {scaled_energy}) outside [0, 1]"
        )));
    }
    Ok(alpha * (1.0 - scaled_energy) + (1.0 - alpha) * scaled_accuracy)
}

/// Recompute scaled scores and fitness over the whole record set.
pub fn rescale_records(records: &mut [FitnessRecord], alpha: f64) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let accs: Vec<f64> = records.iter().map(|r| r.raw_accuracy).collect();
    let energies: Vec<f64> = records.iter().map(|r| r.raw_energy).collect();
    let sa = minmax_scale(&accs)?;
    let se = minmax_scale(&energies)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.scaled_accuracy = sa[i];
        r.scaled_energy = se[i];
        r.fitness = f_aeb(sa[i], se[i], alpha)?;
    }
    Ok(())
}

/// Record indices ranked by fitness, best first, ties broken by insertion
/// order for determinism.
pub fn rank_by_fitness(records: &[FitnessRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        records[j]
            .fitness
            .partial_cmp(&records[i].fitness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

// ---- search drivers ----

pub struct EvoOutcome {
    pub records: Vec<FitnessRecord>,
    /// Best record (by fitness over all records so far) after each
    /// generation's evaluation barrier.
    pub generation_best: Vec<FitnessRecord>,
}

fn eval_into(
    candidate: &Candidate,
    generation: usize,
    seed: u64,
    evaluator: &mut impl FnMut(&Candidate) -> Result<(f64, f64)>,
    records: &mut Vec<FitnessRecord>,
    seen: &mut HashMap<String, usize>,
) -> Result<()> {
    let (acc, energy) =
        evaluator(candidate).map_err(|e| Error::Config(format!("evaluator failed on {candidate}: {e}")))?;
    seen.insert(candidate.key(), records.len());
    records.push(FitnessRecord {
        candidate: candidate.clone(),
        raw_accuracy: acc,
        raw_energy: energy,
        scaled_accuracy: 0.0,
        scaled_energy: 0.0,
        fitness: 0.0,
        generation,
        seed,
    });
    Ok(())
}

/// Run the evolutionary search. Every candidate ever evaluated is
/// returned; duplicates are served from the results cache instead of
/// being re-evaluated.
pub fn evolve(
    space: &SearchSpace,
    mut evaluator: impl FnMut(&Candidate) -> Result<(f64, f64)>,
    config: &EvoConfig,
) -> Result<EvoOutcome> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let budget = config.total_sample_budget.unwrap_or(usize::MAX);
    let mut records: Vec<FitnessRecord> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut generation_best = Vec::new();

    let mut population: Vec<Candidate> = Vec::new();
    let mut pop_keys: HashSet<String> = HashSet::new();
    let mut tries = 0;
    while population.len() < config.population_size && tries < config.population_size * 100 {
        let c = random_candidate(space, &mut rng);
        if pop_keys.insert(c.key()) {
            population.push(c);
        }
        tries += 1;
    }

    for g in 0..config.generations {
        for c in &population {
            if records.len() >= budget {
                break;
            }
            if seen.contains_key(&c.key()) {
                continue;
            }
            eval_into(c, g, config.seed, &mut evaluator, &mut records, &mut seen)?;
        }
        rescale_records(&mut records, config.alpha)?;
        let order = rank_by_fitness(&records);
        if let Some(&best) = order.first() {
            generation_best.push(records[best].clone());
        }
        if g + 1 == config.generations || records.len() >= budget {
            break;
        }
        let parents: Vec<Candidate> = order
            .iter()
            .take(config.parent_count.min(order.len()))
            .map(|&i| records[i].candidate.clone())
            .collect();
        let mut next: Vec<Candidate> = Vec::new();
        let mut next_keys: HashSet<String> = HashSet::new();
        if config.elitist {
            for p in &parents {
                if next_keys.insert(p.key()) {
                    next.push(p.clone());
                }
            }
        }
        let mut attempts = 0;
        while next.len() < config.population_size && attempts < config.population_size * 100 {
            attempts += 1;
            let pa = rng.choose(&parents).clone();
            let pb = rng.choose(&parents).clone();
            let child = if rng.next_f64() < config.crossover_prob {
                crossover(&pa, &pb, &mut rng)?
            } else {
                pa.clone()
            };
            let child = mutate(&child, space, &mut rng, config.mutation_prob);
            let key = child.key();
            if seen.contains_key(&key) || next_keys.contains(&key) {
                continue;
            }
            next_keys.insert(key);
            next.push(child);
        }
        // Exhausted neighborhoods: top up with fresh random samples.
        let mut attempts = 0;
        while next.len() < config.population_size && attempts < config.population_size * 100 {
            attempts += 1;
            let c = random_candidate(space, &mut rng);
            let key = c.key();
            if seen.contains_key(&key) || next_keys.contains(&key) {
                continue;
            }
            next_keys.insert(key);
            next.push(c);
        }
        population = next;
    }
    Ok(EvoOutcome { records, generation_best })
}

/// Evaluate `n` distinct random candidates; same record format as
/// [`evolve`], all at generation 0.
pub fn random_search(
    space: &SearchSpace,
    mut evaluator: impl FnMut(&Candidate) -> Result<(f64, f64)>,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<FitnessRecord>> {
    if n == 0 {
        return Err(Error::Config("random_search needs n >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    let mut tries = 0;
    while records.len() < n && tries < n * 1000 {
        tries += 1;
        let c = random_candidate(space, &mut rng);
        if seen.contains_key(&c.key()) {
            continue;
        }
        eval_into(&c, 0, seed, &mut evaluator, &mut records, &mut seen)?;
    }
    rescale_records(&mut records, alpha)?;
    Ok(records)
}

// ---- Pareto and rank diagnostics ----

/// Does `a` dominate `b` under (minimize energy, maximize accuracy)?
pub fn dominates(a: &FitnessRecord, b: &FitnessRecord) -> bool {
    a.raw_energy <= b.raw_energy
        && a.raw_accuracy >= b.raw_accuracy
        && (a.raw_energy < b.raw_energy || a.raw_accuracy > b.raw_accuracy)
}

/// Maximal non-dominated subset, ordered by energy ascending.
pub fn pareto_front(records: &[FitnessRecord]) -> Vec<FitnessRecord> {
    let mut sorted: Vec<&FitnessRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.raw_energy
            .partial_cmp(&b.raw_energy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.raw_accuracy.partial_cmp(&a.raw_accuracy).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut front: Vec<FitnessRecord> = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut energy_at_best = f64::NEG_INFINITY;
    for r in sorted {
        if r.raw_accuracy > best_acc {
            best_acc = r.raw_accuracy;
            energy_at_best = r.raw_energy;
            front.push(r.clone());
        } else if r.raw_accuracy == best_acc && r.raw_energy == energy_at_best {
            // Exact duplicate objective point: neither dominates the other.
            front.push(r.clone());
        }
    }
    front
}

fn merge_count_inversions(y: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = y.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = merge_count_inversions(&mut y[..mid], buf) + merge_count_inversions(&mut y[mid..], buf);
    let (mut i, mut j, mut k) = (0usize, mid, 0usize);
    while i < mid && j < n {
        if y[i] <= y[j] {
            buf[k] = y[i];
            i += 1;
        } else {
            buf[k] = y[j];
            inv += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    while i < mid {
        buf[k] = y[i];
        i += 1;
        k += 1;
    }
    while j < n {
        buf[k] = y[j];
        j += 1;
        k += 1;
    }
    y.copy_from_slice(&buf[..n]);
    inv
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Tie-corrected Kendall rank correlation (tau-b) via the O(n log n)
/// sort-and-count algorithm. Degenerate inputs (all ties on either side)
/// return 0.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Numeric(format!(
            "kendall_tau length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Numeric("kendall_tau needs at least 2 observations".into()));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().cloned().zip(y.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tie_pairs(&xs);
    // Joint ties: runs of equal (x, y).
    let mut n3 = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count_inversions(&mut ys, &mut buf);
    let n2 = tie_pairs(&ys);
    let num = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    let den = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num as f64 / den)
}

/// Area of the objective region dominated by a front, relative to a
/// reference corner `(energy_ref, acc_ref)` with `energy_ref` above and
/// `acc_ref` below all points of interest.
pub fn hypervolume_2d(points: &[(f64, f64)], reference: (f64, f64)) -> f64 {
    let (e_ref, a_ref) = reference;
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .cloned()
        .filter(|&(e, a)| e <= e_ref && a >= a_ref)
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut hv = 0.0;
    let mut covered_acc = a_ref;
    for (e, a) in pts {
        if a > covered_acc {
            hv += (e_ref - e) * (a - covered_acc);
            covered_acc = a;
        }
    }
    hv
}

// ---- results log ----

pub fn write_records_jsonl(path: &Path, records: &[FitnessRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Data(format!("serializing record: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<FitnessRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FitnessRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("results line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

// ---- analytic toy evaluator ----

fn candidate_noise(key: &str) -> f64 {
    // Deterministic per-candidate jitter from a string hash.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn neuron_quality(u_th: f64, tau: f64) -> f64 {
    // Peaks at the baseline traits (u_th = 1, tau = 2).
    (-((u_th - 1.0).powi(2) / 0.5 + (tau.ln() - 2.0f64.ln()).powi(2) / 0.8)).exp()
}

fn block_fr(u_th: f64, tau: f64) -> f64 {
    // Well-tuned neurons spike more sparsely: firing rate falls as the
    // traits approach the baseline optimum.
    (0.38 - 0.22 * neuron_quality(u_th, tau)).clamp(0.05, 0.9)
}

/// Closed-form candidate scorer for search-dynamics experiments: an
/// accuracy proxy peaking at well-tuned neurons (and growing with model
/// capacity and time-steps) paired with the real energy model over a
/// plausible firing-rate profile. No training involved.
pub fn toy_evaluator(
    backbone: Option<FixedBackbone>,
    input_hw: (usize, usize),
    num_classes: usize,
) -> impl Fn(&Candidate) -> Result<(f64, f64)> {
    move |c: &Candidate| {
        let spec = ArchSpec::resolve(c, backbone.as_ref())?;
        let cat = flops_catalog(&spec, input_hw, 3, num_classes)?;
        let sps_fr = block_fr(spec.sps_lif.u_th as f64, spec.sps_lif.tau as f64);
        let last = spec.layers.len() - 1;
        let fr_of = |layer_id: &str| -> f64 {
            if layer_id.starts_with("sps.") {
                sps_fr
            } else if layer_id == "head" {
                let l = &spec.layers[last].lif;
                block_fr(l.u_th as f64, l.tau as f64)
            } else {
                // "block{i}.<part>"
                let i: usize = layer_id
                    .trim_start_matches("block")
                    .split('.')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0);
                let l = &spec.layers[i].lif;
                block_fr(l.u_th as f64, l.tau as f64)
            }
        };
        let trace: FrTrace = cat
            .iter()
            .filter(|e| e.kind != LayerKind::Ann)
            .map(|e| FrEntry {
                layer_id: e.layer_id.clone(),
                kind: e.kind,
                flops: e.flops,
                fr: fr_of(&e.layer_id),
            })
            .collect();
        let report = model_energy(&cat, &trace, spec.time_step)?;
        let capacity = (spec.depth as f64 * spec.embed_dim as f64) / (6.0 * 480.0);
        let tuning: f64 = spec
            .layers
            .iter()
            .map(|l| neuron_quality(l.lif.u_th as f64, l.lif.tau as f64))
            .sum::<f64>()
            / spec.depth as f64;
        let acc = (0.35
            + 0.15 * capacity.min(1.0)
            + 0.30 * (tuning / 0.7).min(1.0)
            + 0.09 * (spec.time_step as f64 - 2.0)
            + 0.004 * candidate_noise(&c.key()))
        .clamp(0.0, 1.0);
        Ok((acc, report.total_energy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{validate, SearchSpace};

    fn rec(acc: f64, energy: f64) -> FitnessRecord {
        FitnessRecord {
            candidate: Candidate::Snn(CandidateSnn::baseline(4)),
            raw_accuracy: acc,
            raw_energy: energy,
            scaled_accuracy: 0.0,
            scaled_energy: 0.0,
            fitness: 0.0,
            generation: 0,
            seed: 0,
        }
    }

    /// Gene-wise difference count at maximal alignment; a depth change
    /// counts as one gene and only shared slots are compared.
    fn gene_diff(a: &Candidate, b: &Candidate) -> usize {
        match (a, b) {
            (Candidate::Snn(a), Candidate::Snn(b)) => {
                let mut d = 0;
                for (x, y) in a.u_th.iter().zip(&b.u_th) {
                    d += ((x - y).abs() > 1e-9) as usize;
                }
                for (x, y) in a.tau.iter().zip(&b.tau) {
                    d += ((x - y).abs() > 1e-9) as usize;
                }
                d + (a.time_step != b.time_step) as usize
            }
            (Candidate::Arch(a), Candidate::Arch(b)) => {
                let mut d = (a.depth != b.depth) as usize
                    + (a.time_step != b.time_step) as usize
                    + (a.embed_dim != b.embed_dim) as usize;
                let shared = a.depth.min(b.depth);
                for i in 0..shared {
                    d += ((a.mlp_ratio[i] - b.mlp_ratio[i]).abs() > 1e-9) as usize;
                    d += (a.head_num[i] != b.head_num[i]) as usize;
                    d += ((a.u_th[i] - b.u_th[i]).abs() > 1e-9) as usize;
                    d += ((a.tau[i] - b.tau[i]).abs() > 1e-9) as usize;
                }
                d
            }
            _ => usize::MAX,
        }
    }

    #[test]
    fn random_snn_candidate_shape_and_validity() {
        let space = SearchSpace::s_s();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let c = random_candidate(&space, &mut rng);
            assert!(validate(&c, &space).is_empty());
            match &c {
                Candidate::Snn(s) => {
                    assert_eq!(s.u_th.len(), 4);
                    assert_eq!(s.tau.len(), 4);
                }
                _ => panic!("expected SNN candidate"),
            }
        }
    }

    #[test]
    fn depth_sampling_is_uniform() {
        let space = SearchSpace::s_ts();
        let mut rng = Rng::new(42);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            if let Candidate::Arch(a) = random_candidate(&space, &mut rng) {
                counts[a.depth - 2] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_candidate() {
        let space = SearchSpace::s_tl();
        let a = random_candidate(&space, &mut Rng::new(9));
        let b = random_candidate(&space, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mutation_changes_at_most_one_gene() {
        let space = SearchSpace::s_ts();
        let mut rng = Rng::new(5);
        for trial in 0..1000 {
            let parent = random_candidate(&space, &mut rng);
            let child = mutate(&parent, &space, &mut rng, 0.7);
            let d = gene_diff(&parent, &child);
            assert!(d <= 1, "trial {trial}: {d} gene diffs");
            assert!(validate(&child, &space).is_empty());
        }
        let parent = random_candidate(&space, &mut rng);
        assert_eq!(mutate(&parent, &space, &mut rng, 0.0), parent);
    }

    #[test]
    fn snn_tau_mutation_is_single_gene() {
        let space = SearchSpace::s_s();
        let mut rng = Rng::new(17);
        let parent = Candidate::Snn(CandidateSnn {
            u_th: vec![1.0; 4],
            tau: vec![1.25; 4],
            time_step: 4,
        });
        let mut saw_tau_change = false;
        for _ in 0..200 {
            let child = mutate(&parent, &space, &mut rng, 1.0);
            assert_eq!(gene_diff(&parent, &child), 1);
            if let Candidate::Snn(c) = &child {
                if c.tau.iter().any(|&t| (t - 2.5).abs() < 1e-9) {
                    saw_tau_change = true;
                }
            }
        }
        // A 1.25 -> 2.5 decay mutation is a reachable single-gene edit.
        assert!(saw_tau_change);
    }

    #[test]
    fn crossover_genes_come_from_parents() {
        let space = SearchSpace::s_tl();
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let a = random_candidate(&space, &mut rng);
            let b = random_candidate(&space, &mut rng);
            let c = crossover(&a, &b, &mut rng).unwrap();
            assert!(validate(&c, &space).is_empty());
            if let (Candidate::Arch(a), Candidate::Arch(b), Candidate::Arch(c)) = (&a, &b, &c) {
                assert!(c.depth == a.depth || c.depth == b.depth);
                assert!(c.embed_dim == a.embed_dim || c.embed_dim == b.embed_dim);
                for i in 0..c.depth {
                    let from_a = i < a.depth && (c.u_th[i] - a.u_th[i]).abs() < 1e-9;
                    let from_b = i < b.depth && (c.u_th[i] - b.u_th[i]).abs() < 1e-9;
                    assert!(from_a || from_b);
                }
            }
        }
        let a = random_candidate(&space, &mut rng);
        assert_eq!(crossover(&a, &a, &mut rng).unwrap(), a);
    }

    #[test]
    fn crossover_can_swap_whole_threshold_block() {
        let space = SearchSpace::s_s();
        let a = Candidate::Snn(CandidateSnn { u_th: vec![0.6; 4], tau: vec![2.0; 4], time_step: 4 });
        let b = Candidate::Snn(CandidateSnn { u_th: vec![1.8; 4], tau: vec![2.0; 4], time_step: 4 });
        let mut rng = Rng::new(0);
        let mut seen_swap = false;
        for _ in 0..2000 {
            let c = crossover(&a, &b, &mut rng).unwrap();
            if let Candidate::Snn(c) = &c {
                if c.u_th.iter().all(|&u| (u - 1.8).abs() < 1e-9) && c.time_step == 4 {
                    seen_swap = true;
                }
            }
        }
        assert!(seen_swap);
        let _ = space;
    }

    #[test]
    fn minmax_examples_and_affine_invariance() {
        assert_eq!(minmax_scale(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_scale(&[5.0, 5.0, 5.0]).unwrap(), vec![0.5, 0.5, 0.5]);
        assert!(minmax_scale(&[]).is_err());
        let mut rng = Rng::new(2);
        let xs: Vec<f64> = (0..50).map(|_| rng.next_f64() * 10.0).collect();
        let base = minmax_scale(&xs).unwrap();
        let transformed: Vec<f64> = xs.iter().map(|x| 3.5 * x + 11.0).collect();
        let scaled = minmax_scale(&transformed).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fitness_corners_and_monotonicity() {
        assert_eq!(f_aeb(1.0, 0.0, 0.5).unwrap(), 1.0);
        assert_eq!(f_aeb(0.0, 1.0, 0.5).unwrap(), 0.0);
        assert!(f_aeb(0.5, 0.5, 1.5).is_err());
        // alpha = 0: fitness is the scaled accuracy.
        for a in [0.0, 0.3, 0.9] {
            assert_eq!(f_aeb(a, 0.7, 0.0).unwrap(), a);
        }
        // Raising accuracy never hurts; raising energy never helps.
        assert!(f_aeb(0.8, 0.4, 0.5).unwrap() >= f_aeb(0.5, 0.4, 0.5).unwrap());
        assert!(f_aeb(0.5, 0.9, 0.5).unwrap() <= f_aeb(0.5, 0.2, 0.5).unwrap());
    }

    #[test]
    fn pareto_trivial_cases() {
        let single = [rec(0.8, 1.0)];
        assert_eq!(pareto_front(&single).len(), 1);
        let two = [rec(0.9, 1.0), rec(0.5, 2.0)];
        let front = pareto_front(&two);
        assert_eq!(front.len(), 1);
        assert_eq!(front[0].raw_accuracy, 0.9);
    }

    fn brute_force_front(records: &[FitnessRecord]) -> Vec<(f64, f64)> {
        let mut keep: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| !records.iter().any(|o| dominates(o, r)))
            .map(|r| (r.raw_energy, r.raw_accuracy))
            .collect();
        keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
        keep
    }

    #[test]
    fn pareto_matches_brute_force() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let records: Vec<FitnessRecord> = (0..200)
                .map(|_| rec(rng.next_f64(), (rng.next_f64() * 8.0).round() / 8.0))
                .collect();
            let mut fast: Vec<(f64, f64)> = pareto_front(&records)
                .iter()
                .map(|r| (r.raw_energy, r.raw_accuracy))
                .collect();
            fast.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(fast, brute_force_front(&records));
        }
    }

    fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let (mut p, mut q, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            for j in i + 1..n {
                let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap();
                let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap();
                use std::cmp::Ordering::*;
                match (dx, dy) {
                    (Equal, Equal) => {
                        tx += 1;
                        ty += 1;
                    }
                    (Equal, _) => tx += 1,
                    (_, Equal) => ty += 1,
                    (a, b) if a == b => p += 1,
                    _ => q += 1,
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as f64;
        let den = ((n0 - tx as f64) * (n0 - ty as f64)).sqrt();
        if den == 0.0 {
            0.0
        } else {
            (p - q) as f64 / den
        }
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((kendall_tau(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((kendall_tau(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((kendall_tau(&x, &y).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!(kendall_tau(&x, &y[..3]).is_err());
    }

    #[test]
    fn kendall_matches_pair_oracle_with_ties() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 3 + rng.below(40);
            let x: Vec<f64> = (0..n).map(|_| (rng.below(8)) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| (rng.below(8)) as f64).collect();
            let fast = kendall_tau(&x, &y).unwrap();
            let slow = kendall_oracle(&x, &y);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn hypervolume_simple_rectangles() {
        // One point dominating a unit square corner.
        let hv = hypervolume_2d(&[(1.0, 1.0)], (2.0, 0.0));
        assert!((hv - 1.0).abs() < 1e-12);
        // Two staircase points.
        let hv = hypervolume_2d(&[(1.0, 0.5), (1.5, 1.0)], (2.0, 0.0));
        assert!((hv - (1.0 * 0.5 + 0.5 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn evolve_is_deterministic_and_budgeted() {
        let space = SearchSpace::s_s();
        let eval = toy_evaluator(Some(FixedBackbone::spikformer_4_384()), (32, 32), 10);
        let cfg = EvoConfig {
            population_size: 10,
            generations: 5,
            parent_count: 4,
            total_sample_budget: Some(35),
            seed: 3,
            ..EvoConfig::default()
        };
        let a = evolve(&space, &eval, &cfg).unwrap();
        let b = evolve(&space, &eval, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.len() <= 35);
        assert!(a.records.len() >= 10);
        for r in &a.records {
            assert!(validate(&r.candidate, &space).is_empty());
            assert!((0.0..=1.0).contains(&r.scaled_accuracy));
            assert!((0.0..=1.0).contains(&r.scaled_energy));
            let f = f_aeb(r.scaled_accuracy, r.scaled_energy, cfg.alpha).unwrap();
            assert!((f - r.fitness).abs() < 1e-12);
        }
        // No candidate is ever evaluated twice.
        let mut keys: Vec<String> = a.records.iter().map(|r| r.candidate.key()).collect();
        let before = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(before, keys.len());
    }

    #[test]
    fn random_search_records_are_distinct_and_valid() {
        let space = SearchSpace::s_s();
        let eval = toy_evaluator(Some(FixedBackbone::spikformer_4_384()), (32, 32), 10);
        let records = random_search(&space, &eval, 40, 0.5, 11).unwrap();
        assert_eq!(records.len(), 40);
        let mut keys: Vec<String> = records.iter().map(|r| r.candidate.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 40);
        let one = random_search(&space, &eval, 1, 0.5, 2).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn records_jsonl_roundtrip_with_stable_field_names() {
        let mut records = vec![rec(0.7, 2e-3), rec(0.4, 1e-3)];
        rescale_records(&mut records, 0.5).unwrap();
        let json = serde_json::to_string(&records[0]).unwrap();
        for field in ["candidate", "accuracy", "energy_joules", "scaled_acc", "scaled_energy", "fitness", "generation", "seed"] {
            assert!(json.contains(&format!("\"{field}\"")), "{field} missing in {json}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        write_records_jsonl(&path, &records).unwrap();
        let back = read_records_jsonl(&path).unwrap();
        assert_eq!(records, back);
    }
}
