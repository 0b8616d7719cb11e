//! Randomized invariant checks over the search, data, neuron, and
//! energy primitives.

use proptest::prelude::*;

use autospikformer::data::batch_indices;
use autospikformer::energy::sops;
use autospikformer::evolution::{
    crossover, dominates, minmax_scale, mutate, pareto_front, random_candidate, rank_by_fitness,
    rescale_records, FitnessRecord,
};
use autospikformer::lif::{lif_sequence, LifParams};
use autospikformer::rng::Rng;
use autospikformer::space::{validate, Candidate, CandidateSnn, SearchSpace, SpaceKind};
use autospikformer::tensor::Tensor;

fn space_of(ix: u8) -> SearchSpace {
    SearchSpace::from_kind(match ix % 3 {
        0 => SpaceKind::STs,
        1 => SpaceKind::STl,
        _ => SpaceKind::SS,
    })
}

fn record(acc: f64, energy: f64) -> FitnessRecord {
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

proptest! {
    /// Random sampling, mutation, and crossover never leave the space.
    #[test]
    fn search_operators_are_closed(space_ix in 0u8..3, seed in any::<u64>(), prob in 0.0f64..=1.0) {
        let space = space_of(space_ix);
        let mut rng = Rng::new(seed);
        let a = random_candidate(&space, &mut rng);
        let b = random_candidate(&space, &mut rng);
        prop_assert!(validate(&a, &space).is_empty(), "sampled: {:?}", validate(&a, &space));
        let m = mutate(&a, &space, &mut rng, prob);
        prop_assert!(validate(&m, &space).is_empty(), "mutated: {:?}", validate(&m, &space));
        let x = crossover(&a, &b, &mut rng).unwrap();
        prop_assert!(validate(&x, &space).is_empty(), "crossed: {:?}", validate(&x, &space));
    }

    /// The candidate tuple grammar round-trips.
    #[test]
    fn candidate_string_roundtrip(space_ix in 0u8..3, seed in any::<u64>()) {
        let space = space_of(space_ix);
        let c = random_candidate(&space, &mut Rng::new(seed));
        let back: Candidate = c.to_string().parse().unwrap();
        prop_assert_eq!(back, c);
    }

    /// Epoch batches partition 0..n exactly, in a seed-determined order.
    #[test]
    fn batches_partition_the_dataset(n in 1usize..400, batch in 1usize..64, seed in any::<u64>(), epoch in 0u64..50) {
        let batches = batch_indices(n, batch, seed, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batch_indices(n, batch, seed, epoch), batches);
    }

    /// Spike trains are strictly binary and the firing rate is their mean.
    #[test]
    fn spikes_are_binary(seed in any::<u64>(), t in 1usize..6, width in 1usize..20,
                         u_th in 0.2f32..3.0, tau in 1.1f32..10.0) {
        let mut rng = Rng::new(seed);
        let n = t * width;
        let inputs = Tensor::new(vec![t, width], (0..n).map(|_| rng.uniform(-0.5, 2.0)).collect()).unwrap();
        let params = LifParams::new(u_th, tau).unwrap();
        let (spikes, stats) = lif_sequence(&inputs, &params).unwrap();
        prop_assert!(spikes.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let mean = spikes.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        prop_assert!((stats.fr() - mean).abs() < 1e-12);
    }

    /// SOPs are exactly linear in FLOPs, firing rate, and time-steps.
    #[test]
    fn sops_is_multilinear(flops in 1.0f64..1e9, fr in 0.0f64..=1.0, t in 1usize..8, k in 1.0f64..64.0) {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        let base = sops(flops, fr, t).unwrap();
        prop_assert!(close(base, flops * fr * t as f64));
        prop_assert!(close(sops(k * flops, fr, t).unwrap(), k * base));
        prop_assert!(close(sops(flops, fr, 2 * t).unwrap(), 2.0 * base));
    }

    /// Min-max scaling maps into [0,1] with the extremes pinned.
    #[test]
    fn minmax_scale_is_normalized(values in prop::collection::vec(-1e6f64..1e6, 1..60)) {
        let scaled = minmax_scale(&values).unwrap();
        prop_assert!(scaled.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let imin = values.iter().position(|&v| v == lo).unwrap();
            let imax = values.iter().position(|&v| v == hi).unwrap();
            prop_assert_eq!(scaled[imin], 0.0);
            prop_assert_eq!(scaled[imax], 1.0);
        }
    }

    /// Fitness ranking ignores positive affine transforms of raw energy.
    #[test]
    fn fitness_rank_is_affine_invariant(
        pairs in prop::collection::vec((0.0f64..=1.0, 1e-9f64..1e-3), 2..40),
        log_scale in -3.0f64..3.0,
        shift in -1.0f64..1.0,
    ) {
        let mut records: Vec<FitnessRecord> = pairs.iter().map(|&(a, e)| record(a, e)).collect();
        rescale_records(&mut records, 0.5).unwrap();
        let before = rank_by_fitness(&records);
        let scale = log_scale.exp();
        for r in &mut records {
            r.raw_energy = scale * r.raw_energy + shift;
        }
        rescale_records(&mut records, 0.5).unwrap();
        prop_assert_eq!(rank_by_fitness(&records), before);
    }

    /// No Pareto-front member is dominated by any record.
    #[test]
    fn pareto_front_is_nondominated(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..60)) {
        let records: Vec<FitnessRecord> = pairs.iter().map(|&(a, e)| record(a, e + 0.001)).collect();
        let front = pareto_front(&records);
        prop_assert!(!front.is_empty());
        for f in &front {
            prop_assert!(!records.iter().any(|r| dominates(r, f)));
        }
    }
}
