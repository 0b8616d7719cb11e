//! Iterative leaky integrate-and-fire neuron.
//!
//! Membrane update per step: `u_t = (1 - 1/tau) * u_{t-1} * (1 - y_{t-1}) + I_t`,
//! with a spike `y_t = 1` whenever `u_t >= u_th`. The reset is implicit: a
//! step that fired contributes nothing to the next membrane potential via
//! the `(1 - y)` factor; `u` itself is not clamped at fire time.
//!
//! Training uses a rectangular surrogate window for `dy/du`: `1/(2a)` inside
//! `|u - u_th| < a`, zero outside.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Searchable neuron traits: threshold, membrane time constant, and the
/// surrogate half-width used in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub u_th: f32,
    pub tau: f32,
    pub surrogate_width: f32,
}

impl LifParams {
    pub fn new(u_th: f32, tau: f32) -> Result<Self> {
        if !(tau > 1.0) {
            return Err(Error::Config(format!("lif tau must be > 1, got {tau}")));
        }
        if !(u_th > 0.0) {
            return Err(Error::Config(format!("lif threshold must be > 0, got {u_th}")));
        }
        Ok(LifParams { u_th, tau, surrogate_width: 1.0 })
    }

    /// Defaults stated in the model description (tau = 2, u_th = 0.5).
    pub fn paper_default() -> Self {
        LifParams { u_th: 0.5, tau: 2.0, surrogate_width: 1.0 }
    }

    /// Baseline encoding row used by the fixed SPS neurons
    /// (u_th = 1.0, tau = 2.0).
    pub fn baseline() -> Self {
        LifParams { u_th: 1.0, tau: 2.0, surrogate_width: 1.0 }
    }

    pub fn decay(&self) -> f32 {
        1.0 - 1.0 / self.tau
    }
}

/// Membrane potential and spike output after a step.
#[derive(Clone, Debug)]
pub struct LifState {
    pub u: Tensor,
    pub y: Tensor,
}

impl LifState {
    /// Resting state: `u = 0`, `y = 0`.
    pub fn zeros(shape: Vec<usize>) -> Self {
        LifState { u: Tensor::zeros(shape.clone()), y: Tensor::zeros(shape) }
    }
}

/// Spike accounting over a simulation window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FiringStats {
    pub spikes_emitted: u64,
    pub neuron_steps: u64,
}

impl FiringStats {
    pub fn fr(&self) -> f64 {
        if self.neuron_steps == 0 {
            0.0
        } else {
            self.spikes_emitted as f64 / self.neuron_steps as f64
        }
    }

    pub fn merge(&mut self, other: &FiringStats) {
        self.spikes_emitted += other.spikes_emitted;
        self.neuron_steps += other.neuron_steps;
    }

    /// Count spikes in a {0,1}-valued tensor.
    pub fn from_spikes(spikes: &[f32]) -> Self {
        FiringStats {
            spikes_emitted: spikes.iter().filter(|&&v| v != 0.0).count() as u64,
            neuron_steps: spikes.len() as u64,
        }
    }
}

/// One membrane update. Shapes of `state` and `input_current` must match.
pub fn lif_step(state: &LifState, input_current: &Tensor, params: &LifParams) -> Result<LifState> {
    if state.u.shape() != input_current.shape() || state.y.shape() != input_current.shape() {
        return Err(Error::Shape(format!(
            "lif_step: state {:?} vs input {:?}",
            state.u.shape(),
            input_current.shape()
        )));
    }
    input_current.assert_finite("lif input current")?;
    let decay = params.decay();
    let mut u = Tensor::zeros(input_current.shape().to_vec());
    let mut y = Tensor::zeros(input_current.shape().to_vec());
    {
        let ud = u.data_mut();
        for (i, (&up, (&yp, &inp))) in state
            .u
            .data()
            .iter()
            .zip(state.y.data().iter().zip(input_current.data()))
            .enumerate()
        {
            ud[i] = decay * up * (1.0 - yp) + inp;
        }
    }
    {
        let yd = y.data_mut();
        for (i, &uv) in u.data().iter().enumerate() {
            yd[i] = if uv >= params.u_th { 1.0 } else { 0.0 };
        }
    }
    Ok(LifState { u, y })
}

/// Run a sequence of input currents `[T, ...]` from the resting state and
/// collect the spike train plus firing statistics.
pub fn lif_sequence(inputs: &Tensor, params: &LifParams) -> Result<(Tensor, FiringStats)> {
    let shape = inputs.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Config("lif_sequence needs T >= 1".into()));
    }
    let t_steps = shape[0];
    let per_step: usize = shape[1..].iter().product::<usize>().max(1);
    let mut state = LifState::zeros(shape[1..].to_vec());
    let mut spikes = Tensor::zeros(shape.to_vec());
    for t in 0..t_steps {
        let step_input = Tensor::new(
            shape[1..].to_vec(),
            inputs.data()[t * per_step..(t + 1) * per_step].to_vec(),
        )?;
        state = lif_step(&state, &step_input, params)?;
        spikes.data_mut()[t * per_step..(t + 1) * per_step].copy_from_slice(state.y.data());
    }
    let stats = FiringStats::from_spikes(spikes.data());
    Ok((spikes, stats))
}

/// Like [`lif_sequence`] but also returns the membrane trajectory, for
/// closed-form checks.
pub fn lif_sequence_with_potentials(
    inputs: &Tensor,
    params: &LifParams,
) -> Result<(Tensor, Tensor, FiringStats)> {
    let shape = inputs.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Config("lif_sequence needs T >= 1".into()));
    }
    let t_steps = shape[0];
    let per_step: usize = shape[1..].iter().product::<usize>().max(1);
    let mut state = LifState::zeros(shape[1..].to_vec());
    let mut spikes = Tensor::zeros(shape.to_vec());
    let mut potentials = Tensor::zeros(shape.to_vec());
    for t in 0..t_steps {
        let step_input = Tensor::new(
            shape[1..].to_vec(),
            inputs.data()[t * per_step..(t + 1) * per_step].to_vec(),
        )?;
        state = lif_step(&state, &step_input, params)?;
        spikes.data_mut()[t * per_step..(t + 1) * per_step].copy_from_slice(state.y.data());
        potentials.data_mut()[t * per_step..(t + 1) * per_step].copy_from_slice(state.u.data());
    }
    let stats = FiringStats::from_spikes(spikes.data());
    Ok((spikes, potentials, stats))
}

/// Rectangular-window surrogate derivative `dy/du` evaluated elementwise.
pub fn surrogate_grad(u: &Tensor, params: &LifParams) -> Tensor {
    let a = params.surrogate_width;
    let mut out = Tensor::zeros(u.shape().to_vec());
    for (o, &uv) in out.data_mut().iter_mut().zip(u.data()) {
        *o = if (uv - params.u_th).abs() < a { 1.0 / (2.0 * a) } else { 0.0 };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(u: f32, y: f32) -> LifState {
        LifState {
            u: Tensor::new(vec![1], vec![u]).unwrap(),
            y: Tensor::new(vec![1], vec![y]).unwrap(),
        }
    }

    #[test]
    fn quiescent_neuron_stays_quiet() {
        let p = LifParams::new(1.0, 2.0).unwrap();
        let s = lif_step(&scalar_state(0.0, 0.0), &Tensor::zeros(vec![1]), &p).unwrap();
        assert_eq!(s.u.data()[0], 0.0);
        assert_eq!(s.y.data()[0], 0.0);
    }

    #[test]
    fn subthreshold_update_matches_arithmetic() {
        // tau=2, u_prev=0.8, I=0.3 -> u = 0.5*0.8 + 0.3 = 0.7, no spike at u_th=1
        let p = LifParams::new(1.0, 2.0).unwrap();
        let s = lif_step(&scalar_state(0.8, 0.0), &Tensor::new(vec![1], vec![0.3]).unwrap(), &p).unwrap();
        assert!((s.u.data()[0] - 0.7).abs() < 1e-7);
        assert_eq!(s.y.data()[0], 0.0);
    }

    #[test]
    fn fire_then_implicit_reset() {
        // u = 0.5*0.8 + 0.7 = 1.1 >= 1 -> spike; next step with I=0 resets to 0
        let p = LifParams::new(1.0, 2.0).unwrap();
        let s1 = lif_step(&scalar_state(0.8, 0.0), &Tensor::new(vec![1], vec![0.7]).unwrap(), &p).unwrap();
        assert!((s1.u.data()[0] - 1.1).abs() < 1e-6);
        assert_eq!(s1.y.data()[0], 1.0);
        let s2 = lif_step(&s1, &Tensor::zeros(vec![1]), &p).unwrap();
        assert_eq!(s2.u.data()[0], 0.0);
        assert_eq!(s2.y.data()[0], 0.0);
    }

    #[test]
    fn zero_input_sequence_never_fires() {
        let p = LifParams::new(0.6, 4.0).unwrap();
        let inputs = Tensor::zeros(vec![10, 3]);
        let (spikes, stats) = lif_sequence(&inputs, &p).unwrap();
        assert!(spikes.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.fr(), 0.0);
    }

    #[test]
    fn subthreshold_fixed_point_is_tau_times_input() {
        // constant I=0.3, tau=2, u_th=10 -> u* = tau*I = 0.6
        let p = LifParams::new(10.0, 2.0).unwrap();
        let inputs = Tensor::full(vec![50, 1], 0.3);
        let (_, potentials, stats) = lif_sequence_with_potentials(&inputs, &p).unwrap();
        let last = potentials.data()[49];
        assert!((last - 0.6).abs() < 1e-6, "u* = {last}");
        assert_eq!(stats.fr(), 0.0);
    }

    #[test]
    fn strong_constant_input_fires_every_step() {
        // I=0.6, tau=2, u_th=0.5: u >= 0.6 each step (reset after every fire)
        let p = LifParams::new(0.5, 2.0).unwrap();
        let inputs = Tensor::full(vec![4, 1], 0.6);
        let (spikes, stats) = lif_sequence(&inputs, &p).unwrap();
        assert!(spikes.data().iter().all(|&v| v == 1.0));
        assert_eq!(stats.fr(), 1.0);
    }

    #[test]
    fn subthreshold_trajectory_matches_geometric_closed_form() {
        let p = LifParams::new(100.0, 3.0).unwrap();
        let d = p.decay() as f64;
        let t_steps = 12;
        let mut rng = crate::rng::Rng::new(11);
        let inputs = Tensor::rand_uniform(vec![t_steps, 5], 0.0, 0.5, &mut rng);
        let (_, potentials, _) = lif_sequence_with_potentials(&inputs, &p).unwrap();
        for j in 0..5 {
            let mut closed = 0.0f64;
            for k in 0..t_steps {
                closed = closed * d + inputs.data()[k * 5 + j] as f64;
            }
            let got = potentials.data()[(t_steps - 1) * 5 + j] as f64;
            assert!((got - closed).abs() < 1e-5, "{got} vs {closed}");
        }
    }

    #[test]
    fn raising_threshold_never_fires_more() {
        let mut rng = crate::rng::Rng::new(21);
        for _ in 0..20 {
            let inputs = Tensor::rand_uniform(vec![8, 16], -0.5, 1.5, &mut rng);
            let tau = rng.uniform(1.3, 8.0);
            let lo = LifParams::new(0.4, tau).unwrap();
            let hi = LifParams::new(0.9, tau).unwrap();
            let (_, s_lo) = lif_sequence(&inputs, &lo).unwrap();
            let (_, s_hi) = lif_sequence(&inputs, &hi).unwrap();
            assert!(s_hi.spikes_emitted <= s_lo.spikes_emitted);
        }
    }

    #[test]
    fn fr_equals_spike_mean_exactly() {
        let mut rng = crate::rng::Rng::new(5);
        let inputs = Tensor::rand_uniform(vec![6, 40], -0.2, 1.2, &mut rng);
        let p = LifParams::new(0.7, 2.5).unwrap();
        let (spikes, stats) = lif_sequence(&inputs, &p).unwrap();
        let mean = spikes.mean();
        assert_eq!(stats.fr(), mean);
        assert_eq!(stats.fr() * stats.neuron_steps as f64, stats.spikes_emitted as f64);
    }

    #[test]
    fn surrogate_window_values() {
        let p = LifParams { u_th: 1.0, tau: 2.0, surrogate_width: 1.0 };
        let u = Tensor::new(vec![3], vec![-1.5, 1.0, 2.5]).unwrap();
        let g = surrogate_grad(&u, &p);
        assert_eq!(g.data(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn surrogate_mask_matches_window_membership() {
        let mut rng = crate::rng::Rng::new(77);
        let p = LifParams { u_th: 0.8, tau: 2.0, surrogate_width: 0.6 };
        let u = Tensor::rand_uniform(vec![200], -2.0, 3.0, &mut rng);
        let g = surrogate_grad(&u, &p);
        for (&uv, &gv) in u.data().iter().zip(g.data()) {
            let inside = (uv - p.u_th).abs() < p.surrogate_width;
            assert_eq!(gv != 0.0, inside);
        }
    }
}
