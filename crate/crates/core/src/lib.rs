//! Auto-Spikformer engine: a weight-entangled spiking-transformer supernet,
//! searchable LIF neurons, a synaptic-operation energy model, and an
//! accuracy-and-energy balanced evolutionary search, with deterministic
//! seeded execution throughout.

pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod evolution;
pub mod lif;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod space;
pub mod tensor;
pub mod train;

pub use energy::{EnergyReport, LayerCost, LayerKind};
pub use error::{Error, Result};
pub use evolution::{EvoConfig, FitnessRecord};
pub use lif::{FiringStats, LifParams, LifState};
pub use pipeline::{DataConfig, RunConfig};
pub use rng::Rng;
pub use space::{ArchSpec, Candidate, CandidateArch, CandidateSnn, FixedBackbone, SearchSpace, SpaceKind};
pub use tensor::{Graph, Tensor, Var};
pub use train::{AdamW, EvalResult, TrainConfig};
