//! Neural Boltzmann machines: conditional Gaussian- or Ising-visible RBMs
//! whose bias, precision and coupling weights are produced by neural
//! networks of a conditioning input.

pub mod checks;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use data::{Dataset, NoiseMode};
pub use diffnet::{Activation, GradAccum, Mlp, MlpSpec, Sign};
pub use error::{Error, Network, Result};
pub use model::{
    energy, free_energy, free_energy_grad_y, pd_diagnostic, CondParams, ModelGrads, NbmModel, NbmSpec, PdReport,
    VisibleKind,
};
pub use rng::ChainRng;
pub use sampler::{sample_batch, InitMode, SampleOptions};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
pub use trainer::{OptState, PenaltyMode, StepMetrics, TrainConfig, Trainer};
