pub mod autodiff;
pub mod error;
pub mod harness;
pub mod network;
pub mod oracle;
pub mod pde;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use autodiff::{NodeId, OpKind, Tape};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, MetricRow, Profile, SweepParam};
pub use network::MlpParams;
pub use pde::{DomainBox, MetricKind, PdeProblem};
pub use sampling::{AttackConfig, SampleSet};
pub use tensor::Tensor;
pub use training::{Strategy, TrainConfig};
