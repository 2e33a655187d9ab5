//! Dynamic ensemble selection under adversarial pressure.
//!
//! An ensemble shares one backbone; each member perturbs it with a low-rank
//! multiplicative factor. Heads are evidential: logits parameterize a
//! Dirichlet over class probabilities, so every member reports calibrated
//! uncertainty alongside its prediction. Training maximizes the evidential
//! lower bound while rewarding members whose uncertainty moves under
//! attack, and a repulsive kernel term keeps member factors apart. At
//! inference, selection policies pick the members most confident on the
//! input at hand (attacked inputs scatter uncertainty, so the pick shifts),
//! or fuse all members through Dempster-Shafer combination.
//!
//! Everything runs on the crate's own reverse-mode tape over dense f64
//! arrays; `RngStream` gives splittable, platform-independent randomness so
//! a config plus a seed reproduces a run byte for byte.
//!
//! Layout: [`tensor`] and [`numerics`] are the substrate; [`ensemble`],
//! [`evidential`], [`diversity`], and [`policy`] are the model;
//! [`attacks`], [`train`], [`data`], and [`harness`] drive it.

pub mod attacks;
pub mod data;
pub mod diversity;
pub mod ensemble;
pub mod evidential;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod tensor;
pub mod train;

pub use attacks::{AttackError, AttackFamily, AttackSpec, LossTarget};
pub use data::{DataError, Dataset, Split};
pub use diversity::{DiversityConfig, DiversityError};
pub use ensemble::{Architecture, BaselineNet, EnsembleNet, Profile};
pub use evidential::{DirichletOpinion, EvidentialError, EvidentialLossParts};
pub use harness::{
    DataConfig, ExperimentConfig, HarnessError, MetricsTable, Report, SelectionHistogram,
};
pub use numerics::{NumericsError, RngStream, SpecialFnTolerance};
pub use policy::{PolicyError, PolicyOutcome, PolicySpec, SubjectiveOpinion, SubsetFusion};
pub use tensor::{Array, Graph, Tensor, TensorError};
pub use train::{EpochRecord, SgdOptimizer, TrainConfig, TrainError, TrainHistory};
