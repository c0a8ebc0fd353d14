//! Deep-kernel variational Gaussian-process classifier for unsupervised
//! domain adaptation, trained by alternating variational inference with a
//! max-margin posterior separation loss on unlabeled target data.
//!
//! The crate also carries the maximum-classifier-discrepancy and
//! source-only baselines, synthetic shifted datasets, certainty scores and
//! a finite-difference gradient checker.

pub mod baselines;
pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod experiment;
pub mod featurenet;
pub mod gp_head;
pub mod gradcheck;
pub mod objectives;
pub mod trainer;
pub mod uncertainty;

pub use baselines::{mcda_discrepancy, train_mcda, train_source_only, McdaModel};
pub use datagen::{DataError, DomainDataset, LabeledSet};
pub use diffmath::{Gradient, Mat, ParamVector};
pub use error::{Error, Result};
pub use featurenet::{Activation, FeatureNet, NetArch};
pub use gp_head::{PosteriorMoments, VariationalPosterior};
pub use objectives::{LossBreakdown, SeparationWeights};
pub use trainer::{evaluate, load_checkpoint, save_checkpoint, train, GpdaModel, TrainConfig, TrainHistory};
pub use uncertainty::{BayesMode, UncertaintyRecord};
