//! Generalized multilevel functional principal component analysis.
//!
//! The pipeline bins a functional domain, fits a local mixed model in each
//! bin ([`local_glmm`]), decomposes the resulting latent predictors into
//! subject and subject-visit eigenfunctions ([`mfpca`]) and re-estimates the
//! scores in a Bayesian global model ([`scores`]). Numerical code is generic
//! over [`Real`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod domain;
pub mod error;
pub mod io;
pub mod linalg;
pub mod local_glmm;
pub mod mfpca;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod scores;
pub mod simulation;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SamplingGrid = domain::SamplingGrid<f64>;
pub type Dataset = domain::MultilevelFunctionalDataset<f64>;
pub type LatentPredictors = local_glmm::LatentPredictorMatrix<f64>;
pub type LocalFit = local_glmm::LocalFit<f64>;
pub type Decomposition = mfpca::MfpcaDecomposition<f64>;
pub type ScoreModel = scores::ScoreModelSpec<f64>;
pub type Posterior = scores::ScorePosterior<f64>;
