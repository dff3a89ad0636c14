//! Private synthetic data from marginal measurements, in central and
//! federated settings.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN too

pub mod aim;
pub mod datasets;
pub mod domain;
pub mod dp;
pub mod error;
pub mod federated;
pub mod harness;
pub mod model;
pub mod partition;
pub mod rng;
pub mod schema;
pub mod secagg;
pub mod workload;

pub use domain::{
    DiscreteDataset, Domain, ErrorMode, MarginalQuery, MarginalSource, MarginalTable,
};
pub use error::{Error, Result};
pub use model::{fit, FitOptions, Measurement, ModelState};
pub use workload::Workload;
