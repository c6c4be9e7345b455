pub mod dataset;
pub mod ensemble;
pub mod evaluation;
pub mod error;
pub mod forward_models;
pub mod grf;
mod io;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod pcn;
pub mod training;
pub mod transport;

pub use error::{Error, Result};

pub type GridField64 = grf::GridField<f64>;
pub type GridField32 = grf::GridField<f32>;
pub type CovarianceSpec64 = grf::CovarianceSpec<f64>;
pub type PriorSampler64 = grf::PriorSampler<f64>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
pub type TransportModel64 = transport::TransportModel<f64>;
pub type TransportModel32 = transport::TransportModel<f32>;
pub type PosteriorEnsemble64 = ensemble::PosteriorEnsemble<f64>;
