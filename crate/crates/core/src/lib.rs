//! Sequential multi-task ranking with a multi-distribution region adaptor.
//!
//! The crate learns click / add-to-cart / purchase as a sequence of tasks
//! over a shared recurrent core, adapts region-dependent features with a
//! country-derived mask, and ships four soft-parameter-sharing baselines,
//! a synthetic multi-region funnel generator and an NDCG harness.
//!
//! Numerics are generic over [`Scalar`]; the aliases below fix `f64`.

pub mod datasets;
pub mod evaluation;
pub mod models;
pub mod scalar;
pub mod tensorcore;
pub mod training;

pub use scalar::Scalar;

pub type Tensor = tensorcore::Tensor<f64>;
pub type Graph = tensorcore::Graph<f64>;
pub type MlpBlock = tensorcore::MlpBlock<f64>;
pub type GruCell = tensorcore::GruCell<f64>;
pub type SeqModel = models::SeqModel<f64>;
pub type BaselineModel = models::BaselineModel<f64>;
pub type MdAdaptor = models::MdAdaptor<f64>;
pub type PluggedModel = models::PluggedModel<f64>;
pub type DynModel = Box<dyn models::RankingModel<f64>>;
