//! Post-hoc selective classification for fixed binary detectors.
//!
//! The pipeline turns stored layerwise feature vectors into per-layer
//! confidence scores through centroid probes ([`clustering`]), scores them
//! with logit-based confidence functions ([`csf`]), learns a linear
//! aggregation by minimizing a pairwise log-loss ([`aggregate`]) and
//! evaluates risk-coverage tradeoffs under reweighted mixtures ([`sc_eval`]).

pub mod aggregate;
pub mod clustering;
pub mod csf;
pub mod error;
pub mod exec;
pub mod feature_store;
pub mod sc_eval;
pub mod synthetic;

pub use aggregate::{TrainConfig, TrainReport, WeightVector};
pub use clustering::{LayerCentroids, ProbeParams, ProbeSet};
pub use csf::{CsfKind, PNormConfig, ScoreMatrix};
pub use error::{Error, Result};
pub use exec::Exec;
pub use feature_store::{CorrectnessFlags, FeatureDataset, SampleMasses};
pub use sc_eval::{BoundReport, RcCurve, RcPoint};
