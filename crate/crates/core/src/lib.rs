//! Tri-modal temporal scene-graph generation: multi-view temporal image features,
//! temporal point-cloud features, pair decoding, tri-modal unification, losses,
//! metrics, a synthetic OR generator and the training loop that ties them together.

pub mod autograd;
pub mod boxes;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pair_decoder;
pub mod params;
pub mod pointtemp;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unify;
pub mod viewtemp;

pub use boxes::BBox;
pub use camera::CameraModel;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use graph::{Entity, EntityTaxonomy, Predicate, SceneGraph, Triplet, NUM_PREDICATES};
pub use metrics::{EvalReport, FramePrediction, MatchConfig, PredictedTriplet};
pub use model::TriTempModel;
pub use tensor::Tensor;
pub use train::{TakeFrames, Trainer};
pub use unify::EmbeddingTable;
