//! Few-shot class-incremental learning with sample-level and class-level graphs.
//!
//! The pipeline has three stages. A feature backbone is pretrained on the
//! abundant base session and its class prototypes seed a class graph. A
//! sample-level graph network (SGN) and a class-level attention network (CGN)
//! are then meta-trained on pseudo-incremental tasks drawn from the base
//! data. Finally each few-shot session is refined by the SGN, calibrated by
//! the CGN against every previously seen class, and appended to the graph.
//!
//! Modules follow that flow:
//! - [`protocol`]: session streams, episodes, dataset loaders
//! - [`backbone`]: feature extractor, base pretraining, prototypes
//! - [`sgn`]: edge encoder, neighbour aggregation, triplet loss
//! - [`cgn`]: class graph, attention calibration, cosine prediction
//! - [`trainer`]: the three training stages and the joint objective
//! - [`harness`]: experiments, baselines, metrics, result files

pub mod backbone;
pub mod cgn;
mod error;
pub mod harness;
pub mod math;
pub mod optim;
pub mod protocol;
pub mod seed;
pub mod sgn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use backbone::{class_prototype, BackboneParams, ClassifierHead, Embedding};
pub use cgn::{AttentionParams, CalibrationMode, ClassGraph};
pub use harness::{ExperimentConfig, Method, SessionReport};
pub use protocol::{ClassId, Episode, LabeledDataset, ProtocolConfig, SessionStream};
pub use sgn::{EdgeEncoderParams, EdgeMode, SampleGraph, TripletConfig, TripletInput};
pub use trainer::{ModelState, Stage, TrainConfig};
