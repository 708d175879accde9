//! False-positive mining for text-to-image retrieval.
//!
//! A matching engine that scores image/text pairs with three fused branches
//! (global, local, and word-region false-positive mining), trains toy
//! encoders with cross-relu, identity and ranking objectives, and evaluates
//! retrieval with Recall@K.

pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod sampling;
pub mod similarity;
pub mod training;

pub use encoders::{Dataset, EmbeddingBundle, EncoderConfig, Sample, SyntheticConfig};
pub use error::{Error, Result};
pub use evaluation::{AblationTable, NegativeEvidenceReport, RetrievalResult};
pub use losses::{LossReport, LossWeights};
pub use model::{Model, ModelSpec};
pub use numerics::{Tape, Tensor, Var};
pub use params::ParamSet;
pub use sampling::{BatchPlan, Sampler};
pub use similarity::{Branches, Fusion, SimilarityBreakdown};
pub use training::{Checkpoint, TrainConfig, Trainer};
