//! Action-conditioned grounding model: a dual encoder mapping
//! (observation, action chunk) and captions into one unit-norm space.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{contrastive_loss, diversity_loss, EmbeddingBatch};
pub use model::{GroundingConfig, GroundingModel, GroundingNet};
pub use train::{train_grounding, GroundingLog, GroundingTrainConfig};
