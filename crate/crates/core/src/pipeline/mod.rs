//! Training with validation-based model selection, checkpoints, and
//! whole-slide tiled prediction.

mod checkpoint;
mod stitch;
mod train;

pub use checkpoint::{config_from_text, config_to_text, Checkpoint, MAGIC};
pub use stitch::{predict_slide, tile_starts, ProbabilityMap, TileConfig};
pub use train::{make_batch, train, train_with, EpochRecord, LossHistory, TrainConfig, TrainOutcome};
