//! Convolutional recurrent network with hand-written backpropagation.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod output;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use model::{Architecture, BranchSpec, ConvLayerSpec, Mode, Model, ModelParams};
pub use optim::{adam_step, AdamConfig, AdamState, ParamBlocks};
pub use train::{predict, predict_proba, train, History, LabeledSequence, TrainConfig};
