//! A small trainable denoiser with a separable image adapter.
//!
//! The trunk is an MLP over `z_t ++ time features ++ text embedding ++
//! adapter output`. The adapter maps an image vector through two layers;
//! only its last layer is ever fine-tuned. With no image the adapter output
//! is the zero vector.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use net::{Arch, Denoiser, TensorSpec};
pub use train::{DenoisingSample, PretrainOptions, TrainReport};
