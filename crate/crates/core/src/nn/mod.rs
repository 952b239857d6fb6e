//! Minimal 3D U-Net engine: tensors, ops with hand-written backward passes,
//! loss, augmentation, optimiser, training loop and weights I/O.

pub mod augment;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

pub use tensor::{flip_combinations, Scalar, Tensor};
pub use train::{TrainConfig, TrainSample, TrainedModel};
pub use unet::{UNet, UNetSpec};
