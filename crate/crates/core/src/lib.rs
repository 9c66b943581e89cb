//! Shared numerical foundation: a reverse-mode autodiff tape over `f64`
//! matrices, named parameter storage with exact checkpointing, AdamW,
//! seeded RNG streams, the `UWM1` tensor container, and an order-preserving
//! parallel map with a sequential fallback.

pub mod container;
pub mod fd;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;

pub use container::{
    decode_tensors, encode_tensors, find, read_tensors, write_tensors, ContainerError, TensorData,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use parallel::{pmap, set_workers, smap};
pub use params::{Binding, GradStore, Init, ParamId, ParamStore};
pub use rng::DetRng;
pub use tensor::{
    layer_norm_rows, log_softmax_rows, softmax_rows, CustomGrad, Grads, Mat, Tape, Var,
};
