pub mod dual;
mod kernels;
pub mod layers;
pub mod subnet;
pub mod tensor;

pub use dual::{
    batch_tensor, init_dual, load_checkpoint, save_checkpoint, Checkpoint, DualModel, ForwardOut, Sgd, Which,
};
pub use layers::Param;
pub use subnet::{ArchKind, BatchOutput, Subnet, SubnetSpec, Tape};
pub use tensor::Tensor;
