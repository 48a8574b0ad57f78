//! Cyclic-group equivariant reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`group`]: the cyclic group `C_n`, its trivial / standard / regular
//!   representations and their action on vectors and feature maps.
//! * [`tensor`]: a small reverse-mode autodiff tape over dense tensors,
//!   Adam, Huber loss and a flat checkpoint container.
//! * [`steerable`]: steerable convolutions whose kernels are projected onto
//!   the equivariant subspace, equivariant nonlinearities and group pooling.
//! * [`gmdp`]: finite group-invariant MDPs and exact solvers.
//! * [`sim`]: a rotationally symmetric top-down manipulation simulator.
//! * [`agents`]: equivariant DQN / SAC / SACfD, plain-CNN baselines and the
//!   replay machinery.

pub mod agents;
pub mod error;
pub mod gmdp;
pub mod group;
pub mod scalar;
pub mod sim;
pub mod steerable;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
