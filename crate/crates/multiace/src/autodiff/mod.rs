//! Reverse-mode differentiation over compiled model programs.

pub mod engine;
pub mod program;

pub use engine::{
    energy_and_forces_compiled, forces, frame_gradients, frame_gradients_cached,
    frame_gradients_with_tangent, frame_gradients_with_tangent_cached, FrameGradients,
};
pub use program::{
    backward, forward, Builder, BlockLinearShape, BlockMM, MonomialMap, NodeId, Op, OpNode,
    PathShape, Program, SparseBilinearMap, SparseLinearMap, Tape,
};
