//! Training objectives, their gradients, and the finite-difference checker.

mod backward;
mod gradcheck;
mod objective;

pub use backward::{
    backward, evaluate_loss, loss_and_grad, AuxState, GradientSet, LossBreakdown, LossEval, Sample,
};
pub use gradcheck::{
    check_function, compare_gradients, grad_check, relative_error, GradCheckReport, TensorCheck,
    TinyCase, TinyDims, MAX_COORDS_PER_TENSOR,
};
pub use objective::{
    aux_loss, aux_loss_grad, combined_loss, nll_from_logits, nll_loss, pair_term, AuxGrad,
    PairBatch,
};
