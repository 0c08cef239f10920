//! Set similarities, the partial score and the training objective.

pub mod losses;
pub mod similarity;

pub use losses::{
    loss_div, loss_global, loss_local, loss_var, similarity_node, softmax_ce, total_loss, total_loss_node,
    variance_hinge, variance_penalty, CrossAttention, LossComponents,
};
pub use similarity::{
    chamfer_variant, cosine_matrix, lse, partial_score, set_score, smooth_chamfer, top_cos, top_cos_from_sim,
    TopCosMask,
};
