//! Selective low-rank reparameterisation of the double-block text-attention
//! projections, and the flow-matching, masked and joint-attention losses.

mod adapter;
mod loss;
mod objective;

pub use adapter::{
    init_adapter, load_base, merge_adapter, save_base, select_parameters, AdapterSet, LowRank,
    TargetSet, ADAPTER_INIT_STD, ADAPTER_KIND,
};
pub use loss::{
    cfm_loss, cfm_loss_graph, downsample_mask, joint_attention_loss, joint_attention_loss_graph,
    masked_loss, masked_loss_graph, total_loss, LossWeights, MaskSet, DEFAULT_LAMBDA_ATTN,
};
pub use objective::{objective_and_grads, GradTarget, LossBreakdown, LossMode, ObjectiveInput};
