//! Layer-wise relevance propagation.
//!
//! Two engines: [`explicit`] applies per-layer rules (ε, z⁺, zB, selective)
//! and [`flex`] runs a modified gradient pass. Both are also available as
//! graph recordings so the heatmap loss can be differentiated.

pub(crate) mod engine;
pub mod explicit;
pub mod export;
pub mod flex;
mod rules;

pub use explicit::{
    explain_dual, init_relevance, lrp_epsilon_linear, lrp_maxpool, lrp_sum_junction, lrp_zb_first_layer,
    lrp_zplus_linear, propagate, propagate_detached,
};
pub use export::{export_heatmaps, heatmap_file_name, heatmap_pixels, read_pgm, write_pgm};
pub use flex::{flex_explain, flex_seed, modified_relu_backward, BackwardMode, FlexState, MU_ETA};
pub use rules::{ExplanationTarget, Heatmap, LrpRule, RulePolicy, DEFAULT_EPSILON, SELECTIVE_MU};
