//! Parameter-efficient adaptation: the collaboration adapter, the agent
//! prompt, baseline methods, freeze masks and parameter accounting.

pub mod adapter;
pub mod method;
pub mod prompt;

pub use adapter::{collaboration_adapter, collaboration_adapter_backward, AdapterCache, AdapterFlags, ScoreActivation};
pub use method::{
    build_freeze_mask, count_params, init_method_params, variant_plan, ForwardPlan, FreezeMask, InsertionSites,
    Method, ParamCount, Variant, VariantPlan,
};
pub use prompt::{agent_prompt, agent_prompt_backward, PromptCache, PromptFlags};
