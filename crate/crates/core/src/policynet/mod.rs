//! Policies mapping a foveated crop and the 22-d state to dual-arm actions.

pub mod model;
pub mod state;

pub use model::{
    behavior_clone_loss, match_param_counts, Forward, ModelConfig, ParamMatch, PolicyInput, PolicyNet, PolicyOutput,
    Variant, GRIP_LOSS_WEIGHT,
};
pub use state::{
    compute_action, gripper_command, tokenize_state, wrap_angle, ArmState, SensoryState, ACTION_DIM, OUTPUT_DIM,
    SEQ_LEN, STATE_DIM, TOKEN_DIM,
};
