//! Text projection, the alignment and segmentation losses, the layered
//! model with its analytic gradients, the trainer, and the latent-semantic
//! probing simulation.

mod gradcheck;
mod losses;
mod model;
mod probe;
pub mod synthetic;
mod text;
mod trainer;

pub use gradcheck::{gradient_check, perturb_for_check, TensorCheck, FD_STEP};
pub use losses::{
    align_loss, align_loss_grad, seg_logits, seg_loss, seg_loss_grad, total_loss, AlignGrads, LossParams, TAU_SEG,
};
pub use model::{
    forward, layer_forward, loss_and_grad, loss_value, BackboneLayer, ForwardPass, LayerTrace, LossBreakdown,
    ModelConfig, ModelParams, ParamGroup, ParamSet, XAgentParams, TAU_INIT,
};
pub use probe::{probe_simulation, ProbeConfig, ProbeTrajectory};
pub use synthetic::{Instance, SyntheticConfig};
pub use text::{project_text, project_text_backward, ProjectedText, TextProjector};
pub use trainer::{
    train, LearningRates, LossRecord, TrainAbort, TrainState, DEFAULT_LR_BACKBONE, DEFAULT_LR_DECODER,
};
