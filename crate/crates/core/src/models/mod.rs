//! Trained models: the explained classifier, the denoising diffusion model,
//! the joint classifier used for steering, and the attribute probes.

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
pub mod joint;
pub mod probe;
pub mod schedule;

pub use classifier::{
    accuracy, argmax, fit_classifier_net, samples_to_tensors, softmax_ce_loss_grad, softmax_f64,
    train_classifier, Classifier, ClassifierNet, ClassifierTrainConfig, EpochStats,
};
pub use denoiser::{
    ddpm_reverse_step, reverse_chain, sample_unconditional, step_embedding, train_ddpm,
    DdpmReport, DdpmTrainConfig, Denoiser, DenoiserNet,
};
pub use joint::{DenoiseMode, JointClassifier, JointCore, JointEval};
pub use probe::{train_probes, AttributeProbes, ProbeAgreement, ProbeTrainConfig};
pub use schedule::{
    ddpm_forward, ddpm_forward_invert, reverse_from_eps, DiffusionSchedule, ScheduleSpec,
};
