//! Human-vs-machine facial expression recognition workbench.
//!
//! * [`autodiff`]: reverse-mode differentiation and a small GAP-headed CNN.
//! * [`stimuli`]: expression labels, image operations, click masks, synthetic faces.
//! * [`training`]: pairwise and multiclass training, masked fine-tuning.
//! * [`saliency`]: CAM, GradCAM, Extremal Perturbation and mask post-processing.
//! * [`analytics`]: voting, confusion matrices, dice, statistics, reports.
//! * [`trial`]: the 2AFC trial record shared with the experiment service.

pub mod analytics;
pub mod autodiff;
pub mod saliency;
pub mod stimuli;
pub mod training;
pub mod trial;
