//! Two-stage hybrid pretraining and a downstream benchmark on phantom
//! mammograms.
//!
//! Stage 1 trains a ViT teacher self-supervised ([`pretrain::train_stage1`]);
//! Stage 2 distils it into a low-resolution CNN student with supervised and
//! contrastive terms ([`pretrain::train_stage2`]). Frozen encoders are then
//! scored by [`heads`] and [`retrieval`], and [`evalstats`] turns per-task
//! metrics into bootstrap intervals, average ranks and critical differences.
//! [`harness::run_experiment`] drives the whole grid of variants × tasks.

pub mod corpus;
pub mod preprocess;
pub mod encoders;
pub mod pretrain;
pub mod evalstats;
pub mod retrieval;
pub mod heads;
pub mod harness;
