//! Test-time representation finetuning for graph node classification.
//!
//! The pipeline has three stages: a GCN backbone is pretrained on the source
//! split and frozen; low-rank representation interventions are then adapted
//! on uncertainty-selected test nodes against an intervention-aware masked
//! autoencoding objective; inference combines the frozen model with the
//! learned interventions, leaving non-selected nodes untouched. A separate
//! harness checks the closed-form risk-reduction argument for linear graph
//! convolutions under orthogonal feature shifts.

pub mod backbone;
pub mod graph;
pub mod iamae;
pub mod intervention;
pub mod kernel;
pub mod selection;
pub mod testkit;
pub mod theory;
