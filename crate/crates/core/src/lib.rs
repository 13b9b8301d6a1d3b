//! Counterfactual-based discriminative attribution for small image
//! classifiers.
//!
//! The pipeline: generate synthetic shape datasets with analytic
//! counterfactuals (`data`), train VGG/ResNet-style classifiers on them
//! (`model`, `train`) with a from-scratch autodiff engine (`grad`), compute
//! standard and discriminative attribution maps (`attrib`), and score how
//! well each map isolates the class-discriminating evidence by swapping
//! masked regions between real and counterfactual images (`eval`).

pub mod attrib;
pub mod data;
pub mod eval;
pub mod grad;
pub mod imgproc;
pub mod model;
pub mod seed;
pub mod train;
