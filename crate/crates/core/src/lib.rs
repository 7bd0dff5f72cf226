//! Multi-stage UNet (MS-UNet) cascade for binary lesion segmentation.
//!
//! The crate carries its own small reverse-mode tensor engine
//! ([`tensor`]), the single-stage and context-fusion UNets and their
//! cascade ([`architecture`]), the soft Jaccard training objective with
//! weighted deep supervision ([`loss`]), Adam training with the
//! augmentation pipeline ([`training`]), dataset and checkpoint IO
//! ([`data`]) and the evaluation metrics ([`metrics`]).

pub mod architecture;
pub mod checks;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor, Var};
