//! Budget-constrained structured channel pruning.
//!
//! Channel masks are learned through a logistic curve followed by a
//! continuous Heaviside projection, pushed to 0/1 by a crispness loss and
//! steered towards a resource budget. After soft pruning the masks are
//! thresholded to meet the budget and the slim network is finetuned.

pub mod budgets;
pub mod config;
pub mod datakit;
pub mod error;
pub mod models;
pub mod ndgrad;
pub mod pipeline;
pub mod projections;
pub mod pruner;

pub use error::{Error, Result};
