//! Reinforced multi-teacher selection for knowledge distillation.
//!
//! A student classifier is distilled from several teachers while a
//! per-teacher logistic policy learns, instance by instance, which
//! teachers' soft labels to trust.

pub mod datasets;
pub mod distillation;
pub mod error;
pub mod models;
pub mod numerics;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
