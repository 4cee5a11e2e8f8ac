#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod joint_loss;
pub mod layers;
pub mod models;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
