//! CT-to-ultrasound simulation and spine registration toolkit.

pub mod acoustic;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod phantom;
pub mod press;
pub mod propagation;
pub mod registration;
pub mod synthesis;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
