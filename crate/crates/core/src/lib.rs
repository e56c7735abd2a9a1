//! Cross-domain image translation with adaptive appearance filters and
//! contrastive retrieval descriptors for visual localization.

pub mod adaptive_conv;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod datamodel;
pub mod error;
pub mod image_io;
pub mod localization;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod pairing;
pub mod par;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
