pub mod aes;
pub mod deform;
pub mod differencing;
pub mod error;
pub mod field;
pub mod lungseg;
pub mod metrics;
pub mod morphology;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod rigid;
pub mod volume;
pub mod warp;

pub use error::{Error, ErrorClass, Result};
