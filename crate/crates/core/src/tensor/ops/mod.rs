mod conv;
mod elementwise;
mod linalg;
mod nn;
pub(crate) mod reduce;
mod resample;
mod shape;

pub use conv::PadMode;
pub use resample::UpsampleMode;
