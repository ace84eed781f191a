pub mod autodiff;
pub mod bias_net;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod inertial;
pub mod liegroup;
pub mod msckf;
pub mod time;

pub use error::{Error, Result};
pub use inertial::{ImuBias, ImuSample, NoiseParams};
pub use liegroup::{ExtendedPose, Matrix9, Vector9};
pub use time::Timestamp;
