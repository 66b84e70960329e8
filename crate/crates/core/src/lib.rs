//! Outage-constrained coordinated beamforming with statistical channel
//! knowledge for the multi-cell MISO interference channel.

pub mod dbsum;
pub mod dwmmse;
pub mod error;
pub mod harness;
pub mod implicit_rate;
pub mod linalg;
pub mod model;
pub mod polyblock;
pub mod relaxed_bound;
pub mod sdp;
pub mod utilities;

pub use error::{CobfError, Result};
