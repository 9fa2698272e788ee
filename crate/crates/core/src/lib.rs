pub mod autograd;
pub mod cfam;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod frame;
pub mod kernels;
pub mod metrics;
pub mod monitor;
pub mod nn;
pub mod scalar;
pub mod sfam;
pub mod tensor;

pub use cfam::{CfamConfig, CfamParams};
pub use dataio::{Episode, LinkedPair};
pub use error::{Error, Result};
pub use frame::Frame;
pub use metrics::ActionGrid;
pub use monitor::{Metrics, Monitor, MonitorConfig, MonitorReport};
pub use sfam::{SfamConfig, SfamModel};

/// Controller model in single precision, the default for training and monitoring.
pub type Cfam = CfamParams<f32>;
pub type Cfam64 = CfamParams<f64>;
pub type Sfam = SfamModel<f32>;
pub type Sfam64 = SfamModel<f64>;
