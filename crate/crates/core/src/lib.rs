pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod seed;
pub mod trainer;
pub mod types;

pub use config::{load_config, LayerId, Preset, TrainConfig};
pub use error::{Error, Result};
pub use types::{DomainLabel, Image, SemanticMap};
