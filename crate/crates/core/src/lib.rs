//! Simulation and training of spiking networks on ADC-less in-memory
//! computing crossbars.

pub mod checkpoint;
pub mod crossbar;
pub mod hwcost;
pub mod dataset;
pub mod error;
pub mod layers;
pub mod netspec;
pub mod quant;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
