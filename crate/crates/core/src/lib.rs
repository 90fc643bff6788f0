//! Variable-rate CSI feedback codec with sensor-assisted reconstruction,
//! plus the channel simulator, trainer, and evaluation harness around it.

pub mod autonet;
pub mod chansim;
pub mod codec;
pub mod diffcore;
pub mod eval;
pub mod fusion;
pub mod parallel;
pub mod quantizer;
pub mod trainer;
pub mod wire;

pub use codec::{Codec, CodecConfig};

/// Error type for operations spanning several modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Sim(#[from] chansim::SimError),
    #[error(transparent)]
    Net(#[from] autonet::NetError),
    #[error(transparent)]
    Quant(#[from] quantizer::QuantError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
