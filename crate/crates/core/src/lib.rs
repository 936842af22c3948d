pub mod config;
pub mod decoder;
pub mod error;
pub mod filter;
pub mod forecast;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod train;

pub use config::RunConfig;
pub use decoder::{Decoder, DecoderCoeffs, JumpMarkDist, LinearDecoderParams, ObservationModel, PolyDecoderParams};
pub use error::{Error, Result};
pub use grid::{BeliefDensity, LatentGrid};
pub use sim::{LatentParams, ObsParams, SimPath, Split, WindowDataset};
