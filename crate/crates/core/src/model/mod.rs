//! The enhancement/compensation network, its building blocks and the
//! metric discriminator. Tensors are channel-last: (batch, time, freq, chan).

pub mod config;
pub mod conformer;
pub mod decoder;
pub mod discriminator;
pub mod dsp;
pub mod encoder;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
pub mod trace;
pub mod vad;

pub use config::ModelConfig;
pub use discriminator::{DiscConfig, Discriminator};
pub use fusion::{AmftBlock, FusionStage, Modulation, ModulationHead};
pub use network::{dense_audiograms, parameter_count, reconstruct, shape_trace, HearNet, NetOutput, SpectralOutput};
pub use params::{ParamStore, Scope};
pub use trace::ShapeRow;
