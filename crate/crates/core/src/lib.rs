//! Hearing-loss compensation and speech enhancement: audiogram handling,
//! spectral analysis, FIG6 wide-dynamic-range compression, training-data
//! synthesis, the joint enhancement/compensation network, its losses,
//! evaluation metrics and the adversarial training loop.

pub mod audiogram;
pub mod compensation;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod synthesis;
pub mod toy;
pub mod training;
pub mod wav;

pub use audiogram::{Audiogram, DenseAudiogram, SeverityClass};
pub use compensation::{Compensator, WdrcConfig};
pub use error::{Error, Result};
pub use spectral::{ComplexSpectrogram, StftConfig, Waveform};
pub use synthesis::{SynthConfig, SynthSample, Synthesizer};
