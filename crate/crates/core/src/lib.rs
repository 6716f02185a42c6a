//! Bi-directional prototypical alignment with strong augmentation (stabPA)
//! for cross-domain cross-set few-shot learning on feature vectors.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`]: samples, synthetic multi-domain generation, episode sampling, file I/O.
//! * [`encoder`]: small MLP feature extractor with ℓ2-normalised output, exact
//!   gradients, and Adam.
//! * [`augment`]: weak and strong augmentation policies for feature vectors.
//! * [`pseudo`]: classification heads, the frozen initial classifier and
//!   interpolated pseudo-labels.
//! * [`align`]: prototype banks, curriculum weight and the alignment losses.
//! * [`train`]: the meta-training loop, source-only baseline and ablation grid.
//! * [`eval`]: episodic linear-probe evaluation and the PD/ADR diagnostics.
//! * [`config`]: the flat key-value experiment configuration used by the CLI.

pub mod align;
pub mod augment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pseudo;
pub mod rng;
pub mod train;
pub mod vecmath;

pub use error::{Error, Result};
