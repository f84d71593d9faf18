//! Test-time training for temporal interpolation of volumetric sequences.
//!
//! A shared extractor `f` feeds an interpolation head `h` and two
//! self-supervised heads `g` (rotation prediction and masked
//! reconstruction). At deployment the self-supervised loss on unlabeled
//! test frames updates `f` and `g` while `h` stays frozen, using one of three
//! schemes: [`ttt::naive_ttt`], [`ttt::online_ttt`] or
//! [`ttt::minibatch_ttt`].
//!
//! Everything runs on the CPU through the tape differentiator in
//! [`ttadapt_tensor`], and every random draw is keyed by explicit seeds so
//! runs are bit-reproducible.

mod error;
pub mod experiment;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod shift;
pub mod ssl;
pub mod synth;
pub mod ttt;
pub mod volume;

pub use error::{Error, Result};
pub use nets::{FeatureMap, ModelConfig, Network};
pub use params::{Group, ParamSet, Partition};
pub use shift::{apply_shift, ShiftKind, ShiftSpec};
pub use ssl::{MaskSpec, RotationLabel, Task};
pub use synth::{generate_sequence, Motion, Sequence4D, SequenceSpec};
pub use ttt::{Scheme, TttConfig};
pub use volume::{read_volume, write_volume, Volume};
