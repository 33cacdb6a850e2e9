//! Sequential recommendation with pseudo-prior item augmentation.
//!
//! A causal transformer is first trained on reversed user sequences, so it
//! learns to predict the item that came *before* a given suffix. That model
//! then prepends pseudo-prior items to short sequences, and a forward model
//! is fine-tuned on the augmented corpus. Evaluation is leave-one-out with
//! sampled negatives.
//!
//! The modules follow the data flow:
//!
//! - [`dataset`]: parsing, vocabulary, sequences and the leave-one-out split
//! - [`encoder`]: the transformer and its parameters
//! - [`training`]: batches, loss, gradients and the training loop
//! - [`augmentation`]: pseudo-prior generation
//! - [`evaluation`]: ranking metrics and reports
//! - [`checkpoint`]: binary parameter files
//! - [`pipeline`]: cached stages, manifests and sweeps
//!
//! ```
//! use asrep::dataset::Sequence;
//! use asrep::encoder::{ModelConfig, ModelParams};
//! use asrep::augmentation::augment_sequence;
//! use rand::SeedableRng;
//!
//! let cfg = ModelConfig::new(10, 8, 6, 1, 2);
//! let params = ModelParams::init(cfg, 0.02, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
//! let seq = Sequence { user_id: 0, items: vec![4, 5] };
//! let out = augment_sequence(&params, &seq, 3)?;
//! assert_eq!(out.items.len(), 5);
//! assert_eq!(&out.items[3..], &[4, 5]);
//! # Ok::<(), asrep::Error>(())
//! ```

pub mod augmentation;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
}
