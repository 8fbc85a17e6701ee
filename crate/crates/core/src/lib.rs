//! Self-erasing attention network for weakly-supervised localization.
//!
//! The crate contains a small reverse-mode tensor engine ([`tensor`]), the
//! zone masks and attention fusion ([`masks`]), the three-branch network
//! ([`seenet`]) with its training loop ([`train`]) and inference
//! ([`infer`]), proxy segmentation labels from saliency and attention
//! ([`proxy_gt`]), evaluation metrics ([`eval`]) and a synthetic dataset
//! with pixel ground truth ([`data_synth`]).

pub mod checkpoint;
pub mod cli;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod infer;
pub mod masks;
pub mod proxy_gt;
pub mod seenet;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
