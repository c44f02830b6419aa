//! Loss function search over a piecewise-linear family of softmax losses.
//!
//! The searched loss for a sample with label `y` is
//!
//! ```text
//! L = -log τ(p^t_y),    p^t = softmax(f with f_y replaced by s·t(f_y / s))
//! ```
//!
//! where `t` (on `[-1, 1]`) and `τ` (on `[0, 1]`) are piecewise-linear with
//! `M` evenly spaced intervals. Softmax, margin losses such as ArcFace, and
//! focal loss are all members or close approximations of this family.
//!
//! A search keeps a Gaussian over the `4M` transform parameters, trains a
//! population of model copies under sampled losses for one epoch at a time,
//! moves the Gaussian mean with REINFORCE on validation accuracy, and carries
//! the best copy forward.
//!
//! Modules:
//!
//! - [`piecewise`]: the transform family and its parameter vector.
//! - [`losses`]: softmax, focal, margin and unified losses with gradients.
//! - [`nnet`]: a small MLP with a cosine head, backprop and checkpoints.
//! - [`data`]: blobs, CSV and IDX loading, label noise.
//! - [`search`]: the population search loop and the baseline trainer.
//!
//! The `book/` directory at the repository root walks through each of these
//! with runnable examples.

pub mod data;
pub mod error;
pub mod losses;
pub mod nnet;
pub mod piecewise;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
pub use losses::{LogitsBatch, LossOutput, LossSpec};
pub use nnet::{ModelState, TrainConfig};
pub use piecewise::{LossParams, PiecewiseLinearFn, Transform};
pub use search::{run_search, SearchConfig, SearchDistribution};

// The guide's code blocks run as doctests so they cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
