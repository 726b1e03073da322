//! Training-free correspondence-guided style transfer.
//!
//! The toolkit mines dense semantic correspondences from the intermediate
//! features of a frozen latent-diffusion backbone, uses them to steer
//! attention-level style injection during DDIM sampling, and wraps the
//! stylization in a cycle-consistent refinement loop with edge- and
//! texture-based stopping losses. An evaluation harness computes LPIPS,
//! FID, ArtFID, and CFSD over dataset manifests.

pub mod backbone;
pub mod correspondence;
pub mod cycle;
pub mod error;
pub mod imaging;
pub mod injection;
pub mod losses;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
