//! Lifted iterative learning control for a precision motion stage, and two
//! students that imitate it across a family of references: TAIL-ILC, which
//! regresses between PCA latent spaces of whole signals, and NN-ILC, which
//! predicts sample by sample.
//!
//! The guide in `book/` walks through the pieces in order.

pub mod dpca;
pub mod error;
pub mod ilc;
pub mod lti;
pub mod mlp;
pub mod plant;
pub mod policies;
pub mod setpoint;

pub use error::{Error, Result};

// Book chapters run as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/setpoints.md")]
    mod setpoints {}
    #[doc = include_str!("../../../book/src/lifted-loops.md")]
    mod lifted_loops {}
    #[doc = include_str!("../../../book/src/ilc-expert.md")]
    mod ilc_expert {}
    #[doc = include_str!("../../../book/src/latent-projection.md")]
    mod latent_projection {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/students.md")]
    mod students {}
}
