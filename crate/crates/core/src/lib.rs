//! Risk-set matching and sensitivity analysis for natural experiments built
//! from longitudinal event histories.
//!
//! The pipeline is: a [`model::Cohort`] of subject histories goes through
//! [`matching::build_risk_set_match`] to produce a [`matching::MatchDesign`] of
//! 1:(J-1) matched sets; [`balance`] summarizes the design; [`inference`]
//! computes p-value bounds, confidence limits and point estimates under a
//! bias of at most Γ.

pub mod balance;
pub mod distance;
pub mod error;
pub mod inference;
pub mod io;
pub mod matching;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};

// The guide in book/ is compiled here so its examples run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cohort-data.md")]
    mod cohort_data {}
    #[doc = include_str!("../../../book/src/risk-set-matching.md")]
    mod risk_set_matching {}
    #[doc = include_str!("../../../book/src/balance.md")]
    mod balance {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/effect-models.md")]
    mod effect_models {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
