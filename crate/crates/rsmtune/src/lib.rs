//! Sequential response-surface tuner for black-box hyperparameters.
//!
//! The campaign walks the classic sequence: a two-level factorial
//! screens the declared factors with a first-order fit, insignificant
//! factors are dropped, the path of steepest descent relocates the
//! experimental region, a central composite design supports a
//! second-order fit, and canonical analysis locates and classifies the
//! stationary point, which confirmation runs then check. Every
//! objective evaluation is a numbered run in an append-only ledger, so
//! campaigns are resumable, replayable, and auditable.

pub mod cli;
pub mod doe;
pub mod error;
pub mod linalg;
pub mod objective;
pub mod regress;
pub mod search;

pub mod campaign;

pub use error::{Error, Result};
