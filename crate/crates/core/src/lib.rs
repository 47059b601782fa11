//! Modality decoupling for a toy promptable segmenter, trained and verified on
//! synthetic scenes with a known text/visual factorisation.

pub mod adversary;
pub mod club;
pub mod decoupler;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod probe;
pub mod segcore;
pub mod synthdata;

pub use error::{Error, Result};
