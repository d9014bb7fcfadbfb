//! Periodic stripes of the Swift-Hohenberg equation, their Bloch spectrum,
//! far-field asymptotics of stripes with localized impurities, and a small
//! laboratory for Fredholm properties of differential operators on weighted spaces.

pub mod banded;
pub mod acceptance;
pub mod bloch;
pub mod cli;
pub mod defectsolve;
pub mod error;
pub mod farfield;
pub mod fredholmlab;
pub mod jet;
pub mod par;
pub mod quad;
pub mod response;
pub mod stripes;

pub use error::{Error, Result};
