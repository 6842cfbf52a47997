//! Energy-gap-weighted preference optimisation on exact lattice proteins.

pub mod config;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod prefdata;
pub mod seqcore;
pub mod trainer;

pub use error::{Error, Result};
