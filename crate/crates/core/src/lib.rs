pub mod conseq;
pub mod corpuskit;
pub mod error;
pub mod evalharness;
pub mod qagen;
pub mod qagsref;
pub mod quals;
pub mod seqmodel;

pub use error::{Error, Result};
