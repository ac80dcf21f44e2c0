pub mod acoustic;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod flow;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod report;
pub mod text;
pub mod training;

pub use error::{Error, Result};
