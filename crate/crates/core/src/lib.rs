//! Fractional-imputation estimation of a logistic response model under
//! nonignorable nonresponse, with symbolic identifiability checks.

pub mod basis;
pub mod cli;
pub mod config;
pub mod data;
pub mod fiem;
pub mod error;
pub mod expfam;
pub mod identify;
pub mod numeric;
pub mod respondent;
pub mod report;
pub mod response;
pub mod sim;
pub mod variance;

pub use error::{Error, Result};
