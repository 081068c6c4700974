#![allow(dead_code)]

pub mod expfam_oracle;
pub mod fiem_checks;
pub mod respondent_checks;
pub mod variance_checks;
