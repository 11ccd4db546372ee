#![allow(dead_code)]

pub mod dn;
pub mod formats;
pub mod lossgrad;
pub mod quadrature;
