//! Adversarial influence functions: closed-form first-order effects of adversarial training on
//! regression and kernel models, with robust-optimization ground truth to check them against.

// Guards are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aif;
pub mod attack;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod robustopt;
pub mod sensitivity;

pub use error::{AifError, Result};

/// Formats a float with 17 significant digits, which round-trips every f64 exactly.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}
