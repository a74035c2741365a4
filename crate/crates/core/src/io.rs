//! Number formatting shared by CSV and report writers.

/// Scientific notation with 17 significant digits (round-trips any f64).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
