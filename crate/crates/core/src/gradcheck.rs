//! Central finite differences for checking tape gradients.
//!
//! Only forward evaluations are used here, so the numbers are independent
//! of every backward closure on the tape.

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each listed coordinate `i`.
pub fn central_differences(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Comparison {
    /// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> Comparison {
    assert_eq!(analytic.len(), numeric.len());
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let an = l2(&mut analytic.iter().copied());
    let nn = l2(&mut numeric.iter().copied());
    let denom = an.max(nn);
    Comparison {
        relative_error: if denom == 0.0 { 0.0 } else { diff / denom },
        max_abs_error: analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        analytic_norm: an,
        numeric_norm: nn,
    }
}
