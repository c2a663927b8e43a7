use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `f` maps a leaf on a fresh tape to a scalar output.
///
/// Returns the maximum over coordinates of `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(&tape, leaf).into_data();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + EPS))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });

    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
