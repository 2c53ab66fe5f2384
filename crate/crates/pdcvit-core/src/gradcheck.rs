//! Central finite-difference gradient checking. The checker evaluates only
//! the forward path, so it is an oracle independent of the backward pass it
//! validates.

use alloc::vec::Vec;

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl CheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Central difference (f(x+h·e_i) − f(x−h·e_i)) / 2h.
pub fn central_diff<F>(mut f: F, x: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x)?;
    x[i] = orig - h;
    let fm = f(x)?;
    x[i] = orig;
    Ok((fp - fm) / (2.0 * h))
}

/// Compares analytic gradients against central differences at the given
/// coordinates. The relative error uses max(|a|, |n|) as denominator with a
/// small floor; differences below 1e-10 count as zero error so that exact
/// zero gradients compare cleanly.
pub fn check_gradient<F>(
    mut f: F,
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut report = CheckReport { max_rel_err: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let numeric = central_diff(&mut f, x, i, h)?;
        let a = analytic[i];
        let diff = crate::math::abs(a - numeric);
        let rel = if diff <= 1e-10 {
            0.0
        } else {
            diff / crate::math::abs(a).max(crate::math::abs(numeric)).max(1e-8)
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Evenly spread sample of `count` coordinate indices out of `len`.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = Σ x², ∇f = 2x.
        let mut x = alloc::vec![0.5, -1.25, 2.0];
        let analytic = alloc::vec![1.0, -2.5, 4.0];
        let report = check_gradient(
            |v| Ok(v.iter().map(|a| a * a).sum()),
            &mut x,
            &analytic,
            &[0, 1, 2],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_REL_TOL), "max rel {}", report.max_rel_err);
        // x restored after probing.
        assert_eq!(x, alloc::vec![0.5, -1.25, 2.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut x = alloc::vec![1.0];
        let analytic = alloc::vec![3.0]; // true gradient is 2.0
        let report = check_gradient(
            |v| Ok(v[0] * v[0]),
            &mut x,
            &analytic,
            &[0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(!report.passes(DEFAULT_REL_TOL));
    }

    #[test]
    fn spread_covers_bounds() {
        assert_eq!(spread_indices(3, 10), alloc::vec![0, 1, 2]);
        let idx = spread_indices(1000, 4);
        assert_eq!(idx, alloc::vec![0, 250, 500, 750]);
    }
}
