use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    /// Second differences above `kink_factor * eps^1.5 * max(1, |f|)` mark a
    /// non-differentiable point.
    pub kink_factor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-5, abs_floor: 1e-6, kink_factor: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordStatus {
    Checked,
    /// Excluded: the function has a kink at this coordinate.
    Kink,
    /// A function evaluation or the analytic gradient was not finite.
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: CoordStatus,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn excluded(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| c.status == CoordStatus::Kink)
    }
}

fn eval<T: Float, F>(f: &F, point: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x)?;
    tape.value(y).item().map(|v| v.as_f64()).ok_or_else(|| Error::NonScalarLoss(tape.shape(y).to_vec()))
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences on `coords` (all coordinates when `None`).
pub fn finite_difference_check<T: Float, F>(
    f: F,
    point: &Tensor<T>,
    coords: Option<&[usize]>,
    opts: FdOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let f0 = tape.value(y).item().ok_or_else(|| Error::NonScalarLoss(tape.shape(y).to_vec()))?.as_f64();
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let kink_threshold = opts.kink_factor * opts.eps.powf(1.5) * f0.abs().max(1.0);
    let mut report = Vec::with_capacity(coords.len());
    let mut max_rel = 0.0f64;
    let mut passed = f0.is_finite();
    for &i in coords {
        if i >= point.numel() {
            return Err(Error::InvalidArgument(format!("coordinate {i} out of range")));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += T::from_f(opts.eps);
        let mut minus = point.clone();
        minus.data_mut()[i] -= T::from_f(opts.eps);
        let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        let (fp, fm) = (eval(&f, &plus)?, eval(&f, &minus)?);
        let a = analytic.data()[i].as_f64();
        let numeric = (fp - fm) / step;
        let status = if !(fp.is_finite() && fm.is_finite() && a.is_finite()) {
            CoordStatus::NonFinite
        } else if (fp + fm - 2.0 * f0).abs() > kink_threshold {
            CoordStatus::Kink
        } else {
            CoordStatus::Checked
        };
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        match status {
            CoordStatus::Checked => max_rel = max_rel.max(rel_error),
            CoordStatus::NonFinite => passed = false,
            CoordStatus::Kink => {}
        }
        report.push(CoordCheck { index: i, analytic: a, numeric, rel_error, status });
    }
    passed &= max_rel <= opts.tol;
    Ok(CheckReport { coords: report, max_rel_error: max_rel, passed })
}
