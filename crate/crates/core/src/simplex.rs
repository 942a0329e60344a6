//! Geometry of the probability simplex `{p : p_i >= 0, sum p_i = 1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stack::OwnershipStack;

/// Orthogonal projection onto the simplex's tangent plane: subtracts the
/// component mean, so the result sums to zero.
pub fn tangent_project<T: Scalar>(w: &[T]) -> Vec<T> {
    let mut out = w.to_vec();
    tangent_project_in_place(&mut out);
    out
}

pub fn tangent_project_in_place<T: Scalar>(w: &mut [T]) {
    if w.is_empty() {
        return;
    }
    let mean = w.iter().copied().sum::<T>() / T::from_count(w.len());
    for v in w.iter_mut() {
        *v -= mean;
    }
}

/// Euclidean projection onto the simplex (sort and threshold).
pub fn simplex_project<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    let mut scratch = Vec::with_capacity(v.len());
    simplex_project_in_place(&mut out, &mut scratch);
    out
}

/// In-place variant; `scratch` is reused between calls to avoid allocating
/// per pixel.
pub fn simplex_project_in_place<T: Scalar>(v: &mut [T], scratch: &mut Vec<T>) {
    let k = v.len();
    if k == 0 {
        return;
    }
    if is_feasible(v, T::projection_tol()) && v.iter().all(|&x| x <= T::one()) {
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_by(|a, b| b.partial_cmp(a).expect("finite components"));

    // Largest rho with u_rho - (sum_{j<=rho} u_j - 1) / rho > 0.
    let mut cumulative = T::zero();
    let mut theta = T::zero();
    for (j, &u) in scratch.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - T::one()) / T::from_count(j + 1);
        if u - t > T::zero() {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max_of(T::zero());
    }
    // Fold the rounding residue into the largest component so the sum is 1.
    let (mut best, mut best_val) = (0, v[0]);
    for (i, &x) in v.iter().enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    let sum: T = v.iter().copied().sum();
    v[best] = (v[best] + (T::one() - sum)).min_of(T::one());
}

/// All components non-negative and summing to one within `tol`.
pub fn is_feasible<T: Scalar>(v: &[T], tol: T) -> bool {
    let sum: T = v.iter().copied().sum();
    v.iter().all(|&x| x >= T::zero()) && (sum - T::one()).abs() <= tol
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub max_sum_deviation: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub passes: bool,
}

impl FeasibilityReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passes {
            Ok(self)
        } else {
            Err(Error::Infeasible {
                max_deviation: self.max_sum_deviation,
                min_value: self.min_value,
            })
        }
    }
}

/// Checks every pixel of `p` against the simplex. Passes iff the channel
/// sums are within `tol` of one and no value is below `-tol`.
pub fn validate_stack<T: Scalar>(p: &OwnershipStack<T>, tol: T) -> Result<FeasibilityReport> {
    if p.k() < 2 {
        return Err(Error::invalid(format!(
            "ownership stack needs K >= 2 channels, got {}",
            p.k()
        )));
    }
    let n = p.pixel_count();
    let mut max_dev = T::zero();
    let mut min_v = p.channel(0).values()[0];
    let mut max_v = min_v;
    for idx in 0..n {
        let mut sum = T::zero();
        for c in p.channels() {
            let v = c.values()[idx];
            sum += v;
            min_v = min_v.min_of(v);
            max_v = max_v.max_of(v);
        }
        max_dev = max_dev.max_of((sum - T::one()).abs());
    }
    let passes = max_dev <= tol && min_v >= -tol;
    Ok(FeasibilityReport {
        max_sum_deviation: max_dev.to_f64().unwrap_or(f64::NAN),
        min_value: min_v.to_f64().unwrap_or(f64::NAN),
        max_value: max_v.to_f64().unwrap_or(f64::NAN),
        passes,
    })
}

/// Projects every pixel of the stack onto the simplex.
pub fn project_stack<T: Scalar>(p: &mut OwnershipStack<T>) {
    let k = p.k();
    let mut buf = vec![T::zero(); k];
    let mut scratch = Vec::with_capacity(k);
    for idx in 0..p.pixel_count() {
        for (b, c) in buf.iter_mut().zip(p.channels()) {
            *b = c.values()[idx];
        }
        simplex_project_in_place(&mut buf, &mut scratch);
        p.set_pixel(idx, &buf);
    }
}
