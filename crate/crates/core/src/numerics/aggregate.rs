//! Size-unifying aggregation of 1-D voxel vectors.
//!
//! Window `i` of an `L → m` adaptive pool covers
//! `[floor(i·L/m), ceil((i+1)·L/m))`, so windows may overlap by one element
//! when `m` does not divide `L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Which aggregation function maps a variable-length voxel vector to the
/// fixed model input width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Avg,
    Interpolate,
}

pub fn window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn check_sizes(len: usize, out: usize) -> Result<()> {
    if out == 0 || out > len {
        return Err(Error::param(format!(
            "adaptive pooling needs 1 <= output size <= input length, got {out} for length {len}"
        )));
    }
    Ok(())
}

/// Adaptive max pooling. Returns the pooled values and, per window, the
/// absolute index of the selected element (lowest index on ties).
pub fn adaptive_max_pool<T: Real>(v: &[T], out: usize) -> Result<(Vec<T>, Vec<usize>)> {
    check_sizes(v.len(), out)?;
    let mut values = Vec::with_capacity(out);
    let mut argmax = Vec::with_capacity(out);
    for i in 0..out {
        let (start, end) = window(i, v.len(), out);
        let mut best = start;
        for j in start + 1..end {
            if v[j] > v[best] {
                best = j;
            }
        }
        values.push(v[best]);
        argmax.push(best);
    }
    Ok((values, argmax))
}

pub fn adaptive_avg_pool<T: Real>(v: &[T], out: usize) -> Result<Vec<T>> {
    check_sizes(v.len(), out)?;
    Ok((0..out)
        .map(|i| {
            let (start, end) = window(i, v.len(), out);
            let s: T = v[start..end].iter().copied().sum();
            s / T::lit((end - start) as f64)
        })
        .collect())
}

/// Linear interpolation with half-pixel centers (`align_corners = false`).
pub fn interpolate_linear<T: Real>(v: &[T], out: usize) -> Result<Vec<T>> {
    check_sizes(v.len(), out)?;
    let len = v.len();
    let scale = len as f64 / out as f64;
    Ok((0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = T::lit(src - lo as f64);
            v[lo] + (v[hi] - v[lo]) * frac
        })
        .collect())
}

pub fn aggregate<T: Real>(v: &[T], out: usize, how: Aggregation) -> Result<Vec<T>> {
    match how {
        Aggregation::Max => adaptive_max_pool(v, out).map(|(values, _)| values),
        Aggregation::Avg => adaptive_avg_pool(v, out),
        Aggregation::Interpolate => interpolate_linear(v, out),
    }
}
