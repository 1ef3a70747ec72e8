//! Rotary positional embedding.
//!
//! Each consecutive pair `(x[2i], x[2i+1])` of a head vector is rotated by
//! `theta_i * position`, with `theta_i = base^(-2i/d)`.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Angular frequencies `theta_i = base^(-2i/d)` for `i in 0..d/2`.
pub fn frequencies(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d as f64))
        .collect()
}

/// Rotates `vector` to `position`. The position may be fractional or negative.
pub fn apply_rope<T: Real>(vector: &[T], position: f64, base: f64) -> Result<Vec<T>> {
    if vector.len() % 2 != 0 {
        return Err(Error::config(format!(
            "rope needs an even-length vector, got {}",
            vector.len()
        )));
    }
    let mut out = vector.to_vec();
    rotate_in_place(&mut out, position, &frequencies(vector.len(), base));
    Ok(out)
}

#[inline]
pub(crate) fn rotate_in_place<T: Real>(x: &mut [T], position: f64, freqs: &[f64]) {
    debug_assert_eq!(x.len(), 2 * freqs.len());
    if position == 0.0 {
        return;
    }
    for (pair, &theta) in x.chunks_exact_mut(2).zip(freqs) {
        let (sin, cos) = (theta * position).sin_cos();
        let (c, s) = (T::of(cos), T::of(sin));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotates every head slice of every row. `shifts[r]` is the rotation
/// position applied to row `r` (an absolute position for fresh projections,
/// or a delta when re-encoding cached keys).
pub(crate) fn rotate_rows<T: Real>(m: &mut Matrix<T>, d_head: usize, shifts: &[i64], base: f64) {
    debug_assert_eq!(m.rows(), shifts.len());
    let freqs = frequencies(d_head, base);
    for (r, &shift) in shifts.iter().enumerate() {
        if shift == 0 {
            continue;
        }
        for head in m.row_mut(r).chunks_exact_mut(d_head) {
            rotate_in_place(head, shift as f64, &freqs);
        }
    }
}
