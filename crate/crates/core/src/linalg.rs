//! Small dense helpers for the low-dimensional vectors used throughout.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Row-major d×d matrix times vector.
#[inline]
pub(crate) fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * d..(i + 1) * d], v);
    }
}
