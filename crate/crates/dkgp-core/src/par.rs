//! Row-parallel execution helpers.
//!
//! With the `parallel` feature the closure runs across the rayon pool; without
//! it the same closure runs on the calling thread. Every row writes only its
//! own output slice and reads only shared immutable state, so the two modes
//! produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(row_index, row_slice)` to each `cols`-wide chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(cols > 0 && out.len() % cols == 0);
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Sequential twin of [`for_each_row`], kept unconditionally compiled so the
/// bench suite can compare both paths in one build.
pub fn for_each_row_seq<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    debug_assert!(cols > 0 && out.len() % cols == 0);
    out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}
