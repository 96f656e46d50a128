//! Maximum Excess over SubArrays.
//!
//! The MESA distance between two density maps is the largest absolute
//! difference of their integrals over any axis-aligned box. Both the distance
//! and the learner's constraint search reduce to 2D maximum-subarray: fix an
//! interval of rows, collapse it to column sums, run Kadane over the columns.

use rayon::prelude::*;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::grids::{BoxRegion, Grid2D};

/// Best box and its sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubarrayMax {
    pub region: BoxRegion,
    pub value: f64,
}

impl SubarrayMax {
    /// Larger value wins; equal values go to the lexicographically smallest
    /// `(y0, x0, y1, x1)`.
    fn better_than(&self, other: &SubarrayMax) -> bool {
        self.value > other.value || (self.value == other.value && self.region.tie_key() < other.region.tie_key())
    }
}

/// Maximum-sum nonempty box of a single-channel grid.
pub fn max_subarray(grid: &Grid2D) -> Result<SubarrayMax> {
    if grid.channels() != 1 {
        return Err(Error::mismatch("1 channel", format!("{} channels", grid.channels())));
    }
    let values: Vec<f64> = grid.data().iter().map(|&v| v as f64).collect();
    Ok(max_subarray_f64(&values, grid.width(), grid.height()))
}

/// Row-major `width × height` variant working on `f64` values.
///
/// Runs in `O(min(W,H)² · max(W,H))`: the outer interval ranges over the
/// shorter side.
pub fn max_subarray_f64(values: &[f64], width: usize, height: usize) -> SubarrayMax {
    assert!(width > 0 && height > 0 && values.len() == width * height);
    let transposed = width < height;
    // "outer" is the dimension whose intervals are enumerated
    let (outer, inner) = if transposed { (width, height) } else { (height, width) };
    // outer-major copy so each outer line is contiguous
    let lines: Vec<f64> = if transposed {
        (0..outer)
            .flat_map(|o| (0..inner).map(move |i| values[i * width + o]))
            .collect()
    } else {
        values.to_vec()
    };
    let to_box = |o0: usize, o1: usize, i0: usize, i1: usize| {
        if transposed {
            BoxRegion {
                x0: o0,
                x1: o1,
                y0: i0,
                y1: i1,
            }
        } else {
            BoxRegion {
                x0: i0,
                x1: i1,
                y0: o0,
                y1: o1,
            }
        }
    };

    let per_start: Vec<SubarrayMax> = (0..outer)
        .into_par_iter()
        .map(|o0| {
            let mut col = vec![0.0f64; inner];
            let mut best: Option<SubarrayMax> = None;
            let mut best_value = f64::NEG_INFINITY;
            for o1 in o0..outer {
                for (c, v) in col.iter_mut().zip(&lines[o1 * inner..(o1 + 1) * inner]) {
                    *c += v;
                }
                // Kadane keeping the earliest start among equal suffix sums
                let mut run = 0.0f64;
                let mut start = 0usize;
                for (i, &c) in col.iter().enumerate() {
                    if i == 0 || run < 0.0 {
                        run = c;
                        start = i;
                    } else {
                        run += c;
                    }
                    if run >= best_value || best.is_none() {
                        let cand = SubarrayMax {
                            region: to_box(o0, o1, start, i),
                            value: run,
                        };
                        if best.is_none_or(|b| cand.better_than(&b)) {
                            best = Some(cand);
                            best_value = run;
                        }
                    }
                }
            }
            best.expect("nonempty grid")
        })
        .collect();

    per_start
        .into_iter()
        .reduce(|a, b| if b.better_than(&a) { b } else { a })
        .expect("nonempty grid")
}

/// MESA distance: `max(0, max_B (F1 − F2)(B), max_B (F2 − F1)(B))`.
pub fn mesa_distance(f1: &DensityMap, f2: &DensityMap) -> Result<f64> {
    let (a, b) = (f1.grid(), f2.grid());
    if !a.same_shape(b) {
        return Err(Error::mismatch(a.shape_string(), b.shape_string()));
    }
    let diff: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 - y as f64)
        .collect();
    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
    Ok(mesa_distance_signed(&diff, &neg, a.width(), a.height()))
}

fn mesa_distance_signed(diff: &[f64], neg: &[f64], w: usize, h: usize) -> f64 {
    let p = max_subarray_f64(diff, w, h).value;
    let n = max_subarray_f64(neg, w, h).value;
    p.max(n).max(0.0)
}

#[cfg(test)]
pub(crate) mod brute {
    use super::*;

    /// Exhaustive O(W²H²) search in `(y0, x0, y1, x1)` order; first maximum wins.
    pub fn max_subarray_brute(values: &[f64], w: usize, h: usize) -> SubarrayMax {
        let mut best: Option<SubarrayMax> = None;
        for y0 in 0..h {
            for x0 in 0..w {
                for y1 in y0..h {
                    for x1 in x0..w {
                        let mut s = 0.0;
                        for y in y0..=y1 {
                            for x in x0..=x1 {
                                s += values[y * w + x];
                            }
                        }
                        if best.is_none_or(|b| s > b.value) {
                            best = Some(SubarrayMax {
                                region: BoxRegion { x0, y0, x1, y1 },
                                value: s,
                            });
                        }
                    }
                }
            }
        }
        best.unwrap()
    }
}
