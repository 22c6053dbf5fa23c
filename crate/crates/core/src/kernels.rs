//! Dense `f64` distance kernels.
//!
//! The lane-split accumulation order is fixed, so the wide (AVX2/FMA-enabled)
//! and portable builds of each kernel return bit-identical results; the
//! target-feature variant only lets the compiler pick wider registers.

use rayon::prelude::*;

const LANES: usize = 8;
/// Rows per tile in the pairwise sum.
const TILE: usize = 32;

#[inline(always)]
fn sq_dist_impl(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline(always)]
fn dot_impl(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Sum of Euclidean distances from row `a` to every row of `block`.
#[inline(always)]
fn row_block_sum_impl(a: &[f64], block: &[f64], dim: usize) -> f64 {
    let mut s = 0.0;
    for b in block.chunks_exact(dim) {
        s += sq_dist_impl(a, b).sqrt();
    }
    s
}

#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        super::sq_dist_impl(a, b)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn row_block_sum(a: &[f64], block: &[f64], dim: usize) -> f64 {
        super::row_block_sum_impl(a, block, dim)
    }

    /// `row_block_sum_impl` for four rows at once. Sharing each load of `b`
    /// between four independent accumulator sets keeps the adds off a single
    /// dependency chain. Lanes 0..4 of a pair live in one register and lanes
    /// 4..8 in another, and every step is the same unfused subtract, multiply
    /// and add, so each row's sum matches the single-row kernel bit for bit.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn rows4_block_sum(a: [&[f64]; 4], block: &[f64], dim: usize) -> [f64; 4] {
        use std::arch::x86_64::*;
        let full = dim - dim % super::LANES;
        let mut out = [0.0f64; 4];
        let pa = [a[0].as_ptr(), a[1].as_ptr(), a[2].as_ptr(), a[3].as_ptr()];
        for b in block.chunks_exact(dim) {
            let pb = b.as_ptr();
            let mut lo = [_mm256_setzero_pd(); 4];
            let mut hi = [_mm256_setzero_pd(); 4];
            let mut c = 0;
            while c < full {
                // SAFETY: c + 8 <= full <= dim, the length of every row.
                let (ylo, yhi) = unsafe { (_mm256_loadu_pd(pb.wrapping_add(c)), _mm256_loadu_pd(pb.wrapping_add(c + 4))) };
                for r in 0..4 {
                    let (xlo, xhi) = unsafe { (_mm256_loadu_pd(pa[r].wrapping_add(c)), _mm256_loadu_pd(pa[r].wrapping_add(c + 4))) };
                    let dlo = _mm256_sub_pd(xlo, ylo);
                    let dhi = _mm256_sub_pd(xhi, yhi);
                    lo[r] = _mm256_add_pd(lo[r], _mm256_mul_pd(dlo, dlo));
                    hi[r] = _mm256_add_pd(hi[r], _mm256_mul_pd(dhi, dhi));
                }
                c += super::LANES;
            }
            for r in 0..4 {
                let mut q = [0.0f64; 8];
                // SAFETY: q holds exactly two 4-lane vectors.
                unsafe {
                    _mm256_storeu_pd(q.as_mut_ptr(), lo[r]);
                    _mm256_storeu_pd(q.as_mut_ptr().wrapping_add(4), hi[r]);
                }
                let mut tail = 0.0;
                for (x, y) in a[r][full..].iter().zip(&b[full..]) {
                    let d = x - y;
                    tail += d * d;
                }
                let sq = ((q[0] + q[4]) + (q[1] + q[5])) + ((q[2] + q[6]) + (q[3] + q[7])) + tail;
                out[r] += sq.sqrt();
            }
        }
        out
    }
}

#[cfg(target_arch = "x86_64")]
fn has_wide() -> bool {
    use std::sync::OnceLock;
    static WIDE: OnceLock<bool> = OnceLock::new();
    *WIDE.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: feature presence checked at runtime.
        return unsafe { wide::sq_dist(a, b) };
    }
    sq_dist_impl(a, b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_impl(a, b)
}

fn row_block_sum(a: &[f64], block: &[f64], dim: usize) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: feature presence checked at runtime.
        return unsafe { wide::row_block_sum(a, block, dim) };
    }
    row_block_sum_impl(a, block, dim)
}

fn rows4_block_sum(a: [&[f64]; 4], block: &[f64], dim: usize) -> [f64; 4] {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: feature presence checked at runtime.
        return unsafe { wide::rows4_block_sum(a, block, dim) };
    }
    a.map(|row| row_block_sum_impl(row, block, dim))
}

/// `sum_{i<j} ||x_i - x_j||` over the rows of a row-major matrix.
///
/// Work is split into row tiles; every tile pair is summed in a fixed order
/// and the per-tile partials are reduced sequentially, so the result does not
/// depend on the rayon pool size.
pub fn pairwise_distance_sum(data: &[f64], dim: usize) -> f64 {
    assert!(dim > 0 && data.len() % dim == 0);
    let n = data.len() / dim;
    let tiles = n.div_ceil(TILE);
    let partials: Vec<f64> = (0..tiles)
        .into_par_iter()
        .map(|ti| {
            let i0 = ti * TILE;
            let i1 = (i0 + TILE).min(n);
            let mut total = 0.0;
            // Diagonal tile: strictly upper triangle.
            for i in i0..i1 {
                let a = &data[i * dim..(i + 1) * dim];
                total += row_block_sum(a, &data[(i + 1) * dim..i1 * dim], dim);
            }
            for tj in ti + 1..tiles {
                let j0 = tj * TILE;
                let j1 = (j0 + TILE).min(n);
                let block = &data[j0 * dim..j1 * dim];
                let row = |i: usize| &data[i * dim..(i + 1) * dim];
                let mut tile_sum = 0.0;
                let mut i = i0;
                while i + 4 <= i1 {
                    let sums = rows4_block_sum([row(i), row(i + 1), row(i + 2), row(i + 3)], block, dim);
                    for s in sums {
                        tile_sum += s;
                    }
                    i += 4;
                }
                for i in i..i1 {
                    tile_sum += row_block_sum(row(i), block, dim);
                }
                total += tile_sum;
            }
            total
        })
        .collect();
    partials.iter().sum()
}
