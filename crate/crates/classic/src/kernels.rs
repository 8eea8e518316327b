//! Raw dense kernels behind the tape ops.
//!
//! Matrix products dominate the runtime, so they come in a sequential and a
//! rayon variant. Dispatch picks the parallel path when the `parallel`
//! feature is on and the product is large enough to amortize the fork.
//! Every output element is produced by exactly one thread with a fixed
//! inner-loop order, so results are bit-identical across thread counts and
//! across the two paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Flop-count proxy above which the parallel path pays off.
pub const PAR_THRESHOLD: usize = 1 << 16;

fn row_nn(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, n: usize) {
    out_row.fill(0.0);
    for (l, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[l * n..(l + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += av * bv;
        }
    }
}

fn row_nt(out_row: &mut [f64], a_row: &[f64], bt: &[f64], k: usize, n: usize) {
    for (j, o) in out_row.iter_mut().enumerate().take(n) {
        let b_row = &bt[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
            acc += av * bv;
        }
        *o = acc;
    }
}

/// out[m,n] = a[m,k] @ b[k,n], sequential.
pub fn matmul_nn_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..m {
        row_nn(&mut out[r * n..(r + 1) * n], &a[r * k..(r + 1) * k], b, k, n);
    }
}

/// out[m,n] = a[m,k] @ b[k,n], parallel over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_nn_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| row_nn(out_row, a_row, b, k, n));
}

/// out[m,n] = a[m,k] @ b[n,k]^T, sequential.
pub fn matmul_nt_seq(a: &[f64], bt: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..m {
        row_nt(&mut out[r * n..(r + 1) * n], &a[r * k..(r + 1) * k], bt, k, n);
    }
}

/// out[m,n] = a[m,k] @ b[n,k]^T, parallel over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], bt: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| row_nt(out_row, a_row, bt, k, n));
}

/// out[k,n] = a[m,k]^T @ b[m,n], sequential.
///
/// Output element (l, j) accumulates over the m rows in index order, so the
/// summation order is fixed per element here too.
pub fn matmul_tn_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for l in 0..k {
        let out_row = &mut out[l * n..(l + 1) * n];
        out_row.fill(0.0);
        for r in 0..m {
            let av = a[r * k + l];
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[k,n] = a[m,k]^T @ b[m,n], parallel over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_mut(n).enumerate().for_each(|(l, out_row)| {
        out_row.fill(0.0);
        for r in 0..m {
            let av = a[r * k + l];
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    });
}

macro_rules! dispatch {
    ($seq:ident, $par:ident, $a:expr, $b:expr, $out:expr, $m:expr, $k:expr, $n:expr) => {{
        #[cfg(feature = "parallel")]
        {
            if $m * $k * $n >= PAR_THRESHOLD {
                return $par($a, $b, $out, $m, $k, $n);
            }
        }
        $seq($a, $b, $out, $m, $k, $n)
    }};
}

pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(matmul_nn_seq, matmul_nn_par, a, b, out, m, k, n)
}

pub fn matmul_nt(a: &[f64], bt: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(matmul_nt_seq, matmul_nt_par, a, bt, out, m, k, n)
}

pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch!(matmul_tn_seq, matmul_tn_par, a, b, out, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[r * n + j] += a[r * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn variants_agree_with_naive() {
        let mut rng = Rng::new(42);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 4, 5), (8, 8, 8), (17, 9, 13)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.range(-2.0, 2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.range(-2.0, 2.0)).collect();
            let reference = naive(&a, &b, m, k, n);

            let mut out = vec![0.0; m * n];
            matmul_nn_seq(&a, &b, &mut out, m, k, n);
            for (x, y) in out.iter().zip(reference.iter()) {
                assert!((x - y).abs() < 1e-12);
            }

            // b transposed layout
            let mut bt = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b[l * n + j];
                }
            }
            let mut out_nt = vec![0.0; m * n];
            matmul_nt_seq(&a, &bt, &mut out_nt, m, k, n);
            for (x, y) in out_nt.iter().zip(reference.iter()) {
                assert!((x - y).abs() < 1e-12);
            }

            // a transposed: compute a^T @ a_any via naive on explicit transpose
            let mut at = vec![0.0; m * k];
            for r in 0..m {
                for l in 0..k {
                    at[l * m + r] = a[r * k + l];
                }
            }
            let c: Vec<f64> = (0..m * n).map(|_| rng.range(-2.0, 2.0)).collect();
            let ref_tn = naive(&at, &c, k, m, n);
            let mut out_tn = vec![0.0; k * n];
            matmul_tn_seq(&a, &c, &mut out_tn, m, k, n);
            for (x, y) in out_tn.iter().zip(ref_tn.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_paths_are_bit_identical() {
        let mut rng = Rng::new(7);
        let (m, k, n) = (33, 47, 29);
        let a: Vec<f64> = (0..m * k).map(|_| rng.range(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.range(-2.0, 2.0)).collect();
        let bt: Vec<f64> = {
            let mut t = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    t[j * k + l] = b[l * n + j];
                }
            }
            t
        };

        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        matmul_nn_seq(&a, &b, &mut s, m, k, n);
        matmul_nn_par(&a, &b, &mut p, m, k, n);
        assert!(s.iter().zip(p.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        matmul_nt_seq(&a, &bt, &mut s, m, k, n);
        matmul_nt_par(&a, &bt, &mut p, m, k, n);
        assert!(s.iter().zip(p.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut stn = vec![0.0; k * n];
        let mut ptn = vec![0.0; k * n];
        let c: Vec<f64> = (0..m * n).map(|_| rng.range(-2.0, 2.0)).collect();
        matmul_tn_seq(&a, &c, &mut stn, m, k, n);
        matmul_tn_par(&a, &c, &mut ptn, m, k, n);
        assert!(stn.iter().zip(ptn.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
