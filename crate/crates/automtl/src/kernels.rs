//! Low-level dense kernels shared by the tape and the embedding store.
//!
//! Every kernel has a sequential form and, with the `parallel` feature, a
//! rayon form that partitions work by output rows. Both forms accumulate
//! each output element in the same order, so results are bitwise identical
//! and runs stay reproducible whichever path executes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

/// Minimum multiply-add count before a kernel is worth splitting across threads.
pub const PAR_WORK_THRESHOLD: usize = 32 * 1024;

#[cfg(feature = "parallel")]
static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch for the rayon paths. A no-op without the `parallel` feature.
/// Used by the benches to compare both paths in a single binary.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL_ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

#[cfg(feature = "parallel")]
fn row_chunk(rows: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    (rows / (threads * 4)).max(1)
}

/// C[m x n] = A[m x k] . B[k x n], sequential.
pub fn matmul_nn_seq(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// C[m x k] = A[m x n] . B[k x n]^T, sequential.
pub fn matmul_nt_seq(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + p] = acc;
        }
    }
}

/// C[k x n] = A[m x k]^T . G[m x n], sequential. Partitioned by output row p.
pub fn matmul_tn_seq(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for p in 0..k {
        let out_row = &mut out[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn split_rows<'a>(out: &'a mut [f64], rows: usize, row_len: usize) -> Vec<(usize, &'a mut [f64])> {
    let chunk = row_chunk(rows);
    out.chunks_mut(chunk * row_len)
        .enumerate()
        .map(move |(idx, sl)| (idx * chunk, sl))
        .collect()
}

pub fn matmul_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if parallel_enabled() && m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        split_rows(out, m, n).into_par_iter().for_each(|(row0, sl)| {
            let rows = sl.len() / n;
            matmul_nn_seq(sl, &a[row0 * k..(row0 + rows) * k], b, rows, k, n);
        });
        return;
    }
    matmul_nn_seq(out, a, b, m, k, n);
}

pub fn matmul_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    #[cfg(feature = "parallel")]
    if parallel_enabled() && m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        split_rows(out, m, k).into_par_iter().for_each(|(row0, sl)| {
            let rows = sl.len() / k;
            matmul_nt_seq(sl, &a[row0 * n..(row0 + rows) * n], b, rows, n, k);
        });
        return;
    }
    matmul_nt_seq(out, a, b, m, n, k);
}

pub fn matmul_tn(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if parallel_enabled() && m * k * n >= PAR_WORK_THRESHOLD && k > 1 {
        // Partition by output rows p; every task scans all m input rows but
        // touches a disjoint column range of A, so no output aliasing.
        let chunk = row_chunk(k);
        out.chunks_mut(chunk * n)
            .enumerate()
            .collect::<Vec<_>>()
            .into_par_iter()
            .for_each(|(idx, sl)| {
                let p0 = idx * chunk;
                let cols = sl.len() / n;
                sl.fill(0.0);
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for dp in 0..cols {
                        let aip = a[i * k + p0 + dp];
                        if aip == 0.0 {
                            continue;
                        }
                        let out_row = &mut sl[dp * n..(dp + 1) * n];
                        for (o, gv) in out_row.iter_mut().zip(g_row) {
                            *o += aip * gv;
                        }
                    }
                }
            });
        return;
    }
    matmul_tn_seq(out, a, g, m, k, n);
}

/// Dot products of `query` against each row of `vectors`, divided by the
/// per-row norms. Rows with a norm below `norm_eps` score negative infinity.
pub fn cosine_scan_seq(
    sims: &mut [f64],
    query: &[f64],
    query_norm: f64,
    vectors: &[f64],
    norms: &[f64],
    dim: usize,
    norm_eps: f64,
) {
    for (i, sim) in sims.iter_mut().enumerate() {
        if norms[i] < norm_eps {
            *sim = f64::NEG_INFINITY;
            continue;
        }
        let row = &vectors[i * dim..(i + 1) * dim];
        let mut dot = 0.0;
        for (q, v) in query.iter().zip(row) {
            dot += q * v;
        }
        *sim = dot / (query_norm * norms[i]);
    }
}

pub fn cosine_scan(
    sims: &mut [f64],
    query: &[f64],
    query_norm: f64,
    vectors: &[f64],
    norms: &[f64],
    dim: usize,
    norm_eps: f64,
) {
    let count = sims.len();
    #[cfg(feature = "parallel")]
    if parallel_enabled() && count * dim >= PAR_WORK_THRESHOLD {
        let chunk = row_chunk(count);
        sims.par_chunks_mut(chunk).enumerate().for_each(|(idx, sl)| {
            let row0 = idx * chunk;
            let rows = sl.len();
            cosine_scan_seq(
                sl,
                query,
                query_norm,
                &vectors[row0 * dim..(row0 + rows) * dim],
                &norms[row0..row0 + rows],
                dim,
                norm_eps,
            );
        });
        return;
    }
    let _ = count;
    cosine_scan_seq(sims, query, query_norm, vectors, norms, dim, norm_eps);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_nn(&mut out, &a, &b, m, k, n);
        let want = naive_nn(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_and_tn_match_explicit_transpose() {
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).sin()).collect();

        // bt[n x k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut nt = vec![0.0; m * k];
        matmul_nt(&mut nt, &g, &b, m, n, k);
        let want = naive_nn(&g, &bt, m, n, k);
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; k * n];
        matmul_tn(&mut tn, &a, &g, m, k, n);
        let want = naive_nn(&at, &g, k, m, n);
        for (x, y) in tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_path_is_bitwise_identical() {
        let (m, k, n) = (64, 48, 52);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.029).cos()).collect();
        let mut seq = vec![0.0; m * n];
        matmul_nn_seq(&mut seq, &a, &b, m, k, n);
        let mut par = vec![0.0; m * n];
        matmul_nn(&mut par, &a, &b, m, k, n);
        assert_eq!(seq, par);

        let mut tn_seq = vec![0.0; k * n];
        matmul_tn_seq(&mut tn_seq, &a, &seq, m, k, n);
        let mut tn_par = vec![0.0; k * n];
        matmul_tn(&mut tn_par, &a, &seq, m, k, n);
        assert_eq!(tn_seq, tn_par);
    }
}
