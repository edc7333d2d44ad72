// Dense row-major matrix kernels. Each output row is produced by the same
// loop regardless of how rows are distributed across workers.

use rayon::prelude::*;

use crate::parallel;

const PAR_THRESHOLD: usize = 1 << 18;

fn for_rows<F>(out: &mut [f64], n: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if work >= PAR_THRESHOLD && parallel::pool().current_num_threads() > 1 {
        parallel::pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
        });
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// c[m,n] = a[m,k] · b[k,n]
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_rows(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    });
    c
}

/// c[m,n] = a[m,k] · b[n,k]ᵀ
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_rows(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, c) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *c = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    c
}

/// c[m,n] = a[k,m]ᵀ · b[k,n]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_rows(&mut c, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    });
    c
}
