//! Largest singular value by power iteration, and the rescaling that pins it to 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::TensorRole;

const START_SEED: u64 = 0x5eed;
const MIN_ITERS: usize = 10;
const MAX_ITERS: usize = 1000;
const REL_TOL: f64 = 1e-12;

/// Top singular value of a row-major `rows × cols` matrix.
///
/// Iterates `v ← Aᵀ A v` from a fixed pseudo-random start for at least
/// ten steps and until the estimate stops moving.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(a.len(), rows * cols);
    if a.iter().all(|&x| x == 0.0) || rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for it in 0..MAX_ITERS {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = a[r * cols..(r + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let next = normalize(&mut u);
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in u.iter().enumerate() {
            for (vc, x) in v.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
                *vc += x * ur;
            }
        }
        let back = normalize(&mut v);
        let estimate = next.max(back);
        let done = it + 1 >= MIN_ITERS && (estimate - sigma).abs() <= REL_TOL * estimate;
        sigma = estimate;
        if done || sigma == 0.0 {
            break;
        }
    }
    sigma
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flattens a weight tensor into the matrix whose spectral norm is constrained:
/// rows are output channels.
pub fn as_matrix(role: TensorRole, shape: &[usize], data: &[f64]) -> (Vec<f64>, usize, usize) {
    match (role, shape) {
        (TensorRole::Deconv, [cin, cout, kh, kw]) => {
            let k = kh * kw;
            let mut m = vec![0.0; data.len()];
            for i in 0..*cin {
                for o in 0..*cout {
                    for t in 0..k {
                        m[o * cin * k + i * k + t] = data[(i * cout + o) * k + t];
                    }
                }
            }
            (m, *cout, cin * k)
        }
        (_, [rows, rest @ ..]) => (data.to_vec(), *rows, rest.iter().product()),
        _ => (data.to_vec(), 1, data.len()),
    }
}

/// Spectral norm of a named weight tensor.
pub fn tensor_spectral_norm(role: TensorRole, shape: &[usize], data: &[f64]) -> f64 {
    let (m, r, c) = as_matrix(role, shape, data);
    spectral_norm(&m, r, c)
}

/// Divides `data` by its spectral norm; zero matrices are left alone.
pub fn normalize_in_place(role: TensorRole, shape: &[usize], data: &mut [f64]) -> f64 {
    let sigma = tensor_spectral_norm(role, shape, data);
    if sigma > 0.0 {
        data.iter_mut().for_each(|x| *x /= sigma);
    }
    sigma
}
