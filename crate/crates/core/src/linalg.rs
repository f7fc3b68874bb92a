//! Small dense helpers over `f64` slices plus the two direct solves the
//! oracles need (stationary vector and the augmented Poisson system).

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SVD};

use crate::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(dist_sq(a, b))
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| f64::max(m, libm::fabs(*x)))
}

/// FNV-1a over the bit patterns of a sequence of floats (plus a few
/// integers). Used to tie chains and checkpoints to the parameters that
/// produced them.
pub fn fingerprint(ints: &[u64], floats: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |w: u64| {
        for byte in w.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for &i in ints {
        eat(i);
    }
    for &f in floats {
        eat(f.to_bits());
    }
    h
}

/// Total variation distance between two distributions on a finite set.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| libm::fabs(a - b)).sum::<f64>()
}

/// Row vector times row-major `n x n` matrix.
pub fn vec_mat(v: &[f64], m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &m[i * n..(i + 1) * n];
        for (o, r) in out.iter_mut().zip(row) {
            *o += vi * r;
        }
    }
    out
}

/// Row-major `n x n` matrix times column vector.
pub fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// Row-major product of two `n x n` matrices.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Solves `x^T (I - K) = 0, sum(x) = 1` by LU with the last balance equation
/// replaced by the normalisation row. Used to polish a power-iteration result.
pub fn stationary_direct(kernel: &[f64], n: usize) -> Option<Vec<f64>> {
    // (I - K)^T x = 0
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let k = kernel[j * n + i];
            a[(i, j)] = if i == j { 1.0 - k } else { -k };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x.iter().copied().collect())
}

/// Factorised augmented Poisson system for one chain:
///
/// ```text
/// [ I - K ] Q = [ r - J 1 ]
/// [ rho^T ]     [    0    ]
/// ```
///
/// The SVD is computed once and reused for every right-hand side.
pub struct PoissonSystem {
    n: usize,
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    stationary: Vec<f64>,
}

const RANK_TOL: f64 = 1e-11;

impl PoissonSystem {
    pub fn new(kernel: &[f64], stationary: &[f64]) -> Result<Self> {
        let n = stationary.len();
        if kernel.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "kernel",
                expected: n * n,
                found: kernel.len(),
            });
        }
        let mut a = DMatrix::<f64>::zeros(n + 1, n);
        for i in 0..n {
            for j in 0..n {
                let k = kernel[i * n + j];
                a[(i, j)] = if i == j { 1.0 - k } else { -k };
            }
        }
        for j in 0..n {
            a[(n, j)] = stationary[j];
        }
        let svd = SVD::new(a, true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > RANK_TOL * f64::max(smax, 1.0)) {
            return Err(Error::SingularSystem);
        }
        Ok(PoissonSystem {
            n,
            svd,
            stationary: stationary.to_vec(),
        })
    }

    /// Returns `(Q, J)` for a reward vector over the chain's states.
    pub fn solve(&self, reward: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.n;
        if reward.len() != n {
            return Err(Error::DimensionMismatch {
                what: "reward",
                expected: n,
                found: reward.len(),
            });
        }
        // Offsets from the first entry, so a constant reward gives an
        // exactly zero right-hand side and an exactly zero Q.
        let r0 = reward[0];
        let shift: f64 = self.stationary.iter().zip(reward).map(|(p, r)| p * (r - r0)).sum();
        let j = r0 + shift;
        let mut b = DVector::<f64>::zeros(n + 1);
        for i in 0..n {
            b[i] = (reward[i] - r0) - shift;
        }
        let x = self.svd.solve(&b, 0.0).map_err(|_| Error::SingularSystem)?;
        Ok((x.iter().copied().collect(), j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_is_half_l1() {
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((tv_distance(&[0.2, 0.3, 0.5], &[0.3, 0.3, 0.4]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mat_helpers_agree() {
        let m = [0.5, 0.5, 0.2, 0.8];
        let v = [1.0, 0.0];
        assert_eq!(vec_mat(&v, &m, 2), [0.5, 0.5]);
        assert_eq!(mat_vec(&m, &[1.0, 1.0], 2), [1.0, 1.0]);
        let m2 = mat_mul(&m, &m, 2);
        assert!((m2[0] - 0.35).abs() < 1e-15);
        assert!((m2[3] - 0.74).abs() < 1e-15);
    }

    #[test]
    fn direct_stationary_two_state() {
        // p = 0.2, q = 0.3 -> rho = (q, p) / (p + q)
        let k = [0.8, 0.2, 0.3, 0.7];
        let x = stationary_direct(&k, 2).unwrap();
        assert!((x[0] - 0.6).abs() < 1e-14);
        assert!((x[1] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn reducible_chain_is_singular() {
        let k = [1.0, 0.0, 0.0, 1.0];
        let rho = [0.5, 0.5];
        assert!(matches!(PoissonSystem::new(&k, &rho), Err(Error::SingularSystem)));
    }
}
