//! State and action feature vectors and the shifted random Fourier map used
//! as the reward feature map.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;

use crate::linalg;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub d_s: usize,
    pub d_a: usize,
    pub q: usize,
    pub bandwidth: f64,
    /// Optional `(state, action)` whose feature vectors are set to zero.
    pub pin_zero: Option<(usize, usize)>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d_s: 5,
            d_a: 3,
            q: 16,
            bandwidth: 1.0,
            pin_zero: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSystem {
    pub n_states: usize,
    pub n_actions: usize,
    pub d_s: usize,
    pub d_a: usize,
    /// Row-major `n_states x d_s`.
    pub psi_s: Vec<f64>,
    /// Row-major `n_actions x d_a`.
    pub psi_a: Vec<f64>,
    pub q: usize,
    /// Row-major `q x (d_s + d_a)`.
    pub g_weights: Vec<f64>,
    pub g_phase: Vec<f64>,
    /// Lipschitz constant of the reward feature map.
    pub rho_g: f64,
    /// Cached `g(psi_s, psi_a)` for every pair, row-major `n_pairs x q`.
    pub table: Vec<f64>,
}

pub fn build_features(n_states: usize, n_actions: usize, cfg: &FeatureConfig, seed: u64) -> Result<FeatureSystem> {
    if cfg.d_s == 0 || cfg.d_a == 0 || cfg.q == 0 || n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidArgument("feature dimensions must be positive"));
    }
    if !(cfg.bandwidth > 0.0) {
        return Err(Error::InvalidArgument("bandwidth must be positive"));
    }
    let mut r = rng::stream(seed, Purpose::Features, 0);
    let mut psi_s = Vec::with_capacity(n_states * cfg.d_s);
    for _ in 0..n_states {
        psi_s.extend(rng::unit_ball(&mut r, cfg.d_s));
    }
    let mut psi_a = Vec::with_capacity(n_actions * cfg.d_a);
    for _ in 0..n_actions {
        psi_a.extend(rng::unit_ball(&mut r, cfg.d_a));
    }
    if let Some((s, a)) = cfg.pin_zero {
        if s >= n_states {
            return Err(Error::IndexOutOfRange {
                what: "pinned state",
                index: s,
                len: n_states,
            });
        }
        if a >= n_actions {
            return Err(Error::IndexOutOfRange {
                what: "pinned action",
                index: a,
                len: n_actions,
            });
        }
        psi_s[s * cfg.d_s..(s + 1) * cfg.d_s].fill(0.0);
        psi_a[a * cfg.d_a..(a + 1) * cfg.d_a].fill(0.0);
    }
    let dim = cfg.d_s + cfg.d_a;
    let g_weights: Vec<f64> = (0..cfg.q * dim).map(|_| rng::normal(&mut r) / cfg.bandwidth).collect();
    let g_phase: Vec<f64> = (0..cfg.q)
        .map(|_| r.random::<f64>() * 2.0 * core::f64::consts::PI)
        .collect();
    FeatureSystem::new(
        n_states, n_actions, cfg.d_s, cfg.d_a, psi_s, psi_a, cfg.q, g_weights, g_phase,
    )
}

impl FeatureSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        d_s: usize,
        d_a: usize,
        psi_s: Vec<f64>,
        psi_a: Vec<f64>,
        q: usize,
        g_weights: Vec<f64>,
        g_phase: Vec<f64>,
    ) -> Result<Self> {
        let check = |what, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { what, expected, found })
            }
        };
        check("psi_s", n_states * d_s, psi_s.len())?;
        check("psi_a", n_actions * d_a, psi_a.len())?;
        check("g_weights", q * (d_s + d_a), g_weights.len())?;
        check("g_phase", q, g_phase.len())?;
        for row in psi_s.chunks(d_s).chain(psi_a.chunks(d_a)) {
            if linalg::norm(row) > 1.0 + 1e-12 {
                return Err(Error::InvalidArgument("feature vector norm exceeds 1"));
            }
        }
        let mut fs = FeatureSystem {
            n_states,
            n_actions,
            d_s,
            d_a,
            psi_s,
            psi_a,
            q,
            g_weights,
            g_phase,
            rho_g: 0.0,
            table: Vec::new(),
        };
        fs.rho_g = fs.rho_g_spectral();
        let mut table = Vec::with_capacity(n_states * n_actions * q);
        for s in 0..n_states {
            for a in 0..n_actions {
                let x = fs.joint(s, a);
                table.extend(fs.g_hat(&x));
            }
        }
        fs.table = table;
        Ok(fs)
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn input_dim(&self) -> usize {
        self.d_s + self.d_a
    }

    pub fn psi_s(&self, s: usize) -> &[f64] {
        &self.psi_s[s * self.d_s..(s + 1) * self.d_s]
    }

    pub fn psi_a(&self, a: usize) -> &[f64] {
        &self.psi_a[a * self.d_a..(a + 1) * self.d_a]
    }

    /// Concatenation `(psi_s, psi_a)`.
    pub fn joint(&self, s: usize, a: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(self.psi_s(s));
        x.extend_from_slice(self.psi_a(a));
        x
    }

    /// Shifted map `sqrt(2/q) [cos(Wx + b) - cos(b)]` at an arbitrary input.
    pub fn g_hat(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.input_dim();
        let c = libm::sqrt(2.0 / self.q as f64);
        (0..self.q)
            .map(|j| {
                let w = &self.g_weights[j * dim..(j + 1) * dim];
                let b = self.g_phase[j];
                c * (libm::cos(linalg::dot(w, x) + b) - libm::cos(b))
            })
            .collect()
    }

    /// Features of pair index `x = s * n_actions + a`, no bounds check.
    pub fn pair(&self, x: usize) -> &[f64] {
        &self.table[x * self.q..(x + 1) * self.q]
    }

    pub fn reward_features(&self, s: usize, a: usize) -> Result<&[f64]> {
        if s >= self.n_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                len: self.n_states,
            });
        }
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                len: self.n_actions,
            });
        }
        Ok(self.pair(s * self.n_actions + a))
    }

    /// `sum_x rho(x) g(x)`
    pub fn feature_expectation(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        for (x, &w) in rho.iter().enumerate() {
            if w != 0.0 {
                linalg::axpy(w, self.pair(x), &mut out);
            }
        }
        out
    }

    /// `sqrt(2/q) ||W||_F`
    pub fn rho_g_frobenius(&self) -> f64 {
        libm::sqrt(2.0 / self.q as f64) * linalg::norm(&self.g_weights)
    }

    /// `sqrt(2/q) ||W||_2`. The Jacobian of the map is
    /// `-sqrt(2/q) diag(sin(Wx + b)) W`, so this is a global Lipschitz
    /// constant and never exceeds the Frobenius version.
    pub fn rho_g_spectral(&self) -> f64 {
        let w = DMatrix::from_row_slice(self.q, self.input_dim(), &self.g_weights);
        let smax = w.singular_values().max();
        f64::min(libm::sqrt(2.0 / self.q as f64) * smax, self.rho_g_frobenius())
    }

    /// Largest observed `||g(x) - g(x')|| / ||x - x'||` over `n` random
    /// pairs: half drawn independently from the product of unit balls, half
    /// as small perturbations. A lower bound on the true constant.
    pub fn lipschitz_audit(&self, n: usize, seed: u64) -> f64 {
        let mut r = rng::stream(seed, Purpose::Probe, 0);
        let mut worst: f64 = 0.0;
        let draw = |r: &mut rng::StreamRng| {
            let mut x = rng::unit_ball(r, self.d_s);
            x.extend(rng::unit_ball(r, self.d_a));
            x
        };
        for i in 0..n {
            let x = draw(&mut r);
            let y = if i % 2 == 0 {
                draw(&mut r)
            } else {
                let mut y = x.clone();
                linalg::axpy(1e-4, &rng::sphere(&mut r, x.len(), 1.0), &mut y);
                y
            };
            let d = linalg::dist(&x, &y);
            if d > 0.0 {
                worst = worst.max(linalg::dist(&self.g_hat(&x), &self.g_hat(&y)) / d);
            }
        }
        worst
    }

    pub fn fingerprint(&self) -> u64 {
        let mut floats = Vec::with_capacity(self.psi_s.len() + self.psi_a.len() + self.g_weights.len() + self.q);
        floats.extend_from_slice(&self.psi_s);
        floats.extend_from_slice(&self.psi_a);
        floats.extend_from_slice(&self.g_weights);
        floats.extend_from_slice(&self.g_phase);
        linalg::fingerprint(
            &[
                self.n_states as u64,
                self.n_actions as u64,
                self.d_s as u64,
                self.d_a as u64,
                self.q as u64,
            ],
            &floats,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> FeatureSystem {
        let cfg = FeatureConfig {
            pin_zero: Some((0, 0)),
            ..FeatureConfig::default()
        };
        build_features(5, 3, &cfg, 42).unwrap()
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let fs = fixture();
        let z = fs.g_hat(&vec![0.0; fs.input_dim()]);
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(fs.reward_features(0, 0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_channel_definition() {
        let w = vec![0.3, -1.2, 0.7];
        let b = 1.1;
        let fs = FeatureSystem::new(1, 1, 2, 1, vec![0.6, 0.0], vec![0.5], 1, w.clone(), vec![b]).unwrap();
        let x = [0.6, 0.0, 0.5];
        let expect = libm::sqrt(2.0) * (libm::cos(linalg::dot(&w, &x) + b) - libm::cos(b));
        assert_eq!(fs.reward_features(0, 0).unwrap()[0], expect);
    }

    #[test]
    fn audit_below_bound() {
        let fs = fixture();
        let audit = fs.lipschitz_audit(10_000, 3);
        assert!(audit <= fs.rho_g, "{audit} > {}", fs.rho_g);
        assert!(fs.rho_g <= fs.rho_g_frobenius());
    }

    #[test]
    fn pair_features_bounded() {
        let fs = fixture();
        for x in 0..fs.n_pairs() {
            assert!(linalg::norm(fs.pair(x)) <= libm::sqrt(2.0) * fs.rho_g + 1e-12);
        }
    }

    #[test]
    fn deterministic_and_checked() {
        let fs = fixture();
        let a = fs.reward_features(2, 1).unwrap().to_vec();
        let b = fs.reward_features(2, 1).unwrap().to_vec();
        assert_eq!(a, b);
        assert_eq!(
            build_features(5, 3, &FeatureConfig::default(), 42)
                .unwrap()
                .fingerprint(),
            build_features(5, 3, &FeatureConfig::default(), 42)
                .unwrap()
                .fingerprint()
        );
        assert!(matches!(fs.reward_features(5, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(fs.reward_features(0, 3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn expectation_of_point_mass_and_mixture() {
        let fs = fixture();
        let mut rho = vec![0.0; 15];
        rho[7] = 1.0;
        assert_eq!(fs.feature_expectation(&rho), fs.pair(7).to_vec());
        rho[7] = 0.5;
        rho[3] = 0.5;
        let fe = fs.feature_expectation(&rho);
        for j in 0..fs.q {
            assert!((fe[j] - 0.5 * (fs.pair(7)[j] + fs.pair(3)[j])).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn expectation_is_linear(seed in 0u64..1000, alpha in 0.0f64..1.0) {
            let fs = fixture();
            let mut r = rng::stream(seed, Purpose::Test, 0);
            let mut dist = || {
                let v: Vec<f64> = (0..15).map(|_| r.random::<f64>()).collect();
                let z: f64 = v.iter().sum();
                v.into_iter().map(|x| x / z).collect::<Vec<_>>()
            };
            let (p1, p2) = (dist(), dist());
            let mix: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let lhs = fs.feature_expectation(&mix);
            let (f1, f2) = (fs.feature_expectation(&p1), fs.feature_expectation(&p2));
            for j in 0..fs.q {
                prop_assert!((lhs[j] - (alpha * f1[j] + (1.0 - alpha) * f2[j])).abs() <= 1e-12);
            }
        }

        #[test]
        fn psi_in_unit_ball(seed in 0u64..1000) {
            let fs = build_features(4, 2, &FeatureConfig::default(), seed).unwrap();
            for s in 0..4 { prop_assert!(linalg::norm(fs.psi_s(s)) <= 1.0 + 1e-12); }
            for a in 0..2 { prop_assert!(linalg::norm(fs.psi_a(a)) <= 1.0 + 1e-12); }
        }
    }
}
