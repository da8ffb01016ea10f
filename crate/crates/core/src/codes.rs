//! Sparse spatial codes under the variational-dropout posterior
//! q₁ = N(μ, ρ²) with dropout coefficient α = ρ²/μ², plus the static offset.
//!
//! Sparsity comes from the improper log-uniform prior: entries whose α grows
//! large carry no information and are reported as exactly zero once
//! log α exceeds the pruning threshold.  Training never hard-zeroes anything;
//! pruning is an evaluation-time mask.

use crate::kron::SeparableKernel;
use crate::tensor::{SeededRng, Tensor};
use crate::{MgpaError, Result};

/// Guard added to μ² when forming α so exact zeros give α = ∞ (pruned)
/// instead of NaN.
pub const MU_SQ_FLOOR: f64 = 1e-300;

/// Variational code state for all sources, row-major (N_s × F).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCodeSet {
    pub n_sources: usize,
    pub f: usize,
    pub mu: Tensor,
    pub log_rho2: Tensor,
}

impl SpatialCodeSet {
    /// μ ~ N(0, 10⁻²), ρ² = 19·μ² — the paper's 95% initial dropout rate.
    pub fn init(n_sources: usize, f: usize, rng: &mut SeededRng) -> Self {
        let mut mu = Tensor::zeros(&[n_sources, f]);
        rng.fill_normal(mu.data_mut());
        for v in mu.data_mut() {
            *v *= 0.1;
        }
        let mut log_rho2 = Tensor::zeros(&[n_sources, f]);
        for (lr, &m) in log_rho2.data_mut().iter_mut().zip(mu.data()) {
            *lr = (19.0 * m * m + 1e-12).ln();
        }
        SpatialCodeSet {
            n_sources,
            f,
            mu,
            log_rho2,
        }
    }

    pub fn mu_row(&self, n: usize) -> &[f64] {
        &self.mu.data()[n * self.f..(n + 1) * self.f]
    }

    pub fn log_rho2_row(&self, n: usize) -> &[f64] {
        &self.log_rho2.data()[n * self.f..(n + 1) * self.f]
    }

    /// log α per entry (flat, row-major).
    pub fn log_alpha(&self) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.log_rho2.data())
            .map(|(&m, &lr)| lr - (m * m + MU_SQ_FLOOR).ln())
            .collect()
    }
}

/// Static per-voxel offset Z.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticOffset {
    pub z: Tensor,
}

impl StaticOffset {
    /// Initialized to the voxelwise data mean; unpenalized thereafter.
    pub fn from_data_mean(y: &Tensor) -> Result<Self> {
        let (p, f) = y.dims2()?;
        let mut z = Tensor::zeros(&[f]);
        for row in 0..p {
            for (zf, &v) in z.data_mut().iter_mut().zip(&y.data()[row * f..(row + 1) * f]) {
                *zf += v;
            }
        }
        for v in z.data_mut() {
            *v /= p as f64;
        }
        Ok(StaticOffset { z })
    }
}

/// Reparameterized draw of all codes: entrywise N(μ, ρ²).
pub fn sample_codes(sc: &SpatialCodeSet, rng: &mut SeededRng) -> Tensor {
    let mut b = sc.mu.clone();
    for (v, &lr) in b.data_mut().iter_mut().zip(sc.log_rho2.data()) {
        *v += (0.5 * lr).exp() * rng.normal();
    }
    b
}

/// Keep-mask at the given log α threshold.  Boundary entries (log α equal to
/// the threshold) are kept; exact-zero means have α = ∞ and are always
/// pruned.  Row-major (N_s × F), true = keep.
pub fn prune_mask(sc: &SpatialCodeSet, log_alpha_threshold: f64) -> Vec<bool> {
    sc.log_alpha()
        .iter()
        .zip(sc.mu.data())
        .map(|(&la, &mu)| mu != 0.0 && la <= log_alpha_threshold)
        .collect()
}

/// Posterior-mean codes with pruned entries zeroed.
pub fn pruned_codes(sc: &SpatialCodeSet, log_alpha_threshold: f64) -> Tensor {
    let mask = prune_mask(sc, log_alpha_threshold);
    let mut out = sc.mu.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    out
}

/// Row n of the output is kernels[n] applied to codes row n.
pub fn assemble_maps(codes: &Tensor, kernels: &[SeparableKernel]) -> Result<Tensor> {
    let (n_s, f) = codes.dims2()?;
    if kernels.len() != n_s {
        return Err(MgpaError::contract(format!(
            "{} kernels for {} sources",
            kernels.len(),
            n_s
        )));
    }
    let mut out = Tensor::zeros(&[n_s, f]);
    for n in 0..n_s {
        let row = kernels[n].apply(&codes.data()[n * f..(n + 1) * f])?;
        out.data_mut()[n * f..(n + 1) * f].copy_from_slice(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::{build_kernel, dense_operator};

    #[test]
    fn init_alpha_is_19() {
        let sc = SpatialCodeSet::init(2, 100, &mut SeededRng::new(3));
        for la in sc.log_alpha() {
            assert!((la - 19f64.ln()).abs() < 1e-6, "log alpha {}", la);
        }
    }

    #[test]
    fn sample_zero_variance_returns_mu() {
        let mut sc = SpatialCodeSet::init(1, 16, &mut SeededRng::new(4));
        for v in sc.log_rho2.data_mut() {
            *v = -700.0;
        }
        let b = sample_codes(&sc, &mut SeededRng::new(9));
        for (x, y) in b.data().iter().zip(sc.mu.data()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn sample_moment_check() {
        let n = 1_000_000;
        let mut sc = SpatialCodeSet {
            n_sources: 1,
            f: n,
            mu: Tensor::zeros(&[1, n]),
            log_rho2: Tensor::zeros(&[1, n]),
        };
        sc.log_rho2.data_mut().fill(0.0); // rho2 = 1
        let b = sample_codes(&sc, &mut SeededRng::new(17));
        let mean: f64 = b.data().iter().sum::<f64>() / n as f64;
        let var: f64 = b.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4e-3);
        assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn sample_determinism() {
        let sc = SpatialCodeSet::init(3, 64, &mut SeededRng::new(5));
        let a = sample_codes(&sc, &mut SeededRng::new(31));
        let b = sample_codes(&sc, &mut SeededRng::new(31));
        assert_eq!(a, b);
    }

    #[test]
    fn prune_boundary_kept() {
        // α exactly 19 at threshold log 19 stays (pruned only strictly above)
        let mut sc = SpatialCodeSet::init(1, 3, &mut SeededRng::new(1));
        sc.mu.data_mut().copy_from_slice(&[0.5, 0.5, 0.5]);
        sc.log_rho2.data_mut().copy_from_slice(&[
            (19.0f64 * 0.25).ln(),      // alpha = 19: boundary
            (19.0f64 * 0.25).ln() + 0.1, // just above: pruned
            (19.0f64 * 0.25).ln() - 0.1, // just below: kept
        ]);
        let mask = prune_mask(&sc, 19f64.ln());
        assert_eq!(mask, vec![true, false, true]);
    }

    #[test]
    fn zero_mu_always_pruned() {
        let mut sc = SpatialCodeSet::init(1, 2, &mut SeededRng::new(1));
        sc.mu.data_mut().copy_from_slice(&[0.0, 1.0]);
        sc.log_rho2.data_mut().copy_from_slice(&[-500.0, 0.0]);
        let mask = prune_mask(&sc, 1e9);
        assert!(!mask[0], "exact zero mean must prune at any finite threshold");
        assert!(mask[1]);
    }

    #[test]
    fn all_below_threshold_all_kept() {
        let sc = SpatialCodeSet::init(2, 32, &mut SeededRng::new(2));
        let mask = prune_mask(&sc, 19f64.ln() + 1.0);
        assert!(mask.iter().all(|&k| k));
    }

    #[test]
    fn identity_kernels_pass_codes_through() {
        let k = build_kernel((3, 3, 3), 1e-6, 1.0).unwrap();
        let codes = {
            let mut c = Tensor::zeros(&[2, 27]);
            SeededRng::new(6).fill_normal(c.data_mut());
            c
        };
        let maps = assemble_maps(&codes, &[k.clone(), k]).unwrap();
        for (a, b) in maps.data().iter().zip(codes.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bump_matches_dense_oracle() {
        let k = build_kernel((5, 5, 5), 1.0, 1.0).unwrap();
        let mut codes = Tensor::zeros(&[1, 125]);
        let center = (2 * 5 + 2) * 5 + 2;
        codes.data_mut()[center] = 1.0;
        let maps = assemble_maps(&codes, &[k.clone()]).unwrap();
        let dense = dense_operator(&k);
        for f in 0..125 {
            let want = dense.data()[f * 125 + center];
            assert!((maps.data()[f] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_codes_zero_maps() {
        let k = build_kernel((4, 4, 4), 1.0, 1.0).unwrap();
        let maps = assemble_maps(&Tensor::zeros(&[1, 64]), &[k]).unwrap();
        assert!(maps.data().iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn assembly_is_linear(seed in 0u64..500, a in -3.0f64..3.0) {
            let k = build_kernel((3, 4, 3), 0.8, 1.0).unwrap();
            let f = 36;
            let mut rng = SeededRng::new(seed);
            let mut b1 = Tensor::zeros(&[1, f]);
            rng.fill_normal(b1.data_mut());
            let mut b2 = Tensor::zeros(&[1, f]);
            rng.fill_normal(b2.data_mut());
            let mut combo = Tensor::zeros(&[1, f]);
            for i in 0..f {
                combo.data_mut()[i] = a * b1.data()[i] + b2.data()[i];
            }
            let m1 = assemble_maps(&b1, std::slice::from_ref(&k)).unwrap();
            let m2 = assemble_maps(&b2, std::slice::from_ref(&k)).unwrap();
            let mc = assemble_maps(&combo, std::slice::from_ref(&k)).unwrap();
            for i in 0..f {
                let want = a * m1.data()[i] + m2.data()[i];
                proptest::prop_assert!((mc.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn offset_from_data_mean() {
        let y = Tensor::new(vec![2, 3], vec![1., 2., 3., 3., 2., 1.]).unwrap();
        let z = StaticOffset::from_data_mean(&y).unwrap();
        assert_eq!(z.z.data(), &[2., 2., 2.]);
    }
}
