//! Synthetic benchmark harness: sigmoid-source data generation, evaluation
//! metrics (temporal MSE with alignment, windowed SSIM, time-shift R²), and
//! the PCA baseline.

use std::collections::HashSet;

use crate::kron::build_kernel;
use crate::tensor::{matmul_into, SeededRng, Tensor};
use crate::{MgpaError, Result};

/// One ground-truth source: sigmoid offset, spatial scale, code density.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub offset: f64,
    pub lambda: f64,
    pub density: f64,
}

/// Benchmark generator settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub grid: (usize, usize, usize),
    pub n_times: usize,
    pub t_range: (f64, f64),
    pub sources: Vec<SourceSpec>,
    /// noise std relative to signal RMS (the paper leaves σ unstated)
    pub noise_rel: f64,
    /// time-reordering mode: repeat images per time point and withhold the
    /// time labels from the fitter
    pub shuffle: bool,
    pub images_per_timepoint: (u32, u32),
    pub seed: u64,
}

impl SynthSpec {
    /// The separation benchmark: 30³ grid, 50 times in [0, 0.7], two sigmoid
    /// sources at λ = 2 and 1, 2% code density, 5% relative noise.
    pub fn paper_separation(seed: u64) -> Self {
        SynthSpec {
            grid: (30, 30, 30),
            n_times: 50,
            t_range: (0.0, 0.7),
            sources: vec![
                SourceSpec { offset: 0.2, lambda: 2.0, density: 0.02 },
                SourceSpec { offset: 0.5, lambda: 1.0, density: 0.02 },
            ],
            noise_rel: 0.05,
            shuffle: false,
            images_per_timepoint: (1, 10),
            seed,
        }
    }

    /// The time-reordering benchmark: same sources, 1–10 images per time
    /// point, labels withheld.
    pub fn paper_shuffle(seed: u64) -> Self {
        SynthSpec {
            shuffle: true,
            ..SynthSpec::paper_separation(seed)
        }
    }

    pub fn f(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.0 == 0 || self.grid.1 == 0 || self.grid.2 == 0 {
            return Err(MgpaError::contract("empty grid axis"));
        }
        if self.n_times < 2 {
            return Err(MgpaError::contract("need at least 2 time points"));
        }
        if !(self.t_range.0 < self.t_range.1) {
            return Err(MgpaError::contract(format!(
                "t_range lo {} must be < hi {}",
                self.t_range.0, self.t_range.1
            )));
        }
        if self.sources.is_empty() {
            return Err(MgpaError::contract("no sources specified"));
        }
        for s in &self.sources {
            if !(s.density > 0.0 && s.density <= 1.0) {
                return Err(MgpaError::contract(format!(
                    "density {} outside (0, 1]",
                    s.density
                )));
            }
            if !(s.lambda > 0.0) {
                return Err(MgpaError::contract("lambda must be positive"));
            }
        }
        if !(self.noise_rel >= 0.0) {
            return Err(MgpaError::contract("negative noise level"));
        }
        let (lo, hi) = self.images_per_timepoint;
        if lo == 0 || lo > hi {
            return Err(MgpaError::contract(format!(
                "images_per_timepoint ({}, {}) must satisfy 1 <= min <= max",
                lo, hi
            )));
        }
        Ok(())
    }
}

/// Generated dataset plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    /// observations, P×F
    pub y: Tensor,
    /// true acquisition time per image (nondecreasing)
    pub t_true: Vec<f64>,
    /// true temporal sources at t_true, P×K
    pub s_true: Tensor,
    /// true spatial maps, K×F
    pub a_true: Tensor,
    /// true sparse codes, K×F
    pub codes_true: Tensor,
    /// absolute noise std applied
    pub sigma_abs: f64,
}

/// Y_p = S̃(t_p)·Ã + ε with sigmoid sources and kernel-smoothed sparse maps.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let f = spec.f();
    let k_n = spec.sources.len();
    let mut rng = SeededRng::new(spec.seed);

    let (lo, hi) = spec.t_range;
    let mut t0: Vec<f64> = (0..spec.n_times)
        .map(|_| lo + (hi - lo) * rng.uniform())
        .collect();
    t0.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_true: Vec<f64> = if spec.shuffle {
        let (rl, rh) = spec.images_per_timepoint;
        let mut t = Vec::new();
        for &tv in &t0 {
            let reps = rl + rng.below((rh - rl + 1) as usize) as u32;
            for _ in 0..reps {
                t.push(tv);
            }
        }
        t
    } else {
        t0
    };
    let p = t_true.len();

    let mut s_true = Tensor::zeros(&[p, k_n]);
    for (pi, &t) in t_true.iter().enumerate() {
        for (ki, src) in spec.sources.iter().enumerate() {
            s_true.data_mut()[pi * k_n + ki] = 1.0 / (1.0 + (-(t - src.offset)).exp());
        }
    }

    let mut codes_true = Tensor::zeros(&[k_n, f]);
    let mut a_true = Tensor::zeros(&[k_n, f]);
    for (ki, src) in spec.sources.iter().enumerate() {
        let n_nz = ((src.density * f as f64) as usize).max(1);
        let mut chosen = HashSet::new();
        while chosen.len() < n_nz {
            chosen.insert(rng.below(f));
        }
        // iterate in index order so the draw count, not set order, fixes values
        let mut idx: Vec<usize> = chosen.into_iter().collect();
        idx.sort_unstable();
        for i in idx {
            codes_true.data_mut()[ki * f + i] = rng.normal().abs();
        }
        let kernel = build_kernel(spec.grid, src.lambda, 1.0)?;
        let a = kernel.apply(&codes_true.data()[ki * f..(ki + 1) * f])?;
        a_true.data_mut()[ki * f..(ki + 1) * f].copy_from_slice(&a);
    }

    let mut y = Tensor::zeros(&[p, f]);
    matmul_into(
        p,
        k_n,
        f,
        s_true.data(),
        false,
        a_true.data(),
        false,
        y.data_mut(),
    );
    let s_rms = (y.data().iter().map(|v| v * v).sum::<f64>() / (p * f) as f64).sqrt();
    let sigma_abs = spec.noise_rel * s_rms;
    if sigma_abs > 0.0 {
        for v in y.data_mut() {
            *v += sigma_abs * rng.normal();
        }
    }

    Ok(SynthData {
        y,
        t_true,
        s_true,
        a_true,
        codes_true,
        sigma_abs,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

/// Greedy correspondence between estimated and true sources by absolute
/// correlation of their columns.  Returns, per truth source, the matched
/// estimate index.  Shared by the temporal and spatial metrics so both score
/// the same assignment.
pub fn match_sources(est: &Tensor, truth: &Tensor) -> Result<Vec<usize>> {
    let (p, ke) = est.dims2()?;
    let (p2, kt) = truth.dims2()?;
    if p != p2 {
        return Err(MgpaError::shape(format!(
            "est has {} rows, truth {}",
            p, p2
        )));
    }
    if ke < kt {
        return Err(MgpaError::Evaluation(format!(
            "{} estimated sources cannot cover {} true sources",
            ke, kt
        )));
    }
    let col = |t: &Tensor, k: usize, kk: usize| -> Vec<f64> {
        (0..p).map(|pi| t.data()[pi * kk + k]).collect()
    };
    let mut pairs = Vec::new();
    for i in 0..ke {
        let ci = col(est, i, ke);
        for k in 0..kt {
            let ck = col(truth, k, kt);
            pairs.push((pearson(&ci, &ck).abs(), i, k));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used_est = vec![false; ke];
    let mut assign = vec![usize::MAX; kt];
    for (_, i, k) in pairs {
        if !used_est[i] && assign[k] == usize::MAX {
            used_est[i] = true;
            assign[k] = i;
        }
    }
    Ok(assign)
}

/// Mean squared error between temporal sources.  With `align`, sources are
/// greedily matched by |correlation| and each matched estimate is mapped
/// through its least-squares affine fit onto the truth first (absorbing the
/// sign/scale/offset ambiguity of the factorization); without it, columns are
/// compared as given.
pub fn temporal_mse(est: &Tensor, truth: &Tensor, align: bool) -> Result<f64> {
    let (p, ke) = est.dims2()?;
    let (p2, kt) = truth.dims2()?;
    if !align {
        if p != p2 || ke != kt {
            return Err(MgpaError::shape(format!(
                "unaligned comparison needs equal shapes, got {}x{} vs {}x{}",
                p, ke, p2, kt
            )));
        }
        let mse = est
            .data()
            .iter()
            .zip(truth.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (p * ke) as f64;
        return Ok(mse);
    }
    let assign = match_sources(est, truth)?;
    let mut total = 0.0;
    for (k, &i) in assign.iter().enumerate() {
        let e: Vec<f64> = (0..p).map(|pi| est.data()[pi * ke + i]).collect();
        let t: Vec<f64> = (0..p).map(|pi| truth.data()[pi * kt + k]).collect();
        // least squares for t ≈ a·e + b
        let n = p as f64;
        let me = e.iter().sum::<f64>() / n;
        let mt = t.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var = 0.0;
        for (x, y) in e.iter().zip(&t) {
            cov += (x - me) * (y - mt);
            var += (x - me) * (x - me);
        }
        let a = if var > 0.0 { cov / var } else { 0.0 };
        let b = mt - a * me;
        total += e
            .iter()
            .zip(&t)
            .map(|(x, y)| (a * x + b - y) * (a * x + b - y))
            .sum::<f64>()
            / n;
    }
    Ok(total / assign.len() as f64)
}

const SSIM_WINDOW: usize = 7;

fn gauss_window() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian smoothing along all three axes.
fn smooth_valid(vol: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let w = gauss_window();
    let (dz, dy, dx) = dims;
    let ox = dx - SSIM_WINDOW + 1;
    let mut a = vec![0.0; dz * dy * ox];
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..ox {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    acc += wk * vol[(z * dy + y) * dx + x + k];
                }
                a[(z * dy + y) * ox + x] = acc;
            }
        }
    }
    let oy = dy - SSIM_WINDOW + 1;
    let mut b = vec![0.0; dz * oy * ox];
    for z in 0..dz {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    acc += wk * a[(z * dy + y + k) * ox + x];
                }
                b[(z * oy + y) * ox + x] = acc;
            }
        }
    }
    let oz = dz - SSIM_WINDOW + 1;
    let mut c = vec![0.0; oz * oy * ox];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    acc += wk * b[((z + k) * oy + y) * ox + x];
                }
                c[(z * oy + y) * ox + x] = acc;
            }
        }
    }
    c
}

fn normalize01(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Mean local SSIM over a 7³ Gaussian-weighted window (σ = 1.5), valid
/// (interior) window positions only.  Both maps are min-max normalized to
/// [0, 1] first, so the stabilizers use L = 1: C₁ = 10⁻⁴, C₂ = 9·10⁻⁴.
pub fn spatial_ssim(est: &[f64], truth: &[f64], dims: (usize, usize, usize)) -> Result<f64> {
    let f = dims.0 * dims.1 * dims.2;
    if est.len() != f || truth.len() != f {
        return Err(MgpaError::shape(format!(
            "map lengths {} / {} != grid product {}",
            est.len(),
            truth.len(),
            f
        )));
    }
    if dims.0 < SSIM_WINDOW || dims.1 < SSIM_WINDOW || dims.2 < SSIM_WINDOW {
        return Err(MgpaError::contract(format!(
            "grid {:?} smaller than the {}³ SSIM window",
            dims, SSIM_WINDOW
        )));
    }
    let truth_range = {
        let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    if truth_range <= 0.0 && est == truth {
        return Ok(1.0);
    }
    let x = normalize01(est);
    let y = normalize01(truth);
    let (c1, c2) = (1e-4, 9e-4);
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = smooth_valid(&x, dims);
    let my = smooth_valid(&y, dims);
    let mx2 = smooth_valid(&x2, dims);
    let my2 = smooth_valid(&y2, dims);
    let mxy = smooth_valid(&xy, dims);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let vx = mx2[i] - mx[i] * mx[i];
        let vy = my2[i] - my[i] * my[i];
        let cxy = mxy[i] - mx[i] * my[i];
        acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
            / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// R² of the OLS regression t_true ~ a·δ + b.  Degenerate inputs (constant δ
/// or constant t) score 0.
pub fn timeshift_r2(delta_est: &[f64], t_true: &[f64]) -> Result<f64> {
    if delta_est.len() != t_true.len() {
        return Err(MgpaError::shape(format!(
            "delta has {} entries, times {}",
            delta_est.len(),
            t_true.len()
        )));
    }
    if delta_est.len() < 3 {
        return Err(MgpaError::contract("need at least 3 points for R²"));
    }
    let n = delta_est.len() as f64;
    let md = delta_est.iter().sum::<f64>() / n;
    let mt = t_true.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vd = 0.0;
    let mut vt = 0.0;
    for (d, t) in delta_est.iter().zip(t_true) {
        cov += (d - md) * (t - mt);
        vd += (d - md) * (d - md);
        vt += (t - mt) * (t - mt);
    }
    if vd <= 0.0 || vt <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov * cov / (vd * vt))
}

/// Top-k PCA of the row-centered data (the mean image is removed).  Returns
/// (scores U·Σ as P×k, components Vᵀ as k×F), computed through the P×P Gram
/// matrix since P ≪ F here.
pub fn pca_baseline(y: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let (p, f) = y.dims2()?;
    if k == 0 || k > p.min(f) {
        return Err(MgpaError::contract(format!(
            "k = {} outside 1..=min(P={}, F={})",
            k, p, f
        )));
    }
    let mut yc = y.clone();
    for c in 0..f {
        let mean: f64 = (0..p).map(|r| y.data()[r * f + c]).sum::<f64>() / p as f64;
        for r in 0..p {
            yc.data_mut()[r * f + c] -= mean;
        }
    }
    let mut gram = vec![0.0; p * p];
    matmul_into(p, f, p, yc.data(), false, yc.data(), true, &mut gram);
    let gm = nalgebra::DMatrix::from_row_slice(p, p, &gram);
    let eig = nalgebra::SymmetricEigen::new(gm);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut scores = Tensor::zeros(&[p, k]);
    let mut comps = Tensor::zeros(&[k, f]);
    for (ki, &ei) in order.iter().take(k).enumerate() {
        let s = eig.eigenvalues[ei].max(0.0).sqrt();
        let u = eig.eigenvectors.column(ei);
        for r in 0..p {
            scores.data_mut()[r * k + ki] = u[r] * s;
        }
        if s > 1e-12 {
            // component = uᵀ·Yc / s
            for c in 0..f {
                let mut acc = 0.0;
                for r in 0..p {
                    acc += u[r] * yc.data()[r * f + c];
                }
                comps.data_mut()[ki * f + c] = acc / s;
            }
        }
    }
    Ok((scores, comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            grid: (8, 8, 8),
            n_times: 12,
            t_range: (0.0, 0.7),
            sources: vec![
                SourceSpec { offset: 0.2, lambda: 1.5, density: 0.02 },
                SourceSpec { offset: 0.5, lambda: 0.8, density: 0.02 },
            ],
            noise_rel: 0.05,
            shuffle: false,
            images_per_timepoint: (1, 10),
            seed,
        }
    }

    #[test]
    fn rank_one_noiseless_rows_are_bump_multiples() {
        let spec = SynthSpec {
            grid: (5, 5, 5),
            n_times: 6,
            t_range: (0.0, 0.7),
            // density chosen so exactly one voxel is nonzero
            sources: vec![SourceSpec { offset: 0.3, lambda: 1.0, density: 0.008 }],
            noise_rel: 0.0,
            shuffle: false,
            images_per_timepoint: (1, 10),
            seed: 4,
        };
        let d = generate(&spec).unwrap();
        let nz = d.codes_true.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, 1);
        for pi in 0..6 {
            let s = d.s_true.data()[pi];
            for c in 0..125 {
                let want = s * d.a_true.data()[c];
                assert!((d.y.data()[pi * 125 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinism_under_seed() {
        let a = generate(&small_spec(7)).unwrap();
        let b = generate(&small_spec(7)).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.t_true, b.t_true);
        let c = generate(&small_spec(8)).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn noise_matches_requested_level() {
        let spec = small_spec(11);
        let clean = generate(&SynthSpec { noise_rel: 0.0, ..spec.clone() }).unwrap();
        let noisy = generate(&spec).unwrap();
        let n = clean.y.len();
        let resid_var: f64 = clean
            .y
            .data()
            .iter()
            .zip(noisy.y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
        let ratio = resid_var.sqrt() / noisy.sigma_abs;
        assert!((ratio - 1.0).abs() < 0.05, "noise std off by {}", ratio);
    }

    #[test]
    fn shuffle_repeats_within_bounds() {
        let spec = SynthSpec { shuffle: true, ..small_spec(3) };
        let d = generate(&spec).unwrap();
        let p = d.t_true.len();
        assert!(p >= spec.n_times && p <= 10 * spec.n_times);
        // nondecreasing times, and at least one time repeated with high odds
        for w in d.t_true.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(p > spec.n_times, "seed 3 should produce some repeats");
        assert_eq!(d.y.shape()[0], p);
    }

    #[test]
    fn sigma_zero_reproduces_generative_model_exactly() {
        let spec = SynthSpec { noise_rel: 0.0, ..small_spec(5) };
        let d = generate(&spec).unwrap();
        let p = d.t_true.len();
        let f = spec.f();
        let mut recon = vec![0.0; p * f];
        matmul_into(p, 2, f, d.s_true.data(), false, d.a_true.data(), false, &mut recon);
        for (a, b) in recon.iter().zip(d.y.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn temporal_mse_hand_cases() {
        let truth = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(temporal_mse(&truth, &truth, false).unwrap(), 0.0);
        let shifted = Tensor::new(vec![4, 1], vec![1.1, 2.1, 3.1, 4.1]).unwrap();
        let mse = temporal_mse(&shifted, &truth, false).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
        // alignment absorbs a sign flip
        let flipped = Tensor::new(vec![4, 1], vec![-1.0, -2.0, -3.0, -4.0]).unwrap();
        assert!(temporal_mse(&flipped, &truth, true).unwrap() < 1e-20);
    }

    #[test]
    fn temporal_mse_matches_permuted_sources() {
        let truth = Tensor::new(
            vec![5, 2],
            vec![0.0, 1.0, 0.1, 0.8, 0.25, 0.6, 0.4, 0.35, 0.6, 0.1],
        )
        .unwrap();
        // estimate has the two sources swapped and rescaled
        let est = Tensor::new(
            vec![5, 2],
            vec![2.0, 0.0, 1.6, 0.2, 1.2, 0.5, 0.7, 0.8, 0.2, 1.2],
        )
        .unwrap();
        let mse = temporal_mse(&est, &truth, true).unwrap();
        assert!(mse < 1e-18, "aligned mse {}", mse);
    }

    #[test]
    fn temporal_mse_too_few_estimates_rejected() {
        let truth = Tensor::zeros(&[4, 2]);
        let est = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(temporal_mse(&est, &truth, true).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let dims = (8, 8, 8);
        let mut rng = SeededRng::new(9);
        let v: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
        let s = spatial_ssim(&v, &v, dims).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "self-ssim {}", s);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(spatial_ssim(&neg, &v, dims).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_naive_windowed_reference() {
        // independent direct-window implementation as the oracle
        let dims = (9, 9, 9);
        let f = 729;
        let mut rng = SeededRng::new(21);
        let mut truth = vec![0.0; f];
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    let d2 = ((z as f64) - 4.0).powi(2)
                        + ((y as f64) - 4.0).powi(2)
                        + ((x as f64) - 4.0).powi(2);
                    truth[(z * 9 + y) * 9 + x] = (-d2 / 8.0).exp();
                }
            }
        }
        let est: Vec<f64> = truth.iter().map(|v| v + 0.1 * rng.normal()).collect();
        let fast = spatial_ssim(&est, &truth, dims).unwrap();

        let xn = normalize01(&est);
        let yn = normalize01(&truth);
        let w1 = gauss_window();
        let mut acc = 0.0;
        let mut count = 0.0;
        for cz in 0..3 {
            for cy in 0..3 {
                for cx in 0..3 {
                    let (mut mx, mut my, mut mx2, mut my2, mut mxy) = (0., 0., 0., 0., 0.);
                    for iz in 0..7 {
                        for iy in 0..7 {
                            for ix in 0..7 {
                                let w = w1[iz] * w1[iy] * w1[ix];
                                let a = xn[((cz + iz) * 9 + cy + iy) * 9 + cx + ix];
                                let b = yn[((cz + iz) * 9 + cy + iy) * 9 + cx + ix];
                                mx += w * a;
                                my += w * b;
                                mx2 += w * a * a;
                                my2 += w * b * b;
                                mxy += w * a * b;
                            }
                        }
                    }
                    let (vx, vy, cxy) = (mx2 - mx * mx, my2 - my * my, mxy - mx * my);
                    acc += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4))
                        / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                    count += 1.0;
                }
            }
        }
        let naive = acc / count;
        assert!(
            (fast - naive).abs() < 1e-3,
            "separable {} vs direct {}",
            fast,
            naive
        );
        assert!(fast > 0.0 && fast < 1.0);
    }

    #[test]
    fn ssim_zero_range_truth() {
        let dims = (7, 7, 7);
        let z = vec![0.5; 343];
        assert_eq!(spatial_ssim(&z, &z, dims).unwrap(), 1.0);
        let mut rng = SeededRng::new(2);
        let e: Vec<f64> = (0..343).map(|_| rng.normal()).collect();
        let v = spatial_ssim(&e, &z, dims).unwrap();
        assert!(v.is_finite() && v < 1.0);
    }

    #[test]
    fn r2_hand_cases() {
        let t: Vec<f64> = (0..10).map(|k| 0.1 * k as f64).collect();
        assert!((timeshift_r2(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let affine: Vec<f64> = t.iter().map(|v| 2.0 * v + 5.0).collect();
        assert!((timeshift_r2(&affine, &t).unwrap() - 1.0).abs() < 1e-12);
        let constant = vec![3.0; 10];
        assert_eq!(timeshift_r2(&constant, &t).unwrap(), 0.0);
        assert!(timeshift_r2(&t[..2], &t[..2]).is_err());
        assert!(timeshift_r2(&t, &t[..5]).is_err());
    }

    #[test]
    fn r2_uncorrelated_noise_is_small() {
        let mut rng = SeededRng::new(33);
        let t: Vec<f64> = (0..1000).map(|k| k as f64 / 1000.0).collect();
        let d: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        assert!(timeshift_r2(&d, &t).unwrap() < 0.02);
    }

    #[test]
    fn pca_rank_one_reconstruction() {
        let p = 12;
        let f = 40;
        let mut rng = SeededRng::new(5);
        let u: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
        let mut y = Tensor::zeros(&[p, f]);
        for r in 0..p {
            for c in 0..f {
                y.data_mut()[r * f + c] = u[r] * v[c];
            }
        }
        let (scores, comps) = pca_baseline(&y, 1).unwrap();
        // add the mean image back to the rank-1 reconstruction
        let mut frob_num = 0.0;
        let mut frob_den = 0.0;
        for r in 0..p {
            for c in 0..f {
                let mean: f64 = (0..p).map(|rr| y.data()[rr * f + c]).sum::<f64>() / p as f64;
                let recon = scores.data()[r] * comps.data()[c] + mean;
                frob_num += (recon - y.data()[r * f + c]).powi(2);
                frob_den += y.data()[r * f + c].powi(2);
            }
        }
        assert!((frob_num / frob_den).sqrt() < 1e-8);
    }

    #[test]
    fn pca_components_orthonormal() {
        let mut rng = SeededRng::new(6);
        let mut y = Tensor::zeros(&[15, 60]);
        rng.fill_normal(y.data_mut());
        let (_, comps) = pca_baseline(&y, 5).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..60)
                    .map(|c| comps.data()[a * 60 + c] * comps.data()[b * 60 + c])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({}, {}) dot {}", a, b, dot);
            }
        }
    }

    #[test]
    fn pca_k_bounds() {
        let y = Tensor::zeros(&[5, 8]);
        assert!(pca_baseline(&y, 0).is_err());
        assert!(pca_baseline(&y, 6).is_err());
        assert!(pca_baseline(&y, 5).is_ok());
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(1);
        s.t_range = (0.7, 0.0);
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.sources[0].density = 0.0;
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.images_per_timepoint = (0, 5);
        assert!(s.validate().is_err());
        let mut s = small_spec(1);
        s.images_per_timepoint = (6, 5);
        assert!(s.validate().is_err());
        assert!(small_spec(1).validate().is_ok());
    }
}
