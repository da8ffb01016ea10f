//! Temporal sources as random-feature-expanded GPs, their derivatives, and
//! the per-sample time-warp.
//!
//! Each source n is S_n(t) = φ(Ω_n t)·W_n with φ = (cos, sin), spectral
//! frequencies Ω_n under q₂ = N(r_n, p²_n) against prior N(0, l_n·I), and
//! weights W_n under q₃ = N(m_n, s²_n) against N(0, I).  No 1/√N_rf feature
//! normalization is applied — amplitude lives in W.
//!
//! Monotonicity enters as a soft constraint likelihood on the derivative:
//! decreasing sources (S′ ≤ 0) are favored, following the paper's constraint
//! set rather than its (conflicting) printed sigmoid sign.

use crate::tensor::{SeededRng, Tensor};
use crate::{MgpaError, Result};

/// Variational state of all temporal sources.  Variances are stored in
/// log-space because that is what the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSourceSet {
    pub n_sources: usize,
    pub n_rf: usize,
    /// spectral posterior means, row-major (N_s × N_rf)
    pub r: Tensor,
    /// log spectral posterior variances (N_s × N_rf)
    pub log_p2: Tensor,
    /// weight posterior means (N_s × 2·N_rf), cos block then sin block
    pub m: Tensor,
    /// log weight posterior variances (N_s × 2·N_rf)
    pub log_s2: Tensor,
    /// log prior length-scales, one per source
    pub log_l: Tensor,
}

impl TemporalSourceSet {
    /// Paper-faithful initialization: r ~ N(0,1), m ~ N(0, 0.1²), tight
    /// initial variances p² = s² = 10⁻⁴, l = 1.
    pub fn init(n_sources: usize, n_rf: usize, rng: &mut SeededRng) -> Self {
        let mut r = Tensor::zeros(&[n_sources, n_rf]);
        rng.fill_normal(r.data_mut());
        let mut m = Tensor::zeros(&[n_sources, 2 * n_rf]);
        rng.fill_normal(m.data_mut());
        for v in m.data_mut() {
            *v *= 0.1;
        }
        TemporalSourceSet {
            n_sources,
            n_rf,
            r,
            log_p2: Tensor::full(&[n_sources, n_rf], (1e-4f64).ln()),
            m,
            log_s2: Tensor::full(&[n_sources, 2 * n_rf], (1e-4f64).ln()),
            log_l: Tensor::zeros(&[n_sources]),
        }
    }

    pub fn r_row(&self, n: usize) -> &[f64] {
        &self.r.data()[n * self.n_rf..(n + 1) * self.n_rf]
    }

    pub fn m_row(&self, n: usize) -> &[f64] {
        &self.m.data()[n * 2 * self.n_rf..(n + 1) * 2 * self.n_rf]
    }

    pub fn validate(&self) -> Result<()> {
        for t in [&self.r, &self.log_p2, &self.m, &self.log_s2, &self.log_l] {
            t.assert_finite("temporal parameters")?;
        }
        Ok(())
    }
}

/// Per-sample warped time t_i = τ_i + δ_i.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWarp {
    pub tau: Vec<f64>,
    pub delta: Vec<f64>,
}

impl TimeWarp {
    pub fn new(tau: Vec<f64>) -> Self {
        let delta = vec![0.0; tau.len()];
        TimeWarp { tau, delta }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn warped(&self) -> Vec<f64> {
        self.tau
            .iter()
            .zip(&self.delta)
            .map(|(t, d)| t + d)
            .collect()
    }
}

/// One joint draw of (Ω, W) for all sources.
#[derive(Debug, Clone)]
pub struct TemporalDraw {
    /// (N_s × N_rf)
    pub omega: Tensor,
    /// (N_s × 2·N_rf)
    pub w: Tensor,
}

/// Reparameterized draw from q₂ and q₃.
pub fn draw_temporal(ts: &TemporalSourceSet, rng: &mut SeededRng) -> TemporalDraw {
    let mut omega = ts.r.clone();
    for (o, &lp) in omega.data_mut().iter_mut().zip(ts.log_p2.data()) {
        *o += (0.5 * lp).exp() * rng.normal();
    }
    let mut w = ts.m.clone();
    for (o, &ls) in w.data_mut().iter_mut().zip(ts.log_s2.data()) {
        *o += (0.5 * ls).exp() * rng.normal();
    }
    TemporalDraw { omega, w }
}

/// S[p, n] = φ(Ω_n·t_p)·W_n for given draws at given times.
pub fn sources_at(draw: &TemporalDraw, times: &[f64], n_rf: usize) -> Tensor {
    let n_s = draw.omega.shape()[0];
    let p = times.len();
    let mut s = Tensor::zeros(&[p, n_s]);
    for n in 0..n_s {
        let om = &draw.omega.data()[n * n_rf..(n + 1) * n_rf];
        let w = &draw.w.data()[n * 2 * n_rf..(n + 1) * 2 * n_rf];
        for (pi, &t) in times.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..n_rf {
                let a = om[j] * t;
                acc += a.cos() * w[j] + a.sin() * w[n_rf + j];
            }
            s.data_mut()[pi * n_s + n] = acc;
        }
    }
    s
}

/// S′[p, n] = Ω_n·φ′(Ω_n·t_p)·W_n with φ′ = (−sin, cos), same draws.
pub fn derivatives_at(draw: &TemporalDraw, times: &[f64], n_rf: usize) -> Tensor {
    let n_s = draw.omega.shape()[0];
    let p = times.len();
    let mut s = Tensor::zeros(&[p, n_s]);
    for n in 0..n_s {
        let om = &draw.omega.data()[n * n_rf..(n + 1) * n_rf];
        let w = &draw.w.data()[n * 2 * n_rf..(n + 1) * 2 * n_rf];
        for (pi, &t) in times.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..n_rf {
                let a = om[j] * t;
                acc += om[j] * (-a.sin() * w[j] + a.cos() * w[n_rf + j]);
            }
            s.data_mut()[pi * n_s + n] = acc;
        }
    }
    s
}

/// Draws Ω, W and evaluates S at the warped times (P × N_s).
pub fn sample_sources(
    ts: &TemporalSourceSet,
    warp: &TimeWarp,
    rng: &mut SeededRng,
) -> (Tensor, TemporalDraw) {
    let draw = draw_temporal(ts, rng);
    let s = sources_at(&draw, &warp.warped(), ts.n_rf);
    (s, draw)
}

/// Derivative of the sampled sources under the same draws.
pub fn sample_source_derivatives(
    ts: &TemporalSourceSet,
    warp: &TimeWarp,
    draw: &TemporalDraw,
) -> Tensor {
    derivatives_at(draw, &warp.warped(), ts.n_rf)
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// log σ(x) = −softplus(−x).
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Monotonicity constraint log-likelihood: Σ log σ(−γ·S′) over all entries.
/// Decreasing derivatives contribute ≈ 0, increasing ones are penalized.
pub fn constraint_log_likelihood(derivs: &Tensor, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(MgpaError::contract(format!(
            "gamma must be positive, got {}",
            gamma
        )));
    }
    Ok(derivs
        .data()
        .iter()
        .map(|&d| log_sigmoid(-gamma * d))
        .sum())
}

/// The evaluation grid for the constraint: warped observation times plus a
/// uniform 64-point grid over their range (the constraint must hold for all
/// t, not just at samples).
pub const CONSTRAINT_GRID_POINTS: usize = 64;

pub fn constraint_times(warped: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &t in warped {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !lo.is_finite() || hi - lo < 1e-6 {
        lo -= 0.5;
        hi = lo + 1.0;
    }
    let mut out = warped.to_vec();
    let k = CONSTRAINT_GRID_POINTS;
    for i in 0..k {
        out.push(lo + (hi - lo) * i as f64 / (k - 1) as f64);
    }
    out
}
