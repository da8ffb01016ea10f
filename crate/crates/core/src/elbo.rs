//! Evidence lower bound and its analytic gradients.
//!
//! Five terms: Gaussian data fit, monotonicity constraint, and KL
//! regularizers for codes (variational-dropout, Molchanov sigmoid
//! approximation), spectral frequencies, and feature weights:
//!
//!   L = data + constraint − kl_codes − kl_omega − kl_w
//!
//! Two estimators share one implementation:
//!
//! * `Sampled` — reparameterized draws of codes and frequencies, one joint
//!   sample per call (standard SVI; average over `n_mc` via
//!   [`elbo_estimate`]).  Feature weights are collapsed analytically in the
//!   data term (their posterior is Gaussian-conjugate given everything else),
//!   which removes the dominant variance source; the sampled weights only
//!   enter the constraint.
//! * `Exact` — posterior means everywhere plus closed-form second-moment
//!   corrections, so repeated calls are deterministic.  Used by the
//!   optimizer's structural-move comparisons, where MC noise would swamp the
//!   margins being compared.
//!
//! Gradients are hand-derived (no tape): the model is small enough that the
//! chain rule stays manageable, and it keeps the hot loops allocation-free.
//! Finite-difference tests pin every term.
//!
//! One stop-gradient: the 64-point constraint grid spans the fitted time
//! range, and the range endpoints are treated as constants when
//! differentiating w.r.t. the time shifts δ.

use crate::codes::{SpatialCodeSet, MU_SQ_FLOOR};
use crate::kron::SeparableKernel;
use crate::temporal::{softplus, TemporalSourceSet, CONSTRAINT_GRID_POINTS};
use crate::tensor::{matmul_acc_into, matmul_into, SeededRng, Tensor};
use crate::{MgpaError, Result};

/// Molchanov et al. sigmoid-approximation constants for the
/// variational-dropout KL.
pub const K1: f64 = 0.63576;
pub const K2: f64 = 1.87320;
pub const K3: f64 = 1.48695;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which Ω-prior KL expression to use.  The source formula multiplies the
/// posterior moments by the length-scale l (equivalent to a prior variance of
/// 1/l); the textbook form divides (prior variance l).  Both are genuine KLs
/// and nonnegative; they differ in which direction l regularizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKlForm {
    /// ½ Σ [p²·l + r²·l − 1 − log(p²·l)]  (as printed)
    #[default]
    Printed,
    /// ½ Σ [p²/l + r²/l − 1 + log l − log p²]
    Textbook,
}

/// Full variational state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub codes: SpatialCodeSet,
    pub temporal: TemporalSourceSet,
    /// static offset Z (length F)
    pub z: Tensor,
    /// per-sample time shifts δ (length P)
    pub delta: Vec<f64>,
    /// log observation noise std
    pub log_sigma: f64,
}

impl ModelState {
    pub fn init(n_sources: usize, f: usize, n_rf: usize, p: usize, rng: &mut SeededRng) -> Self {
        ModelState {
            codes: SpatialCodeSet::init(n_sources, f, rng),
            temporal: TemporalSourceSet::init(n_sources, n_rf, rng),
            z: Tensor::zeros(&[f]),
            delta: vec![0.0; p],
            log_sigma: 0.0,
        }
    }

    pub fn n_sources(&self) -> usize {
        self.codes.n_sources
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes.n_sources != self.temporal.n_sources {
            return Err(MgpaError::shape(format!(
                "codes have {} sources, temporal set {}",
                self.codes.n_sources, self.temporal.n_sources
            )));
        }
        if self.z.len() != self.codes.f {
            return Err(MgpaError::shape(format!(
                "offset length {} != F {}",
                self.z.len(),
                self.codes.f
            )));
        }
        self.temporal.validate()?;
        if !self.log_sigma.is_finite() {
            return Err(MgpaError::NonFinite {
                term: "log_sigma".into(),
                what: "model state".into(),
            });
        }
        Ok(())
    }
}

/// Gradient of the ELBO w.r.t. every trainable block, same shapes as the
/// state.  Inactive sources receive exact zeros.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub mu: Tensor,
    pub log_rho2: Tensor,
    pub r: Tensor,
    pub log_p2: Tensor,
    pub m: Tensor,
    pub log_s2: Tensor,
    pub log_l: Vec<f64>,
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
    pub log_sigma: f64,
}

impl ModelGrads {
    pub fn zeros(n_sources: usize, f: usize, n_rf: usize, p: usize) -> Self {
        ModelGrads {
            mu: Tensor::zeros(&[n_sources, f]),
            log_rho2: Tensor::zeros(&[n_sources, f]),
            r: Tensor::zeros(&[n_sources, n_rf]),
            log_p2: Tensor::zeros(&[n_sources, n_rf]),
            m: Tensor::zeros(&[n_sources, 2 * n_rf]),
            log_s2: Tensor::zeros(&[n_sources, 2 * n_rf]),
            log_l: vec![0.0; n_sources],
            z: vec![0.0; f],
            delta: vec![0.0; p],
            log_sigma: 0.0,
        }
    }

    /// Fail naming the first non-finite block, so a diverged fit reports
    /// which term blew up rather than a bare NaN.
    pub fn assert_finite(&self) -> Result<()> {
        let blocks: [(&str, &[f64]); 9] = [
            ("grad mu", self.mu.data()),
            ("grad log_rho2", self.log_rho2.data()),
            ("grad r", self.r.data()),
            ("grad log_p2", self.log_p2.data()),
            ("grad m", self.m.data()),
            ("grad log_s2", self.log_s2.data()),
            ("grad log_l", &self.log_l),
            ("grad z", &self.z),
            ("grad delta", &self.delta),
        ];
        for (name, data) in blocks {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(MgpaError::NonFinite {
                    term: name.into(),
                    what: "elbo gradient".into(),
                });
            }
        }
        if !self.log_sigma.is_finite() {
            return Err(MgpaError::NonFinite {
                term: "grad log_sigma".into(),
                what: "elbo gradient".into(),
            });
        }
        Ok(())
    }
}

/// Per-term ELBO record.  `total` always equals
/// `data + constraint − kl_codes − kl_omega − kl_w`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElboBreakdown {
    pub data: f64,
    pub constraint: f64,
    pub kl_codes: f64,
    pub kl_omega: f64,
    pub kl_w: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn assert_finite(&self) -> Result<()> {
        for (name, v) in [
            ("data", self.data),
            ("constraint", self.constraint),
            ("kl_codes", self.kl_codes),
            ("kl_omega", self.kl_omega),
            ("kl_w", self.kl_w),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(MgpaError::NonFinite {
                    term: name.into(),
                    what: "elbo term".into(),
                });
            }
        }
        Ok(())
    }
}

/// Everything the ELBO needs besides the state.
pub struct ElboParams<'a> {
    /// observations, P×F
    pub y: &'a Tensor,
    /// nominal acquisition times, length P
    pub tau: &'a [f64],
    /// one kernel per source
    pub kernels: &'a [SeparableKernel],
    /// constraint sharpness γ > 0
    pub gamma: f64,
    /// which sources participate; inactive ones are excluded from the
    /// generative sum, the constraint, and every KL
    pub active: &'a [bool],
    pub omega_form: OmegaKlForm,
}

/// Standard-normal noise for one joint reparameterized draw.  Kept separate
/// from evaluation so the same draw can be replayed (finite-difference
/// checks, common-random-number comparisons).
#[derive(Debug, Clone)]
pub struct ElboDraws {
    pub eps_b: Tensor,
    pub eps_o: Tensor,
    pub eps_w: Tensor,
}

impl ElboDraws {
    pub fn draw(n_sources: usize, f: usize, n_rf: usize, rng: &mut SeededRng) -> Self {
        let mut eps_b = Tensor::zeros(&[n_sources, f]);
        rng.fill_normal(eps_b.data_mut());
        let mut eps_o = Tensor::zeros(&[n_sources, n_rf]);
        rng.fill_normal(eps_o.data_mut());
        let mut eps_w = Tensor::zeros(&[n_sources, 2 * n_rf]);
        rng.fill_normal(eps_w.data_mut());
        ElboDraws { eps_b, eps_o, eps_w }
    }
}

/// Estimator choice for one evaluation.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Exact,
    Sampled(&'a ElboDraws),
}

/// ELBO value only.
pub fn elbo(state: &ModelState, params: &ElboParams, mode: Mode) -> Result<ElboBreakdown> {
    elbo_impl(state, params, mode, None)
}

/// ELBO value and gradients in one pass.
pub fn elbo_with_grads(
    state: &ModelState,
    params: &ElboParams,
    mode: Mode,
) -> Result<(ElboBreakdown, ModelGrads)> {
    let mut grads = ModelGrads::zeros(
        state.codes.n_sources,
        state.codes.f,
        state.temporal.n_rf,
        state.delta.len(),
    );
    let bd = elbo_impl(state, params, mode, Some(&mut grads))?;
    Ok((bd, grads))
}

/// Monte-Carlo ELBO: average of `n_mc` independent joint draws.
/// `n_mc = 1` is the training estimator; reported values use 64.
pub fn elbo_estimate(
    state: &ModelState,
    params: &ElboParams,
    n_mc: usize,
    rng: &mut SeededRng,
) -> Result<ElboBreakdown> {
    if n_mc == 0 {
        return Err(MgpaError::contract("elbo_estimate needs n_mc >= 1"));
    }
    let mut acc = ElboBreakdown {
        data: 0.0,
        constraint: 0.0,
        kl_codes: 0.0,
        kl_omega: 0.0,
        kl_w: 0.0,
        total: 0.0,
    };
    for _ in 0..n_mc {
        let draws = ElboDraws::draw(state.codes.n_sources, state.codes.f, state.temporal.n_rf, rng);
        let bd = elbo_impl(state, params, Mode::Sampled(&draws), None)?;
        acc.data += bd.data;
        acc.constraint += bd.constraint;
        acc.kl_codes += bd.kl_codes;
        acc.kl_omega += bd.kl_omega;
        acc.kl_w += bd.kl_w;
        acc.total += bd.total;
    }
    let inv = 1.0 / n_mc as f64;
    acc.data *= inv;
    acc.constraint *= inv;
    acc.kl_codes *= inv;
    acc.kl_omega *= inv;
    acc.kl_w *= inv;
    acc.total *= inv;
    Ok(acc)
}

/// Variational-dropout KL for one entry, as a function of log α.
/// Normalized so KL → 0 as α → ∞ (entry fully dropped).
pub fn kl_codes_entry(log_alpha: f64) -> f64 {
    K1 + 0.5 * softplus(-log_alpha) - K1 * sigmoid(K2 + K3 * log_alpha)
}

/// Code KL summed over all entries of all sources.
pub fn kl_codes(sc: &SpatialCodeSet) -> f64 {
    sc.log_alpha().iter().map(|&la| kl_codes_entry(la)).sum()
}

/// Ω-prior KL summed over all sources, under the chosen form.
pub fn kl_omega(ts: &TemporalSourceSet, form: OmegaKlForm) -> f64 {
    let j = ts.n_rf;
    let mut acc = 0.0;
    for n in 0..ts.n_sources {
        let ll = ts.log_l.data()[n];
        let l = ll.exp();
        for jj in 0..j {
            let idx = n * j + jj;
            let rr = ts.r.data()[idx];
            let lp = ts.log_p2.data()[idx];
            let p2 = lp.exp();
            acc += match form {
                OmegaKlForm::Printed => 0.5 * (p2 * l + rr * rr * l - 1.0 - (lp + ll)),
                OmegaKlForm::Textbook => 0.5 * (p2 / l + rr * rr / l - 1.0 + ll - lp),
            };
        }
    }
    acc
}

/// Weight KL (standard-normal prior) summed over all sources.
pub fn kl_w(ts: &TemporalSourceSet) -> f64 {
    ts.m
        .data()
        .iter()
        .zip(ts.log_s2.data())
        .map(|(&m, &ls)| 0.5 * (ls.exp() + m * m - 1.0 - ls))
        .sum()
}

#[allow(clippy::too_many_lines)]
fn elbo_impl(
    state: &ModelState,
    params: &ElboParams,
    mode: Mode,
    mut grads: Option<&mut ModelGrads>,
) -> Result<ElboBreakdown> {
    state.validate()?;
    let (p_n, f) = params.y.dims2()?;
    let ns = state.codes.n_sources;
    let j = state.temporal.n_rf;
    if f != state.codes.f {
        return Err(MgpaError::shape(format!(
            "data has {} features, codes {}",
            f, state.codes.f
        )));
    }
    if params.tau.len() != p_n || state.delta.len() != p_n {
        return Err(MgpaError::shape(format!(
            "times/shifts ({}, {}) disagree with data rows {}",
            params.tau.len(),
            state.delta.len(),
            p_n
        )));
    }
    if params.kernels.len() != ns || params.active.len() != ns {
        return Err(MgpaError::shape(format!(
            "{} kernels / {} active flags for {} sources",
            params.kernels.len(),
            params.active.len(),
            ns
        )));
    }
    for k in params.kernels {
        if k.f() != f {
            return Err(MgpaError::shape(format!(
                "kernel grid product {} != F {}",
                k.f(),
                f
            )));
        }
    }
    if !(params.gamma > 0.0) {
        return Err(MgpaError::contract(format!(
            "gamma must be positive, got {}",
            params.gamma
        )));
    }

    let act: Vec<usize> = (0..ns).filter(|&n| params.active[n]).collect();
    let na = act.len();
    let exact = matches!(mode, Mode::Exact);
    let draws = match &mode {
        Mode::Exact => None,
        Mode::Sampled(d) => Some(*d),
    };
    if let Some(d) = draws {
        if d.eps_b.shape() != [ns, f] || d.eps_o.shape() != [ns, j] || d.eps_w.shape() != [ns, 2 * j]
        {
            return Err(MgpaError::shape("draw shapes disagree with state"));
        }
    }

    // warped times and the constraint grid (grid bounds are stop-gradient)
    let t: Vec<f64> = params
        .tau
        .iter()
        .zip(&state.delta)
        .map(|(a, b)| a + b)
        .collect();
    let (mut lo, mut hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi - lo < 1e-6 {
        lo -= 0.5;
        hi += 0.5;
    }
    let g_n = CONSTRAINT_GRID_POINTS;
    let ptot = p_n + g_n;
    let mut tc = t.clone();
    for k in 0..g_n {
        tc.push(lo + (hi - lo) * k as f64 / (g_n - 1) as f64);
    }

    let sigma2 = (2.0 * state.log_sigma).exp();

    // per-active-slot parameter rows (sampled or mean)
    let mut b_all = vec![0.0; na * f];
    let mut w_all = vec![0.0; na * j];
    let mut wt_all = vec![0.0; na * 2 * j];
    for (i, &n) in act.iter().enumerate() {
        let mu = state.codes.mu_row(n);
        let lr = state.codes.log_rho2_row(n);
        let bo = &mut b_all[i * f..(i + 1) * f];
        bo.copy_from_slice(mu);
        if let Some(d) = draws {
            let eps = &d.eps_b.data()[n * f..(n + 1) * f];
            for (k, v) in bo.iter_mut().enumerate() {
                *v += (0.5 * lr[k]).exp() * eps[k];
            }
        }
        let rr = state.temporal.r_row(n);
        let wo = &mut w_all[i * j..(i + 1) * j];
        wo.copy_from_slice(rr);
        if let Some(d) = draws {
            let lp = &state.temporal.log_p2.data()[n * j..(n + 1) * j];
            let eps = &d.eps_o.data()[n * j..(n + 1) * j];
            for (k, v) in wo.iter_mut().enumerate() {
                *v += (0.5 * lp[k]).exp() * eps[k];
            }
        }
        let mm = state.temporal.m_row(n);
        let wto = &mut wt_all[i * 2 * j..(i + 1) * 2 * j];
        wto.copy_from_slice(mm);
        if let Some(d) = draws {
            let ls = &state.temporal.log_s2.data()[n * 2 * j..(n + 1) * 2 * j];
            let eps = &d.eps_w.data()[n * 2 * j..(n + 1) * 2 * j];
            for (k, v) in wto.iter_mut().enumerate() {
                *v += (0.5 * ls[k]).exp() * eps[k];
            }
        }
    }

    // maps A = K b per active slot
    let mut a_mat = vec![0.0; na * f];
    for (i, &n) in act.iter().enumerate() {
        let a = params.kernels[n].apply(&b_all[i * f..(i + 1) * f])?;
        a_mat[i * f..(i + 1) * f].copy_from_slice(&a);
    }
    let sum_a2: Vec<f64> = (0..na)
        .map(|i| a_mat[i * f..(i + 1) * f].iter().map(|v| v * v).sum())
        .collect();

    // trig tables over all constraint times (first P rows double as the
    // data-term angles)
    let mut cos_t = vec![0.0; na * ptot * j];
    let mut sin_t = vec![0.0; na * ptot * j];
    for i in 0..na {
        let w = &w_all[i * j..(i + 1) * j];
        for (k, &tk) in tc.iter().enumerate() {
            let base = (i * ptot + k) * j;
            for (jj, &wj) in w.iter().enumerate() {
                let (s, c) = (wj * tk).sin_cos();
                cos_t[base + jj] = c;
                sin_t[base + jj] = s;
            }
        }
    }

    // mean sources S (P×na) under q(W), and the collapsed weight variance
    let mut s_mat = vec![0.0; p_n * na];
    let mut sum_vs = vec![0.0; na];
    let mut sum_s2 = vec![0.0; na];
    for (i, &n) in act.iter().enumerate() {
        let mm = state.temporal.m_row(n);
        let ls = &state.temporal.log_s2.data()[n * 2 * j..(n + 1) * 2 * j];
        for k in 0..p_n {
            let base = (i * ptot + k) * j;
            let mut s_val = 0.0;
            let mut v_val = 0.0;
            for jj in 0..j {
                let c = cos_t[base + jj];
                let s = sin_t[base + jj];
                s_val += c * mm[jj] + s * mm[j + jj];
                v_val += c * c * ls[jj].exp() + s * s * ls[j + jj].exp();
            }
            s_mat[k * na + i] = s_val;
            sum_vs[i] += v_val;
            sum_s2[i] += s_val * s_val;
        }
    }

    // exact-mode code variance mass per slot: Σ_f wsq·ρ²
    let mut var_a = vec![0.0; na];
    let mut wsq_rows: Vec<Vec<f64>> = Vec::new();
    if exact {
        for (i, &n) in act.iter().enumerate() {
            let wsq = params.kernels[n].column_squared_norms();
            let lr = state.codes.log_rho2_row(n);
            var_a[i] = wsq
                .iter()
                .zip(lr)
                .map(|(&ws, &l)| ws * l.exp())
                .sum();
            wsq_rows.push(wsq);
        }
    }

    // residual R = Y − S·A − Z and the data term
    let mut resid = vec![0.0; p_n * f];
    if na > 0 {
        matmul_into(p_n, na, f, &s_mat, false, &a_mat, false, &mut resid);
    }
    let y = params.y.data();
    let z = state.z.data();
    let mut r2 = 0.0;
    for p in 0..p_n {
        let row = &mut resid[p * f..(p + 1) * f];
        for (k, v) in row.iter_mut().enumerate() {
            *v = y[p * f + k] - *v - z[k];
            r2 += *v * *v;
        }
    }
    let mut var_corr = 0.0;
    for i in 0..na {
        var_corr += sum_vs[i] * sum_a2[i];
        if exact {
            var_corr += (sum_s2[i] + sum_vs[i]) * var_a[i];
        }
    }
    let data = -0.5 * (p_n * f) as f64 * (2.0 * std::f64::consts::PI * sigma2).ln()
        - (r2 + var_corr) / (2.0 * sigma2);

    // constraint on S′ at all warped times plus the grid
    let mut dv = vec![0.0; ptot * na];
    let mut constraint = 0.0;
    for i in 0..na {
        let w = &w_all[i * j..(i + 1) * j];
        let wt = &wt_all[i * 2 * j..(i + 1) * 2 * j];
        for k in 0..ptot {
            let base = (i * ptot + k) * j;
            let mut d_val = 0.0;
            for jj in 0..j {
                d_val += w[jj]
                    * (-sin_t[base + jj] * wt[jj] + cos_t[base + jj] * wt[j + jj]);
            }
            dv[k * na + i] = d_val;
            constraint -= softplus(params.gamma * d_val);
        }
    }

    // KL terms over active slots only
    let mut klb = 0.0;
    for &n in &act {
        let mu = state.codes.mu_row(n);
        let lr = state.codes.log_rho2_row(n);
        for k in 0..f {
            let la = lr[k] - (mu[k] * mu[k] + MU_SQ_FLOOR).ln();
            klb += kl_codes_entry(la);
        }
    }
    let mut klo = 0.0;
    let mut klw = 0.0;
    for &n in &act {
        let ll = state.temporal.log_l.data()[n];
        let l = ll.exp();
        for jj in 0..j {
            let idx = n * j + jj;
            let rr = state.temporal.r.data()[idx];
            let lp = state.temporal.log_p2.data()[idx];
            let p2 = lp.exp();
            klo += match params.omega_form {
                OmegaKlForm::Printed => 0.5 * (p2 * l + rr * rr * l - 1.0 - (lp + ll)),
                OmegaKlForm::Textbook => 0.5 * (p2 / l + rr * rr / l - 1.0 + ll - lp),
            };
        }
        for jj in 0..2 * j {
            let idx = n * 2 * j + jj;
            let m = state.temporal.m.data()[idx];
            let ls = state.temporal.log_s2.data()[idx];
            klw += 0.5 * (ls.exp() + m * m - 1.0 - ls);
        }
    }

    let total = data + constraint - klb - klo - klw;
    let breakdown = ElboBreakdown {
        data,
        constraint,
        kl_codes: klb,
        kl_omega: klo,
        kl_w: klw,
        total,
    };

    let g = match grads.as_deref_mut() {
        Some(g) => g,
        None => return Ok(breakdown),
    };

    // ---- gradients ----------------------------------------------------
    // data term, map side: dL/dA = SᵀR/σ² − (ΣVarS/σ²)·A
    let mut g_a = vec![0.0; na * f];
    if na > 0 {
        matmul_acc_into(na, p_n, f, 1.0 / sigma2, &s_mat, true, &resid, false, &mut g_a);
    }
    for i in 0..na {
        let coeff = sum_vs[i] / sigma2;
        for k in 0..f {
            g_a[i * f + k] -= coeff * a_mat[i * f + k];
        }
    }
    // data term, source side: dL/dS = R·Aᵀ/σ² (− varA·S/σ² in exact mode)
    let mut g_s = vec![0.0; p_n * na];
    if na > 0 {
        matmul_acc_into(p_n, f, na, 1.0 / sigma2, &resid, false, &a_mat, true, &mut g_s);
    }
    if exact {
        for p in 0..p_n {
            for i in 0..na {
                g_s[p * na + i] -= var_a[i] / sigma2 * s_mat[p * na + i];
            }
        }
    }

    // codes: pull dL/dA back through the kernel
    for (i, &n) in act.iter().enumerate() {
        let gb = params.kernels[n].apply_adjoint(&g_a[i * f..(i + 1) * f])?;
        let gmu = &mut g.mu.data_mut()[n * f..(n + 1) * f];
        for (k, v) in gb.iter().enumerate() {
            gmu[k] += v;
        }
        if let Some(d) = draws {
            let lr = state.codes.log_rho2_row(n);
            let eps = &d.eps_b.data()[n * f..(n + 1) * f];
            let glr = &mut g.log_rho2.data_mut()[n * f..(n + 1) * f];
            for k in 0..f {
                glr[k] += gb[k] * 0.5 * (0.5 * lr[k]).exp() * eps[k];
            }
        } else {
            // exact: variance enters through varA = wsq·ρ²
            let coeff = -(sum_s2[i] + sum_vs[i]) / (2.0 * sigma2);
            let lr = state.codes.log_rho2_row(n);
            let glr = &mut g.log_rho2.data_mut()[n * f..(n + 1) * f];
            for k in 0..f {
                glr[k] += coeff * wsq_rows[i][k] * lr[k].exp();
            }
        }
    }

    // source/variance path: m, log_s2, and the angle chain into (w, t)
    let mut g_w = vec![0.0; na * j];
    let mut g_t = vec![0.0; p_n];
    for (i, &n) in act.iter().enumerate() {
        let mm = state.temporal.m_row(n);
        let ls = &state.temporal.log_s2.data()[n * 2 * j..(n + 1) * 2 * j];
        let w = &w_all[i * j..(i + 1) * j];
        let g_v = -(sum_a2[i] + if exact { var_a[i] } else { 0.0 }) / (2.0 * sigma2);
        let gm = &mut g.m.data_mut()[n * 2 * j..(n + 1) * 2 * j];
        let gls = &mut g.log_s2.data_mut()[n * 2 * j..(n + 1) * 2 * j];
        for p in 0..p_n {
            let base = (i * ptot + p) * j;
            let gs = g_s[p * na + i];
            for jj in 0..j {
                let c = cos_t[base + jj];
                let s = sin_t[base + jj];
                gm[jj] += gs * c;
                gm[j + jj] += gs * s;
                gls[jj] += g_v * c * c * ls[jj].exp();
                gls[j + jj] += g_v * s * s * ls[j + jj].exp();
                let d_ang = gs * (c * mm[j + jj] - s * mm[jj])
                    + g_v * 2.0 * s * c * (ls[j + jj].exp() - ls[jj].exp());
                g_w[i * j + jj] += d_ang * t[p];
                g_t[p] += d_ang * w[jj];
            }
        }
    }

    // constraint path: wt, w, and t (grid rows carry no δ gradient)
    let mut g_wt = vec![0.0; na * 2 * j];
    for i in 0..na {
        let w = &w_all[i * j..(i + 1) * j];
        let wt = &wt_all[i * 2 * j..(i + 1) * 2 * j];
        for k in 0..ptot {
            let base = (i * ptot + k) * j;
            let g_dv = -params.gamma * sigmoid(params.gamma * dv[k * na + i]);
            let mut g_tk = 0.0;
            for jj in 0..j {
                let c = cos_t[base + jj];
                let s = sin_t[base + jj];
                let deriv = -s * wt[jj] + c * wt[j + jj];
                let curv = -c * wt[jj] - s * wt[j + jj];
                g_wt[i * 2 * j + jj] += g_dv * (-s) * w[jj];
                g_wt[i * 2 * j + j + jj] += g_dv * c * w[jj];
                g_w[i * j + jj] += g_dv * (deriv + w[jj] * tc[k] * curv);
                g_tk += g_dv * w[jj] * w[jj] * curv;
            }
            if k < p_n {
                g_t[k] += g_tk;
            }
        }
    }

    // route the sampled/mean buffers back to parameters
    for (i, &n) in act.iter().enumerate() {
        let gr = &mut g.r.data_mut()[n * j..(n + 1) * j];
        for jj in 0..j {
            gr[jj] += g_w[i * j + jj];
        }
        if let Some(d) = draws {
            let lp = &state.temporal.log_p2.data()[n * j..(n + 1) * j];
            let eps = &d.eps_o.data()[n * j..(n + 1) * j];
            let glp = &mut g.log_p2.data_mut()[n * j..(n + 1) * j];
            for jj in 0..j {
                glp[jj] += g_w[i * j + jj] * 0.5 * (0.5 * lp[jj]).exp() * eps[jj];
            }
        }
        let gm = &mut g.m.data_mut()[n * 2 * j..(n + 1) * 2 * j];
        for jj in 0..2 * j {
            gm[jj] += g_wt[i * 2 * j + jj];
        }
        if let Some(d) = draws {
            let ls = &state.temporal.log_s2.data()[n * 2 * j..(n + 1) * 2 * j];
            let eps = &d.eps_w.data()[n * 2 * j..(n + 1) * 2 * j];
            let gls = &mut g.log_s2.data_mut()[n * 2 * j..(n + 1) * 2 * j];
            for jj in 0..2 * j {
                gls[jj] += g_wt[i * 2 * j + jj] * 0.5 * (0.5 * ls[jj]).exp() * eps[jj];
            }
        }
    }
    g.delta.copy_from_slice(&g_t);

    // offset and noise
    for p in 0..p_n {
        for k in 0..f {
            g.z[k] += resid[p * f + k] / sigma2;
        }
    }
    g.log_sigma = -((p_n * f) as f64) + (r2 + var_corr) / sigma2;

    // KL gradients, active slots only
    for &n in &act {
        // dL/d logα = k1·k3·σ′(k2+k3·la) + ½·σ(−la)   (L carries −KL)
        let mut gla_buf = vec![0.0; f];
        {
            let mu = state.codes.mu_row(n);
            let lr = state.codes.log_rho2_row(n);
            let gmu = &mut g.mu.data_mut()[n * f..(n + 1) * f];
            for k in 0..f {
                let la = lr[k] - (mu[k] * mu[k] + MU_SQ_FLOOR).ln();
                let sz = sigmoid(K2 + K3 * la);
                let gla = K1 * K3 * sz * (1.0 - sz) + 0.5 * sigmoid(-la);
                gla_buf[k] = gla;
                gmu[k] += gla * (-2.0 * mu[k] / (mu[k] * mu[k] + MU_SQ_FLOOR));
            }
        }
        let glr = &mut g.log_rho2.data_mut()[n * f..(n + 1) * f];
        for k in 0..f {
            glr[k] += gla_buf[k];
        }
    }
    for &n in &act {
        let ll = state.temporal.log_l.data()[n];
        let l = ll.exp();
        let mut gll = 0.0;
        for jj in 0..j {
            let idx = n * j + jj;
            let rr = state.temporal.r.data()[idx];
            let p2 = state.temporal.log_p2.data()[idx].exp();
            match params.omega_form {
                OmegaKlForm::Printed => {
                    g.r.data_mut()[idx] += -rr * l;
                    g.log_p2.data_mut()[idx] += -0.5 * (p2 * l - 1.0);
                    gll += -0.5 * (p2 * l + rr * rr * l - 1.0);
                }
                OmegaKlForm::Textbook => {
                    g.r.data_mut()[idx] += -rr / l;
                    g.log_p2.data_mut()[idx] += -0.5 * (p2 / l - 1.0);
                    gll += 0.5 * ((p2 + rr * rr) / l - 1.0);
                }
            }
        }
        g.log_l[n] += gll;
        for jj in 0..2 * j {
            let idx = n * 2 * j + jj;
            let m = state.temporal.m.data()[idx];
            let ls = state.temporal.log_s2.data()[idx];
            g.m.data_mut()[idx] += -m;
            g.log_s2.data_mut()[idx] += -0.5 * (ls.exp() - 1.0);
        }
    }

    Ok(breakdown)
}
