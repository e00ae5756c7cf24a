//! Robust hyperspectral model-based iterative reconstruction.
//!
//! Each wavelength channel minimizes
//! `c(f) = 1/2 sum_i beta_T((g_i - [Af]_i) sqrt(W_ii)) + R(f; sigma_f)`
//! where `beta_T` is the Talwar penalty (quadratic below `T`, constant
//! `T^2` above) and `R` is the q-GGMRF prior.
//!
//! The outer loop majorizes `beta_T` with a quadratic surrogate: a
//! measurement whose normalized residual saturates the penalty gets
//! surrogate weight zero, which is the unique quadratic that both
//! dominates the constant branch and touches it at the current point.
//! Saturated measurements therefore drop out of the inner solve
//! entirely; they are exactly the entries reported in the Bragg map.
//! The inner loop runs an accelerated projected gradient method with
//! momentum restart on objective increase, with the step size taken
//! from power iterations on the reweighted normal operator plus the
//! prior's curvature bound.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    BraggMapStack, HyperSinogram, HyperVolume, SinogramKind, COUNT_FLOOR,
};
use crate::projector::{back_project, fbp_reconstruct, forward_project, FbpFilter, SystemModel};
use crate::regularizer::QggmrfPrior;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum RmbirError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("inner solve diverged (outer {outer}, inner {inner}): objective became non-finite")]
    Diverged { outer: usize, inner: usize },
    #[error("channel {index}: {source}")]
    Channel {
        index: usize,
        #[source]
        source: Box<RmbirError>,
    },
    #[error("projector: {0}")]
    Projector(#[from] crate::projector::ProjectorError),
    #[error("{0}")]
    Regularizer(#[from] crate::regularizer::RegularizerError),
}

/// Outlier threshold selection: an explicit `T` in normalized-residual
/// units, or the expected outlier fraction used to pick `T` as a
/// residual quantile after a preliminary unrobust solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    Quantile(f64),
}

#[derive(Debug, Clone)]
pub struct RmbirParams {
    pub threshold: ThresholdMode,
    /// q-GGMRF smoothness, 1/um.
    pub sigma_f: f64,
    pub p: f64,
    pub q: f64,
    pub c: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative cost-decrease stopping tolerance for the outer loop.
    pub tol: f64,
    pub nonneg: bool,
    /// Clamp for counts entering weights and log preprocessing.
    pub count_floor: f64,
    /// Test hook: bypass the power-iteration Lipschitz estimate.
    pub lipschitz_override: Option<f64>,
}

impl Default for RmbirParams {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Quantile(0.1),
            sigma_f: 1.0,
            p: 2.0,
            q: 1.2,
            c: 0.01,
            max_outer: 20,
            max_inner: 30,
            tol: 1e-4,
            nonneg: true,
            count_floor: COUNT_FLOOR,
            lipschitz_override: None,
        }
    }
}

impl RmbirParams {
    pub fn validate(&self) -> Result<(), RmbirError> {
        match self.threshold {
            ThresholdMode::Fixed(t) => {
                if !(t > 0.0) {
                    return Err(RmbirError::InvalidParams(format!(
                        "threshold T must be > 0, got {t}"
                    )));
                }
            }
            ThresholdMode::Quantile(rho) => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(RmbirError::InvalidParams(format!(
                        "outlier fraction must lie in (0, 1), got {rho}"
                    )));
                }
            }
        }
        if !(self.sigma_f > 0.0) {
            return Err(RmbirError::InvalidParams("sigma_f must be > 0".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(RmbirError::InvalidParams("iteration caps must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(RmbirError::InvalidParams("tol must be >= 0".into()));
        }
        QggmrfPrior::new(self.sigma_f, self.p, self.q, self.c)?;
        Ok(())
    }

    fn prior(&self) -> QggmrfPrior {
        QggmrfPrior::new(self.sigma_f, self.p, self.q, self.c).expect("validated")
    }
}

/// Talwar penalty: `x^2` below the threshold, `T^2` at or above it.
pub fn talwar(x: f64, t: f64) -> Result<f64, RmbirError> {
    if !(t > 0.0) {
        return Err(RmbirError::InvalidParams(format!("talwar threshold must be > 0, got {t}")));
    }
    Ok(talwar_unchecked(x, t))
}

#[inline]
fn talwar_unchecked(x: f64, t: f64) -> f64 {
    if x.abs() < t {
        x * x
    } else {
        t * t
    }
}

/// Surrogate weight multiplier for the Talwar penalty at expansion point
/// `x0`: 1 on the quadratic branch, 0 once saturated. Together with the
/// constant `T^2` this is the tight quadratic majorizer.
#[inline]
pub fn surrogate_weight(x0: f64, t: f64) -> f64 {
    if x0.abs() < t {
        1.0
    } else {
        0.0
    }
}

/// Diagonal weight matrix, one entry per measurement of a channel.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub w: Array3<f64>,
}

/// Inverse-variance weights from transmission counts:
/// `W_ii = max(counts_i, floor)`, since `var(-ln(c / I0)) ~ 1/c` under
/// Poisson statistics.
pub fn estimate_weights(counts: &Array3<f64>, floor: f64) -> WeightMatrix {
    WeightMatrix {
        w: counts.mapv(|c| c.max(floor)),
    }
}

/// Full robust cost `1/2 sum beta_T(e_i) + R(f)` with
/// `e_i = (g_i - [Af]_i) sqrt(W_ii)`.
pub fn cost(
    f: &Array3<f64>,
    g: &Array3<f64>,
    weights: &WeightMatrix,
    t: f64,
    params: &RmbirParams,
    model: &SystemModel,
) -> Result<f64, RmbirError> {
    if g.dim() != weights.w.dim() {
        return Err(RmbirError::ShapeMismatch(
            "projections and weights differ in shape".into(),
        ));
    }
    if !(t > 0.0) {
        return Err(RmbirError::InvalidParams("threshold must be > 0".into()));
    }
    let af = forward_project(f, model)?;
    let prior = params.prior();
    Ok(cost_from_af(f, &af, g, weights, t, &prior))
}

fn cost_from_af(
    f: &Array3<f64>,
    af: &Array3<f64>,
    g: &Array3<f64>,
    weights: &WeightMatrix,
    t: f64,
    prior: &QggmrfPrior,
) -> f64 {
    let mut data = 0.0;
    for ((gv, av), wv) in g.iter().zip(af.iter()).zip(weights.w.iter()) {
        let e = (gv - av) * wv.sqrt();
        data += talwar_unchecked(e, t);
    }
    0.5 * data + prior.cost(f)
}

/// Value and gradient of the smooth inner objective
/// `phi(f) = 1/2 sum wtilde_i (g_i - [Af]_i)^2 + R(f)`.
///
/// Exposed for diagnostics and derivative checks.
pub fn objective_gradient(
    f: &Array3<f64>,
    g: &Array3<f64>,
    wtilde: &Array3<f64>,
    model: &SystemModel,
    prior: &QggmrfPrior,
) -> Result<(f64, Array3<f64>), RmbirError> {
    let af = forward_project(f, model)?;
    let mut value = 0.0;
    let mut weighted_resid = Array3::zeros(af.dim());
    for ((wr, (&gv, &av)), &wv) in weighted_resid
        .iter_mut()
        .zip(g.iter().zip(af.iter()))
        .zip(wtilde.iter())
    {
        let r = av - gv;
        value += wv * r * r;
        *wr = wv * r;
    }
    let mut grad = back_project(&weighted_resid, model)?;
    prior.add_gradient(f, &mut grad);
    Ok((0.5 * value + prior.cost(f), grad))
}

fn inner_objective(
    af: &Array3<f64>,
    g: &Array3<f64>,
    wtilde: &Array3<f64>,
    f: &Array3<f64>,
    prior: &QggmrfPrior,
) -> f64 {
    let mut value = 0.0;
    for ((&gv, &av), &wv) in g.iter().zip(af.iter()).zip(wtilde.iter()) {
        let r = gv - av;
        value += wv * r * r;
    }
    0.5 * value + prior.cost(f)
}

/// Largest eigenvalue estimate of `A^T Wtilde A` by power iteration,
/// plus the prior curvature bound, with a small safety factor.
fn estimate_lipschitz(
    model: &SystemModel,
    wtilde: &Array3<f64>,
    prior: &QggmrfPrior,
    eigvec: &mut Array3<f64>,
    iterations: usize,
) -> Result<f64, RmbirError> {
    let norm = |v: &Array3<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut lambda = 0.0;
    let n0 = norm(eigvec);
    if n0 > 0.0 {
        eigvec.mapv_inplace(|v| v / n0);
    }
    for _ in 0..iterations {
        let av = forward_project(eigvec, model)?;
        let z = back_project(&(&av * wtilde), model)?;
        lambda = norm(&z);
        if lambda <= 0.0 {
            break;
        }
        *eigvec = z / lambda;
    }
    let reg = 2.0 * prior.curvature_bound() * QggmrfPrior::neighbor_weight_sum();
    Ok(1.05 * lambda + reg)
}

struct InnerResult {
    f: Array3<f64>,
    af: Array3<f64>,
    objective: f64,
}

/// Accelerated projected gradient descent on the quadratic surrogate
/// plus prior. Momentum restarts whenever the objective increases, the
/// step backtracks when two restarts happen in a row, and the best
/// iterate is returned, so the surrogate never increases.
#[allow(clippy::too_many_arguments)]
fn minimize_surrogate(
    f0: Array3<f64>,
    af0: Array3<f64>,
    g: &Array3<f64>,
    wtilde: &Array3<f64>,
    model: &SystemModel,
    prior: &QggmrfPrior,
    mut lipschitz: f64,
    iterations: usize,
    nonneg: bool,
    outer: usize,
) -> Result<InnerResult, RmbirError> {
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        lipschitz = 1.0;
    }
    let phi0 = inner_objective(&af0, g, wtilde, &f0, prior);
    if !phi0.is_finite() {
        return Err(RmbirError::Diverged { outer, inner: 0 });
    }

    let mut f_cur = f0.clone();
    let mut af_cur = af0.clone();
    let mut phi_cur = phi0;
    let mut y = f0.clone();
    let mut ay = af0.clone();
    let mut best = InnerResult { f: f0, af: af0, objective: phi0 };
    let mut theta = 1.0f64;
    let mut rejected_in_a_row = 0usize;

    for inner in 1..=iterations {
        // Gradient of the data term at y, reusing the tracked A*y.
        let mut weighted = Array3::zeros(ay.dim());
        for ((wr, (&gv, &av)), &wv) in
            weighted.iter_mut().zip(g.iter().zip(ay.iter())).zip(wtilde.iter())
        {
            *wr = wv * (av - gv);
        }
        let mut grad = back_project(&weighted, model)?;
        prior.add_gradient(&y, &mut grad);

        let step = 1.0 / lipschitz;
        let mut f_new = &y - &grad.mapv_into(|v| v * step);
        if nonneg {
            f_new.mapv_inplace(|v| v.max(0.0));
        }
        let af_new = forward_project(&f_new, model)?;
        let phi_new = inner_objective(&af_new, g, wtilde, &f_new, prior);
        if !phi_new.is_finite() {
            return Err(RmbirError::Diverged { outer, inner });
        }

        if phi_new > phi_cur {
            // Restart momentum from the last accepted iterate; if that
            // already was a plain gradient step, the step size was too
            // long, so shrink it.
            rejected_in_a_row += 1;
            if rejected_in_a_row >= 2 {
                lipschitz *= 2.0;
            }
            theta = 1.0;
            y = f_cur.clone();
            ay = af_cur.clone();
            continue;
        }
        rejected_in_a_row = 0;
        // Stalled progress: two consecutive vanishing decreases.
        let scale = phi_cur.abs().max(f64::MIN_POSITIVE);
        if phi_cur - phi_new <= 1e-12 * scale && inner > 2 {
            f_cur = f_new;
            af_cur = af_new;
            phi_cur = phi_new;
            if phi_cur < best.objective {
                best = InnerResult { f: f_cur.clone(), af: af_cur.clone(), objective: phi_cur };
            }
            break;
        }

        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        y = &f_new + &((&f_new - &f_cur).mapv_into(|v| v * beta));
        ay = &af_new + &((&af_new - &af_cur).mapv_into(|v| v * beta));
        theta = theta_next;

        f_cur = f_new;
        af_cur = af_new;
        phi_cur = phi_new;
        if phi_cur < best.objective {
            best = InnerResult { f: f_cur.clone(), af: af_cur.clone(), objective: phi_cur };
        }
    }
    Ok(best)
}

/// Lower-nearest `(1 - rho)` quantile of absolute normalized residuals.
/// Degenerate inputs (all residuals equal) return that value nudged up
/// so nothing is flagged.
pub fn select_threshold(abs_residuals: &[f64], rho: f64) -> Result<f64, RmbirError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(RmbirError::InvalidParams(format!(
            "outlier fraction must lie in (0, 1), got {rho}"
        )));
    }
    if abs_residuals.is_empty() {
        return Err(RmbirError::InvalidParams("no residuals".into()));
    }
    let mut sorted: Vec<f64> = abs_residuals.iter().map(|r| r.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = sorted.len();
    let first = sorted[0];
    if sorted[n - 1] == first {
        return Ok(first + (first.abs() * 1e-9).max(1e-12));
    }
    let idx = ((1.0 - rho) * n as f64).ceil().max(1.0) as usize - 1;
    Ok(sorted[idx.min(n - 1)])
}

/// Per-channel reconstruction output.
#[derive(Debug, Clone)]
pub struct ChannelResult {
    /// Attenuation volume `(z, y, x)`, 1/um.
    pub volume: Array3<f64>,
    /// Bragg map: 1 where `|e_i| >= T` at the returned iterate.
    pub bragg: Array3<u8>,
    /// Robust cost after each outer iteration (index 0 = initial point).
    pub trace: Vec<f64>,
    /// Threshold actually used (resolved quantile for `Quantile` mode).
    pub threshold: f64,
}

fn normalized_residuals(
    g: &Array3<f64>,
    af: &Array3<f64>,
    weights: &WeightMatrix,
) -> Array3<f64> {
    let mut e = Array3::zeros(g.dim());
    for ((ev, (&gv, &av)), &wv) in e.iter_mut().zip(g.iter().zip(af.iter())).zip(weights.w.iter()) {
        *ev = (gv - av) * wv.sqrt();
    }
    e
}

/// Robust reconstruction of one wavelength channel.
pub fn rmbir_reconstruct(
    g: &Array3<f64>,
    weights: &WeightMatrix,
    model: &SystemModel,
    params: &RmbirParams,
) -> Result<ChannelResult, RmbirError> {
    params.validate()?;
    if g.dim() != model.geometry().sino_dim() {
        return Err(RmbirError::ShapeMismatch(format!(
            "projections {:?} vs geometry {:?}",
            g.dim(),
            model.geometry().sino_dim()
        )));
    }
    if g.dim() != weights.w.dim() {
        return Err(RmbirError::ShapeMismatch(
            "projections and weights differ in shape".into(),
        ));
    }
    if weights.w.iter().any(|&w| !(w > 0.0)) {
        return Err(RmbirError::InvalidParams("weights must be positive".into()));
    }
    let prior = params.prior();

    // Warm start: clipped FBP, then one unrobust full-weight solve.
    // The inverse-variance weights already suppress deep-dip outliers,
    // so the residuals of this preliminary iterate separate anomalous
    // measurements cleanly; starting the robust loop straight from the
    // FBP image would instead see small residuals on the very outliers
    // FBP reproduced.
    let mut f = fbp_reconstruct(g, model, FbpFilter::RamLak)?;
    f.mapv_inplace(|v| v.max(0.0));
    let mut af = forward_project(&f, model)?;

    // Deterministic power-iteration seed, reused across outer iterations.
    let mut eigvec = {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7274_5f70_6f77u64);
        Array3::from_shape_fn(model.geometry().volume_dim(), |_| rng.gen::<f64>() - 0.5)
    };

    // One estimate per channel: wtilde <= w elementwise, so the
    // full-weight operator bounds every reweighted one from above.
    let lipschitz_full = match params.lipschitz_override {
        Some(l) => l,
        None => estimate_lipschitz(model, &weights.w, &prior, &mut eigvec, 10)?,
    };
    let warm = minimize_surrogate(
        f,
        af,
        g,
        &weights.w,
        model,
        &prior,
        lipschitz_full,
        params.max_inner,
        params.nonneg,
        0,
    )?;
    f = warm.f;
    af = warm.af;

    let threshold = match params.threshold {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Quantile(rho) => {
            let e = normalized_residuals(g, &af, weights);
            select_threshold(e.as_slice().expect("standard layout"), rho)?
        }
    };

    let mut trace = vec![cost_from_af(&f, &af, g, weights, threshold, &prior)];
    for outer in 1..=params.max_outer {
        let e = normalized_residuals(g, &af, weights);
        let mut wtilde = weights.w.clone();
        for (wt, &ev) in wtilde.iter_mut().zip(e.iter()) {
            *wt *= surrogate_weight(ev, threshold);
        }
        let result = minimize_surrogate(
            f,
            af,
            g,
            &wtilde,
            model,
            &prior,
            lipschitz_full,
            params.max_inner,
            params.nonneg,
            outer,
        )?;
        f = result.f;
        af = result.af;
        let c = cost_from_af(&f, &af, g, weights, threshold, &prior);
        let prev = *trace.last().expect("trace nonempty");
        trace.push(c);
        if prev - c <= params.tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let e = normalized_residuals(g, &af, weights);
    let bragg = e.mapv(|ev| u8::from(ev.abs() >= threshold));
    Ok(ChannelResult { volume: f, bragg, trace, threshold })
}

/// Output of [`reconstruct_all`]: the hyperspectral volume, the Bragg
/// maps, and per-channel cost traces and thresholds.
#[derive(Debug, Clone)]
pub struct RmbirOutput {
    pub volume: HyperVolume,
    pub bragg: BraggMapStack,
    pub traces: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
}

fn reconstruct_channel(
    sino: &HyperSinogram,
    model: &SystemModel,
    params: &RmbirParams,
    k: usize,
) -> Result<ChannelResult, RmbirError> {
    let counts = sino.channel_f64(k);
    let weights = estimate_weights(&counts, params.count_floor);
    let g = counts.mapv(|c| -(c.max(params.count_floor) / sino.incident_flux).ln());
    rmbir_reconstruct(&g, &weights, model, params).map_err(|e| RmbirError::Channel {
        index: k,
        source: Box::new(e),
    })
}

fn assemble(
    channels: Vec<ChannelResult>,
    model: &SystemModel,
) -> Result<RmbirOutput, RmbirError> {
    let k = channels.len();
    let (nz, ny, nx) = model.geometry().volume_dim();
    let (v, r, c) = model.geometry().sino_dim();
    let mut volume = Array4::zeros((k, nz, ny, nx));
    let mut bragg = Array4::zeros((k, v, r, c));
    let mut traces = Vec::with_capacity(k);
    let mut thresholds = Vec::with_capacity(k);
    for (ki, ch) in channels.into_iter().enumerate() {
        volume
            .index_axis_mut(Axis(0), ki)
            .assign(&ch.volume.mapv(|x| x as f32));
        bragg.index_axis_mut(Axis(0), ki).assign(&ch.bragg);
        traces.push(ch.trace);
        thresholds.push(ch.threshold);
    }
    Ok(RmbirOutput {
        volume: HyperVolume::new(volume)
            .map_err(|e| RmbirError::InvalidParams(e.to_string()))?,
        bragg: BraggMapStack::new(bragg).map_err(|e| RmbirError::InvalidParams(e.to_string()))?,
        traces,
        thresholds,
    })
}

/// Robust reconstruction of every wavelength channel of a counts
/// sinogram. Channels are fully independent.
pub fn reconstruct_all(
    sino: &HyperSinogram,
    model: &SystemModel,
    params: &RmbirParams,
) -> Result<RmbirOutput, RmbirError> {
    #[cfg(feature = "parallel")]
    {
        reconstruct_all_par(sino, model, params)
    }
    #[cfg(not(feature = "parallel"))]
    {
        reconstruct_all_seq(sino, model, params)
    }
}

/// Sequential fallback of [`reconstruct_all`].
pub fn reconstruct_all_seq(
    sino: &HyperSinogram,
    model: &SystemModel,
    params: &RmbirParams,
) -> Result<RmbirOutput, RmbirError> {
    check_counts(sino)?;
    let channels: Result<Vec<_>, _> = (0..sino.n_channels())
        .map(|k| reconstruct_channel(sino, model, params, k))
        .collect();
    assemble(channels?, model)
}

/// Rayon-parallel [`reconstruct_all`]; channels share no mutable state.
#[cfg(feature = "parallel")]
pub fn reconstruct_all_par(
    sino: &HyperSinogram,
    model: &SystemModel,
    params: &RmbirParams,
) -> Result<RmbirOutput, RmbirError> {
    check_counts(sino)?;
    let channels: Result<Vec<_>, _> = (0..sino.n_channels())
        .into_par_iter()
        .map(|k| reconstruct_channel(sino, model, params, k))
        .collect();
    assemble(channels?, model)
}

fn check_counts(sino: &HyperSinogram) -> Result<(), RmbirError> {
    if sino.kind != SinogramKind::Counts {
        return Err(RmbirError::InvalidParams(
            "reconstruct_all expects a counts sinogram".into(),
        ));
    }
    if !(sino.incident_flux > 0.0) {
        return Err(RmbirError::InvalidParams("incident_flux must be > 0".into()));
    }
    Ok(())
}
