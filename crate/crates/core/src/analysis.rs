//! Estimation chain: time-averaged correlators with batch-means errors,
//! damped-cosine fitting, inversion of the fitted timescales back to the
//! physical parameters, and polarization-filtered intensity measurements.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linear::{CorrelationRecord, CorrelatorStderr, RecordSource};
use crate::math::solve_small;
use crate::stochastic::{FluctuationSeries, MemberSeries};
use crate::Result;

/// Observable channel of a fluctuation series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    DnRel,
    P2,
    P3,
}

fn channel_of(m: &MemberSeries, c: Channel) -> &[f64] {
    match c {
        Channel::DnRel => &m.dn_rel,
        Channel::P2 => &m.p2,
        Channel::P3 => &m.p3,
    }
}

/// A value with a one-sigma uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64) -> Self {
        Estimate { value, stderr }
    }
}

/// Centered copies of one channel across members.
fn centered(series: &FluctuationSeries, c: Channel) -> Vec<Vec<f64>> {
    let mut mean = 0.0;
    let mut count = 0usize;
    for m in &series.members {
        for v in channel_of(m, c) {
            mean += v;
            count += 1;
        }
    }
    mean /= count.max(1) as f64;
    series
        .members
        .iter()
        .map(|m| channel_of(m, c).iter().map(|v| v - mean).collect())
        .collect()
}

struct LagGrid {
    indices: Vec<usize>,
    lags: Vec<f64>,
    max_index: usize,
}

fn lag_grid(dt: f64, max_lag: f64, lag_step: f64) -> Result<LagGrid> {
    if !(max_lag > 0.0) || !(lag_step > 0.0) {
        return Err(Error::InvalidInput(
            "max_lag and lag_step must be positive".into(),
        ));
    }
    let step = (lag_step / dt).round().max(1.0) as usize;
    let max_index = (max_lag / dt).floor() as usize;
    let indices: Vec<usize> = (0..=max_index / step).map(|i| i * step).collect();
    let lags = indices.iter().map(|&k| k as f64 * dt).collect();
    Ok(LagGrid {
        max_index: *indices.last().unwrap_or(&0),
        indices,
        lags,
    })
}

/// Time-averaged cross-correlation `<x(t) y(t+tau)>` over all members, with
/// batch-means standard errors. Product start times are restricted to
/// `t <= N - 1 - max_k` so every lag averages the same window.
fn corr_batched(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    grid: &LagGrid,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n = xs.first().map_or(0, |v| v.len());
    if n <= grid.max_index + 1 {
        return Err(Error::SeriesTooShort(format!(
            "member length {n} does not cover the maximum lag index {}",
            grid.max_index
        )));
    }
    let t_range = n - grid.max_index;
    // Batches long compared to the lag window, at least four in total for a
    // scatter estimate.
    let target = (t_range / 16).max(2 * (grid.max_index + 1)).max(16);
    let per_member = (t_range / target).max(1);
    let batch_len = t_range.div_ceil(per_member);

    let mut batch_means: Vec<Vec<f64>> = vec![Vec::new(); grid.indices.len()];
    let mut totals = vec![0.0f64; grid.indices.len()];
    let mut total_count = 0usize;
    for (x, y) in xs.iter().zip(ys) {
        let mut start = 0usize;
        while start < t_range {
            let end = (start + batch_len).min(t_range);
            for (slot, &k) in grid.indices.iter().enumerate() {
                let mut acc = 0.0;
                for t in start..end {
                    acc += x[t] * y[t + k];
                }
                totals[slot] += acc;
                batch_means[slot].push(acc / (end - start) as f64);
            }
            start = end;
        }
        total_count += t_range;
    }
    let values: Vec<f64> = totals.iter().map(|s| s / total_count as f64).collect();

    let b = batch_means[0].len();
    let stderr = if b >= 4 {
        Some(
            batch_means
                .iter()
                .map(|bm| {
                    let mean = bm.iter().sum::<f64>() / b as f64;
                    let var =
                        bm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1) as f64;
                    (var / b as f64).sqrt()
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((values, stderr))
}

/// Unbiased time-averaged auto/cross correlators of a fluctuation series on
/// the requested lag grid (scaled units). The cross channel is
/// `<P3(t) P2(t+tau)>` with the ellipticity leading.
///
/// Requires the total recorded duration to cover the maximum lag 50 times.
pub fn estimate_correlators(
    series: &FluctuationSeries,
    max_lag: f64,
    lag_step: f64,
) -> Result<CorrelationRecord> {
    series.validate()?;
    let grid = lag_grid(series.dt_stored, max_lag, lag_step)?;
    let total = series.member_duration() * series.members.len() as f64;
    if total < 50.0 * max_lag {
        return Err(Error::SeriesTooShort(format!(
            "total duration {total:.1} below 50 x max lag = {:.1}",
            50.0 * max_lag
        )));
    }

    let dn = centered(series, Channel::DnRel);
    let p2 = centered(series, Channel::P2);
    let p3 = centered(series, Channel::P3);

    let (dn_dn_rel, se_rel) = corr_batched(&dn, &dn, &grid)?;
    let (p3p3, se_p3p3) = corr_batched(&p3, &p3, &grid)?;
    let (p3p2, se_p3p2) = corr_batched(&p3, &p2, &grid)?;
    let (p2p2, se_p2p2) = corr_batched(&p2, &p2, &grid)?;

    let ns2 = series.provenance.n_s * series.provenance.n_s;
    let dn_dn_abs: Vec<f64> = dn_dn_rel.iter().map(|v| v * ns2).collect();
    let stderr = match (se_rel, se_p3p3, se_p3p2, se_p2p2) {
        (Some(rel), Some(s33), Some(s32), Some(s22)) => Some(CorrelatorStderr {
            dn_dn_abs: rel.iter().map(|v| v * ns2).collect(),
            dn_dn_rel: rel,
            p3p3: s33,
            p3p2: s32,
            p2p2: s22,
        }),
        _ => None,
    };

    Ok(CorrelationRecord {
        lags: grid.lags,
        dn_dn_abs,
        dn_dn_rel,
        p3p3,
        p3p2,
        p2p2,
        stderr,
        gamma_per_s: series.provenance.gamma_per_s,
        n_s: series.provenance.n_s,
        source: RecordSource::Empirical {
            seed: series.provenance.seed,
            mode: series.provenance.mode.as_str().into(),
        },
    })
}

/// Transposed cross-correlation `<P2(t) P3(t+tau)>`, exposed separately for
/// diagnostics of the cross ordering convention.
pub fn estimate_transposed_cross(
    series: &FluctuationSeries,
    max_lag: f64,
    lag_step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    series.validate()?;
    let grid = lag_grid(series.dt_stored, max_lag, lag_step)?;
    let p2 = centered(series, Channel::P2);
    let p3 = centered(series, Channel::P3);
    let (vals, _) = corr_batched(&p2, &p3, &grid)?;
    Ok((grid.lags, vals))
}

/// Pooled channel mean with a batch-means standard error.
pub fn channel_mean(series: &FluctuationSeries, c: Channel) -> Result<Estimate> {
    series.validate()?;
    let mut batch_means = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in &series.members {
        let data = channel_of(m, c);
        let len = data.len();
        let batch = (len / 16).max(16).min(len.max(1));
        let mut start = 0;
        while start < len {
            let end = (start + batch).min(len);
            let sum: f64 = data[start..end].iter().sum();
            batch_means.push(sum / (end - start) as f64);
            total += sum;
            count += end - start;
            start = end;
        }
    }
    let mean = total / count.max(1) as f64;
    let b = batch_means.len();
    let stderr = if b >= 4 {
        let bm = batch_means.iter().sum::<f64>() / b as f64;
        let var = batch_means
            .iter()
            .map(|v| (v - bm) * (v - bm))
            .sum::<f64>()
            / (b - 1) as f64;
        (var / b as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(Estimate::new(mean, stderr))
}

/// Normalized equal-time correlation coefficient between two channels, with
/// a batch-means standard error. Used to verify the decoupling of the
/// intensity fluctuations from the polarization fluctuations.
pub fn channel_correlation(series: &FluctuationSeries, a: Channel, b: Channel) -> Result<Estimate> {
    series.validate()?;
    let xs = centered(series, a);
    let ys = centered(series, b);
    let sig = |zs: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for z in zs {
            for v in z {
                acc += v * v;
            }
            n += z.len();
        }
        (acc / n as f64).sqrt()
    };
    let denom = sig(&xs) * sig(&ys);
    if denom == 0.0 {
        return Err(Error::InvalidInput("zero-variance channel".into()));
    }
    let grid = LagGrid {
        indices: vec![0],
        lags: vec![0.0],
        max_index: 0,
    };
    let (vals, se) = corr_batched(&xs, &ys, &grid)?;
    let se = se.map_or(f64::NAN, |s| s[0] / denom);
    Ok(Estimate::new(vals[0] / denom, se))
}

/// Fit models for correlator channels.
///
/// The first two are the printed correlator forms. The quadrature variants
/// add an in-quadrature component `Cq exp(-a tau) sin(b tau)`: the exact
/// correlation of an oscillatory mode pair carries such a term at first
/// order in `gamma/nu` (the eigenvectors are not orthogonal), and ignoring
/// it leaks into the fitted frequency. Frequency-sensitive measurements use
/// the quadrature variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// `C exp(-a tau) cos(b tau)`
    DampedCosine,
    /// `C exp(-a tau) cos(b tau) + C2 exp(-a2 tau)`
    CosinePlusExponential,
    /// `exp(-a tau) (C cos(b tau) + Cq sin(b tau))`
    DampedCosineQuadrature,
    /// `exp(-a tau) (C cos(b tau) + Cq sin(b tau)) + C2 exp(-a2 tau)`
    CosineQuadraturePlusExponential,
}

impl FitModel {
    fn has_quadrature(&self) -> bool {
        matches!(
            self,
            FitModel::DampedCosineQuadrature | FitModel::CosineQuadraturePlusExponential
        )
    }

    fn has_exponential(&self) -> bool {
        matches!(
            self,
            FitModel::CosinePlusExponential | FitModel::CosineQuadraturePlusExponential
        )
    }
}

/// Nonlinear least-squares result for one correlator channel.
///
/// Rates and frequencies are in the inverse units of the supplied lag grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub amplitude: Estimate,
    pub decay: Estimate,
    pub frequency: Estimate,
    /// In-quadrature amplitude `Cq` (quadrature models only).
    pub quadrature: Option<Estimate>,
    pub amplitude2: Option<Estimate>,
    pub decay2: Option<Estimate>,
    pub residual_rms: f64,
    pub weighted: bool,
    pub iterations: usize,
}

/// Parameter layout: `[C, a, b]`, then `Cq` for quadrature models, then
/// `[C2, a2]` for the models with the extra exponential.
struct FitProblem<'a> {
    lags: &'a [f64],
    values: &'a [f64],
    weights: Vec<f64>,
    model: FitModel,
}

impl FitProblem<'_> {
    fn npar(&self) -> usize {
        3 + self.model.has_quadrature() as usize + 2 * self.model.has_exponential() as usize
    }

    fn exp_offset(&self) -> usize {
        3 + self.model.has_quadrature() as usize
    }

    fn eval(&self, p: &[f64], tau: f64) -> f64 {
        let e = (-p[1] * tau).exp();
        let mut v = p[0] * e * (p[2] * tau).cos();
        if self.model.has_quadrature() {
            v += p[3] * e * (p[2] * tau).sin();
        }
        if self.model.has_exponential() {
            let k = self.exp_offset();
            v += p[k] * (-p[k + 1] * tau).exp();
        }
        v
    }

    fn jacobian_row(&self, p: &[f64], tau: f64) -> Vec<f64> {
        let e = (-p[1] * tau).exp();
        let c = (p[2] * tau).cos();
        let s = (p[2] * tau).sin();
        let mut row = Vec::with_capacity(self.npar());
        row.push(e * c);
        if self.model.has_quadrature() {
            let q = p[3];
            row.push(-tau * e * (p[0] * c + q * s)); // d/da
            row.push(tau * e * (-p[0] * s + q * c)); // d/db
            row.push(e * s); // d/dCq
        } else {
            row.push(-tau * p[0] * e * c);
            row.push(-tau * p[0] * e * s);
        }
        if self.model.has_exponential() {
            let k = self.exp_offset();
            let e2 = (-p[k + 1] * tau).exp();
            row.push(e2);
            row.push(-tau * p[k] * e2);
        }
        row
    }

    fn sse(&self, p: &[f64]) -> f64 {
        self.lags
            .iter()
            .zip(self.values)
            .zip(&self.weights)
            .map(|((&t, &y), &w)| {
                let r = self.eval(p, t) - y;
                w * r * r
            })
            .sum()
    }

    /// Weighted linear solve for the amplitudes at fixed rates; returns the
    /// full parameter vector and its SSE.
    fn amplitudes_for(&self, a: f64, b: f64, a2: f64) -> Option<(Vec<f64>, f64)> {
        // Basis columns at the fixed rates.
        let ncol = 1 + self.model.has_quadrature() as usize + self.model.has_exponential() as usize;
        let mut g = vec![vec![0.0f64; ncol]; ncol];
        let mut rhs = vec![0.0f64; ncol];
        let mut basis = [0.0f64; 3];
        for ((&t, &y), &w) in self.lags.iter().zip(self.values).zip(&self.weights) {
            let e = (-a * t).exp();
            basis[0] = e * (b * t).cos();
            let mut col = 1;
            if self.model.has_quadrature() {
                basis[col] = e * (b * t).sin();
                col += 1;
            }
            if self.model.has_exponential() {
                basis[col] = (-a2 * t).exp();
            }
            for i in 0..ncol {
                rhs[i] += w * basis[i] * y;
                for j in 0..ncol {
                    g[i][j] += w * basis[i] * basis[j];
                }
            }
        }
        let scale = g.iter().enumerate().map(|(i, r)| r[i]).fold(0.0f64, f64::max);
        if scale <= 0.0 {
            return None;
        }
        let coeffs = solve_small(&mut g, &mut rhs)?;
        if coeffs.iter().any(|c| !c.is_finite()) {
            return None;
        }
        let mut p = vec![coeffs[0], a, b];
        let mut col = 1;
        if self.model.has_quadrature() {
            p.push(coeffs[col]);
            col += 1;
        }
        if self.model.has_exponential() {
            p.push(coeffs[col]);
            p.push(a2);
        }
        let sse = self.sse(&p);
        Some((p, sse))
    }
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (l, h) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (l + (h - l) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Fit a damped cosine (optionally plus a non-oscillatory exponential) to a
/// correlator channel: coarse grid search over the rates with linear
/// amplitude solves, refined by damped Gauss-Newton. Deterministic for
/// identical inputs.
///
/// `stderr`, when given, supplies inverse-variance weights and enables the
/// model-mismatch check (residual rms above five mean error bars).
pub fn fit_damped_cosine(
    lags: &[f64],
    values: &[f64],
    stderr: Option<&[f64]>,
    model: FitModel,
) -> Result<FitResult> {
    if lags.len() != values.len() || lags.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "need >= 10 matching lag/value samples, got {}/{}",
            lags.len(),
            values.len()
        )));
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("lag grid must be increasing".into()));
    }
    let span = lags[lags.len() - 1] - lags[0];
    let dlag = lags[1] - lags[0];

    // Inverse-variance weights; fall back to uniform when the error
    // estimates are unusable.
    let (weights, weighted) = match stderr {
        Some(se) if se.len() == lags.len() && se.iter().all(|s| s.is_finite() && *s > 0.0) => {
            (se.iter().map(|s| 1.0 / (s * s)).collect::<Vec<f64>>(), true)
        }
        _ => (vec![1.0; lags.len()], false),
    };
    let problem = FitProblem {
        lags,
        values,
        weights,
        model,
    };

    // Grid search over the rates.
    let decays = logspace(0.05 / span, 0.5 / dlag, 32);
    let freqs = linspace(
        std::f64::consts::PI / span,
        0.9 * std::f64::consts::PI / dlag,
        160,
    );
    let slow_decays = if model.has_exponential() {
        logspace(0.05 / span, 0.5 / dlag, 24)
    } else {
        vec![0.0]
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &a in &decays {
        for &b in &freqs {
            for &a2 in &slow_decays {
                if let Some((p, sse)) = problem.amplitudes_for(a, b, a2) {
                    if sse.is_finite() && best.as_ref().is_none_or(|(_, s)| sse < *s) {
                        best = Some((p, sse));
                    }
                }
            }
        }
    }
    let (grid_params, grid_sse) = best.ok_or_else(|| {
        Error::InvalidInput("grid search found no finite objective".into())
    })?;

    // The lag grid must resolve the oscillation (10 points per period).
    if grid_params[2] * dlag > 2.0 * std::f64::consts::PI / 10.0 {
        return Err(Error::InvalidInput(format!(
            "lag step {dlag} too coarse for frequency {} (need >= 10 points/period)",
            grid_params[2]
        )));
    }

    // Levenberg-Marquardt refinement.
    let npar = problem.npar();
    let mut p = grid_params.clone();
    let mut sse = grid_sse;
    let mut mu = 1e-3;
    let mut iterations = 0usize;
    let mut converged = false;
    for _ in 0..300 {
        iterations += 1;
        // Normal equations J^T W J, J^T W r.
        let mut jtj = vec![vec![0.0f64; npar]; npar];
        let mut jtr = vec![0.0f64; npar];
        for ((&t, &y), &w) in problem
            .lags
            .iter()
            .zip(problem.values)
            .zip(&problem.weights)
        {
            let row = problem.jacobian_row(&p, t);
            let r = problem.eval(&p, t) - y;
            for i in 0..npar {
                jtr[i] += w * row[i] * r;
                for j in 0..npar {
                    jtj[i][j] += w * row[i] * row[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += mu * jtj[i][i].max(1e-300);
            }
            let mut rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(step) = solve_small(&mut a, &mut rhs) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = p.clone();
            for i in 0..npar {
                trial[i] += step[i];
            }
            // Rates stay non-negative.
            trial[1] = trial[1].max(0.0);
            trial[2] = trial[2].max(0.0);
            if model.has_exponential() {
                let k = problem.exp_offset();
                trial[k + 1] = trial[k + 1].max(0.0);
            }
            let trial_sse = problem.sse(&trial);
            if trial_sse.is_finite() && trial_sse <= sse {
                let rel = (sse - trial_sse) / sse.max(1e-300);
                let step_norm: f64 = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                let p_norm: f64 = p.iter().map(|s| s * s).sum::<f64>().sqrt();
                p = trial;
                sse = trial_sse;
                mu = (mu / 3.0).max(1e-14);
                improved = true;
                if rel < 1e-14 || step_norm <= 1e-13 * p_norm.max(1.0) {
                    converged = true;
                }
                break;
            }
            mu *= 7.0;
        }
        if converged {
            break;
        }
        if !improved {
            // Cannot improve further; accept if we at least beat the grid
            // noticeably or the residual is already tiny.
            converged = sse <= grid_sse;
            break;
        }
    }

    let n = lags.len();
    let dof = (n - npar).max(1) as f64;
    let rms = {
        let raw: f64 = lags
            .iter()
            .zip(values)
            .map(|(&t, &y)| {
                let r = problem.eval(&p, t) - y;
                r * r
            })
            .sum();
        (raw / n as f64).sqrt()
    };

    // Parameter covariance from the Jacobian at the solution.
    let mut jtj = vec![vec![0.0f64; npar]; npar];
    for (&t, &w) in problem.lags.iter().zip(&problem.weights) {
        let row = problem.jacobian_row(&p, t);
        for i in 0..npar {
            for j in 0..npar {
                jtj[i][j] += w * row[i] * row[j];
            }
        }
    }
    let scale = if weighted { 1.0 } else { sse / dof };
    let mut sigmas = vec![f64::NAN; npar];
    for i in 0..npar {
        let mut a = jtj.clone();
        let mut rhs = vec![0.0; npar];
        rhs[i] = 1.0;
        if let Some(col) = solve_small(&mut a, &mut rhs) {
            if col[i] > 0.0 {
                sigmas[i] = (col[i] * scale).sqrt();
            }
        }
    }

    let k = problem.exp_offset();
    let result = FitResult {
        model,
        amplitude: Estimate::new(p[0], sigmas[0]),
        decay: Estimate::new(p[1], sigmas[1]),
        frequency: Estimate::new(p[2], sigmas[2]),
        quadrature: model
            .has_quadrature()
            .then(|| Estimate::new(p[3], sigmas[3])),
        amplitude2: model
            .has_exponential()
            .then(|| Estimate::new(p[k], sigmas[k])),
        decay2: model
            .has_exponential()
            .then(|| Estimate::new(p[k + 1], sigmas[k + 1])),
        residual_rms: rms,
        weighted,
        iterations,
    };

    if !converged {
        return Err(Error::FitDiverged {
            best: Box::new(result),
        });
    }
    if weighted {
        let mean_se = stderr
            .map(|se| se.iter().sum::<f64>() / se.len() as f64)
            .unwrap_or(f64::INFINITY);
        if rms > 5.0 * mean_se {
            return Err(Error::ModelMismatch { rms, mean_err: mean_se });
        }
    }
    Ok(result)
}

/// Channel selector of a [`CorrelationRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordChannel {
    DnAbs,
    DnRel,
    P3P3,
    P3P2,
    P2P2,
}

impl RecordChannel {
    pub fn series<'a>(&self, rec: &'a CorrelationRecord) -> &'a [f64] {
        match self {
            RecordChannel::DnAbs => &rec.dn_dn_abs,
            RecordChannel::DnRel => &rec.dn_dn_rel,
            RecordChannel::P3P3 => &rec.p3p3,
            RecordChannel::P3P2 => &rec.p3p2,
            RecordChannel::P2P2 => &rec.p2p2,
        }
    }

    pub fn stderr<'a>(&self, rec: &'a CorrelationRecord) -> Option<&'a [f64]> {
        rec.stderr.as_ref().map(|se| match self {
            RecordChannel::DnAbs => se.dn_dn_abs.as_slice(),
            RecordChannel::DnRel => se.dn_dn_rel.as_slice(),
            RecordChannel::P3P3 => se.p3p3.as_slice(),
            RecordChannel::P3P2 => se.p3p2.as_slice(),
            RecordChannel::P2P2 => se.p2p2.as_slice(),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RecordChannel::DnAbs => "dn_dn_abs",
            RecordChannel::DnRel => "dn_dn_rel",
            RecordChannel::P3P3 => "p3p3",
            RecordChannel::P3P2 => "p3p2",
            RecordChannel::P2P2 => "p2p2",
        }
    }
}

/// Fit one record channel, weighting by its batch-means errors when they
/// exist. A model-mismatch rejection (residuals dominated by the leading-
/// order model error rather than by noise) falls back to the unweighted fit,
/// whose parameter errors are scaled by the residuals instead.
pub fn fit_record_channel(
    rec: &CorrelationRecord,
    channel: RecordChannel,
    model: FitModel,
) -> Result<FitResult> {
    let values = channel.series(rec);
    match fit_damped_cosine(&rec.lags, values, channel.stderr(rec), model) {
        Err(Error::ModelMismatch { .. }) => fit_damped_cosine(&rec.lags, values, None, model),
        other => other,
    }
}

/// Relaxation-frequency difference `nu_n - nu_P` obtained by differencing
/// the fitted frequencies of the intensity and ellipticity channels
/// (the two channels go through the same fitting machinery; the difference
/// is never fitted directly).
///
/// Both channels are fitted with the quadrature-augmented models: the
/// in-quadrature component and, for the ellipticity, the small leaked
/// exponential both shift a pure-cosine frequency estimate by more than the
/// splitting itself at moderate `gamma/nu`.
pub fn measure_splitting(rec: &CorrelationRecord) -> Result<(Estimate, FitResult, FitResult)> {
    let fit_n = fit_record_channel(rec, RecordChannel::DnRel, FitModel::DampedCosineQuadrature)?;
    let fit_p = fit_record_channel(
        rec,
        RecordChannel::P3P3,
        FitModel::CosineQuadraturePlusExponential,
    )?;
    let split = fit_n.frequency.value - fit_p.frequency.value;
    let split_se = (fit_n.frequency.stderr.powi(2) + fit_p.frequency.stderr.powi(2)).sqrt();
    Ok((Estimate::new(split, split_se), fit_n, fit_p))
}

/// Linewidth enhancement factor as the cross/auto amplitude ratio,
/// estimated pointwise over the first oscillation period away from the
/// cosine zeros and averaged. The standard error is the scatter of the
/// pointwise ratios.
pub fn alpha_pointwise(rec: &CorrelationRecord, nu_scaled: f64) -> Result<Estimate> {
    if !(nu_scaled > 0.0) {
        return Err(Error::InvalidInput("nu must be positive".into()));
    }
    let period = 2.0 * std::f64::consts::PI / nu_scaled;
    let peak = rec.p3p3[0];
    let mut ratios = Vec::new();
    for (k, &tau) in rec.lags.iter().enumerate() {
        if tau > period {
            break;
        }
        if rec.p3p3[k].abs() > 0.25 * peak.abs() {
            ratios.push(rec.p3p2[k] / rec.p3p3[k]);
        }
    }
    if ratios.len() < 3 {
        return Err(Error::InvalidInput(
            "too few usable lags for the alpha ratio".into(),
        ));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    Ok(Estimate::new(mean, (var / n).sqrt()))
}

/// Fitted observables feeding the parameter inversion. All rates and
/// frequencies in the (scaled) lag units of the correlation record;
/// `lag_unit_s` converts them back to seconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionInputs {
    pub fit_dn_abs: FitResult,
    pub fit_dn_rel: FitResult,
    pub fit_p3p3: FitResult,
    /// Two-term fit of the polarization-direction autocorrelation.
    pub fit_p2p2: FitResult,
    /// Cross/auto amplitude ratio estimate of the linewidth enhancement
    /// factor.
    pub alpha: Estimate,
    /// Measured relaxation-frequency difference `nu_n - nu_P` (lag units).
    pub splitting: Estimate,
    /// Seconds per lag unit.
    pub lag_unit_s: f64,
}

/// Recovered model parameters with propagated one-sigma uncertainties.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveredParams {
    pub gamma_per_s: Estimate,
    pub nu_rad_per_s: Estimate,
    pub x: Estimate,
    pub noise_a: Estimate,
    pub alpha: Estimate,
    /// `kappa (1 + l)` in 1/s.
    pub kappa_eff_per_s: Estimate,
    /// `w (1 + g)` in 1/s.
    pub w_eff_per_s: Estimate,
    pub n_s: Estimate,
    pub rho_plus_theta: Estimate,
    /// `x + r + rho - theta`.
    pub fast_sum: Estimate,
    pub r_spin: Option<Estimate>,
    pub rho: Option<Estimate>,
    pub theta: Option<Estimate>,
    pub splitting_rad_per_s: Estimate,
    /// Set when the frequency splitting is unresolved and only the two
    /// damping combinations are reported.
    pub degenerate: bool,
    pub notes: Vec<String>,
    /// Relative mismatches of redundant amplitude predictions.
    pub consistency: Vec<(String, f64)>,
}

/// Measurement vector ordering used internally for error propagation.
const M_DECAY_REL: usize = 0;
const M_FREQ_REL: usize = 1;
const M_AMP_REL: usize = 2;
const M_AMP_ABS: usize = 3;
const M_DECAY_P3: usize = 4;
const M_SLOW_DECAY: usize = 5;
const M_SLOW_AMP: usize = 6;
const M_ALPHA: usize = 7;
const M_SPLITTING: usize = 8;

const N_MEAS: usize = 9;

#[derive(Clone, Copy, Debug)]
struct CoreOutputs {
    gamma: f64,
    x: f64,
    noise_a: f64,
    kappa_eff2: f64, // 2 kappa (1+l), scaled
    w_eff: f64,
    n_s: f64,
    slow_group: f64,
    fast_group: f64,
    rho: f64,
    theta: f64,
    r: f64,
}

/// Deterministic inversion of the measurement vector; `pin_d` selects the
/// quadratic root branch nearest a previous solution (used by the numeric
/// Jacobian so perturbed evaluations stay on one branch).
fn invert_core(m: &[f64; N_MEAS], resolve_split: bool, pin_d: Option<f64>) -> Result<CoreOutputs> {
    let u = 2.0 * m[M_DECAY_REL];
    let nu = m[M_FREQ_REL];
    if m[M_AMP_ABS] <= 0.0 || m[M_AMP_REL] <= 0.0 {
        return Err(Error::InvalidInput(
            "intensity correlator amplitudes must be positive".into(),
        ));
    }
    // Absolute and relative intensity amplitudes differ by n_s^2, which
    // pins the loss rate: K = gamma x sqrt(C_abs C_rel).
    let kappa_eff2 = u * (m[M_AMP_ABS] * m[M_AMP_REL]).sqrt();
    let gamma = u - nu * nu / kappa_eff2;
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "inconsistent intensity observables: implied gamma = {gamma}"
        )));
    }
    let x = u / gamma;
    if !(x > 1.0) {
        return Err(Error::InvalidInput(format!(
            "recovered pump level x = {x} not above threshold"
        )));
    }
    let noise_a = m[M_AMP_REL] * x * (x - 1.0);
    let w_eff = noise_a * gamma * gamma / kappa_eff2;
    let n_s = gamma * (x - 1.0) / w_eff;

    let v = 2.0 * m[M_DECAY_P3];
    let s = m[M_SLOW_DECAY];
    let slow_group = s / gamma;
    let fast_group = v / gamma;

    if !resolve_split {
        return Ok(CoreOutputs {
            gamma,
            x,
            noise_a,
            kappa_eff2,
            w_eff,
            n_s,
            slow_group,
            fast_group,
            rho: f64::NAN,
            theta: f64::NAN,
            r: f64::NAN,
        });
    }

    let alpha = m[M_ALPHA];
    // Isolate d = gamma (rho - theta) from the splitting, then back-
    // substitute. For alpha ~ 0 the frequency anisotropy is absent.
    let d = if alpha.abs() < 1e-9 {
        s
    } else {
        let c = (1.0 + alpha * alpha) / (alpha * alpha);
        let a_q = 4.0 - c;
        let b_q = 2.0 * c * s - 4.0 * v;
        let c_q = v * v - c * s * s - u * u - 8.0 * nu * m[M_SPLITTING];
        let mut roots: Vec<f64> = Vec::new();
        if a_q.abs() < 1e-12 {
            if b_q.abs() > 0.0 {
                roots.push(-c_q / b_q);
            }
        } else {
            let disc = b_q * b_q - 4.0 * a_q * c_q;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                roots.push((-b_q + sq) / (2.0 * a_q));
                roots.push((-b_q - sq) / (2.0 * a_q));
            }
        }
        if roots.is_empty() {
            return Err(Error::InvalidInput(
                "splitting equation has no real solution".into(),
            ));
        }
        match pin_d {
            Some(base) => roots
                .into_iter()
                .min_by(|a, b| (a - base).abs().total_cmp(&(b - base).abs()))
                .unwrap(),
            None => {
                // The spin relaxation ratio cannot be negative; among the
                // physical roots prefer the mildest anisotropy asymmetry.
                let physical: Vec<f64> = roots
                    .iter()
                    .copied()
                    .filter(|d| (v - u - d) / gamma >= -1e-6)
                    .collect();
                let pool = if physical.is_empty() { roots } else { physical };
                pool.into_iter()
                    .min_by(|a, b| a.abs().total_cmp(&b.abs()))
                    .unwrap()
            }
        }
    };
    let rho = (s + d) / (2.0 * gamma);
    let theta = (s - d) / (2.0 * gamma);
    let r = (v - u - d) / gamma;
    Ok(CoreOutputs {
        gamma,
        x,
        noise_a,
        kappa_eff2,
        w_eff,
        n_s,
        slow_group,
        fast_group,
        rho,
        theta,
        r,
    })
}

/// Invert the fitted correlator observables for the physical parameters.
///
/// Intensity decay and both intensity amplitudes give `gamma`, `x` and the
/// loss/gain timescales; the polarization decays give the two damping
/// combinations; the frequency splitting separates `r`, `rho`, `theta`.
/// When the splitting is below its own standard error only the combinations
/// are reported and the result is flagged degenerate.
pub fn invert_parameters(inputs: &InversionInputs) -> Result<RecoveredParams> {
    let slow = inputs.fit_p2p2.decay2.ok_or_else(|| {
        Error::InvalidInput("p2p2 fit must use the two-term model".into())
    })?;
    let slow_amp = inputs.fit_p2p2.amplitude2.expect("two-term fit has amplitude2");

    let meas: [f64; N_MEAS] = [
        inputs.fit_dn_rel.decay.value,
        inputs.fit_dn_rel.frequency.value,
        inputs.fit_dn_rel.amplitude.value,
        inputs.fit_dn_abs.amplitude.value,
        inputs.fit_p3p3.decay.value,
        slow.value,
        slow_amp.value,
        inputs.alpha.value,
        inputs.splitting.value,
    ];
    let sigma: [f64; N_MEAS] = [
        inputs.fit_dn_rel.decay.stderr,
        inputs.fit_dn_rel.frequency.stderr,
        inputs.fit_dn_rel.amplitude.stderr,
        inputs.fit_dn_abs.amplitude.stderr,
        inputs.fit_p3p3.decay.stderr,
        slow.stderr,
        slow_amp.stderr,
        inputs.alpha.stderr,
        inputs.splitting.stderr,
    ];

    let mut notes = Vec::new();
    let se_split = inputs.splitting.stderr;
    let degenerate = !se_split.is_finite() || inputs.splitting.value.abs() <= se_split;
    if degenerate {
        notes.push(format!(
            "frequency splitting {} +- {} unresolved; reporting damping combinations only",
            inputs.splitting.value, inputs.splitting.stderr
        ));
    }

    let base = invert_core(&meas, !degenerate, None)?;

    // First-order uncertainty propagation by central differences, pinned to
    // the base quadratic branch.
    let outputs_of = |c: &CoreOutputs| -> [f64; 11] {
        [
            c.gamma,
            c.x,
            c.noise_a,
            c.kappa_eff2,
            c.w_eff,
            c.n_s,
            c.slow_group,
            c.fast_group,
            c.rho,
            c.theta,
            c.r,
        ]
    };
    let base_out = outputs_of(&base);
    let mut var = [0.0f64; 11];
    for i in 0..N_MEAS {
        if !(sigma[i].is_finite() && sigma[i] > 0.0) {
            continue;
        }
        let h = (1e-6 * meas[i].abs()).max(1e-6 * sigma[i]).max(1e-300);
        let mut up = meas;
        up[i] += h;
        let mut dn = meas;
        dn[i] -= h;
        let pin = (!degenerate).then_some(base.gamma * (base.rho - base.theta));
        let (o_up, o_dn) = match (
            invert_core(&up, !degenerate, pin),
            invert_core(&dn, !degenerate, pin),
        ) {
            (Ok(a), Ok(b)) => (outputs_of(&a), outputs_of(&b)),
            _ => continue,
        };
        for k in 0..11 {
            let grad = (o_up[k] - o_dn[k]) / (2.0 * h);
            if grad.is_finite() {
                var[k] += (grad * sigma[i]).powi(2);
            }
        }
    }

    let unit = 1.0 / inputs.lag_unit_s; // converts scaled rates to 1/s
    let est = |k: usize, scale: f64| Estimate::new(base_out[k] * scale, var[k].sqrt() * scale);

    let mut consistency = Vec::new();
    let p3_pred = base.noise_a / ((base.x - 1.0) * base.fast_group);
    if p3_pred != 0.0 {
        consistency.push((
            "p3p3_amplitude".to_string(),
            inputs.fit_p3p3.amplitude.value / p3_pred - 1.0,
        ));
    }
    let alpha = inputs.alpha.value;
    let slow_pred = base.noise_a * (1.0 + alpha * alpha) / ((base.x - 1.0) * base.slow_group);
    if slow_pred != 0.0 {
        consistency.push(("p2p2_slow_amplitude".to_string(), meas[M_SLOW_AMP] / slow_pred - 1.0));
    }
    // nu^2 = 2 kappa(1+l) gamma (x-1) holds by construction; report the
    // residual of the redundant relative amplitude instead.
    let rel_pred = base.noise_a / (base.x * (base.x - 1.0));
    consistency.push(("dn_rel_amplitude".to_string(), meas[M_AMP_REL] / rel_pred - 1.0));

    Ok(RecoveredParams {
        gamma_per_s: est(0, unit),
        nu_rad_per_s: Estimate::new(
            meas[M_FREQ_REL] * unit,
            sigma[M_FREQ_REL].max(0.0) * unit,
        ),
        x: est(1, 1.0),
        noise_a: est(2, 1.0),
        alpha: inputs.alpha,
        kappa_eff_per_s: {
            let e = est(3, unit);
            Estimate::new(e.value / 2.0, e.stderr / 2.0)
        },
        w_eff_per_s: est(4, unit),
        n_s: est(5, 1.0),
        rho_plus_theta: est(6, 1.0),
        fast_sum: est(7, 1.0),
        r_spin: (!degenerate).then(|| est(10, 1.0)),
        rho: (!degenerate).then(|| est(8, 1.0)),
        theta: (!degenerate).then(|| est(9, 1.0)),
        splitting_rad_per_s: Estimate::new(
            inputs.splitting.value * unit,
            inputs.splitting.stderr * unit,
        ),
        degenerate,
        notes,
        consistency,
    })
}

/// Ideal polarization filter in front of an intensity detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolarizationFilter {
    RightCircular,
    LeftCircular,
    /// Linear polarizer at `angle_rad` to the stationary polarization axis.
    Linear { angle_rad: f64 },
}

impl PolarizationFilter {
    fn project(&self, p1: f64, p2: f64, p3: f64) -> f64 {
        match self {
            PolarizationFilter::RightCircular => p3,
            PolarizationFilter::LeftCircular => -p3,
            PolarizationFilter::Linear { angle_rad } => {
                let two_phi = 2.0 * angle_rad;
                two_phi.cos() * p1 + two_phi.sin() * p2
            }
        }
    }
}

/// Relative intensity fluctuation series behind an ideal polarization
/// filter: `I = n (1 + P_proj)/2`, reported as `I/<I> - 1`.
#[derive(Clone, Debug)]
pub struct FilteredSeries {
    pub filter: PolarizationFilter,
    pub dt_stored: f64,
    pub members: Vec<Vec<f64>>,
    /// `<I>` in units of `n_s`.
    pub mean_intensity: f64,
}

pub fn filtered_intensity(series: &FluctuationSeries, filter: PolarizationFilter) -> FilteredSeries {
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(series.members.len());
    let mut mean = 0.0;
    let mut count = 0usize;
    for m in &series.members {
        let mut member = Vec::with_capacity(m.dn_rel.len());
        for k in 0..m.dn_rel.len() {
            let p2 = m.p2[k];
            let p3 = m.p3[k];
            let p1 = (1.0 - p2 * p2 - p3 * p3).max(0.0).sqrt();
            let proj = filter.project(p1, p2, p3);
            let intensity = (1.0 + m.dn_rel[k]) * (1.0 + proj) / 2.0;
            mean += intensity;
            count += 1;
            member.push(intensity);
        }
        raw.push(member);
    }
    mean /= count.max(1) as f64;
    for member in &mut raw {
        for v in member.iter_mut() {
            *v = *v / mean - 1.0;
        }
    }
    FilteredSeries {
        filter,
        dt_stored: series.dt_stored,
        members: raw,
        mean_intensity: mean,
    }
}

/// Filtered-intensity noise record. `relative` is reported as the mean of
/// the intensity and projected-polarization contributions: for ideal filters
/// the raw autocorrelation of `I/<I> - 1` is their sum, so
/// `relative = raw / 2`.
#[derive(Clone, Debug)]
pub struct FilteredNoise {
    pub lags: Vec<f64>,
    pub relative: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
    pub raw_autocorr: Vec<f64>,
}

pub fn filtered_relative_noise(
    fs: &FilteredSeries,
    max_lag: f64,
    lag_step: f64,
) -> Result<FilteredNoise> {
    let grid = lag_grid(fs.dt_stored, max_lag, lag_step)?;
    // Center the already-relative channel.
    let mut mean = 0.0;
    let mut count = 0usize;
    for m in &fs.members {
        mean += m.iter().sum::<f64>();
        count += m.len();
    }
    mean /= count.max(1) as f64;
    let centered: Vec<Vec<f64>> = fs
        .members
        .iter()
        .map(|m| m.iter().map(|v| v - mean).collect())
        .collect();
    let (raw, se) = corr_batched(&centered, &centered, &grid)?;
    Ok(FilteredNoise {
        lags: grid.lags,
        relative: raw.iter().map(|v| v / 2.0).collect(),
        stderr: se.map(|s| s.iter().map(|v| v / 2.0).collect()),
        raw_autocorr: raw,
    })
}
