//! Deterministic nonlinear evolution of `(D, n, d, P)`.
//!
//! The Stokes vector is driven by two mechanisms: a gain-loss drift that
//! pulls `P` toward the pole of highest net gain, and a rotation around the
//! combined frequency-anisotropy axis. The drift is implemented as the
//! tangent-plane projection of the drift axis, which keeps `dP/dt`
//! orthogonal to `P` identically and so preserves the unit sphere.
//!
//! Everything here works in scaled units (time in `1/gamma`).

use std::io::Write;

use crate::error::Error;
use crate::math::{add3, cross3, dot3, norm3, scale3, sub3};
use crate::params::{LaserState, ScaledParams};
use crate::Result;

/// Time derivative of a [`LaserState`], in scaled units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    pub carriers: f64,
    pub photons: f64,
    pub spin_diff: f64,
    pub stokes: [f64; 3],
}

impl StateDerivative {
    fn scaled_add(s: &LaserState, k: &StateDerivative, h: f64) -> LaserState {
        LaserState {
            carriers: s.carriers + h * k.carriers,
            photons: s.photons + h * k.photons,
            spin_diff: s.spin_diff + h * k.spin_diff,
            stokes: add3(s.stokes, scale3(k.stokes, h)),
        }
    }

    /// Euclidean norm over all six components.
    pub fn norm(&self) -> f64 {
        (self.carriers * self.carriers
            + self.photons * self.photons
            + self.spin_diff * self.spin_diff
            + dot3(self.stokes, self.stokes))
        .sqrt()
    }
}

/// Gain-loss drift axis: `w(1+P.g) (D g + d e3) - 2 kappa(1+P.l) l`.
///
/// The density difference acts as a gain anisotropy `d/D` along `e3`; the
/// same decomposition underlies the effective-anisotropy picture.
pub fn gain_loss_axis(state: &LaserState, params: &ScaledParams) -> [f64; 3] {
    let gain = params.w() * (1.0 + dot3(state.stokes, params.gain));
    let loss = params.kappa2 * (1.0 + dot3(state.stokes, params.loss));
    let mut axis = scale3(params.gain, gain * state.carriers);
    axis[2] += gain * state.spin_diff;
    sub3(axis, scale3(params.loss, loss))
}

/// Rotation axis: `Omega + w(1+P.g) alpha d e3` (the density difference
/// shifts the mode frequencies through the linewidth enhancement factor).
pub fn rotation_axis(state: &LaserState, params: &ScaledParams) -> [f64; 3] {
    let gain = params.w() * (1.0 + dot3(state.stokes, params.gain));
    let mut axis = params.omega;
    axis[2] += gain * params.alpha * state.spin_diff;
    axis
}

/// Right-hand side of the full rate equations for arbitrary anisotropy
/// vectors. Pure function; `dP/dt` is orthogonal to `P` by construction.
pub fn general_rhs(state: &LaserState, params: &ScaledParams) -> StateDerivative {
    let p = state.stokes;
    let gain = params.w() * (1.0 + dot3(p, params.gain));
    let loss = params.kappa2 * (1.0 + dot3(p, params.loss));
    let d = state.carriers;
    let n = state.photons;
    let diff = state.spin_diff;
    let p3 = p[2];

    let stim = gain * d * n;
    let hole = gain * diff * n * p3;

    let carriers = -stim - (d - params.d0) - hole;
    let photons = stim - loss * n + hole;
    let spin_diff = -gain * diff * n - params.big_gamma * diff - gain * d * n * p3;

    // Tangent-plane projection of the gain-loss axis plus rotation.
    let u = gain_loss_axis(state, params);
    let pull = sub3(u, scale3(p, dot3(p, u)));
    let rot = cross3(rotation_axis(state, params), p);

    StateDerivative {
        carriers,
        photons,
        spin_diff,
        stokes: add3(pull, rot),
    }
}

/// Component form of the rate equations for anisotropies along `e1`.
///
/// Agrees with [`general_rhs`] to machine precision on aligned inputs.
pub fn aligned_rhs(state: &LaserState, params: &ScaledParams) -> Result<StateDerivative> {
    params
        .redimensionalize()
        .check_aligned("aligned_rhs")?;
    Ok(aligned_rhs_unchecked(state, params))
}

pub(crate) fn aligned_rhs_unchecked(state: &LaserState, params: &ScaledParams) -> StateDerivative {
    let [p1, p2, p3] = state.stokes;
    let g1 = params.gain[0];
    let l1 = params.loss[0];
    let omega1 = params.omega[0];
    let gain = params.w() * (1.0 + p1 * g1);
    let loss = params.kappa2 * (1.0 + p1 * l1);
    let d = state.carriers;
    let n = state.photons;
    let diff = state.spin_diff;

    let stim = gain * d * n;
    let hole = gain * diff * n * p3;

    let carriers = -stim - (d - params.d0) - hole;
    let photons = stim - loss * n + hole;
    let spin_diff = -gain * diff * n - params.big_gamma * diff - gain * d * n * p3;

    // u1 is the e1 component of the gain-loss drift axis; the density
    // difference contributes the e3 component gain*diff.
    let u1 = gain * d * g1 - loss * l1;
    let gd = gain * diff;
    let ga = gain * params.alpha * diff;

    let dp1 = -u1 * (p1 * p1 - 1.0) - gd * p1 * p3 - ga * p2;
    let dp2 = -u1 * p1 * p2 - gd * p2 * p3 + ga * p1 - omega1 * p3;
    let dp3 = -u1 * p1 * p3 - gd * (p3 * p3 - 1.0) + omega1 * p2;

    StateDerivative {
        carriers,
        photons,
        spin_diff,
        stokes: [dp1, dp2, dp3],
    }
}

/// Stationary lasing state of the aligned model: `P = e1`, `d = 0`,
/// `D = 2 kappa (1+l) / (w (1+g))` and the photon number fixed by the
/// injection.
pub fn find_stationary(params: &ScaledParams) -> Result<LaserState> {
    params
        .redimensionalize()
        .check_aligned("find_stationary")?;
    let kappa_eff = params.kappa_eff();
    let w_eff = params.w_eff();
    let n_s = params.d0 / kappa_eff - 1.0 / w_eff;
    if n_s <= 0.0 {
        return Err(Error::BelowThreshold {
            x: w_eff * n_s + 1.0,
            context: "find_stationary",
        });
    }
    let state = LaserState {
        carriers: kappa_eff / w_eff,
        photons: n_s,
        spin_diff: 0.0,
        stokes: [1.0, 0.0, 0.0],
    };
    debug_assert!(
        aligned_rhs_unchecked(&state, params).norm()
            <= 1e-10 * (1.0 + n_s.max(state.carriers)),
        "stationary residual too large"
    );
    Ok(state)
}

/// Deterministic trajectory on a uniform time grid (scaled units).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LaserState>,
    /// Sum over steps of `| |P| - 1 |` before renormalization.
    pub renorm_total: f64,
    /// Largest single-step `| |P| - 1 |`.
    pub renorm_max_step: f64,
}

impl Trajectory {
    pub fn last(&self) -> &LaserState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// CSV export with the time both in seconds and in scaled units.
    pub fn write_csv<W: Write>(&self, mut w: W, time_unit_s: f64) -> Result<()> {
        writeln!(w, "t_seconds,t_scaled,D,n,d,P1,P2,P3")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t * time_unit_s,
                t,
                s.carriers,
                s.photons,
                s.spin_diff,
                s.stokes[0],
                s.stokes[1],
                s.stokes[2]
            )?;
        }
        Ok(())
    }
}

fn rk4_step(state: &LaserState, params: &ScaledParams, dt: f64) -> LaserState {
    let k1 = general_rhs(state, params);
    let k2 = general_rhs(&StateDerivative::scaled_add(state, &k1, 0.5 * dt), params);
    let k3 = general_rhs(&StateDerivative::scaled_add(state, &k2, 0.5 * dt), params);
    let k4 = general_rhs(&StateDerivative::scaled_add(state, &k3, dt), params);
    LaserState {
        carriers: state.carriers
            + dt / 6.0 * (k1.carriers + 2.0 * k2.carriers + 2.0 * k3.carriers + k4.carriers),
        photons: state.photons
            + dt / 6.0 * (k1.photons + 2.0 * k2.photons + 2.0 * k3.photons + k4.photons),
        spin_diff: state.spin_diff
            + dt / 6.0
                * (k1.spin_diff + 2.0 * k2.spin_diff + 2.0 * k3.spin_diff + k4.spin_diff),
        stokes: [
            state.stokes[0]
                + dt / 6.0
                    * (k1.stokes[0] + 2.0 * k2.stokes[0] + 2.0 * k3.stokes[0] + k4.stokes[0]),
            state.stokes[1]
                + dt / 6.0
                    * (k1.stokes[1] + 2.0 * k2.stokes[1] + 2.0 * k3.stokes[1] + k4.stokes[1]),
            state.stokes[2]
                + dt / 6.0
                    * (k1.stokes[2] + 2.0 * k2.stokes[2] + 2.0 * k3.stokes[2] + k4.stokes[2]),
        ],
    }
}

/// One RK4 step with the negative-photon guard: a step that would drive
/// `n < 0` is retried as two half steps, up to 10 halvings, instead of
/// clipping (clipping would bias long-run statistics).
fn guarded_step(state: &LaserState, params: &ScaledParams, dt: f64, depth: u32) -> LaserState {
    let next = rk4_step(state, params, dt);
    if next.photons >= 0.0 || depth >= 10 {
        let mut next = next;
        if next.photons < 0.0 {
            next.photons = 0.0;
        }
        next
    } else {
        let half = guarded_step(state, params, 0.5 * dt, depth + 1);
        guarded_step(&half, params, 0.5 * dt, depth + 1)
    }
}

/// Largest rate in the scaled system; the integrator step must stay well
/// below its inverse.
pub fn max_rate(params: &ScaledParams) -> f64 {
    let loss_ceiling = params.kappa2 * (1.0 + norm3(params.loss));
    loss_ceiling
        .max(params.big_gamma)
        .max(norm3(params.omega))
        .max(1.0)
}

/// Classical fixed-step RK4 integration with post-step renormalization of
/// the Stokes vector.
pub fn integrate(
    initial: &LaserState,
    params: &ScaledParams,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(t_end > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "t_end and dt must be positive, got t_end = {t_end}, dt = {dt}"
        )));
    }
    let limit = 0.01 / max_rate(params);
    if dt > limit {
        return Err(Error::StepTooLarge { dt, limit });
    }

    // Divergence guards relative to the stationary scale when it exists,
    // otherwise relative to the initial condition.
    let (ref_n, ref_d) = match find_stationary(params) {
        Ok(s) => (s.photons.max(1.0), s.carriers.max(1.0)),
        Err(_) => (initial.photons.max(1.0), initial.carriers.max(params.d0).max(1.0)),
    };

    let steps = (t_end / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut state = *initial;
    let mut renorm_total = 0.0;
    let mut renorm_max: f64 = 0.0;
    times.push(0.0);
    states.push(state);

    for k in 1..=steps {
        state = guarded_step(&state, params, dt, 0);
        let norm = norm3(state.stokes);
        let drift = (norm - 1.0).abs();
        renorm_total += drift;
        renorm_max = renorm_max.max(drift);
        state.stokes = scale3(state.stokes, 1.0 / norm);

        let t = k as f64 * dt;
        if state.photons > 1e12 * ref_n || state.carriers > 1e12 * ref_d {
            return Err(Error::StateDiverged {
                t,
                what: format!(
                    "n = {:.3e} (ref {ref_n:.3e}), D = {:.3e} (ref {ref_d:.3e})",
                    state.photons, state.carriers
                ),
            });
        }
        times.push(t);
        states.push(state);
    }

    Ok(Trajectory {
        times,
        states,
        renorm_total,
        renorm_max_step: renorm_max,
    })
}
