//! Langevin simulation of the quantum-noise driven fluctuations, in a
//! linearized mode (Euler-Maruyama on the 5x5 system) and a full nonlinear
//! mode (nonlinear drift with the stationary-point noise amplitudes).
//!
//! Ensembles are reproducible and embarrassingly parallel: every member owns
//! a counter-based RNG stream keyed by `(seed, member index)`, so results do
//! not depend on scheduling or on the number of worker threads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::aligned_rhs_unchecked;
use crate::error::Error;
use crate::linear::{numeric_eigensystem, LinearSystem};
use crate::math::{cross3, norm3, scale3, sub3};
use crate::params::{derive, nondimensionalize, LaserParams};
use crate::Result;

/// Simulation flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Linearized,
    Nonlinear,
}

impl SimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SimMode::Linearized => "linearized",
            SimMode::Nonlinear => "nonlinear",
        }
    }
}

/// Configuration of a stochastic run. All times in units of `1/gamma`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Integration step.
    pub dt: f64,
    pub mode: SimMode,
    /// Recorded duration per ensemble member (after burn-in).
    pub duration: f64,
    /// Discarded initial stretch; defaults to twice 10x the slowest decay
    /// time `1/(rho + theta)`.
    pub burn_in: Option<f64>,
    /// Number of independent trajectories.
    pub ensemble: usize,
    /// Keep every `store_every`-th integration step.
    pub store_every: usize,
    /// Freeze the intensity-noise amplitude at its stationary value instead
    /// of tracking the instantaneous photon number (nonlinear mode only).
    pub frozen_noise: bool,
}

impl NoiseConfig {
    /// Step-size ceiling for the given parameter point: the step must
    /// resolve the fastest decay and at least a tenth of the oscillation
    /// period with a factor-50 margin.
    pub fn dt_limit(derived: &crate::params::DerivedParams) -> f64 {
        let (_, fast) = derived.stability_sums();
        let nu = derived.nu_scaled();
        let mut limit = (1.0 / derived.x).min(2.0 * std::f64::consts::PI / (10.0 * nu));
        if fast > 0.0 {
            limit = limit.min(1.0 / fast);
        }
        0.02 * limit
    }

    pub fn resolved_burn_in(&self, derived: &crate::params::DerivedParams) -> f64 {
        let (slow, _) = derived.stability_sums();
        self.burn_in
            .unwrap_or(if slow > 0.0 { 20.0 / slow } else { 0.0 })
    }

    pub fn validate(&self, derived: &crate::params::DerivedParams) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration > 0.0) {
            return Err(Error::InvalidInput(
                "dt and duration must be positive".into(),
            ));
        }
        if self.ensemble == 0 || self.store_every == 0 {
            return Err(Error::InvalidInput(
                "ensemble and store_every must be >= 1".into(),
            ));
        }
        let limit = Self::dt_limit(derived);
        if self.dt > limit {
            return Err(Error::StepTooLarge {
                dt: self.dt,
                limit,
            });
        }
        let (slow, _) = derived.stability_sums();
        if slow > 0.0 {
            let burn = self.resolved_burn_in(derived);
            if burn < 5.0 / slow {
                return Err(Error::InvalidInput(format!(
                    "burn-in {burn} below 5x the slowest decay time {}",
                    5.0 / slow
                )));
            }
        }
        Ok(())
    }
}

/// Channels of one ensemble member: relative photon-number deviation and the
/// two polarization components, sampled on a uniform grid.
#[derive(Clone, Debug, Default)]
pub struct MemberSeries {
    pub dn_rel: Vec<f64>,
    pub p2: Vec<f64>,
    pub p3: Vec<f64>,
}

/// Provenance of a fluctuation series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub mode: SimMode,
    pub frozen_noise: bool,
    pub params_hash: u64,
    pub gamma_per_s: f64,
    pub n_s: f64,
    pub dt_integration: f64,
}

/// Stationary fluctuation time series of an ensemble, scaled time grid with
/// spacing `dt_stored` shared by all members.
#[derive(Clone, Debug)]
pub struct FluctuationSeries {
    pub dt_stored: f64,
    pub members: Vec<MemberSeries>,
    pub provenance: Provenance,
}

impl FluctuationSeries {
    pub fn samples_per_member(&self) -> usize {
        self.members.first().map_or(0, |m| m.dn_rel.len())
    }

    /// Recorded duration per member in scaled time.
    pub fn member_duration(&self) -> f64 {
        self.samples_per_member() as f64 * self.dt_stored
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples_per_member();
        for (k, m) in self.members.iter().enumerate() {
            if m.dn_rel.len() != n || m.p2.len() != n || m.p3.len() != n {
                return Err(Error::InvalidInput(format!(
                    "member {k} has inconsistent channel lengths"
                )));
            }
            let finite = m
                .dn_rel
                .iter()
                .chain(&m.p2)
                .chain(&m.p3)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!(
                    "member {k} contains non-finite samples"
                )));
            }
        }
        Ok(())
    }

    /// CSV export: `t_scaled,member,dn_rel,p2,p3`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_scaled,member,dn_rel,p2,p3")?;
        for (idx, m) in self.members.iter().enumerate() {
            for k in 0..m.dn_rel.len() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    k as f64 * self.dt_stored,
                    idx,
                    m.dn_rel[k],
                    m.p2[k],
                    m.p3[k]
                )?;
            }
        }
        Ok(())
    }

    /// Compact binary frame, little endian. Layout:
    ///
    /// ```text
    /// magic   b"VPFS"                      4 bytes
    /// version u32                          4
    /// params_hash u64, seed u64            16
    /// mode u8, frozen u8, pad [u8; 6]      8
    /// n_members u64, samples_per_member u64
    /// dt_stored f64, dt_integration f64, gamma_per_s f64, n_s f64
    /// data: per member, samples * (dn_rel, p2, p3) as f64
    /// ```
    pub fn write_frame(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"VPFS")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.provenance.params_hash.to_le_bytes())?;
        w.write_all(&self.provenance.seed.to_le_bytes())?;
        let mode = match self.provenance.mode {
            SimMode::Linearized => 0u8,
            SimMode::Nonlinear => 1u8,
        };
        w.write_all(&[mode, self.provenance.frozen_noise as u8, 0, 0, 0, 0, 0, 0])?;
        w.write_all(&(self.members.len() as u64).to_le_bytes())?;
        w.write_all(&(self.samples_per_member() as u64).to_le_bytes())?;
        for v in [
            self.dt_stored,
            self.provenance.dt_integration,
            self.provenance.gamma_per_s,
            self.provenance.n_s,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for m in &self.members {
            for k in 0..m.dn_rel.len() {
                w.write_all(&m.dn_rel[k].to_le_bytes())?;
                w.write_all(&m.p2[k].to_le_bytes())?;
                w.write_all(&m.p3[k].to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_frame(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VPFS" {
            return Err(Error::MalformedFile("bad magic, not a series frame".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(Error::MalformedFile("unsupported frame version".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let params_hash = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        let mut flags = [0u8; 8];
        r.read_exact(&mut flags)?;
        let mode = match flags[0] {
            0 => SimMode::Linearized,
            1 => SimMode::Nonlinear,
            other => {
                return Err(Error::MalformedFile(format!("unknown mode byte {other}")))
            }
        };
        r.read_exact(&mut u64buf)?;
        let n_members = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let samples = u64::from_le_bytes(u64buf) as usize;
        let mut f64s = [0.0f64; 4];
        for slot in &mut f64s {
            r.read_exact(&mut u64buf)?;
            *slot = f64::from_le_bytes(u64buf);
        }
        if n_members.checked_mul(samples).is_none() || n_members > 1 << 24 {
            return Err(Error::MalformedFile("implausible frame dimensions".into()));
        }
        let mut members = Vec::with_capacity(n_members);
        for _ in 0..n_members {
            let mut m = MemberSeries {
                dn_rel: Vec::with_capacity(samples),
                p2: Vec::with_capacity(samples),
                p3: Vec::with_capacity(samples),
            };
            for _ in 0..samples {
                for chan in 0..3 {
                    r.read_exact(&mut u64buf)?;
                    let v = f64::from_le_bytes(u64buf);
                    match chan {
                        0 => m.dn_rel.push(v),
                        1 => m.p2.push(v),
                        _ => m.p3.push(v),
                    }
                }
            }
            members.push(m);
        }
        Ok(FluctuationSeries {
            dt_stored: f64s[0],
            members,
            provenance: Provenance {
                seed,
                mode,
                frozen_noise: flags[1] != 0,
                params_hash,
                gamma_per_s: f64s[2],
                n_s: f64s[3],
                dt_integration: f64s[1],
            },
        })
    }
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

/// Euler-Maruyama integration of the linearized Langevin system.
///
/// Gaussian increments have covariance `N * dt`; burn-in is discarded before
/// recording. Deterministic for a fixed `(seed, config)`.
pub fn simulate_linear(sys: &LinearSystem, cfg: &NoiseConfig) -> Result<FluctuationSeries> {
    let eig = numeric_eigensystem(sys)?;
    for t in &eig {
        if t.lambda.re >= 0.0 {
            return Err(Error::UnstableSystem {
                re: t.lambda.re,
                im: t.lambda.im,
            });
        }
    }
    cfg.validate(&sys.derived)?;

    let m = sys.drift.0;
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    // Only diagonal diffusion entries drive the system.
    let channels: Vec<(usize, f64)> = (0..5)
        .filter(|&k| sys.diffusion.0[k][k] > 0.0)
        .map(|k| (k, (sys.diffusion.0[k][k]).sqrt() * sqrt_dt))
        .collect();

    let burn_steps = (cfg.resolved_burn_in(&sys.derived) / dt).round() as usize;
    let record_steps = (cfg.duration / dt).round() as usize;
    let samples = record_steps / cfg.store_every;
    let n_s = sys.derived.n_s;

    let members: Vec<MemberSeries> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|idx| {
            let mut rng = member_rng(cfg.seed, idx);
            let mut z = [0.0f64; 5];
            let mut out = MemberSeries {
                dn_rel: Vec::with_capacity(samples),
                p2: Vec::with_capacity(samples),
                p3: Vec::with_capacity(samples),
            };
            let step = |z: &mut [f64; 5], rng: &mut ChaCha8Rng| {
                let mut next = *z;
                for i in 0..5 {
                    let row = &m[i];
                    next[i] += dt
                        * (row[0] * z[0]
                            + row[1] * z[1]
                            + row[2] * z[2]
                            + row[3] * z[3]
                            + row[4] * z[4]);
                }
                for &(k, sigma) in &channels {
                    let xi: f64 = rng.sample(StandardNormal);
                    next[k] += sigma * xi;
                }
                *z = next;
            };
            for _ in 0..burn_steps {
                step(&mut z, &mut rng);
            }
            for s in 0..record_steps {
                step(&mut z, &mut rng);
                if (s + 1).is_multiple_of(cfg.store_every) && out.dn_rel.len() < samples {
                    out.dn_rel.push(z[1] / n_s);
                    out.p2.push(z[3]);
                    out.p3.push(z[4]);
                }
            }
            out
        })
        .collect();

    let series = FluctuationSeries {
        dt_stored: dt * cfg.store_every as f64,
        members,
        provenance: Provenance {
            seed: cfg.seed,
            mode: SimMode::Linearized,
            frozen_noise: cfg.frozen_noise,
            params_hash: fingerprint_system(sys),
            gamma_per_s: sys.gamma_per_s,
            n_s,
            dt_integration: dt,
        },
    };
    series.validate()?;
    Ok(series)
}

fn fingerprint_system(sys: &LinearSystem) -> u64 {
    let fields: Vec<f64> = sys
        .drift
        .0
        .iter()
        .flatten()
        .chain(sys.diffusion.0.iter().flatten())
        .copied()
        .collect();
    crate::math::fnv1a(fields.iter().flat_map(|f| f.to_bits().to_le_bytes()))
}

/// Full nonlinear Langevin simulation around the stationary point.
///
/// The drift is the nonlinear aligned-model right-hand side; stochastic
/// increments act on the photon number and, in the local tangent plane of
/// `P`, on the two polarization degrees of freedom, with the stationary
/// diffusion amplitudes. The intensity-noise amplitude tracks the
/// instantaneous photon number unless `frozen_noise` is set. Output channels
/// are deviations from the stationary values.
pub fn simulate_nonlinear(params: &LaserParams, cfg: &NoiseConfig) -> Result<FluctuationSeries> {
    let derived = derive(params)?;
    derived.require_lasing("simulate_nonlinear")?;
    derived.require_polarization_stable()?;
    cfg.validate(&derived)?;

    let scaled = nondimensionalize(params);
    let stationary = crate::dynamics::find_stationary(&scaled)?;
    let n_s = stationary.photons;
    let kappa_eff = scaled.kappa_eff();
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let sigma_p = (2.0 * kappa_eff / n_s).sqrt() * sqrt_dt;
    let sigma_n_frozen = (2.0 * kappa_eff * n_s).sqrt() * sqrt_dt;

    let burn_steps = (cfg.resolved_burn_in(&derived) / dt).round() as usize;
    let record_steps = (cfg.duration / dt).round() as usize;
    let samples = record_steps / cfg.store_every;

    let results: Vec<Result<MemberSeries>> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|idx| {
            let mut rng = member_rng(cfg.seed, idx);
            let mut state = stationary;
            let mut out = MemberSeries {
                dn_rel: Vec::with_capacity(samples),
                p2: Vec::with_capacity(samples),
                p3: Vec::with_capacity(samples),
            };
            let total = burn_steps + record_steps;
            for s in 0..total {
                let rhs = aligned_rhs_unchecked(&state, &scaled);
                state.carriers += dt * rhs.carriers;
                state.spin_diff += dt * rhs.spin_diff;

                let xi_n: f64 = rng.sample(StandardNormal);
                let sigma_n = if cfg.frozen_noise {
                    sigma_n_frozen
                } else {
                    (2.0 * kappa_eff * state.photons.max(0.0)).sqrt() * sqrt_dt
                };
                state.photons += dt * rhs.photons + sigma_n * xi_n;
                if state.photons < 0.0 {
                    // Reflecting floor; reached with negligible probability
                    // at valid parameters.
                    state.photons = -state.photons;
                }

                let mut p = state.stokes;
                for k in 0..3 {
                    p[k] += dt * rhs.stokes[k];
                }
                // Tangent-plane noise followed by renormalization (small-
                // noise approximation on the sphere).
                let mut t2 = sub3([0.0, 1.0, 0.0], scale3(p, p[1]));
                let t2n = norm3(t2);
                if t2n < 1e-6 {
                    t2 = sub3([0.0, 0.0, 1.0], scale3(p, p[2]));
                }
                let t2 = scale3(t2, 1.0 / norm3(t2));
                let t3 = cross3(p, t2);
                let xi2: f64 = rng.sample(StandardNormal);
                let xi3: f64 = rng.sample(StandardNormal);
                for k in 0..3 {
                    p[k] += sigma_p * (xi2 * t2[k] + xi3 * t3[k]);
                }
                let norm = norm3(p);
                state.stokes = scale3(p, 1.0 / norm);

                if !state.photons.is_finite()
                    || !state.carriers.is_finite()
                    || state.photons > 1e12 * n_s
                    || state.carriers > 1e12 * stationary.carriers
                {
                    return Err(Error::StateDiverged {
                        t: s as f64 * dt,
                        what: format!(
                            "n = {:.3e}, D = {:.3e}",
                            state.photons, state.carriers
                        ),
                    });
                }

                if s >= burn_steps {
                    let rec_step = s - burn_steps;
                    if (rec_step + 1).is_multiple_of(cfg.store_every) && out.dn_rel.len() < samples {
                        out.dn_rel.push((state.photons - n_s) / n_s);
                        out.p2.push(state.stokes[1]);
                        out.p3.push(state.stokes[2]);
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mut members = Vec::with_capacity(results.len());
    for r in results {
        members.push(r?);
    }
    let series = FluctuationSeries {
        dt_stored: dt * cfg.store_every as f64,
        members,
        provenance: Provenance {
            seed: cfg.seed,
            mode: SimMode::Nonlinear,
            frozen_noise: cfg.frozen_noise,
            params_hash: params.fingerprint(),
            gamma_per_s: params.gamma,
            n_s,
            dt_integration: dt,
        },
    };
    series.validate()?;
    Ok(series)
}
