//! The linearized Langevin system at the stationary lasing point.
//!
//! State order is `(dD, dn, d, P2, P3)`: carrier and photon number
//! deviations, density difference, polarization direction and ellipticity.
//! The drift decouples into a 2x2 intensity block and a 3x3 polarization
//! block, so the exact eigensystem follows from a quadratic and a cubic.
//!
//! All quantities are kept in scaled units (time in `1/gamma`); the
//! conversion rate is carried along for I/O.
//!
//! Note on orientation: the drift matrix here uses the opposite sign
//! convention for the density-difference axis than [`crate::dynamics`]
//! (`d -> -d`, a similarity transformation). Correlations of the observable
//! channels `(dn, P2, P3)` are identical in both conventions; only direct
//! comparisons of the `d` component need the mirror applied.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{cdot, cvec_norm, cvec_scale, solve_cubic_monic, solve_quadratic_monic, Mat5};
use crate::params::{DerivedParams, LaserParams};
use crate::Result;

/// Labels of the five state components, in order.
pub const STATE_LABELS: [&str; 5] = ["dD", "dn", "d", "P2", "P3"];

/// Linearized drift and diffusion at the stationary point, scaled units.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    /// Drift matrix (rates in units of `gamma`).
    pub drift: Mat5,
    /// White-noise diffusion matrix: two-sided spectral density of the
    /// Langevin forcing, consumed by integrators as variance per unit
    /// (scaled) time.
    pub diffusion: Mat5,
    /// Dimensionless parameter snapshot used to build the system.
    pub derived: DerivedParams,
    pub alpha: f64,
    /// Scaled effective gain rate `w(1+g)/gamma`.
    pub w_eff: f64,
    /// Scaled effective loss rate `2 kappa (1+l)/gamma`.
    pub kappa_eff: f64,
    /// Scaled frequency anisotropy `Omega/gamma` (equals `theta/alpha`).
    pub omega_scaled: f64,
    pub gamma_per_s: f64,
}

impl LinearSystem {
    /// Optional carrier-noise injection for sensitivity studies: adds
    /// diffusion on the `dD` and `d` axes (both zero in the quantum-noise
    /// model, where injection shot noise is negligible against the field
    /// noise).
    pub fn with_carrier_noise(mut self, n_dd: f64, n_d: f64) -> Self {
        self.diffusion.0[0][0] += n_dd;
        self.diffusion.0[2][2] += n_d;
        self
    }
}

/// Build the 5x5 Langevin system from the derived parameters.
pub fn build_linear_system(derived: &DerivedParams, params: &LaserParams) -> Result<LinearSystem> {
    derived.require_lasing("build_linear_system")?;
    let x = derived.x;
    let rho = derived.rho;
    let r = derived.r_spin;
    let alpha = params.alpha;
    let gamma = params.gamma;
    let w_eff = params.w_eff() / gamma;
    let kappa_eff = params.kappa_eff() / gamma;
    let omega = params.omega.e1() / gamma; // = theta/alpha for alpha > 0
    let nu2 = derived.nu_scaled().powi(2); // = kappa_eff * (x - 1)

    let mut drift = Mat5::zeros();
    // Intensity block.
    drift.0[0][0] = -x;
    drift.0[0][1] = -nu2 / (x - 1.0);
    drift.0[1][0] = x - 1.0;
    // Polarization block.
    drift.0[2][2] = -(x + r);
    drift.0[2][4] = nu2 / w_eff;
    drift.0[3][2] = -w_eff * alpha;
    drift.0[3][3] = -rho;
    drift.0[3][4] = -omega;
    drift.0[4][2] = -w_eff;
    drift.0[4][3] = omega;
    drift.0[4][4] = -rho;

    let mut diffusion = Mat5::zeros();
    diffusion.0[1][1] = 2.0 * kappa_eff * derived.n_s;
    diffusion.0[3][3] = 2.0 * kappa_eff / derived.n_s;
    diffusion.0[4][4] = 2.0 * kappa_eff / derived.n_s;

    Ok(LinearSystem {
        drift,
        diffusion,
        derived: *derived,
        alpha,
        w_eff,
        kappa_eff,
        omega_scaled: omega,
        gamma_per_s: gamma,
    })
}

/// Eigenvalue with its left (row) and right (column) eigenvectors.
///
/// Left and right vectors are normalized to the unconjugated biorthogonal
/// pairing `left_i . right_j = delta_ij`.
#[derive(Clone, Copy, Debug)]
pub struct EigenTriple {
    /// Eigenvalue in units of `gamma`.
    pub lambda: Complex64,
    pub left: [Complex64; 5],
    pub right: [Complex64; 5],
}

const C0: Complex64 = Complex64::new(0.0, 0.0);

fn cvec5(parts: [Complex64; 5]) -> [Complex64; 5] {
    parts
}

/// Leading-order closed-form eigensystem, valid for `gamma << nu`.
///
/// Ordering: intensity pair (`+i nu` first), the real polarization mode
/// `-(rho + theta)`, then the polarization pair (`+i nu` first). The caller
/// should treat the result with caution when `gamma/nu > 0.3`.
pub fn analytic_eigensystem(derived: &DerivedParams, params: &LaserParams) -> [EigenTriple; 5] {
    let x = derived.x;
    let nu = derived.nu_scaled();
    let alpha = params.alpha;
    let w_eff = params.w_eff() / params.gamma;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let i = Complex64::i();

    let lam1 = Complex64::new(-0.5 * x, nu);
    let a1 = cvec_scale(
        &cvec5([-i * ((x - 1.0) / nu), 1.0.into(), C0, C0, C0]),
        inv_sqrt2.into(),
    );
    let b1 = cvec_scale(
        &cvec5([i * (nu / (x - 1.0)), 1.0.into(), C0, C0, C0]),
        inv_sqrt2.into(),
    );

    let lam3 = Complex64::new(-(derived.rho + derived.theta), 0.0);
    let a3 = cvec5([C0, C0, C0, 1.0.into(), (-alpha).into()]);
    let b3 = cvec5([C0, C0, C0, 1.0.into(), C0]);

    let fast = derived.x + derived.r_spin + derived.rho - derived.theta;
    let lam4 = Complex64::new(-0.5 * fast, nu);
    let a4 = cvec_scale(
        &cvec5([C0, C0, i * (w_eff / nu), C0, 1.0.into()]),
        inv_sqrt2.into(),
    );
    let b4 = cvec_scale(
        &cvec5([C0, C0, -i * (nu / w_eff), alpha.into(), 1.0.into()]),
        inv_sqrt2.into(),
    );

    let conj_triple = |lam: Complex64, a: &[Complex64; 5], b: &[Complex64; 5]| EigenTriple {
        lambda: lam.conj(),
        left: a.map(|z| z.conj()),
        right: b.map(|z| z.conj()),
    };

    [
        EigenTriple {
            lambda: lam1,
            left: a1,
            right: b1,
        },
        conj_triple(lam1, &a1, &b1),
        EigenTriple {
            lambda: lam3,
            left: a3,
            right: b3,
        },
        EigenTriple {
            lambda: lam4,
            left: a4,
            right: b4,
        },
        conj_triple(lam4, &a4, &b4),
    ]
}

fn ccross(a: [Complex64; 3], b: [Complex64; 3]) -> [Complex64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn cnorm3(a: &[Complex64; 3]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Null vector of the rank-2 complex 3x3 matrix given by `rows` (the cross
/// product of two independent rows is orthogonal, in the unconjugated sense,
/// to all of them). Returns `None` when every row pair is close to parallel.
fn null_vector_3x3(rows: [[Complex64; 3]; 3], scale: f64) -> Option<[Complex64; 3]> {
    let candidates = [
        ccross(rows[0], rows[1]),
        ccross(rows[0], rows[2]),
        ccross(rows[1], rows[2]),
    ];
    let best = candidates
        .into_iter()
        .max_by(|a, b| cnorm3(a).total_cmp(&cnorm3(b)))?;
    if cnorm3(&best) <= 1e-12 * scale * scale {
        None
    } else {
        Some(best)
    }
}

/// Deterministic phase/scale normalization: `right` gets unit norm with its
/// largest component real positive, `left` is rescaled so `left.right = 1`.
fn normalize_pair(
    mut left: [Complex64; 5],
    mut right: [Complex64; 5],
) -> Option<([Complex64; 5], [Complex64; 5])> {
    let norm = cvec_norm(&right);
    if norm == 0.0 {
        return None;
    }
    let lead = right
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .copied()?;
    let phase = lead / lead.norm();
    for z in &mut right {
        *z /= phase * norm;
    }
    let pairing = cdot(&left, &right);
    if pairing.norm() <= 1e-8 * cvec_norm(&left) {
        return None;
    }
    for z in &mut left {
        *z /= pairing;
    }
    Some((left, right))
}

/// Exact eigensystem of the 5x5 drift via its block structure: the 2x2
/// intensity block in closed form, the 3x3 polarization block through its
/// characteristic cubic, eigenvectors by null-space cross products, all roots
/// Newton-polished.
///
/// Ordering matches [`analytic_eigensystem`]. Residuals
/// `|M b - lambda b| / |M|_F` are verified to be below `1e-10`.
pub fn numeric_eigensystem(sys: &LinearSystem) -> Result<[EigenTriple; 5]> {
    let m = &sys.drift.0;

    // 2x2 block (dD, dn).
    let (m00, m01, m10, m11) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let tr = m00 + m11;
    let det = m00 * m11 - m01 * m10;
    let mut pair2 = solve_quadratic_monic(-tr, det);
    pair2.sort_by(|a, b| b.im.total_cmp(&a.im));
    let mut triples = Vec::with_capacity(5);
    for lam in pair2 {
        let right_cands = [
            [Complex64::from(m01), lam - m00],
            [lam - m11, Complex64::from(m10)],
        ];
        let left_cands = [
            [Complex64::from(m10), lam - m00],
            [lam - m11, Complex64::from(m01)],
        ];
        let pick = |cands: [[Complex64; 2]; 2]| {
            cands
                .into_iter()
                .max_by(|a, b| {
                    let na = a[0].norm_sqr() + a[1].norm_sqr();
                    let nb = b[0].norm_sqr() + b[1].norm_sqr();
                    na.total_cmp(&nb)
                })
                .unwrap()
        };
        let r2 = pick(right_cands);
        let l2 = pick(left_cands);
        let right = [r2[0], r2[1], C0, C0, C0];
        let left = [l2[0], l2[1], C0, C0, C0];
        let (left, right) = normalize_pair(left, right).ok_or_else(|| {
            Error::DefectiveMatrix("intensity block eigenvector rank check failed".into())
        })?;
        triples.push(EigenTriple {
            lambda: lam,
            left,
            right,
        });
    }

    // 3x3 block (d, P2, P3).
    let b: [[f64; 3]; 3] = [
        [m[2][2], m[2][3], m[2][4]],
        [m[3][2], m[3][3], m[3][4]],
        [m[4][2], m[4][3], m[4][4]],
    ];
    let tr3 = b[0][0] + b[1][1] + b[2][2];
    let minors = (b[0][0] * b[1][1] - b[0][1] * b[1][0])
        + (b[0][0] * b[2][2] - b[0][2] * b[2][0])
        + (b[1][1] * b[2][2] - b[1][2] * b[2][1]);
    let det3 = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let roots = solve_cubic_monic(-tr3, minors, -det3);

    // Identify the real polarization relaxation mode. With a complex pair
    // present the real root is unambiguous; with three real roots take the
    // one nearest the slow-mode estimate -(rho + theta).
    let hint = -(sys.derived.rho + sys.derived.theta);
    let real_roots: Vec<Complex64> = roots.iter().copied().filter(|r| r.im == 0.0).collect();
    let lam3 = match real_roots.len() {
        1 => real_roots[0],
        0 => {
            return Err(Error::DefectiveMatrix(
                "characteristic cubic has no real root".into(),
            ))
        }
        _ => real_roots
            .iter()
            .copied()
            .min_by(|a, b| (a.re - hint).abs().total_cmp(&(b.re - hint).abs()))
            .unwrap(),
    };
    let mut rest: Vec<Complex64> = roots
        .iter()
        .copied()
        .filter(|r| *r != lam3)
        .collect();
    if rest.len() != 2 {
        // lam3 appeared multiple times: degenerate spectrum.
        return Err(Error::DefectiveMatrix(format!(
            "degenerate polarization spectrum near lambda = {lam3}"
        )));
    }
    rest.sort_by(|a, b| b.im.total_cmp(&a.im).then(b.re.total_cmp(&a.re)));

    let scale3 = b.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for lam in [lam3, rest[0], rest[1]] {
        let shifted = |transpose: bool| -> [[Complex64; 3]; 3] {
            let mut rows = [[C0; 3]; 3];
            for (i, row) in rows.iter_mut().enumerate() {
                for (j, slot) in row.iter_mut().enumerate() {
                    let entry = if transpose { b[j][i] } else { b[i][j] };
                    *slot = Complex64::from(entry) - if i == j { lam } else { C0 };
                }
            }
            rows
        };
        let right3 = null_vector_3x3(shifted(false), scale3).ok_or_else(|| {
            Error::DefectiveMatrix(format!("right eigenvector rank check failed at {lam}"))
        })?;
        let left3 = null_vector_3x3(shifted(true), scale3).ok_or_else(|| {
            Error::DefectiveMatrix(format!("left eigenvector rank check failed at {lam}"))
        })?;
        let right = [C0, C0, right3[0], right3[1], right3[2]];
        let left = [C0, C0, left3[0], left3[1], left3[2]];
        let (left, right) = normalize_pair(left, right).ok_or_else(|| {
            Error::DefectiveMatrix(format!("biorthogonal pairing degenerate at {lam}"))
        })?;
        triples.push(EigenTriple {
            lambda: lam,
            left,
            right,
        });
    }

    let out: [EigenTriple; 5] = triples.try_into().expect("five eigentriples");

    // Residual verification.
    let mnorm = sys.drift.frobenius_norm();
    for t in &out {
        let mut r_err: f64 = 0.0;
        let mut l_err: f64 = 0.0;
        for i in 0..5 {
            let mut mb = C0;
            let mut am = C0;
            for j in 0..5 {
                mb += m[i][j] * t.right[j];
                am += t.left[j] * m[j][i];
            }
            r_err = r_err.max((mb - t.lambda * t.right[i]).norm());
            l_err = l_err.max((am - t.lambda * t.left[i]).norm());
        }
        let l_scale = cvec_norm(&t.left).max(1.0);
        if r_err > 1e-10 * mnorm || l_err > 1e-10 * mnorm * l_scale {
            return Err(Error::DefectiveMatrix(format!(
                "eigen residual too large at lambda = {}: right {r_err:.2e}, left {l_err:.2e}",
                t.lambda
            )));
        }
    }
    Ok(out)
}

/// Evaluation mode for the fluctuation matrix: the full double sum over
/// eigenmode pairs, or the diagonal `i = j` approximation in which the modes
/// fluctuate independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumMode {
    Full,
    DiagonalOnly,
}

/// Two-time fluctuation matrix at lag `tau >= 0`, plus the largest imaginary
/// residue left after symmetrization.
#[derive(Clone, Copy, Debug)]
pub struct FluctuationMatrix {
    pub matrix: Mat5,
    pub imag_residual: f64,
}

/// Stationary fluctuation matrix
/// `F(tau) = sum_ij N_ij / (-lambda_i - conj(lambda_j)) exp(conj(lambda_j) tau) b_i (x) b_j^dagger`
/// with `N_ij = a_i N a_j^dagger`.
///
/// Requires every eigenvalue strictly stable; otherwise the mode integrals
/// diverge and [`Error::UnstableSystem`] is returned.
pub fn fluctuation_matrix(
    sys: &LinearSystem,
    triples: &[EigenTriple; 5],
    tau: f64,
    mode: SumMode,
) -> Result<FluctuationMatrix> {
    if tau < 0.0 {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    for t in triples {
        if t.lambda.re >= 0.0 {
            return Err(Error::UnstableSystem {
                re: t.lambda.re,
                im: t.lambda.im,
            });
        }
    }
    let n = &sys.diffusion.0;
    let mut acc = [[C0; 5]; 5];
    for (i, ti) in triples.iter().enumerate() {
        for (j, tj) in triples.iter().enumerate() {
            if mode == SumMode::DiagonalOnly && i != j {
                continue;
            }
            // N_ij = a_i N a_j^dagger
            let mut nij = C0;
            for k in 0..5 {
                for l in 0..5 {
                    if n[k][l] != 0.0 {
                        nij += ti.left[k] * n[k][l] * tj.left[l].conj();
                    }
                }
            }
            if nij == C0 {
                continue;
            }
            let denom = -ti.lambda - tj.lambda.conj();
            let factor = nij / denom * (tj.lambda.conj() * tau).exp();
            for k in 0..5 {
                for l in 0..5 {
                    acc[k][l] += factor * ti.right[k] * tj.right[l].conj();
                }
            }
        }
    }
    // Symmetrize; the exact result is a real symmetric covariance.
    let mut out = Mat5::zeros();
    let mut imag: f64 = 0.0;
    for k in 0..5 {
        for l in 0..5 {
            let sym = 0.5 * (acc[k][l] + acc[l][k]);
            out.0[k][l] = sym.re;
            imag = imag.max(sym.im.abs());
        }
    }
    Ok(FluctuationMatrix {
        matrix: out,
        imag_residual: imag,
    })
}

/// Propagate a real state deviation with the linear flow:
/// `z(t) = sum_i b_i exp(lambda_i t) (a_i . z0)`.
pub fn propagate(triples: &[EigenTriple; 5], z0: &[f64; 5], t: f64) -> [f64; 5] {
    let mut acc = [C0; 5];
    for tr in triples {
        let mut proj = C0;
        for k in 0..5 {
            proj += tr.left[k] * z0[k];
        }
        let factor = proj * (tr.lambda * t).exp();
        for k in 0..5 {
            acc[k] += factor * tr.right[k];
        }
    }
    acc.map(|z| z.re)
}

/// Where a correlation record came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RecordSource {
    Analytic,
    Empirical { seed: u64, mode: String },
}

/// Lag-resolved correlators of the observable channels.
///
/// `dn_dn_rel` is the photon-number autocorrelation normalized by `n_s^2`;
/// `dn_dn_abs` the unnormalized one. `p3p2` is the cross correlation with
/// the ellipticity leading in time. Lags are in units of `1/gamma`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub lags: Vec<f64>,
    pub dn_dn_abs: Vec<f64>,
    pub dn_dn_rel: Vec<f64>,
    pub p3p3: Vec<f64>,
    pub p3p2: Vec<f64>,
    pub p2p2: Vec<f64>,
    /// Batch-means standard errors (empirical records only), same order of
    /// channels.
    pub stderr: Option<CorrelatorStderr>,
    pub gamma_per_s: f64,
    pub n_s: f64,
    pub source: RecordSource,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelatorStderr {
    pub dn_dn_abs: Vec<f64>,
    pub dn_dn_rel: Vec<f64>,
    pub p3p3: Vec<f64>,
    pub p3p2: Vec<f64>,
    pub p2p2: Vec<f64>,
}

impl CorrelationRecord {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// CSV export: `tau_scaled,tau_seconds,dn_dn_abs,dn_dn_rel,p3p3,p3p2,p2p2`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "tau_scaled,tau_seconds,dn_dn_abs,dn_dn_rel,p3p3,p3p2,p2p2"
        )?;
        for (k, tau) in self.lags.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                tau,
                tau / self.gamma_per_s,
                self.dn_dn_abs[k],
                self.dn_dn_rel[k],
                self.p3p3[k],
                self.p3p2[k],
                self.p2p2[k]
            )?;
        }
        Ok(())
    }

    /// Standard errors as a CSV side file with the same lag column.
    pub fn write_stderr_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let se = self.stderr.as_ref().ok_or_else(|| {
            Error::InvalidInput("record carries no standard errors".into())
        })?;
        writeln!(
            w,
            "tau_scaled,se_dn_dn_abs,se_dn_dn_rel,se_p3p3,se_p3p2,se_p2p2"
        )?;
        for (k, tau) in self.lags.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                tau, se.dn_dn_abs[k], se.dn_dn_rel[k], se.p3p3[k], se.p3p2[k], se.p2p2[k]
            )?;
        }
        Ok(())
    }

    /// Attach standard errors written by
    /// [`CorrelationRecord::write_stderr_csv`].
    pub fn read_stderr_csv<R: BufRead>(&mut self, reader: R) -> Result<()> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::MalformedFile("empty stderr CSV".into()))?;
        if header.trim() != "tau_scaled,se_dn_dn_abs,se_dn_dn_rel,se_p3p3,se_p3p2,se_p2p2" {
            return Err(Error::MalformedFile(format!(
                "unexpected stderr CSV header: {header}"
            )));
        }
        let mut se = CorrelatorStderr {
            dn_dn_abs: Vec::new(),
            dn_dn_rel: Vec::new(),
            p3p3: Vec::new(),
            p3p2: Vec::new(),
            p2p2: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::MalformedFile(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if fields.len() != 6 {
                return Err(Error::MalformedFile(format!(
                    "expected 6 columns, got {}",
                    fields.len()
                )));
            }
            se.dn_dn_abs.push(fields[1]);
            se.dn_dn_rel.push(fields[2]);
            se.p3p3.push(fields[3]);
            se.p3p2.push(fields[4]);
            se.p2p2.push(fields[5]);
        }
        if se.dn_dn_abs.len() != self.lags.len() {
            return Err(Error::MalformedFile(format!(
                "stderr rows ({}) do not match record rows ({})",
                se.dn_dn_abs.len(),
                self.lags.len()
            )));
        }
        self.stderr = Some(se);
        Ok(())
    }

    /// Parse a record written by [`CorrelationRecord::write_csv`]. The
    /// metadata of the returned record is reconstructed from the two time
    /// columns; the source is marked analytic unless the caller overrides it.
    pub fn read_csv<R: BufRead>(reader: R, n_s: f64) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::MalformedFile("empty correlator CSV".into()))?;
        if header.trim() != "tau_scaled,tau_seconds,dn_dn_abs,dn_dn_rel,p3p3,p3p2,p2p2" {
            return Err(Error::MalformedFile(format!(
                "unexpected correlator CSV header: {header}"
            )));
        }
        let mut rec = CorrelationRecord {
            lags: Vec::new(),
            dn_dn_abs: Vec::new(),
            dn_dn_rel: Vec::new(),
            p3p3: Vec::new(),
            p3p2: Vec::new(),
            p2p2: Vec::new(),
            stderr: None,
            gamma_per_s: f64::NAN,
            n_s,
            source: RecordSource::Analytic,
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::MalformedFile(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if fields.len() != 7 {
                return Err(Error::MalformedFile(format!(
                    "expected 7 columns, got {}",
                    fields.len()
                )));
            }
            rec.lags.push(fields[0]);
            if fields[1] != 0.0 {
                rec.gamma_per_s = fields[0] / fields[1];
            }
            rec.dn_dn_abs.push(fields[2]);
            rec.dn_dn_rel.push(fields[3]);
            rec.p3p3.push(fields[4]);
            rec.p3p2.push(fields[5]);
            rec.p2p2.push(fields[6]);
        }
        if rec.lags.is_empty() {
            return Err(Error::MalformedFile("correlator CSV has no rows".into()));
        }
        Ok(rec)
    }
}

/// Closed-form correlators on the given lag grid (lags in `1/gamma`).
///
/// The polarization autocorrelations decay at half the pair damping rate
/// because they are envelopes of oscillatory mode pairs; the extra
/// non-oscillatory term in `p2p2` decays at the full rate of the real
/// relaxation mode.
pub fn analytic_correlators(
    derived: &DerivedParams,
    params: &LaserParams,
    lags: &[f64],
) -> Result<CorrelationRecord> {
    derived.require_lasing("analytic_correlators")?;
    derived.require_polarization_stable()?;
    if lags.iter().any(|t| *t < 0.0 || !t.is_finite()) {
        return Err(Error::InvalidInput("lags must be finite and >= 0".into()));
    }
    let x = derived.x;
    let a = derived.noise_a;
    let alpha = params.alpha;
    let nu = derived.nu_scaled();
    let (slow, fast) = derived.stability_sums();
    let n_s = derived.n_s;

    let amp_rel = a / (x * (x - 1.0));
    let amp_p3 = a / ((x - 1.0) * fast);
    let amp_slow = a * (1.0 + alpha * alpha) / ((x - 1.0) * slow);

    let mut rec = CorrelationRecord {
        lags: lags.to_vec(),
        dn_dn_abs: Vec::with_capacity(lags.len()),
        dn_dn_rel: Vec::with_capacity(lags.len()),
        p3p3: Vec::with_capacity(lags.len()),
        p3p2: Vec::with_capacity(lags.len()),
        p2p2: Vec::with_capacity(lags.len()),
        stderr: None,
        gamma_per_s: derived.gamma_per_s,
        n_s,
        source: RecordSource::Analytic,
    };
    for &tau in lags {
        let osc_n = (-0.5 * x * tau).exp() * (nu * tau).cos();
        let osc_p = (-0.5 * fast * tau).exp() * (nu * tau).cos();
        let rel = amp_rel * osc_n;
        rec.dn_dn_rel.push(rel);
        rec.dn_dn_abs.push(rel * n_s * n_s);
        let p3 = amp_p3 * osc_p;
        rec.p3p3.push(p3);
        rec.p3p2.push(alpha * p3);
        rec.p2p2
            .push(alpha * alpha * p3 + amp_slow * (-slow * tau).exp());
    }
    Ok(rec)
}

/// Second-order eigenvalue corrections and the intensity-vs-polarization
/// relaxation-oscillation frequency difference `nu_n - nu_P`.
#[derive(Clone, Copy, Debug)]
pub struct FrequencySplitting {
    /// Corrections to the five eigenvalues, scaled units, same ordering as
    /// the eigensystems.
    pub delta_lambda: [Complex64; 5],
    /// `nu_n - nu_P` in units of `gamma`.
    pub splitting_scaled: f64,
    /// `nu_n - nu_P` in rad/s.
    pub splitting_rad_per_s: f64,
}

/// Perturbative frequency corrections, second order in `gamma/nu`.
///
/// A negative splitting means the polarization oscillates faster than the
/// intensity, which only a frequency anisotropy can produce.
pub fn frequency_splitting(derived: &DerivedParams, params: &LaserParams) -> FrequencySplitting {
    let x = derived.x;
    let nu = derived.nu_scaled();
    let alpha = params.alpha;
    let omega = params.omega.e1() / params.gamma; // theta/alpha, alpha-safe
    let mix = x + derived.r_spin - derived.rho + derived.theta;
    let i = Complex64::i();

    let d1 = -i * (x * x / (8.0 * nu));
    let d4 = -i * (mix * mix / (8.0 * nu))
        + i * (omega * omega * (alpha * alpha + 1.0) / (2.0 * nu));
    let splitting =
        (mix * mix - x * x) / (8.0 * nu) - omega * omega * (alpha * alpha + 1.0) / (2.0 * nu);

    FrequencySplitting {
        delta_lambda: [d1, -d1, C0, d4, -d4],
        splitting_scaled: splitting,
        splitting_rad_per_s: splitting * derived.gamma_per_s,
    }
}

/// Serializable eigensystem form with complex numbers as `[re, im]` pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigensystemExport {
    pub state_order: Vec<String>,
    /// Unit of the eigenvalues (`1/s` after multiplying by `gamma_per_s`).
    pub gamma_per_s: f64,
    pub modes: Vec<EigenModeExport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenModeExport {
    pub lambda_scaled: [f64; 2],
    pub lambda_per_s: [f64; 2],
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
}

pub fn export_eigensystem(triples: &[EigenTriple; 5], gamma_per_s: f64) -> EigensystemExport {
    EigensystemExport {
        state_order: STATE_LABELS.iter().map(|s| s.to_string()).collect(),
        gamma_per_s,
        modes: triples
            .iter()
            .map(|t| EigenModeExport {
                lambda_scaled: [t.lambda.re, t.lambda.im],
                lambda_per_s: [t.lambda.re * gamma_per_s, t.lambda.im * gamma_per_s],
                left: t.left.iter().map(|z| [z.re, z.im]).collect(),
                right: t.right.iter().map(|z| [z.re, z.im]).collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{derive, LaserParams};

    pub(crate) fn reference() -> (DerivedParams, LaserParams) {
        let p = LaserParams::from_dimensionless(1e10, 2.0, 2.0, 2.0, 2.0, 2.0, 0.01, 10.0)
            .unwrap();
        (derive(&p).unwrap(), p)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn drift_entries_match_printed_matrix() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let m = sys.drift.0;
        // (dD,dD) = -x, (dD,dn) = -nu^2/(x-1) = -kappa_eff
        assert!(close(m[0][0], -2.0, 1e-12));
        assert!(close(m[0][1], -100.0, 1e-12));
        assert!(close(m[1][0], 1.0, 1e-12));
        assert_eq!(m[1][1], 0.0);
        // polarization block
        assert!(close(m[2][2], -4.0, 1e-12));
        assert!(close(m[2][4], 100.0 / sys.w_eff * (2.0 - 1.0) / 100.0 * 100.0, 1e-9));
        assert!(close(m[3][2], -sys.w_eff * 2.0, 1e-12));
        assert!(close(m[3][3], -2.0, 1e-12));
        // (P3,P2) = +theta/alpha, (P2,P3) = -theta/alpha
        assert!(close(m[4][3], 1.0, 1e-12));
        assert!(close(m[3][4], -1.0, 1e-12));
        assert!(close(m[4][4], -2.0, 1e-12));
        // off-diagonal blocks are exactly zero
        for i in 0..2 {
            for j in 2..5 {
                assert_eq!(m[i][j], 0.0);
                assert_eq!(m[j][i], 0.0);
            }
        }
    }

    #[test]
    fn diffusion_entries_reference_values() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        // N(dn,dn) = 4 kappa(1+l) n_s = 2e16 /s -> scaled 2e6.
        assert!(close(sys.diffusion.0[1][1] * p.gamma, 2e16, 1e-9));
        // N(P2,P2) = 4 kappa(1+l)/n_s = 2e8 /s -> scaled 0.02.
        assert!(close(sys.diffusion.0[3][3] * p.gamma, 2e8, 1e-9));
        assert_eq!(sys.diffusion.0[3][3], sys.diffusion.0[4][4]);
        assert_eq!(sys.diffusion.0[0][0], 0.0);
        assert_eq!(sys.diffusion.0[2][2], 0.0);
    }

    #[test]
    fn isotropic_limit_zeroes_polarization_damping() {
        let p = LaserParams::from_dimensionless(1e10, 2.0, 0.0, 0.0, 0.0, 2.0, 0.01, 10.0)
            .unwrap();
        let d = derive(&p).unwrap();
        let sys = build_linear_system(&d, &p).unwrap();
        assert_eq!(sys.drift.0[3][3], 0.0);
        assert_eq!(sys.drift.0[4][4], 0.0);
        assert!(close(sys.drift.0[2][2], -2.0, 1e-12));
    }

    #[test]
    fn analytic_eigenvalues_at_reference() {
        let (d, p) = reference();
        let eig = analytic_eigensystem(&d, &p);
        // lambda_3 = -(rho + theta) = -4, Re lambda_4 = -(x+r+rho-theta)/2 = -2.
        assert!(close(eig[2].lambda.re, -4.0, 1e-12));
        assert_eq!(eig[2].lambda.im, 0.0);
        assert!(close(eig[3].lambda.re, -2.0, 1e-12));
        assert!(close(eig[3].lambda.im, 10.0, 1e-12));
        assert!(close(eig[0].lambda.re, -1.0, 1e-12));
        // b4 carries P2 component alpha and P3 component 1 (ratio alpha).
        let ratio = eig[3].right[3] / eig[3].right[4];
        assert!(close(ratio.re, 2.0, 1e-12));
        assert!(ratio.im.abs() < 1e-12);
    }

    #[test]
    fn analytic_biorthogonality_at_leading_order() {
        // Small gamma/nu so the printed vectors are near-exact.
        let p = LaserParams::from_dimensionless(1e10, 2.0, 2.0, 2.0, 2.0, 2.0, 0.01, 100.0)
            .unwrap();
        let d = derive(&p).unwrap();
        let eig = analytic_eigensystem(&d, &p);
        let tol = 5.0 * d.gamma_over_nu();
        for (i, ti) in eig.iter().enumerate() {
            for (j, tj) in eig.iter().enumerate() {
                let dot = cdot(&ti.left, &tj.right);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).norm() <= tol,
                    "a{i}.b{j} = {dot} (expected {expect})"
                );
            }
        }
    }

    #[test]
    fn numeric_matches_exact_2x2_quadratic() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        // Trace identity: Re lambda = -gamma x / 2 exactly.
        assert!((eig[0].lambda.re + 1.0).abs() < 1e-12);
        assert!((eig[1].lambda.re + 1.0).abs() < 1e-12);
        // Exact imaginary part sqrt(nu^2 - (x/2)^2 gamma^2) = sqrt(99).
        assert!(close(eig[0].lambda.im, 99.0f64.sqrt(), 1e-12));
        // Conjugate pairing.
        assert_eq!(eig[0].lambda.re, eig[1].lambda.re);
        assert_eq!(eig[0].lambda.im, -eig[1].lambda.im);
        assert_eq!(eig[3].lambda.im, -eig[4].lambda.im);
    }

    #[test]
    fn numeric_cubic_at_reference_is_exact() {
        // At the reference point the cubic factors exactly:
        // lambda_3 = -4, pair = -2 +- i sqrt(101).
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        assert!(close(eig[2].lambda.re, -4.0, 1e-10));
        assert!(close(eig[3].lambda.re, -2.0, 1e-10));
        assert!(close(eig[3].lambda.im, 101.0f64.sqrt(), 1e-10));
    }

    #[test]
    fn numeric_real_mode_matches_slow_estimate() {
        let p = LaserParams::from_dimensionless(1e10, 2.2, 1.3, 1.1, 0.9, 2.5, 0.02, 25.0)
            .unwrap();
        let d = derive(&p).unwrap();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        let gon = d.gamma_over_nu();
        let expect = -(d.rho + d.theta);
        assert!(
            (eig[2].lambda.re - expect).abs() / expect.abs() <= 5.0 * gon * gon,
            "{} vs {}",
            eig[2].lambda.re,
            expect
        );
    }

    #[test]
    fn numeric_biorthogonality_is_exact() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        for (i, ti) in eig.iter().enumerate() {
            for (j, tj) in eig.iter().enumerate() {
                let dot = cdot(&ti.left, &tj.right);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).norm() < 1e-10,
                    "a{i}.b{j} = {dot}"
                );
            }
        }
    }

    #[test]
    fn diagonal_fluctuation_matrix_reproduces_closed_forms_at_tau_zero() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = analytic_eigensystem(&d, &p);
        let f0 = fluctuation_matrix(&sys, &eig, 0.0, SumMode::DiagonalOnly).unwrap();
        let rec = analytic_correlators(&d, &p, &[0.0]).unwrap();
        let m = f0.matrix.0;
        assert!(close(m[1][1] / (d.n_s * d.n_s), rec.dn_dn_rel[0], 1e-12));
        assert!(close(m[4][4], rec.p3p3[0], 1e-12));
        assert!(close(m[3][4], rec.p3p2[0], 1e-12));
        assert!(close(m[3][3], rec.p2p2[0], 1e-12));
        assert!(f0.imag_residual < 1e-10);
    }

    #[test]
    fn diagonal_fluctuation_matrix_reproduces_closed_forms_at_lags() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = analytic_eigensystem(&d, &p);
        let lags = [0.1, 0.35, 0.8, 1.6];
        let rec = analytic_correlators(&d, &p, &lags).unwrap();
        for (k, &tau) in lags.iter().enumerate() {
            let f = fluctuation_matrix(&sys, &eig, tau, SumMode::DiagonalOnly).unwrap();
            assert!(close(f.matrix.0[4][4], rec.p3p3[k], 1e-12));
            assert!(close(f.matrix.0[3][3], rec.p2p2[k], 1e-12));
            assert!(
                close(f.matrix.0[1][1] / (d.n_s * d.n_s), rec.dn_dn_rel[k], 1e-12)
            );
        }
    }

    #[test]
    fn full_and_diagonal_sums_differ_at_order_gamma_over_nu() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        let full = fluctuation_matrix(&sys, &eig, 0.0, SumMode::Full).unwrap();
        let diag = fluctuation_matrix(&sys, &eig, 0.0, SumMode::DiagonalOnly).unwrap();
        let rel = (full.matrix.0[1][1] - diag.matrix.0[1][1]).abs() / full.matrix.0[1][1];
        let gon = d.gamma_over_nu();
        assert!(rel > 0.001, "sums unexpectedly identical: {rel}");
        assert!(rel <= 3.0 * gon, "difference {rel} not O(gamma/nu)");
    }

    #[test]
    fn covariance_is_positive_and_block_decoupled() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        let f0 = fluctuation_matrix(&sys, &eig, 0.0, SumMode::Full).unwrap();
        for k in 0..5 {
            assert!(f0.matrix.0[k][k] >= 0.0);
        }
        // No correlation between the intensity block and the polarization
        // block: exact zeros by construction.
        for i in 0..2 {
            for j in 2..5 {
                assert_eq!(f0.matrix.0[i][j], 0.0);
                assert_eq!(f0.matrix.0[j][i], 0.0);
            }
        }
    }

    #[test]
    fn unstable_system_is_rejected() {
        // rho + theta < 0 makes the slow polarization mode grow.
        let p = LaserParams::from_dimensionless(1e10, 2.0, 2.0, -1.5, 0.0, 2.0, 0.01, 10.0)
            .unwrap();
        let d = derive(&p).unwrap();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        assert!(matches!(
            fluctuation_matrix(&sys, &eig, 0.0, SumMode::Full),
            Err(Error::UnstableSystem { .. })
        ));
    }

    #[test]
    fn closed_form_values_at_reference_point() {
        let (d, p) = reference();
        let rec = analytic_correlators(&d, &p, &[0.0]).unwrap();
        assert!(close(rec.p3p3[0], 0.0025, 1e-9));
        assert!(close(rec.p3p2[0], 0.005, 1e-9));
        assert!(close(rec.p2p2[0], 0.0225, 1e-9));
        assert!(close(rec.dn_dn_rel[0], 0.005, 1e-9));
    }

    #[test]
    fn cross_correlator_is_alpha_times_ellipticity_everywhere() {
        let (d, p) = reference();
        let lags: Vec<f64> = (0..200).map(|k| k as f64 * 0.02).collect();
        let rec = analytic_correlators(&d, &p, &lags).unwrap();
        for k in 0..lags.len() {
            assert!(close(rec.p3p2[k], p.alpha * rec.p3p3[k], 1e-13));
        }
    }

    #[test]
    fn polarization_spread_matches_expected_angle() {
        let (d, p) = reference();
        let rec = analytic_correlators(&d, &p, &[0.0]).unwrap();
        // std(P2) = 0.15; the physical polarization angle is half the Stokes
        // angle, so the direction spread is ~4.3 degrees.
        let std_p2 = rec.p2p2[0].sqrt();
        assert!(close(std_p2, 0.15, 1e-9));
        let spread_deg = (std_p2 / 2.0).to_degrees();
        assert!(spread_deg > 3.0 && spread_deg < 7.0);
    }

    #[test]
    fn p2p2_decreases_with_slow_damping() {
        let (d, p) = reference();
        let mut prev = f64::INFINITY;
        for bump in [0.0, 0.25, 0.5, 1.0, 2.0] {
            // Raise rho + theta while keeping x + r + rho - theta fixed.
            let mut d2 = d;
            d2.rho += bump / 2.0;
            d2.theta += bump / 2.0;
            let rec = analytic_correlators(&d2, &p, &[0.0]).unwrap();
            assert!(rec.p2p2[0] < prev);
            prev = rec.p2p2[0];
        }
    }

    #[test]
    fn unstable_polarization_is_rejected() {
        let (d, p) = reference();
        let mut bad = d;
        bad.theta = -d.rho - 0.5;
        assert!(matches!(
            analytic_correlators(&bad, &p, &[0.0]),
            Err(Error::UnstablePolarization { .. })
        ));
        let mut bad2 = d;
        bad2.theta = d.x + d.r_spin + d.rho + 1.0;
        assert!(matches!(
            analytic_correlators(&bad2, &p, &[0.0]),
            Err(Error::UnstablePolarization { .. })
        ));
    }

    #[test]
    fn splitting_vanishes_for_symmetric_parameters() {
        // theta = 0 and r = rho: (x + r - rho + theta)^2 = x^2.
        let p = LaserParams::from_dimensionless(1e10, 2.0, 1.5, 1.5, 0.0, 2.0, 0.01, 10.0)
            .unwrap();
        let d = derive(&p).unwrap();
        let s = frequency_splitting(&d, &p);
        assert!(s.splitting_scaled.abs() < 1e-12);
    }

    #[test]
    fn splitting_reference_value_and_antisymmetry() {
        let (d, p) = reference();
        let s = frequency_splitting(&d, &p);
        // (16 - 4 - 20) / (8 * 10) = -0.1 scaled -> -1e9 rad/s.
        assert!(close(s.splitting_scaled, -0.1, 1e-12));
        assert!(close(s.splitting_rad_per_s, -1e9, 1e-9));
        assert_eq!(s.delta_lambda[1], -s.delta_lambda[0]);
        assert_eq!(s.delta_lambda[4], -s.delta_lambda[3]);
        assert_eq!(s.delta_lambda[2], C0);
        // delta lambda_1 = -i x^2/(8 nu) = -i 0.05
        assert!(close(s.delta_lambda[0].im, -0.05, 1e-12));
        assert_eq!(s.delta_lambda[0].re, 0.0);
    }

    #[test]
    fn numeric_splitting_matches_perturbation_theory() {
        // Im(lambda_4) - Im(lambda_1) from the exact spectrum vs the
        // perturbative splitting, improving quadratically with gamma/nu.
        let mut errs = Vec::new();
        for nu in [10.0, 33.33] {
            let p =
                LaserParams::from_dimensionless(1e10, 2.0, 2.0, 2.0, 2.0, 2.0, 0.01, nu).unwrap();
            let d = derive(&p).unwrap();
            let sys = build_linear_system(&d, &p).unwrap();
            let eig = numeric_eigensystem(&sys).unwrap();
            let s = frequency_splitting(&d, &p);
            let numeric = eig[3].lambda.im - eig[0].lambda.im; // nu_P - nu_n
            let predicted = -s.splitting_scaled;
            errs.push((numeric - predicted).abs() / predicted.abs());
        }
        assert!(errs[0] < 0.2, "gamma/nu = 0.1 error {}", errs[0]);
        assert!(errs[1] < errs[0] * 0.3, "no quadratic improvement: {errs:?}");
    }

    #[test]
    fn lyapunov_residual_of_full_sum_is_tiny() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        let f0 = fluctuation_matrix(&sys, &eig, 0.0, SumMode::Full).unwrap();
        let res = sys
            .drift
            .matmul(&f0.matrix)
            .add(&f0.matrix.matmul(&sys.drift.transpose()))
            .add(&sys.diffusion);
        assert!(res.frobenius_norm() <= 1e-10 * sys.diffusion.frobenius_norm());
    }

    #[test]
    fn propagate_matches_direct_matrix_action() {
        let (d, p) = reference();
        let sys = build_linear_system(&d, &p).unwrap();
        let eig = numeric_eigensystem(&sys).unwrap();
        let z0 = [0.3, -1.2, 0.7, 0.05, -0.02];
        // Small t: e^{Mt} z ~ z + t M z + t^2/2 M^2 z + t^3/6 M^3 z
        let t = 1e-4;
        let mz = sys.drift.mul_vec(&z0);
        let mmz = sys.drift.mul_vec(&mz);
        let mmmz = sys.drift.mul_vec(&mmz);
        let z = propagate(&eig, &z0, t);
        for k in 0..5 {
            let expect = z0[k] + t * mz[k] + 0.5 * t * t * mmz[k] + t * t * t / 6.0 * mmmz[k];
            assert!(
                (z[k] - expect).abs() <= 1e-6 * (1.0 + expect.abs()),
                "component {k}: {} vs {}",
                z[k],
                expect
            );
        }
    }

    #[test]
    fn carrier_noise_injection_feeds_the_covariance() {
        let (d, p) = reference();
        let base = build_linear_system(&d, &p).unwrap();
        let sys = base.clone().with_carrier_noise(1e4, 2e4);
        assert_eq!(sys.diffusion.0[0][0], 1e4);
        assert_eq!(sys.diffusion.0[2][2], 2e4);
        let eig = numeric_eigensystem(&sys).unwrap();
        let f0 = fluctuation_matrix(&sys, &eig, 0.0, SumMode::Full).unwrap();
        let f0_base = fluctuation_matrix(
            &base,
            &numeric_eigensystem(&base).unwrap(),
            0.0,
            SumMode::Full,
        )
        .unwrap();
        // Extra carrier diffusion raises the carrier variances and still
        // satisfies the stationarity identity.
        assert!(f0.matrix.0[0][0] > f0_base.matrix.0[0][0]);
        assert!(f0.matrix.0[2][2] > f0_base.matrix.0[2][2]);
        let res = sys
            .drift
            .matmul(&f0.matrix)
            .add(&f0.matrix.matmul(&sys.drift.transpose()))
            .add(&sys.diffusion);
        assert!(res.frobenius_norm() <= 1e-8 * sys.diffusion.frobenius_norm());
    }

    #[test]
    fn record_csv_roundtrip() {
        let (d, p) = reference();
        let lags: Vec<f64> = (0..50).map(|k| k as f64 * 0.05).collect();
        let rec = analytic_correlators(&d, &p, &lags).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let back = CorrelationRecord::read_csv(std::io::Cursor::new(&buf), rec.n_s).unwrap();
        assert_eq!(back.lags, rec.lags);
        assert_eq!(back.p2p2, rec.p2p2);
        assert_eq!(back.dn_dn_abs, rec.dn_dn_abs);
        assert!(close(back.gamma_per_s, 1e10, 1e-12));
    }
}
