//! Model parameters: physical rates, anisotropy vectors, the dimensionless
//! groups that control the fluctuation spectra, and scaling to internal
//! units.
//!
//! All types are immutable value objects after construction and safe to share
//! across threads.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{fnv1a, norm3};
use crate::Result;

/// Anisotropy vector on the Stokes basis `(e1, e2, e3)`.
///
/// Components are dimensionless for the gain and loss anisotropies and an
/// angular frequency (rad/s) for the frequency anisotropy. The direction is
/// the Stokes direction of extremal gain/loss/frequency, the length the
/// difference between the extremal values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyVector(pub [f64; 3]);

impl AnisotropyVector {
    pub const ZERO: AnisotropyVector = AnisotropyVector([0.0; 3]);

    /// Vector along the first Stokes axis.
    pub fn along_e1(value: f64) -> Self {
        AnisotropyVector([value, 0.0, 0.0])
    }

    pub fn norm(&self) -> f64 {
        norm3(self.0)
    }

    /// True when the components off `e1` are exactly zero.
    pub fn is_aligned(&self) -> bool {
        self.0[1] == 0.0 && self.0[2] == 0.0
    }

    pub fn e1(&self) -> f64 {
        self.0[0]
    }
}

/// Physical parameters of the split-density model, in SI units.
///
/// The two fastest/slowest rates are stored as they are usually quoted:
/// `kappa2` is the photon escape rate `2*kappa`, `w2` the spontaneous
/// emission rate into the lasing mode `2*w`. `big_gamma` is the combined
/// carrier relaxation `Gamma = gamma_s + gamma`. The injection `d0` is
/// dimensionless (carrier number injected per carrier lifetime).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserParams {
    /// Photon escape rate `2*kappa` (1/s).
    pub kappa2: f64,
    /// Spontaneous carrier decay rate `gamma` (1/s).
    pub gamma: f64,
    /// Combined relaxation `Gamma = gamma_s + gamma` (1/s).
    pub big_gamma: f64,
    /// Spontaneous emission rate into the mode `2*w` (1/s).
    pub w2: f64,
    /// Linewidth enhancement factor (dimensionless, >= 0).
    pub alpha: f64,
    /// Injection in units of `gamma` (dimensionless).
    pub d0: f64,
    /// Gain anisotropy `g` (dimensionless).
    pub gain: AnisotropyVector,
    /// Loss anisotropy `l` (dimensionless).
    pub loss: AnisotropyVector,
    /// Frequency anisotropy `Omega` (rad/s).
    pub omega: AnisotropyVector,
}

impl LaserParams {
    /// Validating constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kappa2: f64,
        gamma: f64,
        big_gamma: f64,
        w2: f64,
        alpha: f64,
        d0: f64,
        gain: AnisotropyVector,
        loss: AnisotropyVector,
        omega: AnisotropyVector,
    ) -> Result<Self> {
        let p = LaserParams {
            kappa2,
            gamma,
            big_gamma,
            w2,
            alpha,
            d0,
            gain,
            loss,
            omega,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("kappa2", self.kappa2),
            ("gamma", self.gamma),
            ("w2", self.w2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be a positive finite rate, got {v}"));
            }
        }
        if !self.big_gamma.is_finite() || self.big_gamma < self.gamma {
            problems.push(format!(
                "big_gamma must satisfy Gamma >= gamma (spin relaxation >= 0), got {} < {}",
                self.big_gamma, self.gamma
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            problems.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !self.d0.is_finite() || self.d0 < 0.0 {
            problems.push(format!("d0 must be a finite non-negative number, got {}", self.d0));
        }
        // Relative anisotropies below 1 keep the modified rates
        // 2w(1 + P.g) and 2kappa(1 + P.l) positive for every P on the sphere.
        for (name, v) in [("gain", &self.gain), ("loss", &self.loss)] {
            if !(v.norm() < 1.0) {
                problems.push(format!(
                    "{name} anisotropy norm must be < 1, got {}",
                    v.norm()
                ));
            }
        }
        if !self.omega.norm().is_finite() {
            problems.push("omega must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(problems.join("; ")))
        }
    }

    /// Build an aligned parameter set that realizes the given dimensionless
    /// targets exactly: pump level `x`, spin ratio `r`, anisotropy groups
    /// `rho` and `theta`, noise magnitude `noise_a` and scaled relaxation
    /// oscillation frequency `nu_scaled = nu/gamma`.
    ///
    /// The loss anisotropy is set to zero, so `2*kappa(1+l) = kappa2` and the
    /// gain anisotropy carries all of `rho`. For `alpha = 0` the frequency
    /// anisotropy target must be `theta = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_dimensionless(
        gamma_per_s: f64,
        x: f64,
        r: f64,
        rho: f64,
        theta: f64,
        alpha: f64,
        noise_a: f64,
        nu_scaled: f64,
    ) -> Result<Self> {
        if !(x > 1.0) {
            return Err(Error::InvalidParams(format!(
                "from_dimensionless requires x > 1, got {x}"
            )));
        }
        if alpha == 0.0 && theta != 0.0 {
            return Err(Error::InvalidParams(
                "theta != 0 requires alpha > 0".into(),
            ));
        }
        let kappa_eff = nu_scaled * nu_scaled / (x - 1.0); // 2k(1+l)/gamma, l = 0
        let g1 = rho / kappa_eff;
        let w_eff = noise_a / kappa_eff; // w(1+g)/gamma
        let w2 = 2.0 * w_eff / (1.0 + g1);
        let omega1 = if alpha == 0.0 { 0.0 } else { theta / alpha };
        let d0 = x * kappa_eff / w_eff;
        LaserParams::new(
            kappa_eff * gamma_per_s,
            gamma_per_s,
            (1.0 + r) * gamma_per_s,
            w2 * gamma_per_s,
            alpha,
            d0,
            AnisotropyVector::along_e1(g1),
            AnisotropyVector::ZERO,
            AnisotropyVector::along_e1(omega1 * gamma_per_s),
        )
    }

    /// All three anisotropy vectors lie along `e1`.
    pub fn is_aligned(&self) -> bool {
        self.gain.is_aligned() && self.loss.is_aligned() && self.omega.is_aligned()
    }

    pub(crate) fn check_aligned(&self, what: &str) -> Result<()> {
        if self.is_aligned() {
            Ok(())
        } else {
            Err(Error::AnisotropyNotAligned(format!(
                "{what}: g = {:?}, l = {:?}, omega = {:?}",
                self.gain.0, self.loss.0, self.omega.0
            )))
        }
    }

    /// Effective loss rate `2*kappa*(1 + l1)` (1/s), aligned model.
    pub fn kappa_eff(&self) -> f64 {
        self.kappa2 * (1.0 + self.loss.e1())
    }

    /// Effective gain rate `w*(1 + g1)` (1/s), aligned model.
    pub fn w_eff(&self) -> f64 {
        0.5 * self.w2 * (1.0 + self.gain.e1())
    }

    /// Stable 64-bit fingerprint of the parameter values.
    pub fn fingerprint(&self) -> u64 {
        let fields = [
            self.kappa2,
            self.gamma,
            self.big_gamma,
            self.w2,
            self.alpha,
            self.d0,
            self.gain.0[0],
            self.gain.0[1],
            self.gain.0[2],
            self.loss.0[0],
            self.loss.0[1],
            self.loss.0[2],
            self.omega.0[0],
            self.omega.0[1],
            self.omega.0[2],
        ];
        fnv1a(fields.iter().flat_map(|f| f.to_bits().to_le_bytes()))
    }
}

/// Dimensionless groups derived from [`LaserParams`] for the aligned model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    /// Injection in units of the threshold current.
    pub x: f64,
    /// Gain-loss anisotropy `rho = (2 kappa (1+l)/gamma) (g - l)`.
    pub rho: f64,
    /// Scaled frequency anisotropy `theta = alpha Omega / gamma`.
    pub theta: f64,
    /// Spin relaxation ratio `r = Gamma/gamma - 1`.
    pub r_spin: f64,
    /// Relaxation oscillation angular frequency (rad/s); NaN below threshold.
    pub nu_rad_per_s: f64,
    /// Overall noise magnitude `A = 2 kappa (1+l) w (1+g) / gamma^2`.
    pub noise_a: f64,
    /// Stationary photon number.
    pub n_s: f64,
    /// Stationary total carrier number.
    pub d_s: f64,
    /// Set when `x <= 1`; the stationary state then carries no photons and
    /// every fluctuation formula is out of domain.
    pub below_threshold: bool,
    /// Carrier decay rate used for scaling (1/s).
    pub gamma_per_s: f64,
}

impl DerivedParams {
    /// `nu` in units of `gamma`.
    pub fn nu_scaled(&self) -> f64 {
        self.nu_rad_per_s / self.gamma_per_s
    }

    /// Smallness parameter of the analytic eigensystem, `gamma/nu`.
    pub fn gamma_over_nu(&self) -> f64 {
        self.gamma_per_s / self.nu_rad_per_s
    }

    /// Polarization damping coefficients `(rho + theta, x + r + rho - theta)`.
    pub fn stability_sums(&self) -> (f64, f64) {
        (
            self.rho + self.theta,
            self.x + self.r_spin + self.rho - self.theta,
        )
    }

    /// Both polarization damping coefficients are positive.
    pub fn polarization_stable(&self) -> bool {
        let (slow, fast) = self.stability_sums();
        slow > 0.0 && fast > 0.0
    }

    pub(crate) fn require_lasing(&self, context: &'static str) -> Result<()> {
        if self.below_threshold {
            Err(Error::BelowThreshold {
                x: self.x,
                context,
            })
        } else {
            Ok(())
        }
    }

    pub(crate) fn require_polarization_stable(&self) -> Result<()> {
        let (slow, fast) = self.stability_sums();
        if slow > 0.0 && fast > 0.0 {
            Ok(())
        } else {
            Err(Error::UnstablePolarization { slow, fast })
        }
    }
}

/// Compute the dimensionless parameter groups for the aligned model.
///
/// Requires all three anisotropies along `e1`. Below threshold this is not
/// an error: the result carries `below_threshold = true` and `nu` is NaN.
pub fn derive(params: &LaserParams) -> Result<DerivedParams> {
    params.validate()?;
    params.check_aligned("derive")?;
    let kappa_eff = params.kappa_eff();
    let w_eff = params.w_eff();
    let gamma = params.gamma;

    let n_s = gamma * params.d0 / kappa_eff - gamma / w_eff;
    let x = w_eff * n_s / gamma + 1.0;
    let rho = kappa_eff / gamma * (params.gain.e1() - params.loss.e1());
    let theta = params.alpha * params.omega.e1() / gamma;
    let r_spin = params.big_gamma / gamma - 1.0;
    let nu = (kappa_eff * gamma * (x - 1.0)).sqrt();
    let noise_a = kappa_eff * w_eff / (gamma * gamma);

    Ok(DerivedParams {
        x,
        rho,
        theta,
        r_spin,
        nu_rad_per_s: nu,
        noise_a,
        n_s,
        d_s: kappa_eff / w_eff,
        below_threshold: x <= 1.0,
        gamma_per_s: gamma,
    })
}

/// Parameters expressed in internal units: time in `1/gamma`, every rate
/// divided by `gamma`. Keeps the original SI parameters so the inverse
/// conversion is exact.
#[derive(Clone, Debug)]
pub struct ScaledParams {
    /// `2*kappa / gamma`.
    pub kappa2: f64,
    /// `Gamma / gamma`.
    pub big_gamma: f64,
    /// `2*w / gamma`.
    pub w2: f64,
    pub alpha: f64,
    pub d0: f64,
    pub gain: [f64; 3],
    pub loss: [f64; 3],
    /// `Omega / gamma`.
    pub omega: [f64; 3],
    si: LaserParams,
}

impl ScaledParams {
    /// Time unit of the scaled system, seconds.
    pub fn time_unit_s(&self) -> f64 {
        1.0 / self.si.gamma
    }

    pub fn gamma_per_s(&self) -> f64 {
        self.si.gamma
    }

    /// `w / gamma` (the rate the equations actually use).
    pub fn w(&self) -> f64 {
        0.5 * self.w2
    }

    /// Scaled effective loss rate `2 kappa (1+l1) / gamma`.
    pub fn kappa_eff(&self) -> f64 {
        self.kappa2 * (1.0 + self.loss[0])
    }

    /// Scaled effective gain rate `w (1+g1) / gamma`.
    pub fn w_eff(&self) -> f64 {
        self.w() * (1.0 + self.gain[0])
    }

    pub fn is_aligned(&self) -> bool {
        self.si.is_aligned()
    }

    /// Exact inverse of [`nondimensionalize`]: returns the original SI
    /// parameters bit for bit.
    pub fn redimensionalize(&self) -> LaserParams {
        self.si.clone()
    }
}

/// Scale all rates by `1/gamma` and record the time unit.
pub fn nondimensionalize(params: &LaserParams) -> ScaledParams {
    let g = params.gamma;
    ScaledParams {
        kappa2: params.kappa2 / g,
        big_gamma: params.big_gamma / g,
        w2: params.w2 / g,
        alpha: params.alpha,
        d0: params.d0,
        gain: params.gain.0,
        loss: params.loss.0,
        omega: [
            params.omega.0[0] / g,
            params.omega.0[1] / g,
            params.omega.0[2] / g,
        ],
        si: params.clone(),
    }
}

/// Instantaneous state of the laser: total carrier number `D`, photon number
/// `n`, carrier density difference `d` and the normalized Stokes vector `P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserState {
    /// Total electron-hole pair number `D`.
    pub carriers: f64,
    /// Total photon number `n` (>= 0).
    pub photons: f64,
    /// Carrier density difference `d` between the two spin reservoirs.
    pub spin_diff: f64,
    /// Normalized Stokes vector `P` (unit length).
    pub stokes: [f64; 3],
}

impl LaserState {
    /// Validating constructor; `stokes` is renormalized to exact unit
    /// length, rejecting inputs more than 1e-6 away from the sphere.
    pub fn new(carriers: f64, photons: f64, spin_diff: f64, stokes: [f64; 3]) -> Result<Self> {
        if !(photons >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "photon number must be >= 0, got {photons}"
            )));
        }
        let norm = norm3(stokes);
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidParams(format!(
                "|P| must be 1 within 1e-6, got {norm}"
            )));
        }
        Ok(LaserState {
            carriers,
            photons,
            spin_diff,
            stokes: [stokes[0] / norm, stokes[1] / norm, stokes[2] / norm],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn reference_si_params() -> LaserParams {
        // x = 2, r = rho = theta = alpha = 2, A = 0.01, nu = 10 gamma.
        LaserParams::from_dimensionless(1e10, 2.0, 2.0, 2.0, 2.0, 2.0, 0.01, 10.0).unwrap()
    }

    #[test]
    fn noise_magnitude_reference_value() {
        // 2k(1+l) = 1e12/s, gamma = 1e10/s, w(1+g) = 1e6/s -> A = 0.01
        let p = LaserParams::new(
            1e12,
            1e10,
            3e10,
            2e6,
            2.0,
            2e6,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
        )
        .unwrap();
        let d = derive(&p).unwrap();
        assert!((d.noise_a - 0.01).abs() < 1e-15);
    }

    #[test]
    fn threshold_injection_gives_x_of_one() {
        // d0 = 2k(1+l)/(w(1+g)) makes n_s = 0 and x = 1.
        let kappa2 = 1e12;
        let w2 = 2e6;
        let d0 = kappa2 / (0.5 * w2);
        let p = LaserParams::new(
            kappa2,
            1e10,
            1e10,
            w2,
            0.0,
            d0,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
        )
        .unwrap();
        let d = derive(&p).unwrap();
        assert!(d.n_s.abs() < 1e-9);
        assert!((d.x - 1.0).abs() < 1e-12);
        assert!(d.below_threshold);
        assert!(d.nu_rad_per_s.abs() < 1e-3);

        // Below threshold nu is not a number rather than zero: nu == 0
        // happens exactly at x == 1.
        let mut below = p.clone();
        below.d0 *= 0.5;
        let d_below = derive(&below).unwrap();
        assert!(d_below.x < 1.0);
        assert!(d_below.nu_rad_per_s.is_nan());
    }

    #[test]
    fn stationary_photon_number_at_x_two() {
        // gamma = 1e10/s, w(1+g) = 1e6/s, x = 2 -> n_s = 1e4 photons.
        let p = reference_si_params();
        let d = derive(&p).unwrap();
        assert!((d.x - 2.0).abs() < 1e-12);
        assert!((d.n_s - 1e4).abs() / 1e4 < 1e-12);
        assert!((d.nu_rad_per_s - 1e11).abs() / 1e11 < 1e-12);
        assert!((d.noise_a - 0.01).abs() < 1e-14);
        assert!((d.rho - 2.0).abs() < 1e-12);
        assert!((d.theta - 2.0).abs() < 1e-12);
        assert!((d.r_spin - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nondimensionalize_scales_and_roundtrips() {
        let p = LaserParams::new(
            1e12,
            1e10,
            3e10,
            2e6,
            2.0,
            4e6,
            AnisotropyVector::along_e1(0.02),
            AnisotropyVector::ZERO,
            AnisotropyVector::along_e1(1e10),
        )
        .unwrap();
        let s = nondimensionalize(&p);
        assert_eq!(s.kappa2, 100.0);
        assert_eq!(s.time_unit_s(), 1e-10);
        // theta = alpha * Omega / gamma = 2 * 1e10 / 1e10 = 2
        assert_eq!(s.alpha * s.omega[0], 2.0);
        // Round trip is exact by construction.
        assert_eq!(s.redimensionalize(), p);
    }

    #[test]
    fn derive_rejects_misaligned_anisotropy() {
        let p = LaserParams::new(
            1e12,
            1e10,
            1e10,
            2e6,
            2.0,
            4e6,
            AnisotropyVector([0.0, 0.01, 0.0]),
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
        )
        .unwrap();
        assert!(matches!(derive(&p), Err(Error::AnisotropyNotAligned(_))));
    }

    #[test]
    fn validation_catches_bad_rates() {
        let bad = LaserParams::new(
            -1e12,
            1e10,
            1e9, // Gamma < gamma
            2e6,
            -1.0,
            4e6,
            AnisotropyVector::along_e1(1.5),
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
        );
        let msg = match bad {
            Err(Error::InvalidParams(m)) => m,
            other => panic!("expected InvalidParams, got {other:?}"),
        };
        assert!(msg.contains("kappa2"));
        assert!(msg.contains("big_gamma"));
        assert!(msg.contains("alpha"));
        assert!(msg.contains("gain"));
    }

    #[test]
    fn isotropic_limit_has_zero_rho_theta() {
        let p = LaserParams::new(
            1e12,
            1e10,
            1e10,
            2e6,
            2.0,
            4e6,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
            AnisotropyVector::ZERO,
        )
        .unwrap();
        let d = derive(&p).unwrap();
        assert_eq!(d.rho, 0.0);
        assert_eq!(d.theta, 0.0);
    }

    #[test]
    fn derive_is_scale_covariant() {
        let p = reference_si_params();
        let base = derive(&p).unwrap();
        for c in [0.5, 3.0, 17.0] {
            let scaled = LaserParams::new(
                p.kappa2 * c,
                p.gamma * c,
                p.big_gamma * c,
                p.w2 * c,
                p.alpha,
                p.d0,
                p.gain,
                p.loss,
                AnisotropyVector([p.omega.0[0] * c, 0.0, 0.0]),
            )
            .unwrap();
            let d = derive(&scaled).unwrap();
            assert!((d.x - base.x).abs() < 1e-9 * base.x.abs());
            assert!((d.rho - base.rho).abs() < 1e-9);
            assert!((d.theta - base.theta).abs() < 1e-9);
            assert!((d.r_spin - base.r_spin).abs() < 1e-9);
            assert!((d.noise_a - base.noise_a).abs() < 1e-9 * base.noise_a);
            assert!((d.nu_rad_per_s - c * base.nu_rad_per_s).abs() < 1e-6 * base.nu_rad_per_s);
        }
    }

    #[test]
    fn fingerprint_distinguishes_params() {
        let p = reference_si_params();
        let mut q = p.clone();
        q.alpha += 1e-12;
        assert_ne!(p.fingerprint(), q.fingerprint());
        assert_eq!(p.fingerprint(), p.clone().fingerprint());
    }

    #[test]
    fn state_constructor_checks_sphere() {
        assert!(LaserState::new(1.0, 1.0, 0.0, [0.6, 0.8, 0.0]).is_ok());
        assert!(LaserState::new(1.0, -1.0, 0.0, [1.0, 0.0, 0.0]).is_err());
        assert!(LaserState::new(1.0, 1.0, 0.0, [1.1, 0.0, 0.0]).is_err());
    }
}
