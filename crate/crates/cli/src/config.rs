//! JSON run configuration. Units are explicit in the key names: SI rates in
//! 1/s, frequency anisotropy in rad/s, and every simulation/analysis time in
//! units of the inverse carrier decay rate (`*_scaled`).

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use vcsel_polar::params::{AnisotropyVector, LaserParams};
use vcsel_polar::stochastic::{NoiseConfig, SimMode};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub laser: LaserBlock,
    #[serde(default)]
    pub overrides: Option<Overrides>,
    #[serde(default)]
    pub simulation: Option<SimulationBlock>,
    #[serde(default)]
    pub analysis: Option<AnalysisBlock>,
    #[serde(default)]
    pub figures: Option<FiguresBlock>,
    #[serde(default)]
    pub output: Option<OutputBlock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserBlock {
    /// Photon escape rate `2*kappa` (1/s).
    pub kappa2_per_s: f64,
    /// Carrier decay rate `gamma` (1/s).
    pub gamma_per_s: f64,
    /// Combined relaxation `Gamma = gamma_s + gamma` (1/s).
    pub gamma_total_per_s: f64,
    /// Spontaneous emission rate into the mode `2*w` (1/s).
    pub w2_per_s: f64,
    pub alpha: f64,
    pub injection: InjectionBlock,
    #[serde(default)]
    pub gain_anisotropy: [f64; 3],
    #[serde(default)]
    pub loss_anisotropy: [f64; 3],
    #[serde(default)]
    pub omega_rad_per_s: [f64; 3],
}

/// Exactly one of `x` (pump in threshold units) or `d0` (injection in units
/// of gamma) must be given.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d0: Option<f64>,
}

/// Optional direct settings of the dimensionless groups; each adjusts the
/// underlying physical rate (aligned model only). Applied in the order
/// r -> theta -> rho -> noise_a, before the injection is resolved.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_a: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub mode: SimMode,
    pub seed: u64,
    pub dt_scaled: f64,
    pub duration_scaled: f64,
    #[serde(default)]
    pub burn_in_scaled: Option<f64>,
    pub ensemble: usize,
    pub store_every: usize,
    #[serde(default)]
    pub frozen_noise: bool,
    /// Optional extra diffusion on the carrier axes (scaled units), for
    /// sensitivity studies; the quantum-noise model keeps both at zero.
    #[serde(default)]
    pub carrier_noise_scaled: Option<CarrierNoise>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierNoise {
    pub total: f64,
    pub spin_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    pub max_lag_scaled: f64,
    pub lag_step_scaled: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiguresBlock {
    #[serde(default = "default_sphere_grid")]
    pub sphere_grid_deg: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max_scaled: f64,
    #[serde(default = "default_tau_step")]
    pub tau_step_scaled: f64,
    #[serde(default = "default_sigma_levels")]
    pub sigma_levels: Vec<f64>,
}

fn default_sphere_grid() -> f64 {
    15.0
}
fn default_tau_max() -> f64 {
    3.0
}
fn default_tau_step() -> f64 {
    0.01
}
fn default_sigma_levels() -> Vec<f64> {
    vec![1.0, 2.0]
}

impl Default for FiguresBlock {
    fn default() -> Self {
        FiguresBlock {
            sphere_grid_deg: default_sphere_grid(),
            tau_max_scaled: default_tau_max(),
            tau_step_scaled: default_tau_step(),
            sigma_levels: default_sigma_levels(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub formats: Option<Vec<OutputFormat>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Binary,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (self.laser.injection.x, self.laser.injection.d0) {
            (Some(_), None) | (None, Some(_)) => {}
            (None, None) => bail!("laser.injection: exactly one of x or d0 required, found neither"),
            (Some(_), Some(_)) => bail!("laser.injection: exactly one of x or d0 required, found both"),
        }
        if let Some(x) = self.laser.injection.x {
            if !x.is_finite() || x <= 0.0 {
                bail!("laser.injection.x must be a positive finite number, got {x}");
            }
        }
        Ok(())
    }

    /// Resolve the physical parameter set: apply the dimensionless
    /// overrides to the rates, then resolve the injection.
    pub fn laser_params(&self) -> anyhow::Result<LaserParams> {
        let l = &self.laser;
        let gamma = l.gamma_per_s;
        let mut big_gamma = l.gamma_total_per_s;
        let mut omega = l.omega_rad_per_s;
        let mut gain = l.gain_anisotropy;
        let loss = l.loss_anisotropy;
        let mut w2 = l.w2_per_s;

        if let Some(o) = &self.overrides {
            let aligned = gain[1] == 0.0
                && gain[2] == 0.0
                && loss[1] == 0.0
                && loss[2] == 0.0
                && omega[1] == 0.0
                && omega[2] == 0.0;
            if !aligned {
                bail!("overrides require anisotropy vectors aligned with the first Stokes axis");
            }
            let kappa_eff = l.kappa2_per_s * (1.0 + loss[0]);
            if let Some(r) = o.r {
                if r < 0.0 {
                    bail!("overrides.r must be >= 0, got {r}");
                }
                big_gamma = (1.0 + r) * gamma;
            }
            if let Some(theta) = o.theta {
                if l.alpha == 0.0 && theta != 0.0 {
                    bail!("overrides.theta requires alpha > 0");
                }
                omega = [
                    if l.alpha == 0.0 { 0.0 } else { theta * gamma / l.alpha },
                    0.0,
                    0.0,
                ];
            }
            if let Some(rho) = o.rho {
                gain = [loss[0] + rho * gamma / kappa_eff, 0.0, 0.0];
            }
            if let Some(a) = o.noise_a {
                if a <= 0.0 {
                    bail!("overrides.noise_a must be positive, got {a}");
                }
                w2 = 2.0 * a * gamma * gamma / (kappa_eff * (1.0 + gain[0]));
            }
        }

        let kappa_eff = l.kappa2_per_s * (1.0 + loss[0]);
        let w_eff = 0.5 * w2 * (1.0 + gain[0]);
        let d0 = match (l.injection.x, l.injection.d0) {
            (Some(x), None) => x * kappa_eff / w_eff,
            (None, Some(d0)) => d0,
            _ => unreachable!("validated"),
        };

        Ok(LaserParams::new(
            l.kappa2_per_s,
            gamma,
            big_gamma,
            w2,
            l.alpha,
            d0,
            AnisotropyVector(gain),
            AnisotropyVector(loss),
            AnisotropyVector(omega),
        )?)
    }

    pub fn noise_config(&self, seed_override: Option<u64>, frozen: bool) -> anyhow::Result<NoiseConfig> {
        let s = self
            .simulation
            .as_ref()
            .context("config has no simulation block")?;
        Ok(NoiseConfig {
            seed: seed_override.unwrap_or(s.seed),
            dt: s.dt_scaled,
            mode: s.mode,
            duration: s.duration_scaled,
            burn_in: s.burn_in_scaled,
            ensemble: s.ensemble,
            store_every: s.store_every,
            frozen_noise: frozen || s.frozen_noise,
        })
    }

    pub fn formats(&self) -> Vec<OutputFormat> {
        self.output
            .as_ref()
            .and_then(|o| o.formats.clone())
            .unwrap_or_else(|| vec![OutputFormat::Csv, OutputFormat::Binary])
    }

    /// Stable fingerprint over the resolved physics and simulation settings.
    pub fn fingerprint(&self, params: &LaserParams) -> u64 {
        let mut bytes: Vec<u8> = params.fingerprint().to_le_bytes().to_vec();
        if let Some(s) = &self.simulation {
            bytes.extend(s.seed.to_le_bytes());
            bytes.extend(s.dt_scaled.to_bits().to_le_bytes());
            bytes.extend(s.duration_scaled.to_bits().to_le_bytes());
            bytes.extend((s.ensemble as u64).to_le_bytes());
            bytes.extend((s.store_every as u64).to_le_bytes());
        }
        vcsel_polar::math::fnv1a(bytes)
    }
}
