//! Subcommand implementations. Every artifact embeds the parameter
//! fingerprint and seed so re-running a command on identical inputs yields
//! byte-identical files.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use vcsel_polar::analysis::{
    alpha_pointwise, estimate_correlators, fit_record_channel, invert_parameters,
    measure_splitting, Estimate, FitModel, FitResult, InversionInputs, RecoveredParams,
    RecordChannel,
};
use vcsel_polar::dynamics::{find_stationary, general_rhs};
use vcsel_polar::linear::{
    analytic_correlators, build_linear_system, export_eigensystem, numeric_eigensystem,
    CorrelationRecord,
};
use vcsel_polar::params::{derive, nondimensionalize, LaserParams, LaserState};
use vcsel_polar::stochastic::{
    simulate_linear, simulate_nonlinear, FluctuationSeries, MemberSeries, Provenance, SimMode,
};

use crate::config::{OutputFormat, RunConfig};
use crate::output::{write_atomic, write_json, VERSION};

pub struct CommandContext {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub frozen_noise: bool,
}

#[derive(Serialize)]
struct DeriveReport<'a> {
    version: &'static str,
    params_hash: String,
    laser: &'a LaserParams,
    derived: DerivedSection,
    stability: StabilitySection,
}

#[derive(Serialize)]
struct DerivedSection {
    x: f64,
    rho: f64,
    theta: f64,
    r: f64,
    nu_rad_per_s: f64,
    noise_a: f64,
    n_s: f64,
    d_s: f64,
    gamma_over_nu: f64,
}

#[derive(Serialize)]
struct StabilitySection {
    below_threshold: bool,
    polarization_stable: bool,
    rho_plus_theta: f64,
    x_plus_r_plus_rho_minus_theta: f64,
}

fn hash_string(h: u64) -> String {
    format!("{h:016x}")
}

/// Derived-parameter report plus, above threshold, the linearized system's
/// eigensystem export.
pub fn cmd_derive(ctx: &CommandContext) -> anyhow::Result<()> {
    let params = ctx.config.laser_params()?;
    let derived = derive(&params)?;
    let (slow, fast) = derived.stability_sums();
    let report = DeriveReport {
        version: VERSION,
        params_hash: hash_string(ctx.config.fingerprint(&params)),
        laser: &params,
        derived: DerivedSection {
            x: derived.x,
            rho: derived.rho,
            theta: derived.theta,
            r: derived.r_spin,
            nu_rad_per_s: derived.nu_rad_per_s,
            noise_a: derived.noise_a,
            n_s: derived.n_s,
            d_s: derived.d_s,
            gamma_over_nu: derived.gamma_over_nu(),
        },
        stability: StabilitySection {
            below_threshold: derived.below_threshold,
            polarization_stable: derived.polarization_stable(),
            rho_plus_theta: slow,
            x_plus_r_plus_rho_minus_theta: fast,
        },
    };
    write_json(&ctx.out_dir.join("derived.json"), &report)?;
    println!("derived parameters -> {}", ctx.out_dir.join("derived.json").display());

    if derived.below_threshold {
        // Report written; surface the threshold state through the exit code.
        return Err(vcsel_polar::Error::BelowThreshold {
            x: derived.x,
            context: "derive",
        }
        .into());
    }

    let sys = build_linear_system(&derived, &params)?;
    let eig = numeric_eigensystem(&sys)?;
    write_json(
        &ctx.out_dir.join("eigensystem.json"),
        &export_eigensystem(&eig, params.gamma),
    )?;
    if derived.gamma_over_nu() > 0.3 {
        eprintln!(
            "warning: gamma/nu = {:.2} is large; leading-order formulas are unreliable",
            derived.gamma_over_nu()
        );
    }

    // Closed-form correlator table on the analysis lag grid, in the same
    // schema as the empirical records so the two are directly diffable.
    if derived.polarization_stable() {
        let (max_lag, step) = ctx
            .config
            .analysis
            .as_ref()
            .map(|a| (a.max_lag_scaled, a.lag_step_scaled))
            .unwrap_or((3.0, 0.02));
        let n = (max_lag / step).round() as usize;
        let lags: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
        let rec = analytic_correlators(&derived, &params, &lags)?;
        let mut buf = Vec::new();
        rec.write_csv(&mut buf)?;
        write_atomic(&ctx.out_dir.join("correlators_analytic.csv"), &buf)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct SeriesMeta {
    pub version: String,
    pub params_hash: String,
    pub seed: u64,
    pub mode: SimMode,
    pub frozen_noise: bool,
    pub gamma_per_s: f64,
    pub n_s: f64,
    pub dt_integration_scaled: f64,
    pub dt_stored_scaled: f64,
    pub members: usize,
    pub samples_per_member: usize,
}

pub fn cmd_simulate(ctx: &CommandContext) -> anyhow::Result<()> {
    let params = ctx.config.laser_params()?;
    let derived = derive(&params)?;
    let cfg = ctx.config.noise_config(ctx.seed_override, ctx.frozen_noise)?;
    let carrier_noise = ctx
        .config
        .simulation
        .as_ref()
        .and_then(|s| s.carrier_noise_scaled);
    let series = match cfg.mode {
        SimMode::Linearized => {
            let mut sys = build_linear_system(&derived, &params)?;
            if let Some(cn) = carrier_noise {
                sys = sys.with_carrier_noise(cn.total, cn.spin_diff);
            }
            simulate_linear(&sys, &cfg)?
        }
        SimMode::Nonlinear => {
            if carrier_noise.is_some() {
                anyhow::bail!("carrier_noise_scaled applies to the linearized mode only");
            }
            simulate_nonlinear(&params, &cfg)?
        }
    };

    let meta = SeriesMeta {
        version: VERSION.to_string(),
        params_hash: hash_string(ctx.config.fingerprint(&params)),
        seed: series.provenance.seed,
        mode: series.provenance.mode,
        frozen_noise: series.provenance.frozen_noise,
        gamma_per_s: series.provenance.gamma_per_s,
        n_s: series.provenance.n_s,
        dt_integration_scaled: series.provenance.dt_integration,
        dt_stored_scaled: series.dt_stored,
        members: series.members.len(),
        samples_per_member: series.samples_per_member(),
    };
    std::fs::create_dir_all(&ctx.out_dir)?;
    for format in ctx.config.formats() {
        match format {
            OutputFormat::Binary => {
                let path = ctx.out_dir.join("series.vpf");
                let tmp = ctx.out_dir.join(format!(".series.vpf.tmp-{}", std::process::id()));
                series.write_frame(&tmp)?;
                std::fs::rename(&tmp, &path)?;
                println!("series frame -> {}", path.display());
            }
            OutputFormat::Csv => {
                let mut buf = Vec::new();
                series.write_csv(&mut buf)?;
                let path = ctx.out_dir.join("series.csv");
                write_atomic(&path, &buf)?;
                println!("series csv -> {}", path.display());
            }
        }
    }
    write_json(&ctx.out_dir.join("series.meta.json"), &meta)?;
    Ok(())
}

/// Load a series from a binary frame or from a CSV plus its meta sidecar.
pub fn load_series(path: &Path) -> anyhow::Result<FluctuationSeries> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vpf") => Ok(FluctuationSeries::read_frame(path)?),
        Some("csv") => {
            let meta_path = sibling_meta(path);
            let meta: SeriesMeta = serde_json::from_str(
                &std::fs::read_to_string(&meta_path)
                    .with_context(|| format!("reading series meta {}", meta_path.display()))?,
            )?;
            let text = std::fs::read_to_string(path)?;
            read_series_csv(&text, &meta)
        }
        _ => bail!("unrecognized series file type: {}", path.display()),
    }
}

fn sibling_meta(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    path.with_file_name(format!("{stem}.meta.json"))
}

fn read_series_csv(text: &str, meta: &SeriesMeta) -> anyhow::Result<FluctuationSeries> {
    let mut lines = text.lines();
    let header = lines.next().context("empty series CSV")?;
    if header.trim() != "t_scaled,member,dn_rel,p2,p3" {
        bail!("unexpected series CSV header: {header}");
    }
    let mut members: Vec<MemberSeries> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("expected 5 columns in series CSV, got {}", fields.len());
        }
        let idx: usize = fields[1].trim().parse()?;
        if idx >= members.len() {
            members.resize_with(idx + 1, MemberSeries::default);
        }
        members[idx].dn_rel.push(fields[2].trim().parse()?);
        members[idx].p2.push(fields[3].trim().parse()?);
        members[idx].p3.push(fields[4].trim().parse()?);
    }
    Ok(FluctuationSeries {
        dt_stored: meta.dt_stored_scaled,
        members,
        provenance: Provenance {
            seed: meta.seed,
            mode: meta.mode,
            frozen_noise: meta.frozen_noise,
            params_hash: u64::from_str_radix(&meta.params_hash, 16).unwrap_or(0),
            gamma_per_s: meta.gamma_per_s,
            n_s: meta.n_s,
            dt_integration: meta.dt_integration_scaled,
        },
    })
}

#[derive(Serialize, Deserialize)]
pub struct RecordMeta {
    pub version: String,
    pub params_hash: String,
    pub seed: u64,
    pub mode: String,
    pub gamma_per_s: f64,
    pub n_s: f64,
    pub max_lag_scaled: f64,
    pub lag_step_scaled: f64,
}

pub fn cmd_correlate(ctx: &CommandContext, input: &Path) -> anyhow::Result<()> {
    let analysis = ctx
        .config
        .analysis
        .as_ref()
        .context("config has no analysis block")?;
    let series = load_series(input)?;
    let rec = estimate_correlators(&series, analysis.max_lag_scaled, analysis.lag_step_scaled)?;

    let mut buf = Vec::new();
    rec.write_csv(&mut buf)?;
    write_atomic(&ctx.out_dir.join("correlators.csv"), &buf)?;
    if rec.stderr.is_some() {
        let mut se_buf = Vec::new();
        rec.write_stderr_csv(&mut se_buf)?;
        write_atomic(&ctx.out_dir.join("correlators_stderr.csv"), &se_buf)?;
    }
    let meta = RecordMeta {
        version: VERSION.to_string(),
        params_hash: hash_string(series.provenance.params_hash),
        seed: series.provenance.seed,
        mode: series.provenance.mode.as_str().to_string(),
        gamma_per_s: series.provenance.gamma_per_s,
        n_s: series.provenance.n_s,
        max_lag_scaled: analysis.max_lag_scaled,
        lag_step_scaled: analysis.lag_step_scaled,
    };
    write_json(&ctx.out_dir.join("correlators.meta.json"), &meta)?;
    println!(
        "correlators ({} lags) -> {}",
        rec.len(),
        ctx.out_dir.join("correlators.csv").display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct ChannelFits {
    /// Fit with the printed correlator form.
    pub as_printed: FitResult,
    /// Quadrature-augmented fit; frequency- and rate-faithful at moderate
    /// gamma/nu and used by the inversion.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refined: Option<FitResult>,
}

#[derive(Serialize, Deserialize)]
pub struct FitsDocument {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seconds per lag unit.
    pub lag_unit_s: f64,
    pub dn_dn_abs: ChannelFits,
    pub dn_dn_rel: ChannelFits,
    pub p3p3: ChannelFits,
    pub p3p2: ChannelFits,
    pub p2p2: ChannelFits,
    pub alpha: Estimate,
    /// `nu_n - nu_P` in lag units.
    pub splitting_scaled: Estimate,
}

pub fn load_record(input: &Path) -> anyhow::Result<CorrelationRecord> {
    let file = std::fs::File::open(input)
        .with_context(|| format!("opening correlator CSV {}", input.display()))?;
    let mut rec = CorrelationRecord::read_csv(BufReader::new(file), f64::NAN)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("correlators");
    let se_path = input.with_file_name(format!("{stem}_stderr.csv"));
    if se_path.exists() {
        let se_file = std::fs::File::open(&se_path)?;
        rec.read_stderr_csv(BufReader::new(se_file))?;
    }
    Ok(rec)
}

pub fn cmd_fit(ctx: &CommandContext, input: &Path) -> anyhow::Result<()> {
    let rec = load_record(input)?;
    let record_meta: Option<RecordMeta> = std::fs::read_to_string(sibling_meta(input))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok());
    let lag_unit_s = if rec.gamma_per_s.is_finite() && rec.gamma_per_s > 0.0 {
        1.0 / rec.gamma_per_s
    } else {
        bail!("correlator CSV carries no usable time scale (tau_seconds column)");
    };

    let printed = |ch: RecordChannel, model: FitModel| fit_record_channel(&rec, ch, model);
    let fit_abs = printed(RecordChannel::DnAbs, FitModel::DampedCosine)?;
    let fit_abs_q = printed(RecordChannel::DnAbs, FitModel::DampedCosineQuadrature)?;
    let fit_rel = printed(RecordChannel::DnRel, FitModel::DampedCosine)?;
    let fit_p3 = printed(RecordChannel::P3P3, FitModel::DampedCosine)?;
    let fit_p3p2 = printed(RecordChannel::P3P2, FitModel::DampedCosine)?;
    let fit_p2 = printed(RecordChannel::P2P2, FitModel::CosinePlusExponential)?;
    let fit_p2_q = printed(RecordChannel::P2P2, FitModel::CosineQuadraturePlusExponential)?;
    let (splitting, fit_rel_q, fit_p3_q) = measure_splitting(&rec)?;
    let alpha = alpha_pointwise(&rec, fit_rel_q.frequency.value)?;

    let doc = FitsDocument {
        version: VERSION.to_string(),
        params_hash: record_meta.as_ref().map(|m| m.params_hash.clone()),
        seed: record_meta.as_ref().map(|m| m.seed),
        lag_unit_s,
        dn_dn_abs: ChannelFits {
            as_printed: fit_abs,
            refined: Some(fit_abs_q),
        },
        dn_dn_rel: ChannelFits {
            as_printed: fit_rel,
            refined: Some(fit_rel_q),
        },
        p3p3: ChannelFits {
            as_printed: fit_p3,
            refined: Some(fit_p3_q),
        },
        p3p2: ChannelFits {
            as_printed: fit_p3p2,
            refined: None,
        },
        p2p2: ChannelFits {
            as_printed: fit_p2,
            refined: Some(fit_p2_q),
        },
        alpha,
        splitting_scaled: splitting,
    };
    write_json(&ctx.out_dir.join("fits.json"), &doc)?;
    println!("fits -> {}", ctx.out_dir.join("fits.json").display());
    Ok(())
}

#[derive(Serialize)]
struct InvertReport {
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    params_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    recovered: RecoveredParams,
}

pub fn cmd_invert(ctx: &CommandContext, input: &Path) -> anyhow::Result<()> {
    let doc: FitsDocument = serde_json::from_str(
        &std::fs::read_to_string(input)
            .with_context(|| format!("reading fits {}", input.display()))?,
    )?;
    let pick = |c: &ChannelFits| c.refined.clone().unwrap_or_else(|| c.as_printed.clone());
    let inputs = InversionInputs {
        fit_dn_abs: pick(&doc.dn_dn_abs),
        fit_dn_rel: pick(&doc.dn_dn_rel),
        fit_p3p3: pick(&doc.p3p3),
        fit_p2p2: pick(&doc.p2p2),
        alpha: doc.alpha,
        splitting: doc.splitting_scaled,
        lag_unit_s: doc.lag_unit_s,
    };
    let recovered = invert_parameters(&inputs)?;
    if recovered.degenerate {
        eprintln!("note: frequency splitting unresolved; reporting damping combinations only");
    }
    let report = InvertReport {
        version: VERSION,
        params_hash: doc.params_hash.clone(),
        seed: doc.seed,
        recovered,
    };
    write_json(&ctx.out_dir.join("recovered.json"), &report)?;
    println!("recovered parameters -> {}", ctx.out_dir.join("recovered.json").display());
    Ok(())
}

pub fn cmd_figures(ctx: &CommandContext) -> anyhow::Result<()> {
    let params = ctx.config.laser_params()?;
    let derived = derive(&params)?;
    let fig = ctx.config.figures.clone().unwrap_or_default();
    let hash = hash_string(ctx.config.fingerprint(&params));

    // Vector field of dP/dt on the Poincare sphere for the two pure
    // anisotropy cases.
    let mut csv = String::from("case,p1,p2,p3,dp1,dp2,dp3\n");
    for (name, case_params) in [
        ("rotation", pure_rotation_params(&params)?),
        ("gain_loss", pure_gain_loss_params(&params)?),
    ] {
        let scaled = nondimensionalize(&case_params);
        let stationary = find_stationary(&scaled)?;
        let step = fig.sphere_grid_deg.to_radians();
        let n_polar = (std::f64::consts::PI / step).round() as usize;
        let n_azimuth = (2.0 * std::f64::consts::PI / step).round() as usize;
        for i in 0..=n_polar {
            let polar = i as f64 * std::f64::consts::PI / n_polar as f64;
            let azimuths = if i == 0 || i == n_polar { 1 } else { n_azimuth };
            for j in 0..azimuths {
                let az = j as f64 * 2.0 * std::f64::consts::PI / n_azimuth as f64;
                let p = [
                    polar.cos(),
                    polar.sin() * az.cos(),
                    polar.sin() * az.sin(),
                ];
                let state = LaserState {
                    stokes: p,
                    ..stationary
                };
                let rhs = general_rhs(&state, &scaled);
                csv.push_str(&format!(
                    "{name},{},{},{},{},{},{}\n",
                    p[0], p[1], p[2], rhs.stokes[0], rhs.stokes[1], rhs.stokes[2]
                ));
            }
        }
    }
    write_atomic(&ctx.out_dir.join("fig1_vector_field.csv"), csv.as_bytes())?;

    // Equal-time polarization covariance and its Gaussian contour ellipses.
    let rec0 = analytic_correlators(&derived, &params, &[0.0])?;
    let (var_p2, cov, var_p3) = (rec0.p2p2[0], rec0.p3p2[0], rec0.p3p3[0]);
    let mut cov_csv = String::from("var_p2,cov_p2p3,var_p3,std_p2,std_p3,direction_spread_deg\n");
    cov_csv.push_str(&format!(
        "{},{},{},{},{},{}\n",
        var_p2,
        cov,
        var_p3,
        var_p2.sqrt(),
        var_p3.sqrt(),
        (var_p2.sqrt() / 2.0).to_degrees()
    ));
    write_atomic(&ctx.out_dir.join("fig2_covariance.csv"), cov_csv.as_bytes())?;

    let mut ell = String::from("sigma_level,t_rad,p2,p3\n");
    // Principal axes of the 2x2 covariance.
    let half_trace = 0.5 * (var_p2 + var_p3);
    let delta = (0.25 * (var_p2 - var_p3).powi(2) + cov * cov).sqrt();
    let (l1, l2) = (half_trace + delta, (half_trace - delta).max(0.0));
    let angle = 0.5 * (2.0 * cov).atan2(var_p2 - var_p3);
    for level in &fig.sigma_levels {
        for k in 0..=72 {
            let t = k as f64 * 2.0 * std::f64::consts::PI / 72.0;
            let u = level * l1.sqrt() * t.cos();
            let v = level * l2.sqrt() * t.sin();
            let p2 = angle.cos() * u - angle.sin() * v;
            let p3 = angle.sin() * u + angle.cos() * v;
            ell.push_str(&format!("{level},{t},{p2},{p3}\n"));
        }
    }
    write_atomic(&ctx.out_dir.join("fig2_ellipse.csv"), ell.as_bytes())?;

    // Lag dependence of the three polarization correlators.
    let n = (fig.tau_max_scaled / fig.tau_step_scaled).round() as usize;
    let lags: Vec<f64> = (0..=n).map(|k| k as f64 * fig.tau_step_scaled).collect();
    let rec = analytic_correlators(&derived, &params, &lags)?;
    let mut fig3 = String::from("tau_scaled,tau_seconds,p2p2,p3p2,p3p3\n");
    for (k, tau) in rec.lags.iter().enumerate() {
        fig3.push_str(&format!(
            "{},{},{},{},{}\n",
            tau,
            tau / rec.gamma_per_s,
            rec.p2p2[k],
            rec.p3p2[k],
            rec.p3p3[k]
        ));
    }
    write_atomic(&ctx.out_dir.join("fig3_correlators.csv"), fig3.as_bytes())?;

    write_json(
        &ctx.out_dir.join("figures.meta.json"),
        &serde_json::json!({
            "version": VERSION,
            "params_hash": hash,
            "sphere_grid_deg": fig.sphere_grid_deg,
            "tau_max_scaled": fig.tau_max_scaled,
            "tau_step_scaled": fig.tau_step_scaled,
            "sigma_levels": fig.sigma_levels,
        }),
    )?;
    println!("figure data -> {}", ctx.out_dir.display());
    Ok(())
}

fn pure_rotation_params(params: &LaserParams) -> anyhow::Result<LaserParams> {
    Ok(LaserParams::new(
        params.kappa2,
        params.gamma,
        params.big_gamma,
        params.w2,
        params.alpha,
        params.d0,
        vcsel_polar::params::AnisotropyVector::ZERO,
        vcsel_polar::params::AnisotropyVector::ZERO,
        params.omega,
    )?)
}

fn pure_gain_loss_params(params: &LaserParams) -> anyhow::Result<LaserParams> {
    Ok(LaserParams::new(
        params.kappa2,
        params.gamma,
        params.big_gamma,
        params.w2,
        params.alpha,
        params.d0,
        params.gain,
        params.loss,
        vcsel_polar::params::AnisotropyVector::ZERO,
    )?)
}
