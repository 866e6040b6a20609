//! End-to-end tests of the `vcsel-polar` binary: exit-code contract,
//! reproducible outputs and the figure/pipeline artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vcsel-polar")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vcsel_polar_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn reference_config(out_dir: &Path) -> Value {
    json!({
        "laser": {
            "kappa2_per_s": 1.0e12,
            "gamma_per_s": 1.0e10,
            "gamma_total_per_s": 3.0e10,
            "w2_per_s": 2.0e6,
            "alpha": 2.0,
            "injection": {"x": 2.0},
            "gain_anisotropy": [0.0, 0.0, 0.0],
            "loss_anisotropy": [0.0, 0.0, 0.0],
            "omega_rad_per_s": [0.0, 0.0, 0.0]
        },
        "overrides": {"r": 2.0, "theta": 2.0, "rho": 2.0, "noise_a": 0.01},
        "simulation": {
            "mode": "linearized",
            "seed": 20260808u64,
            "dt_scaled": 2.0e-4,
            "duration_scaled": 300.0,
            "burn_in_scaled": null,
            "ensemble": 4,
            "store_every": 100,
            "frozen_noise": false
        },
        "analysis": {"max_lag_scaled": 3.0, "lag_step_scaled": 0.02},
        "output": {"dir": out_dir.to_str().unwrap(), "formats": ["csv", "binary"]}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VCSEL_POLAR_OUT")
        .output()
        .expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn derive_reports_reference_values() {
    let dir = temp_dir("derive");
    let out = dir.join("out");
    let cfg = write_config(&dir, "config.json", &reference_config(&out));
    let result = run(&["derive", "--config", cfg.to_str().unwrap()]);
    assert_exit(&result, 0);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("derived.json")).unwrap()).unwrap();
    let derived = &report["derived"];
    assert!((derived["noise_a"].as_f64().unwrap() - 0.01).abs() < 1e-12);
    assert!((derived["nu_rad_per_s"].as_f64().unwrap() - 1e11).abs() / 1e11 < 1e-9);
    assert!((derived["x"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(report["stability"]["polarization_stable"], json!(true));
    assert!(out.join("eigensystem.json").exists());
}

#[test]
fn below_threshold_exits_two() {
    let dir = temp_dir("threshold");
    let out = dir.join("out");
    let mut cfg = reference_config(&out);
    cfg["laser"]["injection"] = json!({"x": 1.0});
    let path = write_config(&dir, "config.json", &cfg);
    let result = run(&["derive", "--config", path.to_str().unwrap()]);
    assert_exit(&result, 2);
    // The report is still written.
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("derived.json")).unwrap()).unwrap();
    assert_eq!(report["stability"]["below_threshold"], json!(true));
}

#[test]
fn invalid_injection_exits_one() {
    let dir = temp_dir("schema");
    let out = dir.join("out");
    let mut cfg = reference_config(&out);
    cfg["laser"]["injection"] = json!({});
    let path = write_config(&dir, "none.json", &cfg);
    assert_exit(&run(&["derive", "--config", path.to_str().unwrap()]), 1);

    let mut cfg = reference_config(&out);
    cfg["laser"]["injection"] = json!({"x": 2.0, "d0": 1.0e6});
    let path = write_config(&dir, "both.json", &cfg);
    assert_exit(&run(&["derive", "--config", path.to_str().unwrap()]), 1);

    let mut cfg = reference_config(&out);
    cfg["laser"]["unknown_key"] = json!(1.0);
    let path = write_config(&dir, "unknown.json", &cfg);
    assert_exit(&run(&["derive", "--config", path.to_str().unwrap()]), 1);
}

#[test]
fn unstable_polarization_exits_three() {
    let dir = temp_dir("unstable");
    let out = dir.join("out");
    let mut cfg = reference_config(&out);
    cfg["overrides"] = json!({"r": 2.0, "theta": 0.0, "rho": -1.5, "noise_a": 0.01});
    let path = write_config(&dir, "config.json", &cfg);
    let result = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_exit(&result, 3);
}

#[test]
fn simulate_is_byte_identical() {
    let dir = temp_dir("repro");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let cfg = write_config(&dir, "config.json", &reference_config(&dir.join("unused")));
    for out in [&out_a, &out_b] {
        let result = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_exit(&result, 0);
    }
    for name in ["series.vpf", "series.csv", "series.meta.json"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // A different seed changes the series.
    let out_c = dir.join("c");
    let result = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_exit(&result, 0);
    assert_ne!(
        std::fs::read(out_a.join("series.vpf")).unwrap(),
        std::fs::read(out_c.join("series.vpf")).unwrap()
    );
}

#[test]
fn full_pipeline_recovers_alpha() {
    let dir = temp_dir("pipeline");
    let out = dir.join("out");
    let mut cfg = reference_config(&out);
    cfg["simulation"]["duration_scaled"] = json!(2000.0);
    cfg["simulation"]["ensemble"] = json!(8);
    let path = write_config(&dir, "config.json", &cfg);
    let cfg_arg = path.to_str().unwrap();

    assert_exit(&run(&["simulate", "--config", cfg_arg]), 0);
    let series = out.join("series.vpf");
    assert_exit(
        &run(&["correlate", "--config", cfg_arg, "--input", series.to_str().unwrap()]),
        0,
    );
    let correlators = out.join("correlators.csv");
    assert!(out.join("correlators_stderr.csv").exists());
    assert_exit(
        &run(&["fit", "--config", cfg_arg, "--input", correlators.to_str().unwrap()]),
        0,
    );
    let fits = out.join("fits.json");
    assert_exit(
        &run(&["invert", "--config", cfg_arg, "--input", fits.to_str().unwrap()]),
        0,
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("recovered.json")).unwrap())
            .unwrap();
    let rec = &report["recovered"];
    let alpha = rec["alpha"]["value"].as_f64().unwrap();
    assert!((alpha - 2.0).abs() / 2.0 < 0.15, "alpha = {alpha}");
    let gamma = rec["gamma_per_s"]["value"].as_f64().unwrap();
    assert!((gamma - 1e10).abs() / 1e10 < 0.15, "gamma = {gamma}");
    assert_eq!(rec["degenerate"], json!(false));
}

#[test]
fn numerical_and_io_exit_codes() {
    let dir = temp_dir("codes");
    let out = dir.join("out");
    let cfg_val = reference_config(&out);
    let cfg = write_config(&dir, "config.json", &cfg_val);
    let cfg_arg = cfg.to_str().unwrap();

    // Missing input file: I/O failure, exit 5.
    let missing = dir.join("absent.vpf");
    assert_exit(
        &run(&["correlate", "--config", cfg_arg, "--input", missing.to_str().unwrap()]),
        5,
    );

    // Series far too short for the requested lag grid: numerical failure,
    // exit 4.
    let mut short = cfg_val.clone();
    short["simulation"]["duration_scaled"] = json!(20.0);
    short["simulation"]["ensemble"] = json!(1);
    short["analysis"]["max_lag_scaled"] = json!(19.0);
    let short_cfg = write_config(&dir, "short.json", &short);
    assert_exit(&run(&["simulate", "--config", short_cfg.to_str().unwrap()]), 0);
    assert_exit(
        &run(&[
            "correlate",
            "--config",
            short_cfg.to_str().unwrap(),
            "--input",
            out.join("series.vpf").to_str().unwrap(),
        ]),
        4,
    );
}

#[test]
fn correlate_reads_csv_series() {
    let dir = temp_dir("csvseries");
    let out = dir.join("out");
    let cfg = write_config(&dir, "config.json", &reference_config(&out));
    let cfg_arg = cfg.to_str().unwrap();
    assert_exit(&run(&["simulate", "--config", cfg_arg]), 0);
    // Re-estimate from the CSV form and compare with the frame form.
    let out_csv = dir.join("from_csv");
    assert_exit(
        &run(&[
            "correlate",
            "--config",
            cfg_arg,
            "--input",
            out.join("series.csv").to_str().unwrap(),
            "--out",
            out_csv.to_str().unwrap(),
        ]),
        0,
    );
    let out_vpf = dir.join("from_vpf");
    assert_exit(
        &run(&[
            "correlate",
            "--config",
            cfg_arg,
            "--input",
            out.join("series.vpf").to_str().unwrap(),
            "--out",
            out_vpf.to_str().unwrap(),
        ]),
        0,
    );
    assert_eq!(
        std::fs::read(out_csv.join("correlators.csv")).unwrap(),
        std::fs::read(out_vpf.join("correlators.csv")).unwrap()
    );
}

#[test]
fn fit_on_analytic_correlators_recovers_rates() {
    let dir = temp_dir("analytic_fit");
    let out = dir.join("out");
    let cfg = write_config(&dir, "config.json", &reference_config(&out));
    let cfg_arg = cfg.to_str().unwrap();
    assert_exit(&run(&["derive", "--config", cfg_arg]), 0);
    let analytic = out.join("correlators_analytic.csv");
    assert!(analytic.exists());
    assert_exit(
        &run(&["fit", "--config", cfg_arg, "--input", analytic.to_str().unwrap()]),
        0,
    );
    let fits: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fits.json")).unwrap()).unwrap();
    // Noise-free curves: near-exact recovery of the printed rates
    // (scaled units: gamma x/2 = 1, nu = 10, slow decay rho+theta = 4).
    let decay = fits["dn_dn_rel"]["as_printed"]["decay"]["value"].as_f64().unwrap();
    assert!((decay - 1.0).abs() < 1e-5, "decay {decay}");
    let freq = fits["dn_dn_rel"]["as_printed"]["frequency"]["value"].as_f64().unwrap();
    assert!((freq - 10.0).abs() < 1e-4, "freq {freq}");
    let slow = fits["p2p2"]["as_printed"]["decay2"]["value"].as_f64().unwrap();
    assert!((slow - 4.0).abs() < 1e-3, "slow {slow}");
    let alpha = fits["alpha"]["value"].as_f64().unwrap();
    assert!((alpha - 2.0).abs() < 1e-6, "alpha {alpha}");
}

#[test]
fn figures_emit_expected_relations() {
    let dir = temp_dir("figures");
    let out = dir.join("out");
    let mut cfg = reference_config(&out);
    // Give the rotation case a visible frequency anisotropy.
    cfg["figures"] = json!({"sphere_grid_deg": 30.0, "tau_max_scaled": 3.0, "tau_step_scaled": 0.05, "sigma_levels": [1.0]});
    let path = write_config(&dir, "config.json", &cfg);
    assert_exit(&run(&["figures", "--config", path.to_str().unwrap()]), 0);

    // Fig. 3 data: the cross correlator is exactly alpha times the
    // ellipticity autocorrelation, pointwise.
    let fig3 = std::fs::read_to_string(out.join("fig3_correlators.csv")).unwrap();
    for line in fig3.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (p3p2, p3p3) = (f[3], f[4]);
        assert!((p3p2 - 2.0 * p3p3).abs() <= 1e-12 + 1e-9 * p3p3.abs());
    }

    // Fig. 2 covariance: the polarization-direction spread is about
    // +-4.3 degrees at these parameters.
    let fig2 = std::fs::read_to_string(out.join("fig2_covariance.csv")).unwrap();
    let row: Vec<f64> = fig2
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let spread = row[5];
    assert!(spread > 3.0 && spread < 7.0, "spread {spread}");

    // Fig. 1 rotation case: the field is tangent to circles around e1 and
    // vanishes at the +-e1 poles.
    let fig1 = std::fs::read_to_string(out.join("fig1_vector_field.csv")).unwrap();
    let mut pole_rows = 0;
    for line in fig1.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] != "rotation" {
            continue;
        }
        let v: Vec<f64> = fields[1..].iter().map(|v| v.parse().unwrap()).collect();
        let (p, dp) = (&v[0..3], &v[3..6]);
        // Tangency to the sphere.
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        let mag: f64 = dp.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot.abs() <= 1e-9 * (1.0 + mag));
        // Pure rotation about e1: the e1 component never changes.
        assert!(dp[0].abs() <= 1e-12 + 1e-9 * mag);
        if p[0].abs() > 0.999999 {
            pole_rows += 1;
            assert!(mag < 1e-12, "pole field magnitude {mag}");
        }
    }
    assert_eq!(pole_rows, 2);
}
