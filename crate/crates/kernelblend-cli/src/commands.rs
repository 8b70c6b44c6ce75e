//! The four subcommands: fit, predict, taxonomy-check, synth.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use kernelblend_core::objective::{
    eval_phi_gau, eval_phi_map, eval_phi_map_gau, eval_phi_mkl, eval_psi_vb_gamma, eval_psi_vb_z,
    inner_map_solve, optimize_gamma,
};
use kernelblend_core::oracle::{mlm_gauss_hermite, mlm_monte_carlo};
use kernelblend_core::{
    assemble_gram, fit, posterior_mean_predict, BaseKernelSet, FitStatus, GramFactor,
    LikelihoodModel, ObjectiveKind, ObjectiveSpec, ThetaVector,
};

use crate::config::RunConfig;
use crate::data::{
    build_kernels, kernel_spec, read_test_csv, read_training_csv, write_atomic, TrainingData,
};
use crate::error::CliError;
use crate::report::RunReport;

fn out_dir(config: &RunConfig, config_path: &Path) -> PathBuf {
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    match &config.output {
        Some(o) => {
            let p = PathBuf::from(o);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        }
        None => base.to_path_buf(),
    }
}

fn load_effective_config(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(o) = out {
        config.output = Some(o.display().to_string());
    }
    if let Some(s) = seed {
        config.seed = Some(s);
    }
    Ok(config)
}

fn prepare_problem(
    config: &RunConfig,
    config_path: &Path,
) -> Result<(TrainingData, BaseKernelSet, ObjectiveSpec), CliError> {
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let train_path = base.join(&config.data.train);
    let data = read_training_csv(&train_path)?;
    let likelihood = config.likelihood()?;
    likelihood.validate_labels(&data.y).map_err(CliError::from_core_data)?;
    let kernels = build_kernels(config, base, &data)?;
    let kind = config.objective_kind()?;
    let spec = ObjectiveSpec::new(kind, likelihood, data.y.clone())
        .map_err(CliError::from_core_config)?
        .with_jitter(config.solver.apply().jitter)
        .map_err(CliError::from_core_config)?;
    Ok((data, kernels, spec))
}

pub fn cmd_fit(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<i32, CliError> {
    let config = load_effective_config(config_path, out, seed)?;
    let (_data, kernels, spec) = prepare_problem(&config, config_path)?;
    let solver_config = config.solver.apply();
    let started = Instant::now();
    let fitted =
        fit(&spec, &kernels, &solver_config).map_err(|e| CliError::solver(e.to_string()))?;
    let wall = started.elapsed().as_secs_f64();

    let dir = out_dir(&config, config_path);
    write_atomic(&dir.join("trace.csv"), &fitted.trace.to_csv())?;
    let report = RunReport::new(&config, &fitted, wall, "trace.csv".to_string());
    write_atomic(&dir.join("report.json"), &report.to_json())?;
    println!(
        "fit: status={} objective={:.6e} theta={:?}",
        fitted.status.as_str(),
        fitted.value,
        fitted.theta_hat.as_slice()
    );
    Ok(if fitted.status == FitStatus::Converged { 0 } else { 4 })
}

pub fn cmd_predict(
    config_path: &Path,
    model_path: &Path,
    test_path: &Path,
    out: Option<&Path>,
) -> Result<i32, CliError> {
    let config = load_effective_config(config_path, out, None)?;
    if config.has_precomputed_kernels() {
        return Err(CliError::config(
            "prediction needs function-built kernels: precomputed base matrices carry \
             no kernel function, so cross-kernels at new inputs cannot be evaluated",
        ));
    }
    let (data, kernels, spec) = prepare_problem(&config, config_path)?;
    let report = RunReport::load(model_path)?;
    if report.theta_hat.len() != kernels.num_kernels() {
        return Err(CliError::data(format!(
            "report has {} weights but the config defines {} kernels",
            report.theta_hat.len(),
            kernels.num_kernels()
        )));
    }
    if report.inner_state.u_hat.len() != data.y.len() {
        return Err(CliError::data(format!(
            "report carries {} latent values but the training set has {} rows",
            report.inner_state.u_hat.len(),
            data.y.len()
        )));
    }
    let theta =
        ThetaVector::new(report.theta_hat.clone()).map_err(CliError::from_core_data)?;
    let gram =
        assemble_gram(&theta, &kernels, spec.jitter).map_err(CliError::from_core_data)?;
    let u_hat = DVector::from_vec(report.inner_state.u_hat.clone());
    let rows = read_test_csv(test_path, data.inputs.ncols())?;
    let cross: Result<Vec<DVector<f64>>, CliError> = rows
        .iter()
        .map(|r| kernels.cross_column(&theta, r).map_err(CliError::from_core_data))
        .collect();
    let preds =
        posterior_mean_predict(&u_hat, &gram, &cross?).map_err(CliError::from_core_data)?;

    let classify = matches!(spec.likelihood, LikelihoodModel::Logistic { .. });
    let mut csv_text = String::from(if classify { "mean,class\n" } else { "mean\n" });
    for p in &preds {
        if classify {
            let class = if *p >= 0.0 { 1 } else { -1 };
            csv_text.push_str(&format!("{p},{class}\n"));
        } else {
            csv_text.push_str(&format!("{p}\n"));
        }
    }
    let dir = out_dir(&config, config_path);
    write_atomic(&dir.join("pred.csv"), &csv_text)?;
    println!("predict: {} rows -> {}", preds.len(), dir.join("pred.csv").display());
    Ok(0)
}

struct TaxRow {
    relation: &'static str,
    lhs: f64,
    rhs: f64,
    margin: f64,
    tolerance: f64,
    std_error: f64,
    pass: bool,
}

pub fn cmd_taxonomy_check(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32, CliError> {
    let config = load_effective_config(config_path, out, seed)?;
    let (data, kernels, _) = prepare_problem(&config, config_path)?;
    let n = data.y.len();
    if n > 6 {
        return Err(CliError::config(format!(
            "taxonomy-check needs n <= 6 so the brute-force marginal stays feasible; got n = {n}"
        )));
    }
    let likelihood = config.likelihood()?;
    let y = data.y.clone();

    // evaluation point: the config's theta, or a fitted one
    let theta = match &config.theta {
        Some(t) => ThetaVector::new(t.clone()).map_err(CliError::from_core_config)?,
        None => {
            let kind = config.objective_kind()?;
            let spec = ObjectiveSpec::new(kind, likelihood, y.clone())
                .map_err(CliError::from_core_config)?;
            fit(&spec, &kernels, &config.solver.apply())
                .map_err(|e| CliError::solver(e.to_string()))?
                .theta_hat
        }
    };
    let seed = config.seed.unwrap_or(0);
    let gram = assemble_gram(&theta, &kernels, kernelblend_core::DEFAULT_JITTER)
        .map_err(CliError::from_core_data)?;

    let mut rows: Vec<TaxRow> = Vec::new();

    // psi_VB(theta, gamma_hat) dominates the marginal-likelihood value
    let gamma0 = likelihood.default_gamma(&y);
    let (_, psi_vb) = optimize_gamma(&theta, &kernels, &likelihood, &y, &gamma0)
        .map_err(|e| CliError::solver(e.to_string()))?;
    let (mlm_value, mlm_se) = if n == 1 {
        let est = mlm_gauss_hermite(gram.matrix()[(0, 0)], &likelihood, y[0], config.oracle.gh_nodes)
            .map_err(|e| CliError::solver(e.to_string()))?;
        (est.value, est.std_error)
    } else {
        let est = mlm_monte_carlo(&gram, &likelihood, &y, config.oracle.mc_samples, seed)
            .map_err(|e| CliError::solver(e.to_string()))?;
        (est.value, est.std_error)
    };
    let slack = (3.0 * mlm_se).max(1e-9);
    rows.push(TaxRow {
        relation: "vb_dominates_mlm",
        lhs: psi_vb,
        rhs: mlm_value,
        margin: psi_vb - mlm_value,
        tolerance: slack,
        std_error: mlm_se,
        pass: psi_vb - mlm_value >= -slack,
    });

    // the z = 0 slice of the variational bound is exactly joint MAP
    let map_spec = ObjectiveSpec::new(ObjectiveKind::Map, likelihood, y.clone())
        .map_err(CliError::from_core_config)?;
    let (u_hat, _) = inner_map_solve(&gram, &likelihood, &y, &DVector::zeros(n))
        .map_err(|e| CliError::solver(e.to_string()))?;
    let phi_map =
        eval_phi_map(&theta, &kernels, &map_spec).map_err(|e| CliError::solver(e.to_string()))?;
    let psi_z0 = eval_psi_vb_z(&theta, &kernels, &likelihood, &y, &u_hat, &DVector::zeros(n))
        .map_err(|e| CliError::solver(e.to_string()))?;
    let rel = (phi_map - psi_z0).abs() / (1.0 + phi_map.abs());
    rows.push(TaxRow {
        relation: "map_equals_vb_at_z0",
        lhs: phi_map,
        rhs: psi_z0,
        margin: rel,
        tolerance: 1e-9,
        std_error: 0.0,
        pass: rel <= 1e-9,
    });

    // phi_MKL - phi_MAP = lambda ||theta||_p^p - ln|K| at the shared inner u
    let p = config.p.unwrap_or(1.0);
    let lambda = config.lambda.unwrap_or(1.0);
    let mkl_spec = ObjectiveSpec::new(ObjectiveKind::Mkl { p, lambda }, likelihood, y.clone())
        .map_err(CliError::from_core_config)?;
    let phi_mkl =
        eval_phi_mkl(&theta, &kernels, &mkl_spec).map_err(|e| CliError::solver(e.to_string()))?;
    let reg: f64 = lambda * theta.as_slice().iter().map(|t| t.powf(p)).sum::<f64>();
    let expected_gap = reg - gram.logdet();
    let gap = phi_mkl - phi_map;
    let rel = (gap - expected_gap).abs() / (1.0 + expected_gap.abs());
    rows.push(TaxRow {
        relation: "mkl_map_gap_is_bound_difference",
        lhs: gap,
        rhs: expected_gap,
        margin: rel,
        tolerance: 1e-9,
        std_error: 0.0,
        pass: rel <= 1e-9,
    });

    if let LikelihoodModel::Gaussian { sigma2 } = likelihood {
        // the bound is tight at gamma = sigma2
        let gamma = DVector::from_element(n, sigma2);
        let psi_fixed = eval_psi_vb_gamma(&theta, &kernels, &likelihood, &y, &gamma)
            .map_err(|e| CliError::solver(e.to_string()))?;
        let phi_gau = eval_phi_gau(&theta, &kernels, sigma2, &y)
            .map_err(|e| CliError::solver(e.to_string()))?;
        let margin = (psi_fixed - phi_gau).abs();
        rows.push(TaxRow {
            relation: "gaussian_bound_tight",
            lhs: psi_fixed,
            rhs: phi_gau,
            margin,
            tolerance: 1e-9,
            std_error: 0.0,
            pass: margin <= 1e-9,
        });

        // phi_MAP/GAU and phi_GAU differ by ln|K^{-1}+s2^{-1}I| up to a
        // theta-independent constant: compare differences at two points
        let theta2 = ThetaVector::new(
            theta.as_slice().iter().map(|t| t * 1.7 + 0.05).collect(),
        )
        .map_err(CliError::from_core_config)?;
        let diff_at = |th: &ThetaVector| -> Result<f64, CliError> {
            let gau =
                eval_phi_gau(th, &kernels, sigma2, &y).map_err(|e| CliError::solver(e.to_string()))?;
            let mapgau = eval_phi_map_gau(th, &kernels, sigma2, &y)
                .map_err(|e| CliError::solver(e.to_string()))?;
            let g = assemble_gram(th, &kernels, kernelblend_core::DEFAULT_JITTER)
                .map_err(CliError::from_core_data)?;
            let mut a = g.inverse();
            for i in 0..n {
                a[(i, i)] += 1.0 / sigma2;
            }
            let ln_a = GramFactor::from_matrix(a, 0.0)
                .map_err(CliError::from_core_data)?
                .logdet();
            Ok((gau - ln_a) - mapgau)
        };
        let d1 = diff_at(&theta)?;
        let d2 = diff_at(&theta2)?;
        let margin = (d1 - d2).abs() / (1.0 + d1.abs());
        rows.push(TaxRow {
            relation: "mapgau_identity_constant",
            lhs: d1,
            rhs: d2,
            margin,
            tolerance: 1e-9,
            std_error: 0.0,
            pass: margin <= 1e-9,
        });
    }

    let mut csv_text = String::from("relation,lhs,rhs,margin,tolerance,std_error,status\n");
    let mut all_pass = true;
    for r in &rows {
        all_pass &= r.pass;
        let status = if r.pass { "pass" } else { "fail" };
        csv_text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.relation, r.lhs, r.rhs, r.margin, r.tolerance, r.std_error, status
        ));
        println!(
            "{:32} lhs={:+.9e} rhs={:+.9e} margin={:+.3e} {}",
            r.relation, r.lhs, r.rhs, r.margin, status
        );
    }
    let dir = out_dir(&config, config_path);
    write_atomic(&dir.join("taxonomy.csv"), &csv_text)?;
    if all_pass {
        Ok(0)
    } else {
        Err(CliError::taxonomy("one or more taxonomy relations failed; see taxonomy.csv"))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cmd_synth(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<i32, CliError> {
    let config = load_effective_config(config_path, out, seed)?;
    let Some(synth) = &config.synth else {
        return Err(CliError::config("synth needs a `synth` section in the config"));
    };
    if synth.n == 0 {
        return Err(CliError::config("synth.n must be positive"));
    }
    if synth.theta_star.len() != config.kernels.len() {
        return Err(CliError::config(format!(
            "synth.theta_star has {} entries but there are {} kernels",
            synth.theta_star.len(),
            config.kernels.len()
        )));
    }
    if config.has_precomputed_kernels() {
        return Err(CliError::config(
            "synth draws from kernel functions; precomputed matrices cannot be used",
        ));
    }
    let likelihood = config.likelihood()?;
    let seed = config.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = synth.n;
    let d = synth.x_dim;
    let span = synth.x_high - synth.x_low;
    if span <= 0.0 || span.is_nan() {
        return Err(CliError::config("synth.x_high must exceed synth.x_low"));
    }
    let inputs = nalgebra::DMatrix::from_fn(n, d, |_, _| synth.x_low + span * rng.random::<f64>());

    let specs: Result<Vec<_>, CliError> = config.kernels.iter().map(kernel_spec).collect();
    let kernels = kernelblend_core::build_base_kernels(&specs?, inputs.clone())
        .map_err(CliError::from_core_data)?;
    let kernels = if config.normalize_kernels {
        kernels.with_unit_trace().map_err(CliError::from_core_data)?
    } else {
        kernels
    };
    let theta_star =
        ThetaVector::new(synth.theta_star.clone()).map_err(CliError::from_core_config)?;
    let gram = assemble_gram(&theta_star, &kernels, kernelblend_core::DEFAULT_JITTER)
        .map_err(CliError::from_core_data)?;

    // latent GP draw u = L z through the Cholesky factor of K
    let z = DVector::from_fn(n, |_, _| {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let u = gram.chol() * z;

    let y = DVector::from_fn(n, |i, _| match likelihood {
        LikelihoodModel::Gaussian { sigma2 } => {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            u[i] + sigma2.sqrt() * noise
        }
        LikelihoodModel::Laplace { tau } => {
            let p: f64 = rng.random::<f64>() - 0.5;
            let noise = -p.signum() / tau * (1.0 - 2.0 * p.abs()).max(1e-300).ln();
            u[i] + noise
        }
        LikelihoodModel::Logistic { tau } => {
            if rng.random::<f64>() < sigmoid(tau * u[i]) {
                1.0
            } else {
                -1.0
            }
        }
    });

    let mut csv_text = String::new();
    for j in 0..d {
        csv_text.push_str(&format!("x{},", j + 1));
    }
    csv_text.push_str("y\n");
    for i in 0..n {
        for j in 0..d {
            csv_text.push_str(&format!("{},", inputs[(i, j)]));
        }
        csv_text.push_str(&format!("{}\n", y[i]));
    }
    let dir = out_dir(&config, config_path);
    write_atomic(&dir.join("train.csv"), &csv_text)?;
    println!("synth: wrote {} rows to {}", n, dir.join("train.csv").display());
    Ok(0)
}
