use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use spurious_core::covmodel::{Diagnostics, ModelSpec, SyntheticFamilyParams};
use spurious_core::detequiv::{self, DetEquiv, DeterministicPoint, GroundTruth};
use spurious_core::empirical::{self, AggregateRow, Dataset};
use spurious_core::export::{self, LadderRow, RfSpuriousRow, SimplicityRow};
use spurious_core::rfmodel::{self, RfConfig, RfRegression};

use crate::config::{Loaded, RfSpec, SweepAxis};
use crate::CliError;

/// Offsets separating the random streams of one seed.
const FEATURE_SEED_OFFSET: u64 = 1 << 32;
const TEST_SEED_OFFSET: u64 = 2 << 32;
const MC_SEED_OFFSET: u64 = 3 << 32;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Io(e.to_string()))
}

fn output_dir(loaded: &Loaded) -> Result<&Path, CliError> {
    let dir = loaded.config.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_metadata(dir: &Path, command: &str, loaded: &Loaded, fingerprint: &str) -> Result<(), CliError> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "model_fingerprint": fingerprint,
        "config": loaded.config,
    });
    write_json(dir, "metadata.json", &meta)
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CliError::Core(spurious_core::Error::Domain(format!("non-finite value in {what}"))))
    }
}

/// Deterministic curve, per-seed trials and their aggregate over the λ grid,
/// plus the trade-off thresholds.
pub fn curves(loaded: &Loaded) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let model = loaded.model()?;
    let gt = loaded.ground_truth(model.d())?;
    let lambdas = cfg.lambdas()?;
    let de = DetEquiv::new(&model, &gt, cfg.n)?;
    let mut points = lambdas.par_iter().map(|&l| de.evaluate(l)).collect::<Result<Vec<_>, _>>()?;
    let mut trials = empirical::trial_sweep(&model, &gt, cfg.n, &lambdas, &cfg.seed_list())?;
    if cfg.subtract_noise {
        let s2 = gt.sigma2();
        points.iter_mut().for_each(|p| p.l_sigma -= s2);
        trials.iter_mut().for_each(|t| t.l_emp -= s2);
    }
    let agg = empirical::aggregate(&trials);
    check_finite("curve", points.iter().flat_map(point_values))?;
    check_finite("trials", trials.iter().flat_map(|t| [t.c_emp, t.l_emp]))?;

    let thresholds = match de.thresholds() {
        Ok(t) => json!({ "available": true, "thresholds": t }),
        Err(e) => json!({ "available": false, "reason": e.to_string() }),
    };
    let dir = output_dir(loaded)?;
    export::write_curve(create(dir, "curve.csv")?, &points)?;
    export::write_trials(create(dir, "trials.csv")?, &trials)?;
    export::write_aggregate(create(dir, "aggregate.csv")?, &agg)?;
    write_json(dir, "thresholds.json", &thresholds)?;
    write_metadata(dir, "curves", loaded, &model.fingerprint())
}

fn point_values(p: &DeterministicPoint) -> [f64; 7] {
    [p.lambda, p.tau, p.c_sigma, p.l_sigma, p.bounds[0], p.bounds[1], p.bounds[2]]
}

/// Deterministic and empirical `C`, `L` at a fixed `λ` while one synthetic
/// parameter moves.
pub fn simplicity(loaded: &Loaded) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let base = loaded.synthetic_params()?;
    let spec = &cfg.simplicity;
    let gt = loaded.ground_truth(base.d)?;
    let seeds = cfg.seed_list();
    let mut rows = Vec::with_capacity(spec.values.len());
    for &v in &spec.values {
        let params = match spec.axis {
            SweepAxis::EvMaxYy => SyntheticFamilyParams { ev_max_yy: v, ..base },
            SweepAxis::Beta => SyntheticFamilyParams { beta: v, ..base },
        };
        let model = ModelSpec::from(params).build_with(loaded.model_options())?;
        let p = detequiv::evaluate(&model, &gt, cfg.n, spec.lambda)?;
        let trials = empirical::trial_sweep(&model, &gt, cfg.n, &[spec.lambda], &seeds)?;
        let a = empirical::aggregate(&trials)[0];
        let shift = if cfg.subtract_noise { gt.sigma2() } else { 0.0 };
        rows.push(simplicity_row(v, &p, &a, shift));
    }
    check_finite(
        "simplicity sweep",
        rows.iter().flat_map(|r| [r.c_sigma, r.l_sigma, r.c_emp_mean, r.l_emp_mean, r.c_emp_std, r.l_emp_std]),
    )?;
    let dir = output_dir(loaded)?;
    export::write_simplicity(create(dir, "simplicity.csv")?, &rows)?;
    let base_model = loaded.model()?;
    write_metadata(dir, "simplicity", loaded, &base_model.fingerprint())
}

fn simplicity_row(axis_value: f64, p: &DeterministicPoint, a: &AggregateRow, shift: f64) -> SimplicityRow {
    SimplicityRow {
        axis_value,
        c_sigma: p.c_sigma,
        l_sigma: p.l_sigma - shift,
        c_emp_mean: a.c_mean,
        l_emp_mean: a.l_mean - shift,
        c_emp_std: a.c_std,
        l_emp_std: a.l_std,
        n_seeds: a.n_seeds,
    }
}

#[derive(Debug, Serialize)]
struct EquivalenceReport {
    activation: &'static str,
    d: usize,
    n: usize,
    p: usize,
    lambda: f64,
    lambda_tilde: f64,
    max_gap: f64,
    mean_gap: f64,
    seed: u64,
}

/// Per-seed outcome of one RF fit in the spurious-covariance comparison.
struct SpuriousCell {
    mc: f64,
    exact: f64,
    linear: f64,
}

/// Equivalence ladder and RF spurious covariance against `C^Σ(λ̃)`, per
/// activation.
pub fn rf_equiv(loaded: &Loaded) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let rf = cfg.rf.as_ref().ok_or_else(|| CliError::Config("the rf section is missing".into()))?;
    let model = loaded.model()?;
    let gt = loaded.ground_truth(model.d())?;
    let (d, n) = (model.d(), cfg.n);
    let seeds = cfg.seed_list();
    // fixed per fit: the block partition changes the rounding of the kernel sum
    let budget = rf.feature_budget;
    let dir = output_dir(loaded)?;
    let mut spurious = Vec::new();
    for spec in &rf.activations {
        let act = spec.build();
        let stats = rfmodel::hermite_stats(&act, rf.nodes)?;

        let mut reports = Vec::new();
        for &p in &rf.p_ladder {
            let cells = seeds
                .par_iter()
                .map(|&seed| {
                    let data = Dataset::sample(&model, &gt, n, seed)?;
                    let features = RfConfig::sample(p, 2 * d, seed.wrapping_add(FEATURE_SEED_OFFSET))?;
                    let test = rfmodel::sample_inputs(&model, rf.test_points, seed.wrapping_add(TEST_SEED_OFFSET));
                    let reg = RfRegression::with_budget(&data, &features, &act, budget)?;
                    let gap = rfmodel::equivalence_gap_with(&reg, &stats, rf.ladder_lambda, &test)?;
                    Ok((seed, gap))
                })
                .collect::<Result<Vec<_>, spurious_core::Error>>()?;
            for (seed, g) in cells {
                reports.push(EquivalenceReport {
                    activation: spec.label(),
                    d,
                    n,
                    p,
                    lambda: g.lambda,
                    lambda_tilde: g.lambda_tilde,
                    max_gap: g.max_gap,
                    mean_gap: g.mean_gap,
                    seed,
                });
            }
        }
        check_finite("ladder", reports.iter().flat_map(|r| [r.lambda_tilde, r.max_gap, r.mean_gap]))?;
        let ladder: Vec<LadderRow> = reports
            .iter()
            .map(|r| LadderRow { p: r.p, mean_gap: r.mean_gap, max_gap: r.max_gap, seed: r.seed })
            .collect();
        export::write_ladder(create(dir, &format!("ladder_{}.csv", spec.label()))?, &ladder)?;
        write_json(dir, &format!("equivalence_{}.json", spec.label()), &reports)?;

        spurious.extend(rf_spurious_rows(rf, spec.label(), &act, &stats, &model, &gt, n, &seeds, budget)?);
    }
    check_finite(
        "rf spurious comparison",
        spurious.iter().flat_map(|r| [r.lambda_tilde, r.c_rf, r.c_rf_se, r.c_rf_exact, r.c_rf_linear, r.c_sigma]),
    )?;
    export::write_rf_spurious(create(dir, "rf_spurious.csv")?, &spurious)?;
    write_metadata(dir, "rf-equiv", loaded, &model.fingerprint())
}

#[allow(clippy::too_many_arguments)]
fn rf_spurious_rows(
    rf: &RfSpec,
    label: &str,
    act: &rfmodel::Activation,
    stats: &rfmodel::HermiteStats,
    model: &spurious_core::CovarianceModel,
    gt: &GroundTruth,
    n: usize,
    seeds: &[u64],
    budget: usize,
) -> Result<Vec<RfSpuriousRow>, CliError> {
    let d = model.d();
    let p = rf.comparison_p();
    let mut targets = Vec::with_capacity(rf.lambdas.len());
    for &lambda in &rf.lambdas {
        let lambda_tilde = rfmodel::effective_lambda(stats, d, n, p, lambda)?;
        if lambda_tilde <= 0.0 {
            return Err(CliError::Config(format!(
                "{label} at λ = {lambda} has λ̃ = 0, where C^Σ is undefined"
            )));
        }
        targets.push((lambda, lambda_tilde, detequiv::c_sigma(model, gt, n, lambda_tilde)?));
    }
    // per seed, one cell per λ
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let data = Dataset::sample(model, gt, n, seed)?;
            let features = RfConfig::sample(p, 2 * d, seed.wrapping_add(FEATURE_SEED_OFFSET))?;
            let reg = RfRegression::with_budget(&data, &features, act, budget)?;
            rf.lambdas
                .iter()
                .enumerate()
                .map(|(i, &lambda)| {
                    let theta = reg.fit(lambda)?;
                    let mc_seed = seed.wrapping_add(MC_SEED_OFFSET).wrapping_add(i as u64);
                    Ok(SpuriousCell {
                        mc: rfmodel::rf_spurious_cov_mc(&theta, &features, act, stats, model, gt, rf.mc_samples, mc_seed)?
                            .mean,
                        exact: rfmodel::rf_spurious_cov_quadrature(&theta, &features, act, model, gt, rf.nodes)?,
                        linear: rfmodel::rf_linearized_spurious_cov(&theta, &features, stats, model, gt)?,
                    })
                })
                .collect::<Result<Vec<_>, spurious_core::Error>>()
        })
        .collect::<Result<Vec<_>, spurious_core::Error>>()?;
    let k = seeds.len() as f64;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &(lambda, lambda_tilde, c_sigma))| {
            let mc: Vec<f64> = per_seed.iter().map(|cells| cells[i].mc).collect();
            let across = empirical::sample_mean(&mc);
            RfSpuriousRow {
                activation: label.to_string(),
                lambda,
                lambda_tilde,
                c_rf: across.mean,
                c_rf_se: if seeds.len() > 1 { across.std_error } else { 0.0 },
                c_rf_exact: per_seed.iter().map(|c| c[i].exact).sum::<f64>() / k,
                c_rf_linear: per_seed.iter().map(|c| c[i].linear).sum::<f64>() / k,
                c_sigma,
                n_seeds: seeds.len(),
                m: rf.mc_samples,
            }
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct TauReport {
    d: usize,
    n: usize,
    lambda: f64,
    tau: f64,
    residual: f64,
    c_sigma: f64,
    c_sigma_schur: f64,
    l_sigma: f64,
    bounds: [f64; 3],
}

/// Single-point query printed as JSON.
pub fn tau(loaded: &Loaded, lambda: f64, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let model = loaded.model()?;
    let gt = loaded.ground_truth(model.d())?;
    let p = detequiv::evaluate(&model, &gt, cfg.n, lambda)?;
    let report = TauReport {
        d: model.d(),
        n: cfg.n,
        lambda,
        tau: p.tau,
        residual: detequiv::tau_residual(&model, cfg.n, lambda, p.tau),
        c_sigma: p.c_sigma,
        c_sigma_schur: detequiv::c_sigma_schur(&model, &gt, cfg.n, lambda)?,
        l_sigma: p.l_sigma,
        bounds: p.bounds,
    };
    serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    passes: bool,
    symmetric: bool,
    positive_definite: bool,
    trace_normalized: bool,
    trace_required: bool,
    diagnostics: Diagnostics,
}

/// Prints the model diagnostics; `Ok(false)` when the model is rejected.
pub fn validate_model(loaded: &Loaded, file: Option<&Path>, out: &mut impl Write) -> Result<bool, CliError> {
    let spec = match file {
        Some(path) => crate::config::read_model_file(path)?,
        None => loaded.model_spec()?,
    };
    let diagnostics = match &spec {
        ModelSpec::Synthetic { d, ev_max_yy, beta } => {
            let params = SyntheticFamilyParams { d: *d, ev_max_yy: *ev_max_yy, beta: *beta };
            params.check()?;
            spurious_core::CovarianceModel::synthetic(&params)?.validate()
        }
        ModelSpec::Raw { d, sigma } => {
            let k = 2 * d;
            if sigma.len() != k * k {
                return Err(CliError::Config(format!("sigma has {} entries, expected 4d² = {}", sigma.len(), k * k)));
            }
            Diagnostics::inspect(*d, &nalgebra::DMatrix::from_row_slice(k, k, sigma))
        }
    };
    let required = loaded.config.require_trace_normalized;
    let passes = diagnostics.symmetric_ok()
        && diagnostics.positive_definite()
        && diagnostics.xx_psd
        && diagnostics.yy_psd
        && (diagnostics.trace_ok() || !required);
    let report = ValidationReport {
        passes,
        symmetric: diagnostics.symmetric_ok(),
        positive_definite: diagnostics.positive_definite(),
        trace_normalized: diagnostics.trace_ok(),
        trace_required: required,
        diagnostics,
    };
    serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(out).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(passes)
}
