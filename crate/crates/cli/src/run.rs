use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use ufm::idw::{idw_ufa_fit_from, WeightTensor};
use ufm::inference::{mean_loadings, plugin_covariances, standard_error_tables, MeanLoadings};
use ufm::io::{column_header, write_atomic, write_matrix_csv};
use ufm::panel::load_panel;
use ufm::rank::{estimate_rank, select_factors, warm_start, RankReport, StrengthTarget};
use ufm::simlab::{monte_carlo_run, Experiment, McSpec};
use ufm::ufa::ufa_fit;
use ufm::{EstimatorConfig, FactorEstimate, PanelMatrix, QuantileGrid, RankChoice, Warning};

use crate::error::CliError;
use crate::opts::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ufa,
    IdwUfa,
}

impl Method {
    fn parse(s: Option<&str>, default: Method) -> Result<Self, CliError> {
        match s {
            None => Ok(default),
            Some("ufa") => Ok(Method::Ufa),
            Some("idw-ufa") | Some("idw") => Ok(Method::IdwUfa),
            Some(o) => Err(CliError::Usage(format!("unknown method {o:?}; expected ufa or idw-ufa"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Method::Ufa => "ufa",
            Method::IdwUfa => "idw-ufa",
        }
    }
}

/// Collects timings and warnings for the run manifest.
pub struct RunLog {
    command: &'static str,
    start: Instant,
    timings: Vec<(String, f64)>,
    warnings: Vec<String>,
    files: Vec<PathBuf>,
}

impl RunLog {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            start: Instant::now(),
            timings: Vec::new(),
            warnings: Vec::new(),
            files: Vec::new(),
        }
    }

    fn lap(&mut self, label: &str, since: Instant) {
        self.timings.push((label.to_string(), since.elapsed().as_secs_f64()));
    }

    fn warn(&mut self, ws: &[Warning]) {
        for w in ws {
            eprintln!("warning: {w}");
            self.warnings.push(w.to_string());
        }
    }

    fn matrix(&mut self, dir: &Path, name: &str, m: &DMatrix<f64>, prefix: &str) -> Result<(), CliError> {
        let p = dir.join(name);
        write_matrix_csv(&p, m, &column_header(prefix, m.ncols()))?;
        self.files.push(p);
        Ok(())
    }

    fn text(&mut self, dir: &Path, name: &str, body: &[u8]) -> Result<(), CliError> {
        let p = dir.join(name);
        write_atomic(&p, body)?;
        self.files.push(p);
        Ok(())
    }

    fn manifest(&mut self, dir: &Path, settings: &Settings, extra: serde_json::Value) -> Result<(), CliError> {
        let mut timings = serde_json::Map::new();
        for (k, v) in &self.timings {
            timings.insert(format!("{k}_secs"), (*v).into());
        }
        timings.insert("total_secs".into(), self.start.elapsed().as_secs_f64().into());
        let files: Vec<String> = self
            .files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        let body = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": settings.to_json(),
            "seed": settings.seed,
            "timings": timings,
            "warnings": self.warnings,
            "files": files,
            "result": extra,
        });
        let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::Usage(e.to_string()))?;
        self.text(dir, "manifest.json", text.as_bytes())
    }
}

/// Label used in per-level file names, e.g. `0.1`, `0.25`.
pub fn tau_label(tau: f64) -> String {
    let s = format!("{tau:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn load(settings: &Settings) -> Result<PanelMatrix, CliError> {
    let path = settings
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("--input is required".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("input file {} does not exist", path.display())));
    }
    Ok(load_panel(path, settings.layout)?)
}

fn grid(settings: &Settings) -> Result<QuantileGrid, CliError> {
    Ok(QuantileGrid::new(settings.m_count, settings.hd)?)
}

fn config(settings: &Settings, penalty: Option<f64>) -> Result<EstimatorConfig, CliError> {
    let mut c = EstimatorConfig {
        rank: settings.rank,
        bandwidth_h: settings.h,
        kernel_order: settings.kernel_order,
        rank_threshold: settings.cr,
        seed: settings.seed,
        ..EstimatorConfig::default()
    };
    if let Some(p) = penalty {
        c.penalty_const = p;
    }
    if !matches!(c.kernel_order, 2 | 14) {
        return Err(CliError::Usage(format!(
            "--kernel-order must be 2 or 14, got {}",
            c.kernel_order
        )));
    }
    c.validate()?;
    Ok(c)
}

fn out_dir(settings: &Settings) -> PathBuf {
    settings.out_dir.clone().unwrap_or_else(|| PathBuf::from("ufm_out"))
}

fn grid_index(grid: &QuantileGrid, tau: f64) -> Result<usize, CliError> {
    grid.levels()
        .iter()
        .position(|&l| (l - tau).abs() < 1e-9)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "--tau {tau} is not a grid level; levels are {:?}",
                grid.levels()
            ))
        })
}

struct Fitted {
    report: RankReport,
    estimate: FactorEstimate,
    weights: Option<WeightTensor>,
}

fn fit(
    panel: &PanelMatrix,
    grid: &QuantileGrid,
    config: &EstimatorConfig,
    method: Method,
    log: &mut RunLog,
) -> Result<Fitted, CliError> {
    panel.require_estimable()?;
    let t0 = Instant::now();
    let report = estimate_rank(panel, grid, config)?;
    log.lap("rank", t0);
    log.warn(&report.warnings);
    let r = match config.rank {
        RankChoice::Fixed(r) => r,
        RankChoice::Auto if report.r_hat == 0 => {
            return Err(CliError::Numeric(
                "estimated rank is 0: no factor clears the eigenvalue threshold".into(),
            ))
        }
        RankChoice::Auto => report.r_hat,
    };
    let config = config.clone().with_rank(r);
    let t0 = Instant::now();
    let init = warm_start(&report, r, config.box_for(panel.values()))?;
    let mut estimate = ufa_fit(panel, grid, &config, &init, None)?;
    log.lap("ufa", t0);
    let weights = match method {
        Method::Ufa => None,
        Method::IdwUfa => {
            let t0 = Instant::now();
            let (est, w) = idw_ufa_fit_from(panel, grid, &config, &estimate)?;
            log.lap("idw", t0);
            estimate = est;
            Some(w)
        }
    };
    log.warn(&estimate.diagnostics.warnings);
    Ok(Fitted {
        report,
        estimate,
        weights,
    })
}

fn write_estimate(log: &mut RunLog, dir: &Path, grid: &QuantileGrid, est: &FactorEstimate) -> Result<(), CliError> {
    log.matrix(dir, "factors.csv", &est.factors, "f")?;
    for (m, l) in est.loadings.iter().enumerate() {
        let name = format!("loadings_tau_{}.csv", tau_label(grid.levels()[m]));
        log.matrix(dir, &name, l, "lambda")?;
    }
    Ok(())
}

fn write_weights(log: &mut RunLog, dir: &Path, grid: &QuantileGrid, w: &WeightTensor) -> Result<(), CliError> {
    let (mc, n, t) = w.shape();
    let mut body = String::from("tau,i,t,weight\n");
    for m in 0..mc {
        let tau = ufm::panel::format_float(grid.levels()[m]);
        for i in 0..n {
            for (s, v) in w.row(m, i).iter().enumerate() {
                body.push_str(&format!("{tau},{i},{s},{}\n", ufm::panel::format_float(*v)));
            }
        }
    }
    debug_assert_eq!(body.lines().count(), mc * n * t + 1);
    log.text(dir, "weights.csv", body.as_bytes())
}

fn write_standard_errors(
    log: &mut RunLog,
    dir: &Path,
    grid: &QuantileGrid,
    est: &FactorEstimate,
    weights: &WeightTensor,
    mean: Option<&MeanLoadings>,
) -> Result<f64, CliError> {
    let t0 = Instant::now();
    let covs = plugin_covariances(est, grid, weights, mean)?;
    let tables = standard_error_tables(est, &covs, mean)?;
    log.lap("inference", t0);
    log.matrix(dir, "se_factors.csv", &tables.factors, "f")?;
    for (m, tau) in grid.levels().iter().enumerate() {
        let lab = tau_label(*tau);
        log.matrix(dir, &format!("se_loadings_tau_{lab}.csv"), &tables.loadings[m], "lambda")?;
        log.matrix(dir, &format!("se_common_tau_{lab}.csv"), &tables.common[m], "t")?;
    }
    if let Some(ml) = &tables.mean_loadings {
        log.matrix(dir, "se_mean_loadings.csv", ml, "lambda_bar")?;
    }
    Ok(covs.phi_cond)
}

fn summary(est: &FactorEstimate) -> serde_json::Value {
    serde_json::json!({
        "rank": est.rank(),
        "outer_iterations": est.diagnostics.outer_iterations,
        "converged": est.diagnostics.converged,
        "last_change": est.diagnostics.last_change,
        "eigenvalues": est.eigenvalues,
    })
}

pub fn estimate(settings: &Settings) -> Result<(), CliError> {
    let mut log = RunLog::new("estimate");
    let method = Method::parse(settings.method.as_deref(), Method::Ufa)?;
    let panel = load(settings)?;
    let grid = grid(settings)?;
    let config = config(settings, settings.c.or(settings.penalty_c))?;
    let fitted = fit(&panel, &grid, &config, method, &mut log)?;
    let dir = out_dir(settings);
    let est = &fitted.estimate;
    write_estimate(&mut log, &dir, &grid, est)?;
    let mut result = summary(est);
    result["method"] = method.name().into();
    if let Some(w) = &fitted.weights {
        write_weights(&mut log, &dir, &grid, w)?;
        result["clipped_fraction"] = w.clipped_fraction.into();
        result["phi_condition"] = write_standard_errors(&mut log, &dir, &grid, est, w, None)?.into();
    }
    log.manifest(&dir, settings, result)?;
    println!(
        "{}: r = {}, {} outer iterations{}, outputs in {}",
        method.name(),
        est.rank(),
        est.diagnostics.outer_iterations,
        if est.diagnostics.converged { "" } else { " (not converged)" },
        dir.display()
    );
    Ok(())
}

pub fn rank(settings: &Settings) -> Result<(), CliError> {
    let mut log = RunLog::new("rank");
    let panel = load(settings)?;
    panel.require_estimable()?;
    let grid = grid(settings)?;
    let config = config(settings, settings.c.or(settings.penalty_c))?;
    let t0 = Instant::now();
    let report = estimate_rank(&panel, &grid, &config)?;
    log.lap("rank", t0);
    log.warn(&report.warnings);
    println!("r_hat = {}", report.r_hat);
    println!("threshold = {}", report.threshold);
    let shown: Vec<String> = report.eigenvalues.iter().take(10).map(|v| format!("{v:.6e}")).collect();
    println!("eigenvalues = [{}]", shown.join(", "));
    if let Some(dir) = &settings.out_dir {
        let ev = DMatrix::from_column_slice(report.eigenvalues.len(), 1, &report.eigenvalues);
        log.matrix(dir, "eigenvalues.csv", &ev, "sigma2_")?;
        let result = serde_json::json!({
            "r_hat": report.r_hat,
            "threshold": report.threshold,
            "penalty_const": report.penalty_const,
        });
        log.manifest(dir, settings, result)?;
    }
    Ok(())
}

pub fn select(settings: &Settings) -> Result<(), CliError> {
    let mut log = RunLog::new("select");
    let method = Method::parse(settings.method.as_deref(), Method::IdwUfa)?;
    let panel = load(settings)?;
    let grid = grid(settings)?;
    let config = config(settings, settings.penalty_c)?;
    let target = match settings.tau {
        Some(tau) => StrengthTarget::Quantile(grid_index(&grid, tau)?),
        None => StrengthTarget::Mean,
    };
    let fitted = fit(&panel, &grid, &config, method, &mut log)?;
    let mean = mean_loadings(panel.values(), &fitted.estimate)?;
    let report = select_factors(
        &fitted.estimate,
        Some(&mean.lam_bar),
        target,
        settings.alpha,
        settings.c.unwrap_or(1.0),
    )?;
    let label = match target {
        StrengthTarget::Mean => "mean".to_string(),
        StrengthTarget::Quantile(m) => format!("tau={}", tau_label(grid.levels()[m])),
    };
    println!("target = {label}, alpha = {}, C = {}", report.alpha, report.constant);
    println!("threshold = {:.6e}", report.threshold);
    let sv: Vec<String> = report.singular_values.iter().map(|v| format!("{v:.6e}")).collect();
    println!("singular_values = [{}]", sv.join(", "));
    println!("selected = {} of {}", report.selected, fitted.estimate.rank());
    if let Some(dir) = &settings.out_dir {
        let result = serde_json::json!({
            "method": method.name(),
            "target": label,
            "alpha": report.alpha,
            "constant": report.constant,
            "threshold": report.threshold,
            "singular_values": report.singular_values,
            "selected": report.selected,
            "rank": fitted.estimate.rank(),
            "r_hat": fitted.report.r_hat,
        });
        log.manifest(dir, settings, result)?;
    }
    Ok(())
}

pub fn mean_loadings_cmd(settings: &Settings) -> Result<(), CliError> {
    let mut log = RunLog::new("mean-loadings");
    let method = Method::parse(settings.method.as_deref(), Method::IdwUfa)?;
    let panel = load(settings)?;
    let grid = grid(settings)?;
    let config = config(settings, settings.c.or(settings.penalty_c))?;
    let fitted = fit(&panel, &grid, &config, method, &mut log)?;
    let est = &fitted.estimate;
    let mean = mean_loadings(panel.values(), est)?;
    let dir = out_dir(settings);
    log.matrix(&dir, "factors.csv", &est.factors, "f")?;
    log.matrix(&dir, "mean_loadings.csv", &mean.lam_bar, "lambda_bar")?;
    let mut result = summary(est);
    result["method"] = method.name().into();
    if let Some(w) = &fitted.weights {
        let t0 = Instant::now();
        let covs = plugin_covariances(est, &grid, w, Some(&mean))?;
        let tables = standard_error_tables(est, &covs, Some(&mean))?;
        log.lap("inference", t0);
        if let Some(se) = &tables.mean_loadings {
            log.matrix(&dir, "se_mean_loadings.csv", se, "lambda_bar")?;
        }
    }
    log.manifest(&dir, settings, result)?;
    println!(
        "mean loadings for {} units on {} factors written to {}",
        mean.lam_bar.nrows(),
        mean.lam_bar.ncols(),
        dir.display()
    );
    Ok(())
}

pub fn infer(settings: &Settings) -> Result<(), CliError> {
    let mut log = RunLog::new("infer");
    let panel = load(settings)?;
    let grid = grid(settings)?;
    let config = config(settings, settings.c.or(settings.penalty_c))?;
    let fitted = fit(&panel, &grid, &config, Method::IdwUfa, &mut log)?;
    let est = &fitted.estimate;
    let weights = fitted.weights.as_ref().expect("weighted fit returns weights");
    let mean = mean_loadings(panel.values(), est)?;
    let dir = out_dir(settings);
    write_estimate(&mut log, &dir, &grid, est)?;
    log.matrix(&dir, "mean_loadings.csv", &mean.lam_bar, "lambda_bar")?;
    write_weights(&mut log, &dir, &grid, weights)?;
    let cond = write_standard_errors(&mut log, &dir, &grid, est, weights, Some(&mean))?;
    let mut result = summary(est);
    result["phi_condition"] = cond.into();
    result["clipped_fraction"] = weights.clipped_fraction.into();
    log.manifest(&dir, settings, result)?;
    println!(
        "idw-ufa: r = {}, Phi condition {:.3e}, {:.1}% weights clipped, outputs in {}",
        est.rank(),
        cond,
        100.0 * weights.clipped_fraction,
        dir.display()
    );
    Ok(())
}

fn default_sizes(exp: Experiment) -> Vec<usize> {
    match exp {
        Experiment::Table1 | Experiment::Table2 => vec![50, 100, 150],
        Experiment::Table3 | Experiment::Table4 => vec![50, 75, 100, 150],
    }
}

pub fn simulate(settings: &Settings, full: bool) -> Result<(), CliError> {
    let table = settings
        .table
        .as_deref()
        .ok_or_else(|| CliError::Usage("--table is required".into()))?;
    let exp: Experiment = table.parse()?;
    let reps = settings.reps.unwrap_or(if full { 1000 } else { 100 });
    let sizes = settings.sizes.clone().unwrap_or_else(|| default_sizes(exp));
    let mut spec = McSpec::new(exp, sizes, reps, settings.seed);
    spec.m_count = settings.m_count;
    spec.h_d = settings.hd;
    spec.config = config(settings, settings.c.or(settings.penalty_c))?;
    let result = monte_carlo_run(&spec, None)?;
    let dir = out_dir(settings);
    result.write(&dir)?;
    for (name, body) in &result.tables {
        if !name.ends_with("_reps.csv") {
            println!("{name}:\n{body}");
        }
    }
    println!("{} replications in {:.1} s, outputs in {}", result.records.len(), result.elapsed_secs, dir.display());
    Ok(())
}
