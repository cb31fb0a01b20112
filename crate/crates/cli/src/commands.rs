use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use eslasso::coes::{
    load_panel, run_coes, synthetic_panel, write_reports_csv, CoesReport, CoesRunConfig, ColumnMap, Panel,
    SyntheticPanelConfig,
};
use eslasso::es::{self, EsSolver};
use eslasso::features::build_dictionary;
use eslasso::model_selection::{
    blocked_folds, cross_validate, quantile_grid, CvOptions, CvResult, EsStage, QuantileStage,
};
use eslasso::quantile::{self, QuantileSolver};
use eslasso::simulation::{run_monte_carlo, MonteCarloSummary, SimulationConfig};
use eslasso::tailbound::{empirical_tail_experiment, TailExperimentConfig};

use crate::{run_err, usage, Context, Failure, Model};

/// Resolved configuration echoed into the manifest, plus a failure that is
/// reported only after all outputs are written.
pub type Done = (serde_json::Value, Option<Failure>);

fn read_config<T: DeserializeOwned>(ctx: &Context) -> Result<T, Failure> {
    let path = ctx
        .cli
        .config
        .as_ref()
        .ok_or_else(|| usage("this command needs --config"))?;
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn echo<T: Serialize>(cfg: &T) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(cfg).map_err(run_err)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> eslasso::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(run_err)?;
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Penalized,
    Unpenalized,
}

fn both_estimators() -> Vec<Estimator> {
    vec![Estimator::Penalized, Estimator::Unpenalized]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub simulation: SimulationConfig,
    pub reps: usize,
    #[serde(default = "both_estimators")]
    pub estimators: Vec<Estimator>,
}

pub fn simulate(ctx: &mut Context) -> Result<Done, Failure> {
    let mut cfg: SimulateConfig = read_config(ctx)?;
    if let Some(seed) = ctx.cli.seed {
        cfg.simulation.seed = seed;
    }
    cfg.simulation.validate()?;
    if cfg.reps == 0 || cfg.estimators.is_empty() {
        return Err(usage("reps and estimators must be non-empty"));
    }
    let mut summaries: Vec<MonteCarloSummary> = Vec::new();
    for est in &cfg.estimators {
        ctx.log(format!("{est:?}: {} replications", cfg.reps));
        summaries.push(run_monte_carlo(&cfg.simulation, cfg.reps, *est == Estimator::Penalized)?);
    }
    let mut summary = Vec::new();
    for (i, s) in summaries.iter().enumerate() {
        let mut part = csv_bytes(|b| s.write_summary_csv(b))?;
        if i > 0 {
            // keep a single header row
            let cut = part.iter().position(|&c| c == b'\n').map_or(part.len(), |p| p + 1);
            part.drain(..cut);
        }
        summary.extend(part);
    }
    ctx.out.write("summary.csv", &summary)?;
    for (est, s) in cfg.estimators.iter().zip(&summaries) {
        let name = match est {
            Estimator::Penalized => "records_penalized.csv",
            Estimator::Unpenalized => "records_unpenalized.csv",
        };
        ctx.out.write(name, &csv_bytes(|b| s.write_records_csv(b))?)?;
    }
    let failed: Vec<String> = summaries
        .iter()
        .flat_map(|s| s.failures.iter().map(|(r, e)| format!("replication {r}: {e}")))
        .collect();
    let failure = (!failed.is_empty())
        .then(|| Failure::Run(anyhow::anyhow!("{} replications failed; first: {}", failed.len(), failed[0])));
    Ok((echo(&cfg)?, failure))
}

/// Fixed penalty, its largest useful value, or cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PenaltyChoice {
    Value(f64),
    Keyword(PenaltyKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKeyword {
    Cv,
    Max,
}

impl Default for PenaltyChoice {
    fn default() -> Self {
        PenaltyChoice::Keyword(PenaltyKeyword::Cv)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub response: String,
    /// Defaults to every other column.
    #[serde(default)]
    pub regressors: Option<Vec<String>>,
    #[serde(default = "one")]
    pub degree: u32,
    pub tau: f64,
    #[serde(default)]
    pub nu: PenaltyChoice,
    #[serde(default)]
    pub lambda: PenaltyChoice,
    #[serde(default)]
    pub cv: CvOptions,
}

fn one() -> u32 {
    1
}

struct Data {
    y: Vec<f64>,
    raw: DMatrix<f64>,
    names: Vec<String>,
}

fn read_data(path: &Path, cfg: &FitConfig) -> Result<Data, Failure> {
    let bad = |m: String| usage(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("column '{name}' not found")))
    };
    let y_col = find(&cfg.response)?;
    let names: Vec<String> = match &cfg.regressors {
        Some(r) => r.clone(),
        None => headers.iter().filter(|h| **h != cfg.response).cloned().collect(),
    };
    if names.is_empty() {
        return Err(bad("no regressors".into()));
    }
    let cols = names.iter().map(|n| find(n)).collect::<Result<Vec<_>, _>>()?;
    let mut y = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: usize| -> Result<f64, Failure> {
            let cell = rec.get(c).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("row {}: '{cell}' in column '{}' is not a number", i + 2, headers[c])))
        };
        y.push(num(y_col)?);
        rows.push(cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?);
    }
    if y.len() < 2 {
        return Err(bad("need at least two data rows".into()));
    }
    let raw = DMatrix::from_fn(y.len(), cols.len(), |t, j| rows[t][j]);
    Ok(Data { y, raw, names })
}

#[derive(Serialize)]
struct FitOutput {
    model: Model,
    tau: f64,
    degree: u32,
    columns: Vec<String>,
    dictionary: eslasso::features::ChebyshevDictionary,
    quantile: quantile::QuantileFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    es: Option<es::ESFit>,
}

fn check_tau(tau: f64) -> Result<(), Failure> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("tau must lie in (0, 1), got {tau}")))
    }
}

fn quantile_cv(x: &eslasso::features::DesignMatrix, y: &[f64], cfg: &FitConfig) -> Result<CvResult, Failure> {
    let plan = blocked_folds(y.len(), cfg.cv.folds)?;
    let stage = QuantileStage {
        tau: cfg.tau,
        solver: QuantileSolver::default(),
    };
    Ok(cross_validate(&stage, x, y, &quantile_grid(x, y, cfg.tau, &cfg.cv), &plan)?)
}

fn es_cv(
    x: &eslasso::features::DesignMatrix,
    y: &[f64],
    aux_top: f64,
    nu: f64,
    cfg: &FitConfig,
) -> Result<CvResult, Failure> {
    let plan = blocked_folds(y.len(), cfg.cv.folds)?;
    let stage = EsStage {
        tau: cfg.tau,
        nu,
        quantile_solver: QuantileSolver::default(),
        es_solver: EsSolver::default(),
    };
    let grid = es::geometric_grid(aux_top.max(f64::MIN_POSITIVE), cfg.cv.points, cfg.cv.min_ratio);
    Ok(cross_validate(&stage, x, y, &grid, &plan)?)
}

fn fit_and_write(ctx: &mut Context, model: Model, data: &Path, force_cv: bool) -> Result<Done, Failure> {
    let mut cfg: FitConfig = read_config(ctx)?;
    check_tau(cfg.tau)?;
    if force_cv {
        cfg.nu = PenaltyChoice::Keyword(PenaltyKeyword::Cv);
        cfg.lambda = PenaltyChoice::Keyword(PenaltyKeyword::Cv);
    }
    let d = read_data(data, &cfg)?;
    let (dict, x) = build_dictionary(&d.raw, cfg.degree, None)?;
    let dict = dict.with_names(d.names.clone());
    let qs = QuantileSolver::default();

    let nu = match cfg.nu {
        PenaltyChoice::Value(v) if v >= 0.0 => v,
        PenaltyChoice::Value(v) => return Err(usage(format!("nu must be nonnegative, got {v}"))),
        PenaltyChoice::Keyword(PenaltyKeyword::Max) => quantile::nu_max(&x, &d.y, cfg.tau),
        PenaltyChoice::Keyword(PenaltyKeyword::Cv) => {
            ctx.log("cross-validating the quantile penalty");
            let res = quantile_cv(&x, &d.y, &cfg)?;
            ctx.out.write("cv_quantile.csv", &csv_bytes(|b| res.table.write_csv(b))?)?;
            res.chosen
        }
    };
    cfg.nu = PenaltyChoice::Value(nu);
    let q_fit = qs.fit(&x, &d.y, cfg.tau, nu)?;
    let q_pred = q_fit.predict(&x)?;

    let es_fit = if model == Model::Es {
        let aux = es::auxiliary_response(&d.y, &q_pred, cfg.tau)?;
        let top = es::lambda_max(&x, &aux.values);
        let lambda = match cfg.lambda {
            PenaltyChoice::Value(v) if v >= 0.0 => v,
            PenaltyChoice::Value(v) => return Err(usage(format!("lambda must be nonnegative, got {v}"))),
            PenaltyChoice::Keyword(PenaltyKeyword::Max) => top,
            PenaltyChoice::Keyword(PenaltyKeyword::Cv) => {
                ctx.log("cross-validating the ES penalty");
                let res = es_cv(&x, &d.y, top, nu, &cfg)?;
                ctx.out.write("cv_es.csv", &csv_bytes(|b| res.table.write_csv(b))?)?;
                res.chosen
            }
        };
        cfg.lambda = PenaltyChoice::Value(lambda);
        Some(EsSolver::default().fit(&x, &aux, lambda)?)
    } else {
        None
    };

    if !force_cv {
        let es_pred = es_fit.as_ref().map(|f| f.predict(&x)).transpose()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row", "y", "quantile"];
        if es_pred.is_some() {
            header.push("es");
        }
        w.write_record(&header).map_err(run_err)?;
        for t in 0..d.y.len() {
            let mut rec = vec![t.to_string(), d.y[t].to_string(), q_pred[t].to_string()];
            if let Some(e) = &es_pred {
                rec.push(e[t].to_string());
            }
            w.write_record(&rec).map_err(run_err)?;
        }
        ctx.out.write("predictions.csv", &w.into_inner().map_err(|e| run_err(anyhow::anyhow!("{e}")))?)?;
    }
    let out = FitOutput {
        model,
        tau: cfg.tau,
        degree: cfg.degree,
        columns: dict.column_labels(),
        dictionary: dict,
        quantile: q_fit,
        es: es_fit,
    };
    ctx.out.write_json(if force_cv { "selection.json" } else { "fit.json" }, &out)?;
    Ok((echo(&cfg)?, None))
}

pub fn fit(ctx: &mut Context, model: Model, data: &Path) -> Result<Done, Failure> {
    fit_and_write(ctx, model, data, false)
}

pub fn cv(ctx: &mut Context, model: Model, data: &Path) -> Result<Done, Failure> {
    fit_and_write(ctx, model, data, true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoesCliConfig {
    pub run: CoesRunConfig,
    /// Required with `--data`.
    #[serde(default)]
    pub columns: Option<ColumnMap>,
    /// Used when no `--data` is given.
    #[serde(default)]
    pub synthetic: Option<SyntheticPanelConfig>,
}

pub fn coes(ctx: &mut Context, data: Option<&Path>) -> Result<Done, Failure> {
    let mut cfg: CoesCliConfig = read_config(ctx)?;
    let panel: Panel = match data {
        Some(path) => {
            let map = cfg
                .columns
                .as_ref()
                .ok_or_else(|| usage("'columns' is required with --data"))?;
            let p = load_panel(path, map)?;
            ctx.log(format!("{} rows after lagging, {} dropped as missing", p.len(), p.dropped_missing));
            p
        }
        None => {
            let syn = cfg
                .synthetic
                .as_mut()
                .ok_or_else(|| usage("give --data or a 'synthetic' section"))?;
            if let Some(seed) = ctx.cli.seed {
                syn.seed = seed;
            }
            synthetic_panel(syn)?.panel
        }
    };
    let runs = run_coes(&panel, &cfg.run)?;
    let reports: Vec<CoesReport> = runs.iter().map(|(r, _)| r.clone()).collect();
    ctx.out.write("report.csv", &csv_bytes(|b| write_reports_csv(&reports, b))?)?;
    ctx.out.write_json("report.json", &reports)?;
    for (r, pred) in &runs {
        ctx.out
            .write(&format!("predictions_k{}.csv", r.degree), &csv_bytes(|b| pred.write_csv(b))?)?;
    }
    Ok((echo(&cfg)?, None))
}

pub fn tailbound(ctx: &mut Context) -> Result<Done, Failure> {
    let mut cfg: TailExperimentConfig = read_config(ctx)?;
    if let Some(seed) = ctx.cli.seed {
        cfg.seed = seed;
    }
    if cfg.u_grid.is_empty() {
        return Err(usage("u_grid is empty"));
    }
    let exp = empirical_tail_experiment(&cfg)?;
    let violations = exp.validation_violations();
    if !violations.is_empty() {
        eprintln!("warning: bound below the empirical tail at held-out u = {violations:?}");
    }
    ctx.out.write("tail.csv", &csv_bytes(|b| exp.write_csv(b))?)?;
    ctx.out.write_json(
        "constants.json",
        &serde_json::json!({ "blocking": exp.blocking, "constants": exp.constants }),
    )?;
    Ok((echo(&cfg)?, None))
}
