//! `gmerf` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gmerf::baseline::{cep_area_proportions, fit_glmm_pql};
use gmerf::bootstrap::{mse_parametric, BootstrapConfig, SampleDesign};
use gmerf::forest::{tune_mtry, TrainingSet};
use gmerf::gmerf::{fit, GmerfConfig, GmerfModel};
use gmerf::io::{self, Sidecar, ThresholdSpec};
use gmerf::predict::{aggregate, area_proportions, direct_estimates, roc_auc, unit_probabilities, AreaEstimate};
use gmerf::seed;
use gmerf::simulation::{run_study, CepMethod, DirectMethod, GmerfMethod, Scenario, StudyMethod};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Everything a run needs; the resolved value is stored in every sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    survey: Option<PathBuf>,
    census: Option<PathBuf>,
    model: Option<PathBuf>,
    estimates: Option<PathBuf>,
    mapping: Option<PathBuf>,
    threshold: Option<ThresholdSpec>,
    gmerf: GmerfConfig,
    bootstrap: BootstrapConfig,
    /// Scenario name or JSON file for `simulate`.
    scenario: Option<String>,
    replicates: usize,
    methods: Vec<String>,
    /// Bootstrap MSE inside `simulate`.
    study_mse: bool,
    folds: usize,
    candidates: Vec<usize>,
    output: PathBuf,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            survey: None,
            census: None,
            model: None,
            estimates: None,
            mapping: None,
            threshold: None,
            gmerf: GmerfConfig::default(),
            bootstrap: BootstrapConfig::default(),
            scenario: None,
            replicates: 50,
            methods: vec!["gmerf".into(), "cep".into()],
            study_mse: false,
            folds: 5,
            candidates: Vec::new(),
            output: PathBuf::from("."),
            seed: 0,
        }
    }
}

#[derive(Parser)]
#[command(name = "gmerf", version, about = "Small area proportions with generalized mixed effects random forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a GMERF to a survey and predict every census area.
    Fit(Common),
    /// Predict area proportions from a saved model.
    Predict(Common),
    /// Parametric bootstrap MSE for a saved model.
    Mse(Common),
    /// Monte Carlo study on a simulation scenario.
    Simulate(Common),
    /// Choose mtry by cross-validation.
    Tune(Common),
    /// Population-weighted aggregation of area estimates.
    Aggregate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (a previous sidecar also works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    survey: Option<PathBuf>,
    #[arg(long)]
    census: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Poverty line for income columns: a number or `0.6*median`.
    #[arg(long)]
    threshold: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long)]
    min_node_size: Option<usize>,
    /// `probability` or `link`.
    #[arg(long)]
    aggregation: Option<String>,
    /// Bootstrap replicates.
    #[arg(long = "bootstrap", short = 'B')]
    bootstrap_replicates: Option<usize>,
    /// Trees in bootstrap refits.
    #[arg(long)]
    refit_trees: Option<usize>,
    /// Scenario name (normal-small, interaction-small, normal-large, interaction-large) or JSON file.
    #[arg(long)]
    scenario: Option<String>,
    /// Monte Carlo replicates.
    #[arg(long, short = 'M')]
    replicates: Option<usize>,
    /// Comma-separated methods: gmerf, cep, direct.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Run bootstrap MSE inside the study.
    #[arg(long)]
    with_mse: bool,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated mtry candidates.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = &self.$field {
                    $target = v.clone().into();
                }
            };
        }
        set!(survey => cfg.survey);
        set!(census => cfg.census);
        set!(model => cfg.model);
        set!(estimates => cfg.estimates);
        set!(mapping => cfg.mapping);
        set!(out => cfg.output);
        set!(seed => cfg.seed);
        set!(trees => cfg.gmerf.forest.n_trees);
        set!(mtry => cfg.gmerf.forest.mtry);
        set!(min_node_size => cfg.gmerf.forest.min_node_size);
        set!(bootstrap_replicates => cfg.bootstrap.replicates);
        set!(scenario => cfg.scenario);
        set!(replicates => cfg.replicates);
        set!(methods => cfg.methods);
        set!(folds => cfg.folds);
        set!(candidates => cfg.candidates);
        if let Some(t) = &self.threshold {
            cfg.threshold = Some(ThresholdSpec::parse(t)?);
        }
        if let Some(a) = &self.aggregation {
            cfg.gmerf.aggregation = serde_json::from_value(json!(a))
                .map_err(|_| anyhow!("aggregation must be `probability` or `link`, got {a:?}"))?;
        }
        if let Some(t) = self.refit_trees {
            let mut f = cfg.bootstrap.refit_forest.take().unwrap_or_else(|| cfg.gmerf.forest.clone());
            f.n_trees = t;
            cfg.bootstrap.refit_forest = Some(f);
        }
        cfg.study_mse |= self.with_mse;
        // Every random stream follows from the global seed.
        cfg.gmerf.forest.seed = seed::derive(cfg.seed, 0);
        cfg.bootstrap.seed = seed::derive(cfg.seed, 1);
        Ok(cfg)
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = match value.get("config") {
        Some(c) if value.get("command").is_some() => c.clone(),
        _ => value,
    };
    serde_json::from_value(inner).with_context(|| format!("invalid configuration in {}", path.display()))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing --{what}"))
}

fn output_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    Ok(cfg.output.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn emit(cfg: &RunConfig, command: &str, name: &str, estimates: &[AreaEstimate], results: serde_json::Value) -> Result<PathBuf> {
    let path = output_file(cfg, name)?;
    io::write_estimates(&path, estimates)?;
    let mut sidecar = Sidecar::new(command, cfg.seed, serde_json::to_value(cfg)?);
    sidecar.results = results;
    io::write_sidecar(&path, &sidecar)?;
    Ok(path)
}

fn load_census_for(cfg: &RunConfig, covariates: Option<&[String]>) -> Result<io::CensusData> {
    Ok(io::load_census(required(&cfg.census, "census")?, covariates)?)
}

fn cmd_fit(cfg: &RunConfig) -> Result<serde_json::Value> {
    let survey = io::load_survey(required(&cfg.survey, "survey")?, cfg.threshold)?;
    let census = load_census_for(cfg, Some(&survey.covariates))?;
    io::check_survey_areas(&survey, &census)?;
    let model = fit(&survey.y, survey.x.view(), &survey.area, &cfg.gmerf)?;
    let estimates = area_proportions(&model, &census.frame)?;
    let probs = unit_probabilities(&model, survey.x.view(), &survey.area)?;
    let auc = roc_auc(&survey.y, &probs)?;
    let model_path = output_file(cfg, "model.json")?;
    write_json(&model_path, &ModelFile { covariates: survey.covariates.clone(), model: &model })?;
    let results = json!({
        "sigma2_nu": model.sigma2_nu,
        "threshold": survey.threshold,
        "in_sample_auc": auc,
        "macro_iterations": model.trace.macro_iterations(),
        "micro_iterations": model.trace.micro_iterations(),
        "flags": model.trace.flags(),
    });
    let path = emit(cfg, "fit", "estimates.csv", &estimates, results.clone())?;
    Ok(json!({"estimates": path, "model": model_path, "results": results}))
}

#[derive(Serialize)]
struct ModelFile<'a> {
    covariates: Vec<String>,
    model: &'a GmerfModel,
}

#[derive(Deserialize)]
struct LoadedModel {
    covariates: Vec<String>,
    model: GmerfModel,
}

fn load_model(cfg: &RunConfig) -> Result<LoadedModel> {
    let path = required(&cfg.model, "model")?;
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("reading model {}", path.display()))
}

/// Model with the run's aggregation rule applied.
fn configured(mut model: GmerfModel, cfg: &RunConfig, explicit: bool) -> GmerfModel {
    if explicit {
        model.config.aggregation = cfg.gmerf.aggregation;
    }
    model
}

fn cmd_predict(cfg: &RunConfig, explicit_aggregation: bool) -> Result<serde_json::Value> {
    let loaded = load_model(cfg)?;
    let model = configured(loaded.model, cfg, explicit_aggregation);
    let census = load_census_for(cfg, Some(&loaded.covariates))?;
    let estimates = area_proportions(&model, &census.frame)?;
    let path = emit(cfg, "predict", "estimates.csv", &estimates, serde_json::Value::Null)?;
    Ok(json!({"estimates": path}))
}

fn cmd_mse(cfg: &RunConfig, explicit_aggregation: bool) -> Result<serde_json::Value> {
    let loaded = load_model(cfg)?;
    let model = configured(loaded.model, cfg, explicit_aggregation);
    let census = load_census_for(cfg, Some(&loaded.covariates))?;
    let mut estimates = area_proportions(&model, &census.frame)?;
    let result = mse_parametric(&model, &census.frame, &SampleDesign::from_model(&model), &cfg.bootstrap)?;
    result.apply(&mut estimates);
    let results = json!({
        "replicates": result.replicates,
        "failures": result.failures.len(),
    });
    let path = emit(cfg, "mse", "estimates.csv", &estimates, results.clone())?;
    Ok(json!({"estimates": path, "results": results}))
}

fn scenario(cfg: &RunConfig) -> Result<Scenario> {
    let name = cfg.scenario.as_deref().ok_or_else(|| anyhow!("missing --scenario"))?;
    match Scenario::by_name(name) {
        Some(s) => Ok(s),
        None if Path::new(name).exists() => Ok(Scenario::from_json_file(Path::new(name))?),
        None => bail!("unknown scenario {name:?}"),
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<serde_json::Value> {
    let s = scenario(cfg)?;
    let gmerf_method = GmerfMethod {
        config: cfg.gmerf.clone(),
        bootstrap: cfg.study_mse.then(|| cfg.bootstrap.clone()),
    };
    let cep = CepMethod { control: cfg.gmerf.control.clone() };
    let mut methods: Vec<&dyn StudyMethod> = Vec::new();
    for m in &cfg.methods {
        match m.to_ascii_lowercase().as_str() {
            "gmerf" => methods.push(&gmerf_method),
            "cep" => methods.push(&cep),
            "direct" => methods.push(&DirectMethod),
            other => bail!("unknown method {other:?} (expected gmerf, cep or direct)"),
        }
    }
    if methods.is_empty() {
        bail!("no methods selected");
    }
    let table = run_study(&s, cfg.replicates, &methods, cfg.seed)?;
    let summary: Vec<serde_json::Value> = table
        .methods
        .iter()
        .map(|m| {
            json!({
                "method": m.method,
                "failures": m.failures,
                "rb": m.rb(),
                "rrmse": m.rrmse(),
                "rb_rmse": m.rb_rmse(),
                "rrmse_rmse": m.rrmse_rmse(),
            })
        })
        .collect();
    let path = output_file(cfg, "report.csv")?;
    io::write_report(&path, &table)?;
    let mut sidecar = Sidecar::new("simulate", cfg.seed, serde_json::to_value(cfg)?);
    sidecar.results = json!({"scenario": s, "summary": summary});
    io::write_sidecar(&path, &sidecar)?;
    Ok(json!({"report": path, "summary": summary}))
}

fn cmd_tune(cfg: &RunConfig) -> Result<serde_json::Value> {
    let survey = io::load_survey(required(&cfg.survey, "survey")?, cfg.threshold)?;
    let p = survey.covariates.len();
    let candidates: Vec<usize> = if cfg.candidates.is_empty() { (1..=p).collect() } else { cfg.candidates.clone() };
    let response: Vec<f64> = survey.y.iter().map(|&v| f64::from(v)).collect();
    let weights = vec![1.0; response.len()];
    let data = TrainingSet::new(survey.x.view(), &response, &weights)?;
    let mut forest = cfg.gmerf.forest.clone();
    forest.seed = seed::derive(cfg.seed, 2);
    let choice = tune_mtry(&data, cfg.folds, &candidates, &forest)?;
    let path = output_file(cfg, "tune.json")?;
    let out = json!({
        "command": "tune",
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "mtry": choice.mtry,
        "cv_errors": choice.cv_errors,
    });
    write_json(&path, &out)?;
    Ok(json!({"mtry": choice.mtry, "cv_errors": choice.cv_errors, "file": path}))
}

fn cmd_aggregate(cfg: &RunConfig) -> Result<serde_json::Value> {
    let estimates = io::read_estimates(required(&cfg.estimates, "estimates")?)?;
    let mapping = io::load_mapping(required(&cfg.mapping, "mapping")?)?;
    let districts = aggregate(&estimates, &mapping)?;
    let path = emit(cfg, "aggregate", "aggregate.csv", &districts, serde_json::Value::Null)?;
    Ok(json!({"estimates": path}))
}

/// Baseline estimates written next to GMERF output when requested.
fn cmd_fit_baselines(cfg: &RunConfig) -> Result<Option<serde_json::Value>> {
    let wants = |name: &str| cfg.methods.iter().any(|m| m.eq_ignore_ascii_case(name));
    if !wants("cep") && !wants("direct") {
        return Ok(None);
    }
    let survey = io::load_survey(required(&cfg.survey, "survey")?, cfg.threshold)?;
    let census = load_census_for(cfg, Some(&survey.covariates))?;
    let mut out = serde_json::Map::new();
    if wants("cep") {
        let glmm = fit_glmm_pql(&survey.y, survey.x.view(), &survey.area, &cfg.gmerf.control)?;
        let est = cep_area_proportions(&glmm, &census.frame)?;
        let path = emit(cfg, "fit", "estimates_cep.csv", &est, json!({"beta": glmm.beta, "sigma2_nu": glmm.sigma2_nu}))?;
        out.insert("cep".into(), json!(path));
    }
    if wants("direct") {
        let est = direct_estimates(&survey.y, &survey.area, &census.frame.size_map())?;
        let path = emit(cfg, "fit", "estimates_direct.csv", &est, serde_json::Value::Null)?;
        out.insert("direct".into(), json!(path));
    }
    Ok(Some(serde_json::Value::Object(out)))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Fit(c) => {
            let cfg = c.resolve()?;
            let mut out = cmd_fit(&cfg)?;
            if let Some(b) = cmd_fit_baselines(&cfg)? {
                out["baselines"] = b;
            }
            Ok(out)
        }
        Command::Predict(c) => cmd_predict(&c.resolve()?, c.aggregation.is_some()),
        Command::Mse(c) => cmd_mse(&c.resolve()?, c.aggregation.is_some()),
        Command::Simulate(c) => cmd_simulate(&c.resolve()?),
        Command::Tune(c) => cmd_tune(&c.resolve()?),
        Command::Aggregate(c) => cmd_aggregate(&c.resolve()?),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<gmerf::Error>())
        .map(gmerf::Error::kind)
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let message = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
            eprintln!("{}", json!({"error": error_kind(&err), "message": message}));
            ExitCode::FAILURE
        }
    }
}
