use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use imputeaudit_core::aia::{attack_all_windows, summarize, write_windows, AiaConfig};
use imputeaudit_core::dataset::{load_csv, CsvSchema, TimeSeriesRecord};
use imputeaudit_core::imputers::{
    serve_imputer, Imputer, ImputerHandle, InterpolatingImputer, MemorizingImputer, RemoteImputer,
    SeasonalMeanImputer, TIMEOUT_ENV_VAR,
};
use imputeaudit_core::mia::{LbrmConfig, LossScope, ThresholdPolicy};
use imputeaudit_core::parallel::Workers;
use imputeaudit_core::pipeline::{
    parity_check, run_mia, run_mia_then_aia, scenario_data, LinkConfig, MiaConfig, Scenario,
};
use imputeaudit_core::report::{exit, render_precision_table, render_roc_table, write_json, write_sidecars, AuditReport};
use imputeaudit_core::signal_math::{CwtConfig, DtwConfig, PointwiseDistance};
use imputeaudit_core::synthetic::{generate, SyntheticConfig};
use imputeaudit_core::Error;

#[derive(Parser, Debug)]
#[command(name = "imputeaudit", version, about = "Privacy audits for time-series imputation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Membership inference over a suspect set.
    Mia(MiaArgs),
    /// Sliding-window attribute inference over a dataset.
    Aia(AiaArgs),
    /// Full audit: parity, membership, risk selection and linked attribute inference.
    Pipeline(PipelineArgs),
    /// Serve a built-in imputer over HTTP.
    Serve(ServeArgs),
    /// Render plot-ready tables from a report.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Per-request timeout for remote models.
    #[arg(long, env = TIMEOUT_ENV_VAR, default_value_t = 30_000)]
    timeout_ms: u64,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value_t = Schema::Long)]
    schema: Schema,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Schema {
    Long,
    Wide,
}

impl From<Schema> for CsvSchema {
    fn from(s: Schema) -> Self {
        match s {
            Schema::Long => CsvSchema::Long,
            Schema::Wide => CsvSchema::Wide,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct LossArgs {
    #[arg(long, value_enum, default_value_t = Distance::Absolute)]
    dtw_distance: Distance,
    /// Sakoe-Chiba band radius.
    #[arg(long)]
    band: Option<usize>,
    #[arg(long, value_enum, default_value_t = Scope::Full)]
    loss_scope: Scope,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Distance {
    Absolute,
    Squared,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Scope {
    Full,
    Masked,
}

impl LossArgs {
    fn config(&self) -> LbrmConfig {
        LbrmConfig {
            dtw: DtwConfig {
                pointwise_distance: match self.dtw_distance {
                    Distance::Absolute => PointwiseDistance::Absolute,
                    Distance::Squared => PointwiseDistance::Squared,
                },
                band_radius: self.band,
            },
            scope: match self.loss_scope {
                Scope::Full => LossScope::FullSeries,
                Scope::Masked => LossScope::MaskedWindow,
            },
            ..LbrmConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct MemorizingArgs {
    /// Blend between replay (1) and interpolation (0) for built-in memorizing models.
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    /// Best-match MAE above which built-in memorizing models interpolate instead.
    #[arg(long)]
    match_tolerance: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct AiaFlags {
    #[arg(long, default_value_t = 24)]
    window: usize,
    #[arg(long, default_value_t = 24)]
    stride: usize,
    #[arg(long, default_value_t = 2)]
    tolerance: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    widths: Vec<f64>,
}

impl AiaFlags {
    fn config(&self) -> AiaConfig {
        AiaConfig {
            window: self.window,
            stride: self.stride,
            tolerance: self.tolerance,
            cwt: CwtConfig::with_widths(self.widths.clone()),
        }
    }
}

#[derive(Args, Debug)]
struct MiaArgs {
    /// builtin:memorizing|interpolating|seasonal_mean[:P] or an http(s) URL.
    #[arg(long)]
    target: String,
    #[arg(long)]
    reference: String,
    #[arg(long)]
    suspects: PathBuf,
    /// CSV `id,label` with 1 for members; enables ROC metrics.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Training store when the target is a built-in memorizing model.
    #[arg(long)]
    target_train: Option<PathBuf>,
    #[arg(long)]
    reference_train: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    uwidth: usize,
    /// top:Q, mean_std:N or fixed:V.
    #[arg(long, default_value = "top:0.25")]
    theta: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    memorizing: MemorizingArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AiaArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    /// Training store for a built-in memorizing model; defaults to --data.
    #[arg(long)]
    train: Option<PathBuf>,
    #[command(flatten)]
    aia: AiaFlags,
    #[command(flatten)]
    schema: DataArgs,
    #[command(flatten)]
    memorizing: MemorizingArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScenarioArg {
    Scratch,
    Finetune,
    Synthetic,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Scratch => Scenario::Scratch,
            ScenarioArg::Finetune => Scenario::Finetune,
            ScenarioArg::Synthetic => Scenario::Synthetic,
        }
    }
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::Scratch)]
    scenario: ScenarioArg,
    /// Dataset to split (scratch and finetune scenarios).
    #[arg(long, required_if_eq_any([("scenario", "scratch"), ("scenario", "finetune")]))]
    data: Option<PathBuf>,
    #[arg(long, default_value = "builtin:memorizing")]
    target: String,
    #[arg(long, default_value = "builtin:interpolating")]
    reference: String,
    /// Evaluation model attacked with the same procedure as the target.
    #[arg(long)]
    eval: Option<String>,
    #[arg(long, default_value_t = 0.25)]
    q: f64,
    #[arg(long, default_value_t = 48)]
    uwidth: usize,
    #[arg(long, default_value = "top:0.25")]
    theta: String,
    /// Fraction of points masked by the parity check.
    #[arg(long, default_value_t = 0.2)]
    parity_fraction: f64,
    #[arg(long, default_value_t = 100_000)]
    permutations: usize,
    #[command(flatten)]
    aia: AiaFlags,
    #[command(flatten)]
    schema: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    memorizing: MemorizingArgs,
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 200)]
    n_series: usize,
    #[arg(long, default_value_t = 100)]
    n_members: usize,
    #[arg(long, default_value_t = 480)]
    length: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.0)]
    difficulty_spread: f64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// memorizing, interpolating or seasonal_mean[:P], optionally prefixed with builtin:.
    #[arg(long)]
    imputer: String,
    /// Training store for a memorizing imputer.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Series length reported by /health.
    #[arg(long)]
    length: Option<usize>,
    #[command(flatten)]
    schema: DataArgs,
    #[command(flatten)]
    memorizing: MemorizingArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report.json written by `pipeline` or `mia`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// A bad flag value, reported with exit code 64.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

enum ModelSpec {
    Memorizing,
    Interpolating,
    SeasonalMean(usize),
    Remote(String),
}

fn parse_spec(spec: &str) -> anyhow::Result<ModelSpec> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(ModelSpec::Remote(spec.to_string()));
    }
    let body = spec.strip_prefix("builtin:").unwrap_or(spec);
    let (name, arg) = match body.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (body, None),
    };
    match (name, arg) {
        ("memorizing", None) => Ok(ModelSpec::Memorizing),
        ("interpolating", None) => Ok(ModelSpec::Interpolating),
        ("seasonal_mean", None) => Ok(ModelSpec::SeasonalMean(SeasonalMeanImputer::DEFAULT_PERIOD)),
        ("seasonal_mean", Some(p)) => p
            .parse()
            .map(ModelSpec::SeasonalMean)
            .map_err(|_| usage(format!("seasonal_mean period {p:?} is not a positive integer"))),
        _ => Err(usage(format!(
            "unknown model {spec:?}; expected builtin:memorizing, builtin:interpolating, builtin:seasonal_mean[:P] or an http(s) URL"
        ))),
    }
}

fn build_model(
    spec: &str,
    store: Option<Vec<TimeSeriesRecord>>,
    mem: &MemorizingArgs,
    timeout: Duration,
) -> anyhow::Result<ImputerHandle> {
    let handle = match parse_spec(spec)? {
        ModelSpec::Memorizing => {
            let store = store.ok_or_else(|| usage(format!("{spec} needs a training store")))?;
            MemorizingImputer::new(store)?
                .with_strength(mem.strength)
                .map_err(|e| usage(e.to_string()))?
                .with_match_tolerance(mem.match_tolerance)
                .map_err(|e| usage(e.to_string()))?
                .into()
        }
        ModelSpec::Interpolating => InterpolatingImputer.into(),
        ModelSpec::SeasonalMean(p) => SeasonalMeanImputer::new(p).map_err(|e| usage(e.to_string()))?.into(),
        ModelSpec::Remote(url) => RemoteImputer::new(url, timeout).map_err(|e| usage(e.to_string()))?.into(),
    };
    Ok(handle)
}

fn load(path: &Path, schema: Schema) -> anyhow::Result<Vec<TimeSeriesRecord>> {
    load_csv(path, schema.into()).with_context(|| format!("loading {}", path.display()))
}

fn load_labels(path: &Path) -> anyhow::Result<HashMap<String, bool>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let (Some(id), Some(label)) = (row.get(0), row.get(1)) else {
            bail!("{}: expected rows `id,label`", path.display());
        };
        let member = match label.trim() {
            "1" | "true" | "member" => true,
            "0" | "false" | "nonmember" => false,
            other => bail!("{}: label {other:?} for {id:?} is not 0 or 1", path.display()),
        };
        labels.insert(id.to_string(), member);
    }
    Ok(labels)
}

fn policy(s: &str) -> anyhow::Result<ThresholdPolicy> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn argv() -> Value {
    json!(std::env::args().collect::<Vec<_>>())
}

fn finish(report: &mut AuditReport, out: &Path, name: &str) -> anyhow::Result<i32> {
    write_json(out.join("config.json"), &(serde_json::to_string_pretty(&report.config_echo)? + "\n"))?;
    write_json(out.join(name), &report.to_json()?)?;
    for d in &report.degenerate {
        log::warn!("degenerate: {d}");
    }
    Ok(report.exit_code())
}

fn cmd_mia(a: MiaArgs) -> anyhow::Result<i32> {
    let timeout = Duration::from_millis(a.common.timeout_ms);
    let theta = policy(&a.theta)?;
    let suspects = load(&a.suspects, a.data.schema)?;
    let store = |p: &Option<PathBuf>| p.as_deref().map(|p| load(p, a.data.schema)).transpose();
    let target = build_model(&a.target, store(&a.target_train)?, &a.memorizing, timeout)?;
    let reference = build_model(&a.reference, store(&a.reference_train)?, &a.memorizing, timeout)?;
    let labels = match &a.labels {
        Some(p) => {
            let map = load_labels(p)?;
            let aligned: Option<Vec<bool>> = suspects.iter().map(|s| map.get(&s.id).copied()).collect();
            Some(aligned.ok_or_else(|| usage("labels file does not cover every suspect"))?)
        }
        None => None,
    };
    let cfg = MiaConfig {
        u_width: a.uwidth,
        policy: theta,
        lbrm: a.loss.config(),
        seed: a.common.seed,
    };
    let echo = json!({
        "command": "mia",
        "argv": argv(),
        "seed": a.common.seed,
        "workers": a.common.workers,
        "timeout_ms": a.common.timeout_ms,
        "suspects": a.suspects,
        "labels": a.labels,
        "target": target.describe(),
        "reference": reference.describe(),
        "mia": cfg,
    });
    let out = run_mia(&target, &reference, &suspects, labels.as_deref(), &cfg, Workers(a.common.workers))?;
    let mut report = AuditReport::new(None, echo);
    report.add_mia(&out);
    report.sidecars = write_sidecars(&a.common.out, Some(&out), None)?;
    finish(&mut report, &a.common.out, "mia.json")
}

fn cmd_aia(a: AiaArgs) -> anyhow::Result<i32> {
    let timeout = Duration::from_millis(a.common.timeout_ms);
    let cfg = a.aia.config();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = load(&a.data, a.schema.schema)?;
    let store = match &a.train {
        Some(p) => load(p, a.schema.schema)?,
        None => data.clone(),
    };
    let model = build_model(&a.model, Some(store), &a.memorizing, timeout)?;
    let echo = json!({
        "command": "aia",
        "argv": argv(),
        "seed": a.common.seed,
        "workers": a.common.workers,
        "timeout_ms": a.common.timeout_ms,
        "data": a.data,
        "model": model.describe(),
        "aia": cfg,
    });
    let windows = attack_all_windows(&model, &data, &cfg, Workers(a.common.workers))?;
    std::fs::create_dir_all(&a.common.out)?;
    write_windows(a.common.out.join("aia_windows.csv"), &windows)?;
    let agg = summarize(windows);
    let mut report = AuditReport::new(None, echo);
    if agg.precision_mean.is_none() {
        report
            .degenerate
            .push(format!("aia: none of {} windows produced a predicted peak", agg.n_windows));
    }
    report.aia_all = Some(agg);
    report.sidecars = vec!["aia_windows.csv".into()];
    finish(&mut report, &a.common.out, "aia.json")
}

fn cmd_pipeline(a: PipelineArgs) -> anyhow::Result<i32> {
    let timeout = Duration::from_millis(a.common.timeout_ms);
    let workers = Workers(a.common.workers);
    let seed = a.common.seed;
    let theta = policy(&a.theta)?;
    if !(a.q > 0.0 && a.q <= 1.0) {
        return Err(usage(format!("--q {} outside (0, 1]", a.q)));
    }
    let aia = a.aia.config();
    aia.validate().map_err(|e| usage(e.to_string()))?;
    let scenario = Scenario::from(a.scenario);

    let mut synthetic_cfg = None;
    let (target_train, reference_train, suspects, labels) = match scenario {
        Scenario::Synthetic => {
            let cfg = SyntheticConfig {
                n_series: a.synthetic.n_series,
                n_members: a.synthetic.n_members,
                length: a.synthetic.length,
                noise_sd: a.synthetic.noise_sd,
                difficulty_spread: a.synthetic.difficulty_spread,
                seed,
                ..SyntheticConfig::default()
            };
            let d = generate(&cfg).map_err(|e| usage(e.to_string()))?;
            synthetic_cfg = Some(cfg);
            (d.members(), Vec::new(), d.records(), d.labels())
        }
        _ => {
            let path = a.data.as_deref().ok_or_else(|| usage("--data is required"))?;
            let records = load(path, a.schema.schema)?;
            let s = scenario_data(&records, scenario, seed)?;
            (s.target_train, s.reference_train, s.suspects, s.labels)
        }
    };
    let public = (!reference_train.is_empty()).then(|| reference_train.clone());
    let target = build_model(&a.target, Some(target_train.clone()), &a.memorizing, timeout)?;
    let reference = build_model(&a.reference, public.clone(), &a.memorizing, timeout)?;
    let eval = a
        .eval
        .as_deref()
        .map(|s| build_model(s, public.clone(), &a.memorizing, timeout))
        .transpose()?;

    let mia_cfg = MiaConfig {
        u_width: a.uwidth,
        policy: theta,
        lbrm: a.loss.config(),
        seed,
    };
    let link_cfg = LinkConfig {
        u_width: a.uwidth,
        q: a.q,
        aia,
        lbrm: mia_cfg.lbrm,
        seed,
        n_permutations: a.permutations,
    };
    let echo = json!({
        "command": "pipeline",
        "argv": argv(),
        "scenario": scenario,
        "seed": seed,
        "workers": a.common.workers,
        "timeout_ms": a.common.timeout_ms,
        "data": a.data,
        "synthetic": synthetic_cfg,
        "target": target.describe(),
        "reference": reference.describe(),
        "eval": eval.as_ref().map(ImputerHandle::describe),
        "parity_fraction": a.parity_fraction,
        "mia": mia_cfg,
        "linked": link_cfg,
    });

    let holdout: Vec<TimeSeriesRecord> = suspects
        .iter()
        .zip(&labels)
        .filter(|(_, &m)| !m)
        .map(|(s, _)| s.clone())
        .collect();
    let mut report = AuditReport::new(Some(scenario), echo);
    if holdout.is_empty() {
        report.degenerate.push("parity: no held-out series".into());
    } else {
        let parity = parity_check(
            &target,
            &reference,
            &holdout,
            Some(&target_train),
            public.as_deref(),
            a.parity_fraction,
            seed,
            workers,
        )
        .map_err(|e| match e {
            Error::Config(m) => usage(m),
            e => e.into(),
        })?;
        report.add_parity(parity);
    }
    let mia = run_mia(&target, &reference, &suspects, Some(&labels), &mia_cfg, workers)?;
    report.add_mia(&mia);
    let link = run_mia_then_aia(
        &target,
        &reference,
        eval.as_ref().map(|e| e as &dyn Imputer),
        &suspects,
        Some(&labels),
        &link_cfg,
        workers,
    )?;
    report.add_link(&link);
    report.sidecars = write_sidecars(&a.common.out, Some(&mia), Some(&link))?;
    finish(&mut report, &a.common.out, "report.json")
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<i32> {
    if matches!(parse_spec(&a.imputer)?, ModelSpec::Remote(_)) {
        return Err(usage("serve needs a built-in imputer"));
    }
    let store = a.train.as_deref().map(|p| load(p, a.schema.schema)).transpose()?;
    let model = build_model(&a.imputer, store, &a.memorizing, Duration::from_secs(30))?;
    let server = serve_imputer(Arc::new(model), &format!("{}:{}", a.host, a.port), a.length)?;
    println!("listening on {}", server.url());
    server.wait();
    Ok(exit::OK)
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: AuditReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    std::fs::create_dir_all(&a.out)?;
    render_roc_table(std::fs::File::create(a.out.join("roc_table.csv"))?, &report)?;
    render_precision_table(std::fs::File::create(a.out.join("precision_table.csv"))?, &report)?;
    Ok(exit::OK)
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Mia(a) => cmd_mia(a),
        Command::Aia(a) => cmd_aia(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Usage>().is_some() { exit::USAGE } else { exit::FATAL };
            ExitCode::from(code as u8)
        }
    }
}
