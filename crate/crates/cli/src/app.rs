//! Flag parsing and subcommand dispatch.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradgate::autodiff::Aggregation;
use gradgate::coupling::CouplingKind;
use gradgate::gating::{Activation, G2Config, LayerMode};
use gradgate::training::{Task, TrainConfig};
use serde_json::json;

use crate::energy::{self, EnergyConfig, Metric};
use crate::experiments::{self, DatasetSpec, HyperAxes, SweepPoint};
use crate::gradcheck::{self, CheckConfig, CheckModel};
use crate::models::ModelId;
use crate::stability::{self, GraphSpec, StabilityConfig};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "g2", version, about = "Gradient-gated message passing experiments")]
pub struct Cli {
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "G2_JOBS", default_value_t = 1)]
    pub jobs: usize,
    /// Add wall_time_ms to every record (makes output time-dependent).
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Layer-wise Dirichlet energy or MAD of an untrained deep stack on a grid.
    Energy(EnergyArgs),
    /// Perturbation decay around a constant steady state.
    Stability(StabilityArgs),
    /// Test accuracy against depth.
    Depth(DepthArgs),
    /// Test accuracy against label homophily.
    Homophily(HomophilyArgs),
    /// Node-level regression on the multi-scale task.
    Regress(RegressArgs),
    /// Ablation sweeps.
    Ablate(AblateArgs),
    /// Finite-difference check of a small network.
    Gradcheck(GradcheckArgs),
    /// Retrain every record of a JSON-lines file and compare metrics.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Dirichlet,
    Mad,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub model: ModelId,
    #[arg(long, default_value_t = 1000)]
    pub layers: usize,
    #[arg(long, default_value_t = 10)]
    pub grid_side: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = MetricArg::Dirichlet)]
    pub metric: MetricArg,
    /// CSV destination; without it the CSV goes to stdout and the summary to stderr.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    /// 0 runs the linearized system.
    #[arg(long, allow_negative_numbers = true)]
    pub p: f64,
    /// Regular graph (uniform weights must be symmetric): cycle:N or edges:FILE.
    #[arg(long, default_value = "cycle:6")]
    pub graph: GraphSpec,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 50.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub clamp: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Energy series CSV (`t,energy`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the fit summary JSON here.
    #[arg(long)]
    pub fit_out: Option<PathBuf>,
}

/// Dataset and training flags shared by the training subcommands. List
/// flags take comma-separated values; with several values each sweep point
/// keeps the configuration with the best validation metric.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub patience: usize,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub dropout_out: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub dropout_in: f64,
    /// Gating exponents (gated models only).
    #[arg(long)]
    pub p: Option<String>,
    /// JSON-lines destination (default stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    #[arg(long, default_value = "2,4,8,16,32,64")]
    pub layers: String,
    #[arg(long, default_value = "gcn,g2-gcn")]
    pub models: String,
    #[arg(long, default_value_t = 0.8)]
    pub h: f64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct HomophilyArgs {
    #[arg(long, default_value = "0,0.3,0.6,0.9")]
    pub h: String,
    #[arg(long, default_value = "gcn,g2-gcn")]
    pub models: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[arg(long, default_value = "gcn,g2-gcn")]
    pub models: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Alpha,
    P,
    Params,
    Fhat,
    SingleRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classify,
    Regress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Gcn,
    Gat,
    Sage,
}

impl From<KindArg> for CouplingKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Gcn => CouplingKind::Gcn,
            KindArg::Gat => CouplingKind::Gat,
            KindArg::Sage => CouplingKind::Sage,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma list, or `lo..hi` to keep the default points inside `[lo, hi]`.
    #[arg(long)]
    pub points: Option<String>,
    #[arg(long, value_enum, default_value_t = TaskArg::Classify)]
    pub task: TaskArg,
    /// Coupling of the ablated model.
    #[arg(long, value_enum, default_value_t = KindArg::Gcn)]
    pub kind: KindArg,
    /// Homophily of the classification dataset.
    #[arg(long, default_value_t = 0.1)]
    pub h: f64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A model family or `linear`.
    #[arg(long)]
    pub model: CheckModel,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the layer mode (plain, residual, multirate, g2, g2_alpha, g2_single_rate).
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<LayerMode>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// SAGE neighbor aggregation (sum, mean, max).
    #[arg(long, value_parser = parse_aggregation, default_value = "mean")]
    pub aggregation: Aggregation,
    /// Gating aggregation (sum, mean, max).
    #[arg(long, value_parser = parse_aggregation, default_value = "sum")]
    pub gate_aggregation: Aggregation,
    #[arg(long)]
    pub tanh: bool,
    #[arg(long)]
    pub fhat: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub records: PathBuf,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<LayerMode, String> {
    parse_enum(s)
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    parse_enum(s)
}

pub fn parse_list<T: FromStr>(flag: &str, s: &str) -> CliResult<Vec<T>> {
    let out: Result<Vec<T>, _> = s.split(',').map(|x| x.trim().parse::<T>()).collect();
    match out {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("--{flag}: cannot parse `{s}` as a comma-separated list"))),
    }
}

/// Default points of an ablation axis.
pub fn default_points(axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Alpha => vec![0.001, 0.01, 0.1, 0.5, 1.0],
        Axis::P => vec![1.0, 2.0, 3.0, 4.0, 5.0],
        Axis::Params => vec![8.0, 16.0, 32.0],
        Axis::Fhat => vec![0.0, 1.0],
        Axis::SingleRate => vec![0.0, 1.0],
    }
}

/// Parses `a,b,c` or `lo..hi` (default points within the closed range).
pub fn parse_points(axis: Axis, spec: Option<&str>) -> CliResult<Vec<f64>> {
    let bad = |why: &str| CliError::Usage(format!("--points: {why}"));
    let pts = match spec {
        None => default_points(axis),
        Some(s) => {
            if matches!(axis, Axis::Fhat | Axis::SingleRate) {
                return Err(bad("this axis has fixed points"));
            }
            if let Some((lo, hi)) = s.split_once("..") {
                let lo: f64 = lo.trim().parse().map_err(|_| bad(&format!("bad lower bound in `{s}`")))?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad(&format!("bad upper bound in `{s}`")))?;
                if !(lo <= hi) {
                    return Err(bad(&format!("empty range `{s}`")));
                }
                let v: Vec<f64> = default_points(axis).into_iter().filter(|x| (lo..=hi).contains(x)).collect();
                if v.is_empty() {
                    return Err(bad(&format!("no default point inside `{s}`")));
                }
                v
            } else {
                parse_list::<f64>("points", s)?
            }
        }
    };
    let valid = |x: f64| match axis {
        Axis::Alpha => x > 0.0 && x <= 1.0,
        Axis::P => x > 0.0 && x.is_finite(),
        Axis::Params => x >= 1.0 && x.fract() == 0.0,
        Axis::Fhat | Axis::SingleRate => true,
    };
    if let Some(x) = pts.iter().find(|&&x| !valid(x)) {
        return Err(bad(&format!("{x} is outside the axis domain")));
    }
    Ok(pts)
}

struct Defaults {
    nodes: usize,
    lr: &'static str,
    dropout_out: &'static str,
    p: &'static str,
}

const CLASSIFY: Defaults = Defaults { nodes: 300, lr: "5e-3", dropout_out: "0", p: "2" };
/// Fig-5 style sweeps search lr for every family and p for gated ones.
const HOMOPHILY: Defaults = Defaults { nodes: 300, lr: "1e-3,5e-3,1e-2", dropout_out: "0", p: "1,2,3" };
const REGRESS: Defaults = Defaults { nodes: 1000, lr: "1e-2", dropout_out: "0,0.45", p: "2" };

impl TrainArgs {
    fn axes(&self, d: &Defaults) -> CliResult<HyperAxes> {
        let axes = HyperAxes {
            lr: parse_list("lr", self.lr.as_deref().unwrap_or(d.lr))?,
            weight_decay: parse_list("weight-decay", self.weight_decay.as_deref().unwrap_or("5e-4"))?,
            dropout_out: parse_list("dropout-out", self.dropout_out.as_deref().unwrap_or(d.dropout_out))?,
            p: parse_list("p", self.p.as_deref().unwrap_or(d.p))?,
        };
        if let Some(p) = axes.p.iter().find(|&&p| !(p > 0.0)) {
            return Err(CliError::Usage(format!("--p: gating exponent must be positive, got {p}")));
        }
        Ok(axes)
    }

    fn seeds(&self) -> CliResult<Vec<u64>> {
        if self.seeds == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        Ok((self.seed..self.seed + self.seeds).collect())
    }

    fn train_config(&self, task: Task, seed: u64) -> TrainConfig {
        let mut t = TrainConfig::new(task, self.width);
        t.epochs = self.epochs;
        t.patience = self.patience;
        t.dropout_in = self.dropout_in;
        t.seed = seed;
        t
    }

    fn homophily(&self, d: &Defaults, h: f64, seed: u64) -> DatasetSpec {
        DatasetSpec::Homophily {
            classes: self.classes,
            nodes: self.nodes.unwrap_or(d.nodes),
            h,
            feat_dim: self.feat_dim,
            seed,
        }
    }

    fn multiscale(&self, seed: u64) -> DatasetSpec {
        DatasetSpec::Multiscale { nodes: self.nodes.unwrap_or(REGRESS.nodes), seed }
    }
}

fn point(
    experiment: &str,
    seed: u64,
    coords: Vec<(&str, serde_json::Value)>,
    dataset: DatasetSpec,
    model: &G2Config,
    train: &TrainConfig,
    axes: &HyperAxes,
) -> SweepPoint {
    SweepPoint {
        experiment: experiment.into(),
        seed,
        point: coords.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
        dataset,
        candidates: axes.expand(model, train),
    }
}

pub fn depth_points(a: &DepthArgs) -> CliResult<Vec<SweepPoint>> {
    let depths: Vec<usize> = parse_list("layers", &a.layers)?;
    if depths.contains(&0) {
        return Err(CliError::Usage("--layers: depth must be at least 1".into()));
    }
    let models: Vec<ModelId> = parse_list("models", &a.models)?;
    let axes = a.train.axes(&CLASSIFY)?;
    let mut pts = Vec::new();
    for &l in &depths {
        for &m in &models {
            for s in a.train.seeds()? {
                let model = m.config(a.train.width, l);
                let train = a.train.train_config(Task::Classification, s);
                let ds = a.train.homophily(&CLASSIFY, a.h, s);
                pts.push(point("depth", s, vec![("layers", json!(l)), ("model", json!(m))], ds, &model, &train, &axes));
            }
        }
    }
    Ok(pts)
}

pub fn homophily_points(a: &HomophilyArgs) -> CliResult<Vec<SweepPoint>> {
    let hs: Vec<f64> = parse_list("h", &a.h)?;
    if let Some(h) = hs.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(CliError::Usage(format!("--h: homophily must lie in [0, 1], got {h}")));
    }
    let models: Vec<ModelId> = parse_list("models", &a.models)?;
    let axes = a.train.axes(&HOMOPHILY)?;
    let mut pts = Vec::new();
    for &h in &hs {
        for &m in &models {
            for s in a.train.seeds()? {
                let model = m.config(a.train.width, a.layers);
                let train = a.train.train_config(Task::Classification, s);
                let ds = a.train.homophily(&HOMOPHILY, h, s);
                pts.push(point("homophily", s, vec![("h", json!(h)), ("model", json!(m))], ds, &model, &train, &axes));
            }
        }
    }
    Ok(pts)
}

pub fn regress_points(a: &RegressArgs) -> CliResult<Vec<SweepPoint>> {
    let models: Vec<ModelId> = parse_list("models", &a.models)?;
    let axes = a.train.axes(&REGRESS)?;
    let mut pts = Vec::new();
    for &m in &models {
        for s in a.train.seeds()? {
            let model = m.config(a.train.width, a.layers);
            let train = a.train.train_config(Task::Regression, s);
            pts.push(point("regress", s, vec![("model", json!(m))], a.train.multiscale(s), &model, &train, &axes));
        }
    }
    Ok(pts)
}

pub fn ablate_points(a: &AblateArgs) -> CliResult<Vec<SweepPoint>> {
    let values = parse_points(a.axis, a.points.as_deref())?;
    let (task, defaults) = match a.task {
        TaskArg::Classify => (Task::Classification, &CLASSIFY),
        TaskArg::Regress => (Task::Regression, &REGRESS),
    };
    let mut axes = a.train.axes(defaults)?;
    let kind = CouplingKind::from(a.kind);
    let base = |width: usize| ModelId::g2(kind).config(width, a.layers);
    let mut pts = Vec::new();
    for &v in &values {
        // (coordinates, model) pairs at this axis value
        let variants: Vec<(Vec<(&str, serde_json::Value)>, G2Config)> = match a.axis {
            Axis::Alpha => {
                let mut m = base(a.train.width);
                m.mode = LayerMode::G2Alpha;
                m.alpha = v;
                vec![(vec![("alpha", json!(v))], m)]
            }
            Axis::P => vec![(vec![("p", json!(v))], base(a.train.width))],
            Axis::Params => {
                let w = v as usize;
                [ModelId::plain(kind), ModelId::g2(kind)]
                    .into_iter()
                    .map(|id| (vec![("width", json!(w)), ("model", json!(id))], id.config(w, a.layers)))
                    .collect()
            }
            Axis::Fhat => {
                let mut m = base(a.train.width);
                m.use_separate_fhat = v != 0.0;
                vec![(vec![("use_separate_fhat", json!(m.use_separate_fhat))], m)]
            }
            Axis::SingleRate => {
                let mut m = base(a.train.width);
                if v != 0.0 {
                    m.mode = LayerMode::G2SingleRate;
                }
                vec![(vec![("mode", json!(m.mode))], m)]
            }
        };
        if a.axis == Axis::P {
            axes.p = vec![v];
        }
        for (coords, model) in variants {
            for s in a.train.seeds()? {
                let mut train = a.train.train_config(task, s);
                train.hidden_dim = model.width();
                let ds = match task {
                    Task::Classification => a.train.homophily(defaults, a.h, s),
                    Task::Regression => a.train.multiscale(s),
                };
                let mut coords = coords.clone();
                coords.push(("axis", json!(format!("{:?}", a.axis).to_lowercase())));
                pts.push(point("ablate", s, coords, ds, &model, &train, &axes));
            }
        }
    }
    Ok(pts)
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string(v).map_err(gradgate::Error::from)? + "\n")
}

fn run_sweep(cli: &Cli, pts: &[SweepPoint], out: Option<&Path>) -> CliResult<()> {
    let recs = experiments::run_sweep(pts, cli.jobs, cli.timing)?;
    write_or_print(out, &experiments::to_json_lines(&recs)?)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::Energy(a) => {
            if a.layers == 0 {
                return Err(CliError::Usage("--layers must be at least 1".into()));
            }
            let cfg = EnergyConfig {
                model: a.model,
                layers: a.layers,
                grid_side: a.grid_side,
                width: a.width,
                p: a.p,
                seed: a.seed,
            };
            let metric = match a.metric {
                MetricArg::Dirichlet => Metric::Dirichlet,
                MetricArg::Mad => Metric::Mad,
            };
            let series = energy::layerwise(&cfg)?;
            let summary = to_json(&energy::summarize(&cfg, &series, metric))?;
            let csv = series.to_csv(metric);
            match &a.out {
                Some(p) => {
                    std::fs::write(p, csv)?;
                    write_or_print(None, &summary)?;
                }
                None => {
                    write_or_print(None, &csv)?;
                    eprint!("{summary}");
                }
            }
        }
        Command::Stability(a) => {
            if a.p < 0.0 {
                return Err(CliError::Usage(format!("--p must be non-negative, got {}", a.p)));
            }
            let cfg = StabilityConfig {
                p: a.p,
                graph: a.graph.clone(),
                dt: a.dt,
                horizon: a.horizon,
                epsilon: a.epsilon,
                clamp: a.clamp,
                c: 0.5,
                seed: a.seed,
            };
            let (series, summary) = stability::run(&cfg)?;
            if let Some(p) = &a.out {
                std::fs::write(p, series.to_csv("t"))?;
            }
            let json = to_json(&summary)?;
            if let Some(p) = &a.fit_out {
                std::fs::write(p, &json)?;
            }
            write_or_print(None, &json)?;
        }
        Command::Depth(a) => run_sweep(cli, &depth_points(a)?, a.train.out.as_deref())?,
        Command::Homophily(a) => run_sweep(cli, &homophily_points(a)?, a.train.out.as_deref())?,
        Command::Regress(a) => run_sweep(cli, &regress_points(a)?, a.train.out.as_deref())?,
        Command::Ablate(a) => run_sweep(cli, &ablate_points(a)?, a.train.out.as_deref())?,
        Command::Gradcheck(a) => {
            let mut cfg = CheckConfig::new(a.model, a.p, a.seed);
            cfg.mode = a.mode;
            cfg.alpha = a.alpha;
            cfg.aggregation = a.aggregation;
            cfg.gate_aggregation = a.gate_aggregation;
            cfg.activation = if a.tanh { Activation::Tanh } else { Activation::Relu };
            cfg.use_separate_fhat = a.fhat;
            cfg.tolerance = a.tol;
            let outcome = gradcheck::run(&cfg)?;
            write_or_print(None, &to_json(&outcome)?)?;
            if !outcome.pass {
                let worst = outcome.worst.map(|w| format!("{} [{}]: rel err {:e}", w.param, w.index, w.rel_err));
                return Err(CliError::CheckFailed(worst.unwrap_or_else(|| "no component checked".into())));
            }
        }
        Command::Replay(a) => {
            let recs = experiments::parse_json_lines(&std::fs::read_to_string(&a.records)?)?;
            let mut matched = 0;
            for r in &recs {
                matched += usize::from(experiments::replay(r)?);
            }
            write_or_print(None, &to_json(&json!({"replayed": recs.len(), "matched": matched}))?)?;
            if matched != recs.len() {
                return Err(CliError::CheckFailed(format!("{} of {} records differ", recs.len() - matched, recs.len())));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_specs() {
        assert_eq!(parse_points(Axis::Alpha, Some("1e-3..1")).unwrap(), default_points(Axis::Alpha));
        assert_eq!(parse_points(Axis::Alpha, Some("0.05..0.6")).unwrap(), vec![0.1, 0.5]);
        assert_eq!(parse_points(Axis::P, Some("1.5,2")).unwrap(), vec![1.5, 2.0]);
        for (axis, bad) in [
            (Axis::Alpha, "1..0"),
            (Axis::Alpha, "2..3"),
            (Axis::Alpha, "0,0.5"),
            (Axis::P, "x"),
            (Axis::Params, "8.5"),
            (Axis::Fhat, "1"),
        ] {
            assert!(matches!(parse_points(axis, Some(bad)), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn depth_base_case_is_one_point() {
        let cli = Cli::try_parse_from(["g2", "depth", "--layers", "2", "--models", "g2-gcn"]).unwrap();
        let Command::Depth(a) = &cli.command else { panic!() };
        let pts = depth_points(a).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].candidates.len(), 1);
    }

    #[test]
    fn unknown_model_is_a_usage_error() {
        let e = Cli::try_parse_from(["g2", "energy", "--model", "gin"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn jobs_from_environment_flag() {
        let cli = Cli::try_parse_from(["g2", "--jobs", "3", "gradcheck", "--model", "linear"]).unwrap();
        assert_eq!(cli.jobs, 3);
    }

    #[test]
    fn ablation_variants() {
        let parse = |args: &[&str]| {
            let mut v = vec!["g2", "ablate"];
            v.extend_from_slice(args);
            let cli = Cli::try_parse_from(v).unwrap();
            let Command::Ablate(a) = cli.command else { panic!() };
            ablate_points(&a).unwrap()
        };
        let pts = parse(&["--axis", "params", "--points", "8,16"]);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1].candidates[0].train.hidden_dim, 8);
        assert_eq!(pts[2].candidates[0].model.width(), 16);
        let pts = parse(&["--axis", "single-rate", "--task", "regress"]);
        assert_eq!(pts[1].candidates[0].model.mode, LayerMode::G2SingleRate);
        assert_eq!(pts[0].candidates.len(), 2);
        let pts = parse(&["--axis", "p", "--points", "3"]);
        assert_eq!(pts[0].candidates[0].model.p, 3.0);
    }
}
