//! `tidecast`: synthesize data, train, forecast, evaluate, query and serve.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tidecast::config::Ablation;
use tidecast::dataset::{generate_synthetic, Dataset, SynthConfig};
use tidecast::ensemble::ForecastEnsemble;
use tidecast::experiment::run_ablation;
use tidecast::io::parse_timestamp;
use tidecast::kvconf;
use tidecast::model::{checkpoint_info, DiffusionModel};
use tidecast::query::{area_flood_probability, route_flood_probability, QueryKind, QueryPolygon};
use tidecast::sampler::{evaluate, rollout, RolloutJob};
use tidecast::trainer::{train_new, FitOutputs, TrainConfig};
use tidecast_service::ServiceState;

#[derive(Parser)]
#[command(name = "tidecast", version, about = "Probabilistic inundation forecasting with conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tide-driven dataset (GSF/GSE files).
    Synth(SynthArgs),
    /// Train a model; writes the best checkpoint, a `.last` checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Sample an ensemble forecast for one patch.
    Forecast(ForecastArgs),
    /// Score a checkpoint against persistence and climatology on a split.
    Eval(EvalArgs),
    /// Flood-probability queries over saved ensembles.
    Query {
        #[command(subcommand)]
        kind: QueryCommand,
    },
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Report parameter counts for datasets with different patch counts.
    Params(ParamsArgs),
    /// Train and evaluate all four context configurations.
    Ablate(AblateArgs),
    /// Print a checkpoint's header.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Flat `key = value` file overriding generator defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hours: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file mirroring the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    patch: String,
    /// First forecast hour, e.g. 2024-01-21T00:00.
    #[arg(long)]
    start: String,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 8)]
    scenarios: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    /// One `x y` vertex per line, raster cell coordinates.
    #[arg(long)]
    polygon: PathBuf,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    /// Dataset supplying the patch layout.
    #[arg(long)]
    data: PathBuf,
    /// Ensemble files written by `forecast`, at most one per patch.
    #[arg(long = "ensemble", num_args = 1.., required = true)]
    ensembles: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum QueryCommand {
    /// P(some cell in the polygon exceeds d within the horizon).
    Area {
        #[arg(long)]
        d: f64,
        #[command(flatten)]
        common: QueryArgs,
    },
    /// P(the route stays dry within the horizon).
    Route {
        #[command(flatten)]
        common: QueryArgs,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch counts to compare.
    #[arg(long, num_args = 1.., default_values_t = [2usize, 5])]
    patches: Vec<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic generator config, used when no --data is given.
    #[arg(long)]
    synth: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Forecast(a) => forecast(a),
        Command::Eval(a) => eval(a),
        Command::Query { kind } => query(kind),
        Command::Serve(a) => serve(a),
        Command::Params(a) => params(a),
        Command::Ablate(a) => ablate(a),
        Command::Inspect { ckpt } => {
            println!("{}", serde_json::to_string_pretty(&checkpoint_info(&ckpt)?)?);
            Ok(())
        }
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    })
}

fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    Ok(match path {
        Some(p) => kvconf::load(&SynthConfig::default(), p).with_context(|| format!("reading {}", p.display()))?,
        None => SynthConfig::default(),
    })
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_model(path: &Path) -> Result<(DiffusionModel, TrainConfig)> {
    let (model, state) =
        DiffusionModel::load(path, DType::F32).with_context(|| format!("loading checkpoint {}", path.display()))?;
    // Older or hand-made checkpoints may lack the training config.
    let cfg = serde_json::from_value(state.train_config).unwrap_or_default();
    Ok((model, cfg))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_synth_config(a.config.as_deref())?;
    cfg.patches = a.patches.unwrap_or(cfg.patches);
    cfg.dim = a.dim.unwrap_or(cfg.dim);
    cfg.hours = a.hours.unwrap_or(cfg.hours);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let ds = generate_synthetic(&cfg)?;
    ds.save(&a.out)?;
    std::fs::write(a.out.join("synth.cfg"), kvconf::to_text(&cfg))?;
    print_json(&json!({
        "out": a.out,
        "patches": ds.len(),
        "dim": cfg.dim,
        "timesteps": ds.timesteps(),
    }))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(a.config.as_deref())?;
    cfg.ablation = a.ablation.unwrap_or(cfg.ablation);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.validate()?;
    let ds = load_data(&a.data)?;
    let (train, val, _) = ds.split_chronological(cfg.train_steps, cfg.val_steps, cfg.test_steps)?;
    let outputs = FitOutputs::beside(&a.out);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let (model, fit) = train_new(&train, &val, &cfg, Some(&outputs))?;
    print_json(&json!({
        "checkpoint": outputs.best,
        "last_checkpoint": outputs.last,
        "metrics": outputs.history_csv,
        "checkpoint_id": model.checkpoint_id()?,
        "parameter_count": model.parameter_count(),
        "best_epoch": fit.best_epoch,
        "best_val_nacrps": fit.best_val_nacrps,
        "final_loss": fit.history.last().map(|h| h.loss),
    }))
}

fn forecast(a: ForecastArgs) -> Result<()> {
    let (model, _) = load_model(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let start = parse_timestamp(&a.start).with_context(|| format!("bad timestamp {:?}", a.start))?;
    let job = RolloutJob::from_dataset(&ds, &a.patch, start, model.config.context_len, a.seed)?;
    let ens = rollout(&model, &job, a.horizon, a.scenarios)?;
    ens.write(&a.out)?;
    print_json(&json!({
        "out": a.out,
        "patch_id": ens.patch_id,
        "members": ens.member_count(),
        "horizon": ens.horizon(),
        "checkpoint_id": ens.checkpoint_id,
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let part = match a.split {
        Split::All => ds,
        split => {
            let (train, val, test) = ds.split_chronological(cfg.train_steps, cfg.val_steps, cfg.test_steps)?;
            match split {
                Split::Train => train,
                Split::Val => val,
                _ => test,
            }
        }
    };
    let ev = evaluate(
        &model,
        &part,
        a.horizon.unwrap_or(cfg.eval_horizon),
        a.scenarios.unwrap_or(cfg.test_scenarios),
        a.stride.unwrap_or(cfg.eval_stride),
        a.seed.unwrap_or(cfg.seed),
    )?;
    let text = serde_json::to_string_pretty(&ev)?;
    match &a.out {
        Some(p) => std::fs::write(p, &text)?,
        None => println!("{text}"),
    }
    eprintln!(
        "model nrmse {:.4} nacrps {:.4} | persistence {:.4} {:.4} | climatology {:.4} {:.4}",
        ev.model.nrmse,
        ev.model.nacrps,
        ev.persistence.nrmse,
        ev.persistence.nacrps,
        ev.climatology.nrmse,
        ev.climatology.nacrps
    );
    Ok(())
}

fn query(kind: QueryCommand) -> Result<()> {
    let (qk, d, common) = match kind {
        QueryCommand::Area { d, common } => (QueryKind::Area, Some(d), common),
        QueryCommand::Route { common } => (QueryKind::Route, None, common),
    };
    let text = std::fs::read_to_string(&common.polygon)
        .with_context(|| format!("reading polygon {}", common.polygon.display()))?;
    let polygon = QueryPolygon::parse(&text, qk)?;
    let layout = load_data(&common.data)?.layout();
    let mut ensembles = BTreeMap::new();
    for path in &common.ensembles {
        let ens = ForecastEnsemble::read(path)?;
        let id = ens.patch_id.clone();
        if ensembles.insert(id.clone(), ens).is_some() {
            bail!("two ensembles given for patch {id}");
        }
    }
    let result = match d {
        Some(d) => area_flood_probability(&polygon, d, common.horizon, &layout, &ensembles)?,
        None => route_flood_probability(&polygon, common.horizon, &layout, &ensembles)?,
    };
    print_json(&serde_json::to_value(&result)?)
}

fn serve(a: ServeArgs) -> Result<()> {
    let (model, _) = load_model(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let state = Arc::new(ServiceState::new());
    state.load_model(model)?;
    state.load_dataset(ds);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(tidecast_service::serve(state, addr))?;
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref())?;
    let mut rows = Vec::new();
    for &k in &a.patches {
        let ds = generate_synthetic(&SynthConfig {
            patches: k,
            dim: a.dim,
            hours: 24,
            ..SynthConfig::default()
        })?;
        let dim = ds.dim().context("empty dataset")?;
        let model = DiffusionModel::new(&cfg.model_config(dim), cfg.schedule(), cfg.seed, DType::F32)?;
        rows.push(json!({ "patches": k, "dim": dim, "parameter_count": model.parameter_count() }));
    }
    let counts: Vec<_> = rows.iter().map(|r| r["parameter_count"].clone()).collect();
    let identical = counts.windows(2).all(|w| w[0] == w[1]);
    print_json(&json!({ "rows": rows, "identical": identical }))
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_train_config(a.config.as_deref())?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.validate()?;
    let ds = match &a.data {
        Some(dir) => load_data(dir)?,
        None => generate_synthetic(&load_synth_config(a.synth.as_deref())?)?,
    };
    let table = run_ablation(&ds, &cfg, Some(&a.out))?;
    print!("{}", table.to_markdown());
    if let Some(helps) = table.covariates_help() {
        println!("\ncovariates lower NACRPS in both pairings: {helps}");
    }
    Ok(())
}
