//! `octcast` command-line front end.

mod config;
mod error;
mod svg;

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octcast::geometry::{label_clip, ClipRecord, LabelConfig};
use octcast::pipeline::{self, EvalOptions};
use octcast::synthdata::{self, TrainingSample};
use octcast::tokens::{check_ablation, TokenCategory};
use serde::Deserialize;

use config::{load_model, load_synth, parse_grid, save_model, ModelMeta, RunConfig};
use error::{io_err, CliError, CliResult};

#[derive(Parser)]
#[command(name = "octcast", version, about = "Forecast future hand trajectories and object contacts")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Turn detection records into trajectory and contact labels.
    Labels(LabelsArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a trained model over a dataset.
    Eval(EvalArgs),
    /// Forecast one sample, optionally drawing an SVG figure.
    Predict(PredictArgs),
    /// Train an action-anticipation head over a frozen encoder.
    Anticipate(AnticipateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset path; `.octd` writes the binary container, anything else JSON lines.
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw detection records consumed by `labels`.
    #[arg(long)]
    clips: Option<PathBuf>,
}

#[derive(Args)]
struct LabelsArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    dense_fps: Option<f64>,
    #[arg(long)]
    label_fps: Option<f64>,
    #[arg(long)]
    n_contacts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_weights: PathBuf,
    /// Token categories to drop from the input (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<TokenCategory>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lambda_obj: Option<f64>,
    /// JSON-lines training log; defaults to `<out-weights>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_contacts: Option<usize>,
    /// Heatmap grid, `N` or `HxW`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Use the latent mean instead of random draws.
    #[arg(long)]
    zero_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    forecast: ForecastArgs,
    /// Also score the Kalman and Center baselines.
    #[arg(long)]
    baselines: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    id: String,
    #[command(flatten)]
    forecast: ForecastArgs,
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Forecast JSON path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnticipateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// JSON lines `{id, verb, noun}`; labels stored in the dataset are used otherwise.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Where to save the trained head.
    #[arg(long)]
    out_head: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Labels(a) => cmd_labels(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Anticipate(a) => cmd_anticipate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("OCTCAST_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("OCTCAST_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn write_out(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(io_err("<stdout>")),
    }
}

fn load_data(path: &Path) -> CliResult<Vec<TrainingSample>> {
    if !path.exists() {
        return Err(CliError::Io { path: path.into(), source: std::io::ErrorKind::NotFound.into() });
    }
    Ok(synthdata::read_dataset(path)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(octcast::Error::from)? + "\n")
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let cfg = load_synth(a.config.as_deref())?;
    let samples = synthdata::build_dataset(a.n, a.seed, &cfg, &a.out)?;
    println!("wrote {} records to {}", samples.len(), a.out.display());
    println!("label fidelity (mean normalized error vs generator): {:.3e}", synthdata::label_fidelity(&samples));
    if let Some(path) = &a.clips {
        let mut out = String::new();
        for (i, id) in samples.iter().map(|s| &s.id).enumerate() {
            let scene = synthdata::simulate_scene(octcast::rng::mix_seed(a.seed, i as u64), &cfg)?;
            let rec = synthdata::render_observations(&scene).clip_record(id.clone(), scene.frame_size());
            out.push_str(&serde_json::to_string(&rec).map_err(octcast::Error::from)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))?;
        println!("wrote {} detection records to {}", samples.len(), path.display());
    }
    Ok(())
}

fn cmd_labels(a: LabelsArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.detections).map_err(io_err(&a.detections))?;
    let mut cfg = LabelConfig::default();
    if let Some(v) = a.ransac_threshold {
        cfg.ransac_threshold_px = v;
    }
    if let Some(v) = a.dense_fps {
        cfg.dense_fps = v;
    }
    if let Some(v) = a.label_fps {
        cfg.label_fps = v;
    }
    if let Some(v) = a.n_contacts {
        cfg.n_contacts = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.stride()?;

    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", a.detections.display(), i + 1)))?;
        records.push((i + 1, rec));
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no detection records", a.detections.display())));
    }

    let mut out = String::new();
    let mut written = 0;
    for (line, rec) in &records {
        match label_clip(rec, &cfg) {
            Ok(label) => {
                out.push_str(&serde_json::to_string(&label).map_err(octcast::Error::from)?);
                out.push('\n');
                written += 1;
            }
            Err(octcast::Error::EmptyTrajectory) => {
                eprintln!("warning: clip {} (line {line}): no hand detections, skipped", rec.clip_id);
            }
            Err(e) => return Err(CliError::Usage(format!("clip {} (line {line}): {e}", rec.clip_id))),
        }
    }
    fs::write(&a.out, out).map_err(io_err(&a.out))?;
    println!("labelled {written} of {} clips", records.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let run = RunConfig::load(a.config.as_deref())?;
    let model = run.model;
    let mut tc = run.train;
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch {
        tc.batch = v;
    }
    if let Some(v) = a.warmup_epochs {
        tc.warmup_epochs = v;
    }
    if a.lambda_obj.is_some() {
        tc.lambda_obj = a.lambda_obj;
    }
    if !a.ablate.is_empty() {
        tc.ablate = a.ablate;
    }
    check_ablation(&tc.ablate)?;
    tc.validate()?;
    model.validate()?;

    let data = load_data(&a.data)?;
    let meta = ModelMeta { model: model.clone(), ablate: tc.ablate.clone() };
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out_weights.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_err = None;
    let w0 = octcast::oct::init_weights(&model, tc.seed)?;
    let result = pipeline::train_from(w0, &data, &tc, &model, |e| {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(err);
        }
        eprintln!("epoch {:>3}  lr {:.2e}  L_H {:.6}  L_O {:.6}  total {:.6}", e.epoch, e.lr, e.l_h, e.l_o, e.total);
    });
    if let Some(err) = log_err {
        return Err(CliError::Io { path: log_path, source: err });
    }
    match result {
        Ok(out) => {
            save_model(&a.out_weights, &out.weights, &meta)?;
            println!("wrote {} ({} epochs)", a.out_weights.display(), out.log.len());
            Ok(())
        }
        Err(octcast::Error::NonFiniteLoss { epoch, last_good }) => {
            save_model(&a.out_weights, &last_good, &meta)?;
            eprintln!("last good checkpoint saved to {}", a.out_weights.display());
            Err(octcast::Error::NonFiniteLoss { epoch, last_good }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn forecast_options(f: &ForecastArgs, meta: &ModelMeta) -> CliResult<pipeline::ForecastOptions> {
    let mut o = RunConfig::load(f.config.as_deref())?.forecast;
    if f.k.is_some() {
        o.k = f.k;
    }
    if f.n_contacts.is_some() {
        o.n_contacts = f.n_contacts;
    }
    if let Some(g) = f.grid {
        o.grid = g;
    }
    if let Some(s) = f.sigma {
        o.sigma = s;
    }
    if f.zero_noise {
        o.zero_noise = true;
    }
    // Inputs removed during training stay removed at test time.
    for c in &meta.ablate {
        if !o.ablate.contains(c) {
            o.ablate.push(*c);
        }
    }
    Ok(o)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (w, meta) = load_model(&a.weights)?;
    let forecast = forecast_options(&a.forecast, &meta)?;
    let data = load_data(&a.data)?;
    let opts = EvalOptions { forecast, seed: a.forecast.seed, baselines: a.baselines };
    let report = pipeline::evaluate(&data, &w, &meta.model, &opts)?;
    eprintln!(
        "n {}  ADE(min{k}) {:.4}  FDE(min{k}) {:.4}  SIM {:.4}  AUC-J {:.4}  NSS {:.4}",
        report.n,
        report.ade_min20,
        report.fde_min20,
        report.sim,
        report.auc_j,
        report.nss,
        k = report.k
    );
    write_out(a.report.as_deref(), &to_json(&report)?)
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let (w, meta) = load_model(&a.weights)?;
    let opts = forecast_options(&a.forecast, &meta)?;
    let data = load_data(&a.data)?;
    let sample = data
        .iter()
        .find(|s| s.id == a.id)
        .ok_or_else(|| CliError::Usage(format!("no sample with id `{}` in {}", a.id, a.data.display())))?;
    let fc = pipeline::forecast(sample, &w, &meta.model, a.forecast.seed, &opts)?;
    if let Some(p) = &a.plot {
        fs::write(p, svg::render(sample, &fc)).map_err(io_err(p))?;
    }
    write_out(a.out.as_deref(), &to_json(&fc.to_json())?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionLabel {
    id: String,
    verb: usize,
    noun: usize,
}

fn apply_labels(data: &mut [TrainingSample], path: &Path) -> CliResult<()> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut labels = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: ActionLabel = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        labels.insert(l.id, [l.verb, l.noun]);
    }
    for s in data {
        s.gt.action = Some(
            *labels
                .get(&s.id)
                .ok_or_else(|| CliError::Usage(format!("{}: no action label for sample `{}`", path.display(), s.id)))?,
        );
    }
    Ok(())
}

fn cmd_anticipate(a: AnticipateArgs) -> CliResult<()> {
    let mut ac = RunConfig::load(a.config.as_deref())?.anticipation;
    if let Some(v) = a.epochs {
        ac.epochs = v;
    }
    if let Some(v) = a.lr {
        ac.lr = v;
    }
    if let Some(v) = a.seed {
        ac.seed = v;
    }
    if let Some(v) = a.test_fraction {
        ac.test_fraction = v;
    }
    let (w, meta) = load_model(&a.weights)?;
    let mut data = load_data(&a.data)?;
    if let Some(p) = &a.labels {
        apply_labels(&mut data, p)?;
    }
    let out = pipeline::train_anticipation(&data, &w, &meta.model, &ac)?;
    if let Some(p) = &a.out_head {
        out.head.save(p)?;
    }
    write_out(a.report.as_deref(), &to_json(&out.report)?)
}
