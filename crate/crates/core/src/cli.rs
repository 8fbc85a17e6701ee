//! Command-line front end.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::data_synth::{self, gen_dataset, load_dataset, SynthConfig};
use crate::error::Error;
use crate::eval::{ConfusionMatrix, EvalReport};
use crate::imageio;
use crate::infer::{infer_attention, DEFAULT_INPUT_SIDE};
use crate::masks::{AttentionMap, Thresholds};
use crate::proxy_gt::{self, generate_proxy_gt_with_scores, ProxyLabelMap};
use crate::seenet::{MaskPolicy, ModelConfig, SeeNetModel, Strategy};
use crate::selfcheck;
use crate::tensor::serialize;
use crate::train::{attention_quality, LogRecord, TrainConfig, TrainSample, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "seenet",
    version,
    about = "Self-erasing attention network toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with pixel ground truth and saliency.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Write per-class attention maps for every image of a dataset.
    Attend(AttendArgs),
    /// Build proxy segmentation labels from saliency and attention.
    ProxyGt(ProxyGtArgs),
    /// Score label maps against ground truth (mIoU).
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Number of object classes (2 to 20).
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = data_synth::DEFAULT_TRAIN_SIDE)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Amplitude of the uniform noise added to saliency maps.
    #[arg(long, default_value_t = data_synth::DEFAULT_SALIENCY_NOISE)]
    pub saliency_noise: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out dataset for periodic attention scores.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub iters: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Iteration at which the learning rate drops tenfold [default: 60% of --iters].
    #[arg(long)]
    pub lr_drop_at: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// High threshold factor (attention zone at >= delta-h * max).
    #[arg(long, default_value_t = 0.7)]
    pub delta_h: f64,
    /// Low threshold factor (background zone below delta-l * max).
    #[arg(long, default_value_t = 0.05)]
    pub delta_l: f64,
    /// Iterations with erasing disabled.
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    #[arg(long, default_value_t = Strategy::Seenet)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel-width multiplier of the network.
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0002)]
    pub weight_decay: f64,
    /// Disable random horizontal flips.
    #[arg(long)]
    pub no_flip: bool,
    /// Score attention on --eval-data every N iterations (0: only at the end).
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
    /// Network input side used when scoring attention [default: training image side].
    #[arg(long)]
    pub eval_input_side: Option<usize>,
    /// Save a checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct AttendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Images are resized to this square side before the network.
    #[arg(long, default_value_t = DEFAULT_INPUT_SIDE)]
    pub input_side: usize,
}

#[derive(Args, Debug)]
pub struct ProxyGtArgs {
    /// Directory with `{id}.png` or `{id}.bin` saliency maps.
    #[arg(long)]
    pub saliency: PathBuf,
    /// Directory with `{id}_c{class}.bin` attention maps.
    #[arg(long)]
    pub attention: PathBuf,
    /// JSON object mapping image ids to class ids.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Attention weight in the harmonic mean.
    #[arg(long, default_value_t = 1.0)]
    pub w: f64,
    /// Also write the per-pixel score stack as `{id}_q.bin`.
    #[arg(long)]
    pub dump_q: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted label PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label PNGs with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Number of object classes (background excluded).
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = crate::eval::DEFAULT_IGNORE)]
    pub ignore: u8,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flag value (exit 2).
    Usage(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(flag: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("invalid value for {flag}: {msg}"))
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Attend(a) => attend(a),
        Command::ProxyGt(a) => proxy(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string(value).expect("report serializes")
    );
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if a.n == 0 {
        return Err(usage("--n", "must be at least 1"));
    }
    if !(2..=data_synth::MAX_CLASSES).contains(&a.classes) {
        return Err(usage(
            "--classes",
            format!("must lie in [2, {}]", data_synth::MAX_CLASSES),
        ));
    }
    if a.side < data_synth::MIN_SIDE {
        return Err(usage(
            "--side",
            format!("must be at least {}", data_synth::MIN_SIDE),
        ));
    }
    if !(0.0..=0.5).contains(&a.saliency_noise) {
        return Err(usage("--saliency-noise", "must lie in [0, 0.5]"));
    }
    let mut cfg = SynthConfig::new(a.classes, a.side, a.seed);
    cfg.saliency_noise = a.saliency_noise;
    let manifest = gen_dataset(a.n, &cfg, &a.out)?;
    print_json(&serde_json::json!({
        "command": "gen-data",
        "samples": manifest.samples.len(),
        "num_classes": manifest.num_classes,
        "seed": manifest.seed,
        "out": a.out,
    }));
    Ok(())
}

fn validate_train(a: &TrainArgs) -> Result<(TrainConfig, MaskPolicy), Failure> {
    if a.iters == 0 {
        return Err(usage("--iters", "must be at least 1"));
    }
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(usage("--lr", "must be finite and >= 0"));
    }
    if a.batch == 0 {
        return Err(usage("--batch", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&a.momentum) {
        return Err(usage("--momentum", "must lie in [0, 1)"));
    }
    if !(a.weight_decay >= 0.0 && a.weight_decay.is_finite()) {
        return Err(usage("--weight-decay", "must be >= 0"));
    }
    if !(a.width > 0.0 && a.width <= 16.0) {
        return Err(usage("--width", "must lie in (0, 16]"));
    }
    if !(0.0..=1.0).contains(&a.delta_h) {
        return Err(usage("--delta-h", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&a.delta_l) || a.delta_l >= a.delta_h {
        return Err(usage("--delta-l", "must lie in [0, --delta-h)"));
    }
    if a.eval_input_side == Some(0) {
        return Err(usage("--eval-input-side", "must be positive"));
    }
    let thresholds =
        Thresholds::new(a.delta_h, a.delta_l).map_err(|e| usage("--delta-h/--delta-l", e))?;
    let policy = MaskPolicy::new(a.strategy, thresholds).map_err(|e| usage("--strategy", e))?;
    let cfg = TrainConfig {
        iters: a.iters,
        lr: a.lr,
        lr_drop_at: a.lr_drop_at.unwrap_or((a.iters * 3).div_ceil(5)),
        lr_drop_factor: 0.1,
        batch: a.batch,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        warmup: a.warmup,
        seed: a.seed,
        flip_augment: !a.no_flip,
    };
    cfg.validate().map_err(|e| usage("--lr", e))?;
    Ok((cfg, policy))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    train: &'a TrainConfig,
    policy: &'a MaskPolicy,
    model: &'a ModelConfig,
    data: &'a Path,
}

fn train(a: TrainArgs) -> CmdResult {
    let (cfg, policy) = validate_train(&a)?;
    let dataset = load_dataset(&a.data)?;
    let probes = match &a.eval_data {
        Some(dir) => load_dataset(dir)?.samples,
        None => Vec::new(),
    };
    let side = dataset
        .samples
        .first()
        .map(|s| s.image.shape()[1])
        .context("training set is empty")?;
    let input_side = a.eval_input_side.unwrap_or(side);
    let data: Vec<TrainSample> = dataset.samples.iter().map(TrainSample::from).collect();
    let model_cfg = ModelConfig::desk(dataset.manifest.num_classes).widened(a.width);
    let mut model = SeeNetModel::new(model_cfg.clone(), a.seed)?;

    create_dir(&a.out)?;
    write_json_file(
        &a.out.join("train_config.json"),
        &RunRecord {
            train: &cfg,
            policy: &policy,
            model: &model_cfg,
            data: &a.data,
        },
    )?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?,
    );
    let ckpt_path = a.out.join("model.ckpt");
    let header = |iteration| CheckpointHeader {
        config: model_cfg.clone(),
        policy,
        iteration,
        seed: a.seed,
    };

    let mut trainer = Trainer::new(&mut model, policy, cfg.clone(), &data)?;
    let mut last = None;
    for _ in 0..cfg.iters {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(Error::NonFinite(dump)) => {
                let path = a.out.join("nonfinite_batch.json");
                fs::write(&path, format!("{dump}\n"))
                    .with_context(|| format!("cannot write {}", path.display()))?;
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "non-finite loss; offending batch written to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(
            log,
            "{}",
            serde_json::to_string(&LogRecord::Iter(rec.clone())).unwrap()
        )
        .context("cannot write training log")?;
        let done = trainer.iteration();
        let due = a.eval_every > 0 && done % a.eval_every == 0;
        if !probes.is_empty() && (due || done == cfg.iters) {
            let quality = attention_quality(trainer.model(), &policy, &probes, input_side, 0.5)?;
            let line = LogRecord::Attention {
                iter: done,
                quality,
            };
            writeln!(log, "{}", serde_json::to_string(&line).unwrap())
                .context("cannot write training log")?;
        }
        if a.checkpoint_every > 0 && done % a.checkpoint_every == 0 && done != cfg.iters {
            save_checkpoint(&ckpt_path, trainer.model(), &header(done))?;
        }
        last = Some(rec);
    }
    log.flush().context("cannot write training log")?;
    save_checkpoint(&ckpt_path, trainer.model(), &header(cfg.iters))?;
    let last = last.expect("at least one iteration");
    print_json(&serde_json::json!({
        "command": "train",
        "strategy": policy.strategy,
        "iters": cfg.iters,
        "final_loss": last.loss,
        "checkpoint": ckpt_path,
        "log": log_path,
    }));
    Ok(())
}

fn attend(a: AttendArgs) -> CmdResult {
    if a.input_side == 0 {
        return Err(usage("--input-side", "must be positive"));
    }
    let (header, model) = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    if dataset.manifest.num_classes != model.num_classes() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "dataset has {} classes but the checkpoint was trained for {}",
            dataset.manifest.num_classes,
            model.num_classes()
        )));
    }
    create_dir(&a.out)?;
    let mut maps = 0usize;
    let mut labels = BTreeMap::new();
    for s in &dataset.samples {
        for &c in &s.labels {
            let m = infer_attention(
                &model,
                &header.policy,
                &s.image,
                &[c as usize - 1],
                a.input_side,
            )?;
            let stem = format!("{}_c{c}", s.id);
            serialize::save_tensor(&a.out.join(format!("{stem}.bin")), &m.to_tensor())?;
            let bytes: Vec<u8> = m.values().iter().map(|&v| imageio::to_u8(v)).collect();
            imageio::write_gray(
                &a.out.join(format!("{stem}.png")),
                m.width(),
                m.height(),
                &bytes,
            )?;
            maps += 1;
        }
        labels.insert(s.id.clone(), s.labels.clone());
    }
    write_json_file(&a.out.join(data_synth::LABELS_FILE), &labels)?;
    let summary = serde_json::json!({
        "command": "attend",
        "images": dataset.samples.len(),
        "maps": maps,
        "input_side": a.input_side,
        "strategy": header.policy.strategy,
    });
    write_json_file(&a.out.join("attend.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

fn find_saliency(dir: &Path, id: &str) -> anyhow::Result<PathBuf> {
    for ext in ["png", "bin"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    bail!(
        "no saliency map for {id} in {} (tried .png and .bin)",
        dir.display()
    )
}

fn proxy(a: ProxyGtArgs) -> CmdResult {
    if !(a.w > 0.0 && a.w.is_finite()) {
        return Err(usage("--w", "must be > 0"));
    }
    let text = fs::read_to_string(&a.labels)
        .with_context(|| format!("cannot read {}", a.labels.display()))?;
    let labels: BTreeMap<String, Vec<u8>> = serde_json::from_str(&text)
        .with_context(|| format!("{}: expected {{id: [class ids]}}", a.labels.display()))?;
    create_dir(&a.out)?;
    let mut foreground = 0u64;
    let mut pixels = 0u64;
    for (id, ys) in &labels {
        let saliency = proxy_gt::load_saliency(&find_saliency(&a.saliency, id)?)?;
        let mut attention = BTreeMap::new();
        for &c in ys {
            let path = a.attention.join(format!("{id}_c{c}.bin"));
            let t = serialize::load_tensor(&path)?;
            let map =
                AttentionMap::from_tensor(&t).map_err(|e| Error::format(&path, e.to_string()))?;
            attention.insert(c, map);
        }
        let out = generate_proxy_gt_with_scores(&saliency, &attention, ys, a.w)
            .with_context(|| format!("image {id}"))?;
        write_label_map(&out.labels, &a.out, id)?;
        if a.dump_q {
            let q = out.scores.expect("scores requested");
            serialize::save_tensor(&a.out.join(format!("{id}_q.bin")), &q)?;
        }
        foreground += out.labels.labels().iter().filter(|&&l| l != 0).count() as u64;
        pixels += out.labels.labels().len() as u64;
    }
    let summary = serde_json::json!({
        "command": "proxy-gt",
        "images": labels.len(),
        "pixels": pixels,
        "foreground_fraction": if pixels > 0 { foreground as f64 / pixels as f64 } else { 0.0 },
        "w": a.w,
    });
    write_json_file(&a.out.join("proxy_gt.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

fn write_label_map(map: &ProxyLabelMap, dir: &Path, id: &str) -> anyhow::Result<()> {
    map.save_png(&dir.join(format!("{id}.png")))?;
    let raw = dir.join(format!("{id}.raw"));
    fs::write(&raw, map.labels()).with_context(|| format!("cannot write {}", raw.display()))
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn eval(a: EvalArgs) -> CmdResult {
    if !(1..=254).contains(&a.classes) {
        return Err(usage("--classes", "must lie in [1, 254]"));
    }
    let names = png_names(&a.gt)?;
    if names.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "no label PNGs in {}",
            a.gt.display()
        )));
    }
    let mut cm = ConfusionMatrix::new(a.classes);
    for name in &names {
        let gt = ProxyLabelMap::load_png(&a.gt.join(name))?;
        let pred_path = a.pred.join(name);
        let pred = ProxyLabelMap::load_png(&pred_path)?;
        cm.accumulate(&pred, &gt, Some(a.ignore))
            .with_context(|| format!("image {name}"))?;
    }
    let report = EvalReport::from_matrix(&cm)?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json_file(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.trials == 0 {
        return Err(usage("--trials", "must be at least 1"));
    }
    let report = selfcheck::gradient_suite(a.seed, a.trials)?;
    print_json(&report);
    if !report.passed {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error,
            selfcheck::TOLERANCE
        )));
    }
    Ok(())
}
