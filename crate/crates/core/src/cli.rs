//! Configuration layering and the `bid` subcommands.
//!
//! Settings are flat `section.key=value` pairs. They resolve in the order
//! preset defaults, `--config` file, `BID_*` environment variables, then
//! command-line flags, each layer overriding the previous one. Every
//! command writes the resolved settings to `<out>/config.snapshot`, which can
//! be passed back as `--config` to repeat the run.
//!
//! ```text
//! <out>/config.snapshot
//! <out>/manifest.txt, <out>/data/         gen-data
//! <out>/pretrain.ckpt                     pretrain
//! <out>/finetune.ckpt                     finetune
//! <out>/logs/{pretrain,usage,finetune}.log
//! <out>/logs/diagnostics.txt              only after a numerical failure
//! <out>/reports/{table.txt,ap.csv,confusion.csv,purity.csv}
//! <out>/reports/{timeline.csv,timeline.svg}
//! <out>/reports/ablation.txt, <out>/ablate/<variant>/
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{join_list, parse, parse_list};
use crate::data::{build_dataset, read_sequence, AnnotatedSequence, GeneratorConfig, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    default_score_thresholds, evaluate_checkpoint, ground_truth_of, map_report, matrix_csv, Detection,
    EvaluationReport, TABLE_HEADER,
};
use crate::model::segments_from_codes;
use crate::trainer::{
    argmax, finetune, pretrain, Ablation, Checkpoint, EncoderInit, EpochLog, FinetuneLog, TrainConfig, UsageLog,
};

pub const ENV_PREFIX: &str = "BID_";
pub const SNAPSHOT_FILE: &str = "config.snapshot";

/// Base defaults the other layers start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

/// Fully resolved settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    pub score_thresholds: Vec<f64>,
    /// Label fraction applied over the manifest's own flags at fine-tuning time.
    pub relabel: Option<f64>,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let train = match p {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        };
        let data = GeneratorConfig {
            joints: train.net.joints,
            ..GeneratorConfig::default()
        };
        Self {
            train,
            data,
            score_thresholds: default_score_thresholds(),
            relabel: None,
        }
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.train.entries();
        out.extend(self.data.entries());
        out.push(("eval.score_thresholds".into(), join_list(&self.score_thresholds)));
        out.push((
            "finetune.label_fraction".into(),
            self.relabel.map_or_else(String::new, |f| f.to_string()),
        ));
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "eval.score_thresholds" => {
                let t: Vec<f64> = parse_list(key, value)?;
                if t.is_empty() || t.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                    return Err(Error::Config(
                        "score thresholds must be a non-empty list in (0, 1)".into(),
                    ));
                }
                self.score_thresholds = t;
            }
            "finetune.label_fraction" => {
                self.relabel = if value.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            _ => {
                if !self.data.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(f) = self.relabel {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("label fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        create_dir(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        write_file(&path, &self.snapshot())?;
        Ok(path)
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", origin.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Environment variable consulted for `key`: `quantizer.K_class` is read
/// from `BID_QUANTIZER__K_CLASS`.
pub fn env_key(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "__"))
}

/// Applies the layers in precedence order: preset, file, environment, flags.
pub fn resolve(
    preset: Preset,
    file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    flags: &[(String, String)],
) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text, path)? {
            cfg.set(&k, &v)?;
        }
    }
    let keys: Vec<String> = cfg.entries().into_iter().map(|(k, _)| k).collect();
    for k in keys {
        if let Some(v) = env(&env_key(&k)) {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(
    name = "bid",
    version,
    about = "Boundary-interior decoding for temporal action localization"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Settings file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Epochs of the phase the command trains.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Extra `key=value` settings (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Unsupervised pre-training on the train split.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fine-tune a frame classifier on the labeled train sequences.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint; required unless `--scratch`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from a randomly initialized encoder.
        #[arg(long)]
        scratch: bool,
        /// Overrides the manifest's label flags.
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Detection mAP, confusion and purity on the test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself as detections.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Export the code / prediction / label timeline of one sequence.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// Skip the SVG rendering.
        #[arg(long)]
        no_svg: bool,
    },
    /// Pretrain, fine-tune and evaluate ablation variants.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// full, wo-rvq, wo-m, wo-u, wo-b or all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        label_fraction: Option<f64>,
    },
}

impl Cli {
    /// Flag-level settings, in the order they override each other.
    pub fn flag_settings(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(s) = self.common.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(e) = self.common.epochs {
            let keys: &[&str] = match self.command {
                Command::Pretrain { .. } => &["optim.epochs"],
                Command::Finetune { .. } => &["finetune.epochs"],
                Command::Ablate { .. } => &["optim.epochs", "finetune.epochs"],
                _ => &[],
            };
            for k in keys {
                out.push((k.to_string(), e.to_string()));
            }
        }
        match &self.command {
            Command::GenData {
                label_fraction: Some(f),
            } => out.push(("data.label_fraction".into(), f.to_string())),
            Command::Finetune {
                label_fraction: Some(f),
                ..
            }
            | Command::Ablate {
                label_fraction: Some(f),
                ..
            } => out.push(("finetune.label_fraction".into(), f.to_string())),
            _ => {}
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        resolve(
            self.common.preset,
            self.common.config.as_deref(),
            |k| std::env::var(k).ok(),
            &self.flag_settings()?,
        )
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let out = &cli.common.out;
    cfg.write_snapshot(out)?;
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&cfg, out).map(|_| ()),
        Command::Pretrain { manifest } => cmd_pretrain(&cfg, manifest, out).map(|_| ()),
        Command::Finetune {
            manifest,
            checkpoint,
            scratch,
            ..
        } => {
            let ck = match (checkpoint, scratch) {
                (_, true) => None,
                (Some(p), false) => Some(Checkpoint::load(p)?),
                (None, false) => {
                    return Err(Error::InvalidArgument(
                        "finetune needs --checkpoint or --scratch".into(),
                    ))
                }
            };
            cmd_finetune(&cfg, ck.as_ref(), manifest, out).map(|_| ())
        }
        Command::Eval {
            manifest,
            checkpoint,
            ground_truth,
        } => {
            let report = if *ground_truth {
                ground_truth_report(&LoadedDataset::load(manifest)?)?
            } else {
                let path = checkpoint.as_ref().expect("required by clap");
                cmd_eval(&cfg, &Checkpoint::load(path)?, manifest, out)?
            };
            write_reports(&report, &out.join("reports"))?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Inspect {
            checkpoint,
            sequence,
            no_svg,
        } => cmd_inspect(&cfg, &Checkpoint::load(checkpoint)?, sequence, out, !no_svg).map(|_| ()),
        Command::Ablate { manifest, variant, .. } => {
            let variants = if variant == "all" {
                Ablation::ALL.to_vec()
            } else {
                variant
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<Vec<Ablation>>>()?
            };
            let table = cmd_ablate(&cfg, manifest, &variants, out)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `out`, prints a summary and returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    if cfg.data.classes.is_empty() {
        return Err(Error::InvalidArgument("class list is empty".into()));
    }
    let data = build_dataset(&cfg.data, cfg.train.seed)?;
    let manifest = data.write(out)?;
    let mut hist = vec![0usize; data.num_classes];
    let mut frames = 0usize;
    for s in &data.sequences {
        frames += s.num_frames();
        for seg in &s.segments {
            hist[seg.label] += 1;
        }
    }
    let m = &data.manifest;
    println!(
        "{} train ({} labeled), {} val, {} test sequences; {frames} frames",
        m.count(Split::Train),
        m.labeled_train_count(),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    println!("segments per class: {}", join_list(&hist));
    println!("manifest: {}", manifest.display());
    Ok(manifest)
}

fn check_data_joints(cfg: &TrainConfig, data: &LoadedDataset) -> Result<()> {
    if data.joints() != cfg.net.joints {
        return Err(Error::Shape(format!(
            "config expects {} channels per frame (model.joints), data has {}",
            cfg.net.joints,
            data.joints()
        )));
    }
    Ok(())
}

/// Pretrains on the train split; writes `pretrain.ckpt` and the logs.
pub fn cmd_pretrain(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PathBuf> {
    let data = LoadedDataset::load(manifest)?;
    check_data_joints(&cfg.train, &data)?;
    let train = data.split(Split::Train);
    let logs = out.join("logs");
    let result = match pretrain(&train, &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::Numerical(_)) => {
            write_file(&logs.join("diagnostics.txt"), &format!("{e}\n"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let mut log = format!("{}\n", EpochLog::HEADER);
    for h in &result.history {
        let _ = writeln!(log, "{}", h.line());
    }
    write_file(&logs.join("pretrain.log"), &log)?;
    let mut usage = format!("{}\n", UsageLog::HEADER);
    for u in &result.usage {
        let _ = writeln!(usage, "{}", u.line());
    }
    write_file(&logs.join("usage.log"), &usage)?;
    let path = out.join("pretrain.ckpt");
    result.checkpoint.save(&path)?;
    if let Some(h) = result.history.last() {
        println!("epoch {} total {:.6}", h.epoch, h.total);
    }
    println!("checkpoint: {}", path.display());
    Ok(path)
}

/// Fine-tunes from `checkpoint` (or from scratch when `None`); writes
/// `finetune.ckpt` and `logs/finetune.log`.
pub fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Checkpoint>, manifest: &Path, out: &Path) -> Result<PathBuf> {
    let mut data = LoadedDataset::load(manifest)?;
    if let Some(f) = cfg.relabel {
        data.manifest.relabel(f, cfg.train.seed)?;
    }
    let labeled = data.labeled_train();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled train sequences".into()));
    }
    let num_classes = data.inferred_num_classes();
    let init = match checkpoint {
        Some(ck) => {
            ck.check_joints(data.joints())?;
            EncoderInit::Pretrained(ck)
        }
        None => {
            check_data_joints(&cfg.train, &data)?;
            EncoderInit::Scratch
        }
    };
    let result = finetune(init, &labeled, num_classes, &cfg.train)?;
    let mut log = format!("{}\n", FinetuneLog::HEADER);
    for h in &result.history {
        let _ = writeln!(log, "{}", h.line());
    }
    write_file(&out.join("logs").join("finetune.log"), &log)?;
    let path = out.join("finetune.ckpt");
    result.checkpoint.save(&path)?;
    println!("{} labeled sequences, {num_classes} classes", labeled.len());
    println!("checkpoint: {}", path.display());
    Ok(path)
}

fn head_classes(ck: &Checkpoint) -> Result<usize> {
    ck.head
        .as_ref()
        .map(|h| h.num_outputs - 1)
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no classifier head; run finetune first".into()))
}

/// Evaluates on the test split and writes `reports/`.
pub fn cmd_eval(cfg: &RunConfig, ck: &Checkpoint, manifest: &Path, out: &Path) -> Result<EvaluationReport> {
    let data = LoadedDataset::load(manifest)?;
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    ck.check_joints(data.joints())?;
    let report = evaluate_checkpoint(ck, &test, head_classes(ck)?, &cfg.score_thresholds)?;
    write_reports(&report, &out.join("reports"))?;
    Ok(report)
}

/// Ground-truth segments scored as detections with confidence 1.
pub fn ground_truth_report(data: &LoadedDataset) -> Result<EvaluationReport> {
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let gts = ground_truth_of(&test);
    let dets: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            sequence: g.sequence,
            segment: g.segment,
            score: 1.0,
        })
        .collect();
    map_report(&dets, &gts, data.inferred_num_classes())
}

pub fn write_reports(report: &EvaluationReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("table.txt"), &report.table())?;
    write_file(&dir.join("ap.csv"), &report.ap_csv())?;
    if let Some(m) = &report.confusion {
        write_file(&dir.join("confusion.csv"), &matrix_csv(m))?;
    }
    if let Some(p) = &report.purity {
        write_file(&dir.join("purity.csv"), &p.csv())?;
    }
    Ok(())
}

/// One timeline row per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimelineRow {
    /// 1-based.
    pub frame: usize,
    pub code: Option<usize>,
    pub predicted: Option<usize>,
    pub label: usize,
}

pub fn timeline(ck: &Checkpoint, seq: &AnnotatedSequence, background: usize) -> Result<Vec<TimelineRow>> {
    let codes = match &ck.codebooks {
        Some(_) => Some(ck.class_codes(seq)?),
        None => None,
    };
    let predicted = match &ck.head {
        Some(_) => {
            let p = ck.predict(seq)?;
            Some((0..p.cols()).map(|c| argmax(&p.column(c))).collect::<Vec<_>>())
        }
        None => None,
    };
    if codes.is_none() && predicted.is_none() {
        return Err(Error::InvalidArgument(
            "checkpoint has neither codebooks nor a classifier head".into(),
        ));
    }
    Ok(seq
        .frame_labels(background)
        .into_iter()
        .enumerate()
        .map(|(t, label)| TimelineRow {
            frame: t + 1,
            code: codes.as_ref().map(|c| c[t]),
            predicted: predicted.as_ref().map(|p| p[t]),
            label,
        })
        .collect())
}

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    let mut s = String::from("frame,code,predicted,label\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.frame, opt(r.code), opt(r.predicted), r.label);
    }
    s
}

/// Deterministic color of an id: golden-angle hue steps.
pub fn track_color(id: usize) -> String {
    let hue = (id as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},65%,55%)")
}

/// Horizontal bars per track, one rectangle per run of equal ids. Frames
/// carrying `background` in the label tracks are drawn grey.
pub fn timeline_svg(rows: &[TimelineRow], background: usize) -> String {
    let (w, h, left) = (4usize, 24usize, 90usize);
    let mut tracks: Vec<(&str, Vec<usize>, bool)> = Vec::new();
    if rows.iter().all(|r| r.code.is_some()) {
        tracks.push(("codes", rows.iter().map(|r| r.code.unwrap_or(0)).collect(), false));
    }
    if rows.iter().all(|r| r.predicted.is_some()) {
        tracks.push((
            "predicted",
            rows.iter().map(|r| r.predicted.unwrap_or(0)).collect(),
            true,
        ));
    }
    tracks.push(("ground truth", rows.iter().map(|r| r.label).collect(), true));
    let width = left + w * rows.len() + 10;
    let height = (h + 8) * tracks.len() + 10;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (i, (name, ids, labels)) in tracks.iter().enumerate() {
        let y = 5 + i * (h + 8);
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\">{name}</text>", y + h / 2 + 4);
        for seg in segments_from_codes(ids) {
            let fill = if *labels && seg.label == background {
                "#bbbbbb".to_string()
            } else {
                track_color(seg.label)
            };
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{}\" height=\"{h}\" fill=\"{fill}\"><title>{name} {}: frames {}-{}</title></rect>",
                left + (seg.begin - 1) * w,
                seg.len() * w,
                seg.label,
                seg.begin,
                seg.end
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `reports/timeline.csv` (and `timeline.svg`) for one sequence file.
pub fn cmd_inspect(
    cfg: &RunConfig,
    ck: &Checkpoint,
    sequence: &Path,
    out: &Path,
    svg: bool,
) -> Result<Vec<TimelineRow>> {
    let seq = read_sequence(sequence)?;
    let background = match &ck.head {
        Some(h) => h.num_outputs - 1,
        None => cfg.data.num_classes(),
    };
    let rows = timeline(ck, &seq, background)?;
    let dir = out.join("reports");
    write_file(&dir.join("timeline.csv"), &timeline_csv(&rows))?;
    if svg {
        write_file(&dir.join("timeline.svg"), &timeline_svg(&rows, background))?;
    }
    println!("{} frames -> {}", rows.len(), dir.join("timeline.csv").display());
    Ok(rows)
}

/// Per-variant pretrain + fine-tune + eval; returns the comparison table
/// (also written to `reports/ablation.txt`).
pub fn cmd_ablate(cfg: &RunConfig, manifest: &Path, variants: &[Ablation], out: &Path) -> Result<String> {
    let mut data = LoadedDataset::load(manifest)?;
    check_data_joints(&cfg.train, &data)?;
    if let Some(f) = cfg.relabel {
        data.manifest.relabel(f, cfg.train.seed)?;
    }
    let train = data.split(Split::Train);
    let labeled = data.labeled_train();
    let test = data.split(Split::Test);
    let num_classes = data.inferred_num_classes();
    let mut results: BTreeMap<usize, (Ablation, EvaluationReport)> = BTreeMap::new();
    for (i, &v) in variants.iter().enumerate() {
        let mut vc = cfg.clone();
        v.apply(&mut vc.train);
        let dir = out.join("ablate").join(v.slug());
        vc.write_snapshot(&dir)?;
        let pre = pretrain(&train, &vc.train)?;
        let ft = finetune(
            EncoderInit::Pretrained(&pre.checkpoint),
            &labeled,
            num_classes,
            &vc.train,
        )?;
        let report = evaluate_checkpoint(&ft.checkpoint, &test, num_classes, &vc.score_thresholds)?;
        let mut log = format!("{}\n", EpochLog::HEADER);
        for h in &pre.history {
            let _ = writeln!(log, "{}", h.line());
        }
        write_file(&dir.join("logs").join("pretrain.log"), &log)?;
        write_reports(&report, &dir.join("reports"))?;
        results.insert(i, (v, report));
    }
    let mut table = format!("variant {TABLE_HEADER}\n");
    for (v, r) in results.values() {
        let _ = write!(table, "{}", v.label().replace(' ', "_"));
        for m in &r.map {
            let _ = write!(table, " {:.2}", 100.0 * m);
        }
        let _ = writeln!(table, " {:.2}", 100.0 * r.average);
    }
    write_file(&out.join("reports").join("ablation.txt"), &table)?;
    Ok(table)
}
