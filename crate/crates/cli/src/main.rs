use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snipspot::checkpoint::Checkpoint;
use snipspot::config::{Overrides, RunConfig};
use snipspot::error::Error;
use snipspot::eval::score;
use snipspot::io::{
    read_annotations, read_jsonl, write_bytes, write_dataset, write_json, write_jsonl, Dataset, ProposalRecord,
    ScoreRecord,
};
use snipspot::model::SpotterParams;
use snipspot::pipeline::{evaluate, prepare_samples, proposals_from_scores, run_loso, score_videos, sweep_reports, train};
use snipspot::report::{format_table, sweep_svg};
use snipspot::synth::{generate, SynthSpec};

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

/// Expression interval spotting over snippet features.
///
/// Log verbosity follows RUST_LOG (default `warn`).
#[derive(Parser, Debug)]
#[command(name = "snipspot", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on every video of a dataset.
    Train(TrainArgs),
    /// Score videos with a checkpoint and decode proposals.
    Spot(SpotArgs),
    /// Score proposals against annotations.
    Eval(EvalArgs),
    /// Leave-one-subject-out training and evaluation.
    Loso(LosoArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Truncation threshold for decoding.
    #[arg(long)]
    theta: Option<f64>,
    /// IoU threshold for matching.
    #[arg(long = "k-eval")]
    k_eval: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self, data: Option<&Path>, epochs: Option<usize>) -> Result<RunConfig, Error> {
        let overrides = Overrides {
            seed: self.seed,
            theta: self.theta,
            k_eval: self.k_eval,
            epochs,
            data_dir: data.map(Path::to_path_buf),
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML dataset specification.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Leave this subject's videos out of training (repeatable).
    #[arg(long = "exclude-subject")]
    exclude: Vec<String>,
}

#[derive(Args, Debug)]
struct SpotArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Only score this subject's videos (repeatable).
    #[arg(long = "subject")]
    subjects: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Proposals as JSON lines.
    #[arg(long)]
    proposals: PathBuf,
    /// Annotation file; defaults to the dataset's annotations.json.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scores as JSON lines, needed for --report.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Also write a precision/recall sweep over thresholds.
    #[arg(long)]
    report: bool,
}

#[derive(Args, Debug)]
struct LosoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            _ if e.is_numeric() => NUMERIC,
            Error::InvalidArgument(_) => USAGE,
            _ => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

/// Copies training log lines to stdout as they are written.
struct Tee {
    buf: Vec<u8>,
}

impl Write for Tee {
    fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(b)?;
        self.buf.extend_from_slice(b);
        Ok(b.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()
    }
}

fn synth(a: &SynthArgs) -> Outcome {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let videos = generate(&spec)?;
    let summary = write_dataset(&a.out, &videos, spec.snippet_len, spec.overlap)?;
    emit(&format!(
        "videos={} ground_truths={} foreground_share={:.4} out={}",
        summary.videos,
        summary.ground_truths,
        summary.foreground_share,
        a.out.display()
    ));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let cfg = a.common.resolve(a.data.as_deref(), a.epochs)?;
    let ds = Dataset::load(cfg.data_dir()?)?;
    let ids: Vec<String> = ds
        .metas()
        .into_iter()
        .filter(|m| !a.exclude.contains(&m.subject_id))
        .map(|m| m.video_id)
        .collect();
    let (samples, skipped) = prepare_samples(&ds, &ids, &cfg)?;
    for id in skipped {
        emit(&format!("event=skipped video={id}"));
    }
    let (params, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load_matching(p, &cfg.model)?;
            let adam = ck.optimizer.ok_or_else(|| usage(format!("{} has no optimizer state", p.display())))?;
            (ck.params, Some((ck.epoch, adam)))
        }
        None => (SpotterParams::init(&cfg.model, cfg.seed)?, None),
    };
    let mut log = Tee { buf: Vec::new() };
    let outcome = train(params, &samples, &cfg, resume, &mut log)?;
    let path = a.common.out.join("model.ckpt");
    outcome.checkpoint().save(&path)?;
    write_bytes(&a.common.out.join("train.log"), &log.buf)?;
    emit(&format!("checkpoint={} epoch={}", path.display(), outcome.epoch));
    Ok(())
}

fn spot(a: &SpotArgs) -> Outcome {
    let cfg = a.common.resolve(a.data.as_deref(), None)?;
    let ds = Dataset::load(cfg.data_dir()?)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ids: Vec<String> = ds
        .metas()
        .into_iter()
        .filter(|m| a.subjects.is_empty() || a.subjects.contains(&m.subject_id))
        .map(|m| m.video_id)
        .collect();
    let scores = score_videos(&ck.params, &ds, &ids, cfg.parallel)?;
    let proposals = proposals_from_scores(&scores, &cfg.decode)?;
    write_jsonl(&a.common.out.join("scores.jsonl"), &scores)?;
    write_jsonl(&a.common.out.join("proposals.jsonl"), &proposals)?;
    emit(&format!(
        "videos={} proposals={} theta={} out={}",
        ids.len(),
        proposals.len(),
        cfg.decode.theta,
        a.common.out.display()
    ));
    Ok(())
}

fn eval(a: &EvalArgs) -> Outcome {
    let cfg = a.common.resolve(a.data.as_deref(), None)?;
    let annotations = match (&a.annotations, &cfg.data_dir) {
        (Some(p), _) => read_annotations(p)?,
        (None, Some(d)) => read_annotations(&d.join("annotations.json"))?,
        (None, None) => return Err(usage("eval needs --annotations or --data")),
    };
    let proposals: Vec<ProposalRecord> = read_jsonl(&a.proposals, "proposals")?;
    let scores: Option<Vec<ScoreRecord>> = a.scores.as_deref().map(|p| read_jsonl(p, "scores")).transpose()?;
    // with scores at hand, only the scored videos are under evaluation
    let videos: Option<Vec<String>> = scores.as_ref().map(|s| s.iter().map(|r| r.video_id.clone()).collect());
    let (counts, _) = evaluate(&proposals, &annotations, videos.as_deref(), cfg.eval.k_eval)?;
    let report = score(&counts);
    let table = format_table(std::slice::from_ref(&report));
    write_json(&a.common.out.join("report.json"), &report)?;
    write_bytes(&a.common.out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    if a.report {
        let scores = scores.ok_or_else(|| usage("--report needs --scores"))?;
        let sweep = sweep_reports(&scores, &cfg.eval.sweep, &cfg.decode, &annotations, cfg.eval.k_eval)?;
        write_json(&a.common.out.join("sweep.json"), &sweep)?;
        write_bytes(&a.common.out.join("sweep.svg"), sweep_svg(&sweep).as_bytes())?;
        for (theta, r) in &sweep {
            emit(&format!(
                "theta={theta} proposals={} precision={:.4} recall={:.4} f1={:.4}",
                r.tp + r.fp,
                r.precision,
                r.recall,
                r.f1
            ));
        }
    }
    Ok(())
}

fn loso(a: &LosoArgs) -> Outcome {
    let cfg = a.common.resolve(a.data.as_deref(), a.epochs)?;
    let ds = Dataset::load(cfg.data_dir()?)?;
    let mut log = Tee { buf: Vec::new() };
    run_loso(&ds, &cfg, Some(&a.common.out), &mut log)?;
    write_bytes(&a.common.out.join("loso.log"), &log.buf)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Spot(a) => spot(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Loso(a) => loso(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
