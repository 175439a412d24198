//! Command-line surface: corpus generation, training, evaluation, ablation
//! sweeps, gradient checking, and embedding export.
//!
//! Every output is structured text with a schema version header. Exit codes:
//! 0 success, 1 generic failure (including a failed gradient check), 2
//! config errors, 3 data errors, 4 usage errors.

use crate::check::GRAD_TOL;
use crate::config::RunConfig;
use crate::data::{self, Target};
use crate::error::{Error, Result};
use crate::gradcheck::run_gradcheck;
use crate::model::StrategyKind;
use crate::train::{
    eval_model, load_checkpoint, save_checkpoint, train_run, train_sweep, RunResult, TrainOptions,
};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "emofuse",
    about = "Graph-based multi-feature fusion for continuous speech-emotion regression",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (streams, labels, manifest).
    Gen(GenArgs),
    /// Train the configured strategy and write checkpoint + metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest's devel split.
    Eval(EvalArgs),
    /// Train several strategies on one corpus and tabulate devel CCC.
    Ablate(AblateArgs),
    /// Compare every layer's gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export per-frame fused features with labels for external projection.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Signal spec JSON; omit for the default spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Sweep the learning rate per the config's range, keep the best run.
    #[arg(long)]
    lr_sweep: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated culture tags; defaults to the checkpoint config's.
    #[arg(long, value_delimiter = ',')]
    cultures: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated strategy kinds.
    #[arg(long, value_delimiter = ',', required = true)]
    strategies: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config; omit for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated culture filter; defaults to every utterance.
    #[arg(long, value_delimiter = ',')]
    cultures: Vec<String>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success codes.
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let spec: data::SignalSpec = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            spec
        }
        None => data::SignalSpec::default(),
    };
    let manifest = data::generate_corpus(&spec, args.seed, &args.out)?;
    let report = manifest.probe_report.as_ref().expect("generation records probes");
    println!(
        "generated {} utterances into {}",
        manifest.utterances.len(),
        args.out.display()
    );
    println!("# schema: emofuse-probe-v1");
    println!("probe\tarousal\tvalence\tliking");
    for (name, ccc) in &report.single_ccc {
        println!("single_{name}\t{:.4}\t{:.4}\t{:.4}", ccc[0], ccc[1], ccc[2]);
    }
    println!(
        "pair\t{:.4}\t{:.4}\t{:.4}",
        report.pair_ccc[0], report.pair_ccc[1], report.pair_ccc[2]
    );
    println!(
        "gap\t{:.4}\t{:.4}\t{:.4}",
        report.gap[0], report.gap[1], report.gap[2]
    );
    Ok(0)
}

fn out_dir_of(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::config("config must set out_dir for this command"))?;
    let path = PathBuf::from(dir);
    std::fs::create_dir_all(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

fn manifest_path_of(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.manifest.as_ref().ok_or_else(|| {
        Error::config("config must set manifest for this command")
    })?))
}

fn write_run_outputs(dir: &Path, result: &RunResult, widths: &data::StreamWidths) -> Result<()> {
    std::fs::write(dir.join("config.json"), result.config.to_json_pretty())
        .map_err(|e| Error::io(dir.join("config.json").display().to_string(), e))?;
    save_checkpoint(&dir.join("checkpoint.json"), result, widths)?;
    let metrics = serde_json::to_string_pretty(&result.metrics)
        .map_err(|e| Error::data(format!("metrics: {e}")))?;
    std::fs::write(dir.join("metrics.json"), metrics)
        .map_err(|e| Error::io(dir.join("metrics.json").display().to_string(), e))?;
    // Append-only run history.
    let line = serde_json::to_string(&result.metrics)
        .map_err(|e| Error::data(format!("metrics: {e}")))?;
    let history = dir.join("history.jsonl");
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&history)
        .map_err(|e| Error::io(history.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(history.display().to_string(), e))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    if args.lr_sweep {
        cfg.lr_sweep = true;
    }
    let dir = out_dir_of(&cfg)?;
    let corpus = data::load_corpus(&manifest_path_of(&cfg)?)?;
    let opts = TrainOptions {
        quiet: args.quiet,
        ..TrainOptions::default()
    };

    let result = if cfg.lr_sweep {
        let (best, table) = train_sweep(&cfg, &corpus, &opts)?;
        let mut text = String::from("# schema: emofuse-lr-sweep-v1\nlearning_rate\tmean_devel_ccc\n");
        for (lr, score) in &table {
            let _ = writeln!(text, "{lr}\t{score:.6}");
        }
        std::fs::write(dir.join("lr_sweep.tsv"), &text)
            .map_err(|e| Error::io(dir.join("lr_sweep.tsv").display().to_string(), e))?;
        print!("{text}");
        best
    } else {
        train_run(&cfg, &corpus, &opts)?
    };

    write_run_outputs(&dir, &result, &corpus.manifest.spec.widths)?;
    println!(
        "best epoch {} (lr {}), devel CCC: {}",
        result.metrics.best_epoch,
        result.config.learning_rate,
        result
            .metrics
            .best_devel_ccc
            .iter()
            .map(|(k, v)| format!("{k}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("checkpoint: {}", dir.join("checkpoint.json").display());
    Ok(0)
}

fn eval_table(scores: &std::collections::BTreeMap<String, f64>) -> String {
    let mut text = String::from("# schema: emofuse-eval-v1\ntarget\tccc\n");
    for (target, ccc) in scores {
        let _ = writeln!(text, "{target}\t{ccc:.6}");
    }
    text
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (model, cfg) = load_checkpoint(&args.checkpoint)?;
    let corpus = data::load_corpus(&args.manifest)?;
    let cultures = if args.cultures.is_empty() {
        cfg.cultures.clone()
    } else {
        args.cultures.clone()
    };
    let (_, devel) = data::split(&corpus.manifest, &cultures)?;
    let bundles: Vec<&data::FeatureBundle> = devel
        .iter()
        .map(|r| {
            corpus
                .bundle(&r.id)
                .ok_or_else(|| Error::data(format!("{} not loaded", r.id)))
        })
        .collect::<Result<_>>()?;
    let scores = eval_model(&model, &bundles)?;
    print!("{}", eval_table(&scores));
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<i32> {
    let cfg = RunConfig::load(&args.config)?;
    let corpus = data::load_corpus(&manifest_path_of(&cfg)?)?;
    for s in &args.strategies {
        StrategyKind::parse(s)?;
    }
    let opts = TrainOptions {
        quiet: args.quiet,
        ..TrainOptions::default()
    };

    // Strategies are independent runs; fan them out across workers.
    let results: Vec<Result<RunResult>> = args
        .strategies
        .par_iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.strategy = s.clone();
            train_run(&c, &corpus, &opts)
        })
        .collect();

    let targets = cfg.target_list();
    let mut text = String::from("# schema: emofuse-ablation-v1\nstrategy");
    for t in &targets {
        let _ = write!(text, "\t{}", t.name());
    }
    text.push('\n');
    for (s, r) in args.strategies.iter().zip(results) {
        let r = r?;
        let _ = write!(text, "{s}");
        for t in &targets {
            let _ = write!(text, "\t{:.6}", r.metrics.best_devel_ccc[t.name()]);
        }
        text.push('\n');
    }
    print!("{text}");
    if let Some(dir) = cfg.out_dir.as_ref() {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("ablation.tsv"), &text)
            .map_err(|e| Error::io(dir.join("ablation.tsv").display().to_string(), e))?;
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let report = run_gradcheck(&cfg)?;
    println!("# schema: emofuse-gradcheck-v1");
    println!("layer\tparams\tmax_rel_err\tstatus");
    for layer in &report.layers {
        println!(
            "{}\t{}\t{:.3e}\t{}",
            layer.layer,
            layer.params_checked,
            layer.max_rel_err,
            if layer.max_rel_err <= GRAD_TOL { "ok" } else { "FAIL" }
        );
    }
    println!(
        "overall max relative error {:.3e} (tolerance {GRAD_TOL:.0e})",
        report.max_rel_err
    );
    Ok(if report.max_rel_err <= GRAD_TOL { 0 } else { 1 })
}

fn cmd_export_embeddings(args: ExportArgs) -> Result<i32> {
    let (model, _cfg) = load_checkpoint(&args.checkpoint)?;
    let corpus = data::load_corpus(&args.manifest)?;
    let keep = |culture: &str| args.cultures.is_empty() || args.cultures.iter().any(|c| c == culture);

    let mut rows: Vec<(Vec<f64>, [f64; 3])> = Vec::new();
    let mut dim = 0;
    for b in corpus.bundles.iter().filter(|b| keep(&b.culture)) {
        let fused = model.fused_features(b)?;
        dim = fused.cols();
        for t in 0..fused.rows() {
            let labels = [
                b.labels.at2(t, Target::Arousal.index()),
                b.labels.at2(t, Target::Valence.index()),
                b.labels.at2(t, Target::Liking.index()),
            ];
            rows.push((fused.row_slice(t).to_vec(), labels));
        }
    }
    if rows.is_empty() {
        return Err(Error::data("no utterances match the culture filter"));
    }

    let mut text = String::from("# schema: emofuse-embeddings-v1\n");
    let _ = writeln!(text, "{} {dim}", rows.len());
    for (fused, labels) in &rows {
        for (i, v) in fused.iter().enumerate() {
            if i > 0 {
                text.push(' ');
            }
            let _ = write!(text, "{v}");
        }
        let _ = writeln!(text, " {} {} {}", labels[0], labels[1], labels[2]);
    }
    std::fs::write(&args.out, text).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("wrote {} frames x {dim} to {}", rows.len(), args.out.display());
    Ok(0)
}
