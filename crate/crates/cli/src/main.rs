//! Command-line front end for the knowledge-tracing pipeline. Every
//! subcommand reads one JSON run configuration, derives its stage seeds
//! from the master seed, and leaves its artifacts in the output directory
//! for the next stage to pick up.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, missing artifacts,
//! unparseable inputs), 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tracelm::config::{DataSource, RunConfig, SeqEncoderKind};
use tracelm::data::{synth_generate, write_native_csv};
use tracelm::error::{Error, Result};
use tracelm::harness::{
    ablation_csv, artifacts, check_vocab, evaluate_model, evaluate_seq, guard_checkpoint,
    load_bundle, load_or_run_seq_stage, prepare_to_dir, run_ablation, run_length_sweep,
    run_merge_sweep, run_seq_stage, run_training, sweep_csv, write_json, write_text, DataBundle,
    WindowSet,
};
use tracelm::lm::LlmKtModel;
use tracelm::seqkt::extract_id_embeddings;

#[derive(Parser)]
#[command(
    name = "tracelm",
    version,
    about = "Desk-scale knowledge tracing with a miniature instruction-tuned language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; falls back to <out>/config.json, then defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override; every stage seed is derived from it
    #[arg(long)]
    seed: Option<u64>,
    /// Directory all artifacts are read from and written to
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its oracle probabilities
    Synth(Common),
    /// Source the dataset and split students into train/valid/test
    Prepare(Common),
    /// Train the standalone sequence encoder (DKT or AKT-lite)
    TrainSeq(Common),
    /// Pretrain the language model, then fine-tune the full model
    Train(Common),
    /// Score a trained checkpoint on the test split
    Eval(Common),
    /// Train and score the full model and its four single-removal variants
    Ablate(Common),
    /// Rerun the pipeline across history window lengths
    SweepLength {
        #[command(flatten)]
        common: Common,
        /// Comma-separated history lengths
        #[arg(long, value_delimiter = ',', default_values_t = vec![20, 50, 100])]
        lengths: Vec<usize>,
    },
    /// Rerun training across the Add/Avg/Concat merge strategies
    SweepMerge(Common),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::UnknownSchema(_)
        | Error::MissingArtifact(_)
        | Error::CsvParse { .. }
        | Error::Template(_) => 1,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(c) => cmd_synth(&c),
        Command::Prepare(c) => cmd_prepare(&c),
        Command::TrainSeq(c) => cmd_train_seq(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::SweepLength { common, lengths } => cmd_sweep_length(&common, &lengths),
        Command::SweepMerge(c) => cmd_sweep_merge(&c),
    }
}

/// Explicit config wins; otherwise a config saved by an earlier stage in
/// the same directory keeps the pipeline consistent; otherwise defaults.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let saved = c.out.join(artifacts::CONFIG);
            if saved.exists() {
                RunConfig::load(&saved)?
            } else {
                RunConfig::default().normalized()
            }
        }
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.save(&out.join(artifacts::CONFIG))
}

fn windows_of(cfg: &RunConfig, bundle: &DataBundle) -> Result<WindowSet> {
    WindowSet::build(bundle, cfg.max_history)
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let spec = match &cfg.data {
        DataSource::Synth { spec } => spec.clone(),
        DataSource::Csv { path, .. } => {
            return Err(Error::InvalidArgument(format!(
                "synth needs a synthetic data source, but the config reads CSV {path:?}"
            )))
        }
    };
    let outcome = synth_generate(&spec);
    write_native_csv(&c.out.join(artifacts::DATA), &outcome.interactions)?;
    write_json(&c.out.join(artifacts::ORACLE), &outcome.oracle_probs)?;
    save_config(&cfg, &c.out)?;
    println!(
        "synthesized {} interactions for {} students into {}",
        outcome.interactions.len(),
        spec.n_students,
        c.out.join(artifacts::DATA).display()
    );
    Ok(())
}

fn cmd_prepare(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let bundle = prepare_to_dir(&cfg, &c.out)?;
    save_config(&cfg, &c.out)?;
    let ws = windows_of(&cfg, &bundle)?;
    println!(
        "split {} students into {}/{}/{}; {} windows at L={} ({} train, {} valid, {} test)",
        bundle.split.train.len() + bundle.split.valid.len() + bundle.split.test.len(),
        bundle.split.train.len(),
        bundle.split.valid.len(),
        bundle.split.test.len(),
        ws.windows.len(),
        cfg.max_history,
        ws.train.len(),
        ws.valid.len(),
        ws.test.len(),
    );
    Ok(())
}

fn cmd_train_seq(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if !matches!(cfg.seq_encoder, SeqEncoderKind::Dkt | SeqEncoderKind::AktLite) {
        return Err(Error::InvalidArgument(format!(
            "train-seq needs seq_encoder \"dkt\" or \"akt-lite\"; {:?} has no standalone encoder",
            cfg.seq_encoder.as_str()
        )));
    }
    let bundle = load_bundle(&cfg, &c.out)?;
    let ws = windows_of(&cfg, &bundle)?;
    let stage = run_seq_stage(&cfg, &bundle, &ws)?;
    let model = stage.model.expect("dkt/akt stage always trains a model");
    let valid_report = stage.report.expect("dkt/akt stage always reports");
    model.save(&c.out.join(artifacts::SEQ_MODEL))?;
    write_json(&c.out.join(artifacts::ID_EMBEDDINGS), &extract_id_embeddings(&model))?;
    let test_report = evaluate_seq(
        &model,
        &ws.refs(&ws.test),
        cfg.max_history,
        cfg.eval_cap,
        format!("seq={};L={};seed={}", cfg.seq_encoder.as_str(), cfg.max_history, cfg.seed),
        cfg.exec,
    )?;
    write_json(
        &c.out.join(artifacts::SEQ_METRICS),
        &serde_json::json!({ "valid": valid_report, "test": test_report }),
    )?;
    save_config(&cfg, &c.out)?;
    println!("{}", serde_json::to_string_pretty(&test_report)?);
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let bundle = load_bundle(&cfg, &c.out)?;
    let ws = windows_of(&cfg, &bundle)?;
    let stage = load_or_run_seq_stage(&cfg, &bundle, &ws, Some(&c.out))?;
    let trained = run_training(&cfg, &bundle, &ws, stage.tables)?;
    trained.model.save(&c.out.join(artifacts::MODEL))?;
    trained.curves.write_csv(&c.out.join(artifacts::CURVES))?;
    save_config(&cfg, &c.out)?;
    let first = trained.pretrain_losses.first().copied().unwrap_or(f64::NAN);
    let last = trained.pretrain_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretraining loss {first:.4} -> {last:.4}; best epoch {} with valid AUC {:.4}",
        trained.curves.best_epoch, trained.curves.best_auc
    );
    Ok(())
}

fn cmd_eval(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let model_path = c.out.join(artifacts::MODEL);
    if !model_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint {}: run train first",
            model_path.display()
        )));
    }
    let model = LlmKtModel::load(&model_path)?;
    let bundle = load_bundle(&cfg, &c.out)?;
    guard_checkpoint(&cfg, &model)?;
    check_vocab(&cfg, &bundle, &model)?;
    let ws = windows_of(&cfg, &bundle)?;
    let report = evaluate_model(
        &model,
        &ws.refs(&ws.test),
        cfg.eval_cap,
        cfg.fingerprint(),
        cfg.exec,
    )?;
    write_json(&c.out.join(artifacts::METRICS), &report)?;
    write_text(
        &c.out.join(artifacts::METRICS_CSV),
        &format!("auc,acc,n\n{},{},{}\n", report.auc, report.acc, report.n_examples),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let bundle = load_bundle(&cfg, &c.out)?;
    let ws = windows_of(&cfg, &bundle)?;
    let stage = load_or_run_seq_stage(&cfg, &bundle, &ws, Some(&c.out))?;
    let rows = run_ablation(&cfg, &bundle, &ws, &stage)?;
    for row in &rows {
        if let Some(notice) = &row.notice {
            eprintln!("{}: {notice}", row.variant);
        }
    }
    let csv = ablation_csv(&rows);
    write_text(&c.out.join(artifacts::ABLATION), &csv)?;
    write_json(&c.out.join(artifacts::ABLATION_JSON), &rows)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep_length(c: &Common, lengths: &[usize]) -> Result<()> {
    let cfg = load_config(c)?;
    let bundle = load_bundle(&cfg, &c.out)?;
    let rows = run_length_sweep(&cfg, &bundle, lengths)?;
    let csv = sweep_csv("L", &rows);
    write_text(&c.out.join(artifacts::SWEEP_LENGTH), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep_merge(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let bundle = load_bundle(&cfg, &c.out)?;
    let rows = run_merge_sweep(&cfg, &bundle)?;
    let csv = sweep_csv("merge", &rows);
    write_text(&c.out.join(artifacts::SWEEP_MERGE), &csv)?;
    print!("{csv}");
    Ok(())
}
