//! Command-line surface over the library.
//!
//! Seven subcommands cover the full workflow: `train` produces a
//! checkpoint, `attack`/`eval`/`transfer`/`detect`/`hist` consume one, and
//! `theory` runs the prediction-space checks with no model at all. Every
//! run is reproducible: identical argv, config, and seed produce
//! byte-identical output files (nothing written contains a timestamp).
//!
//! Errors go to stderr as single-line JSON records
//! `{"code": ..., "message": ..., "context": ...}` and map to exit codes:
//! `0` ok, `1` usage, `2` runtime/numeric failure, `3` format/version
//! error, `4` theory-suite failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::attacks::{run_attack, AttackConfig, AttackMethod, Victim};
use crate::checkpoint::{load_checkpoint, report_digest, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::diversity::{run_theory_suite, TheoryOptions};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy, detection_scores, diversity_histogram, robust_accuracy, roc_auc, transfer_matrix,
    TransferMatrix, TransferMode,
};
use crate::model::Ensemble;
use crate::tensor::{argmax, Tensor};
use crate::training::adp_train;

/// Top-level argument grammar.
#[derive(Debug, Parser)]
#[command(
    name = "divens",
    about = "Train, attack, and evaluate diversity-regularized ensembles",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// JSON experiment config (defaults describe a synthetic desk-scale run).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory for output files, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Suppress progress lines on stdout (files are still written).
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

/// One entry per subcommand.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an ensemble; writes checkpoint.json and train_report.json.
    Train,
    /// Craft adversarial examples against a checkpoint.
    Attack(AttackArgs),
    /// Clean accuracy plus robust accuracy under every configured attack.
    Eval(EvalArgs),
    /// Member-to-member transfer matrices, untargeted and targeted.
    Transfer(TransferArgs),
    /// Diversity-score detection: ROC curve and AUC.
    Detect(DetectArgs),
    /// Numeric checks of the regularizer's optimum structure.
    Theory(TheoryArgs),
    /// Histogram of per-example log ensemble diversity.
    Hist(HistArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack(_) => "attack",
            Command::Eval(_) => "eval",
            Command::Transfer(_) => "transfer",
            Command::Detect(_) => "detect",
            Command::Theory(_) => "theory",
            Command::Hist(_) => "hist",
        }
    }
}

/// Flags for `attack`. Unset knobs keep the method's defaults.
#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Trained checkpoint to attack.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Attack method: fgsm, bim, pgd, mim, jsma, cw, or ead.
    #[arg(long, default_value = "pgd")]
    pub method: String,
    /// L-infinity budget for the signed-gradient family.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Iterations for the signed-gradient family.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-iteration step (default eps/steps).
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Momentum decay for mim.
    #[arg(long)]
    pub momentum_decay: Option<f64>,
    /// Per-feature step applied by jsma.
    #[arg(long)]
    pub jsma_theta: Option<f64>,
    /// Fraction of features jsma may modify.
    #[arg(long)]
    pub jsma_gamma: Option<f64>,
    /// Margin weight in the cw/ead objective.
    #[arg(long)]
    pub cw_c: Option<f64>,
    /// Confidence floor in the cw/ead margin.
    #[arg(long)]
    pub cw_kappa: Option<f64>,
    /// L1 weight in the ead objective.
    #[arg(long)]
    pub ead_beta: Option<f64>,
    /// Optimizer learning rate for cw/ead.
    #[arg(long)]
    pub opt_lr: Option<f64>,
    /// Optimizer iterations for cw/ead.
    #[arg(long)]
    pub opt_steps: Option<usize>,
    /// Target class; enables targeted mode.
    #[arg(long)]
    pub target_label: Option<usize>,
    /// Attack one member's prediction instead of the ensemble average.
    #[arg(long, value_name = "K")]
    pub victim_member: Option<usize>,
    /// Attack only the first N test examples.
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
}

/// Flags for `eval`.
#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Evaluate only the first N test examples.
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
}

/// Flags for `transfer`.
#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Crafting attack for every grid row.
    #[arg(long, default_value = "pgd")]
    pub method: String,
    /// L-infinity budget.
    #[arg(long, default_value_t = 0.15)]
    pub eps: f64,
    /// Crafting iterations.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Use only the first N test examples.
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
}

/// Flags for `detect`.
#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Budget of the pgd attack that makes the adversarial class.
    #[arg(long, default_value_t = 0.3)]
    pub eps: f64,
    /// Crafting iterations.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Examples per class (clean and adversarial).
    #[arg(long, default_value_t = 500, value_name = "N")]
    pub count: usize,
}

/// Flags for `theory`.
#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Projected-gradient steps per optimization (default 20000).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trace recording interval (0 records only the endpoints).
    #[arg(long)]
    pub record_every: Option<usize>,
}

/// Flags for `hist`.
#[derive(Debug, Args)]
pub struct HistArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Number of equal-width bins.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
    /// Which split to histogram: test or train.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use only the first N examples of the split.
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
}

/// Parses argv and runs one command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                return 0;
            }
            eprintln!("{}", error_record(&Error::Usage(err.to_string()), "argv"));
            return 1;
        }
    };
    let context = cli.command.name();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_record(&err, context));
            err.exit_code()
        }
    }
}

/// One-line JSON error record for stderr.
fn error_record(err: &Error, context: &str) -> String {
    serde_json::json!({
        "code": err.code(),
        "message": err.to_string(),
        "context": context,
    })
    .to_string()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Attack(args) => cmd_attack(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Transfer(args) => cmd_transfer(cli, args),
        Command::Detect(args) => cmd_detect(cli, args),
        Command::Theory(args) => cmd_theory(cli, args),
        Command::Hist(args) => cmd_hist(cli, args),
    }
}

fn say(quiet: bool, line: String) {
    if !quiet {
        println!("{line}");
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out)?;
    Ok(cli.out.clone())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn parse_method(name: &str) -> Result<AttackMethod> {
    match name {
        "fgsm" => Ok(AttackMethod::Fgsm),
        "bim" => Ok(AttackMethod::Bim),
        "pgd" => Ok(AttackMethod::Pgd),
        "mim" => Ok(AttackMethod::Mim),
        "jsma" => Ok(AttackMethod::Jsma),
        "cw" => Ok(AttackMethod::Cw),
        "ead" => Ok(AttackMethod::Ead),
        other => Err(Error::Usage(format!(
            "unknown attack method '{other}' (expected fgsm, bim, pgd, mim, jsma, cw, or ead)"
        ))),
    }
}

fn method_name(method: AttackMethod) -> &'static str {
    match method {
        AttackMethod::Fgsm => "fgsm",
        AttackMethod::Bim => "bim",
        AttackMethod::Pgd => "pgd",
        AttackMethod::Mim => "mim",
        AttackMethod::Jsma => "jsma",
        AttackMethod::Cw => "cw",
        AttackMethod::Ead => "ead",
    }
}

/// Builds an [`AttackConfig`] from the flags, keeping defaults for unset
/// knobs. Flag errors are usage errors, not runtime errors.
fn attack_config(args: &AttackArgs) -> Result<AttackConfig> {
    let mut cfg = AttackConfig::new(parse_method(&args.method)?);
    if let Some(v) = args.eps {
        cfg.eps = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if args.step_size.is_some() {
        cfg.step_size = args.step_size;
    }
    if let Some(v) = args.momentum_decay {
        cfg.momentum_decay = v;
    }
    if let Some(v) = args.jsma_theta {
        cfg.jsma_theta = v;
    }
    if let Some(v) = args.jsma_gamma {
        cfg.jsma_gamma = v;
    }
    if let Some(v) = args.cw_c {
        cfg.cw_c = v;
    }
    if let Some(v) = args.cw_kappa {
        cfg.cw_kappa = v;
    }
    if let Some(v) = args.ead_beta {
        cfg.ead_beta = v;
    }
    if let Some(v) = args.opt_lr {
        cfg.opt_lr = v;
    }
    if let Some(v) = args.opt_steps {
        cfg.opt_steps = v;
    }
    if let Some(t) = args.target_label {
        cfg.targeted = true;
        cfg.target_label = Some(t);
    }
    if let Some(k) = args.victim_member {
        cfg.victim = Victim::Member(k);
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

/// The experiment config with the `--seed` flag applied.
fn experiment_for_training(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = base_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The experiment config for commands that consume a checkpoint. The data
/// seed defaults to the checkpoint's training seed so evaluation sees the
/// same synthetic draw the model was trained on; `--seed` still wins.
fn experiment_for_checkpoint(cli: &Cli, ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let cfg = base_config(cli)?.with_seed(cli.seed.unwrap_or(ckpt.seed));
    cfg.validate()?;
    Ok(cfg)
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => ExperimentConfig::from_path(path),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Loads a checkpoint, reporting a missing path as a usage error rather
/// than a bare I/O failure.
fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    load_checkpoint(path)
}

/// Loads both splits and checks them against the checkpoint architecture
/// (the config's own architecture section is irrelevant here — the
/// checkpoint records what the model actually expects).
fn load_splits(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<(Dataset, Dataset)> {
    let (train, test) = cfg.dataset.load(cfg.train.seed)?;
    for (name, data) in [("train", &train), ("test", &test)] {
        if data.dim() != ckpt.mlp.input_dim || data.num_classes() != ckpt.mlp.num_classes {
            return Err(Error::Usage(format!(
                "{name} split ({} features, {} classes) does not match the checkpoint \
                 architecture ({} features, {} classes)",
                data.dim(),
                data.num_classes(),
                ckpt.mlp.input_dim,
                ckpt.mlp.num_classes
            )));
        }
    }
    Ok((train, test))
}

/// Applies `--count`, rejecting zero.
fn cap(data: Dataset, count: Option<usize>) -> Result<Dataset> {
    match count {
        Some(0) => Err(Error::Usage("--count must be >= 1".into())),
        Some(n) => data.take(n),
        None => Ok(data),
    }
}

/// The victim's hard predictions on a batch.
fn victim_predictions(ens: &Ensemble, victim: Victim, x: &Tensor) -> Result<Vec<usize>> {
    let probs = match victim {
        Victim::Ensemble => ens.predict_ensemble(x)?,
        Victim::Member(k) => ens.predict_member(k, x)?,
    };
    Ok((0..probs.rows()).map(|i| argmax(probs.row_slice(i))).collect())
}

fn fraction_correct(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = experiment_for_training(cli)?;
    let (train_data, test_data) = cfg.load_data()?;
    say(
        cli.quiet,
        format!(
            "training {} members on {} examples (alpha {}, beta {}, seed {})",
            cfg.ensemble_size,
            train_data.len(),
            cfg.train.adp.alpha,
            cfg.train.adp.beta,
            cfg.train.seed
        ),
    );
    let ens = Ensemble::init(cfg.mlp.clone(), cfg.ensemble_size, cfg.train.seed)?;
    let (ens, report) = adp_train(ens, &train_data, &cfg.train)?;
    let last = report
        .epochs
        .last()
        .ok_or(Error::Empty("training report"))?;
    say(
        cli.quiet,
        format!(
            "trained {} epochs (objective {:.6}, train ensemble accuracy {:.4})",
            report.epochs.len(),
            last.mean_objective,
            last.ensemble_accuracy
        ),
    );
    let clean = accuracy(&ens, &test_data)?;
    say(
        cli.quiet,
        format!("test ensemble accuracy {:.4}", clean.ensemble),
    );

    let dir = out_dir(cli)?;
    let mut report_json = serde_json::to_string_pretty(&report)?;
    report_json.push('\n');
    let ckpt = Checkpoint::from_ensemble(&ens, cfg.train.adp, cfg.train.seed, report_digest(&report_json));
    write_file(&dir.join("train_report.json"), &report_json)?;
    save_checkpoint(&dir.join("checkpoint.json"), &ckpt)?;
    say(
        cli.quiet,
        format!("wrote {}", dir.join("checkpoint.json").display()),
    );
    Ok(())
}

fn cmd_attack(cli: &Cli, args: &AttackArgs) -> Result<()> {
    let acfg = attack_config(args)?;
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let ens = ckpt.to_ensemble()?;
    if let Victim::Member(k) = acfg.victim {
        if k >= ens.len() {
            return Err(Error::Usage(format!(
                "--victim-member {k} out of range for {} members",
                ens.len()
            )));
        }
    }
    let cfg = experiment_for_checkpoint(cli, &ckpt)?;
    let (_, test) = load_splits(&cfg, &ckpt)?;
    let data = cap(test, args.count)?;
    let seed = cfg.train.seed;
    say(
        cli.quiet,
        format!(
            "attacking {} examples with {} (eps {})",
            data.len(),
            method_name(acfg.method),
            acfg.eps
        ),
    );
    let batch = run_attack(&ens, data.features(), data.labels(), &acfg, seed, 0)?;

    let labels = data.labels();
    let n = labels.len() as f64;
    let clean_preds = victim_predictions(&ens, acfg.victim, data.features())?;
    let adv_preds = victim_predictions(&ens, acfg.victim, &batch.adversarials)?;
    let clean_accuracy = fraction_correct(&clean_preds, labels);
    let robust_accuracy = fraction_correct(&adv_preds, labels);
    let success_rate = batch.success.iter().filter(|s| **s).count() as f64 / n;
    let mean_linf = batch.linf.iter().sum::<f64>() / n;
    let max_linf = batch.linf.iter().cloned().fold(0.0, f64::max);
    let mean_l2 = batch.l2.iter().sum::<f64>() / n;

    let dir = out_dir(cli)?;
    let mut rows =
        String::from("index,label,clean_prediction,adversarial_prediction,success,linf,l2\n");
    for i in 0..labels.len() {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, labels[i], clean_preds[i], adv_preds[i], batch.success[i], batch.linf[i], batch.l2[i]
        ));
    }
    write_file(&dir.join("attack_examples.csv"), &rows)?;

    let mut summary_csv = String::from("metric,value\n");
    for (name, value) in [
        ("clean_accuracy", clean_accuracy),
        ("robust_accuracy", robust_accuracy),
        ("attack_success_rate", success_rate),
        ("mean_linf", mean_linf),
        ("max_linf", max_linf),
        ("mean_l2", mean_l2),
    ] {
        summary_csv.push_str(&format!("{name},{value}\n"));
    }
    write_file(&dir.join("attack_summary.csv"), &summary_csv)?;

    let summary = serde_json::json!({
        "attack": acfg,
        "examples": labels.len(),
        "clean_accuracy": clean_accuracy,
        "robust_accuracy": robust_accuracy,
        "attack_success_rate": success_rate,
        "mean_linf": mean_linf,
        "max_linf": max_linf,
        "mean_l2": mean_l2,
    });
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    write_file(&dir.join("attack_summary.json"), &summary_json)?;
    say(
        cli.quiet,
        format!(
            "robust accuracy {robust_accuracy:.4} (clean {clean_accuracy:.4}); wrote {}",
            dir.join("attack_summary.csv").display()
        ),
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let ens = ckpt.to_ensemble()?;
    let cfg = experiment_for_checkpoint(cli, &ckpt)?;
    let (_, test) = load_splits(&cfg, &ckpt)?;
    let data = cap(test, args.count)?;
    let seed = cfg.train.seed;

    let clean = accuracy(&ens, &data)?;
    say(
        cli.quiet,
        format!(
            "clean accuracy: ensemble {:.4} over {} examples",
            clean.ensemble,
            data.len()
        ),
    );
    let mut csv = String::from("metric,method,eps,value\n");
    csv.push_str(&format!("clean_ensemble,,,{}\n", clean.ensemble));
    for (k, acc) in clean.members.iter().enumerate() {
        csv.push_str(&format!("clean_member_{k},,,{acc}\n"));
    }
    for (i, attack) in cfg.attacks.iter().enumerate() {
        let robust = robust_accuracy(&ens, &data, attack, seed)?;
        let method = method_name(attack.method);
        csv.push_str(&format!("robust_{i},{method},{},{robust}\n", attack.eps));
        say(
            cli.quiet,
            format!("{method} eps {}: robust accuracy {robust:.4}", attack.eps),
        );
    }
    let dir = out_dir(cli)?;
    write_file(&dir.join("eval.csv"), &csv)?;
    say(cli.quiet, format!("wrote {}", dir.join("eval.csv").display()));
    Ok(())
}

fn matrix_csv(matrix: &TransferMatrix) -> String {
    let mut csv = String::from("substitute");
    for j in 0..matrix.k {
        csv.push_str(&format!(",victim_{j}"));
    }
    csv.push('\n');
    for i in 0..matrix.k {
        csv.push_str(&format!("{i}"));
        for j in 0..matrix.k {
            csv.push_str(&format!(",{}", matrix.at(i, j)));
        }
        csv.push('\n');
    }
    csv
}

fn mean_off_diagonal(matrix: &TransferMatrix) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..matrix.k {
        for j in 0..matrix.k {
            if i != j {
                sum += matrix.at(i, j);
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn cmd_transfer(cli: &Cli, args: &TransferArgs) -> Result<()> {
    let mut acfg = AttackConfig::new(parse_method(&args.method)?);
    acfg.eps = args.eps;
    acfg.steps = args.steps;
    acfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let ens = ckpt.to_ensemble()?;
    if ens.len() < 2 {
        return Err(Error::Usage(
            "transfer needs an ensemble with at least 2 members".into(),
        ));
    }
    let cfg = experiment_for_checkpoint(cli, &ckpt)?;
    let (_, test) = load_splits(&cfg, &ckpt)?;
    let data = cap(test, args.count)?;
    let seed = cfg.train.seed;
    say(
        cli.quiet,
        format!(
            "crafting {}x{} transfer grids on {} examples ({} eps {})",
            ens.len(),
            ens.len(),
            data.len(),
            method_name(acfg.method),
            acfg.eps
        ),
    );

    let dir = out_dir(cli)?;
    let untargeted = transfer_matrix(&ens, &data, &acfg, TransferMode::UntargetedAccuracy, seed)?;
    write_file(&dir.join("transfer_untargeted.csv"), &matrix_csv(&untargeted))?;
    say(
        cli.quiet,
        format!(
            "untargeted: mean off-diagonal accuracy {:.4}",
            mean_off_diagonal(&untargeted)
        ),
    );
    let targeted = transfer_matrix(&ens, &data, &acfg, TransferMode::TargetedSuccessRate, seed)?;
    write_file(&dir.join("transfer_targeted.csv"), &matrix_csv(&targeted))?;
    say(
        cli.quiet,
        format!(
            "targeted: mean off-diagonal success rate {:.4}",
            mean_off_diagonal(&targeted)
        ),
    );
    Ok(())
}

fn cmd_detect(cli: &Cli, args: &DetectArgs) -> Result<()> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let ens = ckpt.to_ensemble()?;
    let cfg = experiment_for_checkpoint(cli, &ckpt)?;
    let (_, test) = load_splits(&cfg, &ckpt)?;
    let data = cap(test, Some(args.count))?;
    let seed = cfg.train.seed;

    let mut acfg = AttackConfig::new(AttackMethod::Pgd);
    acfg.eps = args.eps;
    acfg.steps = args.steps;
    acfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    say(
        cli.quiet,
        format!(
            "scoring {} clean and {} attacked examples (pgd eps {})",
            data.len(),
            data.len(),
            args.eps
        ),
    );
    let batch = run_attack(&ens, data.features(), data.labels(), &acfg, seed, 0)?;
    let clean_scores = detection_scores(&ens, data.features())?;
    let adv_scores = detection_scores(&ens, &batch.adversarials)?;
    let roc = roc_auc(&clean_scores, &adv_scores)?;

    let dir = out_dir(cli)?;
    let mut scores_csv = String::from("kind,score\n");
    for s in &clean_scores {
        scores_csv.push_str(&format!("clean,{s}\n"));
    }
    for s in &adv_scores {
        scores_csv.push_str(&format!("adversarial,{s}\n"));
    }
    write_file(&dir.join("detection_scores.csv"), &scores_csv)?;

    let mut roc_csv = String::from("threshold,fpr,tpr\n");
    for i in 0..roc.thresholds.len() {
        roc_csv.push_str(&format!(
            "{},{},{}\n",
            roc.thresholds[i], roc.fpr[i], roc.tpr[i]
        ));
    }
    write_file(&dir.join("roc_curve.csv"), &roc_csv)?;

    let summary = serde_json::json!({
        "auc": roc.auc,
        "examples_per_class": data.len(),
        "eps": args.eps,
    });
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    write_file(&dir.join("detect_summary.json"), &summary_json)?;
    say(cli.quiet, format!("detection auc {:.4}", roc.auc));
    Ok(())
}

fn cmd_theory(cli: &Cli, args: &TheoryArgs) -> Result<()> {
    let mut opts = TheoryOptions::default();
    if let Some(steps) = args.steps {
        if steps < 1 {
            return Err(Error::Usage("--steps must be >= 1".into()));
        }
        opts.steps = steps;
    }
    if let Some(every) = args.record_every {
        opts.record_every = every;
    }
    let seed = cli.seed.unwrap_or(0);
    let checks = run_theory_suite(seed, &opts)?;
    for check in &checks {
        say(
            cli.quiet,
            format!(
                "{}: {} ({}/{} seeds)",
                check.name,
                if check.passed { "pass" } else { "FAIL" },
                check.seeds_passed,
                check.seeds_total
            ),
        );
        say(cli.quiet, format!("  {}", check.detail));
    }
    let dir = out_dir(cli)?;
    let mut report = serde_json::to_string_pretty(&checks)?;
    report.push('\n');
    write_file(&dir.join("theory_report.json"), &report)?;

    let failures: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::TheoryFailure(failures.join(", ")))
    }
}

fn cmd_hist(cli: &Cli, args: &HistArgs) -> Result<()> {
    if args.bins < 1 {
        return Err(Error::Usage("--bins must be >= 1".into()));
    }
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let ens = ckpt.to_ensemble()?;
    let cfg = experiment_for_checkpoint(cli, &ckpt)?;
    let (train, test) = load_splits(&cfg, &ckpt)?;
    let data = match args.split.as_str() {
        "test" => test,
        "train" => train,
        other => {
            return Err(Error::Usage(format!(
                "unknown split '{other}' (expected test or train)"
            )))
        }
    };
    let data = cap(data, args.count)?;
    let hist = diversity_histogram(&ens, &data, args.bins)?;

    let dir = out_dir(cli)?;
    let mut csv = String::from("bin_lo,bin_hi,count\n");
    for b in 0..hist.counts.len() {
        csv.push_str(&format!(
            "{},{},{}\n",
            hist.edges[b],
            hist.edges[b + 1],
            hist.counts[b]
        ));
    }
    write_file(&dir.join("hist.csv"), &csv)?;

    let summary = serde_json::json!({
        "median_ln_ed": hist.median_ln_ed,
        "examples": data.len(),
        "bins": args.bins,
        "split": args.split,
    });
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    write_file(&dir.join("hist_summary.json"), &summary_json)?;
    say(
        cli.quiet,
        format!("median ln diversity {:.4}", hist.median_ln_ed),
    );
    Ok(())
}
