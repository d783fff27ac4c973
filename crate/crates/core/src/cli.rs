//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, split_by_section, Corpus, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluate::export::{
    composition_csv, embedding_csv, metrics_csv, parse_labels_csv, parse_logits_csv, write_text, EmbeddingRow,
    MetricRow,
};
use crate::evaluate::{cluster_composition, embed_2d, topk_accuracy, ward_cluster, MetricBlock};
use crate::gradcheck::{run_suite, GradcheckConfig};
use crate::model::{load_params, save_params};
use crate::trainer::config::arm_name;
use crate::trainer::{predict, pretrain_contrastive, train_probe, train_scratch, Arm, RunOptions, TrainConfig, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "supcon", version, about = "Supervised contrastive feature learning on texture patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Partition corpus sections into train and test sets.
    Split(SplitArgs),
    /// Contrastive pretraining of encoder and projection head.
    Pretrain(RunArgs),
    /// Linear probe on a frozen pretrained encoder.
    Probe(RunArgs),
    /// End-to-end training of encoder and classifier.
    Scratch(RunArgs),
    /// Metrics from a logits file and a label file.
    Eval(EvalArgs),
    /// Ward clustering and 2-d export of test-split features.
    Cluster(RunArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 2)]
    brains: u32,
    #[arg(long, default_value_t = 5)]
    sections_per_brain: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    resolution_um: f64,
    /// Also write `split.json` with this train fraction.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    holdout_brain: Option<u32>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Defaults to `<corpus>/split.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `--config FILE`, `--resume CHECKPOINT` and `--<key> <value>` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
    args: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value = "model")]
    model: String,
    #[arg(long, default_value = "eval")]
    dataset: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 12)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Pretrain(a) => training(Arm::Contrastive, a),
        Command::Probe(a) => training(Arm::Probe, a),
        Command::Scratch(a) => training(Arm::Scratch, a),
        Command::Cluster(a) => cluster(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        side: a.side,
        brains: a.brains,
        sections_per_brain: a.sections_per_brain,
        seed: a.seed,
        resolution_um: a.resolution_um,
    };
    let corpus = generate_synthetic_corpus(&cfg)?;
    save_corpus(&corpus, &a.out)?;
    let mut resolved = format!(
        "classes={}\nper-class={}\nside={}\nbrains={}\nsections-per-brain={}\nseed={}\nresolution-um={}\n",
        cfg.classes, cfg.per_class, cfg.side, cfg.brains, cfg.sections_per_brain, cfg.seed, cfg.resolution_um
    );
    if let Some(f) = a.train_fraction {
        let s = split_by_section(&corpus.manifest, f, None, a.seed)?;
        s.save(&a.out.join("split.json"))?;
        resolved.push_str(&format!("train-fraction={f}\n"));
    }
    write_text(&a.out.join("synth-config.txt"), &resolved)?;
    println!("{} patches in {}", corpus.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let s = split_by_section(&corpus.manifest, a.train_fraction, a.holdout_brain, a.seed)?;
    let out = a.out.unwrap_or_else(|| a.corpus.join("split.json"));
    s.save(&out)?;
    let mut resolved = format!(
        "corpus={}\ntrain-fraction={}\nseed={}\n",
        a.corpus.display(),
        a.train_fraction,
        a.seed
    );
    if let Some(b) = a.holdout_brain {
        resolved.push_str(&format!("holdout-brain={b}\n"));
    }
    write_text(&out.with_extension("config.txt"), &resolved)?;
    println!(
        "{} train / {} test sections -> {}",
        s.train_sections.len(),
        s.test_sections.len(),
        out.display()
    );
    Ok(())
}

struct Resolved {
    config: TrainConfig,
    resume: Option<PathBuf>,
}

/// `--config` file, then flags; flags win over the file, the file over presets.
fn resolve(arm: Arm, args: &[String]) -> Result<Resolved> {
    let mut file_pairs = Vec::new();
    let mut flag_pairs = Vec::new();
    let mut resume = None;
    let mut i = 0;
    while i < args.len() {
        let raw = &args[i];
        let Some(flag) = raw.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument `{raw}`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("flag `--{flag}` needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => {
                let text = std::fs::read_to_string(&value).map_err(|e| Error::io(Path::new(&value), e))?;
                file_pairs.extend(TrainConfig::parse_text(&text)?);
            }
            "resume" => resume = Some(PathBuf::from(value)),
            "arm" => return Err(Error::Config("`arm` is set by the subcommand".into())),
            _ => flag_pairs.push((key, value)),
        }
        i += 1;
    }
    file_pairs.retain(|(k, _)| k != "arm");
    let mut config = TrainConfig::from_layers(&[file_pairs, flag_pairs])?;
    config.arm = arm;
    config.validate()?;
    Ok(Resolved { config, resume })
}

fn create_run_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let base = format!("{}-{ts}", &cfg.hash()[..12]);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = cfg.out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded loop returns")
}

fn load_inputs(cfg: &TrainConfig) -> Result<(Corpus, SplitSpec)> {
    let corpus = load_corpus(&cfg.corpus)?;
    let split = SplitSpec::load(&cfg.split)?;
    Ok((corpus, split))
}

fn evaluation_sets(corpus: &Corpus, split: &SplitSpec) -> Vec<(&'static str, Vec<usize>)> {
    let mut sets = vec![("test", split.test_entries(&corpus.manifest))];
    let unseen = split.unseen_entries(&corpus.manifest);
    if !unseen.is_empty() {
        sets.push(("unseen", unseen));
    }
    sets
}

fn report_metrics(dir: &Path, model_name: &str, outcome: &mut TrainOutcome, cfg: &TrainConfig, corpus: &Corpus, split: &SplitSpec) -> Result<()> {
    let mut blocks = Vec::new();
    for (name, idx) in evaluation_sets(corpus, split) {
        if idx.is_empty() {
            continue;
        }
        let pred = predict(&outcome.params, &outcome.model, corpus, &idx, cfg.input_side)?;
        blocks.push((name, pred.metrics()?));
    }
    let rows: Vec<MetricRow<'_>> = blocks
        .iter()
        .map(|(d, m)| MetricRow {
            model: model_name,
            dataset: d,
            metrics: m,
        })
        .collect();
    let csv = metrics_csv(&rows);
    write_text(&dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    outcome.log.metrics = blocks.first().map(|(_, m)| m.clone());
    Ok(())
}

fn training(arm: Arm, a: RunArgs) -> Result<()> {
    let Resolved { config: cfg, resume } = resolve(arm, &a.args)?;
    let (corpus, split) = load_inputs(&cfg)?;
    let pretrained = if arm == Arm::Probe {
        if cfg.pretrained.as_os_str().is_empty() {
            return Err(Error::Config("probe needs `--pretrained <model.bin>`".into()));
        }
        Some(load_params(&cfg.pretrained)?.0)
    } else {
        None
    };
    let dir = create_run_dir(&cfg)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let opts = RunOptions {
        checkpoint: Some(dir.join("checkpoint.bin")),
        log_csv: Some(dir.join("runlog.csv")),
        resume,
        stop_after: None,
    };
    let mut outcome = match arm {
        Arm::Contrastive => pretrain_contrastive(&cfg, &corpus, &split, &opts)?,
        Arm::Probe => train_probe(&cfg, &corpus, &split, pretrained.as_ref().expect("loaded above"), &opts)?,
        Arm::Scratch => train_scratch(&cfg, &corpus, &split, &opts)?,
    };
    for w in &outcome.log.warnings {
        eprintln!("warning: {w}");
    }
    save_params(&outcome.params, &outcome.model, cfg.seed, &dir.join("model.bin"))?;
    match arm {
        Arm::Contrastive => {}
        Arm::Probe => report_metrics(&dir, "contrastive", &mut outcome, &cfg, &corpus, &split)?,
        Arm::Scratch => report_metrics(&dir, "scratch", &mut outcome, &cfg, &corpus, &split)?,
    }
    for r in &outcome.log.records {
        eprintln!("{} epoch {:>3} loss {:.5}", arm_name(arm), r.epoch, r.loss);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cluster(a: RunArgs) -> Result<()> {
    let Resolved { config: cfg, .. } = resolve(Arm::Contrastive, &a.args)?;
    if cfg.pretrained.as_os_str().is_empty() {
        return Err(Error::Config("cluster needs `--pretrained <model.bin>`".into()));
    }
    let (corpus, split) = load_inputs(&cfg)?;
    let (params, model, _) = load_params(&cfg.pretrained)?;
    let dir = create_run_dir(&cfg)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let idx = split.test_entries(&corpus.manifest);
    let pred = predict(&params, &model, &corpus, &idx, cfg.input_side)?;
    let k = cfg.clusters.min(pred.features.len());
    let report = ward_cluster(&pred.features, k)?;
    let rows = cluster_composition(&report, &pred.labels, cfg.top_labels)?;
    write_text(&dir.join("clusters.csv"), &composition_csv(&rows, &corpus.manifest.class_names))?;
    let coords = embed_2d(&pred.features, cfg.seed)?;
    let emb: Vec<EmbeddingRow> = coords
        .iter()
        .zip(&idx)
        .zip(&report.assignments)
        .map(|((xy, &i), &c)| EmbeddingRow {
            xy: *xy,
            label: corpus.manifest.entries[i].label,
            brain_id: corpus.manifest.entries[i].brain_id,
            cluster: c,
        })
        .collect();
    write_text(&dir.join("embedding.csv"), &embedding_csv(&emb))?;
    println!("{}", dir.display());
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn eval(a: EvalArgs) -> Result<()> {
    let logits = parse_logits_csv(&read(&a.pred)?)?;
    let labels = parse_labels_csv(&read(&a.truth)?)?;
    if logits.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let classes = logits.first().map(Vec::len).unwrap_or(0);
    if a.k == 0 || a.k > classes {
        return Err(Error::Config(format!("--k {} outside 1..={classes}", a.k)));
    }
    let mut block = MetricBlock::compute(&logits, &labels)?;
    block.top3 = topk_accuracy(&logits, &labels, a.k)?;
    let mut csv = metrics_csv(&[MetricRow {
        model: &a.model,
        dataset: &a.dataset,
        metrics: &block,
    }]);
    if a.k != 3 {
        csv = csv.replacen("top3", &format!("top{}", a.k), 1);
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
        let resolved = format!(
            "pred={}\ntruth={}\nk={}\nmodel={}\ndataset={}\n",
            a.pred.display(),
            a.truth.display(),
            a.k,
            a.model,
            a.dataset
        );
        write_text(&out.with_extension("config.txt"), &resolved)?;
    }
    print!("{csv}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        trials: a.trials,
        coords_per_tensor: a.coords,
        seed: a.seed,
    };
    if cfg.trials == 0 || cfg.coords_per_tensor == 0 {
        return Err(Error::Config("trials and coords must be positive".into()));
    }
    println!("op,trials,checked,skipped,max_rel_error,tolerance,status");
    let reports = run_suite(&cfg, |r| {
        println!(
            "{},{},{},{},{:.3e},{:e},{}",
            r.op,
            r.trials,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    })?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Training(format!("gradient check failed for {}", failed.join(", "))))
    }
}
