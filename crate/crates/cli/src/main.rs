use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use cxr_reward::completion::validate_format;
use cxr_reward::corpus::{read_completions, read_gold_csv, write_scored, write_trainlog, Corpus, ReadMode, ScoredRecord};
use cxr_reward::metrics::{evaluate_corpus, ClassSubset, EvalCase, EvalConfig, UncertainPolicy};
use cxr_reward::ontology::{render_structured_report, ClassId, LabelSet, Ontology, ReportMeta};
use cxr_reward::reward::{RewardConfig, RewardEngine};
use cxr_reward::toy::{ToyLab, ToyTask, TrainConfig};
use cxr_reward_service::{AppState, ServiceConfig, DEFAULT_MAX_BATCH};
use serde::Serialize;

mod config;

use config::{print_resolved, FileConfig, RewardFlags};

#[derive(Parser)]
#[command(name = "cxr-reward", version, about = "Score, evaluate and train against chest X-ray answer rewards")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "CXR_REWARD_CONFIG")]
    config: Option<PathBuf>,
    /// Alias lexicon replacing the built-in one.
    #[arg(long, global = true, env = "CXR_REWARD_LEXICON")]
    lexicon: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the tag contract of every record; exit 1 if any is invalid.
    Validate {
        /// Completions JSONL.
        input: PathBuf,
    },
    /// Score completions and write one record per line to --out.
    Score {
        /// Completions JSONL.
        input: PathBuf,
        /// Gold CSV; overrides inline gold.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Score file to write.
        #[arg(long)]
        out: PathBuf,
        /// Skip bad records and records without gold instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Mapping for uncertain (-1) gold cells.
        #[arg(long, value_enum)]
        uncertain: Option<Uncertain>,
        #[command(flatten)]
        reward: RewardFlags,
    },
    /// Per-class and macro F1 table for parsed answers.
    Eval {
        /// Completions JSONL.
        input: PathBuf,
        /// Gold CSV; overrides inline gold.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// five_class, all, or comma-separated class names. Repeatable.
        #[arg(long = "subset")]
        subsets: Vec<String>,
        /// Drop classes with no gold or predicted positives from macro averages.
        #[arg(long)]
        exclude_undefined: bool,
        /// Skip bad records and records without gold instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Mapping for uncertain (-1) gold cells.
        #[arg(long, value_enum)]
        uncertain: Option<Uncertain>,
        /// Also write counts and scores as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy categorical policy with GRPO and write the log to --out.
    GrpoDemo {
        /// `default`, `overshort`, or a task file.
        #[arg(long, default_value = "default")]
        task: String,
        /// Train log CSV to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        reward: RewardFlags,
    },
    /// Run the HTTP scoring service until interrupted.
    Serve {
        /// Listen address [default: 127.0.0.1:8080].
        #[arg(long, env = "CXR_REWARD_BIND")]
        bind: Option<String>,
        /// Largest accepted batch [default: 1024].
        #[arg(long)]
        max_batch: Option<usize>,
        #[command(flatten)]
        reward: RewardFlags,
    },
    /// Render a structured report for a list of findings.
    Report {
        /// Comma-separated findings, e.g. "Cardiomegaly, small effusion".
        findings: String,
        #[arg(long)]
        indication: Option<String>,
        #[arg(long)]
        comparison: Option<String>,
        #[arg(long)]
        technique: Option<String>,
    },
    /// List the finding classes and alias counts.
    Ontology,
}

#[derive(Clone, Copy, ValueEnum)]
enum Uncertain {
    ToNegative,
    ToPositive,
}

impl From<Uncertain> for UncertainPolicy {
    fn from(u: Uncertain) -> Self {
        match u {
            Uncertain::ToNegative => UncertainPolicy::ToNegative,
            Uncertain::ToPositive => UncertainPolicy::ToPositive,
        }
    }
}

/// Errors that should exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => FileConfig::default(),
    };
    let ontology = match &cli.lexicon {
        Some(p) => Arc::new(Ontology::from_lexicon_file(p).with_context(|| format!("loading lexicon {}", p.display()))?),
        None => Ontology::shared_builtin().clone(),
    };
    let reward = |flags: &RewardFlags, base: RewardConfig| {
        flags.resolve(&file.reward, base).map_err(|e| usage(format!("{e:#}")))
    };

    match cli.command {
        Command::Validate { input } => validate(&input),
        Command::Score { input, gold, out, lenient, uncertain, reward: flags } => {
            let cfg = reward(&flags, RewardConfig::default())?;
            let policy = uncertain.map(Into::into).unwrap_or_default();
            print_resolved(
                "score",
                &ScoreResolved { reward: &cfg, lenient, uncertain_policy: policy, lexicon: ontology.lexicon_version() },
            );
            score(&input, gold.as_deref(), &out, lenient, policy, cfg, ontology)
        }
        Command::Eval { input, gold, subsets, exclude_undefined, lenient, uncertain, out } => {
            let subsets = if subsets.is_empty() {
                file.eval.subsets.clone().unwrap_or_else(|| vec!["five_class".into(), "all".into()])
            } else {
                subsets
            };
            let subsets = subsets
                .iter()
                .map(|s| ClassSubset::parse(s).map_err(|e| usage(e.to_string())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let uncertain_policy = match (uncertain, &file.eval.uncertain_policy) {
                (Some(u), _) => u.into(),
                (None, Some(s)) => s.parse().map_err(usage)?,
                (None, None) => UncertainPolicy::default(),
            };
            let cfg = EvalConfig {
                subsets,
                exclude_undefined: exclude_undefined || file.eval.exclude_undefined.unwrap_or(false),
                strict: !lenient,
                uncertain_policy,
            };
            print_resolved("eval", &EvalResolved::new(&cfg, ontology.lexicon_version()));
            eval(&input, gold.as_deref(), out.as_deref(), &cfg, &ontology)
        }
        Command::GrpoDemo { task, out, steps, group_size, lr, temperature, seed, reward: flags } => {
            let d = TrainConfig::default();
            let t = &file.train;
            let cfg = TrainConfig {
                learning_rate: lr.or(t.learning_rate).unwrap_or(d.learning_rate),
                steps: steps.or(t.steps).unwrap_or(d.steps),
                group_size: group_size.or(t.group_size).unwrap_or(d.group_size),
                temperature: temperature.or(t.temperature).unwrap_or(d.temperature),
                seed: seed.or(t.seed).unwrap_or(d.seed),
                reward: reward(&flags, d.reward.clone())?,
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            print_resolved("grpo-demo", &DemoResolved { task: &task, train: &cfg });
            grpo_demo(&task, &out, &cfg, ontology)
        }
        Command::Serve { bind, max_batch, reward: flags } => {
            let cfg = reward(&flags, RewardConfig::default())?;
            let bind = bind.or_else(|| file.serve.bind.clone()).unwrap_or_else(|| "127.0.0.1:8080".into());
            let addr = bind.parse().map_err(|_| usage(format!("invalid bind address {bind:?}")))?;
            let max_batch = max_batch.or(file.serve.max_batch).unwrap_or(DEFAULT_MAX_BATCH);
            if max_batch == 0 {
                return Err(usage("--max-batch must be positive"));
            }
            print_resolved(
                "serve",
                &ServeResolved { bind: &bind, max_batch, reward: &cfg, lexicon: ontology.lexicon_version() },
            );
            let service = ServiceConfig { max_batch, reward: cfg, ontology, ..ServiceConfig::default() };
            serve(addr, service)
        }
        Command::Report { findings, indication, comparison, technique } => {
            let parsed = ontology.parse_label_list(&findings);
            for d in parsed.diagnostics() {
                eprintln!("warning: {d}");
            }
            print!("{}", render_structured_report(parsed.labels, &ReportMeta { indication, comparison, technique }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Ontology => {
            println!("lexicon version {}", ontology.lexicon_version());
            println!("{:>2}  {:<28} {:>7}  abnormality", "id", "class", "aliases");
            for c in ClassId::all() {
                println!(
                    "{:>2}  {:<28} {:>7}  {}",
                    c.index(),
                    c.name(),
                    ontology.aliases(c).len(),
                    if c.is_abnormality() { "yes" } else { "no" }
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[derive(Serialize)]
struct ScoreResolved<'a> {
    lenient: bool,
    uncertain_policy: UncertainPolicy,
    lexicon: &'a str,
    reward: &'a RewardConfig,
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    subsets: Vec<String>,
    exclude_undefined: bool,
    strict: bool,
    uncertain_policy: UncertainPolicy,
    lexicon: &'a str,
}

impl<'a> EvalResolved<'a> {
    fn new(cfg: &EvalConfig, lexicon: &'a str) -> Self {
        EvalResolved {
            subsets: cfg.subsets.iter().map(|s| s.name.clone()).collect(),
            exclude_undefined: cfg.exclude_undefined,
            strict: cfg.strict,
            uncertain_policy: cfg.uncertain_policy,
            lexicon,
        }
    }
}

#[derive(Serialize)]
struct DemoResolved<'a> {
    task: &'a str,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct ServeResolved<'a> {
    bind: &'a str,
    max_batch: usize,
    lexicon: &'a str,
    reward: &'a RewardConfig,
}

fn load(input: &Path, lenient: bool) -> anyhow::Result<Corpus> {
    let mode = if lenient { ReadMode::Lenient } else { ReadMode::Strict };
    let corpus = read_completions(input, mode)?;
    for w in &corpus.warnings {
        eprintln!("warning: {w}");
    }
    Ok(corpus)
}

fn validate(input: &Path) -> anyhow::Result<ExitCode> {
    let corpus = load(input, true)?;
    let mut bad = corpus.warnings.iter().filter(|w| w.starts_with("skipped")).count();
    let mut valid = 0;
    for (rec, line) in corpus.records.iter().zip(&corpus.lines) {
        let check = validate_format(&rec.text);
        if check.ok {
            valid += 1;
            println!("line {line} {}: ok", rec.id);
        } else {
            bad += 1;
            println!("line {line} {}: invalid: {}", rec.id, check.violations.join("; "));
        }
    }
    println!("{valid} valid, {bad} invalid");
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Resolves gold per record: CSV first, then inline.
fn golds(
    corpus: &Corpus,
    gold: Option<&Path>,
    policy: UncertainPolicy,
) -> anyhow::Result<Option<HashMap<String, LabelSet>>> {
    let Some(path) = gold else { return Ok(None) };
    let table = read_gold_csv(path, policy)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    let unused = table.labels.keys().filter(|k| !corpus.records.iter().any(|r| &r.id == *k)).count();
    if unused > 0 {
        eprintln!("warning: {unused} gold row(s) match no completion");
    }
    Ok(Some(table.labels))
}

fn score(
    input: &Path,
    gold: Option<&Path>,
    out: &Path,
    lenient: bool,
    policy: UncertainPolicy,
    cfg: RewardConfig,
    ontology: Arc<Ontology>,
) -> anyhow::Result<ExitCode> {
    let corpus = load(input, lenient)?;
    let table = golds(&corpus, gold, policy)?;
    let mut items = Vec::with_capacity(corpus.records.len());
    let mut ids = Vec::with_capacity(corpus.records.len());
    for (rec, line) in corpus.records.iter().zip(&corpus.lines) {
        let g = table.as_ref().and_then(|t| t.get(&rec.id).copied()).or(rec.gold);
        match g {
            Some(g) => {
                items.push((rec.text.as_str(), g));
                ids.push(rec.id.clone());
            }
            None if lenient => eprintln!("warning: line {line}: no gold for {:?}, skipped", rec.id),
            None => bail!("line {line}: no gold labels for id {:?}", rec.id),
        }
    }
    let hash = cfg.config_hash();
    let engine = RewardEngine::new(cfg, ontology)?;
    let records: Vec<ScoredRecord> = engine
        .score_batch(&items)
        .into_iter()
        .zip(ids)
        .map(|(b, id)| ScoredRecord::new(id, b, hash.clone()))
        .collect();
    write_scored(&records, out)?;

    let n = records.len().max(1) as f64;
    let mean = |f: fn(&ScoredRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    println!("scored      {}", records.len());
    println!("format ok   {}", records.iter().filter(|r| r.format_ok).count());
    println!("mean reward {:.4}", mean(|r| r.reward));
    println!("mean r_cor  {:.4}", mean(|r| r.r_cor));
    println!("mean r_len  {:.4}", mean(|r| r.r_len));
    println!("config      {hash}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalOutput {
    n_cases: u64,
    skipped: Vec<String>,
    per_class: Vec<EvalClass>,
    macro_f1: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct EvalClass {
    class: &'static str,
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
    f1: f64,
    undefined: bool,
}

fn eval(
    input: &Path,
    gold: Option<&Path>,
    out: Option<&Path>,
    cfg: &EvalConfig,
    ontology: &Ontology,
) -> anyhow::Result<ExitCode> {
    let corpus = load(input, !cfg.strict)?;
    let table = golds(&corpus, gold, cfg.uncertain_policy)?;
    let cases: Vec<EvalCase<'_>> =
        corpus.records.iter().map(|r| EvalCase { id: &r.id, text: &r.text, gold: r.gold }).collect();
    let report = evaluate_corpus(&cases, table.as_ref(), ontology, cfg)?;
    for id in &report.skipped {
        eprintln!("warning: no gold for {id:?}, skipped");
    }
    print!("{}", report.render_table());
    if let Some(out) = out {
        let data = EvalOutput {
            n_cases: report.n_cases,
            skipped: report.skipped.clone(),
            per_class: ClassId::all()
                .map(|c| {
                    let k = report.counts.get(c);
                    let f = report.per_class_f1[&c];
                    EvalClass { class: c.name(), tp: k.tp, fp: k.fp, fn_: k.fn_, tn: k.tn, f1: f.f1, undefined: f.undefined }
                })
                .collect(),
            macro_f1: report.macro_f1.iter().map(|(s, v)| (s.name.clone(), *v)).collect(),
        };
        let mut text = serde_json::to_string_pretty(&data)?;
        text.push('\n');
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn grpo_demo(task: &str, out: &Path, cfg: &TrainConfig, ontology: Arc<Ontology>) -> anyhow::Result<ExitCode> {
    let task = match task {
        "default" => ToyTask::default_demo(),
        "overshort" => ToyTask::overshort_demo(),
        path => ToyTask::from_file(path)?,
    };
    let engine = RewardEngine::new(cfg.reward.clone(), ontology)?;
    let lab = ToyLab::with_engine(task, engine)?;
    let (log, _) = lab.train(cfg)?;
    write_trainlog(&log, out)?;

    let first = &log.records[0];
    let last = log.last();
    println!("{:<12} {:>9} {:>9}", "prompt", "p0", "p_final");
    for (i, id) in log.prompt_ids.iter().enumerate() {
        println!("{:<12} {:>9.4} {:>9.4}", id, first.p_correct[i], last.p_correct[i]);
    }
    println!(
        "seed {} steps {}: mean p_correct {:.4} -> {:.4}, expected reward {:.4} -> {:.4}",
        log.seed,
        last.step,
        mean(&first.p_correct),
        log.final_mean_p_correct(),
        first.mean_reward,
        last.mean_reward
    );
    Ok(ExitCode::SUCCESS)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn serve(addr: std::net::SocketAddr, service: ServiceConfig) -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let state = AppState::new(service)?;
        let listener = cxr_reward_service::bind(addr).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        cxr_reward_service::serve(listener, state, cxr_reward_service::shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
