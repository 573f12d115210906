use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use compsem::datagen::{gen_dataset, SceneSpec, Sizes};
use compsem::kg::{load_dataset, Vocabulary};
use compsem::lexicon::ModelParams;
use compsem::query;
use compsem::training::{
    evaluate, gradcheck_case, gradcheck_example, majority_baseline, rng_stream, streams, train, CurriculumMode,
    EvalReport, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "compsem",
    version,
    about = "Grounded compositional question answering over small knowledge graphs"
)]
struct Cli {
    /// JSON file with defaults for any flag (flags win).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for batch and evaluation parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train / val / short-test / complex-test splits.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Answer one question against one graph.
    Answer(QueryArgs),
    /// Print the highest-scoring parse of one question.
    Parse(QueryArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    short_test_size: Option<usize>,
    #[arg(long)]
    complex_test_size: Option<usize>,
    #[arg(long)]
    min_entities: Option<usize>,
    #[arg(long)]
    max_entities: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Curriculum {
    Templates,
    Length,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Directory for `checkpoint.json` and `metrics.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    reg: Option<f64>,
    #[arg(long, value_enum)]
    curriculum: Option<Curriculum>,
    #[arg(long)]
    phase_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also report the majority-answer baseline fitted on this file.
    #[arg(long)]
    majority_from: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Graph JSON: `{"entities": [...], "relations": {...}}`.
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    question: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 5)]
    entities: usize,
    #[arg(long, default_value_t = 1)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    workers: Option<usize>,
    train: Option<TrainConfig>,
    scene: Option<SceneSpec>,
    sizes: Option<Sizes>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} file {} does not exist", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    // Behave like other filters when piped into `head`.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::panic::set_hook(Box::new(|info| {
        let msg = info
            .payload()
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| info.payload().downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        let at = info
            .location()
            .map(|l| format!(" at {}:{}", l.file(), l.line()))
            .unwrap_or_default();
        eprintln!("internal error: {msg}{at}");
        std::process::exit(2);
    }));
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's own usage errors count as user errors too
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let workers = cli.workers.or(config.workers).unwrap_or(1);
    if workers == 0 {
        bail!("--workers must be positive");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("cannot start worker threads")?;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, &config),
        Cmd::Train(a) => train_cmd(a, &config, workers),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Answer(a) => answer_cmd(a),
        Cmd::Parse(a) => parse_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn gen_data(a: GenDataArgs, config: &ConfigFile) -> Result<()> {
    let mut scene = config.scene.clone().unwrap_or_default();
    scene.min_entities = a.min_entities.unwrap_or(scene.min_entities);
    scene.max_entities = a.max_entities.unwrap_or(scene.max_entities);
    let mut sizes = config.sizes.unwrap_or_default();
    sizes.train = a.train_size.unwrap_or(sizes.train);
    sizes.val = a.val_size.unwrap_or(sizes.val);
    sizes.short_test = a.short_test_size.unwrap_or(sizes.short_test);
    sizes.complex_test = a.complex_test_size.unwrap_or(sizes.complex_test);
    let seed = a.seed.or(config.seed).unwrap_or(0);
    let splits = gen_dataset(&scene, &sizes, &mut rng_stream(seed, streams::DATAGEN))?;
    splits.write(&a.out)?;
    for (name, data) in splits.named() {
        println!("{name}: {} questions", data.len());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, config: &ConfigFile, workers: usize) -> Result<()> {
    must_exist(&a.train, "training")?;
    if let Some(v) = &a.val {
        must_exist(v, "validation")?;
    }
    let mut cfg = config.train.clone().unwrap_or_default();
    cfg.seed = a.seed.or(config.seed).unwrap_or(cfg.seed);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.reg = a.reg.unwrap_or(cfg.reg);
    cfg.phase_epochs = a.phase_epochs.unwrap_or(cfg.phase_epochs);
    cfg.patience = a.patience.unwrap_or(cfg.patience);
    cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
    cfg.workers = workers;
    if let Some(c) = a.curriculum {
        cfg.curriculum = match c {
            Curriculum::Templates => CurriculumMode::Templates,
            Curriculum::Length => CurriculumMode::Length,
        };
    }
    cfg.validate()?;

    let mut vocab = Vocabulary::clevr();
    let data = load_dataset(&a.train, &mut vocab)?;
    vocab.freeze();
    let val = match &a.val {
        Some(v) => load_dataset(v, &mut vocab)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log =
        BufWriter::new(File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?);
    let mut io_err = None;
    let outcome = train(&data, &val, vocab, &cfg, |m| {
        eprintln!(
            "phase {} epoch {}: loss {:.4} val {}",
            m.phase,
            m.epoch,
            m.train_loss,
            m.val_overall.map_or("-".into(), |v| format!("{v:.2}"))
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("cannot write metrics log");
    }
    let ck = a.out.join("checkpoint.json");
    outcome.params.save(&ck)?;
    println!("checkpoint: {}", ck.display());
    println!("metrics: {}", log_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams> {
    must_exist(path, "checkpoint")?;
    Ok(ModelParams::load(path)?)
}

fn print_report(r: &EvalReport) {
    println!("{:<14}{:>9}{:>8}{:>10}", "category", "correct", "total", "accuracy");
    for (name, s) in [
        ("boolean", r.boolean),
        ("entity-set", r.entity),
        ("relation", r.relation),
        ("non-relation", r.non_relation),
        ("overall", r.overall),
    ] {
        let acc = s.accuracy().map_or("-".to_string(), |a| format!("{a:.1}"));
        println!("{name:<14}{:>9}{:>8}{acc:>10}", s.correct, s.total);
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    must_exist(&a.data, "dataset")?;
    let params = load_model(&a.checkpoint)?;
    let mut vocab = params.vocab.clone();
    let data = load_dataset(&a.data, &mut vocab)?;
    let report = evaluate(&params, &data)?;
    let baseline = match &a.majority_from {
        Some(p) => {
            must_exist(p, "baseline")?;
            let mut v = params.vocab.clone();
            Some(majority_baseline(&load_dataset(p, &mut v)?, &data))
        }
        None => None,
    };
    if a.json {
        let mut out = serde_json::to_value(&report)?;
        for key in ["boolean", "entity", "relation", "non_relation", "overall"] {
            let s = &out[key];
            let (c, t) = (s["correct"].as_f64().unwrap_or(0.0), s["total"].as_f64().unwrap_or(0.0));
            out[key]["accuracy"] = if t > 0.0 { json!(100.0 * c / t) } else { json!(null) };
        }
        if let Some(b) = baseline {
            out["majority_baseline"] = json!(b);
        }
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_report(&report);
        if let Some(b) = baseline {
            println!("majority baseline: {b:.1}");
        }
    }
    Ok(())
}

fn query_setup(a: &QueryArgs) -> Result<(ModelParams, compsem::kg::KnowledgeGraph)> {
    must_exist(&a.kg, "graph")?;
    let params = load_model(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.kg).with_context(|| format!("cannot read {}", a.kg.display()))?;
    let kg = query::load_graph(&params, &text)?;
    Ok((params, kg))
}

fn answer_cmd(a: QueryArgs) -> Result<()> {
    let (params, kg) = query_setup(&a)?;
    let out = query::answer_json(&params, &kg, &a.question)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn parse_cmd(a: QueryArgs) -> Result<()> {
    let (params, kg) = query_setup(&a)?;
    let (tree, ascii) = query::parse_json(&params, &kg, &a.question)?;
    println!("{}", serde_json::to_string_pretty(&tree)?);
    println!();
    print!("{ascii}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.tokens == 0 || a.entities == 0 || a.cases == 0 {
        bail!("--tokens, --entities and --cases must be positive");
    }
    let mut worst = 0.0f64;
    for case in 0..a.cases {
        let (params, ex) = gradcheck_case(a.tokens, a.entities, a.seed + case as u64)?;
        let r = gradcheck_example(&params, &ex, 0.3, a.step)?;
        println!(
            "case {case}: \"{}\" {} scalars, max rel. err {:.3e} ({}[{}]: analytic {:.6e}, numeric {:.6e})",
            ex.question(),
            r.checked,
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.analytic,
            r.numeric
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst >= a.tolerance {
        bail!("max relative error {worst:.3e} exceeds {:.0e}", a.tolerance);
    }
    Ok(())
}
