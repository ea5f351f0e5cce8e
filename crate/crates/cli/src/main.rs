//! Command-line pipelines: synthetic data generation, two-stage training,
//! embedding export, probing, ablation, and metric evaluation.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime/numeric error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use isense_core::corpus::{
    self, gen_style_corpus, load_labeled, load_pairs, load_triplets, write_labeled, write_pairs,
    write_triplets, LabeledSentence, Style,
};
use isense_core::encoder::{self, load_checkpoint, Model};
use isense_core::eval::{self, EvalReport};
use isense_core::interpret::{self, read_probe_csv, write_ablation_report, write_probe_csv};
use isense_core::pooling::{self, PoolingSpec};
use isense_core::training::{self, LossKind, TrainError};

mod config;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "isense", version, about = "Multi-sense interpretable sentence encoder")]
struct Cli {
    /// JSON run configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (wins over the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic style corpus (triplets, labeled, pairs)
    GenData {
        /// Comma-separated styles: uppercase, emoji, misspell, contraction
        #[arg(long, value_delimiter = ',')]
        styles: Vec<String>,
        /// Sentences per style and polarity
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Stage 0: masked-language-model pretraining
    Pretrain {
        /// Directory with the generated corpus files
        #[arg(long)]
        data: PathBuf,
        /// Continue from <out>/best.iskp if present
        #[arg(long)]
        resume: bool,
    },
    /// Stage 1: contrastive fine-tuning on triplets
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint (omit with --from-scratch)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
        /// Pooling variant: v1, v2, v3
        #[arg(long)]
        pooling: Option<String>,
        /// Sense-blend temperature (v3 only)
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        resume: bool,
    },
    /// Encode sentences (one per input line) to embeddings.jsonl
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pooling: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        /// Per-sense gain overrides, repeatable: --sense-gain 1=0
        #[arg(long = "sense-gain")]
        sense_gain: Vec<String>,
        /// Also export per-sense mean components
        #[arg(long)]
        decompose: bool,
    },
    /// Probing activations per (style, sense) to probe_matrix.csv
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
    },
    /// Sense-ablation study to ablation_report.json
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        /// Reuse a previously written probe matrix
        #[arg(long = "probe-matrix")]
        probe_matrix: Option<PathBuf>,
    },
    /// Style metrics (stel, soc, auc) to eval_report.json
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Optional per-class CSV path
        #[arg(long = "per-class-csv")]
        per_class_csv: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn eval_threads() -> usize {
    std::env::var("ISENSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

fn parse_pooling(
    pooling: &Option<String>,
    tau: Option<f64>,
) -> Result<Option<PoolingSpec>, CliError> {
    let Some(name) = pooling else {
        if tau.is_some() {
            return Err(CliError::Usage("--tau requires --pooling v3".into()));
        }
        return Ok(None);
    };
    let spec = match name.as_str() {
        "v1" => PoolingSpec::v1(),
        "v2" => PoolingSpec::v2(),
        "v3" => {
            let tau = tau.ok_or_else(|| CliError::Usage("--pooling v3 requires --tau".into()))?;
            PoolingSpec::v3(tau)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown pooling '{other}' (valid: v1, v2, v3)"
            )))
        }
    };
    if name != "v3" && tau.is_some() {
        return Err(CliError::Usage("--tau is only valid with --pooling v3".into()));
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Some(spec))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { styles, n } => cmd_gen_data(&cfg, cli.seed, &cli.out, &styles, n),
        Command::Pretrain { data, resume } => {
            let cfg = cfg.with_overrides(cli.seed, None);
            cmd_pretrain(&cfg, &data, &cli.out, resume)
        }
        Command::Finetune { data, checkpoint, from_scratch, pooling, tau, resume } => {
            let flag_pooling = parse_pooling(&pooling, tau)?;
            let cfg = cfg.with_overrides(cli.seed, flag_pooling);
            cmd_finetune(&cfg, &data, checkpoint.as_deref(), from_scratch, &cli.out, resume)
        }
        Command::Encode { checkpoint, input, pooling, tau, sense_gain, decompose } => {
            let flag_pooling = parse_pooling(&pooling, tau)?;
            cmd_encode(&checkpoint, &input, flag_pooling, &sense_gain, decompose, &cli.out)
        }
        Command::Probe { checkpoint, labeled } => cmd_probe(&cfg, &checkpoint, &labeled, &cli.out),
        Command::Ablate { checkpoint, labeled, probe_matrix } => {
            cmd_ablate(&cfg, &checkpoint, &labeled, probe_matrix.as_deref(), &cli.out)
        }
        Command::Eval { checkpoint, labeled, pairs, per_class_csv } => cmd_eval(
            &cfg,
            &checkpoint,
            labeled.as_deref(),
            pairs.as_deref(),
            per_class_csv.as_deref(),
            &cli.out,
        ),
    }
}

// ── gen-data ────────────────────────────────────────────────────────────

fn cmd_gen_data(
    cfg: &RunConfig,
    seed_flag: Option<u64>,
    out: &Path,
    style_names: &[String],
    n: usize,
) -> Result<(), CliError> {
    let styles: Vec<Style> = if style_names.is_empty() {
        Style::ALL.to_vec()
    } else {
        style_names
            .iter()
            .map(|s| s.parse::<Style>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let seed = seed_flag.or(cfg.seed).unwrap_or(42);
    let corpus =
        gen_style_corpus(n, &styles, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    write_triplets(&corpus.triplets, &out.join("triplets.jsonl")).map_err(runtime)?;
    write_labeled(&corpus.labeled, &out.join("labeled.jsonl")).map_err(runtime)?;
    write_pairs(&corpus.pairs, &out.join("pairs.jsonl")).map_err(runtime)?;
    println!(
        "wrote {} triplets, {} labeled, {} pairs to {}",
        corpus.triplets.len(),
        corpus.labeled.len(),
        corpus.pairs.len(),
        out.display()
    );
    Ok(())
}

// ── training commands ───────────────────────────────────────────────────

/// Every distinct text found in the data directory, first-appearance order.
fn corpus_texts(data: &Path) -> Result<Vec<String>, CliError> {
    let mut seen = std::collections::HashSet::new();
    let mut texts = Vec::new();
    let mut push = |t: &str| {
        if seen.insert(t.to_string()) {
            texts.push(t.to_string());
        }
    };
    let triplet_path = data.join("triplets.jsonl");
    if triplet_path.exists() {
        for t in load_triplets(&triplet_path).map_err(runtime)? {
            push(&t.anchor);
            push(&t.positive);
            push(&t.negative);
        }
    }
    let labeled_path = data.join("labeled.jsonl");
    if labeled_path.exists() {
        for l in load_labeled(&labeled_path).map_err(runtime)? {
            push(&l.text);
        }
    }
    let pairs_path = data.join("pairs.jsonl");
    if pairs_path.exists() {
        for p in load_pairs(&pairs_path).map_err(runtime)? {
            push(&p.a);
            push(&p.b);
        }
    }
    if texts.is_empty() {
        return Err(CliError::Usage(format!("no corpus files under {}", data.display())));
    }
    Ok(texts)
}

fn fresh_model(cfg: &RunConfig, texts: &[String]) -> Result<Model, CliError> {
    let vocab = corpus::Vocab::build(texts, cfg.model.vocab_size)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Model::new(cfg.model.to_model_config(), vocab, cfg.effective_seed())
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Resume support: load <out>/best.iskp and return how many epochs it has
/// already consumed.
fn maybe_resume(out: &Path, resume: bool) -> Result<Option<(Model, usize)>, CliError> {
    if !resume {
        return Ok(None);
    }
    let path = out.join("best.iskp");
    if !path.exists() {
        return Ok(None);
    }
    let (model, meta) = load_checkpoint(&path).map_err(runtime)?;
    Ok(Some((model, meta.epoch.map_or(0, |e| e + 1))))
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(msg) => CliError::Usage(msg),
        other => CliError::Runtime(other.to_string()),
    }
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<(), CliError> {
    let texts = corpus_texts(data)?;
    let mut tc = cfg.train_config();
    tc.loss = LossKind::Mlm;
    let (mut model, done) = match maybe_resume(out, resume)? {
        Some((m, done)) => (m, done),
        None => (fresh_model(cfg, &texts)?, 0),
    };
    if done >= tc.max_epochs {
        println!("training already complete ({done} epochs recorded)");
        return Ok(());
    }
    tc.max_epochs -= done;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let report = training::train_mlm(&mut model, &texts, &tc, Some(out)).map_err(map_train_err)?;
    training::write_train_report(&report, &out.join("train_report.json")).map_err(runtime)?;
    println!(
        "pretrain: best epoch {} (val {:.4}), stopped by {:?}, {:.1}s",
        report.best_epoch,
        report.val_losses[report.best_epoch],
        report.stop_reason,
        report.wall_time_secs
    );
    Ok(())
}

fn cmd_finetune(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    from_scratch: bool,
    out: &Path,
    resume: bool,
) -> Result<(), CliError> {
    let triplet_path = data.join("triplets.jsonl");
    if !triplet_path.exists() {
        return Err(CliError::Usage(format!("missing {}", triplet_path.display())));
    }
    let triplets = load_triplets(&triplet_path).map_err(runtime)?;
    let mut tc = cfg.train_config();
    if tc.loss == LossKind::Mlm {
        tc.loss = LossKind::InfoNce;
    }
    let pooling = cfg.pooling.clone().unwrap_or_else(PoolingSpec::v1);
    pooling.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let (mut model, done) = match maybe_resume(out, resume)? {
        Some((m, done)) => (m, done),
        None if from_scratch => {
            let texts = corpus_texts(data)?;
            (fresh_model(cfg, &texts)?, 0)
        }
        None => {
            let path = checkpoint.ok_or_else(|| {
                CliError::Usage("finetune needs --checkpoint or --from-scratch".into())
            })?;
            if !path.exists() {
                return Err(CliError::Usage(format!("missing checkpoint {}", path.display())));
            }
            let (m, _) = load_checkpoint(path).map_err(runtime)?;
            (m, 0)
        }
    };
    if done >= tc.max_epochs {
        println!("training already complete ({done} epochs recorded)");
        return Ok(());
    }
    tc.max_epochs -= done;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let report = training::train_contrastive(&mut model, &triplets, &tc, &pooling, Some(out))
        .map_err(map_train_err)?;
    training::write_train_report(&report, &out.join("train_report.json")).map_err(runtime)?;
    println!(
        "finetune({:?}, {}{}): best epoch {} (val {:.4}), stopped by {:?}, {:.1}s",
        tc.loss,
        pooling.variant,
        pooling.tau.map_or(String::new(), |t| format!(" tau={t}")),
        report.best_epoch,
        report.val_losses[report.best_epoch],
        report.stop_reason,
        report.wall_time_secs
    );
    Ok(())
}

// ── encode ──────────────────────────────────────────────────────────────

fn parse_gains(flags: &[String], k: usize) -> Result<Option<Vec<f64>>, CliError> {
    if flags.is_empty() {
        return Ok(None);
    }
    let mut gains = vec![1.0; k];
    for flag in flags {
        let (idx, value) = flag.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("bad --sense-gain '{flag}' (expected INDEX=GAIN)"))
        })?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad sense index in '{flag}'")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad gain value in '{flag}'")))?;
        if idx >= k {
            return Err(CliError::Usage(format!(
                "sense index {idx} out of range (model has k={k})"
            )));
        }
        gains[idx] = value;
    }
    Ok(Some(gains))
}

fn load_model(path: &Path) -> Result<(Model, Option<PoolingSpec>), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing checkpoint {}", path.display())));
    }
    let (model, meta) = load_checkpoint(path).map_err(runtime)?;
    Ok((model, meta.pooling))
}

#[derive(Serialize)]
struct PoolingOut {
    variant: String,
    tau: Option<f64>,
    pi: Option<Vec<f64>>,
    l_star: Option<usize>,
}

#[derive(Serialize)]
struct EncodeLine<'a> {
    text: &'a str,
    embedding: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    senses: Option<Vec<Vec<f64>>>,
    pooling: PoolingOut,
}

fn cmd_encode(
    checkpoint: &Path,
    input: &Path,
    flag_pooling: Option<PoolingSpec>,
    gain_flags: &[String],
    decompose: bool,
    out: &Path,
) -> Result<(), CliError> {
    let (model, ckpt_pooling) = load_model(checkpoint)?;
    let spec = flag_pooling.or(ckpt_pooling).unwrap_or_else(PoolingSpec::v1);
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let gains = parse_gains(gain_flags, model.cfg.k)?;
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", input.display())))?;

    std::fs::create_dir_all(out).map_err(runtime)?;
    let out_path = out.join("embeddings.jsonl");
    let file = std::fs::File::create(&out_path).map_err(runtime)?;
    let mut w = std::io::BufWriter::new(file);
    let gains_ref = gains.as_deref();
    for (i, line) in text.lines().enumerate() {
        let ids = model.vocab.encode(line);
        if ids.is_empty() {
            return Err(CliError::Runtime(format!("input line {} is empty", i + 1)));
        }
        let mut ids = ids;
        ids.truncate(model.cfg.max_len);
        let default_gains = vec![1.0; model.cfg.k];
        let g = gains_ref.unwrap_or(&default_gains);
        let comp = encoder::composition(&model, &ids, g).map_err(runtime)?;
        let mut emb = pooling::pool(&comp, &spec).map_err(runtime)?;
        emb.meta.gains = g.to_vec();
        let senses = if decompose {
            Some(pooling::sense_means(&comp).map_err(runtime)?)
        } else {
            None
        };
        let record = EncodeLine {
            text: line,
            embedding: emb.s,
            senses,
            pooling: PoolingOut {
                variant: emb.meta.variant.to_string(),
                tau: emb.meta.tau,
                pi: emb.meta.pi,
                l_star: emb.meta.l_star,
            },
        };
        let json = serde_json::to_string(&record).map_err(runtime)?;
        w.write_all(json.as_bytes()).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

// ── probe / ablate / eval ───────────────────────────────────────────────

fn load_labeled_file(path: &Path) -> Result<Vec<LabeledSentence>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing labeled file {}", path.display())));
    }
    load_labeled(path).map_err(runtime)
}

fn resolve_pooling(cfg: &RunConfig, ckpt: Option<PoolingSpec>) -> PoolingSpec {
    cfg.pooling.clone().or(ckpt).unwrap_or_else(PoolingSpec::v1)
}

fn cmd_probe(
    cfg: &RunConfig,
    checkpoint: &Path,
    labeled: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (model, ckpt_pooling) = load_model(checkpoint)?;
    let spec = resolve_pooling(cfg, ckpt_pooling);
    let labeled = load_labeled_file(labeled)?;
    let matrix = interpret::probe_activations(&model, &labeled, &spec, eval_threads())
        .map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let path = out.join("probe_matrix.csv");
    write_probe_csv(&matrix, &path).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    checkpoint: &Path,
    labeled: &Path,
    probe_matrix: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let (model, ckpt_pooling) = load_model(checkpoint)?;
    let spec = resolve_pooling(cfg, ckpt_pooling);
    let labeled = load_labeled_file(labeled)?;
    let precomputed = match probe_matrix {
        Some(p) => Some(read_probe_csv(p).map_err(runtime)?),
        None => None,
    };
    let report = interpret::ablation_study(
        &model,
        &labeled,
        &spec,
        eval_threads(),
        precomputed.as_ref(),
    )
    .map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let path = out.join("ablation_report.json");
    write_ablation_report(&report, &path).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    labeled: Option<&Path>,
    pairs: Option<&Path>,
    per_class_csv: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if labeled.is_none() && pairs.is_none() {
        return Err(CliError::Usage("eval needs --labeled and/or --pairs".into()));
    }
    let (model, ckpt_pooling) = load_model(checkpoint)?;
    let spec = resolve_pooling(cfg, ckpt_pooling);
    let threads = eval_threads();

    let mut report = EvalReport::new();
    report.meta.insert("pooling".into(), spec.variant.to_string());
    if let Some(tau) = spec.tau {
        report.meta.insert("tau".into(), tau.to_string());
    }
    report.meta.insert("k".into(), model.cfg.k.to_string());
    report.meta.insert("d".into(), model.cfg.d.to_string());
    report.meta.insert("n_layers".into(), model.cfg.n_layers.to_string());

    if let Some(labeled_path) = labeled {
        let labeled = load_labeled_file(labeled_path)?;
        let texts: Vec<String> = labeled.iter().map(|l| l.text.clone()).collect();
        let embs = pooling::encode_batch(&model, &texts, &spec, None, threads).map_err(runtime)?;
        let embeddings: Vec<Vec<f64>> = embs.into_iter().map(|e| e.s).collect();
        let labels: Vec<String> = labeled.iter().map(|l| l.style.clone()).collect();
        let classes: std::collections::BTreeSet<&String> = labels.iter().collect();
        let (stel, per_class) =
            eval::stel_accuracy_detailed(&embeddings, &labels, classes.len()).map_err(runtime)?;
        let polarities: Vec<corpus::Polarity> = labeled.iter().map(|l| l.polarity).collect();
        let soc = eval::soc_accuracy(&embeddings, &labels, &polarities).map_err(runtime)?;
        report.metrics.insert("stel".into(), stel);
        report.metrics.insert("soc".into(), soc);
        report.per_class = per_class;
        report.dataset_sizes.insert("labeled".into(), labeled.len());
        if let Some(csv) = per_class_csv {
            eval::write_per_class_csv(&report.per_class, csv).map_err(runtime)?;
        }
    }

    if let Some(pairs_path) = pairs {
        if !pairs_path.exists() {
            return Err(CliError::Usage(format!("missing pairs file {}", pairs_path.display())));
        }
        let pairs = load_pairs(pairs_path).map_err(runtime)?;
        let mut texts = Vec::with_capacity(pairs.len() * 2);
        for p in &pairs {
            texts.push(p.a.clone());
            texts.push(p.b.clone());
        }
        let embs = pooling::encode_batch(&model, &texts, &spec, None, threads).map_err(runtime)?;
        let scored: Vec<(f64, bool)> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let a = &embs[2 * i].s;
                let b = &embs[2 * i + 1].s;
                isense_core::numerics::cosine_similarity(a, b)
                    .map(|c| (c, p.same))
                    .map_err(runtime)
            })
            .collect::<Result<_, _>>()?;
        let auc = eval::auc(&scored).map_err(runtime)?;
        report.metrics.insert("auc".into(), auc);
        report.dataset_sizes.insert("pairs".into(), pairs.len());
    }

    std::fs::create_dir_all(out).map_err(runtime)?;
    let path = out.join("eval_report.json");
    eval::write_report(&report, &path).map_err(runtime)?;
    let summary: BTreeMap<&String, &f64> = report.metrics.iter().collect();
    println!("wrote {} ({summary:?})", path.display());
    Ok(())
}
