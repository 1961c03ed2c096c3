mod config;

use std::collections::BTreeSet;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use groov_core::corpus::{build_ov_split, load_corpus, read_label_list};
use groov_core::decoding::{load_predictions, predict_all, save_predictions, PredictConfig, RankingMode};
use groov_core::exec::{with_jobs, Exec};
use groov_core::metrics::{
    compute_propensities, evaluate, load_embeddings, EmbeddingProvider, EvalConfig, MatchRule, Matcher, NlsrOptions,
};
use groov_core::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig, OptimizerState};
use groov_core::review::build_review_items;
use groov_core::training::{train, LossKind, TrainConfig};

/// Generative open-vocabulary multi-label tagging.
#[derive(Parser)]
#[command(name = "groov", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build an open-vocabulary split by moving every instance that carries
    /// one of N sampled labels from train to test.
    SplitOv(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode label predictions for a corpus.
    Predict(PredictArgs),
    /// Score predictions against a test corpus.
    Eval(EvalArgs),
    /// Serve the review API over predictions with novel labels.
    ReviewServe(ServeArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file of defaults for this subcommand's flags.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel loops (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Number of training labels to hold out.
    #[arg(long)]
    n_labels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for train.jsonl, test.jsonl, removed_labels.txt and
    /// seen_labels.txt.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Loss: ce (cross-entropy over a sampled label order) or msm
    /// (multi-softmax).
    #[arg(long, default_value = "msm")]
    loss: LossKind,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    /// Continue from this checkpoint (architecture flags are then ignored).
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
    /// AdamW learning rate.
    #[arg(long, default_value_t = OptimizerState::DEFAULT_LEARNING_RATE)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ModelConfig::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().ffn_dim)]
    ffn_dim: usize,
    /// Input bytes kept per instance (longer texts are truncated).
    #[arg(long, default_value_t = ModelConfig::default().max_input_len)]
    max_input_len: usize,
    /// Longest target sequence, EOS included (longer targets are skipped).
    #[arg(long, default_value_t = ModelConfig::default().max_output_len)]
    max_output_len: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f32,
    /// Also append the per-epoch JSON log to this file.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Corpus to tag (labels, if present, are ignored).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, default_value_t = groov_core::decoding::DEFAULT_BEAM_SIZE)]
    beam: usize,
    /// generation (greedy, emission order) or marginal (beam marginals).
    #[arg(long, default_value = "marginal")]
    ranking: RankingMode,
    /// Divide marginal scores by the total probability of the beams.
    #[arg(long)]
    normalize: bool,
    /// Leave decoded beams out of the output.
    #[arg(long)]
    no_beams: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Training corpus: defines the seen labels and the propensities.
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    k: Vec<usize>,
    /// Comma list of exact, lexical[:DF] (DF default 10), semantic[:T]
    /// (T default 0.94).
    #[arg(long, value_delimiter = ',', default_value = "exact")]
    rules: Vec<MatchRule>,
    /// JSON-lines label embeddings for the semantic rule.
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = groov_core::metrics::DEFAULT_PROPENSITY_A)]
    propensity_a: f64,
    #[arg(long, default_value_t = groov_core::metrics::DEFAULT_PROPENSITY_B)]
    propensity_b: f64,
    /// NLSR without intersecting the pooled predictions with the gold union.
    #[arg(long)]
    nlsr_raw: bool,
    /// NLSR takes each instance's unseen labels in lexicographic order.
    #[arg(long)]
    nlsr_lexicographic: bool,
    /// Report JSON file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Seen labels, one per line.
    #[arg(long, value_name = "FILE")]
    seen: PathBuf,
    /// Append-only review store (created if missing).
    #[arg(long, value_name = "FILE")]
    store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Label embeddings; enables the semantic-match split of the stats.
    #[arg(long, value_name = "FILE")]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = groov_core::metrics::DEFAULT_SEMANTIC_THRESHOLD)]
    threshold: f64,
    /// Directory with the review app's static files.
    #[arg(long, value_name = "DIR")]
    static_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("groov: {}", msg.trim_end());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("groov: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Finds `--config FILE` after the subcommand and splices its arguments in
/// right after the subcommand name.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, Failure> {
    let Some(sub_name) = args.get(1) else { return Ok(args) };
    let mut cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand_mut(sub_name) else { return Ok(args) };
    let mut path = None;
    for (i, a) in args.iter().enumerate().skip(2) {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let extra = config::config_args(Path::new(&path), sub).map_err(Failure::Usage)?;
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn run(args: Vec<String>) -> Result<(), Failure> {
    let args = expand_config(args)?;
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // Help and version; a closed stdout is not worth a panic.
            let _ = write!(std::io::stdout(), "{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::Usage(e.to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Cmd::SplitOv(a) => split_ov(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Predict(a) => predict_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::ReviewServe(a) => serve_cmd(a),
    }
}

fn exec_for(common: &Common) -> Exec {
    if cfg!(feature = "parallel") && common.jobs != 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn pool_size(common: &Common) -> usize {
    if common.jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        common.jobs
    }
}

fn load(path: &Path) -> anyhow::Result<groov_core::corpus::Corpus> {
    let (corpus, stats) = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    if stats.duplicate_labels > 0 {
        eprintln!(
            "groov: {}: dropped {} duplicate labels",
            path.display(),
            stats.duplicate_labels
        );
    }
    Ok(corpus)
}

fn split_ov(a: SplitArgs) -> Result<(), Failure> {
    let train = load(&a.train)?;
    let test = load(&a.test)?;
    let split = build_ov_split(&train, &test, a.n_labels, a.seed).context("building split")?;
    split.write_to_dir(&a.out).context("writing split")?;
    println!(
        "train {} instances, test {} instances, {} labels removed",
        split.train.len(),
        split.test.len(),
        split.removed.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let corpus = load(&a.train)?;
    let (mut model, mut opt) = match &a.init {
        Some(path) => load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let config = ModelConfig {
                embed_dim: a.embed_dim,
                layers: a.layers,
                heads: a.heads,
                ffn_dim: a.ffn_dim,
                max_input_len: a.max_input_len,
                max_output_len: a.max_output_len,
                dropout_rate: a.dropout,
                ..ModelConfig::default()
            };
            config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let model = init_model(config, a.seed).context("initializing model")?;
            let opt = OptimizerState::new(&model);
            (model, opt)
        }
    };
    let config = TrainConfig {
        loss_kind: a.loss,
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        exec: exec_for(&a.common),
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut log_file = match &a.log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut log_error = None;
    let report = with_jobs(pool_size(&a.common), || {
        train(&corpus, &mut model, &mut opt, &config, &mut rng, |entry| {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            println!("{line}");
            if let Some(f) = log_file.as_mut() {
                if let Err(e) = writeln!(f, "{line}") {
                    log_error.get_or_insert(e);
                }
            }
        })
    })
    .context("training")?;
    if let Some(e) = log_error {
        return Err(anyhow::Error::from(e).context("writing training log").into());
    }
    if report.skipped_empty + report.skipped_overlength > 0 {
        eprintln!(
            "groov: skipped {} instances without labels and {} with targets over {} tokens",
            report.skipped_empty, report.skipped_overlength, model.config.max_output_len
        );
    }
    save_checkpoint(&model, &opt, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<(), Failure> {
    if a.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let (model, _) = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let corpus = load(&a.input)?;
    let config = PredictConfig {
        beam_size: a.beam,
        ranking_mode: a.ranking,
        normalize_marginals: a.normalize,
        keep_beams: !a.no_beams,
    };
    let exec = exec_for(&a.common);
    let mut preds = with_jobs(pool_size(&a.common), || predict_all(&model, &corpus.instances, &config, exec))
        .context("decoding")?;
    preds.sort_by(|x, y| x.id.cmp(&y.id));
    save_predictions(&preds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Failure::Usage("--k values must be at least 1".into()));
    }
    let needs_embeddings = a.rules.iter().any(|r| matches!(r, MatchRule::Semantic { .. }));
    if needs_embeddings && a.embeddings.is_none() {
        return Err(Failure::Usage("the semantic rule needs --embeddings".into()));
    }
    let preds = load_predictions(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let test = load(&a.test)?;
    let train = load(&a.train)?;
    let embeddings = match &a.embeddings {
        Some(p) => Some(load_embeddings(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let prop = compute_propensities(&train.label_frequency, train.len(), a.propensity_a, a.propensity_b)
        .context("propensities")?;
    let config = EvalConfig {
        ks: a.k,
        rules: a.rules,
        propensity_a: a.propensity_a,
        propensity_b: a.propensity_b,
        nlsr: NlsrOptions {
            raw: a.nlsr_raw,
            lexicographic: a.nlsr_lexicographic,
        },
    };
    let seen = train.label_set();
    let provider = embeddings.as_ref().map(|e| e as &dyn EmbeddingProvider);
    let exec = exec_for(&a.common);
    let report = with_jobs(pool_size(&a.common), || {
        evaluate(&preds, &test, &seen, &prop, &config, provider, exec)
    })
    .context("evaluating")?;
    print!("{}", report.table());
    for r in &report.rules {
        if r.embedding_misses > 0 {
            eprintln!("groov: {}: {} label pairs lacked embeddings", r.rule, r.embedding_misses);
        }
    }
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).context("serializing report")?;
        std::fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<(), Failure> {
    let ip: std::net::IpAddr = a
        .host
        .parse()
        .map_err(|_| Failure::Usage(format!("invalid --host {:?}", a.host)))?;
    let rule = MatchRule::Semantic { threshold: a.threshold };
    rule.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let preds = load_predictions(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let test = load(&a.test)?;
    let seen: BTreeSet<String> = read_label_list(&a.seen).with_context(|| format!("loading {}", a.seen.display()))?;
    let embeddings = match &a.embeddings {
        Some(p) => Some(load_embeddings(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let matcher = match &embeddings {
        Some(e) => Some(Matcher::new(rule, Some(e)).context("semantic matcher")?),
        None => None,
    };
    let items = build_review_items(&preds, &test, &seen, matcher.as_ref()).context("building review items")?;
    if items.values().flat_map(|i| &i.candidates).any(|c| seen.contains(&c.label)) {
        return Err(anyhow!("internal error: a served candidate is in the seen set").into());
    }
    let candidates: usize = items.values().map(|i| i.candidates.len()).sum();
    let (service, replay) = groov_review::ReviewService::open(items, &a.store)
        .with_context(|| format!("opening store {}", a.store.display()))?;
    if replay.skipped > 0 {
        eprintln!("groov: ignored {} stored reviews for unknown candidates", replay.skipped);
    }
    let addr = SocketAddr::new(ip, a.port);
    let app = groov_review::router(Arc::new(service), a.static_dir);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(pool_size(&a.common).max(1))
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!(
            "serving {candidates} novel candidates on http://{}",
            listener.local_addr().context("local address")?
        );
        groov_review::serve(listener, app).await.context("serving")
    })?;
    Ok(())
}
