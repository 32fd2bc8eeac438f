use std::collections::HashMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::CommandFactory;
use serde::Deserialize;

use qagen_core::annotation::{
    create_session, AnnotationError, AnnotationStore, AssignmentMode, Candidate, SessionSpec, SessionStats, SystemOutputs,
    PAYLOAD_VERSION,
};
use qagen_core::config::{BackendKind, ConfigError, EmbeddingKind, PipelineConfig};
use qagen_core::corpus::{self, CorpusError, Source};
use qagen_core::experiment::{
    evaluate_predictions, full_matrix, read_predictions, render_report, run_matrix, MatrixResult, MetricReport,
    ReportFormat, RunConfig,
};
use qagen_core::gateway::{ChatBackend, Gateway, GatewayError, HttpBackend, MockBackend};
use qagen_core::metrics::{EmbeddingProvider, FixtureEmbeddings, HashEmbedder, HttpEmbedder};
use qagen_core::prompt::PromptMode;
use qagen_core::synthesis::{read_output, RecordStatus, synthesize_dataset, SynthesisConfig, SynthesisError, RECORD_VERSION};
use qagen_core::train::{emit_hyperparam_grid, emit_training_file, GridSpec, TrainError, TrainSource};
use qagen_core::{jsonl, prompt};

use crate::*;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        })
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config(e: impl Display) -> Failure {
    Failure::Config(e.to_string())
}

fn corpus_failure(e: CorpusError) -> Failure {
    match e {
        CorpusError::SampleSize { .. } => config(e),
        other => runtime(other),
    }
}

fn annotation_failure(e: AnnotationError) -> Failure {
    match e {
        AnnotationError::Invalid(_) | AnnotationError::SampleSize { .. } | AnnotationError::Exists(_) => config(e),
        other => runtime(other),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| Failure::Config(format!("`{key}`: not set (pass {flag} or set it in the config file)")))
}

type Outcome = Result<ExitCode, Failure>;

pub fn run(cli: Cli) -> Outcome {
    if cli.version {
        let info = serde_json::json!({
            "name": "qagen",
            "version": env!("CARGO_PKG_VERSION"),
            "record_version": RECORD_VERSION,
            "payload_version": PAYLOAD_VERSION,
            "templates": [
                prompt::TemplateSet::builtin(prompt::Language::En).version,
                prompt::TemplateSet::builtin(prompt::Language::Ja).version,
            ],
        });
        println!("{info}");
        return Ok(ExitCode::SUCCESS);
    }
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let Some(command) = cli.command else {
        if cli.print_config {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            return Ok(ExitCode::SUCCESS);
        }
        let _ = Cli::command().print_help();
        return Ok(ExitCode::from(EXIT_CONFIG));
    };
    let ctx = Ctx { print_config: cli.print_config, command_line: command_line() };
    match command {
        Command::Ingest(a) => ingest(&ctx, &mut cfg, a),
        Command::Synthesize(a) => synthesize(&ctx, &mut cfg, a),
        Command::EmitTrain(a) => emit_train(&ctx, &mut cfg, a),
        Command::Grid(a) => grid(&ctx, &mut cfg, a),
        Command::Evaluate(a) => evaluate(&ctx, &mut cfg, a),
        Command::Matrix(a) => matrix(&ctx, &mut cfg, a),
        Command::AnnotateCreate(a) => annotate_create(&ctx, &mut cfg, a),
        Command::AnnotateServe(a) => annotate_serve(&ctx, &mut cfg, a),
        Command::Report(a) => report(&ctx, &mut cfg, a),
    }
}

struct Ctx {
    print_config: bool,
    command_line: String,
}

impl Ctx {
    /// Validates the config; `true` means `--print-config` handled it and
    /// the command should stop.
    fn prelude(&self, cfg: &PipelineConfig) -> Result<bool, Failure> {
        cfg.validate()?;
        if self.print_config {
            print!("{}", cfg.to_toml());
            return Ok(true);
        }
        Ok(false)
    }

    fn snapshot(&self, cfg: &PipelineConfig, dir: &Path) -> Result<(), Failure> {
        cfg.write_snapshot(dir, &self.command_line).map_err(runtime)?;
        Ok(())
    }
}

fn command_line() -> String {
    std::env::args()
        .map(|a| if a.is_empty() || a.contains(char::is_whitespace) { format!("'{}'", a.replace('\'', "'\\''")) } else { a })
        .collect::<Vec<_>>()
        .join(" ")
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn ingest(ctx: &Ctx, cfg: &mut PipelineConfig, a: IngestArgs) -> Outcome {
    let (key, flag_target) = match a.source {
        IngestSource::News => ("corpus.news", &mut cfg.corpus.news),
        IngestSource::Wiki => ("corpus.wiki", &mut cfg.corpus.wiki),
        IngestSource::Jsquad => ("corpus.jsquad_train", &mut cfg.corpus.jsquad_train),
        IngestSource::JsquadEval => ("corpus.jsquad_eval", &mut cfg.corpus.jsquad_eval),
    };
    if let Some(p) = a.input {
        *flag_target = Some(p);
    }
    let input = flag_target.clone();
    if let Some(k) = a.k {
        cfg.corpus.sample_k = k;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    if let Some(t) = a.truncate {
        cfg.corpus.truncate_chars = t;
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let input = require(&input, key, "--input")?;
    let raw = std::fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let limit = cfg.corpus.truncate_chars;
    let with_path = |e: CorpusError| runtime(format!("{}: {e}", input.display()));
    let (docs, gold) = match a.source {
        IngestSource::News => (corpus::parse_jsonl_corpus(&raw, Source::News, limit).map_err(with_path)?, None),
        IngestSource::Wiki => (corpus::parse_jsonl_corpus(&raw, Source::Wiki, limit).map_err(with_path)?, None),
        IngestSource::Jsquad | IngestSource::JsquadEval => {
            let (d, g) = corpus::parse_squad_str(&raw, limit).map_err(with_path)?;
            (d, Some(g))
        }
    };
    let (docs, gold) = if a.source == IngestSource::JsquadEval {
        (docs, gold)
    } else {
        let sampled = corpus::sample_contexts(&docs, cfg.corpus.sample_k, cfg.corpus.seed).map_err(corpus_failure)?;
        let keep: std::collections::HashSet<&str> = sampled.iter().map(|d| d.id.as_str()).collect();
        let gold = gold.map(|g| g.into_iter().filter(|q| keep.contains(q.context_id.as_str())).collect::<Vec<_>>());
        (sampled, gold)
    };
    let name = a.source.to_possible_value().expect("no skipped variants").get_name().to_owned();
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join(format!("ingest-{name}")));
    create_dir(&out)?;
    let contexts_path = out.join("contexts.jsonl");
    corpus::write_corpus(&contexts_path, &docs).map_err(runtime)?;
    println!("{} contexts -> {}", docs.len(), contexts_path.display());
    if let Some(gold) = gold {
        let gold_path = out.join("gold.jsonl");
        corpus::write_gold(&gold_path, &gold).map_err(runtime)?;
        println!("{} gold questions -> {}", gold.len(), gold_path.display());
    }
    ctx.snapshot(cfg, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn synthesize(ctx: &Ctx, cfg: &mut PipelineConfig, a: SynthesizeArgs) -> Outcome {
    if let Some(p) = a.contexts {
        cfg.corpus.contexts = Some(p);
    }
    if let Some(n) = a.n {
        cfg.prompt.n = n;
    }
    if let Some(m) = a.mode {
        cfg.prompt.mode = match m {
            ModeArg::ZeroShot => PromptMode::ZeroShot,
            ModeArg::OneShot => PromptMode::OneShot,
        };
    }
    if let Some(p) = a.mock {
        cfg.gateway.backend = BackendKind::Mock;
        cfg.gateway.mock_script = Some(p);
    }
    if let Some(c) = a.concurrency {
        cfg.gateway.concurrency = c;
    }
    if let Some(m) = a.model {
        cfg.generation.model_id = m;
    }
    if let Some(t) = a.temperature {
        cfg.generation.temperature = t;
    }
    if let Some(s) = a.seed {
        cfg.generation.seed = Some(s);
    }
    if let Some(l) = a.label {
        cfg.output.label = Some(l);
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let contexts_path = require(&cfg.corpus.contexts, "corpus.contexts", "--contexts")?;
    let contexts = corpus::read_corpus(contexts_path).map_err(runtime)?;
    let mut sc = SynthesisConfig::new(cfg.prompt.n, cfg.prompt.mode, cfg.templates()?);
    if let Some(example) = cfg.example()? {
        sc.example = Some(example);
    }
    sc.generation = cfg.generation.clone();
    sc.policy = cfg.validation.clone();
    sc.concurrency = cfg.gateway.concurrency;
    sc.prices = cfg.prices.clone();
    sc.label = match &cfg.output.label {
        Some(l) => l.clone(),
        None => match contexts.first() {
            Some(first) if contexts.iter().all(|c| c.source == first.source) => format!("{}-{}", first.source, sc.label),
            _ => sc.label.clone(),
        },
    };
    let backend: Arc<dyn ChatBackend> = match cfg.gateway.backend {
        BackendKind::Mock => {
            let script = require(&cfg.gateway.mock_script, "gateway.mock_script", "--mock")?;
            Arc::new(MockBackend::from_script(script).map_err(|e| config(format!("`gateway.mock_script`: {}: {e}", script.display())))?)
        }
        BackendKind::Http => Arc::new(HttpBackend::from_env(&cfg.gateway.base_url, &cfg.gateway.api_key_env).map_err(|e| match e {
            GatewayError::Config(m) => Failure::Config(format!("`gateway.api_key_env`: {m}")),
            other => runtime(other),
        })?),
    };
    let gateway = Gateway::new(backend, cfg.gateway.gateway_config());
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join(&sc.label));
    create_dir(&out)?;
    ctx.snapshot(cfg, &out)?;
    let out_path = out.join("synthesis.jsonl");
    let outcome = synthesize_dataset(&contexts, &sc, &gateway, &out_path).map_err(|e| match e {
        SynthesisError::Config(_) | SynthesisError::Prompt(_) => config(e),
        other => runtime(other),
    })?;
    let stats = &outcome.manifest.stats;
    let by_status: Vec<String> = stats.by_status.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{} records ({} resumed, {} written; {}), {} pairs accepted -> {}",
        stats.contexts_processed,
        outcome.resumed,
        outcome.written,
        by_status.join(" "),
        stats.pairs_accepted,
        out_path.display()
    );
    if outcome.has_failures() {
        let failed = stats.contexts_processed - stats.by_status.get(&RecordStatus::Ok).copied().unwrap_or(0);
        eprintln!("{failed} contexts did not produce an ok record; see `status` in {}", out_path.display());
        return Ok(ExitCode::from(EXIT_PARTIAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_train(ctx: &Ctx, cfg: &mut PipelineConfig, a: EmitTrainArgs) -> Outcome {
    if let Some(p) = a.contexts {
        cfg.corpus.contexts = Some(p);
    }
    if let Some(p) = &a.pairs.gold {
        cfg.corpus.gold = Some(p.clone());
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let contexts = corpus::read_corpus(require(&cfg.corpus.contexts, "corpus.contexts", "--contexts")?).map_err(runtime)?;
    let templates = cfg.templates()?;
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join("train"));
    create_dir(&out)?;
    let path = out.join("train.jsonl");
    let train_failure = |e: TrainError| match e {
        TrainError::Prompt(_) => config(e),
        other => runtime(other),
    };
    let count = match &a.pairs.synthesis {
        Some(synth) => {
            let (records, manifest) = read_output(synth).map_err(|e| runtime(format!("{}: {e}", synth.display())))?;
            if manifest.is_none() {
                tracing::warn!("{} has no manifest; the synthesis run did not finish", synth.display());
            }
            emit_training_file(TrainSource::Synthesized(&records), &contexts, &templates, &path).map_err(train_failure)?
        }
        None => {
            let gold = corpus::read_gold(require(&cfg.corpus.gold, "corpus.gold", "--gold")?).map_err(runtime)?;
            emit_training_file(TrainSource::Gold(&gold), &contexts, &templates, &path).map_err(train_failure)?
        }
    };
    println!("{count} training examples -> {}", path.display());
    ctx.snapshot(cfg, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn grid(ctx: &Ctx, cfg: &mut PipelineConfig, a: GridArgs) -> Outcome {
    if a.paper_faithful {
        cfg.grid = GridSpec::default();
    } else {
        let g = &mut cfg.grid;
        if let Some(v) = a.batch_size {
            g.batch_size = v;
        }
        if let Some(v) = a.learning_rate {
            g.learning_rate = v;
        }
        if let Some(v) = a.epochs {
            g.epochs = v;
        }
        if let Some(v) = a.lora_r {
            g.lora_r = v;
        }
        if let Some(v) = a.lora_alpha {
            g.lora_alpha = v;
        }
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let configs = emit_hyperparam_grid(&cfg.grid).map_err(config)?;
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join("grid"));
    create_dir(&out)?;
    let path = out.join("grid.jsonl");
    jsonl::write_all(&path, &configs).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    println!("{} configs -> {}", configs.len(), path.display());
    ctx.snapshot(cfg, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn apply_metric_args(cfg: &mut PipelineConfig, m: MetricArgs) {
    if let Some(t) = m.tokenizer {
        cfg.metrics.bleu_tokenizer = t;
    }
    if let Some(s) = m.smoothing {
        cfg.metrics.bleu_smoothing = s;
    }
    if let Some(e) = m.embeddings {
        cfg.metrics.embeddings.provider = match e {
            EmbeddingArg::Hash => EmbeddingKind::Hash,
            EmbeddingArg::Fixture => EmbeddingKind::Fixture,
            EmbeddingArg::Http => EmbeddingKind::Http,
        };
    }
    if let Some(p) = m.embeddings_fixture {
        cfg.metrics.embeddings.fixture = Some(p);
    }
    if let Some(g) = m.gold {
        cfg.corpus.gold = Some(g);
    }
}

fn embedding_provider(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    let e = &cfg.metrics.embeddings;
    Ok(match e.provider {
        EmbeddingKind::Hash => Box::new(HashEmbedder::new(e.dim)),
        EmbeddingKind::Fixture => {
            let path = require(&e.fixture, "metrics.embeddings.fixture", "--embeddings-fixture")?;
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "fixture".into());
            Box::new(FixtureEmbeddings::load(path, &label).map_err(runtime)?)
        }
        EmbeddingKind::Http => {
            let url = e.url.as_deref().expect("validated");
            let layer = e.layer.expect("validated");
            Box::new(HttpEmbedder::new(url, e.model.as_deref().unwrap_or("bert"), layer, e.api_key_env.as_deref()).map_err(config)?)
        }
    })
}

fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<(), Failure> {
    for (format, ext) in [(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv"), (ReportFormat::Markdown, "md")] {
        let path = dir.join(format!("report.{ext}"));
        std::fs::write(&path, render_report(reports, format)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, cfg: &mut PipelineConfig, a: EvaluateArgs) -> Outcome {
    apply_metric_args(cfg, a.metrics);
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let label = match a.run {
        Some(l) => l,
        None => a.predictions.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let matrix = full_matrix();
    let run: &RunConfig = matrix.iter().find(|r| r.label == label).ok_or_else(|| {
        let known: Vec<&str> = matrix.iter().map(|r| r.label.as_str()).collect();
        Failure::Config(format!("unknown run `{label}` (expected one of {})", known.join(", ")))
    })?;
    let gold = corpus::read_gold(require(&cfg.corpus.gold, "corpus.gold", "--gold")?).map_err(runtime)?;
    let preds = read_predictions(&a.predictions).map_err(|e| runtime(format!("{}: {e}", a.predictions.display())))?;
    let provider = embedding_provider(cfg)?;
    let report = evaluate_predictions(run, &gold, &preds, cfg.metrics.tokenizer()?, cfg.metrics.smoothing()?, provider.as_ref())
        .map_err(runtime)?;
    if !report.unmatched_ids.is_empty() || !report.duplicate_ids.is_empty() || report.missing_predictions > 0 {
        tracing::warn!(
            unmatched = report.unmatched_ids.len(),
            duplicates = report.duplicate_ids.len(),
            missing = report.missing_predictions,
            "predictions do not line up with the gold set exactly"
        );
    }
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join(format!("eval-{label}")));
    create_dir(&out)?;
    let reports = [report];
    write_reports(&out, &reports)?;
    print!("{}", render_report(&reports, ReportFormat::Markdown));
    ctx.snapshot(cfg, &out)?;
    Ok(ExitCode::SUCCESS)
}

fn matrix(ctx: &Ctx, cfg: &mut PipelineConfig, a: MatrixArgs) -> Outcome {
    apply_metric_args(cfg, a.metrics);
    if let Some(d) = a.predictions_dir {
        cfg.metrics.predictions_dir = Some(d);
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let dir = require(&cfg.metrics.predictions_dir, "metrics.predictions_dir", "--predictions-dir")?;
    let gold = corpus::read_gold(require(&cfg.corpus.gold, "corpus.gold", "--gold")?).map_err(runtime)?;
    let provider = embedding_provider(cfg)?;
    let result = run_matrix(&full_matrix(), &gold, dir, cfg.metrics.tokenizer()?, cfg.metrics.smoothing()?, provider.as_ref());
    let out = a.out.unwrap_or_else(|| cfg.output.dir.join("matrix"));
    create_dir(&out)?;
    write_reports(&out, &result.reports)?;
    let skipped_path = out.join("skipped.json");
    let body = serde_json::to_string_pretty(&result.skipped).expect("serializable") + "\n";
    std::fs::write(&skipped_path, body).map_err(|e| runtime(format!("{}: {e}", skipped_path.display())))?;
    print!("{}", render_report(&result.reports, ReportFormat::Markdown));
    ctx.snapshot(cfg, &out)?;
    if !result.skipped.is_empty() {
        for s in &result.skipped {
            eprintln!("skipped {}: {}", s.run, s.reason);
        }
        return Ok(ExitCode::from(EXIT_PARTIAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn annotate_create(ctx: &Ctx, cfg: &mut PipelineConfig, a: AnnotateCreateArgs) -> Outcome {
    if let Some(g) = a.gold {
        cfg.corpus.gold = Some(g);
    }
    if let Some(c) = a.contexts {
        cfg.corpus.contexts = Some(c);
    }
    if let Some(j) = a.judges {
        cfg.annotation.judges = j;
    }
    if let Some(k) = a.sample_size {
        cfg.annotation.sample_size = k;
    }
    if let Some(s) = a.seed {
        cfg.annotation.seed = s;
    }
    if let Some(d) = a.dir {
        cfg.annotation.dir = d;
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let gold = corpus::read_gold(require(&cfg.corpus.gold, "corpus.gold", "--gold")?).map_err(runtime)?;
    let contexts = corpus::read_corpus(require(&cfg.corpus.contexts, "corpus.contexts", "--contexts")?).map_err(runtime)?;
    let context_text: HashMap<&str, &str> = contexts.iter().map(|c| (c.id.as_str(), c.text.as_str())).collect();
    let mut systems = Vec::new();
    for spec in &a.systems {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--system `{spec}`: expected NAME=PREDICTIONS.jsonl")))?;
        let path = Path::new(path);
        let preds = read_predictions(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let answers: HashMap<&str, &str> = preds.iter().map(|p| (p.question_id.as_str(), p.answer.as_str())).collect();
        let mut candidates = Vec::with_capacity(gold.len());
        for q in &gold {
            let answer = answers
                .get(q.id.as_str())
                .ok_or_else(|| runtime(format!("system `{name}` has no prediction for question `{}`", q.id)))?;
            let text = context_text
                .get(q.context_id.as_str())
                .ok_or_else(|| runtime(format!("question `{}` refers to unknown context `{}`", q.id, q.context_id)))?;
            candidates.push(Candidate {
                question_id: q.id.clone(),
                question: q.question.clone(),
                context_text: text.to_string(),
                answer: answer.to_string(),
            });
        }
        systems.push(SystemOutputs { system: name.to_owned(), candidates });
    }
    let spec = SessionSpec {
        session_id: a.session_id,
        judges: cfg.annotation.judges.clone(),
        sample_size: cfg.annotation.sample_size,
        sample_seed: cfg.annotation.seed,
        mode: match a.mode {
            AssignArg::Partitioned => AssignmentMode::Partitioned,
            AssignArg::Overlap => AssignmentMode::Overlap,
        },
    };
    let session = create_session(&systems, &spec, chrono::Utc::now()).map_err(annotation_failure)?;
    let store = AnnotationStore::open(&cfg.annotation.dir).map_err(runtime)?;
    let summary = serde_json::json!({
        "version": PAYLOAD_VERSION,
        "session_id": session.session_id,
        "total_items": session.items.len(),
        "judges": session.judges,
    });
    store.insert(session).map_err(annotation_failure)?;
    println!("{summary}");
    ctx.snapshot(cfg, &cfg.annotation.dir)?;
    Ok(ExitCode::SUCCESS)
}

fn annotate_serve(ctx: &Ctx, cfg: &mut PipelineConfig, a: AnnotateServeArgs) -> Outcome {
    if let Some(b) = a.bind {
        cfg.annotation.bind = b;
    }
    if let Some(d) = a.dir {
        cfg.annotation.dir = d;
    }
    if let Some(o) = a.cors_origin {
        cfg.annotation.cors_origin = Some(o);
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let token = match &cfg.annotation.token_env {
        Some(var) => Some(std::env::var(var).ok().filter(|t| !t.is_empty()).ok_or_else(|| {
            Failure::Config(format!("`annotation.token_env`: environment variable {var} is not set"))
        })?),
        None => None,
    };
    let store = Arc::new(AnnotationStore::open(&cfg.annotation.dir).map_err(runtime)?);
    tracing::info!(sessions = store.session_ids().len(), dir = %cfg.annotation.dir.display(), "annotation store opened");
    ctx.snapshot(cfg, &cfg.annotation.dir)?;
    let options = qagen_annotate::ServiceOptions { token, cors_origin: cfg.annotation.cors_origin.clone() };
    let app = qagen_annotate::router(store, options);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    rt.block_on(async {
        let (listener, addr) = qagen_annotate::bind(&cfg.annotation.bind)
            .await
            .map_err(|e| runtime(format!("cannot bind {}: {e}", cfg.annotation.bind)))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        qagen_annotate::serve(listener, app).await.map_err(runtime)
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReportInput {
    Many(Vec<MetricReport>),
    Matrix(MatrixResult),
    One(Box<MetricReport>),
}

fn render_accuracy(stats: &SessionStats, format: FormatArg) -> String {
    let mut rows: Vec<(String, u64, u64, String)> = stats
        .by_system
        .iter()
        .map(|(s, a)| (s.clone(), a.total, a.correct, a.to_string()))
        .collect();
    let all = stats.accuracy.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
    rows.push(("all".into(), stats.resolved as u64, stats.resolved_correct as u64, all));
    match format {
        FormatArg::Json => serde_json::to_string_pretty(stats).expect("serializable") + "\n",
        FormatArg::Csv => {
            let mut out = String::from("system,resolved,correct,accuracy\n");
            for (s, t, c, a) in rows {
                out.push_str(&format!("{s},{t},{c},{a}\n"));
            }
            out
        }
        FormatArg::Markdown => {
            let mut out = String::from("| system | resolved | correct | accuracy (%) |\n|---|---:|---:|---:|\n");
            for (s, t, c, a) in rows {
                out.push_str(&format!("| {s} | {t} | {c} | {a} |\n"));
            }
            out.push_str(&format!("\n{} of {} items unresolved.\n", stats.unresolved, stats.total_items));
            out
        }
    }
}

fn report(ctx: &Ctx, cfg: &mut PipelineConfig, a: ReportArgs) -> Outcome {
    if let Some(d) = a.dir {
        cfg.annotation.dir = d;
    }
    if ctx.prelude(cfg)? {
        return Ok(ExitCode::SUCCESS);
    }
    let text = match (&a.source.input, &a.source.session) {
        (Some(input), _) => {
            let raw = std::fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
            let reports = match serde_json::from_str::<ReportInput>(&raw)
                .map_err(|e| runtime(format!("{}: not a metric report: {e}", input.display())))?
            {
                ReportInput::Many(r) => r,
                ReportInput::Matrix(m) => m.reports,
                ReportInput::One(r) => vec![*r],
            };
            let format = match a.format {
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            render_report(&reports, format)
        }
        (None, Some(session)) => {
            let store = AnnotationStore::open_read_only(&cfg.annotation.dir).map_err(runtime)?;
            let stats = store.session_stats(session).map_err(|e| match e {
                AnnotationError::UnknownSession(_) => config(e),
                other => runtime(other),
            })?;
            render_accuracy(&stats, a.format)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            ctx.snapshot(cfg, dir)?;
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
