//! Subcommand implementations. Each returns the machine-readable summary
//! line that main prints last.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use factsteer::backend::Backend;
use factsteer::bench::embed::{Embedder, HashEmbedder, HttpEmbedder};
use factsteer::bench::{build_benchmark, BenchmarkRecord};
use factsteer::contrast::{
    build_contrast_corpus, ContrastCorpus, ContrastOptions, ContrastiveExample, Label,
    QAInstance, UserRecord,
};
use factsteer::corpus::{read_json, read_jsonl, write_json, write_jsonl};
use factsteer::eval::ablation::{history_length_ablation, AblationOptions, TruncationMode};
use factsteer::eval::entangle::entanglement_analysis;
use factsteer::eval::judge::Judge;
use factsteer::eval::prompts::{Method, PromptBuilder};
use factsteer::eval::score::ScoreReport;
use factsteer::eval::{float_grid, EvalOptions};
use factsteer::locator::{LayerScanReport, PlantedOffset, ScanContinuation, ScanOptions};
use factsteer::prober::{ProberModel, TrainOptions};
use factsteer::sim::{exam_and_score, prefilter_known, run_tutoring, Arm, SimOptions};
use factsteer::steer::{
    build_steering_vector, SteerOptions, SteeringArtifact, Variant, VuMode, ARTIFACT_VERSION,
};

use crate::clients::{parse_client, AnyClient};
use crate::settings::{parse_backend, resolve, resolve_steer_settings, ConfigFile};

pub struct Ctx {
    pub config: ConfigFile,
    pub cache_dir: Option<PathBuf>,
}

impl Ctx {
    fn backend(&self, flag: Option<&str>) -> Result<factsteer::ToyBackend> {
        let spec = flag
            .map(str::to_string)
            .or_else(|| self.config.backend.clone())
            .unwrap_or_else(|| "toy:7".to_string());
        parse_backend(&spec)
    }

    fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir
            .as_deref()
            .or(self.config.cache_dir.as_deref())
    }

    fn max_new_tokens(&self, flag: Option<usize>) -> usize {
        resolve(flag, self.config.max_new_tokens, None, 500)
    }

    fn current_date(&self) -> String {
        self.config
            .current_date
            .clone()
            .unwrap_or_else(|| "2025-01-01".to_string())
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct EmbedderArgs {
    /// `hash` (seeded feature hash) or `env` (HTTP embedding service).
    #[arg(long, default_value = "hash")]
    embedder: String,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
}

impl EmbedderArgs {
    fn build(&self, cache_dir: Option<&Path>) -> Result<Box<dyn Embedder>> {
        match self.embedder.as_str() {
            "hash" => Ok(Box::new(HashEmbedder::new(self.embed_dim, self.embed_seed))),
            "env" => Ok(Box::new(HttpEmbedder::from_env(
                self.embed_dim,
                cache_dir.map(PathBuf::from),
            )?)),
            other => bail!("unknown embedder {other:?}; use `hash` or `env`"),
        }
    }
}

fn load_users(path: &Path) -> Result<Vec<UserRecord>> {
    let users: Vec<UserRecord> = read_jsonl(path)?;
    for user in &users {
        user.validate()?;
    }
    Ok(users)
}

fn load_bench(path: &Path) -> Result<Vec<BenchmarkRecord>> {
    let records: Vec<BenchmarkRecord> = read_jsonl(path)?;
    for record in &records {
        record.validate()?;
    }
    Ok(records)
}

fn load_corpus(path: &Path) -> Result<ContrastCorpus> {
    let examples: Vec<ContrastiveExample> = read_jsonl(path)?;
    for example in &examples {
        example.check_label()?;
    }
    let n_unjudged = examples.iter().filter(|e| e.label == Label::Unjudged).count();
    Ok(ContrastCorpus {
        examples,
        n_unjudged,
    })
}

fn bench_qas(records: &[BenchmarkRecord]) -> Vec<QAInstance> {
    let mut qas = Vec::with_capacity(records.len() * 2);
    for record in records {
        qas.push(record.personalized_qa.clone());
        qas.push(record.factual_qa.clone());
    }
    qas
}

fn parse_method(flag: Option<&str>, config: &ConfigFile) -> Result<Method> {
    let name = flag
        .map(str::to_string)
        .or_else(|| config.method.clone())
        .unwrap_or_else(|| "RAG".to_string());
    Ok(name.parse::<Method>()?)
}

/// Layer from an explicit flag or a scan-layers artifact.
fn resolve_layer(flag: Option<usize>, scan: Option<&Path>, config: &ConfigFile) -> Result<usize> {
    if let Some(layer) = flag.or(config.layer) {
        return Ok(layer);
    }
    if let Some(path) = scan {
        let report: LayerScanReport = read_json(path)?;
        return Ok(report.selected_layer);
    }
    bail!("need --layer or --scan <scan.json> to fix the intervention layer")
}

/// Versioned on-disk prober file.
#[derive(Debug, Serialize, Deserialize)]
struct ProberFile {
    version: u32,
    layer: usize,
    backend_fingerprint: factsteer::BackendFingerprint,
    model: ProberModel,
}

fn score_summary(report: &ScoreReport) -> serde_json::Value {
    json!({
        "p_score": report.p_score,
        "f_score": report.f_score,
        "overall": report.overall,
        "n_personalized": report.n_personalized,
        "n_factual": report.n_factual,
        "n_unjudged": report.n_unjudged,
    })
}

// ---------------------------------------------------------------------------
// make-fixtures
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct MakeFixturesArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    #[arg(long, default_value_t = 60)]
    facts: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

pub fn make_fixtures(_ctx: &Ctx, args: MakeFixturesArgs) -> Result<String> {
    let users = factsteer::synth::synthetic_users(args.users, args.sessions, args.seed);
    let facts = factsteer::synth::synthetic_facts(args.facts, args.seed.wrapping_add(1));
    let users_path = args.out_dir.join("users.jsonl");
    let facts_path = args.out_dir.join("facts.jsonl");
    write_jsonl(&users_path, &users)?;
    write_jsonl(&facts_path, &facts)?;
    Ok(json!({
        "command": "make-fixtures",
        "users": users.len(),
        "facts": facts.len(),
        "users_path": users_path,
        "facts_path": facts_path,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// build-bench
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct BuildBenchArgs {
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    facts: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Per-session retrieval depth.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Candidate pool size retained after hybrid reranking.
    #[arg(long, default_value_t = 100)]
    keep: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

pub fn build_bench(ctx: &Ctx, args: BuildBenchArgs) -> Result<String> {
    let users = load_users(&args.users)?;
    let facts: Vec<QAInstance> = read_jsonl(&args.facts)?;
    let embedder = args.embedder.build(ctx.cache_dir())?;
    let seed = resolve(args.seed, ctx.config.seed, None, 0);
    let (split, manifest) =
        build_benchmark(&users, &facts, embedder.as_ref(), args.k, args.keep, seed)?;

    let train_path = args.out_dir.join("bench_train.jsonl");
    let test_path = args.out_dir.join("bench_test.jsonl");
    let manifest_path = args.out_dir.join("bench_manifest.json");
    write_jsonl(&train_path, &split.train)?;
    write_jsonl(&test_path, &split.test)?;
    write_json(&manifest_path, &manifest)?;
    Ok(json!({
        "command": "build-bench",
        "train_records": split.train.len(),
        "test_records": split.test.len(),
        "excluded_users": split.excluded_users.len(),
        "train_path": train_path,
        "test_path": test_path,
        "manifest_path": manifest_path,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// build-contrast
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct BuildContrastArgs {
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Judge client: `mock:PATH` or `env`.
    #[arg(long)]
    judge_client: String,
    /// Summarizer client for PAG/DPL/LLM-TRSR: `mock:PATH` or `env`.
    #[arg(long)]
    llm_client: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// RAG keeps this many score-ranked sessions (default: all).
    #[arg(long)]
    rag_top_k: Option<usize>,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

pub fn build_contrast(ctx: &Ctx, args: BuildContrastArgs) -> Result<String> {
    let users = load_users(&args.users)?;
    let records = load_bench(&args.bench)?;
    let qas = bench_qas(&records);
    let backend = ctx.backend(args.backend.as_deref())?;
    let method = parse_method(args.method.as_deref(), &ctx.config)?;
    let embedder = args.embedder.build(ctx.cache_dir())?;
    let judge_client = parse_client(&args.judge_client, ctx.cache_dir())?;
    let judge = Judge::new(&judge_client);
    let llm_client: Option<AnyClient> = match &args.llm_client {
        Some(spec) => Some(parse_client(spec, ctx.cache_dir())?),
        None => None,
    };

    let mut builder = PromptBuilder::new(
        method,
        embedder.as_ref(),
        llm_client.as_ref().map(|c| c as &dyn factsteer::client::ChatClient),
    )?;
    builder.rag_top_k = args.rag_top_k;
    builder.current_date = ctx.current_date();

    let opts = ContrastOptions {
        max_new_tokens: ctx.max_new_tokens(args.max_new_tokens),
        ..ContrastOptions::default()
    };
    let corpus = build_contrast_corpus(&users, &qas, &builder, &backend, &judge, &opts)?;
    write_jsonl(&args.out, &corpus.examples)?;

    let count = |label: Label| corpus.examples.iter().filter(|e| e.label == label).count();
    Ok(json!({
        "command": "build-contrast",
        "examples": corpus.examples.len(),
        "factual_degraded": count(Label::FactualDegraded),
        "personalized_beneficial": count(Label::PersonalizedBeneficial),
        "neutral": count(Label::Neutral),
        "unjudged": corpus.n_unjudged,
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// scan-layers
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ScanLayersArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    /// Continuation teacher-forced during the scan: `generated` or `gold`.
    #[arg(long, default_value = "generated")]
    continuation: String,
    /// Inject a synthetic single-block offset (validation fixtures).
    #[arg(long)]
    plant_layer: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    plant_scale: f64,
    #[arg(long, default_value_t = 0)]
    plant_seed: u64,
}

pub fn scan_layers(ctx: &Ctx, args: ScanLayersArgs) -> Result<String> {
    let corpus = load_corpus(&args.corpus)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let continuation = match args.continuation.as_str() {
        "generated" => ScanContinuation::GeneratedWith,
        "gold" => ScanContinuation::Gold,
        other => bail!("unknown continuation {other:?}; use `generated` or `gold`"),
    };
    let opts = ScanOptions {
        continuation,
        plant: args.plant_layer.map(|layer| {
            PlantedOffset::seeded(layer, backend.hidden_dim(), args.plant_scale, args.plant_seed)
        }),
    };
    let report = factsteer::locator::scan_layers(&corpus.examples, &backend, &opts)?;
    write_json(&args.out, &report)?;
    if let Some(csv_path) = &args.csv {
        std::fs::create_dir_all(csv_path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(csv_path, report.csv())?;
    }
    Ok(json!({
        "command": "scan-layers",
        "selected_layer": report.selected_layer,
        "fused_ranking": report.fused_ranking,
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// train-prober
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainProberArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    l2: f64,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train_prober(ctx: &Ctx, args: TrainProberArgs) -> Result<String> {
    let corpus = load_corpus(&args.corpus)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let layer = resolve_layer(args.layer, args.scan.as_deref(), &ctx.config)?;
    let opts = TrainOptions {
        l2_strength: args.l2,
        seed: resolve(args.seed, ctx.config.seed, None, 0),
        layer,
        ..TrainOptions::default()
    };
    let model = factsteer::prober::train_from_corpus(&corpus, &backend, &opts)?;
    let file = ProberFile {
        version: ARTIFACT_VERSION,
        layer,
        backend_fingerprint: backend.fingerprint(),
        model,
    };
    write_json(&args.out, &file)?;
    Ok(json!({
        "command": "train-prober",
        "layer": layer,
        "n_pos": file.model.training_meta.n_pos,
        "n_neg": file.model.training_meta.n_neg,
        "iterations": file.model.training_meta.iterations,
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// build-steer
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct BuildSteerArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    prober: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    scan: Option<PathBuf>,
    /// Steering regime: H, S, or M.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Named hyperparameter preset (see presets.toml).
    #[arg(long)]
    preset: Option<String>,
}

pub fn build_steer(ctx: &Ctx, args: BuildSteerArgs) -> Result<String> {
    let corpus = load_corpus(&args.corpus)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let settings = resolve_steer_settings(
        args.variant,
        args.tau,
        args.gamma,
        args.layer,
        &ctx.config,
        args.preset.as_deref(),
    )?;
    let layer = match settings.layer {
        Some(layer) => layer,
        None => resolve_layer(None, args.scan.as_deref(), &ctx.config)?,
    };

    let prober_file: ProberFile = read_json(&args.prober)?;
    if prober_file.layer != layer {
        bail!(
            "prober was trained at layer {} but the artifact targets layer {layer}",
            prober_file.layer
        );
    }
    let steering = build_steering_vector(&corpus.examples, &backend, layer)?;
    let artifact = SteeringArtifact {
        version: ARTIFACT_VERSION,
        layer,
        variant: settings.variant,
        tau: settings.tau,
        gamma: settings.gamma,
        prober: prober_file.model,
        steering,
        backend_fingerprint: backend.fingerprint(),
    };
    artifact.config()?; // validates tau/gamma ranges
    artifact.check_backend(&backend)?;
    artifact.save(&args.out)?;
    Ok(json!({
        "command": "build-steer",
        "layer": layer,
        "variant": artifact.variant,
        "tau": artifact.tau,
        "gamma": artifact.gamma,
        "n_fact": artifact.steering.n_fact,
        "n_pers": artifact.steering.n_pers,
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// run-eval
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RunEvalArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    judge_client: String,
    #[arg(long)]
    llm_client: Option<String>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    rag_top_k: Option<usize>,
    /// Freeze v_u from the prompt instead of recomputing per step.
    #[arg(long)]
    freeze_vu: bool,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

pub fn run_eval(ctx: &Ctx, args: RunEvalArgs) -> Result<String> {
    let users = load_users(&args.users)?;
    let records = load_bench(&args.bench)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let method = parse_method(args.method.as_deref(), &ctx.config)?;
    let embedder = args.embedder.build(ctx.cache_dir())?;
    let judge_client = parse_client(&args.judge_client, ctx.cache_dir())?;
    let judge = Judge::new(&judge_client);
    let llm_client: Option<AnyClient> = match &args.llm_client {
        Some(spec) => Some(parse_client(spec, ctx.cache_dir())?),
        None => None,
    };
    let mut builder = PromptBuilder::new(
        method,
        embedder.as_ref(),
        llm_client.as_ref().map(|c| c as &dyn factsteer::client::ChatClient),
    )?;
    builder.rag_top_k = args.rag_top_k;
    builder.current_date = ctx.current_date();

    let artifact = match &args.artifact {
        Some(path) => Some(SteeringArtifact::load(path, &backend)?),
        None => None,
    };
    let opts = EvalOptions {
        max_new_tokens: ctx.max_new_tokens(args.max_new_tokens),
        steer: SteerOptions {
            vu_mode: if args.freeze_vu {
                VuMode::Frozen
            } else {
                VuMode::Recompute
            },
            ..SteerOptions::default()
        },
    };
    let run = factsteer::eval::run_eval(
        &records,
        &users,
        &builder,
        &backend,
        &judge,
        artifact.as_ref(),
        &opts,
    )?;
    write_json(&args.out, &run)?;
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("qa_id,kind,correct,p_hat\n");
        for row in &run.report.per_question {
            let p_hat = run
                .rows
                .iter()
                .find(|r| r.qa_id == row.qa_id)
                .and_then(|r| r.p_hat)
                .map(|v| v.to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{},{:?},{},{}\n",
                row.qa_id,
                row.kind,
                row.correct.map(|c| c.to_string()).unwrap_or_default(),
                p_hat
            ));
        }
        std::fs::create_dir_all(csv_path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(csv_path, csv)?;
    }
    let mut summary = json!({
        "command": "run-eval",
        "method": run.method,
        "steered": run.steered,
        "out": args.out,
    });
    summary
        .as_object_mut()
        .unwrap()
        .extend(score_summary(&run.report).as_object().unwrap().clone());
    Ok(summary.to_string())
}

// ---------------------------------------------------------------------------
// ablate-history
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AblateHistoryArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    judge_client: String,
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Comma-separated ratios in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    ratio_grid: String,
    /// Truncate chronologically instead of by retrieval score.
    #[arg(long)]
    chronological: bool,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

pub fn ablate_history(ctx: &Ctx, args: AblateHistoryArgs) -> Result<String> {
    let users = load_users(&args.users)?;
    let records = load_bench(&args.bench)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let embedder = args.embedder.build(ctx.cache_dir())?;
    let judge_client = parse_client(&args.judge_client, ctx.cache_dir())?;
    let judge = Judge::new(&judge_client);
    let artifact = match &args.artifact {
        Some(path) => Some(SteeringArtifact::load(path, &backend)?),
        None => None,
    };
    let grid: Vec<f64> = args
        .ratio_grid
        .split(',')
        .map(|s| s.trim().parse::<f64>().context("parsing --ratio-grid"))
        .collect::<Result<_>>()?;
    let opts = AblationOptions {
        current_date: ctx.current_date(),
        mode: if args.chronological {
            TruncationMode::Chronological
        } else {
            TruncationMode::TopScore
        },
        max_new_tokens: ctx.max_new_tokens(args.max_new_tokens),
        steer: SteerOptions::default(),
    };
    let report = history_length_ablation(
        &grid,
        &records,
        &users,
        &backend,
        embedder.as_ref(),
        &judge,
        artifact.as_ref(),
        &opts,
    )?;
    write_json(&args.out, &report)?;
    if let Some(csv_path) = &args.csv {
        std::fs::create_dir_all(csv_path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(csv_path, report.csv())?;
    }
    Ok(json!({
        "command": "ablate-history",
        "ratios": grid,
        "points": report.points.len(),
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// analyze-entanglement
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AnalyzeEntanglementArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    backend: Option<String>,
}

pub fn analyze_entanglement(ctx: &Ctx, args: AnalyzeEntanglementArgs) -> Result<String> {
    let corpus = load_corpus(&args.corpus)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let stats = entanglement_analysis(&corpus.examples, &backend)?;
    write_json(&args.out, &stats)?;
    Ok(json!({
        "command": "analyze-entanglement",
        "mean_cos_truthful": stats.mean_cos_truthful,
        "mean_cos_hallucinated": stats.mean_cos_hallucinated,
        "t_statistic": stats.t_statistic,
        "p_value": stats.p_value,
        "out": args.out,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated arms: control, personalized, steered.
    #[arg(long, default_value = "control,personalized")]
    arms: String,
    #[arg(long)]
    student_client: String,
    #[arg(long)]
    judge_client: String,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_turns: usize,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Cap on simulated questions after prefiltering.
    #[arg(long)]
    limit: Option<usize>,
    /// Skip the removes-already-known prefilter.
    #[arg(long)]
    no_prefilter: bool,
}

pub fn simulate(ctx: &Ctx, args: SimulateArgs) -> Result<String> {
    let users = load_users(&args.users)?;
    let records = load_bench(&args.bench)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let student = parse_client(&args.student_client, ctx.cache_dir())?;
    let judge_client = parse_client(&args.judge_client, ctx.cache_dir())?;
    let judge = Judge::new(&judge_client);
    let artifact = match &args.artifact {
        Some(path) => Some(SteeringArtifact::load(path, &backend)?),
        None => None,
    };

    let arms: Vec<Arm> = args
        .arms
        .split(',')
        .map(|s| match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Arm::Control),
            "personalized" => Ok(Arm::Personalized),
            "steered" | "personalized_steered" | "personalized-steered" => {
                Ok(Arm::PersonalizedSteered)
            }
            other => bail!("unknown arm {other:?}"),
        })
        .collect::<Result<_>>()?;
    if arms.contains(&Arm::PersonalizedSteered) && artifact.is_none() {
        bail!("the steered arm needs --artifact");
    }

    let by_user: HashMap<&str, &UserRecord> =
        users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    let mut questions: Vec<QAInstance> =
        records.iter().map(|r| r.factual_qa.clone()).collect();
    questions.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));

    let prefilter = if args.no_prefilter {
        None
    } else {
        let (unknown, report) = prefilter_known(&questions, &student, &judge);
        questions = unknown;
        Some(report)
    };
    if let Some(limit) = args.limit {
        questions.truncate(limit);
    }
    if questions.is_empty() {
        bail!("no questions left to simulate");
    }

    let opts = SimOptions {
        max_turns: args.max_turns,
        max_new_tokens: ctx.max_new_tokens(args.max_new_tokens).min(64),
        steer: SteerOptions::default(),
    };
    let mut transcripts = Vec::new();
    for &arm in &arms {
        for qa in &questions {
            let user = by_user.get(qa.user_id.as_str()).ok_or_else(|| {
                anyhow::anyhow!("question {} has unknown user {}", qa.qa_id, qa.user_id)
            })?;
            let transcript = run_tutoring(
                qa,
                arm,
                &backend,
                &student,
                Some(&user.sessions),
                artifact.as_ref(),
                &opts,
            )?;
            transcripts.push(transcript);
        }
    }

    let golds: HashMap<String, QAInstance> = questions
        .iter()
        .map(|q| (q.qa_id.clone(), q.clone()))
        .collect();
    let report = exam_and_score(&mut transcripts, &judge_client, &golds)?;

    let transcripts_path = args.out_dir.join("transcripts.jsonl");
    let report_path = args.out_dir.join("sim_report.json");
    let csv_path = args.out_dir.join("sim_report.csv");
    write_jsonl(&transcripts_path, &transcripts)?;
    write_json(&report_path, &report)?;
    std::fs::write(&csv_path, report.csv())?;

    Ok(json!({
        "command": "simulate",
        "arms": arms.iter().map(|a| a.label()).collect::<Vec<_>>(),
        "questions": questions.len(),
        "prefilter": prefilter,
        "accuracies": report.accuracies,
        "out_dir": args.out_dir,
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// grid-search
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GridSearchArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Validation split for scoring cells (normally the train bench file).
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    prober: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    judge_client: String,
    #[arg(long)]
    llm_client: Option<String>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    gamma_min: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma_max: f64,
    #[arg(long, default_value_t = 0.2)]
    gamma_step: f64,
    #[arg(long, default_value_t = 0.05)]
    tau_min: f64,
    #[arg(long, default_value_t = 1.0)]
    tau_max: f64,
    #[arg(long, default_value_t = 0.01)]
    tau_step: f64,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

pub fn grid_search(ctx: &Ctx, args: GridSearchArgs) -> Result<String> {
    let corpus = load_corpus(&args.corpus)?;
    let users = load_users(&args.users)?;
    let records = load_bench(&args.bench)?;
    let backend = ctx.backend(args.backend.as_deref())?;
    let method = parse_method(args.method.as_deref(), &ctx.config)?;
    let embedder = args.embedder.build(ctx.cache_dir())?;
    let judge_client = parse_client(&args.judge_client, ctx.cache_dir())?;
    let judge = Judge::new(&judge_client);
    let llm_client: Option<AnyClient> = match &args.llm_client {
        Some(spec) => Some(parse_client(spec, ctx.cache_dir())?),
        None => None,
    };
    let mut builder = PromptBuilder::new(
        method,
        embedder.as_ref(),
        llm_client.as_ref().map(|c| c as &dyn factsteer::client::ChatClient),
    )?;
    builder.current_date = ctx.current_date();

    let layer = resolve_layer(args.layer, args.scan.as_deref(), &ctx.config)?;
    let prober_file: ProberFile = read_json(&args.prober)?;
    if prober_file.layer != layer {
        bail!(
            "prober trained at layer {} but grid-search targets layer {layer}",
            prober_file.layer
        );
    }
    let variant: Variant = args
        .variant
        .as_deref()
        .or(ctx.config.variant.as_deref())
        .unwrap_or("M")
        .parse()
        .map_err(anyhow::Error::from)?;
    let steering = build_steering_vector(&corpus.examples, &backend, layer)?;

    let gammas = float_grid(args.gamma_min, args.gamma_max, args.gamma_step);
    // tau must stay strictly inside (0, 1) for a valid artifact; boundary
    // grid cells are skipped rather than rejected.
    let taus: Vec<f64> = float_grid(args.tau_min, args.tau_max, args.tau_step)
        .into_iter()
        .filter(|t| *t > 0.0 && *t < 1.0)
        .collect();

    let eval_opts = EvalOptions {
        max_new_tokens: ctx.max_new_tokens(args.max_new_tokens),
        steer: SteerOptions::default(),
    };
    let result = factsteer::eval::grid_search(&gammas, &taus, |gamma, tau| {
        let artifact = SteeringArtifact {
            version: ARTIFACT_VERSION,
            layer,
            variant,
            tau,
            gamma,
            prober: prober_file.model.clone(),
            steering: steering.clone(),
            backend_fingerprint: backend.fingerprint(),
        };
        let run = factsteer::eval::run_eval(
            &records,
            &users,
            &builder,
            &backend,
            &judge,
            Some(&artifact),
            &eval_opts,
        )?;
        Ok(run.report.overall)
    })?;

    write_json(&args.out, &result)?;
    if let Some(csv_path) = &args.csv {
        std::fs::create_dir_all(csv_path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(csv_path, result.csv())?;
    }
    Ok(json!({
        "command": "grid-search",
        "best_gamma": result.best_gamma,
        "best_tau": result.best_tau,
        "best_overall": result.best_overall,
        "cells": result.points.len(),
        "out": args.out,
    })
    .to_string())
}
