//! `beamloop` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on user error (bad flags, bad inputs,
//! mismatched checkpoints, unreachable backends), 2 on internal error.

use std::fs;
use std::io::{BufRead, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use beamloop::agents::{
    run_workflow, AgentError, BackendConfig, BackendKind, Command, ModelRegistry, SpaPolicy, WorkflowConfig,
};
use beamloop::channel::{build_codebook, OfdmConfig};
use beamloop::metrics::{confusion_csv, EvalReport};
use beamloop::nn::{op_gradchecks, NnError};
use beamloop::predictor::{
    evaluate, load_model, micro_gradcheck, save_model, train, HybridModel, Mode, ModelInput, PredictorConfig,
    PredictorError, TrainSchedule,
};
use beamloop::scenario::{
    build_dataset, ingest_external, load_dataset, write_dataset, Dataset, DatasetSpec, Sample, ScenarioConfig,
    ScenarioError, Split,
};

const DEFAULT_SEED: u64 = 6;
const LOG_FILE: &str = "run.log";

#[derive(Parser, Debug)]
#[command(name = "beamloop", version, about = "UAV mmWave beam prediction with an agent-driven workflow")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Convert an external dataset into the native layout.
    Ingest(IngestArgs),
    /// Train the predictor in one inference mode.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the predictor as described by a command file.
    Predict(PredictArgs),
    /// Run the task analysis, planning and assessment workflow.
    Agent(AgentArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2600)]
    samples: usize,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Array elements.
    #[arg(long, default_value_t = 16)]
    elements: usize,
    /// Codebook size.
    #[arg(long, default_value_t = 16)]
    beams: usize,
    /// Scenario settings as JSON; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Mode,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    /// JSON with optional `schedule` and `model` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from an existing checkpoint, e.g. to add a mode.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Command file emitted by the assessment agent.
    #[arg(long)]
    command: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AgentArgs {
    /// The manager's request in plain language.
    requirement: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "mock")]
    backend: BackendKind,
    /// Mock script (mock backend).
    #[arg(long)]
    script: Option<PathBuf>,
    /// Chat endpoint; defaults to BEAMLOOP_LLM_URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the chat endpoint.
    #[arg(long)]
    llm_model: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Maximum plan/assess rounds.
    #[arg(long, default_value_t = 5)]
    cmax: usize,
    /// Planning iterations when no threshold is given.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// Stop planning once the rationale reaches this similarity to `--reference`.
    #[arg(long, requires = "reference")]
    threshold: Option<f64>,
    #[arg(long)]
    reference: Option<String>,
    /// Directory holding the checkpoint registry.
    #[arg(long, default_value = "models")]
    models: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn select(self, ds: &Dataset) -> Vec<&Sample> {
        ds.samples
            .iter()
            .filter(|s| match self {
                SplitArg::Train => s.split == Split::Train,
                SplitArg::Test => s.split == Split::Test,
                SplitArg::All => true,
            })
            .collect()
    }
}

/// Training overrides read from `--config`.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    schedule: Option<TrainSchedule>,
    model: Option<ModelOverrides>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ModelOverrides {
    hidden_dim: Option<usize>,
    numeric_blocks: Option<usize>,
    image_blocks: Option<usize>,
    attn_heads: Option<usize>,
    decoder_layers: Option<usize>,
    dropout: Option<f64>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut PredictorConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.hidden_dim, self.hidden_dim);
        set(&mut cfg.numeric_blocks, self.numeric_blocks);
        set(&mut cfg.image_blocks, self.image_blocks);
        set(&mut cfg.attn_heads, self.attn_heads);
        set(&mut cfg.decoder_layers, self.decoder_layers);
        if let Some(d) = self.dropout {
            cfg.dropout = d;
        }
    }
}

/// Marks an error as the caller's fault.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn is_user_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<UserError>() || e.is::<std::io::Error>() || e.is::<serde_json::Error>() {
            return true;
        }
        if let Some(e) = e.downcast_ref::<ScenarioError>() {
            return !matches!(e, ScenarioError::Channel(_));
        }
        if let Some(e) = e.downcast_ref::<PredictorError>() {
            return matches!(
                e,
                PredictorError::InvalidConfig(_)
                    | PredictorError::ConfigMismatch(_)
                    | PredictorError::FrameSizeMismatch { .. }
                    | PredictorError::MissingModality { .. }
                    | PredictorError::Io { .. }
                    | PredictorError::BadModelFile { .. }
                    | PredictorError::EmptyTrainingSet
                    | PredictorError::Nn(NnError::InputTooSmall { .. } | NnError::IndivisibleHeads { .. })
            );
        }
        e.is::<AgentError>()
    })
}

/// Appends to `run.log` in the output directory.
struct RunLog {
    path: PathBuf,
}

impl RunLog {
    fn open(dir: &Path, seed: u64, command: &str, config: &impl Serialize) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let log = Self {
            path: dir.join(LOG_FILE),
        };
        let cfg = serde_json::to_string_pretty(config)?;
        fs::write(&log.path, format!("command: {command}\nseed: {seed}\nconfig: {cfg}\n"))
            .with_context(|| format!("writing {}", log.path.display()))?;
        Ok(log)
    }

    fn line(&self, text: &str) {
        println!("{text}");
        if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&self.path) {
            let _ = writeln!(f, "{text}");
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(seed: u64, a: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg: ScenarioConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    cfg.seed = seed;
    let spec = DatasetSpec {
        num_samples: a.samples,
        test_fraction: a.test_fraction,
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        scenario: &'a ScenarioConfig,
        ofdm: OfdmConfig,
        elements: usize,
        beams: usize,
        samples: usize,
        test_fraction: f64,
    }
    let ofdm = OfdmConfig::default();
    let log = RunLog::open(
        &a.out,
        seed,
        "gen-data",
        &Resolved {
            scenario: &cfg,
            ofdm: ofdm.clone(),
            elements: a.elements,
            beams: a.beams,
            samples: a.samples,
            test_fraction: a.test_fraction,
        },
    )?;
    let cb = build_codebook(a.elements, a.beams).map_err(|e| user(e.to_string()))?;
    let manifest = build_dataset(&cfg, &ofdm, &cb, spec, &a.out)?;
    let test = manifest.records.iter().filter(|r| r.split == Split::Test).count();
    log.line(&format!(
        "wrote {} samples ({} train, {test} test) to {}",
        manifest.records.len(),
        manifest.records.len() - test,
        a.out.display()
    ));
    Ok(())
}

fn ingest(seed: u64, a: IngestArgs) -> anyhow::Result<()> {
    let log = RunLog::open(&a.out, seed, "ingest", &serde_json::json!({"source": a.source}))?;
    let ds = ingest_external(&a.source)?;
    write_dataset(&ds, None, &a.out)?;
    log.line(&format!("ingested {} samples into {}", ds.len(), a.out.display()));
    Ok(())
}

fn split(ds: &Dataset) -> (Vec<&Sample>, Vec<&Sample>) {
    (SplitArg::Train.select(ds), SplitArg::Test.select(ds))
}

fn train_cmd(seed: u64, a: TrainArgs) -> anyhow::Result<()> {
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let ds = load_dataset(&a.data)?;
    let mut schedule = file.schedule.unwrap_or_default();
    schedule.seed = seed;
    if let Some(e) = a.epochs {
        schedule.epochs = e;
    }
    if let Some(f) = a.fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(user(format!("--fraction must be in (0, 1], got {f}")));
        }
        schedule.fraction = f;
    }
    let (mut model, mut modes) = match &a.init {
        Some(dir) => {
            let (mut m, file) = load_model(dir)?;
            if file.config.mode != a.mode {
                m.config.mode = a.mode;
            }
            (m, file.trained_modes)
        }
        None => {
            let mut cfg = PredictorConfig::for_dataset(&ds.meta, a.mode);
            if let Some(o) = &file.model {
                o.apply(&mut cfg);
            }
            (HybridModel::new(cfg, seed)?, Vec::new())
        }
    };
    if a.init.is_some() && file.model.is_some() {
        return Err(user("--config model overrides cannot change an existing checkpoint"));
    }
    model.config.check_dataset(&ds.meta)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        init: Option<&'a PathBuf>,
        model: &'a PredictorConfig,
        schedule: &'a TrainSchedule,
    }
    let log = RunLog::open(
        &a.out,
        seed,
        "train",
        &Resolved {
            data: &a.data,
            init: a.init.as_ref(),
            model: &model.config,
            schedule: &schedule,
        },
    )?;
    let (tr, te) = split(&ds);
    let report = train(&mut model, &tr, &te, &schedule, &mut |r| {
        let top1 = r.val_top_k.as_ref().map_or(String::from("-"), |t| format!("{:.4}", t[&1]));
        log.line(&format!(
            "epoch {} train_loss {:.4} val_top1 {top1} ({:.1} s)",
            r.epoch, r.train_loss, r.seconds
        ));
        ControlFlow::Continue(())
    })?;
    modes.push(a.mode);
    save_model(&model, &modes, &a.out)?;
    write_json(&a.out.join("train_report.json"), &report)?;
    log.line(&format!(
        "saved {} mode checkpoint ({} parameters) to {}",
        a.mode,
        model.parameter_count(),
        a.out.display()
    ));
    Ok(())
}

/// Loads a checkpoint and switches it to `mode`, refusing modes it was
/// never trained in.
fn load_for(dir: &Path, mode: Mode, ds: &Dataset) -> anyhow::Result<HybridModel<f32>> {
    let (mut model, file) = load_model(dir)?;
    if !file.trained_modes.contains(&mode) {
        let trained: Vec<&str> = file.trained_modes.iter().map(|m| m.as_str()).collect();
        return Err(PredictorError::ConfigMismatch(format!(
            "checkpoint {} was trained for [{}], not {mode}",
            dir.display(),
            trained.join(", ")
        ))
        .into());
    }
    model.config.mode = mode;
    model.config.check_dataset(&ds.meta)?;
    Ok(model)
}

fn write_eval(out: &Path, report: &EvalReport, log: &RunLog) -> anyhow::Result<()> {
    write_json(&out.join("eval_report.json"), report)?;
    fs::write(out.join("confusion.csv"), confusion_csv(&report.confusion))?;
    let tops: Vec<String> = report.top_k.iter().map(|(k, v)| format!("top-{k} {v:.4}")).collect();
    log.line(&format!(
        "{} samples: {}; loss {:.4}; {:.3} ms per frame",
        report.sample_count,
        tops.join(", "),
        report.mean_loss,
        report.per_frame_latency_ms
    ));
    Ok(())
}

fn eval_cmd(seed: u64, a: EvalArgs) -> anyhow::Result<()> {
    let log = RunLog::open(
        &a.out,
        seed,
        "eval",
        &serde_json::json!({"data": a.data, "checkpoint": a.checkpoint, "mode": a.mode, "split": a.split}),
    )?;
    let ds = load_dataset(&a.data)?;
    let model = load_for(&a.checkpoint, a.mode, &ds)?;
    let samples = a.split.select(&ds);
    if samples.is_empty() {
        return Err(user(format!("split {:?} of {} is empty", a.split, a.data.display())));
    }
    let report = evaluate(&model, &samples, 32)?;
    write_eval(&a.out, &report, &log)
}

fn predict_cmd(seed: u64, a: PredictArgs) -> anyhow::Result<()> {
    let cmd = Command::load(&a.command)?;
    let log = RunLog::open(&a.out, seed, "predict", &cmd)?;
    let ds = load_dataset(Path::new(&cmd.dataset))?;
    let model = load_for(Path::new(&cmd.checkpoint), cmd.mode, &ds)?;
    let c = &model.config;
    let arch = (c.numeric_blocks, c.image_blocks, c.attn_heads, c.decoder_layers);
    let want = (cmd.model.numeric_blocks, cmd.model.image_blocks, cmd.model.attn_heads, cmd.model.decoder_layers);
    if arch != want {
        return Err(PredictorError::ConfigMismatch(format!(
            "command asks for blocks/heads/layers {want:?}, checkpoint has {arch:?}"
        ))
        .into());
    }
    if cmd.horizon != c.horizon {
        return Err(PredictorError::ConfigMismatch(format!(
            "command horizon {} differs from checkpoint horizon {}",
            cmd.horizon, c.horizon
        ))
        .into());
    }
    let samples = SplitArg::Test.select(&ds);
    let samples = if samples.is_empty() { SplitArg::All.select(&ds) } else { samples };
    let path = a.out.join("predictions.jsonl");
    let mut lines = String::new();
    for batch in samples.chunks(32) {
        let preds = model.predict(&ModelInput::from_samples(batch, cmd.mode))?;
        for (s, p) in batch.iter().zip(preds) {
            lines.push_str(&serde_json::json!({"id": s.id, "beams": p.beam_indices, "labels": s.labels}).to_string());
            lines.push('\n');
        }
    }
    fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
    log.line(&format!("wrote {} predictions to {}", samples.len(), path.display()));
    let report = evaluate(&model, &samples, 32)?;
    write_eval(&a.out, &report, &log)
}

/// Asks the manager on the terminal.
fn terminal_responder(question: &str) -> String {
    eprintln!("? {question}");
    eprint!("> ");
    let _ = std::io::stderr().flush();
    let mut line = String::new();
    let _ = std::io::stdin().lock().read_line(&mut line);
    line.trim().to_string()
}

fn agent_cmd(seed: u64, a: AgentArgs) -> anyhow::Result<()> {
    if a.cmax == 0 {
        return Err(user("--cmax must be at least 1"));
    }
    let backend_cfg = BackendConfig {
        kind: a.backend,
        endpoint: a.endpoint.clone(),
        model: a.llm_model.clone(),
        timeout_secs: a.timeout,
        script: a.script.clone(),
        ..BackendConfig::default()
    };
    let spa_policy = match a.threshold {
        Some(s) => SpaPolicy::threshold(s, a.reference.clone().unwrap_or_default()),
        None => {
            let mut p = SpaPolicy::fixed(a.iterations);
            p.reference = a.reference.clone();
            p
        }
    };
    let cfg = WorkflowConfig {
        c_max: a.cmax,
        spa_policy,
        registry: ModelRegistry::standard(&a.models),
        ..WorkflowConfig::default()
    };
    let log = RunLog::open(
        &a.out,
        seed,
        "agent",
        &serde_json::json!({"requirement": a.requirement, "backend": backend_cfg, "workflow": format!("{cfg:?}")}),
    )?;
    let mut backend = backend_cfg.build()?;
    let mut responder = terminal_responder;
    let outcome = run_workflow(backend.as_mut(), &a.requirement, &mut responder, &cfg)?;
    write_json(&a.out.join("task.json"), &outcome.task)?;
    write_json(&a.out.join("plan.json"), &outcome.plan)?;
    write_json(&a.out.join("assessment.json"), &outcome.assessment)?;
    write_json(&a.out.join("traces.json"), &outcome.traces())?;
    let similarity: Vec<_> = outcome.spa.iter().map(|s| &s.similarity).collect();
    write_json(&a.out.join("similarity.json"), &similarity)?;
    if let Some(cmd) = &outcome.assessment.command {
        fs::write(a.out.join("command.json"), cmd.to_json() + "\n")?;
    }
    log.line(&format!(
        "{} after {} round(s): mode {}, checkpoint {}",
        if outcome.resolved() { "resolved" } else { "unresolved" },
        outcome.iterations,
        outcome.plan.mode,
        outcome.plan.checkpoint
    ));
    if !outcome.resolved() {
        log.line(&format!("last feedback: {}", outcome.assessment.feedback));
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, a: GradcheckArgs) -> anyhow::Result<()> {
    let log = RunLog::open(&a.out, seed, "gradcheck", &serde_json::json!({"tolerance": 1e-4}))?;
    let mut rows = Vec::new();
    for (name, r) in op_gradchecks()? {
        rows.push((name.to_string(), r));
    }
    for mode in Mode::ALL {
        rows.push((format!("model-{mode}"), micro_gradcheck(mode)?));
    }
    let mut worst = 0.0f64;
    for (name, r) in &rows {
        worst = worst.max(r.max_rel_error);
        log.line(&format!("{name:<22} {:.2e} over {} entries", r.max_rel_error, r.entries_checked));
    }
    let json: Vec<_> = rows
        .iter()
        .map(|(n, r)| serde_json::json!({"check": n, "max_rel_error": r.max_rel_error, "entries": r.entries_checked}))
        .collect();
    write_json(&a.out.join("gradcheck.json"), &json)?;
    if worst >= 1e-4 {
        bail!("worst relative error {worst:.2e} exceeds 1e-4");
    }
    log.line(&format!("all {} checks below 1e-4 (worst {worst:.2e})", rows.len()));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Cmd::GenData(a) => gen_data(seed, a),
        Cmd::Ingest(a) => ingest(seed, a),
        Cmd::Train(a) => train_cmd(seed, a),
        Cmd::Eval(a) => eval_cmd(seed, a),
        Cmd::Predict(a) => predict_cmd(seed, a),
        Cmd::Agent(a) => agent_cmd(seed, a),
        Cmd::Gradcheck(a) => gradcheck_cmd(seed, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if is_user_error(&e) { 1 } else { 2 };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
