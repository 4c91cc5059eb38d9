use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use aspm::circuit::assemble;
use aspm::embedding::{EmbeddingProvider, FallbackEmbedder, FixtureEmbedder, HashingEmbedder};
use aspm::ingest::build_model;
use aspm::mln::{read_dataset, SafetyConfig};
use aspm::model::{load_model, save_model, PolicyModel};
use aspm::optimizer::{optimize, score_predicates, EditFixture, Merger, ProviderMerger, ProviderRefiner, Refiner};
use aspm::provider::{FixtureProvider, GenerationProvider, RemoteProvider};
use aspm::shield::{read_trajectory, FixtureTools, Label, Memory, Shield, ShieldConfig, Verdict};
use serde::Serialize;

use crate::config::Config;
use crate::{
    AssembleArgs, BuildArgs, Cli, Command, EmbeddingArgs, InspectArgs, OptimizeArgs, ProviderArgs, TrainArgs,
    VerifyArgs,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_UNSAFE: u8 = 3;

pub fn run(cli: &Cli) -> Result<u8> {
    let config = Config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Build(a) => build(cli, &config, a),
        Command::Optimize(a) => optimize_cmd(cli, &config, a),
        Command::Assemble(a) => assemble_cmd(cli, &config, a),
        Command::Train(a) => train(cli, &config, a),
        Command::Verify(a) => verify(cli, &config, a),
        Command::Inspect(a) => inspect(cli, a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> Result<PolicyModel> {
    load_model(&read_text(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    text
}

/// Writes to stdout. A closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing to stdout"),
    }
}

/// `dir/model.json` with command `train` gives `dir/model.train-report.json`.
pub fn report_path(output: &Path, command: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}.{command}-report.json"))
}

fn finish<T: Serialize>(
    cli: &Cli,
    output: &Path,
    model: &PolicyModel,
    command: &str,
    report: &T,
    summary: String,
) -> Result<u8> {
    write_text(output, &save_model(model))?;
    let report_file = report_path(output, command);
    let json = to_json(report);
    write_text(&report_file, &json)?;
    if cli.human {
        emit(&format!(
            "{summary}\nmodel: {}\nreport: {}\n",
            output.display(),
            report_file.display()
        ))?;
    } else {
        emit(&json)?;
    }
    Ok(EXIT_OK)
}

fn embedder(args: &EmbeddingArgs, config: &Config) -> Result<Box<dyn EmbeddingProvider>> {
    match &args.embeddings {
        None => Ok(Box::new(HashingEmbedder::new(config.embedding.dimension))),
        Some(path) => {
            let fixture = FixtureEmbedder::from_json(&read_text(path)?)
                .with_context(|| format!("loading embeddings {}", path.display()))?;
            let dim = fixture.dimension();
            Ok(Box::new(FallbackEmbedder::new(fixture, HashingEmbedder::new(dim))?))
        }
    }
}

fn provider(args: &ProviderArgs, config: &Config) -> Result<Box<dyn GenerationProvider>> {
    match (&args.fixtures, &config.provider) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                bail!("fixture directory {} does not exist", dir.display());
            }
            Ok(Box::new(FixtureProvider::from_dir(dir)))
        }
        (None, Some(remote)) => Ok(Box::new(RemoteProvider::new(remote.clone()))),
        (None, None) => bail!("no text-generation provider: pass --fixtures or configure [provider]"),
    }
}

fn collect_documents(inputs: &[PathBuf]) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("md" | "txt")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    files.iter().map(|f| read_text(f)).collect()
}

fn build(cli: &Cli, config: &Config, a: &BuildArgs) -> Result<u8> {
    let mut cfg = config.ingest.clone();
    if let Some(o) = &a.organization {
        cfg.organization.clone_from(o);
    }
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    if let Some(r) = a.repair_retries {
        cfg.repair_retries = r;
    }
    let documents = collect_documents(&a.inputs)?;
    let provider = provider(&a.provider, config)?;
    let embedder = embedder(&a.embedding, config)?;
    let (model, report) = build_model(&documents, provider.as_ref(), Some(embedder.as_ref()), &cfg)?;
    let summary = format!(
        "built {} rules over {} predicates from {} policies ({} records rejected, {} provider calls)",
        model.rule_count(),
        model.predicate_count(),
        report.policies,
        report.rejected.len(),
        report.provider_calls
    );
    finish(cli, &a.output, &model, "build", &report, summary)
}

enum Editor {
    Fixture(EditFixture),
    Provider,
}

fn editor(choice: &str) -> Result<Editor> {
    match choice {
        "none" => Ok(Editor::Fixture(EditFixture::default())),
        "provider" => Ok(Editor::Provider),
        s => match s.strip_prefix("fixture:") {
            Some(path) => Ok(Editor::Fixture(
                EditFixture::load(Path::new(path)).with_context(|| format!("loading edit fixture {path}"))?,
            )),
            None => bail!("unknown editor '{s}': expected none, fixture:<path> or provider"),
        },
    }
}

fn optimize_cmd(cli: &Cli, config: &Config, a: &OptimizeArgs) -> Result<u8> {
    let mut cfg = config.optimizer.clone();
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(b) = a.budget {
        cfg.budget = b;
    }
    if let Some(m) = a.max_iters {
        cfg.max_iterations = m;
    }
    if let Some(t) = a.sim_threshold {
        cfg.similarity_threshold = t;
    }
    let model = read_model(&a.model)?;
    let embedder = embedder(&a.embedding, config)?;
    let refiner_choice = editor(&a.refiner)?;
    let merger_choice = editor(&a.merger)?;
    let needs_provider = matches!(refiner_choice, Editor::Provider) || matches!(merger_choice, Editor::Provider);
    let gen = if needs_provider {
        Some(provider(&a.provider, config)?)
    } else {
        None
    };
    let few_shot = a.few_shot.as_deref().map(read_text).transpose()?.unwrap_or_default();

    let provider_refiner;
    let refiner: &dyn Refiner = match &refiner_choice {
        Editor::Fixture(f) => f,
        Editor::Provider => {
            provider_refiner = ProviderRefiner {
                provider: gen.as_deref().expect("provider loaded"),
                few_shot: few_shot.clone(),
                scores: score_predicates(&model, Some(embedder.as_ref()), cfg.k)?,
            };
            &provider_refiner
        }
    };
    let provider_merger;
    let merger: &dyn Merger = match &merger_choice {
        Editor::Fixture(f) => f,
        Editor::Provider => {
            provider_merger = ProviderMerger {
                provider: gen.as_deref().expect("provider loaded"),
                few_shot,
            };
            &provider_merger
        }
    };
    let (out, report) = optimize(&model, refiner, merger, Some(embedder.as_ref()), &cfg)?;
    let summary = format!(
        "rules {} -> {}, predicates {} -> {}; {} refinements, {} merges over {} iterations; converged: {}",
        report.initial_rules,
        report.final_rules,
        report.initial_predicates,
        report.final_predicates,
        report.refinements,
        report.merges,
        report.iterations.len(),
        report.converged
    );
    finish(cli, &a.output, &out, "optimize", &report, summary)
}

fn assemble_cmd(cli: &Cli, config: &Config, a: &AssembleArgs) -> Result<u8> {
    let mut cfg = config.assemble.clone();
    if a.k.is_some() {
        cfg.k = a.k;
    }
    if let Some(t) = a.sim_threshold {
        cfg.similarity_threshold = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let model = read_model(&a.model)?;
    let embedder = embedder(&a.embedding, config)?;
    let (out, report) = assemble(&model, Some(embedder.as_ref()), &cfg)?;
    let mut summary = format!(
        "{} predicate clusters, {} rule groups, {} circuits",
        report.merged.cluster_count(),
        report.rule_groups.len(),
        report.circuits.len()
    );
    for (action, n) in &report.circuits {
        summary.push_str(&format!("\n  {action}: {n} rules"));
    }
    finish(cli, &a.output, &out, "assemble", &report, summary)
}

fn train(cli: &Cli, config: &Config, a: &TrainArgs) -> Result<u8> {
    let mut cfg = config.train.params.clone();
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let model = read_model(&a.model)?;
    if !model.is_assembled() {
        bail!("model {} has no circuits; run assemble first", a.model.display());
    }
    let epsilon = a.epsilon.or(config.train.epsilon).or(model.epsilon()).unwrap_or(0.0);
    let file = File::open(&a.data).with_context(|| format!("opening {}", a.data.display()))?;
    let dataset = read_dataset(BufReader::new(file))?;
    let (out, report) = aspm::mln::train_model(&model, &dataset, &cfg, epsilon)?;
    let mut summary = format!("epsilon {epsilon}");
    for c in &report.circuits {
        let first = c.outcome.losses.first().copied().unwrap_or(f64::NAN);
        let last = c.outcome.losses.last().copied().unwrap_or(f64::NAN);
        summary.push_str(&format!(
            "\n  {}: {} examples, loss {first:.6} -> {last:.6}, accuracy {:.3}",
            c.action, c.examples, c.accuracy
        ));
    }
    for s in &report.skipped {
        summary.push_str(&format!("\n  {s}: skipped (empty circuit)"));
    }
    finish(cli, &a.output, &out, "train", &report, summary)
}

/// Long-term memory file held under an exclusive advisory lock.
struct MemoryFile {
    file: File,
}

impl MemoryFile {
    fn open(path: &Path, capacity: usize) -> Result<(Self, Memory)> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .with_context(|| format!("opening memory {}", path.display()))?;
        file.lock()
            .with_context(|| format!("locking memory {}", path.display()))?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let mut memory = if text.trim().is_empty() {
            Memory::new(capacity)
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing memory {}", path.display()))?
        };
        memory.capacity = capacity.max(1);
        Ok((MemoryFile { file }, memory))
    }

    fn save(mut self, memory: &Memory) -> Result<()> {
        self.file.set_len(0)?;
        self.file.seek(SeekFrom::Start(0))?;
        self.file.write_all(to_json(memory).as_bytes())?;
        self.file.unlock()?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct StepResult<'a> {
    step: usize,
    label: Label,
    margin: Option<f64>,
    verdict: &'a Verdict,
}

#[derive(Debug, Serialize)]
struct RunDocument<'a> {
    label: Label,
    first_unsafe_step: Option<usize>,
    steps: Vec<StepResult<'a>>,
}

fn format_margin(m: Option<f64>) -> String {
    m.map_or_else(|| "-".to_string(), |m| format!("{m:.6}"))
}

fn human_verdict(step: usize, v: &Verdict) -> String {
    let actions: Vec<&str> = v.actions.iter().map(|a| a.action.as_str()).collect();
    let mut out = format!(
        "step {step}: {} (margin {}, epsilon {}) actions [{}]",
        v.label,
        format_margin(v.margin),
        v.epsilon,
        actions.join(", ")
    );
    if !v.label.is_safe() {
        for line in v.explanation.lines() {
            out.push_str(&format!("\n    {line}"));
        }
    }
    for w in &v.warnings {
        out.push_str(&format!("\n    warning: {w}"));
    }
    out
}

fn verify(cli: &Cli, config: &Config, a: &VerifyArgs) -> Result<u8> {
    let model = read_model(&a.model)?;
    if !model.is_assembled() {
        bail!("model {} has no circuits; run assemble first", a.model.display());
    }
    let file = File::open(&a.trajectory).with_context(|| format!("opening {}", a.trajectory.display()))?;
    let steps = read_trajectory(BufReader::new(file))?;
    let tools = FixtureTools::from_json(&read_text(&a.tools)?)
        .with_context(|| format!("parsing tools {}", a.tools.display()))?;
    let v = &config.verify;
    let shield_config = ShieldConfig {
        safety: SafetyConfig {
            epsilon: a.epsilon.or(v.epsilon).or(model.epsilon()).unwrap_or(0.0),
            marginalize_uncertain: a.marginalize || v.marginalize_uncertain,
            max_uncertain: v.max_uncertain,
        },
        planner: v.planner.clone(),
        min_confidence: v.min_confidence,
    };
    let last = match a.step {
        Some(n) if n >= steps.len() => {
            return Err(anyhow!("step {n} out of range: trajectory has {} steps", steps.len()))
        }
        Some(n) => n,
        None => steps.len() - 1,
    };
    let (lock, mut memory) = match &a.memory {
        Some(path) => {
            let (f, m) = MemoryFile::open(path, v.memory_capacity)?;
            (Some(f), m)
        }
        None => (None, Memory::new(v.memory_capacity)),
    };
    let trajectory_id = a
        .trajectory
        .file_stem()
        .map_or_else(|| "trajectory".to_string(), |s| s.to_string_lossy().into_owned());
    let shield = Shield {
        model: &model,
        config: &shield_config,
        tools: &tools,
    };
    let mut verdicts = Vec::with_capacity(last + 1);
    for i in 0..=last {
        verdicts.push(shield.check(&steps[..i], &steps[i], &mut memory, &trajectory_id)?);
    }
    memory.gc(&trajectory_id);
    if let Some(lock) = lock {
        lock.save(&memory)?;
    }

    let (label, json, human) = if let Some(n) = a.step {
        let verdict = &verdicts[n];
        (verdict.label, to_json(verdict), human_verdict(n, verdict))
    } else {
        let first_unsafe_step = verdicts.iter().position(|v| !v.label.is_safe());
        let label = Label::from_safe(first_unsafe_step.is_none());
        let doc = RunDocument {
            label,
            first_unsafe_step,
            steps: verdicts
                .iter()
                .enumerate()
                .map(|(step, verdict)| StepResult {
                    step,
                    label: verdict.label,
                    margin: verdict.margin,
                    verdict,
                })
                .collect(),
        };
        let mut human: Vec<String> = verdicts.iter().enumerate().map(|(i, v)| human_verdict(i, v)).collect();
        human.push(match first_unsafe_step {
            Some(i) => format!("trajectory: unsafe (first unsafe step {i})"),
            None => "trajectory: safe".to_string(),
        });
        (label, to_json(&doc), human.join("\n"))
    };
    if let Some(out) = &a.output {
        write_text(out, &json)?;
    }
    emit(&if cli.human { format!("{human}\n") } else { json })?;
    Ok(if label.is_safe() { EXIT_OK } else { EXIT_UNSAFE })
}

#[derive(Debug, Serialize)]
struct PredicateView<'a> {
    name: &'a str,
    kind: String,
    description: &'a str,
    keywords: &'a [String],
}

#[derive(Debug, Serialize)]
struct RuleView<'a> {
    id: &'a str,
    kind: String,
    text: &'a str,
    logic: String,
    predicates: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    vagueness: Option<f64>,
    reference: &'a [String],
    circuits: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct CircuitRuleView<'a> {
    id: &'a str,
    weight: f64,
    text: &'a str,
    logic: String,
}

#[derive(Debug, Serialize)]
struct CircuitView<'a> {
    action: &'a str,
    rules: Vec<CircuitRuleView<'a>>,
}

#[derive(Debug, Serialize)]
struct ModelView<'a> {
    predicates: Vec<PredicateView<'a>>,
    rules: Vec<RuleView<'a>>,
    circuits: Vec<CircuitView<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    policies: usize,
}

fn rule_view<'a>(model: &'a PolicyModel, r: &'a aspm::model::Rule) -> RuleView<'a> {
    RuleView {
        id: &r.id,
        kind: r.kind.to_string(),
        text: &r.text,
        logic: r.formula.render(),
        predicates: &r.predicates,
        vagueness: r.vagueness,
        reference: &r.reference,
        circuits: model
            .circuits()
            .filter(|c| c.rule_ids.contains(&r.id))
            .map(|c| c.action.as_str())
            .collect(),
    }
}

fn circuit_view<'a>(model: &'a PolicyModel, c: &'a aspm::model::Circuit) -> CircuitView<'a> {
    CircuitView {
        action: &c.action,
        rules: c
            .rule_ids
            .iter()
            .zip(&c.weights)
            .map(|(id, w)| {
                let r = model.rule(id).expect("validated circuit");
                CircuitRuleView {
                    id,
                    weight: *w,
                    text: &r.text,
                    logic: r.formula.render(),
                }
            })
            .collect(),
    }
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<u8> {
    let model = read_model(&a.model)?;
    let mut out = String::new();
    if let Some(id) = &a.rule {
        let r = model.rule(id).ok_or_else(|| anyhow!("no rule with id {id}"))?;
        let view = rule_view(&model, r);
        if cli.human {
            writeln!(
                out,
                "{} [{}] {}\n  logic: {}",
                view.id, view.kind, view.text, view.logic
            )?;
            writeln!(out, "  predicates: {}", view.predicates.join(", "))?;
            writeln!(out, "  reference: {}", view.reference.join("; "))?;
            writeln!(out, "  circuits: {}", view.circuits.join(", "))?;
        } else {
            write!(out, "{}", to_json(&view))?;
        }
        emit(&out)?;
        return Ok(EXIT_OK);
    }
    if let Some(action) = &a.circuit {
        let c = model.lookup_circuit(action)?;
        let view = circuit_view(&model, c);
        if cli.human {
            writeln!(out, "circuit {} ({} rules)", view.action, view.rules.len())?;
            for r in &view.rules {
                writeln!(out, "  {} weight {:.6}: {}", r.id, r.weight, r.logic)?;
            }
        } else {
            write!(out, "{}", to_json(&view))?;
        }
        emit(&out)?;
        return Ok(EXIT_OK);
    }
    let view = ModelView {
        predicates: model
            .predicates()
            .map(|p| PredicateView {
                name: &p.name,
                kind: p.kind.to_string(),
                description: &p.description,
                keywords: &p.keywords,
            })
            .collect(),
        rules: model.rules().map(|r| rule_view(&model, r)).collect(),
        circuits: model.circuits().map(|c| circuit_view(&model, c)).collect(),
        epsilon: model.epsilon(),
        policies: model.provenance().map_or(0, <[_]>::len),
    };
    if cli.human {
        writeln!(
            out,
            "{} predicates, {} rules, {} circuits, {} source policies",
            view.predicates.len(),
            view.rules.len(),
            view.circuits.len(),
            view.policies
        )?;
        if let Some(e) = view.epsilon {
            writeln!(out, "epsilon {e}")?;
        }
        writeln!(out, "predicates:")?;
        for p in &view.predicates {
            writeln!(out, "  {} ({}): {}", p.name, p.kind, p.description)?;
        }
        writeln!(out, "rules:")?;
        for r in &view.rules {
            writeln!(out, "  {} [{}] {}", r.id, r.kind, r.logic)?;
        }
        writeln!(out, "circuits:")?;
        for c in &view.circuits {
            let ids: Vec<&str> = c.rules.iter().map(|r| r.id).collect();
            writeln!(out, "  {}: {}", c.action, ids.join(", "))?;
        }
    } else {
        write!(out, "{}", to_json(&view))?;
    }
    emit(&out)?;
    Ok(EXIT_OK)
}
