//! The commands behind the CLI, as library calls. Each writes the same
//! artifacts whether invoked from `main` or from code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::corpus::tokenizer::split_words;
use crate::corpus::{load_conversations, Conversation, Domains, Exchange};
use crate::error::{Error, Result};
use crate::evaluator::{EvalOptions, EvalReport, Evaluation};
use crate::experiment::Prepared;
use crate::inference::{Solver, System, TurnOutput, TurnQuery};
use crate::kg::{extract_context_paths, label_paths, verbalize_path, ContextPath, KnowledgeGraph};
use crate::trainer::{load_checkpoint, CheckpointPlan, TrainLog};

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const BASELINE_FILE: &str = "baseline.json";

pub fn load_benchmark(config: &RunConfig) -> Result<(KnowledgeGraph, Vec<Conversation>, Domains)> {
    let graph = KnowledgeGraph::load(&config.data.triples, &config.data.labels)?;
    let conversations = load_conversations(&config.data.conversations)?;
    let domains = Domains::load(&config.data.domains)?;
    Ok((graph, conversations, domains))
}

/// Splits, tokenizes and builds instances exactly as training does.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let (graph, conversations, domains) = load_benchmark(config)?;
    let embedder = config.embedding.build(&config.output_dir)?;
    Prepared::new(graph, &conversations, domains, config.split, config.ablation, embedder, config.max_hops)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ablation: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
    pub train_instances: usize,
    pub vocab_size: usize,
}

/// Trains and writes the effective config, tokenizer, checkpoints
/// (`last` and `best`), per-loop logs and a summary into the output dir.
pub fn train_run(config: &RunConfig) -> Result<TrainSummary> {
    let out = &config.output_dir;
    config.persist()?;
    let prepared = prepare(config)?;
    prepared.tokenizer.save(&out.join(TOKENIZER_FILE))?;
    let config_json = config.to_json()?;
    let plan = CheckpointPlan { dir: &out.join(CHECKPOINT_DIR), config: &config_json };
    let outcome = prepared.train(&config.hyperparameters, Some(plan))?;
    prepared.embedder.persist_cache()?;

    write(&out.join(TRAIN_LOG_FILE), &outcome.log.to_csv())?;
    for (name, log) in &outcome.extra_logs {
        write(&out.join(format!("train_log_{name}.csv")), &log.to_csv())?;
    }
    let summary = TrainSummary {
        ablation: config.ablation.name().to_string(),
        seed: config.seed,
        epochs: config.hyperparameters.epochs,
        best_epoch: outcome.best_epoch,
        best_val_mrr: outcome.best_val_mrr,
        train_instances: prepared.instances.len(),
        vocab_size: prepared.tokenizer.vocab_size(),
    };
    write(&out.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

pub fn read_train_log(run_dir: &Path) -> Result<TrainLog> {
    let path = run_dir.join(TRAIN_LOG_FILE);
    TrainLog::parse_csv(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
}

/// A trained run reopened from its directory.
pub struct Run {
    pub config: RunConfig,
    pub prepared: Prepared,
    pub models: crate::inference::Models,
    pub epoch: usize,
}

impl Run {
    /// Loads `<run_dir>/config.toml` and `checkpoints/<checkpoint>`.
    pub fn open(run_dir: &Path, checkpoint: &str) -> Result<Self> {
        let config_path = run_dir.join(EFFECTIVE_CONFIG);
        if !config_path.is_file() {
            return Err(Error::Config(format!("not a run directory (no {}): {}", EFFECTIVE_CONFIG, run_dir.display())));
        }
        let config = RunConfig::load(&config_path, &Default::default())?;
        let prepared = prepare(&config)?;
        let tok_path = run_dir.join(TOKENIZER_FILE);
        if tok_path.is_file() && crate::corpus::Tokenizer::load(&tok_path)? != prepared.tokenizer {
            return Err(Error::Config(format!("{} does not match the configured data", tok_path.display())));
        }
        let (manifest, models) = load_checkpoint(&run_dir.join(CHECKPOINT_DIR).join(checkpoint))?;
        Ok(Self { config, prepared, models, epoch: manifest.epoch })
    }

    pub fn system(&self) -> Result<System<'_>> {
        self.prepared.system(self.models.clone())
    }
}

/// Evaluates a run on its test split and writes the report, per-turn
/// rankings and the random-ranking baseline into `out`.
pub fn eval_run(run: &Run, options: &EvalOptions, out: &Path) -> Result<(Evaluation, EvalReport)> {
    let evaluation = run.prepared.evaluate(run.models.clone(), options)?;
    let baseline = run.prepared.random_baseline(run.config.seed)?.report;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(REPORT_JSON), &evaluation.report.to_json()?)?;
    write(&out.join(REPORT_TXT), &evaluation.report.to_table())?;
    write(&out.join(RANKINGS_FILE), &evaluation.rankings_jsonl()?)?;
    write(&out.join(BASELINE_FILE), &baseline.to_json()?)?;
    Ok((evaluation, baseline))
}

/// Entities whose label occurs in `text` as a whole run of words,
/// compared case-insensitively.
pub fn match_entities(graph: &KnowledgeGraph, text: &str) -> BTreeSet<String> {
    let words = split_words(text);
    let mut found = BTreeSet::new();
    for (id, label) in graph.entity_labels() {
        let needle = split_words(label);
        if !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice()) {
            found.insert(id.clone());
        }
    }
    found
}

/// Dialog state of an interactive session.
pub struct Session<'r> {
    system: System<'r>,
    graph: &'r KnowledgeGraph,
    history: Vec<Exchange>,
    context: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct AskOutcome {
    pub output: TurnOutput,
    pub encoder_input: Vec<u32>,
}

impl<'r> Session<'r> {
    pub fn new(run: &'r Run) -> Result<Self> {
        Ok(Self { system: run.system()?, graph: &run.prepared.graph, history: Vec::new(), context: BTreeSet::new() })
    }

    pub fn history(&self) -> &[Exchange] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.context.clear();
    }

    /// Answers one question. Context entities are the ones named in this
    /// question plus those carried from earlier turns, unless `gold`
    /// supplies them. Nothing changes when no entity is known.
    pub fn ask(&mut self, question: &str, gold: Option<&[String]>) -> Result<AskOutcome> {
        let context: BTreeSet<String> = match gold {
            Some(ids) => ids.iter().cloned().collect(),
            None => self.context.iter().cloned().chain(match_entities(self.graph, question)).collect(),
        };
        if context.is_empty() {
            return Err(Error::invalid("no context entities found"));
        }
        let context: Vec<String> = context.into_iter().collect();
        let query = TurnQuery {
            question,
            history: &self.history,
            context_entities: &context,
            graph: self.graph,
            gold_domain: None,
        };
        let encoder_input = self.system.encoder_input(&query);
        let output = self.system.solve(&query)?;
        self.context.extend(context);
        if let Some(top) = output.answers.first() {
            self.context.insert(top.clone());
        }
        self.history.push(Exchange { question: question.to_string(), response: output.response.clone() });
        Ok(AskOutcome { output, encoder_input })
    }

    /// Human-readable block: domain, response, top-5 answers.
    pub fn render(&self, out: &TurnOutput) -> String {
        let mut s = String::new();
        let domain = self.system.domains.labels().get(out.domain).map(String::as_str).unwrap_or("?");
        let _ = writeln!(s, "domain: {domain} ({:.3})", out.domain_probs[out.domain]);
        let _ = writeln!(s, "response: {}", out.response);
        let mut seen = BTreeSet::new();
        for r in out.ranking.0.iter().filter(|r| seen.insert(r.path.endpoint().to_string())).take(5) {
            let _ = writeln!(
                s,
                "  {:<24} {:>7.3}  {}",
                self.graph.label(r.path.endpoint()),
                r.score,
                verbalize_path(&r.path, self.graph)
            );
        }
        s
    }
}

/// Candidate paths from `entities`, labelled against `answers` when given.
pub fn dump_paths(
    graph: &KnowledgeGraph,
    entities: &[String],
    max_hops: usize,
    answers: Option<&[String]>,
) -> Result<String> {
    let paths: Vec<ContextPath> = extract_context_paths(graph, entities.iter(), max_hops)?;
    let labelled: Vec<(ContextPath, &str)> = match answers {
        Some(a) => {
            let (pos, neg) = label_paths(paths, &a.iter().cloned().collect());
            let mut all: Vec<_> = pos.into_iter().map(|p| (p, "+")).chain(neg.into_iter().map(|p| (p, "-"))).collect();
            all.sort();
            all
        }
        None => paths.into_iter().map(|p| (p, "?")).collect(),
    };
    let mut s = String::new();
    for (p, mark) in &labelled {
        let _ = writeln!(s, "{mark}\t{p}\t{}", verbalize_path(p, graph));
    }
    Ok(s)
}

/// One run's evaluation as read back for comparison.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub ablation: String,
    pub report: EvalReport,
}

pub fn read_run_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_JSON);
    if !path.is_file() {
        return Err(Error::Config(format!("no {REPORT_JSON} in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    let ablation = match RunConfig::load(&dir.join(EFFECTIVE_CONFIG), &Default::default()) {
        Ok(c) => c.ablation.name().to_string(),
        Err(_) => "?".to_string(),
    };
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunReport { name, ablation, report })
}

/// Overall comparison (one row per run), then MRR per domain.
pub fn comparison_tables(runs: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20}{:<18}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
        "run", "ablation", "P@1", "H@5", "H@10", "MRR", "dom F1", "BLEU-4", "METEOR"
    );
    for r in runs {
        let m = &r.report.overall;
        let _ = writeln!(
            s,
            "{:<20}{:<18}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
            r.name,
            r.ablation,
            m.p_at_1,
            m.h_at_5,
            m.h_at_10,
            m.mrr,
            r.report.domain_identification.macro_avg.f1,
            r.report.bleu4,
            r.report.meteor
        );
    }
    let domains: BTreeSet<&str> = runs.iter().flat_map(|r| r.report.per_domain.iter().map(|d| d.domain.as_str())).collect();
    let _ = write!(s, "\nMRR by domain\n{:<20}", "run");
    for d in &domains {
        let _ = write!(s, "{d:>12}");
    }
    s.push('\n');
    for r in runs {
        let by: BTreeMap<&str, f64> = r.report.per_domain.iter().map(|d| (d.domain.as_str(), d.metrics.mrr)).collect();
        let _ = write!(s, "{:<20}", r.name);
        for d in &domains {
            match by.get(d) {
                Some(v) => {
                    let _ = write!(s, "{v:>12.3}");
                }
                None => {
                    let _ = write!(s, "{:>12}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Grouped bar chart of H@5 (blue) and H@10 (orange) per run, left to
/// right in table order, on a 0..1 scale with grid lines every 0.25.
pub fn plot_hits(runs: &[RunReport], path: &Path) -> Result<()> {
    const H: u32 = 300;
    const MARGIN: u32 = 20;
    const BAR: u32 = 24;
    const GAP: u32 = 16;
    let width = MARGIN * 2 + runs.len().max(1) as u32 * (2 * BAR + GAP);
    let mut img = image::RgbImage::from_pixel(width, H + 2 * MARGIN, image::Rgb([255, 255, 255]));
    let plot_h = H as f64;
    for q in 0..=4 {
        let y = MARGIN + H - (plot_h * q as f64 / 4.0).round() as u32;
        for x in MARGIN..width - MARGIN {
            img.put_pixel(x, y, image::Rgb([210, 210, 210]));
        }
    }
    let colors = [image::Rgb([31, 119, 180]), image::Rgb([255, 127, 14])];
    for (i, r) in runs.iter().enumerate() {
        let x0 = MARGIN + GAP / 2 + i as u32 * (2 * BAR + GAP);
        for (k, v) in [r.report.overall.h_at_5, r.report.overall.h_at_10].into_iter().enumerate() {
            let h = (plot_h * v.clamp(0.0, 1.0)).round() as u32;
            for x in x0 + k as u32 * BAR..x0 + (k as u32 + 1) * BAR - 2 {
                for y in MARGIN + H - h..MARGIN + H {
                    img.put_pixel(x, y, colors[k]);
                }
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
