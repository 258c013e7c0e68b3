use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use praline::app::{self, Run, Session};
use praline::config::{DataPaths, Overrides, RunConfig};
use praline::corpus::synth::{generate_synthetic_benchmark, SynthSpec};
use praline::corpus::load_conversations;
use praline::evaluator::EvalOptions;
use praline::kg::KnowledgeGraph;
use praline::Error;

/// Contrastive ranking of knowledge-graph paths for conversational QA.
#[derive(Parser)]
#[command(name = "praline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        domains: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        relations: Option<usize>,
        #[arg(long)]
        conversations: Option<usize>,
        #[arg(long)]
        turns: Option<usize>,
        /// Fraction of turns whose context cannot reach the answer.
        #[arg(long)]
        corruption_rate: Option<f64>,
        #[arg(long)]
        max_hops: Option<usize>,
    },
    /// Train a model; writes config, checkpoints and logs to the output dir.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the four files written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// full, w/o-full-conv, w/o-domain, w/o-fluent-resp or train-separately.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run on its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "best")]
        checkpoint: String,
        /// Feed gold responses forward instead of generated ones.
        #[arg(long)]
        gold_history: bool,
        /// Give the ranker the gold domain.
        #[arg(long)]
        gold_domain: bool,
        /// Where to write reports; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive question answering over a trained run (reads stdin).
    Ask {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "best")]
        checkpoint: String,
        /// Replay a conversation's questions with its gold context entities.
        #[arg(long)]
        replay: Option<String>,
    },
    /// Print the candidate paths for a turn or a set of entities.
    Paths {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated entity ids.
        #[arg(long, value_delimiter = ',')]
        entities: Vec<String>,
        #[arg(long)]
        conversation: Option<String>,
        #[arg(long, default_value_t = 0)]
        turn: usize,
        #[arg(long, default_value_t = 3)]
        hops: usize,
    },
    /// Compare evaluated runs; optionally draw an H@5/H@10 bar chart.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Schema { .. } | Error::NoTriples | Error::UnknownEntity(_) => 2,
        Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> praline::Result<()> {
    match command {
        Command::Synth { out, seed, domains, entities, relations, conversations, turns, corruption_rate, max_hops } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                seed: seed.unwrap_or(d.seed),
                n_domains: domains.unwrap_or(d.n_domains),
                n_entities: entities.unwrap_or(d.n_entities),
                n_relations: relations.unwrap_or(d.n_relations),
                n_conversations: conversations.unwrap_or(d.n_conversations),
                turns_per_conversation: turns.unwrap_or(d.turns_per_conversation),
                corruption_rate: corruption_rate.unwrap_or(d.corruption_rate),
                max_hops: max_hops.unwrap_or(d.max_hops),
                ..d
            };
            generate_synthetic_benchmark(&spec)?.write_to(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { config, data, out, ablation, profile, epochs, lr, seed } => {
            let overrides = Overrides { seed, output_dir: out, data_dir: data, ablation, epochs, learning_rate: lr, profile };
            let config = match config {
                Some(path) => RunConfig::load(&path, &overrides)?,
                None => RunConfig::from_toml("", Path::new("."), &overrides)?,
            };
            let s = app::train_run(&config)?;
            println!(
                "trained {} (seed {}): best epoch {} of {}, validation MRR {:.3}; outputs in {}",
                s.ablation,
                s.seed,
                s.best_epoch,
                s.epochs,
                s.best_val_mrr,
                config.output_dir.display()
            );
        }
        Command::Eval { run, checkpoint, gold_history, gold_domain, out } => {
            let opened = Run::open(&run, &checkpoint)?;
            let options = EvalOptions {
                gold_history,
                use_gold_domain: gold_domain,
                ..opened.prepared.eval_options()
            };
            let (evaluation, baseline) = app::eval_run(&opened, &options, out.as_deref().unwrap_or(&run))?;
            print!("{}", evaluation.report.to_table());
            println!("\nrandom-ranking baseline: MRR {:.3}, H@5 {:.3}", baseline.overall.mrr, baseline.overall.h_at_5);
        }
        Command::Ask { run, checkpoint, replay } => ask(&run, &checkpoint, replay.as_deref())?,
        Command::Paths { data, entities, conversation, turn, hops } => {
            let files = DataPaths::in_dir(&data);
            let graph = KnowledgeGraph::load(&files.triples, &files.labels)?;
            let text = match conversation {
                Some(id) => {
                    let convs = load_conversations(&files.conversations)?;
                    let conv = convs
                        .iter()
                        .find(|c| c.id == id)
                        .ok_or_else(|| Error::Config(format!("no conversation `{id}`")))?;
                    let t = conv
                        .turns
                        .get(turn)
                        .ok_or_else(|| Error::Config(format!("conversation `{id}` has no turn {turn}")))?;
                    app::dump_paths(&graph, &t.context_entities, hops, Some(&t.answers))?
                }
                None if !entities.is_empty() => app::dump_paths(&graph, &entities, hops, None)?,
                None => return Err(Error::Config("give --entities or --conversation".into())),
            };
            print!("{text}");
        }
        Command::Report { runs, plot } => {
            let reports = runs.iter().map(|r| app::read_run_report(r)).collect::<praline::Result<Vec<_>>>()?;
            print!("{}", app::comparison_tables(&reports));
            if let Some(p) = plot {
                app::plot_hits(&reports, &p)?;
                println!("\nwrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn ask(run_dir: &Path, checkpoint: &str, replay: Option<&str>) -> praline::Result<()> {
    let run = Run::open(run_dir, checkpoint)?;
    let mut session = Session::new(&run)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let io_err = |e| Error::Io { path: "<stdout>".into(), source: e };

    if let Some(id) = replay {
        let convs = load_conversations(&run.config.data.conversations)?;
        let conv = convs
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Config(format!("no conversation `{id}`")))?;
        for turn in &conv.turns {
            let r = session.ask(&turn.question, Some(&turn.context_entities))?;
            writeln!(out, "> {}\n{}", turn.question, session.render(&r.output)).map_err(io_err)?;
        }
        return Ok(());
    }

    writeln!(out, "ask a question; `:reset` clears the dialog, `:quit` exits").map_err(io_err)?;
    for line in io::stdin().lock().lines() {
        let line = line.map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
        let q = line.trim();
        match q {
            "" => continue,
            ":quit" | ":q" => break,
            ":reset" => {
                session.reset();
                writeln!(out, "history cleared\n").map_err(io_err)?;
            }
            _ => match session.ask(q, None) {
                Ok(r) => writeln!(out, "{}", session.render(&r.output)).map_err(io_err)?,
                Err(Error::InvalidInput(msg)) => writeln!(out, "{msg}\n").map_err(io_err)?,
                Err(e) => return Err(e),
            },
        }
    }
    Ok(())
}
