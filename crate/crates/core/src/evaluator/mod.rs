//! Turn-by-turn evaluation with generated dialog history, aggregated overall
//! and per domain.

pub mod metrics;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenizer::split_words;
use crate::corpus::{Conversation, Domains, Exchange, ResponseMode};
use crate::error::{Error, Result};
use crate::inference::{Solver, TurnOutput, TurnQuery};
use crate::kg::{extract_context_paths, KnowledgeGraph};
use crate::model::ranker::rank_candidates;
use crate::model::RankedCandidates;

pub use metrics::{bleu4, domain_prf, hits_at_k, meteor_simplified, precision_at_1, reciprocal_rank, DomainScores, Prf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_hops: usize,
    /// Feed gold responses forward instead of generated ones.
    pub gold_history: bool,
    /// How gold responses appear in the history when `gold_history` is set.
    pub response_mode: ResponseMode,
    /// Give the ranker the gold domain instead of the predicted one.
    pub use_gold_domain: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_hops: 3, gold_history: false, response_mode: ResponseMode::Fluent, use_gold_domain: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnResult {
    pub conversation: String,
    pub turn: usize,
    pub ranked_answers: Vec<String>,
    pub gold_answers: Vec<String>,
    pub predicted_domain: usize,
    pub gold_domain: usize,
    pub generated_response: String,
    pub gold_response: String,
    pub had_gold_paths: bool,
    #[serde(skip)]
    pub ranking: RankedCandidates,
}

impl TurnResult {
    fn gold_set(&self) -> HashSet<String> {
        self.gold_answers.iter().cloned().collect()
    }

    /// Ranking scores; zero throughout when no candidate reaches a gold answer.
    pub fn scores(&self) -> [f64; 4] {
        if !self.had_gold_paths {
            return [0.0; 4];
        }
        let g = self.gold_set();
        let r = &self.ranked_answers;
        [precision_at_1(r, &g), hits_at_k(r, &g, 5), hits_at_k(r, &g, 10), reciprocal_rank(r, &g)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RankingMetrics {
    pub turns: usize,
    pub p_at_1: f64,
    pub h_at_5: f64,
    pub h_at_10: f64,
    pub mrr: f64,
    pub missing_gold: usize,
}

impl RankingMetrics {
    fn from_turns<'a>(turns: impl Iterator<Item = &'a TurnResult>) -> Self {
        let mut sums = [0.0; 4];
        let mut n = 0;
        let mut missing = 0;
        for t in turns {
            n += 1;
            missing += usize::from(!t.had_gold_paths);
            for (s, v) in sums.iter_mut().zip(t.scores()) {
                *s += v;
            }
        }
        let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
        Self {
            turns: n,
            p_at_1: mean(sums[0]),
            h_at_5: mean(sums[1]),
            h_at_10: mean(sums[2]),
            mrr: mean(sums[3]),
            missing_gold: missing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRow {
    pub domain: String,
    #[serde(flatten)]
    pub metrics: RankingMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub overall: RankingMetrics,
    pub per_domain: Vec<DomainRow>,
    pub domain_identification: DomainScores,
    pub bleu4: f64,
    pub meteor: f64,
    /// `generated` or `gold`.
    pub history: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned text tables: ranking per domain, domain identification,
    /// response generation.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Ranking ({} history)", self.history);
        let _ = writeln!(s, "{:<16}{:>7}{:>8}{:>8}{:>8}{:>8}{:>9}", "domain", "turns", "P@1", "H@5", "H@10", "MRR", "missing");
        let row = |s: &mut String, name: &str, m: &RankingMetrics| {
            let _ = writeln!(
                s,
                "{:<16}{:>7}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>9}",
                name, m.turns, m.p_at_1, m.h_at_5, m.h_at_10, m.mrr, m.missing_gold
            );
        };
        for d in &self.per_domain {
            row(&mut s, &d.domain, &d.metrics);
        }
        row(&mut s, "overall", &self.overall);
        let m = &self.domain_identification.macro_avg;
        let _ = writeln!(s, "\nDomain identification (macro)");
        let _ = writeln!(s, "{:>10}{:>10}{:>10}", "P", "R", "F1");
        let _ = writeln!(s, "{:>10.3}{:>10.3}{:>10.3}", m.precision, m.recall, m.f1);
        let _ = writeln!(s, "\nResponse generation (METEOR: exact unigram matches only)");
        let _ = writeln!(s, "{:>10}{:>10}", "BLEU-4", "METEOR");
        let _ = writeln!(s, "{:>10.3}{:>10.3}", self.bleu4, self.meteor);
        s
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub turns: Vec<TurnResult>,
}

impl Evaluation {
    /// One JSON object per turn with its ranked paths.
    pub fn rankings_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Entry<'a> {
            path: String,
            score: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            endpoint: Option<&'a str>,
        }
        let mut out = String::new();
        for t in &self.turns {
            let ranking: Vec<Entry> = t
                .ranking
                .0
                .iter()
                .map(|r| Entry { path: r.path.to_string(), score: r.score, endpoint: Some(r.path.endpoint()) })
                .collect();
            let line = serde_json::json!({
                "turn": format!("{}#{}", t.conversation, t.turn),
                "ranking": ranking,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Builds the report from per-turn results.
pub fn aggregate(turns: Vec<TurnResult>, domains: &Domains, gold_history: bool) -> Result<Evaluation> {
    if turns.is_empty() {
        return Err(Error::invalid("no turns to evaluate"));
    }
    let overall = RankingMetrics::from_turns(turns.iter());
    let per_domain = domains
        .0
        .iter()
        .enumerate()
        .map(|(id, name)| DomainRow {
            domain: name.clone(),
            metrics: RankingMetrics::from_turns(turns.iter().filter(|t| t.gold_domain == id)),
        })
        .collect();
    let predicted: Vec<usize> = turns.iter().map(|t| t.predicted_domain).collect();
    let gold: Vec<usize> = turns.iter().map(|t| t.gold_domain).collect();
    let domain_identification = domain_prf(&predicted, &gold)?;
    let mut bleu = 0.0;
    let mut meteor = 0.0;
    for t in &turns {
        let cand = split_words(&t.generated_response);
        let reference = split_words(&t.gold_response);
        bleu += bleu4(&cand, &reference);
        meteor += meteor_simplified(&cand, &reference);
    }
    let n = turns.len() as f64;
    Ok(Evaluation {
        report: EvalReport {
            overall,
            per_domain,
            domain_identification,
            bleu4: bleu / n,
            meteor: meteor / n,
            history: if gold_history { "gold" } else { "generated" }.to_string(),
        },
        turns,
    })
}

/// Answers every turn in order, feeding each conversation's responses
/// forward, and scores the results.
pub fn evaluate(
    solver: &dyn Solver,
    conversations: &[Conversation],
    graph: &KnowledgeGraph,
    domains: &Domains,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let mut results = Vec::new();
    for conv in conversations {
        let gold_domain = domains.id(&conv.domain).ok_or_else(|| Error::Schema {
            conversation: conv.id.clone(),
            message: format!("domain `{}` not in domain vocabulary", conv.domain),
        })?;
        let mut history: Vec<Exchange> = Vec::new();
        for (i, turn) in conv.turns.iter().enumerate() {
            let query = TurnQuery {
                question: &turn.question,
                history: &history,
                context_entities: &turn.context_entities,
                graph,
                gold_domain: options.use_gold_domain.then_some(gold_domain),
            };
            let out = solver.solve(&query)?;
            let gold = turn.answer_set();
            let had_gold_paths = extract_context_paths(graph, turn.context_entities.iter(), options.max_hops)?
                .iter()
                .any(|p| gold.contains(p.endpoint()));
            let response = if options.gold_history {
                match options.response_mode {
                    ResponseMode::Fluent => turn.fluent_response.clone(),
                    ResponseMode::BareAnswer => turn.bare_answer(),
                }
            } else {
                out.response.clone()
            };
            history.push(Exchange { question: turn.question.clone(), response });
            results.push(TurnResult {
                conversation: conv.id.clone(),
                turn: i,
                ranked_answers: out.answers,
                gold_answers: turn.answers.clone(),
                predicted_domain: out.domain,
                gold_domain,
                generated_response: out.response,
                gold_response: turn.fluent_response.clone(),
                had_gold_paths,
                ranking: out.ranking,
            });
        }
    }
    aggregate(results, domains, options.gold_history)
}

/// Ranks candidates by uniformly random scores; a chance-level reference.
pub struct ShuffledRanker {
    rng: Mutex<ChaCha8Rng>,
    max_hops: usize,
}

impl ShuffledRanker {
    pub fn new(seed: u64, max_hops: usize) -> Self {
        Self { rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)), max_hops }
    }
}

impl Solver for ShuffledRanker {
    fn solve(&self, query: &TurnQuery) -> Result<TurnOutput> {
        let candidates = extract_context_paths(query.graph, query.context_entities.iter(), self.max_hops)?;
        let mut rng = self.rng.lock().expect("rng lock");
        let scored = candidates.into_iter().map(|p| (p, rng.gen_range(-1.0..1.0))).collect();
        let ranking = rank_candidates(scored)?;
        Ok(TurnOutput {
            domain: query.gold_domain.unwrap_or(0),
            domain_probs: Vec::new(),
            answers: ranking.answers(),
            ranking,
            response: String::new(),
        })
    }
}
