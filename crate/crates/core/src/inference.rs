//! Answering one turn: encode the dialog, identify the domain, rank the
//! candidate paths, and generate the fluent response.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{assemble_input, Exchange, HistoryMode, Tokenizer, MAX_TARGET_TOKENS};
use crate::embed::Embedder;
use crate::error::Result;
use crate::kg::{extract_context_paths, verbalize_path, ContextPath, KnowledgeGraph};
use crate::model::ranker::rank_candidates;
use crate::model::{predict_domain, substitute_answer, DomainVocabulary, EncoderOutput, Praline, RankedCandidates};

/// Frozen embeddings of verbalized paths, one row per path.
pub fn embed_paths(paths: &[ContextPath], graph: &KnowledgeGraph, embedder: &Embedder) -> Result<Mat> {
    let texts: Vec<String> = paths.iter().map(|p| verbalize_path(p, graph)).collect();
    embedder.embed_paths(&texts)
}

/// Trained parameters: one shared model, or one per task.
#[derive(Debug, Clone)]
pub enum Models {
    Joint(Praline),
    Separate { pointer: Praline, decoder: Praline, ranker: Praline },
}

impl Models {
    pub fn pointer(&self) -> &Praline {
        match self {
            Models::Joint(m) => m,
            Models::Separate { pointer, .. } => pointer,
        }
    }

    pub fn decoder(&self) -> &Praline {
        match self {
            Models::Joint(m) => m,
            Models::Separate { decoder, .. } => decoder,
        }
    }

    pub fn ranker(&self) -> &Praline {
        match self {
            Models::Joint(m) => m,
            Models::Separate { ranker, .. } => ranker,
        }
    }

    /// `(name, model)` pairs in storage order.
    pub fn named(&self) -> Vec<(&'static str, &Praline)> {
        match self {
            Models::Joint(m) => vec![("joint", m)],
            Models::Separate { pointer, decoder, ranker } => {
                vec![("pointer", pointer), ("decoder", decoder), ("ranker", ranker)]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub history_mode: HistoryMode,
    pub max_hops: usize,
    pub use_domain: bool,
}

/// Everything known about a turn before answering it.
#[derive(Debug, Clone, Copy)]
pub struct TurnQuery<'a> {
    pub question: &'a str,
    pub history: &'a [Exchange],
    pub context_entities: &'a [String],
    pub graph: &'a KnowledgeGraph,
    /// Replaces the predicted domain in the conversation tower when set.
    pub gold_domain: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub domain: usize,
    pub domain_probs: Vec<f64>,
    pub ranking: RankedCandidates,
    /// Deduplicated endpoints in rank order.
    pub answers: Vec<String>,
    pub response: String,
}

/// Anything that can answer a turn; lets evaluation run against reference
/// rankers as well as trained models.
pub trait Solver {
    fn solve(&self, query: &TurnQuery) -> Result<TurnOutput>;
}

/// A trained model with the vocabularies it was trained against.
#[derive(Debug)]
pub struct System<'e> {
    pub models: Models,
    pub tokenizer: Tokenizer,
    pub domains: DomainVocabulary,
    pub embedder: &'e Embedder,
    pub options: InferenceOptions,
}

fn cosine_or_zero(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let den = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    // A tower output that is exactly zero has no direction; score it neutrally.
    if den == 0.0 {
        0.0
    } else {
        (a.dot(&b) / den).clamp(-1.0, 1.0)
    }
}

impl System<'_> {
    pub fn encoder_input(&self, query: &TurnQuery) -> Vec<u32> {
        assemble_input(query.history, query.question, &self.tokenizer, self.options.history_mode)
    }

    /// Scores `candidates` against one encoding and domain choice.
    pub fn rank(
        &self,
        enc: &EncoderOutput,
        domain: Option<usize>,
        candidates: Vec<ContextPath>,
        graph: &KnowledgeGraph,
    ) -> Result<RankedCandidates> {
        if candidates.is_empty() {
            return Ok(RankedCandidates::default());
        }
        let ranker = self.models.ranker();
        let domain_row = domain.filter(|_| self.options.use_domain).map(|d| self.domains.embedding(d));
        let phi_c: Array1<f64> = ranker.conversation_embedding(enc, domain_row)?;
        let phi_p = ranker.path_embeddings(&embed_paths(&candidates, graph, self.embedder)?)?;
        let scored = candidates
            .into_iter()
            .zip(phi_p.rows())
            .map(|(p, row)| (p, cosine_or_zero(phi_c.view(), row)))
            .collect();
        rank_candidates(scored)
    }
}

impl Solver for System<'_> {
    fn solve(&self, query: &TurnQuery) -> Result<TurnOutput> {
        let input = self.encoder_input(query);
        let encode = |m: &Praline| m.encode(&input);
        let (pointer_enc, decoder_enc, ranker_enc) = match &self.models {
            Models::Joint(m) => {
                let e = encode(m)?;
                (e.clone(), e.clone(), e)
            }
            Models::Separate { pointer, decoder, ranker } => (encode(pointer)?, encode(decoder)?, encode(ranker)?),
        };

        let domain_probs = self.models.pointer().domain_distribution(&pointer_enc, &self.domains)?;
        let domain = predict_domain(&domain_probs);

        let candidates = extract_context_paths(query.graph, query.context_entities.iter(), self.options.max_hops)?;
        let ranking = self.rank(&ranker_enc, Some(query.gold_domain.unwrap_or(domain)), candidates, query.graph)?;
        let answers = ranking.answers();

        let generated = self.models.decoder().generate(&decoder_enc, MAX_TARGET_TOKENS);
        let text = self.tokenizer.decode(&generated);
        let response = match answers.first() {
            Some(a) => substitute_answer(&text, &query.graph.label(a)),
            None => text,
        };
        Ok(TurnOutput { domain, domain_probs, ranking, answers, response })
    }
}
