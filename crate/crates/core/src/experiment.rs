//! End-to-end runs: split a benchmark, build vocabularies and instances,
//! train, and evaluate on the held-out conversations.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::corpus::{build_instances, corpus_texts, Conversation, Domains, Tokenizer, TrainingInstance};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, Evaluation, ShuffledRanker};
use crate::inference::{InferenceOptions, Models, System};
use crate::kg::KnowledgeGraph;
use crate::model::DomainVocabulary;
use crate::trainer::{train, Ablation, CheckpointPlan, Hyperparameters, TrainData, TrainOutcome};

/// Train/validation/test fractions of the conversation list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: f64,
    pub val: f64,
}

impl Default for Split {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

/// Contiguous split in file order; the remainder after train and
/// validation is the test set.
pub fn split_conversations(conversations: &[Conversation], split: Split) -> Result<[Vec<Conversation>; 3]> {
    if !(split.train > 0.0 && split.val >= 0.0 && split.train + split.val < 1.0) {
        return Err(Error::Config(format!("invalid split {split:?}")));
    }
    let n = conversations.len();
    let a = ((n as f64) * split.train).round() as usize;
    let b = (((n as f64) * (split.train + split.val)).round() as usize).max(a);
    if a == 0 || b >= n {
        return Err(Error::Config(format!("{n} conversations are too few for split {split:?}")));
    }
    Ok([conversations[..a].to_vec(), conversations[a..b].to_vec(), conversations[b..].to_vec()])
}

/// Everything derived from the raw benchmark before training.
pub struct Prepared {
    pub graph: KnowledgeGraph,
    pub domains: Domains,
    pub train: Vec<Conversation>,
    pub val: Vec<Conversation>,
    pub test: Vec<Conversation>,
    pub tokenizer: Tokenizer,
    pub embedder: Embedder,
    pub domain_embeddings: Mat,
    pub instances: Vec<TrainingInstance>,
    pub ablation: Ablation,
    pub max_hops: usize,
}

impl Prepared {
    /// Tokenizer from training texts and graph labels; instances from the
    /// training conversations.
    pub fn new(
        graph: KnowledgeGraph,
        conversations: &[Conversation],
        domains: Domains,
        split: Split,
        ablation: Ablation,
        embedder: Embedder,
        max_hops: usize,
    ) -> Result<Self> {
        let [train, val, test] = split_conversations(conversations, split)?;
        let tokenizer = Tokenizer::train(corpus_texts(&train, &graph));
        let domain_embeddings = embedder.embed_domains(&domains.0)?;
        let instances = build_instances(&train, &tokenizer, &domains, &graph, max_hops, ablation.instance_options())?;
        Ok(Self { graph, domains, train, val, test, tokenizer, embedder, domain_embeddings, instances, ablation, max_hops })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            tokenizer: &self.tokenizer,
            domain_names: &self.domains,
            domain_embeddings: &self.domain_embeddings,
            embedder: &self.embedder,
            graph: &self.graph,
            train: &self.instances,
            val: &self.val,
            max_hops: self.max_hops,
        }
    }

    pub fn train(&self, hyper: &Hyperparameters, checkpoints: Option<CheckpointPlan>) -> Result<TrainOutcome> {
        train(hyper, &self.ablation, &self.train_data(), checkpoints)
    }

    pub fn system(&self, models: Models) -> Result<System<'_>> {
        Ok(System {
            models,
            tokenizer: self.tokenizer.clone(),
            domains: DomainVocabulary::from_parts(self.domains.0.clone(), self.domain_embeddings.clone())?,
            embedder: &self.embedder,
            options: InferenceOptions {
                history_mode: self.ablation.history_mode,
                max_hops: self.max_hops,
                use_domain: self.ablation.use_domain,
            },
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { max_hops: self.max_hops, response_mode: self.ablation.response_mode, ..EvalOptions::default() }
    }

    /// Test-set evaluation of trained models.
    pub fn evaluate(&self, models: Models, options: &EvalOptions) -> Result<Evaluation> {
        let system = self.system(models)?;
        evaluate(&system, &self.test, &self.graph, &self.domains, options)
    }

    /// Test-set evaluation of the random-score ranker.
    pub fn random_baseline(&self, seed: u64) -> Result<Evaluation> {
        evaluate(&ShuffledRanker::new(seed, self.max_hops), &self.test, &self.graph, &self.domains, &self.eval_options())
    }
}
