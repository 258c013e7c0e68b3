//! Joint training of encoder, decoder, domain pointer, and ranking towers,
//! plus the separately-trained variant and numerical gradient checks.

pub mod checkpoint;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamSet, Tape};
use crate::corpus::{make_batches, Batch, Conversation, Domains, HistoryMode, ResponseMode, Tokenizer, TrainingInstance};
use crate::embed::{splitmix64, Embedder};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions};
use crate::inference::{embed_paths, InferenceOptions, Models, System};
use crate::kg::{ContextPath, KnowledgeGraph};
use crate::model::{Dropout, LossInput, LossWeights, ModelConfig, Praline, RankPair};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub v_max: usize,
    pub s_max: usize,
    pub lambda_dm: f64,
    pub lambda_rk: f64,
    pub lambda_dec: f64,
    pub margin: f64,
    pub grad_clip: f64,
    /// Score each element against every path in its batch, not one.
    pub all_pairs: bool,
    pub seed: u64,
}

impl Hyperparameters {
    /// The published full-scale settings.
    pub fn paper() -> Self {
        Self {
            epochs: 120,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            dropout: 0.1,
            d_model: 768,
            n_heads: 12,
            n_layers: 6,
            ff_dim: 3072,
            v_max: 50,
            s_max: 150,
            lambda_dm: 0.25,
            lambda_rk: 1.0,
            lambda_dec: 0.25,
            margin: 0.1,
            grad_clip: 5.0,
            all_pairs: false,
            seed: 7,
        }
    }

    /// Laptop-scale settings with the same loss weights and margin. The
    /// small model gets only about 1,200 optimizer steps, so it takes a
    /// larger step size than the full-scale one.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            learning_rate: 2e-3,
            batch_size: 16,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_dim: 256,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda_dm, self.lambda_rk, self.lambda_dec].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size must be even and at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("learning rate and gradient clip must be positive".into()));
        }
        if self.v_max != crate::corpus::MAX_TARGET_TOKENS || self.s_max != crate::corpus::MAX_INPUT_TOKENS {
            return Err(Error::Config(format!(
                "sequence limits are fixed at s_max {} and v_max {}",
                crate::corpus::MAX_INPUT_TOKENS,
                crate::corpus::MAX_TARGET_TOKENS
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, d_kg: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_kg,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }

    pub fn loss_weights(&self, use_domain: bool) -> LossWeights {
        LossWeights {
            lambda_dm: self.lambda_dm,
            lambda_rk: self.lambda_rk,
            lambda_dec: self.lambda_dec,
            margin: self.margin,
            use_domain,
        }
    }
}

/// `λ1·L_dm + λ2·L_rk + λ3·L_dec`; negative components indicate a bug.
pub fn joint_loss(l_dm: f64, l_rk: f64, l_dec: f64, lambda_dm: f64, lambda_rk: f64, lambda_dec: f64) -> Result<f64> {
    for (name, v) in [("L_dm", l_dm), ("L_rk", l_rk), ("L_dec", l_dec)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(lambda_dm * l_dm + lambda_rk * l_rk + lambda_dec * l_dec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Joint,
    Separate,
}

/// Which conversational context the run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub history_mode: HistoryMode,
    pub use_domain: bool,
    pub response_mode: ResponseMode,
    pub training_mode: TrainingMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["full", "w/o-full-conv", "w/o-domain", "w/o-fluent-resp", "train-separately"];

    pub fn full() -> Self {
        Self {
            history_mode: HistoryMode::Full,
            use_domain: true,
            response_mode: ResponseMode::Fluent,
            training_mode: TrainingMode::Joint,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let full = Self::full();
        match name {
            "full" => Ok(full),
            "w/o-full-conv" => Ok(Self { history_mode: HistoryMode::PreviousTurnOnly, ..full }),
            "w/o-domain" => Ok(Self { use_domain: false, ..full }),
            "w/o-fluent-resp" => Ok(Self { response_mode: ResponseMode::BareAnswer, ..full }),
            "train-separately" => Ok(Self { training_mode: TrainingMode::Separate, ..full }),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}`; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    /// The table name of this configuration, or `custom`.
    pub fn name(&self) -> &'static str {
        Self::NAMES
            .iter()
            .find(|n| Self::parse(n).ok().as_ref() == Some(self))
            .copied()
            .unwrap_or("custom")
    }

    pub fn instance_options(&self) -> crate::corpus::InstanceOptions {
        crate::corpus::InstanceOptions { history_mode: self.history_mode, response_mode: self.response_mode }
    }
}

/// One row per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_dm: f64,
    pub loss_rk: f64,
    pub loss_dec: f64,
    pub val_mrr: f64,
    pub val_h5: f64,
}

/// Append-only per-epoch log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,L,L_dm,L_rk,L_dec,val_mrr,val_h5";

    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.loss, r.loss_dm, r.loss_rk, r.loss_dec, r.val_mrr, r.val_h5
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Parse { file: "train log".into(), line: 1, message: "unexpected header".into() });
        }
        let mut log = Self::default();
        for (i, line) in lines.enumerate() {
            let bad = |m: String| Error::Parse { file: "train log".into(), line: i + 2, message: m };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(e.to_string()));
            log.push(EpochRecord {
                epoch: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                loss: num(1)?,
                loss_dm: num(2)?,
                loss_rk: num(3)?,
                loss_dec: num(4)?,
                val_mrr: num(5)?,
                val_h5: num(6)?,
            });
        }
        Ok(log)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Mat]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Frozen path vectors keyed by path.
#[derive(Debug, Clone, Default)]
pub struct PathTable(HashMap<ContextPath, Array1<f64>>);

impl PathTable {
    pub fn build(instances: &[TrainingInstance], graph: &KnowledgeGraph, embedder: &Embedder) -> Result<Self> {
        let mut paths: Vec<ContextPath> = instances.iter().flat_map(|i| i.positives.iter().chain(&i.negatives).cloned()).collect();
        paths.sort();
        paths.dedup();
        let rows = embed_paths(&paths, graph, embedder)?;
        Ok(Self(paths.into_iter().zip(rows.rows()).map(|(p, r)| (p, r.to_owned())).collect()))
    }

    pub fn get(&self, path: &ContextPath) -> Result<&Array1<f64>> {
        self.0.get(path).ok_or_else(|| Error::invalid(format!("no embedding for path {path}")))
    }
}

/// Everything a training run reads.
pub struct TrainData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub domain_names: &'a Domains,
    pub domain_embeddings: &'a Mat,
    pub embedder: &'a Embedder,
    pub graph: &'a KnowledgeGraph,
    pub train: &'a [TrainingInstance],
    pub val: &'a [Conversation],
    pub max_hops: usize,
}

impl TrainData<'_> {
    fn system<'s>(&'s self, models: Models, ablation: &Ablation) -> Result<System<'s>> {
        Ok(System {
            models,
            tokenizer: self.tokenizer.clone(),
            domains: crate::model::DomainVocabulary::from_parts(self.domain_names.0.clone(), self.domain_embeddings.clone())?,
            embedder: self.embedder,
            options: InferenceOptions {
                history_mode: ablation.history_mode,
                max_hops: self.max_hops,
                use_domain: ablation.use_domain,
            },
        })
    }

    fn validate(&self, models: Models, ablation: &Ablation) -> Result<(f64, f64)> {
        if self.val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let system = self.system(models, ablation)?;
        let options = EvalOptions { max_hops: self.max_hops, response_mode: ablation.response_mode, ..EvalOptions::default() };
        let r = evaluate(&system, self.val, self.graph, self.domain_names, &options)?.report;
        Ok((r.overall.mrr, r.overall.h_at_5))
    }
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointPlan<'a> {
    pub dir: &'a Path,
    /// Serialized run configuration stored in every manifest.
    pub config: &'a serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub log: TrainLog,
    /// Logs of the pointer and decoder loops when trained separately.
    pub extra_logs: Vec<(String, TrainLog)>,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
}

struct ElementResult {
    grads: Vec<Mat>,
    dm: f64,
    rk: f64,
    dec: f64,
    total: f64,
}

fn element_pairs(batch: &Batch, k: usize, data: &TrainData, paths: &PathTable, all_pairs: bool) -> Result<Vec<RankPair>> {
    let el = &batch.elements[k];
    let own = match (&el.path, el.rk_label.sign()) {
        (Some(p), Some(y)) => vec![RankPair { path: paths.get(p)?.clone(), y }],
        _ => return Ok(Vec::new()),
    };
    if !all_pairs {
        return Ok(own);
    }
    let gold: std::collections::HashSet<&str> =
        data.train[el.instance].positives.iter().map(|p| p.endpoint()).collect();
    let mut pairs = own;
    for (j, other) in batch.elements.iter().enumerate() {
        if j == k {
            continue;
        }
        if let Some(p) = &other.path {
            let y = if gold.contains(p.endpoint()) { 1.0 } else { -1.0 };
            pairs.push(RankPair { path: paths.get(p)?.clone(), y });
        }
    }
    Ok(pairs)
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ 0xD0_u64) ^ epoch as u64) ^ ((batch as u64) << 20 | index as u64))
}

/// One optimizer step over `batch`; returns the batch-averaged losses.
fn train_batch(
    model: &mut Praline,
    opt: &mut AdamW,
    batch: &Batch,
    coords: (usize, usize),
    data: &TrainData,
    paths: &PathTable,
    hyper: &Hyperparameters,
    weights: &LossWeights,
) -> Result<[f64; 4]> {
    let (epoch, b) = coords;
    let n = batch.len() as f64;
    let results: Vec<Result<ElementResult>> = (0..batch.len())
        .into_par_iter()
        .map(|k| {
            let el = &batch.elements[k];
            let inst = &data.train[el.instance];
            let input = LossInput {
                input_ids: &inst.input_ids,
                target_ids: &inst.target_ids,
                domain_id: inst.domain_id,
                domains: data.domain_embeddings,
                pairs: element_pairs(batch, k, data, paths, hyper.all_pairs)?,
            };
            let mut tape = Tape::new(model.params());
            let mut drop = Dropout::train(hyper.dropout, dropout_seed(hyper.seed, epoch, b, k));
            let vars = model.loss_on(&mut tape, &input, weights, &mut drop)?;
            let dm = tape.scalar(vars.dm);
            let rk = vars.rk.map_or(0.0, |v| tape.scalar(v));
            let dec = tape.scalar(vars.dec);
            let total = tape.scalar(vars.total);
            for (what, v) in [("L_dm", dm), ("L_rk", rk), ("L_dec", dec)] {
                if !v.is_finite() {
                    return Err(Error::NonFinite { epoch, batch: b, what: what.into() });
                }
            }
            let mut grads = model.params().zeros_like();
            tape.backward(vars.total, &mut grads);
            Ok(ElementResult { grads, dm, rk, dec, total })
        })
        .collect();

    let mut grads = model.params().zeros_like();
    let mut sums = [0.0; 4];
    for r in results {
        let r = r?;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            *acc += g;
        }
        for (s, v) in sums.iter_mut().zip([r.total, r.dm, r.rk, r.dec]) {
            *s += v;
        }
    }
    for g in grads.iter_mut() {
        g.mapv_inplace(|x| x / n);
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { epoch, batch: b, what: "gradient".into() });
    }
    clip_global_norm(&mut grads, hyper.grad_clip);
    opt.update(model.params_mut(), &grads);
    if !model.params().all_finite() {
        return Err(Error::NonFinite { epoch, batch: b, what: "parameters".into() });
    }
    Ok(sums.map(|s| s / n))
}

fn check_inputs(hyper: &Hyperparameters, data: &TrainData) -> Result<()> {
    hyper.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("no training instances"));
    }
    if !data.train.iter().any(TrainingInstance::rankable) {
        return Err(Error::invalid("no training instance has candidate paths"));
    }
    Ok(())
}

/// Runs one optimization loop. `validate` is called after every epoch with
/// the current model and returns `(val_mrr, val_h5)`; the epoch with the
/// highest MRR is kept (earliest on ties).
fn run_loop(
    name: &str,
    mut model: Praline,
    hyper: &Hyperparameters,
    weights: &LossWeights,
    data: &TrainData,
    paths: &PathTable,
    validate: &mut dyn FnMut(&Praline) -> Result<(f64, f64)>,
    on_epoch: &mut dyn FnMut(&Praline, &AdamW, usize, bool) -> Result<()>,
) -> Result<(Praline, TrainLog, usize, f64)> {
    let mut opt = AdamW::new(model.params(), hyper.learning_rate, hyper.weight_decay);
    let mut log = TrainLog::default();
    let mut best: Option<(Praline, usize, f64)> = None;
    let loop_seed = splitmix64(hyper.seed ^ crate::embed::seeded_hash(name.as_bytes(), 0));
    for epoch in 1..=hyper.epochs {
        let batches = make_batches(data.train, hyper.batch_size, splitmix64(loop_seed ^ epoch as u64))?;
        let mut sums = [0.0; 4];
        for (b, batch) in batches.iter().enumerate() {
            let l = train_batch(&mut model, &mut opt, batch, (epoch, b), data, paths, hyper, weights)?;
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let (val_mrr, val_h5) = validate(&model)?;
        log.push(EpochRecord {
            epoch,
            loss: sums[0] / nb,
            loss_dm: sums[1] / nb,
            loss_rk: sums[2] / nb,
            loss_dec: sums[3] / nb,
            val_mrr,
            val_h5,
        });
        let improved = best.as_ref().is_none_or(|(_, _, m)| val_mrr > *m);
        if improved {
            best = Some((model.clone(), epoch, val_mrr));
        }
        on_epoch(&model, &opt, epoch, improved)?;
    }
    let (best_model, best_epoch, best_mrr) = best.expect("at least one epoch");
    Ok((best_model, log, best_epoch, best_mrr))
}

/// Joint training of one shared model on the weighted sum of all three
/// losses; separate training when the ablation asks for it.
pub fn train(
    hyper: &Hyperparameters,
    ablation: &Ablation,
    data: &TrainData,
    checkpoints: Option<CheckpointPlan>,
) -> Result<TrainOutcome> {
    if ablation.training_mode == TrainingMode::Separate {
        return train_separately(hyper, ablation, data, checkpoints);
    }
    check_inputs(hyper, data)?;
    let config = hyper.model_config(data.tokenizer.vocab_size(), data.embedder.dim());
    let model = Praline::new(config, hyper.seed)?;
    let paths = PathTable::build(data.train, data.graph, data.embedder)?;
    let weights = hyper.loss_weights(ablation.use_domain);
    let mut validate = |m: &Praline| data.validate(Models::Joint(m.clone()), ablation);
    let mut on_epoch = |m: &Praline, opt: &AdamW, epoch: usize, improved: bool| -> Result<()> {
        if let Some(plan) = checkpoints {
            let models = Models::Joint(m.clone());
            save_checkpoint(&plan.dir.join("last"), plan.config, epoch, hyper.seed, &models, Some(&[opt][..]))?;
            if improved {
                save_checkpoint(&plan.dir.join("best"), plan.config, epoch, hyper.seed, &models, None)?;
            }
        }
        Ok(())
    };
    let (best, log, best_epoch, best_val_mrr) =
        run_loop("joint", model, hyper, &weights, data, &paths, &mut validate, &mut on_epoch)?;
    Ok(TrainOutcome { models: Models::Joint(best), log, extra_logs: Vec::new(), best_epoch, best_val_mrr })
}

/// Three independent loops, each with its own encoder and a single loss:
/// the pointer and decoder loops run first and keep their final epoch; the
/// ranker loop validates the stitched system and keeps its best epoch.
pub fn train_separately(
    hyper: &Hyperparameters,
    ablation: &Ablation,
    data: &TrainData,
    checkpoints: Option<CheckpointPlan>,
) -> Result<TrainOutcome> {
    check_inputs(hyper, data)?;
    let config = hyper.model_config(data.tokenizer.vocab_size(), data.embedder.dim());
    let paths = PathTable::build(data.train, data.graph, data.embedder)?;
    let base = hyper.loss_weights(ablation.use_domain);
    let only = |dm: f64, rk: f64, dec: f64| LossWeights { lambda_dm: dm, lambda_rk: rk, lambda_dec: dec, ..base };
    let mut no_validation = |_: &Praline| Ok((f64::NAN, f64::NAN));
    let mut no_checkpoint = |_: &Praline, _: &AdamW, _: usize, _: bool| Ok(());

    let seed_of = |k: u64| splitmix64(hyper.seed.wrapping_add(k));
    let (pointer, pointer_log, _, _) = run_loop(
        "pointer",
        Praline::new(config, seed_of(1))?,
        hyper,
        &only(1.0, 0.0, 0.0),
        data,
        &paths,
        &mut no_validation,
        &mut no_checkpoint,
    )?;
    let (decoder, decoder_log, _, _) = run_loop(
        "decoder",
        Praline::new(config, seed_of(2))?,
        hyper,
        &only(0.0, 0.0, 1.0),
        data,
        &paths,
        &mut no_validation,
        &mut no_checkpoint,
    )?;
    let stitch = |ranker: &Praline| Models::Separate {
        pointer: pointer.clone(),
        decoder: decoder.clone(),
        ranker: ranker.clone(),
    };
    let mut validate = |m: &Praline| data.validate(stitch(m), ablation);
    let mut on_epoch = |m: &Praline, _: &AdamW, epoch: usize, improved: bool| -> Result<()> {
        if let Some(plan) = checkpoints {
            let models = stitch(m);
            save_checkpoint(&plan.dir.join("last"), plan.config, epoch, hyper.seed, &models, None)?;
            if improved {
                save_checkpoint(&plan.dir.join("best"), plan.config, epoch, hyper.seed, &models, None)?;
            }
        }
        Ok(())
    };
    let (ranker, log, best_epoch, best_val_mrr) = run_loop(
        "ranker",
        Praline::new(config, seed_of(3))?,
        hyper,
        &only(0.0, 1.0, 0.0),
        data,
        &paths,
        &mut validate,
        &mut on_epoch,
    )?;
    Ok(TrainOutcome {
        models: stitch(&ranker),
        log,
        extra_logs: vec![("pointer".into(), pointer_log), ("decoder".into(), decoder_log)],
        best_epoch,
        best_val_mrr,
    })
}

/// Per-array comparison of analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// `(array name, ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖))`.
    pub arrays: Vec<(String, f64)>,
    pub max_relative_error: f64,
    /// Ranking pairs dropped for sitting too close to the hinge kink.
    pub excluded_pairs: usize,
}

/// Cosine distance from the kink below which a pair is not checked.
const KINK_TOLERANCE: f64 = 1e-3;

fn batch_loss(model: &Praline, inputs: &[LossInput], weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for input in inputs {
        let mut tape = Tape::new(model.params());
        let vars = model.loss_on(&mut tape, input, weights, &mut Dropout::off())?;
        total += tape.scalar(vars.total);
    }
    Ok(total / inputs.len() as f64)
}

/// Compares the analytic gradient of the batch-averaged joint loss with
/// central differences (step 1e-5) on every parameter array. `tamper` may
/// alter the analytic gradient before comparison.
pub fn check_gradients(
    model: &Praline,
    inputs: &[LossInput],
    weights: &LossWeights,
    tamper: &dyn Fn(&mut [Mat]),
) -> Result<GradientReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("gradient check needs at least one input"));
    }
    // Drop negative pairs whose cosine sits near the margin.
    let mut excluded_pairs = 0;
    let mut kept: Vec<LossInput> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let enc = model.encode(input.input_ids)?;
        let domain = weights.use_domain.then(|| input.domains.row(input.domain_id));
        let phi_c = model.conversation_embedding(&enc, domain)?;
        let mut input = input.clone();
        input.pairs.retain(|pair| {
            if pair.y > 0.0 {
                return true;
            }
            let phi_p = model
                .path_embeddings(&pair.path.clone().insert_axis(ndarray::Axis(0)))
                .expect("path width checked by the tower");
            let c = crate::model::ranker::score(phi_c.view(), phi_p.row(0)).unwrap_or(0.0);
            let keep = (c - weights.margin).abs() > KINK_TOLERANCE;
            excluded_pairs += usize::from(!keep);
            keep
        });
        kept.push(input);
    }

    let mut analytic = model.params().zeros_like();
    for input in &kept {
        let mut tape = Tape::new(model.params());
        let vars = model.loss_on(&mut tape, input, weights, &mut Dropout::off())?;
        tape.backward(vars.total, &mut analytic);
    }
    for g in analytic.iter_mut() {
        g.mapv_inplace(|x| x / kept.len() as f64);
    }
    tamper(&mut analytic);

    let h = 1e-5;
    let mut probe = model.clone();
    let mut arrays = Vec::with_capacity(analytic.len());
    for (a, grad) in analytic.iter().enumerate() {
        let mut numeric = Mat::zeros(grad.raw_dim());
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = probe.params().get(a)[[r, c]];
            probe.params_mut().get_mut(a)[[r, c]] = orig + h;
            let up = batch_loss(&probe, &kept, weights)?;
            probe.params_mut().get_mut(a)[[r, c]] = orig - h;
            let down = batch_loss(&probe, &kept, weights)?;
            probe.params_mut().get_mut(a)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (grad - &numeric).iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = grad.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
        arrays.push((model.params().name(a).to_string(), rel));
    }
    let max_relative_error = arrays.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradientReport { arrays, max_relative_error, excluded_pairs })
}
