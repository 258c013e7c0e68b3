//! The joint model: a transformer encoder over the dialog, a causal decoder
//! for fluent responses, the domain pointer, and the two ranking towers.
//!
//! Every forward pass runs on an autograd [`Tape`]; inference simply drops
//! the tape afterwards.

pub mod pointer;
pub mod ranker;

use ndarray::{s, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamSet, Tape, Var};
use crate::corpus::tokenizer::{ANS, BOS_ID, EOS_ID};
use crate::corpus::{MAX_INPUT_TOKENS, MAX_TARGET_TOKENS};
use crate::error::{Error, Result};

pub use pointer::{predict_domain, DomainVocabulary, PointerParams};
pub use ranker::{RankedCandidates, TowerParams};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Architecture sizes. `d_kg` is the width of path and domain embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_kg: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, d_kg: 64, n_heads: 4, n_layers: 2, ff_dim: 256, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.d_kg == 0 || self.ff_dim == 0 {
            return Err(Error::Config("vocab_size, d_kg and ff_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Contextual token embeddings, one row per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h_enc: Mat,
}

impl EncoderOutput {
    pub fn pooled(&self) -> Array1<f64> {
        ranker::pool_encoder(self.h_enc.view()).expect("encoder output is never empty")
    }
}

/// Inverted dropout driven by its own RNG; `None` means evaluation mode.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Self { p, rng: (p > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 / (1.0 - self.p);
        let dim = tape.value(x).dim();
        let p = self.p;
        let mask = Mat::from_shape_fn(dim, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: Norm,
    cross: Attention,
    ln2: Norm,
    ff: FeedForward,
    ln3: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    dec_out: usize,
    dm_w1: usize,
    dm_w2: usize,
    crk_w1: usize,
    crk_w2: usize,
    prk_w1: usize,
    prk_w2: usize,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Glorot-uniform matrix.
    fn dense(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| self.rng.gen_range(-a..a));
        self.params.push(name, m)
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.params.push(name, Mat::from_elem((rows, cols), v))
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            wq: self.dense(format!("{prefix}.wq"), d, d),
            wk: self.dense(format!("{prefix}.wk"), d, d),
            wv: self.dense(format!("{prefix}.wv"), d, d),
            wo: self.dense(format!("{prefix}.wo"), d, d),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{prefix}.gain"), 1, d, 1.0),
            bias: self.constant(format!("{prefix}.bias"), 1, d, 0.0),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.dense(format!("{prefix}.w1"), d, f),
            b1: self.constant(format!("{prefix}.b1"), 1, f, 0.0),
            w2: self.dense(format!("{prefix}.w2"), f, d),
            b2: self.constant(format!("{prefix}.b2"), 1, d, 0.0),
        }
    }
}

fn layout_from(params: &ParamSet, config: &ModelConfig) -> Result<Layout> {
    let find = |name: String| {
        params
            .index(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter array `{name}`")))
    };
    let attention = |p: &str| -> Result<Attention> {
        Ok(Attention {
            wq: find(format!("{p}.wq"))?,
            wk: find(format!("{p}.wk"))?,
            wv: find(format!("{p}.wv"))?,
            wo: find(format!("{p}.wo"))?,
        })
    };
    let norm = |p: &str| -> Result<Norm> {
        Ok(Norm { gain: find(format!("{p}.gain"))?, bias: find(format!("{p}.bias"))? })
    };
    let ff = |p: &str| -> Result<FeedForward> {
        Ok(FeedForward {
            w1: find(format!("{p}.w1"))?,
            b1: find(format!("{p}.b1"))?,
            w2: find(format!("{p}.w2"))?,
            b2: find(format!("{p}.b2"))?,
        })
    };
    let mut encoder = Vec::new();
    let mut decoder = Vec::new();
    for l in 0..config.n_layers {
        encoder.push(EncoderLayer {
            attn: attention(&format!("enc{l}.attn"))?,
            ln1: norm(&format!("enc{l}.ln1"))?,
            ff: ff(&format!("enc{l}.ff"))?,
            ln2: norm(&format!("enc{l}.ln2"))?,
        });
    }
    for l in 0..config.n_layers {
        decoder.push(DecoderLayer {
            self_attn: attention(&format!("dec{l}.self"))?,
            ln1: norm(&format!("dec{l}.ln1"))?,
            cross: attention(&format!("dec{l}.cross"))?,
            ln2: norm(&format!("dec{l}.ln2"))?,
            ff: ff(&format!("dec{l}.ff"))?,
            ln3: norm(&format!("dec{l}.ln3"))?,
        });
    }
    Ok(Layout {
        tok_emb: find("tok_emb".into())?,
        encoder,
        decoder,
        dec_out: find("dec_out".into())?,
        dm_w1: find("dm.w1".into())?,
        dm_w2: find("dm.w2".into())?,
        crk_w1: find("crk.w1".into())?,
        crk_w2: find("crk.w2".into())?,
        prk_w1: find("prk.w1".into())?,
        prk_w2: find("prk.w2".into())?,
    })
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let ModelConfig { vocab_size: v, d_model: d, d_kg: k, ff_dim: f, .. } = *config;
    let mut out = vec![("tok_emb".to_string(), (v, d))];
    let attn = |out: &mut Vec<_>, p: String| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), (d, d)));
        }
    };
    let norm = |out: &mut Vec<_>, p: String| {
        out.push((format!("{p}.gain"), (1, d)));
        out.push((format!("{p}.bias"), (1, d)));
    };
    let ff = |out: &mut Vec<_>, p: String| {
        out.push((format!("{p}.w1"), (d, f)));
        out.push((format!("{p}.b1"), (1, f)));
        out.push((format!("{p}.w2"), (f, d)));
        out.push((format!("{p}.b2"), (1, d)));
    };
    for l in 0..config.n_layers {
        attn(&mut out, format!("enc{l}.attn"));
        norm(&mut out, format!("enc{l}.ln1"));
        ff(&mut out, format!("enc{l}.ff"));
        norm(&mut out, format!("enc{l}.ln2"));
    }
    for l in 0..config.n_layers {
        attn(&mut out, format!("dec{l}.self"));
        norm(&mut out, format!("dec{l}.ln1"));
        attn(&mut out, format!("dec{l}.cross"));
        norm(&mut out, format!("dec{l}.ln2"));
        ff(&mut out, format!("dec{l}.ff"));
        norm(&mut out, format!("dec{l}.ln3"));
    }
    out.push(("dec_out".into(), (v, d)));
    out.push(("dm.w1".into(), (1, k)));
    out.push(("dm.w2".into(), (d, k)));
    out.push(("crk.w1".into(), (d, d + k)));
    out.push(("crk.w2".into(), (d, d)));
    out.push(("prk.w1".into(), (d, k)));
    out.push(("prk.w2".into(), (d, d)));
    out
}

/// Sinusoidal position table, `rows × d`.
pub fn positional_encodings(rows: usize, d: usize) -> Mat {
    Mat::from_shape_fn((rows, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn causal_mask(n: usize) -> Mat {
    Mat::from_shape_fn((n, n), |(i, j)| if j > i { MASKED } else { 0.0 })
}

/// One ranking pair: a frozen path vector and its label (+1 or -1).
#[derive(Debug, Clone, PartialEq)]
pub struct RankPair {
    pub path: Array1<f64>,
    pub y: f64,
}

/// Inputs for one training element.
#[derive(Debug, Clone)]
pub struct LossInput<'a> {
    pub input_ids: &'a [u32],
    pub target_ids: &'a [u32],
    pub domain_id: usize,
    /// Embedding rows of the whole domain vocabulary.
    pub domains: &'a Mat,
    /// Pairs scored against this element's conversation embedding.
    pub pairs: Vec<RankPair>,
}

/// Loss-function switches shared by every element of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_dm: f64,
    pub lambda_rk: f64,
    pub lambda_dec: f64,
    pub margin: f64,
    /// When false the conversation tower sees a zero domain vector.
    pub use_domain: bool,
}

/// Tape handles of the three component losses and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub dm: Var,
    pub rk: Option<Var>,
    pub dec: Var,
    pub total: Var,
}

/// All trainable arrays plus their layout.
#[derive(Debug, Clone)]
pub struct Praline {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    positions: Mat,
}

impl Praline {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamSet::default(), rng: &mut rng };
        let d = config.d_model;
        // Embeddings start at a scale comparable to the positional table.
        let emb = Mat::from_shape_fn((config.vocab_size, d), |_| b.rng.gen_range(-1.0..1.0));
        b.params.push("tok_emb", emb);
        for l in 0..config.n_layers {
            b.attention(&format!("enc{l}.attn"), d);
            b.norm(&format!("enc{l}.ln1"), d);
            b.feed_forward(&format!("enc{l}.ff"), d, config.ff_dim);
            b.norm(&format!("enc{l}.ln2"), d);
        }
        for l in 0..config.n_layers {
            b.attention(&format!("dec{l}.self"), d);
            b.norm(&format!("dec{l}.ln1"), d);
            b.attention(&format!("dec{l}.cross"), d);
            b.norm(&format!("dec{l}.ln2"), d);
            b.feed_forward(&format!("dec{l}.ff"), d, config.ff_dim);
            b.norm(&format!("dec{l}.ln3"), d);
        }
        b.dense("dec_out".into(), config.vocab_size, d);
        b.dense("dm.w1".into(), 1, config.d_kg);
        b.dense("dm.w2".into(), d, config.d_kg);
        b.dense("crk.w1".into(), d, d + config.d_kg);
        b.dense("crk.w2".into(), d, d);
        b.dense("prk.w1".into(), d, config.d_kg);
        b.dense("prk.w2".into(), d, d);
        let params = b.params;
        Self::from_params(config, params)
    }

    /// Rebuilds a model from stored arrays, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape) in expected_shapes(&config) {
            let i = params
                .index(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter array `{name}`")))?;
            if params.get(i).dim() != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    params.get(i).dim()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        let layout = layout_from(&params, &config)?;
        let positions = positional_encodings(MAX_INPUT_TOKENS, config.d_model);
        Ok(Self { config, params, layout, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn pointer_params(&self) -> PointerParams<'_> {
        PointerParams { w1: self.params.get(self.layout.dm_w1), w2: self.params.get(self.layout.dm_w2) }
    }

    pub fn tower_params(&self) -> TowerParams<'_> {
        TowerParams {
            conv_w1: self.params.get(self.layout.crk_w1),
            conv_w2: self.params.get(self.layout.crk_w2),
            path_w1: self.params.get(self.layout.prk_w1),
            path_w2: self.params.get(self.layout.prk_w2),
        }
    }

    fn check_ids(&self, ids: &[u32], max: usize, what: &str) -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(Error::invalid(format!("empty {what}")));
        }
        if ids.len() > max {
            return Err(Error::invalid(format!("{what} has {} tokens, limit is {max}", ids.len())));
        }
        ids.iter()
            .map(|&i| {
                let i = i as usize;
                if i < self.config.vocab_size {
                    Ok(i)
                } else {
                    Err(Error::invalid(format!(
                        "token id {i} out of range for vocabulary of {}",
                        self.config.vocab_size
                    )))
                }
            })
            .collect()
    }

    fn embed(&self, tape: &mut Tape, ids: &[usize], drop: &mut Dropout) -> Var {
        let table = tape.param(self.layout.tok_emb);
        let x = tape.gather(table, ids);
        let pos = tape.constant(self.positions.slice(s![..ids.len(), ..]).to_owned());
        let x = tape.add(x, pos);
        drop.apply(tape, x)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        a: &Attention,
        query: Var,
        memory: Var,
        mask: Option<&Mat>,
        drop: &mut Dropout,
    ) -> Var {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = d / h;
        let wq = tape.param(a.wq);
        let wk = tape.param(a.wk);
        let wv = tape.param(a.wv);
        let wo = tape.param(a.wo);
        let q = tape.matmul(query, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add_const(scores, m);
            }
            let weights = tape.softmax_rows(scores);
            let weights = drop.apply(tape, weights);
            heads.push(tape.matmul(weights, vh));
        }
        let joined = if h == 1 { heads[0] } else { tape.concat_cols(&heads) };
        tape.matmul(joined, wo)
    }

    fn norm(&self, tape: &mut Tape, n: &Norm, x: Var) -> Var {
        let y = tape.layer_norm(x, LN_EPS);
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }

    fn feed_forward(&self, tape: &mut Tape, f: &FeedForward, x: Var, drop: &mut Dropout) -> Var {
        let w1 = tape.param(f.w1);
        let b1 = tape.param(f.b1);
        let w2 = tape.param(f.w2);
        let b2 = tape.param(f.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let h = drop.apply(tape, h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    /// Residual connection followed by layer normalization.
    fn sublayer_out(&self, tape: &mut Tape, n: &Norm, x: Var, y: Var, drop: &mut Dropout) -> Var {
        let y = drop.apply(tape, y);
        let sum = tape.add(x, y);
        self.norm(tape, n, sum)
    }

    /// Encoder forward pass on a tape; returns the n×d contextual rows.
    pub fn encode_on(&self, tape: &mut Tape, input_ids: &[u32], drop: &mut Dropout) -> Result<Var> {
        let ids = self.check_ids(input_ids, MAX_INPUT_TOKENS, "encoder input")?;
        let mut x = self.embed(tape, &ids, drop);
        for layer in &self.layout.encoder {
            let a = self.attention(tape, &layer.attn, x, x, None, drop);
            x = self.sublayer_out(tape, &layer.ln1, x, a, drop);
            let f = self.feed_forward(tape, &layer.ff, x, drop);
            x = self.sublayer_out(tape, &layer.ln2, x, f, drop);
        }
        Ok(x)
    }

    /// Decoder logits (`len × |V|`) for the given decoder inputs.
    pub fn decode_on(&self, tape: &mut Tape, enc: Var, decoder_ids: &[u32], drop: &mut Dropout) -> Result<Var> {
        let ids = self.check_ids(decoder_ids, MAX_TARGET_TOKENS, "decoder input")?;
        let mask = causal_mask(ids.len());
        let mut x = self.embed(tape, &ids, drop);
        for layer in &self.layout.decoder {
            let a = self.attention(tape, &layer.self_attn, x, x, Some(&mask), drop);
            x = self.sublayer_out(tape, &layer.ln1, x, a, drop);
            let c = self.attention(tape, &layer.cross, x, enc, None, drop);
            x = self.sublayer_out(tape, &layer.ln2, x, c, drop);
            let f = self.feed_forward(tape, &layer.ff, x, drop);
            x = self.sublayer_out(tape, &layer.ln3, x, f, drop);
        }
        let out = tape.param(self.layout.dec_out);
        Ok(tape.matmul_t(x, out))
    }

    /// Domain pointer scores (1×n_dm) for a 1×d pooled encoding.
    pub fn pointer_on(&self, tape: &mut Tape, pooled: Var, domains: &Mat) -> Var {
        let w1 = tape.param(self.layout.dm_w1);
        let w2 = tape.param(self.layout.dm_w2);
        let proj = tape.matmul(pooled, w2);
        let tau = tape.constant(domains.clone());
        let u = tape.add_row(tau, proj);
        let u = tape.tanh(u);
        let scores = tape.matmul_t(u, w1);
        tape.transpose(scores)
    }

    /// Conversation tower on `[pooled; domain]`, a 1×d row.
    pub fn conversation_tower_on(&self, tape: &mut Tape, pooled: Var, domain: Var) -> Var {
        let x = tape.concat_cols(&[pooled, domain]);
        let w1 = tape.param(self.layout.crk_w1);
        let w2 = tape.param(self.layout.crk_w2);
        let h = tape.matmul_t(x, w1);
        let h = tape.relu(h);
        let o = tape.matmul_t(h, w2);
        tape.tanh(o)
    }

    /// Path tower on frozen path rows (k×d_kg), giving k×d.
    pub fn path_tower_on(&self, tape: &mut Tape, paths: Var) -> Var {
        let w1 = tape.param(self.layout.prk_w1);
        let w2 = tape.param(self.layout.prk_w2);
        let h = tape.matmul_t(paths, w1);
        let h = tape.relu(h);
        let o = tape.matmul_t(h, w2);
        tape.tanh(o)
    }

    /// Records the three losses of one element and their weighted sum.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        input: &LossInput,
        weights: &LossWeights,
        drop: &mut Dropout,
    ) -> Result<LossVars> {
        if input.target_ids.is_empty() {
            return Err(Error::invalid("empty decoder target"));
        }
        if input.domain_id >= input.domains.nrows() {
            return Err(Error::invalid(format!(
                "gold domain {} out of range for {} domains",
                input.domain_id,
                input.domains.nrows()
            )));
        }
        let enc = self.encode_on(tape, input.input_ids, drop)?;
        let pooled = tape.max_rows(enc);

        // Components with zero weight are not computed and read as 0.
        let dm = if weights.lambda_dm != 0.0 {
            let dm_scores = self.pointer_on(tape, pooled, input.domains);
            tape.cross_entropy(dm_scores, &[input.domain_id])
        } else {
            tape.constant(Mat::zeros((1, 1)))
        };

        let dec = if weights.lambda_dec != 0.0 {
            let mut decoder_in = Vec::with_capacity(input.target_ids.len());
            decoder_in.push(BOS_ID);
            decoder_in.extend_from_slice(&input.target_ids[..input.target_ids.len() - 1]);
            let logits = self.decode_on(tape, enc, &decoder_in, drop)?;
            let targets: Vec<usize> = input.target_ids.iter().map(|&t| t as usize).collect();
            tape.cross_entropy(logits, &targets)
        } else {
            tape.constant(Mat::zeros((1, 1)))
        };

        let rk = if input.pairs.is_empty() || weights.lambda_rk == 0.0 {
            None
        } else {
            let domain_row = if weights.use_domain {
                input.domains.row(input.domain_id).to_owned()
            } else {
                Array1::zeros(input.domains.ncols())
            };
            let domain = tape.constant(domain_row.insert_axis(ndarray::Axis(0)));
            let phi_c = self.conversation_tower_on(tape, pooled, domain);
            let mut terms = Vec::with_capacity(input.pairs.len());
            for pair in &input.pairs {
                if pair.y != 1.0 && pair.y != -1.0 {
                    return Err(Error::invalid(format!("ranking label must be 1 or -1, got {}", pair.y)));
                }
                let h_p = tape.constant(pair.path.clone().insert_axis(ndarray::Axis(0)));
                let phi_p = self.path_tower_on(tape, h_p);
                terms.push((tape.cosine_loss(phi_c, phi_p, pair.y, weights.margin), 1.0));
            }
            Some(if terms.len() == 1 { terms[0].0 } else { tape.weighted_sum(&terms) })
        };

        let mut parts = vec![(dm, weights.lambda_dm), (dec, weights.lambda_dec)];
        if let Some(rk) = rk {
            parts.push((rk, weights.lambda_rk));
        }
        let total = tape.weighted_sum(&parts);
        Ok(LossVars { dm, rk, dec, total })
    }

    /// Evaluation-mode encoding.
    pub fn encode(&self, input_ids: &[u32]) -> Result<EncoderOutput> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_on(&mut tape, input_ids, &mut Dropout::off())?;
        Ok(EncoderOutput { h_enc: tape.value(v).clone() })
    }

    /// Next-token distributions under teacher forcing and the summed NLL of
    /// `target_ids`.
    pub fn decode_teacher_forced(&self, enc: &EncoderOutput, target_ids: &[u32]) -> Result<(Mat, f64)> {
        if target_ids.is_empty() {
            return Err(Error::invalid("empty decoder target"));
        }
        let targets = self.check_ids(target_ids, MAX_TARGET_TOKENS, "decoder target")?;
        let mut decoder_in = vec![BOS_ID];
        decoder_in.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let mut tape = Tape::new(&self.params);
        let e = tape.constant(enc.h_enc.clone());
        let logits = self.decode_on(&mut tape, e, &decoder_in, &mut Dropout::off())?;
        let loss = tape.cross_entropy(logits, &targets);
        let dist = crate::autograd::softmax_rows(tape.value(logits).view());
        Ok((dist, tape.scalar(loss)))
    }

    /// Greedy decoding from [BOS]; the returned tokens exclude [BOS] and [EOS].
    pub fn generate(&self, enc: &EncoderOutput, max_len: usize) -> Vec<u32> {
        let max_len = max_len.min(MAX_TARGET_TOKENS);
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut tape = Tape::new(&self.params);
            let e = tape.constant(enc.h_enc.clone());
            let logits = self
                .decode_on(&mut tape, e, &prefix, &mut Dropout::off())
                .expect("prefix ids are in range");
            let last = tape.value(logits).row(prefix.len() - 1).to_owned();
            let mut best = 0;
            for (i, &z) in last.iter().enumerate() {
                if z > last[best] {
                    best = i;
                }
            }
            let best = best as u32;
            if best == EOS_ID {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        out
    }

    /// Probability over domains for an encoding.
    pub fn domain_distribution(&self, enc: &EncoderOutput, vocab: &DomainVocabulary) -> Result<Vec<f64>> {
        pointer::score_domains(enc.pooled().view(), vocab, self.pointer_params())
    }

    /// Conversation embedding; `domain` is `None` for the zeroed slot.
    pub fn conversation_embedding(&self, enc: &EncoderOutput, domain: Option<ndarray::ArrayView1<f64>>) -> Result<Array1<f64>> {
        let zero = Array1::zeros(self.config.d_kg);
        let domain = domain.unwrap_or(zero.view());
        Ok(ranker::conversation_embedding(enc.pooled().view(), domain, self.tower_params())?.vector)
    }

    /// Path-tower outputs for frozen path rows.
    pub fn path_embeddings(&self, h_paths: &Mat) -> Result<Mat> {
        ranker::path_embeddings(h_paths.view(), self.tower_params())
    }
}

/// Replaces every [ANS] with the answer, or appends it when absent.
pub fn substitute_answer(text: &str, answer: &str) -> String {
    if text.split_whitespace().any(|w| w == ANS) {
        text.split_whitespace()
            .map(|w| if w == ANS { answer } else { w })
            .collect::<Vec<_>>()
            .join(" ")
    } else if text.is_empty() {
        answer.to_string()
    } else {
        format!("{text} \u{2014} {answer}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenizer::PAD_ID;

    fn tiny() -> Praline {
        let config = ModelConfig { vocab_size: 20, d_model: 8, d_kg: 8, n_heads: 2, n_layers: 1, ff_dim: 16, dropout: 0.1 };
        Praline::new(config, 5).unwrap()
    }

    #[test]
    fn encoder_shapes_and_limits() {
        let m = tiny();
        let out = m.encode(&[6, 7, 8, 9, 10, 11, 12]).unwrap();
        assert_eq!(out.h_enc.dim(), (7, 8));
        assert_eq!(out, m.encode(&[6, 7, 8, 9, 10, 11, 12]).unwrap());
        assert!(m.encode(&vec![6; 151]).is_err());
        assert!(m.encode(&vec![6; 150]).is_ok());
        assert!(m.encode(&[]).is_err());
        assert!(m.encode(&[20]).is_err());
    }

    #[test]
    fn encoder_is_position_sensitive() {
        let m = tiny();
        let a = m.encode(&[6, 7, 8]).unwrap();
        let b = m.encode(&[8, 7, 6]).unwrap();
        assert_ne!(a.h_enc.row(0), b.h_enc.row(2));
    }

    #[test]
    fn teacher_forced_rows_are_distributions() {
        let m = tiny();
        let enc = m.encode(&[6, 7, 8]).unwrap();
        let (dist, loss) = m.decode_teacher_forced(&enc, &[9, 10, EOS_ID]).unwrap();
        assert_eq!(dist.dim(), (3, 20));
        for row in dist.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let expected: f64 = [9usize, 10, EOS_ID as usize].iter().enumerate().map(|(i, &t)| -dist[[i, t]].ln()).sum();
        assert!((loss - expected).abs() < 1e-9);
        assert!(m.decode_teacher_forced(&enc, &[]).is_err());
        assert!(m.decode_teacher_forced(&enc, &vec![9; 51]).is_err());
    }

    #[test]
    fn uniform_output_gives_log_vocab_loss() {
        let mut m = tiny();
        let i = m.params().index("dec_out").unwrap();
        m.params_mut().get_mut(i).fill(0.0);
        let enc = m.encode(&[6, 7]).unwrap();
        let (_, loss) = m.decode_teacher_forced(&enc, &[1, 2, 3, 4, 5]).unwrap();
        assert!((loss - 5.0 * 20f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn generation_is_bounded_and_deterministic() {
        let m = tiny();
        let enc = m.encode(&[6, 7, 8]).unwrap();
        let g = m.generate(&enc, 50);
        assert!(g.len() <= 50);
        assert!(!g.contains(&EOS_ID));
        assert_eq!(g, m.generate(&enc, 50));
        assert!(m.generate(&enc, 3).len() <= 3);
    }

    #[test]
    fn zero_projection_ties_to_lowest_id() {
        let mut m = tiny();
        let i = m.params().index("dec_out").unwrap();
        m.params_mut().get_mut(i).fill(0.0);
        let enc = m.encode(&[6]).unwrap();
        assert_eq!(m.generate(&enc, 50), vec![PAD_ID; 50]);
    }

    #[test]
    fn tape_losses_match_pure_forward() {
        let m = tiny();
        let domains = Mat::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let path = Array1::from_shape_fn(8, |j| (j as f64 * 0.7).cos());
        let input = LossInput {
            input_ids: &[6, 7, 8, 4, 9],
            target_ids: &[10, 11, EOS_ID],
            domain_id: 1,
            domains: &domains,
            pairs: vec![RankPair { path: path.clone(), y: 1.0 }],
        };
        let w = LossWeights { lambda_dm: 0.25, lambda_rk: 1.0, lambda_dec: 0.25, margin: 0.1, use_domain: true };
        let mut tape = Tape::new(m.params());
        let vars = m.loss_on(&mut tape, &input, &w, &mut Dropout::off()).unwrap();

        let enc = m.encode(input.input_ids).unwrap();
        let vocab = DomainVocabulary::from_parts(vec!["a".into(), "b".into(), "c".into()], domains.clone()).unwrap();
        let omega = m.domain_distribution(&enc, &vocab).unwrap();
        let dm = pointer::pointer_loss(&omega, 1).unwrap();
        let (_, dec) = m.decode_teacher_forced(&enc, input.target_ids).unwrap();
        let phi_c = m.conversation_embedding(&enc, Some(domains.row(1))).unwrap();
        let phi_p = m.path_embeddings(&path.insert_axis(ndarray::Axis(0))).unwrap();
        let rk = ranker::ranking_loss(phi_c.view(), phi_p.row(0), 1, 0.1).unwrap();

        assert!((tape.scalar(vars.dm) - dm).abs() < 1e-10);
        assert!((tape.scalar(vars.dec) - dec).abs() < 1e-10);
        assert!((tape.scalar(vars.rk.unwrap()) - rk).abs() < 1e-10);
        let total = 0.25 * dm + 1.0 * rk + 0.25 * dec;
        assert!((tape.scalar(vars.total) - total).abs() < 1e-10);
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let m = tiny();
        let mut tape = Tape::new(m.params());
        let a = m.encode_on(&mut tape, &[6, 7, 8], &mut Dropout::train(0.5, 1)).unwrap();
        let b = m.encode_on(&mut tape, &[6, 7, 8], &mut Dropout::off()).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
        let c = m.encode_on(&mut tape, &[6, 7, 8], &mut Dropout::train(0.5, 1)).unwrap();
        assert_eq!(tape.value(a), tape.value(c));
    }

    #[test]
    fn reloading_params_checks_shapes() {
        let m = tiny();
        let again = Praline::from_params(*m.config(), m.params().clone()).unwrap();
        assert_eq!(again.encode(&[6, 7]).unwrap(), m.encode(&[6, 7]).unwrap());
        let mut bad = m.config().to_owned();
        bad.vocab_size = 21;
        assert!(Praline::from_params(bad, m.params().clone()).is_err());
    }

    #[test]
    fn answer_substitution() {
        assert_eq!(substitute_answer("the book was published in [ANS]", "1910"), "the book was published in 1910");
        assert_eq!(substitute_answer("no slot here", "X"), "no slot here \u{2014} X");
        assert_eq!(substitute_answer("[ANS] and [ANS]", "y"), "y and y");
    }
}
