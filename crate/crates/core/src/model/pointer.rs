//! Domain identification pointer.
//!
//! Each domain `j` is scored as `W1 · tanh(W2ᵀ·pool(h_enc) + τ_j)`; the
//! scores are softmaxed over the vocabulary. Because a domain's score only
//! depends on its own embedding, domains can be appended after training.

use ndarray::{Array1, Array2, ArrayView1};

use crate::autograd::Mat;
use crate::embed::Embedder;
use crate::error::{Error, Result};

/// Borrowed pointer weights: `w1` is 1×d_kg, `w2` is d×d_kg.
#[derive(Debug, Clone, Copy)]
pub struct PointerParams<'a> {
    pub w1: &'a Mat,
    pub w2: &'a Mat,
}

/// Ordered domain labels with one embedding row each.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainVocabulary {
    labels: Vec<String>,
    embeddings: Array2<f64>,
}

impl DomainVocabulary {
    pub fn new(labels: Vec<String>, embedder: &Embedder) -> Result<Self> {
        let embeddings = embedder.embed_domains(&labels)?;
        Ok(Self { labels, embeddings })
    }

    pub fn from_parts(labels: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if labels.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} domain labels but {} embedding rows",
                labels.len(),
                embeddings.nrows()
            )));
        }
        Ok(Self { labels, embeddings })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embedding(&self, id: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(id)
    }

    /// Appends a domain; existing ids and rows are untouched.
    pub fn push(&mut self, label: &str, embedder: &Embedder) -> Result<usize> {
        let row = Array1::from(embedder.embed_text(label)?);
        if row.len() != self.embeddings.ncols() {
            return Err(Error::Shape("domain embedding width changed".into()));
        }
        self.embeddings.push_row(row.view()).map_err(|e| Error::Shape(e.to_string()))?;
        self.labels.push(label.to_string());
        Ok(self.labels.len() - 1)
    }
}

/// Raw pointer scores, one per domain, before the softmax.
pub fn domain_scores(pooled: ArrayView1<f64>, vocab: &DomainVocabulary, params: PointerParams) -> Result<Vec<f64>> {
    if vocab.is_empty() {
        return Err(Error::invalid("empty domain vocabulary"));
    }
    if params.w2.nrows() != pooled.len() || params.w2.ncols() != vocab.embeddings.ncols() {
        return Err(Error::Shape(format!(
            "pointer W2 is {:?}, pooled length {}, domain width {}",
            params.w2.dim(),
            pooled.len(),
            vocab.embeddings.ncols()
        )));
    }
    let projected = params.w2.t().dot(&pooled);
    let w1 = params.w1.row(0);
    Ok(vocab
        .embeddings
        .rows()
        .into_iter()
        .map(|tau| {
            let u = (&projected + &tau).mapv(f64::tanh);
            w1.dot(&u)
        })
        .collect())
}

/// Probability over the domain vocabulary for a max-pooled encoding.
pub fn score_domains(pooled: ArrayView1<f64>, vocab: &DomainVocabulary, params: PointerParams) -> Result<Vec<f64>> {
    let scores = domain_scores(pooled, vocab, params)?;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// Negative log-probability of the gold domain.
pub fn pointer_loss(omega: &[f64], gold: usize) -> Result<f64> {
    omega
        .get(gold)
        .map(|p| -p.ln())
        .ok_or_else(|| Error::invalid(format!("gold domain {gold} out of range for {} domains", omega.len())))
}

/// Argmax, lowest id on ties.
pub fn predict_domain(omega: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in omega.iter().enumerate() {
        if p > omega[best] {
            best = i;
        }
    }
    best
}
