//! Conversation and path towers, cosine scoring, and candidate ranking.

use ndarray::{concatenate, Array1, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::kg::ContextPath;

/// Borrowed tower weights. Conversation tower: `conv_w1` d×2d, `conv_w2` d×d.
/// Path tower: `path_w1` d×d, `path_w2` d×d.
#[derive(Debug, Clone, Copy)]
pub struct TowerParams<'a> {
    pub conv_w1: &'a Mat,
    pub conv_w2: &'a Mat,
    pub path_w1: &'a Mat,
    pub path_w2: &'a Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Conversation,
    Path,
}

/// Tower output; every component lies in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    pub vector: Array1<f64>,
    pub side: Side,
}

/// Elementwise maximum over token rows.
pub fn pool_encoder(h_enc: ArrayView2<f64>) -> Result<Array1<f64>> {
    if h_enc.nrows() == 0 {
        return Err(Error::invalid("cannot pool an empty encoder output"));
    }
    Ok(h_enc.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &x| m.max(x)))
}

fn tower(x: ArrayView1<f64>, w1: &Mat, w2: &Mat) -> Result<Array1<f64>> {
    if w1.ncols() != x.len() || w2.ncols() != w1.nrows() {
        return Err(Error::Shape(format!(
            "tower input {} against weights {:?} and {:?}",
            x.len(),
            w1.dim(),
            w2.dim()
        )));
    }
    let hidden = w1.dot(&x).mapv(|v| v.max(0.0));
    Ok(w2.dot(&hidden).mapv(f64::tanh))
}

/// `tanh(W2 · relu(W1 · [pooled; domain]))`.
pub fn conversation_embedding(
    pooled: ArrayView1<f64>,
    domain: ArrayView1<f64>,
    params: TowerParams,
) -> Result<JointEmbedding> {
    let x = concatenate(Axis(0), &[pooled, domain]).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(JointEmbedding {
        vector: tower(x.view(), params.conv_w1, params.conv_w2)?,
        side: Side::Conversation,
    })
}

/// `tanh(W2 · relu(W1 · h_p))`.
pub fn path_embedding(h_p: ArrayView1<f64>, params: TowerParams) -> Result<JointEmbedding> {
    Ok(JointEmbedding {
        vector: tower(h_p, params.path_w1, params.path_w2)?,
        side: Side::Path,
    })
}

/// Path tower applied to every row of `h_paths`.
pub fn path_embeddings(h_paths: ArrayView2<f64>, params: TowerParams) -> Result<Mat> {
    if h_paths.ncols() != params.path_w1.ncols() {
        return Err(Error::Shape(format!(
            "path rows have width {}, tower expects {}",
            h_paths.ncols(),
            params.path_w1.ncols()
        )));
    }
    let hidden = h_paths.dot(&params.path_w1.t()).mapv(|v| v.max(0.0));
    Ok(hidden.dot(&params.path_w2.t()).mapv(f64::tanh))
}

/// Cosine similarity of two non-zero vectors.
pub fn score(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("degenerate embedding"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine embedding loss for one pair; `y` must be 1 or -1.
pub fn ranking_loss(phi_c: ArrayView1<f64>, phi_p: ArrayView1<f64>, y: i32, margin: f64) -> Result<f64> {
    let c = score(phi_c, phi_p)?;
    match y {
        1 => Ok(1.0 - c),
        -1 => Ok((c - margin).max(0.0)),
        _ => Err(Error::invalid(format!("ranking label must be 1 or -1, got {y}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPath {
    pub path: ContextPath,
    pub score: f64,
}

/// Candidates in descending score order.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RankedCandidates(pub Vec<RankedPath>);

impl RankedCandidates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Endpoints in rank order, keeping the first occurrence of each.
    pub fn answers(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.0
            .iter()
            .map(|r| r.path.endpoint())
            .filter(|e| seen.insert(*e))
            .map(str::to_string)
            .collect()
    }
}

/// Sorts candidates by descending score. Equal scores keep canonical path
/// order (anchor, then steps).
pub fn rank_candidates(scored: Vec<(ContextPath, f64)>) -> Result<RankedCandidates> {
    if let Some((p, _)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for {p}")));
    }
    let mut ranked: Vec<RankedPath> = scored
        .into_iter()
        .map(|(path, score)| RankedPath { path, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
    Ok(RankedCandidates(ranked))
}

/// Scores each candidate against the conversation embedding and ranks them.
pub fn rank_with_embeddings(
    phi_c: ArrayView1<f64>,
    candidates: &[ContextPath],
    phi_paths: ArrayView2<f64>,
) -> Result<RankedCandidates> {
    let scored = candidates
        .iter()
        .zip(phi_paths.rows())
        .map(|(p, row)| Ok((p.clone(), score(phi_c, row)?)))
        .collect::<Result<Vec<_>>>()?;
    rank_candidates(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(end: &str) -> ContextPath {
        ContextPath::new("a", vec![("r".into(), end.into())])
    }

    #[test]
    fn pooling() {
        let h = array![[1.0, -2.0], [0.0, 5.0]];
        assert_eq!(pool_encoder(h.view()).unwrap(), array![1.0, 5.0]);
        let one = array![[0.3, -0.7, 2.0]];
        assert_eq!(pool_encoder(one.view()).unwrap(), array![0.3, -0.7, 2.0]);
        let swapped = array![[0.0, 5.0], [1.0, -2.0]];
        assert_eq!(pool_encoder(swapped.view()).unwrap(), array![1.0, 5.0]);
        assert!(pool_encoder(Mat::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let z2 = Mat::zeros((2, 4));
        let z = Mat::zeros((2, 2));
        let params = TowerParams { conv_w1: &z2, conv_w2: &z, path_w1: &z, path_w2: &z };
        let c = conversation_embedding(array![1.0, 2.0].view(), array![0.5, 0.5].view(), params).unwrap();
        assert_eq!(c.vector, array![0.0, 0.0]);
        assert_eq!(c.side, Side::Conversation);
        let pe = path_embedding(array![0.6, 0.8].view(), params).unwrap();
        assert_eq!(pe.vector, array![0.0, 0.0]);
    }

    #[test]
    fn two_dim_hand_case() {
        let conv_w1 = array![[0.5, -1.0, 0.25, 2.0], [1.5, 0.5, -0.5, 0.1]];
        let conv_w2 = array![[1.0, -0.3], [0.2, 0.8]];
        let path_w1 = array![[0.4, -0.9], [1.1, 0.3]];
        let path_w2 = array![[-0.7, 0.6], [0.5, 1.2]];
        let params = TowerParams { conv_w1: &conv_w1, conv_w2: &conv_w2, path_w1: &path_w1, path_w2: &path_w2 };

        let x: [f64; 4] = [0.9, -0.4, 0.6, 0.8];
        let h0 = (0.5 * x[0] - 1.0 * x[1] + 0.25 * x[2] + 2.0 * x[3]).max(0.0);
        let h1 = (1.5 * x[0] + 0.5 * x[1] - 0.5 * x[2] + 0.1 * x[3]).max(0.0);
        let expected_c = [(1.0 * h0 - 0.3 * h1).tanh(), (0.2 * h0 + 0.8 * h1).tanh()];
        let c = conversation_embedding(array![0.9, -0.4].view(), array![0.6, 0.8].view(), params).unwrap();
        for (a, b) in c.vector.iter().zip(expected_c) {
            assert!((a - b).abs() < 1e-12);
        }

        let hp: [f64; 2] = [0.6, -0.8];
        let g0 = (0.4 * hp[0] - 0.9 * hp[1]).max(0.0);
        let g1 = (1.1 * hp[0] + 0.3 * hp[1]).max(0.0);
        let expected_p = [(-0.7 * g0 + 0.6 * g1).tanh(), (0.5 * g0 + 1.2 * g1).tanh()];
        let pe = path_embedding(array![0.6, -0.8].view(), params).unwrap();
        for (a, b) in pe.vector.iter().zip(expected_p) {
            assert!((a - b).abs() < 1e-12);
        }
        let rows = path_embeddings(array![[0.6, -0.8]].view(), params).unwrap();
        assert_eq!(rows.row(0), pe.vector);
    }

    #[test]
    fn dimension_mismatch() {
        let w1 = Mat::zeros((2, 4));
        let z = Mat::zeros((2, 2));
        let params = TowerParams { conv_w1: &w1, conv_w2: &z, path_w1: &z, path_w2: &z };
        assert!(conversation_embedding(array![1.0].view(), array![0.5, 0.5].view(), params).is_err());
        assert!(path_embedding(array![1.0, 2.0, 3.0].view(), params).is_err());
    }

    #[test]
    fn score_examples() {
        let a = array![0.3, -0.4, 0.5];
        assert!((score(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(score(array![1.0, 0.0].view(), array![0.0, 2.0].view()).unwrap().abs() < 1e-12);
        assert!((score(a.view(), (-&a).view()).unwrap() + 1.0).abs() < 1e-12);
        let err = score(array![0.0, 0.0].view(), a.slice(ndarray::s![..2])).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"));
    }

    #[test]
    fn loss_examples() {
        let a = array![0.2, 0.9];
        let o = array![-0.9, 0.2];
        assert_eq!(ranking_loss(a.view(), a.view(), 1, 0.1).unwrap(), 0.0);
        assert!((ranking_loss(a.view(), a.view(), -1, 0.1).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(ranking_loss(a.view(), o.view(), -1, 0.1).unwrap(), 0.0);
        assert!(ranking_loss(a.view(), a.view(), 0, 0.1).is_err());
    }

    #[test]
    fn rank_examples() {
        let r = rank_candidates(vec![(p("p1"), 0.9), (p("p2"), 0.2), (p("p3"), 0.9)]).unwrap();
        let order: Vec<_> = r.0.iter().map(|x| x.path.endpoint().to_string()).collect();
        assert_eq!(order, vec!["p1", "p3", "p2"]);
        let r = rank_candidates(vec![(p("only"), -0.7)]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(rank_candidates(vec![]).unwrap().is_empty());
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi_c = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let paths: Vec<ContextPath> = (0..10).map(|i| p(&format!("n{i}"))).collect();
        let phis = Mat::from_shape_fn((10, 6), |_| rng.gen_range(-1.0..1.0));
        let ranked = rank_with_embeddings(phi_c.view(), &paths, phis.view()).unwrap();

        // Selection sort over pairwise score() calls.
        let mut remaining: Vec<usize> = (0..10).collect();
        let mut expected = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                let sk = score(phi_c.view(), phis.row(remaining[k])).unwrap();
                let sb = score(phi_c.view(), phis.row(remaining[best])).unwrap();
                if sk > sb {
                    best = k;
                }
            }
            expected.push(paths[remaining.remove(best)].clone());
        }
        let got: Vec<ContextPath> = ranked.0.into_iter().map(|r| r.path).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn answers_are_deduplicated() {
        let r = rank_candidates(vec![(p("x"), 0.9), (p("y"), 0.5), (ContextPath::new("b", vec![("s".into(), "x".into())]), 0.7)]).unwrap();
        assert_eq!(r.answers(), vec!["x", "y"]);
    }

    proptest! {
        #[test]
        fn loss_is_bounded(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            y in prop_oneof![Just(1), Just(-1)],
            margin in 0.0f64..0.99,
        ) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
            let l = ranking_loss(a.view(), b.view(), y, margin).unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
        }

        #[test]
        fn tower_outputs_in_open_interval(
            w in proptest::collection::vec(-1.0f64..1.0, 8 + 4 + 4 + 4),
            x in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let conv_w1 = Mat::from_shape_vec((2, 4), w[..8].to_vec()).unwrap();
            let conv_w2 = Mat::from_shape_vec((2, 2), w[8..12].to_vec()).unwrap();
            let path_w1 = Mat::from_shape_vec((2, 2), w[12..16].to_vec()).unwrap();
            let path_w2 = Mat::from_shape_vec((2, 2), w[16..].to_vec()).unwrap();
            let params = TowerParams { conv_w1: &conv_w1, conv_w2: &conv_w2, path_w1: &path_w1, path_w2: &path_w2 };
            let c = conversation_embedding(ndarray::ArrayView1::from(&x[..2]), ndarray::ArrayView1::from(&x[2..]), params).unwrap();
            let pe = path_embedding(ndarray::ArrayView1::from(&x[..2]), params).unwrap();
            prop_assert!(c.vector.iter().chain(pe.vector.iter()).all(|v| v.abs() < 1.0));
        }

        #[test]
        fn cosine_ignores_positive_scale(
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
            c in 0.01f64..100.0,
        ) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            prop_assume!(a.dot(&a) > 1e-6 && b.dot(&b) > 1e-6);
            let s = score(a.view(), b.view()).unwrap();
            let scaled = &a * c;
            prop_assert!((score(scaled.view(), b.view()).unwrap() - s).abs() < 1e-12);
        }
    }
}
