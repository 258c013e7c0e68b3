use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainingInstance;
use crate::error::{Error, Result};
use crate::kg::ContextPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankLabel {
    Positive,
    Negative,
    /// Instance has neither positive nor negative paths.
    NoRank,
}

impl RankLabel {
    /// The `{1, -1}` encoding; `None` for [`RankLabel::NoRank`].
    pub fn sign(self) -> Option<f64> {
        match self {
            RankLabel::Positive => Some(1.0),
            RankLabel::Negative => Some(-1.0),
            RankLabel::NoRank => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchElement {
    /// Index into the instance list the batch was drawn from.
    pub instance: usize,
    pub rk_label: RankLabel,
    pub path: Option<ContextPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub elements: Vec<BatchElement>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// One epoch of batches. Instances are shuffled by `seed`; within a batch
/// half of the rankable elements get a positive path and half a negative
/// one, except where an instance has only one kind.
pub fn make_batches(
    instances: &[TrainingInstance],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut labels = vec![RankLabel::NoRank; chunk.len()];
        let mut free = Vec::new();
        let mut forced_pos = 0usize;
        let mut rankable = 0usize;
        for (slot, &i) in chunk.iter().enumerate() {
            let inst = &instances[i];
            match (inst.positives.is_empty(), inst.negatives.is_empty()) {
                (true, true) => continue,
                (false, true) => {
                    labels[slot] = RankLabel::Positive;
                    forced_pos += 1;
                }
                (true, false) => labels[slot] = RankLabel::Negative,
                (false, false) => free.push(slot),
            }
            rankable += 1;
        }
        let mut want_pos = rankable / 2;
        if rankable % 2 == 1 && rng.gen_bool(0.5) {
            want_pos += 1;
        }
        let free_pos = want_pos.saturating_sub(forced_pos).min(free.len());
        free.shuffle(&mut rng);
        for (k, &slot) in free.iter().enumerate() {
            labels[slot] = if k < free_pos {
                RankLabel::Positive
            } else {
                RankLabel::Negative
            };
        }

        let elements = chunk
            .iter()
            .zip(labels)
            .map(|(&i, rk_label)| {
                let inst = &instances[i];
                let pool = match rk_label {
                    RankLabel::Positive => &inst.positives,
                    RankLabel::Negative => &inst.negatives,
                    RankLabel::NoRank => {
                        return BatchElement {
                            instance: i,
                            rk_label,
                            path: None,
                        }
                    }
                };
                BatchElement {
                    instance: i,
                    rk_label,
                    path: Some(pool[rng.gen_range(0..pool.len())].clone()),
                }
            })
            .collect();
        batches.push(Batch { elements });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(end: &str) -> ContextPath {
        ContextPath::new("a", vec![("r".into(), end.into())])
    }

    fn inst(n_pos: usize, n_neg: usize) -> TrainingInstance {
        TrainingInstance {
            conversation: "c".into(),
            turn: 0,
            input_ids: vec![7],
            target_ids: vec![3],
            domain_id: 0,
            positives: (0..n_pos).map(|i| path(&format!("p{i}"))).collect(),
            negatives: (0..n_neg).map(|i| path(&format!("n{i}"))).collect(),
            answer_in_target: true,
        }
    }

    fn signs(b: &Batch) -> Vec<i32> {
        b.elements
            .iter()
            .map(|e| match e.rk_label {
                RankLabel::Positive => 1,
                RankLabel::Negative => -1,
                RankLabel::NoRank => 0,
            })
            .collect()
    }

    #[test]
    fn balanced_batch() {
        let insts: Vec<_> = (0..4).map(|_| inst(2, 3)).collect();
        let batches = make_batches(&insts, 4, 11).unwrap();
        assert_eq!(batches.len(), 1);
        let mut s = signs(&batches[0]);
        s.sort();
        assert_eq!(s, vec![-1, -1, 1, 1]);
    }

    #[test]
    fn forced_labels() {
        let insts = vec![inst(0, 3), inst(2, 2), inst(2, 2), inst(2, 0), inst(0, 0), inst(1, 1)];
        for seed in 0..20 {
            for b in make_batches(&insts, 2, seed).unwrap() {
                for e in &b.elements {
                    let expect = match e.instance {
                        0 => Some(RankLabel::Negative),
                        3 => Some(RankLabel::Positive),
                        4 => Some(RankLabel::NoRank),
                        _ => None,
                    };
                    if let Some(l) = expect {
                        assert_eq!(e.rk_label, l);
                    }
                    assert_eq!(e.path.is_none(), e.rk_label == RankLabel::NoRank);
                }
            }
        }
    }

    #[test]
    fn odd_batch_size_rejected() {
        assert!(matches!(make_batches(&[inst(1, 1)], 3, 0), Err(Error::Config(_))));
        assert!(make_batches(&[inst(1, 1)], 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let insts: Vec<_> = (0..13).map(|i| inst(1 + i % 3, 2 + i % 4)).collect();
        assert_eq!(make_batches(&insts, 4, 5).unwrap(), make_batches(&insts, 4, 5).unwrap());
        assert_ne!(make_batches(&insts, 4, 5).unwrap(), make_batches(&insts, 4, 6).unwrap());
    }

    proptest! {
        #[test]
        fn epoch_is_half_positive(half in 1usize..30, b in 1usize..6, seed in any::<u64>()) {
            let insts: Vec<_> = (0..2 * half).map(|i| inst(1 + i % 2, 1 + i % 3)).collect();
            let batches = make_batches(&insts, 2 * b, seed).unwrap();
            let pos: usize = batches.iter().flat_map(|b| &b.elements)
                .filter(|e| e.rk_label == RankLabel::Positive).count();
            prop_assert_eq!(pos * 2, insts.len());
            for batch in &batches {
                for e in &batch.elements {
                    let i = &insts[e.instance];
                    let p = e.path.as_ref().unwrap();
                    match e.rk_label {
                        RankLabel::Positive => prop_assert!(i.positives.contains(p)),
                        RankLabel::Negative => prop_assert!(i.negatives.contains(p)),
                        RankLabel::NoRank => prop_assert!(false),
                    }
                }
            }
        }
    }
}
