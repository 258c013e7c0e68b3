//! Synthetic conversational benchmark over a domain-partitioned graph.
//!
//! Every relation and entity belongs to one domain and edges stay inside a
//! domain. A conversation picks a domain and a topic entity; each turn is a
//! 1-3 hop walk phrased from templates. Follow-up turns refer back to the
//! topic ("it") or to the previous answer ("that one"), so the referent is
//! only recoverable from the dialog history.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_conversations, Conversation, Domains, Turn};
use crate::error::{Error, Result};
use crate::kg::{extract_context_paths, label_paths, KnowledgeGraph, Triple};

const DOMAIN_NAMES: [&str; 5] = ["books", "movies", "music", "soccer", "tv series"];

const RELATION_WORDS: [&str; 48] = [
    "author", "publisher", "genre", "director", "producer", "composer", "performer", "label",
    "country", "founder", "coach", "stadium", "creator", "network", "language", "setting",
    "sequel", "award", "editor", "illustrator", "narrator", "studio", "distributor", "location",
    "owner", "member", "captain", "rival", "league", "sponsor", "venue", "character", "writer",
    "designer", "developer", "platform", "series", "city", "region", "mentor", "spouse", "parent",
    "partner", "successor", "predecessor", "origin", "headquarters", "manager",
];

const QUESTION_OPENERS: [&str; 4] = ["what is", "which is", "tell me", "do you know"];

/// File names written by [`SynthOutput::write_to`].
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CONVERSATIONS_FILE: &str = "conversations.jsonl";
pub const DOMAINS_FILE: &str = "domains.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_conversations: usize,
    pub turns_per_conversation: usize,
    pub seed: u64,
    /// Fraction of turns whose context entities are swapped for ones that
    /// cannot reach the answer.
    pub corruption_rate: f64,
    /// Chance that an entity has an edge for each relation of its domain.
    pub edge_probability: f64,
    pub max_hops: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_entities: 200,
            n_relations: 12,
            n_conversations: 300,
            turns_per_conversation: 3,
            seed: 7,
            corruption_rate: 0.0,
            edge_probability: 0.5,
            max_hops: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub graph: KnowledgeGraph,
    pub conversations: Vec<Conversation>,
    pub domains: Domains,
}

impl SynthOutput {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (triples, labels) = self.graph.to_tsv();
        let tf = dir.join(TRIPLES_FILE);
        std::fs::write(&tf, triples).map_err(|e| Error::io(&tf, e))?;
        let lf = dir.join(LABELS_FILE);
        std::fs::write(&lf, labels).map_err(|e| Error::io(&lf, e))?;
        save_conversations(&dir.join(CONVERSATIONS_FILE), &self.conversations)?;
        self.domains.save(&dir.join(DOMAINS_FILE))
    }
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    let mut names: Vec<String> = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    while names.len() < n {
        let syllables = 2 + (names.len() % 2) + rng.gen_range(0..2);
        let mut s = String::new();
        for _ in 0..syllables {
            s.push(CONS[rng.gen_range(0..CONS.len())] as char);
            s.push(VOW[rng.gen_range(0..VOW.len())] as char);
        }
        s.push(CONS[rng.gen_range(0..CONS.len())] as char);
        // No name may occur inside another, so answer spans match exactly.
        if seen.contains(&s) || names.iter().any(|o| o.contains(&s) || s.contains(o.as_str())) {
            continue;
        }
        seen.insert(s.clone());
        let mut cap = s.clone();
        cap[..1].make_ascii_uppercase();
        names.push(cap);
    }
    names
}

struct World {
    /// Per entity: sorted `(relation index, tail entity index)`.
    edges: Vec<Vec<(usize, usize)>>,
    entity_domain: Vec<usize>,
    entity_ids: Vec<String>,
    entity_labels: Vec<String>,
    relation_ids: Vec<String>,
    relation_labels: Vec<String>,
}

impl World {
    /// Random simple walk of up to `hops` steps; `None` if no step possible.
    fn walk(&self, start: usize, hops: usize, rng: &mut ChaCha8Rng) -> Option<Vec<(usize, usize)>> {
        let mut visited = vec![start];
        let mut steps = Vec::new();
        let mut at = start;
        for _ in 0..hops {
            let options: Vec<&(usize, usize)> = self.edges[at]
                .iter()
                .filter(|(_, t)| !visited.contains(t))
                .collect();
            let Some(&&(r, t)) = options.choose(rng) else { break };
            steps.push((r, t));
            visited.push(t);
            at = t;
        }
        (!steps.is_empty()).then_some(steps)
    }

    fn chain(&self, steps: &[(usize, usize)]) -> String {
        steps
            .iter()
            .rev()
            .map(|(r, _)| format!("the {}", self.relation_labels[*r]))
            .collect::<Vec<_>>()
            .join(" of ")
    }

    fn fluent(&self, subject: &str, steps: &[(usize, usize)]) -> String {
        let rel = |i: usize| &self.relation_labels[steps[i].0];
        let node = |i: usize| &self.entity_labels[steps[i].1];
        match steps.len() {
            1 => format!("the {} of {subject} is {} .", rel(0), node(0)),
            2 => format!(
                "the {} of {subject} is {} , and its {} is {} .",
                rel(0),
                node(0),
                rel(1),
                node(1)
            ),
            _ => format!(
                "the {} of {subject} is {} , whose {} is {} , and its {} is {} .",
                rel(0),
                node(0),
                rel(1),
                node(1),
                rel(2),
                node(2)
            ),
        }
    }
}

fn hop_count(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i + 1;
        }
    }
    weights.len()
}

pub fn generate_synthetic_benchmark(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.n_domains < 2 {
        return Err(Error::Config("synthetic benchmark needs at least 2 domains".into()));
    }
    if spec.n_entities == 0 || spec.n_conversations == 0 || spec.turns_per_conversation == 0 {
        return Err(Error::Config("synthetic benchmark counts must be at least 1".into()));
    }
    if spec.n_relations > RELATION_WORDS.len() {
        return Err(Error::Config(format!(
            "{} relations requested but only {} relation templates exist",
            spec.n_relations,
            RELATION_WORDS.len()
        )));
    }
    if spec.n_relations < spec.n_domains || spec.n_entities < 2 * spec.n_domains {
        return Err(Error::Config(
            "every domain needs at least one relation and two entities".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.corruption_rate) {
        return Err(Error::Config("corruption rate must lie in [0, 1]".into()));
    }
    if !(1..=3).contains(&spec.max_hops) {
        return Err(Error::Config("max_hops must be 1, 2 or 3".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let domains: Vec<String> = (0..spec.n_domains)
        .map(|d| {
            DOMAIN_NAMES
                .get(d)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("domain {d}"))
        })
        .collect();

    let relation_domain: Vec<usize> = (0..spec.n_relations).map(|r| r % spec.n_domains).collect();
    let entity_domain: Vec<usize> = (0..spec.n_entities).map(|e| e % spec.n_domains).collect();
    let members = |d: usize| -> Vec<usize> { (0..spec.n_entities).filter(|&e| entity_domain[e] == d).collect() };
    let domain_entities: Vec<Vec<usize>> = (0..spec.n_domains).map(members).collect();
    let domain_relations: Vec<Vec<usize>> = (0..spec.n_domains)
        .map(|d| (0..spec.n_relations).filter(|&r| relation_domain[r] == d).collect())
        .collect();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.n_entities];
    for (e, out) in edges.iter_mut().enumerate() {
        let d = entity_domain[e];
        let peers: Vec<usize> = domain_entities[d].iter().copied().filter(|&x| x != e).collect();
        for &r in &domain_relations[d] {
            if rng.gen_bool(spec.edge_probability) {
                out.push((r, *peers.choose(&mut rng).expect("two entities per domain")));
            }
        }
        if out.is_empty() {
            let r = *domain_relations[d].choose(&mut rng).expect("one relation per domain");
            out.push((r, *peers.choose(&mut rng).expect("two entities per domain")));
        }
        out.sort();
    }

    let world = World {
        entity_ids: (0..spec.n_entities).map(|e| format!("e{e}")).collect(),
        entity_labels: entity_names(spec.n_entities, &mut rng),
        relation_ids: (0..spec.n_relations).map(|r| format!("r{r}")).collect(),
        relation_labels: RELATION_WORDS[..spec.n_relations].iter().map(|s| s.to_string()).collect(),
        edges,
        entity_domain,
    };

    let mut triples = Vec::new();
    for (e, out) in world.edges.iter().enumerate() {
        for &(r, t) in out {
            triples.push(Triple {
                head: world.entity_ids[e].clone(),
                relation: world.relation_ids[r].clone(),
                tail: world.entity_ids[t].clone(),
            });
        }
    }
    let labels = world
        .entity_ids
        .iter()
        .cloned()
        .zip(world.entity_labels.iter().cloned())
        .chain(
            world
                .relation_ids
                .iter()
                .cloned()
                .zip(world.relation_labels.iter().cloned()),
        );
    let graph = KnowledgeGraph::from_triples(triples, labels)?;

    let mut conversations = Vec::with_capacity(spec.n_conversations);
    let follow_hops = [0.6, 0.4, 0.0];
    let first_hops = [0.5, 0.35, 0.15];
    for c in 0..spec.n_conversations {
        let d = rng.gen_range(0..spec.n_domains);
        let topic = *domain_entities[d].choose(&mut rng).expect("entities per domain");
        let mut mentioned: BTreeSet<usize> = BTreeSet::new();
        let mut turns = Vec::new();
        let mut prev_answer: Option<usize> = None;
        for t in 0..spec.turns_per_conversation {
            let opener = QUESTION_OPENERS.choose(&mut rng).expect("openers");
            let weights = if t == 0 { &first_hops } else { &follow_hops };
            let hops = hop_count(&mut rng, &weights[..spec.max_hops]);
            let back_to_topic = t == 0 || prev_answer.is_none() || rng.gen_bool(0.5);
            let (referent, steps) = {
                let first = if back_to_topic { topic } else { prev_answer.unwrap() };
                match world.walk(first, hops, &mut rng) {
                    Some(s) => (first, s),
                    None => (topic, world.walk(topic, hops, &mut rng).expect("topic has an edge")),
                }
            };
            let answer = steps.last().expect("non-empty walk").1;
            let chain = world.chain(&steps);
            let (question, subject) = if t == 0 {
                let topic_label = &world.entity_labels[topic];
                (format!("{opener} {chain} of {topic_label} ?"), topic_label.clone())
            } else if referent == topic {
                (format!("{opener} {chain} of it ?"), "it".to_string())
            } else {
                (
                    format!("{opener} {chain} of that one ?"),
                    world.entity_labels[referent].clone(),
                )
            };
            mentioned.insert(topic);
            let context: Vec<String> = mentioned.iter().map(|&e| world.entity_ids[e].clone()).collect();
            let mut turn = Turn {
                question,
                answers: vec![world.entity_ids[answer].clone()],
                answer_labels: vec![world.entity_labels[answer].clone()],
                fluent_response: world.fluent(&subject, &steps),
                context_entities: context,
                positives: None,
                negatives: None,
            };
            turn.fill_paths(&graph, spec.max_hops)?;
            debug_assert!(!turn.positives().is_empty());
            turns.push(turn);
            mentioned.extend(steps.iter().map(|&(_, n)| n));
            prev_answer = Some(answer);
        }
        conversations.push(Conversation {
            id: format!("conv{c:05}"),
            domain: domains[d].clone(),
            turns,
        });
    }

    corrupt(&mut conversations, &world, &graph, spec, &mut rng)?;

    Ok(SynthOutput {
        graph,
        conversations,
        domains: Domains(domains),
    })
}

/// Swaps the context entities of exactly `round(rate * turns)` turns for an
/// entity of another domain, from which the answer is unreachable.
fn corrupt(
    conversations: &mut [Conversation],
    world: &World,
    graph: &KnowledgeGraph,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut slots: Vec<(usize, usize)> = conversations
        .iter()
        .enumerate()
        .flat_map(|(c, conv)| (0..conv.turns.len()).map(move |t| (c, t)))
        .collect();
    let k = (spec.corruption_rate * slots.len() as f64).round() as usize;
    if k == 0 {
        return Ok(());
    }
    slots.shuffle(rng);
    let id_to_index: std::collections::HashMap<&str, usize> = world
        .entity_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    for &(c, t) in &slots[..k] {
        let turn = &mut conversations[c].turns[t];
        let answer_domain = world.entity_domain[id_to_index[turn.answers[0].as_str()]];
        loop {
            let e = rng.gen_range(0..world.entity_ids.len());
            if world.entity_domain[e] == answer_domain {
                continue;
            }
            let ctx = vec![world.entity_ids[e].clone()];
            let paths = extract_context_paths(graph, &ctx, spec.max_hops)?;
            let (pos, neg) = label_paths(paths, &turn.answer_set());
            if pos.is_empty() && !neg.is_empty() {
                turn.context_entities = ctx;
                turn.positives = Some(pos);
                turn.negatives = Some(neg);
                break;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_domains: 2,
            n_entities: 50,
            n_relations: 8,
            n_conversations: 20,
            turns_per_conversation: 3,
            seed,
            ..SynthSpec::default()
        }
    }

    fn bytes(dir: &Path) -> Vec<Vec<u8>> {
        [TRIPLES_FILE, LABELS_FILE, CONVERSATIONS_FILE, DOMAINS_FILE]
            .iter()
            .map(|f| std::fs::read(dir.join(f)).unwrap())
            .collect()
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_benchmark(&small(7)).unwrap().write_to(a.path()).unwrap();
        generate_synthetic_benchmark(&small(7)).unwrap().write_to(b.path()).unwrap();
        assert_eq!(bytes(a.path()), bytes(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_benchmark(&small(8)).unwrap().write_to(c.path()).unwrap();
        assert_ne!(bytes(a.path()), bytes(c.path()));
    }

    #[test]
    fn every_turn_has_a_positive() {
        let out = generate_synthetic_benchmark(&small(3)).unwrap();
        assert_eq!(out.conversations.len(), 20);
        for c in &out.conversations {
            assert_eq!(c.turns.len(), 3);
            for t in &c.turns {
                assert!(!t.positives().is_empty(), "{}: {}", c.id, t.question);
                assert!(t.fluent_response.contains(&t.answer_labels[0]));
                for p in t.positives().iter().chain(t.negatives()) {
                    p.validate(&out.graph).unwrap();
                }
            }
        }
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic_benchmark(&small(5)).unwrap();
        out.write_to(dir.path()).unwrap();
        let g = KnowledgeGraph::load(&dir.path().join(TRIPLES_FILE), &dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(g.triples(), out.graph.triples());
        let convs = super::super::load_conversations(&dir.path().join(CONVERSATIONS_FILE)).unwrap();
        assert_eq!(convs, out.conversations);
        assert_eq!(Domains::load(&dir.path().join(DOMAINS_FILE)).unwrap(), out.domains);
    }

    #[test]
    fn corruption_rate_is_honored() {
        let mut spec = small(7);
        spec.n_conversations = 100;
        spec.corruption_rate = 0.25;
        let out = generate_synthetic_benchmark(&spec).unwrap();
        let total: usize = out.conversations.iter().map(|c| c.turns.len()).sum();
        let stripped = out
            .conversations
            .iter()
            .flat_map(|c| &c.turns)
            .filter(|t| t.positives().is_empty())
            .count();
        let frac = stripped as f64 / total as f64;
        assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn infeasible_specs() {
        let mut s = small(1);
        s.n_relations = 49;
        assert!(matches!(generate_synthetic_benchmark(&s), Err(Error::Config(_))));
        let mut s = small(1);
        s.n_domains = 1;
        assert!(generate_synthetic_benchmark(&s).is_err());
    }
}
