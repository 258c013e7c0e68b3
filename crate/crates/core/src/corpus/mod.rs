//! Conversation records, input-sequence assembly, and training instances.

mod batch;
pub mod synth;
pub mod tokenizer;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch, BatchElement, RankLabel};
pub use tokenizer::Tokenizer;
use tokenizer::{ANS_ID, EOS_ID, SEP_ID};

use crate::error::{Error, Result};
use crate::kg::{extract_context_paths, label_paths, ContextPath, KnowledgeGraph};

/// Maximum encoder input length in tokens.
pub const MAX_INPUT_TOKENS: usize = 150;
/// Maximum decoder target length in tokens, `[EOS]` included.
pub const MAX_TARGET_TOKENS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answers: Vec<String>,
    pub answer_labels: Vec<String>,
    pub fluent_response: String,
    pub context_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<Vec<ContextPath>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Vec<ContextPath>>,
}

impl Turn {
    pub fn answer_set(&self) -> HashSet<String> {
        self.answers.iter().cloned().collect()
    }

    pub fn positives(&self) -> &[ContextPath] {
        self.positives.as_deref().unwrap_or(&[])
    }

    pub fn negatives(&self) -> &[ContextPath] {
        self.negatives.as_deref().unwrap_or(&[])
    }

    /// Bare answer text used in place of a fluent response.
    pub fn bare_answer(&self) -> String {
        self.answer_labels.join(" , ")
    }

    /// Extracts candidate paths from the graph and stores the labeled split.
    pub fn fill_paths(&mut self, graph: &KnowledgeGraph, max_hops: usize) -> Result<()> {
        let paths = extract_context_paths(graph, &self.context_entities, max_hops)?;
        let (pos, neg) = label_paths(paths, &self.answer_set());
        self.positives = Some(pos);
        self.negatives = Some(neg);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub domain: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Schema {
            conversation: self.id.clone(),
            message,
        };
        if self.domain.trim().is_empty() {
            return Err(fail("empty `domain`".into()));
        }
        if self.turns.is_empty() {
            return Err(fail("`turns` is empty".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.answers.is_empty() {
                return Err(fail(format!("turn {i}: `answers` is empty")));
            }
            if t.answer_labels.len() != t.answers.len() {
                return Err(fail(format!(
                    "turn {i}: `answer_labels` has {} entries for {} answers",
                    t.answer_labels.len(),
                    t.answers.len()
                )));
            }
            let answers = t.answer_set();
            if let Some(p) = t.positives().iter().find(|p| !answers.contains(p.endpoint())) {
                return Err(fail(format!("turn {i}: positive path {p} does not end in an answer")));
            }
            let pos: HashSet<&ContextPath> = t.positives().iter().collect();
            if t.negatives().iter().any(|p| pos.contains(p)) {
                return Err(fail(format!("turn {i}: path is both positive and negative")));
            }
        }
        Ok(())
    }
}

/// Reads one conversation per line; blank lines are skipped.
pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conversations(&text)
}

pub fn parse_conversations(text: &str) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: "conversations".into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Schema {
                conversation: format!("<line {}>", i + 1),
                message: "missing field `id`".into(),
            })?;
        let conv: Conversation = serde_json::from_value(value).map_err(|e| Error::Schema {
            conversation: id.clone(),
            message: e.to_string(),
        })?;
        conv.validate()?;
        out.push(conv);
    }
    Ok(out)
}

pub fn save_conversations(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for c in conversations {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ordered domain labels; line order in the file defines the ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domains(pub Vec<String>);

impl Domains {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if labels.is_empty() {
            return Err(Error::Config(format!("{}: no domains", path.display())));
        }
        Ok(Self(labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.0.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|d| d == label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    #[default]
    Full,
    PreviousTurnOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    #[default]
    Fluent,
    BareAnswer,
}

/// One prior exchange: the question and the response text shown for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub question: String,
    pub response: String,
}

/// Joins history and question with `[SEP]`, keeping at most
/// [`MAX_INPUT_TOKENS`] tokens by dropping the oldest ones.
pub fn assemble_input(
    history: &[Exchange],
    question: &str,
    tokenizer: &Tokenizer,
    history_mode: HistoryMode,
) -> Vec<u32> {
    let kept = match history_mode {
        HistoryMode::Full => history,
        HistoryMode::PreviousTurnOnly => &history[history.len().saturating_sub(1)..],
        HistoryMode::None => &[],
    };
    let mut ids = Vec::new();
    for ex in kept {
        ids.extend(tokenizer.encode(&ex.question));
        ids.push(SEP_ID);
        ids.extend(tokenizer.encode(&ex.response));
        ids.push(SEP_ID);
    }
    ids.extend(tokenizer.encode(question));
    if ids.len() > MAX_INPUT_TOKENS {
        ids.drain(..ids.len() - MAX_INPUT_TOKENS);
    }
    ids
}

/// Gold history of a conversation up to (not including) `turn_index`.
pub fn gold_history(conv: &Conversation, turn_index: usize, response_mode: ResponseMode) -> Vec<Exchange> {
    conv.turns[..turn_index]
        .iter()
        .map(|t| Exchange {
            question: t.question.clone(),
            response: match response_mode {
                ResponseMode::Fluent => t.fluent_response.clone(),
                ResponseMode::BareAnswer => t.bare_answer(),
            },
        })
        .collect()
}

pub fn build_input_sequence(
    conv: &Conversation,
    turn_index: usize,
    tokenizer: &Tokenizer,
    history_mode: HistoryMode,
    response_mode: ResponseMode,
) -> Result<Vec<u32>> {
    if turn_index >= conv.turns.len() {
        return Err(Error::invalid(format!(
            "turn index {turn_index} out of range for {} turns",
            conv.turns.len()
        )));
    }
    let history = gold_history(conv, turn_index, response_mode);
    Ok(assemble_input(
        &history,
        &conv.turns[turn_index].question,
        tokenizer,
        history_mode,
    ))
}

/// Decoder target for a turn: the response with the answer span replaced by
/// `[ANS]`, followed by `[EOS]`. Returns the ids and whether an answer label
/// was found in the fluent text.
pub fn build_target(turn: &Turn, tokenizer: &Tokenizer, response_mode: ResponseMode) -> (Vec<u32>, bool) {
    let (mut ids, matched) = match response_mode {
        ResponseMode::BareAnswer => (vec![ANS_ID], true),
        ResponseMode::Fluent => {
            let hit = turn
                .answer_labels
                .iter()
                .filter(|l| !l.is_empty())
                .find_map(|l| turn.fluent_response.find(l.as_str()).map(|at| (at, l.len())));
            match hit {
                Some((at, len)) => {
                    let text = format!(
                        "{} {} {}",
                        &turn.fluent_response[..at],
                        tokenizer::ANS,
                        &turn.fluent_response[at + len..]
                    );
                    (tokenizer.encode(&text), true)
                }
                None => (tokenizer.encode(&turn.fluent_response), false),
            }
        }
    };
    ids.truncate(MAX_TARGET_TOKENS - 1);
    ids.push(EOS_ID);
    (ids, matched)
}

/// Everything the trainer needs for one conversational turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub conversation: String,
    pub turn: usize,
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub domain_id: usize,
    pub positives: Vec<ContextPath>,
    pub negatives: Vec<ContextPath>,
    /// False when no answer label occurs in the fluent response.
    pub answer_in_target: bool,
}

impl TrainingInstance {
    pub fn rankable(&self) -> bool {
        !(self.positives.is_empty() && self.negatives.is_empty())
    }
}

/// Ablation-relevant switches for instance construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InstanceOptions {
    pub history_mode: HistoryMode,
    pub response_mode: ResponseMode,
}

/// Builds one instance per turn. Turns lacking stored paths get them from
/// the graph.
pub fn build_instances(
    conversations: &[Conversation],
    tokenizer: &Tokenizer,
    domains: &Domains,
    graph: &KnowledgeGraph,
    max_hops: usize,
    options: InstanceOptions,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for conv in conversations {
        let domain_id = domains.id(&conv.domain).ok_or_else(|| Error::Schema {
            conversation: conv.id.clone(),
            message: format!("domain `{}` not in domain vocabulary", conv.domain),
        })?;
        for (t, turn) in conv.turns.iter().enumerate() {
            let (positives, negatives) = match (&turn.positives, &turn.negatives) {
                (Some(p), Some(n)) => (p.clone(), n.clone()),
                _ => {
                    let mut filled = turn.clone();
                    filled.fill_paths(graph, max_hops)?;
                    (filled.positives.unwrap_or_default(), filled.negatives.unwrap_or_default())
                }
            };
            let (target_ids, answer_in_target) = build_target(turn, tokenizer, options.response_mode);
            out.push(TrainingInstance {
                conversation: conv.id.clone(),
                turn: t,
                input_ids: build_input_sequence(
                    conv,
                    t,
                    tokenizer,
                    options.history_mode,
                    options.response_mode,
                )?,
                target_ids,
                domain_id,
                positives,
                negatives,
                answer_in_target,
            });
        }
    }
    Ok(out)
}

/// Every text a tokenizer should cover: questions, responses, answer and
/// entity labels.
pub fn corpus_texts<'a>(
    conversations: &'a [Conversation],
    graph: &'a KnowledgeGraph,
) -> Vec<&'a str> {
    let mut texts: BTreeSet<&str> = BTreeSet::new();
    for c in conversations {
        for t in &c.turns {
            texts.insert(&t.question);
            texts.insert(&t.fluent_response);
            texts.extend(t.answer_labels.iter().map(String::as_str));
        }
    }
    texts.extend(graph.entity_labels().values().map(String::as_str));
    texts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(q: &str, v: &str, ans: &str) -> Turn {
        Turn {
            question: q.into(),
            answers: vec![ans.into()],
            answer_labels: vec![ans.into()],
            fluent_response: v.into(),
            context_entities: vec![],
            positives: None,
            negatives: None,
        }
    }

    fn conv3() -> Conversation {
        Conversation {
            id: "c1".into(),
            domain: "books".into(),
            turns: vec![
                turn("who wrote it ?", "it was written by burnett", "burnett"),
                turn("when was it published ?", "the book was published in 1910", "1910"),
                turn("where was she born ?", "she was born in manchester", "manchester"),
            ],
        }
    }

    fn tok_for(c: &Conversation) -> Tokenizer {
        Tokenizer::train(c.turns.iter().flat_map(|t| [t.question.as_str(), t.fluent_response.as_str()]))
    }

    #[test]
    fn load_examples() {
        let c = conv3();
        let two = Conversation {
            turns: c.turns[..2].to_vec(),
            ..c.clone()
        };
        let line = serde_json::to_string(&two).unwrap();
        let convs = parse_conversations(&format!("{line}\n\n")).unwrap();
        assert_eq!(convs.len(), 1);
        assert_eq!(convs[0].turns.len(), 2);

        let bad = line.replace("\"answers\":[\"burnett\"]", "\"answers\":[]");
        match parse_conversations(&bad) {
            Err(Error::Schema { conversation, message }) => {
                assert_eq!(conversation, "c1");
                assert!(message.contains("answers"), "{message}");
            }
            other => panic!("{other:?}"),
        }

        let missing = line.replace("\"question\":\"who wrote it ?\",", "");
        match parse_conversations(&missing) {
            Err(Error::Schema { conversation, message }) => {
                assert_eq!(conversation, "c1");
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_sequence_examples() {
        let c = conv3();
        let tok = tok_for(&c);
        let q = |i: usize| tok.encode(&c.turns[i].question);
        let v = |i: usize| tok.encode(&c.turns[i].fluent_response);

        for mode in [HistoryMode::Full, HistoryMode::PreviousTurnOnly, HistoryMode::None] {
            let s = build_input_sequence(&c, 0, &tok, mode, ResponseMode::Fluent).unwrap();
            assert_eq!(s, q(0));
        }

        let s = build_input_sequence(&c, 1, &tok, HistoryMode::Full, ResponseMode::Fluent).unwrap();
        let expected: Vec<u32> = [q(0), vec![SEP_ID], v(0), vec![SEP_ID], q(1)].concat();
        assert_eq!(s, expected);

        let s = build_input_sequence(&c, 2, &tok, HistoryMode::PreviousTurnOnly, ResponseMode::Fluent)
            .unwrap();
        let expected: Vec<u32> = [q(1), vec![SEP_ID], v(1), vec![SEP_ID], q(2)].concat();
        assert_eq!(s, expected);

        let s = build_input_sequence(&c, 1, &tok, HistoryMode::Full, ResponseMode::BareAnswer).unwrap();
        let expected: Vec<u32> = [q(0), vec![SEP_ID], tok.encode("burnett"), vec![SEP_ID], q(1)].concat();
        assert_eq!(s, expected);

        assert!(build_input_sequence(&c, 3, &tok, HistoryMode::Full, ResponseMode::Fluent).is_err());
    }

    #[test]
    fn target_marks_answer() {
        let c = conv3();
        let tok = tok_for(&c);
        let (ids, matched) = build_target(&c.turns[1], &tok, ResponseMode::Fluent);
        assert!(matched);
        assert_eq!(tok.decode(&ids), "the book was published in [ANS] [EOS]");

        let mut t = c.turns[1].clone();
        t.answer_labels = vec!["1911".into()];
        let (ids, matched) = build_target(&t, &tok, ResponseMode::Fluent);
        assert!(!matched);
        assert_eq!(tok.decode(&ids), "the book was published in 1910 [EOS]");

        let (ids, _) = build_target(&t, &tok, ResponseMode::BareAnswer);
        assert_eq!(ids, vec![ANS_ID, EOS_ID]);
    }

    proptest! {
        #[test]
        fn input_never_exceeds_cap_and_ends_with_question(
            n_turns in 1usize..12,
            words in 1usize..40,
            mode in 0usize..3,
        ) {
            let vocab = ["alpha", "beta", "gamma", "delta"];
            let text = |k: usize| (0..words + k).map(|i| vocab[i % 4]).collect::<Vec<_>>().join(" ");
            let turns: Vec<Turn> = (0..n_turns).map(|k| turn(&text(k), &text(k + 1), "alpha")).collect();
            let c = Conversation { id: "x".into(), domain: "d".into(), turns };
            let tok = Tokenizer::train(vocab);
            let mode = [HistoryMode::Full, HistoryMode::PreviousTurnOnly, HistoryMode::None][mode];
            let t = n_turns - 1;
            let s = build_input_sequence(&c, t, &tok, mode, ResponseMode::Fluent).unwrap();
            prop_assert!(s.len() <= MAX_INPUT_TOKENS);
            let q = tok.encode(&c.turns[t].question);
            let tail = &q[q.len().saturating_sub(s.len())..];
            prop_assert!(s.ends_with(tail));
        }
    }
}
