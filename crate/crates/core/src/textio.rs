//! A closed description grammar over scene graphs.
//!
//! Relation sentences have the shape
//!
//! ```text
//! The <object> is <north|south|east|west> of the <object>.
//! ```
//!
//! and may chain further clauses ("..., and west of the tree"). Objects
//! with no relation are introduced with `There is a <object>.` A trailing
//! integer marks repeated objects: `house 2` is the second house.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::sync::LazyLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;

use crate::scenegraph::{Relation, SceneGraph};

/// Default cap on relation sentences per description.
pub const DEFAULT_MAX_SENTENCES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("sentence {index} is unparseable: {sentence:?}")]
    UnparseableSentence { index: usize, sentence: String },
}

/// An object mention: label plus duplicate ordinal (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelRef {
    pub label: String,
    pub ordinal: u32,
}

impl LabelRef {
    pub fn new(label: impl Into<String>, ordinal: u32) -> Self {
        Self {
            label: label.into(),
            ordinal,
        }
    }
}

impl fmt::Display for LabelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ordinal > 1 {
            write!(f, "{} {}", self.label, self.ordinal)
        } else {
            f.write_str(&self.label)
        }
    }
}

/// "`subject` lies `relation` of `object`".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParsedRelation {
    pub subject: LabelRef,
    pub relation: Relation,
    pub object: LabelRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedDescription {
    pub labels: Vec<LabelRef>,
    pub relations: Vec<ParsedRelation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Description {
    pub sentences: Vec<String>,
}

impl Description {
    pub fn new(sentences: Vec<String>) -> Self {
        Self { sentences }
    }

    /// One sentence per non-blank line.
    pub fn from_lines(text: &str) -> Self {
        Self {
            sentences: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        }
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push('\n');
        }
        out
    }
}

static RELATION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(north|south|east|west)\s+of\b").unwrap());
static EXISTENCE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^there\s+(?:is|are)\s+(?:an?|the|one)?\s*(.+)$").unwrap());

fn relation_from_word(word: &str) -> Relation {
    match word.to_ascii_lowercase().as_str() {
        "north" => Relation::North,
        "south" => Relation::South,
        "east" => Relation::East,
        _ => Relation::West,
    }
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn strip_suffix_ci<'a>(s: &'a str, suffix: &str) -> Option<&'a str> {
    let cut = s.len().checked_sub(suffix.len())?;
    let tail = s.get(cut..)?;
    tail.eq_ignore_ascii_case(suffix).then(|| &s[..cut])
}

fn trim_punct(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == ',' || c == ';' || c == '.').trim()
}

/// Turn a noun phrase into a label reference, dropping determiners and a
/// leading/trailing connective.
fn noun_phrase(raw: &str) -> Option<LabelRef> {
    let mut s = trim_punct(raw);
    for suffix in [" and is", " and", " is", " which is", " lies"] {
        if let Some(rest) = strip_suffix_ci(s, suffix) {
            s = trim_punct(rest);
        }
    }
    for prefix in ["and ", "is ", "the ", "a ", "an "] {
        if let Some(rest) = strip_prefix_ci(s, prefix) {
            s = rest.trim();
        }
    }
    let s = trim_punct(s);
    if s.is_empty() {
        return None;
    }
    if let Some((head, tail)) = s.rsplit_once(char::is_whitespace) {
        if let Ok(ordinal) = tail.parse::<u32>() {
            let head = head.trim();
            if ordinal >= 1 && !head.is_empty() {
                return Some(LabelRef::new(head, ordinal));
            }
        }
    }
    Some(LabelRef::new(s, 1))
}

/// Extract object labels and relations from a description.
pub fn parse_description(text: &Description) -> Result<ParsedDescription, TextError> {
    let mut parsed = ParsedDescription::default();
    let mut seen: HashSet<LabelRef> = HashSet::new();
    let mut add_label = |parsed: &mut ParsedDescription, l: &LabelRef| {
        if seen.insert(l.clone()) {
            parsed.labels.push(l.clone());
        }
    };
    for (index, raw) in text.sentences.iter().enumerate() {
        let unparseable = || TextError::UnparseableSentence {
            index,
            sentence: raw.clone(),
        };
        let sentence = raw.trim().trim_end_matches(['.', '!']).trim();
        let matches: Vec<_> = RELATION_RE.captures_iter(sentence).collect();
        if matches.is_empty() {
            let caps = EXISTENCE_RE.captures(sentence).ok_or_else(unparseable)?;
            let label = noun_phrase(&caps[1]).ok_or_else(unparseable)?;
            add_label(&mut parsed, &label);
            continue;
        }
        let first = matches[0].get(0).unwrap();
        let subject = noun_phrase(&sentence[..first.start()]).ok_or_else(unparseable)?;
        add_label(&mut parsed, &subject);
        for (k, caps) in matches.iter().enumerate() {
            let whole = caps.get(0).unwrap();
            let end = matches.get(k + 1).map_or(sentence.len(), |m| m.get(0).unwrap().start());
            let object = noun_phrase(&sentence[whole.end()..end]).ok_or_else(unparseable)?;
            add_label(&mut parsed, &object);
            parsed.relations.push(ParsedRelation {
                subject: subject.clone(),
                relation: relation_from_word(&caps[1]),
                object,
            });
        }
    }
    Ok(parsed)
}

fn label_ref(graph: &SceneGraph, index: usize) -> LabelRef {
    let node = &graph.nodes()[index];
    LabelRef::new(node.label.clone(), node.ordinal)
}

/// The description content of a graph: at most `max_sentences` relations
/// plus every object not mentioned by one of them.
///
/// Edges that reach a not-yet-mentioned object are preferred, so a capped
/// description still covers as many objects as possible.
pub fn describe_graph(graph: &SceneGraph, max_sentences: usize) -> ParsedDescription {
    let edges = graph.edges();
    let mut covered = vec![false; graph.nodes().len()];
    let mut chosen = vec![false; edges.len()];
    let mut budget = max_sentences;
    for (k, e) in edges.iter().enumerate() {
        if budget == 0 {
            break;
        }
        if !covered[e.from] || !covered[e.to] {
            covered[e.from] = true;
            covered[e.to] = true;
            chosen[k] = true;
            budget -= 1;
        }
    }
    for flag in chosen.iter_mut() {
        if budget == 0 {
            break;
        }
        if !*flag {
            *flag = true;
            budget -= 1;
        }
    }
    let mut labels = Vec::new();
    let mut listed = BTreeSet::new();
    let mut relations = Vec::new();
    for (e, _) in edges.iter().zip(&chosen).filter(|(_, c)| **c) {
        // Edge from -> to means `to` lies R of `from`, i.e. `from` lies
        // opposite(R) of `to`.
        relations.push(ParsedRelation {
            subject: label_ref(graph, e.from),
            relation: e.relation.opposite(),
            object: label_ref(graph, e.to),
        });
        for i in [e.from, e.to] {
            if listed.insert(i) {
                labels.push(label_ref(graph, i));
            }
        }
    }
    for i in 0..graph.nodes().len() {
        if listed.insert(i) {
            labels.push(label_ref(graph, i));
        }
    }
    ParsedDescription { labels, relations }
}

/// Render parsed content back to sentences: relations first, then objects
/// not mentioned by any relation.
pub fn render_description(parsed: &ParsedDescription) -> Description {
    let mut sentences = Vec::new();
    let mut mentioned = HashSet::new();
    for r in &parsed.relations {
        sentences.push(format!("The {} is {} of the {}.", r.subject, r.relation.word(), r.object));
        mentioned.insert(&r.subject);
        mentioned.insert(&r.object);
    }
    for l in &parsed.labels {
        if !mentioned.contains(l) {
            sentences.push(format!("There is a {l}."));
        }
    }
    Description { sentences }
}

/// Describe a graph in at most `max_sentences` relation sentences.
///
/// Objects without any edge get an existence sentence, which does not count
/// against the cap.
pub fn generate_description(graph: &SceneGraph, max_sentences: usize) -> Description {
    render_description(&describe_graph(graph, max_sentences))
}

/// Remove `drop_labels` random objects (with their relations) and flip
/// `flip_relations` random relations to a different direction.
pub fn perturb_description(
    parsed: &ParsedDescription,
    drop_labels: usize,
    flip_relations: usize,
    seed: u64,
) -> ParsedDescription {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop = drop_labels.min(parsed.labels.len().saturating_sub(1));
    let dropped: HashSet<&LabelRef> = sample(&mut rng, parsed.labels.len(), drop)
        .into_iter()
        .map(|i| &parsed.labels[i])
        .collect();
    let labels: Vec<LabelRef> = parsed.labels.iter().filter(|l| !dropped.contains(l)).cloned().collect();
    let mut relations: Vec<ParsedRelation> = parsed
        .relations
        .iter()
        .filter(|r| !dropped.contains(&r.subject) && !dropped.contains(&r.object))
        .cloned()
        .collect();
    let flips = flip_relations.min(relations.len());
    let mut chosen: Vec<usize> = sample(&mut rng, relations.len(), flips).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let current = relations[i].relation;
        let others: Vec<Relation> = Relation::ALL.into_iter().filter(|&r| r != current).collect();
        relations[i].relation = others[rng.random_range(0..others.len())];
    }
    ParsedDescription { labels, relations }
}
