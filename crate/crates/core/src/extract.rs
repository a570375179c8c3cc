//! Answer extraction from raw model text.
//!
//! Scoped parsers look at the last non-blank line, then the first, then the
//! whole response, and take the first scope that yields an answer. Inside a
//! scope the last mention wins, since reasoning-style answers tend to list
//! candidates before settling on one. Every parser is total: arbitrary text
//! maps to exactly one [`ParsedAnswer`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajdata::MotionClass;
use crate::trajgen::DirectionLabel;

const DEFAULT_VOCABULARY: &str = include_str!("../config/vocabulary.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedAnswer {
    DirectionList(Vec<DirectionLabel>),
    Motion(MotionClass),
    Shape(String),
    SpartChoice(String),
    Unparseable(String),
}

impl ParsedAnswer {
    pub fn is_unparseable(&self) -> bool {
        matches!(self, ParsedAnswer::Unparseable(_))
    }
}

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary syntax: {0}")]
    Syntax(#[from] toml::de::Error),
}

/// Synonym tables for every label family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub motion: BTreeMap<MotionClass, Vec<String>>,
    pub directions: BTreeMap<DirectionLabel, Vec<String>>,
    pub shapes: BTreeMap<String, Vec<String>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        toml::from_str(DEFAULT_VOCABULARY).expect("bundled vocabulary parses")
    }
}

impl Vocabulary {
    pub fn from_toml(text: &str) -> Result<Self, VocabularyError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, VocabularyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Shape tags in configuration order.
    pub fn shape_tags(&self) -> Vec<String> {
        self.shapes.keys().cloned().collect()
    }

    fn motion_forms(&self, class: MotionClass) -> Vec<String> {
        with_base(class.as_str(), self.motion.get(&class))
    }

    fn direction_forms(&self, label: DirectionLabel) -> Vec<String> {
        with_base(label.as_str(), self.directions.get(&label))
    }

    fn shape_forms(&self, tag: &str) -> Vec<String> {
        with_base(tag, self.shapes.get(tag))
    }
}

fn with_base(base: &str, extra: Option<&Vec<String>>) -> Vec<String> {
    let mut forms = vec![base.to_string()];
    if let Some(extra) = extra {
        forms.extend(extra.iter().cloned());
    }
    forms
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// End positions (exclusive, in tokens) of every occurrence of `phrase`.
fn occurrences(tokens: &[String], phrase: &[String]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return Vec::new();
    }
    tokens
        .windows(phrase.len())
        .enumerate()
        .filter(|(_, w)| *w == phrase)
        .map(|(start, _)| start + phrase.len())
        .collect()
}

/// Rank of the last mention of any form: later end first, then longer form.
fn last_mention(tokens: &[String], forms: &[String]) -> Option<(usize, usize)> {
    forms
        .iter()
        .filter_map(|f| {
            let phrase = tokenize(f);
            occurrences(tokens, &phrase).last().map(|&end| (end, phrase.len()))
        })
        .max()
}

pub(crate) fn mentions(scope: &str, phrase: &str) -> bool {
    !occurrences(&tokenize(scope), &tokenize(phrase)).is_empty()
}

/// Non-blank lines, trimmed.
fn lines(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Last line, first line, whole text.
fn scopes(text: &str) -> Vec<&str> {
    let ls = lines(text);
    match (ls.first(), ls.last()) {
        (Some(first), Some(last)) => vec![*last, *first, text],
        _ => Vec::new(),
    }
}

/// Last line then first line only.
pub(crate) fn edge_lines(text: &str) -> Vec<&str> {
    let ls = lines(text);
    match (ls.first(), ls.last()) {
        (Some(first), Some(last)) => vec![*last, *first],
        _ => Vec::new(),
    }
}

fn pick_last<T: Clone>(tokens: &[String], candidates: &[(T, Vec<String>)]) -> Option<T> {
    candidates
        .iter()
        .filter_map(|(value, forms)| last_mention(tokens, forms).map(|rank| (rank, value)))
        .max_by_key(|(rank, _)| *rank)
        .map(|(_, v)| v.clone())
}

pub fn parse_motion(text: &str, vocab: &Vocabulary) -> ParsedAnswer {
    let table: Vec<(MotionClass, Vec<String>)> = MotionClass::ALL
        .into_iter()
        .map(|c| (c, vocab.motion_forms(c)))
        .collect();
    for scope in scopes(text) {
        if let Some(class) = pick_last(&tokenize(scope), &table) {
            return ParsedAnswer::Motion(class);
        }
    }
    ParsedAnswer::Unparseable("no motion label found".into())
}

fn direction_words(scope: &str, table: &[(DirectionLabel, Vec<Vec<String>>)]) -> Vec<DirectionLabel> {
    let tokens = tokenize(scope);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = table
            .iter()
            .flat_map(|(label, forms)| forms.iter().map(move |f| (label, f)))
            .filter(|(_, f)| !f.is_empty() && tokens[i..].starts_with(f))
            .max_by_key(|(_, f)| f.len());
        match hit {
            Some((label, form)) => {
                out.push(*label);
                i += form.len();
            }
            None => i += 1,
        }
    }
    out
}

pub fn parse_directions(text: &str, expected_len: usize, vocab: &Vocabulary) -> ParsedAnswer {
    if expected_len == 0 {
        return ParsedAnswer::Unparseable("expected length must be at least 1".into());
    }
    let table: Vec<(DirectionLabel, Vec<Vec<String>>)> = DirectionLabel::ALL
        .into_iter()
        .map(|d| (d, vocab.direction_forms(d).iter().map(|f| tokenize(f)).collect()))
        .collect();
    for scope in scopes(text) {
        let found = direction_words(scope, &table);
        if found.len() == expected_len {
            return ParsedAnswer::DirectionList(found);
        }
    }
    let found = direction_words(text, &table).len();
    ParsedAnswer::Unparseable(format!("found {found} of {expected_len}"))
}

/// Candidate match on the last then first line. Longer candidates are tried
/// first so that `medium black square` is not shadowed by `square`; among
/// equally long candidates the last mention wins.
pub fn parse_spartqa(text: &str, candidates: &[String]) -> ParsedAnswer {
    let mut by_len: BTreeMap<usize, Vec<(String, Vec<String>)>> = BTreeMap::new();
    for c in candidates {
        let n = tokenize(c).len();
        if n > 0 {
            by_len.entry(n).or_default().push((c.clone(), vec![c.clone()]));
        }
    }
    if by_len.is_empty() {
        return ParsedAnswer::Unparseable("no usable candidates".into());
    }
    for scope in edge_lines(text) {
        let tokens = tokenize(scope);
        for group in by_len.values().rev() {
            if let Some(choice) = pick_last(&tokens, group) {
                return ParsedAnswer::SpartChoice(choice);
            }
        }
    }
    ParsedAnswer::Unparseable("no candidate on the first or last line".into())
}

pub fn parse_shape(text: &str, tags: &[String], vocab: &Vocabulary) -> ParsedAnswer {
    let table: Vec<(String, Vec<String>)> = tags
        .iter()
        .map(|t| (t.clone(), vocab.shape_forms(t)))
        .collect();
    match pick_last(&tokenize(text), &table) {
        Some(tag) => ParsedAnswer::Shape(tag),
        None => ParsedAnswer::Unparseable("no shape label found".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v() -> Vocabulary {
        Vocabulary::default()
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bundled_vocabulary_loads() {
        let vocab = v();
        assert_eq!(vocab.shape_tags(), strings(&["checkmark", "circle"]));
        assert_eq!(vocab.motion.len(), 3);
        assert_eq!(vocab.directions.len(), 4);
    }

    #[test]
    fn motion_examples() {
        assert_eq!(parse_motion("The motion is lifting.", &v()), ParsedAnswer::Motion(MotionClass::Lift));
        assert_eq!(
            parse_motion("It could be lifting or sliding.\nFinal answer: sliding", &v()),
            ParsedAnswer::Motion(MotionClass::Slide)
        );
        assert!(parse_motion("The trajectory meanders.", &v()).is_unparseable());
        assert!(parse_motion("", &v()).is_unparseable());
        // "slider" is not a whole-word match for any slide form
        assert!(parse_motion("a slider moved", &v()).is_unparseable());
    }

    #[test]
    fn direction_examples() {
        let d = |s: &str, n| parse_directions(s, n, &v());
        use DirectionLabel::*;
        assert_eq!(d("up, up, left", 3), ParsedAnswer::DirectionList(vec![Up, Up, Left]));
        assert_eq!(d("1. right 2. down", 2), ParsedAnswer::DirectionList(vec![Right, Down]));
        assert_eq!(d("right, down", 3), ParsedAnswer::Unparseable("found 2 of 3".into()));
        assert!(d("up", 0).is_unparseable());
    }

    #[test]
    fn spartqa_examples() {
        let abc = strings(&["A", "B", "C"]);
        assert_eq!(
            parse_spartqa("Let me think.\nThe answer is B", &abc),
            ParsedAnswer::SpartChoice("B".into())
        );
        let yn = strings(&["Yes", "No", "DK"]);
        assert_eq!(
            parse_spartqa("Yes.\nBecause the box is above.\nThat is all I can say", &yn),
            ParsedAnswer::SpartChoice("Yes".into())
        );
        assert!(parse_spartqa("Intro\nIt is clearly B here\nDone", &abc).is_unparseable());
        let shapes = strings(&["square", "medium black square"]);
        assert_eq!(
            parse_spartqa("It is the medium black square", &shapes),
            ParsedAnswer::SpartChoice("medium black square".into())
        );
    }

    #[test]
    fn shape_examples() {
        let tags = strings(&["circle", "checkmark"]);
        assert_eq!(
            parse_shape("The object moves in a circular path", &tags, &v()),
            ParsedAnswer::Shape("circle".into())
        );
        assert_eq!(
            parse_shape("It moves along a path that mirrors the pattern of a checkmark", &tags, &v()),
            ParsedAnswer::Shape("checkmark".into())
        );
        assert_eq!(parse_shape("a check-mark", &tags, &v()), ParsedAnswer::Shape("checkmark".into()));
        assert!(parse_shape("a wavy squiggle", &tags, &v()).is_unparseable());
    }

    proptest! {
        #[test]
        fn parsers_are_total_and_case_insensitive(text in "[ -~\n]{0,200}", trailing in "[ \t\n]{0,5}") {
            let vocab = v();
            let tags = vocab.shape_tags();
            let cands = strings(&["Yes", "No", "left of", "above"]);
            let variants = [text.to_uppercase(), text.to_lowercase(), format!("{text}{trailing}")];
            let base = (
                parse_motion(&text, &vocab),
                parse_directions(&text, 3, &vocab),
                parse_spartqa(&text, &cands),
                parse_shape(&text, &tags, &vocab),
            );
            for t in variants {
                prop_assert_eq!(&parse_motion(&t, &vocab), &base.0);
                prop_assert_eq!(&parse_directions(&t, 3, &vocab), &base.1);
                prop_assert_eq!(&parse_spartqa(&t, &cands), &base.2);
                prop_assert_eq!(&parse_shape(&t, &tags, &vocab), &base.3);
            }
        }
    }
}
