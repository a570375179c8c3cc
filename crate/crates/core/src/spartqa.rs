//! Textual spatial QA instances with subtype tags, and choice grading.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::extract::{edge_lines, mentions, ParsedAnswer};
use crate::manifest::{self, ManifestError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QType {
    /// find relation
    FR,
    /// find blocks
    FB,
    /// choose object
    CO,
    /// yes / no
    YN,
}

impl QType {
    pub const ALL: [QType; 4] = [QType::FR, QType::FB, QType::CO, QType::YN];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::FR => "FR",
            QType::FB => "FB",
            QType::CO => "CO",
            QType::YN => "YN",
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpartQAInstance {
    pub id: String,
    pub story: String,
    pub question: String,
    pub qtype: QType,
    pub candidates: Vec<String>,
    pub gold: Vec<String>,
    /// Worked reasoning, used when the instance serves as a chain-of-thought
    /// example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

pub fn load_spartqa(path: &Path) -> Result<Vec<SpartQAInstance>, ManifestError> {
    manifest::read_records::<SpartQAInstance>(path)?
        .into_iter()
        .map(|(line, inst)| {
            if inst.candidates.iter().all(|c| c.trim().is_empty()) {
                return Err(ManifestError::invalid(line, &inst.id, "candidates", "no candidates"));
            }
            if inst.gold.is_empty() {
                return Err(ManifestError::invalid(line, &inst.id, "gold", "no gold answer"));
            }
            if let Some(g) = inst
                .gold
                .iter()
                .find(|g| !inst.candidates.iter().any(|c| c.eq_ignore_ascii_case(g)))
            {
                return Err(ManifestError::invalid(
                    line,
                    &inst.id,
                    "gold",
                    format!("`{g}` is not among the candidates"),
                ));
            }
            Ok(inst)
        })
        .collect()
}

/// Correct iff the answer names any gold entry, ignoring case.
pub fn grade_choice(answer: &ParsedAnswer, inst: &SpartQAInstance) -> bool {
    match answer {
        ParsedAnswer::SpartChoice(choice) => inst.gold.iter().any(|g| g.eq_ignore_ascii_case(choice)),
        _ => false,
    }
}

/// Strict multi-answer grading: every gold entry must appear on the first or
/// last line of the raw response.
pub fn grade_all_gold(response: &str, inst: &SpartQAInstance) -> bool {
    all_gold_mentioned(response, &inst.gold)
}

pub fn all_gold_mentioned(response: &str, gold: &[String]) -> bool {
    let scopes = edge_lines(response);
    !scopes.is_empty()
        && !gold.is_empty()
        && gold.iter().all(|g| scopes.iter().any(|line| mentions(line, g)))
}
