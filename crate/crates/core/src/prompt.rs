//! Ontology-augmented prompt construction and its rewrites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, OntologyError};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot build a prompt from an empty subgraph")]
    EmptySubgraph,
    #[error("the example_augmented variant needs a worked example")]
    MissingExample,
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    Canonical,
    OrderSwap,
    OrderSwapCue,
    ExampleAugmented,
    KeywordChange,
    Minimal,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 6] = [
        PromptVariant::Canonical,
        PromptVariant::OrderSwap,
        PromptVariant::OrderSwapCue,
        PromptVariant::ExampleAugmented,
        PromptVariant::KeywordChange,
        PromptVariant::Minimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::Canonical => "canonical",
            PromptVariant::OrderSwap => "order_swap",
            PromptVariant::OrderSwapCue => "order_swap_cue",
            PromptVariant::ExampleAugmented => "example_augmented",
            PromptVariant::KeywordChange => "keyword_change",
            PromptVariant::Minimal => "minimal",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown prompt variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub variant: PromptVariant,
    /// Worked example prepended by `example_augmented`.
    pub example: Option<String>,
}

impl PromptTemplate {
    pub fn new(variant: PromptVariant) -> Self {
        PromptTemplate { variant, example: None }
    }

    pub fn with_example(mut self, example: impl Into<String>) -> Self {
        self.example = Some(example.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prompt {
    pub text: String,
    pub labels: Vec<String>,
    pub query: String,
}

const TASK_CUE: &str = "Your task is to choose the best intents.";

/// Builds the prompt for `query` listing the labels of `subgraph` in
/// (depth, id) order.
pub fn build_prompt<S: AsRef<str>>(
    query: &str,
    subgraph: &[S],
    o: &Ontology,
    template: &PromptTemplate,
) -> Result<Prompt, PromptError> {
    if subgraph.is_empty() {
        return Err(PromptError::EmptySubgraph);
    }
    let ordered = o.sort_by_depth(subgraph)?;
    let labels = ordered
        .iter()
        .map(|id| o.node(id).map(|n| n.label.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let list = labels.join(", ");

    let canonical = |noun: &str| format!("Possible {noun}s: {list}.\nQuery: \"{query}\". Answer {noun}s:");
    let swapped = format!("Possible intents: {{{list}}}.\nQuery: {query}\nAnswer intents:");
    let text = match template.variant {
        PromptVariant::Canonical => canonical("intent"),
        PromptVariant::OrderSwap => swapped,
        PromptVariant::OrderSwapCue => format!("{TASK_CUE}\n{swapped}"),
        PromptVariant::ExampleAugmented => {
            let example = template.example.as_deref().ok_or(PromptError::MissingExample)?;
            format!("{}\n\n{}", example.trim_end(), canonical("intent"))
        }
        PromptVariant::KeywordChange => canonical("option"),
        PromptVariant::Minimal => format!("Query: {query} {{{list}}}"),
    };
    Ok(Prompt { text, labels, query: query.to_string() })
}

/// Prompt used when no ontology labels are injected.
pub fn neutral_prompt(query: &str) -> Prompt {
    Prompt {
        text: format!("Query: \"{query}\". Answer intents:"),
        labels: Vec::new(),
        query: query.to_string(),
    }
}

/// Recovers the label list embedded in a prompt built with `variant`.
pub fn embedded_labels(text: &str, variant: PromptVariant) -> Option<Vec<String>> {
    let list = match variant {
        PromptVariant::Canonical | PromptVariant::ExampleAugmented => {
            between_last(text, "Possible intents: ", ".\nQuery: \"")?
        }
        PromptVariant::KeywordChange => between_last(text, "Possible options: ", ".\nQuery: \"")?,
        PromptVariant::OrderSwap | PromptVariant::OrderSwapCue => {
            between_last(text, "Possible intents: {", "}.\nQuery: ")?
        }
        PromptVariant::Minimal => {
            let start = text.rfind('{')?;
            text[start + 1..].strip_suffix('}')?
        }
    };
    Some(list.split(", ").map(str::to_string).collect())
}

fn between_last<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.rfind(open)? + open.len();
    let end = start + text[start..].find(close)?;
    Some(&text[start..end])
}
