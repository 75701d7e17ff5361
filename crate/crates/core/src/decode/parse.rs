use super::{PredictionSet, Provenance, SlotTriple};
use crate::ontology::Ontology;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParseOutcome {
    pub prediction: PredictionSet,
    pub diagnostics: Vec<String>,
}

/// Parses `Label(slot=value, ...); Label; ...` completions.
///
/// Labels resolve against ontology ids and labels, case-insensitively.
/// Unresolvable entries (and their slots) are dropped with a diagnostic; the
/// parser never fails. Slot domains are the domain ancestor of the intent.
pub fn parse_text_output(text: &str, o: &Ontology) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    if text.trim().is_empty() {
        out.diagnostics.push("empty completion".to_string());
        return out;
    }

    for raw in split_entries(text) {
        let entry = raw.trim().trim_end_matches('.').trim();
        if entry.is_empty() {
            continue;
        }
        let (name, args) = match entry.find('(') {
            Some(open) => {
                let Some(body) = entry[open + 1..].strip_suffix(')') else {
                    out.diagnostics.push(format!("unbalanced parentheses in `{entry}`"));
                    continue;
                };
                (&entry[..open], Some(body))
            }
            None => (entry, None),
        };
        // tolerate a leading "Answer intents:" style prefix
        let name = name.rsplit(':').next().unwrap_or(name).trim();
        let Some(node) = o.resolve_name(name) else {
            out.diagnostics.push(format!("unknown intent `{name}` dropped"));
            continue;
        };
        out.prediction.intents.insert(node.id.clone(), Provenance::Generated);

        let Some(args) = args else { continue };
        let domain = o
            .domain_of(&node.id)
            .ok()
            .flatten()
            .map(|d| d.id.clone())
            .unwrap_or_default();
        for pair in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match pair.split_once('=') {
                Some((slot, value)) if !slot.trim().is_empty() && !value.trim().is_empty() => {
                    out.prediction.slots.insert(SlotTriple::new(&domain, slot, value));
                }
                _ => out.diagnostics.push(format!("malformed slot `{pair}` for `{}`", node.id)),
            }
        }
    }

    if out.prediction.is_empty() && out.diagnostics.is_empty() {
        out.diagnostics.push("no intents found".to_string());
    }
    out
}

/// Splits on `;` and newlines outside parentheses.
fn split_entries(text: &str) -> Vec<&str> {
    let mut entries = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ';' | '\n' if depth == 0 => {
                entries.push(&text[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    entries.push(&text[start..]);
    entries
}
