//! Hierarchical intent ontology.
//!
//! The ontology is a rooted tree of intent nodes linked by `is-a` edges, plus
//! optional `related-to` cross links that are stored but never traversed by
//! the hierarchy queries. Depth counts from a virtual root at 0: domains sit at
//! depth 1, categories at 2 and intent leaves at 3.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Id of the virtual root. Files may declare it explicitly; otherwise the
/// loader synthesizes it over every parentless node.
pub const ROOT_ID: &str = "root";

const ROOT_LABEL: &str = "Root";

/// Characters that would break the prompt list or the output grammar.
const RESERVED_LABEL_CHARS: &[char] = &[',', ';', '{', '}', '(', ')', '\n', '\r'];

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("malformed ontology document: {0}")]
    Parse(String),
    #[error("invalid ontology: {0}")]
    Validation(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

pub type Result<T, E = OntologyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum EdgeType {
    #[default]
    #[serde(rename = "is-a")]
    IsA,
    #[serde(rename = "related-to")]
    RelatedTo,
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeType::IsA => f.write_str("is-a"),
            EdgeType::RelatedTo => f.write_str("related-to"),
        }
    }
}

/// How `expand_subgraph` grows a seed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    #[default]
    None,
    Parents,
    Siblings,
    ParentsSiblings,
}

impl std::str::FromStr for Expansion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Expansion::None),
            "parents" => Ok(Expansion::Parents),
            "siblings" => Ok(Expansion::Siblings),
            "parents_siblings" | "parents+siblings" => Ok(Expansion::ParentsSiblings),
            other => Err(format!("unknown expansion policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentNode {
    pub id: String,
    pub label: String,
    pub description: String,
    pub parent: Option<String>,
    pub edge_type: EdgeType,
    pub depth: usize,
}

/// On-disk node record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: String,
    label: String,
    #[serde(default)]
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    #[serde(default)]
    edge_type: EdgeType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    from: String,
    to: String,
    #[serde(default = "related_to")]
    edge_type: EdgeType,
}

fn related_to() -> EdgeType {
    EdgeType::RelatedTo
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OntologyDocument {
    nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    edges: Vec<EdgeRecord>,
}

/// Immutable intent tree. Node storage order is file order (root first), which
/// is also the sibling order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ontology {
    nodes: Vec<IntentNode>,
    index: HashMap<String, usize>,
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    related: BTreeSet<(String, String)>,
    max_depth: usize,
}

impl Ontology {
    /// Parses and validates a JSON ontology document.
    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut text = String::new();
        source
            .read_to_string(&mut text)
            .map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: OntologyDocument =
            serde_json::from_str(text).map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| OntologyError::Parse(format!("{}: {e}", path.display())))?;
        Self::load(std::io::BufReader::new(file))
    }

    fn from_document(doc: OntologyDocument) -> Result<Self> {
        let mut records = doc.nodes;
        let explicit_root = records.iter().any(|r| r.id == ROOT_ID);
        if !explicit_root {
            for r in records.iter_mut().filter(|r| r.parent.is_none()) {
                r.parent = Some(ROOT_ID.to_string());
            }
            records.insert(
                0,
                NodeRecord {
                    id: ROOT_ID.to_string(),
                    label: ROOT_LABEL.to_string(),
                    description: String::new(),
                    parent: None,
                    edge_type: EdgeType::IsA,
                },
            );
        } else if let Some(pos) = records.iter().position(|r| r.id == ROOT_ID) {
            let root = records.remove(pos);
            records.insert(0, root);
        }

        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() || r.id.chars().any(char::is_whitespace) {
                return Err(OntologyError::Validation(format!(
                    "node id `{}` must be non-empty and contain no whitespace",
                    r.id
                )));
            }
            if r.label.trim().is_empty() {
                return Err(OntologyError::Validation(format!("node `{}` has an empty label", r.id)));
            }
            if let Some(c) = r.label.chars().find(|c| RESERVED_LABEL_CHARS.contains(c)) {
                return Err(OntologyError::Validation(format!(
                    "label of node `{}` contains reserved character {c:?}",
                    r.id
                )));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(OntologyError::Validation(format!("duplicate node id `{}`", r.id)));
            }
        }

        let n = records.len();
        let mut parents = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for (i, r) in records.iter().enumerate() {
            match (&r.parent, i) {
                (None, 0) => {}
                (None, _) => {
                    return Err(OntologyError::Validation(format!(
                        "multiple roots: `{}` has no parent but `{ROOT_ID}` is declared",
                        r.id
                    )))
                }
                (Some(_), 0) => {
                    return Err(OntologyError::Validation(format!(
                        "the root `{ROOT_ID}` may not have a parent"
                    )))
                }
                (Some(p), _) => {
                    if r.edge_type != EdgeType::IsA {
                        return Err(OntologyError::Validation(format!(
                            "parent link of `{}` must be is-a; declare related-to links under `edges`",
                            r.id
                        )));
                    }
                    let pi = *index.get(p).ok_or_else(|| {
                        OntologyError::Validation(format!(
                            "node `{}` references missing parent `{p}`",
                            r.id
                        ))
                    })?;
                    parents[i] = Some(pi);
                    children[pi].push(i);
                }
            }
        }

        // Depths by walking down from the root; anything unreached sits on a cycle.
        let mut depth = vec![usize::MAX; n];
        depth[0] = 0;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            for &c in &children[i] {
                depth[c] = depth[i] + 1;
                stack.push(c);
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(OntologyError::Validation(format!(
                "cycle in is-a hierarchy through `{}`",
                records[i].id
            )));
        }

        let mut related = BTreeSet::new();
        for e in doc.edges {
            if e.edge_type != EdgeType::RelatedTo {
                return Err(OntologyError::Validation(format!(
                    "edge {} -> {}: only related-to edges may be listed under `edges`",
                    e.from, e.to
                )));
            }
            for end in [&e.from, &e.to] {
                if !index.contains_key(end) {
                    return Err(OntologyError::Validation(format!(
                        "related-to edge references missing node `{end}`"
                    )));
                }
            }
            related.insert((e.from, e.to));
        }

        let max_depth = depth.iter().copied().max().unwrap_or(0);
        let nodes = records
            .into_iter()
            .zip(depth)
            .map(|(r, depth)| IntentNode {
                id: r.id,
                label: r.label,
                description: r.description,
                parent: r.parent,
                edge_type: r.edge_type,
                depth,
            })
            .collect();

        Ok(Ontology { nodes, index, parents, children, related, max_depth })
    }

    /// Canonical JSON form: explicit root first, then file order.
    pub fn to_json(&self) -> String {
        let doc = OntologyDocument {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    label: n.label.clone(),
                    description: n.description.clone(),
                    parent: n.parent.clone(),
                    edge_type: n.edge_type,
                })
                .collect(),
            edges: self
                .related
                .iter()
                .map(|(from, to)| EdgeRecord {
                    from: from.clone(),
                    to: to.clone(),
                    edge_type: EdgeType::RelatedTo,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("ontology document serializes")
    }

    pub fn root(&self) -> &IntentNode {
        &self.nodes[0]
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All nodes, root first, in file order.
    pub fn nodes(&self) -> &[IntentNode] {
        &self.nodes
    }

    /// Every node except the root, in file order.
    pub fn intent_nodes(&self) -> impl Iterator<Item = &IntentNode> {
        self.nodes.iter().skip(1)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Result<&IntentNode> {
        self.position(id).map(|i| &self.nodes[i])
    }

    pub fn is_root(&self, id: &str) -> bool {
        id == self.nodes[0].id
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::UnknownNode(id.to_string()))
    }

    pub fn depth_of(&self, id: &str) -> Result<usize> {
        Ok(self.nodes[self.position(id)?].depth)
    }

    pub fn parent_of(&self, id: &str) -> Result<Option<&IntentNode>> {
        Ok(self.parents[self.position(id)?].map(|p| &self.nodes[p]))
    }

    /// Children in file order.
    pub fn children_of(&self, id: &str) -> Result<impl Iterator<Item = &IntentNode>> {
        let i = self.position(id)?;
        Ok(self.children[i].iter().map(|&c| &self.nodes[c]))
    }

    pub fn related_edges(&self) -> &BTreeSet<(String, String)> {
        &self.related
    }

    /// The depth-1 ancestor of `id` (the node itself when it is a domain).
    /// `None` for the root.
    pub fn domain_of(&self, id: &str) -> Result<Option<&IntentNode>> {
        let mut i = self.position(id)?;
        if i == 0 {
            return Ok(None);
        }
        while self.nodes[i].depth > 1 {
            i = self.parents[i].expect("non-root node has a parent");
        }
        Ok(Some(&self.nodes[i]))
    }

    /// Deepest common is-a ancestor; a node is its own ancestor.
    pub fn lca(&self, u: &str, v: &str) -> Result<&str> {
        let mut a = self.position(u)?;
        let mut b = self.position(v)?;
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.parents[a].expect("deeper node has a parent");
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.parents[b].expect("deeper node has a parent");
        }
        while a != b {
            a = self.parents[a].expect("non-root node has a parent");
            b = self.parents[b].expect("non-root node has a parent");
        }
        Ok(&self.nodes[a].id)
    }

    /// Grows `seeds` with parents and/or siblings. The root is never part of
    /// the result. Output is sorted by (depth, id).
    pub fn expand_subgraph<S: AsRef<str>>(&self, seeds: &[S], policy: Expansion) -> Result<Vec<String>> {
        let mut out: HashSet<usize> = HashSet::new();
        for s in seeds {
            let i = self.position(s.as_ref())?;
            if i != 0 {
                out.insert(i);
            }
            let parent = self.parents[i];
            if matches!(policy, Expansion::Parents | Expansion::ParentsSiblings) {
                if let Some(p) = parent.filter(|&p| p != 0) {
                    out.insert(p);
                }
            }
            if matches!(policy, Expansion::Siblings | Expansion::ParentsSiblings) {
                if let Some(p) = parent {
                    out.extend(self.children[p].iter().copied());
                }
            }
        }
        Ok(self.sorted_ids(out))
    }

    /// Sorts ids by (depth, id); the ordering used for prompts and expansion output.
    pub fn sort_by_depth<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<String>> {
        let set = ids
            .iter()
            .map(|s| self.position(s.as_ref()))
            .collect::<Result<HashSet<_>>>()?;
        Ok(self.sorted_ids(set))
    }

    fn sorted_ids(&self, set: HashSet<usize>) -> Vec<String> {
        let mut v: Vec<&IntentNode> = set.into_iter().map(|i| &self.nodes[i]).collect();
        v.sort_by(|a, b| a.depth.cmp(&b.depth).then_with(|| a.id.cmp(&b.id)));
        v.into_iter().map(|n| n.id.clone()).collect()
    }

    /// Case-insensitive lookup by id or label.
    pub fn resolve_name(&self, name: &str) -> Option<&IntentNode> {
        let name = name.trim();
        if let Some(&i) = self.index.get(name) {
            return Some(&self.nodes[i]);
        }
        self.intent_nodes().find(|n| {
            n.id.eq_ignore_ascii_case(name) || n.label.trim().eq_ignore_ascii_case(name)
        })
    }
}
