//! Knowledge triples and the part-relation graph they induce.
//!
//! A triple is a `subject relation object` record such as
//! `deck is/top/of cabin`. Entities are normalized (case-folded, inner
//! whitespace collapsed) so that `Shipbridge` and `shipbridge` resolve to the
//! same vertex. Relations are `/`-separated tags and never contain whitespace.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnowledgeError {
    #[error("malformed triple: {0}")]
    MalformedTriple(String),
    #[error("empty field in triple: {0:?}")]
    EmptyField(String),
    #[error("unknown category: {0}")]
    UnknownCategory(String),
    #[error("no categories given")]
    NoCategories,
    #[error("{path}:{line}: {source}")]
    AtLine {
        path: String,
        line: usize,
        #[source]
        source: Box<KnowledgeError>,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// How a triple line is split into fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Exactly three tab-separated fields. The canonical on-disk format.
    StrictTsv,
    /// Free text where the single whitespace token containing `/` is the
    /// relation, e.g. `Kiev Aircraft carrier has/part deck`.
    Tolerant,
}

/// Case-fold and collapse runs of whitespace into single spaces.
pub fn normalize_entity(raw: &str) -> String {
    raw.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    subject: String,
    relation: String,
    object: String,
}

impl Triple {
    /// Builds a normalized triple, validating every field.
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self, KnowledgeError> {
        let subject = normalize_entity(subject);
        let object = normalize_entity(object);
        let relation = relation.trim().to_lowercase();
        if subject.is_empty() || object.is_empty() || relation.is_empty() {
            return Err(KnowledgeError::EmptyField(format!("{subject:?} {relation:?} {object:?}")));
        }
        if !relation.contains('/') || relation.chars().any(char::is_whitespace) {
            return Err(KnowledgeError::MalformedTriple(format!(
                "relation {relation:?} must contain '/' and no whitespace"
            )));
        }
        Ok(Self { subject, relation, object })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    /// Formats the triple for the given mode; `parse_triple_line` inverts it.
    pub fn format(&self, mode: ParseMode) -> String {
        match mode {
            ParseMode::StrictTsv => format!("{}\t{}\t{}", self.subject, self.relation, self.object),
            ParseMode::Tolerant => format!("{} {} {}", self.subject, self.relation, self.object),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

pub fn parse_triple_line(line: &str, mode: ParseMode) -> Result<Triple, KnowledgeError> {
    let line = line.trim_end_matches(['\r', '\n']);
    match mode {
        ParseMode::StrictTsv => {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KnowledgeError::MalformedTriple(format!(
                    "expected 3 tab-separated fields, found {}: {line:?}",
                    fields.len()
                )));
            }
            Triple::new(fields[0], fields[1], fields[2])
        }
        ParseMode::Tolerant => {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let anchors: Vec<usize> = tokens.iter().enumerate().filter(|(_, t)| t.contains('/')).map(|(i, _)| i).collect();
            let [at] = anchors[..] else {
                return Err(KnowledgeError::MalformedTriple(format!(
                    "expected exactly one relation token containing '/', found {}: {line:?}",
                    anchors.len()
                )));
            };
            Triple::new(&tokens[..at].join(" "), tokens[at], &tokens[at + 1..].join(" "))
        }
    }
}

/// Parses a whole document, skipping blank lines and `#` comments.
pub fn parse_triples(text: &str, mode: ParseMode) -> Result<Vec<Triple>, KnowledgeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let triple = parse_triple_line(line, mode).map_err(|e| KnowledgeError::AtLine {
            path: String::from("<text>"),
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push(triple);
    }
    Ok(out)
}

pub fn load_triples(path: &Path) -> Result<Vec<Triple>, KnowledgeError> {
    let text = fs::read_to_string(path).map_err(|e| KnowledgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_triples(&text, ParseMode::StrictTsv).map_err(|e| match e {
        KnowledgeError::AtLine { line, source, .. } => KnowledgeError::AtLine {
            path: path.display().to_string(),
            line,
            source,
        },
        other => other,
    })
}

pub fn write_triples(path: &Path, triples: &[Triple], header: Option<&str>) -> Result<(), KnowledgeError> {
    let mut text = String::new();
    if let Some(h) = header {
        for l in h.lines() {
            text.push_str("# ");
            text.push_str(l);
            text.push('\n');
        }
    }
    for t in triples {
        text.push_str(&t.format(ParseMode::StrictTsv));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| KnowledgeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads every `<category>.tsv` under `dir` for the given categories.
pub fn load_knowledge_dir(dir: &Path, categories: &[String]) -> Result<Vec<Triple>, KnowledgeError> {
    let mut all = Vec::new();
    for c in categories {
        all.extend(load_triples(&dir.join(format!("{c}.tsv")))?);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub relation: String,
}

/// Vertex set, relation-tagged edges, and the subset marked as categories.
///
/// Edges are stored once with their direction as metadata; the adjacency
/// view used by random walks is undirected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    vertices: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    categories: BTreeSet<usize>,
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            categories: BTreeSet::new(),
            adjacency: Vec::new(),
        }
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.vertices.len();
        self.vertices.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    fn finish(mut self, mut edges: Vec<Edge>) -> Self {
        edges.sort();
        edges.dedup();
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.vertices.len()];
        for e in &edges {
            if e.from != e.to {
                adjacency[e.from].insert(e.to);
                adjacency[e.to].insert(e.from);
            }
        }
        let names = &self.vertices;
        self.adjacency = adjacency
            .into_iter()
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_by(|&a, &b| names[a].cmp(&names[b]));
                v
            })
            .collect();
        self.edges = edges;
        self
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    pub fn vertex_name(&self, v: usize) -> &str {
        &self.vertices[v]
    }

    pub fn vertex_index(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_entity(name)).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Undirected neighbor list, sorted by vertex name so that walks do not
    /// depend on how vertices happen to be numbered.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn is_category(&self, v: usize) -> bool {
        self.categories.contains(&v)
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.iter().map(|&v| self.vertices[v].as_str()).collect()
    }

    /// Builds a graph from an explicit vertex list and edge list.
    /// Used by tests and by callers that already hold indexed data.
    pub fn from_parts(vertices: Vec<String>, edges: Vec<(usize, usize, String)>, categories: &[usize]) -> Result<Self, KnowledgeError> {
        let mut g = Self::empty();
        for v in &vertices {
            let n = normalize_entity(v);
            if n.is_empty() {
                return Err(KnowledgeError::EmptyField(v.clone()));
            }
            g.intern(&n);
        }
        let n = g.vertices.len();
        let mut out = Vec::with_capacity(edges.len());
        for (from, to, relation) in edges {
            if from >= n || to >= n {
                return Err(KnowledgeError::MalformedTriple(format!(
                    "edge ({from}, {to}) out of range for {n} vertices"
                )));
            }
            out.push(Edge { from, to, relation });
        }
        for &c in categories {
            if c >= n {
                return Err(KnowledgeError::UnknownCategory(c.to_string()));
            }
            g.categories.insert(c);
        }
        Ok(g.finish(out))
    }
}

/// One vertex per distinct entity; parts shared between categories map to
/// the same vertex. Duplicate `(u, v, relation)` edges are collapsed.
pub fn build_graph(triples: &[Triple], categories: &[String]) -> Result<KnowledgeGraph, KnowledgeError> {
    if categories.is_empty() {
        return Err(KnowledgeError::NoCategories);
    }
    let mut g = KnowledgeGraph::empty();
    let mut edges = Vec::with_capacity(triples.len());
    for t in triples {
        let from = g.intern(&t.subject);
        let to = g.intern(&t.object);
        edges.push(Edge {
            from,
            to,
            relation: t.relation.clone(),
        });
    }
    for c in categories {
        let name = normalize_entity(c);
        match g.index.get(&name) {
            Some(&v) => {
                g.categories.insert(v);
            }
            None => return Err(KnowledgeError::UnknownCategory(name)),
        }
    }
    Ok(g.finish(edges))
}

/// Union of vertices by name and of edges; keeps the category set of `base`.
pub fn merge_graphs(base: &KnowledgeGraph, external: &KnowledgeGraph) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::empty();
    for v in base.vertices.iter().chain(external.vertices.iter()) {
        g.intern(v);
    }
    let remap = |src: &KnowledgeGraph, e: &Edge, g: &KnowledgeGraph| Edge {
        from: g.index[&src.vertices[e.from]],
        to: g.index[&src.vertices[e.to]],
        relation: e.relation.clone(),
    };
    let mut edges: Vec<Edge> = base.edges.iter().map(|e| remap(base, e, &g)).collect();
    edges.extend(external.edges.iter().map(|e| remap(external, e, &g)));
    g.categories = base.categories.iter().map(|&c| g.index[&base.vertices[c]]).collect();
    g.finish(edges)
}
