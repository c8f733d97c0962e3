//! Synthetic desk-scale dataset: each category is a composition of coloured
//! geometric parts whose placement obeys the same triples that feed the
//! knowledge embeddings.

mod catalog;
mod dataset;
mod layout;
mod probe;
mod render;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{KnowledgeError, Triple};

pub use catalog::{default_catalog, external_triples};
pub use dataset::{generate_dataset, load_dataset, read_manifest, Dataset, DatasetManifest, Split};
pub use layout::{solve_layout, LayoutBox};
pub use probe::linear_probe;
pub use render::{render, verify_relations, PartBox, Rendered};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unsatisfiable layout for {category}: {reason}")]
    UnsatisfiableLayout { category: String, reason: String },
    #[error("unknown spatial relation {0:?}")]
    UnknownRelation(String),
    #[error("relation endpoint {part:?} is not a part of {category}")]
    UnknownPart { category: String, part: String },
    #[error("invalid category spec: {0}")]
    InvalidSpec(String),
    #[error("no spec for category {0}")]
    MissingCategory(String),
    #[error("missing split {0}")]
    MissingSplit(String),
    #[error("corrupt image {path}: {message}")]
    CorruptImage { path: String, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn io_err(path: &std::path::Path, e: impl fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Rect,
    Ellipse,
    TriangleUp,
    TriangleDown,
    TriangleLeft,
    TriangleRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub shape: Shape,
    /// Width and height in pixels at 64×64; scaled with the resolution.
    pub width: f64,
    pub height: f64,
    pub color: [u8; 3],
}

/// Relations the renderer understands. `has/part` is accepted in specs but
/// places nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialRelation {
    TopOf,
    BelowOf,
    LeftOf,
    RightOf,
    FrontOf,
    AdjacentTo,
    MiddleOf,
}

impl SpatialRelation {
    pub fn parse(tag: &str) -> Option<Self> {
        Some(match tag {
            "is/top/of" => Self::TopOf,
            "is/below/of" => Self::BelowOf,
            "is/left/of" => Self::LeftOf,
            "is/right/of" => Self::RightOf,
            "is/front/of" => Self::FrontOf,
            "is/adjacent/to" => Self::AdjacentTo,
            "is/middle/of" => Self::MiddleOf,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub parts: Vec<PartSpec>,
    /// `(subject part, relation tag, object part)`.
    pub relations: Vec<(String, String, String)>,
}

/// A relation resolved to part indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Rel {
    pub a: usize,
    pub kind: SpatialRelation,
    pub b: usize,
}

impl CategorySpec {
    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }

    pub(crate) fn resolved(&self) -> Result<Vec<Rel>, SynthError> {
        let mut out = Vec::new();
        for (a, tag, b) in &self.relations {
            let idx = |n: &str| {
                self.part_index(n).ok_or_else(|| SynthError::UnknownPart {
                    category: self.name.clone(),
                    part: n.to_string(),
                })
            };
            let (ia, ib) = (idx(a)?, idx(b)?);
            if tag == "has/part" {
                continue;
            }
            let kind = SpatialRelation::parse(tag).ok_or_else(|| SynthError::UnknownRelation(tag.clone()))?;
            if ia == ib {
                return Err(SynthError::InvalidSpec(format!("{a} {tag} itself")));
            }
            out.push(Rel { a: ia, kind, b: ib });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.parts.is_empty() {
            return Err(SynthError::InvalidSpec(format!("{} has no parts", self.name)));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].iter().any(|q| q.name == p.name) {
                return Err(SynthError::InvalidSpec(format!("duplicate part {}", p.name)));
            }
            if !(p.width >= 1.0 && p.height >= 1.0) {
                return Err(SynthError::InvalidSpec(format!("part {} is smaller than a pixel", p.name)));
            }
        }
        self.resolved().map(|_| ())
    }

    /// Knowledge triples: one `has/part` per part, then the part relations.
    pub fn triples(&self) -> Result<Vec<Triple>, SynthError> {
        let mut out = Vec::new();
        for p in &self.parts {
            out.push(Triple::new(&self.name, "has/part", &p.name)?);
        }
        for (a, r, b) in &self.relations {
            out.push(Triple::new(a, r, b)?);
        }
        Ok(out)
    }
}
