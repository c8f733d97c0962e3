//! Relationship embedding: DeepWalk-style truncated random walks fed to a
//! SkipGram model with hierarchical softmax over a Huffman tree.
//!
//! The same trainer produces KI-M vectors (part-relation graph) and KI-L
//! vectors (that graph merged with a wide external graph).

mod huffman;
mod walk;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use huffman::HuffmanTree;
pub use walk::random_walk;

use crate::kiemb::EmbeddingFile;
use crate::knowledge::{normalize_entity, KnowledgeGraph};
use crate::linalg;
use crate::rng;
use crate::scale::Scale;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphEmbedError {
    #[error("need at least 2 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("missing category {0:?}")]
    MissingCategory(String),
    #[error("invalid walk parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HuffmanWeights {
    /// Vertex degree plus one.
    #[default]
    Degree,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkParams {
    pub window: usize,
    pub dim: usize,
    pub walks_per_vertex: usize,
    pub walk_length: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub huffman_weights: HuffmanWeights,
    /// Worker count for asynchronous training; 1 keeps training deterministic.
    pub threads: usize,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            window: 3,
            dim: 64,
            walks_per_vertex: 40,
            walk_length: 10,
            learning_rate: 0.025,
            epochs: 1,
            seed: 0,
            huffman_weights: HuffmanWeights::Degree,
            threads: 1,
        }
    }
}

impl WalkParams {
    pub fn validate(&self) -> Result<(), GraphEmbedError> {
        let bad = |m: &str| Err(GraphEmbedError::InvalidParams(m.to_string()));
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.walks_per_vertex < 1 || self.walk_length < 1 || self.epochs < 1 {
            return bad("walks per vertex, walk length and epochs must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.threads < 1 {
            return bad("threads must be >= 1");
        }
        Ok(())
    }
}

/// Vertex vectors plus the hierarchical-softmax parameters of the inner nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    phi: Vec<f64>,
    inner: Vec<f64>,
    names: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn zeros(names: Vec<String>, dim: usize) -> Self {
        let n = names.len();
        Self {
            dim,
            phi: vec![0.0; n * dim],
            inner: vec![0.0; n.saturating_sub(1) * dim],
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertex_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = normalize_entity(name);
        self.names.iter().position(|n| *n == name)
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.phi[v * self.dim..(v + 1) * self.dim]
    }

    pub fn row_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.phi[v * self.dim..(v + 1) * self.dim]
    }

    pub fn inner_row(&self, k: usize) -> &[f64] {
        &self.inner[k * self.dim..(k + 1) * self.dim]
    }

    pub fn inner_row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.inner[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(&self.inner).all(|v| v.is_finite())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// P(target | center) as a product of branch decisions along the target's
/// path: a left branch has probability σ(⟨φ, θ⟩), a right branch σ(−⟨φ, θ⟩).
pub fn hs_probability(emb: &EmbeddingMatrix, tree: &HuffmanTree, center: usize, target: usize) -> f64 {
    let h = emb.row(center);
    tree.path(target)
        .iter()
        .zip(tree.code(target))
        .map(|(&node, &right)| {
            let x = linalg::dot(h, emb.inner_row(node));
            sigmoid(if right { -x } else { x })
        })
        .product()
}

/// Parameter storage the SkipGram kernel updates. The single-threaded path
/// uses plain slices; the asynchronous path shares atomics between workers.
trait ParamStore {
    fn phi(&self, i: usize) -> f64;
    fn inner(&self, i: usize) -> f64;
    fn add_phi(&mut self, i: usize, v: f64);
    fn add_inner(&mut self, i: usize, v: f64);
}

impl ParamStore for EmbeddingMatrix {
    fn phi(&self, i: usize) -> f64 {
        self.phi[i]
    }
    fn inner(&self, i: usize) -> f64 {
        self.inner[i]
    }
    fn add_phi(&mut self, i: usize, v: f64) {
        self.phi[i] += v;
    }
    fn add_inner(&mut self, i: usize, v: f64) {
        self.inner[i] += v;
    }
}

struct SharedParams<'a> {
    phi: &'a [AtomicU64],
    inner: &'a [AtomicU64],
}

fn atomic_add(cell: &AtomicU64, v: f64) {
    // Not a read-modify-write: concurrent updates to one cell may be lost.
    let cur = f64::from_bits(cell.load(Ordering::Relaxed));
    cell.store((cur + v).to_bits(), Ordering::Relaxed);
}

impl ParamStore for SharedParams<'_> {
    fn phi(&self, i: usize) -> f64 {
        f64::from_bits(self.phi[i].load(Ordering::Relaxed))
    }
    fn inner(&self, i: usize) -> f64 {
        f64::from_bits(self.inner[i].load(Ordering::Relaxed))
    }
    fn add_phi(&mut self, i: usize, v: f64) {
        atomic_add(&self.phi[i], v);
    }
    fn add_inner(&mut self, i: usize, v: f64) {
        atomic_add(&self.inner[i], v);
    }
}

/// One SGD step on −log P(target | center).
fn update_pair<P: ParamStore>(
    params: &mut P,
    dim: usize,
    tree: &HuffmanTree,
    center: usize,
    target: usize,
    lr: f64,
    scratch: &mut Vec<f64>,
) {
    scratch.clear();
    scratch.resize(dim, 0.0);
    let base = center * dim;
    for (&node, &right) in tree.path(target).iter().zip(tree.code(target)) {
        let ib = node * dim;
        let x: f64 = (0..dim).map(|d| params.phi(base + d) * params.inner(ib + d)).sum();
        // d(log σ(±x))/dx = label − σ(x), label = 1 on a left branch.
        let label = if right { 0.0 } else { 1.0 };
        let g = lr * (label - sigmoid(x));
        for (d, s) in scratch.iter_mut().enumerate() {
            *s += g * params.inner(ib + d);
            params.add_inner(ib + d, g * params.phi(base + d));
        }
    }
    for (d, s) in scratch.iter().enumerate() {
        params.add_phi(base + d, *s);
    }
}

fn walk_pairs(walk: &[usize], window: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..walk.len()).flat_map(move |j| {
        let lo = j.saturating_sub(window);
        let hi = (j + window).min(walk.len() - 1);
        (lo..=hi).filter(move |&k| k != j).map(move |k| (walk[j], walk[k]))
    })
}

pub fn pair_count(walk: &[usize], window: usize) -> usize {
    if walk.is_empty() {
        0
    } else {
        walk_pairs(walk, window).count()
    }
}

/// Applies one SkipGram pass over `walk` with a constant step size.
///
/// Only the center rows of Φ and the inner nodes on the targets' paths move.
pub fn skipgram_step(emb: &mut EmbeddingMatrix, tree: &HuffmanTree, walk: &[usize], window: usize, lr: f64) {
    let dim = emb.dim;
    let mut scratch = Vec::with_capacity(dim);
    if walk.is_empty() {
        return;
    }
    for (center, target) in walk_pairs(walk, window) {
        update_pair(emb, dim, tree, center, target, lr, &mut scratch);
    }
}

pub fn huffman_weights(g: &KnowledgeGraph, kind: HuffmanWeights) -> Vec<u64> {
    (0..g.vertex_count())
        .map(|v| match kind {
            HuffmanWeights::Degree => g.degree(v) as u64 + 1,
            HuffmanWeights::Uniform => 1,
        })
        .collect()
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_WALK: u64 = 3;

/// Walks in the order training consumes them. All randomness is keyed by
/// vertex name, so relabelling vertices relabels the corpus and nothing else.
fn walk_corpus(g: &KnowledgeGraph, p: &WalkParams) -> Vec<Vec<usize>> {
    let names = g.vertices();
    let iterations = p.epochs * p.walks_per_vertex;
    let mut corpus = Vec::with_capacity(iterations * names.len());
    for it in 0..iterations as u64 {
        let mut order: Vec<(u64, usize)> = (0..names.len())
            .map(|v| (rng::derive_seed(p.seed, &[STREAM_ORDER, it, rng::tag(&names[v])]), v))
            .collect();
        order.sort_unstable();
        for (_, v) in order {
            let mut r = rng::stream(p.seed, &[STREAM_WALK, it, rng::tag(&names[v])]);
            corpus.push(random_walk(g, v, p.walk_length, &mut r));
        }
    }
    corpus
}

fn init_matrix(g: &KnowledgeGraph, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut emb = EmbeddingMatrix::zeros(g.vertices().to_vec(), dim);
    let half = 0.5 / dim as f64;
    for v in 0..g.vertex_count() {
        let mut r = rng::stream(seed, &[STREAM_INIT, rng::tag(g.vertex_name(v))]);
        for x in emb.row_mut(v) {
            *x = r.gen_range(-half..=half);
        }
    }
    emb
}

/// Trains vertex embeddings. Φ starts uniform in [−0.5/d, 0.5/d]; the step
/// size decays linearly from α to α/100 over all SkipGram pairs.
pub fn train_embeddings(g: &KnowledgeGraph, p: &WalkParams) -> Result<EmbeddingMatrix, GraphEmbedError> {
    let n = g.vertex_count();
    if n < 2 {
        return Err(GraphEmbedError::TooFewVertices(n));
    }
    let tree = HuffmanTree::build(&huffman_weights(g, p.huffman_weights))?;
    train_with_tree(g, p, &tree)
}

/// As [`train_embeddings`] with a caller-supplied coding tree.
pub fn train_with_tree(g: &KnowledgeGraph, p: &WalkParams, tree: &HuffmanTree) -> Result<EmbeddingMatrix, GraphEmbedError> {
    p.validate()?;
    let n = g.vertex_count();
    if n < 2 {
        return Err(GraphEmbedError::TooFewVertices(n));
    }
    if tree.leaf_count() != n {
        return Err(GraphEmbedError::InvalidParams(format!(
            "tree has {} leaves for {n} vertices",
            tree.leaf_count()
        )));
    }
    let mut emb = init_matrix(g, p.dim, p.seed);
    let corpus = walk_corpus(g, p);
    let total: usize = corpus.iter().map(|w| pair_count(w, p.window)).sum();
    let lr_at = |k: usize| {
        let frac = if total > 1 { k as f64 / (total - 1) as f64 } else { 0.0 };
        p.learning_rate * (1.0 - 0.99 * frac)
    };
    let dim = p.dim;

    if p.threads <= 1 {
        let mut scratch = Vec::with_capacity(dim);
        let mut k = 0;
        for walk in &corpus {
            for (center, target) in walk_pairs(walk, p.window) {
                update_pair(&mut emb, dim, tree, center, target, lr_at(k), &mut scratch);
                k += 1;
            }
        }
        return Ok(emb);
    }

    let to_atomic = |v: &[f64]| v.iter().map(|x| AtomicU64::new(x.to_bits())).collect::<Vec<_>>();
    let phi = to_atomic(&emb.phi);
    let inner = to_atomic(&emb.inner);
    // Pair offsets let each worker reproduce the global step-size schedule.
    let mut offsets = Vec::with_capacity(corpus.len());
    let mut acc = 0;
    for w in &corpus {
        offsets.push(acc);
        acc += pair_count(w, p.window);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.threads)
        .build()
        .map_err(|e| GraphEmbedError::InvalidParams(e.to_string()))?;
    let chunk = corpus.len().div_ceil(p.threads).max(1);
    pool.install(|| {
        corpus.par_chunks(chunk).zip(offsets.par_chunks(chunk)).for_each(|(walks, offs)| {
            let mut params = SharedParams { phi: &phi, inner: &inner };
            let mut scratch = Vec::with_capacity(dim);
            for (walk, &off) in walks.iter().zip(offs) {
                for (i, (center, target)) in walk_pairs(walk, p.window).enumerate() {
                    update_pair(&mut params, dim, tree, center, target, lr_at(off + i), &mut scratch);
                }
            }
        });
    });
    emb.phi = phi.iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))).collect();
    emb.inner = inner.iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))).collect();
    Ok(emb)
}

/// L2-normalized Φ row of each category vertex.
pub fn category_vectors(emb: &EmbeddingMatrix, categories: &[String]) -> Result<Vec<(String, Vec<f32>)>, GraphEmbedError> {
    categories
        .iter()
        .map(|c| {
            let name = normalize_entity(c);
            let v = emb.index_of(&name).ok_or_else(|| GraphEmbedError::MissingCategory(name.clone()))?;
            Ok((name, linalg::normalized_f32(emb.row(v))))
        })
        .collect()
}

pub fn to_kiemb(scale: Scale, vectors: &[(String, Vec<f32>)]) -> EmbeddingFile {
    let dim = vectors.first().map_or(0, |(_, v)| v.len());
    let mut f = EmbeddingFile::new(scale, dim);
    f.rows = vectors.to_vec();
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, ProptestConfig};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            (0..n).map(|i| format!("v{i}")).collect(),
            edges.iter().map(|&(a, b)| (a, b, "is/adjacent/to".to_string())).collect(),
            &[0],
        )
        .unwrap()
    }

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut e = EmbeddingMatrix::zeros((0..n).map(|i| format!("v{i}")).collect(), dim);
        e.phi.iter_mut().chain(e.inner.iter_mut()).for_each(|x| *x = r.gen_range(-1.0..1.0));
        e
    }

    fn neg_log_p(e: &EmbeddingMatrix, t: &HuffmanTree, c: usize, x: usize) -> f64 {
        -hs_probability(e, t, c, x).ln()
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let e = EmbeddingMatrix::zeros(vec!["a".into(), "b".into()], 4);
        let t = HuffmanTree::build(&[1, 1]).unwrap();
        assert_eq!(hs_probability(&e, &t, 0, 0), 0.5);
        assert_eq!(hs_probability(&e, &t, 0, 1), 0.5);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for n in [2usize, 3, 5, 17] {
            for seed in 0..5 {
                let e = random_matrix(n, 8, seed);
                let weights: Vec<u64> = (0..n as u64).map(|i| 1 + (i * 7 + seed) % 5).collect();
                let t = HuffmanTree::build(&weights).unwrap();
                for c in 0..n {
                    let s: f64 = (0..n).map(|x| hs_probability(&e, &t, c, x)).sum();
                    assert!((s - 1.0).abs() < 1e-6, "n={n} sum={s}");
                }
            }
        }
    }

    #[test]
    fn left_branch_probability_increases_with_root_score() {
        let n = 5;
        let t = HuffmanTree::build(&[3, 1, 4, 1, 5]).unwrap();
        let root = n - 2;
        let target = (0..n).find(|&v| !t.code(v)[0]).unwrap();
        let mut e = random_matrix(n, 4, 3);
        // Move ⟨φ_c, θ_root⟩ by shifting θ_root along φ_c.
        let c = 1;
        let phi: Vec<f64> = e.row(c).to_vec();
        let mut prev = f64::NEG_INFINITY;
        for step in 0..20 {
            let shift = -1.0 + 0.1 * step as f64;
            let base = random_matrix(n, 4, 3);
            e.inner_row_mut(root).copy_from_slice(base.inner_row(root));
            for (x, p) in e.inner_row_mut(root).iter_mut().zip(&phi) {
                *x += shift * p;
            }
            let p = hs_probability(&e, &t, c, target);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn single_vertex_walk_and_zero_rate_do_nothing() {
        let t = HuffmanTree::build(&[1, 2, 3]).unwrap();
        let e0 = random_matrix(3, 6, 1);
        let mut e = e0.clone();
        skipgram_step(&mut e, &t, &[1], 3, 0.5);
        assert_eq!(e, e0);
        skipgram_step(&mut e, &t, &[0, 2], 3, 0.0);
        assert_eq!(e, e0);
    }

    #[test]
    fn step_descends_pair_loss() {
        let t = HuffmanTree::build(&[1, 2, 3, 4]).unwrap();
        let mut e = random_matrix(4, 6, 9);
        let before = neg_log_p(&e, &t, 0, 3);
        skipgram_step(&mut e, &t, &[0, 3], 1, 1e-2);
        assert!(neg_log_p(&e, &t, 0, 3) < before);
    }

    #[test]
    fn step_touches_only_walk_rows() {
        let t = HuffmanTree::build(&[1, 1, 1, 1, 1, 1]).unwrap();
        let e0 = random_matrix(6, 5, 2);
        let mut e = e0.clone();
        skipgram_step(&mut e, &t, &[0, 2, 4, 2], 2, 0.1);
        for v in [1, 3, 5] {
            assert_eq!(e.row(v), e0.row(v));
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_rate_keeps_init() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let p = WalkParams {
            dim: 8,
            walks_per_vertex: 3,
            seed: 5,
            ..Default::default()
        };
        assert_eq!(train_embeddings(&g, &p).unwrap(), train_embeddings(&g, &p).unwrap());
        let frozen = WalkParams {
            learning_rate: 0.0,
            ..p.clone()
        };
        let e = train_embeddings(&g, &frozen).unwrap();
        assert_eq!(e, init_matrix(&g, 8, 5));
        let half = 0.5 / 8.0;
        assert!(e.phi.iter().all(|x| x.abs() <= half));
    }

    #[test]
    fn too_few_vertices_rejected() {
        let g = graph(1, &[]);
        assert_eq!(
            train_embeddings(&g, &WalkParams::default()),
            Err(GraphEmbedError::TooFewVertices(1))
        );
    }

    #[test]
    fn category_vectors_are_unit_and_checked() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let e = train_embeddings(
            &g,
            &WalkParams {
                dim: 8,
                walks_per_vertex: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let v = category_vectors(&e, &["v0".into(), "V2".into()]).unwrap();
        for (_, x) in &v {
            assert!((linalg::norm(x) - 1.0).abs() < 1e-6);
        }
        assert_eq!(
            category_vectors(&e, &["nope".into()]),
            Err(GraphEmbedError::MissingCategory("nope".into()))
        );
    }

    fn cliques() -> KnowledgeGraph {
        let mut edges = Vec::new();
        for base in [0, 4] {
            for a in 0..4 {
                for b in a + 1..4 {
                    edges.push((base + a, base + b));
                }
            }
        }
        graph(8, &edges)
    }

    pub(crate) fn clique_separation(e: &EmbeddingMatrix) -> (f64, f64) {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for a in 0..8 {
            for b in a + 1..8 {
                let c = linalg::cosine(e.row(a), e.row(b));
                if a / 4 == b / 4 {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        (intra / ni as f64, inter / nx as f64)
    }

    #[test]
    fn disconnected_cliques_separate() {
        let p = WalkParams {
            dim: 16,
            seed: 11,
            ..Default::default()
        };
        let e = train_embeddings(&cliques(), &p).unwrap();
        let (intra, inter) = clique_separation(&e);
        assert!(intra - inter >= 0.2, "intra {intra} inter {inter}");
    }

    #[test]
    fn parallel_mode_stays_finite_and_separates() {
        let p = WalkParams {
            dim: 16,
            seed: 11,
            threads: 4,
            ..Default::default()
        };
        let e = train_embeddings(&cliques(), &p).unwrap();
        assert!(e.is_finite());
        let (intra, inter) = clique_separation(&e);
        assert!(intra > inter);
    }

    #[test]
    fn relabelling_vertices_permutes_rows() {
        let n = 7;
        let edges = [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 6), (6, 3)];
        let g = graph(n, &edges);
        let perm = [3usize, 6, 0, 5, 1, 4, 2];
        let mut names = vec![String::new(); n];
        for v in 0..n {
            names[perm[v]] = format!("v{v}");
        }
        let h = KnowledgeGraph::from_parts(
            names,
            edges
                .iter()
                .map(|&(a, b)| (perm[a], perm[b], "is/adjacent/to".to_string()))
                .collect(),
            &[perm[0]],
        )
        .unwrap();
        let p = WalkParams {
            dim: 8,
            walks_per_vertex: 5,
            seed: 21,
            ..Default::default()
        };
        let tree = HuffmanTree::build(&huffman_weights(&g, p.huffman_weights)).unwrap();
        let eg = train_with_tree(&g, &p, &tree).unwrap();
        let eh = train_with_tree(&h, &p, &tree.relabel(&perm)).unwrap();
        for (v, &p) in perm.iter().enumerate() {
            assert_eq!(eg.row(v), eh.row(p));
        }
    }

    #[test]
    fn larger_graph_stays_finite() {
        let n = 1000;
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|v| [(v, (v + 1) % n), (v, (v * 7 + 3) % n)]).collect();
        let g = graph(n, &edges);
        let p = WalkParams {
            learning_rate: 0.1,
            walks_per_vertex: 2,
            dim: 16,
            ..Default::default()
        };
        assert!(train_embeddings(&g, &p).unwrap().is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn hs_normalizes_for_random_parameters(n in 2usize..20, seed in any::<u64>()) {
            let e = random_matrix(n, 5, seed);
            let t = HuffmanTree::build(&vec![1; n]).unwrap();
            let s: f64 = (0..n).map(|x| hs_probability(&e, &t, seed as usize % n, x)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
