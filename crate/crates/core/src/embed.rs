//! From a dataset's knowledge files to the three KIEMB embedding files.

use std::path::Path;

use crate::graph_embed::{category_vectors, to_kiemb, train_embeddings, WalkParams};
use crate::kiemb::EmbeddingFile;
use crate::knowledge::{build_graph, load_knowledge_dir, load_triples, KnowledgeGraph, Triple};
use crate::scale::Scale;
use crate::text_embed::{features_to_file, hash_encode, SentenceSet};
use crate::trainer::KnowledgeBundle;
use crate::Error;

/// One sentence set per category from `<dir>/<category>.tsv`.
pub fn sentence_sets(knowledge_dir: &Path, categories: &[String]) -> Result<Vec<SentenceSet>, Error> {
    categories
        .iter()
        .map(|c| {
            let triples = load_triples(&knowledge_dir.join(format!("{c}.tsv")))?;
            Ok(SentenceSet::from_triples(c, &triples))
        })
        .collect()
}

/// KI-S with the built-in hash encoder.
pub fn text_embeddings(knowledge_dir: &Path, categories: &[String], dim: usize, seed: u64) -> Result<EmbeddingFile, Error> {
    let features = sentence_sets(knowledge_dir, categories)?
        .iter()
        .map(|s| hash_encode(s, dim, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(features_to_file(Scale::Small, &features)?)
}

pub fn relation_graph(knowledge_dir: &Path, categories: &[String]) -> Result<KnowledgeGraph, Error> {
    let triples = load_knowledge_dir(knowledge_dir, categories)?;
    Ok(build_graph(&triples, categories)?)
}

/// The part-relation graph merged with the external graph.
pub fn wide_graph(knowledge_dir: &Path, external: &Path, categories: &[String]) -> Result<KnowledgeGraph, Error> {
    let mut triples: Vec<Triple> = load_knowledge_dir(knowledge_dir, categories)?;
    triples.extend(load_triples(external)?);
    Ok(build_graph(&triples, categories)?)
}

fn graph_file(g: &KnowledgeGraph, categories: &[String], scale: Scale, params: &WalkParams) -> Result<EmbeddingFile, Error> {
    let emb = train_embeddings(g, params)?;
    Ok(to_kiemb(scale, &category_vectors(&emb, categories)?))
}

/// KI-M: DeepWalk over the part-relation graph.
pub fn relation_embeddings(knowledge_dir: &Path, categories: &[String], params: &WalkParams) -> Result<EmbeddingFile, Error> {
    graph_file(&relation_graph(knowledge_dir, categories)?, categories, Scale::Medium, params)
}

/// KI-L: DeepWalk over the merged graph.
pub fn wide_embeddings(knowledge_dir: &Path, external: &Path, categories: &[String], params: &WalkParams) -> Result<EmbeddingFile, Error> {
    graph_file(&wide_graph(knowledge_dir, external, categories)?, categories, Scale::Large, params)
}

/// Embeds all three scales for a generated dataset root.
pub fn dataset_bundle(
    root: &Path,
    categories: &[String],
    text_dim: usize,
    params: &WalkParams,
) -> Result<(KnowledgeBundle, Vec<EmbeddingFile>), Error> {
    let kdir = root.join("knowledge");
    let files = vec![
        text_embeddings(&kdir, categories, text_dim, params.seed)?,
        relation_embeddings(&kdir, categories, params)?,
        wide_embeddings(&kdir, &root.join("external_graph.tsv"), categories, params)?,
    ];
    let mut bundle = KnowledgeBundle::new(categories.to_vec());
    for f in &files {
        bundle.insert_file(f)?;
    }
    Ok((bundle, files))
}
