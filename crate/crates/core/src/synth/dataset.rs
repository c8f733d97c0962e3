//! On-disk layout:
//!
//! ```text
//! manifest.json
//! images/<split>/<category>/<id>.png
//! annotations/<split>.csv          category,id,part,x0,y0,x1,y1
//! knowledge/<category>.tsv
//! external_graph.tsv
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::union_box;
use super::{external_triples, io_err, render, CategorySpec, PartBox, Rendered, SynthError};
use crate::knowledge::write_triples;
use crate::rng;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 2] = ["train", "val"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub categories: Vec<String>,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Amplitude of uniform per-pixel noise, in [0, 1] intensity units.
    pub noise: f64,
    /// Scales positional, size and shade jitter; 0 renders canonical layouts.
    pub jitter: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            categories: super::default_catalog().into_iter().map(|c| c.name).collect(),
            train_per_category: 200,
            val_per_category: 50,
            resolution: 64,
            seed: 0,
            noise: 0.06,
            jitter: 1.0,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Manifest(m.to_string()));
        if self.categories.len() < 2 {
            return bad("need at least two categories");
        }
        if self.train_per_category == 0 || self.val_per_category == 0 {
            return bad("split sizes must be at least 1");
        }
        if self.resolution < 16 {
            return bad("resolution must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=4.0).contains(&self.jitter) {
            return bad("noise must lie in [0, 1] and jitter in [0, 4]");
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return bad(&format!("duplicate category {c}"));
            }
        }
        Ok(())
    }

    pub fn per_category(&self, split: &str) -> usize {
        if split == "train" {
            self.train_per_category
        } else {
            self.val_per_category
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[N, 3, R, R]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    /// Object bounding boxes `[x0, y0, x1, y1]`, when annotations exist.
    pub boxes: Option<Vec<[i32; 4]>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers a batch of images and their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub categories: Vec<String>,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            _ => None,
        }
    }
}

fn image_path(root: &Path, split: &str, category: &str, id: usize) -> PathBuf {
    root.join("images").join(split).join(category).join(format!("{id:05}.png"))
}

fn render_one(spec: &CategorySpec, m: &DatasetManifest, split: &str, id: usize) -> Result<Rendered, SynthError> {
    let mut r = rng::stream(m.seed, &[rng::tag(split), rng::tag(&spec.name), id as u64]);
    render(spec, m.resolution, m.noise, m.jitter, &mut r)
}

/// Renders and writes the whole dataset. Rendering runs in parallel; every
/// image draws from its own stream, so output bytes do not depend on
/// scheduling.
pub fn generate_dataset(root: &Path, manifest: &DatasetManifest, specs: &[CategorySpec]) -> Result<(), SynthError> {
    manifest.validate()?;
    let chosen: Vec<&CategorySpec> = manifest
        .categories
        .iter()
        .map(|c| {
            specs
                .iter()
                .find(|s| &s.name == c)
                .ok_or_else(|| SynthError::MissingCategory(c.clone()))
        })
        .collect::<Result<_, _>>()?;
    for s in &chosen {
        s.validate()?;
    }
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| io_err(p, e));
    mkdir(&root.join("knowledge"))?;
    mkdir(&root.join("annotations"))?;
    for spec in &chosen {
        let path = root.join("knowledge").join(format!("{}.tsv", spec.name));
        write_triples(&path, &spec.triples()?, Some(&format!("knowledge for {}", spec.name)))?;
    }
    write_triples(&root.join("external_graph.tsv"), &external_triples(), Some("wide context"))?;

    for split in SPLITS {
        let n = manifest.per_category(split);
        let jobs: Vec<(&CategorySpec, usize)> = chosen.iter().flat_map(|s| (0..n).map(move |i| (*s, i))).collect();
        let rendered: Vec<Rendered> = jobs
            .par_iter()
            .map(|(spec, id)| render_one(spec, manifest, split, *id))
            .collect::<Result<_, _>>()?;
        let csv_path = root.join("annotations").join(format!("{split}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        w.write_record(["category", "id", "part", "x0", "y0", "x1", "y1"])
            .map_err(|e| io_err(&csv_path, e))?;
        for ((spec, id), img) in jobs.iter().zip(&rendered) {
            let path = image_path(root, split, &spec.name, *id);
            mkdir(path.parent().expect("image path has a parent"))?;
            let side = manifest.resolution as u32;
            image::save_buffer(&path, &img.pixels, side, side, image::ExtendedColorType::Rgb8).map_err(|e| io_err(&path, e))?;
            for b in &img.parts {
                w.write_record([
                    spec.name.clone(),
                    format!("{id:05}"),
                    b.part.clone(),
                    b.x0.to_string(),
                    b.y0.to_string(),
                    b.x1.to_string(),
                    b.y1.to_string(),
                ])
                .map_err(|e| io_err(&csv_path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(&csv_path, e))?;
    }

    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let path = root.join("manifest.json");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, SynthError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    category: String,
    id: String,
    part: String,
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

/// Part boxes per `(category, id)`, or `None` when the split has no
/// annotation file.
/// Part boxes keyed by `(category, id)`.
type Annotations = HashMap<(String, String), Vec<PartBox>>;

pub(crate) fn read_annotations(root: &Path, split: &str) -> Result<Option<Annotations>, SynthError> {
    let path = root.join("annotations").join(format!("{split}.csv"));
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| io_err(&path, e))?;
    let mut out: HashMap<(String, String), Vec<PartBox>> = HashMap::new();
    for row in rdr.deserialize() {
        let r: AnnotationRow = row.map_err(|e| io_err(&path, e))?;
        out.entry((r.category, r.id)).or_default().push(PartBox {
            part: r.part,
            x0: r.x0,
            y0: r.y0,
            x1: r.x1,
            y1: r.y1,
        });
    }
    Ok(Some(out))
}

fn load_split(root: &Path, m: &DatasetManifest, split: &str) -> Result<Split, SynthError> {
    let dir = root.join("images").join(split);
    if !dir.is_dir() {
        return Err(SynthError::MissingSplit(split.to_string()));
    }
    let n = m.per_category(split);
    let side = m.resolution;
    let jobs: Vec<(usize, usize)> = (0..m.categories.len()).flat_map(|c| (0..n).map(move |i| (c, i))).collect();
    let decoded: Vec<Vec<f32>> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let path = image_path(root, split, &m.categories[c], i);
            let corrupt = |message: String| SynthError::CorruptImage {
                path: path.display().to_string(),
                message,
            };
            let img = image::open(&path).map_err(|e| corrupt(e.to_string()))?.to_rgb8();
            if img.width() as usize != side || img.height() as usize != side {
                return Err(corrupt(format!("{}×{}, expected {side}×{side}", img.width(), img.height())));
            }
            let mut chw = vec![0f32; 3 * side * side];
            for (p, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    chw[c * side * side + p] = f32::from(px[c]) / 255.0;
                }
            }
            Ok(chw)
        })
        .collect::<Result<_, _>>()?;
    let data: Vec<f32> = decoded.into_iter().flatten().collect();
    let images = Tensor::new(vec![jobs.len(), 3, side, side], data).expect("consistent image size");
    let labels = jobs.iter().map(|&(c, _)| c).collect();
    let ids: Vec<String> = jobs.iter().map(|&(_, i)| format!("{i:05}")).collect();
    let boxes = read_annotations(root, split)?
        .map(|ann| {
            jobs.iter()
                .zip(&ids)
                .map(|(&(c, _), id)| {
                    ann.get(&(m.categories[c].clone(), id.clone()))
                        .map(|parts| union_box(parts))
                        .ok_or_else(|| SynthError::Manifest(format!("no annotation for {split}/{}/{id}", m.categories[c])))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok(Split {
        images,
        labels,
        ids,
        boxes,
    })
}

/// Loads both splits in category-then-id order.
pub fn load_dataset(root: &Path) -> Result<Dataset, SynthError> {
    let manifest = read_manifest(root)?;
    let train = load_split(root, &manifest, "train")?;
    let val = load_split(root, &manifest, "val")?;
    Ok(Dataset {
        root: root.to_path_buf(),
        categories: manifest.categories.clone(),
        manifest,
        train,
        val,
    })
}
