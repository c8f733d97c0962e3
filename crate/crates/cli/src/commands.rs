use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kinject_core::embed;
use kinject_core::explain::{self, Ranking};
use kinject_core::kiemb::EmbeddingFile;
use kinject_core::net::{BackboneConfig, ModelConfig, ModelState};
use kinject_core::synth::{self, default_catalog, Dataset, Split};
use kinject_core::text_embed::sentence_sets_to_json;
use kinject_core::trainer::{
    self, ablation_run, run_classification_stage, run_knowledge_stage, run_pipeline, ClassificationMode, ClassificationReport,
    KnowledgeBundle, KnowledgeReport,
};
use kinject_core::{Scale, ScaleMask};
use serde::Serialize;

use crate::config::{ConfigInvalid, RunConfig};
use crate::{DatasetCmd, EmbedCmd, ExplainCmd};

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let root = cfg.require_dataset()?;
    synth::load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))
}

fn categories(cfg: &RunConfig) -> anyhow::Result<Vec<String>> {
    match &cfg.dataset {
        Some(root) => Ok(synth::read_manifest(root)?.categories),
        None => Ok(cfg.manifest.categories.clone()),
    }
}

fn embedding_for(cfg: &RunConfig, scale: Scale, categories: &[String]) -> anyhow::Result<EmbeddingFile> {
    let given = match scale {
        Scale::Small => &cfg.embeddings.text,
        Scale::Medium => &cfg.embeddings.relation,
        Scale::Large => &cfg.embeddings.wide,
    };
    if let Some(path) = given {
        let file = EmbeddingFile::read(path).with_context(|| format!("reading {}", path.display()))?;
        if file.scale != scale {
            return Err(ConfigInvalid(format!("{} holds {} vectors, expected {scale}", path.display(), file.scale)).into());
        }
        return Ok(file);
    }
    let kdir = cfg.knowledge_dir()?;
    Ok(match scale {
        Scale::Small => embed::text_embeddings(&kdir, categories, cfg.text_dim, cfg.seed)?,
        Scale::Medium => embed::relation_embeddings(&kdir, categories, &cfg.walk)?,
        Scale::Large => embed::wide_embeddings(&kdir, &cfg.external_graph_path()?, categories, &cfg.walk)?,
    })
}

fn bundle(cfg: &RunConfig, categories: &[String]) -> anyhow::Result<KnowledgeBundle> {
    let mut b = KnowledgeBundle::new(categories.to_vec());
    for s in Scale::ALL {
        b.insert_file(&embedding_for(cfg, s, categories)?)?;
    }
    Ok(b)
}

fn model_config(cfg: &RunConfig, data: &Dataset, bundle: &KnowledgeBundle) -> anyhow::Result<ModelConfig> {
    let backbone = BackboneConfig::preset(&cfg.backbone, data.manifest.resolution)?;
    Ok(ModelConfig::new(backbone, &bundle.scale_dims(), data.categories.len()))
}

fn load_model(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<ModelState> {
    let path = cfg.require_model()?;
    let model = ModelState::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if model.config().classes != data.categories.len() {
        bail!(
            "model has {} classes, dataset has {}",
            model.config().classes,
            data.categories.len()
        );
    }
    Ok(model)
}

fn split<'a>(cfg: &RunConfig, data: &'a Dataset) -> &'a Split {
    data.split(&cfg.split).expect("split validated")
}

pub fn dataset(cfg: &RunConfig, action: DatasetCmd) -> anyhow::Result<PathBuf> {
    match action {
        DatasetCmd::Gen => {
            let dir = cfg.start_run("dataset-gen")?;
            let root = dir.join("dataset");
            synth::generate_dataset(&root, &cfg.manifest, &default_catalog())?;
            log::info!("dataset written to {}", root.display());
            Ok(dir)
        }
        DatasetCmd::Validate => {
            let data = load_data(cfg).map_err(|e| ConfigInvalid(format!("{e:#}")))?;
            let m = &data.manifest;
            let mut problems = Vec::new();
            for (name, s) in [("train", &data.train), ("val", &data.val)] {
                let want = m.per_category(name) * m.categories.len();
                if s.len() != want {
                    problems.push(format!("{name}: {} images, manifest says {want}", s.len()));
                }
                if s.boxes.is_none() {
                    problems.push(format!("{name}: no annotations"));
                }
            }
            let kdir = data.root.join("knowledge");
            if let Err(e) = embed::relation_graph(&kdir, &data.categories) {
                problems.push(format!("knowledge: {e}"));
            }
            if !problems.is_empty() {
                return Err(ConfigInvalid(format!("dataset {}: {}", data.root.display(), problems.join("; "))).into());
            }
            let dir = cfg.start_run("dataset-validate")?;
            #[derive(Serialize)]
            struct Summary<'a> {
                categories: &'a [String],
                train: usize,
                val: usize,
                resolution: usize,
            }
            write_json(
                &dir,
                "validation.json",
                &Summary {
                    categories: &data.categories,
                    train: data.train.len(),
                    val: data.val.len(),
                    resolution: m.resolution,
                },
            )?;
            Ok(dir)
        }
    }
}

pub fn embed(cfg: &RunConfig, cmd: EmbedCmd) -> anyhow::Result<PathBuf> {
    let cats = categories(cfg)?;
    let (name, scale) = match cmd {
        EmbedCmd::Text { sentences_only: true } => {
            let sets = embed::sentence_sets(&cfg.knowledge_dir()?, &cats)?;
            let dir = cfg.start_run("embed-sentences")?;
            write_json(&dir, "sentences.json", &sentence_sets_to_json(&sets))?;
            return Ok(dir);
        }
        EmbedCmd::Text { .. } => ("embed-text", Scale::Small),
        EmbedCmd::Relation => ("embed-relation", Scale::Medium),
        EmbedCmd::Wide => ("embed-wide", Scale::Large),
    };
    let file = embedding_for(cfg, scale, &cats)?;
    let dir = cfg.start_run(name)?;
    file.write(&dir.join(format!("{}.kiemb", scale.tag().to_lowercase())))?;
    Ok(dir)
}

pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let data = load_data(cfg)?;
    let bundle = bundle(cfg, &data.categories)?;
    let mut model = ModelState::new(model_config(cfg, &data, &bundle)?, cfg.seed)?;
    let report = run_knowledge_stage(&mut model, &data.train, &data.val, &bundle, &cfg.plan)?;
    let dir = cfg.start_run("pretrain")?;
    model.save(&dir.join("model.kinj"))?;
    write_json(&dir, "knowledge.json", &report)?;
    Ok(dir)
}

#[derive(Serialize)]
struct TrainSummary {
    scales: ScaleMask,
    knowledge: Option<KnowledgeReport>,
    classification: ClassificationReport,
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let data = load_data(cfg)?;
    let (model, summary) = if cfg.model.is_some() {
        let mut model = load_model(cfg, &data)?;
        let classification = run_classification_stage(&mut model, &data.train, &data.val, &cfg.plan, ClassificationMode::Injected)?;
        let summary = TrainSummary {
            scales: cfg.scales,
            knowledge: None,
            classification,
        };
        (model, summary)
    } else {
        let bundle = bundle(cfg, &data.categories)?;
        let run = run_pipeline(&data, &bundle, &model_config(cfg, &data, &bundle)?, cfg.scales, &cfg.plan)?;
        let summary = TrainSummary {
            scales: run.mask,
            knowledge: run.knowledge,
            classification: run.classification,
        };
        (run.model, summary)
    };
    let dir = cfg.start_run("train")?;
    model.save(&dir.join("model.kinj"))?;
    write_json(&dir, "report.json", &summary)?;
    Ok(dir)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let bundle = bundle(cfg, &data.categories)?;
    let s = split(cfg, &data);
    let mut retrieval = BTreeMap::new();
    for scale in Scale::ALL {
        if model.config().head(scale).is_some() {
            retrieval.insert(scale, explain::retrieval_accuracy(&model, s, &bundle, scale)?);
        }
    }
    #[derive(Serialize)]
    struct Eval<'a> {
        split: &'a str,
        accuracy: f64,
        retrieval: BTreeMap<Scale, f64>,
    }
    let accuracy = trainer::accuracy(&model, s)?;
    let dir = cfg.start_run("eval")?;
    write_json(
        &dir,
        "eval.json",
        &Eval {
            split: &cfg.split,
            accuracy,
            retrieval,
        },
    )?;
    Ok(dir)
}

pub fn ablate(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let data = load_data(cfg)?;
    let bundle = bundle(cfg, &data.categories)?;
    let config = model_config(cfg, &data, &bundle)?;
    let (table, _) = ablation_run(&data, &bundle, &config, &cfg.backbone, &ScaleMask::ablation_set(), &cfg.plan)?;
    let dir = cfg.start_run("ablate")?;
    fs::write(dir.join("ablation.csv"), table.to_csv())?;
    write_json(&dir, "ablation.json", &table)?;
    Ok(dir)
}

pub fn explain(cfg: &RunConfig, kind: ExplainCmd) -> anyhow::Result<PathBuf> {
    let data = load_data(cfg)?;
    let model = load_model(cfg, &data)?;
    let s = split(cfg, &data);
    let shown: Vec<usize> = (0..s.len().min(cfg.limit)).collect();
    match kind {
        ExplainCmd::Gradcam => {
            let maps = explain::grad_cam_split(&model, s)?;
            let res = data.manifest.resolution;
            let dir = cfg.start_run("explain-gradcam")?;
            let maps_dir = dir.join("gradcam");
            fs::create_dir_all(&maps_dir)?;
            for &i in &shown {
                fs::write(maps_dir.join(format!("{i:05}.pgm")), maps[i].upsample(res, res).to_pgm())?;
                fs::write(maps_dir.join(format!("{i:05}.fmap.pgm")), maps[i].to_pgm())?;
            }
            #[derive(Serialize)]
            struct Gradcam {
                split: String,
                images: usize,
                mean_box_mass: Option<f64>,
            }
            let mean_box_mass = s.boxes.as_ref().map(|b| explain::mean_box_mass(&maps, b, res));
            write_json(
                &dir,
                "gradcam.json",
                &Gradcam {
                    split: cfg.split.clone(),
                    images: maps.len(),
                    mean_box_mass,
                },
            )?;
            Ok(dir)
        }
        ExplainCmd::Hidden => {
            let bundle = bundle(cfg, &data.categories)?;
            let (x, labels) = s.batch(&shown);
            let rankings = explain::hidden_explain(&model, &x, &bundle)?;
            #[derive(Serialize)]
            struct Entry<'a> {
                index: usize,
                id: &'a str,
                category: &'a str,
                rankings: Vec<Ranking>,
            }
            let entries: Vec<Entry> = shown
                .iter()
                .zip(labels)
                .zip(rankings)
                .map(|((&i, l), r)| Entry {
                    index: i,
                    id: &s.ids[i],
                    category: &data.categories[l],
                    rankings: r,
                })
                .collect();
            let dir = cfg.start_run("explain-hidden")?;
            write_json(&dir, "hidden.json", &entries)?;
            Ok(dir)
        }
        ExplainCmd::Project => {
            let nu = trainer::hidden_features(&model, s)?;
            let p = explain::project_2d(&nu, cfg.seed)?;
            let points: Vec<Vec<f64>> = p.coords.iter().map(|c| c.to_vec()).collect();
            let d = nu.shape()[1];
            let full: Vec<Vec<f64>> = (0..s.len()).map(|i| nu.row(i).iter().map(|&v| f64::from(v)).collect()).collect();
            #[derive(Serialize)]
            struct Summary {
                variance: [f64; 2],
                silhouette_2d: f64,
                silhouette_hidden: f64,
                hidden_dim: usize,
            }
            let dir = cfg.start_run("explain-project")?;
            fs::write(dir.join("projection.csv"), explain::projection_csv(&p, &s.labels, &data.categories))?;
            write_json(
                &dir,
                "projection.json",
                &Summary {
                    variance: p.variance,
                    silhouette_2d: explain::silhouette(&points, &s.labels),
                    silhouette_hidden: explain::silhouette(&full, &s.labels),
                    hidden_dim: d,
                },
            )?;
            Ok(dir)
        }
    }
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf]) -> anyhow::Result<PathBuf> {
    for r in runs {
        if !r.join("run.json").is_file() {
            return Err(ConfigInvalid(format!("{} is not a run directory (no run.json)", r.display())).into());
        }
    }
    let mut md = String::from("# Run report\n");
    for r in runs {
        let name = r
            .file_name()
            .map_or_else(|| r.display().to_string(), |n| n.to_string_lossy().into_owned());
        let _ = write!(md, "\n## {name}\n");
        let mut found = false;
        if let Ok(csv) = fs::read_to_string(r.join("ablation.csv")) {
            found = true;
            md.push_str("\n| ");
            for (i, line) in csv.lines().enumerate() {
                md.push_str(&line.split(',').collect::<Vec<_>>().join(" | "));
                md.push_str(" |\n");
                if i == 0 {
                    let cols = line.split(',').count();
                    md.push_str(&"|---".repeat(cols));
                    md.push_str("|\n");
                }
                md.push_str("| ");
            }
            md.truncate(md.len() - 2);
        }
        for file in [
            "report.json",
            "knowledge.json",
            "eval.json",
            "gradcam.json",
            "projection.json",
            "validation.json",
        ] {
            let Ok(text) = fs::read_to_string(r.join(file)) else { continue };
            found = true;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}/{file}", r.display()))?;
            let _ = write!(md, "\n{file}:\n\n");
            for line in summarize(&v) {
                let _ = writeln!(md, "- {line}");
            }
        }
        if !found {
            md.push_str("\nno result files\n");
        }
    }
    let dir = cfg.start_run("report")?;
    fs::write(dir.join("report.md"), md)?;
    Ok(dir)
}

/// Top-level scalars plus the final values of training reports.
fn summarize(v: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(obj) = v.as_object() else { return out };
    for (k, val) in obj {
        match val {
            serde_json::Value::Number(_) | serde_json::Value::String(_) | serde_json::Value::Bool(_) => out.push(format!("{k}: {val}")),
            serde_json::Value::Object(inner) => {
                for (ik, iv) in inner {
                    if iv.is_number() || iv.is_string() {
                        out.push(format!("{k}.{ik}: {iv}"));
                    }
                }
                if let Some(last) = inner.get("epochs").and_then(|e| e.as_array()).and_then(|e| e.last()) {
                    out.push(format!("{k} last epoch: {last}"));
                }
            }
            serde_json::Value::Array(items) if k == "epochs" => {
                if let Some(last) = items.last() {
                    out.push(format!("last epoch: {last}"));
                }
            }
            _ => {}
        }
    }
    out
}
