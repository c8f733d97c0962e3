//! Interpretability: Grad-CAM heatmaps, hidden-layer knowledge retrieval,
//! and a PCA projection of hidden features.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::net::{ModelState, NetError};
use crate::rng;
use crate::scale::Scale;
use crate::synth::Split;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::trainer::{hidden_features, projections, KnowledgeBundle, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("model has no convolutional feature map")]
    NoConvLayer,
    #[error("all features are identical; covariance is degenerate")]
    DegenerateCovariance,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("target {target} out of range for {classes} categories")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Non-negative map normalized to max 1, or identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// Maximum before normalization.
    pub peak: f32,
}

impl Heatmap {
    fn normalized(height: usize, width: usize, mut values: Vec<f32>) -> Self {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        let peak = values.iter().cloned().fold(0.0f32, f32::max);
        if peak > 0.0 {
            values.iter_mut().for_each(|v| *v /= peak);
        }
        Self {
            height,
            width,
            values,
            peak,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn upsample(&self, height: usize, width: usize) -> Heatmap {
        let sample = |src: f64, n: usize| {
            let p = (src - 0.5).clamp(0.0, (n - 1) as f64);
            let i = p.floor() as usize;
            let j = (i + 1).min(n - 1);
            (i, j, p - i as f64)
        };
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = sample((y as f64 + 0.5) * self.height as f64 / height as f64, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample((x as f64 + 0.5) * self.width as f64 / width as f64, self.width);
                let top = f64::from(self.at(y0, x0)) * (1.0 - fx) + f64::from(self.at(y0, x1)) * fx;
                let bot = f64::from(self.at(y1, x0)) * (1.0 - fx) + f64::from(self.at(y1, x1)) * fx;
                values.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
        Heatmap::normalized(height, width, values)
    }

    /// Binary portable graymap (P5), 8 bits per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Fraction of total mass inside `[x0, y0, x1, y1)`; 0 for a zero map.
    pub fn mass_in_box(&self, bbox: [i32; 4]) -> f64 {
        let total: f64 = self.values.iter().map(|&v| f64::from(v)).sum();
        if total == 0.0 {
            return 0.0;
        }
        let clamp = |v: i32, n: usize| v.clamp(0, n as i32) as usize;
        let (x0, x1) = (clamp(bbox[0], self.width), clamp(bbox[2], self.width));
        let (y0, y1) = (clamp(bbox[1], self.height), clamp(bbox[3], self.height));
        let inside: f64 = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (y, x)))
            .map(|(y, x)| f64::from(self.at(y, x)))
            .sum();
        inside / total
    }
}

/// Grad-CAM for a batch `[N, 3, R, R]`, one target category per image.
/// Channel weights are the spatial mean of ∂logit/∂A over the last conv
/// activation A; the map is the rectified weighted channel sum.
pub fn grad_cam(model: &ModelState, images: &Tensor<f32>, targets: &[usize]) -> Result<Vec<Heatmap>, ExplainError> {
    let classes = model.config().classes;
    if let Some(&target) = targets.iter().find(|&&t| t >= classes) {
        return Err(ExplainError::TargetOutOfRange { target, classes });
    }
    let mut tape = Tape::new();
    let bound = model.bind_constants(&mut tape);
    // A differentiable input makes every activation record its gradient.
    let x = tape.param(images.clone());
    let hidden = model.forward_hidden(&mut tape, &bound, x)?;
    let logits = model.forward_mlp(&mut tape, &bound, hidden.nu)?;
    let n = tape.shape(logits)[0];
    if n != targets.len() {
        return Err(TensorError::ShapeMismatch(format!("{n} images, {} targets", targets.len())).into());
    }
    let onehot = Tensor::from_fn(&[n, classes], |i| if targets[i / classes] == i % classes { 1.0 } else { 0.0 });
    let mask = tape.constant(onehot);
    let picked = tape.mul(logits, mask)?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let shape = tape.shape(hidden.feature_map).to_vec();
    if shape.len() != 4 {
        return Err(ExplainError::NoConvLayer);
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let act = tape.value(hidden.feature_map).data();
    let zeros = vec![0.0; act.len()];
    let grad = tape.grad(hidden.feature_map).unwrap_or(&zeros);
    let hw = h * w;
    Ok((0..n)
        .map(|i| {
            let mut cam = vec![0f64; hw];
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let weight: f64 = grad[base..base + hw].iter().map(|&g| f64::from(g)).sum::<f64>() / hw as f64;
                for (m, &a) in cam.iter_mut().zip(&act[base..base + hw]) {
                    *m += weight * f64::from(a);
                }
            }
            Heatmap::normalized(h, w, cam.into_iter().map(|v| v as f32).collect())
        })
        .collect())
}

/// Grad-CAM over a split in batches, targeting each image's true label.
pub fn grad_cam_split(model: &ModelState, split: &Split) -> Result<Vec<Heatmap>, ExplainError> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let parts: Vec<Vec<Heatmap>> = idx
        .par_chunks(32)
        .map(|c| {
            let (x, labels) = split.batch(c);
            grad_cam(model, &x, &labels)
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Mean fraction of upsampled heatmap mass inside each object box.
pub fn mean_box_mass(heatmaps: &[Heatmap], boxes: &[[i32; 4]], resolution: usize) -> f64 {
    if heatmaps.is_empty() {
        return 0.0;
    }
    let sum: f64 = heatmaps
        .iter()
        .zip(boxes)
        .map(|(h, &b)| h.upsample(resolution, resolution).mass_in_box(b))
        .sum();
    sum / heatmaps.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub scale: Scale,
    /// `(category, cosine)`, best first.
    pub scores: Vec<(String, f64)>,
}

/// Ranks categories by cosine between one head output and each ξ.
pub fn rank_categories(projection: &[f32], bundle: &KnowledgeBundle, scale: Scale) -> Result<Ranking, ExplainError> {
    let mut scores = Vec::with_capacity(bundle.categories().len());
    for (c, name) in bundle.categories().iter().enumerate() {
        let xi = bundle.vector(scale, c).ok_or(TrainError::MissingScale(scale))?;
        if xi.len() != projection.len() {
            return Err(TrainError::DimensionMismatch {
                expected: xi.len(),
                found: projection.len(),
            }
            .into());
        }
        scores.push((name.clone(), linalg::cosine(projection, xi)));
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(Ranking { scale, scores })
}

/// Per-image rankings for every scale the model and bundle share.
pub fn hidden_explain(model: &ModelState, images: &Tensor<f32>, bundle: &KnowledgeBundle) -> Result<Vec<Vec<Ranking>>, ExplainError> {
    let nu = model.hidden_features(images)?;
    let scales: Vec<Scale> = bundle.scales().into_iter().filter(|&s| model.config().head(s).is_some()).collect();
    let per_scale: Vec<Tensor<f32>> = scales.iter().map(|&s| model.injection_features(&nu, s)).collect::<Result<_, _>>()?;
    (0..nu.shape()[0])
        .map(|i| {
            scales
                .iter()
                .zip(&per_scale)
                .map(|(&s, p)| rank_categories(p.row(i), bundle, s))
                .collect()
        })
        .collect()
}

/// Fraction of a split whose top-ranked category at `scale` is its label.
pub fn retrieval_accuracy(model: &ModelState, split: &Split, bundle: &KnowledgeBundle, scale: Scale) -> Result<f64, ExplainError> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let nu = hidden_features(model, split)?;
    let p = projections(model, &nu, scale)?;
    let mut hits = 0;
    for (i, &label) in split.labels.iter().enumerate() {
        let r = rank_categories(p.row(i), bundle, scale)?;
        if r.scores[0].0 == bundle.categories()[label] {
            hits += 1;
        }
    }
    Ok(f64::from(hits) / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Two orthonormal principal directions.
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub variance: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

const POWER_ITERS: usize = 1000;

/// PCA to two components by power iteration with deflation.
pub fn project_2d(features: &Tensor<f32>, seed: u64) -> Result<Projection, ExplainError> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!("features {shape:?}, expected [N, D]")).into());
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(ExplainError::InsufficientSamples(n));
    }
    let x = features.data();
    let mut mean = vec![0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += f64::from(x[i * d + j]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = (0..n * d).map(|k| f64::from(x[k]) - mean[k % d]).collect();
    let mut cov = vec![0f64; d * d];
    for i in 0..n {
        let row = &centred[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace <= f64::EPSILON {
        return Err(ExplainError::DegenerateCovariance);
    }

    let mut r = rng::stream(seed, &[rng::tag("pca")]);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut variance = [0.0; 2];
    for slot in &mut variance {
        let orthogonalize = |v: &mut Vec<f64>, comps: &[Vec<f64>]| {
            for c in comps {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|a| *a /= norm);
            }
            norm
        };
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &comps);
        for _ in 0..POWER_ITERS {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
            // Deflation: restrict the iteration to the orthogonal complement.
            if orthogonalize(&mut w, &comps) < 1e-12 {
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-12 {
                break;
            }
        }
        let cv: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
        *slot = v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        comps.push(v);
    }
    let coords = (0..n)
        .map(|i| {
            let row = &centred[i * d..(i + 1) * d];
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&comps[0]), dot(&comps[1])]
        })
        .collect();
    let second = comps.pop().expect("two components");
    let first = comps.pop().expect("two components");
    Ok(Projection {
        mean,
        components: [first, second],
        variance,
        coords,
    })
}

/// Mean silhouette coefficient of points under `labels`, Euclidean
/// distance. Singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![0f64; k];
            let mut counts = vec![0usize; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] += dist(&points[i], &points[j]);
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if counts[own] == 0 {
                return 0.0;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .sum();
    total / n as f64
}

pub fn projection_csv(p: &Projection, labels: &[usize], categories: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "label", "category", "pc1", "pc2"])
        .expect("in-memory write");
    for (i, (c, &l)) in p.coords.iter().zip(labels).enumerate() {
        let name = categories.get(l).map_or("", String::as_str);
        w.write_record([
            i.to_string(),
            l.to_string(),
            name.to_string(),
            format!("{:.6}", c[0]),
            format!("{:.6}", c[1]),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BackboneConfig, ModelConfig, ParamGroup};

    fn model(seed: u64) -> ModelState {
        ModelState::new(ModelConfig::new(BackboneConfig::tiny(64), &[(Scale::Medium, 8)], 3), seed).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(&[n, 3, 64, 64], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn heatmaps_are_normalized_and_feature_map_sized() {
        let m = model(1);
        let maps = grad_cam(&m, &images(3, 2), &[0, 1, 2]).unwrap();
        for h in &maps {
            assert_eq!((h.height, h.width), (8, 8));
            assert!(h.values.iter().all(|&v| v >= 0.0));
            let max = h.values.iter().cloned().fold(0.0, f32::max);
            assert!(h.is_zero() || (max - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_classifier_gives_zero_map() {
        let mut m = model(1);
        for name in ["classifier.fc1.weight", "classifier.fc1.bias"] {
            m.param_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let maps = grad_cam(&m, &images(2, 3), &[0, 2]).unwrap();
        assert!(maps.iter().all(Heatmap::is_zero));
        assert!(m.params().iter().any(|p| p.group == ParamGroup::Classifier));
    }

    #[test]
    fn logit_shift_does_not_change_map() {
        let m = model(4);
        let mut shifted = m.clone();
        shifted
            .param_mut("classifier.fc1.bias")
            .unwrap()
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 2.5);
        let x = images(2, 5);
        assert_eq!(grad_cam(&m, &x, &[1, 0]).unwrap(), grad_cam(&shifted, &x, &[1, 0]).unwrap());
        assert!(matches!(grad_cam(&m, &x, &[1, 7]), Err(ExplainError::TargetOutOfRange { .. })));
    }

    #[test]
    fn upsample_constant_and_pgm_header() {
        let h = Heatmap::normalized(2, 2, vec![1.0; 4]);
        let up = h.upsample(8, 8);
        assert!(up.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let pgm = h.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pgm.len(), b"P5\n2 2\n255\n".len() + 4);
        assert!((up.mass_in_box([0, 0, 4, 8]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ranking_puts_exact_match_first() {
        let mut b = KnowledgeBundle::new(vec!["a".into(), "b".into(), "c".into()]);
        b.insert(
            Scale::Medium,
            &[
                ("a".into(), vec![1.0, 0.0, 0.0]),
                ("b".into(), vec![0.0, 1.0, 0.0]),
                ("c".into(), vec![0.6, 0.8, 0.0]),
            ],
        )
        .unwrap();
        let r = rank_categories(&[0.0, 1.0, 0.0], &b, Scale::Medium).unwrap();
        assert_eq!(r.scores[0].0, "b");
        assert!((r.scores[0].1 - 1.0).abs() < 1e-9);
        assert!(r.scores.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(r.scores.iter().all(|(_, s)| (-1.0..=1.0).contains(s)));
        let scaled = rank_categories(&[0.0, 7.0, 0.0], &b, Scale::Medium).unwrap();
        assert_eq!(r, scaled);
    }

    #[test]
    fn pca_basics() {
        let two = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = project_2d(&two, 0).unwrap();
        let d = ((p.coords[0][0] - p.coords[1][0]).powi(2) + (p.coords[0][1] - p.coords[1][1]).powi(2)).sqrt();
        assert!(d > 0.0);
        let same = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(project_2d(&same, 0), Err(ExplainError::DegenerateCovariance));
        let one = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(project_2d(&one, 0), Err(ExplainError::InsufficientSamples(1)));
    }

    #[test]
    fn pca_components_orthonormal_and_duplicates_duplicate() {
        let mut r = rng::stream(9, &[]);
        let x = Tensor::from_fn(&[40, 6], |i| r.gen_range(-1.0..1.0) * (1 + i % 6) as f32);
        let p = project_2d(&x, 3).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&p.components[0], &p.components[0]) - 1.0).abs() < 1e-5);
        assert!((dot(&p.components[1], &p.components[1]) - 1.0).abs() < 1e-5);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-5);
        assert!(p.variance[0] >= p.variance[1]);

        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let q = project_2d(&Tensor::new(vec![80, 6], doubled).unwrap(), 3).unwrap();
        for i in 0..40 {
            assert_eq!(q.coords[i], q.coords[i + 40]);
        }
    }

    #[test]
    fn silhouette_separated_clusters_near_one() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]) > 0.95);
        assert!(silhouette(&pts, &[0, 1, 0, 1]) < 0.0);
    }
}
