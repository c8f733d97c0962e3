//! Softmax regression on raw pixels, written without the autodiff engine so
//! it can serve as an independent learnability check on generated data.

use rand::seq::SliceRandom;

use super::Split;
use crate::rng;

/// Trains on `train` and returns top-1 accuracy on `val`. Features are
/// standardized per pixel with training statistics.
pub fn linear_probe(train: &Split, val: &Split, classes: usize, epochs: usize, seed: u64) -> f64 {
    let n = train.len();
    if n == 0 || val.is_empty() || classes == 0 {
        return 0.0;
    }
    let d = train.images.numel() / n;
    let x = train.images.data();
    let mut mean = vec![0f64; d];
    let mut var = vec![0f64; d];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += f64::from(x[i * d + j]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for j in 0..d {
            var[j] += (f64::from(x[i * d + j]) - mean[j]).powi(2);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64).sqrt().max(1e-3)).collect();
    let feature = |src: &[f32], i: usize| -> Vec<f64> { (0..d).map(|j| (f64::from(src[i * d + j]) - mean[j]) * inv_std[j]).collect() };
    let train_x: Vec<Vec<f64>> = (0..n).map(|i| feature(x, i)).collect();

    let mut w = vec![0f64; classes * d];
    let mut b = vec![0f64; classes];
    let scores = |w: &[f64], b: &[f64], f: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|k| b[k] + w[k * d..(k + 1) * d].iter().zip(f).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    };
    let lr = 0.5 / d as f64;
    let batch = 32;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::tag("linear-probe")]);
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0f64; classes * d];
            let mut gb = vec![0f64; classes];
            for &i in chunk {
                let f = &train_x[i];
                let s = scores(&w, &b, f);
                let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..classes {
                    let g = e[k] / z - if k == train.labels[i] { 1.0 } else { 0.0 };
                    gb[k] += g;
                    for (gv, fv) in gw[k * d..(k + 1) * d].iter_mut().zip(f) {
                        *gv += g * fv;
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            for (wv, gv) in w.iter_mut().zip(&gw) {
                *wv -= scale * gv + lr * 1e-3 * *wv;
            }
            for (bv, gv) in b.iter_mut().zip(&gb) {
                *bv -= gv / chunk.len() as f64 * 0.1;
            }
        }
    }
    let vx = val.images.data();
    let correct = (0..val.len())
        .filter(|&i| {
            let s = scores(&w, &b, &feature(vx, i));
            let best = s.iter().enumerate().max_by(|a, c| a.1.total_cmp(c.1)).map_or(0, |(k, _)| k);
            best == val.labels[i]
        })
        .count();
    correct as f64 / val.len() as f64
}
