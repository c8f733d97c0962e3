//! Model definition: a small conv/residual backbone producing pooled hidden
//! features ν, one injection head per knowledge scale, and an MLP
//! classification head that reads ν directly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::rng;
use crate::scale::Scale;
use crate::tensor::{Adam, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("no injection head for scale {0}")]
    UnknownScale(Scale),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// One backbone stage: 3×3 conv, bias, ReLU; residual stages add a second
/// conv and an identity skip. An optional 2×2 max-pool follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub pool: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub resolution: usize,
    pub blocks: Vec<BlockConfig>,
}

impl BackboneConfig {
    /// Three plain conv blocks; the last conv map is 8×8 at 64×64 input.
    pub fn tiny(resolution: usize) -> Self {
        Self {
            in_channels: 3,
            resolution,
            blocks: vec![
                BlockConfig {
                    channels: 16,
                    stride: 2,
                    residual: false,
                    pool: true,
                },
                BlockConfig {
                    channels: 32,
                    stride: 1,
                    residual: false,
                    pool: true,
                },
                BlockConfig {
                    channels: 64,
                    stride: 1,
                    residual: false,
                    pool: false,
                },
            ],
        }
    }

    /// A strided stem followed by three residual blocks.
    pub fn tiny_res(resolution: usize) -> Self {
        Self {
            in_channels: 3,
            resolution,
            blocks: vec![
                BlockConfig {
                    channels: 32,
                    stride: 2,
                    residual: false,
                    pool: true,
                },
                BlockConfig {
                    channels: 32,
                    stride: 1,
                    residual: true,
                    pool: true,
                },
                BlockConfig {
                    channels: 32,
                    stride: 1,
                    residual: true,
                    pool: false,
                },
                BlockConfig {
                    channels: 32,
                    stride: 1,
                    residual: true,
                    pool: false,
                },
            ],
        }
    }

    pub fn preset(name: &str, resolution: usize) -> Result<Self, NetError> {
        match name {
            "tiny" => Ok(Self::tiny(resolution)),
            "tiny-res" => Ok(Self::tiny_res(resolution)),
            other => Err(NetError::ConfigInvalid(format!("unknown backbone preset {other:?}"))),
        }
    }

    /// Width of ν: channel count of the last block.
    pub fn hidden_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    /// Spatial extent of the last conv feature map.
    pub fn feature_map_size(&self) -> (usize, usize) {
        let mut s = self.resolution;
        for (i, b) in self.blocks.iter().enumerate() {
            s = (s + 2 - 3) / b.stride + 1;
            if b.pool && i + 1 < self.blocks.len() {
                s /= 2;
            }
        }
        (s, s)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::ConfigInvalid(m));
        if self.blocks.is_empty() {
            return bad("backbone needs at least one block".into());
        }
        if self.in_channels == 0 || self.resolution < 4 {
            return bad("input channels must be positive and resolution at least 4".into());
        }
        let mut ch = self.in_channels;
        let mut s = self.resolution;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return bad(format!("block {i}: channels and stride must be positive"));
            }
            if b.residual && (b.channels != ch || b.stride != 1) {
                return bad(format!("block {i}: residual blocks keep channels and use stride 1"));
            }
            s = (s + 2 - 3) / b.stride + 1;
            if b.pool {
                if s < 2 {
                    return bad(format!("block {i}: feature map too small to pool"));
                }
                s /= 2;
            }
            ch = b.channels;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub scale: Scale,
    /// Knowledge dimension the head projects into.
    pub dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: Vec<HeadConfig>,
    pub classifier_hidden: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Heads default to d_h → d_h/2 → d_scale with dropout 0.1.
    pub fn new(backbone: BackboneConfig, scale_dims: &[(Scale, usize)], classes: usize) -> Self {
        let dh = backbone.hidden_dim();
        Self {
            heads: scale_dims
                .iter()
                .map(|&(scale, dim)| HeadConfig {
                    scale,
                    dim,
                    hidden: (dh / 2).max(1),
                    dropout: 0.1,
                })
                .collect(),
            classifier_hidden: 64,
            classes,
            backbone,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(NetError::ConfigInvalid("need at least 2 classes".into()));
        }
        if self.classifier_hidden == 0 {
            return Err(NetError::ConfigInvalid("classifier hidden width must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            if !seen.insert(h.scale) {
                return Err(NetError::ConfigInvalid(format!("duplicate head for {}", h.scale)));
            }
            if h.dim == 0 || h.hidden == 0 || !(0.0..1.0).contains(&h.dropout) {
                return Err(NetError::ConfigInvalid(format!("bad head config for {}", h.scale)));
            }
        }
        Ok(())
    }

    pub fn head(&self, scale: Scale) -> Option<&HeadConfig> {
        self.heads.iter().find(|h| h.scale == scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Injection(Scale),
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<f32>,
}

/// Parameters bound as leaves of one tape, in [`ModelState::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

/// Outputs of the backbone forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Hidden {
    /// Pooled hidden features `[N, d_h]`.
    pub nu: Var,
    /// Activation of the last conv block `[N, C, h, w]`, used by Grad-CAM.
    pub feature_map: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<Param>,
    frozen: BTreeSet<ParamGroup>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::stream(seed, &[rng::tag(name)]);
    Tensor::from_fn(shape, |_| r.gen_range(-bound..bound) as f32)
}

impl ModelState {
    /// Fresh model; each parameter is drawn from its own named stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut params = Vec::new();
        let mut push = |name: String, group, value| params.push(Param { name, group, value });
        let mut ch = config.backbone.in_channels;
        for (i, b) in config.backbone.blocks.iter().enumerate() {
            let convs = if b.residual { 2 } else { 1 };
            for j in 0..convs {
                let cin = if j == 0 { ch } else { b.channels };
                let w = format!("backbone.block{i}.conv{j}.weight");
                push(
                    w.clone(),
                    ParamGroup::Backbone,
                    kaiming_uniform(&[b.channels, cin, 3, 3], cin * 9, seed, &w),
                );
                push(
                    format!("backbone.block{i}.conv{j}.bias"),
                    ParamGroup::Backbone,
                    Tensor::zeros(&[b.channels]),
                );
            }
            ch = b.channels;
        }
        let dh = config.backbone.hidden_dim();
        let linear = |prefix: &str, group, fan_in: usize, fan_out: usize, push: &mut dyn FnMut(String, ParamGroup, Tensor<f32>)| {
            let w = format!("{prefix}.weight");
            push(w.clone(), group, kaiming_uniform(&[fan_in, fan_out], fan_in, seed, &w));
            push(format!("{prefix}.bias"), group, Tensor::zeros(&[fan_out]));
        };
        for h in &config.heads {
            let g = ParamGroup::Injection(h.scale);
            linear(&format!("head.{}.fc0", h.scale), g, dh, h.hidden, &mut push);
            linear(&format!("head.{}.fc1", h.scale), g, h.hidden, h.dim, &mut push);
        }
        linear("classifier.fc0", ParamGroup::Classifier, dh, config.classifier_hidden, &mut push);
        linear(
            "classifier.fc1",
            ParamGroup::Classifier,
            config.classifier_hidden,
            config.classes,
            &mut push,
        );
        Ok(Self {
            config,
            params,
            frozen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze(&mut self, group: ParamGroup) {
        self.frozen.remove(&group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    /// Groups present in this model.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let set: BTreeSet<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        set.into_iter().collect()
    }

    /// FNV-1a over the raw bytes of every parameter in `group`.
    pub fn group_digest(&self, group: ParamGroup) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        checkpoint::fnv1a64(&bytes)
    }

    /// Registers every parameter on the tape; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape<f32>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !self.frozen.contains(&p.group)))
            .collect();
        Bound { vars }
    }

    fn var(&self, b: &Bound, name: &str) -> Result<Var, NetError> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| b.vars[i])
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    fn conv(&self, tape: &mut Tape<f32>, b: &Bound, x: Var, prefix: &str, stride: usize) -> Result<Var, NetError> {
        let w = self.var(b, &format!("{prefix}.weight"))?;
        let bias = self.var(b, &format!("{prefix}.bias"))?;
        let y = tape.conv2d(x, w, stride, 1)?;
        Ok(tape.add_bias(y, bias)?)
    }

    fn linear(&self, tape: &mut Tape<f32>, b: &Bound, x: Var, prefix: &str) -> Result<Var, NetError> {
        let w = self.var(b, &format!("{prefix}.weight"))?;
        let bias = self.var(b, &format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, bias)?)
    }

    /// Backbone forward up to the global-average-pooled features.
    pub fn forward_hidden(&self, tape: &mut Tape<f32>, b: &Bound, images: Var) -> Result<Hidden, NetError> {
        let cfg = &self.config.backbone;
        let s = tape.shape(images);
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.resolution || s[3] != cfg.resolution {
            return Err(TensorError::ShapeMismatch(format!(
                "images {s:?}, expected [N, {}, {}, {}]",
                cfg.in_channels, cfg.resolution, cfg.resolution
            ))
            .into());
        }
        let mut x = images;
        let mut feature_map = x;
        let last = cfg.blocks.len() - 1;
        for (i, blk) in cfg.blocks.iter().enumerate() {
            let y = self.conv(tape, b, x, &format!("backbone.block{i}.conv0"), blk.stride)?;
            let mut y = tape.relu(y);
            if blk.residual {
                let z = self.conv(tape, b, y, &format!("backbone.block{i}.conv1"), 1)?;
                let sum = tape.add(z, x)?;
                y = tape.relu(sum);
            }
            if i == last {
                feature_map = y;
            }
            x = if blk.pool && i != last { tape.maxpool2d(y, 2, 2)? } else { y };
        }
        let nu = tape.global_avg_pool(x)?;
        Ok(Hidden { nu, feature_map })
    }

    /// Linear → ReLU → dropout → linear. Rows are L2-normalized in eval mode.
    pub fn forward_injection(
        &self,
        tape: &mut Tape<f32>,
        b: &Bound,
        nu: Var,
        scale: Scale,
        train: bool,
        seed: u64,
    ) -> Result<Var, NetError> {
        let head = self.config.head(scale).ok_or(NetError::UnknownScale(scale))?;
        let prefix = format!("head.{scale}");
        let h = self.linear(tape, b, nu, &format!("{prefix}.fc0"))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, head.dropout, train, seed)?;
        let out = self.linear(tape, b, h, &format!("{prefix}.fc1"))?;
        if train {
            Ok(out)
        } else {
            Ok(tape.l2_normalize_rows(out)?)
        }
    }

    /// Classification logits from ν; softmax is left to the loss.
    pub fn forward_mlp(&self, tape: &mut Tape<f32>, b: &Bound, nu: Var) -> Result<Var, NetError> {
        let w = tape.shape(nu);
        let dh = self.config.backbone.hidden_dim();
        if w.len() != 2 || w[1] != dh {
            return Err(TensorError::ShapeMismatch(format!("hidden features {w:?}, expected [N, {dh}]")).into());
        }
        let h = self.linear(tape, b, nu, "classifier.fc0")?;
        let h = tape.relu(h);
        self.linear(tape, b, h, "classifier.fc1")
    }

    /// Applies one optimizer step to every unfrozen parameter that received
    /// a gradient on `tape`.
    pub fn apply_grads(&mut self, tape: &Tape<f32>, b: &Bound, opt: &mut Adam) -> Result<(), NetError> {
        for (p, &v) in self.params.iter_mut().zip(&b.vars) {
            if self.frozen.contains(&p.group) {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                opt.step(&p.name, &mut p.value, g)?;
            }
        }
        Ok(())
    }

    /// Gradient of every parameter on `tape`, zero where none flowed.
    pub fn grads(&self, tape: &Tape<f32>, b: &Bound) -> Vec<(String, Vec<f32>)> {
        self.params
            .iter()
            .zip(&b.vars)
            .map(|(p, &v)| {
                let g = tape.grad(v).map_or_else(|| vec![0.0; p.value.numel()], <[f32]>::to_vec);
                (p.name.clone(), g)
            })
            .collect()
    }

    /// Eval-mode ν for a batch of images.
    pub fn hidden_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        let mut tape = Tape::new();
        let b = self.bind_constants(&mut tape);
        let x = tape.constant(images.clone());
        let h = self.forward_hidden(&mut tape, &b, x)?;
        Ok(tape.value(h.nu).clone())
    }

    /// Eval-mode, L2-normalized head output for precomputed ν.
    pub fn injection_features(&self, nu: &Tensor<f32>, scale: Scale) -> Result<Tensor<f32>, NetError> {
        let mut tape = Tape::new();
        let b = self.bind_constants(&mut tape);
        let x = tape.constant(nu.clone());
        let y = self.forward_injection(&mut tape, &b, x, scale, false, 0)?;
        Ok(tape.value(y).clone())
    }

    pub fn logits_from_hidden(&self, nu: &Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        let mut tape = Tape::new();
        let b = self.bind_constants(&mut tape);
        let x = tape.constant(nu.clone());
        let y = self.forward_mlp(&mut tape, &b, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        self.logits_from_hidden(&self.hidden_features(images)?)
    }

    /// Registers every parameter as a constant, for analysis passes.
    pub fn bind_constants(&self, tape: &mut Tape<f32>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Writes `<path>` as KINJ1 and `<path>.json` with the architecture.
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let refs: Vec<(&str, &Tensor<f32>)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        checkpoint::save(path, &refs)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&sidecar, json).map_err(|e| NetError::Io {
            path: sidecar.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| NetError::Io {
            path: sidecar.display().to_string(),
            message: e.to_string(),
        })?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| NetError::ConfigInvalid(format!("{}: {e}", sidecar.display())))?;
        let mut model = Self::new(config, 0)?;
        let stored = checkpoint::load(path)?;
        if stored.len() != model.params.len() {
            return Err(NetError::ConfigInvalid(format!(
                "checkpoint has {} parameters, architecture has {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (name, value) in stored {
            let p = model.param_mut(&name).ok_or_else(|| NetError::MissingParam(name.clone()))?;
            if p.value.shape() != value.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?}, architecture {:?}",
                    value.shape(),
                    p.value.shape()
                ))
                .into());
            }
            p.value = value;
        }
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
