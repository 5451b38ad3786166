//! Scheme graphs over a small convolutional backbone.
//!
//! Parameters live in a [`ParamStore`]; a forward pass binds them onto a
//! fresh tape and records the scheme's graph. Image batches are
//! `N×1×H×W`; score maps are recorded as `N×C×S×S` and exposed per image as
//! [`ScoreMaps`] in `S×S×C` order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::stn::{self, BBoxParams, WarpParams};
use crate::tensor::{
    read_tensor_file, write_tensor_file, Gradients, PoolingConfig, Tape, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Lbm,
    Ubm,
    SupLoc,
    AStn,
    AffStn,
    Stl,
    GlobalPool,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Lbm,
        Scheme::Ubm,
        Scheme::SupLoc,
        Scheme::AStn,
        Scheme::AffStn,
        Scheme::Stl,
        Scheme::GlobalPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Lbm => "lbm",
            Scheme::Ubm => "ubm",
            Scheme::SupLoc => "suploc",
            Scheme::AStn => "astn",
            Scheme::AffStn => "affstn",
            Scheme::Stl => "stl",
            Scheme::GlobalPool => "globalpool",
        }
    }

    pub fn is_stn(self) -> bool {
        matches!(self, Scheme::AStn | Scheme::AffStn)
    }

    /// Whether the scheme predicts a box for each image.
    pub fn localizes(self) -> bool {
        !matches!(self, Scheme::Lbm | Scheme::Ubm)
    }

    /// Warp parameter count of the localizer, if the scheme has one.
    pub fn warp_dof(self) -> Option<usize> {
        match self {
            Scheme::SupLoc | Scheme::AStn => Some(3),
            Scheme::AffStn => Some(6),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "lbm" => Ok(Scheme::Lbm),
            "ubm" => Ok(Scheme::Ubm),
            "suploc" | "supubm" | "suplocubm" => Ok(Scheme::SupLoc),
            "astn" => Ok(Scheme::AStn),
            "affstn" => Ok(Scheme::AffStn),
            "stl" => Ok(Scheme::Stl),
            "globalpool" | "gp" => Ok(Scheme::GlobalPool),
            _ => Err(Error::Usage(format!(
                "unknown scheme `{s}` (expected one of lbm, ubm, suploc, astn, affstn, stl, globalpool)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            channels,
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scheme: Scheme,
    pub classes: usize,
    pub in_channels: usize,
    /// Full image side.
    pub image_size: usize,
    /// Side of the crops fed to the classifier by UBM and the attention schemes.
    pub roi_size: usize,
    /// Enlarged input side for the two-branch scheme.
    pub stl_size: usize,
    pub backbone: Vec<ConvSpec>,
    /// Channels of the global-pooling transition layer.
    pub transition_dim: usize,
    /// Leading backbone blocks shared by both branches of the two-branch scheme.
    pub stl_shared_layers: usize,
    pub stl_head: StlHead,
    pub pooling: PoolingConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(scheme: Scheme, classes: usize) -> Self {
        ModelConfig {
            scheme,
            classes,
            in_channels: 1,
            image_size: 64,
            roi_size: 32,
            stl_size: 96,
            backbone: vec![
                ConvSpec::new(8, 3, 2),
                ConvSpec::new(16, 3, 2),
                ConvSpec::new(32, 3, 2),
                ConvSpec::new(32, 3, 1),
            ],
            transition_dim: 32,
            stl_shared_layers: 3,
            stl_head: StlHead::Pooled,
            pooling: PoolingConfig::avg(),
            init_seed: 0,
        }
    }

    /// Side of the images the scheme's main network consumes.
    pub fn input_size(&self) -> usize {
        match self.scheme {
            Scheme::Ubm => self.roi_size,
            Scheme::Stl => self.stl_size,
            _ => self.image_size,
        }
    }

    fn spatial_after(&self, n: usize, layers: &[ConvSpec]) -> usize {
        layers.iter().fold(n, |n, l| l.out_size(n))
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone
            .last()
            .map_or(self.in_channels, |l| l.channels)
    }

    /// Side of the score maps for schemes that produce them.
    pub fn score_map_size(&self) -> Option<usize> {
        match self.scheme {
            Scheme::Stl => {
                Some(self.spatial_after(self.stl_size, &self.backbone[..self.stl_shared_layers]))
            }
            Scheme::GlobalPool => Some(self.spatial_after(self.image_size, &self.backbone)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.backbone.is_empty() {
            return Err(Error::Config(
                "backbone needs at least one conv layer".into(),
            ));
        }
        if self
            .backbone
            .iter()
            .any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(Error::Config(
                "conv layers need positive channels, kernel and stride".into(),
            ));
        }
        if self.transition_dim == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "transition and input channels must be positive".into(),
            ));
        }
        if self.roi_size < 2 || self.image_size < 2 || self.stl_size < 2 {
            return Err(Error::Config("input sizes must be at least 2".into()));
        }
        if self.scheme == Scheme::Stl
            && !(1..=self.backbone.len()).contains(&self.stl_shared_layers)
        {
            return Err(Error::Config(format!(
                "shared layer count {} outside 1..={}",
                self.stl_shared_layers,
                self.backbone.len()
            )));
        }
        self.pooling.validate()?;
        let sizes = [self.image_size, self.roi_size, self.input_size()];
        for n in sizes {
            if self.spatial_after(n, &self.backbone) < 2 {
                return Err(Error::Config(format!(
                    "backbone reduces a {n}-pixel input below 2×2"
                )));
            }
        }
        Ok(())
    }
}

/// Classification head of the two-branch scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StlHead {
    /// Dense layer over the flattened branch features.
    Dense,
    /// Global average pooling, then a dense layer.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Layers used by both branches of the two-branch scheme.
    Shared,
    Classifier,
    Localizer,
    /// Score-map layers of the two-branch scheme.
    LocBranch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> usize {
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Scalar parameter count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            grads.accumulate_into(v, &mut p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Copies values of every parameter in `other` with the same name and shape.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.get(&p.name) {
                if src.tensor.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.tensor.data());
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    fn conv(&mut self, name: &str, group: ParamGroup, in_ch: usize, spec: ConvSpec) -> Conv {
        let fan_in = in_ch * spec.kernel * spec.kernel;
        let w = self.uniform(
            &[spec.channels, in_ch, spec.kernel, spec.kernel],
            (6.0 / fan_in as f64).sqrt(),
        );
        let weight = self.store.add(format!("{name}.weight"), group, w);
        let bias = self.store.add(
            format!("{name}.bias"),
            group,
            Tensor::zeros(&[spec.channels]),
        );
        Conv {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding(),
        }
    }

    fn dense(&mut self, name: &str, group: ParamGroup, inputs: usize, outputs: usize) -> Dense {
        let w = self.uniform(&[inputs, outputs], (6.0 / (inputs + outputs) as f64).sqrt());
        let weight = self.store.add(format!("{name}.weight"), group, w);
        let bias = self
            .store
            .add(format!("{name}.bias"), group, Tensor::zeros(&[outputs]));
        Dense { weight, bias }
    }

    fn trunk(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        mut in_ch: usize,
        layers: &[ConvSpec],
        first: usize,
    ) -> Vec<Conv> {
        layers
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let c = self.conv(&format!("{prefix}.conv{}", first + i), group, in_ch, spec);
                in_ch = spec.channels;
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Classifier {
    convs: Vec<Conv>,
    fc: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct Localizer {
    convs: Vec<Conv>,
    fc: Dense,
    dof: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Plain(Classifier),
    SupLoc {
        loc: Localizer,
        cls: Classifier,
    },
    Stn {
        loc: Localizer,
        cls: Classifier,
    },
    Stl {
        shared: Vec<Conv>,
        cls_convs: Vec<Conv>,
        cls_fc: Dense,
        loc_conv: Conv,
    },
    GlobalPool {
        convs: Vec<Conv>,
        transition: Conv,
        fc: Dense,
    },
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// `N×C` logits of the classification path.
    pub logits: Var,
    /// `N×C` pooled score-map logits of the localization branch.
    pub loc_logits: Option<Var>,
    /// `N×C×S×S`.
    pub score_maps: Option<Var>,
    /// `N×dof` raw localizer output.
    pub warp: Option<Var>,
}

/// Per-class activation maps of one image, stored `S×S×C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMaps {
    pub size: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ScoreMaps {
    fn from_nchw(values: &[f64], classes: usize, size: usize) -> Self {
        let cells = size * size;
        let mut data = vec![0.0; cells * classes];
        for c in 0..classes {
            for k in 0..cells {
                data[k * classes + c] = values[c * cells + k];
            }
        }
        ScoreMaps {
            size,
            classes,
            data,
        }
    }

    pub fn at(&self, r: usize, c: usize, class: usize) -> f64 {
        self.data[(r * self.size + c) * self.classes + class]
    }

    /// Row-major `S×S` slice for one class.
    pub fn channel(&self, class: usize) -> Vec<f64> {
        (0..self.size * self.size)
            .map(|k| self.data[k * self.classes + class])
            .collect()
    }

    pub fn channel_mean(&self, class: usize) -> f64 {
        self.channel(class).iter().sum::<f64>() / (self.size * self.size) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlForward {
    pub probs: Tensor,
    pub loc_scores: Tensor,
    pub score_maps: Vec<ScoreMaps>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    net: Net,
}

fn apply_conv(tape: &mut Tape, vars: &[Var], x: Var, c: &Conv) -> Result<Var> {
    let y = tape.conv2d(x, vars[c.weight], c.stride, c.padding)?;
    tape.channel_bias(y, vars[c.bias])
}

fn apply_trunk(tape: &mut Tape, vars: &[Var], mut x: Var, convs: &[Conv]) -> Result<Var> {
    for c in convs {
        let y = apply_conv(tape, vars, x, c)?;
        x = tape.relu(y);
    }
    Ok(x)
}

fn apply_dense(tape: &mut Tape, vars: &[Var], x: Var, d: &Dense) -> Result<Var> {
    tape.linear(x, vars[d.weight], Some(vars[d.bias]))
}

impl Classifier {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let convs = b.trunk(
            "cls",
            ParamGroup::Classifier,
            cfg.in_channels,
            &cfg.backbone,
            0,
        );
        let fc = b.dense(
            "cls.fc",
            ParamGroup::Classifier,
            cfg.feature_dim(),
            cfg.classes,
        );
        Classifier { convs, fc }
    }

    /// Backbone, global average pooling, then a dense layer; accepts any
    /// resolution the backbone can reduce.
    fn record(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let f = apply_trunk(tape, vars, x, &self.convs)?;
        let pooled = tape.global_pool(f, PoolingConfig::avg())?;
        apply_dense(tape, vars, pooled, &self.fc)
    }
}

impl Localizer {
    fn build(b: &mut Builder, cfg: &ModelConfig, dof: usize) -> Self {
        let convs = b.trunk(
            "loc",
            ParamGroup::Localizer,
            cfg.in_channels,
            &cfg.backbone,
            0,
        );
        let s = cfg.spatial_after(cfg.image_size, &cfg.backbone);
        let fc = b.dense(
            "loc.fc",
            ParamGroup::Localizer,
            s * s * cfg.feature_dim(),
            dof,
        );
        // start from the full-image box
        let w = &mut b.store.params[fc.weight].tensor;
        w.data_mut().fill(0.0);
        let identity: &[f64] = if dof == 3 {
            &[0.0, 0.0, 1.0]
        } else {
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        };
        b.store.params[fc.bias]
            .tensor
            .data_mut()
            .copy_from_slice(identity);
        Localizer { convs, fc, dof }
    }

    fn record(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let f = apply_trunk(tape, vars, x, &self.convs)?;
        let flat = tape.flatten(f)?;
        apply_dense(tape, vars, flat, &self.fc)
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let net = match config.scheme {
            Scheme::Lbm | Scheme::Ubm => Net::Plain(Classifier::build(&mut b, &config)),
            Scheme::SupLoc => {
                let loc = Localizer::build(&mut b, &config, 3);
                let cls = Classifier::build(&mut b, &config);
                Net::SupLoc { loc, cls }
            }
            Scheme::AStn | Scheme::AffStn => {
                let dof = config.scheme.warp_dof().expect("attention scheme");
                let loc = Localizer::build(&mut b, &config, dof);
                let cls = Classifier::build(&mut b, &config);
                Net::Stn { loc, cls }
            }
            Scheme::Stl => {
                let n = config.stl_shared_layers;
                let shared = b.trunk(
                    "shared",
                    ParamGroup::Shared,
                    config.in_channels,
                    &config.backbone[..n],
                    0,
                );
                let shared_ch = config.backbone[n - 1].channels;
                let cls_convs = b.trunk(
                    "cls",
                    ParamGroup::Classifier,
                    shared_ch,
                    &config.backbone[n..],
                    n,
                );
                let s = config.spatial_after(config.stl_size, &config.backbone);
                let inputs = match config.stl_head {
                    StlHead::Dense => s * s * config.feature_dim(),
                    StlHead::Pooled => config.feature_dim(),
                };
                let cls_fc = b.dense("cls.fc", ParamGroup::Classifier, inputs, config.classes);
                let loc_conv = b.conv(
                    "locmap",
                    ParamGroup::LocBranch,
                    shared_ch,
                    ConvSpec::new(config.classes, 1, 1),
                );
                Net::Stl {
                    shared,
                    cls_convs,
                    cls_fc,
                    loc_conv,
                }
            }
            Scheme::GlobalPool => {
                let convs = b.trunk(
                    "cls",
                    ParamGroup::Classifier,
                    config.in_channels,
                    &config.backbone,
                    0,
                );
                let transition = b.conv(
                    "transition",
                    ParamGroup::Classifier,
                    config.feature_dim(),
                    ConvSpec::new(config.transition_dim, 1, 1),
                );
                let fc = b.dense(
                    "predict",
                    ParamGroup::Classifier,
                    config.transition_dim,
                    config.classes,
                );
                Net::GlobalPool {
                    convs,
                    transition,
                    fc,
                }
            }
        };
        Ok(Model { config, store, net })
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    fn check_input(&self, tape: &Tape, x: Var, size: usize) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || shape[2] != size
            || shape[3] != size
        {
            return Err(Error::dim(
                "model input",
                format!(
                    "{} expects N×{}×{size}×{size}, got {shape:?}",
                    self.config.scheme, self.config.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Records the scheme's main graph on `input` (sized per
    /// [`ModelConfig::input_size`]). For the supervised-localizer scheme this
    /// is the box regressor; see [`Model::record_roi_classifier`].
    pub fn record(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Outputs> {
        self.check_input(tape, input, self.config.input_size())?;
        let none = |logits| Outputs {
            logits,
            loc_logits: None,
            score_maps: None,
            warp: None,
        };
        match &self.net {
            Net::Plain(cls) => Ok(none(cls.record(tape, vars, input)?)),
            Net::SupLoc { loc, .. } => {
                let boxes = loc.record(tape, vars, input)?;
                Ok(Outputs {
                    warp: Some(boxes),
                    ..none(boxes)
                })
            }
            Net::Stn { loc, cls } => {
                let raw = loc.record(tape, vars, input)?;
                let theta = if loc.dof == 3 {
                    tape.similarity_to_affine(raw)?
                } else {
                    raw
                };
                let grid = tape.affine_grid(theta, self.config.roi_size, self.config.roi_size)?;
                let crop = tape.grid_sample(input, grid)?;
                let logits = cls.record(tape, vars, crop)?;
                Ok(Outputs {
                    warp: Some(raw),
                    ..none(logits)
                })
            }
            Net::Stl {
                shared,
                cls_convs,
                cls_fc,
                loc_conv,
            } => {
                let s = apply_trunk(tape, vars, input, shared)?;
                let f = apply_trunk(tape, vars, s, cls_convs)?;
                let features = match self.config.stl_head {
                    StlHead::Dense => tape.flatten(f)?,
                    StlHead::Pooled => tape.global_pool(f, PoolingConfig::avg())?,
                };
                let features = tape.dropout_hook(features);
                let logits = apply_dense(tape, vars, features, cls_fc)?;
                let maps = apply_conv(tape, vars, s, loc_conv)?;
                let pooled = tape.global_pool(maps, PoolingConfig::avg())?;
                Ok(Outputs {
                    loc_logits: Some(pooled),
                    score_maps: Some(maps),
                    ..none(logits)
                })
            }
            Net::GlobalPool {
                convs,
                transition,
                fc,
            } => {
                let f = apply_trunk(tape, vars, input, convs)?;
                let t = apply_conv(tape, vars, f, transition)?;
                let pooled = tape.global_pool(t, self.config.pooling)?;
                let logits = apply_dense(tape, vars, pooled, fc)?;
                let maps = self.project_maps(tape, vars, t, fc)?;
                Ok(Outputs {
                    score_maps: Some(maps),
                    ..none(logits)
                })
            }
        }
    }

    /// Applies the prediction layer at every cell of the transition maps.
    fn project_maps(&self, tape: &mut Tape, vars: &[Var], t: Var, fc: &Dense) -> Result<Var> {
        let shape = tape.shape(t).to_vec();
        let (n, d, s) = (shape[0], shape[1], shape[2]);
        let c = self.config.classes;
        let w = tape.value(vars[fc.weight]).to_vec();
        let kernel: Vec<f64> = (0..c)
            .flat_map(|ci| (0..d).map(move |di| (ci, di)))
            .map(|(ci, di)| w[di * c + ci])
            .collect();
        let k = tape.constant_from(vec![c, d, 1, 1], kernel)?;
        let maps = tape.conv2d(t, k, 1, 0)?;
        let b = tape.constant_from(vec![c], tape.value(vars[fc.bias]).to_vec())?;
        let out = tape.channel_bias(maps, b)?;
        debug_assert_eq!(tape.shape(out), &[n, c, s, s]);
        Ok(out)
    }

    /// Classifier half of the supervised-localizer scheme, on `roi_size` crops.
    pub fn record_roi_classifier(&self, tape: &mut Tape, vars: &[Var], crops: Var) -> Result<Var> {
        match &self.net {
            Net::SupLoc { cls, .. } => {
                self.check_input(tape, crops, self.config.roi_size)?;
                cls.record(tape, vars, crops)
            }
            _ => Err(Error::Usage(format!(
                "{} has no separate ROI classifier",
                self.config.scheme
            ))),
        }
    }

    fn run<T>(
        &self,
        input: &Tensor,
        f: impl FnOnce(&mut Tape, &[Var], Var) -> Result<T>,
    ) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let x = tape.constant(input);
        f(&mut tape, &vars, x)
    }

    /// Class logits of the main path for an input batch.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            Ok(tape.to_tensor(out.logits))
        })
    }

    fn probs_of(&self, tape: &mut Tape, logits: Var) -> Result<Tensor> {
        let p = tape.softmax(logits)?;
        Ok(tape.to_tensor(p))
    }

    fn expect(&self, schemes: &[Scheme]) -> Result<()> {
        if schemes.contains(&self.config.scheme) {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "operation not available for scheme {}",
                self.config.scheme
            )))
        }
    }

    /// Class probabilities of the full-image classifier.
    pub fn forward_lbm(&self, images: &Tensor) -> Result<Tensor> {
        self.expect(&[Scheme::Lbm])?;
        self.run(images, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            self.probs_of(tape, out.logits)
        })
    }

    /// Class probabilities of the ROI classifier on `roi_size` crops.
    pub fn forward_ubm(&self, rois: &Tensor) -> Result<Tensor> {
        self.expect(&[Scheme::Ubm, Scheme::SupLoc])?;
        self.run(rois, |tape, vars, x| {
            let logits = match self.config.scheme {
                Scheme::SupLoc => self.record_roi_classifier(tape, vars, x)?,
                _ => self.record(tape, vars, x)?.logits,
            };
            self.probs_of(tape, logits)
        })
    }

    /// Regressed boxes of the supervised localizer.
    pub fn forward_suploc(&self, images: &Tensor) -> Result<Vec<BBoxParams>> {
        self.expect(&[Scheme::SupLoc])?;
        self.run(images, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            Ok(tape
                .value(out.logits)
                .chunks_exact(3)
                .map(|b| BBoxParams::new(b[0], b[1], b[2]))
                .collect())
        })
    }

    /// Class probabilities and raw warp of the attention schemes.
    pub fn forward_ustn(&self, images: &Tensor) -> Result<(Tensor, Vec<WarpParams>)> {
        self.expect(&[Scheme::AStn, Scheme::AffStn])?;
        self.run(images, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            let raw = out.warp.expect("attention output");
            let warps = tape
                .value(raw)
                .chunks_exact(tape.shape(raw)[1])
                .map(raw_warp)
                .collect();
            Ok((self.probs_of(tape, out.logits)?, warps))
        })
    }

    /// Class probabilities, localization-branch probabilities and score maps.
    pub fn forward_stl(&self, images: &Tensor) -> Result<StlForward> {
        self.expect(&[Scheme::Stl])?;
        self.run(images, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            let probs = self.probs_of(tape, out.logits)?;
            let loc_scores = self.probs_of(tape, out.loc_logits.expect("loc branch"))?;
            let score_maps = self.split_maps(tape, out.score_maps.expect("score maps"));
            Ok(StlForward {
                probs,
                loc_scores,
                score_maps,
            })
        })
    }

    /// Class probabilities and score maps of the global-pooling head.
    pub fn forward_globalpool(&self, images: &Tensor) -> Result<(Tensor, Vec<ScoreMaps>)> {
        self.expect(&[Scheme::GlobalPool])?;
        self.run(images, |tape, vars, x| {
            let out = self.record(tape, vars, x)?;
            let maps = self.split_maps(tape, out.score_maps.expect("score maps"));
            Ok((self.probs_of(tape, out.logits)?, maps))
        })
    }

    /// Pooled `N×D` transition features of the global-pooling head.
    pub fn pooled_features(&self, images: &Tensor) -> Result<Tensor> {
        match &self.net {
            Net::GlobalPool {
                convs, transition, ..
            } => self.run(images, |tape, vars, x| {
                self.check_input(tape, x, self.config.image_size)?;
                let f = apply_trunk(tape, vars, x, convs)?;
                let t = apply_conv(tape, vars, f, transition)?;
                let p = tape.global_pool(t, self.config.pooling)?;
                Ok(tape.to_tensor(p))
            }),
            _ => Err(Error::Usage(
                "pooled features need the globalpool scheme".into(),
            )),
        }
    }

    pub(crate) fn split_maps(&self, tape: &Tape, maps: Var) -> Vec<ScoreMaps> {
        let shape = tape.shape(maps);
        let (c, s) = (shape[1], shape[2]);
        tape.value(maps)
            .chunks_exact(c * s * s)
            .map(|v| ScoreMaps::from_nchw(v, c, s))
            .collect()
    }

    /// Stacks the scheme's main-network inputs for `samples`: full images,
    /// ground-truth crops (UBM) or enlarged images (STL), each standardized.
    pub fn prepare_input(&self, samples: &[&LabeledSample]) -> Result<Tensor> {
        let items = samples
            .iter()
            .map(|s| self.prepare_sample(s))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items.iter().collect::<Vec<_>>())
    }

    /// Main-network input of one sample, `C×n×n`.
    pub fn prepare_sample(&self, sample: &LabeledSample) -> Result<Tensor> {
        match self.config.scheme {
            Scheme::Ubm => self.roi_crop(sample, &sample.roi),
            Scheme::Stl => {
                let n = self.config.stl_size;
                Ok(standardize(stn::resize(&sample.image, n, n)?))
            }
            _ => {
                let shape = sample.image.shape();
                if shape[1] != self.config.image_size || shape[2] != self.config.image_size {
                    return Err(Error::dim(
                        "prepare_input",
                        format!(
                            "image {:?} vs configured size {}",
                            shape, self.config.image_size
                        ),
                    ));
                }
                Ok(standardize(sample.image.clone()))
            }
        }
    }

    /// Standardized `roi_size` crop of one sample at `bbox`.
    pub fn roi_crop(&self, sample: &LabeledSample, bbox: &BBoxParams) -> Result<Tensor> {
        let n = self.config.roi_size;
        let b = BBoxParams {
            s: bbox.s.max(MIN_CROP_SCALE),
            ..*bbox
        };
        Ok(standardize(stn::crop(&sample.image, &b, n, n)?))
    }

    /// Stacked [`Model::roi_crop`] of each sample at the given boxes.
    pub fn roi_crops(&self, samples: &[&LabeledSample], boxes: &[BBoxParams]) -> Result<Tensor> {
        let crops = samples
            .iter()
            .zip(boxes)
            .map(|(s, b)| self.roi_crop(s, b))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&crops.iter().collect::<Vec<_>>())
    }

    pub fn save_checkpoint(
        &self,
        dir: impl AsRef<Path>,
        epoch: usize,
        val_loss: f64,
    ) -> Result<()> {
        let dir = dir.as_ref();
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut records = Vec::with_capacity(self.store.len());
        for p in &self.store.params {
            let file = format!("params/{}.wltn", p.name);
            write_tensor_file(&p.tensor, dir.join(&file))?;
            records.push(ParamRecord {
                name: p.name.clone(),
                group: p.group,
                shape: p.tensor.shape().to_vec(),
                file,
            });
        }
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            scheme: self.config.scheme,
            config: self.config.clone(),
            epoch,
            val_loss,
            params: records,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |detail: String| Error::Format {
            path: path.clone(),
            detail,
        };
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        let mut model = Model::new(meta.config.clone()).map_err(|e| bad(e.to_string()))?;
        if model.store.len() != meta.params.len() {
            return Err(bad(format!(
                "{} parameters recorded, scheme has {}",
                meta.params.len(),
                model.store.len()
            )));
        }
        for (p, rec) in model.store.params.iter_mut().zip(&meta.params) {
            let t = read_tensor_file(dir.join(&rec.file))?;
            if rec.name != p.name || t.shape() != p.tensor.shape() {
                return Err(Error::Format {
                    path: dir.join(&rec.file),
                    detail: format!("expected {} with shape {:?}", p.name, p.tensor.shape()),
                });
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok((model, meta))
    }
}

/// Shifts and scales an image to zero mean and unit variance; flat images
/// are only centred.
pub fn standardize(mut image: Tensor) -> Tensor {
    let d = image.data_mut();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    for v in d.iter_mut() {
        *v = (*v - mean) * inv;
    }
    image
}

/// Smallest half-extent used when cropping at a predicted box.
pub const MIN_CROP_SCALE: f64 = 1e-3;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub scheme: Scheme,
    pub config: ModelConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Vec<ParamRecord>,
}

/// Warp from a raw localizer row without validation; a 3-vector is read as
/// `(t_r, t_c, s)`, a 6-vector as the row-major affine matrix.
pub fn raw_warp(row: &[f64]) -> WarpParams {
    match row.len() {
        3 => WarpParams::Similarity {
            t_r: row[0],
            t_c: row[1],
            s: row[2],
        },
        _ => {
            let mut m = [0.0; 6];
            m.copy_from_slice(&row[..6]);
            WarpParams::Affine { m }
        }
    }
}

/// Box for a raw warp. A non-positive similarity scale is read through its
/// matrix (giving `|s|`); degenerate warps return `None`.
pub fn warp_box(warp: &WarpParams) -> Option<BBoxParams> {
    let w = match *warp {
        WarpParams::Similarity { s, .. } if s <= 0.0 => WarpParams::Affine { m: warp.matrix() },
        other => other,
    };
    stn::params_to_bbox(&w).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, size, size], |_| rng.gen_range(0.0..1.0))
    }

    fn model(scheme: Scheme, classes: usize) -> Model {
        Model::new(ModelConfig::new(scheme, classes)).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_uniform() {
        let mut m = model(Scheme::Lbm, 3);
        for name in ["cls.fc.weight", "cls.fc.bias"] {
            m.store.get_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let p = m.forward_lbm(&random_images(2, 64, 1)).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn forwards_are_deterministic_and_normalized() {
        let m = model(Scheme::Lbm, 3);
        let x = random_images(3, 64, 2);
        let a = m.forward_lbm(&x).unwrap();
        assert_eq!(a, m.forward_lbm(&x).unwrap());
        let u = model(Scheme::Ubm, 3);
        let b = u.forward_ubm(&random_images(3, 32, 3)).unwrap();
        for p in [a, b] {
            for row in p.data().chunks_exact(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let m = model(Scheme::Lbm, 2);
        assert!(matches!(
            m.forward_lbm(&random_images(1, 32, 1)),
            Err(Error::Dimension { .. })
        ));
        let s = model(Scheme::Stl, 2);
        assert!(matches!(
            s.forward_stl(&random_images(1, 64, 1)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn suploc_starts_at_full_box() {
        let m = model(Scheme::SupLoc, 3);
        let boxes = m.forward_suploc(&random_images(2, 64, 4)).unwrap();
        assert!(boxes.iter().all(|b| *b == BBoxParams::FULL));
    }

    #[test]
    fn stn_dof() {
        let x = random_images(2, 64, 5);
        let (_, w) = model(Scheme::AStn, 3).forward_ustn(&x).unwrap();
        assert!(w.iter().all(|w| w.dof() == 3));
        let (_, w) = model(Scheme::AffStn, 3).forward_ustn(&x).unwrap();
        assert!(w.iter().all(|w| w.dof() == 6));
    }

    #[test]
    fn stn_identity_matches_lbm() {
        let mut cfg = ModelConfig::new(Scheme::AStn, 3);
        cfg.roi_size = cfg.image_size;
        let stn = Model::new(cfg).unwrap();
        let mut lbm = model(Scheme::Lbm, 3);
        let copied = lbm.store.copy_matching(&stn.store);
        assert_eq!(copied, lbm.store.len());
        let x = random_images(4, 64, 6);
        let a = stn.logits(&x).unwrap();
        let b = lbm.logits(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_counts() {
        let l = model(Scheme::Lbm, 3);
        let u = model(Scheme::Ubm, 3);
        assert_eq!(l.store.count(None), u.store.count(None));
        let s = model(Scheme::AStn, 3);
        assert_eq!(
            s.store.count(None),
            s.store.count(Some(ParamGroup::Localizer))
                + s.store.count(Some(ParamGroup::Classifier))
        );
        assert_eq!(
            s.store.count(Some(ParamGroup::Classifier)),
            l.store.count(None)
        );
    }

    #[test]
    fn score_map_channels() {
        for c in [2, 3, 6] {
            let s = model(Scheme::Stl, c)
                .forward_stl(&random_images(1, 96, 7))
                .unwrap();
            assert_eq!(s.score_maps[0].classes, c);
            let (_, maps) = model(Scheme::GlobalPool, c)
                .forward_globalpool(&random_images(1, 64, 7))
                .unwrap();
            assert_eq!(maps[0].classes, c);
            assert_eq!(maps[0].size, 8);
        }
    }

    #[test]
    fn avg_pooled_score_is_map_mean() {
        let m = model(Scheme::GlobalPool, 3);
        let x = random_images(2, 64, 8);
        let logits = m.logits(&x).unwrap();
        let (_, maps) = m.forward_globalpool(&x).unwrap();
        for (i, sm) in maps.iter().enumerate() {
            for c in 0..3 {
                assert!((logits.at(&[i, c]) - sm.channel_mean(c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(Scheme::AffStn, 2);
        m.save_checkpoint(dir.path(), 3, 0.5).unwrap();
        let (back, meta) = Model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(back.store, m.store);
        fs::write(dir.path().join(CHECKPOINT_FILE), "{").unwrap();
        assert!(matches!(
            Model::load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("a-STN".parse::<Scheme>().unwrap(), Scheme::AStn);
        assert!(matches!("resnet".parse::<Scheme>(), Err(Error::Usage(_))));
    }
}
