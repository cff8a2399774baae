//! Residual generator and the two convolutional discriminators.
//!
//! Parameters live in a [`ParamSet`] as `f32` tensors. A forward pass binds
//! them onto a [`Tape`] of any [`Real`] type, so the same network code runs
//! for training (f32) and for gradient checks (f64).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Running mean and (biased) variance of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-layer batch statistics collected by a forward pass.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics (inference).
    Running,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Param>,
    pub norms: Vec<RunningStats>,
}

impl ParamSet {
    fn add(&mut self, name: String, shape: [usize; 5]) {
        self.params.push(Param {
            name,
            value: Tensor::zeros(shape),
        });
    }

    fn add_norm(&mut self, name: String, channels: usize) {
        self.norms.push(RunningStats {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter count per layer, in construction order. Weights and biases
    /// of one layer are merged under the layer name.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let layer = p
                .name
                .rsplit_once('.')
                .map_or(p.name.as_str(), |(l, _)| l)
                .to_string();
            match out.last_mut() {
                Some((name, n)) if *name == layer => *n += p.value.numel(),
                _ => out.push((layer, p.value.numel())),
            }
        }
        out
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init_gaussian<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for p in &mut self.params {
            let is_bias = p.name.ends_with(".b");
            for v in p.value.data_mut() {
                *v = if is_bias {
                    0.0
                } else {
                    normal.sample(rng) as f32
                };
            }
        }
    }

    pub fn zero(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Places every parameter on the tape.
    pub fn bind<'t, T: Real>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.cast(), trainable))
            .collect()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn absorb(&mut self, stats: &BatchStats) {
        assert_eq!(
            stats.len(),
            self.norms.len(),
            "batch statistics do not match the network"
        );
        for (run, (mean, var)) in self.norms.iter_mut().zip(stats) {
            for c in 0..run.mean.len() {
                run.mean[c] = BN_MOMENTUM * run.mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                run.var[c] = BN_MOMENTUM * run.var[c] + (1.0 - BN_MOMENTUM) * var[c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Checks that `other` has identical names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        let same = self.params.len() == other.params.len()
            && self.norms.len() == other.norms.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && self
                .norms
                .iter()
                .zip(&other.norms)
                .all(|(a, b)| a.name == b.name && a.mean.len() == b.mean.len());
        if same {
            Ok(())
        } else {
            Err(Error::Shape(
                "parameter layout does not match the network configuration".into(),
            ))
        }
    }
}

fn kernel_shape(dim: usize, k: usize) -> [usize; 3] {
    if dim == 3 {
        [k, k, k]
    } else {
        [1, k, k]
    }
}

fn spatial_factors(dim: usize, f: usize) -> [usize; 3] {
    if dim == 3 {
        [f, f, f]
    } else {
        [1, f, f]
    }
}

/// Normalization step shared by both network types.
struct Norm<'a> {
    mode: BnMode,
    running: &'a [RunningStats],
    next: usize,
    collected: BatchStats,
}

impl<'a> Norm<'a> {
    fn new(mode: BnMode, running: &'a [RunningStats]) -> Self {
        Self {
            mode,
            running,
            next: 0,
            collected: Vec::new(),
        }
    }

    fn apply<'t, T: Real>(&mut self, x: Var<'t, T>) -> Var<'t, T> {
        let run = &self.running[self.next];
        self.next += 1;
        match self.mode {
            BnMode::Batch => {
                let (y, mean, var) = x.batch_norm(BN_EPS);
                self.collected.push((mean, var));
                y
            }
            BnMode::Running => {
                let scale: Vec<f64> = run.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = run.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
                x.channel_affine(&scale, &shift)
            }
        }
    }
}

fn conv_same<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    stride: usize,
    dim: usize,
) -> Var<'t, T> {
    let ws = w.shape();
    let geo = ConvGeometry::same(
        x.value().spatial(),
        [ws[2], ws[3], ws[4]],
        spatial_factors(dim, stride),
    );
    x.conv(w, Some(b), geo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub dim: usize,
    /// Density, velocity components and optionally vorticity components.
    pub input_channels: usize,
    pub factor: usize,
    pub kernel: usize,
    /// `(channels after C_A, channels after C_B)` per residual block.
    pub blocks: Vec<(usize, usize)>,
    /// Normalization in all blocks except the last.
    pub batch_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            input_channels: 3,
            factor: 4,
            kernel: 5,
            blocks: vec![(8, 32), (128, 128), (32, 8), (2, 1)],
            batch_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!("generator dimension {}", self.dim)));
        }
        if self.blocks.is_empty() || self.blocks.last().map(|b| b.1) != Some(1) {
            return Err(Error::Config(
                "the last generator block must output one channel".into(),
            ));
        }
        if self.input_channels == 0 || self.factor == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(
                "generator needs inputs, a positive factor and an odd kernel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    /// Builds a generator with zero parameters.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let [kd, kh, kw] = kernel_shape(config.dim, config.kernel);
        let mut c = config.input_channels;
        let last = config.blocks.len() - 1;
        for (i, &(a, b)) in config.blocks.iter().enumerate() {
            params.add(format!("rb{i}.a.w"), [a, c, kd, kh, kw]);
            params.add(format!("rb{i}.a.b"), [a, 1, 1, 1, 1]);
            params.add(format!("rb{i}.b.w"), [b, a, kd, kh, kw]);
            params.add(format!("rb{i}.b.b"), [b, 1, 1, 1, 1]);
            params.add(format!("rb{i}.s.w"), [b, c, 1, 1, 1]);
            params.add(format!("rb{i}.s.b"), [b, 1, 1, 1, 1]);
            if config.batch_norm && i != last {
                params.add_norm(format!("rb{i}.a.bn"), a);
                params.add_norm(format!("rb{i}.b.bn"), b);
            }
            c = b;
        }
        Ok(Self { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        let mut g = Self::new(config)?;
        g.params.init_gaussian(rng, INIT_STD);
        Ok(g)
    }

    /// Maps `[n, input_channels, ...]` low-resolution inputs to
    /// `[n, 1, ...]` densities `factor` times larger per axis.
    pub fn forward<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        mode: BnMode,
    ) -> Result<(Var<'t, T>, BatchStats)> {
        let cfg = &self.config;
        if x.shape()[1] != cfg.input_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {}",
                cfg.input_channels,
                x.shape()[1]
            )));
        }
        if cfg.dim == 2 && x.shape()[2] != 1 {
            return Err(Error::Shape("2D generator given 3D input".into()));
        }
        let mut norm = Norm::new(mode, &self.params.norms);
        let mut h = x.upsample_nearest(spatial_factors(cfg.dim, cfg.factor));
        let last = cfg.blocks.len() - 1;
        for i in 0..cfg.blocks.len() {
            let q = &p[6 * i..6 * i + 6];
            let bn = cfg.batch_norm && i != last;
            let mut a = conv_same(h, q[0], q[1], 1, cfg.dim);
            if bn {
                a = norm.apply(a);
            }
            let mut b = conv_same(a.relu(), q[2], q[3], 1, cfg.dim);
            if bn {
                b = norm.apply(b);
            }
            let s = conv_same(h, q[4], q[5], 1, cfg.dim);
            h = b.add(s).relu();
        }
        Ok((h, norm.collected))
    }

    /// Generator output on plain `f32` data in inference mode.
    pub fn infer(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (y, _) = self.forward(&p, tape.constant(x), BnMode::Running)?;
        Ok((*y.value()).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub dim: usize,
    /// High-resolution tile edge length the network is built for.
    pub tile: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
    /// Normalization on every conv layer but the first.
    pub batch_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            tile: 64,
            kernel: 4,
            channels: vec![32, 64, 128, 256],
            strides: vec![2, 2, 2, 1],
            leaky_slope: 0.2,
            batch_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!(
                "discriminator dimension {}",
                self.dim
            )));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "discriminator channels and strides differ in length".into(),
            ));
        }
        if self.strides.iter().any(|&s| s == 0 || self.kernel % s != 0) {
            return Err(Error::Config(format!(
                "kernel {} must be divisible by every stride {:?}",
                self.kernel, self.strides
            )));
        }
        Ok(())
    }

    /// Spatial edge length after each conv layer.
    pub fn feature_sizes(&self) -> Vec<usize> {
        let mut n = self.tile;
        self.strides
            .iter()
            .map(|&s| {
                n = n.div_ceil(s);
                n
            })
            .collect()
    }
}

/// Which discriminator a network plays; fixes its input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorRole {
    /// Conditional: upsampled low-res density and high-res density.
    Spatial,
    /// Three consecutive high-res densities.
    Temporal,
}

impl DiscriminatorRole {
    pub fn input_channels(self) -> usize {
        match self {
            DiscriminatorRole::Spatial => 2,
            DiscriminatorRole::Temporal => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub role: DiscriminatorRole,
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

/// Logits `[n, 1, 1, 1, 1]` and the activation after each conv layer.
pub struct DiscriminatorOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    pub features: Vec<Var<'t, T>>,
    pub stats: BatchStats,
}

impl Discriminator {
    pub fn new(role: DiscriminatorRole, config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let [kd, kh, kw] = kernel_shape(config.dim, config.kernel);
        let mut c = role.input_channels();
        for (i, &co) in config.channels.iter().enumerate() {
            params.add(format!("c{i}.w"), [co, c, kd, kh, kw]);
            params.add(format!("c{i}.b"), [co, 1, 1, 1, 1]);
            if config.batch_norm && i > 0 {
                params.add_norm(format!("c{i}.bn"), co);
            }
            c = co;
        }
        let side = *config.feature_sizes().last().expect("at least one layer");
        let features = c * side.pow(config.dim as u32);
        params.add("fc.w".into(), [1, features, 1, 1, 1]);
        params.add("fc.b".into(), [1, 1, 1, 1, 1]);
        Ok(Self {
            role,
            config,
            params,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        role: DiscriminatorRole,
        config: DiscriminatorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut d = Self::new(role, config)?;
        d.params.init_gaussian(rng, INIT_STD);
        Ok(d)
    }

    /// Runs the conv stack on an already assembled `[n, c, ...]` input.
    pub fn forward<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        input: Var<'t, T>,
        mode: BnMode,
    ) -> Result<DiscriminatorOutput<'t, T>> {
        let cfg = &self.config;
        let shape = input.shape();
        let want = if cfg.dim == 3 {
            [cfg.tile; 3]
        } else {
            [1, cfg.tile, cfg.tile]
        };
        if shape[1] != self.role.input_channels() || [shape[2], shape[3], shape[4]] != want {
            return Err(Error::Shape(format!(
                "discriminator expects [n, {}, {want:?}], got {shape:?}",
                self.role.input_channels()
            )));
        }
        let mut norm = Norm::new(mode, &self.params.norms);
        let mut h = input;
        let mut features = Vec::with_capacity(cfg.channels.len());
        for (i, &stride) in cfg.strides.iter().enumerate() {
            h = conv_same(h, p[2 * i], p[2 * i + 1], stride, cfg.dim);
            if cfg.batch_norm && i > 0 {
                h = norm.apply(h);
            }
            h = h.leaky_relu(cfg.leaky_slope);
            features.push(h);
        }
        let k = 2 * cfg.channels.len();
        let logits = h.linear(p[k], p[k + 1]);
        Ok(DiscriminatorOutput {
            logits,
            features,
            stats: norm.collected,
        })
    }

    /// Spatial discriminator input: nearest-upsampled `x_lo` next to `y`.
    pub fn spatial_input<'t, T: Real>(
        &self,
        x_lo: Var<'t, T>,
        y: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (xs, ys) = (x_lo.shape(), y.shape());
        if xs[1] != 1 || ys[1] != 1 || xs[0] != ys[0] {
            return Err(Error::Shape(format!(
                "spatial discriminator inputs {xs:?} and {ys:?}"
            )));
        }
        let f = ys[4] / xs[4].max(1);
        let factors = spatial_factors(self.config.dim, f);
        if (0..3).any(|a| xs[2 + a] * factors[a] != ys[2 + a]) {
            return Err(Error::Shape(format!(
                "high-res {ys:?} is not a multiple of low-res {xs:?}"
            )));
        }
        Ok(Var::concat_channels(&[x_lo.upsample_nearest(factors), y]))
    }

    /// Temporal discriminator input: three frames stacked as channels.
    pub fn temporal_input<'t, T: Real>(frames: [Var<'t, T>; 3]) -> Result<Var<'t, T>> {
        if frames
            .iter()
            .any(|f| f.shape() != frames[0].shape() || f.shape()[1] != 1)
        {
            return Err(Error::Shape(
                "temporal discriminator frames differ in shape".into(),
            ));
        }
        Ok(Var::concat_channels(&frames))
    }
}
