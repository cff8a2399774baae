//! The adversarial training loop: alternating spatial-discriminator,
//! temporal-discriminator and generator updates with Adam.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentRanges;
use crate::autograd::{sigmoid_f64, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, InputFields, PairBatch, TileSampler, TripletBatch};
use crate::error::{Error, Result};
use crate::losses::{
    d_loss_var, feature_var, g_adv_var, l1_var, l2_temporal_var, l2_var, GLossTerms, GLossValues,
    LossWeights, TemporalVariant, TripletAdvection,
};
use crate::nets::{
    BatchStats, BnMode, Discriminator, DiscriminatorConfig, DiscriminatorRole, Generator,
    GeneratorConfig, ParamSet,
};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer iterations; must be even.
    pub iterations: usize,
    pub batch: usize,
    /// Spatial discriminator updates per iteration.
    pub k_ds: usize,
    /// Temporal discriminator updates per iteration.
    pub k_dt: usize,
    /// Generator updates per iteration.
    pub k_g: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// The learning rate is divided by this for the second half.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Low-resolution tile edge of training samples.
    pub tile: usize,
    pub inputs: InputFields,
    pub augment: AugmentRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40000,
            batch: 16,
            k_ds: 2,
            k_dt: 2,
            k_g: 2,
            lr: 2e-4,
            lr_decay: 20.0,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 5000,
            tile: 16,
            inputs: InputFields::RhoV,
            augment: AugmentRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    /// Reduced widths, 8-cell tiles and 2000 iterations: trains on one CPU
    /// core in minutes.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig {
                iterations: 2000,
                batch: 8,
                checkpoint_every: 0,
                tile: 8,
                ..TrainConfig::default()
            },
            losses: LossWeights::default(),
            model: ModelConfig {
                generator: GeneratorConfig {
                    kernel: 3,
                    blocks: vec![(8, 16), (16, 16), (8, 4), (4, 1)],
                    ..GeneratorConfig::default()
                },
                discriminator: DiscriminatorConfig {
                    tile: 32,
                    channels: vec![8, 16, 32, 64],
                    ..DiscriminatorConfig::default()
                },
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let g = &self.model.generator;
        let d = &self.model.discriminator;
        g.validate()?;
        d.validate()?;
        if t.iterations % 2 != 0 {
            return Err(Error::Config(format!(
                "iterations must be even, got {}",
                t.iterations
            )));
        }
        if t.k_ds == 0 || t.k_dt == 0 || t.k_g == 0 || t.batch == 0 || t.tile == 0 {
            return Err(Error::Config(
                "k_ds, k_dt, k_g, batch and tile must be at least 1".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr_decay > 0.0) {
            return Err(Error::Config(
                "learning rate and decay must be positive".into(),
            ));
        }
        if g.dim != d.dim {
            return Err(Error::Config(
                "generator and discriminator dimensions differ".into(),
            ));
        }
        let want = t.inputs.channels(g.dim);
        if g.input_channels != want {
            return Err(Error::Config(format!(
                "inputs {:?} need {want} generator input channels, config has {}",
                t.inputs, g.input_channels
            )));
        }
        if d.tile != t.tile * g.factor {
            return Err(Error::Config(format!(
                "discriminator tile {} must equal tile {} x factor {}",
                d.tile, t.tile, g.factor
            )));
        }
        if self.losses.feature.len() != d.channels.len() {
            return Err(Error::Config(format!(
                "{} feature weights for {} discriminator layers",
                self.losses.feature.len(),
                d.channels.len()
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `lr` for the first half, `lr / lr_decay`
/// afterwards.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> Result<f64> {
    if iteration >= config.iterations {
        return Err(Error::Invalid(format!(
            "iteration {iteration} outside 0..{}",
            config.iterations
        )));
    }
    Ok(if iteration < config.iterations / 2 {
        config.lr
    } else {
        config.lr / config.lr_decay
    })
}

/// The three networks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub generator: Generator,
    pub spatial: Discriminator,
    pub temporal: Discriminator,
}

impl Models {
    /// Zero-parameter networks.
    pub fn zeros(model: &ModelConfig) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(model.generator.clone())?,
            spatial: Discriminator::new(DiscriminatorRole::Spatial, model.discriminator.clone())?,
            temporal: Discriminator::new(DiscriminatorRole::Temporal, model.discriminator.clone())?,
        })
    }

    /// Gaussian-initialized networks drawn from `seed`.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: Generator::init(
                model.generator.clone(),
                &mut substream(seed, &[u64::MAX, 0]),
            )?,
            spatial: Discriminator::init(
                DiscriminatorRole::Spatial,
                model.discriminator.clone(),
                &mut substream(seed, &[u64::MAX, 1]),
            )?,
            temporal: Discriminator::init(
                DiscriminatorRole::Temporal,
                model.discriminator.clone(),
                &mut substream(seed, &[u64::MAX, 2]),
            )?,
        })
    }

    pub fn param_sets(&self) -> [&ParamSet; 3] {
        [
            &self.generator.params,
            &self.spatial.params,
            &self.temporal.params,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.param_sets().iter().all(|p| p.is_finite())
    }
}

/// First and second moment estimates of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor<f32>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.adam_eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for ((p, g), (m, v)) in params
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// One metrics row per outer iteration. Discriminator values come from the
/// last update of the iteration; probabilities are batch means after the
/// sigmoid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub d_s: f64,
    pub d_t: f64,
    pub g_adv_s: f64,
    pub g_adv_t: f64,
    pub g_feature: f64,
    pub g_l1: f64,
    pub g_l2: f64,
    pub g_l2t: f64,
    pub g_total: f64,
    pub ds_real: f64,
    pub ds_fake: f64,
    pub dt_real: f64,
    pub dt_fake: f64,
}

impl MetricsRow {
    fn losses(&self) -> [f64; 9] {
        [
            self.d_s,
            self.d_t,
            self.g_adv_s,
            self.g_adv_t,
            self.g_feature,
            self.g_l1,
            self.g_l2,
            self.g_l2t,
            self.g_total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.losses().iter().all(|v| v.is_finite())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.tgck";
pub const CONFIG_COPY: &str = "config.toml";

fn mean_prob(logits: &Var<'_, f32>) -> f64 {
    let v = logits.value();
    v.data().iter().map(|&z| sigmoid_f64(z as f64)).sum::<f64>() / v.numel() as f64
}

fn grads_of(
    tape_grads: &mut crate::autograd::Grads<f32>,
    vars: &[Var<'_, f32>],
) -> Vec<Tensor<f32>> {
    vars.iter()
        .map(|&v| {
            tape_grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(v.shape()))
        })
        .collect()
}

/// Discriminator outputs for the real and the generated half of a batch.
struct Halves<'t> {
    real_logits: Var<'t, f32>,
    fake_logits: Var<'t, f32>,
    real_features: Vec<Var<'t, f32>>,
    fake_features: Vec<Var<'t, f32>>,
    stats: BatchStats,
}

/// Runs `d` once on `real` followed by `fake`, so both halves share one set
/// of normalization statistics.
fn joint<'t>(
    d: &Discriminator,
    p: &[Var<'t, f32>],
    real: Var<'t, f32>,
    fake: Var<'t, f32>,
    mode: BnMode,
) -> Result<Halves<'t>> {
    let n = real.shape()[0];
    let out = d.forward(p, Var::concat_batch(&[real, fake]), mode)?;
    Ok(Halves {
        real_logits: out.logits.slice_batch(0, n),
        fake_logits: out.logits.slice_batch(n, n),
        real_features: out.features.iter().map(|f| f.slice_batch(0, n)).collect(),
        fake_features: out.features.iter().map(|f| f.slice_batch(n, n)).collect(),
        stats: out.stats,
    })
}

/// Training state: networks, optimizers and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub models: Models,
    pub optimizers: [AdamState; 3],
    pub iteration: usize,
    /// Number of triplet alignments performed so far.
    pub alignments: usize,
    sampler: TileSampler,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::init(&config.model, config.train.seed)?;
        Ok(Self::from_parts(config, models, None, 0))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self::from_parts(
            ck.config,
            ck.models,
            Some(ck.optimizers),
            ck.iteration,
        ))
    }

    fn from_parts(
        config: ExperimentConfig,
        models: Models,
        optimizers: Option<[AdamState; 3]>,
        iteration: usize,
    ) -> Self {
        let optimizers = optimizers.unwrap_or_else(|| models.param_sets().map(AdamState::new));
        let g = &config.model.generator;
        let sampler = TileSampler {
            tile: config.train.tile,
            factor: g.factor,
            dim: g.dim,
            ranges: config.train.augment.clone(),
            fields: config.train.inputs,
        };
        Self {
            config,
            models,
            optimizers,
            iteration,
            alignments: 0,
            sampler,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            models: self.models.clone(),
            optimizers: self.optimizers.clone(),
        }
    }

    pub fn sampler(&self) -> &TileSampler {
        &self.sampler
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let g = &self.config.model.generator;
        if data.dim() != g.dim || data.factor() != g.factor {
            return Err(Error::Config(format!(
                "dataset is {}D with factor {}, model is {}D with factor {}",
                data.dim(),
                data.factor(),
                g.dim,
                g.factor
            )));
        }
        if data.frames.is_empty() || data.triplets.is_empty() {
            return Err(Error::Invalid("dataset has no training triplets".into()));
        }
        Ok(())
    }

    fn align<'t>(
        &mut self,
        adv: &TripletAdvection,
        frames: [Var<'t, f32>; 3],
    ) -> [Var<'t, f32>; 3] {
        self.alignments += 1;
        adv.align(frames)
    }

    /// Generator output for every frame of a triplet batch in one pass.
    fn generate_triplet<'t>(
        &self,
        p: &[Var<'t, f32>],
        tape: &'t Tape<f32>,
        x: &[Tensor<f32>; 3],
    ) -> Result<([Var<'t, f32>; 3], BatchStats)> {
        let n = x[0].batch();
        let xs: Vec<_> = x.iter().map(|t| tape.constant(t.clone())).collect();
        let (out, stats) =
            self.models
                .generator
                .forward(p, Var::concat_batch(&xs), BnMode::Batch)?;
        Ok(([0, 1, 2].map(|k| out.slice_batch(k * n, n)), stats))
    }

    /// One spatial discriminator update. Returns (loss, real prob, fake prob).
    fn step_ds(&mut self, batch: &PairBatch, lr: f64) -> Result<(f64, f64, f64)> {
        let tape = Tape::<f32>::new();
        let gp = self.models.generator.params.bind(&tape, false);
        let dp = self.models.spatial.params.bind(&tape, true);
        let xd = tape.constant(batch.x_density.clone());
        let (fake_y, _) =
            self.models
                .generator
                .forward(&gp, tape.constant(batch.x.clone()), BnMode::Batch)?;
        let d = &self.models.spatial;
        let real = tape.constant(batch.y.clone());
        let h = joint(
            d,
            &dp,
            d.spatial_input(xd, real)?,
            d.spatial_input(xd, fake_y)?,
            BnMode::Batch,
        )?;
        let loss = d_loss_var(h.real_logits, h.fake_logits);
        let out = (
            loss.item() as f64,
            mean_prob(&h.real_logits),
            mean_prob(&h.fake_logits),
        );
        let mut grads = tape.backward(loss);
        let g = grads_of(&mut grads, &dp);
        let m = &mut self.models.spatial.params;
        self.optimizers[1].update(m, &g, lr, &self.config.train);
        m.absorb(&h.stats);
        Ok(out)
    }

    /// One temporal discriminator update.
    fn step_dt(&mut self, batch: &TripletBatch, lr: f64) -> Result<(f64, f64, f64)> {
        let tape = Tape::<f32>::new();
        let gp = self.models.generator.params.bind(&tape, false);
        let dp = self.models.temporal.params.bind(&tape, true);
        let (fake, _) = self.generate_triplet(&gp, &tape, &batch.x)?;
        let real = batch.y.clone().map(|t| tape.constant(t));
        let (real, fake) = if self.config.losses.temporal == TemporalVariant::DtAligned {
            let adv = self.advection(batch)?;
            (self.align(&adv, real), self.align(&adv, fake))
        } else {
            (real, fake)
        };
        let h = joint(
            &self.models.temporal,
            &dp,
            Discriminator::temporal_input(real)?,
            Discriminator::temporal_input(fake)?,
            BnMode::Batch,
        )?;
        let loss = d_loss_var(h.real_logits, h.fake_logits);
        let out = (
            loss.item() as f64,
            mean_prob(&h.real_logits),
            mean_prob(&h.fake_logits),
        );
        let mut grads = tape.backward(loss);
        let g = grads_of(&mut grads, &dp);
        let m = &mut self.models.temporal.params;
        self.optimizers[2].update(m, &g, lr, &self.config.train);
        m.absorb(&h.stats);
        Ok(out)
    }

    fn advection(&self, batch: &TripletBatch) -> Result<TripletAdvection> {
        TripletAdvection::build(
            &batch.v_prev.iter().collect::<Vec<_>>(),
            &batch.v_next.iter().collect::<Vec<_>>(),
            self.config.model.generator.factor,
        )
    }

    /// One generator update on the full objective. Discriminators see real
    /// and generated samples in one pass, as during their own updates.
    fn step_g(&mut self, batch: &TripletBatch, lr: f64) -> Result<GLossValues> {
        let tape = Tape::<f32>::new();
        let gp = self.models.generator.params.bind(&tape, true);
        let w = self.config.losses.clone();
        let (gen, stats) = self.generate_triplet(&gp, &tape, &batch.x)?;
        let gen_all = Var::concat_batch(&gen);
        let y_all = tape.constant(Tensor::concat_batch(&batch.y));
        let mut terms = GLossTerms {
            adv_spatial: None,
            adv_temporal: None,
            feature: None,
            l1: Some(l1_var(gen_all, y_all, w.l1)?),
            l2: (w.l2 != 0.0)
                .then(|| l2_var(gen_all, y_all, w.l2))
                .transpose()?,
            l2t: None,
        };
        if w.spatial_gan {
            let dp = self.models.spatial.params.bind(&tape, false);
            let xd = tape.constant(Tensor::concat_batch(&batch.x_density));
            let d = &self.models.spatial;
            let h = joint(
                d,
                &dp,
                d.spatial_input(xd, y_all)?,
                d.spatial_input(xd, gen_all)?,
                BnMode::Batch,
            )?;
            terms.adv_spatial = g_adv_var(&[h.fake_logits]);
            if w.feature.iter().any(|&l| l != 0.0) {
                terms.feature = Some(feature_var(&h.fake_features, &h.real_features, &w.feature)?);
            }
        }
        match w.temporal {
            TemporalVariant::None => {}
            TemporalVariant::L2t => {
                let adv = self.advection(batch)?;
                self.alignments += 1;
                terms.l2t = Some(l2_temporal_var(gen, &adv, w.l2t_mode).scale(w.l2t));
            }
            TemporalVariant::DtAligned | TemporalVariant::DtUnaligned => {
                let real = batch.y.clone().map(|t| tape.constant(t));
                let (real, fake) = if w.temporal == TemporalVariant::DtAligned {
                    let adv = self.advection(batch)?;
                    (self.align(&adv, real), self.align(&adv, gen))
                } else {
                    (real, gen)
                };
                let dp = self.models.temporal.params.bind(&tape, false);
                let h = joint(
                    &self.models.temporal,
                    &dp,
                    Discriminator::temporal_input(real)?,
                    Discriminator::temporal_input(fake)?,
                    BnMode::Batch,
                )?;
                terms.adv_temporal = g_adv_var(&[h.fake_logits]);
            }
        }
        let values = terms.values();
        let total = terms.total().expect("L1 term is always present");
        let mut grads = tape.backward(total);
        let g = grads_of(&mut grads, &gp);
        let m = &mut self.models.generator.params;
        self.optimizers[0].update(m, &g, lr, &self.config.train);
        m.absorb(&stats);
        Ok(values)
    }

    /// Runs one outer iteration: `k_ds` spatial, `k_dt` temporal and `k_g`
    /// generator updates, each on a freshly augmented batch.
    pub fn step(&mut self, data: &Dataset) -> Result<MetricsRow> {
        self.check_data(data)?;
        let it = self.iteration;
        let cfg = self.config.train.clone();
        let lr = lr_schedule(it, &cfg)?;
        let mut row = MetricsRow {
            iteration: it,
            lr,
            ..MetricsRow::default()
        };
        let rng = |phase: u64, k: usize| substream(cfg.seed, &[it as u64, phase, k as u64]);
        if self.config.losses.spatial_gan {
            for k in 0..cfg.k_ds {
                let batch = self.sampler.pairs(data, cfg.batch, &mut rng(0, k))?;
                (row.d_s, row.ds_real, row.ds_fake) = self.step_ds(&batch, lr)?;
            }
        }
        if self.config.losses.uses_dt() {
            for k in 0..cfg.k_dt {
                let batch = self.sampler.triplets(data, cfg.batch, &mut rng(1, k))?;
                (row.d_t, row.dt_real, row.dt_fake) = self.step_dt(&batch, lr)?;
            }
        }
        for k in 0..cfg.k_g {
            let batch = self.sampler.triplets(data, cfg.batch, &mut rng(2, k))?;
            let v = self.step_g(&batch, lr)?;
            row.g_adv_s = v.adv_spatial;
            row.g_adv_t = v.adv_temporal;
            row.g_feature = v.feature;
            row.g_l1 = v.l1;
            row.g_l2 = v.l2;
            row.g_l2t = v.l2t;
            row.g_total = v.total;
        }
        self.iteration += 1;
        Ok(row)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Final checkpoint path when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

/// Trains from scratch on `data` (the training split). With `out_dir`, the
/// config, a metrics CSV and checkpoints are written there. `progress` sees
/// every metrics row.
pub fn train(
    data: &Dataset,
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    if config.train.iterations > 0 {
        trainer.check_data(data)?;
    }
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join(CONFIG_COPY);
            fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            let path = dir.join(METRICS_FILE);
            Some(csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?)
        }
        None => None,
    };
    let mut last_good = String::from("none");
    let mut metrics = Vec::with_capacity(config.train.iterations);
    while trainer.iteration < config.train.iterations {
        let row = trainer.step(data)?;
        if !row.is_finite() || !trainer.models.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: row.iteration,
                last_good,
            });
        }
        if let Some(w) = writer.as_mut() {
            w.serialize(row)
                .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        progress(&row);
        metrics.push(row);
        let every = config.train.checkpoint_every;
        if let (Some(dir), true) = (out_dir, every > 0 && trainer.iteration % every == 0) {
            let path = dir.join(format!("ckpt_{:06}.tgck", trainer.iteration));
            trainer.checkpoint().save(&path)?;
            last_good = path.display().to_string();
        }
    }
    if let Some(mut w) = writer {
        w.flush()
            .map_err(|e| Error::io(out_dir.unwrap_or(Path::new(".")), e))?;
    }
    let checkpoint = trainer.checkpoint();
    let checkpoint_path = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            checkpoint.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        checkpoint_path,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Mean discriminator outputs on held-out data, split by real and fake,
/// plus the losses of the same batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ds_real: f64,
    pub ds_fake: f64,
    pub dt_real: f64,
    pub dt_fake: f64,
    pub d_s: f64,
    pub d_t: f64,
    pub g: GLossValues,
}

impl EvalReport {
    /// Mean spatial discriminator output over real and fake inputs.
    pub fn ds_mean(&self) -> f64 {
        0.5 * (self.ds_real + self.ds_fake)
    }

    pub fn dt_mean(&self) -> f64 {
        0.5 * (self.dt_real + self.dt_fake)
    }
}

/// Evaluates all networks in inference mode on `batches` deterministic
/// triplet batches of the given (test) data. Tiles are translated but not
/// otherwise augmented.
pub fn evaluate(
    models: &Models,
    config: &ExperimentConfig,
    data: &Dataset,
    batches: usize,
    seed: u64,
) -> Result<EvalReport> {
    if data.triplets.is_empty() || batches == 0 {
        return Err(Error::Invalid("no test triplets to evaluate".into()));
    }
    let g = &config.model.generator;
    let sampler = TileSampler {
        tile: config.train.tile,
        factor: g.factor,
        dim: g.dim,
        ranges: AugmentRanges::translation_only(),
        fields: config.train.inputs,
    };
    let w = &config.losses;
    let mut acc = EvalReport::default();
    for b in 0..batches {
        let batch =
            sampler.triplets(data, config.train.batch, &mut substream(seed, &[b as u64]))?;
        let tape = Tape::<f32>::new();
        let gp = models.generator.params.bind(&tape, false);
        let sp = models.spatial.params.bind(&tape, false);
        let tp = models.temporal.params.bind(&tape, false);
        let n = batch.x[0].batch();
        let xs: Vec<_> = batch.x.iter().map(|t| tape.constant(t.clone())).collect();
        let (out, _) = models
            .generator
            .forward(&gp, Var::concat_batch(&xs), BnMode::Running)?;
        let gen = [0, 1, 2].map(|k| out.slice_batch(k * n, n));
        let real = batch.y.clone().map(|t| tape.constant(t));
        let xd = tape.constant(Tensor::concat_batch(&batch.x_density));
        let y_all = Var::concat_batch(&real);
        let d = &models.spatial;
        let ds = joint(
            d,
            &sp,
            d.spatial_input(xd, y_all)?,
            d.spatial_input(xd, out)?,
            BnMode::Running,
        )?;
        let adv = TripletAdvection::build(
            &batch.v_prev.iter().collect::<Vec<_>>(),
            &batch.v_next.iter().collect::<Vec<_>>(),
            g.factor,
        )?;
        let (rt, ft) = if w.temporal == TemporalVariant::DtUnaligned {
            (real, gen)
        } else {
            (adv.align(real), adv.align(gen))
        };
        let dt = joint(
            &models.temporal,
            &tp,
            Discriminator::temporal_input(rt)?,
            Discriminator::temporal_input(ft)?,
            BnMode::Running,
        )?;
        let terms = GLossTerms {
            adv_spatial: w
                .spatial_gan
                .then(|| g_adv_var(&[ds.fake_logits]))
                .flatten(),
            adv_temporal: w.uses_dt().then(|| g_adv_var(&[dt.fake_logits])).flatten(),
            feature: if w.spatial_gan {
                Some(feature_var(
                    &ds.fake_features,
                    &ds.real_features,
                    &w.feature,
                )?)
            } else {
                None
            },
            l1: Some(l1_var(out, y_all, w.l1)?),
            l2: (w.l2 != 0.0)
                .then(|| l2_var(out, y_all, w.l2))
                .transpose()?,
            l2t: (w.temporal == TemporalVariant::L2t)
                .then(|| l2_temporal_var(gen, &adv, w.l2t_mode).scale(w.l2t)),
        };
        let v = terms.values();
        acc.ds_real += mean_prob(&ds.real_logits);
        acc.ds_fake += mean_prob(&ds.fake_logits);
        acc.dt_real += mean_prob(&dt.real_logits);
        acc.dt_fake += mean_prob(&dt.fake_logits);
        acc.d_s += d_loss_var(ds.real_logits, ds.fake_logits).item() as f64;
        acc.d_t += d_loss_var(dt.real_logits, dt.fake_logits).item() as f64;
        acc.g.adv_spatial += v.adv_spatial;
        acc.g.adv_temporal += v.adv_temporal;
        acc.g.feature += v.feature;
        acc.g.l1 += v.l1;
        acc.g.l2 += v.l2;
        acc.g.l2t += v.l2t;
        acc.g.total += v.total;
    }
    let k = batches as f64;
    let g_avg = |x: f64| x / k;
    Ok(EvalReport {
        ds_real: acc.ds_real / k,
        ds_fake: acc.ds_fake / k,
        dt_real: acc.dt_real / k,
        dt_fake: acc.dt_fake / k,
        d_s: acc.d_s / k,
        d_t: acc.d_t / k,
        g: GLossValues {
            adv_spatial: g_avg(acc.g.adv_spatial),
            adv_temporal: g_avg(acc.g.adv_temporal),
            feature: g_avg(acc.g.feature),
            l1: g_avg(acc.g.l1),
            l2: g_avg(acc.g.l2),
            l2t: g_avg(acc.g.l2t),
            total: g_avg(acc.g.total),
        },
    })
}

/// Mean post-sigmoid outputs `(D_s, D_t)` over real and fake test inputs.
pub fn eval_discriminator_balance(
    models: &Models,
    config: &ExperimentConfig,
    test: &Dataset,
    batches: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let r = evaluate(models, config, test, batches, seed)?;
    Ok((r.ds_mean(), r.dt_mean()))
}
