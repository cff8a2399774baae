//! Applying a trained generator: whole-domain and tiled evaluation,
//! velocity control, recursive application and output metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advect::AdvectionCoeffs;
use crate::checkpoint::Checkpoint;
use crate::data::{input_bundle, Dataset, InputFields};
use crate::error::{Error, Result};
use crate::fields::{downsample, upsample_nn, GridField, ScaleKind};
use crate::nets::Generator;
use crate::tgf;

/// Default tile overlap in low-resolution cells.
pub const DEFAULT_OVERLAP: usize = 3;

/// Low-resolution density and velocity of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub density: GridField,
    pub velocity: GridField,
}

impl Bundle {
    pub fn new(density: GridField, velocity: GridField) -> Result<Self> {
        if density.channels() != 1
            || velocity.channels() != velocity.dim()
            || density.shape() != velocity.shape()
        {
            return Err(Error::Shape(format!(
                "bundle needs a scalar density and a vector velocity of one shape, got {:?}x{} and {:?}x{}",
                density.shape(),
                density.channels(),
                velocity.shape(),
                velocity.channels()
            )));
        }
        Ok(Self { density, velocity })
    }

    /// Reads `density.tgf` and `velocity.tgf` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(
            tgf::read(&dir.join("density.tgf"))?,
            tgf::read(&dir.join("velocity.tgf"))?,
        )
    }

    pub fn shape(&self) -> &[usize] {
        self.density.shape()
    }

    fn crop(&self, origin: &[usize], shape: &[usize]) -> Result<Self> {
        Ok(Self {
            density: self.density.crop(origin, shape)?,
            velocity: self.velocity.crop(origin, shape)?,
        })
    }
}

/// How the velocity passed to the generator is altered.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityControl {
    Scale(f32),
    Zero,
    /// Replace by a given field of the same layout.
    Field(GridField),
}

/// Density untouched, velocity replaced according to `control`.
pub fn modify_velocity(x: &Bundle, control: &VelocityControl) -> Result<Bundle> {
    let velocity = match control {
        VelocityControl::Scale(s) => x.velocity.scale(*s),
        VelocityControl::Zero => x.velocity.map(|_| 0.0),
        VelocityControl::Field(f) => {
            if !f.same_layout(&x.velocity) {
                return Err(Error::Shape("replacement velocity layout differs".into()));
            }
            f.clone()
        }
    };
    Ok(Bundle {
        density: x.density.clone(),
        velocity,
    })
}

/// One tile: the input window evaluated and the core it contributes.
/// All coordinates are low-resolution cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileWindow {
    pub input_origin: Vec<usize>,
    pub input_shape: Vec<usize>,
    pub core_origin: Vec<usize>,
    pub core_shape: Vec<usize>,
}

/// A cover of the domain by tile cores, each evaluated on a window grown
/// by `overlap` cells and clipped to the domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub domain: Vec<usize>,
    pub tile: usize,
    pub overlap: usize,
    pub windows: Vec<TileWindow>,
}

impl TilePlan {
    pub fn new(domain: &[usize], tile: usize, overlap: usize) -> Result<Self> {
        if tile == 0 || domain.is_empty() || domain.contains(&0) {
            return Err(Error::Invalid(format!(
                "cannot tile {domain:?} with tile size {tile}"
            )));
        }
        let per_axis: Vec<Vec<(usize, usize)>> = domain
            .iter()
            .map(|&n| (0..n).step_by(tile).map(|o| (o, tile.min(n - o))).collect())
            .collect();
        let mut windows = Vec::new();
        let mut idx = vec![0usize; domain.len()];
        loop {
            let mut w = TileWindow {
                input_origin: Vec::new(),
                input_shape: Vec::new(),
                core_origin: Vec::new(),
                core_shape: Vec::new(),
            };
            for (a, &i) in idx.iter().enumerate() {
                let (o, len) = per_axis[a][i];
                let lo = o.saturating_sub(overlap);
                let hi = (o + len + overlap).min(domain[a]);
                w.core_origin.push(o);
                w.core_shape.push(len);
                w.input_origin.push(lo);
                w.input_shape.push(hi - lo);
            }
            windows.push(w);
            let mut a = 0;
            loop {
                if a == idx.len() {
                    return Ok(Self {
                        domain: domain.to_vec(),
                        tile,
                        overlap,
                        windows,
                    });
                }
                idx[a] += 1;
                if idx[a] < per_axis[a].len() {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }

    /// One tile covering the whole domain.
    pub fn single(domain: &[usize]) -> Result<Self> {
        Self::new(domain, domain.iter().copied().max().unwrap_or(0), 0)
    }
}

/// Recursive application settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecursiveOptions {
    /// Halve the resolution between passes, so each further pass adds a
    /// factor of 2 instead of 4.
    pub downsample_between: bool,
    /// Largest output window, in cells, one generator evaluation may
    /// produce.
    pub max_output_cells: usize,
    /// Optional `(tile, overlap)` for every pass.
    pub tiling: Option<(usize, usize)>,
}

impl Default for RecursiveOptions {
    fn default() -> Self {
        Self {
            downsample_between: false,
            max_output_cells: 1 << 22,
            tiling: None,
        }
    }
}

/// A generator together with the input fields it was trained on.
#[derive(Debug, Clone)]
pub struct Upscaler {
    pub generator: Generator,
    pub inputs: InputFields,
}

impl Upscaler {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            generator: ck.models.generator.clone(),
            inputs: ck.config.train.inputs,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?))
    }

    pub fn factor(&self) -> usize {
        self.generator.config.factor
    }

    fn check(&self, x: &Bundle) -> Result<()> {
        if x.density.dim() != self.generator.config.dim {
            return Err(Error::Shape(format!(
                "{}D input for a {}D generator",
                x.density.dim(),
                self.generator.config.dim
            )));
        }
        Ok(())
    }

    /// One generator evaluation over the whole input; densities clamped at 0.
    pub fn infer_full(&self, x: &Bundle) -> Result<GridField> {
        self.check(x)?;
        let input = input_bundle(&x.density, &x.velocity, self.inputs)?;
        let out = self.generator.infer(GridField::batch_tensor(&[&input])?)?;
        Ok(GridField::from_tensor(&out, 0, input.dim())?.map(|v| v.max(0.0)))
    }

    /// Evaluates each window of `plan` and assembles the cores.
    pub fn infer_tiled(&self, x: &Bundle, plan: &TilePlan) -> Result<GridField> {
        self.check(x)?;
        if plan.domain != x.shape() {
            return Err(Error::Shape(format!(
                "plan for {:?} applied to {:?}",
                plan.domain,
                x.shape()
            )));
        }
        let f = self.factor();
        let hi: Vec<usize> = x.shape().iter().map(|n| n * f).collect();
        let mut out = GridField::zeros(&hi, 1)?;
        for w in &plan.windows {
            let part = self.infer_full(&x.crop(&w.input_origin, &w.input_shape)?)?;
            let local: Vec<usize> = (0..w.core_origin.len())
                .map(|a| (w.core_origin[a] - w.input_origin[a]) * f)
                .collect();
            let shape: Vec<usize> = w.core_shape.iter().map(|n| n * f).collect();
            let origin: Vec<usize> = w.core_origin.iter().map(|n| n * f).collect();
            out.paste(&part.crop(&local, &shape)?, &origin)?;
        }
        Ok(out)
    }

    /// Applies the generator `times` times to its own output. Velocity for
    /// later passes is the previous velocity replicated to the new grid.
    pub fn infer_recursive(
        &self,
        x: &Bundle,
        times: usize,
        opts: &RecursiveOptions,
    ) -> Result<GridField> {
        if times == 0 {
            return Err(Error::Invalid(
                "recursive application needs times >= 1".into(),
            ));
        }
        let f = self.factor();
        let mut cur = x.clone();
        for pass in 0..times {
            let window: Vec<usize> = match opts.tiling {
                Some((tile, overlap)) => cur
                    .shape()
                    .iter()
                    .map(|&n| n.min(tile + 2 * overlap))
                    .collect(),
                None => cur.shape().to_vec(),
            };
            let cells: usize = window.iter().map(|n| n * f).product();
            if cells > opts.max_output_cells {
                let side =
                    (opts.max_output_cells as f64).powf(1.0 / window.len() as f64) / f as f64;
                return Err(Error::MemoryBudget(format!(
                    "pass {} would produce {cells} cells per evaluation (limit {}); use a tile plan with tile + 2 x overlap <= {}",
                    pass + 1,
                    opts.max_output_cells,
                    side.floor() as usize
                )));
            }
            let out = match opts.tiling {
                Some((tile, overlap)) => {
                    self.infer_tiled(&cur, &TilePlan::new(cur.shape(), tile, overlap)?)?
                }
                None => self.infer_full(&cur)?,
            };
            if pass + 1 == times {
                return Ok(out);
            }
            cur = if opts.downsample_between {
                Bundle::new(
                    downsample(&out, 2, ScaleKind::Passive)?,
                    upsample_nn(&cur.velocity, f / 2, ScaleKind::Velocity)?,
                )?
            } else {
                Bundle::new(out, upsample_nn(&cur.velocity, f, ScaleKind::Velocity)?)?
            };
        }
        unreachable!("loop returns on the last pass")
    }

    /// Independent per-frame inference.
    pub fn infer_sequence(&self, frames: &[Bundle]) -> Result<Vec<GridField>> {
        frames.iter().map(|x| self.infer_full(x)).collect()
    }
}

/// Temporal change of one frame against its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalScore {
    /// `mean |out_t - A(out_{t-1}, v_{t-1})|`.
    pub advected: f64,
    /// `mean |out_t - out_{t-1}|`.
    pub raw: f64,
}

/// Scores frames `1..` of a sequence. `velocities[t]` belongs to frame
/// `t`; it may be coarser than the outputs by an integer factor and is
/// replicated to their grid.
pub fn temporal_metric(
    outputs: &[GridField],
    velocities: &[GridField],
) -> Result<Vec<TemporalScore>> {
    if outputs.len() < 2 || velocities.len() != outputs.len() {
        return Err(Error::Invalid(format!(
            "temporal metric needs >= 2 frames with one velocity each, got {} and {}",
            outputs.len(),
            velocities.len()
        )));
    }
    let mut scores = Vec::with_capacity(outputs.len() - 1);
    for t in 1..outputs.len() {
        let (prev, cur) = (&outputs[t - 1], &outputs[t]);
        let v = &velocities[t - 1];
        let f = cur.shape()[0] / v.shape()[0].max(1);
        if f == 0 || v.shape().iter().zip(cur.shape()).any(|(a, b)| a * f != *b) {
            return Err(Error::Shape(format!(
                "velocity {:?} does not tile output {:?}",
                v.shape(),
                cur.shape()
            )));
        }
        let moved =
            AdvectionCoeffs::build(&upsample_nn(v, f, ScaleKind::Velocity)?, 1.0)?.apply(prev)?;
        scores.push(TemporalScore {
            advected: mean_abs_diff(cur, &moved),
            raw: mean_abs_diff(cur, prev),
        });
    }
    Ok(scores)
}

fn mean_abs_diff(a: &GridField, b: &GridField) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB for densities in `[0, 1]`.
pub fn psnr(output: &GridField, reference: &GridField) -> Result<f64> {
    if !output.same_layout(reference) {
        return Err(Error::Shape("PSNR of fields with different layouts".into()));
    }
    let mse = output
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / output.data().len() as f64;
    Ok(10.0 * (1.0 / mse.max(1e-20)).log10())
}

/// Detail proxy: mean magnitude of the central-difference density gradient
/// over interior cells.
pub fn mean_gradient(rho: &GridField) -> f64 {
    let [nx, ny, nz] = rho.extent();
    let d = rho.dim();
    let (mut acc, mut count) = (0.0, 0usize);
    let zr = if d == 3 {
        1..nz.saturating_sub(1)
    } else {
        0..1
    };
    for z in zr {
        for y in 1..ny.saturating_sub(1) {
            for x in 1..nx.saturating_sub(1) {
                let g = |dx: isize, dy: isize, dz: isize| {
                    let p = |s: isize| {
                        rho.at(
                            0,
                            (x as isize + s * dx) as usize,
                            (y as isize + s * dy) as usize,
                            (z as isize + s * dz) as usize,
                        ) as f64
                    };
                    0.5 * (p(1) - p(-1))
                };
                let mut s = g(1, 0, 0).powi(2) + g(0, 1, 0).powi(2);
                if d == 3 {
                    s += g(0, 0, 1).powi(2);
                }
                acc += s.sqrt();
                count += 1;
            }
        }
    }
    acc / count.max(1) as f64
}

/// Aggregate quality metrics over the held-out sequences of a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub temporal_advected: f64,
    pub temporal_raw: f64,
    pub psnr: f64,
    /// Mean density-gradient magnitude of the outputs.
    pub detail: f64,
    /// Mean total output density per frame.
    pub mass: f64,
    /// The same total for the high-resolution references.
    pub reference_mass: f64,
}

/// Runs whole-domain inference over every consecutive run of frames in
/// `data` and averages the metrics.
pub fn evaluate_sequences(
    up: &Upscaler,
    data: &Dataset,
    control: Option<&VelocityControl>,
) -> Result<SequenceMetrics> {
    if data.frames.is_empty() {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    let mut m = SequenceMetrics::default();
    let mut pairs = 0usize;
    let mut frames = data.frames.iter().peekable();
    while frames.peek().is_some() {
        let mut run = vec![frames.next().expect("peeked")];
        while let Some(next) = frames.peek() {
            let last = run[run.len() - 1];
            if next.sim == last.sim && next.frame == last.frame + 1 {
                run.push(frames.next().expect("peeked"));
            } else {
                break;
            }
        }
        let mut outs = Vec::with_capacity(run.len());
        for f in &run {
            let mut x = Bundle::new(f.x_density.clone(), f.x_velocity.clone())?;
            if let Some(c) = control {
                x = modify_velocity(&x, c)?;
            }
            let out = up.infer_full(&x)?;
            m.psnr += psnr(&out, &f.y_density)?;
            m.detail += mean_gradient(&out);
            m.mass += out.sum();
            m.reference_mass += f.y_density.sum();
            outs.push(out);
        }
        if run.len() >= 2 {
            let vel: Vec<GridField> = run.iter().map(|f| f.x_velocity.clone()).collect();
            for s in temporal_metric(&outs, &vel)? {
                m.temporal_advected += s.advected;
                m.temporal_raw += s.raw;
                pairs += 1;
            }
        }
        m.frames += run.len();
    }
    let n = m.frames as f64;
    let p = pairs.max(1) as f64;
    Ok(SequenceMetrics {
        frames: m.frames,
        temporal_advected: m.temporal_advected / p,
        temporal_raw: m.temporal_raw / p,
        psnr: m.psnr / n,
        detail: m.detail / n,
        mass: m.mass / n,
        reference_mass: m.reference_mass / n,
    })
}
