//! Randomized smoke simulations used as training data.
//!
//! The solver runs on a collocated, cell-centered grid inside a closed box:
//! inflows, MacCormack advection of density and velocity, buoyancy, then a
//! pressure projection. One solver step produces one output frame
//! (`dt = 1`, velocities in cells per frame).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advect::AdvectionCoeffs;
use crate::error::{Error, Result};
use crate::fields::{downsample, GridField, ScaleKind};
use crate::rng::substream;
use crate::tgf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmokeInflow {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Density added per frame inside the region.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityInflow {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Velocity imposed inside the region, cells per frame.
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub shape: Vec<usize>,
    pub frames: usize,
    pub smoke_inflows: Vec<SmokeInflow>,
    pub velocity_inflows: Vec<VelocityInflow>,
    /// Acceleration per unit density, cells per frame squared.
    pub buoyancy: Vec<f64>,
}

impl SceneSpec {
    /// A scene with no sources.
    pub fn empty(shape: &[usize], frames: usize) -> Self {
        Self {
            seed: 0,
            shape: shape.to_vec(),
            frames,
            smoke_inflows: Vec::new(),
            velocity_inflows: Vec::new(),
            buoyancy: vec![0.0; shape.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.shape.len();
        if d != 2 && d != 3 {
            return Err(Error::Invalid(format!("scene dimension {d}")));
        }
        if self.frames < 3 {
            return Err(Error::Invalid(format!(
                "scene needs at least 3 frames, got {}",
                self.frames
            )));
        }
        if self.buoyancy.len() != d {
            return Err(Error::Invalid("buoyancy has the wrong dimension".into()));
        }
        let regions = self
            .smoke_inflows
            .iter()
            .map(|s| (&s.center, s.radius))
            .chain(self.velocity_inflows.iter().map(|v| (&v.center, v.radius)));
        for (c, r) in regions {
            if c.len() != d || r <= 0.0 {
                return Err(Error::Invalid(format!("inflow at {c:?} radius {r}")));
            }
            for a in 0..d {
                if c[a] - r < 0.0 || c[a] + r > (self.shape[a] - 1) as f64 {
                    return Err(Error::Invalid(format!(
                        "inflow at {c:?} radius {r} leaves the domain"
                    )));
                }
            }
        }
        for v in &self.velocity_inflows {
            if v.velocity.len() != d {
                return Err(Error::Invalid(
                    "inflow velocity has the wrong dimension".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Ranges for random scenes. Lengths are fractions of the smallest domain
/// extent; speeds and accelerations are in cells of the simulated grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub smoke_inflows: (usize, usize),
    pub velocity_inflows: (usize, usize),
    pub radius_frac: (f64, f64),
    pub smoke_rate: (f64, f64),
    pub inflow_speed: (f64, f64),
    /// Buoyancy magnitude, drawn log-uniformly.
    pub buoyancy: (f64, f64),
    /// Maximum tilt of the buoyancy direction away from +y, degrees.
    pub buoyancy_tilt_deg: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            smoke_inflows: (1, 3),
            velocity_inflows: (1, 3),
            radius_frac: (0.05, 0.15),
            smoke_rate: (0.03, 0.15),
            inflow_speed: (0.5, 2.0),
            buoyancy: (0.1, 0.3),
            buoyancy_tilt_deg: 20.0,
        }
    }
}

const PLACEMENT_TRIES: usize = 64;

impl SceneSampler {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        seed: u64,
        shape: &[usize],
        frames: usize,
    ) -> SceneSpec {
        let d = shape.len();
        let span = *shape.iter().min().expect("non-empty shape") as f64;
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let count = |rng: &mut R, (lo, hi): (usize, usize)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let region = |rng: &mut R| {
            let r = (uniform(rng, self.radius_frac) * span).max(1.0);
            let center = shape
                .iter()
                .map(|&n| uniform(rng, (r, (n - 1) as f64 - r)))
                .collect::<Vec<_>>();
            (center, r)
        };
        let smoke_inflows: Vec<SmokeInflow> = (0..count(rng, self.smoke_inflows))
            .map(|_| {
                let (center, radius) = region(rng);
                SmokeInflow {
                    center,
                    radius,
                    rate: uniform(rng, self.smoke_rate),
                }
            })
            .collect();
        // A velocity inflow sitting on a smoke source pins the density there
        // into a steady source-fed state; keep them apart when possible.
        let clear_of_smoke = |center: &[f64], radius: f64| {
            smoke_inflows.iter().all(|s| {
                let d2: f64 = center
                    .iter()
                    .zip(&s.center)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                d2.sqrt() > radius + s.radius
            })
        };
        let velocity_inflows = (0..count(rng, self.velocity_inflows))
            .map(|_| {
                let mut placed = region(rng);
                for _ in 0..PLACEMENT_TRIES {
                    if clear_of_smoke(&placed.0, placed.1) {
                        break;
                    }
                    placed = region(rng);
                }
                let (center, radius) = placed;
                let speed = uniform(rng, self.inflow_speed);
                let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                dir.iter_mut().for_each(|x| *x *= speed / norm);
                VelocityInflow {
                    center,
                    radius,
                    velocity: dir,
                }
            })
            .collect();
        let (lo, hi) = self.buoyancy;
        let mag = if hi > lo {
            (rng.random_range(lo.ln()..hi.ln())).exp()
        } else {
            lo
        };
        let tilt = uniform(rng, (-self.buoyancy_tilt_deg, self.buoyancy_tilt_deg)).to_radians();
        let mut buoyancy = vec![0.0; d];
        buoyancy[0] = -mag * tilt.sin();
        buoyancy[1] = mag * tilt.cos();
        SceneSpec {
            seed,
            shape: shape.to_vec(),
            frames,
            smoke_inflows,
            velocity_inflows,
            buoyancy,
        }
    }
}

/// Pressure solve settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSettings {
    /// Maximum absolute residual, which equals the remaining divergence.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            max_iterations: 600,
        }
    }
}

/// Central-difference divergence; velocities outside the box are zero.
pub fn divergence(v: &GridField) -> Result<GridField> {
    if v.channels() != v.dim() {
        return Err(Error::Shape("divergence needs a vector field".into()));
    }
    let comps: Vec<Vec<f64>> = (0..v.dim())
        .map(|a| v.channel(a).iter().map(|&x| x as f64).collect())
        .collect();
    let mut out = vec![0.0; v.cells()];
    apply_div(v.extent(), &comps, &mut out);
    GridField::from_data(v.shape(), 1, out.into_iter().map(|x| x as f32).collect())
}

fn strides(ext: [usize; 3]) -> [usize; 3] {
    [1, ext[0], ext[0] * ext[1]]
}

fn apply_div(ext: [usize; 3], v: &[Vec<f64>], out: &mut [f64]) {
    let st = strides(ext);
    let mut i = 0;
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let pos = [x, y, z];
                let mut acc = 0.0;
                for (a, va) in v.iter().enumerate() {
                    if pos[a] + 1 < ext[a] {
                        acc += 0.5 * va[i + st[a]];
                    }
                    if pos[a] > 0 {
                        acc -= 0.5 * va[i - st[a]];
                    }
                }
                out[i] = acc;
                i += 1;
            }
        }
    }
}

/// Adjoint of [`apply_div`]: `g_a[j] = (p[j - e_a] - p[j + e_a]) / 2`.
fn apply_div_t(ext: [usize; 3], p: &[f64], g: &mut [Vec<f64>]) {
    let st = strides(ext);
    let mut i = 0;
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let pos = [x, y, z];
                for (a, ga) in g.iter_mut().enumerate() {
                    let lo = if pos[a] > 0 { p[i - st[a]] } else { 0.0 };
                    let hi = if pos[a] + 1 < ext[a] {
                        p[i + st[a]]
                    } else {
                        0.0
                    };
                    ga[i] = 0.5 * (lo - hi);
                }
                i += 1;
            }
        }
    }
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonal projection of `v` onto the fields with zero [`divergence`]:
/// solves `D D^T p = D v` by Jacobi-preconditioned CG and sets
/// `v <- v - D^T p`. `pressure` is used as the initial guess and updated.
/// Returns the iteration count.
pub fn project(
    v: &mut GridField,
    pressure: &mut Vec<f64>,
    settings: ProjectionSettings,
) -> Result<usize> {
    let d = v.dim();
    let ext = v.extent();
    let n = v.cells();
    if pressure.len() != n {
        *pressure = vec![0.0; n];
    }
    let mut comps: Vec<Vec<f64>> = (0..d)
        .map(|a| v.channel(a).iter().map(|&x| x as f64).collect())
        .collect();
    let mut rhs = vec![0.0; n];
    apply_div(ext, &comps, &mut rhs);

    // diag(D D^T) = (number of in-box axis neighbors) / 4
    let mut inv_diag = vec![0.0; n];
    {
        let mut i = 0;
        for z in 0..ext[2] {
            for y in 0..ext[1] {
                for x in 0..ext[0] {
                    let pos = [x, y, z];
                    let k: usize = (0..d)
                        .map(|a| (pos[a] > 0) as usize + (pos[a] + 1 < ext[a]) as usize)
                        .sum();
                    inv_diag[i] = if k > 0 { 4.0 / k as f64 } else { 0.0 };
                    i += 1;
                }
            }
        }
    }
    let mut scratch: Vec<Vec<f64>> = vec![vec![0.0; n]; d];
    let mut op = |x: &[f64], out: &mut [f64]| {
        apply_div_t(ext, x, &mut scratch);
        apply_div(ext, &scratch, out);
    };

    let p = pressure;
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let residual = loop {
        op(p, &mut ap);
        for i in 0..n {
            r[i] = rhs[i] - ap[i];
        }
        let res = max_abs(&r);
        if res <= settings.tolerance || iterations >= settings.max_iterations {
            break res;
        }
        // (re)start CG from the current iterate
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut dir = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < settings.max_iterations {
            iterations += 1;
            op(&dir, &mut ap);
            let denom = dot(&dir, &ap);
            if denom <= 0.0 {
                break;
            }
            let alpha = rz / denom;
            for i in 0..n {
                p[i] += alpha * dir[i];
                r[i] -= alpha * ap[i];
            }
            if max_abs(&r) <= 0.5 * settings.tolerance {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                dir[i] = z[i] + beta * dir[i];
            }
        }
    };
    if residual > settings.tolerance {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }
    let mut grad: Vec<Vec<f64>> = vec![vec![0.0; n]; d];
    apply_div_t(ext, p, &mut grad);
    for a in 0..d {
        for (c, g) in comps[a].iter_mut().zip(&grad[a]) {
            *c -= g;
        }
        for (dst, &c) in v.channel_mut(a).iter_mut().zip(&comps[a]) {
            *dst = c as f32;
        }
    }
    Ok(iterations)
}

/// MacCormack advection of every channel of `f` by `v`. The corrected value
/// is clamped to the range of the backtrace stencil; cells whose backtrace
/// leaves the box keep the semi-Lagrangian value.
fn maccormack(
    f: &GridField,
    v: &GridField,
    fwd: &AdvectionCoeffs,
    bwd: &AdvectionCoeffs,
) -> Result<GridField> {
    let forward = fwd.apply(f)?;
    let back = bwd.apply(&forward)?;
    let mut out = forward.clone();
    let ext = v.extent();
    let d = v.dim();
    let n = f.cells();
    let mut i = 0;
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let here = [x as f64, y as f64, z as f64];
                let inside = (0..d).all(|a| {
                    let q = here[a] - v.channel(a)[i] as f64;
                    q >= 0.0 && q <= (ext[a] - 1) as f64
                });
                if inside {
                    for c in 0..f.channels() {
                        let src = f.channel(c);
                        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                        for (j, _) in fwd.row(i) {
                            lo = lo.min(src[j]);
                            hi = hi.max(src[j]);
                        }
                        let k = c * n + i;
                        let corrected = forward.data()[k] + 0.5 * (f.data()[k] - back.data()[k]);
                        out.data_mut()[k] = corrected.clamp(lo, hi);
                    }
                }
                i += 1;
            }
        }
    }
    Ok(out)
}

fn region_mask(shape: &[usize], center: &[f64], radius: f64) -> Vec<usize> {
    let f = GridField::zeros(shape, 1).expect("valid shape");
    let [nx, ny, nz] = f.extent();
    let mut cells = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = center
                    .iter()
                    .enumerate()
                    .map(|(a, c)| (p[a] - c).powi(2))
                    .sum();
                if r2 <= radius * radius {
                    cells.push(f.linear_index(x, y, z));
                }
            }
        }
    }
    cells
}

/// Stateful solver for one scene (keeps the pressure as warm start).
pub struct Solver {
    spec: SceneSpec,
    settings: ProjectionSettings,
    pressure: Vec<f64>,
    smoke_cells: Vec<Vec<usize>>,
    velocity_cells: Vec<Vec<usize>>,
}

impl Solver {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let smoke_cells = spec
            .smoke_inflows
            .iter()
            .map(|s| region_mask(&spec.shape, &s.center, s.radius))
            .collect();
        let velocity_cells = spec
            .velocity_inflows
            .iter()
            .map(|s| region_mask(&spec.shape, &s.center, s.radius))
            .collect();
        Ok(Self {
            spec,
            settings: ProjectionSettings::default(),
            pressure: Vec::new(),
            smoke_cells,
            velocity_cells,
        })
    }

    pub fn with_settings(mut self, settings: ProjectionSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Initial (empty) state.
    pub fn initial_state(&self) -> Result<(GridField, GridField)> {
        Ok((
            GridField::zeros(&self.spec.shape, 1)?,
            GridField::zeros(&self.spec.shape, self.spec.shape.len())?,
        ))
    }

    /// Density added by the inflows on a step starting from `rho`.
    pub fn apply_inflows(&self, rho: &mut GridField, v: &mut GridField) {
        for (s, cells) in self.spec.smoke_inflows.iter().zip(&self.smoke_cells) {
            for &i in cells {
                let r = &mut rho.data_mut()[i];
                *r = (*r + s.rate as f32).min(1.0);
            }
        }
        let n = v.cells();
        for (s, cells) in self.spec.velocity_inflows.iter().zip(&self.velocity_cells) {
            for &i in cells {
                for (a, &u) in s.velocity.iter().enumerate() {
                    v.data_mut()[a * n + i] = u as f32;
                }
            }
        }
    }

    /// Advances one frame. Returns the pressure-solve iteration count.
    pub fn step(&mut self, rho: &mut GridField, v: &mut GridField) -> Result<usize> {
        if rho.shape() != self.spec.shape.as_slice()
            || v.shape() != rho.shape()
            || v.channels() != v.dim()
        {
            return Err(Error::Shape("solver state does not match the scene".into()));
        }
        self.apply_inflows(rho, v);
        let fwd = AdvectionCoeffs::build(v, 1.0)?;
        let bwd = AdvectionCoeffs::build(v, -1.0)?;
        *rho = maccormack(rho, v, &fwd, &bwd)?;
        let mut nv = maccormack(v, v, &fwd, &bwd)?;
        let n = nv.cells();
        for (a, &b) in self.spec.buoyancy.iter().enumerate() {
            let b = b as f32;
            for i in 0..n {
                nv.data_mut()[a * n + i] += b * rho.data()[i];
            }
        }
        let iters = project(&mut nv, &mut self.pressure, self.settings)?;
        *v = nv;
        if !rho.is_finite() || !v.is_finite() {
            return Err(Error::Invalid(
                "simulation produced non-finite values".into(),
            ));
        }
        Ok(iters)
    }
}

/// One step from an arbitrary state with a fresh solver.
pub fn solver_step(
    rho: &GridField,
    v: &GridField,
    spec: &SceneSpec,
) -> Result<(GridField, GridField)> {
    let mut solver = Solver::new(spec.clone())?;
    let (mut r, mut u) = (rho.clone(), v.clone());
    solver.step(&mut r, &mut u)?;
    Ok((r, u))
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub sims: usize,
    pub frames: usize,
    /// High-resolution cells per axis.
    pub res: usize,
    pub dim: usize,
    pub scale: usize,
    pub seed: u64,
    pub density_threshold: f64,
    pub test_fraction: f64,
    pub sampler: SceneSampler,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sims: 20,
            frames: 120,
            res: 256,
            dim: 2,
            scale: 4,
            seed: 0,
            density_threshold: 0.02,
            test_fraction: 0.2,
            sampler: SceneSampler::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One kept frame. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub sim: usize,
    pub frame: usize,
    pub split: Split,
    pub x_density: PathBuf,
    pub x_velocity: PathBuf,
    pub y_density: PathBuf,
    pub y_velocity: PathBuf,
    pub mean_density_lo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEntry {
    pub id: usize,
    pub split: Split,
    pub frames_simulated: usize,
    pub frames_kept: usize,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub dim: usize,
    pub scale: usize,
    pub shape_lo: Vec<usize>,
    pub shape_hi: Vec<usize>,
    pub density_threshold: f64,
    /// Mean low-resolution density over all kept frames.
    pub mean_density_lo: f64,
    /// Maximum high-resolution density over all kept frames.
    pub max_density_hi: f64,
    pub sims: Vec<SimEntry>,
    pub frames: Vec<FrameEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Frames of each simulation keyed by frame index.
    pub fn by_sim(&self) -> BTreeMap<usize, BTreeMap<usize, &FrameEntry>> {
        let mut m: BTreeMap<usize, BTreeMap<usize, &FrameEntry>> = BTreeMap::new();
        for f in &self.frames {
            m.entry(f.sim).or_default().insert(f.frame, f);
        }
        m
    }

    /// `(sim, center frame)` of every triplet whose three frames were kept.
    pub fn triplet_centers(&self, split: Split) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (sim, frames) in self.by_sim() {
            for (&t, e) in &frames {
                if e.split == split
                    && t > 0
                    && frames.contains_key(&(t - 1))
                    && frames.contains_key(&(t + 1))
                {
                    out.push((sim, t));
                }
            }
        }
        out
    }
}

fn sim_split(id: usize, sims: usize, test_fraction: f64) -> Split {
    let n_test = (sims as f64 * test_fraction).round() as usize;
    if id >= sims - n_test.min(sims) {
        Split::Test
    } else {
        Split::Train
    }
}

/// Simulates `config.sims` random scenes and writes kept frames under
/// `out_dir` together with a manifest.
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let scenes: Vec<SceneSpec> = (0..config.sims)
        .map(|id| {
            let mut rng = substream(config.seed, &[id as u64]);
            let seed = rng.random();
            config
                .sampler
                .sample(&mut rng, seed, &vec![config.res; config.dim], config.frames)
        })
        .collect();
    generate_from_scenes(&scenes, config, out_dir)
}

/// Like [`generate_dataset`] with explicit scenes.
pub fn generate_from_scenes(
    scenes: &[SceneSpec],
    config: &GenConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if config.scale == 0 || config.res % config.scale != 0 {
        return Err(Error::Invalid(format!(
            "resolution {} is not divisible by scale {}",
            config.res, config.scale
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let shape_hi = vec![config.res; config.dim];
    let shape_lo = vec![config.res / config.scale; config.dim];
    let mut sims = Vec::new();
    let mut frames = Vec::new();
    let (mut density_sum, mut max_hi) = (0.0f64, 0.0f64);
    for (id, scene) in scenes.iter().enumerate() {
        if scene.shape != shape_hi {
            return Err(Error::Invalid(format!(
                "scene {id} has shape {:?}, expected {shape_hi:?}",
                scene.shape
            )));
        }
        let split = sim_split(id, scenes.len(), config.test_fraction);
        let mut solver = Solver::new(scene.clone())?;
        let (mut rho, mut v) = solver.initial_state()?;
        let dir_name = format!("sim{id:03}");
        let sim_dir = out_dir.join(&dir_name);
        let mut kept = 0;
        for t in 0..scene.frames {
            solver.step(&mut rho, &mut v)?;
            let rho_lo = downsample(&rho, config.scale, ScaleKind::Passive)?;
            let mean_lo = rho_lo.mean();
            if mean_lo < config.density_threshold {
                continue;
            }
            let v_lo = downsample(&v, config.scale, ScaleKind::Velocity)?;
            fs::create_dir_all(&sim_dir).map_err(|e| Error::io(&sim_dir, e))?;
            let name = |tag: &str| PathBuf::from(&dir_name).join(format!("f{t:04}_{tag}.tgf"));
            let entry = FrameEntry {
                sim: id,
                frame: t,
                split,
                x_density: name("x_density"),
                x_velocity: name("x_velocity"),
                y_density: name("y_density"),
                y_velocity: name("y_velocity"),
                mean_density_lo: mean_lo,
            };
            tgf::write(&out_dir.join(&entry.x_density), &rho_lo)?;
            tgf::write(&out_dir.join(&entry.x_velocity), &v_lo)?;
            tgf::write(&out_dir.join(&entry.y_density), &rho)?;
            tgf::write(&out_dir.join(&entry.y_velocity), &v)?;
            density_sum += mean_lo;
            max_hi = max_hi.max(rho.max_abs() as f64);
            kept += 1;
            frames.push(entry);
        }
        sims.push(SimEntry {
            id,
            split,
            frames_simulated: scene.frames,
            frames_kept: kept,
            scene: scene.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        dim: config.dim,
        scale: config.scale,
        shape_lo,
        shape_hi,
        density_threshold: config.density_threshold,
        mean_density_lo: if frames.is_empty() {
            0.0
        } else {
            density_sum / frames.len() as f64
        },
        max_density_hi: max_hi,
        sims,
        frames,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
