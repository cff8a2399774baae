//! In-memory training data: frames loaded from a dataset manifest and
//! augmented batches drawn from them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_directional, apply_passive, recompute_derived, sample_transform, AugmentRanges,
    AugmentationTransform,
};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::fields::{curl, GridField};
use crate::sim::{DatasetManifest, Split, MANIFEST_FILE};
use crate::tgf;

/// Which low-resolution fields the generator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFields {
    /// Density only.
    Rho,
    /// Density and velocity.
    RhoV,
    /// Density, velocity and vorticity.
    RhoVW,
}

impl InputFields {
    pub fn channels(self, dim: usize) -> usize {
        let w = if dim == 3 { 3 } else { 1 };
        match self {
            InputFields::Rho => 1,
            InputFields::RhoV => 1 + dim,
            InputFields::RhoVW => 1 + dim + w,
        }
    }

    pub fn has_velocity(self) -> bool {
        self != InputFields::Rho
    }
}

/// Stacks the generator input channels. Vorticity is computed from
/// `velocity` when requested.
pub fn input_bundle(
    density: &GridField,
    velocity: &GridField,
    fields: InputFields,
) -> Result<GridField> {
    match fields {
        InputFields::Rho => Ok(density.clone()),
        InputFields::RhoV => GridField::stack(&[density, velocity]),
        InputFields::RhoVW => GridField::stack(&[density, velocity, &curl(velocity)?]),
    }
}

/// One stored time step.
#[derive(Debug, Clone)]
pub struct Frame {
    pub sim: usize,
    pub frame: usize,
    pub x_density: GridField,
    pub x_velocity: GridField,
    pub y_density: GridField,
    pub y_velocity: GridField,
}

/// All frames of one split held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    /// Frame indices of every `(t-1, t, t+1)` triplet.
    pub triplets: Vec<[usize; 3]>,
}

impl Dataset {
    /// Loads the frames of `split`. `path` is a manifest file or its
    /// directory.
    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let frames = manifest
            .frames
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                Ok(Frame {
                    sim: e.sim,
                    frame: e.frame,
                    x_density: tgf::read(&root.join(&e.x_density))?,
                    x_velocity: tgf::read(&root.join(&e.x_velocity))?,
                    y_density: tgf::read(&root.join(&e.y_density))?,
                    y_velocity: tgf::read(&root.join(&e.y_velocity))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index: HashMap<(usize, usize), usize> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.sim, f.frame), i))
            .collect();
        let triplets = manifest
            .triplet_centers(split)
            .into_iter()
            .map(|(s, t)| [index[&(s, t - 1)], index[&(s, t)], index[&(s, t + 1)]])
            .collect();
        Ok(Self {
            manifest,
            root,
            frames,
            triplets,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn factor(&self) -> usize {
        self.manifest.scale
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Draws augmented training tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSampler {
    /// Low-resolution tile edge.
    pub tile: usize,
    pub factor: usize,
    pub dim: usize,
    pub ranges: AugmentRanges,
    pub fields: InputFields,
}

/// A batch of conditional pairs: generator inputs, their density channel
/// and high-resolution targets.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x: Tensor<f32>,
    pub x_density: Tensor<f32>,
    pub y: Tensor<f32>,
}

/// A batch of consecutive-frame triplets. Velocities are low-resolution,
/// augmented like the frames; entry `i` of `v_prev`/`v_next` belongs to
/// sample `i`.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub x: [Tensor<f32>; 3],
    pub x_density: [Tensor<f32>; 3],
    pub y: [Tensor<f32>; 3],
    pub v_prev: Vec<GridField>,
    pub v_next: Vec<GridField>,
}

struct Tile {
    x: GridField,
    x_density: GridField,
    x_velocity: GridField,
    y: GridField,
}

impl TileSampler {
    fn lo_shape(&self) -> Vec<usize> {
        vec![self.tile; self.dim]
    }

    fn hi_shape(&self) -> Vec<usize> {
        vec![self.tile * self.factor; self.dim]
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        source: &[usize],
    ) -> Result<AugmentationTransform> {
        sample_transform(rng, &self.ranges, &self.lo_shape(), source, self.factor)
    }

    fn cut(
        &self,
        f: &Frame,
        lo: &AugmentationTransform,
        hi: &AugmentationTransform,
    ) -> Result<Tile> {
        let shape = self.lo_shape();
        let x_density = apply_passive(&f.x_density, lo, &shape)?;
        let x_velocity = apply_directional(&f.x_velocity, lo, &shape)?;
        let x = match self.fields {
            InputFields::Rho => x_density.clone(),
            InputFields::RhoV => GridField::stack(&[&x_density, &x_velocity])?,
            InputFields::RhoVW => {
                GridField::stack(&[&x_density, &x_velocity, &recompute_derived(&x_velocity)?])?
            }
        };
        let y = apply_passive(&f.y_density, hi, &self.hi_shape())?;
        Ok(Tile {
            x,
            x_density,
            x_velocity,
            y,
        })
    }

    /// `batch` single frames, each with its own transform.
    pub fn pairs<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        batch: usize,
        rng: &mut R,
    ) -> Result<PairBatch> {
        if data.frames.is_empty() || batch == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tiles = Vec::with_capacity(batch);
        for _ in 0..batch {
            let f = &data.frames[rng.random_range(0..data.frames.len())];
            let lo = self.draw(rng, f.x_density.shape())?;
            tiles.push(self.cut(f, &lo, &lo.for_resolution(self.factor))?);
        }
        let col = |g: fn(&Tile) -> &GridField| {
            GridField::batch_tensor(&tiles.iter().map(g).collect::<Vec<_>>())
        };
        Ok(PairBatch {
            x: col(|t| &t.x)?,
            x_density: col(|t| &t.x_density)?,
            y: col(|t| &t.y)?,
        })
    }

    /// `batch` triplets; the three frames of one triplet share a transform.
    pub fn triplets<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        batch: usize,
        rng: &mut R,
    ) -> Result<TripletBatch> {
        if data.triplets.is_empty() || batch == 0 {
            return Err(Error::Invalid("empty triplet batch".into()));
        }
        let mut tiles: Vec<[Tile; 3]> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = data.triplets[rng.random_range(0..data.triplets.len())];
            let lo = self.draw(rng, data.frames[idx[0]].x_density.shape())?;
            let hi = lo.for_resolution(self.factor);
            let [a, b, c] = idx.map(|i| self.cut(&data.frames[i], &lo, &hi));
            tiles.push([a?, b?, c?]);
        }
        let col = |k: usize, g: fn(&Tile) -> &GridField| {
            GridField::batch_tensor(&tiles.iter().map(|t| g(&t[k])).collect::<Vec<_>>())
        };
        let cols = |g: fn(&Tile) -> &GridField| -> Result<[Tensor<f32>; 3]> {
            Ok([col(0, g)?, col(1, g)?, col(2, g)?])
        };
        Ok(TripletBatch {
            x: cols(|t| &t.x)?,
            x_density: cols(|t| &t.x_density)?,
            y: cols(|t| &t.y)?,
            v_prev: tiles.iter().map(|t| t[0].x_velocity.clone()).collect(),
            v_next: tiles.iter().map(|t| t[2].x_velocity.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        generate_dataset(
            &GenConfig {
                sims: 2,
                frames: 14,
                res: 32,
                seed: 3,
                density_threshold: 0.0,
                test_fraction: 0.5,
                ..GenConfig::default()
            },
            dir,
        )
        .unwrap()
    }

    #[test]
    fn channel_counts() {
        assert_eq!(InputFields::Rho.channels(2), 1);
        assert_eq!(InputFields::RhoV.channels(2), 3);
        assert_eq!(InputFields::RhoVW.channels(2), 4);
        assert_eq!(InputFields::RhoV.channels(3), 4);
        assert_eq!(InputFields::RhoVW.channels(3), 7);
    }

    #[test]
    fn load_and_sample() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path());
        let train = Dataset::load(dir.path(), Split::Train).unwrap();
        let test = Dataset::load(&dir.path().join(MANIFEST_FILE), Split::Test).unwrap();
        assert_eq!(train.frames.len() + test.frames.len(), m.frames.len());
        assert!(train.frames.iter().all(|f| f.sim == 0));
        assert_eq!(train.triplets.len(), m.triplet_centers(Split::Train).len());
        for t in &train.triplets {
            let f = t.map(|i| &train.frames[i]);
            assert_eq!(f[0].frame + 1, f[1].frame);
            assert_eq!(f[1].frame + 1, f[2].frame);
        }

        let sampler = TileSampler {
            tile: 4,
            factor: 4,
            dim: 2,
            ranges: AugmentRanges::default(),
            fields: InputFields::RhoVW,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sampler.pairs(&train, 5, &mut rng).unwrap();
        assert_eq!(p.x.shape(), [5, 4, 1, 4, 4]);
        assert_eq!(p.x_density.shape(), [5, 1, 1, 4, 4]);
        assert_eq!(p.y.shape(), [5, 1, 1, 16, 16]);
        let t = sampler.triplets(&train, 3, &mut rng).unwrap();
        assert_eq!(t.y[2].shape(), [3, 1, 1, 16, 16]);
        assert_eq!(t.v_prev.len(), 3);
        assert_eq!(t.v_next[0].shape(), &[4, 4]);
        assert!(sampler.pairs(&train, 0, &mut rng).is_err());

        // identical seeds give identical batches
        let a = sampler
            .pairs(&train, 2, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = sampler
            .pairs(&train, 2, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a.y.data(), b.y.data());
    }

    #[test]
    fn unaugmented_tiles_match_stored_frames() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let train = Dataset::load(dir.path(), Split::Train).unwrap();
        let sampler = TileSampler {
            tile: 8,
            factor: 4,
            dim: 2,
            ranges: AugmentRanges::translation_only(),
            fields: InputFields::RhoV,
        };
        let f = &train.frames[3];
        let lo = AugmentationTransform::translation(2, &[0.0, 0.0]);
        let tile = sampler.cut(f, &lo, &lo.for_resolution(4)).unwrap();
        assert_eq!(tile.x_density.data(), f.x_density.data());
        assert_eq!(tile.y.data(), f.y_density.data());
        let want = input_bundle(&f.x_density, &f.x_velocity, InputFields::RhoV).unwrap();
        assert_eq!(tile.x.data(), want.data());
    }
}
