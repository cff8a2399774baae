//! Differentiable first-order semi-Lagrangian advection.
//!
//! For a fixed velocity the advection operator is linear in the advected
//! quantity, `A(y, v) = M y`. [`AdvectionCoeffs`] stores the sparse rows of
//! `M` (one multilinear backtrace stencil per cell); [`AdvectionCoeffs::apply`]
//! evaluates `M y` and [`AdvectionCoeffs::apply_transpose`] evaluates `M^T g`,
//! which is the gradient of the forward map and is what the training graph
//! uses during backpropagation.

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::fields::{upsample_nn, GridField, ScaleKind};

#[derive(Debug, Clone, PartialEq)]
pub struct AdvectionCoeffs {
    shape: Vec<usize>,
    corners: usize,
    idx: Vec<u32>,
    weight: Vec<f64>,
}

impl AdvectionCoeffs {
    /// Identity operator on a grid of the given shape.
    pub fn identity(shape: &[usize]) -> Result<Self> {
        let v = GridField::zeros(shape, shape.len())?;
        Self::build(&v, 1.0)
    }

    /// Rows of `M` for one Euler step of length `dt`: cell `p` reads the
    /// multilinear stencil at `p - dt * v(p)`, clamped to the domain.
    pub fn build(v: &GridField, dt: f64) -> Result<Self> {
        let d = v.dim();
        if v.channels() != d {
            return Err(Error::Shape(format!(
                "advection velocity needs {d} channels, got {}",
                v.channels()
            )));
        }
        let corners = 1usize << d;
        let n = v.cells();
        let mut idx = Vec::with_capacity(n * corners);
        let mut weight = Vec::with_capacity(n * corners);
        let [nx, ny, nz] = v.extent();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let here = [x as f64, y as f64, z as f64];
                    let mut p = [0.0f64; 3];
                    for a in 0..d {
                        p[a] = here[a] - dt * v.channel(a)[i] as f64;
                    }
                    let st = v.stencil(&p[..d]);
                    for (j, w) in st.iter() {
                        idx.push(j as u32);
                        weight.push(w);
                    }
                }
            }
        }
        Ok(Self {
            shape: v.shape().to_vec(),
            corners,
            idx,
            weight,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cells(&self) -> usize {
        self.idx.len() / self.corners
    }

    /// Stencil of row `i` as `(source cell, weight)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = i * self.corners..(i + 1) * self.corners;
        self.idx[r.clone()]
            .iter()
            .map(|&j| j as usize)
            .zip(self.weight[r].iter().copied())
    }

    /// `dst = M src` for one channel.
    pub fn apply_slice<T: Real>(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(src.len(), self.cells());
        for (i, out) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (j, w) in self.row(i) {
                acc += w * src[j].as_f64();
            }
            *out = T::lit(acc);
        }
    }

    /// `dst += M^T src` for one channel.
    pub fn apply_transpose_slice<T: Real>(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(src.len(), self.cells());
        for (i, &g) in src.iter().enumerate() {
            let g = g.as_f64();
            if g == 0.0 {
                continue;
            }
            for (j, w) in self.row(i) {
                dst[j] = T::lit(dst[j].as_f64() + w * g);
            }
        }
    }

    fn check(&self, f: &GridField) -> Result<()> {
        if f.shape() != self.shape.as_slice() {
            return Err(Error::Shape(format!(
                "advection coefficients for {:?} applied to {:?}",
                self.shape,
                f.shape()
            )));
        }
        Ok(())
    }

    /// `M y`, channel by channel.
    pub fn apply(&self, y: &GridField) -> Result<GridField> {
        self.check(y)?;
        let mut out = GridField::zeros(y.shape(), y.channels())?;
        for c in 0..y.channels() {
            self.apply_slice(y.channel(c), out.channel_mut(c));
        }
        Ok(out)
    }

    /// `M^T g`, channel by channel.
    pub fn apply_transpose(&self, g: &GridField) -> Result<GridField> {
        self.check(g)?;
        let mut out = GridField::zeros(g.shape(), g.channels())?;
        for c in 0..g.channels() {
            self.apply_transpose_slice(g.channel(c), out.channel_mut(c));
        }
        Ok(out)
    }
}

/// Converts a low-resolution velocity to the high-resolution grid used for
/// alignment (nearest-neighbor replication, values rescaled by `factor`).
pub fn velocity_to_high(v_lo: &GridField, factor: usize) -> Result<GridField> {
    upsample_nn(v_lo, factor, ScaleKind::Velocity)
}

/// Coefficients used to align a frame triplet onto its center frame:
/// the previous frame is advected forward with `v_prev`, the next frame
/// backward with `-v_next`.
pub fn triplet_coeffs(v_prev: &GridField, v_next: &GridField) -> Result<[AdvectionCoeffs; 2]> {
    Ok([
        AdvectionCoeffs::build(v_prev, 1.0)?,
        AdvectionCoeffs::build(v_next, -1.0)?,
    ])
}

/// `(A(f_prev, v_prev), f_t, A(f_next, -v_next))`, all at one resolution.
pub fn align_triplet(
    frames: [&GridField; 3],
    v_prev: &GridField,
    v_next: &GridField,
) -> Result<[GridField; 3]> {
    let [fwd, bwd] = triplet_coeffs(v_prev, v_next)?;
    Ok([
        fwd.apply(frames[0])?,
        frames[1].clone(),
        bwd.apply(frames[2])?,
    ])
}

/// Mean over cells of the variance across the three frames.
pub fn triplet_variance(frames: &[GridField; 3]) -> f64 {
    let n = frames[0].data().len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = [
            frames[0].data()[i] as f64,
            frames[1].data()[i] as f64,
            frames[2].data()[i] as f64,
        ];
        let m = (a[0] + a[1] + a[2]) / 3.0;
        acc += a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
    }
    acc / n as f64
}
