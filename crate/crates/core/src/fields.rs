//! Uniform cell-centered grid fields and the numerical primitives shared by
//! the simulator, the augmentation pipeline and the advection layer.
//!
//! Positions are measured in cells with cell `i` centered at `i`. Axis order
//! is `x, y[, z]`; storage is channel-major and then `z, y, x` with `x`
//! varying fastest. Vector channels are ordered `v_x, v_y[, v_z]` and hold
//! velocities in cells per frame at the field's own resolution.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    shape: Vec<usize>,
    channels: usize,
    data: Vec<f32>,
}

/// How values rescale when a field changes resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    /// Values are resolution independent (density, vorticity).
    Passive,
    /// Values are in cells per frame and scale with the resolution.
    Velocity,
}

/// Multilinear interpolation stencil: up to eight cell indices and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub weight: [f64; 8],
    pub len: usize,
}

impl Stencil {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.len]
            .iter()
            .copied()
            .zip(self.weight[..self.len].iter().copied())
    }
}

fn check_dim(shape: &[usize]) -> Result<()> {
    if shape.len() != 2 && shape.len() != 3 {
        return Err(Error::Shape(format!(
            "grid dimension must be 2 or 3, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Shape(format!("empty axis in shape {shape:?}")));
    }
    Ok(())
}

impl GridField {
    pub fn zeros(shape: &[usize], channels: usize) -> Result<Self> {
        Self::filled(shape, channels, 0.0)
    }

    pub fn filled(shape: &[usize], channels: usize, value: f32) -> Result<Self> {
        check_dim(shape)?;
        if channels == 0 {
            return Err(Error::Shape("field needs at least one channel".into()));
        }
        let n = shape.iter().product::<usize>() * channels;
        Ok(Self {
            shape: shape.to_vec(),
            channels,
            data: vec![value; n],
        })
    }

    /// Constant vector field, one value per channel.
    pub fn constant_vector(shape: &[usize], value: &[f32]) -> Result<Self> {
        let mut f = Self::zeros(shape, value.len())?;
        for (c, &v) in value.iter().enumerate() {
            f.channel_mut(c).fill(v);
        }
        Ok(f)
    }

    pub fn from_data(shape: &[usize], channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dim(shape)?;
        let expected = shape.iter().product::<usize>() * channels;
        if channels == 0 || data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} x {} channels",
                data.len(),
                shape,
                channels
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(position, channel)` at every cell center.
    pub fn from_fn(
        shape: &[usize],
        channels: usize,
        mut f: impl FnMut([f64; 3], usize) -> f32,
    ) -> Result<Self> {
        let mut out = Self::zeros(shape, channels)?;
        let [nx, ny, nz] = out.extent();
        for c in 0..channels {
            let ch = out.channel_mut(c);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        ch[x + nx * (y + ny * z)] = f([x as f64, y as f64, z as f64], c);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[nx, ny, nz]`, with `nz = 1` for 2D fields.
    pub fn extent(&self) -> [usize; 3] {
        [
            self.shape[0],
            self.shape[1],
            self.shape.get(2).copied().unwrap_or(1),
        ]
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies one channel out as a scalar field.
    pub fn channel_field(&self, c: usize) -> GridField {
        GridField {
            shape: self.shape.clone(),
            channels: 1,
            data: self.channel(c).to_vec(),
        }
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.extent();
        x + nx * (y + ny * z)
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.cells() + self.linear_index(x, y, z)]
    }

    pub fn same_layout(&self, other: &GridField) -> bool {
        self.shape == other.shape && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GridField {
        GridField {
            shape: self.shape.clone(),
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> GridField {
        self.map(|v| v * s)
    }

    /// Stacks several fields of identical shape along the channel axis.
    pub fn stack(parts: &[&GridField]) -> Result<GridField> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        GridField::from_data(&first.shape, channels, data)
    }

    /// Tensor shape `[1, channels, nz, ny, nx]` of this field.
    pub fn tensor_shape(&self) -> [usize; 5] {
        let [nx, ny, nz] = self.extent();
        [1, self.channels, nz, ny, nx]
    }

    /// Stacks equally shaped fields along the batch axis.
    pub fn batch_tensor(fields: &[&GridField]) -> Result<Tensor<f32>> {
        let first = fields
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut shape = first.tensor_shape();
        shape[0] = fields.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for f in fields {
            if !f.same_layout(first) {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?}",
                    f.shape, first.shape
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Tensor::from_vec(shape, data))
    }

    /// Batch entry `n` of a tensor as a field of dimension `dim`.
    pub fn from_tensor(t: &Tensor<f32>, n: usize, dim: usize) -> Result<GridField> {
        let [_, c, d, h, w] = t.shape();
        let shape: Vec<usize> = match dim {
            2 if d == 1 => vec![w, h],
            3 => vec![w, h, d],
            _ => {
                return Err(Error::Shape(format!(
                    "tensor {:?} is not a {dim}D field",
                    t.shape()
                )))
            }
        };
        GridField::from_data(&shape, c, t.sample(n).to_vec())
    }

    /// Extracts the box `[origin, origin + shape)`; the box must be in range.
    pub fn crop(&self, origin: &[usize], shape: &[usize]) -> Result<GridField> {
        if origin.len() != self.dim() || shape.len() != self.dim() {
            return Err(Error::Shape("crop rank mismatch".into()));
        }
        for a in 0..self.dim() {
            if origin[a] + shape[a] > self.shape[a] {
                return Err(Error::Shape(format!(
                    "crop {:?}+{:?} exceeds {:?}",
                    origin, shape, self.shape
                )));
            }
        }
        let mut out = GridField::zeros(shape, self.channels)?;
        let [ox, oy, oz] = pad3(origin, 0);
        let [nx, ny, nz] = out.extent();
        for c in 0..self.channels {
            for z in 0..nz {
                for y in 0..ny {
                    let src = self.linear_index(ox, oy + y, oz + z);
                    let dst = out.linear_index(0, y, z);
                    let sc = c * self.cells();
                    let dc = c * out.cells();
                    out.data[dc + dst..dc + dst + nx]
                        .copy_from_slice(&self.data[sc + src..sc + src + nx]);
                }
            }
        }
        Ok(out)
    }

    /// Writes `part` into this field at `origin`.
    pub fn paste(&mut self, part: &GridField, origin: &[usize]) -> Result<()> {
        if part.channels != self.channels || part.dim() != self.dim() {
            return Err(Error::Shape("paste layout mismatch".into()));
        }
        for a in 0..self.dim() {
            if origin[a] + part.shape[a] > self.shape[a] {
                return Err(Error::Shape("paste out of range".into()));
            }
        }
        let [ox, oy, oz] = pad3(origin, 0);
        let [nx, ny, nz] = part.extent();
        let (sc, pc) = (self.cells(), part.cells());
        for c in 0..self.channels {
            for z in 0..nz {
                for y in 0..ny {
                    let dst = self.linear_index(ox, oy + y, oz + z);
                    let src = part.linear_index(0, y, z);
                    self.data[c * sc + dst..c * sc + dst + nx]
                        .copy_from_slice(&part.data[c * pc + src..c * pc + src + nx]);
                }
            }
        }
        Ok(())
    }

    /// Interpolation stencil at continuous position `p` (cell units),
    /// clamped to the cell-center hull of the grid.
    pub fn stencil(&self, p: &[f64]) -> Stencil {
        let ext = self.extent();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = ext[a];
            let pa = if a < self.dim() { p[a] } else { 0.0 };
            if n == 1 {
                continue;
            }
            let hi = (n - 1) as f64;
            let q = if pa.is_nan() { 0.0 } else { pa.clamp(0.0, hi) };
            let i0 = (q.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = q - i0 as f64;
        }
        let corners = 1usize << self.dim();
        let mut st = Stencil {
            idx: [0; 8],
            weight: [0.0; 8],
            len: corners,
        };
        for k in 0..corners {
            let mut cell = [0usize; 3];
            let mut w = 1.0;
            for a in 0..self.dim() {
                let bit = (k >> a) & 1;
                if ext[a] == 1 {
                    // Degenerate axis: all weight on the single cell.
                    cell[a] = 0;
                    if bit == 1 {
                        w = 0.0;
                    }
                    continue;
                }
                cell[a] = base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            st.idx[k] = cell[0] + ext[0] * (cell[1] + ext[1] * cell[2]);
            st.weight[k] = w;
        }
        st
    }

    /// Multilinear interpolation of every channel at `p`, clamp-to-edge.
    pub fn sample_linear(&self, p: &[f64]) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.sample_linear_into(p, &mut out);
        out
    }

    pub fn sample_linear_into(&self, p: &[f64], out: &mut [f32]) {
        let st = self.stencil(p);
        let n = self.cells();
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let ch = &self.data[c * n..(c + 1) * n];
            let v: f64 = st.iter().map(|(i, w)| w * ch[i] as f64).sum();
            *o = v as f32;
        }
    }
}

pub(crate) fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    [
        v.first().copied().unwrap_or(fill),
        v.get(1).copied().unwrap_or(fill),
        v.get(2).copied().unwrap_or(fill),
    ]
}

/// Derivative of `ch` along `axis` at cell `(x, y, z)`: central differences in
/// the interior, one-sided at the boundary.
fn partial(ch: &[f32], ext: [usize; 3], axis: usize, pos: [usize; 3]) -> f64 {
    let n = ext[axis];
    let stride = match axis {
        0 => 1,
        1 => ext[0],
        _ => ext[0] * ext[1],
    };
    let i = pos[axis];
    let here = pos[0] + ext[0] * (pos[1] + ext[1] * pos[2]);
    if i == 0 {
        ch[here + stride] as f64 - ch[here] as f64
    } else if i == n - 1 {
        ch[here] as f64 - ch[here - stride] as f64
    } else {
        0.5 * (ch[here + stride] as f64 - ch[here - stride] as f64)
    }
}

/// Vorticity of a velocity field. 2D yields one channel
/// (`dv_y/dx - dv_x/dy`), 3D yields the three components of the curl.
pub fn curl(v: &GridField) -> Result<GridField> {
    let d = v.dim();
    if v.channels() != d {
        return Err(Error::Shape(format!(
            "curl needs {d} velocity channels, got {}",
            v.channels()
        )));
    }
    if v.shape().iter().any(|&n| n < 3) {
        return Err(Error::DegenerateGrid(format!(
            "curl needs at least 3 cells per axis, got {:?}",
            v.shape()
        )));
    }
    let ext = v.extent();
    let out_ch = if d == 2 { 1 } else { 3 };
    let mut out = GridField::zeros(v.shape(), out_ch)?;
    let n = v.cells();
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            for x in 0..ext[0] {
                let pos = [x, y, z];
                let i = x + ext[0] * (y + ext[1] * z);
                let dv = |comp: usize, axis: usize| partial(v.channel(comp), ext, axis, pos);
                if d == 2 {
                    out.data[i] = (dv(1, 0) - dv(0, 1)) as f32;
                } else {
                    out.data[i] = (dv(2, 1) - dv(1, 2)) as f32;
                    out.data[n + i] = (dv(0, 2) - dv(2, 0)) as f32;
                    out.data[2 * n + i] = (dv(1, 0) - dv(0, 1)) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Block average over `factor^d` cells; velocity values are additionally
/// divided by `factor` to stay in coarse cells per frame.
pub fn downsample(f: &GridField, factor: usize, kind: ScaleKind) -> Result<GridField> {
    if factor == 0 {
        return Err(Error::Invalid("downsample factor must be >= 1".into()));
    }
    if f.shape().iter().any(|n| n % factor != 0) {
        return Err(Error::Shape(format!(
            "shape {:?} not divisible by {factor}",
            f.shape()
        )));
    }
    let coarse: Vec<usize> = f.shape().iter().map(|n| n / factor).collect();
    let mut out = GridField::zeros(&coarse, f.channels())?;
    let [cx, cy, cz] = out.extent();
    let fz = if f.dim() == 3 { factor } else { 1 };
    let block = (factor * factor * fz) as f64;
    let rescale = match kind {
        ScaleKind::Passive => 1.0,
        ScaleKind::Velocity => 1.0 / factor as f64,
    };
    for c in 0..f.channels() {
        let src = f.channel(c);
        let [nx, ny, _] = f.extent();
        let dst = out.channel_mut(c);
        for z in 0..cz {
            for y in 0..cy {
                for x in 0..cx {
                    let mut acc = 0.0f64;
                    for dz in 0..fz {
                        for dy in 0..factor {
                            let row = nx * ((y * factor + dy) + ny * (z * fz + dz));
                            for dx in 0..factor {
                                acc += src[row + x * factor + dx] as f64;
                            }
                        }
                    }
                    dst[x + cx * (y + cy * z)] = (acc / block * rescale) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor replication by `factor`; velocity values are multiplied
/// by `factor`.
pub fn upsample_nn(f: &GridField, factor: usize, kind: ScaleKind) -> Result<GridField> {
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    let fine: Vec<usize> = f.shape().iter().map(|n| n * factor).collect();
    let mut out = GridField::zeros(&fine, f.channels())?;
    let [nx, ny, nz] = out.extent();
    let fz = if f.dim() == 3 { factor } else { 1 };
    let s = match kind {
        ScaleKind::Passive => 1.0,
        ScaleKind::Velocity => factor as f32,
    };
    let [sx, sy, _] = f.extent();
    for c in 0..f.channels() {
        let src = f.channel(c).to_vec();
        let dst = out.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                let srow = sx * (y / factor + sy * (z / fz));
                let drow = nx * (y + ny * z);
                for x in 0..nx {
                    dst[drow + x] = src[srow + x / factor] * s;
                }
            }
        }
    }
    Ok(out)
}
