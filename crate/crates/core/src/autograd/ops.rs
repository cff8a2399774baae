//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::tape::{BackwardFn, Var};
use super::tensor::{Real, Tensor};
use crate::advect::AdvectionCoeffs;

/// Stride and padding of a convolution over the three spatial axes
/// `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
}

impl ConvGeometry {
    /// Output size equals `ceil(input / stride)` per axis, with any odd
    /// padding placed after the data.
    pub fn same(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut g = ConvGeometry {
            stride,
            pad_lo: [0; 3],
            pad_hi: [0; 3],
        };
        for a in 0..3 {
            let out = input[a].div_ceil(stride[a]);
            let total = ((out - 1) * stride[a] + kernel[a]).saturating_sub(input[a]);
            g.pad_lo[a] = total / 2;
            g.pad_hi[a] = total - total / 2;
        }
        g
    }

    pub fn output(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + self.pad_lo[a] + self.pad_hi[a];
            assert!(padded >= kernel[a], "kernel larger than padded input");
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self, kernel: [usize; 3]) -> bool {
        kernel == [1, 1, 1]
            && self.stride == [1, 1, 1]
            && self.pad_lo == [0; 3]
            && self.pad_hi == [0; 3]
    }
}

struct ConvDims {
    cin: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    geo: ConvGeometry,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
    fn os(&self) -> usize {
        self.out.iter().product()
    }
}

/// Unfolds one sample `[cin, D, H, W]` into a `K x OS` column matrix.
fn im2col<T: Real>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.out;
    let [sd, sh, sw] = d.geo.stride;
    let [pd, ph, pw] = d.geo.pad_lo;
    let os = d.os();
    let mut row = 0;
    for c in 0..d.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * os..(row + 1) * os];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[o] = if ix < 0 || ix >= iw as isize {
                                    T::zero()
                                } else {
                                    xc[base + ix as usize]
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[cin, D, H, W]`.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, x: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.out;
    let [sd, sh, sw] = d.geo.stride;
    let [pd, ph, pw] = d.geo.pad_lo;
    let os = d.os();
    let mut row = 0;
    for c in 0..d.cin {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * os..(row + 1) * os];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < iw as isize {
                                    xc[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Logit at which a sigmoid output reaches `1 - PROB_EPS`.
pub fn logit_clamp() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

impl<'t, T: Real> Var<'t, T> {
    /// N-d convolution. `weight` is `[cout, cin, kd, kh, kw]`, `bias` is
    /// `[cout, 1, 1, 1, 1]`.
    pub fn conv(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        geo: ConvGeometry,
    ) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let [n, cin, ..] = x.shape();
        let [cout, wcin, kd, kh, kw] = w.shape();
        assert_eq!(cin, wcin, "conv input channels");
        let dims = ConvDims {
            cin,
            input: x.spatial(),
            kernel: [kd, kh, kw],
            out: geo.output(x.spatial(), [kd, kh, kw]),
            geo,
        };
        let (k, os) = (dims.k(), dims.os());
        let pointwise = geo.is_pointwise(dims.kernel);
        let mut out = Tensor::zeros([n, cout, dims.out[0], dims.out[1], dims.out[2]]);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); k * os]
        };
        let bvals = bias.map(|b| b.value());
        for s in 0..n {
            let xs = x.sample(s);
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &dims, &mut cols);
                &cols
            };
            let dst = out.sample_mut(s);
            if let Some(b) = &bvals {
                for (co, chunk) in dst.chunks_mut(os).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let beta = if bvals.is_some() { T::one() } else { T::zero() };
            T::gemm(
                cout,
                k,
                os,
                T::one(),
                w.data(),
                (k as isize, 1),
                src,
                (os as isize, 1),
                beta,
                dst,
                (os as isize, 1),
            );
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().op(&parents, out, move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
                let mut gb = (has_bias && needs[2]).then(|| Tensor::zeros([cout, 1, 1, 1, 1]));
                let mut cols = if pointwise {
                    Vec::new()
                } else {
                    vec![T::zero(); k * os]
                };
                let mut dcols = vec![T::zero(); k * os];
                for s in 0..n {
                    let gs = g.sample(s);
                    if let Some(gb) = gb.as_mut() {
                        for (co, chunk) in gs.chunks(os).enumerate() {
                            gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let src: &[T] = if pointwise {
                            x.sample(s)
                        } else {
                            im2col(x.sample(s), &dims, &mut cols);
                            &cols
                        };
                        T::gemm(
                            cout,
                            os,
                            k,
                            T::one(),
                            gs,
                            (os as isize, 1),
                            src,
                            (1, os as isize),
                            T::one(),
                            gw.data_mut(),
                            (k as isize, 1),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        if pointwise {
                            T::gemm(
                                k,
                                cout,
                                os,
                                T::one(),
                                w.data(),
                                (1, k as isize),
                                gs,
                                (os as isize, 1),
                                T::zero(),
                                gx.sample_mut(s),
                                (os as isize, 1),
                            );
                        } else {
                            T::gemm(
                                k,
                                cout,
                                os,
                                T::one(),
                                w.data(),
                                (1, k as isize),
                                gs,
                                (os as isize, 1),
                                T::zero(),
                                &mut dcols,
                                (os as isize, 1),
                            );
                            col2im(&dcols, &dims, gx.sample_mut(s));
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(gb);
                }
                res
            }) as BackwardFn<T>
        })
    }

    /// Dense layer on the flattened sample. `weight` is `[out, features, 1, 1, 1]`,
    /// `bias` is `[out, 1, 1, 1, 1]`; output is `[n, out, 1, 1, 1]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let n = x.batch();
        let f = x.sample_len();
        let o = w.shape()[0];
        assert_eq!(w.shape()[1], f, "linear feature count");
        let mut out = Tensor::zeros([n, o, 1, 1, 1]);
        for s in 0..n {
            out.sample_mut(s).copy_from_slice(b.data());
        }
        T::gemm(
            n,
            f,
            o,
            T::one(),
            x.data(),
            (f as isize, 1),
            w.data(),
            (1, f as isize),
            T::one(),
            out.data_mut(),
            (o as isize, 1),
        );
        self.tape().op(&[self, weight, bias], out, move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let gx = needs[0].then(|| {
                    let mut gx = Tensor::zeros(x.shape());
                    T::gemm(
                        n,
                        o,
                        f,
                        T::one(),
                        g.data(),
                        (o as isize, 1),
                        w.data(),
                        (f as isize, 1),
                        T::zero(),
                        gx.data_mut(),
                        (f as isize, 1),
                    );
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = Tensor::zeros(w.shape());
                    T::gemm(
                        o,
                        n,
                        f,
                        T::one(),
                        g.data(),
                        (1, o as isize),
                        x.data(),
                        (f as isize, 1),
                        T::zero(),
                        gw.data_mut(),
                        (f as isize, 1),
                    );
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = Tensor::zeros([o, 1, 1, 1, 1]);
                    for s in 0..n {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(g.sample(s)) {
                            *acc += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }) as BackwardFn<T>
        })
    }

    /// Batch normalization with batch statistics (no learned affine).
    /// Returns the output and the per-channel batch mean and biased variance.
    pub fn batch_norm(self, eps: f64) -> (Var<'t, T>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let [n, c, ..] = x.shape();
        let s = x.spatial_len();
        let count = (n * s) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..n {
            let xs = x.sample(b);
            for ch in 0..c {
                mean[ch] += xs[ch * s..(ch + 1) * s]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            let xs = x.sample(b);
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += xs[ch * s..(ch + 1) * s]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let (xs, ys) = (x.sample(b), y.sample_mut(b));
            for ch in 0..c {
                for i in ch * s..(ch + 1) * s {
                    ys[i] = T::lit((xs[i].as_f64() - mean[ch]) * inv[ch]);
                }
            }
        }
        let y = Rc::new(y);
        let yk = y.clone();
        let out = self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _needs: &[bool]| {
                let mut gm = vec![0.0f64; c];
                let mut gxm = vec![0.0f64; c];
                for b in 0..n {
                    let (gs, ys) = (g.sample(b), yk.sample(b));
                    for ch in 0..c {
                        for i in ch * s..(ch + 1) * s {
                            gm[ch] += gs[i].as_f64();
                            gxm[ch] += gs[i].as_f64() * ys[i].as_f64();
                        }
                    }
                }
                let mut gx = Tensor::zeros(yk.shape());
                for b in 0..n {
                    let (gs, ys) = (g.sample(b), yk.sample(b));
                    let gxs = gx.sample_mut(b);
                    for ch in 0..c {
                        let (a, bm) = (gm[ch] / count, gxm[ch] / count);
                        for i in ch * s..(ch + 1) * s {
                            gxs[i] = T::lit(inv[ch] * (gs[i].as_f64() - a - ys[i].as_f64() * bm));
                        }
                    }
                }
                vec![Some(gx)]
            }) as BackwardFn<T>
        });
        (out, mean, var)
    }

    /// `y = x * scale[c] + shift[c]` with constant per-channel coefficients
    /// (batch normalization in inference mode).
    pub fn channel_affine(self, scale: &[f64], shift: &[f64]) -> Var<'t, T> {
        let x = self.value();
        let [n, c, ..] = x.shape();
        let s = x.spatial_len();
        assert_eq!(scale.len(), c);
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let (xs, ys) = (x.sample(b), y.sample_mut(b));
            for ch in 0..c {
                for i in ch * s..(ch + 1) * s {
                    ys[i] = T::lit(xs[i].as_f64() * scale[ch] + shift[ch]);
                }
            }
        }
        let scale = scale.to_vec();
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut gx = Tensor::zeros(g.shape());
                for b in 0..n {
                    let (gs, gxs) = (g.sample(b), gx.sample_mut(b));
                    for ch in 0..c {
                        let k = T::lit(scale[ch]);
                        for i in ch * s..(ch + 1) * s {
                            gxs[i] = gs[i] * k;
                        }
                    }
                }
                vec![Some(gx)]
            }) as BackwardFn<T>
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let k = T::lit(slope);
        let y = Rc::new(self.value().map(|v| if v > T::zero() { v } else { v * k }));
        let yk = y.clone();
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut gx = g.clone();
                for (gv, &yv) in gx.data_mut().iter_mut().zip(yk.data()) {
                    if yv <= T::zero() {
                        *gv *= k;
                    }
                }
                vec![Some(gx)]
            }) as BackwardFn<T>
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let mut y = (*self.value()).clone();
        y.add_assign(&other.value());
        self.tape().op(&[self, other], y, || {
            Box::new(|g: &Tensor<T>, needs: &[bool]| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }) as BackwardFn<T>
        })
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let k = T::lit(s);
        let y = self.value().map(|v| v * k);
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| vec![Some(g.map(|v| v * k))]) as BackwardFn<T>
        })
    }

    /// Sum of scalar (or equally shaped) nodes.
    pub fn sum_of(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let mut it = parts.iter();
        let first = *it.next().expect("sum of no terms");
        it.fold(first, |acc, &p| acc.add(p))
    }

    /// Nearest-neighbor upsampling by per-axis integer factors `(d, h, w)`.
    pub fn upsample_nearest(self, factors: [usize; 3]) -> Var<'t, T> {
        let x = self.value();
        let [n, c, d, h, w] = x.shape();
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut y = Tensor::zeros([n, c, od, oh, ow]);
        let planes = n * c;
        for p in 0..planes {
            let src = &x.data()[p * d * h * w..(p + 1) * d * h * w];
            let dst = &mut y.data_mut()[p * od * oh * ow..(p + 1) * od * oh * ow];
            for z in 0..od {
                for yy in 0..oh {
                    let srow = ((z / fd) * h + yy / fh) * w;
                    let drow = (z * oh + yy) * ow;
                    for xx in 0..ow {
                        dst[drow + xx] = src[srow + xx / fw];
                    }
                }
            }
        }
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut gx = Tensor::zeros([n, c, d, h, w]);
                for p in 0..planes {
                    let src = &g.data()[p * od * oh * ow..(p + 1) * od * oh * ow];
                    let dst = &mut gx.data_mut()[p * d * h * w..(p + 1) * d * h * w];
                    for z in 0..od {
                        for yy in 0..oh {
                            let srow = ((z / fd) * h + yy / fh) * w;
                            let drow = (z * oh + yy) * ow;
                            for xx in 0..ow {
                                dst[srow + xx / fw] += src[drow + xx];
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }) as BackwardFn<T>
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let [n, _, d, h, w] = vals[0].shape();
        let chans: Vec<usize> = vals.iter().map(|v| v.channels()).collect();
        let total: usize = chans.iter().sum();
        let s = d * h * w;
        let mut y = Tensor::zeros([n, total, d, h, w]);
        for b in 0..n {
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.spatial(), [d, h, w], "concat spatial mismatch");
                assert_eq!(v.batch(), n, "concat batch mismatch");
                let l = v.channels() * s;
                y.sample_mut(b)[off..off + l].copy_from_slice(v.sample(b));
                off += l;
            }
        }
        parts[0].tape().op(parts, y, move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let mut res = Vec::with_capacity(chans.len());
                let mut off = 0;
                for (i, &ch) in chans.iter().enumerate() {
                    let l = ch * s;
                    res.push(needs[i].then(|| {
                        let mut gp = Tensor::zeros([n, ch, d, h, w]);
                        for b in 0..n {
                            gp.sample_mut(b).copy_from_slice(&g.sample(b)[off..off + l]);
                        }
                        gp
                    }));
                    off += l;
                }
                res
            }) as BackwardFn<T>
        })
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let [_, c, d, h, w] = vals[0].shape();
        let sizes: Vec<usize> = vals.iter().map(|v| v.batch()).collect();
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.numel()).sum());
        for v in &vals {
            assert_eq!(
                &v.shape()[1..],
                &[c, d, h, w],
                "concat_batch shape mismatch"
            );
            data.extend_from_slice(v.data());
        }
        let y = Tensor::from_vec([sizes.iter().sum(), c, d, h, w], data);
        parts[0].tape().op(parts, y, move || {
            Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                let l = c * d * h * w;
                let mut off = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&sz, &need)| {
                        let r = need.then(|| {
                            Tensor::from_vec(
                                [sz, c, d, h, w],
                                g.data()[off * l..(off + sz) * l].to_vec(),
                            )
                        });
                        off += sz;
                        r
                    })
                    .collect()
            }) as BackwardFn<T>
        })
    }

    /// Batch entries `[start, start + len)`.
    pub fn slice_batch(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape();
        let l = x.sample_len();
        assert!(start + len <= shape[0], "slice_batch out of range");
        let y = Tensor::from_vec(
            [len, shape[1], shape[2], shape[3], shape[4]],
            x.data()[start * l..(start + len) * l].to_vec(),
        );
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut gx = Tensor::zeros(shape);
                gx.data_mut()[start * l..(start + len) * l].copy_from_slice(g.data());
                vec![Some(gx)]
            }) as BackwardFn<T>
        })
    }

    /// Applies a per-sample advection operator to every channel.
    pub fn advect(self, coeffs: &[Rc<AdvectionCoeffs>]) -> Var<'t, T> {
        let x = self.value();
        let [n, c, ..] = x.shape();
        let s = x.spatial_len();
        assert_eq!(coeffs.len(), n, "one advection operator per sample");
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            assert_eq!(coeffs[b].cells(), s, "advection operator size");
            let (xs, ys) = (x.sample(b), y.sample_mut(b));
            for ch in 0..c {
                coeffs[b].apply_slice(&xs[ch * s..(ch + 1) * s], &mut ys[ch * s..(ch + 1) * s]);
            }
        }
        let coeffs = coeffs.to_vec();
        self.tape().op(&[self], y, move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                let mut gx = Tensor::zeros(g.shape());
                for (b, op) in coeffs.iter().enumerate() {
                    let (gs, gxs) = (g.sample(b), gx.sample_mut(b));
                    for ch in 0..c {
                        op.apply_transpose_slice(
                            &gs[ch * s..(ch + 1) * s],
                            &mut gxs[ch * s..(ch + 1) * s],
                        );
                    }
                }
                vec![Some(gx)]
            }) as BackwardFn<T>
        })
    }

    /// Mean sigmoid cross entropy of logits against a constant label:
    /// `mean(-log D)` for `real`, `mean(-log(1 - D))` otherwise, with `D`
    /// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_logits_mean(self, real: bool) -> Var<'t, T> {
        let z = self.value();
        let count = z.numel() as f64;
        let lim = logit_clamp();
        let sign = if real { -1.0 } else { 1.0 };
        let loss: f64 = z
            .data()
            .iter()
            .map(|v| softplus(sign * v.as_f64().clamp(-lim, lim)))
            .sum::<f64>()
            / count;
        self.tape()
            .op(&[self], Tensor::scalar(T::lit(loss)), move || {
                Box::new(move |g: &Tensor<T>, _: &[bool]| {
                    let up = g.item().as_f64() / count;
                    let gx = z.map(|v| {
                        let a = v.as_f64();
                        if a.abs() > lim {
                            return T::zero();
                        }
                        let p = sigmoid(a);
                        T::lit(up * if real { p - 1.0 } else { p })
                    });
                    vec![Some(gx)]
                }) as BackwardFn<T>
            })
    }

    /// `mean |a - b|`.
    pub fn l1_mean(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "l1 shape mismatch");
        let count = a.numel() as f64;
        let loss: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .sum::<f64>()
            / count;
        self.tape()
            .op(&[self, other], Tensor::scalar(T::lit(loss)), move || {
                Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                    let up = T::lit(g.item().as_f64() / count);
                    let mut ga = Tensor::zeros(a.shape());
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        let d = *x - *y;
                        *o = if d > T::zero() {
                            up
                        } else if d < T::zero() {
                            -up
                        } else {
                            T::zero()
                        };
                    }
                    let gb = needs[1].then(|| ga.map(|v| -v));
                    vec![needs[0].then_some(ga), gb]
                }) as BackwardFn<T>
            })
    }

    /// `mean (a - b)^2`.
    pub fn mse_mean(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
        let count = a.numel() as f64;
        let loss: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            / count;
        self.tape()
            .op(&[self, other], Tensor::scalar(T::lit(loss)), move || {
                Box::new(move |g: &Tensor<T>, needs: &[bool]| {
                    let up = T::lit(2.0 * g.item().as_f64() / count);
                    let mut ga = Tensor::zeros(a.shape());
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *o = (x - y) * up;
                    }
                    let gb = needs[1].then(|| ga.map(|v| -v));
                    vec![needs[0].then_some(ga), gb]
                }) as BackwardFn<T>
            })
    }

    /// Mean over all elements.
    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let count = x.numel() as f64;
        let m = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / count;
        let shape = x.shape();
        self.tape().op(&[self], Tensor::scalar(T::lit(m)), move || {
            Box::new(move |g: &Tensor<T>, _: &[bool]| {
                vec![Some(Tensor::full(shape, T::lit(g.item().as_f64() / count)))]
            }) as BackwardFn<T>
        })
    }
}

/// Elementwise logistic function in f64.
pub fn sigmoid_f64(a: f64) -> f64 {
    sigmoid(a)
}
