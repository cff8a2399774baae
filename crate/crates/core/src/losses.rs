//! Adversarial, L1, feature-space and temporal loss terms.
//!
//! Every term is built on a [`Tape`] so it can be differentiated. The plain
//! functions ([`d_loss`], [`l1_loss`], ...) evaluate the same graph code in
//! f64 on concrete values. All norms are means over elements.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::advect::{velocity_to_high, AdvectionCoeffs};
use crate::autograd::{Real, Tape, Tensor, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::fields::GridField;

/// Temporal term used alongside the spatial discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalVariant {
    None,
    /// L2 distance between a frame and its advected neighbors.
    L2t,
    /// Temporal discriminator on raw consecutive frames.
    DtUnaligned,
    /// Temporal discriminator on advection-aligned frames.
    DtAligned,
}

/// Single: previous frame only. Double: previous and next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2tMode {
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    /// Weight of a plain mean squared error on the density (0: off).
    pub l2: f64,
    /// One signed weight per discriminator layer.
    pub feature: Vec<f64>,
    pub temporal: TemporalVariant,
    /// Weight of the L2 temporal term when `temporal = "l2t"`.
    pub l2t: f64,
    pub l2t_mode: L2tMode,
    /// Train against the spatial discriminator at all.
    pub spatial_gan: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            l2: 0.0,
            feature: vec![-1e-5; 4],
            temporal: TemporalVariant::DtAligned,
            l2t: 1.0,
            l2t_mode: L2tMode::Double,
            spatial_gan: true,
        }
    }
}

impl LossWeights {
    pub fn uses_dt(&self) -> bool {
        matches!(
            self.temporal,
            TemporalVariant::DtAligned | TemporalVariant::DtUnaligned
        )
    }

    pub fn needs_triplets(&self) -> bool {
        self.temporal != TemporalVariant::None
    }
}

fn logit_of(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

fn logits_tensor(probs: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(
        [probs.len(), 1, 1, 1, 1],
        probs.iter().map(|&p| logit_of(p)).collect(),
    )
}

/// `mean(-log D(real)) + mean(-log(1 - D(fake)))` on logits.
pub fn d_loss_var<'t, T: Real>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Var<'t, T> {
    real_logits
        .bce_logits_mean(true)
        .add(fake_logits.bce_logits_mean(false))
}

/// Non-saturating generator term `mean(-log D(fake))` summed over the
/// given discriminators.
pub fn g_adv_var<'t, T: Real>(fake_logits: &[Var<'t, T>]) -> Option<Var<'t, T>> {
    let parts: Vec<_> = fake_logits
        .iter()
        .map(|z| z.bce_logits_mean(true))
        .collect();
    (!parts.is_empty()).then(|| Var::sum_of(&parts))
}

pub fn l1_var<'t, T: Real>(
    generated: Var<'t, T>,
    target: Var<'t, T>,
    weight: f64,
) -> Result<Var<'t, T>> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    Ok(generated.l1_mean(target).scale(weight))
}

pub fn l2_var<'t, T: Real>(
    generated: Var<'t, T>,
    target: Var<'t, T>,
    weight: f64,
) -> Result<Var<'t, T>> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    Ok(generated.mse_mean(target).scale(weight))
}

/// `sum_j weight_j * mean((a_j - b_j)^2)`.
pub fn feature_var<'t, T: Real>(
    a: &[Var<'t, T>],
    b: &[Var<'t, T>],
    weights: &[f64],
) -> Result<Var<'t, T>> {
    if a.len() != b.len() || a.len() != weights.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "feature lists of length {} and {} with {} weights",
            a.len(),
            b.len(),
            weights.len()
        )));
    }
    let parts = a
        .iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), &w)| {
            if x.shape() != y.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            Ok(x.mse_mean(*y).scale(w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::sum_of(&parts))
}

/// Advection operators for a batch of triplets: per sample, forward along
/// the previous frame's velocity and backward along the next frame's.
#[derive(Debug, Clone)]
pub struct TripletAdvection {
    pub forward: Vec<Rc<AdvectionCoeffs>>,
    pub backward: Vec<Rc<AdvectionCoeffs>>,
}

impl TripletAdvection {
    /// `v_prev` and `v_next` are low-resolution velocities; they are
    /// brought to the high-resolution grid by `factor`.
    pub fn build(v_prev: &[&GridField], v_next: &[&GridField], factor: usize) -> Result<Self> {
        if v_prev.len() != v_next.len() {
            return Err(Error::Shape("velocity lists differ in length".into()));
        }
        let mut forward = Vec::with_capacity(v_prev.len());
        let mut backward = Vec::with_capacity(v_prev.len());
        for (p, n) in v_prev.iter().zip(v_next) {
            forward.push(Rc::new(AdvectionCoeffs::build(
                &velocity_to_high(p, factor)?,
                1.0,
            )?));
            backward.push(Rc::new(AdvectionCoeffs::build(
                &velocity_to_high(n, factor)?,
                -1.0,
            )?));
        }
        Ok(Self { forward, backward })
    }

    /// `(A(prev, v_prev), cur, A(next, -v_next))`.
    pub fn align<'t, T: Real>(&self, frames: [Var<'t, T>; 3]) -> [Var<'t, T>; 3] {
        [
            frames[0].advect(&self.forward),
            frames[1],
            frames[2].advect(&self.backward),
        ]
    }
}

/// `mean((cur - A(prev))^2)`, plus `mean((cur - A(next))^2)` in double mode.
pub fn l2_temporal_var<'t, T: Real>(
    frames: [Var<'t, T>; 3],
    adv: &TripletAdvection,
    mode: L2tMode,
) -> Var<'t, T> {
    let [a_prev, cur, a_next] = adv.align(frames);
    let single = cur.mse_mean(a_prev);
    match mode {
        L2tMode::Single => single,
        L2tMode::Double => single.add(cur.mse_mean(a_next)),
    }
}

/// Generator loss terms of one batch. Absent terms are `None`.
pub struct GLossTerms<'t, T: Real> {
    pub adv_spatial: Option<Var<'t, T>>,
    pub adv_temporal: Option<Var<'t, T>>,
    pub feature: Option<Var<'t, T>>,
    pub l1: Option<Var<'t, T>>,
    pub l2: Option<Var<'t, T>>,
    pub l2t: Option<Var<'t, T>>,
}

/// Scalar values of the generator terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GLossValues {
    pub adv_spatial: f64,
    pub adv_temporal: f64,
    pub feature: f64,
    pub l1: f64,
    pub l2: f64,
    pub l2t: f64,
    pub total: f64,
}

impl<'t, T: Real> GLossTerms<'t, T> {
    /// Sum of all present terms; `None` if there are none.
    pub fn total(&self) -> Option<Var<'t, T>> {
        let parts: Vec<_> = [
            self.adv_spatial,
            self.adv_temporal,
            self.feature,
            self.l1,
            self.l2,
            self.l2t,
        ]
        .into_iter()
        .flatten()
        .collect();
        (!parts.is_empty()).then(|| Var::sum_of(&parts))
    }

    pub fn values(&self) -> GLossValues {
        let v = |x: Option<Var<'t, T>>| x.map_or(0.0, |x| x.item().as_f64());
        GLossValues {
            adv_spatial: v(self.adv_spatial),
            adv_temporal: v(self.adv_temporal),
            feature: v(self.feature),
            l1: v(self.l1),
            l2: v(self.l2),
            l2t: v(self.l2t),
            total: v(self.total()),
        }
    }
}

/// `total_g_loss` on concrete values: the sum of the given components.
pub fn total_g_loss(values: &GLossValues) -> f64 {
    values.adv_spatial + values.adv_temporal + values.feature + values.l1 + values.l2 + values.l2t
}

/// Discriminator loss from output probabilities, clamped to `[eps, 1-eps]`.
pub fn d_loss(real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    let tape = Tape::new();
    let r = tape.constant(logits_tensor(real_probs));
    let f = tape.constant(logits_tensor(fake_probs));
    d_loss_var(r, f).item()
}

/// Generator adversarial loss from the spatial and temporal discriminators'
/// probabilities on generated data. Either list may be empty.
pub fn g_adv_loss(fake_spatial: &[f64], fake_temporal: &[f64]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = [fake_spatial, fake_temporal]
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| tape.constant(logits_tensor(p)))
        .collect();
    g_adv_var(&vars).map_or(0.0, |v| v.item())
}

pub fn l1_loss<T: Real>(generated: &Tensor<T>, target: &Tensor<T>, weight: f64) -> Result<f64> {
    let tape = Tape::<f64>::new();
    Ok(l1_var(
        tape.constant(generated.cast()),
        tape.constant(target.cast()),
        weight,
    )?
    .item())
}

pub fn feature_loss<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>], weights: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let va: Vec<_> = a.iter().map(|t| tape.constant(t.cast())).collect();
    let vb: Vec<_> = b.iter().map(|t| tape.constant(t.cast())).collect();
    Ok(feature_var(&va, &vb, weights)?.item())
}

/// L2 temporal loss of one high-resolution triplet; velocities are at the
/// resolution of the frames.
pub fn l2_temporal(
    frames: [&GridField; 3],
    v_prev: &GridField,
    v_next: &GridField,
    mode: L2tMode,
) -> Result<f64> {
    if frames.iter().any(|f| !f.same_layout(frames[0])) {
        return Err(Error::Shape("triplet frames differ in layout".into()));
    }
    let adv = TripletAdvection::build(&[v_prev], &[v_next], 1)?;
    let tape = Tape::<f64>::new();
    let vars = frames
        .map(|f| GridField::batch_tensor(&[f]).map(|t| tape.constant(t.cast())))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(l2_temporal_var([vars[0], vars[1], vars[2]], &adv, mode).item())
}
