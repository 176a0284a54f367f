//! Training objectives: the linear interpolant, the flow-matching loss, the
//! model-guided target and loss, the cosine alignment loss and their sum.
//!
//! Velocity convention: `u = x0 - eps`, which points from noise toward data.
//! Samplers therefore integrate from `t = 1` down to `t = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{self, BoundParams, ProjectorShape, VelocityNetConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// One interpolated training example (or batch, with per-row times).
#[derive(Clone, Debug)]
pub struct InterpolantSample<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    /// One time per row of `x0`.
    pub t: Vec<f64>,
    pub x_t: Tensor<T>,
    pub u: Tensor<T>,
}

/// `x_t = (1 - t) x0 + t eps` and `u = x0 - eps` for a single `t`.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<InterpolantSample<T>> {
    let rows = x0.shape().first().copied().unwrap_or(1).max(1);
    let mut s = interpolate_rows(x0, eps, &vec![t; rows])?;
    s.t = vec![t];
    Ok(s)
}

/// Row-wise interpolation: row `i` of `x0`/`eps` uses `ts[i]`.
pub fn interpolate_rows<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, ts: &[f64]) -> Result<InterpolantSample<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    let rows = ts.len();
    if rows == 0 || !x0.len().is_multiple_of(rows) {
        return Err(Error::shape(
            "interpolate",
            format!("{} times for shape {:?}", rows, x0.shape()),
        ));
    }
    let width = x0.len() / rows;
    let mut x_t = Vec::with_capacity(x0.len());
    let mut u = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        let a = T::cast_from(1.0 - t);
        let b = T::cast_from(t);
        let r = i * width..(i + 1) * width;
        for (&x, &e) in x0.data()[r.clone()].iter().zip(&eps.data()[r]) {
            x_t.push(a * x + b * e);
            u.push(x - e);
        }
    }
    Ok(InterpolantSample {
        x0: x0.clone(),
        eps: eps.clone(),
        t: ts.to_vec(),
        x_t: Tensor::new(x0.shape().to_vec(), x_t)?,
        u: Tensor::new(x0.shape().to_vec(), u)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetVariant {
    /// `u' = u + w * sg(u_cond - u_uncond)`.
    #[default]
    Appendix,
    /// `u' = u + w * sg(u_cond) - sg(u_uncond)`.
    MainText,
}

/// Guidance knobs for training targets and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance scale inside the training target.
    pub w: f64,
    /// Condition-drop probability.
    pub psi: f64,
    /// Steps during which `w` is forced to zero.
    pub warmup_steps: u64,
    pub variant: TargetVariant,
    /// Classifier-free guidance scale used at inference.
    pub cfg_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.45,
            psi: 0.1,
            warmup_steps: 1000,
            variant: TargetVariant::Appendix,
            cfg_scale: 1.45,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(Error::Config(format!("guidance.w must be >= 0, got {}", self.w)));
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(Error::Config(format!("guidance.psi must lie in [0, 1], got {}", self.psi)));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance.cfg_scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// Alignment regularizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub lambda: f64,
    /// Block (1-based) whose output is aligned; `None` means `depth / 2`.
    pub tap_layer: Option<usize>,
    pub patch_count: usize,
    /// Dimension of the frozen target features per patch.
    pub feature_dim: usize,
    /// Hidden width of the projector MLP.
    pub projector_hidden: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tap_layer: None,
            patch_count: 1,
            feature_dim: 2,
            projector_hidden: 64,
        }
    }
}

impl AlignConfig {
    pub fn tap(&self, net: &VelocityNetConfig) -> usize {
        self.tap_layer.unwrap_or((net.depth / 2).max(1))
    }

    pub fn validate(&self, net: &VelocityNetConfig) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("align.lambda must be >= 0, got {}", self.lambda)));
        }
        let tap = self.tap(net);
        if tap == 0 || tap > net.depth {
            return Err(Error::Config(format!(
                "align.tap_layer {tap} outside 1..={}",
                net.depth
            )));
        }
        if self.patch_count == 0 {
            return Err(Error::Config("align.patch_count must be >= 1".into()));
        }
        if !net.data_dim.is_multiple_of(self.patch_count) {
            return Err(Error::Config(format!(
                "data_dim {} is not divisible by align.patch_count {}",
                net.data_dim, self.patch_count
            )));
        }
        let chunk = net.data_dim / self.patch_count;
        if self.feature_dim == 0 || self.feature_dim > chunk {
            return Err(Error::Config(format!(
                "align.feature_dim must lie in 1..={chunk} (patch size)"
            )));
        }
        if self.projector_hidden == 0 {
            return Err(Error::Config("align.projector_hidden must be >= 1".into()));
        }
        self.projector_in_dim(net).map(|_| ())
    }

    /// Width of one hidden patch fed to the projector.
    pub fn projector_in_dim(&self, net: &VelocityNetConfig) -> Result<usize> {
        let rows = net.hidden_rows();
        if self.patch_count == rows {
            Ok(net.width)
        } else if rows == 1 && net.width.is_multiple_of(self.patch_count) {
            Ok(net.width / self.patch_count)
        } else {
            Err(Error::Config(format!(
                "align.patch_count {} is incompatible with {} hidden rows of width {}",
                self.patch_count, rows, net.width
            )))
        }
    }

    pub fn projector_shape(&self, net: &VelocityNetConfig) -> Result<ProjectorShape> {
        Ok(ProjectorShape {
            in_dim: self.projector_in_dim(net)?,
            hidden: self.projector_hidden,
            out_dim: self.feature_dim,
        })
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn fm_loss<T: Scalar>(g: &mut Graph<T>, u_hat: Var, u: Var) -> Result<Var> {
    same_shape(g, u_hat, u, "fm_loss")?;
    let d = g.sub(u_hat, u)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Model-guided regression target. The EMA terms are wrapped in a
/// stop-gradient regardless of how they were produced.
pub fn amg_target<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    u_cond_ema: Var,
    u_uncond_ema: Var,
    w: f64,
    variant: TargetVariant,
) -> Result<Var> {
    amg_target_impl(g, u, u_cond_ema, u_uncond_ema, w, variant, false)
}

/// `flip_sign` is a fault-injection hook for the oracle self-check.
pub(crate) fn amg_target_impl<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    u_cond_ema: Var,
    u_uncond_ema: Var,
    w: f64,
    variant: TargetVariant,
    flip_sign: bool,
) -> Result<Var> {
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale w must be >= 0, got {w}")));
    }
    same_shape(g, u, u_cond_ema, "amg_target")?;
    same_shape(g, u, u_uncond_ema, "amg_target")?;
    if w == 0.0 && variant == TargetVariant::Appendix {
        return Ok(u);
    }
    let w = if flip_sign { -w } else { w };
    let cond = g.stop_gradient(u_cond_ema);
    let uncond = g.stop_gradient(u_uncond_ema);
    match variant {
        TargetVariant::Appendix => {
            let d = g.sub(cond, uncond)?;
            let d = g.scale(d, w)?;
            g.add(u, d)
        }
        TargetVariant::MainText => {
            let c = g.scale(cond, w)?;
            let s = g.add(u, c)?;
            g.sub(s, uncond)
        }
    }
}

/// Squared error of the conditional prediction against the guided target.
pub fn amg_loss<T: Scalar>(g: &mut Graph<T>, u_theta_cond: Var, u_prime: Var) -> Result<Var> {
    fm_loss(g, u_theta_cond, u_prime)
}

/// `-mean_i cos(target_i, projected_i)` over rows. `target` is treated as a
/// fixed input; no parameters act on it.
pub fn align_loss<T: Scalar>(g: &mut Graph<T>, target: &Tensor<T>, projected: Var) -> Result<Var> {
    if target.shape() != g.shape(projected) || target.rank() != 2 {
        return Err(Error::shape(
            "align_loss",
            format!("target {:?} vs projected {:?}", target.shape(), g.shape(projected)),
        ));
    }
    let d = target.shape()[1];
    let zero_row = |data: &[T]| data.chunks(d).any(|r| r.iter().all(|v| *v == T::zero()));
    if zero_row(target.data()) {
        return Err(Error::ZeroNorm("alignment target"));
    }
    if zero_row(g.value(projected).data()) {
        return Err(Error::ZeroNorm("projected hidden state"));
    }
    let tv = g.constant(target.clone())?;
    let dot = g.mul(tv, projected)?;
    let dot = g.sum_axis(dot, 1)?;
    let tt = g.mul(tv, tv)?;
    let tt = g.sum_axis(tt, 1)?;
    let pp = g.mul(projected, projected)?;
    let pp = g.sum_axis(pp, 1)?;
    let norms = g.mul(tt, pp)?;
    let norms = g.pow(norms, 0.5)?;
    let cos = g.div(dot, norms)?;
    let m = g.mean(cos)?;
    g.neg(m)
}

/// Splits a tapped hidden state into patches, projects them, and scores them
/// against `target: (B * patch_count, feature_dim)`.
pub fn align_loss_from_hidden<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParams,
    hidden: Var,
    target: &Tensor<T>,
    patch_count: usize,
) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    let rows = target.shape().first().copied().unwrap_or(0);
    let patches = if shape[0] == rows {
        hidden
    } else {
        let total: usize = shape.iter().product();
        if rows == 0 || !total.is_multiple_of(rows) || shape[0] * patch_count != rows {
            return Err(Error::shape(
                "align_loss",
                format!("hidden {shape:?} vs {rows} target patches"),
            ));
        }
        g.reshape(hidden, &[rows, total / rows])?
    };
    let projected = nets::project(g, params, patches)?;
    align_loss(g, target, projected)
}

/// `amg + lambda * align`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, amg: Var, align: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(amg);
    }
    let a = g.scale(align, lambda)?;
    g.add(amg, a)
}
