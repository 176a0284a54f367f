//! Velocity networks `u(x_t, v, t)`.
//!
//! Two architectures share one conditioning path: the time embedding and the
//! condition vector are concatenated, passed through a GELU layer, and every
//! block reads its AdaLN `(shift, scale, gate)` from a linear map of that
//! hidden vector. All modulation maps and the output projection start at
//! zero, so a fresh network predicts exactly zero and each block starts as
//! the identity.
//!
//! * [`Arch::Mlp`]: residual MLP blocks on a single token, for 2-D tasks.
//! * [`Arch::AdalnTransformer`]: the data vector is split into `tokens`
//!   patches; blocks are pre-norm self-attention plus MLP.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Multiplier applied to `t` before the sinusoidal features.
pub const TIME_SCALE: f64 = 100.0;
/// Longest period of the sinusoidal features, in units of scaled time.
pub const TIME_MAX_PERIOD: f64 = 1000.0;

const LN_EPS: f64 = 1e-6;
const PROJECTOR_PREFIX: &str = "align_proj.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    AdalnTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityNetConfig {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    /// Sequence length for the transformer; must be 1 for the MLP.
    pub tokens: usize,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        Self::mlp(2, 8)
    }
}

impl VelocityNetConfig {
    /// Desk-scale MLP: depth 4, width 128.
    pub fn mlp(data_dim: usize, cond_dim: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            depth: 4,
            width: 128,
            heads: 1,
            data_dim,
            cond_dim,
            time_embed_dim: 32,
            tokens: 1,
        }
    }

    /// Desk-scale transformer: depth 2, width 64, 4 heads.
    pub fn transformer(data_dim: usize, cond_dim: usize, tokens: usize) -> Self {
        Self {
            arch: Arch::AdalnTransformer,
            depth: 2,
            width: 64,
            heads: 4,
            data_dim,
            cond_dim,
            time_embed_dim: 32,
            tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("data_dim", self.data_dim),
            ("cond_dim", self.cond_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("tokens", self.tokens),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("model.time_embed_dim must be even".into()));
        }
        if !self.data_dim.is_multiple_of(self.tokens) {
            return Err(Error::Config(format!(
                "model.data_dim {} is not divisible by model.tokens {}",
                self.data_dim, self.tokens
            )));
        }
        if self.arch == Arch::Mlp && self.tokens != 1 {
            return Err(Error::Config("model.tokens must be 1 for the mlp arch".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.data_dim / self.tokens
    }

    /// Number of rows in a tapped hidden state per example.
    pub fn hidden_rows(&self) -> usize {
        self.tokens
    }
}

/// Shape of the alignment projector `h`: hidden patch (`in_dim`) to target
/// feature (`out_dim`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

/// Named parameter tensors. Names are unique and iteration order is stable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Fan-in scaled normal weights, zero biases, and zero modulation and
    /// output projections.
    pub fn init(config: &VelocityNetConfig, projector: Option<ProjectorShape>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, kind) in param_layout(config, projector) {
            let len: usize = shape.iter().product();
            let data = match kind {
                InitKind::Zero => vec![T::zero(); len],
                InitKind::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| T::cast_from(std * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Names and shapes this config produces, in storage order.
    pub fn expected_shapes(config: &VelocityNetConfig, projector: Option<ProjectorShape>) -> BTreeMap<String, Vec<usize>> {
        param_layout(config, projector)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn same_layout<U>(&self, other: &ModelParams<U>) -> bool
    where
        U: Scalar,
    {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Records every tensor on `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams { vars })
    }
}

/// Graph handles for a [`ModelParams`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn has_projector(&self) -> bool {
        self.vars.keys().any(|k| k.starts_with(PROJECTOR_PREFIX))
    }
}

enum InitKind {
    Zero,
    FanIn(usize),
}

fn linear_layout(out: &mut Vec<(String, Vec<usize>, InitKind)>, name: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let kind = if zero { InitKind::Zero } else { InitKind::FanIn(fan_in) };
    out.push((format!("{name}.w"), vec![fan_in, fan_out], kind));
    out.push((format!("{name}.b"), vec![fan_out], InitKind::Zero));
}

fn param_layout(config: &VelocityNetConfig, projector: Option<ProjectorShape>) -> Vec<(String, Vec<usize>, InitKind)> {
    let w = config.width;
    let mut out = Vec::new();
    linear_layout(&mut out, "cond", config.time_embed_dim + config.cond_dim, w, false);
    linear_layout(&mut out, "in", config.patch_dim(), w, false);
    for i in 0..config.depth {
        match config.arch {
            Arch::Mlp => {
                linear_layout(&mut out, &format!("block{i}.mod"), w, 3 * w, true);
                linear_layout(&mut out, &format!("block{i}.fc"), w, w, false);
            }
            Arch::AdalnTransformer => {
                linear_layout(&mut out, &format!("block{i}.mod"), w, 6 * w, true);
                linear_layout(&mut out, &format!("block{i}.qkv"), w, 3 * w, false);
                linear_layout(&mut out, &format!("block{i}.attn_out"), w, w, false);
                linear_layout(&mut out, &format!("block{i}.mlp1"), w, 2 * w, false);
                linear_layout(&mut out, &format!("block{i}.mlp2"), 2 * w, w, false);
            }
        }
    }
    linear_layout(&mut out, "final.mod", w, 2 * w, true);
    linear_layout(&mut out, "final.out", w, config.patch_dim(), true);
    if let Some(p) = projector {
        linear_layout(&mut out, "align_proj.fc1", p.in_dim, p.hidden, false);
        linear_layout(&mut out, "align_proj.fc2", p.hidden, p.out_dim, false);
    }
    out
}

/// Sinusoidal embedding of `t`: `dim/2` sine features followed by `dim/2`
/// cosine features at frequencies `TIME_MAX_PERIOD^(-i/(dim/2))`, applied to
/// `TIME_SCALE * t`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dim must be even and positive, got {dim}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(TIME_MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// The null condition: an exact zero vector.
pub fn null_condition(cond_dim: usize) -> Vec<f64> {
    vec![0.0; cond_dim]
}

/// `(B, dim)` time-embedding tensor for per-example times.
pub fn time_embed_batch<T: Scalar>(ts: &[f64], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?.into_iter().map(T::cast_from));
    }
    Tensor::new(vec![ts.len(), dim], data)
}

/// Result of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Predicted velocity, shaped `(B, data_dim)`.
    pub velocity: Var,
    /// Hidden state after the tapped block, shaped `(B * tokens, width)`.
    pub hidden: Option<Var>,
}

/// Velocity prediction for `x: (B, data_dim)`, `cond: (B, cond_dim)` and
/// `temb: (B, time_embed_dim)`. `tap` selects a block (1-based) whose output
/// is returned as `hidden`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParams,
    config: &VelocityNetConfig,
    x: Var,
    cond: Var,
    temb: Var,
    tap: Option<usize>,
) -> Result<ForwardOutput> {
    let batch = check_input(g.shape(x), config.data_dim, "x")?;
    if check_input(g.shape(cond), config.cond_dim, "condition")? != batch
        || check_input(g.shape(temb), config.time_embed_dim, "time embedding")? != batch
    {
        return Err(Error::shape("forward", "batch sizes of x, condition and time differ"));
    }
    if let Some(tap) = tap {
        if tap == 0 || tap > config.depth {
            return Err(Error::InvalidArgument(format!(
                "tap layer {tap} outside 1..={}",
                config.depth
            )));
        }
    }
    let ctx = g.concat(&[temb, cond], 1)?;
    let c = lin(g, params, "cond", ctx)?;
    let c = g.gelu(c)?;
    match config.arch {
        Arch::Mlp => forward_mlp(g, params, config, x, c, tap),
        Arch::AdalnTransformer => forward_transformer(g, params, config, x, c, batch, tap),
    }
}

/// Builds constant inputs for a batch and runs [`forward`].
pub fn forward_batch<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParams,
    config: &VelocityNetConfig,
    x: &Tensor<T>,
    cond: &Tensor<T>,
    ts: &[f64],
    tap: Option<usize>,
) -> Result<ForwardOutput> {
    let xv = g.constant(x.clone())?;
    let cv = g.constant(cond.clone())?;
    let tv = g.constant(time_embed_batch(ts, config.time_embed_dim)?)?;
    forward(g, params, config, xv, cv, tv, tap)
}

fn check_input(shape: &[usize], dim: usize, what: &str) -> Result<usize> {
    match shape {
        [b, d] if *d == dim => Ok(*b),
        _ => Err(Error::shape(
            "forward",
            format!("{what} has shape {shape:?}, expected (B, {dim})"),
        )),
    }
}

fn lin<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

/// `norm(h) * (1 + scale) + shift`.
fn modulate<T: Scalar>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(h, LN_EPS)?;
    let s = g.add_scalar(scale, 1.0)?;
    let m = g.mul(n, s)?;
    g.add(m, shift)
}

fn chunks<T: Scalar>(g: &mut Graph<T>, v: Var, n: usize, width: usize) -> Result<Vec<Var>> {
    let axis = g.shape(v).len() - 1;
    (0..n)
        .map(|i| g.slice(v, axis, i * width, (i + 1) * width))
        .collect()
}

fn forward_mlp<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &VelocityNetConfig,
    x: Var,
    c: Var,
    tap: Option<usize>,
) -> Result<ForwardOutput> {
    let w = config.width;
    let mut h = lin(g, p, "in", x)?;
    let mut hidden = None;
    for i in 0..config.depth {
        let m = lin(g, p, &format!("block{i}.mod"), c)?;
        let parts = chunks(g, m, 3, w)?;
        let (shift, scale, gate) = (parts[0], parts[1], parts[2]);
        let a = modulate(g, h, shift, scale)?;
        let a = lin(g, p, &format!("block{i}.fc"), a)?;
        let a = g.gelu(a)?;
        let a = g.mul(a, gate)?;
        h = g.add(h, a)?;
        if tap == Some(i + 1) {
            hidden = Some(h);
        }
    }
    let m = lin(g, p, "final.mod", c)?;
    let parts = chunks(g, m, 2, w)?;
    let a = modulate(g, h, parts[0], parts[1])?;
    let velocity = lin(g, p, "final.out", a)?;
    Ok(ForwardOutput { velocity, hidden })
}

fn positional_table<T: Scalar>(tokens: usize, width: usize) -> Result<Tensor<T>> {
    let half = width / 2;
    let mut data = vec![T::zero(); tokens * width];
    for pos in 0..tokens {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = pos as f64 * freq;
            data[pos * width + i] = T::cast_from(arg.sin());
            data[pos * width + half + i] = T::cast_from(arg.cos());
        }
    }
    Tensor::new(vec![tokens, width], data)
}

fn forward_transformer<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &VelocityNetConfig,
    x: Var,
    c: Var,
    batch: usize,
    tap: Option<usize>,
) -> Result<ForwardOutput> {
    let (w, tokens, heads) = (config.width, config.tokens, config.heads);
    let head_dim = w / heads;
    let patches = g.reshape(x, &[batch * tokens, config.patch_dim()])?;
    let h = lin(g, p, "in", patches)?;
    let h = g.reshape(h, &[batch, tokens, w])?;
    let pos = g.constant(positional_table(tokens, w)?)?;
    let mut h = g.add(h, pos)?;
    let mut hidden = None;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for i in 0..config.depth {
        let m = lin(g, p, &format!("block{i}.mod"), c)?;
        let m = g.reshape(m, &[batch, 1, 6 * w])?;
        let mods = chunks(g, m, 6, w)?;

        // attention
        let a = modulate(g, h, mods[0], mods[1])?;
        let a = g.reshape(a, &[batch * tokens, w])?;
        let qkv = lin(g, p, &format!("block{i}.qkv"), a)?;
        let mut qkv_heads = Vec::with_capacity(3);
        for part in chunks(g, qkv, 3, w)? {
            let r = g.reshape(part, &[batch, tokens, heads, head_dim])?;
            let r = g.permute(r, &[0, 2, 1, 3])?;
            qkv_heads.push(g.reshape(r, &[batch * heads, tokens, head_dim])?);
        }
        let kt = g.permute(qkv_heads[1], &[0, 2, 1])?;
        let scores = g.matmul(qkv_heads[0], kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, qkv_heads[2])?;
        let o = g.reshape(o, &[batch, heads, tokens, head_dim])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[batch * tokens, w])?;
        let o = lin(g, p, &format!("block{i}.attn_out"), o)?;
        let o = g.reshape(o, &[batch, tokens, w])?;
        let o = g.mul(o, mods[2])?;
        h = g.add(h, o)?;

        // mlp
        let a = modulate(g, h, mods[3], mods[4])?;
        let a = g.reshape(a, &[batch * tokens, w])?;
        let a = lin(g, p, &format!("block{i}.mlp1"), a)?;
        let a = g.gelu(a)?;
        let a = lin(g, p, &format!("block{i}.mlp2"), a)?;
        let a = g.reshape(a, &[batch, tokens, w])?;
        let a = g.mul(a, mods[5])?;
        h = g.add(h, a)?;

        if tap == Some(i + 1) {
            hidden = Some(g.reshape(h, &[batch * tokens, w])?);
        }
    }
    let m = lin(g, p, "final.mod", c)?;
    let m = g.reshape(m, &[batch, 1, 2 * w])?;
    let mods = chunks(g, m, 2, w)?;
    let a = modulate(g, h, mods[0], mods[1])?;
    let a = g.reshape(a, &[batch * tokens, w])?;
    let out = lin(g, p, "final.out", a)?;
    let velocity = g.reshape(out, &[batch, config.data_dim])?;
    Ok(ForwardOutput { velocity, hidden })
}

/// Applies the alignment projector to `hidden: (N, in_dim)`.
pub fn project<T: Scalar>(g: &mut Graph<T>, params: &BoundParams, hidden: Var) -> Result<Var> {
    let h = lin(g, params, "align_proj.fc1", hidden)?;
    let h = g.gelu(h)?;
    lin(g, params, "align_proj.fc2", h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &ModelParams<f64>, cfg: &VelocityNetConfig, x: &Tensor<f64>, c: &Tensor<f64>, ts: &[f64]) -> Tensor<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false).unwrap();
        let out = forward_batch(&mut g, &bound, cfg, x, c, ts, None).unwrap();
        g.value(out.velocity).clone()
    }

    fn random_params(cfg: &VelocityNetConfig, seed: u64) -> ModelParams<f64> {
        // Perturb every tensor so zero-initialized maps are live.
        let mut p = ModelParams::<f64>::init(cfg, None, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    #[test]
    fn time_embed_endpoints() {
        assert_eq!(time_embed(0.0, 2).unwrap(), vec![0.0, 1.0]);
        let e = time_embed(0.0, 16).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_embed_half_dim4() {
        // freqs: 1000^0 = 1 and 1000^(-1/2)
        let e = time_embed(0.5, 4).unwrap();
        let a0: f64 = 50.0;
        let a1: f64 = 50.0 / 1000f64.sqrt();
        let expected = [a0.sin(), a1.sin(), a0.cos(), a1.cos()];
        for (x, y) in e.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn time_embed_rejects_odd_dim() {
        assert!(time_embed(0.3, 3).is_err());
        assert!(time_embed(1.5, 4).is_err());
    }

    #[test]
    fn null_condition_is_zero() {
        assert_eq!(null_condition(4), vec![0.0; 4]);
        assert_eq!(null_condition(1), vec![0.0]);
        for d in 1..10 {
            assert_eq!(null_condition(d).iter().map(|v| v * v).sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn fresh_network_predicts_zero() {
        for cfg in [VelocityNetConfig::mlp(2, 3), VelocityNetConfig::transformer(8, 3, 4)] {
            let p = ModelParams::<f64>::init(&cfg, None, 7).unwrap();
            let x = Tensor::from_f64(vec![2, cfg.data_dim], &vec![0.7; 2 * cfg.data_dim]).unwrap();
            let c = Tensor::from_f64(vec![2, 3], &[1.0, -1.0, 0.5, 0.0, 0.2, 0.1]).unwrap();
            let u = run(&p, &cfg, &x, &c, &[0.1, 0.9]);
            assert_eq!(u.shape(), &[2, cfg.data_dim]);
            assert!(u.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = VelocityNetConfig::transformer(8, 2, 4);
        let p = random_params(&cfg, 3);
        let x = Tensor::from_f64(vec![3, 8], &(0..24).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let c = Tensor::from_f64(vec![3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let a = run(&p, &cfg, &x, &c, &[0.2, 0.5, 0.8]);
        let b = run(&p, &cfg, &x, &c, &[0.2, 0.5, 0.8]);
        assert_eq!(a.shape(), &[3, 8]);
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = VelocityNetConfig::mlp(2, 3);
        let p = ModelParams::<f64>::init(&cfg, None, 1).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false).unwrap();
        let x = Tensor::zeros(vec![2, 3]);
        let c = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            forward_batch(&mut g, &bound, &cfg, &x, &c, &[0.1, 0.2], None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = VelocityNetConfig::transformer(8, 2, 4);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = VelocityNetConfig::mlp(2, 2);
        cfg.time_embed_dim = 7;
        assert!(cfg.validate().is_err());
        cfg.time_embed_dim = 8;
        cfg.width = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tap_returns_hidden_rows() {
        let cfg = VelocityNetConfig::transformer(8, 2, 4);
        let p = random_params(&cfg, 5);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false).unwrap();
        let x = Tensor::zeros(vec![2, 8]);
        let c = Tensor::zeros(vec![2, 2]);
        let out = forward_batch(&mut g, &bound, &cfg, &x, &c, &[0.3, 0.4], Some(1)).unwrap();
        assert_eq!(g.shape(out.hidden.unwrap()), &[8, 64]);
        assert!(forward_batch(&mut g, &bound, &cfg, &x, &c, &[0.3, 0.4], Some(3)).is_err());
    }
}
