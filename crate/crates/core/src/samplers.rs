//! Noise-to-data samplers: deterministic Euler and Euler–Maruyama.
//!
//! Both integrate from `t = 1` (noise) to `t = 0` (data) on a uniform grid
//! `t_k = 1 - k / steps`, evaluating the field at the left end of each
//! interval. Samples are processed in fixed chunks of [`CHUNK`] rows, and
//! every sample draws from its own RNG stream, so parallel and sequential
//! execution produce bit-identical output.
//!
//! The SDE drift adds `g(t)^2 / 2` times a score proxy to the velocity:
//!
//! ```text
//! x <- x + dt * (u + g^2 / 2 * score(x, u, t)) + g * sqrt(dt) * xi
//! ```
//!
//! For the interpolant `x_t = (1 - t) x0 + t eps` with `u = E[x0 - eps | x_t]`
//! one has `E[eps | x_t] = x_t - (1 - t) u`, and the Gaussian-noise score is
//! `-E[eps | x_t] / t`; see [`InterpolantScore`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::cfg_combine;
use crate::nets::{self, ModelParams, VelocityNetConfig};
use crate::tensor::{Graph, Tensor};

/// Rows per work unit.
pub const CHUNK: usize = 256;

/// How independent chunks are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on, otherwise
    /// identical to `Sequential`.
    #[default]
    Parallel,
}

/// A velocity field evaluated on row-major blocks of samples.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Writes `u(x, t)` for the rows `offset..offset + x.len() / dim` into
    /// `out` and returns the number of network evaluations spent.
    fn eval(&self, offset: usize, x: &[f64], t: f64, out: &mut [f64]) -> Result<u64>;
}

/// Score estimate used by the SDE drift.
pub trait ScoreProxy: Sync {
    fn score(&self, x: f64, u: f64, t: f64) -> f64;
}

/// `-(x - (1 - t) u) / t`, exact for the linear interpolant with Gaussian noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct InterpolantScore;

impl ScoreProxy for InterpolantScore {
    fn score(&self, x: f64, u: f64, t: f64) -> f64 {
        -(x - (1.0 - t) * u) / t
    }
}

/// Always zero: the SDE then only adds noise to the Euler drift.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl ScoreProxy for ZeroScore {
    fn score(&self, _x: f64, _u: f64, _t: f64) -> f64 {
        0.0
    }
}

/// Diffusion coefficient `g(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "scale")]
pub enum DiffusionSchedule {
    Zero,
    Constant(f64),
    /// `g(t) = scale * t`.
    Linear(f64),
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::Linear(1.0)
    }
}

impl DiffusionSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            DiffusionSchedule::Zero => 0.0,
            DiffusionSchedule::Constant(c) => c,
            DiffusionSchedule::Linear(c) => c * t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiffusionSchedule::Zero => Ok(()),
            DiffusionSchedule::Constant(c) | DiffusionSchedule::Linear(c) if c >= 0.0 && c.is_finite() => Ok(()),
            _ => Err(Error::InvalidArgument(format!("diffusion coefficient must be >= 0, got {self:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Euler,
    #[default]
    EulerMaruyama,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SamplerKind::Euler),
            "euler_maruyama" | "euler-maruyama" => Ok(SamplerKind::EulerMaruyama),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sampler {s:?} (expected euler or euler_maruyama)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Euler => "euler",
            SamplerKind::EulerMaruyama => "euler_maruyama",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Ignored by the Euler sampler.
    pub diffusion: DiffusionSchedule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::EulerMaruyama,
            steps: 50,
            cfg_scale: 1.45,
            diffusion: DiffusionSchedule::Linear(1.0),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Deterministic Euler with 25 steps.
    pub fn euler_25() -> Self {
        Self {
            kind: SamplerKind::Euler,
            steps: 25,
            diffusion: DiffusionSchedule::Zero,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("sampler.cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        self.diffusion.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Final samples plus network evaluations per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Row-major `(n, dim)`.
    pub samples: Vec<f64>,
    pub nfe: u64,
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal starting points: row `i` comes from its own stream.
pub fn initial_noise(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rng = noise_rng(seed, 2 * i as u64);
        out.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    out
}

fn check_start(x1: &[f64], dim: usize, steps: usize) -> Result<()> {
    if dim == 0 || !x1.len().is_multiple_of(dim) {
        return Err(Error::shape("sample", format!("{} values for dimension {dim}", x1.len())));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sample_start" });
    }
    Ok(())
}

fn for_each_chunk<F>(x: &mut [f64], dim: usize, exec: Execution, f: F) -> Result<u64>
where
    F: Fn(usize, &mut [f64]) -> Result<u64> + Sync,
{
    let width = CHUNK * dim;
    let nfe: Vec<Result<u64>> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            x.par_chunks_mut(width)
                .enumerate()
                .map(|(c, block)| f(c * CHUNK, block))
                .collect()
        }
        _ => x
            .chunks_mut(width)
            .enumerate()
            .map(|(c, block)| f(c * CHUNK, block))
            .collect(),
    };
    let mut first = None;
    for r in nfe {
        let r = r?;
        first.get_or_insert(r);
    }
    Ok(first.unwrap_or(0))
}

fn finite(block: &[f64]) -> Result<()> {
    if block.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "sample_step" })
    }
}

/// Deterministic Euler integration from `x1` at `t = 1` to `t = 0`.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    x1: &[f64],
    steps: usize,
    exec: Execution,
) -> Result<SampleOutput> {
    let dim = field.dim();
    check_start(x1, dim, steps)?;
    let mut x = x1.to_vec();
    let dt = 1.0 / steps as f64;
    let nfe = for_each_chunk(&mut x, dim, exec, |offset, block| {
        let mut u = vec![0.0; block.len()];
        let mut nfe = 0;
        for k in 0..steps {
            let t = 1.0 - k as f64 * dt;
            nfe += field.eval(offset, block, t, &mut u)?;
            for (xv, uv) in block.iter_mut().zip(&u) {
                *xv += dt * uv;
            }
            finite(block)?;
        }
        Ok(nfe)
    })?;
    Ok(SampleOutput { samples: x, nfe })
}

/// Euler–Maruyama integration of the reverse SDE. Step noise for row `i`
/// comes from a stream derived from `seed` and `i`. Where `g(t) = 0` the
/// update is exactly the Euler update.
pub fn euler_maruyama_sample<F: VelocityField + ?Sized, S: ScoreProxy + ?Sized>(
    field: &F,
    score: &S,
    x1: &[f64],
    steps: usize,
    diffusion: DiffusionSchedule,
    seed: u64,
    exec: Execution,
) -> Result<SampleOutput> {
    let dim = field.dim();
    check_start(x1, dim, steps)?;
    diffusion.validate()?;
    let mut x = x1.to_vec();
    let dt = 1.0 / steps as f64;
    let sqrt_dt = dt.sqrt();
    let nfe = for_each_chunk(&mut x, dim, exec, |offset, block| {
        let rows = block.len() / dim;
        let mut rngs: Vec<ChaCha8Rng> = (0..rows)
            .map(|r| noise_rng(seed, 2 * (offset + r) as u64 + 1))
            .collect();
        let mut u = vec![0.0; block.len()];
        let mut nfe = 0;
        for k in 0..steps {
            let t = 1.0 - k as f64 * dt;
            nfe += field.eval(offset, block, t, &mut u)?;
            let gt = diffusion.at(t);
            if gt == 0.0 {
                for (xv, uv) in block.iter_mut().zip(&u) {
                    *xv += dt * uv;
                }
            } else {
                let half_g2 = 0.5 * gt * gt;
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for j in r * dim..(r + 1) * dim {
                        let xi: f64 = rng.sample(StandardNormal);
                        let drift = u[j] + half_g2 * score.score(block[j], u[j], t);
                        block[j] += dt * drift + gt * sqrt_dt * xi;
                    }
                }
            }
            finite(block)?;
        }
        Ok(nfe)
    })?;
    Ok(SampleOutput { samples: x, nfe })
}

/// Runs the sampler selected by `config` from `x1`.
pub fn run_sampler<F: VelocityField + ?Sized>(
    field: &F,
    x1: &[f64],
    config: &SamplerConfig,
    exec: Execution,
) -> Result<SampleOutput> {
    config.validate()?;
    match config.kind {
        SamplerKind::Euler => euler_sample(field, x1, config.steps, exec),
        SamplerKind::EulerMaruyama => euler_maruyama_sample(
            field,
            &InterpolantScore,
            x1,
            config.steps,
            config.diffusion,
            config.seed,
            exec,
        ),
    }
}

/// A trained network with per-row conditions, combined with classifier-free
/// guidance. At scale 1 only the conditional pass runs.
pub struct GuidedVelocity<'a> {
    params: &'a ModelParams<f32>,
    config: &'a VelocityNetConfig,
    /// Row-major `(n, cond_dim)`.
    conditions: &'a [f32],
    scale: f64,
}

impl<'a> GuidedVelocity<'a> {
    pub fn new(
        params: &'a ModelParams<f32>,
        config: &'a VelocityNetConfig,
        conditions: &'a [f32],
        scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        if !conditions.len().is_multiple_of(config.cond_dim) {
            return Err(Error::shape(
                "guided_velocity",
                format!("{} condition values for cond_dim {}", conditions.len(), config.cond_dim),
            ));
        }
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("cfg scale must be >= 0, got {scale}")));
        }
        Ok(Self {
            params,
            config,
            conditions,
            scale,
        })
    }

    pub fn rows(&self) -> usize {
        self.conditions.len() / self.config.cond_dim
    }

    fn predict(&self, x: &[f32], cond: Vec<f32>, rows: usize, t: f64) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false)?;
        let xt = Tensor::new(vec![rows, self.config.data_dim], x.to_vec())?;
        let ct = Tensor::new(vec![rows, self.config.cond_dim], cond)?;
        let out = nets::forward_batch(&mut g, &bound, self.config, &xt, &ct, &vec![t; rows], None)?;
        Ok(g.value(out.velocity).data().to_vec())
    }
}

impl VelocityField for GuidedVelocity<'_> {
    fn dim(&self) -> usize {
        self.config.data_dim
    }

    fn eval(&self, offset: usize, x: &[f64], t: f64, out: &mut [f64]) -> Result<u64> {
        let d = self.config.data_dim;
        let cd = self.config.cond_dim;
        let rows = x.len() / d;
        if offset + rows > self.rows() {
            return Err(Error::shape(
                "guided_velocity",
                format!("rows {}..{} exceed {} conditions", offset, offset + rows, self.rows()),
            ));
        }
        let cond = self.conditions[offset * cd..(offset + rows) * cd].to_vec();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let u_cond = self.predict(&xf, cond, rows, t)?;
        let (u, nfe) = if self.scale == 1.0 {
            (u_cond, 1)
        } else {
            let u_uncond = self.predict(&xf, vec![0.0; rows * cd], rows, t)?;
            (cfg_combine(&u_cond, &u_uncond, self.scale)?, 2)
        };
        for (o, v) in out.iter_mut().zip(u) {
            *o = v as f64;
        }
        Ok(nfe)
    }
}

/// Closure-backed field, mostly for tests and oracle fields.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> FnField<F> {
    /// `f(x_row, t, u_row)` is applied row by row.
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _offset: usize, x: &[f64], t: f64, out: &mut [f64]) -> Result<u64> {
        for (xr, ur) in x.chunks(self.dim).zip(out.chunks_mut(self.dim)) {
            (self.f)(xr, t, ur);
        }
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: [f64; 2]) -> FnField<impl Fn(&[f64], f64, &mut [f64]) + Sync> {
        FnField::new(2, move |_, _, u: &mut [f64]| u.copy_from_slice(&c))
    }

    #[test]
    fn constant_field_is_exact() {
        let x1 = initial_noise(3, 10, 2);
        for steps in [1, 2, 4, 8, 64] {
            let out = euler_sample(&constant([0.5, -1.25]), &x1, steps, Execution::Sequential).unwrap();
            for (i, v) in out.samples.iter().enumerate() {
                let c = if i % 2 == 0 { 0.5 } else { -1.25 };
                assert_eq!(*v, x1[i] + c, "steps {steps}");
            }
            assert_eq!(out.nfe, steps as u64);
        }
        for steps in [3, 7, 50] {
            let out = euler_sample(&constant([0.3, -1.1]), &x1, steps, Execution::Sequential).unwrap();
            for (i, v) in out.samples.iter().enumerate() {
                let c = if i % 2 == 0 { 0.3 } else { -1.1 };
                assert!((*v - (x1[i] + c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_returns_start() {
        let x1 = initial_noise(1, 5, 2);
        let out = euler_sample(&constant([0.0, 0.0]), &x1, 17, Execution::Sequential).unwrap();
        assert_eq!(out.samples, x1);
    }

    #[test]
    fn zero_diffusion_matches_euler_bitwise() {
        let field = FnField::new(2, |x: &[f64], t: f64, u: &mut [f64]| {
            u[0] = -x[0] * t + 0.3;
            u[1] = x[1].sin();
        });
        let x1 = initial_noise(9, 300, 2);
        let a = euler_sample(&field, &x1, 20, Execution::Sequential).unwrap();
        let b = euler_maruyama_sample(&field, &InterpolantScore, &x1, 20, DiffusionSchedule::Zero, 9, Execution::Sequential)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_kick() {
        let x1 = initial_noise(4, 3, 2);
        let out = euler_maruyama_sample(
            &constant([0.0, 0.0]),
            &ZeroScore,
            &x1,
            1,
            DiffusionSchedule::Constant(1.0),
            4,
            Execution::Sequential,
        )
        .unwrap();
        for r in 0..3 {
            let mut rng = noise_rng(4, 2 * r as u64 + 1);
            for j in 0..2 {
                let xi: f64 = rng.sample(StandardNormal);
                assert_eq!(out.samples[r * 2 + j], x1[r * 2 + j] + xi);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let field = FnField::new(2, |x: &[f64], t: f64, u: &mut [f64]| {
            u[0] = -x[0] + t;
            u[1] = -0.5 * x[1];
        });
        let x1 = initial_noise(5, 1000, 2);
        let a = euler_maruyama_sample(&field, &InterpolantScore, &x1, 10, DiffusionSchedule::Linear(1.0), 5, Execution::Sequential)
            .unwrap();
        let b = euler_maruyama_sample(&field, &InterpolantScore, &x1, 10, DiffusionSchedule::Linear(1.0), 5, Execution::Parallel)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_is_reported() {
        let field = FnField::new(1, |_: &[f64], t: f64, u: &mut [f64]| u[0] = if t < 0.6 { f64::NAN } else { 0.0 });
        let err = euler_sample(&field, &[0.0], 4, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(euler_sample(&field, &[f64::INFINITY], 4, Execution::Sequential).is_err());
        assert!(euler_sample(&field, &[0.0], 0, Execution::Sequential).is_err());
    }

    #[test]
    fn negative_diffusion_rejected() {
        let x1 = [0.0, 0.0];
        let r = euler_maruyama_sample(&constant([0.0, 0.0]), &ZeroScore, &x1, 2, DiffusionSchedule::Constant(-1.0), 0, Execution::Sequential);
        assert!(r.is_err());
    }

    #[test]
    fn sampler_names() {
        assert_eq!("euler".parse::<SamplerKind>().unwrap(), SamplerKind::Euler);
        assert_eq!("euler_maruyama".parse::<SamplerKind>().unwrap(), SamplerKind::EulerMaruyama);
        assert!("heun".parse::<SamplerKind>().is_err());
        let d = SamplerConfig::default();
        assert_eq!((d.kind, d.steps, d.cfg_scale), (SamplerKind::EulerMaruyama, 50, 1.45));
    }

    fn tiny_model() -> (ModelParams<f32>, VelocityNetConfig) {
        let cfg = VelocityNetConfig {
            depth: 2,
            width: 16,
            time_embed_dim: 8,
            ..VelocityNetConfig::mlp(2, 3)
        };
        let mut p = ModelParams::<f32>::init(&cfg, None, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.sample::<f32, _>(StandardNormal);
            }
        }
        (p, cfg)
    }

    #[test]
    fn guided_nfe_and_identity() {
        let (p, cfg) = tiny_model();
        let conds: Vec<f32> = (0..30).map(|i| (i % 7) as f32 * 0.3 - 1.0).collect();
        let x1 = initial_noise(0, 10, 2);
        let one = GuidedVelocity::new(&p, &cfg, &conds, 1.0).unwrap();
        let a = euler_sample(&one, &x1, 12, Execution::Sequential).unwrap();
        assert_eq!(a.nfe, 12);
        let two = GuidedVelocity::new(&p, &cfg, &conds, 1.45).unwrap();
        let b = euler_sample(&two, &x1, 12, Execution::Sequential).unwrap();
        assert_eq!(b.nfe, 24);
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn zero_scale_ignores_condition() {
        let (p, cfg) = tiny_model();
        let x1 = initial_noise(0, 4, 2);
        let c1: Vec<f32> = vec![1.0; 12];
        let c2: Vec<f32> = vec![-2.0; 12];
        let a = euler_sample(&GuidedVelocity::new(&p, &cfg, &c1, 0.0).unwrap(), &x1, 5, Execution::Sequential).unwrap();
        let b = euler_sample(&GuidedVelocity::new(&p, &cfg, &c2, 0.0).unwrap(), &x1, 5, Execution::Sequential).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
