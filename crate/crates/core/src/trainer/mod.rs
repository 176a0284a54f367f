//! Training loop: model-guided targets, alignment regularization, AdamW,
//! EMA maintenance and checkpointing.
//!
//! Every step draws its randomness from the run RNG in a fixed order: the
//! data batch (label then point, per example), the noise `eps`, the times
//! `t`, and one uniform per example for condition dropout. Both objectives
//! consume exactly the same draws.

mod adamw;
mod checkpoint;

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::guidance::{effective_w, should_drop, EmaState};
use crate::metrics::EvalReport;
use crate::nets::{self, BoundParams, ModelParams, VelocityNetConfig};
use crate::objectives::{self, AlignConfig, GuidanceConfig, TargetVariant};
use crate::oracles::{sample_batch, DataBatch, FrozenDualEncoder, Task};
use crate::pipeline::sample_and_evaluate;
use crate::samplers::{Execution, SamplerConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Regression onto the model-guided target.
    #[default]
    Amg,
    /// Plain flow matching with condition dropout.
    FmCfgBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub model: VelocityNetConfig,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Seed of the frozen encoder (condition codebook and feature map).
    pub encoder_seed: u64,
    pub guidance: GuidanceConfig,
    pub align: AlignConfig,
    pub ema_decay: f64,
    /// Steps between evaluations; 0 disables them.
    pub eval_every: u64,
    /// Samples per condition for periodic evaluations.
    pub eval_samples: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Amg,
            model: VelocityNetConfig::mlp(2, 8),
            lr: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            total_steps: 20_000,
            seed: 0,
            encoder_seed: 7,
            guidance: GuidanceConfig::default(),
            align: AlignConfig::default(),
            ema_decay: 0.9999,
            eval_every: 0,
            eval_samples: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.guidance.validate()?;
        self.align.validate(&self.model)?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.eval_every > 0 && self.eval_samples < 3 {
            return Err(Error::Config("eval_samples must be >= 3".into()));
        }
        Ok(())
    }

    /// Checks the config against a task's dimensions.
    pub fn validate_for(&self, task: &Task) -> Result<()> {
        self.validate()?;
        task.validate()?;
        if task.dim() != self.model.data_dim || task.cond_dim() != self.model.cond_dim {
            return Err(Error::Config(format!(
                "model expects data_dim {} / cond_dim {}, task provides {} / {}",
                self.model.data_dim,
                self.model.cond_dim,
                task.dim(),
                task.cond_dim()
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// The frozen encoder this config trains against.
    pub fn encoder(&self, task: &Task) -> Result<FrozenDualEncoder> {
        let patch_dim = self.model.data_dim / self.align.patch_count;
        FrozenDualEncoder::new(task.k(), task.cond_dim(), patch_dim, self.align.feature_dim, self.encoder_seed)
    }
}

/// Online parameters, EMA shadow, optimizer moments and the run RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ModelParams<f32>,
    pub ema: EmaState<f32>,
    pub opt: OptimizerState<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl ModelState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let projector = config.align.projector_shape(&config.model)?;
        let params = ModelParams::init(&config.model, Some(projector), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            ema: EmaState::new(&params, config.ema_decay)?,
            opt: OptimizerState::new(&params),
            params,
            rng,
            step: 0,
        })
    }
}

/// Randomness consumed by one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub batch: DataBatch,
    /// Row-major `(B, data_dim)`.
    pub eps: Vec<f64>,
    pub t: Vec<f64>,
    pub dropped: Vec<bool>,
}

/// Draws batch, noise, times and drop decisions, in that order.
pub fn draw_step_inputs<R: Rng + ?Sized>(
    rng: &mut R,
    task: &Task,
    encoder: &FrozenDualEncoder,
    config: &TrainConfig,
) -> Result<StepInputs> {
    let n = config.batch_size;
    let batch = sample_batch(task, encoder, rng, n)?;
    let eps = (0..n * task.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let t = (0..n).map(|_| rng.random::<f64>()).collect();
    let dropped = (0..n).map(|_| should_drop(config.guidance.psi, rng)).collect();
    Ok(StepInputs { batch, eps, t, dropped })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    /// The regression term (model-guided or plain flow matching).
    pub amg: f64,
    /// Zero when the alignment weight is zero.
    pub align: f64,
}

fn tensor_of<T: Scalar>(shape: Vec<usize>, data: &[f64]) -> Result<Tensor<T>> {
    Tensor::new(shape, data.iter().map(|&v| T::cast_from(v)).collect())
}

/// EMA velocities `(conditional, unconditional)` at `x_t`, computed as one
/// batched pass over `[x_t; x_t]` with conditions `[v; 0]`.
fn ema_velocities<T: Scalar>(
    ema: &ModelParams<T>,
    model: &VelocityNetConfig,
    x_t: &Tensor<T>,
    conditions: &Tensor<T>,
    t: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = t.len();
    let mut x = x_t.data().to_vec();
    x.extend_from_slice(x_t.data());
    let mut c = conditions.data().to_vec();
    c.extend(std::iter::repeat_n(T::zero(), conditions.len()));
    let mut ts = t.to_vec();
    ts.extend_from_slice(t);
    let mut g = Graph::new();
    let bound = ema.bind(&mut g, false)?;
    let xt = Tensor::new(vec![2 * b, model.data_dim], x)?;
    let ct = Tensor::new(vec![2 * b, model.cond_dim], c)?;
    let out = nets::forward_batch(&mut g, &bound, model, &xt, &ct, &ts, None)?;
    let v = g.value(out.velocity).data();
    let half = b * model.data_dim;
    Ok((
        Tensor::new(vec![b, model.data_dim], v[..half].to_vec())?,
        Tensor::new(vec![b, model.data_dim], v[half..].to_vec())?,
    ))
}

/// The recorded graph of one step's loss.
pub struct StepGraph<T: Scalar> {
    pub graph: Graph<T>,
    /// Online parameters as differentiable leaves.
    pub params: BoundParams,
    pub total: Var,
    pub regression: Var,
    pub align: Option<Var>,
}

impl<T: Scalar> StepGraph<T> {
    pub fn losses(&self) -> StepLosses {
        let v = |x: Var| self.graph.value(x).item().as_f64();
        StepLosses {
            total: v(self.total),
            amg: v(self.regression),
            align: self.align.map_or(0.0, v),
        }
    }

    /// Gradients of the total loss for every online parameter.
    pub fn gradients(&self) -> Result<ModelParams<T>> {
        let grads = self.graph.backward(self.total)?;
        Ok(ModelParams::from_map(
            self.params
                .iter()
                .map(|(name, &v)| (name.clone(), grads.get(v)))
                .collect(),
        ))
    }
}

/// Builds the step loss at training step `step` for online `params` and EMA
/// `ema` weights: the regression term against the (model-guided) target plus
/// the weighted alignment term.
pub fn build_step_loss<T: Scalar>(
    params: &ModelParams<T>,
    ema: &ModelParams<T>,
    step: u64,
    inputs: &StepInputs,
    config: &TrainConfig,
    encoder: &FrozenDualEncoder,
) -> Result<StepGraph<T>> {
    build_step_loss_impl(params, ema, step, inputs, config, encoder, false)
}

pub(crate) fn build_step_loss_impl<T: Scalar>(
    params: &ModelParams<T>,
    ema: &ModelParams<T>,
    step: u64,
    inputs: &StepInputs,
    config: &TrainConfig,
    encoder: &FrozenDualEncoder,
    flip_sign: bool,
) -> Result<StepGraph<T>> {
    let model = &config.model;
    let b = inputs.t.len();
    let d = model.data_dim;
    let x0 = tensor_of::<T>(vec![b, d], &inputs.batch.x0)?;
    let eps = tensor_of::<T>(vec![b, d], &inputs.eps)?;
    let sample = objectives::interpolate_rows(&x0, &eps, &inputs.t)?;
    let cond_full = tensor_of::<T>(vec![b, model.cond_dim], &inputs.batch.conditions)?;
    let mut cond_online = cond_full.clone();
    for (row, &drop) in cond_online.data_mut().chunks_mut(model.cond_dim).zip(&inputs.dropped) {
        if drop {
            row.fill(T::zero());
        }
    }

    let w = effective_w(step, &config.guidance);
    let variant = config.guidance.variant;
    let needs_ema = config.objective == Objective::Amg && !(w == 0.0 && variant == TargetVariant::Appendix);
    let ema_out = if needs_ema {
        Some(ema_velocities(ema, model, &sample.x_t, &cond_full, &inputs.t)?)
    } else {
        None
    };

    let lambda = config.align.lambda;
    let tap = (lambda > 0.0).then(|| config.align.tap(model));
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true)?;
    let out = nets::forward_batch(&mut g, &bound, model, &sample.x_t, &cond_online, &inputs.t, tap)?;
    let u = g.constant(sample.u.clone())?;
    let regression = match ema_out {
        Some((uc, un)) => {
            let uc = g.constant(uc)?;
            let un = g.constant(un)?;
            let target = objectives::amg_target_impl(&mut g, u, uc, un, w, variant, flip_sign)?;
            objectives::amg_loss(&mut g, out.velocity, target)?
        }
        None if config.objective == Objective::Amg => {
            let target = objectives::amg_target(&mut g, u, u, u, 0.0, TargetVariant::Appendix)?;
            objectives::amg_loss(&mut g, out.velocity, target)?
        }
        None => objectives::fm_loss(&mut g, out.velocity, u)?,
    };
    let (total, align) = match out.hidden {
        Some(hidden) => {
            let g0 = encoder.encode_signal(&inputs.batch.x0, config.align.patch_count)?;
            let rows = b * config.align.patch_count;
            let g0 = tensor_of::<T>(vec![rows, config.align.feature_dim], &g0)?;
            let align = objectives::align_loss_from_hidden(&mut g, &bound, hidden, &g0, config.align.patch_count)?;
            (objectives::total_loss(&mut g, regression, align, lambda)?, Some(align))
        }
        None => (regression, None),
    };
    Ok(StepGraph {
        graph: g,
        params: bound,
        total,
        regression,
        align,
    })
}

/// One optimization step on pre-drawn inputs: loss, backward, AdamW, EMA.
pub fn train_step(
    state: &mut ModelState,
    inputs: &StepInputs,
    config: &TrainConfig,
    encoder: &FrozenDualEncoder,
) -> Result<StepLosses> {
    let step = state.step;
    let diverged = |e: Error| match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    };
    let (losses, grads) = build_step_loss(&state.params, &state.ema.shadow, step, inputs, config, encoder)
        .and_then(|sg| Ok((sg.losses(), sg.gradients()?)))
        .map_err(diverged)?;
    adamw_step(&mut state.params, &grads, &mut state.opt, &config.adamw()).map_err(diverged)?;
    state.ema.update(&state.params)?;
    state.step += 1;
    Ok(losses)
}

/// Aggregate metrics from a periodic evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fd: f64,
    pub kl: f64,
    pub align_acc: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            fd: r.aggregate.fd,
            kl: r.aggregate.kl,
            align_acc: r.aggregate.align_acc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Step count after the update.
    pub step: u64,
    pub losses: StepLosses,
    pub eval: Option<EvalSummary>,
}

pub const METRICS_HEADER: &str = "step,total_loss,amg_loss,align_loss,fd,kl,align_acc";

/// Renders log rows as CSV; evaluation columns are empty between evaluations.
pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let eval = r
            .eval
            .map_or_else(|| ",,".to_string(), |e| format!("{},{},{}", e.fd, e.kl, e.align_acc));
        s.push_str(&format!(
            "{},{},{},{},{eval}\n",
            r.step, r.losses.total, r.losses.amg, r.losses.align
        ));
    }
    s
}

/// A training run bound to its task and encoder.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    task: Task,
    encoder: FrozenDualEncoder,
    state: ModelState,
    eval_sampler: Option<SamplerConfig>,
}

impl Trainer {
    pub fn new(config: TrainConfig, task: Task) -> Result<Self> {
        config.validate_for(&task)?;
        let encoder = config.encoder(&task)?;
        let state = ModelState::init(&config)?;
        Ok(Self {
            config,
            task,
            encoder,
            state,
            eval_sampler: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate_for(&ckpt.task)?;
        let encoder = ckpt.config.encoder(&ckpt.task)?;
        Ok(Self {
            config: ckpt.config,
            task: ckpt.task,
            encoder,
            state: ckpt.state,
            eval_sampler: None,
        })
    }

    /// Adopts the run-length and logging settings of `config`; every other
    /// field must match the current config.
    pub fn with_schedule(mut self, config: &TrainConfig) -> Result<Self> {
        let mut check = config.clone();
        check.total_steps = self.config.total_steps;
        check.eval_every = self.config.eval_every;
        check.eval_samples = self.config.eval_samples;
        check.checkpoint_every = self.config.checkpoint_every;
        if check != self.config {
            return Err(Error::Config("only the schedule of a resumed run may change".into()));
        }
        self.config = config.clone();
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn encoder(&self) -> &FrozenDualEncoder {
        &self.encoder
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// Draws this step's inputs from the run RNG and applies [`train_step`].
    /// On error the state, including the RNG, is left as it was.
    pub fn step_once(&mut self) -> Result<StepLosses> {
        let rng = self.state.rng.clone();
        let inputs = draw_step_inputs(&mut self.state.rng, &self.task, &self.encoder, &self.config)?;
        train_step(&mut self.state, &inputs, &self.config, &self.encoder).inspect_err(|_| self.state.rng = rng)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            task: self.task.clone(),
            state: self.state.clone(),
        }
    }

    /// Sampler for periodic evaluations in place of the default one.
    pub fn with_eval_sampler(mut self, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate()?;
        self.eval_sampler = Some(sampler);
        Ok(self)
    }

    /// Evaluates the EMA weights, by default with the default sampler at the
    /// configured inference scale and the training seed.
    pub fn evaluate(&self, per_condition: usize, exec: Execution) -> Result<EvalReport> {
        let sampler = self.eval_sampler.clone().unwrap_or_else(|| SamplerConfig {
            cfg_scale: self.config.guidance.cfg_scale,
            seed: self.config.seed,
            ..SamplerConfig::default()
        });
        sample_and_evaluate(&self.state.ema.shadow, &self.config.model, &self.encoder, &self.task, per_condition, &sampler, exec)
    }

    /// Trains until `until` steps have been taken. Periodic evaluations need
    /// the gaussian task; checkpoints are written under `out_dir` when given.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        self.run_into(until, out_dir, &mut rows)?;
        Ok(rows)
    }

    /// Like [`Trainer::run`] but appends to `rows`, so the rows logged before
    /// a failing step survive the error. On error the state is that of the
    /// start of the failing step.
    pub fn run_into(&mut self, until: u64, out_dir: Option<&Path>, rows: &mut Vec<LogRow>) -> Result<()> {
        let can_eval = self.config.eval_every > 0 && self.task.gaussian().is_ok();
        while self.state.step < until {
            let losses = self.step_once()?;
            let step = self.state.step;
            let eval = if can_eval && step.is_multiple_of(self.config.eval_every) {
                Some(EvalSummary::from(&self.evaluate(self.config.eval_samples, Execution::Parallel)?))
            } else {
                None
            };
            rows.push(LogRow { step, losses, eval });
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && step.is_multiple_of(every)) || step == until {
                    let ckpt = self.checkpoint();
                    if every > 0 && step.is_multiple_of(every) {
                        save_checkpoint(&ckpt, &dir.join(format!("checkpoint_{step:08}.ckpt")))?;
                    }
                    save_checkpoint(&ckpt, &dir.join("latest.ckpt"))?;
                }
            }
        }
        Ok(())
    }
}

/// Runs `config.total_steps` steps from a fresh initialization.
pub fn train(config: &TrainConfig, task: &Task) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone(), task.clone())?;
    trainer.run(config.total_steps, None)?;
    Ok(trainer.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            model: VelocityNetConfig {
                depth: 2,
                width: 16,
                time_embed_dim: 8,
                ..VelocityNetConfig::mlp(2, 8)
            },
            align: AlignConfig {
                projector_hidden: 8,
                ..AlignConfig::default()
            },
            batch_size: 8,
            total_steps: 5,
            guidance: GuidanceConfig {
                warmup_steps: 2,
                ..GuidanceConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rng_draw_order() {
        let cfg = small();
        let task = Task::default();
        let enc = cfg.encoder(&task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = draw_step_inputs(&mut rng, &task, &enc, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&task, &enc, &mut rng, 8).unwrap();
        let eps: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let t: Vec<f64> = (0..8).map(|_| rng.random()).collect();
        assert_eq!((a.batch, a.eps, a.t), (batch, eps, t));
    }

    #[test]
    fn one_step_moves_params() {
        let mut cfg = small();
        cfg.total_steps = 1;
        let ckpt = train(&cfg, &Task::default()).unwrap();
        assert_eq!(ckpt.state.step, 1);
        let init = ModelState::init(&cfg).unwrap();
        assert!(!ckpt.state.params.bit_eq(&init.params));
    }

    #[test]
    fn deterministic_losses() {
        let cfg = small();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), Task::default()).unwrap();
            t.run(5, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.losses.align.abs() <= 1.0 && r.losses.align != 0.0 && r.losses.total.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut cfg = small();
        cfg.model.cond_dim = 3;
        assert!(matches!(Trainer::new(cfg, Task::default()), Err(Error::Config(_))));
    }
}
