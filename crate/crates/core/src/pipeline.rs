//! Sampling a trained network per condition and scoring the result.

use crate::error::Result;
use crate::metrics::{evaluate, EvalReport, ReportMeta};
use crate::nets::{ModelParams, VelocityNetConfig};
use crate::oracles::{FrozenDualEncoder, Task};
use crate::samplers::{initial_noise, run_sampler, Execution, GuidedVelocity, SampleOutput, SamplerConfig};

/// Labels `0, 0, ..., 1, 1, ...` with `per_condition` of each.
pub fn balanced_labels(k: usize, per_condition: usize) -> Vec<usize> {
    (0..k).flat_map(|l| std::iter::repeat_n(l, per_condition)).collect()
}

/// Generated samples with the labels they were conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub labels: Vec<usize>,
    pub output: SampleOutput,
}

/// Samples one trajectory per label, starting from noise derived from the
/// sampler seed.
pub fn generate(
    params: &ModelParams<f32>,
    model: &VelocityNetConfig,
    encoder: &FrozenDualEncoder,
    labels: &[usize],
    sampler: &SamplerConfig,
    exec: Execution,
) -> Result<Generation> {
    let mut conditions = Vec::with_capacity(labels.len() * model.cond_dim);
    for &l in labels {
        conditions.extend(encoder.encode_condition(l)?.iter().map(|&v| v as f32));
    }
    let field = GuidedVelocity::new(params, model, &conditions, sampler.cfg_scale)?;
    let x1 = initial_noise(sampler.seed, labels.len(), model.data_dim);
    let output = run_sampler(&field, &x1, sampler, exec)?;
    Ok(Generation {
        labels: labels.to_vec(),
        output,
    })
}

/// Generates `per_condition` samples for every label and evaluates them
/// against the task's closed-form components.
pub fn sample_and_evaluate(
    params: &ModelParams<f32>,
    model: &VelocityNetConfig,
    encoder: &FrozenDualEncoder,
    task: &Task,
    per_condition: usize,
    sampler: &SamplerConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let gaussian = task.gaussian()?;
    let labels = balanced_labels(task.k(), per_condition);
    let gen = generate(params, model, encoder, &labels, sampler, exec)?;
    let meta = ReportMeta {
        steps: Some(sampler.steps),
        cfg_scale: Some(sampler.cfg_scale),
        sampler: Some(sampler.kind.to_string()),
        seed: Some(sampler.seed),
        ..ReportMeta::default()
    };
    evaluate(&gen.output.samples, &gen.labels, gaussian, meta)
}
