//! Oracle self-check suites: reverse-mode gradients against central
//! differences, stop-gradient semantics, transport of the closed-form
//! Gaussian field, the EMA recurrence, and metric closed forms.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::guidance::EmaState;
use crate::metrics::{fit_gaussian, frechet_gaussian, kl_gaussian, GaussianFit};
use crate::nets::{self, ModelParams, VelocityNetConfig};
use crate::objectives::{self, AlignConfig, GuidanceConfig, TargetVariant};
use crate::oracles::{oracle_velocity_into, ConditionalGaussianTask, Task};
use crate::samplers::{
    euler_maruyama_sample, euler_sample, initial_noise, DiffusionSchedule, Execution, FnField, InterpolantScore,
};
use crate::tensor::{finite_diff_gradient, max_relative_error, Graph, Tensor};
use crate::trainer::{build_step_loss_impl, draw_step_inputs, Objective, TrainConfig};

/// Faults that can be injected to confirm a suite notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negates the guidance scale inside the model-guided target.
    pub flip_guidance_sign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst measured error (or value) for the suite.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &'static str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured < tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

/// A tiny model/loss configuration for gradient checks.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub label: String,
    pub config: TrainConfig,
    pub task: Task,
}

/// Loss configurations covered by the gradient suite, cycled over seeds:
/// plain flow matching, the guided target at `w` in {0, 1, 1.45}, and the
/// guided target with alignment at weight 0.5. Odd seeds use the transformer.
pub fn grad_cases(count: usize) -> Vec<GradCase> {
    let kinds: [(&str, Objective, f64, f64, TargetVariant); 6] = [
        ("fm", Objective::FmCfgBaseline, 0.0, 0.0, TargetVariant::Appendix),
        ("amg_w0", Objective::Amg, 0.0, 0.0, TargetVariant::Appendix),
        ("amg_w1", Objective::Amg, 1.0, 0.0, TargetVariant::Appendix),
        ("amg_w1.45", Objective::Amg, 1.45, 0.0, TargetVariant::Appendix),
        ("amg_w1.45_align0.5", Objective::Amg, 1.45, 0.5, TargetVariant::Appendix),
        ("amg_main_text_align0.5", Objective::Amg, 1.0, 0.5, TargetVariant::MainText),
    ];
    (0..count)
        .map(|i| {
            let (name, objective, w, lambda, variant) = kinds[i % kinds.len()];
            let transformer = i % 2 == 1;
            let (model, task, patch_count) = if transformer {
                let mut m = VelocityNetConfig::transformer(4, 3, 2);
                m.width = 4;
                m.heads = 2;
                m.time_embed_dim = 4;
                let task = ConditionalGaussianTask {
                    means: vec![vec![1.0, 0.5, -1.0, 0.0], vec![-1.0, 0.0, 0.5, 1.0]],
                    sigma: 0.5,
                    cond_dim: 3,
                };
                (m, task, 2)
            } else {
                let m = VelocityNetConfig {
                    depth: 2,
                    width: 5,
                    time_embed_dim: 4,
                    ..VelocityNetConfig::mlp(2, 3)
                };
                let task = ConditionalGaussianTask {
                    means: vec![vec![1.0, 1.0], vec![-1.0, 0.5], vec![0.0, -1.0]],
                    sigma: 0.5,
                    cond_dim: 3,
                };
                (m, task, 1)
            };
            let config = TrainConfig {
                objective,
                model,
                batch_size: 3,
                seed: 100 + i as u64,
                guidance: GuidanceConfig {
                    w,
                    psi: 0.3,
                    warmup_steps: 0,
                    variant,
                    ..GuidanceConfig::default()
                },
                align: AlignConfig {
                    lambda,
                    tap_layer: Some(1),
                    patch_count,
                    feature_dim: 2,
                    projector_hidden: 3,
                },
                ..TrainConfig::default()
            };
            GradCase {
                label: format!("{name}/{}", if transformer { "transformer" } else { "mlp" }),
                config,
                task: Task::Gaussian(task),
            }
        })
        .collect()
}

fn perturbed(params: &ModelParams<f64>, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams<f64> {
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the full step loss for one case, in 64-bit.
pub fn grad_case_error(case: &GradCase, faults: Faults) -> Result<f64> {
    let cfg = &case.config;
    let encoder = cfg.encoder(&case.task)?;
    let projector = cfg.align.projector_shape(&cfg.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = ModelParams::<f64>::init(&cfg.model, Some(projector), cfg.seed)?;
    let params = perturbed(&base, &mut rng, 0.3);
    let ema = perturbed(&base, &mut rng, 0.3);
    let inputs = draw_step_inputs(&mut rng, &case.task, &encoder, cfg)?;
    let flip = faults.flip_guidance_sign;
    let sg = build_step_loss_impl(&params, &ema, 0, &inputs, cfg, &encoder, flip)?;
    let grads = sg.gradients()?;
    let names: Vec<String> = params.names().cloned().collect();
    let flat: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).expect("name").clone()).collect();
    let numeric = finite_diff_gradient(
        |ps: &[Tensor<f64>]| {
            let p = ModelParams::from_map(names.iter().cloned().zip(ps.iter().cloned()).collect::<BTreeMap<_, _>>());
            let sg = build_step_loss_impl(&p, &ema, 0, &inputs, cfg, &encoder, flip)?;
            Ok(sg.losses().total)
        },
        &flat,
        1e-5,
    )?;
    let analytic: Vec<Tensor<f64>> = names.iter().map(|n| grads.get(n).expect("name").clone()).collect();
    Ok(max_relative_error(&analytic, &numeric, 1e-7).max_relative)
}

/// Gradient suite over `count` cases; tolerance 1e-4 relative.
pub fn gradient_suite(count: usize, faults: Faults) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut worst_label = String::new();
    for case in grad_cases(count) {
        let e = grad_case_error(&case, faults)?;
        if e >= worst {
            worst = e;
            worst_label = case.label.clone();
        }
    }
    Ok(SuiteResult::new(
        "gradient",
        worst,
        1e-4,
        format!("{count} cases, worst {worst_label}"),
    ))
}

/// Compares the gradient of the guided loss, whose EMA branches are computed
/// from the *same* trainable parameters, with the gradient of a plain squared
/// error against a constant target recomputed elementwise from the branch
/// values. Returns the largest relative error.
pub fn stop_gradient_error(seed: u64, w: f64, variant: TargetVariant, faults: Faults) -> Result<f64> {
    let model = VelocityNetConfig {
        depth: 2,
        width: 6,
        time_embed_dim: 4,
        ..VelocityNetConfig::mlp(2, 3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ModelParams::<f64>::init(&model, None, seed)?;
    let params = perturbed(&base, &mut rng, 0.3);
    let b = 5;
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let x0 = Tensor::new(vec![b, 2], normal(2 * b))?;
    let eps = Tensor::new(vec![b, 2], normal(2 * b))?;
    let cond = Tensor::new(vec![b, 3], normal(3 * b))?;
    let ts: Vec<f64> = (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect();
    let sample = objectives::interpolate_rows(&x0, &eps, &ts)?;
    let null = Tensor::zeros(vec![b, 3]);

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true)?;
    let online = nets::forward_batch(&mut g, &bound, &model, &sample.x_t, &cond, &ts, None)?.velocity;
    let uc = nets::forward_batch(&mut g, &bound, &model, &sample.x_t, &cond, &ts, None)?.velocity;
    let un = nets::forward_batch(&mut g, &bound, &model, &sample.x_t, &null, &ts, None)?.velocity;
    let u = g.constant(sample.u.clone())?;
    let target = objectives::amg_target_impl(&mut g, u, uc, un, w, variant, faults.flip_guidance_sign)?;
    let loss = objectives::amg_loss(&mut g, online, target)?;
    let grads = g.backward(loss)?;

    let (ucv, unv) = (g.value(uc).data().to_vec(), g.value(un).data().to_vec());
    let frozen: Vec<f64> = (0..sample.u.len())
        .map(|i| {
            let u = sample.u.data()[i];
            match variant {
                TargetVariant::Appendix => u + w * (ucv[i] - unv[i]),
                TargetVariant::MainText => u + w * ucv[i] - unv[i],
            }
        })
        .collect();
    let mut g2 = Graph::new();
    let bound2 = params.bind(&mut g2, true)?;
    let online2 = nets::forward_batch(&mut g2, &bound2, &model, &sample.x_t, &cond, &ts, None)?.velocity;
    let tgt = g2.constant(Tensor::new(vec![b, 2], frozen)?)?;
    let loss2 = objectives::fm_loss(&mut g2, online2, tgt)?;
    let grads2 = g2.backward(loss2)?;

    let mut a = Vec::new();
    let mut n = Vec::new();
    for ((_, &v1), (_, &v2)) in bound.iter().zip(bound2.iter()) {
        a.push(grads.get(v1));
        n.push(grads2.get(v2));
    }
    Ok(max_relative_error(&a, &n, 1e-12).max_relative)
}

pub fn stop_gradient_suite(faults: Faults) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..4 {
        for w in [0.5, 1.0, 1.45] {
            for variant in [TargetVariant::Appendix, TargetVariant::MainText] {
                worst = worst.max(stop_gradient_error(seed, w, variant, faults)?);
                cases += 1;
            }
        }
    }
    Ok(SuiteResult::new("stop_gradient", worst, 1e-6, format!("{cases} cases")))
}

/// Frechet distance between samples transported by the closed-form field
/// and the target `N(mu, sigma^2 I)`. `stochastic` selects Euler–Maruyama
/// with `g(t) = t`.
pub fn transport_fd(mu: &[f64], sigma: f64, n: usize, steps: usize, stochastic: bool, seed: u64) -> Result<f64> {
    let d = mu.len();
    let mu_owned = mu.to_vec();
    let field = FnField::new(d, move |x: &[f64], t: f64, u: &mut [f64]| oracle_velocity_into(x, t, &mu_owned, sigma, u));
    let x1 = initial_noise(seed, n, d);
    let out = if stochastic {
        euler_maruyama_sample(&field, &InterpolantScore, &x1, steps, DiffusionSchedule::Linear(1.0), seed, Execution::Parallel)?
    } else {
        euler_sample(&field, &x1, steps, Execution::Parallel)?
    };
    let fit = fit_gaussian(&out.samples, d)?;
    frechet_gaussian(&fit, &GaussianFit::isotropic(mu.to_vec(), sigma * sigma)?)
}

pub fn transport_suite() -> Result<Vec<SuiteResult>> {
    let mu = [2.0, -1.0];
    let ode = transport_fd(&mu, 0.5, 10_000, 200, false, 0)?;
    let sde = transport_fd(&mu, 0.5, 10_000, 250, true, 0)?;
    Ok(vec![
        SuiteResult::new("transport_euler", ode, 0.01, "200 steps, 10k samples".into()),
        SuiteResult::new("transport_euler_maruyama", sde, 0.05, "g(t) = t, 250 steps, 10k samples".into()),
    ])
}

/// Largest deviation between an EMA driven through `steps` random parameter
/// values and the closed form `d^K s0 + (1 - d) sum_j d^(K - j) p_j`.
pub fn ema_recurrence_error(steps: usize, decay: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng| {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::new(vec![3], (0..3).map(|_| rng.sample(StandardNormal)).collect()).unwrap());
        m.insert("b".to_string(), Tensor::new(vec![2, 2], (0..4).map(|_| rng.sample(StandardNormal)).collect()).unwrap());
        ModelParams::<f64>::from_map(m)
    };
    let s0 = make(&mut rng);
    let trajectory: Vec<ModelParams<f64>> = (0..steps).map(|_| make(&mut rng)).collect();
    let mut ema = EmaState::new(&s0, decay)?;
    for p in &trajectory {
        ema.update(p)?;
    }
    let k = steps as i32;
    let mut worst = 0.0f64;
    for (name, shadow) in ema.shadow.iter() {
        for i in 0..shadow.len() {
            let mut expected = decay.powi(k) * s0.get(name).expect("name").data()[i];
            for (j, p) in trajectory.iter().enumerate() {
                expected += (1.0 - decay) * decay.powi(k - 1 - j as i32) * p.get(name).expect("name").data()[i];
            }
            worst = worst.max((shadow.data()[i] - expected).abs());
        }
    }
    Ok(worst)
}

pub fn ema_suite() -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for (seed, decay) in [(0, 0.9999), (1, 0.999), (2, 0.9), (3, 0.5)] {
        worst = worst.max(ema_recurrence_error(500, decay, seed)?);
    }
    Ok(SuiteResult::new("ema_recurrence", worst, 1e-6, "500 steps, 4 decays".into()))
}

/// Worst deviation of the metric spot checks from their closed forms.
pub fn metric_closed_form_error() -> Result<f64> {
    let iso = |m: [f64; 2], s2: f64| GaussianFit::isotropic(m.to_vec(), s2);
    let fd_shift = frechet_gaussian(&iso([0.0, 0.0], 1.0)?, &iso([3.0, 0.0], 1.0)?)?;
    let fd_scale = frechet_gaussian(&iso([0.0, 0.0], 1.0)?, &iso([0.0, 0.0], 4.0)?)?;
    let kl_shift = kl_gaussian(&iso([1.0, 0.0], 1.0)?, &iso([0.0, 0.0], 1.0)?)?;
    let kl_scale = kl_gaussian(&iso([0.0, 0.0], 4.0)?, &iso([0.0, 0.0], 1.0)?)?;
    let exact = if fd_shift == 9.0 { 0.0 } else { f64::INFINITY };
    Ok([
        exact,
        (fd_scale - 2.0).abs(),
        (kl_shift - 0.5).abs(),
        (kl_scale - (3.0 - 4f64.ln())).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

pub fn metric_suite() -> Result<SuiteResult> {
    Ok(SuiteResult::new(
        "metric_closed_forms",
        metric_closed_form_error()?,
        1e-9,
        "FD shift/scale, KL shift/scale".into(),
    ))
}

/// Runs every suite. Errors inside a suite are reported as failures.
pub fn run_all(faults: Faults) -> Vec<SuiteResult> {
    let failed = |name: &'static str, e: crate::Error| SuiteResult {
        name,
        passed: false,
        measured: f64::NAN,
        tolerance: 0.0,
        detail: format!("error: {e}"),
    };
    let mut out = Vec::new();
    out.push(gradient_suite(20, faults).unwrap_or_else(|e| failed("gradient", e)));
    out.push(stop_gradient_suite(faults).unwrap_or_else(|e| failed("stop_gradient", e)));
    match transport_suite() {
        Ok(v) => out.extend(v),
        Err(e) => out.push(failed("transport", e)),
    }
    out.push(ema_suite().unwrap_or_else(|e| failed("ema_recurrence", e)));
    out.push(metric_suite().unwrap_or_else(|e| failed("metric_closed_forms", e)));
    out
}
