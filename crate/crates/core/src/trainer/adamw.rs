use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::tensor::{Scalar, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = ModelParams::from_map(
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        );
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update. Decoupled decay scales the parameters by
/// `1 - lr * weight_decay` before the moments are updated.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    opt: &mut OptimizerState<T>,
    config: &AdamWConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&opt.m) || !params.same_layout(&opt.v) {
        return Err(Error::shape("adamw_step", "parameters, gradients and moments differ"));
    }
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adamw_step" });
    }
    opt.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powf(opt.step as f64);
    let bc2 = 1.0 - b2.powf(opt.step as f64);
    let decay = T::cast_from(1.0 - config.lr * config.weight_decay);
    let (b1t, b2t) = (T::cast_from(b1), T::cast_from(b2));
    let (c1, c2) = (T::cast_from(1.0 - b1), T::cast_from(1.0 - b2));
    let lr_hat = T::cast_from(config.lr / bc1);
    let inv_bc2 = T::cast_from(1.0 / bc2);
    let eps = T::cast_from(config.eps);
    let decays = config.weight_decay != 0.0;
    let moments = opt.m.iter_mut().zip(opt.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            if decays {
                p[i] = p[i] * decay;
            }
            m[i] = b1t * m[i] + c1 * gi;
            v[i] = b2t * v[i] + c2 * gi * gi;
            p[i] = p[i] - lr_hat * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn params(vals: &[f64]) -> ModelParams<f64> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::from_vec(vals.to_vec()));
        ModelParams::from_map(m)
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let mut opt = OptimizerState::new(&p);
        adamw_step(&mut p, &params(&[0.0; 3]), &mut opt, &AdamWConfig::default()).unwrap();
        assert!(p.bit_eq(&params(&[1.0, -2.0, 0.5])));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig::default();
        let mut p = params(&[1.0, -2.0, 0.5]);
        let mut opt = OptimizerState::new(&p);
        adamw_step(&mut p, &params(&[0.3, -7.0, 1e-3]), &mut opt, &cfg).unwrap();
        let d = p.get("p").unwrap().data();
        let expect = [1.0 - 1e-4, -2.0 + 1e-4, 0.5 - 1e-4];
        for (a, b) in d.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = params(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(&p);
        adamw_step(&mut p, &params(&[0.0, 0.0]), &mut opt, &cfg).unwrap();
        let s = 1.0 - 1e-4 * 0.1;
        assert_eq!(p.get("p").unwrap().data(), &[s, -2.0 * s]);
    }

    #[test]
    fn rejects_nan_and_layout() {
        let mut p = params(&[1.0]);
        let mut opt = OptimizerState::new(&p);
        assert!(adamw_step(&mut p, &params(&[f64::NAN]), &mut opt, &AdamWConfig::default()).is_err());
        assert!(adamw_step(&mut p, &params(&[1.0, 2.0]), &mut opt, &AdamWConfig::default()).is_err());
    }
}
