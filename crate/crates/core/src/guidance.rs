//! EMA shadow weights, condition dropout, the guidance warmup rule and the
//! inference-time classifier-free guidance combination.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::objectives::GuidanceConfig;
use crate::tensor::Scalar;

/// Exponential moving average of the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ModelParams<T>,
    pub decay: f64,
    pub step: u64,
}

impl<T: Scalar> EmaState<T> {
    /// Starts as an exact copy of `params`.
    pub fn new(params: &ModelParams<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
            step: 0,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ModelParams<T>) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(Error::shape("ema_update", "shadow and online parameters differ"));
        }
        let d = T::cast_from(self.decay);
        let e = T::cast_from(1.0 - self.decay);
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + e * pv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Draws exactly one uniform variate; true with probability `psi`.
pub fn should_drop<R: Rng + ?Sized>(psi: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < psi
}

/// Returns the null condition with probability `psi`, otherwise `v`.
pub fn drop_condition<T: Scalar, R: Rng + ?Sized>(v: &[T], psi: f64, rng: &mut R) -> Vec<T> {
    if should_drop(psi, rng) {
        vec![T::zero(); v.len()]
    } else {
        v.to_vec()
    }
}

/// Guidance scale in force at `step`: zero during warmup, `w` afterwards.
pub fn effective_w(step: u64, config: &GuidanceConfig) -> f64 {
    if step < config.warmup_steps {
        0.0
    } else {
        config.w
    }
}

/// `u_uncond + s * (u_cond - u_uncond)`; returns `u_cond` unchanged at `s = 1`
/// and `u_uncond` at `s = 0`.
pub fn cfg_combine<T: Scalar>(u_cond: &[T], u_uncond: &[T], s: f64) -> Result<Vec<T>> {
    if u_cond.len() != u_uncond.len() {
        return Err(Error::shape(
            "cfg_combine",
            format!("{} vs {} elements", u_cond.len(), u_uncond.len()),
        ));
    }
    if !(s >= 0.0) {
        return Err(Error::InvalidArgument(format!("cfg scale must be >= 0, got {s}")));
    }
    if s == 1.0 {
        return Ok(u_cond.to_vec());
    }
    if s == 0.0 {
        return Ok(u_uncond.to_vec());
    }
    let s = T::cast_from(s);
    Ok(u_cond
        .iter()
        .zip(u_uncond)
        .map(|(&c, &n)| n + s * (c - n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn params(v: f64) -> ModelParams<f64> {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::from_vec(vec![v, 2.0 * v]));
        ModelParams::from_map(m)
    }

    #[test]
    fn decay_extremes() {
        let mut e = EmaState::new(&params(1.0), 0.0).unwrap();
        e.update(&params(3.0)).unwrap();
        assert!(e.shadow.bit_eq(&params(3.0)));
        let mut e = EmaState::new(&params(1.0), 1.0).unwrap();
        e.update(&params(3.0)).unwrap();
        assert!(e.shadow.bit_eq(&params(1.0)));
        assert_eq!(e.step, 1);
    }

    #[test]
    fn constant_target_closed_form() {
        let (s0, p, k) = (1.0, 5.0, 2000);
        let mut e = EmaState::new(&params(s0), 0.9999).unwrap();
        for _ in 0..k {
            e.update(&params(p)).unwrap();
        }
        let expected = p + 0.9999f64.powi(k) * (s0 - p);
        assert!((e.shadow.get("a").unwrap().data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn layout_mismatch() {
        let mut e = EmaState::new(&params(1.0), 0.5).unwrap();
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::from_vec(vec![1.0, 2.0]));
        assert!(e.update(&ModelParams::from_map(m)).is_err());
        assert!(EmaState::new(&params(1.0), 1.5).is_err());
    }

    #[test]
    fn drop_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = [1.0f64, -2.0];
        for _ in 0..100 {
            assert_eq!(drop_condition(&v, 1.0, &mut rng), vec![0.0, 0.0]);
            assert_eq!(drop_condition(&v, 0.0, &mut rng), v.to_vec());
        }
    }

    #[test]
    fn drop_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let dropped = (0..n).filter(|_| should_drop(0.1, &mut rng)).count();
        let freq = dropped as f64 / n as f64;
        assert!((freq - 0.1).abs() < 0.006, "{freq}");
    }

    #[test]
    fn drop_pattern_is_seeded() {
        let pattern = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| should_drop(0.3, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(pattern(9), pattern(9));
    }

    #[test]
    fn warmup_rule() {
        let cfg = GuidanceConfig {
            w: 1.45,
            warmup_steps: 10_000,
            ..Default::default()
        };
        assert_eq!(effective_w(0, &cfg), 0.0);
        assert_eq!(effective_w(9_999, &cfg), 0.0);
        assert_eq!(effective_w(10_000, &cfg), 1.45);
        let cfg = GuidanceConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(effective_w(0, &cfg), 1.45);
    }

    #[test]
    fn cfg_combine_values() {
        let c = [0.1f64, 0.7];
        let n = [0.3f64, -0.2];
        assert_eq!(cfg_combine(&c, &n, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&c, &n, 0.0).unwrap(), n.to_vec());
        let g = cfg_combine(&[2.0f64, 0.0], &[1.0, 0.0], 1.45).unwrap();
        assert!((g[0] - 2.45).abs() < 1e-15 && g[1] == 0.0);
        assert!(cfg_combine(&c, &[1.0], 1.0).is_err());
        assert!(cfg_combine(&c, &n, -1.0).is_err());
    }
}
