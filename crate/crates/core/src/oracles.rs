//! Synthetic conditional tasks, the frozen dual-role encoder, closed-form
//! velocity fields and the Bayes classifier.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K` isotropic Gaussians with a shared standard deviation and equal priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalGaussianTask {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub cond_dim: usize,
}

impl Default for ConditionalGaussianTask {
    /// Four modes at `(+-3, +-3)`, sigma 0.5, 8-dimensional conditions.
    fn default() -> Self {
        Self {
            means: vec![vec![3.0, 3.0], vec![-3.0, 3.0], vec![-3.0, -3.0], vec![3.0, -3.0]],
            sigma: 0.5,
            cond_dim: 8,
        }
    }
}

impl ConditionalGaussianTask {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.means.is_empty() || d == 0 {
            return Err(Error::Config("task.means must contain at least one non-empty vector".into()));
        }
        if self.means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("task.means must be finite vectors of equal length".into()));
        }
        for i in 0..self.means.len() {
            for j in 0..i {
                if self.means[i] == self.means[j] {
                    return Err(Error::Config(format!("task.means {j} and {i} coincide")));
                }
            }
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("task.sigma must be > 0, got {}", self.sigma)));
        }
        if self.cond_dim == 0 {
            return Err(Error::Config("task.cond_dim must be >= 1".into()));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label < self.k() {
            Ok(())
        } else {
            Err(Error::LabelOutOfRange { label, k: self.k() })
        }
    }
}

/// Two-colour checkerboard on `[-2, 2]^2` with `cells x cells` squares;
/// label `c` selects the squares whose `(i + j) % 2 == c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardTask {
    pub cells: usize,
    pub cond_dim: usize,
}

impl Default for CheckerboardTask {
    fn default() -> Self {
        Self { cells: 4, cond_dim: 8 }
    }
}

/// A conditional data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Gaussian(ConditionalGaussianTask),
    Checkerboard(CheckerboardTask),
}

impl Default for Task {
    fn default() -> Self {
        Task::Gaussian(ConditionalGaussianTask::default())
    }
}

impl Task {
    pub fn k(&self) -> usize {
        match self {
            Task::Gaussian(t) => t.k(),
            Task::Checkerboard(_) => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Task::Gaussian(t) => t.dim(),
            Task::Checkerboard(_) => 2,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            Task::Gaussian(t) => t.cond_dim,
            Task::Checkerboard(t) => t.cond_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Gaussian(t) => t.validate(),
            Task::Checkerboard(t) if t.cells < 2 || t.cond_dim == 0 => {
                Err(Error::Config("checkerboard needs cells >= 2 and cond_dim >= 1".into()))
            }
            Task::Checkerboard(_) => Ok(()),
        }
    }

    /// The Gaussian task, for metrics that need closed forms.
    pub fn gaussian(&self) -> Result<&ConditionalGaussianTask> {
        match self {
            Task::Gaussian(t) => Ok(t),
            Task::Checkerboard(_) => Err(Error::InvalidArgument(
                "closed-form metrics are only defined for the gaussian task".into(),
            )),
        }
    }

    /// Draws one `x0` with the given label, appending it to `out`.
    pub fn draw<R: Rng + ?Sized>(&self, label: usize, rng: &mut R, out: &mut Vec<f64>) -> Result<()> {
        if label >= self.k() {
            return Err(Error::LabelOutOfRange { label, k: self.k() });
        }
        match self {
            Task::Gaussian(t) => {
                for &m in &t.means[label] {
                    let z: f64 = rng.sample(StandardNormal);
                    out.push(m + t.sigma * z);
                }
            }
            Task::Checkerboard(t) => {
                let n = t.cells;
                let side = 4.0 / n as f64;
                let squares: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == label)
                    .collect();
                let (i, j) = squares[rng.random_range(0..squares.len())];
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                out.push(-2.0 + (i as f64 + u) * side);
                out.push(-2.0 + (j as f64 + v) * side);
            }
        }
        Ok(())
    }
}

/// A batch of clean data with labels and condition embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    /// Row-major `(n, dim)`.
    pub x0: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major `(n, cond_dim)`.
    pub conditions: Vec<f64>,
}

/// Draws `n` examples: for each, a uniform label and then its data point.
pub fn sample_batch<R: Rng + ?Sized>(
    task: &Task,
    encoder: &FrozenDualEncoder,
    rng: &mut R,
    n: usize,
) -> Result<DataBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let k = task.k();
    let mut x0 = Vec::with_capacity(n * task.dim());
    let mut labels = Vec::with_capacity(n);
    let mut conditions = Vec::with_capacity(n * task.cond_dim());
    for _ in 0..n {
        let label = rng.random_range(0..k);
        task.draw(label, rng, &mut x0)?;
        labels.push(label);
        conditions.extend_from_slice(encoder.encode_condition(label)?);
    }
    Ok(DataBatch { x0, labels, conditions })
}

/// Fixed condition codebook plus a fixed orthonormal-row feature map for data
/// patches. Nothing here is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDualEncoder {
    codebook: Vec<Vec<f64>>,
    /// `(feature_dim, patch_dim)` with orthonormal rows.
    signal_map: Vec<Vec<f64>>,
    seed: u64,
}

impl FrozenDualEncoder {
    /// Unit-norm random codebook of `k` vectors in `cond_dim` dimensions and a
    /// random `feature_dim x patch_dim` map with orthonormal rows.
    pub fn new(k: usize, cond_dim: usize, patch_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || cond_dim == 0 || patch_dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be >= 1".into()));
        }
        if feature_dim == 0 || feature_dim > patch_dim {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {feature_dim} must lie in 1..={patch_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let mut codebook = Vec::with_capacity(k);
        while codebook.len() < k {
            let v = gauss(cond_dim);
            let n = norm(&v);
            if n > 1e-6 {
                codebook.push(v.iter().map(|x| x / n).collect());
            }
        }
        let mut signal_map: Vec<Vec<f64>> = Vec::with_capacity(feature_dim);
        while signal_map.len() < feature_dim {
            let mut v = gauss(patch_dim);
            for _ in 0..2 {
                for r in &signal_map {
                    let p = dot(&v, r);
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                signal_map.push(v.iter().map(|x| x / n).collect());
            }
        }
        Ok(Self {
            codebook,
            signal_map,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k(&self) -> usize {
        self.codebook.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.codebook[0].len()
    }

    pub fn patch_dim(&self) -> usize {
        self.signal_map[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.signal_map.len()
    }

    pub fn signal_map(&self) -> &[Vec<f64>] {
        &self.signal_map
    }

    pub fn encode_condition(&self, label: usize) -> Result<&[f64]> {
        self.codebook
            .get(label)
            .map(Vec::as_slice)
            .ok_or(Error::LabelOutOfRange { label, k: self.k() })
    }

    /// Maps one patch to its target feature.
    pub fn encode_patch(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != self.patch_dim() {
            return Err(Error::shape(
                "encode_signal",
                format!("patch of length {}, expected {}", patch.len(), self.patch_dim()),
            ));
        }
        Ok(self.signal_map.iter().map(|r| dot(r, patch)).collect())
    }

    /// Splits every row of `x0: (n, patch_count * patch_dim)` into
    /// `patch_count` patches and encodes each; the result is
    /// `(n * patch_count, feature_dim)` row-major.
    pub fn encode_signal(&self, x0: &[f64], patch_count: usize) -> Result<Vec<f64>> {
        let width = patch_count * self.patch_dim();
        if patch_count == 0 || !x0.len().is_multiple_of(width) {
            return Err(Error::shape(
                "encode_signal",
                format!("{} values do not split into patches of {}", x0.len(), self.patch_dim()),
            ));
        }
        let mut out = Vec::with_capacity(x0.len() / self.patch_dim() * self.feature_dim());
        for patch in x0.chunks(self.patch_dim()) {
            out.extend(self.encode_patch(patch)?);
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `E[x0 - eps | x_t = x]` for `x0 ~ N(mu, sigma^2 I)`:
/// with `a = 1 - t`, `b = t`,
/// `mu + (a sigma^2 - b) / (a^2 sigma^2 + b^2) * (x - a mu)`.
pub fn oracle_velocity(x: &[f64], t: f64, mu: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if x.len() != mu.len() {
        return Err(Error::shape("oracle_velocity", format!("{} vs {}", x.len(), mu.len())));
    }
    let mut out = vec![0.0; x.len()];
    oracle_velocity_into(x, t, mu, sigma, &mut out);
    Ok(out)
}

pub(crate) fn oracle_velocity_into(x: &[f64], t: f64, mu: &[f64], sigma: f64, out: &mut [f64]) {
    let a = 1.0 - t;
    let b = t;
    let s2 = sigma * sigma;
    let c = (a * s2 - b) / (a * a * s2 + b * b);
    for ((o, &xv), &m) in out.iter_mut().zip(x).zip(mu) {
        *o = m + c * (xv - a * m);
    }
}

/// Log-weights `log p(k | x_t = x)` up to a shared constant.
fn log_posterior(task: &ConditionalGaussianTask, x: &[f64], t: f64) -> Vec<f64> {
    let a = 1.0 - t;
    let var = a * a * task.sigma * task.sigma + t * t;
    task.means
        .iter()
        .map(|m| -x.iter().zip(m).map(|(xv, mv)| (xv - a * mv).powi(2)).sum::<f64>() / (2.0 * var))
        .collect()
}

/// Unconditional oracle velocity for the equal-weight mixture: the
/// posterior-weighted sum of the per-component oracles.
pub fn mixture_oracle_velocity(task: &ConditionalGaussianTask, x: &[f64], t: f64) -> Result<Vec<f64>> {
    task.validate()?;
    let logw = log_posterior(task, x, t);
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; x.len()];
    for (m, wk) in task.means.iter().zip(&w) {
        let u = oracle_velocity(x, t, m, task.sigma)?;
        out.iter_mut().zip(u).for_each(|(o, v)| *o += wk / z * v);
    }
    Ok(out)
}

/// Nearest mean; ties go to the lowest index.
pub fn bayes_classify(x: &[f64], task: &ConditionalGaussianTask) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, m) in task.means.iter().enumerate() {
        let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Checks a label against a Gaussian task.
pub fn check_label(task: &ConditionalGaussianTask, label: usize) -> Result<()> {
    task.check_label(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_task() {
        let t = ConditionalGaussianTask::default();
        t.validate().unwrap();
        assert_eq!((t.k(), t.dim(), t.sigma, t.cond_dim), (4, 2, 0.5, 8));
        let mut bad = t.clone();
        bad.means[1] = bad.means[0].clone();
        assert!(bad.validate().is_err());
        bad = t.clone();
        bad.sigma = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_symmetry_and_endpoint() {
        let u = oracle_velocity(&[1.3, -0.2], 0.5, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
        let x = [0.7, -2.0];
        let u = oracle_velocity(&x, 0.0, &[2.0, 0.0], 0.5).unwrap();
        for (a, b) in u.iter().zip(x) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(oracle_velocity(&x, 1.2, &[0.0, 0.0], 1.0).is_err());
        assert!(oracle_velocity(&x, 0.2, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn classify_rules() {
        let t = ConditionalGaussianTask::default();
        assert_eq!(bayes_classify(&[-3.0, -3.0], &t), 2);
        assert_eq!(bayes_classify(&[0.0, 3.0], &t), 0);
        assert_eq!(bayes_classify(&[0.0, 0.0], &t), 0);
    }

    #[test]
    fn encoder_is_frozen_and_orthonormal() {
        let e = FrozenDualEncoder::new(4, 8, 3, 2, 11).unwrap();
        let e2 = FrozenDualEncoder::new(4, 8, 3, 2, 11).unwrap();
        assert_eq!(e, e2);
        assert_eq!(e.encode_condition(1).unwrap(), e.encode_condition(1).unwrap());
        assert!(e.encode_condition(4).is_err());
        for i in 0..2 {
            for j in 0..2 {
                let d = dot(&e.signal_map()[i], &e.signal_map()[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert_eq!(e.encode_signal(&[0.0; 6], 1).unwrap(), vec![0.0; 4]);
        for c in 0..4 {
            assert!((norm(e.encode_condition(c).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_single_component_matches_oracle() {
        let t = ConditionalGaussianTask {
            means: vec![vec![1.0, -1.0]],
            sigma: 0.4,
            cond_dim: 2,
        };
        let x = [0.2, 0.9];
        let a = mixture_oracle_velocity(&t, &x, 0.4).unwrap();
        let b = oracle_velocity(&x, 0.4, &[1.0, -1.0], 0.4).unwrap();
        for (p, q) in a.iter().zip(b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn checkerboard_labels() {
        let task = Task::Checkerboard(CheckerboardTask::default());
        let enc = FrozenDualEncoder::new(2, 8, 2, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&task, &enc, &mut rng, 500).unwrap();
        for (x, &l) in b.x0.chunks(2).zip(&b.labels) {
            let i = ((x[0] + 2.0) / 1.0).floor() as usize;
            let j = ((x[1] + 2.0) / 1.0).floor() as usize;
            assert_eq!((i + j) % 2, l);
        }
        assert!(task.gaussian().is_err());
    }
}
