//! Gaussian-fit distribution metrics, alignment accuracy and the evaluation
//! report.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{bayes_classify, ConditionalGaussianTask};

/// Eigenvalues down to `-PSD_TOL` are clamped to zero; anything lower is an error.
pub const PSD_TOL: f64 = 1e-9;

/// Mean and covariance of a Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: Vec<f64>,
    /// Row-major `(d, d)`.
    pub sigma: Vec<f64>,
}

impl GaussianFit {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma.len() != d * d {
            return Err(Error::shape("gaussian_fit", format!("mean of length {d}, {} covariance values", sigma.len())));
        }
        for i in 0..d {
            for j in 0..i {
                if (sigma[i * d + j] - sigma[j * d + i]).abs() > PSD_TOL {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "gaussian_fit" });
        }
        Ok(Self { mu, sigma })
    }

    /// `N(mu, s^2 I)`.
    pub fn isotropic(mu: Vec<f64>, s2: f64) -> Result<Self> {
        let d = mu.len();
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            sigma[i * d + i] = s2;
        }
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn cov(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.sigma)
    }
}

/// Sample mean and unbiased sample covariance of row-major `(n, dim)` data.
pub fn fit_gaussian(samples: &[f64], dim: usize) -> Result<GaussianFit> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::shape("fit_gaussian", format!("{} values for dimension {dim}", samples.len())));
    }
    let n = samples.len() / dim;
    if n < dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "fit_gaussian needs at least {} samples, got {n}",
            dim + 1
        )));
    }
    let mut mu = vec![0.0; dim];
    for row in samples.chunks(dim) {
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = vec![0.0; dim * dim];
    for row in samples.chunks(dim) {
        for i in 0..dim {
            let di = row[i] - mu[i];
            for j in i..dim {
                sigma[i * dim + j] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = sigma[i * dim + j] / (n - 1) as f64;
            sigma[i * dim + j] = v;
            sigma[j * dim + i] = v;
        }
    }
    GaussianFit::new(mu, sigma)
}

fn clamp_eig(v: f64) -> Result<f64> {
    if v < -PSD_TOL {
        Err(Error::InvalidArgument(format!("covariance is not PSD (eigenvalue {v:e})")))
    } else {
        Ok(v.max(0.0))
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = clamp_eig(*v)?.sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn check_pair(f1: &GaussianFit, f2: &GaussianFit, op: &'static str) -> Result<usize> {
    if f1.dim() != f2.dim() {
        return Err(Error::shape(op, format!("dimension {} vs {}", f1.dim(), f2.dim())));
    }
    Ok(f1.dim())
}

/// `Tr((S1 S2)^{1/2})` via the general symmetric eigendecomposition of
/// `S2^{1/2} S1 S2^{1/2}`.
pub fn trace_sqrt_product_general(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    check_pair(f1, f2, "frechet_gaussian")?;
    psd_sqrt(&f1.cov())?;
    let r2 = psd_sqrt(&f2.cov())?;
    let m = &r2 * f1.cov() * &r2;
    let m = (&m + m.transpose()) * 0.5;
    let mut tr = 0.0;
    for v in SymmetricEigen::new(m).eigenvalues.iter() {
        tr += clamp_eig(*v)?.sqrt();
    }
    Ok(tr)
}

/// `Tr((S1 S2)^{1/2}) = sqrt(Tr M + 2 sqrt(det M))` for 2x2 PSD inputs.
pub fn trace_sqrt_product_2d(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    if check_pair(f1, f2, "frechet_gaussian")? != 2 {
        return Err(Error::shape("frechet_gaussian", "the closed-form path needs d = 2"));
    }
    for f in [f1, f2] {
        let s = &f.sigma;
        let tr = s[0] + s[3];
        let disc = ((s[0] - s[3]).powi(2) + 4.0 * s[1] * s[2]).max(0.0).sqrt();
        clamp_eig(0.5 * (tr - disc))?;
    }
    let (a, b) = (&f1.sigma, &f2.sigma);
    let m00 = a[0] * b[0] + a[1] * b[2];
    let m01 = a[0] * b[1] + a[1] * b[3];
    let m10 = a[2] * b[0] + a[3] * b[2];
    let m11 = a[2] * b[1] + a[3] * b[3];
    let det = (m00 * m11 - m01 * m10).max(0.0);
    Ok((m00 + m11 + 2.0 * det.sqrt()).max(0.0).sqrt())
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_gaussian(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    let d = check_pair(f1, f2, "frechet_gaussian")?;
    if f1 == f2 {
        return Ok(0.0);
    }
    let mean: f64 = f1.mu.iter().zip(&f2.mu).map(|(a, b)| (a - b).powi(2)).sum();
    let trace = |f: &GaussianFit| (0..d).map(|i| f.sigma[i * d + i]).sum::<f64>();
    let cross = if d == 2 {
        trace_sqrt_product_2d(f1, f2)?
    } else {
        trace_sqrt_product_general(f1, f2)?
    };
    Ok((mean + trace(f1) + trace(f2) - 2.0 * cross).max(0.0))
}

/// `KL(N1 || N2)`.
pub fn kl_gaussian(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    let d = check_pair(f1, f2, "kl_gaussian")?;
    if f1 == f2 {
        return Ok(0.0);
    }
    let c2 = f2
        .cov()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("kl_gaussian: second covariance is singular".into()))?;
    let c1 = f1
        .cov()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("kl_gaussian: first covariance is singular".into()))?;
    let logdet = |l: &DMatrix<f64>| (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let tr = c2.solve(&f1.cov()).trace();
    let dm = DVector::from_iterator(d, f2.mu.iter().zip(&f1.mu).map(|(a, b)| a - b));
    let quad = dm.dot(&c2.solve(&dm));
    let kl = 0.5 * (tr + quad - d as f64 + logdet(&c2.l()) - logdet(&c1.l()));
    Ok(kl.max(0.0))
}

fn check_rows(samples: &[f64], labels: &[usize], task: &ConditionalGaussianTask) -> Result<usize> {
    let d = task.dim();
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    if samples.len() != labels.len() * d {
        return Err(Error::shape(
            "alignment_accuracy",
            format!("{} values for {} labels of dimension {d}", samples.len(), labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= task.k()) {
        return Err(Error::LabelOutOfRange { label, k: task.k() });
    }
    Ok(d)
}

/// Fraction of samples the Bayes classifier assigns to their intended label.
pub fn alignment_accuracy(samples: &[f64], labels: &[usize], task: &ConditionalGaussianTask) -> Result<f64> {
    let d = check_rows(samples, labels, task)?;
    let hits = samples
        .chunks(d)
        .zip(labels)
        .filter(|(x, &l)| bayes_classify(x, task) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Entropy (nats) of the classifier's label histogram over `samples`.
pub fn mode_entropy(samples: &[f64], task: &ConditionalGaussianTask) -> f64 {
    let d = task.dim();
    let mut counts = vec![0usize; task.k()];
    for x in samples.chunks(d) {
        counts[bayes_classify(x, task)] += 1;
    }
    let n = counts.iter().sum::<usize>() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Metrics for one condition (or the aggregate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    /// Condition label; `None` for the aggregate.
    pub label: Option<usize>,
    pub n: usize,
    pub fd: f64,
    pub kl: f64,
    pub align_acc: f64,
    /// `|mean - target mean|`.
    pub mean_err: f64,
    /// Largest absolute entry of `cov - target cov`.
    pub cov_err: f64,
    /// Entropy of classifier outputs, reported in place of an inception score.
    pub mode_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub sampler: Option<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionMetrics>,
    pub aggregate: ConditionMetrics,
    pub meta: ReportMeta,
}

pub const REPORT_HEADER: &str = "condition,n,fd,kl,align_acc,mean_err,cov_err,mode_entropy";

impl EvalReport {
    /// One row per condition followed by an `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for m in self.conditions.iter().chain(std::iter::once(&self.aggregate)) {
            let label = m.label.map_or_else(|| "all".to_string(), |l| l.to_string());
            let _ = writeln!(
                s,
                "{label},{},{},{},{},{},{},{}",
                m.n, m.fd, m.kl, m.align_acc, m.mean_err, m.cov_err, m.mode_entropy
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn max_fd(&self) -> f64 {
        self.conditions.iter().map(|c| c.fd).fold(0.0, f64::max)
    }
}

/// Per-condition metrics against the task's component Gaussians; the
/// aggregate is the unweighted mean over conditions present in `labels`.
pub fn evaluate(samples: &[f64], labels: &[usize], task: &ConditionalGaussianTask, meta: ReportMeta) -> Result<EvalReport> {
    let d = check_rows(samples, labels, task)?;
    let mut conditions = Vec::new();
    for k in 0..task.k() {
        let rows: Vec<f64> = samples
            .chunks(d)
            .zip(labels)
            .filter(|(_, &l)| l == k)
            .flat_map(|(x, _)| x.iter().copied())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() / d;
        let fit = fit_gaussian(&rows, d)?;
        let target = GaussianFit::isotropic(task.means[k].clone(), task.sigma * task.sigma)?;
        let own = vec![k; n];
        conditions.push(ConditionMetrics {
            label: Some(k),
            n,
            fd: frechet_gaussian(&fit, &target)?,
            kl: kl_gaussian(&fit, &target)?,
            align_acc: alignment_accuracy(&rows, &own, task)?,
            mean_err: fit.mu.iter().zip(&target.mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            cov_err: fit.sigma.iter().zip(&target.sigma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            mode_entropy: mode_entropy(&rows, task),
        });
    }
    let c = conditions.len() as f64;
    let avg = |f: fn(&ConditionMetrics) -> f64| conditions.iter().map(f).sum::<f64>() / c;
    let aggregate = ConditionMetrics {
        label: None,
        n: labels.len(),
        fd: avg(|m| m.fd),
        kl: avg(|m| m.kl),
        align_acc: avg(|m| m.align_acc),
        mean_err: avg(|m| m.mean_err),
        cov_err: avg(|m| m.cov_err),
        mode_entropy: avg(|m| m.mode_entropy),
    };
    Ok(EvalReport {
        conditions,
        aggregate,
        meta,
    })
}
