use rand::Rng;

use crate::data::seeded_rng;
use crate::error::{Error, Result};

const TOL: f64 = 1e-10;
const MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d_pca` unit vectors of length `d_model`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (sample covariance, `n − 1` divisor).
    pub explained_variance: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Largest-magnitude coordinate made positive; the first one wins ties.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Removes the projections on `basis` and normalizes; `None` when nothing is
/// left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let n = norm(&v);
    (n > 1e-8).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Principal components by power iteration with deflation on the sample
/// covariance. Each component iterates until the unit vector moves less than
/// `1e-10` between steps (up to sign) or the eigen-residual falls below
/// `1e-10` relative to the covariance scale.
pub fn fit_pca(vectors: &[Vec<f64>], d_pca: usize) -> Result<PcaModel> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if d_pca == 0 || d_pca > d {
        return Err(Error::Domain(format!(
            "d_pca {d_pca} must lie in 1..={d}"
        )));
    }
    if n < d_pca + 1 {
        return Err(Error::Domain(format!(
            "PCA with {n} vectors needs at least {}",
            d_pca + 1
        )));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Dimension("PCA inputs differ in length".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite PCA input".into()));
    }

    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for v in vectors {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let scale = (0..d).map(|i| cov[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);

    let mut rng = seeded_rng(0x5eed_9ca0);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d_pca);
    let mut variances = Vec::with_capacity(d_pca);
    for c in 0..d_pca {
        let start: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut v = orthonormalize(start, &components).ok_or_else(|| {
            Error::Numeric("PCA start vector collapsed".into())
        })?;
        let mut lambda = 0.0;
        let mut converged = false;
        for _ in 0..MAX_ITERS {
            let w = mat_vec(&cov, &v);
            lambda = dot(&v, &w);
            let resid: f64 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if resid <= TOL * scale {
                converged = true;
                break;
            }
            let Some(next) = orthonormalize(w, &components) else {
                // Nothing left in the complement: the remaining variance is 0.
                lambda = 0.0;
                converged = true;
                break;
            };
            let moved = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let flipped = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a + b).abs())
                .fold(0.0, f64::max);
            v = next;
            if moved.min(flipped) < TOL {
                lambda = dot(&v, &mat_vec(&cov, &v));
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "power iteration for component {c} did not converge in {MAX_ITERS} steps"
            )));
        }
        fix_sign(&mut v);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda.max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: variances,
    })
}

impl PcaModel {
    pub fn d_pca(&self) -> usize {
        self.components.len()
    }

    pub fn d_model(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "projecting a {}-vector with a {}-dimensional PCA",
                x.len(),
                self.mean.len()
            )));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.components.iter().map(|p| dot(p, &c)).collect())
    }
}
