//! Random Fourier features for a Gaussian kernel, plus the small dense solves built on them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::Stream;
use crate::samples::Samples;
use crate::sde::choose_without_replacement;

/// Points used by the median-distance bandwidth heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

/// `phi(x) = sqrt(2 / D) cos(W x + b)` with `W ~ N(0, I / l^2)`, `b ~ U(0, 2 pi)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FourierFeatures {
    dim: usize,
    /// Row-major `n_features x dim`.
    omega: Vec<f64>,
    phase: Vec<f64>,
    bandwidth: f64,
}

impl FourierFeatures {
    pub fn new(dim: usize, n_features: usize, bandwidth: f64, stream: &Stream) -> Result<Self> {
        if n_features == 0 {
            return Err(LabError::config("feature_dim", "must be >= 1"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(LabError::config("feature_bandwidth", format!("must be positive, got {bandwidth}")));
        }
        let mut rng = stream.rng();
        let omega = (0..n_features * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / bandwidth
            })
            .collect();
        let phase = (0..n_features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(FourierFeatures {
            dim,
            omega,
            phase,
            bandwidth,
        })
    }

    /// Features whose bandwidth is a multiple of the median pairwise distance of `reference`.
    /// `scale` multiplies the median.
    pub fn fit(reference: &Samples, n_features: usize, scale: f64, stream: &Stream) -> Result<Self> {
        let l = scale * median_distance(reference, MEDIAN_SUBSAMPLE, &stream.child("median"))?;
        FourierFeatures::new(reference.dim(), n_features, l, &stream.child("weights"))
    }

    pub fn n_features(&self) -> usize {
        self.phase.len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        let scale = (2.0 / self.n_features() as f64).sqrt();
        for ((o, w), b) in out.iter_mut().zip(self.omega.chunks_exact(self.dim)).zip(&self.phase) {
            let arg: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            *o = scale * arg.cos();
        }
    }

    /// Design matrix with a leading column of ones when `intercept` is set.
    pub fn design(&self, x: &Samples, intercept: bool) -> DMatrix<f64> {
        let off = usize::from(intercept);
        let p = self.n_features() + off;
        // Build row-major, then hand nalgebra the transpose view it expects.
        let mut rows = vec![0.0; x.len() * p];
        rows.par_chunks_mut(p).zip(x.as_slice().par_chunks(self.dim)).for_each(|(r, xi)| {
            if intercept {
                r[0] = 1.0;
            }
            self.transform_into(xi, &mut r[off..]);
        });
        DMatrix::from_row_slice(x.len(), p, &rows)
    }
}

/// Median pairwise Euclidean distance over at most `max_points` points.
pub fn median_distance(x: &Samples, max_points: usize, stream: &Stream) -> Result<f64> {
    if x.len() < 2 {
        return Err(LabError::Empty("need two points for a median distance"));
    }
    let idx = if x.len() > max_points {
        let mut i = choose_without_replacement(x.len(), max_points, &mut stream.rng());
        i.sort_unstable();
        i
    } else {
        (0..x.len()).collect()
    };
    let sub = x.select(&idx);
    let mut d: Vec<f64> = (0..sub.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = sub.row(i);
            let sub = &sub;
            (i + 1..sub.len()).map(move |j| {
                a.iter()
                    .zip(sub.row(j))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        Ok(m)
    } else {
        Err(LabError::config("feature_bandwidth", "all points coincide"))
    }
}

/// Solves the symmetric positive definite system `a x = b`.
pub fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .cholesky()
        .ok_or_else(|| LabError::Linalg("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Ridge regression `min |y - X beta|^2 / n + ridge |beta|^2` on centred data.
/// Returns the coefficients and the column means used for centring.
pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let (mut betas, col_mean, y_mean) = ridge_path(x, y, &[ridge])?;
    Ok((betas.remove(0), col_mean, y_mean))
}

/// [`ridge_fit`] for several penalties sharing one Gram matrix.
pub fn ridge_path(x: &DMatrix<f64>, y: &[f64], ridges: &[f64]) -> Result<(Vec<DVector<f64>>, DVector<f64>, f64)> {
    let n = x.nrows();
    if n == 0 {
        return Err(LabError::Empty("ridge training set"));
    }
    let col_mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = x.clone();
    for (mut c, m) in xc.column_iter_mut().zip(col_mean.iter()) {
        c.add_scalar_mut(-m);
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let gram = xc.tr_mul(&xc) / n as f64;
    let rhs = xc.tr_mul(&yc) / n as f64;
    let betas = ridges
        .iter()
        .map(|r| {
            let mut g = gram.clone();
            for i in 0..g.nrows() {
                g[(i, i)] += r;
            }
            spd_solve(g, &rhs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((betas, col_mean, y_mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_approximate_gaussian_kernel() {
        let f = FourierFeatures::new(2, 4096, 1.5, &Stream::new(1)).unwrap();
        let x = [0.3, -0.4];
        let y = [1.1, 0.2];
        let mut a = vec![0.0; 4096];
        let mut b = vec![0.0; 4096];
        f.transform_into(&x, &mut a);
        f.transform_into(&y, &mut b);
        let k: f64 = a.iter().zip(&b).map(|(u, v)| u * v).sum();
        let d2 = (0.8f64).powi(2) + (0.6f64).powi(2);
        let exact = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        assert!((k - exact).abs() < 0.05, "{k} vs {exact}");
    }

    #[test]
    fn median_of_line() {
        let x = Samples::new(1, vec![0.0, 1.0, 3.0]).unwrap();
        // distances 1, 3, 2
        assert_eq!(median_distance(&x, 10, &Stream::new(0)).unwrap(), 2.0);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let (beta, _, y_mean) = ridge_fit(&x, &y, 1e-12).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-9);
        assert_eq!(y_mean, 4.0);
    }
}
