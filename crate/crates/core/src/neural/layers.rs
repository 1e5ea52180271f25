use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Affine map `y = x W^T + b` with `W` stored as `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Array2::zeros((d_out, d_in)), bias: Array1::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    /// Glorot-uniform weights on `+-sqrt(6 / (d_in + d_out))`, zero bias.
    pub fn xavier<R: Rng>(&mut self, rng: &mut R) {
        let a = (6.0 / (self.d_in() + self.d_out()) as f64).sqrt();
        self.weight.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        self.bias.fill(0.0);
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = self.bias.broadcast((x.nrows(), self.d_out())).expect("bias width").to_owned();
        general_mat_mul(1.0, &x, &self.weight.t(), 1.0, &mut y);
        y
    }

    /// Returns `(dW, db, dx)`; `dx` is skipped for the first layer.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        want_dx: bool,
    ) -> (Array2<f64>, Array1<f64>, Option<Array2<f64>>) {
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = want_dx.then(|| dy.dot(&self.weight));
        (dw, db, dx)
    }
}

/// Batch normalization over the batch axis with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight of the old running statistic in each update.
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.width());
    }

    /// Normalizes with batch statistics and folds them into the running
    /// statistics (unbiased variance, as is conventional).
    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let (rows, w) = x.dim();
        let b = rows as f64;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut mean = vec![0.0; w];
        for row in xs.chunks_exact(w) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b);
        let mut var = vec![0.0; w];
        for row in xs.chunks_exact(w) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= b);
        let (mean, var) = (Array1::from(mean), Array1::from(var));
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = Array2::<f64>::zeros((rows, w));
        let mut y = Array2::<f64>::zeros((rows, w));
        let (hs, ys) = (xhat.as_slice_mut().expect("fresh"), y.as_slice_mut().expect("fresh"));
        let (mu, is) = (mean.as_slice().expect("fresh"), inv_std.as_slice().expect("fresh"));
        let (g, be) = (self.gamma.as_slice().expect("contiguous"), self.beta.as_slice().expect("contiguous"));
        for ((xr, hr), yr) in xs.chunks_exact(w).zip(hs.chunks_exact_mut(w)).zip(ys.chunks_exact_mut(w)) {
            for j in 0..w {
                let h = (xr[j] - mu[j]) * is[j];
                hr[j] = h;
                yr[j] = h * g[j] + be[j];
            }
        }

        let m = self.momentum;
        let unbias = if b > 1.0 { b / (b - 1.0) } else { 1.0 };
        self.running_mean.zip_mut_with(&mean, |r, &v| *r = m * *r + (1.0 - m) * v);
        self.running_var.zip_mut_with(&var, |r, &v| *r = m * *r + (1.0 - m) * v * unbias);
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let scale = Array1::from_shape_fn(self.width(), |j| {
            self.gamma[j] / (self.running_var[j] + self.eps).sqrt()
        });
        let shift = Array1::from_shape_fn(self.width(), |j| self.beta[j] - self.running_mean[j] * scale[j]);
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            for ((v, a), c) in row.iter_mut().zip(&scale).zip(&shift) {
                *v = *v * a + c;
            }
        }
        y
    }

    /// Returns `(dx, dgamma, dbeta)` through the batch statistics.
    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let (rows, w) = dy.dim();
        let b = rows as f64;
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let mut dbeta = Array1::<f64>::zeros(w);
        let mut dgamma = Array1::<f64>::zeros(w);
        let (sb, sg) = (dbeta.as_slice_mut().expect("fresh"), dgamma.as_slice_mut().expect("fresh"));
        for (dr, hr) in ds.chunks_exact(w).zip(hs.chunks_exact(w)) {
            for j in 0..w {
                sb[j] += dr[j];
                sg[j] += dr[j] * hr[j];
            }
        }
        // dx = gamma inv_std / b * (b dy - sum dy - xhat sum(dy xhat))
        let scale = Array1::from_shape_fn(w, |j| self.gamma[j] * cache.inv_std[j] / b);
        let mut dx = Array2::<f64>::zeros((rows, w));
        let xs = dx.as_slice_mut().expect("fresh");
        let (sc, sb, sg) = (scale.as_slice().expect("fresh"), dbeta.as_slice().expect("fresh"), dgamma.as_slice().expect("fresh"));
        for ((xr, dr), hr) in xs.chunks_exact_mut(w).zip(ds.chunks_exact(w)).zip(hs.chunks_exact(w)) {
            for j in 0..w {
                xr[j] = sc[j] * (b * dr[j] - sb[j] - hr[j] * sg[j]);
            }
        }
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm::new(2);
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]];
        let (y, _) = bn.forward_train(x.view());
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert!(mean[j].abs() < 1e-12);
            assert!((var[j] - 1.0).abs() < 1e-3);
        }
        // running mean moved 10% of the way to the batch mean
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dense_forward_shapes() {
        let mut d = Dense::zeros(3, 2);
        d.weight = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
        d.bias = array![0.5, -0.5];
        let y = d.forward(array![[1.0, 2.0, 3.0]].view());
        assert_eq!(y, array![[1.5, 4.5]]);
    }
}
