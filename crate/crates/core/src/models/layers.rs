use super::Param;
use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Matrix, RngState};

/// `y = x · (w ⊙ m) + b`, with `w` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLinear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl MaskedLinear {
    /// Normal init with std `sqrt(gain / fan_in)`, zero bias.
    pub fn new(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: bool,
        rng: &mut RngState,
    ) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        Self {
            weight: Param::gaussian(format!("{name}.weight"), fan_in, fan_out, std, true, rng),
            bias: bias.then(|| Param::dense(format!("{name}.bias"), Matrix::zeros(1, fan_out))),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_forward(x, &self.weight.effective(), self.bias.as_ref().map(|b| &b.value))
    }

    /// Returns `(dW gated by m, db, dx)`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(Matrix, Option<Matrix>, Matrix)> {
        let mut dw = x.matmul_tn(dy)?;
        self.weight.gate_grad(&mut dw);
        let db = self.bias.as_ref().map(|_| dy.sum_rows());
        let dx = dy.matmul_nt(&self.weight.effective())?;
        Ok((dw, db, dx))
    }
}

pub(crate) fn linear_forward(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        y.add_row_broadcast(b.as_slice())?;
    }
    Ok(y)
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::dense(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: Param::dense(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> (Matrix, NormCache) {
        let d = x.cols();
        let g = self.gamma.value.as_slice();
        let b = self.beta.value.as_slice();
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut out = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + Self::EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.row_mut(r)[c] = h;
                out.row_mut(r)[c] = h * g[c] + b[c];
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    /// Returns `(dgamma, dbeta, dx)`.
    pub(crate) fn backward(&self, cache: &NormCache, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
        let d = dy.cols();
        let g = self.gamma.value.as_slice();
        let mut dgamma = Matrix::zeros(1, d);
        let mut dbeta = Matrix::zeros(1, d);
        let mut dx = Matrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dh = 0.0;
            let mut sum_dh_xh = 0.0;
            for c in 0..d {
                dgamma.row_mut(0)[c] += dyr[c] * xh[c];
                dbeta.row_mut(0)[c] += dyr[c];
                let dh = dyr[c] * g[c];
                sum_dh += dh;
                sum_dh_xh += dh * xh[c];
            }
            let is = cache.inv_std[r];
            let n = d as f64;
            let out = dx.row_mut(r);
            for c in 0..d {
                let dh = dyr[c] * g[c];
                out[c] = is * (dh - sum_dh / n - xh[c] * sum_dh_xh / n);
            }
        }
        (dgamma, dbeta, dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = labels.len().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {} classes",
                logits.cols()
            )));
        }
        let row = grad.row_mut(r);
        softmax_in_place(row);
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error, DEFAULT_STEP};

    #[test]
    fn gelu_derivative_matches_differences() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_deriv(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = cross_entropy(&Matrix::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = RngState::new(1);
        let logits = Matrix::from_fn(2, 5, |_, _| rng.gaussian());
        let labels = [1, 3];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let fd = finite_diff_grad(|l| cross_entropy(l, &labels).unwrap().0, &logits, DEFAULT_STEP).unwrap();
        assert!(relative_error(g.as_slice(), fd.as_slice(), 1e-12) < 1e-7);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = RngState::new(2);
        let mut ln = LayerNorm::new("n", 6);
        ln.gamma.value = Matrix::from_fn(1, 6, |_, _| 1.0 + 0.3 * rng.gaussian());
        ln.beta.value = Matrix::from_fn(1, 6, |_, _| 0.3 * rng.gaussian());
        let x = Matrix::from_fn(3, 6, |_, _| rng.gaussian());
        let up = Matrix::from_fn(3, 6, |_, _| rng.gaussian());
        let loss = |ln: &LayerNorm, x: &Matrix| ln.forward(x).hadamard(&up).unwrap().sum();
        let (_, cache) = ln.forward_cached(&x);
        let (dg, db, dx) = ln.backward(&cache, &up);
        let fd_x = finite_diff_grad(|x| loss(&ln, x), &x, DEFAULT_STEP).unwrap();
        assert!(relative_error(dx.as_slice(), fd_x.as_slice(), 1e-12) < 1e-7);
        let fd_g = finite_diff_grad(
            |g| {
                let mut l = ln.clone();
                l.gamma.value = g.clone();
                loss(&l, &x)
            },
            &ln.gamma.value,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(relative_error(dg.as_slice(), fd_g.as_slice(), 1e-12) < 1e-7);
        let fd_b = finite_diff_grad(
            |b| {
                let mut l = ln.clone();
                l.beta.value = b.clone();
                loss(&l, &x)
            },
            &ln.beta.value,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(relative_error(db.as_slice(), fd_b.as_slice(), 1e-12) < 1e-7);
    }

    #[test]
    fn masked_linear_gates_weight_gradient() {
        let mut rng = RngState::new(3);
        let mut lin = MaskedLinear::new("l", 4, 3, 2.0, true, &mut rng);
        let bits: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        lin.weight.mask = Some(crate::pruning::Mask::from_bits(4, 3, bits.clone()).unwrap());
        let x = Matrix::from_fn(2, 4, |_, _| rng.gaussian());
        let dy = Matrix::from_fn(2, 3, |_, _| rng.gaussian());
        let (dw, db, _) = lin.backward(&x, &dy).unwrap();
        for (i, b) in bits.iter().enumerate() {
            if !b {
                assert_eq!(dw.as_slice()[i], 0.0);
            }
        }
        assert_eq!(db.unwrap(), dy.sum_rows());
    }
}
