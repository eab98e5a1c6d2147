use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `[outer, n, inner]` view of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push("relu", shape, data, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        self.push("gelu", shape, data, Op::Gelu(x))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis })
    }

    /// Zero-mean, unit-variance rows along the last axis:
    /// `(x − μ) / sqrt(σ² + eps)` with the population variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::shape("standardize", "rank-0 input"))?;
        let src = self.data(x);
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push("standardize", shape, out, Op::Standardize { x, rstd })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// extent `k`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let k = self.shape(x).last().copied().unwrap_or(0);
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(TensorError::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} do not match last extent {k}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let y = self.standardize(x, eps)?;
        let y = self.mul(y, gamma)?;
        self.add(y, beta)
    }

    /// Per-channel normalization of a `[C, h, w, d]` map over its spatial
    /// extent, followed by per-channel affine `gamma`, `beta` of extent `C`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[0]] || self.shape(beta) != [shape[0]] {
            return Err(TensorError::shape(
                "instance_norm",
                format!("input {shape:?} with gamma {:?}", self.shape(gamma)),
            ));
        }
        let c = shape[0];
        let spatial: usize = shape[1..].iter().product();
        let rows = self.reshape(x, &[c, spatial])?;
        let y = self.standardize(rows, eps)?;
        let y = self.reshape(y, &shape)?;
        let mut affine_shape = vec![1; shape.len()];
        affine_shape[0] = c;
        let g = self.reshape(gamma, &affine_shape)?;
        let b = self.reshape(beta, &affine_shape)?;
        let y = self.mul(y, g)?;
        self.add(y, b)
    }
}
