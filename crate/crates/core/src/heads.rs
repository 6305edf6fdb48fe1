//! Trainable policy and value heads: tanh MLPs with analytic gradients.

use crate::error::{shape_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::{softmax, DenseMatrix, DenseVector};

pub const HIDDEN: [usize; 2] = [256, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Used by tests to check the linear special case.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network; `weights[l]` is out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layers[0]` is the input batch; `layers[l]` the output of hidden layer `l`.
    layers: Vec<DenseMatrix>,
    pub output: DenseMatrix,
}

/// Orthogonal matrix (rows or columns orthonormal, whichever fits) times `gain`.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut RngStream) -> DenseMatrix {
    let (n, m) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if rows <= cols {
        DenseMatrix::from_fn(rows, cols, |i, j| gain * basis[i][j])
    } else {
        DenseMatrix::from_fn(rows, cols, |i, j| gain * basis[j][i])
    }
}

impl HeadParams {
    /// `input → 256 → 128 → out` with orthogonal init.
    pub fn new(input: usize, out: usize, out_gain: f64, rng: &mut RngStream) -> Result<Self> {
        if input == 0 || out == 0 {
            return Err(Error::Invalid("head dimensions must be positive".into()));
        }
        let dims = [input, HIDDEN[0], HIDDEN[1], out];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..3 {
            let gain = if l == 2 {
                out_gain
            } else {
                std::f64::consts::SQRT_2
            };
            weights.push(orthogonal(dims[l + 1], dims[l], gain, rng));
            biases.push(vec![0.0; dims[l + 1]]);
        }
        Ok(Self {
            weights,
            biases,
            activation: Activation::Tanh,
        })
    }

    pub fn policy(input: usize, actions: usize, rng: &mut RngStream) -> Result<Self> {
        if actions < 2 {
            return Err(Error::Invalid(
                "policy head needs at least two actions".into(),
            ));
        }
        Self::new(input, actions, 0.01, rng)
    }

    pub fn value(input: usize, rng: &mut RngStream) -> Result<Self> {
        Self::new(input, 1, 1.0, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("non-empty").rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Squared-norm root over every parameter.
    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|w| w.frobenius().powi(2)).sum();
        let b: f64 = self.biases.iter().flatten().map(|v| v * v).sum();
        (w + b).sqrt()
    }

    /// Outputs for every row of `batch`, with the cache needed by [`HeadParams::backward`].
    pub fn forward_batch(&self, batch: &DenseMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return shape_err(format!(
                "head expects inputs of {}, got {}",
                self.input_dim(),
                batch.cols()
            ));
        }
        let last = self.weights.len() - 1;
        let mut layers = vec![batch.clone()];
        let mut x = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = x.matmul_t(w)?;
            for i in 0..y.rows() {
                for (v, bias) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bias;
                    if l < last {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            if l < last {
                layers.push(y.clone());
            }
            x = y;
        }
        Ok(ForwardCache { layers, output: x })
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim() {
            return shape_err(format!(
                "head expects inputs of {}, got {}",
                self.input_dim(),
                h.len()
            ));
        }
        let last = self.weights.len() - 1;
        let mut x = h.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            x = (0..w.rows())
                .map(|i| {
                    let v = w.row(i).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[i];
                    if l < last {
                        self.activation.apply(v)
                    } else {
                        v
                    }
                })
                .collect();
        }
        Ok(x)
    }

    /// Action distribution `softmax(g(h))`.
    pub fn policy_forward(&self, h: &[f64]) -> Result<DenseVector> {
        Ok(softmax(&self.forward(h)?))
    }

    pub fn value_forward(&self, h: &[f64]) -> Result<f64> {
        let out = self.forward(h)?;
        if out.len() != 1 {
            return shape_err("value head must have one output");
        }
        Ok(out[0])
    }

    /// Gradients of `Σ_i upstream_i · output_i` with respect to all parameters,
    /// and with respect to the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &DenseMatrix,
    ) -> Result<(GradientBuffer, DenseMatrix)> {
        if upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols() {
            return shape_err("upstream gradient does not match the cached forward pass");
        }
        if cache.layers.len() != self.weights.len() {
            return shape_err("forward cache belongs to a different head");
        }
        let n = self.weights.len();
        let mut gw = vec![DenseMatrix::zeros(0, 0); n];
        let mut gb = vec![Vec::new(); n];
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            let input = &cache.layers[l];
            gw[l] = delta.t_matmul(input)?;
            let mut bias = vec![0.0; delta.cols()];
            for i in 0..delta.rows() {
                for (b, v) in bias.iter_mut().zip(delta.row(i)) {
                    *b += v;
                }
            }
            gb[l] = bias;
            let mut back = delta.matmul(&self.weights[l])?;
            if l > 0 {
                for (g, y) in back.data_mut().iter_mut().zip(input.data()) {
                    *g *= self.activation.grad_from_output(*y);
                }
            }
            delta = back;
        }
        Ok((
            GradientBuffer {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer {
            weights: self
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}

impl GradientBuffer {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) -> Result<()> {
        let theirs = other.slices();
        let mine = self.slices_mut();
        if mine.len() != theirs.len() || mine.iter().zip(&theirs).any(|(a, b)| a.len() != b.len()) {
            return shape_err("gradient buffers have different layouts");
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Every entry in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one head.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: GradientBuffer,
    v: GradientBuffer,
    t: u64,
}

impl Adam {
    pub fn new(params: &HeadParams, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// True if the gradient was non-finite and no step was taken.
    pub skipped: bool,
}

/// Clips `grads` to `max_norm` (disabled when `max_norm <= 0`) and takes one Adam step.
pub fn apply_update(
    params: &mut HeadParams,
    grads: &mut GradientBuffer,
    lr: f64,
    max_norm: f64,
    adam: &mut Adam,
) -> Result<UpdateInfo> {
    if !(lr > 0.0) {
        return Err(Error::Invalid(format!(
            "learning rate {lr} must be positive"
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() || !grads.all_finite() {
        return Ok(UpdateInfo {
            grad_norm: norm,
            clipped: false,
            skipped: true,
        });
    }
    let clipped = max_norm > 0.0 && norm > max_norm;
    if clipped {
        grads.scale(max_norm / norm);
    }
    adam.t += 1;
    let AdamConfig { beta1, beta2, eps } = adam.config;
    let c1 = 1.0 - beta1.powi(adam.t as i32);
    let c2 = 1.0 - beta2.powi(adam.t as i32);
    let g = grads.slices();
    let m = adam.m.slices_mut();
    let v = adam.v.slices_mut();
    for (((p, g), m), v) in params.slices_mut().into_iter().zip(g).zip(m).zip(v) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(UpdateInfo {
        grad_norm: norm,
        clipped,
        skipped: false,
    })
}
