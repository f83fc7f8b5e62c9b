//! Dense matrices and a small reverse-mode MLP with Adam.
//!
//! Networks are evaluated on row-major batches (`batch × features`). Hidden
//! layers apply the network's activation, the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 7] = b"ISEPNN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix2D::from_vec",
                format!("{} entries ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix2D::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// `n` copies of `row` stacked vertically.
    pub fn repeat_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Self {
            rows: n,
            cols: row.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Side-by-side concatenation of equally tall blocks.
    pub fn hconcat(blocks: &[&Matrix2D]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::shape("Matrix2D::hconcat", rows, b.rows));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack of `self` over `other`.
    pub fn vconcat(&self, other: &Matrix2D) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape("Matrix2D::vconcat", self.cols, other.cols));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix2D) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "Matrix2D::matmul",
                format!("inner dim {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }
}

/// C (m×n, row-major) = A (m×k) · B (k×n) + beta·C, with explicit strides for A and B.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // `c` (m×n); every caller derives them from the owning matrices' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x · tanh(softplus(x))`.
///
/// Uses `tanh(ln(1+e^x)) = n / (n + 2)` with `n = e^x (e^x + 2)`, which needs a
/// single exponential. For `x > 20` the ratio is 1 to double precision.
pub fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

pub fn mish_derivative(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    // d/dx [n/(n+2)] = 2 n' / (n+2)^2 with n' = 2 e (e + 1)
    n / d + x * 4.0 * e * (e + 1.0) / (d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_derivative(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mish" => Ok(Activation::Mish),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_w: Vec<Matrix2D>,
    pub v_w: Vec<Matrix2D>,
    pub m_b: Vec<Vec<f64>>,
    pub v_b: Vec<Vec<f64>>,
    pub step: u64,
}

/// Weights, biases and optimizer state of one MLP.
#[derive(Debug)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix2D>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    adam: AdamState,
    // Identity plus mutation counter, used to reject stale tapes.
    id: u64,
    generation: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            activation: self.activation,
            adam: self.adam.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

/// Activation cache from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    generation: u64,
    // layer_inputs[i] is the input to layer i; pre_acts[i] the pre-activation of hidden layer i.
    layer_inputs: Vec<Matrix2D>,
    pre_acts: Vec<Matrix2D>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].rows()
    }
}

/// Gradients shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix2D>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Matrix2D::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Weights of each layer then its bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(a, b)| *a += s * b);
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            b.iter_mut().zip(o).for_each(|(a, c)| *a += s * c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, rng: &mut SplitMix64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::shape(
                "Mlp::new",
                "at least two non-zero layer sizes",
                format!("{layer_sizes:?}"),
            ));
        }
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform(-limit, limit))
                .collect();
            weights.push(Matrix2D::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self::from_parts(layer_sizes.to_vec(), weights, biases, activation))
    }

    fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Matrix2D>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Self {
        let adam = AdamState {
            m_w: weights.iter().map(|w| Matrix2D::zeros(w.rows(), w.cols())).collect(),
            v_w: weights.iter().map(|w| Matrix2D::zeros(w.rows(), w.cols())).collect(),
            m_b: biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            step: 0,
        };
        Self {
            layer_sizes,
            weights,
            biases,
            activation,
            adam,
            id: fresh_id(),
            generation: 0,
        }
    }

    /// Builds a network from explicit parameters (`weights[i]` is `out × in`).
    pub fn from_params(weights: Vec<Matrix2D>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::shape("Mlp::from_params", "one bias per weight matrix", biases.len()));
        }
        let mut sizes = vec![weights[0].cols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != sizes[i] || b.len() != w.rows() {
                return Err(Error::shape(
                    "Mlp::from_params",
                    format!("layer {i} of {} inputs with matching bias", sizes[i]),
                    format!("{}x{} with bias {}", w.rows(), w.cols(), b.len()),
                ));
            }
            sizes.push(w.rows());
        }
        Ok(Self::from_parts(sizes, weights, biases, activation))
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty layer sizes")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix2D] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn zero_final_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].data_mut().fill(0.0);
        self.biases[last].fill(0.0);
        self.touch();
    }

    /// Parameters in the order of [`MlpGrads::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("Mlp::set_flat_params", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.data().len();
            w.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let m = b.len();
            b.copy_from_slice(&flat[offset..offset + m]);
            offset += m;
        }
        self.touch();
        Ok(())
    }

    fn check_input(&self, input: &Matrix2D) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("Mlp input", self.input_dim(), input.cols()));
        }
        // ReLU's max(x, 0) would turn a NaN input into 0.
        input.ensure_finite("mlp input")
    }

    /// `x · Wᵀ + b` for layer `i`.
    fn affine(&self, i: usize, x: &Matrix2D) -> Matrix2D {
        let w = &self.weights[i];
        let b = &self.biases[i];
        let mut out = Matrix2D::repeat_row(b, x.rows());
        // Wᵀ viewed through strides: element (k, n) of Wᵀ is W[n, k].
        gemm(
            x.rows(),
            x.cols(),
            w.rows(),
            (x.data(), x.cols() as isize, 1),
            (w.data(), 1, w.cols() as isize),
            out.data_mut(),
            1.0,
        );
        out
    }

    /// Forward pass keeping the activations needed by [`Mlp::backward`].
    pub fn forward(&self, input: &Matrix2D) -> Result<(Matrix2D, Tape)> {
        self.check_input(input)?;
        let n_layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut pre_acts = Vec::with_capacity(n_layers - 1);
        let mut x = input.clone();
        for i in 0..n_layers {
            let z = self.affine(i, &x);
            layer_inputs.push(x);
            if i + 1 == n_layers {
                z.ensure_finite("mlp forward output")?;
                let tape = Tape {
                    net_id: self.id,
                    generation: self.generation,
                    layer_inputs,
                    pre_acts,
                };
                return Ok((z, tape));
            }
            let mut a = z.clone();
            let act = self.activation;
            a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            pre_acts.push(z);
            x = a;
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass without a tape.
    pub fn predict(&self, input: &Matrix2D) -> Result<Matrix2D> {
        self.check_input(input)?;
        let n_layers = self.weights.len();
        let mut x = self.affine(0, input);
        for i in 1..n_layers {
            let act = self.activation;
            x.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            x = self.affine(i, &x);
        }
        x.ensure_finite("mlp forward output")?;
        Ok(x)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = Matrix2D::from_vec(1, input.len(), input.to_vec())?;
        let (out, tape) = self.forward(&x)?;
        Ok((out.into_vec(), tape))
    }

    /// Gradient of `sum(output ⊙ output_grad)` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, output_grad: &Matrix2D) -> Result<MlpGrads> {
        if tape.net_id != self.id || tape.generation != self.generation {
            return Err(Error::StaleTape {
                tape: tape.generation,
                net: self.generation,
            });
        }
        let batch = tape.batch_size();
        if output_grad.shape() != (batch, self.output_dim()) {
            return Err(Error::shape(
                "Mlp::backward output_grad",
                format!("{batch}x{}", self.output_dim()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let n_layers = self.weights.len();
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = output_grad.clone();
        for i in (0..n_layers).rev() {
            let x = &tape.layer_inputs[i];
            let w = &self.weights[i];
            // dW = deltaᵀ · x
            gemm(
                w.rows(),
                batch,
                w.cols(),
                (delta.data(), 1, delta.cols() as isize),
                (x.data(), x.cols() as isize, 1),
                grads.weights[i].data_mut(),
                0.0,
            );
            let db = &mut grads.biases[i];
            for r in 0..batch {
                for (acc, d) in db.iter_mut().zip(delta.row(r)) {
                    *acc += d;
                }
            }
            if i == 0 {
                break;
            }
            // dX = delta · W, then through the activation of layer i-1.
            let mut dx = Matrix2D::zeros(batch, w.cols());
            gemm(
                batch,
                w.rows(),
                w.cols(),
                (delta.data(), delta.cols() as isize, 1),
                (w.data(), w.cols() as isize, 1),
                dx.data_mut(),
                0.0,
            );
            let pre = &tape.pre_acts[i - 1];
            let act = self.activation;
            dx.data_mut()
                .iter_mut()
                .zip(pre.data())
                .for_each(|(g, z)| *g *= act.derivative(*z));
            delta = dx;
        }
        Ok(grads)
    }

    /// One Adam step. Fails without touching parameters if any gradient is non-finite.
    pub fn adam_step(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        if grads.weights.len() != self.weights.len() {
            return Err(Error::shape("Mlp::adam_step", self.weights.len(), grads.weights.len()));
        }
        for (i, (gw, gb)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if gw.shape() != self.weights[i].shape() || gb.len() != self.biases[i].len() {
                return Err(Error::shape(
                    "Mlp::adam_step",
                    format!("{:?}", self.weights[i].shape()),
                    format!("{:?}", gw.shape()),
                ));
            }
            if !gw.data().iter().chain(gb).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        self.adam.step += 1;
        let t = self.adam.step;
        for i in 0..self.weights.len() {
            adam_update(
                self.weights[i].data_mut(),
                self.adam.m_w[i].data_mut(),
                self.adam.v_w[i].data_mut(),
                grads.weights[i].data(),
                lr,
                t,
            );
            adam_update(
                &mut self.biases[i],
                &mut self.adam.m_b[i],
                &mut self.adam.v_b[i],
                &grads.biases[i],
                lr,
                t,
            );
        }
        self.touch();
        Ok(())
    }

    /// `self ← rho·self + (1 − rho)·live`.
    pub fn polyak_from(&mut self, live: &Mlp, rho: f64) -> Result<()> {
        if live.layer_sizes != self.layer_sizes {
            return Err(Error::shape(
                "Mlp::polyak_from",
                format!("{:?}", self.layer_sizes),
                format!("{:?}", live.layer_sizes),
            ));
        }
        let blend = |t: &mut f64, l: f64| *t = rho * *t + (1.0 - rho) * l;
        for (tw, lw) in self.weights.iter_mut().zip(&live.weights) {
            tw.data_mut().iter_mut().zip(lw.data()).for_each(|(t, l)| blend(t, *l));
        }
        for (tb, lb) in self.biases.iter_mut().zip(&live.biases) {
            tb.iter_mut().zip(lb).for_each(|(t, l)| blend(t, *l));
        }
        self.touch();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for w in &self.weights {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in &self.biases {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], activation: Activation, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(7)? != CHECKPOINT_MAGIC {
            return Err(bad("missing ISEPNN1 magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let n_sizes = read_u32(take(4)?);
        if !(2..=64).contains(&n_sizes) {
            return Err(bad("implausible layer count"));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(read_u32(take(4)?));
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let raw = take(n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut weights = Vec::new();
        for pair in sizes.windows(2) {
            weights.push(Matrix2D::from_vec(pair[1], pair[0], read_f64s(pair[0] * pair[1])?)?);
        }
        let mut biases = Vec::new();
        for &s in &sizes[1..] {
            biases.push(read_f64s(s)?);
        }
        if !cursor.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self::from_parts(sizes, weights, biases, activation))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, activation: Activation) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, activation, path)
    }
}

fn adam_update(param: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, m), v), g) in param.iter_mut().zip(m).zip(v).zip(g) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// A free parameter vector trained with Adam (e.g. a state-independent log-std).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamVector {
    pub value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamVector {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn adam_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.value.len() {
            return Err(Error::shape("AdamVector::adam_step", self.value.len(), grad.len()));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameter-vector gradient".into(),
            });
        }
        self.step += 1;
        adam_update(&mut self.value, &mut self.m, &mut self.v, grad, lr, self.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_net(sizes: &[usize], act: Activation, seed: u64) -> Mlp {
        Mlp::new(sizes, act, &mut SplitMix64::new(seed)).unwrap()
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0), 0.0);
        assert!((mish(20.0) - 20.0).abs() < 1e-12);
        let v = mish(-20.0);
        assert!(v < 0.0 && v > -0.31, "{v}");
        // Closed form -20 * tanh(ln(1 + e^-20)) evaluated with the naive formula,
        // which is accurate here since nothing overflows.
        let naive = -20.0 * ((-20.0f64).exp().ln_1p()).tanh();
        assert!((v - naive).abs() < 1e-20, "{v} vs {naive}");
        assert!(mish(700.0).is_finite() && mish(-700.0).is_finite());
        assert!(mish(-700.0) <= 0.0);
    }

    #[test]
    fn mish_derivative_matches_central_difference() {
        for &x in &[-30.0, -5.0, -1.0, -0.3, 0.0, 0.4, 1.7, 6.0, 19.9, 25.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((fd - mish_derivative(x)).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn zero_weight_net_outputs_last_bias() {
        let mut net = seeded_net(&[3, 4, 2], Activation::Relu, 1);
        let mut flat = vec![0.0; net.num_params()];
        let n = flat.len();
        flat[n - 2] = 1.5;
        flat[n - 1] = -0.5;
        net.set_flat_params(&flat).unwrap();
        let (y, _) = net.forward_one(&[0.3, -7.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.5, -0.5]);
    }

    #[test]
    fn identity_linear_net() {
        let w = Matrix2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let net = Mlp::from_params(vec![w], vec![vec![0.0, 0.0]], Activation::Tanh).unwrap();
        let (y, _) = net.forward_one(&[0.25, -3.0]).unwrap();
        assert_eq!(y, vec![0.25, -3.0]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = seeded_net(&[3, 5, 4, 2], Activation::Mish, 42);
        let x = [0.7, -1.2, 0.05];
        let (y, _) = net.forward_one(&x).unwrap();
        // Re-evaluate with explicit loops, independent of the GEMM path.
        let mut h = x.to_vec();
        for (i, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            let mut z = vec![0.0; w.rows()];
            for r in 0..w.rows() {
                z[r] = b[r] + (0..w.cols()).map(|c| w.get(r, c) * h[c]).sum::<f64>();
            }
            if i + 1 < net.weights().len() {
                z.iter_mut().for_each(|v| *v = *v * (v.exp().ln_1p()).tanh());
            }
            h = z;
        }
        for (a, b) in y.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = seeded_net(&[2, 8, 8, 1], Activation::Mish, 9);
        let x = Matrix2D::from_rows(&[vec![0.1, 0.2], vec![-3.0, 4.0]]).unwrap();
        let a = net.predict(&x).unwrap();
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = seeded_net(&[2, 6, 3], Activation::Tanh, 3);
        let (_, tape) = net.forward_one(&[0.5, 0.5]).unwrap();
        let g = net.backward(&tape, &Matrix2D::zeros(1, 3)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_net_weight_gradient_is_input() {
        let w = Matrix2D::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let net = Mlp::from_params(vec![w], vec![vec![0.1]], Activation::Relu).unwrap();
        let x = [1.5, -2.0, 0.25];
        let (_, tape) = net.forward_one(&x).unwrap();
        let g = net.backward(&tape, &Matrix2D::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.weights[0].data(), &x);
        assert_eq!(g.biases[0], vec![1.0]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = seeded_net(&[2, 4, 1], Activation::Relu, 5);
        let (_, tape) = net.forward_one(&[1.0, 2.0]).unwrap();
        let g = net.backward(&tape, &Matrix2D::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        net.adam_step(&g, 1e-3).unwrap();
        let err = net.backward(&tape, &Matrix2D::from_vec(1, 1, vec![1.0]).unwrap());
        assert!(matches!(err, Err(Error::StaleTape { .. })));

        let other = net.clone();
        let (_, tape2) = net.forward_one(&[1.0, 2.0]).unwrap();
        assert!(other.backward(&tape2, &Matrix2D::from_vec(1, 1, vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let net = seeded_net(&[3, 4, 1], Activation::Relu, 5);
        assert!(matches!(net.forward_one(&[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(Matrix2D::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn finite_difference_gradients() {
        for (seed, act) in [(1, Activation::Mish), (2, Activation::Relu), (3, Activation::Tanh)] {
            let net = seeded_net(&[3, 7, 5, 2], act, seed);
            let x = Matrix2D::from_rows(&[vec![0.3, -0.8, 1.1], vec![-0.4, 0.2, 0.6]]).unwrap();
            let og = Matrix2D::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]).unwrap();
            let loss = |n: &Mlp| -> f64 {
                let y = n.predict(&x).unwrap();
                y.data().iter().zip(og.data()).map(|(a, b)| a * b).sum()
            };
            let (_, tape) = net.forward(&x).unwrap();
            let analytic = net.backward(&tape, &og).unwrap().flatten();
            let base = net.flat_params();
            let mut probe = net.clone();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                probe.set_flat_params(&p).unwrap();
                let up = loss(&probe);
                p[i] -= 2.0 * h;
                probe.set_flat_params(&p).unwrap();
                let down = loss(&probe);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-4, "{act:?} param {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut net = seeded_net(&[2, 3, 1], Activation::Relu, 8);
        let before = net.flat_params();
        let zeros = MlpGrads::zeros_like(&net);
        net.adam_step(&zeros, 0.1).unwrap();
        assert_eq!(net.flat_params(), before);
        assert_eq!(net.adam_state().step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut net = seeded_net(&[1, 1], Activation::Relu, 8);
        let before = net.flat_params();
        let mut g = MlpGrads::zeros_like(&net);
        g.weights[0].set(0, 0, 3.0);
        g.biases[0][0] = -0.02;
        net.adam_step(&g, 0.01).unwrap();
        let after = net.flat_params();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_two_steps_hand_unrolled() {
        let w = Matrix2D::from_vec(1, 1, vec![1.0]).unwrap();
        let mut net = Mlp::from_params(vec![w], vec![vec![0.0]], Activation::Relu).unwrap();
        let mut g = MlpGrads::zeros_like(&net);
        g.weights[0].set(0, 0, 0.5);
        let lr = 0.1;
        net.adam_step(&g, lr).unwrap();
        net.adam_step(&g, lr).unwrap();
        // m1 = 0.05, v1 = 0.00025; m2 = 0.095, v2 = 0.00049975
        let mut theta = 1.0;
        let (m1, v1) = (0.05, 0.000_25);
        theta -= lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let (m2, v2) = (0.095, 0.000_499_75);
        theta -= lr * (m2 / 0.19) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((net.weights()[0].get(0, 0) - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_layer() {
        let mut net = seeded_net(&[2, 3, 1], Activation::Relu, 8);
        let mut g = MlpGrads::zeros_like(&net);
        g.biases[1][0] = f64::NAN;
        assert!(matches!(net.adam_step(&g, 0.1), Err(Error::NonFiniteGradient { layer: 1 })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let w = Matrix2D::from_vec(1, 1, vec![f64::INFINITY]).unwrap();
        let net = Mlp::from_params(vec![w], vec![vec![0.0]], Activation::Relu).unwrap();
        assert!(matches!(net.forward_one(&[1.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let net = seeded_net(&[2, 3, 1], Activation::Mish, 4);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..7], b"ISEPNN1");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 7 + 4 * 4 + 8 * net.num_params());
        // First weight follows the header directly.
        let first = f64::from_le_bytes(bytes[23..31].try_into().unwrap());
        assert_eq!(first, net.weights()[0].get(0, 0));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.isepnn");
        net.save(&path).unwrap();
        let back = Mlp::load(&path, Activation::Mish).unwrap();
        assert_eq!(back.flat_params(), net.flat_params());
        assert_eq!(back.layer_sizes(), net.layer_sizes());

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Mlp::from_bytes(&corrupt, Activation::Mish, &path).is_err());
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 1], Activation::Mish, &path).is_err());
    }

    #[test]
    fn polyak_endpoints() {
        let live = seeded_net(&[2, 3, 1], Activation::Relu, 1);
        let target0 = seeded_net(&[2, 3, 1], Activation::Relu, 2);
        let mut t = target0.clone();
        t.polyak_from(&live, 1.0).unwrap();
        assert_eq!(t.flat_params(), target0.flat_params());
        t.polyak_from(&live, 0.0).unwrap();
        assert_eq!(t.flat_params(), live.flat_params());
    }

    #[test]
    fn matmul_small() {
        let a = Matrix2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix2D::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(a.transpose().data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
