//! Fully connected networks with rectifier hidden layers, analytic
//! backpropagation and Adam.
//!
//! Batches are row-major: one sample per row. Weights of a layer are stored
//! `inputs x outputs` so a forward pass is `x.dot(w) + b`.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cache was produced before the last parameter update")]
    StaleCache,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

impl OutputActivation {
    fn tag(self) -> u8 {
        match self {
            OutputActivation::Identity => 0,
            OutputActivation::Softmax => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(OutputActivation::Identity),
            1 => Some(OutputActivation::Softmax),
            _ => None,
        }
    }
}

const HIDDEN_RELU: u8 = 0;
const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output: OutputActivation,
    version: u64,
}

/// Activations kept by [`MlpNet::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Gradient with respect to the requested input columns, if asked for.
    pub input: Option<Array2<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl MlpNet {
    /// Uniform fan-in initialization; the output layer starts near zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = if l + 1 == layers { 3e-3 } else { 1.0 / (fan_in as f64).sqrt() };
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound)));
            biases.push(Array1::from_shape_simple_fn(fan_out, || rng.gen_range(-bound..bound)));
        }
        MlpNet {
            sizes: sizes.to_vec(),
            weights,
            biases,
            output,
            version: 0,
        }
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        MlpNet {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: sizes.windows(2).map(|w| Array1::zeros(w[1])).collect(),
            output,
            version: 0,
        }
    }

    pub fn from_params(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        output: OutputActivation,
    ) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::Shape("need one bias per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.nrows() != *sizes.last().unwrap() || w.ncols() != b.len() {
                return Err(NnError::Shape(format!("layer {}x{} with bias {}", w.nrows(), w.ncols(), b.len())));
            }
            sizes.push(w.ncols());
        }
        Ok(MlpNet {
            sizes,
            weights,
            biases,
            output,
            version: 0,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters flattened in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Mutable access for tests and hand-built networks; invalidates caches.
    pub fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        self.version += 1;
        (&mut self.weights, &mut self.biases)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        if x.ncols() != self.input_size() {
            return Err(NnError::Shape(format!("input width {} != {}", x.ncols(), self.input_size())));
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut a = x.to_owned();
        for l in 0..layers {
            let z = a.dot(&self.weights[l]) + &self.biases[l];
            inputs.push(a);
            a = if l + 1 == layers {
                let mut y = z.clone();
                if self.output == OutputActivation::Softmax {
                    softmax_rows(&mut y);
                }
                y
            } else {
                relu(&z)
            };
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: a,
            version: self.version,
        })
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(self.forward(x)?.output)
    }

    fn output_delta(&self, cache: &ForwardCache, dy: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        if cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        if dy.dim() != cache.output.dim() {
            return Err(NnError::Shape(format!("dy {:?} vs output {:?}", dy.dim(), cache.output.dim())));
        }
        Ok(match self.output {
            OutputActivation::Identity => dy.clone(),
            OutputActivation::Softmax => {
                let y = &cache.output;
                let inner = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                y * &(dy - &inner)
            }
        })
    }

    /// Gradients of a scalar loss whose derivative with respect to the
    /// network output is `dy`. `input_cols` selects which input columns get
    /// a gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dy: &Array2<f64>,
        input_cols: Option<Range<usize>>,
    ) -> Result<Gradients, NnError> {
        let mut dz = self.output_delta(cache, dy)?;
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut input = None;
        for l in (0..layers).rev() {
            let mut g = Array2::zeros(self.weights[l].dim());
            general_mat_mul(1.0, &cache.inputs[l].t(), &dz, 0.0, &mut g);
            gw[l] = g;
            gb[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut dx = dz.dot(&self.weights[l].t());
                Zip::from(&mut dx).and(&cache.pre[l - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = dx;
            } else if let Some(cols) = input_cols.clone() {
                input = Some(dz.dot(&self.weights[0].slice(s![cols, ..]).t()));
            }
        }
        Ok(Gradients {
            weights: gw,
            biases: gb,
            input,
        })
    }

    /// Gradient with respect to input columns `cols` only, skipping the
    /// parameter gradients.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        dy: &Array2<f64>,
        cols: Range<usize>,
    ) -> Result<Array2<f64>, NnError> {
        let mut dz = self.output_delta(cache, dy)?;
        for l in (1..self.weights.len()).rev() {
            let mut dx = dz.dot(&self.weights[l].t());
            Zip::from(&mut dx).and(&cache.pre[l - 1]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            dz = dx;
        }
        Ok(dz.dot(&self.weights[0].slice(s![cols, ..]).t()))
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, online: &MlpNet, tau: f64) {
        assert_eq!(self.sizes, online.sizes, "target and online shapes differ");
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        self.version += 1;
    }

    /// Euclidean distance between the parameter vectors of two networks.
    pub fn distance(&self, other: &MlpNet) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            acc += Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + (x - y) * (x - y));
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            acc += Zip::from(a).and(b).fold(0.0, |s, &x, &y| s + (x - y) * (x - y));
        }
        acc.sqrt()
    }

    /// Versioned little-endian dump: magic, format version, layer sizes,
    /// activation tags, then every layer's weights (row-major) and biases
    /// as 64-bit floats.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        w.write_all(&[HIDDEN_RELU, self.output.tag()])?;
        let mut buf = Vec::with_capacity(self.param_count() * 8);
        for v in self.flat_params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32b)?;
        let n = u32::from_le_bytes(u32b) as usize;
        if !(2..=64).contains(&n) {
            return Err(NnError::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        let mut u64b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut u64b)?;
            sizes.push(u64::from_le_bytes(u64b) as usize);
        }
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        if tags[0] != HIDDEN_RELU {
            return Err(NnError::Checkpoint(format!("unknown hidden activation tag {}", tags[0])));
        }
        let output = OutputActivation::from_tag(tags[1])
            .ok_or_else(|| NnError::Checkpoint(format!("unknown output activation tag {}", tags[1])))?;
        let mut next = || -> Result<f64, NnError> {
            r.read_exact(&mut u64b)?;
            Ok(f64::from_le_bytes(u64b))
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in sizes.windows(2) {
            let mut w = Array2::zeros((win[0], win[1]));
            for v in w.iter_mut() {
                *v = next()?;
            }
            let mut b = Array1::zeros(win[1]);
            for v in b.iter_mut() {
                *v = next()?;
            }
            weights.push(w);
            biases.push(b);
        }
        MlpNet::from_params(weights, biases, output)
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl OptState {
    pub fn new(net: &MlpNet, lr: f64) -> Self {
        OptState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_w: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_b: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }
}

/// One bias-corrected Adam update, descending `grads`.
pub fn adam_step(net: &mut MlpNet, grads: &Gradients, opt: &mut OptState) -> Result<(), NnError> {
    if grads.weights.len() != net.weights.len() {
        return Err(NnError::Shape("gradient layer count".into()));
    }
    for (g, w) in grads.weights.iter().zip(&net.weights) {
        if g.dim() != w.dim() {
            return Err(NnError::Shape(format!("gradient {:?} vs weights {:?}", g.dim(), w.dim())));
        }
    }
    if !grads.is_finite() {
        return Err(NnError::Divergence("non-finite gradient".into()));
    }
    opt.step += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let lr = opt.lr;
    let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    };
    for l in 0..net.weights.len() {
        let g = grads.weights[l].as_standard_layout();
        update(
            net.weights[l].as_slice_mut().expect("row-major weights"),
            opt.m_w[l].as_slice_mut().expect("row-major moments"),
            opt.v_w[l].as_slice_mut().expect("row-major moments"),
            g.as_slice().expect("standard layout"),
        );
        update(
            net.biases[l].as_slice_mut().expect("contiguous bias"),
            opt.m_b[l].as_slice_mut().expect("contiguous moments"),
            opt.v_b[l].as_slice_mut().expect("contiguous moments"),
            grads.biases[l].as_slice().expect("contiguous bias gradient"),
        );
    }
    net.version += 1;
    Ok(())
}
