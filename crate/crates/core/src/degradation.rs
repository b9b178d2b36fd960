//! Trainable degradation operator M_ψ.
//!
//! M_ψ maps the model's ε-prediction to the noise that actually produced the
//! rendered sample. It is trained on ‖M_ψ(ε_φ) − ε‖² with ε_φ held constant,
//! so no gradient ever flows through the score model.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optim::Adam;

pub const OPERATOR_MAGIC: &[u8; 6] = b"VDMOP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OperatorInit {
    /// Hidden weights N(0, 0.05²), zero biases, zero output layer: M_ψ ≡ 0.
    #[default]
    ZeroOutput,
    /// Hidden layers embed the input in their first `d` units, the output
    /// layer reads them back, so M_ψ(v) ≈ v for small v.
    Identity,
}

/// The three degradation designs compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorVariant {
    Nonlinear,
    Linear,
    NonlinearPlusNoise,
}

impl OperatorVariant {
    pub const ALL: [OperatorVariant; 3] = [
        OperatorVariant::Nonlinear,
        OperatorVariant::Linear,
        OperatorVariant::NonlinearPlusNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorVariant::Nonlinear => "nonlinear",
            OperatorVariant::Linear => "linear",
            OperatorVariant::NonlinearPlusNoise => "nonlinear_plus_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationOperator {
    layers: Vec<Layer>,
    activation: Activation,
    /// Learnable additive output vector (the "observation noise" variant).
    noise: Option<Vec<f64>>,
}

struct ForwardCache {
    /// activations[0] is the input, activations[l+1] the output of layer l.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl DegradationOperator {
    /// `layer_dims` = [d, hidden..., d].
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        init: OperatorInit,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidRange(format!(
                "operator needs at least [d, d] with positive sizes, got {layer_dims:?}"
            )));
        }
        let d = layer_dims[0];
        if *layer_dims.last().unwrap() != d {
            return Err(Error::InvalidRange(format!(
                "operator must map R^{d} to itself, got {layer_dims:?}"
            )));
        }
        let mut layers: Vec<Layer> = layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        let n = layers.len();
        match init {
            OperatorInit::ZeroOutput => {
                let normal = Normal::new(0.0, 0.05).unwrap();
                for layer in &mut layers[..n - 1] {
                    layer.weights.iter_mut().for_each(|w| *w = normal.sample(rng));
                }
            }
            OperatorInit::Identity => {
                if layer_dims.iter().any(|&h| h < d) {
                    return Err(Error::InvalidRange(
                        "identity init needs every hidden width >= d".into(),
                    ));
                }
                for layer in &mut layers {
                    for i in 0..d {
                        layer.weights[i * layer.inputs + i] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            layers,
            activation,
            noise: None,
        })
    }

    /// d → 4d → 4d → d with the default initialization, or a variant of it.
    pub fn for_variant<R: Rng + ?Sized>(
        variant: OperatorVariant,
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![dim];
        if variant != OperatorVariant::Linear {
            dims.extend_from_slice(hidden);
        }
        dims.push(dim);
        let mut op = Self::new(&dims, activation, OperatorInit::ZeroOutput, rng)?;
        if variant == OperatorVariant::NonlinearPlusNoise {
            op.noise = Some(vec![0.0; dim]);
        }
        Ok(op)
    }

    pub fn default_hidden(dim: usize) -> Vec<usize> {
        vec![4 * dim, 4 * dim]
    }

    pub fn with_noise(mut self, noise: Vec<f64>) -> Result<Self> {
        check_dim(self.dim(), noise.len())?;
        self.noise = Some(noise);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn noise(&self) -> Option<&[f64]> {
        self.noise.as_deref()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.noise.as_ref().map_or(0, Vec::len)
    }

    /// Flat parameters: per layer its weights (row-major) then biases, then
    /// the noise vector if present.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        if let Some(n) = &self.noise {
            out.extend_from_slice(n);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.param_count(), params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        if let Some(n) = &mut self.noise {
            let len = n.len();
            n.copy_from_slice(&params[off..off + len]);
        }
        Ok(())
    }

    fn forward_cached(&self, v: &[f64]) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(v.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(activations.last().unwrap());
            let a = if i == last {
                let mut out = z.clone();
                if let Some(n) = &self.noise {
                    out.iter_mut().zip(n).for_each(|(o, ni)| *o += ni);
                }
                out
            } else {
                z.iter().map(|&zi| self.activation.apply(zi)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        ForwardCache {
            activations,
            pre_activations,
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(self.forward_cached(v).activations.pop().unwrap())
    }

    /// ‖M_ψ(ε_φ) − ε‖².
    pub fn loss(&self, eps_pred: &[f64], eps: &[f64]) -> Result<f64> {
        check_dim(self.dim(), eps.len())?;
        let y = self.apply(eps_pred)?;
        Ok(y.iter().zip(eps).map(|(a, b)| (a - b).powi(2)).sum())
    }

    /// Mean loss over a batch of `(eps_pred, eps)` pairs.
    pub fn batch_loss(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidRange("empty batch".into()));
        }
        let mut total = 0.0;
        for (p, e) in batch {
            total += self.loss(p, e)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of the single-pair loss, accumulated into `grad` with weight `scale`.
    fn accumulate_grad(&self, eps_pred: &[f64], eps: &[f64], scale: f64, grad: &mut [f64]) {
        let cache = self.forward_cached(eps_pred);
        let out = cache.activations.last().unwrap();
        let mut delta: Vec<f64> = out.iter().zip(eps).map(|(y, e)| 2.0 * (y - e)).collect();

        // offsets of each layer's block within the flat layout
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        if self.noise.is_some() {
            for (g, d) in grad[off..].iter_mut().zip(&delta) {
                *g += scale * d;
            }
        }
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.activations[li];
            let base = offsets[li];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += scale * d * x;
                }
                grad[base + layer.weights.len() + o] += scale * d;
            }
            if li == 0 {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * d;
                }
            }
            let z = &cache.pre_activations[li - 1];
            let a = &cache.activations[li];
            delta = back
                .iter()
                .zip(z.iter().zip(a))
                .map(|(b, (&zi, &ai))| b * self.activation.derivative(zi, ai))
                .collect();
        }
    }

    /// Exact mean gradient of the loss over the batch, in the flat layout of
    /// [`params`](Self::params). The ε-predictions are constants.
    pub fn grad(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::InvalidRange("empty batch".into()));
        }
        let d = self.dim();
        let mut grad = vec![0.0; self.param_count()];
        let scale = 1.0 / batch.len() as f64;
        for (p, e) in batch {
            check_dim(d, p.len())?;
            check_dim(d, e.len())?;
            self.accumulate_grad(p, e, scale, &mut grad);
        }
        Ok(grad)
    }

    pub fn optimizer(&self, lr: f64) -> Adam {
        Adam::new(self.param_count(), lr)
    }

    /// One Adam update of ψ.
    pub fn step(&mut self, state: &mut Adam, grads: &[f64]) -> Result<()> {
        let mut p = self.params();
        state.step(&mut p, grads)?;
        self.set_params(&p)
    }

    /// Binary checkpoint: magic, layer count and dims as little-endian u32,
    /// then per layer its row-major weights and biases as little-endian f64.
    /// A noise vector is folded into the output bias, which leaves `apply`
    /// unchanged.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(OPERATOR_MAGIC)?;
        let dims = self.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            for v in &l.weights {
                w.write_all(&v.to_le_bytes())?;
            }
            for (o, b) in l.bias.iter().enumerate() {
                let extra = match (&self.noise, i == last) {
                    (Some(n), true) => n[o],
                    _ => 0.0,
                };
                w.write_all(&(b + extra).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, activation: Activation) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            format: "VDMOP1",
            reason,
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != OPERATOR_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        if !(2..=64).contains(&n) {
            return Err(fmt(format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        if dims[0] != dims[n - 1] || dims.contains(&0) {
            return Err(fmt(format!("layer dims {dims:?}")));
        }
        let mut layers: Vec<Layer> = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        let mut b8 = [0u8; 8];
        for l in &mut layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        Ok(Self {
            layers,
            activation,
            noise: None,
        })
    }
}

/// Least-squares affine map `target ≈ A·input + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.a
            .chunks_exact(self.inputs)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Mean squared residual over `pairs`.
    pub fn mean_loss(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        pairs
            .iter()
            .map(|(x, y)| {
                self.apply(x)
                    .iter()
                    .zip(y)
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / pairs.len() as f64
    }
}

/// Fits the affine map minimizing Σ‖A·in + b − target‖² over `pairs`.
pub fn affine_fit_oracle(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<AffineMap> {
    let Some((x0, y0)) = pairs.first() else {
        return Err(Error::RankDeficient { rank: 0, needed: 1 });
    };
    let (din, dout) = (x0.len(), y0.len());
    let n = pairs.len();
    let mut x = DMatrix::<f64>::zeros(n, din + 1);
    let mut y = DMatrix::<f64>::zeros(n, dout);
    for (i, (inp, tgt)) in pairs.iter().enumerate() {
        check_dim(din, inp.len())?;
        check_dim(dout, tgt.len())?;
        for j in 0..din {
            x[(i, j)] = inp[j];
        }
        x[(i, din)] = 1.0;
        for j in 0..dout {
            y[(i, j)] = tgt[j];
        }
    }
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (n.max(din + 1) as f64);
    let rank = svd.rank(tol);
    if rank < din + 1 {
        return Err(Error::RankDeficient {
            rank,
            needed: din + 1,
        });
    }
    let coef = svd
        .solve(&y, tol)
        .map_err(|e| Error::InvalidRange(e.to_string()))?;
    let mut a = vec![0.0; dout * din];
    for o in 0..dout {
        for j in 0..din {
            a[o * din + j] = coef[(j, o)];
        }
    }
    let b = (0..dout).map(|o| coef[(din, o)]).collect();
    Ok(AffineMap {
        inputs: din,
        outputs: dout,
        a,
        b,
    })
}
