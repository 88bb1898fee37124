//! Small MLP encoder with a hand-derived backward pass.
//!
//! Hidden layers are affine + ReLU; the final layer is affine followed by
//! row L2 normalization, so embeddings live on the unit sphere. Three copies
//! of these parameters exist during training: the query encoder trained by
//! gradient, and the key and teacher encoders maintained as exponential
//! moving averages of it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::substream;

/// Layer widths as the chain `input -> hidden... -> embedding`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: &[usize], embed_dim: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        Self { widths }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }
}

/// One affine layer: `weight` is `out x in`, `bias` has length `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Full parameter set of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Gradients (or optimizer velocity) with the same shape as the parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| Layer {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Self { layers }
    }

    pub fn add(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, scale);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Whether a batch row came from the current task or the exemplar store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Old,
    New,
}

/// A batch of embeddings with per-row provenance and source indices.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub embeddings: Matrix,
    pub provenance: Vec<Provenance>,
    pub source_indices: Vec<usize>,
}

impl FeatureBatch {
    /// Wraps an embedding matrix; rows default to `New` with identity indices.
    pub fn new(embeddings: Matrix) -> Self {
        let b = embeddings.rows();
        Self { embeddings, provenance: vec![Provenance::New; b], source_indices: (0..b).collect() }
    }

    pub fn with_rows(embeddings: Matrix, provenance: Vec<Provenance>, source_indices: Vec<usize>) -> Self {
        debug_assert_eq!(embeddings.rows(), provenance.len());
        debug_assert_eq!(embeddings.rows(), source_indices.len());
        Self { embeddings, provenance, source_indices }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Per-layer caches from one forward pass, enough for an exact backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Layer inputs: `activations[0]` is the batch, `activations[l]` feeds layer `l`.
    activations: Vec<Matrix>,
    /// Pre-activation outputs of each layer.
    pre_activations: Vec<Matrix>,
    /// Row norms of the final pre-normalization output.
    norms: Vec<f64>,
    /// Normalized embeddings.
    embeddings: Matrix,
}

/// Glorot-uniform weights, zero biases, reproducible per seed.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<EncoderParams> {
    if arch.num_layers() == 0 {
        return Err(CclError::EmptyArchitecture);
    }
    if arch.widths.contains(&0) {
        return Err(CclError::Config("architecture widths must be at least 1".into()));
    }
    let mut rng = substream(seed, "encoder_init", &[]);
    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (inp, out) = (arch.widths[l], arch.widths[l + 1]);
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let data = (0..out * inp).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(Layer { weight: Matrix::from_vec(out, inp, data)?, bias: vec![0.0; out] });
    }
    Ok(EncoderParams { arch: arch.clone(), layers })
}

/// Runs the batch through the encoder.
///
/// Returns unit-norm embeddings plus the trace needed by [`backward`].
pub fn forward(params: &EncoderParams, batch: &Matrix) -> Result<(FeatureBatch, ForwardTrace)> {
    if batch.cols() != params.arch.input_dim() {
        return Err(CclError::DimensionMismatch {
            expected: format!("{} input columns", params.arch.input_dim()),
            got: format!("{} columns", batch.cols()),
        });
    }
    let num_layers = params.layers.len();
    let mut activations = vec![batch.clone()];
    let mut pre_activations = Vec::with_capacity(num_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let input = &activations[l];
        let mut z = input.matmul_transposed(&layer.weight)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if l + 1 < num_layers {
            let mut a = z.clone();
            for v in a.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(a);
        }
        pre_activations.push(z);
    }

    let y = pre_activations.last().unwrap();
    let mut norms = Vec::with_capacity(y.rows());
    let mut embeddings = y.clone();
    for i in 0..y.rows() {
        let n = norm(y.row(i));
        if n < 1e-12 || !n.is_finite() {
            return Err(CclError::DegenerateEmbedding);
        }
        for v in embeddings.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }

    let trace = ForwardTrace { activations, pre_activations, norms, embeddings: embeddings.clone() };
    Ok((FeatureBatch::new(embeddings), trace))
}

/// Exact gradient of `sum_ij grad_embeddings[i][j] * embeddings[i][j]` with
/// respect to every weight and bias of the trace's forward pass.
pub fn backward(trace: &ForwardTrace, params: &EncoderParams, grad_embeddings: &Matrix) -> Result<ParamGrads> {
    let emb = &trace.embeddings;
    if grad_embeddings.rows() != emb.rows() || grad_embeddings.cols() != emb.cols() {
        return Err(CclError::GradientShapeMismatch {
            expected: format!("{}x{}", emb.rows(), emb.cols()),
            got: format!("{}x{}", grad_embeddings.rows(), grad_embeddings.cols()),
        });
    }

    // Through row normalization: g_y = (g - (g.e) e) / ||y||.
    let mut g = grad_embeddings.clone();
    for i in 0..g.rows() {
        let e = emb.row(i);
        let gi = g.row(i);
        let proj = crate::numerics::dot(gi, e);
        let n = trace.norms[i];
        let row = g.row_mut(i);
        for (v, &ei) in row.iter_mut().zip(e) {
            *v = (*v - proj * ei) / n;
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        let input = &trace.activations[l];
        // grad_W = g^T a, grad_b = column sums of g.
        grads.layers[l].weight = g.transposed_matmul(input)?;
        for i in 0..g.rows() {
            for (b, &v) in grads.layers[l].bias.iter_mut().zip(g.row(i)) {
                *b += v;
            }
        }
        if l > 0 {
            let mut g_prev = Matrix::zeros(g.rows(), params.layers[l].weight.cols());
            for i in 0..g.rows() {
                let gi = g.row(i);
                for (j, out) in g_prev.row_mut(i).iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (k, &gv) in gi.iter().enumerate() {
                        acc += gv * params.layers[l].weight.get(k, j);
                    }
                    *out = acc;
                }
            }
            // ReLU gate on the previous layer's pre-activations.
            let z = &trace.pre_activations[l - 1];
            for i in 0..g_prev.rows() {
                for (j, v) in g_prev.row_mut(i).iter_mut().enumerate() {
                    if z.get(i, j) <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            g = g_prev;
        }
    }
    Ok(grads)
}

/// SGD with classical momentum:
/// `v <- momentum v + grad + wd theta; theta <- theta - lr v`.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut ParamGrads,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(CclError::NonFiniteGradient);
    }
    for ((layer, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
        for idx in 0..layer.weight.data().len() {
            let w = layer.weight.data()[idx];
            let vel = momentum * v.weight.data()[idx] + g.weight.data()[idx] + weight_decay * w;
            v.weight.data_mut()[idx] = vel;
            layer.weight.data_mut()[idx] = w - lr * vel;
        }
        for idx in 0..layer.bias.len() {
            let b = layer.bias[idx];
            let vel = momentum * v.bias[idx] + g.bias[idx] + weight_decay * b;
            v.bias[idx] = vel;
            layer.bias[idx] = b - lr * vel;
        }
    }
    Ok(())
}

/// EMA blend `target <- m target + (1 - m) source`, used for both the key
/// encoder and the distillation teacher.
pub fn momentum_update(target: &mut EncoderParams, source: &EncoderParams, m: f64) -> Result<()> {
    if target.arch != source.arch {
        return Err(CclError::ArchitectureMismatch);
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        for (tv, sv) in t.weight.data_mut().iter_mut().zip(s.weight.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
        for (tv, sv) in t.bias.iter_mut().zip(&s.bias) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

impl EncoderParams {
    /// Flattens all weights then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Rebuilds parameters from a flat vector laid out as [`Self::flatten`].
    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.num_layers());
        let mut pos = 0;
        for l in 0..arch.num_layers() {
            let (inp, out) = (arch.widths[l], arch.widths[l + 1]);
            let w_len = out * inp;
            if pos + w_len + out > flat.len() {
                return Err(CclError::DimensionMismatch {
                    expected: "flat parameter vector matching architecture".into(),
                    got: format!("{} values", flat.len()),
                });
            }
            let weight = Matrix::from_vec(out, inp, flat[pos..pos + w_len].to_vec())?;
            pos += w_len;
            let bias = flat[pos..pos + out].to_vec();
            pos += out;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { arch: arch.clone(), layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn max_abs_diff(&self, other: &EncoderParams) -> f64 {
        let mut d = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            d = d.max(a.weight.max_abs_diff(&b.weight));
            for (x, y) in a.bias.iter().zip(&b.bias) {
                d = d.max((x - y).abs());
            }
        }
        d
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCL1";

/// Writes the versioned binary checkpoint: magic, layer count, widths as
/// little-endian u32, then each layer's weight (row-major) and bias as
/// little-endian f64. Round trips bit-exactly.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.arch.num_layers() as u32).to_le_bytes())?;
    for &width in &params.arch.widths {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    for layer in &params.layers {
        for v in layer.weight.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CclError::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CclError::Checkpoint("wrong magic".into()));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf).map_err(|_| CclError::Checkpoint("truncated header".into()))?;
    let layer_count = u32::from_le_bytes(u32_buf) as usize;
    if layer_count == 0 || layer_count > 1024 {
        return Err(CclError::Checkpoint(format!("implausible layer count {layer_count}")));
    }
    let mut widths = Vec::with_capacity(layer_count + 1);
    for _ in 0..=layer_count {
        r.read_exact(&mut u32_buf).map_err(|_| CclError::Checkpoint("truncated widths".into()))?;
        widths.push(u32::from_le_bytes(u32_buf) as usize);
    }
    let arch = Architecture { widths };
    let mut f64_buf = [0u8; 8];
    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let (inp, out) = (arch.widths[l], arch.widths[l + 1]);
        let mut data = Vec::with_capacity(out * inp);
        for _ in 0..out * inp {
            r.read_exact(&mut f64_buf).map_err(|_| CclError::Checkpoint("truncated weights".into()))?;
            data.push(f64::from_le_bytes(f64_buf));
        }
        let mut bias = Vec::with_capacity(out);
        for _ in 0..out {
            r.read_exact(&mut f64_buf).map_err(|_| CclError::Checkpoint("truncated bias".into()))?;
            bias.push(f64::from_le_bytes(f64_buf));
        }
        layers.push(Layer { weight: Matrix::from_vec(out, inp, data)?, bias });
    }
    Ok(EncoderParams { arch, layers })
}
