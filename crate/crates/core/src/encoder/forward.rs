use rand::RngCore;

use super::params::{LayerParams, ModelParams};
use crate::dataset::PAD;
use crate::error::{Error, Result};
use crate::numerics::{dot, dropout_mask, layer_norm, vec_mat, Matrix};

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for t in 0..size {
            for s in 0..size {
                allowed.push(f(t, s));
            }
        }
        AttentionMask { size, allowed }
    }

    /// Causal and padding mask: `t` sees `s` iff `s <= t` and `window[s]` is a real item.
    pub fn causal(window: &[u32]) -> Self {
        Self::from_fn(window.len(), |t, s| s <= t && window[s] != PAD)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, t: usize, s: usize) -> bool {
        self.allowed[t * self.size + s]
    }
}

/// Training-time dropout configuration.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Final-layer output, one row per window position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Matrix);

impl HiddenStates {
    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn last(&self) -> &[f64] {
        self.0.row(self.0.rows() - 1)
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_window(window: &[u32], params: &ModelParams) -> Result<()> {
    let cfg = params.config();
    if window.len() != cfg.max_len {
        return Err(Error::Shape(format!(
            "window of length {} for a model with n = {}",
            window.len(),
            cfg.max_len
        )));
    }
    if let Some(&id) = window.iter().find(|&&id| id as usize > cfg.vocab_size) {
        return Err(Error::ItemOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Row `t` is `item_embedding[window[t]] + position_embedding[t]`.
pub fn embed_sequence(window: &[u32], params: &ModelParams) -> Result<Matrix> {
    check_window(window, params)?;
    Ok(embed_rows(window, 0, params))
}

fn embed_rows(window: &[u32], first_row: usize, params: &ModelParams) -> Matrix {
    let d = params.config().hidden;
    let mut out = Matrix::zeros(window.len() - first_row, d);
    for (i, &id) in window[first_row..].iter().enumerate() {
        let row = out.row_mut(i);
        let pos = params.position_embeddings.row(first_row + i);
        let item = params.item_embeddings.row(id as usize);
        for c in 0..d {
            row[c] = item[c] + pos[c];
        }
    }
    out
}

fn project(x: &Matrix, w: &Matrix, bias: Option<&[f64]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        vec_mat(x.row(r), w, row);
        if let Some(b) = bias {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
    }
    out
}

/// Scaled dot-product attention per head. `probs` receives the `heads × m × m`
/// attention weights (zero where masked); rows with nothing to attend to get
/// zero context.
pub(crate) fn attend(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mask: &AttentionMask, probs: &mut [f64]) -> Matrix {
    let m = q.rows();
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(m, d);
    probs.fill(0.0);
    let mut scores = vec![0.0; m];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..m {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                scores[j] = if mask.allowed(i, j) {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    max = max.max(s);
                    s
                } else {
                    f64::NEG_INFINITY
                };
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let p = &mut probs[(h * m + i) * m..(h * m + i + 1) * m];
            let mut sum = 0.0;
            for j in 0..m {
                if scores[j] > f64::NEG_INFINITY {
                    p[j] = (scores[j] - max).exp();
                    sum += p[j];
                }
            }
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..m {
                if p[j] != 0.0 {
                    p[j] /= sum;
                    let vj = &v.row(j)[cols.clone()];
                    for c in 0..dh {
                        out[c] += p[j] * vj[c];
                    }
                }
            }
        }
    }
    ctx
}

/// Multi-head self-attention over `x` followed by the output projection.
pub fn multi_head_attention(x: &Matrix, layer: &LayerParams, heads: usize, mask: &AttentionMask) -> Result<Matrix> {
    if mask.size() != x.rows() {
        return Err(Error::Shape(format!("{}-row input with a {}-position mask", x.rows(), mask.size())));
    }
    if heads == 0 || !x.cols().is_multiple_of(heads) {
        return Err(Error::Shape(format!("{heads} heads for width {}", x.cols())));
    }
    let q = project(x, &layer.query, None);
    let k = project(x, &layer.key, None);
    let v = project(x, &layer.value, None);
    let mut probs = vec![0.0; heads * x.rows() * x.rows()];
    let ctx = attend(&q, &k, &v, heads, mask, &mut probs);
    Ok(project(&ctx, &layer.output, None))
}

/// Position-wise `W2·ReLU(W1·x + b1) + b2`.
pub fn feed_forward(x: &Matrix, layer: &LayerParams) -> Matrix {
    let mut hidden = project(x, &layer.ffn_in, Some(&layer.ffn_in_bias));
    for v in hidden.as_mut_slice() {
        *v = v.max(0.0);
    }
    project(&hidden, &layer.ffn_out, Some(&layer.ffn_out_bias))
}

/// Runs the full encoder over a padded window.
pub fn encode(window: &[u32], params: &ModelParams, dropout: Option<Dropout<'_>>) -> Result<HiddenStates> {
    check_window(window, params)?;
    let trace = Trace::run(window, 0, params, dropout);
    Ok(HiddenStates(trace.hidden))
}

/// Logit of every real item (index `v - 1` holds item `v`).
pub fn score_items(hidden_row: &[f64], params: &ModelParams) -> Vec<f64> {
    let table = &params.item_embeddings;
    (1..table.rows()).map(|v| dot(hidden_row, table.row(v))).collect()
}

pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
    pub out: Matrix,
}

fn norm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> NormCache {
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        rstd.push(layer_norm(x.row(r), gain, bias, xhat.row_mut(r), out.row_mut(r)));
    }
    NormCache { xhat, rstd, out }
}

fn apply_dropout(x: &mut Matrix, dropout: &mut Option<Dropout<'_>>) -> Option<Vec<f64>> {
    let d = dropout.as_mut()?;
    let mask = dropout_mask(x.as_slice().len(), d.rate, &mut *d.rng)?;
    for (v, m) in x.as_mut_slice().iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

pub(crate) struct LayerTrace {
    pub norm1: NormCache,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<f64>,
    pub ctx: Matrix,
    pub drop1: Option<Vec<f64>>,
    pub norm2: NormCache,
    pub pre_act: Matrix,
    pub act: Matrix,
    pub drop2: Option<Vec<f64>>,
}

/// Forward pass over window rows `first_row..n` with every intermediate kept
/// for the backward pass.
pub(crate) struct Trace {
    pub first_row: usize,
    pub window: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    /// Input to the final norm (output of the last block).
    pub final_in: Option<NormCache>,
    pub hidden: Matrix,
}

impl Trace {
    /// Rows before `first_row` are not computed. Starting at the first real
    /// item gives the same real-row outputs as starting at 0, because padding
    /// rows are never attended to.
    pub fn run(window: &[u32], first_row: usize, params: &ModelParams, mut dropout: Option<Dropout<'_>>) -> Trace {
        let cfg = params.config();
        let rows = &window[first_row..];
        let mask = AttentionMask::causal(rows);
        let mut x = embed_rows(window, first_row, params);
        let mut layers = Vec::with_capacity(cfg.layers);

        for layer in &params.layers {
            let norm1 = norm_rows(&x, &layer.attn_norm_gain, &layer.attn_norm_bias);
            let q = project(&norm1.out, &layer.query, None);
            let k = project(&norm1.out, &layer.key, None);
            let v = project(&norm1.out, &layer.value, None);
            let m = x.rows();
            let mut probs = vec![0.0; cfg.heads * m * m];
            let ctx = attend(&q, &k, &v, cfg.heads, &mask, &mut probs);
            let mut attn = project(&ctx, &layer.output, None);
            let drop1 = apply_dropout(&mut attn, &mut dropout);
            let mut y = x;
            crate::numerics::axpy(1.0, attn.as_slice(), y.as_mut_slice());

            let norm2 = norm_rows(&y, &layer.ffn_norm_gain, &layer.ffn_norm_bias);
            let pre_act = project(&norm2.out, &layer.ffn_in, Some(&layer.ffn_in_bias));
            let mut act = pre_act.clone();
            for v in act.as_mut_slice() {
                *v = v.max(0.0);
            }
            let mut f = project(&act, &layer.ffn_out, Some(&layer.ffn_out_bias));
            let drop2 = apply_dropout(&mut f, &mut dropout);
            crate::numerics::axpy(1.0, f.as_slice(), y.as_mut_slice());
            x = y;

            layers.push(LayerTrace {
                norm1,
                q,
                k,
                v,
                probs,
                ctx,
                drop1,
                norm2,
                pre_act,
                act,
                drop2,
            });
        }

        let (final_in, hidden) = if layers.is_empty() {
            (None, x)
        } else {
            let norm = norm_rows(&x, &params.final_norm_gain, &params.final_norm_bias);
            let hidden = norm.out.clone();
            (Some(norm), hidden)
        };

        Trace {
            first_row,
            window: window.to_vec(),
            layers,
            final_in,
            hidden,
        }
    }

    /// Row for absolute window position `t` (must be `>= first_row`).
    pub fn hidden_at(&self, t: usize) -> &[f64] {
        self.hidden.row(t - self.first_row)
    }
}

/// Final-position hidden state, computing only the real rows of the window.
pub(crate) fn last_hidden(window: &[u32], params: &ModelParams) -> Result<Vec<f64>> {
    check_window(window, params)?;
    let first = window.iter().position(|&id| id != PAD).unwrap_or(window.len() - 1);
    let trace = Trace::run(window, first, params, None);
    Ok(trace.hidden_at(window.len() - 1).to_vec())
}
