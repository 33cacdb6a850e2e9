use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{FlatParams, Matrix};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of real items; the embedding table has one extra padding row.
    pub vocab_size: usize,
    pub hidden: usize,
    /// Window length `n`.
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, hidden: usize, max_len: usize, layers: usize, heads: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden,
            max_len,
            layers,
            heads,
            ffn: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.max_len == 0 || self.ffn == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide hidden size {}", self.heads, self.hidden));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: Vec<f64>,
    pub attn_norm_bias: Vec<f64>,
    /// `d × d`; head `i` owns columns `i*d/h .. (i+1)*d/h`.
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ffn_norm_gain: Vec<f64>,
    pub ffn_norm_bias: Vec<f64>,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Vec<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ffn: usize) -> Self {
        LayerParams {
            attn_norm_gain: vec![0.0; d],
            attn_norm_bias: vec![0.0; d],
            query: Matrix::zeros(d, d),
            key: Matrix::zeros(d, d),
            value: Matrix::zeros(d, d),
            output: Matrix::zeros(d, d),
            ffn_norm_gain: vec![0.0; d],
            ffn_norm_bias: vec![0.0; d],
            ffn_in: Matrix::zeros(d, ffn),
            ffn_in_bias: vec![0.0; ffn],
            ffn_out: Matrix::zeros(ffn, d),
            ffn_out_bias: vec![0.0; d],
        }
    }

    fn arrays(&self) -> [&[f64]; 12] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            self.query.as_slice(),
            self.key.as_slice(),
            self.value.as_slice(),
            self.output.as_slice(),
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
            self.ffn_in.as_slice(),
            &self.ffn_in_bias,
            self.ffn_out.as_slice(),
            &self.ffn_out_bias,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut [f64]; 12] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            self.query.as_mut_slice(),
            self.key.as_mut_slice(),
            self.value.as_mut_slice(),
            self.output.as_mut_slice(),
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
            self.ffn_in.as_mut_slice(),
            &mut self.ffn_in_bias,
            self.ffn_out.as_mut_slice(),
            &mut self.ffn_out_bias,
        ]
    }
}

/// Every trainable array. Also used as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    /// `(vocab_size + 1) × d`; row 0 is padding and stays zero.
    pub item_embeddings: Matrix,
    /// `n × d`
    pub position_embeddings: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Vec<f64>,
    pub final_norm_bias: Vec<f64>,
}

impl ModelParams {
    /// All-zero arrays of the right shapes.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        Ok(ModelParams {
            config,
            item_embeddings: Matrix::zeros(config.vocab_size + 1, d),
            position_embeddings: Matrix::zeros(config.max_len, d),
            layers: (0..config.layers).map(|_| LayerParams::zeros(d, config.ffn)).collect(),
            final_norm_gain: vec![0.0; d],
            final_norm_bias: vec![0.0; d],
        })
    }

    /// Weights and embeddings from a zero-mean normal truncated at two
    /// standard deviations; norm gains 1, biases 0, padding row 0.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
        let mut draw = |out: &mut [f64]| {
            for v in out {
                *v = loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                };
            }
        };
        draw(params.item_embeddings.as_mut_slice());
        draw(params.position_embeddings.as_mut_slice());
        for layer in &mut params.layers {
            for m in [&mut layer.query, &mut layer.key, &mut layer.value, &mut layer.output, &mut layer.ffn_in, &mut layer.ffn_out] {
                draw(m.as_mut_slice());
            }
            layer.attn_norm_gain.fill(1.0);
            layer.ffn_norm_gain.fill(1.0);
        }
        params.final_norm_gain.fill(1.0);
        params.zero_padding_row();
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn zero_padding_row(&mut self) {
        self.item_embeddings.row_mut(0).fill(0.0);
    }

    pub fn fill(&mut self, v: f64) {
        for a in self.arrays_mut() {
            a.fill(v);
        }
    }

    /// Parameter arrays in checkpoint order: item embeddings, position
    /// embeddings, each layer's twelve arrays, final norm gain and bias.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.item_embeddings.as_slice(), self.position_embeddings.as_slice()];
        for layer in &self.layers {
            out.extend(layer.arrays());
        }
        out.push(&self.final_norm_gain);
        out.push(&self.final_norm_bias);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.item_embeddings.as_mut_slice(),
            self.position_embeddings.as_mut_slice(),
        ];
        for layer in &mut self.layers {
            out.extend(layer.arrays_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.arrays().iter().map(|a| a.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint
    /// round trip produces.
    pub fn round_to_f32(&mut self) {
        for a in self.arrays_mut() {
            for v in a {
                *v = *v as f32 as f64;
            }
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            crate::numerics::axpy(alpha, src, dst);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (k, len) in self.shapes().into_iter().enumerate() {
            if i < len {
                return (k, i);
            }
            i -= len;
        }
        panic!("flat parameter index out of range");
    }
}

impl FlatParams for ModelParams {
    fn num_params(&self) -> usize {
        self.shapes().iter().sum()
    }

    fn get(&self, i: usize) -> f64 {
        let (k, j) = self.locate(i);
        self.arrays()[k][j]
    }

    fn set(&mut self, i: usize, v: f64) {
        let (k, j) = self.locate(i);
        self.arrays_mut()[k][j] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_hidden() {
        let mut cfg = ModelConfig::new(10, 8, 4, 1, 3);
        assert!(ModelParams::zeros(cfg).is_err());
        cfg.heads = 2;
        assert!(ModelParams::zeros(cfg).is_ok());
    }

    #[test]
    fn init_respects_truncation_and_padding() {
        let cfg = ModelConfig::new(30, 8, 5, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ModelParams::init(cfg, 0.02, &mut rng).unwrap();
        assert!(p.item_embeddings.row(0).iter().all(|&v| v == 0.0));
        assert!(p.item_embeddings.as_slice().iter().all(|v| v.abs() <= 0.04));
        assert!(p.layers[1].ffn_norm_gain.iter().all(|&v| v == 1.0));
        assert_eq!(p.arrays().len(), 2 + 12 * 2 + 2);
    }

    #[test]
    fn flat_indexing_walks_arrays_in_order() {
        let cfg = ModelConfig::new(3, 2, 2, 1, 1);
        let mut p = ModelParams::zeros(cfg).unwrap();
        let n = p.num_params();
        for i in 0..n {
            p.set(i, i as f64);
        }
        assert_eq!(p.to_flat(), (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(p.position_embeddings[(0, 0)], 8.0);
    }
}
