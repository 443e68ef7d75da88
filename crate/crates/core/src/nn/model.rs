use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tensor::{dot, Matrix};
use crate::error::Result;
use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    /// `d_model × d_ff` up-projection.
    pub w_in: Matrix<T>,
    pub b_in: Vec<T>,
    /// `d_ff × d_model` down-projection (no bias, so a zeroed neuron contributes nothing).
    pub w_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// `W_U`, shape `vocab × d_model`; empty when tied to `tok_emb`.
    pub unembed: Matrix<T>,
    /// `b_U`, length `vocab`.
    pub unembed_bias: Vec<T>,
}

/// A named parameter tensor view. `decay` marks tensors subject to weight decay.
pub struct TensorMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
    pub decay: bool,
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![T::zero(); d],
            w_in: Matrix::zeros(d, config.d_ff),
            b_in: vec![T::zero(); config.d_ff],
            w_out: Matrix::zeros(config.d_ff, d),
        };
        Self {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.context_len, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![T::zero(); d],
            unembed: if config.tie_embeddings {
                Matrix::zeros(0, d)
            } else {
                Matrix::zeros(config.vocab_size, d)
            },
            unembed_bias: vec![T::zero(); config.vocab_size],
        }
    }

    /// Every tensor in a fixed order; checkpoints and the optimizer rely on it.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice()),
            ("pos_emb".into(), self.pos_emb.as_slice()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), l.wq.as_slice()));
            out.push((format!("layers.{i}.wk"), l.wk.as_slice()));
            out.push((format!("layers.{i}.wv"), l.wv.as_slice()));
            out.push((format!("layers.{i}.wo"), l.wo.as_slice()));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_in"), l.w_in.as_slice()));
            out.push((format!("layers.{i}.b_in"), &l.b_in));
            out.push((format!("layers.{i}.w_out"), l.w_out.as_slice()));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), self.unembed.as_slice()));
        out.push(("unembed_bias".into(), &self.unembed_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        fn t<'a, T>(name: String, data: &'a mut [T], decay: bool) -> TensorMut<'a, T> {
            TensorMut { name, data, decay }
        }
        let mut out = vec![
            t("tok_emb".into(), self.tok_emb.as_mut_slice(), true),
            t("pos_emb".into(), self.pos_emb.as_mut_slice(), true),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(t(format!("layers.{i}.attn_norm"), &mut l.attn_norm, false));
            out.push(t(format!("layers.{i}.wq"), l.wq.as_mut_slice(), true));
            out.push(t(format!("layers.{i}.wk"), l.wk.as_mut_slice(), true));
            out.push(t(format!("layers.{i}.wv"), l.wv.as_mut_slice(), true));
            out.push(t(format!("layers.{i}.wo"), l.wo.as_mut_slice(), true));
            out.push(t(format!("layers.{i}.ffn_norm"), &mut l.ffn_norm, false));
            out.push(t(format!("layers.{i}.w_in"), l.w_in.as_mut_slice(), true));
            out.push(t(format!("layers.{i}.b_in"), &mut l.b_in, false));
            out.push(t(format!("layers.{i}.w_out"), l.w_out.as_mut_slice(), true));
        }
        out.push(t("final_norm".into(), &mut self.final_norm, false));
        out.push(t("unembed".into(), self.unembed.as_mut_slice(), true));
        out.push(t("unembed_bias".into(), &mut self.unembed_bias, false));
        out
    }

    /// The matrix logits are read through: `unembed`, or `tok_emb` when tied.
    pub fn readout(&self) -> &Matrix<T> {
        if self.unembed.rows() == 0 {
            &self.tok_emb
        } else {
            &self.unembed
        }
    }

    pub fn readout_mut(&mut self) -> &mut Matrix<T> {
        if self.unembed.rows() == 0 {
            &mut self.tok_emb
        } else {
            &mut self.unembed
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Decoder-only pre-norm transformer with an optionally tied unembedding head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    pub weights: Weights<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Randomly initialised model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut w = Weights::zeros(&config);
        let mut fill = |m: &mut [T], s: f64| {
            let normal = Normal::new(0.0, s).expect("positive std");
            for x in m.iter_mut() {
                *x = T::of(normal.sample(&mut rng));
            }
        };
        fill(w.tok_emb.as_mut_slice(), std);
        fill(w.pos_emb.as_mut_slice(), std);
        for l in &mut w.layers {
            l.attn_norm.fill(T::one());
            fill(l.wq.as_mut_slice(), std);
            fill(l.wk.as_mut_slice(), std);
            fill(l.wv.as_mut_slice(), std);
            fill(l.wo.as_mut_slice(), out_std);
            l.ffn_norm.fill(T::one());
            fill(l.w_in.as_mut_slice(), std);
            fill(l.w_out.as_mut_slice(), out_std);
        }
        w.final_norm.fill(T::one());
        fill(w.unembed.as_mut_slice(), std);
        Ok(Self { config, weights: w })
    }

    /// Wraps existing weights; shapes must agree with `config`.
    pub fn from_weights(config: ModelConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        let expected = Weights::<T>::zeros(&config);
        let shapes_match = expected
            .tensors()
            .iter()
            .zip(weights.tensors().iter())
            .all(|((a, x), (b, y))| a == b && x.len() == y.len())
            && expected.layers.len() == weights.layers.len();
        if !shapes_match {
            return Err(crate::error::Error::InvalidConfig(
                "weight shapes do not match config".into(),
            ));
        }
        Ok(Self { config, weights })
    }

    #[inline]
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Final normalization followed by `W_U`, `b_U`. Used both for the model
    /// output and for logit-lens readouts so the two agree bit for bit.
    pub fn project(&self, hidden: &[T]) -> Vec<T> {
        let normed = rms_norm(hidden, &self.weights.final_norm).0;
        self.unembed_row(&normed)
    }

    pub(crate) fn unembed_row(&self, normed: &[T]) -> Vec<T> {
        let w = &self.weights;
        (0..self.config.vocab_size)
            .map(|v| dot(normed, w.readout().row(v)) + w.unembed_bias[v])
            .collect()
    }
}

/// Returns the normalised row and `1/rms`.
#[inline]
pub(crate) fn rms_norm<T: Scalar>(x: &[T], gain: &[T]) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + T::of(NORM_EPS)).sqrt();
    (x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect(), inv)
}
