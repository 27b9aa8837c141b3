//! Parameter containers for the two halves of the model.
//!
//! The generative side is a single-layer tanh recurrent cell over word and
//! state embeddings with two softmax heads; the inference side is a
//! position-wise affine encoder over a ±1 window of word embeddings feeding
//! the emission potentials of a chain CRF, plus a learned transition matrix.
//! Both sides expose a fixed flattening (documented on [`GenerativeParams`]
//! and [`InferenceParams`]) used by the SGD loop, the gradient reports and
//! the finite-difference checks.

use crate::error::VaeError;
use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Decoder parameters.
///
/// One step of the generative model, given the previous state embedding
/// `z_e`, previous word embedding `x_e` and hidden state `h_prev`:
///
/// ```text
///   h           = tanh(w_in · [z_e; x_e] + w_hh · h_prev + b_h)
///   state score = w_state · h + b_state            (K logits)
///   word score  = w_word · [e(z_t); h] + b_word    (V logits)
/// ```
///
/// Flattening order: `word_embed`, `state_embed`, `w_in`, `w_hh`, `b_h`,
/// `w_state`, `b_state`, `w_word`, `b_word`, each row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    /// Word embeddings `e(x)`, `V × d`.
    pub word_embed: Array2<f64>,
    /// State embeddings `e(z)`, `K × d`.
    pub state_embed: Array2<f64>,
    /// Input weights of the recurrent cell, `h × 2d`.
    pub w_in: Array2<f64>,
    /// Hidden-to-hidden weights, `h × h`.
    pub w_hh: Array2<f64>,
    /// Cell bias, `h`.
    pub b_h: Array1<f64>,
    /// State head, `K × h`.
    pub w_state: Array2<f64>,
    /// State head bias, `K`.
    pub b_state: Array1<f64>,
    /// Word head over `[e(z_t); h]`, `V × (d + h)`.
    pub w_word: Array2<f64>,
    /// Word head bias, `V`.
    pub b_word: Array1<f64>,
}

impl GenerativeParams {
    /// Uniform `(-scale, scale)` initialization from a seed.
    pub fn seeded(
        num_words: usize,
        num_states: usize,
        embed_dim: usize,
        hidden_dim: usize,
        scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (v, k, d, h) = (num_words, num_states, embed_dim, hidden_dim);
        GenerativeParams {
            word_embed: uniform2(&mut rng, v, d, scale),
            state_embed: uniform2(&mut rng, k, d, scale),
            w_in: uniform2(&mut rng, h, 2 * d, scale),
            w_hh: uniform2(&mut rng, h, h, scale),
            b_h: uniform1(&mut rng, h, scale),
            w_state: uniform2(&mut rng, k, h, scale),
            b_state: uniform1(&mut rng, k, scale),
            w_word: uniform2(&mut rng, v, d + h, scale),
            b_word: uniform1(&mut rng, v, scale),
        }
    }

    pub fn num_words(&self) -> usize {
        self.word_embed.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.state_embed.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.word_embed.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.nrows()
    }

    /// Checks positive sizes, cross-field shape consistency and finiteness.
    pub fn validate(&self) -> Result<(), VaeError> {
        let (v, k, d, h) = (
            self.num_words(),
            self.num_states(),
            self.embed_dim(),
            self.hidden_dim(),
        );
        if v == 0 || k == 0 || d == 0 || h == 0 {
            return Err(VaeError::BadParams(
                "all decoder dimensions must be positive".into(),
            ));
        }
        let shapes = [
            ("state_embed", self.state_embed.dim(), (k, d)),
            ("w_in", self.w_in.dim(), (h, 2 * d)),
            ("w_hh", self.w_hh.dim(), (h, h)),
            ("w_state", self.w_state.dim(), (k, h)),
            ("w_word", self.w_word.dim(), (v, d + h)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(VaeError::BadParams(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        if self.b_h.len() != h || self.b_state.len() != k || self.b_word.len() != v {
            return Err(VaeError::BadParams("bias length mismatch".into()));
        }
        check_finite(self.blocks(), "decoder")
    }

    fn blocks(&self) -> [&[f64]; 9] {
        [
            flat2(&self.word_embed),
            flat2(&self.state_embed),
            flat2(&self.w_in),
            flat2(&self.w_hh),
            self.b_h.as_slice().expect("contiguous"),
            flat2(&self.w_state),
            self.b_state.as_slice().expect("contiguous"),
            flat2(&self.w_word),
            self.b_word.as_slice().expect("contiguous"),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 9] {
        [
            flat2_mut(&mut self.word_embed),
            flat2_mut(&mut self.state_embed),
            flat2_mut(&mut self.w_in),
            flat2_mut(&mut self.w_hh),
            self.b_h.as_slice_mut().expect("contiguous"),
            flat2_mut(&mut self.w_state),
            self.b_state.as_slice_mut().expect("contiguous"),
            flat2_mut(&mut self.w_word),
            self.b_word.as_slice_mut().expect("contiguous"),
        ]
    }

    /// Number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// All parameters in the documented flattening order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    /// Overwrites every parameter from a flat vector (inverse of
    /// [`GenerativeParams::to_flat`]).
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "flat parameter length mismatch");
        let mut offset = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
    }

    /// In-place `params += step * flat` in the flattening order.
    pub fn axpy(&mut self, step: f64, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "flat gradient length mismatch");
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            for (p, g) in block.iter_mut().zip(&flat[offset..offset + len]) {
                *p += step * g;
            }
            offset += len;
        }
    }
}

/// Encoder parameters.
///
/// Per-position emission potentials over a ±1 window of word embeddings:
///
/// ```text
///   feat_t   = w_prev · e(x_{t-1}) + w_curr · e(x_t) + w_next · e(x_{t+1}) + b_win
///   emis_t   = w_phi · feat_t + b_phi                (K potentials)
/// ```
///
/// with zero vectors standing in for the out-of-range window slots. The
/// transition potentials are a free `K × K` matrix; initial potentials are
/// pinned to zero (chain CRFs are shift-invariant, so a learned initial row
/// would be redundant with the first emission row).
///
/// Flattening order: `enc_embed`, `w_prev`, `w_curr`, `w_next`, `b_win`,
/// `w_phi`, `b_phi`, `transition`, each row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    /// Encoder word embeddings, `V × d_e` (separate from the decoder's).
    pub enc_embed: Array2<f64>,
    /// Window weights for position `t-1`, `f × d_e`.
    pub w_prev: Array2<f64>,
    /// Window weights for position `t`, `f × d_e`.
    pub w_curr: Array2<f64>,
    /// Window weights for position `t+1`, `f × d_e`.
    pub w_next: Array2<f64>,
    /// Window bias, `f`.
    pub b_win: Array1<f64>,
    /// Emission projection, `K × f`.
    pub w_phi: Array2<f64>,
    /// Emission bias, `K`.
    pub b_phi: Array1<f64>,
    /// Transition potentials, `K × K`.
    pub transition: Array2<f64>,
}

impl InferenceParams {
    /// Uniform `(-scale, scale)` initialization from a seed.
    pub fn seeded(
        num_words: usize,
        num_states: usize,
        embed_dim: usize,
        feature_dim: usize,
        scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (v, k, d, f) = (num_words, num_states, embed_dim, feature_dim);
        InferenceParams {
            enc_embed: uniform2(&mut rng, v, d, scale),
            w_prev: uniform2(&mut rng, f, d, scale),
            w_curr: uniform2(&mut rng, f, d, scale),
            w_next: uniform2(&mut rng, f, d, scale),
            b_win: uniform1(&mut rng, f, scale),
            w_phi: uniform2(&mut rng, k, f, scale),
            b_phi: uniform1(&mut rng, k, scale),
            transition: uniform2(&mut rng, k, k, scale),
        }
    }

    pub fn num_words(&self) -> usize {
        self.enc_embed.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_embed.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.b_win.len()
    }

    /// Checks positive sizes, cross-field shape consistency and finiteness.
    pub fn validate(&self) -> Result<(), VaeError> {
        let (v, k, d, f) = (
            self.num_words(),
            self.num_states(),
            self.embed_dim(),
            self.feature_dim(),
        );
        if v == 0 || k == 0 || d == 0 || f == 0 {
            return Err(VaeError::BadParams(
                "all encoder dimensions must be positive".into(),
            ));
        }
        let shapes = [
            ("w_prev", self.w_prev.dim(), (f, d)),
            ("w_curr", self.w_curr.dim(), (f, d)),
            ("w_next", self.w_next.dim(), (f, d)),
            ("w_phi", self.w_phi.dim(), (k, f)),
            ("transition", self.transition.dim(), (k, k)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(VaeError::BadParams(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        if self.b_phi.len() != k {
            return Err(VaeError::BadParams("b_phi length mismatch".into()));
        }
        check_finite(self.blocks(), "encoder")
    }

    fn blocks(&self) -> [&[f64]; 8] {
        [
            flat2(&self.enc_embed),
            flat2(&self.w_prev),
            flat2(&self.w_curr),
            flat2(&self.w_next),
            self.b_win.as_slice().expect("contiguous"),
            flat2(&self.w_phi),
            self.b_phi.as_slice().expect("contiguous"),
            flat2(&self.transition),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 8] {
        [
            flat2_mut(&mut self.enc_embed),
            flat2_mut(&mut self.w_prev),
            flat2_mut(&mut self.w_curr),
            flat2_mut(&mut self.w_next),
            self.b_win.as_slice_mut().expect("contiguous"),
            flat2_mut(&mut self.w_phi),
            self.b_phi.as_slice_mut().expect("contiguous"),
            flat2_mut(&mut self.transition),
        ]
    }

    pub fn dim(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "flat parameter length mismatch");
        let mut offset = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
    }

    pub fn axpy(&mut self, step: f64, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "flat gradient length mismatch");
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            for (p, g) in block.iter_mut().zip(&flat[offset..offset + len]) {
                *p += step * g;
            }
            offset += len;
        }
    }
}

fn flat2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous row-major array")
}

fn flat2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous row-major array")
}

fn check_finite<'a>(
    blocks: impl IntoIterator<Item = &'a [f64]>,
    side: &str,
) -> Result<(), VaeError> {
    for block in blocks {
        if let Some(bad) = block.iter().find(|v| !v.is_finite()) {
            return Err(VaeError::BadParams(format!(
                "{side} parameters contain non-finite value {bad}"
            )));
        }
    }
    Ok(())
}

/// `[0, 1)` from the top 53 bits, same recipe the noise stream uses.
pub(crate) fn unit_f64(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn uniform1(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| (2.0 * unit_f64(rng) - 1.0) * scale))
}

fn uniform2(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (2.0 * unit_f64(rng) - 1.0) * scale)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}
