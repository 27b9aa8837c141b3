//! Seeded ground-truth HMM datasets.
//!
//! The generator is a plain HMM: stationary initial distribution, mildly
//! sticky transitions, and emission rows concentrated on a per-state band
//! of words so latent states stay recoverable from the observations. The
//! generator itself ships with the dataset because it *is* the evaluation
//! oracle: `log p(x)` of any sequence is one forward pass over the
//! HMM-as-potential-table, so model NLL can be compared against the true
//! NLL of the data-generating process.

use crate::error::HarnessError;
use crf_core::{forward, PotentialTable};
use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Declarative spec; [`generate_hmm_dataset`] is a pure function of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmSpec {
    pub num_states: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub seed: u64,
}

impl Default for HmmSpec {
    fn default() -> Self {
        HmmSpec {
            num_states: 5,
            vocab: 20,
            seq_len: 10,
            n_sequences: 2000,
            seed: 7,
        }
    }
}

/// The ground-truth HMM in probability space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmGenerator {
    /// `(K, K)` row-stochastic transition matrix.
    pub transition: Array2<f64>,
    /// `(K, V)` row-stochastic emission matrix.
    pub emission: Array2<f64>,
    /// Initial distribution; fixed to the stationary distribution of
    /// `transition` so state marginals are flat in time.
    pub initial: Vec<f64>,
}

const SELF_TRANSITION: f64 = 0.55;
const IN_BAND_MASS: f64 = 0.9;

/// `u64 -> [0, 1)` with 53 random mantissa bits.
fn unit(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl HmmGenerator {
    /// Builds the generator for `(K, V)` from a seed.
    ///
    /// Transitions keep [`SELF_TRANSITION`] mass on the diagonal and spread
    /// the rest by seeded draws. Each state owns a contiguous band of
    /// roughly `V / K` words holding [`IN_BAND_MASS`] of its emission row,
    /// so states are identifiable from emissions alone. `K = 1` degenerates
    /// cleanly: one state, the whole vocabulary in its band.
    pub fn seeded(num_states: usize, vocab: usize, seed: u64) -> Result<Self, HarnessError> {
        if num_states == 0 || vocab == 0 {
            return Err(HarnessError::Config(format!(
                "generator needs at least one state and one word, got K={num_states} V={vocab}"
            )));
        }
        if vocab < num_states {
            return Err(HarnessError::Config(format!(
                "concentrated emission bands need V >= K, got K={num_states} V={vocab}"
            )));
        }
        let (k, v) = (num_states, vocab);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        let mut transition = Array2::zeros((k, k));
        for i in 0..k {
            let mut row: Vec<f64> = (0..k).map(|_| 0.2 + unit(&mut rng)).collect();
            if k > 1 {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, w)| w)
                    .sum();
                for (j, w) in row.iter_mut().enumerate() {
                    *w = if j == i {
                        SELF_TRANSITION
                    } else {
                        (1.0 - SELF_TRANSITION) * *w / off
                    };
                }
            } else {
                row[0] = 1.0;
            }
            for j in 0..k {
                transition[[i, j]] = row[j];
            }
        }

        // Contiguous word bands: state j owns [band_start(j), band_start(j+1)).
        let band_start = |j: usize| j * v / k;
        let mut emission = Array2::zeros((k, v));
        for j in 0..k {
            let (lo, hi) = (band_start(j), band_start(j + 1));
            let mut row = vec![0.0; v];
            for (w, slot) in row.iter_mut().enumerate() {
                *slot = 0.2 + unit(&mut rng);
                if !(lo..hi).contains(&w) {
                    *slot *= 0.05;
                }
            }
            // Rescale so the band holds exactly IN_BAND_MASS (when there is
            // an out-of-band region at all).
            let in_band: f64 = row[lo..hi].iter().sum();
            let out_band: f64 = row.iter().sum::<f64>() - in_band;
            if out_band > 0.0 {
                for (w, slot) in row.iter_mut().enumerate() {
                    if (lo..hi).contains(&w) {
                        *slot *= IN_BAND_MASS / in_band;
                    } else {
                        *slot *= (1.0 - IN_BAND_MASS) / out_band;
                    }
                }
            } else {
                normalize(&mut row);
            }
            for w in 0..v {
                emission[[j, w]] = row[w];
            }
        }

        let initial = stationary(&transition);
        Ok(HmmGenerator {
            transition,
            emission,
            initial,
        })
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.emission.ncols()
    }

    /// Draws one `(words, states)` pair of length `seq_len`.
    pub fn sample(&self, seq_len: usize, rng: &mut ChaCha12Rng) -> (Vec<usize>, Vec<usize>) {
        let mut words = Vec::with_capacity(seq_len);
        let mut states = Vec::with_capacity(seq_len);
        let mut state = categorical(&self.initial, unit(rng));
        for t in 0..seq_len {
            if t > 0 {
                let row = self.transition.row(state);
                state = categorical(row.as_slice().unwrap(), unit(rng));
            }
            let row = self.emission.row(state);
            let word = categorical(row.as_slice().unwrap(), unit(rng));
            states.push(state);
            words.push(word);
        }
        (words, states)
    }

    /// `log p(x)` by the forward algorithm: the HMM is a potential table
    /// with `transition = ln A`, `emission[t][k] = ln B[k][x_t]`,
    /// `initial = ln π`, whose partition value is exactly the marginal
    /// likelihood of `x`.
    pub fn log_marginal(&self, x: &[usize]) -> Result<f64, HarnessError> {
        let (k, v) = (self.num_states(), self.vocab());
        if x.is_empty() {
            return Err(HarnessError::Config("empty sequence".into()));
        }
        if let Some(&w) = x.iter().find(|&&w| w >= v) {
            return Err(HarnessError::Config(format!(
                "word {w} outside generator vocabulary {v}"
            )));
        }
        let log_trans = self.transition.mapv(f64::ln);
        let mut log_emis = Array2::zeros((x.len(), k));
        for (t, &w) in x.iter().enumerate() {
            for j in 0..k {
                log_emis[[t, j]] = self.emission[[j, w]].ln();
            }
        }
        let log_init: Vec<f64> = self.initial.iter().map(|&p| p.ln()).collect();
        let table = PotentialTable::new(log_trans, log_emis, log_init)?;
        Ok(forward(&table).log_z)
    }

    /// Mean `-log p(x)` per sequence over a dataset — the oracle NLL a
    /// trained model is judged against.
    pub fn exact_nll(&self, dataset: &[Vec<usize>]) -> Result<f64, HarnessError> {
        if dataset.is_empty() {
            return Err(HarnessError::Config("empty dataset".into()));
        }
        let mut total = 0.0;
        for x in dataset {
            total -= self.log_marginal(x)?;
        }
        Ok(total / dataset.len() as f64)
    }

    pub fn stationary(&self) -> &[f64] {
        &self.initial
    }

    /// Exact mean and standard deviation of the occupancy count of `state`
    /// in one chain of length `seq_len` (number of positions spent in the
    /// state). Computed by dynamic programming over (position, current
    /// state, count so far), so frequency tests can use the true sampling
    /// σ — which matters, because sticky transitions make positions within
    /// a chain strongly correlated and the i.i.d. σ would be far too small.
    pub fn occupancy_moments(&self, state: usize, seq_len: usize) -> (f64, f64) {
        let k = self.num_states();
        // p[j][c] = P(z_t = j, count so far = c).
        let mut p = vec![vec![0.0; seq_len + 1]; k];
        for j in 0..k {
            let c = usize::from(j == state);
            p[j][c] += self.initial[j];
        }
        for _t in 1..seq_len {
            let mut next = vec![vec![0.0; seq_len + 1]; k];
            for j in 0..k {
                for c in 0..seq_len {
                    if p[j][c] == 0.0 {
                        continue;
                    }
                    for nj in 0..k {
                        let nc = c + usize::from(nj == state);
                        next[nj][nc] += p[j][c] * self.transition[[j, nj]];
                    }
                }
            }
            p = next;
        }
        let mut mean = 0.0;
        let mut second = 0.0;
        for row in &p {
            for (c, &prob) in row.iter().enumerate() {
                mean += c as f64 * prob;
                second += (c * c) as f64 * prob;
            }
        }
        let var = (second - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
fn stationary(transition: &Array2<f64>) -> Vec<f64> {
    let k = transition.nrows();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..500 {
        let mut next = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                next[j] += pi[i] * transition[[i, j]];
            }
        }
        normalize(&mut next);
        let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

/// Inverse-CDF categorical draw; `u` in `[0, 1)`.
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `spec.n_sequences` word sequences from the seeded generator.
/// Byte-identical across runs for a fixed spec.
pub fn generate_hmm_dataset(spec: &HmmSpec) -> Result<(Vec<Vec<usize>>, HmmGenerator), HarnessError> {
    if spec.seq_len == 0 {
        return Err(HarnessError::Config("seq_len must be positive".into()));
    }
    let gen = HmmGenerator::seeded(spec.num_states, spec.vocab, spec.seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        let (words, _states) = gen.sample(spec.seq_len, &mut rng);
        data.push(words);
    }
    Ok((data, gen))
}
