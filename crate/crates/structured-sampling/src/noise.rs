use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Uniform draws are clamped into this closed interval before the double
/// logarithm, bounding Gumbel samples to roughly [-3.3, 27.6].
const UNIFORM_CLAMP: f64 = 1e-12;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a decorrelated child seed from `(base, index)`. Used by
/// [`GumbelNoiseStream::fork`] so per-sample streams depend only on the
/// master seed and the sample index, never on draw order — parallel and
/// sequential execution see identical noise.
pub fn derived_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

#[derive(Debug, Clone)]
enum StreamKind {
    Seeded(ChaCha12Rng),
    /// Emits 0 forever: relaxations collapse to their noiseless versions.
    Zero,
}

/// A seeded stream of standard Gumbel variates `g = -ln(-ln u)`.
///
/// The stream remembers the seed it was built from, so any consumer can
/// derive reproducible child streams with [`GumbelNoiseStream::fork`].
#[derive(Debug, Clone)]
pub struct GumbelNoiseStream {
    seed: u64,
    kind: StreamKind,
}

impl GumbelNoiseStream {
    pub fn seeded(seed: u64) -> Self {
        GumbelNoiseStream {
            seed,
            kind: StreamKind::Seeded(ChaCha12Rng::seed_from_u64(seed)),
        }
    }

    /// The all-zeros stream; useful for turning a perturbed computation into
    /// its deterministic skeleton.
    pub fn zero() -> Self {
        GumbelNoiseStream {
            seed: 0,
            kind: StreamKind::Zero,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, StreamKind::Zero)
    }

    /// Child stream number `index`. Forking depends only on the original
    /// seed, not on how much of this stream has been consumed. Forking the
    /// zero stream yields the zero stream.
    pub fn fork(&self, index: u64) -> Self {
        match self.kind {
            StreamKind::Zero => GumbelNoiseStream::zero(),
            StreamKind::Seeded(_) => GumbelNoiseStream::seeded(derived_seed(self.seed, index)),
        }
    }

    pub fn next_gumbel(&mut self) -> f64 {
        match &mut self.kind {
            StreamKind::Zero => 0.0,
            StreamKind::Seeded(rng) => {
                // 53 uniform bits in [0, 1), clamped away from both endpoints
                // so neither logarithm can blow up.
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
                -(-u.ln()).ln()
            }
        }
    }

    pub fn gumbel_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gumbel()).collect()
    }
}

/// Pre-drawn noise for one (Gumbelized) FFBS pass: one Gumbel vector per
/// position, indexed by time.
///
/// The draw order is part of the determinism contract: vectors are drawn in
/// the order the backward sampler consumes them — position `T-1` first, then
/// `T-2`, down to 0 — and stored by time index. Both the exact and the
/// relaxed sampler consume the same block, which is what makes their hard
/// paths coincide under a shared stream.
#[derive(Debug, Clone)]
pub struct FfbsNoise {
    by_time: Vec<Vec<f64>>,
}

impl FfbsNoise {
    pub fn draw(stream: &mut GumbelNoiseStream, num_states: usize, seq_len: usize) -> Self {
        let mut by_time = vec![Vec::new(); seq_len];
        for t in (0..seq_len).rev() {
            by_time[t] = stream.gumbel_vec(num_states);
        }
        FfbsNoise { by_time }
    }

    pub fn seq_len(&self) -> usize {
        self.by_time.len()
    }

    pub fn num_states(&self) -> usize {
        self.by_time.first().map(Vec::len).unwrap_or(0)
    }

    /// Noise vector consumed at position `t`.
    pub fn at(&self, t: usize) -> &[f64] {
        &self.by_time[t]
    }
}

/// Pre-drawn noise for one perturb-and-MAP pass.
///
/// Layout contract: `T` emission vectors drawn front to back (one per
/// position, `K` values each), then — only if transition perturbation is
/// enabled — `K` transition rows. Emission-only is the default; the
/// transition table is shared across positions, so perturbing it injects a
/// single noise variable per edge type rather than per step.
#[derive(Debug, Clone)]
pub struct PerturbNoise {
    emission: Vec<Vec<f64>>,
    transition: Option<Vec<Vec<f64>>>,
}

impl PerturbNoise {
    pub fn draw(
        stream: &mut GumbelNoiseStream,
        num_states: usize,
        seq_len: usize,
        perturb_transitions: bool,
    ) -> Self {
        let emission = (0..seq_len).map(|_| stream.gumbel_vec(num_states)).collect();
        let transition = perturb_transitions
            .then(|| (0..num_states).map(|_| stream.gumbel_vec(num_states)).collect());
        PerturbNoise {
            emission,
            transition,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.emission.len()
    }

    pub fn num_states(&self) -> usize {
        self.emission.first().map(Vec::len).unwrap_or(0)
    }

    /// Emission noise for position `t`.
    pub fn emission_at(&self, t: usize) -> &[f64] {
        &self.emission[t]
    }

    /// Transition noise rows, if drawn.
    pub fn transition_rows(&self) -> Option<&[Vec<f64>]> {
        self.transition.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = GumbelNoiseStream::seeded(42);
        let mut b = GumbelNoiseStream::seeded(42);
        for _ in 0..100 {
            assert_eq!(a.next_gumbel().to_bits(), b.next_gumbel().to_bits());
        }
        let mut c = GumbelNoiseStream::seeded(43);
        let different = (0..100).any(|_| a.next_gumbel() != c.next_gumbel());
        assert!(different);
    }

    #[test]
    fn fork_is_insensitive_to_consumption() {
        let mut a = GumbelNoiseStream::seeded(7);
        let fork_before = a.fork(3);
        a.gumbel_vec(50);
        let fork_after = a.fork(3);
        assert_eq!(fork_before.seed(), fork_after.seed());
        let mut x = fork_before;
        let mut y = fork_after;
        for _ in 0..20 {
            assert_eq!(x.next_gumbel().to_bits(), y.next_gumbel().to_bits());
        }
    }

    #[test]
    fn forks_with_different_indices_decorrelate() {
        let a = GumbelNoiseStream::seeded(7);
        let seeds: Vec<u64> = (0..64).map(|i| a.fork(i).seed()).collect();
        let mut dedup = seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), seeds.len(), "fork seeds must be distinct");
    }

    #[test]
    fn zero_stream_emits_zeros_and_forks_to_zero() {
        let mut z = GumbelNoiseStream::zero();
        assert!(z.is_zero());
        assert_eq!(z.gumbel_vec(5), vec![0.0; 5]);
        assert!(z.fork(9).is_zero());
    }

    #[test]
    fn gumbel_variates_have_expected_moments() {
        // Mean of a standard Gumbel is the Euler-Mascheroni constant
        // (~0.5772), variance pi^2/6 (~1.645). 1e5 draws put the sample mean
        // within ~0.013 at 3 sigma.
        let mut s = GumbelNoiseStream::seeded(2024);
        let n = 100_000;
        let draws = s.gumbel_vec(n);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.5772).abs() < 0.013, "sample mean {mean}");
        assert!((var - 1.6449).abs() < 0.08, "sample variance {var}");
    }

    #[test]
    fn ffbs_noise_draws_back_to_front_but_indexes_by_time() {
        let mut direct = GumbelNoiseStream::seeded(5);
        let first = direct.gumbel_vec(3);
        let second = direct.gumbel_vec(3);
        let mut stream = GumbelNoiseStream::seeded(5);
        let noise = FfbsNoise::draw(&mut stream, 3, 2);
        // First drawn vector belongs to the last position.
        assert_eq!(noise.at(1), first.as_slice());
        assert_eq!(noise.at(0), second.as_slice());
    }

    #[test]
    fn perturb_noise_draws_emissions_first_then_transitions() {
        let mut direct = GumbelNoiseStream::seeded(11);
        let e0 = direct.gumbel_vec(2);
        let e1 = direct.gumbel_vec(2);
        let t0 = direct.gumbel_vec(2);
        let t1 = direct.gumbel_vec(2);

        let mut stream = GumbelNoiseStream::seeded(11);
        let noise = PerturbNoise::draw(&mut stream, 2, 2, true);
        assert_eq!(noise.emission_at(0), e0.as_slice());
        assert_eq!(noise.emission_at(1), e1.as_slice());
        let rows = noise.transition_rows().unwrap();
        assert_eq!(rows[0], t0);
        assert_eq!(rows[1], t1);

        let mut stream2 = GumbelNoiseStream::seeded(11);
        let no_trans = PerturbNoise::draw(&mut stream2, 2, 2, false);
        assert!(no_trans.transition_rows().is_none());
        // Emission block is identical whether or not transitions follow.
        assert_eq!(no_trans.emission_at(1), e1.as_slice());
    }
}
