use crate::{GumbelNoiseStream, PerturbNoise, RelaxedPath, SampleError};
use crf_core::logspace::{argmax, softmax_tempered};
use crf_core::{viterbi, HardPath, PotentialTable};
use ndarray::Array2;

/// What to perturb in [`perturb_and_map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbOptions {
    /// Also add Gumbel noise to the shared transition table. Off by
    /// default: the transition factors are tied across positions, so their
    /// noise is reused `T-1` times per path and adds a second source of
    /// coupling on top of the per-position emission noise.
    pub perturb_transitions: bool,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        PerturbOptions {
            perturb_transitions: false,
        }
    }
}

/// Adds a pre-drawn noise block to the emission (and optionally transition)
/// log-factors, returning the perturbed table. `-inf` cells stay `-inf`:
/// forbidden configurations stay forbidden.
pub fn perturb_table(
    table: &PotentialTable,
    noise: &PerturbNoise,
) -> Result<PotentialTable, SampleError> {
    let (k, t_len) = (table.num_states(), table.seq_len());
    if noise.seq_len() != t_len || noise.num_states() != k {
        return Err(SampleError::DimensionMismatch(format!(
            "noise block is ({}, {}), table is ({t_len}, {k})",
            noise.seq_len(),
            noise.num_states()
        )));
    }
    let mut emis = table.log_emission().clone();
    for t in 0..t_len {
        let g = noise.emission_at(t);
        for j in 0..k {
            emis[[t, j]] += g[j];
        }
    }
    let mut trans = table.log_transition().clone();
    if let Some(rows) = noise.transition_rows() {
        if rows.len() != k {
            return Err(SampleError::DimensionMismatch(format!(
                "transition noise has {} rows, table has {k}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            for j in 0..k {
                trans[[i, j]] += row[j];
            }
        }
    }
    Ok(PotentialTable::new(trans, emis, table.log_initial().to_vec())?)
}

/// Perturb-and-MAP: add one Gumbel variate to each emission log-factor
/// (and each transition cell when enabled), then return the MAP path of the
/// perturbed table.
///
/// For a single position this is exactly Gumbel-max, hence exact. For
/// chains it is a *biased* sampler: a path's perturbation is the sum of its
/// factors' noise, and those sums are correlated across paths that share
/// factors. The bias is real and measurable — the diagnostics suite
/// quantifies it as total-variation distance against exact FFBS draws.
pub fn perturb_and_map(
    table: &PotentialTable,
    stream: &mut GumbelNoiseStream,
    opts: PerturbOptions,
) -> Result<HardPath, SampleError> {
    let noise = PerturbNoise::draw(
        stream,
        table.num_states(),
        table.seq_len(),
        opts.perturb_transitions,
    );
    let perturbed = perturb_table(table, &noise)?;
    Ok(viterbi(&perturbed)?)
}

/// Intermediate quantities of one [`relaxed_viterbi`] pass.
#[derive(Debug, Clone)]
pub struct RelaxedViterbiTrellis {
    /// `scores[t][i]`: best score of any prefix ending in state `i` at `t`
    /// (identical to the max-product recursion of hard Viterbi).
    pub scores: Array2<f64>,
    /// `soft_back[t - 1]` is the softened back-pointer matrix at position
    /// `t >= 1`: row `i` is a distribution over the predecessor state given
    /// the current state is `i`. Rows for unreachable states (score `-inf`)
    /// are all-zero placeholders; backtracking never consults them.
    pub soft_back: Vec<Array2<f64>>,
    pub tau: f64,
}

/// Differentiable surrogate of Viterbi decoding: the max recursion is kept
/// as-is, but backtracking distributes over predecessors with a tempered
/// softmax instead of argmax.
///
/// At position `T-1` the soft assignment is `softmax(scores / tau)`; walking
/// left, the soft assignment at `t` is the soft back-pointer row of the
/// *hard* state chosen at `t + 1`. The hard path (argmax of each soft row)
/// reproduces hard Viterbi exactly, including lowest-index tie-breaking.
/// Run it on a perturbed table to relax perturb-and-MAP.
pub fn relaxed_viterbi(
    table: &PotentialTable,
    tau: f64,
) -> Result<(RelaxedPath, RelaxedViterbiTrellis), SampleError> {
    if !(tau > 0.0) {
        return Err(SampleError::BadTemperature(tau));
    }
    let (k, t_len) = (table.num_states(), table.seq_len());
    let trans = table.log_transition();
    let emis = table.log_emission();

    let mut scores = Array2::zeros((t_len, k));
    for j in 0..k {
        scores[[0, j]] = table.log_initial()[j] + emis[[0, j]];
    }
    let mut soft_back = Vec::with_capacity(t_len.saturating_sub(1));
    let mut cand = vec![0.0; k];
    for t in 1..t_len {
        let mut back = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                cand[j] = scores[[t - 1, j]] + trans[[j, i]];
            }
            let best = argmax(&cand);
            scores[[t, i]] = cand[best] + emis[[t, i]];
            if cand[best] > f64::NEG_INFINITY {
                // The per-state emission is constant across predecessors and
                // softmax is shift-invariant, so it is omitted here.
                let row = softmax_tempered(&cand, tau);
                for (j, v) in row.into_iter().enumerate() {
                    back[[i, j]] = v;
                }
            }
        }
        soft_back.push(back);
    }

    let final_scores: Vec<f64> = scores.row(t_len - 1).to_vec();
    if final_scores.iter().all(|&s| s == f64::NEG_INFINITY) {
        return Err(SampleError::AllForbidden);
    }
    let mut hard = vec![0usize; t_len];
    let mut soft = Array2::zeros((t_len, k));
    let last_row = softmax_tempered(&final_scores, tau);
    hard[t_len - 1] = argmax(&last_row);
    for (j, v) in last_row.into_iter().enumerate() {
        soft[[t_len - 1, j]] = v;
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        let row: Vec<f64> = soft_back[t].row(hard[t + 1]).to_vec();
        hard[t] = argmax(&row);
        for (j, &v) in row.iter().enumerate() {
            soft[[t, j]] = v;
        }
    }
    Ok((
        RelaxedPath { hard, soft, tau },
        RelaxedViterbiTrellis {
            scores,
            soft_back,
            tau,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::FfbsNoise;
    use ndarray::array;

    const NINF: f64 = f64::NEG_INFINITY;

    fn table_3x4() -> PotentialTable {
        PotentialTable::new(
            array![[0.4, -0.2, 0.1], [-0.5, 0.3, 0.9], [0.0, 0.2, -0.7]],
            array![
                [0.2, -0.1, 0.4],
                [-0.3, 0.5, 0.1],
                [0.6, 0.0, -0.2],
                [0.1, 0.3, -0.4]
            ],
            vec![0.1, -0.2, 0.3],
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_perturbation_is_identity() {
        let table = table_3x4();
        let mut z = GumbelNoiseStream::zero();
        let noise = PerturbNoise::draw(&mut z, 3, 4, true);
        let same = perturb_table(&table, &noise).unwrap();
        assert_eq!(table, same);
        let map = perturb_and_map(&table, &mut GumbelNoiseStream::zero(), PerturbOptions::default())
            .unwrap();
        assert_eq!(map, viterbi(&table).unwrap());
    }

    #[test]
    fn perturbation_adds_noise_to_the_right_cells() {
        let table = table_3x4();
        let mut s = GumbelNoiseStream::seeded(21);
        let noise = PerturbNoise::draw(&mut s, 3, 4, false);
        let p = perturb_table(&table, &noise).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                let expected = table.log_emission()[[t, j]] + noise.emission_at(t)[j];
                assert_eq!(p.log_emission()[[t, j]], expected);
            }
        }
        assert_eq!(p.log_transition(), table.log_transition());
        assert_eq!(p.log_initial(), table.log_initial());
    }

    #[test]
    fn forbidden_cells_survive_perturbation() {
        let table = PotentialTable::new(
            array![[0.0, NINF], [0.0, 0.0]],
            array![[NINF, 0.0], [0.0, 0.0]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut s = GumbelNoiseStream::seeded(5);
        let noise = PerturbNoise::draw(&mut s, 2, 2, true);
        let p = perturb_table(&table, &noise).unwrap();
        assert_eq!(p.log_emission()[[0, 0]], NINF);
        assert_eq!(p.log_transition()[[0, 1]], NINF);
    }

    #[test]
    fn relaxed_viterbi_hard_path_matches_hard_viterbi() {
        // Seeded random-ish tables via perturbation of a base table.
        let base = table_3x4();
        let master = GumbelNoiseStream::seeded(31);
        for i in 0..100 {
            let noise = PerturbNoise::draw(&mut master.fork(i), 3, 4, true);
            let table = perturb_table(&base, &noise).unwrap();
            let hard = viterbi(&table).unwrap();
            for tau in [1.0, 0.1, 0.01] {
                let (relaxed, trellis) = relaxed_viterbi(&table, tau).unwrap();
                assert_eq!(relaxed.hard, hard, "instance {i}, tau {tau}");
                // The max recursion must agree with the total Viterbi score.
                let best: f64 = trellis
                    .scores
                    .row(3)
                    .iter()
                    .fold(NINF, |a, &b| a.max(b));
                let score = crf_core::path_score(&table, &hard).unwrap();
                assert!((best - score).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn relaxed_viterbi_rows_are_distributions_and_sharpen() {
        let table = table_3x4();
        let (warm, _) = relaxed_viterbi(&table, 1.0).unwrap();
        let (cold, _) = relaxed_viterbi(&table, 0.01).unwrap();
        for t in 0..4 {
            let s: f64 = warm.soft.row(t).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(cold.max_gap() < warm.max_gap());
        assert!(cold.max_gap() < 1e-3);
    }

    #[test]
    fn relaxed_viterbi_handles_unreachable_states() {
        // State 1 is unreachable from position 0 onward (forbidden initial
        // and no transitions into it).
        let table = PotentialTable::new(
            array![[0.3, NINF], [0.0, 0.0]],
            array![[0.1, 0.2], [0.0, 0.4], [0.2, 0.0]],
            vec![0.0, NINF],
        )
        .unwrap();
        let (relaxed, trellis) = relaxed_viterbi(&table, 0.5).unwrap();
        assert_eq!(relaxed.hard, viterbi(&table).unwrap());
        // Unreachable state rows are zero placeholders.
        for m in &trellis.soft_back {
            for i in 0..2 {
                let row_sum: f64 = m.row(i).sum();
                assert!(row_sum == 0.0 || (row_sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relaxed_viterbi_rejects_bad_temperature_and_dead_tables() {
        let table = table_3x4();
        assert!(matches!(
            relaxed_viterbi(&table, -1.0),
            Err(SampleError::BadTemperature(_))
        ));
        let dead = PotentialTable::new(array![[0.0]], array![[NINF]], vec![0.0]).unwrap();
        assert!(matches!(
            relaxed_viterbi(&dead, 0.5),
            Err(SampleError::AllForbidden)
        ));
    }

    #[test]
    fn pm_noise_reuse_differs_from_ffbs_fresh_noise() {
        // Not a statistical test — just pins the structural difference: PM
        // consumes T*K draws; FFBS consumes T*K draws too but conditions
        // sequentially, so under the same stream they generally produce
        // different paths.
        let table = table_3x4();
        let trellis = crf_core::forward(&table);
        let mut diff = 0;
        let master = GumbelNoiseStream::seeded(12);
        for i in 0..50 {
            let pm = perturb_and_map(&table, &mut master.fork(i), PerturbOptions::default())
                .unwrap();
            let noise = FfbsNoise::draw(&mut master.fork(i), 3, 4);
            let exact = crate::ffbs_with_noise(&table, &trellis, &noise).unwrap();
            if pm != exact {
                diff += 1;
            }
        }
        assert!(diff > 0);
    }
}
