//! The `crfkit sample` command: draw a handful of paths from a potential
//! table and show the exact, relaxed and perturbed samplers side by side.
//!
//! Each draw shares one noise block between the exact sampler and the
//! relaxed one, so the printout makes the coupling visible: the relaxed
//! hard path always equals the exact draw, and the soft rows concentrate
//! on it as the temperature falls.

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::registry::find;
use crf_core::{forward, viterbi, PotentialTable};
use std::fmt::Write as _;
use structured_sampling::{
    ffbs_with_noise, gumbelized_ffbs_with_noise, perturb_table, relaxed_viterbi, FfbsNoise,
    GumbelNoiseStream, PerturbNoise,
};

/// Fork namespace for the sample command: draw `d` uses
/// `master.fork(SAMPLE_STREAM_BASE + d)`.
pub const SAMPLE_STREAM_BASE: u64 = 10 << 8;

fn path_string(path: &[usize]) -> String {
    path.iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Resolves the table to sample from: an explicit JSON file wins over a
/// golden-instance name.
fn resolve_table(cfg: &ExperimentConfig) -> Result<(PotentialTable, String), HarnessError> {
    if let Some(path) = &cfg.sample.table {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path.clone(), e))?;
        let table = PotentialTable::from_json(&text)?;
        return Ok((table, format!("table file {}", path.display())));
    }
    let name = cfg.sample.instance.as_deref().ok_or_else(|| {
        HarnessError::Config("sample needs either a table file or an instance name".into())
    })?;
    let g = find(name).ok_or_else(|| HarnessError::UnknownInstance(name.to_string()))?;
    Ok((g.table()?, format!("golden instance {name}")))
}

/// Renders the full report. Deterministic for a fixed configuration: the
/// same seed yields byte-identical output.
pub fn run_sample(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let (table, source) = resolve_table(cfg)?;
    let (k, t_len) = (table.num_states(), table.seq_len());
    let tau = cfg.sample.tau;
    let trellis = forward(&table);
    let map = viterbi(&table)?;
    let master = GumbelNoiseStream::seeded(cfg.seed);

    let mut out = String::new();
    let _ = writeln!(out, "source      : {source}");
    let _ = writeln!(out, "shape       : {k} states x {t_len} positions");
    let _ = writeln!(out, "log Z       : {:.4}", trellis.log_z);
    let _ = writeln!(out, "map path    : {}", path_string(&map));
    let _ = writeln!(out, "temperature : {tau:.4}");

    for d in 0..cfg.sample.draws {
        let base = master.fork(SAMPLE_STREAM_BASE + d as u64);

        // One noise block, two samplers: the coupling is the point.
        let mut ffbs_stream = base.fork(0);
        let noise = FfbsNoise::draw(&mut ffbs_stream, k, t_len);
        let hard = ffbs_with_noise(&table, &trellis, &noise)?;
        let relaxed = gumbelized_ffbs_with_noise(&table, &trellis, tau, &noise)?;

        let mut perturb_stream = base.fork(1);
        let pm_noise = PerturbNoise::draw(&mut perturb_stream, k, t_len, false);
        let perturbed = perturb_table(&table, &pm_noise)?;
        let pm_hard = viterbi(&perturbed)?;
        let (pm_relaxed, _) = relaxed_viterbi(&perturbed, tau)?;

        let _ = writeln!(out, "draw {d}");
        let _ = writeln!(out, "  ffbs hard     : {}", path_string(&hard));
        let _ = writeln!(
            out,
            "  relaxed hard  : {}  (coupled {}, max gap {:.4})",
            path_string(&relaxed.hard),
            if relaxed.hard == hard { "yes" } else { "NO" },
            relaxed.max_gap()
        );
        for (t, row) in relaxed.soft.rows().into_iter().enumerate() {
            let cells = row
                .iter()
                .map(|p| format!("{p:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(out, "  soft row t={t}  : {cells}");
        }
        let _ = writeln!(
            out,
            "  pm hard       : {}  (relaxed agrees {}, max gap {:.4})",
            path_string(&pm_hard),
            if pm_relaxed.hard == pm_hard { "yes" } else { "NO" },
            pm_relaxed.max_gap()
        );
    }

    Ok(out)
}
