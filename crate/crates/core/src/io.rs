//! Delimited-text tables. Every file starts with `# key: value` comment
//! lines (at least the producing manifest digest) followed by a header row.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mechanism::{
    ControlPolicy, DensityRow, Improvement, PhaseBoundaries, ResponseCurves, SeedRun, SweepCell, SweepResult,
};
use crate::metrics::{EpisodeStats, Phase};
use crate::scenario::TrajectoryRecord;

/// Comment key carrying the manifest digest.
pub const DIGEST_KEY: &str = "manifest-digest";

fn table<W: Write>(mut w: W, digest: &str, header: &[&str]) -> Result<csv::Writer<W>> {
    writeln!(w, "# {DIGEST_KEY}: {digest}")?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

/// One row per vehicle and recorded step (the state a step starts from and
/// the action applied in it). Vehicles are numbered from 1.
pub fn write_trajectory<W: Write>(record: &TrajectoryRecord, digest: &str, w: W) -> Result<()> {
    let mut out = table(
        w,
        digest,
        &["step", "time_s", "vehicle", "x_m", "v_mps", "a_mps2", "u_applied"],
    )?;
    let dt = record.config.dt;
    for s in &record.steps {
        for (i, (k, u)) in s.states.iter().zip(&s.applied).enumerate() {
            out.serialize((s.t, s.t as f64 * dt, i + 1, k.x, k.v, k.a, u))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_stats<W: Write>(stats: &EpisodeStats, n: usize, digest: &str, w: W) -> Result<()> {
    let mut out = table(
        w,
        digest,
        &["n", "density", "flow", "V_bar", "R_bar", "phase", "collisions", "samples"],
    )?;
    out.serialize((
        n,
        stats.density,
        stats.flow,
        stats.v_bar,
        stats.r_bar,
        stats.phase.to_string(),
        stats.collision_count,
        stats.samples,
    ))?;
    out.flush()?;
    Ok(())
}

pub fn write_density_table<W: Write>(rows: &[DensityRow], digest: &str, w: W) -> Result<()> {
    let mut out = table(
        w,
        digest,
        &["n", "density", "V_bar", "R_bar", "flow", "jammed_runs", "runs", "collisions"],
    )?;
    for r in rows {
        out.serialize((r.n, r.density, r.v_mean, r.r_mean, r.flow, r.jammed_runs, r.runs, r.collisions))?;
    }
    out.flush()?;
    Ok(())
}

/// One row per (κ, seed), ordered by κ then seed.
pub fn write_sweep_summary<W: Write>(sweep: &SweepResult, digest: &str, w: W) -> Result<()> {
    let mut out = table(w, digest, &["kappa", "seed", "V_bar", "R_bar", "phase", "collisions"])?;
    for c in &sweep.cells {
        for r in &c.runs {
            out.serialize((
                c.kappa,
                r.seed,
                r.stats.v_bar,
                r.stats.r_bar,
                r.stats.phase.to_string(),
                r.stats.collision_count,
            ))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct SummaryRow {
    kappa: f64,
    seed: u64,
    #[serde(rename = "V_bar")]
    v_bar: f64,
    #[serde(rename = "R_bar")]
    r_bar: f64,
    phase: String,
    collisions: usize,
}

/// Reads a sweep summary back. Density and flow are rebuilt from `n` and
/// `circumference`; sample counts are not stored and read as 0.
pub fn read_sweep_summary<R: Read>(r: R, n: usize, cav_count: usize, circumference: f64) -> Result<SweepResult> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let density = n as f64 / circumference;
    let mut cells: Vec<(f64, Vec<SeedRun>)> = Vec::new();
    for row in rd.deserialize() {
        let row: SummaryRow = row?;
        let stats = EpisodeStats {
            v_bar: row.v_bar,
            r_bar: row.r_bar,
            density,
            flow: density * row.v_bar,
            phase: row.phase.parse::<Phase>()?,
            collision_count: row.collisions,
            samples: 0,
        };
        let run = SeedRun { seed: row.seed, stats };
        match cells.last_mut() {
            Some((k, runs)) if *k == row.kappa => runs.push(run),
            _ => cells.push((row.kappa, vec![run])),
        }
    }
    if cells.is_empty() {
        return Err(Error::Data("sweep summary has no rows".into()));
    }
    let cells = cells
        .into_iter()
        .map(|(k, runs)| SweepCell::new(k, runs))
        .collect::<Result<Vec<_>>>()?;
    SweepResult::new(n, cav_count, cells)
}

/// Per-κ aggregates of a sweep.
pub fn write_sweep_cells<W: Write>(sweep: &SweepResult, digest: &str, w: W) -> Result<()> {
    let mut out = table(
        w,
        digest,
        &["kappa", "V_mean", "V_std", "R_mean", "R_std", "count", "collisions"],
    )?;
    for c in &sweep.cells {
        out.serialize((c.kappa, c.v_mean, c.v_std, c.r_mean, c.r_std, c.count(), c.collisions()))?;
    }
    out.flush()?;
    Ok(())
}

/// Fitted curves sampled every `step` across their domain.
pub fn write_curves<W: Write>(curves: &ResponseCurves, step: f64, digest: &str, w: W) -> Result<()> {
    let mut out = table(w, digest, &["kappa", "V_fit", "R_fit"])?;
    for k in curves.grid(step) {
        out.serialize((k, curves.v_bar(k)?, curves.r_bar(k)?))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_frontier<W: Write>(policies: &[ControlPolicy], digest: &str, w: W) -> Result<()> {
    let mut out = table(w, digest, &["omega", "kappa_star", "V_bar", "R_bar"])?;
    for p in policies {
        out.serialize((p.omega, p.kappa_star, p.v_bar, p.r_bar))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_boundaries<W: Write>(b: &PhaseBoundaries, digest: &str, w: W) -> Result<()> {
    let mut out = table(w, digest, &["kappa_low", "kappa_high"])?;
    out.serialize((b.kappa_low, b.kappa_high))?;
    out.flush()?;
    Ok(())
}

pub fn write_improvements<W: Write>(
    rows: &[(ControlPolicy, Improvement)],
    baseline: &EpisodeStats,
    digest: &str,
    w: W,
) -> Result<()> {
    let mut out = table(
        w,
        digest,
        &[
            "omega",
            "kappa_star",
            "V_bar",
            "R_bar",
            "baseline_V_bar",
            "baseline_R_bar",
            "V_change_pct",
            "R_change_pct",
        ],
    )?;
    for (p, imp) in rows {
        out.serialize((
            p.omega,
            p.kappa_star,
            p.v_bar,
            p.r_bar,
            baseline.v_bar,
            baseline.r_bar,
            imp.v_pct,
            imp.r_pct,
        ))?;
    }
    out.flush()?;
    Ok(())
}

/// Value of the `# manifest-digest:` comment, if present.
pub fn read_digest(text: &str) -> Option<&str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(&format!("# {DIGEST_KEY}: ")[..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PhaseThresholds;
    use crate::scenario::{run_episode, EpisodeConfig};

    fn text(buf: Vec<u8>) -> String {
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn trajectory_smoke() {
        let mut cfg = EpisodeConfig::default().with_n(2);
        cfg.steps = 3;
        let rec = run_episode(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&rec, "abc123", &mut buf).unwrap();
        let s = text(buf);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# manifest-digest: abc123");
        assert_eq!(lines[1], "step,time_s,vehicle,x_m,v_mps,a_mps2,u_applied");
        assert_eq!(lines.len(), 2 + 6);
        assert!(lines[2].starts_with("0,0.0,1,0.0,0.0,0.0,"));
        assert_eq!(read_digest(&s), Some("abc123"));
    }

    fn sample_sweep() -> SweepResult {
        let th = PhaseThresholds::default();
        let mk = |v: f64, r: f64| EpisodeStats {
            v_bar: v,
            r_bar: r,
            density: 30.0 / 314.0,
            flow: 30.0 / 314.0 * v,
            phase: crate::metrics::classify_phase(v, r, Some(2.0), &th),
            collision_count: 0,
            samples: 0,
        };
        let cells = [2.0, 2.5]
            .iter()
            .map(|&k| {
                SweepCell::new(
                    k,
                    vec![
                        SeedRun { seed: 0, stats: mk(k, 1.0 / k) },
                        SeedRun { seed: 1, stats: mk(k + 0.1, 8.0) },
                    ],
                )
                .unwrap()
            })
            .collect();
        SweepResult::new(30, 1, cells).unwrap()
    }

    #[test]
    fn sweep_summary_round_trips() {
        let sweep = sample_sweep();
        let mut buf = Vec::new();
        write_sweep_summary(&sweep, "d", &mut buf).unwrap();
        let s = text(buf.clone());
        assert_eq!(s.lines().nth(1), Some("kappa,seed,V_bar,R_bar,phase,collisions"));
        assert_eq!(s.lines().count(), 2 + 4);
        let back = read_sweep_summary(&buf[..], 30, 1, 314.0).unwrap();
        assert_eq!(back, sweep);
    }

    #[test]
    fn empty_summary_is_rejected() {
        let buf = b"# manifest-digest: d\nkappa,seed,V_bar,R_bar,phase,collisions\n";
        assert!(read_sweep_summary(&buf[..], 30, 1, 314.0).is_err());
    }

    #[test]
    fn frontier_columns() {
        let p = ControlPolicy {
            omega: 0.5,
            kappa_star: 6.25,
            v_bar: 6.0,
            r_bar: 2.5,
            n: 30,
            cav_count: 1,
        };
        let mut buf = Vec::new();
        write_frontier(&[p, p], "d", &mut buf).unwrap();
        let s = text(buf);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1], "omega,kappa_star,V_bar,R_bar");
        assert_eq!(lines[2], "0.5,6.25,6.0,2.5");
        assert_eq!(lines.len(), 4);
    }
}
