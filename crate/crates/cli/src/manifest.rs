//! Experiment manifests: one TOML file with a block per command. Every key
//! is optional and falls back to the protocol defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tamewave::mechanism::{linear_grid, DEFAULT_BANDWIDTH, DEFAULT_KAPPA_STEP};
use tamewave::metrics::PhaseThresholds;
use tamewave::EpisodeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Output directory; the command line and environment take precedence.
    pub output_dir: Option<PathBuf>,
    /// Worker threads; all cores when unset.
    pub jobs: Option<usize>,
    pub thresholds: PhaseThresholds,
    pub episode: EpisodeConfig,
    pub tadaki_scan: ScanBlock,
    pub sweep: SweepBlock,
    pub frontier: FrontierBlock,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            output_dir: None,
            jobs: None,
            thresholds: PhaseThresholds::default(),
            episode: EpisodeConfig::default(),
            tadaki_scan: ScanBlock::default(),
            sweep: SweepBlock::default(),
            frontier: FrontierBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanBlock {
    pub n_min: usize,
    pub n_max: usize,
    pub seeds_per_n: usize,
}

impl Default for ScanBlock {
    fn default() -> Self {
        ScanBlock {
            n_min: 10,
            n_max: 40,
            seeds_per_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub cav_count: usize,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub kappa_step: f64,
    /// Explicit κ values; replaces the min/max/step range when present.
    pub kappas: Option<Vec<f64>>,
    pub seeds: usize,
    pub bandwidth: f64,
    /// Resolution of the κ* search on the fitted curves.
    pub search_step: f64,
    /// Weights for the κ* report.
    pub omegas: Vec<f64>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            cav_count: 1,
            kappa_min: 1.0,
            kappa_max: 8.0,
            kappa_step: 0.1,
            kappas: None,
            seeds: 20,
            bandwidth: DEFAULT_BANDWIDTH,
            search_step: DEFAULT_KAPPA_STEP,
            omegas: vec![0.0, 0.5, 0.95],
        }
    }
}

impl SweepBlock {
    pub fn kappa_grid(&self) -> Result<Vec<f64>> {
        let grid = match &self.kappas {
            Some(k) => k.clone(),
            None => linear_grid(self.kappa_min, self.kappa_max, self.kappa_step)?,
        };
        if grid.is_empty() {
            bail!("configuration error: κ grid is empty");
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierBlock {
    pub omegas: Vec<f64>,
    /// Summary written by an earlier `sweep`; the sweep block is run inline
    /// when unset.
    pub sweep_summary: Option<PathBuf>,
    /// Noise seeds of the uncontrolled baseline at the same N.
    pub baseline_seeds: usize,
}

impl Default for FrontierBlock {
    fn default() -> Self {
        FrontierBlock {
            omegas: (0..20).map(|i| i as f64 * 0.05).map(|w| (w * 1e9).round() / 1e9).collect(),
            sweep_summary: None,
            baseline_seeds: 20,
        }
    }
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<toml::Table> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        text.parse::<toml::Table>()
            .with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        Ok(ExperimentManifest::deserialize(toml::Value::Table(table)).context("invalid manifest")?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// `count` consecutive noise seeds starting at the episode's seed.
    pub fn seeds(&self, count: usize) -> Vec<u64> {
        (0..count as u64).map(|k| self.episode.noise_seed + k).collect()
    }

    /// SHA-256 over the manifest without its output location and worker
    /// count, which do not affect results. First 16 hex digits.
    pub fn digest(&self) -> Result<String> {
        let stripped = ExperimentManifest {
            output_dir: None,
            jobs: None,
            ..self.clone()
        };
        let hash = Sha256::digest(stripped.to_toml()?.as_bytes());
        Ok(hex::encode(&hash[..8]))
    }
}

/// Applies `key.path=value` to a raw manifest table. The value is parsed as
/// a TOML value, falling back to a plain string.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let m = ExperimentManifest::default();
        let text = m.to_toml().unwrap();
        let back = ExperimentManifest::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn edited_manifest_round_trips() {
        let mut m = ExperimentManifest::default();
        m.output_dir = Some("runs/a".into());
        m.jobs = Some(3);
        m.episode.noise_seed = 7;
        m.episode = m.episode.clone().with_n(28).without_kick().with_cavs(vec![1, 15], 6.1);
        m.episode.measure_window = (600.0, 1000.0);
        m.sweep.kappas = Some(vec![5.0, 5.5]);
        m.frontier.sweep_summary = Some("s.csv".into());
        let text = m.to_toml().unwrap();
        let back = ExperimentManifest::from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_file_gives_protocol_defaults() {
        let m = ExperimentManifest::from_table(toml::Table::new()).unwrap();
        assert_eq!(m.episode.circumference, 314.0);
        assert_eq!(m.episode.steps, 3000);
        assert_eq!(m.episode.measure_window, (200.0, 1000.0));
        assert!(m.episode.kick.enabled);
        assert_eq!(m.episode.cav_on_time, 50.0);
        assert_eq!(m.episode.agent.lambda, 200.0);
        assert_eq!(m.episode.agent.grid_points, 41);
        assert_eq!(m.sweep.search_step, 0.01);
        assert_eq!(m.frontier.omegas.len(), 20);
        assert_eq!(*m.frontier.omegas.last().unwrap(), 0.95);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let t: toml::Table = "[sweep]\nkappa_mn = 2.0\n".parse().unwrap();
        assert!(ExperimentManifest::from_table(t).is_err());
    }

    #[test]
    fn set_overrides_nested_keys() {
        let mut t = toml::Table::new();
        apply_set(&mut t, "episode.n=28").unwrap();
        apply_set(&mut t, "episode.kick.enabled=false").unwrap();
        apply_set(&mut t, "sweep.omegas=[0.0, 1.0]").unwrap();
        apply_set(&mut t, "frontier.sweep_summary=out/sweep.csv").unwrap();
        let m = ExperimentManifest::from_table(t).unwrap();
        assert_eq!(m.episode.n, 28);
        assert!(!m.episode.kick.enabled);
        assert_eq!(m.sweep.omegas, vec![0.0, 1.0]);
        assert_eq!(m.frontier.sweep_summary, Some("out/sweep.csv".into()));
        assert!(apply_set(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn digest_ignores_placement_only() {
        let a = ExperimentManifest::default();
        let b = ExperimentManifest {
            jobs: Some(4),
            output_dir: Some("x".into()),
            ..a.clone()
        };
        let mut c = a.clone();
        c.episode.noise_seed = 1;
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 16);
    }

    #[test]
    fn empty_kappa_list_is_an_error() {
        let s = SweepBlock {
            kappas: Some(vec![]),
            ..SweepBlock::default()
        };
        assert!(s.kappa_grid().is_err());
    }
}
