//! Run configuration: a TOML file with a strict schema, overrides of the form
//! `section.key=value`, defaults and validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::enrichment::{EnrichmentConfig, Strategy};
use crate::error::{Error, Result};
use crate::grid::{Domain, TwoScaleMesh};
use crate::linalg::SolverSettings;
use crate::randfield::{CovarianceSpec, Truncation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    #[serde(rename = "NX")]
    pub coarse_nx: usize,
    #[serde(rename = "NY")]
    pub coarse_ny: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { lx: 1.0, ly: 1.0, nx: 40, ny: 40, coarse_nx: 8, coarse_ny: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_final: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { dt: 0.01, t_final: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    /// Source `f`: `zero`, `const:<v>`, `sine`, `manufactured`.
    pub source: String,
    /// Initial data `g`, same selectors.
    pub initial: String,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { source: "const:1".into(), initial: "zero".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldSource {
    Synth,
    Constant,
    Raster,
}

/// The mean permeability `κ̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub source: FieldSource,
    pub contrast: f64,
    pub seed: u64,
    pub value: f64,
    pub path: Option<PathBuf>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { source: FieldSource::Synth, contrast: 1e4, seed: 0, value: 1.0, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KleConfig {
    pub sigma2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub energy: f64,
    pub max_modes: usize,
    pub modes: Option<usize>,
}

impl Default for KleConfig {
    fn default() -> Self {
        KleConfig { sigma2: 1.0, eta1: 0.1, eta2: 0.1, energy: 0.95, max_modes: 100, modes: None }
    }
}

impl KleConfig {
    pub fn covariance(&self) -> CovarianceSpec {
        CovarianceSpec { sigma2: self.sigma2, eta1: self.eta1, eta2: self.eta2 }
    }

    pub fn truncation(&self) -> Truncation {
        Truncation { energy: self.energy, max_modes: self.max_modes, modes: self.modes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// `"A+B"` or `"A+B₁+B₂+…"`.
    pub counts: String,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { counts: "2+3".into() }
    }
}

/// Parsed `"A+B₁+…"`: spectral functions per neighborhood and enrichment levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BasisCounts {
    pub spectral: usize,
    /// Enrichment rounds with their level counts; zero entries dropped.
    pub rounds: Vec<usize>,
}

impl BasisCounts {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('+')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::config(format!("basis.counts: bad count list '{s}'"))))
            .collect::<Result<_>>()?;
        let spectral = parts[0];
        if spectral == 0 {
            return Err(Error::config("basis.counts: at least one spectral function per neighborhood is required"));
        }
        Ok(BasisCounts { spectral, rounds: parts[1..].iter().copied().filter(|&b| b > 0).collect() })
    }

    pub fn total_levels(&self) -> usize {
        self.rounds.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichmentSection {
    pub theta: f64,
    pub tol: f64,
    pub strategy: Strategy,
    pub steps: Vec<usize>,
    pub non_overlap: bool,
}

impl Default for EnrichmentSection {
    fn default() -> Self {
        let d = EnrichmentConfig::default();
        EnrichmentSection { theta: d.theta, tol: d.tol, strategy: d.strategy, steps: d.steps, non_overlap: d.non_overlap }
    }
}

impl EnrichmentSection {
    pub fn with_levels(&self, max_levels: usize) -> EnrichmentConfig {
        EnrichmentConfig {
            theta: self.theta,
            tol: self.tol,
            max_levels,
            strategy: self.strategy,
            steps: self.steps.clone(),
            non_overlap: self.non_overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodConfig {
    pub l: usize,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig { l: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Iid,
    Farthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplesConfig {
    pub train: usize,
    pub eval: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub selection: Selection,
    /// Pool size for farthest-point selection and the method-2 candidate count.
    pub candidates: Option<usize>,
    pub allow_shared_seeds: bool,
}

impl Default for SamplesConfig {
    fn default() -> Self {
        SamplesConfig {
            train: 10,
            eval: 100,
            train_seed: 1,
            eval_seed: 2,
            selection: Selection::Iid,
            candidates: None,
            allow_shared_seeds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub direct_max_dofs: usize,
    pub rtol: f64,
    pub max_iter: usize,
    /// Worker threads; logical cores when absent.
    pub workers: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig { direct_max_dofs: s.direct_max_dofs, rtol: s.rtol, max_iter: s.max_iter, workers: None }
    }
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings { direct_max_dofs: self.direct_max_dofs, rtol: self.rtol, max_iter: self.max_iter }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub problem: ProblemConfig,
    pub field: FieldConfig,
    pub kle: KleConfig,
    pub basis: BasisConfig,
    pub enrichment: EnrichmentSection,
    pub pod: PodConfig,
    pub samples: SamplesConfig,
    pub solver: SolverConfig,
}

impl RunConfig {
    pub fn build_mesh(&self) -> Result<TwoScaleMesh> {
        let m = &self.mesh;
        TwoScaleMesh::new(Domain { lx: m.lx, ly: m.ly }, m.nx, m.ny, m.coarse_nx, m.coarse_ny)
    }

    pub fn counts(&self) -> Result<BasisCounts> {
        BasisCounts::parse(&self.basis.counts)
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<()> {
        self.build_mesh()?;
        crate::assembly::TimeGrid::new(self.time.dt, self.time.t_final)?;
        crate::assembly::SpaceTimeFunction::parse(&self.problem.source)?;
        crate::assembly::SpaceTimeFunction::parse(&self.problem.initial)?;
        self.counts()?;
        self.enrichment.with_levels(0).validate()?;
        if self.enrichment.steps.iter().any(|&s| s as f64 * self.time.dt > self.time.t_final * (1.0 + 1e-12)) {
            return Err(Error::config("enrichment.steps lie beyond the final time"));
        }
        self.kle.covariance().validate()?;
        match self.field.source {
            FieldSource::Synth if !(self.field.contrast >= 1.0) => {
                return Err(Error::config("field.contrast must be >= 1"));
            }
            FieldSource::Constant if !(self.field.value > 0.0) => {
                return Err(Error::config("field.value must be positive"));
            }
            FieldSource::Raster if self.field.path.is_none() => {
                return Err(Error::config("field.path is required for a raster field"));
            }
            _ => {}
        }
        if self.pod.l == 0 {
            return Err(Error::config("pod.l must be positive"));
        }
        if self.samples.train == 0 || self.samples.eval == 0 {
            return Err(Error::config("samples.train and samples.eval must be positive"));
        }
        if self.samples.train_seed == self.samples.eval_seed && !self.samples.allow_shared_seeds {
            return Err(Error::config(
                "samples.train_seed equals samples.eval_seed; set samples.allow_shared_seeds = true to allow it",
            ));
        }
        if self.solver.workers == Some(0) {
            return Err(Error::config("solver.workers must be positive"));
        }
        if !(self.solver.rtol > 0.0) {
            return Err(Error::config("solver.rtol must be positive"));
        }
        Ok(())
    }
}

/// Sets `path = value` in a TOML table; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not of the form key.path=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override key '{path}'")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::config(format!("override '{path}': '{k}' is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses TOML text, applies overrides in order, fills defaults and validates.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {}", e.message())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Error::config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&std::path::Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str("[mesh]\nnx = 20\nny = 20\nNX = 4\nNY = 4\n[field]\nsource = \"constant\"\n", &[]).unwrap();
        assert_eq!(c.time.dt, 0.01);
        assert_eq!(c.time.t_final, 1.0);
        assert_eq!(c.problem.source, "const:1");
        assert_eq!(c.problem.initial, "zero");
        assert_eq!(c.pod.l, 20);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = parse_config_str("[mesh]\nnz = 3\n", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("nz"), "{e}");
        assert!(parse_config_str("[meshes]\n", &[]).is_err());
    }

    #[test]
    fn divisibility_error() {
        let e = parse_config_str("[mesh]\nnx = 100\nNX = 7\n", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("divisible"));
    }

    #[test]
    fn overrides_apply() {
        let c = parse_config_str("[pod]\nl = 20\n", &["pod.l=10".into(), "enrichment.strategy=accumulate".into()]).unwrap();
        assert_eq!(c.pod.l, 10);
        assert_eq!(c.enrichment.strategy, Strategy::Accumulate);
        assert!(parse_config_str("", &["pod.l".into()]).is_err());
        assert!(parse_config_str("", &["pod.l=ten".into()]).is_err());
    }

    #[test]
    fn shared_seeds_need_opt_in() {
        assert!(parse_config_str("[samples]\ntrain_seed = 3\neval_seed = 3\n", &[]).is_err());
        parse_config_str("[samples]\ntrain_seed = 3\neval_seed = 3\nallow_shared_seeds = true\n", &[]).unwrap();
    }

    #[test]
    fn counts_parse() {
        assert_eq!(BasisCounts::parse("2+3").unwrap(), BasisCounts { spectral: 2, rounds: vec![3] });
        assert_eq!(BasisCounts::parse("5+0").unwrap(), BasisCounts { spectral: 5, rounds: vec![] });
        assert_eq!(BasisCounts::parse("2+0+1+1+1").unwrap().rounds, vec![1, 1, 1]);
        assert!(BasisCounts::parse("0+3").is_err());
        assert!(BasisCounts::parse("2+x").is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(parse_config_str(&to_toml(&c), &[]).unwrap(), c);
    }
}
