//! The three-step GMsFEM-POD methods, sample ensembles, error metrics and run
//! artifacts.
//!
//! Step 1 builds the multiscale space on the mean field `κ̄`. Step 2 solves in that
//! space for every training sample and stacks the reduced trajectories into a
//! snapshot bank. Step 3 compresses the bank by POD and solves every evaluation
//! sample in the POD space. Reference solutions are fine solves per sample.
//!
//! Errors are relative: `e_a(t) = ‖u_h − u‖_a / ‖u_h‖_a` with the sample's own
//! energy norm, and `e_{L²}(t)` likewise in `L²`. They are reported for
//! `t = Δt, 2Δt, …, T`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use crate::assembly::{
    energy_norm, estimate_poincare_q, l2_norm, FineSystem, PermeabilityField, SpaceTimeFunction, TimeGrid, Trajectory,
};
use crate::config::{BasisCounts, FieldSource, RunConfig, Selection};
use crate::enrichment::{enrich_trajectory, residual_at, ResidualReport};
use crate::error::{Error, Result};
use crate::gmsfem::{
    assemble_multiscale_space, solve_coarse_coefficients, solve_coarse_trajectory, uniform_counts, OfflineData,
    ReducedSpace,
};
use crate::linalg::CsrMatrix;
use crate::par;
use crate::pod::{build_snapshot_bank_in_frame, compute_pod, export_pod, solve_pod_trajectory, PodSpace};
use crate::randfield::{build_kle, ingest_field, synth_high_contrast, KleModel};

pub const ERRORS_SCHEMA: &str = "msrom-errors v1";
pub const STATS_SCHEMA: &str = "msrom-stats v1";
pub const RUN_SCHEMA: &str = "msrom-run v1";

pub const STEP_FINE: &str = "fine";
pub const STEP1: &str = "step1";
pub const STEP2: &str = "step2";
pub const STEP3: &str = "step3";

/// Error curves of one sample at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    pub step: String,
    /// `mean` for the mean field, the sample index otherwise.
    pub sample_id: String,
    pub times: Vec<f64>,
    pub e_a: Vec<f64>,
    pub e_l2: Vec<f64>,
}

/// Relative energy and `L²` errors of `approx` against `reference` at
/// `n = 1..N_t`. A zero reference norm gives NaN and a warning.
pub fn compute_errors(
    approx: &Trajectory,
    reference: &Trajectory,
    stiffness: &CsrMatrix,
    mass: &CsrMatrix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if approx.time != reference.time || approx.len() != reference.len() {
        return Err(Error::config("error evaluation needs trajectories on the same time grid"));
    }
    let mut e_a = Vec::with_capacity(reference.len());
    let mut e_l2 = Vec::with_capacity(reference.len());
    let mut warned = false;
    for n in 1..reference.len() {
        let r = &reference.states[n];
        let d = r - &approx.states[n];
        let (ra, rl) = (energy_norm(stiffness, r), l2_norm(mass, r));
        if (ra == 0.0 || rl == 0.0) && !warned {
            log::warn!("reference solution vanishes at t = {}; relative error undefined", reference.time.t(n));
            warned = true;
        }
        e_a.push(if ra == 0.0 { f64::NAN } else { energy_norm(stiffness, &d) / ra });
        e_l2.push(if rl == 0.0 { f64::NAN } else { l2_norm(mass, &d) / rl });
    }
    Ok((e_a, e_l2))
}

fn series(step: &str, sample_id: String, time: &TimeGrid, errs: (Vec<f64>, Vec<f64>)) -> ErrorSeries {
    ErrorSeries { step: step.into(), sample_id, times: (1..=time.steps).map(|n| time.t(n)).collect(), e_a: errs.0, e_l2: errs.1 }
}

/// Sample mean and unbiased sample variance; one value has variance 0.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// One row of `stats.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub t: f64,
    pub step: String,
    pub mean_ea: f64,
    pub var_ea: f64,
    pub mean_el2: f64,
    pub var_el2: f64,
}

/// Pointwise-in-time mean and variance per step, steps in order of appearance.
pub fn ensemble_stats(all: &[ErrorSeries]) -> Result<Vec<StatsRow>> {
    let mut steps: Vec<&str> = Vec::new();
    for s in all {
        if !steps.contains(&s.step.as_str()) {
            steps.push(&s.step);
        }
    }
    let mut rows = Vec::new();
    for step in steps {
        let group: Vec<&ErrorSeries> = all.iter().filter(|s| s.step == step).collect();
        let times = &group[0].times;
        if group.iter().any(|s| s.times != *times || s.e_a.len() != times.len() || s.e_l2.len() != times.len()) {
            return Err(Error::Format(format!("samples of {step} do not share a time grid")));
        }
        for (k, &t) in times.iter().enumerate() {
            let (mean_ea, var_ea) = mean_variance(&group.iter().map(|s| s.e_a[k]).collect::<Vec<_>>());
            let (mean_el2, var_el2) = mean_variance(&group.iter().map(|s| s.e_l2[k]).collect::<Vec<_>>());
            rows.push(StatsRow { t, step: step.to_string(), mean_ea, var_ea, mean_el2, var_el2 });
        }
    }
    Ok(rows)
}

/// Mean over the samples of `step` of the final-time energy error.
pub fn final_mean_energy_error(all: &[ErrorSeries], step: &str) -> Option<f64> {
    let last: Vec<f64> = all.iter().filter(|s| s.step == step).filter_map(|s| s.e_a.last().copied()).collect();
    (!last.is_empty()).then(|| mean_variance(&last).0)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

pub fn write_errors_csv<W: Write>(w: W, all: &[ErrorSeries]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "sample_id", "t", "e_a", "e_l2"]).map_err(csv_err)?;
    for s in all {
        for k in 0..s.times.len() {
            wr.write_record([
                s.step.clone(),
                s.sample_id.clone(),
                s.times[k].to_string(),
                s.e_a[k].to_string(),
                s.e_l2[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads `errors.csv`; consecutive rows with equal `(step, sample_id)` form one series.
pub fn read_errors_csv<R: std::io::Read>(r: R) -> Result<Vec<ErrorSeries>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["step", "sample_id", "t", "e_a", "e_l2"] {
        return Err(Error::Format("errors.csv header must be step,sample_id,t,e_a,e_l2".into()));
    }
    let mut out: Vec<ErrorSeries> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| {
            rec[k].trim().parse::<f64>().map_err(|_| Error::Format(format!("errors.csv row {}: bad number '{}'", line + 2, &rec[k])))
        };
        let (t, ea, el) = (num(2)?, num(3)?, num(4)?);
        match out.last_mut() {
            Some(s) if s.step == rec[0] && s.sample_id == rec[1] => {
                s.times.push(t);
                s.e_a.push(ea);
                s.e_l2.push(el);
            }
            _ => out.push(ErrorSeries {
                step: rec[0].to_string(),
                sample_id: rec[1].to_string(),
                times: vec![t],
                e_a: vec![ea],
                e_l2: vec![el],
            }),
        }
    }
    Ok(out)
}

pub fn write_stats_csv<W: Write>(w: W, rows: &[StatsRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "step", "mean_ea", "var_ea", "mean_el2", "var_el2"]).map_err(csv_err)?;
    for r in rows {
        wr.write_record([
            r.t.to_string(),
            r.step.clone(),
            r.mean_ea.to_string(),
            r.var_ea.to_string(),
            r.mean_el2.to_string(),
            r.var_el2.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// `κ̄` from the field section of the config.
pub fn mean_field(cfg: &RunConfig) -> Result<PermeabilityField> {
    let (nx, ny) = (cfg.mesh.nx, cfg.mesh.ny);
    match cfg.field.source {
        FieldSource::Synth => synth_high_contrast(nx, ny, cfg.field.contrast, cfg.field.seed),
        FieldSource::Constant => PermeabilityField::new(nx, ny, vec![cfg.field.value; nx * ny]),
        FieldSource::Raster => {
            let path = cfg.field.path.as_ref().ok_or_else(|| Error::config("field.path is required for a raster field"))?;
            ingest_field(path, nx, ny)
        }
    }
}

/// KLE of `ln κ` around `ln κ̄`.
pub fn build_model(cfg: &RunConfig, mean: &PermeabilityField) -> Result<KleModel> {
    let domain = cfg.build_mesh()?.domain;
    let mean_log = mean.values().iter().map(|v| v.ln()).collect();
    build_kle(cfg.mesh.nx, cfg.mesh.ny, domain, mean_log, cfg.kle.covariance(), &cfg.kle.truncation())
}

/// Greedy farthest-point order in `L∞` distance, starting from index 0; ties go
/// to the lower index.
pub fn farthest_point_selection(pool: &[PermeabilityField], count: usize) -> Vec<usize> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut picked = vec![0];
    let mut dist: Vec<f64> = pool.iter().map(|f| f.linf_distance(&pool[0])).collect();
    while picked.len() < count.min(pool.len()) {
        let mut best = None;
        for (i, &d) in dist.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("unpicked candidate");
        picked.push(i);
        for (k, f) in pool.iter().enumerate() {
            dist[k] = dist[k].min(f.linf_distance(&pool[i]));
        }
    }
    picked
}

/// Mean field, fine system and the sample ensembles of one run.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub system: FineSystem,
    pub mean: PermeabilityField,
    pub model: KleModel,
    /// Stream indices of the training draws under `train_seed`.
    pub train_ids: Vec<usize>,
    pub train: Vec<PermeabilityField>,
    /// Evaluation draws use streams `0..eval` under `eval_seed`.
    pub eval: Vec<PermeabilityField>,
}

impl Ensemble {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.build_mesh()?;
        let time = TimeGrid::new(cfg.time.dt, cfg.time.t_final)?;
        let source = SpaceTimeFunction::parse(&cfg.problem.source)?;
        let initial = SpaceTimeFunction::parse(&cfg.problem.initial)?;
        let system = FineSystem::new(mesh, &source, &initial, time, cfg.solver.settings());
        let mean = mean_field(cfg)?;
        let model = build_model(cfg, &mean)?;
        let s = &cfg.samples;
        let (train_ids, train) = match s.selection {
            Selection::Iid => {
                let fields = par::try_map_indexed(s.train, |i| model.sample(s.train_seed, i as u64))?;
                ((0..s.train).collect(), fields)
            }
            Selection::Farthest => {
                let pool_size = s.candidates.unwrap_or(4 * s.train).max(s.train);
                let pool = par::try_map_indexed(pool_size, |i| model.sample(s.train_seed, i as u64))?;
                let ids = farthest_point_selection(&pool, s.train);
                let fields = ids.iter().map(|&i| pool[i].clone()).collect();
                (ids, fields)
            }
        };
        let eval = par::try_map_indexed(s.eval, |i| model.sample(s.eval_seed, i as u64))?;
        Ok(Ensemble { system, mean, model, train_ids, train, eval })
    }
}

/// Residual norms recorded while enriching.
#[derive(Debug, Clone, Serialize)]
pub struct EnrichmentTrace {
    pub round: usize,
    /// Training sample driving the round; `None` for the mean field.
    pub sample: Option<usize>,
    pub step: usize,
    pub level: usize,
    pub residual: f64,
}

/// Method-2 round: candidate residuals and the argmax.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub levels: usize,
    pub candidate_residuals: Vec<f64>,
    pub selected: usize,
    pub selected_residual: f64,
}

/// Output of Step 1.
#[derive(Debug, Clone)]
pub struct StepOne {
    pub space: ReducedSpace,
    pub mean_stiffness: CsrMatrix,
    pub error: ErrorSeries,
    pub trace: Vec<EnrichmentTrace>,
    pub rounds: Vec<RoundRecord>,
}

fn trace_of(reports: &[ResidualReport], round: usize, sample: Option<usize>) -> Vec<EnrichmentTrace> {
    reports
        .iter()
        .map(|r| EnrichmentTrace { round, sample, step: r.step, level: r.level, residual: r.global })
        .collect()
}

fn stage_one_base(ens: &Ensemble, counts: &BasisCounts) -> Result<ReducedSpace> {
    let offline = OfflineData::build(&ens.system.mesh, &ens.mean)?;
    assemble_multiscale_space(&offline, &uniform_counts(offline.num_neighborhoods(), counts.spectral))
}

fn mean_field_error(ens: &Ensemble, a_mean: &CsrMatrix, space: &ReducedSpace) -> Result<ErrorSeries> {
    let fine = ens.system.solve_fine(a_mean)?;
    let coarse = solve_coarse_trajectory(&space.basis, a_mean, &ens.system)?;
    let errs = compute_errors(&coarse, &fine, a_mean, &ens.system.mass)?;
    Ok(series(STEP1, "mean".into(), &ens.system.time, errs))
}

/// Step 1 of method 1: spectral space and enrichment, both on `κ̄`.
pub fn step_one_method1(ens: &Ensemble, cfg: &RunConfig) -> Result<StepOne> {
    let counts = cfg.counts()?;
    let a_mean = ens.system.stiffness(&ens.mean)?;
    let base = stage_one_base(ens, &counts)?;
    let (space, trace) = if counts.total_levels() > 0 {
        let out = enrich_trajectory(&ens.system, &a_mean, &base, &cfg.enrichment.with_levels(counts.total_levels()))?;
        (out.space, trace_of(&out.reports, 1, None))
    } else {
        (base, Vec::new())
    };
    let error = mean_field_error(ens, &a_mean, &space)?;
    Ok(StepOne { space, mean_stiffness: a_mean, error, trace, rounds: Vec::new() })
}

/// Step 1 of method 2: spectral space on `κ̄`, then one enrichment round per entry
/// of the count list, each driven by the training sample with the largest global
/// residual in the current space at the first enrichment step. The reported
/// mean-field error is that of the spectral space, before any enrichment.
pub fn step_one_method2(ens: &Ensemble, cfg: &RunConfig) -> Result<StepOne> {
    let counts = cfg.counts()?;
    let a_mean = ens.system.stiffness(&ens.mean)?;
    let mut space = stage_one_base(ens, &counts)?;
    let error = mean_field_error(ens, &a_mean, &space)?;
    let probe = cfg.enrichment.steps.iter().copied().min().unwrap_or(1);
    let stiff = par::try_map_indexed(ens.train.len(), |i| ens.system.stiffness(&ens.train[i]))?;
    let mut trace = Vec::new();
    let mut rounds = Vec::new();
    for (k, &levels) in counts.rounds.iter().enumerate() {
        let residuals: Vec<f64> = par::try_map_indexed(stiff.len(), |i| {
            residual_at(&ens.system, &stiff[i], &space, probe).map(|r| r.global)
        })?;
        let mut p = 0;
        for (i, &r) in residuals.iter().enumerate() {
            if r > residuals[p] {
                p = i;
            }
        }
        let out = enrich_trajectory(&ens.system, &stiff[p], &space, &cfg.enrichment.with_levels(levels))?;
        trace.extend(trace_of(&out.reports, k + 1, Some(ens.train_ids[p])));
        rounds.push(RoundRecord {
            round: k + 1,
            levels,
            selected: ens.train_ids[p],
            selected_residual: residuals[p],
            candidate_residuals: residuals,
        });
        space = out.space;
    }
    Ok(StepOne { space, mean_stiffness: a_mean, error, trace, rounds })
}

/// Step-2 reduced trajectories of the training samples, their bank and POD.
#[derive(Debug, Clone)]
pub struct StepTwo {
    pub coefficients: Vec<Vec<DVector<f64>>>,
    /// Poincaré constants per training sample; the bank uses the maximum.
    pub q_samples: Vec<f64>,
    pub pod: PodSpace,
}

/// Builds the bank over the training samples in `space` and its POD of size `l`
/// in the energy inner product of `κ̄`.
pub fn step_two_training(ens: &Ensemble, one: &StepOne, l: usize) -> Result<StepTwo> {
    let sys = &ens.system;
    let work = par::try_map_indexed(ens.train.len(), |i| {
        let a = sys.stiffness(&ens.train[i])?;
        let c = solve_coarse_coefficients(&one.space.basis, &a, sys)?;
        let q = estimate_poincare_q(&a, &sys.mass, &sys.settings)?;
        Ok::<_, Error>((c, q))
    })?;
    let (coefficients, q_samples): (Vec<_>, Vec<_>) = work.into_iter().unzip();
    let q = q_samples.iter().copied().fold(0.0, f64::max);
    let views: Vec<(usize, &[DVector<f64>])> =
        coefficients.iter().enumerate().map(|(i, c)| (ens.train_ids[i], &c[..])).collect();
    let bank = build_snapshot_bank_in_frame(&views, &one.space.basis, sys.time.dt, q)?;
    let pod = compute_pod(&bank, &one.mean_stiffness, l)?;
    Ok(StepTwo { coefficients, q_samples, pod })
}

/// Per-sample Step-2 and Step-3 errors on the evaluation ensemble.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub step2: Vec<ErrorSeries>,
    /// One list per POD space, in input order.
    pub step3: Vec<Vec<ErrorSeries>>,
}

/// Fine reference, multiscale solve in `space` (when given) and POD solves for
/// every evaluation sample.
pub fn evaluate(ens: &Ensemble, space: Option<&ReducedSpace>, pods: &[&PodSpace]) -> Result<Evaluation> {
    let sys = &ens.system;
    let per = par::try_map_indexed(ens.eval.len(), |i| {
        let a = sys.stiffness(&ens.eval[i])?;
        let fine = sys.solve_fine(&a)?;
        let s2 = match space {
            Some(v) => {
                let ms = solve_coarse_trajectory(&v.basis, &a, sys)?;
                Some(series(STEP2, i.to_string(), &sys.time, compute_errors(&ms, &fine, &a, &sys.mass)?))
            }
            None => None,
        };
        let s3 = pods
            .iter()
            .map(|pod| {
                let p = solve_pod_trajectory(pod, &a, sys)?;
                Ok(series(STEP3, i.to_string(), &sys.time, compute_errors(&p, &fine, &a, &sys.mass)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>((s2, s3))
    })?;
    let mut step2 = Vec::new();
    let mut step3 = vec![Vec::new(); pods.len()];
    for (s2, s3) in per {
        step2.extend(s2);
        for (k, s) in s3.into_iter().enumerate() {
            step3[k].push(s);
        }
    }
    Ok(Evaluation { step2, step3 })
}

#[derive(Debug, Clone, Serialize)]
pub struct Dimensions {
    pub fine_dofs: usize,
    pub neighborhoods: usize,
    pub spectral_per_neighborhood: Option<usize>,
    pub multiscale_dim: Option<usize>,
    pub enriched: Option<usize>,
    pub kle_modes: usize,
    pub kle_energy_captured: f64,
    pub pod_l: Option<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub schema: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub artifacts: BTreeMap<String, String>,
    pub dimensions: Dimensions,
    /// `min_i λ^{(i)}_{l_i+1}` of the spectral space.
    pub lambda: Option<f64>,
    pub train_ids: Vec<usize>,
    pub q: Option<f64>,
    pub q_samples: Vec<f64>,
    pub pod_eigenvalues: Vec<f64>,
    /// `Σ_{p>l} λ_p`
    pub pod_tail: Option<f64>,
    pub enrichment: Vec<EnrichmentTrace>,
    pub rounds: Vec<RoundRecord>,
    pub timings_s: BTreeMap<String, f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub errors: Vec<ErrorSeries>,
    pub stats: Vec<StatsRow>,
    pub info: RunInfo,
    pub pod: Option<PodSpace>,
}

impl RunOutput {
    /// Writes `errors.csv`, `stats.csv`, `run.json` and, when present, the POD basis
    /// as `pod.bin` / `pod.json`.
    pub fn write(&self, dir: &Path, mesh: &crate::grid::TwoScaleMesh) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_errors_csv(std::fs::File::create(dir.join("errors.csv"))?, &self.errors)?;
        write_stats_csv(std::fs::File::create(dir.join("stats.csv"))?, &self.stats)?;
        let json = serde_json::to_string_pretty(&self.info).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("run.json"), json + "\n")?;
        if let Some(pod) = &self.pod {
            export_pod(dir, "pod", pod, mesh)?;
        }
        Ok(())
    }
}

fn artifact_list(pod: bool) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("errors.csv".into(), ERRORS_SCHEMA.into());
    m.insert("stats.csv".into(), STATS_SCHEMA.into());
    m.insert("run.json".into(), RUN_SCHEMA.into());
    if pod {
        m.insert("pod.bin".into(), crate::randfield::RASTER_MAGIC.into());
        m.insert("pod.json".into(), "msrom-pod v1".into());
    }
    m
}

fn base_info(command: &str, cfg: &RunConfig, ens: &Ensemble) -> RunInfo {
    RunInfo {
        schema: RUN_SCHEMA,
        command: command.into(),
        config: cfg.clone(),
        artifacts: artifact_list(false),
        dimensions: Dimensions {
            fine_dofs: ens.system.mesh.num_dofs(),
            neighborhoods: ens.system.mesh.num_interior_coarse_nodes(),
            spectral_per_neighborhood: None,
            multiscale_dim: None,
            enriched: None,
            kle_modes: ens.model.num_modes(),
            kle_energy_captured: ens.model.captured_energy(),
            pod_l: None,
            train_samples: ens.train.len(),
            eval_samples: ens.eval.len(),
        },
        lambda: None,
        train_ids: ens.train_ids.clone(),
        q: None,
        q_samples: Vec::new(),
        pod_eigenvalues: Vec::new(),
        pod_tail: None,
        enrichment: Vec::new(),
        rounds: Vec::new(),
        timings_s: BTreeMap::new(),
    }
}

fn record_space(info: &mut RunInfo, one: &StepOne, counts: &BasisCounts) {
    info.dimensions.spectral_per_neighborhood = Some(counts.spectral);
    info.dimensions.multiscale_dim = Some(one.space.dim());
    info.dimensions.enriched = Some(one.space.enriched.iter().sum());
    info.lambda = one.space.lambda;
    info.enrichment = one.trace.clone();
    info.rounds = one.rounds.clone();
}

fn finish(errors: Vec<ErrorSeries>, info: RunInfo, pod: Option<PodSpace>) -> Result<RunOutput> {
    let stats = ensemble_stats(&errors)?;
    Ok(RunOutput { errors, stats, info, pod })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    One,
    Two,
}

fn run_method(cfg: &RunConfig, method: Method) -> Result<RunOutput> {
    let start = Instant::now();
    let ens = Ensemble::prepare(cfg)?;
    let counts = cfg.counts()?;
    let mut info = base_info(if method == Method::One { "run method1" } else { "run method2" }, cfg, &ens);
    info.timings_s.insert("setup".into(), start.elapsed().as_secs_f64());

    let t = Instant::now();
    let one = match method {
        Method::One => step_one_method1(&ens, cfg),
        Method::Two => step_one_method2(&ens, cfg),
    }
    .map_err(|e| stage("step 1", e))?;
    record_space(&mut info, &one, &counts);
    info.timings_s.insert("step1".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let two = step_two_training(&ens, &one, cfg.pod.l).map_err(|e| stage("step 2", e))?;
    info.timings_s.insert("step2_training".into(), t.elapsed().as_secs_f64());
    info.q = Some(two.pod.q);
    info.q_samples = two.q_samples.clone();
    info.pod_eigenvalues = two.pod.eigenvalues.clone();
    info.pod_tail = Some(two.pod.tail());
    info.dimensions.pod_l = Some(two.pod.l());
    info.artifacts = artifact_list(true);

    let t = Instant::now();
    let ev = evaluate(&ens, Some(&one.space), &[&two.pod]).map_err(|e| stage("evaluation", e))?;
    info.timings_s.insert("evaluation".into(), t.elapsed().as_secs_f64());
    info.timings_s.insert("total".into(), start.elapsed().as_secs_f64());

    let mut errors = vec![one.error];
    errors.extend(ev.step2);
    errors.extend(ev.step3.into_iter().flatten());
    finish(errors, info, Some(two.pod))
}

fn stage(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{name}: {m}")),
        Error::Format(m) => Error::Format(format!("{name}: {m}")),
        Error::NoConvergence { iterations, residual } => {
            Error::Numerical(format!("{name}: solver did not converge after {iterations} iterations (residual {residual:.3e})"))
        }
        other => other,
    }
}

/// GMsFEM-POD method 1.
pub fn run_method1(cfg: &RunConfig) -> Result<RunOutput> {
    par::with_workers(cfg.solver.workers, || run_method(cfg, Method::One))?
}

/// GMsFEM-POD method 2 (hierarchical, sample-driven enrichment).
pub fn run_method2(cfg: &RunConfig) -> Result<RunOutput> {
    par::with_workers(cfg.solver.workers, || run_method(cfg, Method::Two))?
}

/// Fine solves of the evaluation samples checked against themselves.
pub fn run_fine(cfg: &RunConfig) -> Result<RunOutput> {
    par::with_workers(cfg.solver.workers, || {
        let start = Instant::now();
        let ens = Ensemble::prepare(cfg)?;
        let mut info = base_info("run fine", cfg, &ens);
        let sys = &ens.system;
        let errors = par::try_map_indexed(ens.eval.len(), |i| {
            let a = sys.stiffness(&ens.eval[i])?;
            let fine = sys.solve_fine(&a)?;
            Ok::<_, Error>(series(STEP_FINE, i.to_string(), &sys.time, compute_errors(&fine, &fine, &a, &sys.mass)?))
        })?;
        info.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
        finish(errors, info, None)
    })?
}

/// Step 1 of method 1 followed by multiscale solves of the evaluation samples,
/// without POD.
pub fn run_gmsfem(cfg: &RunConfig) -> Result<RunOutput> {
    par::with_workers(cfg.solver.workers, || {
        let start = Instant::now();
        let ens = Ensemble::prepare(cfg)?;
        let counts = cfg.counts()?;
        let mut info = base_info("run gmsfem", cfg, &ens);
        let one = step_one_method1(&ens, cfg).map_err(|e| stage("step 1", e))?;
        record_space(&mut info, &one, &counts);
        let ev = evaluate(&ens, Some(&one.space), &[]).map_err(|e| stage("evaluation", e))?;
        info.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
        let mut errors = vec![one.error];
        errors.extend(ev.step2);
        finish(errors, info, None)
    })?
}

/// Recomputes `stats.csv` from an existing `errors.csv`.
pub fn report(errors_csv: &Path, stats_csv: &Path) -> Result<Vec<StatsRow>> {
    let errors = read_errors_csv(std::fs::File::open(errors_csv)?)?;
    let stats = ensemble_stats(&errors)?;
    write_stats_csv(std::fs::File::create(stats_csv)?, &stats)?;
    Ok(stats)
}
