//! Residual-driven enrichment of a multiscale space.
//!
//! The residual of a reduced solution `c^n` at time level `n` is the functional
//! `R(v) = ((c^{n-1} - c^n)/Δt, v) + (f^n, v) - a(c^n, v)`. Its restriction to a
//! neighborhood `D_i` is represented by `β_i ∈ H¹₀(D_i)` with `a(β_i, v) = R(v)`;
//! `‖R_i‖² = R(β_i)` and `‖R‖² = Σ_i ‖R_i‖²`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::assembly::{FineSystem, Trajectory};
use crate::error::{Error, Result};
use crate::gmsfem::{ReducedSpace, ReducedStepper, SparseColumn};
use crate::grid::{CoarseNeighborhood, TwoScaleMesh};
use crate::linalg::{BandedCholesky, CsrMatrix};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every enrichment step starts again from the stage-1 space.
    Reset,
    /// Functions added at earlier steps are kept.
    Accumulate,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset" => Ok(Strategy::Reset),
            "accumulate" => Ok(Strategy::Accumulate),
            _ => Err(Error::config(format!("unknown enrichment strategy '{s}' (expected reset or accumulate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentConfig {
    /// Selection fraction `θ ∈ [0, 1]`.
    pub theta: f64,
    /// Stop once `‖R‖ ≤ tol`.
    pub tol: f64,
    pub max_levels: usize,
    pub strategy: Strategy,
    /// Time levels (1-based) at which enrichment runs.
    pub steps: Vec<usize>,
    pub non_overlap: bool,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        EnrichmentConfig {
            theta: 1.0,
            tol: 1e-12,
            max_levels: 0,
            strategy: Strategy::Reset,
            steps: vec![1],
            non_overlap: false,
        }
    }
}

impl EnrichmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config(format!("enrichment.theta = {} must lie in [0, 1]", self.theta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config(format!("enrichment.tol = {} must be positive", self.tol)));
        }
        if self.steps.contains(&0) {
            return Err(Error::config("enrichment.steps are 1-based time levels"));
        }
        Ok(())
    }
}

/// Residual norms at one time level and enrichment level.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub step: usize,
    pub level: usize,
    /// `‖R‖`
    pub global: f64,
    /// `‖R_i‖` per neighborhood.
    pub local: Vec<f64>,
    #[serde(skip)]
    pub representatives: Vec<SparseColumn>,
}

impl ResidualReport {
    pub fn local_sq(&self) -> Vec<f64> {
        self.local.iter().map(|r| r * r).collect()
    }
}

/// Residual vector `r_j = R(γ_j)` over interior fine dofs.
pub fn residual_vector(
    system: &FineSystem,
    stiffness: &CsrMatrix,
    prev: &DVector<f64>,
    cur: &DVector<f64>,
    n: usize,
) -> DVector<f64> {
    let mut r = system.mass.mul_vec(&((prev - cur) / system.time.dt));
    r += system.loads.at(n);
    r -= stiffness.mul_vec(cur);
    r
}

/// Factored local Dirichlet operators `A_{II}` on every neighborhood.
#[derive(Debug, Clone)]
pub struct LocalResidualSolver {
    neighborhoods: Vec<CoarseNeighborhood>,
    factors: Vec<BandedCholesky>,
}

impl LocalResidualSolver {
    pub fn new(mesh: &TwoScaleMesh, stiffness: &CsrMatrix) -> Result<Self> {
        let neighborhoods = mesh.neighborhoods();
        let factors = par::try_map_indexed(neighborhoods.len(), |i| {
            BandedCholesky::factor(&stiffness.principal_submatrix(&neighborhoods[i].interior_dofs))
        })?;
        Ok(LocalResidualSolver { neighborhoods, factors })
    }

    pub fn neighborhoods(&self) -> &[CoarseNeighborhood] {
        &self.neighborhoods
    }

    /// `β_i` and `‖R_i‖² = R(β_i)` for residual vector `r`.
    pub fn representative(&self, i: usize, r: &DVector<f64>) -> (SparseColumn, f64) {
        let dofs = &self.neighborhoods[i].interior_dofs;
        let rl = DVector::from_iterator(dofs.len(), dofs.iter().map(|&d| r[d]));
        let beta = self.factors[i].solve(&rl);
        let norm_sq = beta.dot(&rl).max(0.0);
        (SparseColumn { dofs: dofs.clone(), values: beta.as_slice().to_vec() }, norm_sq)
    }

    pub fn report(&self, r: &DVector<f64>, step: usize, level: usize) -> ResidualReport {
        let parts = par::map_indexed(self.neighborhoods.len(), |i| self.representative(i, r));
        let local: Vec<f64> = parts.iter().map(|p| p.1.sqrt()).collect();
        let global = parts.iter().map(|p| p.1).sum::<f64>().sqrt();
        ResidualReport { step, level, global, local, representatives: parts.into_iter().map(|p| p.0).collect() }
    }
}

/// Neighborhoods to enrich: the shortest prefix of the squared residuals sorted
/// descending (ties by index) whose sum reaches `θ²‖R‖²`, returned in ascending
/// index order. With `overlap`, a candidate sharing a coarse element with an
/// already selected neighborhood is skipped.
pub fn select_neighborhoods(local_sq: &[f64], theta: f64, overlap: Option<&[CoarseNeighborhood]>) -> Vec<usize> {
    if theta <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..local_sq.len()).filter(|&i| local_sq[i] > 0.0).collect();
    order.sort_by(|&a, &b| local_sq[b].total_cmp(&local_sq[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| local_sq[i]).sum();
    let target = theta * theta * total;
    let mut picked: Vec<usize> = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        if acc >= target {
            break;
        }
        if let Some(nbs) = overlap {
            if picked.iter().any(|&p| nbs[p].overlaps(&nbs[i])) {
                continue;
            }
        }
        picked.push(i);
        acc += local_sq[i];
    }
    picked.sort_unstable();
    picked
}

/// Appends the representatives of `selection` to `space`.
pub fn enrich_space(space: &mut ReducedSpace, report: &ResidualReport, selection: &[usize]) {
    for &i in selection {
        space.push_enrichment(i, report.representatives[i].clone());
    }
}

/// One implicit-Euler step in `space` from the fine state `prev`.
pub fn reduced_step(
    system: &FineSystem,
    space: &ReducedSpace,
    stepper: &ReducedStepper,
    prev: &DVector<f64>,
    n: usize,
) -> DVector<f64> {
    let basis = &space.basis;
    let u = stepper.step(&basis.project(&system.mass.mul_vec(prev)), &basis.project(system.loads.at(n)));
    basis.expand(&u)
}

/// Reduced `M`-projection of the initial data onto `space`.
pub fn reduced_initial(system: &FineSystem, space: &ReducedSpace, stepper: &ReducedStepper) -> DVector<f64> {
    let basis = &space.basis;
    basis.expand(&stepper.project_initial(&basis.project(&system.initial_rhs)))
}

/// Residual of the reduced solution in `space` at time level `n`, without enrichment.
pub fn residual_at(system: &FineSystem, stiffness: &CsrMatrix, space: &ReducedSpace, n: usize) -> Result<ResidualReport> {
    if n == 0 || n > system.time.steps {
        return Err(Error::config(format!("time level {n} is outside 1..={}", system.time.steps)));
    }
    let local = LocalResidualSolver::new(&system.mesh, stiffness)?;
    let stepper = ReducedStepper::new(&space.basis, stiffness, &system.mass, system.time.dt)?;
    let mut prev = reduced_initial(system, space, &stepper);
    let mut cur = prev.clone();
    for k in 1..=n {
        prev = cur;
        cur = reduced_step(system, space, &stepper, &prev, k);
    }
    Ok(local.report(&residual_vector(system, stiffness, &prev, &cur, n), n, 0))
}

/// Result of [`enrich_trajectory`].
#[derive(Debug, Clone)]
pub struct EnrichmentOutcome {
    /// Space in use after the last enrichment step.
    pub space: ReducedSpace,
    pub trajectory: Trajectory,
    /// Every residual evaluation, in order.
    pub reports: Vec<ResidualReport>,
    /// Enrichment levels performed at each enrichment step.
    pub levels: Vec<(usize, usize)>,
}

/// Offline stage 2: time-steps in the multiscale space and enriches it at the
/// configured steps until `‖R‖ ≤ τ` or the level limit.
///
/// Steps outside `cfg.steps` keep the current space.
pub fn enrich_trajectory(
    system: &FineSystem,
    stiffness: &CsrMatrix,
    base: &ReducedSpace,
    cfg: &EnrichmentConfig,
) -> Result<EnrichmentOutcome> {
    cfg.validate()?;
    let local = LocalResidualSolver::new(&system.mesh, stiffness)?;
    let dt = system.time.dt;
    let mut space = base.clone();
    let mut stepper = ReducedStepper::new(&space.basis, stiffness, &system.mass, dt)?;
    let mut states = Vec::with_capacity(system.time.steps + 1);
    states.push(reduced_initial(system, &space, &stepper));
    let mut reports = Vec::new();
    let mut levels = Vec::new();
    for n in 1..=system.time.steps {
        let prev = states[n - 1].clone();
        if !cfg.steps.contains(&n) {
            states.push(reduced_step(system, &space, &stepper, &prev, n));
            continue;
        }
        if cfg.strategy == Strategy::Reset && space.dim() != base.dim() {
            space = base.clone();
            stepper = ReducedStepper::new(&space.basis, stiffness, &system.mass, dt)?;
        }
        let mut level = 0;
        let cur = loop {
            let cur = reduced_step(system, &space, &stepper, &prev, n);
            let report = local.report(&residual_vector(system, stiffness, &prev, &cur, n), n, level);
            let done = report.global <= cfg.tol;
            let capped = level >= cfg.max_levels;
            if done || capped {
                if !done && cfg.max_levels > 0 {
                    log::warn!(
                        "step {n}: {} enrichment levels left residual {:.3e} above tolerance {:.3e}",
                        level,
                        report.global,
                        cfg.tol
                    );
                }
                reports.push(report);
                break cur;
            }
            let overlap = cfg.non_overlap.then(|| local.neighborhoods());
            let sel = select_neighborhoods(&report.local_sq(), cfg.theta, overlap);
            if sel.is_empty() {
                reports.push(report);
                break cur;
            }
            enrich_space(&mut space, &report, &sel);
            reports.push(report);
            stepper = ReducedStepper::new(&space.basis, stiffness, &system.mass, dt)?;
            level += 1;
        };
        levels.push((n, level));
        states.push(cur);
    }
    Ok(EnrichmentOutcome { space, trajectory: Trajectory { time: system.time, states }, reports, levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_hand_profile() {
        // ‖R‖² = 14, θ² = 0.7 → 9 + 4 = 13 ≥ 9.8
        assert_eq!(select_neighborhoods(&[1.0, 9.0, 4.0], 0.7f64.sqrt(), None), vec![1, 2]);
        assert!(select_neighborhoods(&[1.0, 9.0, 4.0], 0.0, None).is_empty());
        assert_eq!(select_neighborhoods(&[1.0, 0.0, 9.0, 4.0], 1.0, None), vec![0, 2, 3]);
    }

    #[test]
    fn selection_ties_prefer_lower_index() {
        assert_eq!(select_neighborhoods(&[2.0, 2.0, 2.0], 0.5, None), vec![0]);
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("reset".parse::<Strategy>().unwrap(), Strategy::Reset);
        assert!("both".parse::<Strategy>().is_err());
    }
}
