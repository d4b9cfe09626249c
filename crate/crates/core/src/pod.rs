//! Solution snapshot bank, energy-weighted POD and reduced online solves.
//!
//! The POD modes are the dominant eigenfunctions of
//! `(Y₁Y₁ᵀ + Q² Y₂Y₂ᵀ) A φ = λ φ`. With `Z = [Y₁ | Q Y₂]` and any factor `R` with
//! `RᵀR = A` on the span of `Z`, these are `φ = Z v / σ` for the singular triplets of
//! `R Z`, and `λ = σ²`. Working with `R Z` instead of `ZᵀAZ` keeps small eigenvalues
//! accurate to machine precision relative to `λ₁` instead of its square root.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::assembly::{FineSystem, Trajectory};
use crate::error::{Error, Result};
use crate::gmsfem::{BasisMatrix, ReducedStepper};
use crate::grid::TwoScaleMesh;
use crate::linalg::{symmetric_eigen_ascending, BandedCholesky, CsrMatrix};
use crate::randfield::{write_raster, RasterRecord};

/// States `c^j` and difference quotients `(c^j - c^{j-1})/Δt`, `j = 1..n`, of a set
/// of trajectories.
#[derive(Debug, Clone)]
pub struct SnapshotBank {
    /// `Y₁`, one column per state, in the coordinates of `frame`.
    pub states: DMatrix<f64>,
    /// `Y₂`
    pub quotients: DMatrix<f64>,
    /// Columns are coefficients in this basis when set, fine-dof vectors otherwise.
    pub frame: Option<BasisMatrix>,
    pub steps_per_trajectory: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub dt: f64,
    pub q: f64,
}

impl SnapshotBank {
    pub fn num_columns(&self) -> usize {
        self.states.ncols()
    }

    fn to_fine(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.frame {
            Some(b) => b.expand(v),
            None => v.clone(),
        }
    }

    pub fn fine_state(&self, j: usize) -> DVector<f64> {
        self.to_fine(&self.states.column(j).into_owned())
    }

    pub fn fine_quotient(&self, j: usize) -> DVector<f64> {
        self.to_fine(&self.quotients.column(j).into_owned())
    }
}

fn stack(trajectories: &[(usize, &[DVector<f64>])], dt: f64, q: f64, frame: Option<BasisMatrix>) -> Result<SnapshotBank> {
    if !(q >= 0.0) {
        return Err(Error::config(format!("Poincaré weight Q = {q} must be nonnegative")));
    }
    let rows = trajectories.first().map_or(0, |t| t.1[0].len());
    let steps: Vec<usize> = trajectories.iter().map(|t| t.1.len() - 1).collect();
    if steps.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config("trajectories in a snapshot bank must share a time grid"));
    }
    let total: usize = steps.iter().sum();
    let mut states = DMatrix::zeros(rows, total);
    let mut quotients = DMatrix::zeros(rows, total);
    let mut col = 0;
    for (_, tr) in trajectories {
        for j in 1..tr.len() {
            if tr[j].len() != rows {
                return Err(Error::config("trajectories in a snapshot bank must share a space"));
            }
            states.set_column(col, &tr[j]);
            quotients.set_column(col, &((&tr[j] - &tr[j - 1]) / dt));
            col += 1;
        }
    }
    Ok(SnapshotBank {
        states,
        quotients,
        frame,
        steps_per_trajectory: steps,
        sample_ids: trajectories.iter().map(|t| t.0).collect(),
        dt,
        q,
    })
}

/// Bank from fine-dof trajectories `(sample id, trajectory)`.
pub fn build_snapshot_bank(trajectories: &[(usize, &Trajectory)], q: f64) -> Result<SnapshotBank> {
    let dt = trajectories
        .first()
        .map(|t| t.1.time.dt)
        .ok_or_else(|| Error::config("snapshot bank needs at least one trajectory"))?;
    if trajectories.iter().any(|t| t.1.time != trajectories[0].1.time) {
        return Err(Error::config("trajectories in a snapshot bank must share a time grid"));
    }
    let views: Vec<(usize, &[DVector<f64>])> = trajectories.iter().map(|(i, t)| (*i, &t.states[..])).collect();
    stack(&views, dt, q, None)
}

/// Bank from reduced coefficient trajectories in the basis `frame`.
pub fn build_snapshot_bank_in_frame(
    trajectories: &[(usize, &[DVector<f64>])],
    frame: &BasisMatrix,
    dt: f64,
    q: f64,
) -> Result<SnapshotBank> {
    if trajectories.is_empty() {
        return Err(Error::config("snapshot bank needs at least one trajectory"));
    }
    stack(trajectories, dt, q, Some(frame.clone()))
}

/// `l` leading POD modes, `A`-orthonormal over fine dofs.
#[derive(Debug, Clone)]
pub struct PodSpace {
    /// `m × l`
    pub basis: DMatrix<f64>,
    /// All nonzero-spectrum eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub q: f64,
}

impl PodSpace {
    pub fn l(&self) -> usize {
        self.basis.ncols()
    }

    /// `Σ_{p>l} λ_p`
    pub fn tail(&self) -> f64 {
        self.eigenvalues.iter().skip(self.l()).sum()
    }
}

/// Relative eigenvalue floor defining the numerical rank of a bank.
pub const POD_RANK_TOL: f64 = 1e-12;

/// Solves the POD eigenproblem of `bank` in the energy inner product of `stiffness`
/// and keeps the top `l` modes.
pub fn compute_pod(bank: &SnapshotBank, stiffness: &CsrMatrix, l: usize) -> Result<PodSpace> {
    let n = bank.num_columns();
    let mut z = DMatrix::zeros(bank.states.nrows(), 2 * n);
    z.columns_mut(0, n).copy_from(&bank.states);
    z.columns_mut(n, n).copy_from(&(&bank.quotients * bank.q));
    let b = match &bank.frame {
        None => BandedCholesky::factor(stiffness)?.mul_lt_dense(&z),
        Some(frame) => {
            let g = frame.galerkin(stiffness);
            let (vals, vecs) = symmetric_eigen_ascending(g);
            let top = vals.iter().copied().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 1e-14 * top).collect();
            let mut r = DMatrix::zeros(keep.len(), vals.len());
            for (row, &k) in keep.iter().enumerate() {
                r.set_row(row, &(vecs.column(k).transpose() * vals[k].sqrt()));
            }
            r * &z
        }
    };
    // right singular vectors of b are the left ones of bᵀ
    let svd = nalgebra::SVD::new(b.transpose(), true, false);
    let u = svd.u.as_ref().expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let lead = eigenvalues.first().copied().unwrap_or(0.0);
    if l == 0 {
        return Err(Error::config("POD size l must be positive"));
    }
    if l > eigenvalues.len() || !(eigenvalues[l - 1] > POD_RANK_TOL * lead) {
        let rank = eigenvalues.iter().filter(|&&e| e > POD_RANK_TOL * lead).count();
        return Err(Error::numerical(format!("POD size l = {l} exceeds the numerical rank {rank} of the snapshot bank")));
    }
    let mut basis = DMatrix::zeros(bank.frame.as_ref().map_or(z.nrows(), |f| f.nrows()), l);
    for p in 0..l {
        let k = order[p];
        let sigma = svd.singular_values[k];
        let mut phi = &z * u.column(k) / sigma;
        if let Some(f) = &bank.frame {
            phi = f.expand(&phi);
        }
        // sign: largest entry positive
        let imax = phi.iamax();
        if phi[imax] < 0.0 {
            phi.neg_mut();
        }
        basis.set_column(p, &phi);
    }
    Ok(PodSpace { basis, eigenvalues, q: bank.q })
}

/// `S^l y = Σ_i (yᵀ A ψ_i) ψ_i`
pub fn pod_project(pod: &PodSpace, stiffness: &CsrMatrix, y: &DVector<f64>) -> DVector<f64> {
    let ay = stiffness.mul_vec(y);
    &pod.basis * (pod.basis.transpose() * ay)
}

/// Dense `Ψᵀ B Ψ`.
fn project_operator(basis: &DMatrix<f64>, b: &CsrMatrix) -> DMatrix<f64> {
    let g = basis.transpose() * b.mul_dense(basis);
    (&g + g.transpose()) * 0.5
}

/// Reduced operators of one sample in the POD space.
#[derive(Debug, Clone)]
pub struct PodSolver {
    stepper: ReducedStepper,
    loads: Vec<DVector<f64>>,
    initial: DVector<f64>,
}

impl PodSolver {
    pub fn new(pod: &PodSpace, stiffness: &CsrMatrix, system: &FineSystem) -> Result<Self> {
        let stepper = ReducedStepper::from_matrices(
            project_operator(&pod.basis, stiffness),
            project_operator(&pod.basis, &system.mass),
            system.time.dt,
        )?;
        let count = if system.loads.is_time_independent() { 1 } else { system.time.steps + 1 };
        let loads = (0..count).map(|n| pod.basis.transpose() * system.loads.at(n)).collect();
        let initial = stepper.project_initial(&(pod.basis.transpose() * &system.initial_rhs));
        Ok(PodSolver { stepper, loads, initial })
    }

    /// Reduced coefficients `p̃^0..p̃^{N_t}`.
    pub fn solve_coefficients(&self, steps: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(self.initial.clone());
        for n in 1..=steps {
            let load = if self.loads.len() == 1 { &self.loads[0] } else { &self.loads[n] };
            let next = self.stepper.step(&(&self.stepper.mass * &out[n - 1]), load);
            out.push(next);
        }
        out
    }

    /// One reduced step from coefficients `prev`.
    pub fn step(&self, prev: &DVector<f64>, n: usize) -> DVector<f64> {
        let load = if self.loads.len() == 1 { &self.loads[0] } else { &self.loads[n] };
        self.stepper.step(&(&self.stepper.mass * prev), load)
    }
}

/// Implicit Euler in the POD space for the sample with stiffness `A(ω)`.
pub fn solve_pod_trajectory(pod: &PodSpace, stiffness: &CsrMatrix, system: &FineSystem) -> Result<Trajectory> {
    let solver = PodSolver::new(pod, stiffness, system)?;
    let states = solver.solve_coefficients(system.time.steps).iter().map(|p| &pod.basis * p).collect();
    Ok(Trajectory { time: system.time, states })
}

#[derive(Debug, Serialize)]
struct PodSidecar<'a> {
    schema: &'static str,
    l: usize,
    q: f64,
    grid: [usize; 2],
    eigenvalues: &'a [f64],
}

/// Writes `<stem>.bin` (one raster record per mode over the interior nodes) and
/// `<stem>.json` (eigenvalues, `l`, `Q`).
pub fn export_pod(dir: &Path, stem: &str, pod: &PodSpace, mesh: &TwoScaleMesh) -> Result<()> {
    let (gx, gy) = (mesh.nx - 1, mesh.ny - 1);
    let records: Vec<RasterRecord> = (0..pod.l())
        .map(|p| RasterRecord { nx: gx, ny: gy, values: pod.basis.column(p).iter().copied().collect() })
        .collect();
    let f = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
    write_raster(std::io::BufWriter::new(f), &records)?;
    let side = PodSidecar { schema: "msrom-pod v1", l: pod.l(), q: pod.q, grid: [gx, gy], eigenvalues: &pod.eigenvalues };
    let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
    f.write_all(serde_json::to_string_pretty(&side).map_err(|e| Error::Format(e.to_string()))?.as_bytes())?;
    Ok(())
}
