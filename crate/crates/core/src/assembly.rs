//! P1 finite elements on the fine grid: stiffness, mass and load assembly,
//! implicit-Euler time stepping for the reference solution, norms and the discrete
//! Poincaré constant.
//!
//! Each fine rectangle is split into two triangles along its south-west to
//! north-east diagonal. Triangle `2c` is (SW, SE, NE) of cell `c`, triangle `2c + 1`
//! is (SW, NE, NW). The permeability is constant per cell, so all element
//! integrals are exact.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellBlock, TwoScaleMesh};
use crate::linalg::{CsrMatrix, SolverSettings, SpdSolver};

/// Block-relative corner offsets of the two triangles in a cell.
pub const TRIANGLE_CORNERS: [[(usize, usize); 3]; 2] = [[(0, 0), (1, 0), (1, 1)], [(0, 0), (1, 1), (0, 1)]];

/// Strictly positive, cell-wise constant permeability on the fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermeabilityField {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    min: f64,
}

impl PermeabilityField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(Error::config(format!(
                "field has {} values, expected {nx} x {ny} = {}",
                values.len(),
                nx * ny
            )));
        }
        let mut min = f64::INFINITY;
        for (c, &v) in values.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("permeability must be positive and finite, cell {c} has {v}")));
            }
            min = min.min(v);
        }
        Ok(PermeabilityField { nx, ny, values, min })
    }

    pub fn constant(mesh: &TwoScaleMesh, value: f64) -> Result<Self> {
        Self::new(mesh.nx, mesh.ny, vec![value; mesh.num_cells()])
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    /// `κ_min`
    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.nx, self.ny, self.values.iter().map(|v| v * c).collect())
    }

    pub fn check_matches(&self, mesh: &TwoScaleMesh) -> Result<()> {
        if self.nx != mesh.nx || self.ny != mesh.ny {
            return Err(Error::config(format!(
                "field is {} x {} but the fine grid is {} x {}",
                self.nx, self.ny, mesh.nx, mesh.ny
            )));
        }
        Ok(())
    }

    /// `max |κ_a - κ_b|` over cells.
    pub fn linf_distance(&self, other: &PermeabilityField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Precomputed P1 element data; every fine cell has the same geometry.
#[derive(Debug, Clone)]
pub struct ElementTables {
    pub area: f64,
    /// Gradients of the three barycentric functions for each triangle type.
    pub grads: [[[f64; 2]; 3]; 2],
    /// Unit-coefficient element stiffness per triangle type.
    pub stiffness: [[[f64; 3]; 3]; 2],
    pub mass: [[f64; 3]; 3],
}

impl ElementTables {
    pub fn new(mesh: &TwoScaleMesh) -> Self {
        let (hx, hy) = (mesh.hx(), mesh.hy());
        let area = 0.5 * hx * hy;
        let mut grads = [[[0.0; 2]; 3]; 2];
        let mut stiffness = [[[0.0; 3]; 3]; 2];
        for t in 0..2 {
            let p: Vec<(f64, f64)> = TRIANGLE_CORNERS[t].iter().map(|&(a, b)| (a as f64 * hx, b as f64 * hy)).collect();
            let det = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
            for a in 0..3 {
                let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                grads[t][a] = [(p[b].1 - p[c].1) / det, (p[c].0 - p[b].0) / det];
            }
            for a in 0..3 {
                for b in 0..3 {
                    stiffness[t][a][b] = area * (grads[t][a][0] * grads[t][b][0] + grads[t][a][1] * grads[t][b][1]);
                }
            }
        }
        let mut mass = [[area / 12.0; 3]; 3];
        for (a, row) in mass.iter_mut().enumerate() {
            row[a] = area / 6.0;
        }
        ElementTables { area, grads, stiffness, mass }
    }
}

/// Global node ids of triangle `t` in cell `(i, j)`.
fn triangle_nodes(mesh: &TwoScaleMesh, i: usize, j: usize, t: usize) -> [usize; 3] {
    let c = TRIANGLE_CORNERS[t];
    [
        mesh.node_index(i + c[0].0, j + c[0].1),
        mesh.node_index(i + c[1].0, j + c[1].1),
        mesh.node_index(i + c[2].0, j + c[2].1),
    ]
}

/// Assembles `Σ_T w_s(T) K_T + w_m(T) M_T` over interior dofs only.
fn assemble_interior(
    mesh: &TwoScaleMesh,
    stiff_weight: &dyn Fn(usize) -> f64,
    mass_weight: &dyn Fn(usize) -> f64,
) -> CsrMatrix {
    let tab = ElementTables::new(mesh);
    let mut trip = Vec::with_capacity(mesh.num_cells() * 2 * 9);
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            let c = mesh.cell_index(i, j);
            for t in 0..2 {
                let tri = 2 * c + t;
                let (ws, wm) = (stiff_weight(tri), mass_weight(tri));
                let nodes = triangle_nodes(mesh, i, j, t);
                for a in 0..3 {
                    let Some(da) = mesh.node_to_dof(nodes[a]) else { continue };
                    for b in 0..3 {
                        let Some(db) = mesh.node_to_dof(nodes[b]) else { continue };
                        let v = ws * tab.stiffness[t][a][b] + wm * tab.mass[a][b];
                        trip.push((da, db, v));
                    }
                }
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_dofs(), &trip)
}

/// Stiffness matrix `A_ij = ∫ κ ∇γ_i·∇γ_j` over interior fine nodes.
pub fn assemble_stiffness(mesh: &TwoScaleMesh, kappa: &PermeabilityField) -> Result<CsrMatrix> {
    kappa.check_matches(mesh)?;
    Ok(assemble_interior(mesh, &|tri| kappa.value(tri / 2), &|_| 0.0))
}

/// Mass matrix `M_ij = ∫ γ_i γ_j` over interior fine nodes.
pub fn assemble_mass(mesh: &TwoScaleMesh) -> CsrMatrix {
    assemble_interior(mesh, &|_| 0.0, &|_| 1.0)
}

/// Mass matrix over all fine nodes, boundary included.
pub fn assemble_mass_full(mesh: &TwoScaleMesh) -> CsrMatrix {
    let tab = ElementTables::new(mesh);
    let mut trip = Vec::with_capacity(mesh.num_cells() * 18);
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            for t in 0..2 {
                let nodes = triangle_nodes(mesh, i, j, t);
                for a in 0..3 {
                    for b in 0..3 {
                        trip.push((nodes[a], nodes[b], tab.mass[a][b]));
                    }
                }
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), &trip)
}

/// Dense block matrices over the nodes of a cell block (local numbering of
/// [`CellBlock::local_node`]), no boundary elimination.
///
/// Returns `Σ_T w_s(T) K_T` and `Σ_T w_m(T) M_T`, with triangle weights indexed by
/// global triangle id.
pub fn assemble_block(
    mesh: &TwoScaleMesh,
    block: &CellBlock,
    stiff_weight: &dyn Fn(usize) -> f64,
    mass_weight: &dyn Fn(usize) -> f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let tab = ElementTables::new(mesh);
    let n = block.node_count();
    let mut k = DMatrix::zeros(n, n);
    let mut m = DMatrix::zeros(n, n);
    for b in 0..block.ncy {
        for a in 0..block.ncx {
            let c = mesh.cell_index(block.i0 + a, block.j0 + b);
            for t in 0..2 {
                let tri = 2 * c + t;
                let (ws, wm) = (stiff_weight(tri), mass_weight(tri));
                let loc: Vec<usize> =
                    TRIANGLE_CORNERS[t].iter().map(|&(da, db)| block.local_node(a + da, b + db)).collect();
                for p in 0..3 {
                    for q in 0..3 {
                        k[(loc[p], loc[q])] += ws * tab.stiffness[t][p][q];
                        m[(loc[p], loc[q])] += wm * tab.mass[p][q];
                    }
                }
            }
        }
    }
    (k, m)
}

/// Squared P1 gradient of a nodal function on every triangle of a block, keyed by
/// block-local triangle `2 * (b * ncx + a) + t`.
pub fn block_gradient_sq(mesh: &TwoScaleMesh, block: &CellBlock, values: &[f64]) -> Vec<f64> {
    let tab = ElementTables::new(mesh);
    let mut out = Vec::with_capacity(2 * block.ncx * block.ncy);
    for b in 0..block.ncy {
        for a in 0..block.ncx {
            for t in 0..2 {
                let mut g = [0.0; 2];
                for (p, &(da, db)) in TRIANGLE_CORNERS[t].iter().enumerate() {
                    let v = values[block.local_node(a + da, b + db)];
                    g[0] += v * tab.grads[t][p][0];
                    g[1] += v * tab.grads[t][p][1];
                }
                out.push(g[0] * g[0] + g[1] * g[1]);
            }
        }
    }
    out
}

/// Scalar function of `(t, x, y)` used for sources and initial data.
#[derive(Clone)]
pub enum SpaceTimeFunction {
    Constant(f64),
    /// `sin(πx/lx) sin(πy/ly)`
    Sine,
    /// Source making `u = (1 + t) sin(πx/lx) sin(πy/ly)` exact for `κ ≡ 1`.
    ManufacturedSource,
    Custom(Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for SpaceTimeFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpaceTimeFunction::Constant(v) => write!(f, "Constant({v})"),
            SpaceTimeFunction::Sine => write!(f, "Sine"),
            SpaceTimeFunction::ManufacturedSource => write!(f, "ManufacturedSource"),
            SpaceTimeFunction::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl SpaceTimeFunction {
    /// Parses `zero`, `const:<v>`, `sine`, `manufactured`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "zero" => Ok(SpaceTimeFunction::Constant(0.0)),
            "one" => Ok(SpaceTimeFunction::Constant(1.0)),
            "sine" => Ok(SpaceTimeFunction::Sine),
            "manufactured" => Ok(SpaceTimeFunction::ManufacturedSource),
            _ => {
                if let Some(v) = s.strip_prefix("const:") {
                    v.trim()
                        .parse::<f64>()
                        .map(SpaceTimeFunction::Constant)
                        .map_err(|_| Error::config(format!("bad constant in function selector '{s}'")))
                } else {
                    Err(Error::config(format!(
                        "unknown function selector '{s}' (expected zero, const:<v>, sine, manufactured)"
                    )))
                }
            }
        }
    }

    pub fn eval(&self, t: f64, x: f64, y: f64, lx: f64, ly: f64) -> f64 {
        match self {
            SpaceTimeFunction::Constant(v) => *v,
            SpaceTimeFunction::Sine => (PI * x / lx).sin() * (PI * y / ly).sin(),
            SpaceTimeFunction::ManufacturedSource => {
                let s = (PI * x / lx).sin() * (PI * y / ly).sin();
                let lam = PI * PI * (1.0 / (lx * lx) + 1.0 / (ly * ly));
                s + (1.0 + t) * lam * s
            }
            SpaceTimeFunction::Custom(f) => f(t, x, y),
        }
    }

    pub fn is_time_independent(&self) -> bool {
        matches!(self, SpaceTimeFunction::Constant(_) | SpaceTimeFunction::Sine)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SpaceTimeFunction::Constant(v) if *v == 0.0)
    }

    /// Nodal interpolant over all fine nodes at time `t`.
    pub fn nodal_values(&self, mesh: &TwoScaleMesh, t: f64) -> DVector<f64> {
        let (lx, ly) = (mesh.domain.lx, mesh.domain.ly);
        DVector::from_fn(mesh.num_nodes(), |n, _| {
            let (x, y) = mesh.node_coords(n);
            self.eval(t, x, y, lx, ly)
        })
    }
}

/// Uniform time grid `t_n = n Δt`, `n = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_final > 0.0) {
            return Err(Error::config(format!("time step and final time must be positive (dt = {dt}, T = {t_final})")));
        }
        let steps = (t_final / dt).round() as usize;
        if steps == 0 || ((steps as f64) * dt - t_final).abs() > 1e-9 * t_final {
            return Err(Error::config(format!("final time T = {t_final} is not a multiple of dt = {dt}")));
        }
        Ok(TimeGrid { dt, steps })
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.t(self.steps)
    }
}

/// Load vectors `F^n` over interior dofs, from the nodal interpolant of the source
/// multiplied by the boundary-inclusive mass matrix.
#[derive(Debug, Clone)]
pub struct Loads {
    vectors: Vec<DVector<f64>>,
    source_l2: Vec<f64>,
}

impl Loads {
    pub fn assemble(mesh: &TwoScaleMesh, source: &SpaceTimeFunction, time: &TimeGrid) -> Self {
        let mass_full = assemble_mass_full(mesh);
        let count = if source.is_time_independent() { 1 } else { time.steps + 1 };
        let mut vectors = Vec::with_capacity(count);
        let mut source_l2 = Vec::with_capacity(count);
        for n in 0..count {
            let fi = source.nodal_values(mesh, time.t(n));
            let full = mass_full.mul_vec(&fi);
            source_l2.push(mass_full.quad_form(&fi).max(0.0).sqrt());
            vectors.push(restrict_to_dofs(mesh, &full));
        }
        Loads { vectors, source_l2 }
    }

    /// `F^n`
    pub fn at(&self, n: usize) -> &DVector<f64> {
        if self.vectors.len() == 1 {
            &self.vectors[0]
        } else {
            &self.vectors[n]
        }
    }

    /// `‖f^n‖_{L²}` of the interpolated source.
    pub fn source_l2(&self, n: usize) -> f64 {
        if self.source_l2.len() == 1 {
            self.source_l2[0]
        } else {
            self.source_l2[n]
        }
    }

    pub fn is_time_independent(&self) -> bool {
        self.vectors.len() == 1
    }
}

/// Right-hand side `G_i = ⟨g, γ_i⟩` of the initial projection.
pub fn initial_load(mesh: &TwoScaleMesh, g: &SpaceTimeFunction) -> DVector<f64> {
    let full = assemble_mass_full(mesh).mul_vec(&g.nodal_values(mesh, 0.0));
    restrict_to_dofs(mesh, &full)
}

pub fn restrict_to_dofs(mesh: &TwoScaleMesh, full: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mesh.num_dofs(), |d, _| full[mesh.dof_to_node(d)])
}

/// Extends interior-dof coefficients by zero onto all fine nodes.
pub fn extend_to_nodes(mesh: &TwoScaleMesh, v: &DVector<f64>) -> DVector<f64> {
    let mut full = DVector::zeros(mesh.num_nodes());
    for d in 0..mesh.num_dofs() {
        full[mesh.dof_to_node(d)] = v[d];
    }
    full
}

/// Time-indexed coefficient vectors `c^0..c^{N_t}` over interior fine dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub time: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// The discrete data shared by every solve on one mesh: mass matrix, loads and the
/// initial right-hand side.
#[derive(Debug, Clone)]
pub struct FineSystem {
    pub mesh: TwoScaleMesh,
    pub mass: CsrMatrix,
    pub loads: Loads,
    pub initial_rhs: DVector<f64>,
    pub time: TimeGrid,
    pub settings: SolverSettings,
}

impl FineSystem {
    pub fn new(
        mesh: TwoScaleMesh,
        source: &SpaceTimeFunction,
        initial: &SpaceTimeFunction,
        time: TimeGrid,
        settings: SolverSettings,
    ) -> Self {
        let mass = assemble_mass(&mesh);
        let loads = Loads::assemble(&mesh, source, &time);
        let initial_rhs = initial_load(&mesh, initial);
        FineSystem { mesh, mass, loads, initial_rhs, time, settings }
    }

    pub fn stiffness(&self, kappa: &PermeabilityField) -> Result<CsrMatrix> {
        assemble_stiffness(&self.mesh, kappa)
    }

    pub fn solve_fine(&self, stiffness: &CsrMatrix) -> Result<Trajectory> {
        solve_fine_trajectory(stiffness, &self.mass, &self.loads, &self.initial_rhs, &self.time, &self.settings)
    }
}

/// Implicit Euler on the fine grid: `(M + Δt A) c^n = M c^{n-1} + Δt F^n`, with
/// `c^0` the `M`-projection of the initial data.
pub fn solve_fine_trajectory(
    stiffness: &CsrMatrix,
    mass: &CsrMatrix,
    loads: &Loads,
    initial_rhs: &DVector<f64>,
    time: &TimeGrid,
    settings: &SolverSettings,
) -> Result<Trajectory> {
    let m = mass.dim();
    let c0 = if initial_rhs.iter().all(|&v| v == 0.0) {
        DVector::zeros(m)
    } else {
        SpdSolver::new(mass, settings)?.solve(initial_rhs, None)?
    };
    let system = mass.linear_combination(1.0, stiffness, time.dt);
    let solver = SpdSolver::new(&system, settings)?;
    let mut states = Vec::with_capacity(time.steps + 1);
    states.push(c0);
    for n in 1..=time.steps {
        let prev = &states[n - 1];
        let mut rhs = mass.mul_vec(prev);
        rhs.axpy(time.dt, loads.at(n), 1.0);
        let next = solver.solve(&rhs, Some(prev))?;
        states.push(next);
    }
    Ok(Trajectory { time: *time, states })
}

/// `‖v‖_a = √(vᵀ A v)`
pub fn energy_norm(stiffness: &CsrMatrix, v: &DVector<f64>) -> f64 {
    stiffness.quad_form(v).max(0.0).sqrt()
}

/// `‖v‖_{L²} = √(vᵀ M v)`
pub fn l2_norm(mass: &CsrMatrix, v: &DVector<f64>) -> f64 {
    mass.quad_form(v).max(0.0).sqrt()
}

/// Poincaré constant `Q = 1 / λ_min` of the pencil `A v = λ M v`, by inverse
/// iteration to relative tolerance `1e-8` or better on the Rayleigh quotient.
pub fn estimate_poincare_q(stiffness: &CsrMatrix, mass: &CsrMatrix, settings: &SolverSettings) -> Result<f64> {
    const RTOL: f64 = 1e-11;
    const MAX_ITER: usize = 20_000;
    let solver = SpdSolver::new(stiffness, settings)?;
    let n = stiffness.dim();
    let mut v = DVector::from_element(n, 1.0);
    v /= l2_norm(mass, &v);
    let mut prev = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let rhs = mass.mul_vec(&v);
        let x = solver.solve(&rhs, Some(&v))?;
        let mx = mass.quad_form(&x);
        let rq = stiffness.quad_form(&x) / mx;
        v = x / mx.sqrt();
        if (prev - rq).abs() <= RTOL * rq {
            return Ok(1.0 / rq);
        }
        prev = rq;
    }
    Err(Error::NoConvergence { iterations: MAX_ITER, residual: f64::NAN })
}
