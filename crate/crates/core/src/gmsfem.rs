//! Generalized multiscale spaces: local snapshots, partition of unity, the
//! κ̂-weighted spectral problems and the Galerkin solve in the resulting space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::assembly::{assemble_block, block_gradient_sq, FineSystem, PermeabilityField, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{CellBlock, CoarseNeighborhood, TwoScaleMesh};
use crate::linalg::{fix_column_signs, generalized_eigen, CsrMatrix};
use crate::par;

/// A basis vector over interior fine dofs with local support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumn {
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseColumn {
    pub fn to_dense(&self, m: usize) -> DVector<f64> {
        let mut v = DVector::zeros(m);
        for (&d, &x) in self.dofs.iter().zip(&self.values) {
            v[d] = x;
        }
        v
    }

    pub fn dot(&self, x: &DVector<f64>) -> f64 {
        self.dofs.iter().zip(&self.values).map(|(&d, &v)| v * x[d]).sum()
    }
}

/// `m × M` basis matrix stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    rows: usize,
    cols: Vec<SparseColumn>,
}

impl BasisMatrix {
    pub fn new(rows: usize) -> Self {
        BasisMatrix { rows, cols: Vec::new() }
    }

    /// The full fine space, one unit vector per dof.
    pub fn identity(rows: usize) -> Self {
        BasisMatrix {
            rows,
            cols: (0..rows).map(|d| SparseColumn { dofs: vec![d], values: vec![1.0] }).collect(),
        }
    }

    pub fn push(&mut self, col: SparseColumn) {
        debug_assert!(col.dofs.iter().all(|&d| d < self.rows));
        self.cols.push(col);
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn columns(&self) -> &[SparseColumn] {
        &self.cols
    }

    /// `V u`
    pub fn expand(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for (c, &w) in self.cols.iter().zip(u.iter()) {
            for (&d, &v) in c.dofs.iter().zip(&c.values) {
                out[d] += w * v;
            }
        }
        out
    }

    /// `Vᵀ x`
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.cols.len(), self.cols.iter().map(|c| c.dot(x)))
    }

    /// `Vᵀ B V` for a symmetric sparse `B`.
    pub fn galerkin(&self, b: &CsrMatrix) -> DMatrix<f64> {
        let n = self.cols.len();
        let rows: Vec<Vec<f64>> = par::map_indexed(n, |k| {
            let bv = self.mul_column(b, k);
            (0..n).map(|l| self.cols[l].dot(&bv)).collect()
        });
        let mut g = DMatrix::zeros(n, n);
        for (k, r) in rows.iter().enumerate() {
            for (l, &v) in r.iter().enumerate() {
                g[(k, l)] = v;
            }
        }
        (&g + g.transpose()) * 0.5
    }

    fn mul_column(&self, b: &CsrMatrix, k: usize) -> DVector<f64> {
        let c = &self.cols[k];
        let mut out = DVector::zeros(self.rows);
        for (&d, &v) in c.dofs.iter().zip(&c.values) {
            for (j, a) in b.row(d) {
                out[j] += a * v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols.len());
        for (k, c) in self.cols.iter().enumerate() {
            for (&d, &v) in c.dofs.iter().zip(&c.values) {
                out[(d, k)] = v;
            }
        }
        out
    }
}

/// Harmonic extensions of boundary deltas on one neighborhood.
#[derive(Debug, Clone)]
pub struct LocalSnapshotSpace {
    pub neighborhood: usize,
    /// Block nodes × `L_i`; column `j` is 1 at `boundary_local[j]`.
    pub values: DMatrix<f64>,
}

impl LocalSnapshotSpace {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Dense block stiffness with coefficient `κ` over a cell block.
fn block_stiffness(mesh: &TwoScaleMesh, kappa: &PermeabilityField, block: &CellBlock) -> DMatrix<f64> {
    assemble_block(mesh, block, &|tri| kappa.value(tri / 2), &|_| 0.0).0
}

/// Solves the Dirichlet problem `K u = 0` at non-perimeter nodes of a block for
/// every column of boundary data in `data` (rows indexed by `boundary`).
fn harmonic_extension(
    k: &DMatrix<f64>,
    interior: &[usize],
    boundary: &[usize],
    data: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mut out = DMatrix::zeros(n, data.ncols());
    for (r, &b) in boundary.iter().enumerate() {
        for c in 0..data.ncols() {
            out[(b, c)] = data[(r, c)];
        }
    }
    if interior.is_empty() {
        return Ok(out);
    }
    let kii = k.select_rows(interior).select_columns(interior);
    let kib = k.select_rows(interior).select_columns(boundary);
    let chol = Cholesky::<f64, Dyn>::new(kii)
        .ok_or_else(|| Error::numerical("local Dirichlet matrix is not positive definite"))?;
    let ui = -chol.solve(&(kib * data));
    for (r, &i) in interior.iter().enumerate() {
        for c in 0..data.ncols() {
            out[(i, c)] = ui[(r, c)];
        }
    }
    Ok(out)
}

/// Snapshot space of neighborhood `nb`: one κ-harmonic extension per boundary node.
pub fn compute_snapshots(
    mesh: &TwoScaleMesh,
    kappa: &PermeabilityField,
    nb: &CoarseNeighborhood,
) -> Result<LocalSnapshotSpace> {
    let k = block_stiffness(mesh, kappa, &nb.block);
    let l = nb.num_boundary();
    let values = harmonic_extension(&k, &nb.interior_local, &nb.boundary_local, &DMatrix::identity(l, l))?;
    Ok(LocalSnapshotSpace { neighborhood: nb.index, values })
}

/// Partition-of-unity function `χ_i` over the block nodes of `nb`.
///
/// On each of the four coarse elements of `D_i`, `χ_i` is the κ-harmonic extension
/// of the bilinear coarse hat of the centre node restricted to the element edges.
pub fn compute_pou(mesh: &TwoScaleMesh, kappa: &PermeabilityField, nb: &CoarseNeighborhood) -> Result<DVector<f64>> {
    let (rx, ry) = mesh.cells_per_coarse();
    let mut chi = DVector::zeros(nb.block.node_count());
    // element offsets inside D_i and the corner of that element at the centre node
    let parts = [((0, 0), (1, 1)), ((rx, 0), (0, 1)), ((0, ry), (1, 0)), ((rx, ry), (0, 0))];
    for ((ox, oy), (cx, cy)) in parts {
        let elem = CellBlock { i0: nb.block.i0 + ox, j0: nb.block.j0 + oy, ncx: rx, ncy: ry };
        let k = block_stiffness(mesh, kappa, &elem);
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut data = Vec::new();
        for b in 0..=ry {
            for a in 0..=rx {
                let local = elem.local_node(a, b);
                if elem.is_perimeter(a, b) {
                    let wx = if cx == 1 { a as f64 / rx as f64 } else { 1.0 - a as f64 / rx as f64 };
                    let wy = if cy == 1 { b as f64 / ry as f64 } else { 1.0 - b as f64 / ry as f64 };
                    boundary.push(local);
                    data.push(wx * wy);
                } else {
                    interior.push(local);
                }
            }
        }
        let u = harmonic_extension(&k, &interior, &boundary, &DMatrix::from_column_slice(data.len(), 1, &data))?;
        for b in 0..=ry {
            for a in 0..=rx {
                chi[nb.block.local_node(a + ox, b + oy)] = u[(elem.local_node(a, b), 0)];
            }
        }
    }
    Ok(chi)
}

/// `κ̂ = κ H² |∇χ_i|²` per block-local triangle.
pub fn kappa_hat(mesh: &TwoScaleMesh, kappa: &PermeabilityField, nb: &CoarseNeighborhood, chi: &DVector<f64>) -> Vec<f64> {
    let h2 = mesh.coarse_h().powi(2);
    let grad = block_gradient_sq(mesh, &nb.block, chi.as_slice());
    let b = &nb.block;
    grad.iter()
        .enumerate()
        .map(|(lt, g)| {
            let lc = lt / 2;
            let (a, bb) = (lc % b.ncx, lc / b.ncx);
            kappa.value(mesh.cell_index(b.i0 + a, b.j0 + bb)) * h2 * g
        })
        .collect()
}

fn block_local_triangle(mesh: &TwoScaleMesh, b: &CellBlock, tri: usize) -> usize {
    let c = tri / 2;
    let (i, j) = (c % mesh.nx, c / mesh.nx);
    2 * ((j - b.j0) * b.ncx + (i - b.i0)) + tri % 2
}

/// Solution of the local spectral problem in snapshot coordinates.
#[derive(Debug, Clone)]
pub struct LocalSpectrum {
    /// Eigenvalues ascending, one per snapshot with nonzero `κ̂`-mass.
    pub eigenvalues: DVector<f64>,
    /// Eigenvectors in full snapshot coordinates (`L_i` rows).
    pub eigenvectors: DMatrix<f64>,
    /// `S_κ̂ = Ψᵀ M_κ̂ Ψ` over all `L_i` snapshots.
    pub weight: DMatrix<f64>,
    /// The eigenfunctions `Ψ φ_j` over the block nodes, `κ̂`-orthonormal in the
    /// block mass matrix `kappa_mass`. The snapshot Gram matrix `S_κ̂` is badly
    /// conditioned at high contrast; orthonormality is imposed here instead.
    pub functions: DMatrix<f64>,
    /// `M_κ̂` over the block nodes.
    pub kappa_mass: DMatrix<f64>,
    /// Snapshots entering the eigenproblem. A snapshot supported only where
    /// `κ̂ = 0` (a block corner touching a single boundary triangle) is left out:
    /// its product with `χ_i` vanishes.
    pub active: Vec<usize>,
}

/// Solves `S_a φ = λ S_κ̂ φ` with both matrices formed in snapshot coordinates.
pub fn local_spectrum(
    mesh: &TwoScaleMesh,
    kappa: &PermeabilityField,
    nb: &CoarseNeighborhood,
    snapshots: &LocalSnapshotSpace,
    chi: &DVector<f64>,
) -> Result<LocalSpectrum> {
    let khat = kappa_hat(mesh, kappa, nb, chi);
    let b = nb.block;
    let (k, mhat) = assemble_block(
        mesh,
        &b,
        &|tri| kappa.value(tri / 2),
        &|tri| khat[block_local_triangle(mesh, &b, tri)],
    );
    let psi = &snapshots.values;
    let sa = psi.transpose() * k * psi;
    let sk = psi.transpose() * &mhat * psi;
    let sa = (&sa + sa.transpose()) * 0.5;
    let sk = (&sk + sk.transpose()) * 0.5;
    let active: Vec<usize> = (0..sk.nrows()).filter(|&j| sk[(j, j)] > 0.0).collect();
    let sa_act = sa.select_rows(&active).select_columns(&active);
    let sk_act = sk.select_rows(&active).select_columns(&active);
    let (vals, mut vecs) = generalized_eigen(&sa_act, &sk_act).map_err(|e| {
        Error::numerical(format!("spectral problem on neighborhood {}: {e}", nb.index))
    })?;
    fix_column_signs(&mut vecs);
    let mut full = DMatrix::zeros(sk.nrows(), vecs.ncols());
    for (r, &j) in active.iter().enumerate() {
        full.set_row(j, &vecs.row(r));
    }
    let mut functions = psi * &full;
    let g = functions.transpose() * &mhat * &functions;
    let g = (&g + g.transpose()) * 0.5;
    if let Some(c) = Cholesky::<f64, Dyn>::new(g) {
        let l = c.l();
        if let (Some(f), Some(v)) = (
            l.solve_lower_triangular(&functions.transpose()),
            l.solve_lower_triangular(&full.transpose()),
        ) {
            functions = f.transpose();
            full = v.transpose();
        }
    }
    Ok(LocalSpectrum { eigenvalues: vals, eigenvectors: full, weight: sk, functions, kappa_mass: mhat, active })
}

/// The first `l` local multiscale functions `χ_i Ψ φ_j` of a neighborhood as
/// sparse columns over interior fine dofs.
pub fn spectral_select(
    nb: &CoarseNeighborhood,
    snapshots: &LocalSnapshotSpace,
    chi: &DVector<f64>,
    spectrum: &LocalSpectrum,
    l: usize,
) -> Result<Vec<SparseColumn>> {
    if l > spectrum.eigenvalues.len() {
        return Err(Error::config(format!(
            "neighborhood {} has {} spectral functions (L_i = {}), cannot select {l}",
            nb.index,
            spectrum.eigenvalues.len(),
            snapshots.len()
        )));
    }
    let mut out = Vec::with_capacity(l);
    for j in 0..l {
        let phi = spectrum.functions.column(j);
        let values = nb.interior_local.iter().map(|&p| chi[p] * phi[p]).collect();
        out.push(SparseColumn { dofs: nb.interior_dofs.clone(), values });
    }
    Ok(out)
}

/// Everything the offline stage computes per neighborhood for one coefficient.
#[derive(Debug, Clone)]
pub struct LocalData {
    pub neighborhood: CoarseNeighborhood,
    pub snapshots: LocalSnapshotSpace,
    pub pou: DVector<f64>,
    pub spectrum: LocalSpectrum,
}

/// Offline stage 1 data for all neighborhoods.
#[derive(Debug, Clone)]
pub struct OfflineData {
    pub mesh: TwoScaleMesh,
    pub kappa: PermeabilityField,
    pub local: Vec<LocalData>,
}

impl OfflineData {
    pub fn build(mesh: &TwoScaleMesh, kappa: &PermeabilityField) -> Result<Self> {
        kappa.check_matches(mesh)?;
        let nbhds = mesh.neighborhoods();
        let local = par::try_map_indexed(nbhds.len(), |i| {
            let nb = &nbhds[i];
            let snapshots = compute_snapshots(mesh, kappa, nb)?;
            let pou = compute_pou(mesh, kappa, nb)?;
            let spectrum = local_spectrum(mesh, kappa, nb, &snapshots, &pou)?;
            Ok::<_, Error>(LocalData { neighborhood: nb.clone(), snapshots, pou, spectrum })
        })?;
        Ok(OfflineData { mesh: mesh.clone(), kappa: kappa.clone(), local })
    }

    pub fn num_neighborhoods(&self) -> usize {
        self.local.len()
    }
}

/// A multiscale space together with its provenance.
#[derive(Debug, Clone)]
pub struct ReducedSpace {
    pub basis: BasisMatrix,
    /// Spectral functions per neighborhood (`l_i`).
    pub counts: Vec<usize>,
    /// Residual-driven functions added per neighborhood.
    pub enriched: Vec<usize>,
    /// Owning neighborhood of every column.
    pub owner: Vec<usize>,
    /// All local eigenvalues, ascending, per neighborhood.
    pub eigenvalues: Vec<Vec<f64>>,
    /// `Λ = min_i λ^{(i)}_{l_i+1}`; `None` when some `l_i = L_i`.
    pub lambda: Option<f64>,
}

impl ReducedSpace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn push_enrichment(&mut self, owner: usize, col: SparseColumn) {
        self.basis.push(col);
        self.owner.push(owner);
        self.enriched[owner] += 1;
    }
}

/// The same count `l` for each of `n` neighborhoods.
pub fn uniform_counts(n: usize, l: usize) -> Vec<usize> {
    vec![l; n]
}

/// Concatenates the first `counts[i]` spectral functions of every neighborhood.
pub fn assemble_multiscale_space(offline: &OfflineData, counts: &[usize]) -> Result<ReducedSpace> {
    let n = offline.num_neighborhoods();
    if counts.len() != n {
        return Err(Error::config(format!("{} basis counts given for {n} neighborhoods", counts.len())));
    }
    let mut basis = BasisMatrix::new(offline.mesh.num_dofs());
    let mut owner = Vec::new();
    let mut eigenvalues = Vec::with_capacity(n);
    let mut lambda = Some(f64::INFINITY);
    for (i, ld) in offline.local.iter().enumerate() {
        let cols = spectral_select(&ld.neighborhood, &ld.snapshots, &ld.pou, &ld.spectrum, counts[i])?;
        for c in cols {
            basis.push(c);
            owner.push(i);
        }
        let ev = ld.spectrum.eigenvalues.as_slice().to_vec();
        lambda = match (lambda, ev.get(counts[i])) {
            (Some(l), Some(&e)) => Some(l.min(e)),
            _ => None,
        };
        eigenvalues.push(ev);
    }
    if n == 0 {
        lambda = None;
    }
    Ok(ReducedSpace { basis, counts: counts.to_vec(), enriched: vec![0; n], owner, eigenvalues, lambda })
}

/// Checks that `VᵀAV` is positive definite, naming a rank-deficient neighborhood
/// when it is not.
pub fn check_space_rank(space: &ReducedSpace, stiffness: &CsrMatrix) -> Result<()> {
    let g = space.basis.galerkin(stiffness);
    if Cholesky::new(g).is_some() {
        return Ok(());
    }
    for i in 0..space.counts.len() {
        let idx: Vec<usize> = (0..space.dim()).filter(|&k| space.owner[k] == i).collect();
        let mut local = BasisMatrix::new(space.basis.nrows());
        for &k in &idx {
            local.push(space.basis.columns()[k].clone());
        }
        if !idx.is_empty() && Cholesky::new(local.galerkin(stiffness)).is_none() {
            return Err(Error::numerical(format!("multiscale basis of neighborhood {i} is rank deficient")));
        }
    }
    Err(Error::numerical("multiscale basis is rank deficient across neighborhoods"))
}

/// Galerkin matrices and factorizations of the implicit-Euler step in a reduced space.
///
/// When `VᵀMV` is numerically singular (overlapping local spaces can be linearly
/// dependent) the step works in an `M`-orthonormal basis of `span V` instead.
#[derive(Debug, Clone)]
pub struct ReducedStepper {
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    /// `T` with `V T` orthonormal in `M`, present only after deflation.
    transform: Option<DMatrix<f64>>,
    step: Cholesky<f64, Dyn>,
    mass_chol: Option<Cholesky<f64, Dyn>>,
    dt: f64,
}

/// Relative eigenvalue cut below which directions of `VᵀMV` are discarded.
pub const DEFLATION_TOL: f64 = 1e-12;

impl ReducedStepper {
    pub fn from_matrices(stiffness: DMatrix<f64>, mass: DMatrix<f64>, dt: f64) -> Result<Self> {
        if let (Some(mass_chol), Some(step)) = (Cholesky::new(mass.clone()), Cholesky::new(&mass + &stiffness * dt)) {
            let (lo, hi) = diag_ratio(&mass_chol);
            if lo > DEFLATION_TOL.sqrt() * hi {
                return Ok(ReducedStepper { stiffness, mass, transform: None, step, mass_chol: Some(mass_chol), dt });
            }
        }
        let (vals, vecs) = crate::linalg::symmetric_eigen_ascending(mass.clone());
        let top = vals.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > DEFLATION_TOL * top).collect();
        if keep.is_empty() {
            return Err(Error::numerical("reduced space is empty"));
        }
        log::warn!("reduced basis is linearly dependent: keeping {} of {} directions", keep.len(), vals.len());
        let mut t = DMatrix::zeros(vals.len(), keep.len());
        for (c, &k) in keep.iter().enumerate() {
            t.set_column(c, &(vecs.column(k) / vals[k].sqrt()));
        }
        let a = t.transpose() * &stiffness * &t;
        let a = (&a + a.transpose()) * 0.5;
        let step = Cholesky::new(DMatrix::identity(keep.len(), keep.len()) + a * dt)
            .ok_or_else(|| Error::numerical("reduced system matrix is not positive definite"))?;
        Ok(ReducedStepper { stiffness, mass, transform: Some(t), step, mass_chol: None, dt })
    }

    pub fn new(basis: &BasisMatrix, stiffness: &CsrMatrix, mass: &CsrMatrix, dt: f64) -> Result<Self> {
        Self::from_matrices(basis.galerkin(stiffness), basis.galerkin(mass), dt)
    }

    /// Number of independent directions actually used.
    pub fn rank(&self) -> usize {
        self.transform.as_ref().map_or(self.mass.nrows(), |t| t.ncols())
    }

    /// Reduced coefficients of the `M`-projection with projected right-hand side `g_r`.
    pub fn project_initial(&self, g_r: &DVector<f64>) -> DVector<f64> {
        match (&self.transform, &self.mass_chol) {
            (Some(t), _) => t * (t.transpose() * g_r),
            (None, Some(c)) => c.solve(g_r),
            (None, None) => unreachable!("undeflated stepper keeps its mass factor"),
        }
    }

    /// One implicit-Euler step given `Vᵀ M c^{n-1}` and `Vᵀ F^n`.
    pub fn step(&self, mass_prev_r: &DVector<f64>, load_r: &DVector<f64>) -> DVector<f64> {
        let rhs = mass_prev_r + load_r * self.dt;
        match &self.transform {
            Some(t) => t * self.step.solve(&(t.transpose() * rhs)),
            None => self.step.solve(&rhs),
        }
    }
}

fn diag_ratio(c: &Cholesky<f64, Dyn>) -> (f64, f64) {
    let l = c.l_dirty();
    (0..l.nrows()).fold((f64::INFINITY, 0.0), |(lo, hi), k| (lo.min(l[(k, k)]), hi.max(l[(k, k)])))
}

/// Implicit Euler in `span V` for coefficient `A`; returns the reduced coefficients
/// `Ũ^0..Ũ^{N_t}`.
pub fn solve_coarse_coefficients(
    basis: &BasisMatrix,
    stiffness: &CsrMatrix,
    system: &FineSystem,
) -> Result<Vec<DVector<f64>>> {
    let stepper = ReducedStepper::new(basis, stiffness, &system.mass, system.time.dt)?;
    let time = system.time;
    let loads_r: Vec<DVector<f64>> = if system.loads.is_time_independent() {
        vec![basis.project(system.loads.at(0))]
    } else {
        (0..=time.steps).map(|n| basis.project(system.loads.at(n))).collect()
    };
    let load_at = |n: usize| if loads_r.len() == 1 { &loads_r[0] } else { &loads_r[n] };
    let mut out = Vec::with_capacity(time.steps + 1);
    out.push(stepper.project_initial(&basis.project(&system.initial_rhs)));
    for n in 1..=time.steps {
        let next = stepper.step(&(&stepper.mass * &out[n - 1]), load_at(n));
        out.push(next);
    }
    Ok(out)
}

/// Implicit Euler in `span V` for coefficient `A`; returns fine coefficients `V Ũ^n`.
pub fn solve_coarse_trajectory(basis: &BasisMatrix, stiffness: &CsrMatrix, system: &FineSystem) -> Result<Trajectory> {
    let coeffs = solve_coarse_coefficients(basis, stiffness, system)?;
    Ok(Trajectory { time: system.time, states: coeffs.iter().map(|u| basis.expand(u)).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_stiffness, energy_norm, SpaceTimeFunction, TimeGrid};
    use crate::grid::Domain;
    use crate::linalg::SolverSettings;

    fn mesh(n: usize, c: usize) -> TwoScaleMesh {
        TwoScaleMesh::new(Domain::unit_square(), n, n, c, c).unwrap()
    }

    fn layered(m: &TwoScaleMesh, contrast: f64) -> PermeabilityField {
        let v = (0..m.num_cells())
            .map(|c| {
                let (x, y) = m.cell_center(c);
                if ((x * 7.0).floor() as i64 + (y * 3.0).floor() as i64) % 3 == 0 { contrast } else { 1.0 }
            })
            .collect();
        PermeabilityField::new(m.nx, m.ny, v).unwrap()
    }

    #[test]
    fn snapshot_sum_is_one_for_constant_coefficient() {
        let m = mesh(8, 2);
        let k = PermeabilityField::constant(&m, 1.0).unwrap();
        let nb = m.neighborhood(0).unwrap();
        let s = compute_snapshots(&m, &k, &nb).unwrap();
        for r in 0..s.values.nrows() {
            assert!((s.values.row(r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_interior_node_snapshot_matches_hand_solve() {
        // 2x2 fine cells in D_i: one interior node with stiffness 4 and couplings -1
        // to the four edge neighbours, 0 to the diagonal corners.
        let m = mesh(2, 2);
        let k = PermeabilityField::constant(&m, 1.0).unwrap();
        let nb = m.neighborhood(0).unwrap();
        let s = compute_snapshots(&m, &k, &nb).unwrap();
        let centre = nb.interior_local[0];
        for (j, &b) in nb.boundary_local.iter().enumerate() {
            let (a, bb) = (b % 3, b / 3);
            let edge = (a == 1) ^ (bb == 1);
            let want = if edge { 0.25 } else { 0.0 };
            assert!((s.values[(centre, j)] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn pou_hits_corner_values_and_stays_in_unit_interval() {
        let m = mesh(16, 4);
        let k = layered(&m, 1e3);
        for nb in m.neighborhoods() {
            let chi = compute_pou(&m, &k, &nb).unwrap();
            let (rx, ry) = m.cells_per_coarse();
            assert!((chi[nb.block.local_node(rx, ry)] - 1.0).abs() < 1e-14);
            for &b in &nb.boundary_local {
                assert_eq!(chi[b], 0.0);
            }
            assert!(chi.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn eigenvalues_ascending_nonnegative_and_orthonormal() {
        let m = mesh(12, 3);
        let k = layered(&m, 1e4);
        let off = OfflineData::build(&m, &k).unwrap();
        for ld in &off.local {
            let ev = &ld.spectrum.eigenvalues;
            assert!(ev[0] > -1e-8 * ev[ev.len() - 1]);
            assert!(ev.as_slice().windows(2).all(|w| w[0] <= w[1]));
            let f = &ld.spectrum.functions;
            let g = f.transpose() * &ld.spectrum.kappa_mass * f;
            assert!((g - DMatrix::identity(f.ncols(), f.ncols())).amax() < 1e-10);
            let v = &ld.spectrum.eigenvectors;
            let g = v.transpose() * &ld.spectrum.weight * v;
            assert!((g - DMatrix::identity(v.ncols(), v.ncols())).amax() < 1e-8);
        }
    }

    #[test]
    fn counts_and_lambda() {
        let m = mesh(12, 3);
        let k = layered(&m, 100.0);
        let off = OfflineData::build(&m, &k).unwrap();
        let space = assemble_multiscale_space(&off, &uniform_counts(4, 3)).unwrap();
        assert_eq!(space.dim(), 12);
        let want = off.local.iter().map(|l| l.spectrum.eigenvalues[3]).fold(f64::INFINITY, f64::min);
        assert_eq!(space.lambda, Some(want));
        let l = off.local[0].spectrum.eigenvalues.len();
        assert_eq!(l, off.local[0].snapshots.len() - 2);
        assert!(assemble_multiscale_space(&off, &uniform_counts(4, l + 1)).is_err());
        let full = assemble_multiscale_space(&off, &uniform_counts(4, l)).unwrap();
        assert_eq!(full.lambda, None);
        check_space_rank(&space, &assemble_stiffness(&m, &k).unwrap()).unwrap();
    }

    #[test]
    fn identity_basis_reproduces_fine_trajectory() {
        let m = mesh(8, 2);
        let k = layered(&m, 50.0);
        let sys = FineSystem::new(
            m.clone(),
            &SpaceTimeFunction::Constant(1.0),
            &SpaceTimeFunction::Sine,
            TimeGrid::new(0.05, 0.25).unwrap(),
            SolverSettings::default(),
        );
        let a = sys.stiffness(&k).unwrap();
        let fine = sys.solve_fine(&a).unwrap();
        let red = solve_coarse_trajectory(&BasisMatrix::identity(m.num_dofs()), &a, &sys).unwrap();
        for (x, y) in fine.states.iter().zip(&red.states) {
            assert!((x - y).amax() < 1e-10);
        }
    }

    #[test]
    fn energy_error_decreases_with_more_basis() {
        let m = mesh(20, 4);
        let k = layered(&m, 1e4);
        let sys = FineSystem::new(
            m.clone(),
            &SpaceTimeFunction::Constant(1.0),
            &SpaceTimeFunction::Constant(0.0),
            TimeGrid::new(0.01, 0.1).unwrap(),
            SolverSettings::default(),
        );
        let a = sys.stiffness(&k).unwrap();
        let fine = sys.solve_fine(&a).unwrap();
        let off = OfflineData::build(&m, &k).unwrap();
        let mut prev = f64::INFINITY;
        for l in 1..=4 {
            let space = assemble_multiscale_space(&off, &uniform_counts(9, l)).unwrap();
            let tr = solve_coarse_trajectory(&space.basis, &a, &sys).unwrap();
            let e = energy_norm(&a, &(fine.final_state() - tr.final_state()));
            assert!(e < prev, "l = {l}: {e} >= {prev}");
            prev = e;
        }
        let lfull = off.local[0].spectrum.eigenvalues.len();
        let full = assemble_multiscale_space(&off, &uniform_counts(9, lfull)).unwrap();
        let tr = solve_coarse_trajectory(&full.basis, &a, &sys).unwrap();
        assert!(energy_norm(&a, &(fine.final_state() - tr.final_state())) < prev);
    }
}
