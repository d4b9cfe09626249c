//! Two-scale structured mesh: a fine rectangular grid, its coarse partition into
//! blocks of fine cells, and the coarse neighborhoods around interior coarse nodes.
//!
//! Numbering is row-major everywhere: fine node `(i, j)` is `j * (nx + 1) + i`, fine
//! cell `(i, j)` is `j * nx + i`, coarse element `(I, J)` is `J * NX + I`. Interior
//! fine nodes (the unknowns) are numbered row-major over `1..nx` x `1..ny`, and the
//! interior coarse nodes row-major over `1..NX` x `1..NY`. All indices are 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[0, lx] x [0, ly]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lx: f64,
    pub ly: f64,
}

impl Domain {
    pub fn unit_square() -> Self {
        Domain { lx: 1.0, ly: 1.0 }
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
}

/// A rectangular block of fine cells with its own local node numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBlock {
    pub i0: usize,
    pub j0: usize,
    pub ncx: usize,
    pub ncy: usize,
}

impl CellBlock {
    pub fn node_count(&self) -> usize {
        (self.ncx + 1) * (self.ncy + 1)
    }

    /// Local node index of block-relative node `(a, b)`.
    pub fn local_node(&self, a: usize, b: usize) -> usize {
        b * (self.ncx + 1) + a
    }

    pub fn is_perimeter(&self, a: usize, b: usize) -> bool {
        a == 0 || b == 0 || a == self.ncx || b == self.ncy
    }
}

#[derive(Debug, Clone)]
pub struct TwoScaleMesh {
    pub domain: Domain,
    pub nx: usize,
    pub ny: usize,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    node_to_dof: Vec<Option<usize>>,
    dof_to_node: Vec<usize>,
}

impl TwoScaleMesh {
    /// Builds the mesh; `nx`/`ny` must be multiples of `coarse_nx`/`coarse_ny`.
    pub fn new(domain: Domain, nx: usize, ny: usize, coarse_nx: usize, coarse_ny: usize) -> Result<Self> {
        if !(domain.lx > 0.0 && domain.ly > 0.0 && domain.lx.is_finite() && domain.ly.is_finite()) {
            return Err(Error::config(format!("domain extents must be positive, got {} x {}", domain.lx, domain.ly)));
        }
        for (name, v) in [("nx", nx), ("ny", ny), ("NX", coarse_nx), ("NY", coarse_ny)] {
            if v < 2 {
                return Err(Error::config(format!("{name} must be at least 2, got {v}")));
            }
        }
        if nx % coarse_nx != 0 {
            return Err(Error::config(format!("nx = {nx} is not divisible by NX = {coarse_nx}")));
        }
        if ny % coarse_ny != 0 {
            return Err(Error::config(format!("ny = {ny} is not divisible by NY = {coarse_ny}")));
        }
        let mut node_to_dof = vec![None; (nx + 1) * (ny + 1)];
        let mut dof_to_node = Vec::with_capacity((nx - 1) * (ny - 1));
        for j in 1..ny {
            for i in 1..nx {
                let n = j * (nx + 1) + i;
                node_to_dof[n] = Some(dof_to_node.len());
                dof_to_node.push(n);
            }
        }
        Ok(TwoScaleMesh { domain, nx, ny, coarse_nx, coarse_ny, node_to_dof, dof_to_node })
    }

    pub fn hx(&self) -> f64 {
        self.domain.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.domain.ly / self.ny as f64
    }

    /// Coarse mesh size `H`, taken as the longer coarse-element side.
    pub fn coarse_h(&self) -> f64 {
        (self.domain.lx / self.coarse_nx as f64).max(self.domain.ly / self.coarse_ny as f64)
    }

    /// Fine cells per coarse element along x and y.
    pub fn cells_per_coarse(&self) -> (usize, usize) {
        (self.nx / self.coarse_nx, self.ny / self.coarse_ny)
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Number of interior fine nodes (`m`).
    pub fn num_dofs(&self) -> usize {
        self.dof_to_node.len()
    }

    pub fn num_coarse_elements(&self) -> usize {
        self.coarse_nx * self.coarse_ny
    }

    /// Number of interior coarse nodes (`N_in`).
    pub fn num_interior_coarse_nodes(&self) -> usize {
        (self.coarse_nx - 1) * (self.coarse_ny - 1)
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_coords(&self, n: usize) -> (f64, f64) {
        let (i, j) = (n % (self.nx + 1), n / (self.nx + 1));
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    pub fn node_to_dof(&self, n: usize) -> Option<usize> {
        self.node_to_dof[n]
    }

    pub fn dof_to_node(&self, d: usize) -> usize {
        self.dof_to_node[d]
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_center(&self, c: usize) -> (f64, f64) {
        let (i, j) = (c % self.nx, c / self.nx);
        ((i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy())
    }

    pub fn cell_to_coarse(&self, c: usize) -> usize {
        let (rx, ry) = self.cells_per_coarse();
        let (i, j) = (c % self.nx, c / self.nx);
        (j / ry) * self.coarse_nx + i / rx
    }

    /// The fine cells making up coarse element `k`, row-major.
    pub fn coarse_cells(&self, k: usize) -> Vec<usize> {
        let b = self.coarse_block(k);
        let mut out = Vec::with_capacity(b.ncx * b.ncy);
        for j in b.j0..b.j0 + b.ncy {
            for i in b.i0..b.i0 + b.ncx {
                out.push(self.cell_index(i, j));
            }
        }
        out
    }

    pub fn coarse_block(&self, k: usize) -> CellBlock {
        let (rx, ry) = self.cells_per_coarse();
        let (ci, cj) = (k % self.coarse_nx, k / self.coarse_nx);
        CellBlock { i0: ci * rx, j0: cj * ry, ncx: rx, ncy: ry }
    }

    /// Grid position `(I, J)` of interior coarse node `k`.
    pub fn interior_coarse_node(&self, k: usize) -> (usize, usize) {
        let w = self.coarse_nx - 1;
        (k % w + 1, k / w + 1)
    }

    /// Interior coarse node index at grid position `(I, J)`, if that node is interior.
    pub fn interior_coarse_index(&self, ci: usize, cj: usize) -> Option<usize> {
        if ci >= 1 && ci < self.coarse_nx && cj >= 1 && cj < self.coarse_ny {
            Some((cj - 1) * (self.coarse_nx - 1) + (ci - 1))
        } else {
            None
        }
    }

    /// Global node index of block-local node `(a, b)`.
    pub fn block_node(&self, block: &CellBlock, a: usize, b: usize) -> usize {
        self.node_index(block.i0 + a, block.j0 + b)
    }

    /// Coarse neighborhood `D_i` of interior coarse node `i` (0-based).
    pub fn neighborhood(&self, i: usize) -> Result<CoarseNeighborhood> {
        if i >= self.num_interior_coarse_nodes() {
            return Err(Error::config(format!(
                "neighborhood index {i} out of range (N_in = {})",
                self.num_interior_coarse_nodes()
            )));
        }
        let (ci, cj) = self.interior_coarse_node(i);
        let (rx, ry) = self.cells_per_coarse();
        let block = CellBlock { i0: (ci - 1) * rx, j0: (cj - 1) * ry, ncx: 2 * rx, ncy: 2 * ry };
        let elements = vec![
            (cj - 1) * self.coarse_nx + (ci - 1),
            (cj - 1) * self.coarse_nx + ci,
            cj * self.coarse_nx + (ci - 1),
            cj * self.coarse_nx + ci,
        ];
        let mut nodes = Vec::with_capacity(block.node_count());
        let mut boundary_local = Vec::new();
        let mut interior_local = Vec::new();
        for b in 0..=block.ncy {
            for a in 0..=block.ncx {
                let local = block.local_node(a, b);
                nodes.push(self.block_node(&block, a, b));
                if block.is_perimeter(a, b) {
                    boundary_local.push(local);
                } else {
                    interior_local.push(local);
                }
            }
        }
        let interior_dofs = interior_local
            .iter()
            .map(|&l| self.node_to_dof(nodes[l]).expect("neighborhood interior lies inside the domain"))
            .collect();
        Ok(CoarseNeighborhood {
            index: i,
            coarse_node: (ci, cj),
            elements,
            block,
            nodes,
            boundary_local,
            interior_local,
            interior_dofs,
        })
    }

    pub fn neighborhoods(&self) -> Vec<CoarseNeighborhood> {
        (0..self.num_interior_coarse_nodes())
            .map(|i| self.neighborhood(i).expect("index in range"))
            .collect()
    }
}

/// Shorthand for [`TwoScaleMesh::new`].
pub fn build_two_scale_mesh(
    domain: Domain,
    nx: usize,
    ny: usize,
    coarse_nx: usize,
    coarse_ny: usize,
) -> Result<TwoScaleMesh> {
    TwoScaleMesh::new(domain, nx, ny, coarse_nx, coarse_ny)
}

/// Union of the (four) coarse elements sharing an interior coarse node.
#[derive(Debug, Clone)]
pub struct CoarseNeighborhood {
    pub index: usize,
    pub coarse_node: (usize, usize),
    pub elements: Vec<usize>,
    pub block: CellBlock,
    /// Global node ids of all block nodes, in block-local order.
    pub nodes: Vec<usize>,
    /// Block-local indices of nodes on the neighborhood boundary (`J_h(D_i)`).
    pub boundary_local: Vec<usize>,
    /// Block-local indices of nodes strictly inside the neighborhood.
    pub interior_local: Vec<usize>,
    /// Global interior-dof indices of `interior_local`, same order.
    pub interior_dofs: Vec<usize>,
}

impl CoarseNeighborhood {
    /// `L_i`, the number of fine nodes on the neighborhood boundary.
    pub fn num_boundary(&self) -> usize {
        self.boundary_local.len()
    }

    /// Whether this neighborhood shares a coarse element with `other`.
    pub fn overlaps(&self, other: &CoarseNeighborhood) -> bool {
        self.coarse_node.0.abs_diff(other.coarse_node.0) <= 1 && self.coarse_node.1.abs_diff(other.coarse_node.1) <= 1
    }
}
