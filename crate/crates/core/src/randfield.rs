//! Karhunen-Loève model of a Gaussian log-permeability, field sampling, raster I/O
//! and synthetic high-contrast fields.
//!
//! The covariance `σ² exp(-|x₁-z₁|²/η₁² - |x₂-z₂|²/η₂²)` is a product of two 1-D
//! kernels, and on a uniform cell grid the Nyström matrix `W^{1/2} C W^{1/2}` is the
//! Kronecker product of two 1-D matrices. Its eigenpairs are products of the 1-D
//! eigenpairs, which is how [`build_kle`] solves it. [`build_kle_dense`] assembles
//! the full matrix and is kept as a cross-check for small grids.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assembly::PermeabilityField;
use crate::error::{Error, Result};
use crate::grid::Domain;
use crate::linalg::{fix_column_signs, symmetric_eigen_ascending};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sigma2: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0) || !(self.eta1 > 0.0) || !(self.eta2 > 0.0) {
            return Err(Error::config(format!(
                "covariance needs sigma2 >= 0 and positive correlation lengths (got {}, {}, {})",
                self.sigma2, self.eta1, self.eta2
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: (f64, f64), z: (f64, f64)) -> f64 {
        let (dx, dy) = (x.0 - z.0, x.1 - z.1);
        self.sigma2 * (-(dx * dx) / (self.eta1 * self.eta1) - (dy * dy) / (self.eta2 * self.eta2)).exp()
    }
}

/// How many KLE terms to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Smallest `N` with `Σ_{i≤N} λ_i ≥ energy · Σ λ`.
    pub energy: f64,
    pub max_modes: usize,
    /// Overrides the energy rule when set.
    pub modes: Option<usize>,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { energy: 0.95, max_modes: 100, modes: None }
    }
}

/// Default size limit of the dense KLE path.
pub const DENSE_KLE_LIMIT: usize = 3600;

/// Truncated KLE on the fine cells.
#[derive(Debug, Clone, PartialEq)]
pub struct KleModel {
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
    /// `Ȳ` per cell.
    pub mean_log: Vec<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of all discrete eigenvalues (`σ²|Ω|`).
    pub total_energy: f64,
    /// Cells × `N`, orthonormal in the area-weighted inner product.
    pub modes: DMatrix<f64>,
    pub covariance: CovarianceSpec,
}

impl KleModel {
    pub fn num_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn cell_area(&self) -> f64 {
        self.domain.area() / (self.nx * self.ny) as f64
    }

    pub fn captured_energy(&self) -> f64 {
        if self.total_energy == 0.0 {
            1.0
        } else {
            self.eigenvalues.iter().sum::<f64>() / self.total_energy
        }
    }

    /// `κ̄ = exp(Ȳ)`
    pub fn mean_field(&self) -> Result<PermeabilityField> {
        PermeabilityField::new(self.nx, self.ny, self.mean_log.iter().map(|y| y.exp()).collect())
    }

    /// `κ = exp(Ȳ + Σ ξ_i √λ_i f_i)`
    pub fn sample_field(&self, xi: &[f64]) -> Result<PermeabilityField> {
        if xi.len() != self.num_modes() {
            return Err(Error::config(format!("draw has {} coefficients, model has {} modes", xi.len(), self.num_modes())));
        }
        let w = DVector::from_iterator(xi.len(), xi.iter().zip(&self.eigenvalues).map(|(x, l)| x * l.sqrt()));
        let y = &self.modes * w;
        PermeabilityField::new(self.nx, self.ny, self.mean_log.iter().zip(y.iter()).map(|(m, v)| (m + v).exp()).collect())
    }

    /// Truncated covariance `Σ λ_i f_i(x) f_i(z)` between cells `a` and `b`.
    pub fn truncated_covariance(&self, a: usize, b: usize) -> f64 {
        (0..self.num_modes()).map(|i| self.eigenvalues[i] * self.modes[(a, i)] * self.modes[(b, i)]).sum()
    }

    pub fn sample(&self, seed: u64, stream: u64) -> Result<PermeabilityField> {
        self.sample_field(&draw_coefficients(self.num_modes(), seed, stream))
    }
}

/// `N` iid standard normal coefficients from the stream `(seed, stream)`.
pub fn draw_coefficients(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn cell_centres(n: usize, len: f64) -> Vec<f64> {
    let h = len / n as f64;
    (0..n).map(|i| (i as f64 + 0.5) * h).collect()
}

/// 1-D symmetric Nyström problem: eigenvalues descending and modes scaled to unit
/// `h`-weighted norm.
fn nystrom_1d(n: usize, len: f64, eta: f64) -> (Vec<f64>, DMatrix<f64>) {
    let h = len / n as f64;
    let c = cell_centres(n, len);
    let k = DMatrix::from_fn(n, n, |i, j| h * (-(c[i] - c[j]).powi(2) / (eta * eta)).exp());
    let (vals, mut vecs) = symmetric_eigen_ascending(k);
    fix_column_signs(&mut vecs);
    let mut out_vals = Vec::with_capacity(n);
    let mut out = DMatrix::zeros(n, n);
    for (dst, src) in (0..n).rev().enumerate() {
        out_vals.push(vals[src].max(0.0));
        out.set_column(dst, &(vecs.column(src) / h.sqrt()));
    }
    (out_vals, out)
}

fn truncation_count(sorted: &[f64], total: f64, rule: &Truncation) -> Result<usize> {
    if let Some(n) = rule.modes {
        if n > sorted.len() {
            return Err(Error::config(format!("requested {n} KLE modes, grid has only {}", sorted.len())));
        }
        return Ok(n);
    }
    if !(rule.energy > 0.0 && rule.energy <= 1.0) {
        return Err(Error::config(format!("KLE energy fraction {} must lie in (0, 1]", rule.energy)));
    }
    if total == 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (i, &l) in sorted.iter().enumerate() {
        acc += l;
        if acc >= rule.energy * total * (1.0 - 1e-14) {
            return Ok((i + 1).min(rule.max_modes));
        }
    }
    Ok(sorted.len().min(rule.max_modes))
}

fn check_inputs(nx: usize, ny: usize, mean_log: &[f64], spec: &CovarianceSpec) -> Result<()> {
    spec.validate()?;
    if mean_log.len() != nx * ny {
        return Err(Error::config(format!("mean log-field has {} values, expected {}", mean_log.len(), nx * ny)));
    }
    if mean_log.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("mean log-field contains non-finite values"));
    }
    Ok(())
}

/// Builds the truncated KLE on the `nx × ny` cell grid of `domain`.
pub fn build_kle(
    nx: usize,
    ny: usize,
    domain: Domain,
    mean_log: Vec<f64>,
    spec: CovarianceSpec,
    rule: &Truncation,
) -> Result<KleModel> {
    check_inputs(nx, ny, &mean_log, &spec)?;
    let (mx, fx) = nystrom_1d(nx, domain.lx, spec.eta1);
    let (my, fy) = nystrom_1d(ny, domain.ly, spec.eta2);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(nx * ny);
    for (a, &u) in mx.iter().enumerate() {
        for (b, &v) in my.iter().enumerate() {
            pairs.push((spec.sigma2 * u * v, a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    let sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let total = spec.sigma2 * domain.area();
    let n = truncation_count(&sorted, total, rule)?;
    let mut modes = DMatrix::zeros(nx * ny, n);
    for (k, &(_, a, b)) in pairs.iter().take(n).enumerate() {
        for j in 0..ny {
            for i in 0..nx {
                modes[(j * nx + i, k)] = fx[(i, a)] * fy[(j, b)];
            }
        }
    }
    Ok(KleModel { nx, ny, domain, mean_log, eigenvalues: sorted[..n].to_vec(), total_energy: total, modes, covariance: spec })
}

/// Same model from the full `(nx·ny)²` covariance matrix; refuses grids larger
/// than `limit` cells.
pub fn build_kle_dense(
    nx: usize,
    ny: usize,
    domain: Domain,
    mean_log: Vec<f64>,
    spec: CovarianceSpec,
    rule: &Truncation,
    limit: usize,
) -> Result<KleModel> {
    check_inputs(nx, ny, &mean_log, &spec)?;
    let cells = nx * ny;
    if cells > limit {
        return Err(Error::config(format!(
            "dense KLE on {cells} cells exceeds the limit of {limit}; use a coarser KLE grid"
        )));
    }
    let area = domain.area() / cells as f64;
    let (cx, cy) = (cell_centres(nx, domain.lx), cell_centres(ny, domain.ly));
    let centre = |c: usize| (cx[c % nx], cy[c / nx]);
    let k = DMatrix::from_fn(cells, cells, |a, b| area * spec.eval(centre(a), centre(b)));
    let (vals, mut vecs) = symmetric_eigen_ascending(k);
    fix_column_signs(&mut vecs);
    let sorted: Vec<f64> = (0..cells).rev().map(|i| vals[i].max(0.0)).collect();
    let n = truncation_count(&sorted, spec.sigma2 * domain.area(), rule)?;
    let mut modes = DMatrix::zeros(cells, n);
    for k in 0..n {
        modes.set_column(k, &(vecs.column(cells - 1 - k) / area.sqrt()));
    }
    Ok(KleModel {
        nx,
        ny,
        domain,
        mean_log,
        eigenvalues: sorted[..n].to_vec(),
        total_energy: spec.sigma2 * domain.area(),
        modes,
        covariance: spec,
    })
}

/// Background-1 field with meandering high-permeability channels and inclusions of
/// value `contrast`; `max / min = contrast` exactly.
pub fn synth_high_contrast(nx: usize, ny: usize, contrast: f64, seed: u64) -> Result<PermeabilityField> {
    if !(contrast >= 1.0) || !contrast.is_finite() {
        return Err(Error::config(format!("contrast {contrast} must be a finite value >= 1")));
    }
    if nx < 2 || ny < 2 {
        return Err(Error::config("synthetic field needs at least 2 x 2 cells"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut high = vec![false; nx * ny];
    let channels = (ny / 10).max(1);
    let width = (ny as f64 / 20.0).max(1.0);
    for c in 0..channels {
        let base = (c as f64 + 0.5) / channels as f64 * ny as f64;
        let amp = rng.random_range(0.5..2.0) * width;
        let freq = rng.random_range(1.0..3.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for i in 0..nx {
            let centre = base + amp * (freq * std::f64::consts::TAU * i as f64 / nx as f64 + phase).sin();
            for j in 0..ny {
                if (j as f64 + 0.5 - centre).abs() < 0.5 * width {
                    high[j * nx + i] = true;
                }
            }
        }
    }
    let inclusions = (nx * ny / 100).max(1);
    for _ in 0..inclusions {
        let (ci, cj) = (rng.random_range(0..nx), rng.random_range(0..ny));
        let (wi, wj) = (rng.random_range(1..=2.max(nx / 20)), rng.random_range(1..=2.max(ny / 20)));
        for j in cj..(cj + wj).min(ny) {
            for i in ci..(ci + wi).min(nx) {
                high[j * nx + i] = true;
            }
        }
    }
    high[0] = false;
    high[nx * ny - 1] = true;
    PermeabilityField::new(nx, ny, high.iter().map(|&h| if h { contrast } else { 1.0 }).collect())
}

/// One `nx × ny` array of a raster file, row-major by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterRecord {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

pub const RASTER_MAGIC: &str = "msrom-field v1";

pub fn write_raster<W: Write>(mut w: W, records: &[RasterRecord]) -> Result<()> {
    for r in records {
        if r.values.len() != r.nx * r.ny {
            return Err(Error::Format(format!("record has {} values, expected {}", r.values.len(), r.nx * r.ny)));
        }
        writeln!(w, "{RASTER_MAGIC} {} {}", r.nx, r.ny)?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_raster<R: Read>(r: R) -> Result<Vec<RasterRecord>> {
    let mut r = BufReader::new(r);
    let mut out = Vec::new();
    loop {
        let mut header = Vec::new();
        if r.read_until(b'\n', &mut header)? == 0 {
            break;
        }
        let text = std::str::from_utf8(&header).map_err(|_| Error::Format("raster header is not text".into()))?;
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != 4 || format!("{} {}", parts[0], parts[1]) != RASTER_MAGIC {
            return Err(Error::Format(format!("bad raster header '{}'", text.trim_end())));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad raster dimension '{s}'")));
        let (nx, ny) = (parse(parts[2])?, parse(parts[3])?);
        let mut bytes = vec![0u8; nx * ny * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Format("raster data is truncated".into()))?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(RasterRecord { nx, ny, values });
    }
    Ok(out)
}

/// `ny` lines of `nx` comma-separated values; line `j` holds cell row `j`.
pub fn read_csv_field<R: Read>(r: R) -> Result<RasterRecord> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut values = Vec::new();
    let mut nx = None;
    let mut ny = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(format!("CSV field: {e}")))?;
        if nx.is_some_and(|n| n != rec.len()) {
            return Err(Error::Format(format!("CSV field row {ny} has {} values, expected {}", rec.len(), nx.unwrap())));
        }
        nx = Some(rec.len());
        for s in rec.iter() {
            values.push(s.parse::<f64>().map_err(|_| Error::Format(format!("CSV field: bad number '{s}'")))?);
        }
        ny += 1;
    }
    let nx = nx.ok_or_else(|| Error::Format("CSV field is empty".into()))?;
    Ok(RasterRecord { nx, ny, values })
}

pub fn write_field(path: &Path, field: &PermeabilityField) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let rec = RasterRecord { nx: field.nx(), ny: field.ny(), values: field.values().to_vec() };
    write_raster(std::io::BufWriter::new(f), &[rec])
}

/// Reads a raster (first record) or CSV field and checks it against `nx × ny`.
pub fn ingest_field(path: &Path, nx: usize, ny: usize) -> Result<PermeabilityField> {
    let bytes = std::fs::read(path)?;
    let rec = if bytes.starts_with(RASTER_MAGIC.as_bytes()) {
        read_raster(&bytes[..])?.into_iter().next().ok_or_else(|| Error::Format("raster file is empty".into()))?
    } else {
        read_csv_field(&bytes[..])?
    };
    if rec.nx != nx || rec.ny != ny {
        return Err(Error::config(format!(
            "field file {} is {} x {} but the fine grid is {nx} x {ny}",
            path.display(),
            rec.nx,
            rec.ny
        )));
    }
    PermeabilityField::new(nx, ny, rec.values)
}
