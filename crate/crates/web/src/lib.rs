//! Browser bindings for three small msrom experiments. Each export has a plain
//! Rust counterpart so the logic also runs (and is tested) natively.

use wasm_bindgen::prelude::*;

use msrom::assembly::extend_to_nodes;
use msrom::config::{parse_config_str, RunConfig};
use msrom::gmsfem::solve_coarse_trajectory;
use msrom::grid::Domain;
use msrom::pipeline::{evaluate, step_one_method1, step_two_training, Ensemble};
use msrom::pod::{build_snapshot_bank_in_frame, compute_pod, POD_RANK_TOL};
use msrom::randfield::{build_kle, synth_high_contrast, CovarianceSpec, Truncation};
use msrom::Result;

fn config(n: usize, coarse: usize, contrast: f64, extra: &[String]) -> Result<RunConfig> {
    let mut o = vec![
        format!("mesh.nx={n}"),
        format!("mesh.ny={n}"),
        format!("mesh.NX={coarse}"),
        format!("mesh.NY={coarse}"),
        format!("field.contrast={contrast}"),
        "time.t_final=0.2".to_string(),
    ];
    o.extend_from_slice(extra);
    parse_config_str("", &o)
}

/// `ln κ` of one KLE sample on an `n × n` grid, row-major by cell.
pub fn log_permeability_sample(n: usize, sigma2: f64, eta: f64, contrast: f64, seed: u64) -> Result<Vec<f64>> {
    let mean = synth_high_contrast(n, n, contrast, 0)?;
    let spec = CovarianceSpec { sigma2, eta1: eta, eta2: eta };
    let mean_log = mean.values().iter().map(|v| v.ln()).collect();
    let model = build_kle(n, n, Domain::unit_square(), mean_log, spec, &Truncation::default())?;
    Ok(model.sample(seed, 0)?.values().iter().map(|v| v.ln()).collect())
}

/// Fine and multiscale solutions on the mean field.
#[wasm_bindgen]
pub struct Comparison {
    fine: Vec<f64>,
    coarse: Vec<f64>,
    energy_errors: Vec<f64>,
    dim: usize,
}

#[wasm_bindgen]
impl Comparison {
    /// Final-time fine solution on the `(n+1) × (n+1)` nodes.
    #[wasm_bindgen(getter)]
    pub fn fine(&self) -> Vec<f64> {
        self.fine.clone()
    }

    /// Final-time multiscale solution on the same nodes.
    #[wasm_bindgen(getter)]
    pub fn coarse(&self) -> Vec<f64> {
        self.coarse.clone()
    }

    /// Relative energy error per time level.
    #[wasm_bindgen(getter)]
    pub fn energy_errors(&self) -> Vec<f64> {
        self.energy_errors.clone()
    }

    /// Multiscale space dimension.
    #[wasm_bindgen(getter)]
    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub fn compare_solutions(n: usize, coarse: usize, contrast: f64, counts: &str) -> Result<Comparison> {
    let cfg = config(n, coarse, contrast, &[format!("basis.counts=\"{counts}\""), "samples.train=1".into(), "samples.eval=1".into()])?;
    let ens = Ensemble::prepare(&cfg)?;
    let one = step_one_method1(&ens, &cfg)?;
    let sys = &ens.system;
    let fine = sys.solve_fine(&one.mean_stiffness)?;
    let ms = solve_coarse_trajectory(&one.space.basis, &one.mean_stiffness, sys)?;
    let last = fine.len() - 1;
    Ok(Comparison {
        fine: extend_to_nodes(&sys.mesh, &fine.states[last]).iter().copied().collect(),
        coarse: extend_to_nodes(&sys.mesh, &ms.states[last]).iter().copied().collect(),
        energy_errors: one.error.e_a,
        dim: one.space.dim(),
    })
}

/// Mean final-time energy error of the POD solve for `l = 1, 2, …` up to
/// `max_l` or the numerical rank of the training bank.
pub fn pod_error_curve(n: usize, coarse: usize, contrast: f64, train: usize, max_l: usize) -> Result<Vec<f64>> {
    let cfg = config(n, coarse, contrast, &[format!("samples.train={train}"), "samples.eval=4".into()])?;
    let ens = Ensemble::prepare(&cfg)?;
    let one = step_one_method1(&ens, &cfg)?;
    let two = step_two_training(&ens, &one, 1)?;
    let q = two.q_samples.iter().copied().fold(0.0, f64::max);
    let views: Vec<(usize, &[nalgebra::DVector<f64>])> =
        two.coefficients.iter().enumerate().map(|(i, c)| (ens.train_ids[i], &c[..])).collect();
    let bank = build_snapshot_bank_in_frame(&views, &one.space.basis, ens.system.time.dt, q)?;
    let lead = two.pod.eigenvalues[0];
    let rank = two.pod.eigenvalues.iter().filter(|&&e| e > POD_RANK_TOL * lead).count();
    let pods = (1..=max_l.min(rank)).map(|l| compute_pod(&bank, &one.mean_stiffness, l)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = pods.iter().collect();
    let ev = evaluate(&ens, None, &refs)?;
    Ok(ev
        .step3
        .iter()
        .map(|per| per.iter().map(|s| *s.e_a.last().expect("non-empty")).sum::<f64>() / per.len() as f64)
        .collect())
}

fn js(e: msrom::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = logPermeabilitySample)]
pub fn log_permeability_sample_js(n: usize, sigma2: f64, eta: f64, contrast: f64, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    log_permeability_sample(n, sigma2, eta, contrast, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = compareSolutions)]
pub fn compare_solutions_js(n: usize, coarse: usize, contrast: f64, counts: &str) -> std::result::Result<Comparison, JsError> {
    compare_solutions(n, coarse, contrast, counts).map_err(js)
}

#[wasm_bindgen(js_name = podErrorCurve)]
pub fn pod_error_curve_js(n: usize, coarse: usize, contrast: f64, train: usize, max_l: usize) -> std::result::Result<Vec<f64>, JsError> {
    pod_error_curve(n, coarse, contrast, train, max_l).map_err(js)
}
