use nalgebra::DVector;

use msrom::assembly::{
    assemble_stiffness, extend_to_nodes, FineSystem, PermeabilityField, SpaceTimeFunction, TimeGrid, Trajectory,
    TRIANGLE_CORNERS,
};
use msrom::config::{parse_config_str, RunConfig};
use msrom::enrichment::{reduced_initial, reduced_step, residual_vector, EnrichmentConfig, LocalResidualSolver};
use msrom::gmsfem::{assemble_multiscale_space, solve_coarse_coefficients, solve_coarse_trajectory, uniform_counts, OfflineData, ReducedStepper};
use msrom::grid::{Domain, TwoScaleMesh};
use msrom::linalg::SolverSettings;
use msrom::pipeline::*;
use msrom::pod::{build_snapshot_bank_in_frame, compute_pod, solve_pod_trajectory};
use msrom::randfield::{build_kle, synth_high_contrast, CovarianceSpec, Truncation};

fn small(overrides: &[&str]) -> RunConfig {
    let mut o: Vec<String> =
        ["mesh.nx=16", "mesh.ny=16", "mesh.NX=4", "mesh.NY=4", "time.t_final=0.2", "samples.train=3", "samples.eval=4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    o.extend(overrides.iter().map(|s| s.to_string()));
    parse_config_str("", &o).unwrap()
}

/// Energy and L² norms of a nodal P1 function by per-triangle formulas.
fn dense_norms(mesh: &TwoScaleMesh, kappa: &PermeabilityField, nodal: &DVector<f64>) -> (f64, f64) {
    let (hx, hy) = (mesh.hx(), mesh.hy());
    let area = 0.5 * hx * hy;
    let (mut ea, mut el) = (0.0, 0.0);
    for j in 0..mesh.ny {
        for i in 0..mesh.nx {
            let c = mesh.cell_index(i, j);
            for corners in TRIANGLE_CORNERS {
                let v: Vec<f64> = corners.iter().map(|&(a, b)| nodal[mesh.node_index(i + a, j + b)]).collect();
                let p: Vec<(f64, f64)> = corners.iter().map(|&(a, b)| (a as f64 * hx, b as f64 * hy)).collect();
                // gradient of the linear interpolant through three points
                let det = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
                let gx = ((v[1] - v[0]) * (p[2].1 - p[0].1) - (v[2] - v[0]) * (p[1].1 - p[0].1)) / det;
                let gy = ((p[1].0 - p[0].0) * (v[2] - v[0]) - (p[2].0 - p[0].0) * (v[1] - v[0])) / det;
                ea += kappa.value(c) * area * (gx * gx + gy * gy);
                el += area / 6.0 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[0] * v[1] + v[1] * v[2] + v[0] * v[2]);
            }
        }
    }
    (ea.sqrt(), el.sqrt())
}

#[test]
fn errors_match_dense_quadrature_on_4x4() {
    let mesh = TwoScaleMesh::new(Domain::unit_square(), 4, 4, 2, 2).unwrap();
    let kappa = PermeabilityField::new(4, 4, (0..16).map(|c| 1.0 + (c * 7 % 5) as f64).collect()).unwrap();
    let sys = FineSystem::new(
        mesh.clone(),
        &SpaceTimeFunction::Constant(1.0),
        &SpaceTimeFunction::Constant(0.0),
        TimeGrid::new(0.1, 0.3).unwrap(),
        SolverSettings::default(),
    );
    let a = assemble_stiffness(&mesh, &kappa).unwrap();
    let reference = sys.solve_fine(&a).unwrap();
    let approx = Trajectory {
        time: reference.time,
        states: reference.states.iter().enumerate().map(|(n, s)| s.map(|v| v * (1.0 - 0.1 * n as f64) + 0.01)).collect(),
    };
    let (ea, el) = compute_errors(&approx, &reference, &a, &sys.mass).unwrap();
    for n in 1..reference.len() {
        let r = extend_to_nodes(&mesh, &reference.states[n]);
        let d = extend_to_nodes(&mesh, &(&reference.states[n] - &approx.states[n]));
        let (ra, rl) = dense_norms(&mesh, &kappa, &r);
        let (da, dl) = dense_norms(&mesh, &kappa, &d);
        assert!((ea[n - 1] - da / ra).abs() < 1e-12, "{} vs {}", ea[n - 1], da / ra);
        assert!((el[n - 1] - dl / rl).abs() < 1e-12);
    }
}

#[test]
fn errors_identity_and_normalization() {
    let mesh = TwoScaleMesh::new(Domain::unit_square(), 8, 8, 2, 2).unwrap();
    let sys = FineSystem::new(
        mesh.clone(),
        &SpaceTimeFunction::Constant(1.0),
        &SpaceTimeFunction::Constant(0.0),
        TimeGrid::new(0.1, 0.5).unwrap(),
        SolverSettings::default(),
    );
    let a = sys.stiffness(&PermeabilityField::constant(&mesh, 2.0).unwrap()).unwrap();
    let u = sys.solve_fine(&a).unwrap();
    let (ea, el) = compute_errors(&u, &u, &a, &sys.mass).unwrap();
    assert!(ea.iter().chain(&el).all(|&e| e == 0.0));
    let zero = Trajectory { time: u.time, states: vec![DVector::zeros(u.states[0].len()); u.len()] };
    let (ea, el) = compute_errors(&zero, &u, &a, &sys.mass).unwrap();
    assert!(ea.iter().chain(&el).all(|&e| (e - 1.0).abs() < 1e-14));
    let (ea, _) = compute_errors(&u, &zero, &a, &sys.mass).unwrap();
    assert!(ea.iter().all(|e| e.is_nan()));
}

#[test]
fn kle_monte_carlo_covariance_matches_truncated_kernel() {
    let (nx, ny) = (10, 10);
    let spec = CovarianceSpec { sigma2: 1.0, eta1: 0.3, eta2: 0.3 };
    let model = build_kle(nx, ny, Domain::unit_square(), vec![0.0; nx * ny], spec, &Truncation::default()).unwrap();
    let pairs = [(0, 0), (0, 1), (12, 45), (55, 56)];
    let draws = 4000;
    let mut acc = vec![0.0; pairs.len()];
    for s in 0..draws {
        let y: Vec<f64> = model.sample(11, s).unwrap().values().iter().map(|v| v.ln()).collect();
        for (k, &(a, b)) in pairs.iter().enumerate() {
            acc[k] += y[a] * y[b];
        }
    }
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let mc = acc[k] / draws as f64;
        let exact = model.truncated_covariance(a, b);
        // five standard errors of a product of unit-variance normals
        assert!((mc - exact).abs() < 5.0 * (2.0f64 / draws as f64).sqrt(), "pair {a},{b}: {mc} vs {exact}");
    }
}

#[test]
fn degenerate_ensemble_step2_equals_step1() {
    let cfg = small(&["kle.sigma2=0", "field.contrast=100", "pod.l=3"]);
    let out = run_method1(&cfg).unwrap();
    let s1 = out.errors.iter().find(|s| s.step == STEP1).unwrap();
    for s in out.errors.iter().filter(|s| s.step == STEP2) {
        for (a, b) in s.e_a.iter().zip(&s1.e_a) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn single_candidate_method2_matches_direct_enrichment() {
    let cfg = small(&["samples.train=1", "basis.counts=\"2+2\"", "field.contrast=100"]);
    let ens = Ensemble::prepare(&cfg).unwrap();
    let one = step_one_method2(&ens, &cfg).unwrap();
    assert_eq!(one.rounds.len(), 1);
    assert_eq!(one.rounds[0].selected, 0);
    let offline = OfflineData::build(&ens.system.mesh, &ens.mean).unwrap();
    let base = assemble_multiscale_space(&offline, &uniform_counts(offline.num_neighborhoods(), 2)).unwrap();
    let a = ens.system.stiffness(&ens.train[0]).unwrap();
    let direct = msrom::enrichment::enrich_trajectory(&ens.system, &a, &base, &cfg.enrichment.with_levels(2)).unwrap();
    assert_eq!(direct.space.dim(), one.space.dim());
    assert_eq!(direct.space.enriched, one.space.enriched);
}

#[test]
fn method2_selected_residuals_do_not_increase() {
    let cfg = small(&["samples.train=4", "basis.counts=\"2+1+1+1\"", "field.contrast=1000"]);
    let ens = Ensemble::prepare(&cfg).unwrap();
    let one = step_one_method2(&ens, &cfg).unwrap();
    let r: Vec<f64> = one.rounds.iter().map(|r| r.selected_residual).collect();
    assert_eq!(r.len(), 3);
    assert!(r.windows(2).all(|w| w[1] <= w[0]), "{r:?}");
}

#[test]
fn full_rank_pod_reproduces_training_trajectory() {
    let cfg = small(&["samples.train=2"]);
    let ens = Ensemble::prepare(&cfg).unwrap();
    let one = step_one_method1(&ens, &cfg).unwrap();
    let sys = &ens.system;
    let a = sys.stiffness(&ens.train[0]).unwrap();
    let c = solve_coarse_coefficients(&one.space.basis, &a, sys).unwrap();
    let bank = build_snapshot_bank_in_frame(&[(0, &c[..])], &one.space.basis, sys.time.dt, 0.05).unwrap();
    let probe = compute_pod(&bank, &a, 1).unwrap();
    let lead = probe.eigenvalues[0];
    let rank = probe.eigenvalues.iter().filter(|&&e| e > msrom::pod::POD_RANK_TOL * lead).count();
    let pod = compute_pod(&bank, &a, rank).unwrap();
    let p = solve_pod_trajectory(&pod, &a, sys).unwrap();
    let ms = solve_coarse_trajectory(&one.space.basis, &a, sys).unwrap();
    for n in 0..ms.len() {
        let d = &ms.states[n] - &p.states[n];
        let scale = a.quad_form(&ms.states[n]).sqrt().max(1e-300);
        assert!(a.quad_form(&d).max(0.0).sqrt() <= 1e-6 * scale.max(1.0), "n = {n}");
    }
}

#[test]
fn error_split_triangle_inequality() {
    let cfg = small(&["samples.train=2", "samples.eval=1", "pod.l=4"]);
    let ens = Ensemble::prepare(&cfg).unwrap();
    let one = step_one_method1(&ens, &cfg).unwrap();
    let two = step_two_training(&ens, &one, 4).unwrap();
    let sys = &ens.system;
    let (aw, ai) = (sys.stiffness(&ens.eval[0]).unwrap(), sys.stiffness(&ens.train[0]).unwrap());
    let uh_w = sys.solve_fine(&aw).unwrap();
    let uh_i = sys.solve_fine(&ai).unwrap();
    let u_coarse_i = solve_coarse_trajectory(&one.space.basis, &ai, sys).unwrap();
    let p_i = solve_pod_trajectory(&two.pod, &ai, sys).unwrap();
    let p_w = solve_pod_trajectory(&two.pod, &aw, sys).unwrap();
    let l2 = |v: &DVector<f64>| sys.mass.quad_form(v).max(0.0).sqrt();
    for n in 0..uh_w.len() {
        let total = l2(&(&uh_w.states[n] - &p_w.states[n]));
        let parts = l2(&(&uh_w.states[n] - &uh_i.states[n]))
            + l2(&(&uh_i.states[n] - &u_coarse_i.states[n]))
            + l2(&(&u_coarse_i.states[n] - &p_i.states[n]))
            + l2(&(&p_i.states[n] - &p_w.states[n]));
        assert!(total <= parts + 1e-10);
    }
}

#[test]
fn local_residual_riesz_identity_and_galerkin_orthogonality() {
    let mesh = TwoScaleMesh::new(Domain::unit_square(), 20, 20, 4, 4).unwrap();
    let kappa = synth_high_contrast(20, 20, 1e3, 3).unwrap();
    let sys = FineSystem::new(
        mesh.clone(),
        &SpaceTimeFunction::Constant(1.0),
        &SpaceTimeFunction::Constant(0.0),
        TimeGrid::new(0.05, 0.2).unwrap(),
        SolverSettings::default(),
    );
    let a = sys.stiffness(&kappa).unwrap();
    let offline = OfflineData::build(&mesh, &kappa).unwrap();
    let space = assemble_multiscale_space(&offline, &uniform_counts(offline.num_neighborhoods(), 2)).unwrap();
    let stepper = ReducedStepper::new(&space.basis, &a, &sys.mass, sys.time.dt).unwrap();
    let prev = reduced_initial(&sys, &space, &stepper);
    let cur = reduced_step(&sys, &space, &stepper, &prev, 1);
    let r = residual_vector(&sys, &a, &prev, &cur, 1);
    let vr = space.basis.project(&r);
    assert!(vr.amax() <= 1e-9 * r.amax(), "Galerkin orthogonality: {} vs {}", vr.amax(), r.amax());

    let local = LocalResidualSolver::new(&mesh, &a).unwrap();
    let report = local.report(&r, 1, 0);
    let mut total = 0.0;
    for i in 0..local.neighborhoods().len() {
        let (beta, norm_sq) = local.representative(i, &r);
        let full = beta.to_dense(mesh.num_dofs());
        // a(β_i, β_i) = R(β_i)
        assert!((a.quad_form(&full) - norm_sq).abs() <= 1e-10 * norm_sq.max(1e-30));
        assert!((beta.dot(&r) - norm_sq).abs() <= 1e-10 * norm_sq.max(1e-30));
        total += norm_sq;
    }
    assert!((report.global.powi(2) - total).abs() <= 1e-12 * total);
    let _ = EnrichmentConfig::default();
}

#[test]
fn report_over_hand_rows() {
    let text = "step,sample_id,t,e_a,e_l2\n\
                step2,0,1,0.1,0.01\n\
                step2,1,1,0.2,0.02\n\
                step2,2,1,0.4,0.04\n\
                step2,3,1,0.3,0.03\n\
                step2,4,1,0.5,0.05\n";
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("errors.csv"), text).unwrap();
    let rows = report(&dir.path().join("errors.csv"), &dir.path().join("stats.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].mean_ea - 0.3).abs() < 1e-15);
    assert!((rows[0].var_ea - 0.025).abs() < 1e-15);
    assert!((rows[0].mean_el2 - 0.03).abs() < 1e-15);
    assert!((rows[0].var_el2 - 0.00025).abs() < 1e-17);
    let stats = std::fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    assert!(stats.starts_with("t,step,mean_ea,var_ea,mean_el2,var_el2\n1,step2,"));
}

#[test]
fn artifacts_round_trip_and_repeat_bitwise() {
    let cfg = small(&["pod.l=6"]);
    let out = run_method1(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path(), &cfg.build_mesh().unwrap()).unwrap();
    let back = read_errors_csv(std::fs::File::open(dir.path().join("errors.csv")).unwrap()).unwrap();
    assert_eq!(back.len(), out.errors.len());
    for (a, b) in back.iter().zip(&out.errors) {
        assert_eq!(a.e_a, b.e_a);
        assert_eq!(a.times, b.times);
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(json["schema"], RUN_SCHEMA);
    assert_eq!(json["config"]["pod"]["l"], 6);
    assert_eq!(json["artifacts"]["errors.csv"], ERRORS_SCHEMA);
    let pod = msrom::randfield::read_raster(std::fs::File::open(dir.path().join("pod.bin")).unwrap()).unwrap();
    assert_eq!(pod.len(), 6);

    let again = run_method1(&cfg).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_errors_csv(&mut x, &out.errors).unwrap();
    write_errors_csv(&mut y, &again.errors).unwrap();
    assert_eq!(x, y);
}
