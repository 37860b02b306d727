//! Scenario runners: assemble otto objects from a parsed config, integrate,
//! and emit the per-step table plus end-of-run diagnostics.
//!
//! Every runner follows the same discipline: catalog lookups and parameter
//! validation fail as config errors, anything the running simulation reports
//! fails as numeric, and rows are written through the deterministic float
//! formatter so a rerun reproduces the same bytes.

use otto::geometry::Manifold;
use otto::hodge::WeightedHodgeSolver;
use otto::integrators::{integrate_manifold_sde, BrownianDriver, Scheme};
use otto::mckean_vlasov::{
    picard_solve, self_consistent_step_solve, standard_test_functions, verify_wasserstein_sde,
    MKVProblem,
};
use otto::submersion::HopfFibration;
use otto::wasserstein::{w2_circle_grids, w2_circle_m, GridDensity, Measure};
use otto::wtransport::{
    equivariant_decompose_d, stochastic_parallel_transport_p_from, DiscreteDiffeo, MapMeasure,
    RightInvariantField, TransportState,
};
use otto::TAU;
use serde::Serialize;

use crate::artifacts::{fmt_lenient, manifest, write_run, OutDir, Table};
use crate::config::{
    measure_family, mkv_field, parse_seeds, ri_field, DecomposeCfg, HarmonicSpec, HopfCfg,
    InvariantsCfg, ManifoldSdeCfg, MkvCfg, RotationSpec, Scenario, WtransportCfg,
};
use crate::{cfg, cfg_from, num_from, suite, Failure};

pub fn run(sc: &Scenario, raw: &[u8]) -> Result<(), Failure> {
    match sc {
        Scenario::ManifoldSde(c) => manifold_sde(c, raw),
        Scenario::Hopf(c) => hopf(c, raw),
        Scenario::Mkv(c) => mkv(c, raw),
        Scenario::Wtransport(c) => wtransport(c, raw),
        Scenario::Decompose(c) => decompose(c, raw),
        Scenario::Invariants(c) => invariants(c, raw),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// SplitMix64 of (seed, index) keeps per-path streams disjoint across seeds.
fn path_seed(seed: u64, p: u64) -> u64 {
    let mut z = seed ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rotation_velocity(specs: &[RotationSpec], x: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; x.len()];
    for s in specs {
        let [i, j] = s.plane;
        v[i] -= s.amplitude * x[j];
        v[j] += s.amplitude * x[i];
    }
    v
}

fn validate_plane(m: Manifold, plane: [usize; 2], name: &str) -> Result<(), Failure> {
    let d = m.ambient_dim();
    let [i, j] = plane;
    if i == j || i >= d || j >= d {
        return Err(cfg(format!(
            "rotation plane [{i},{j}] is not a coordinate plane of R^{d}"
        )));
    }
    // Only rotations inside each defining circle stay tangent to the torus.
    if matches!(m, Manifold::Torus2) {
        let lo = i.min(j);
        let hi = i.max(j);
        if (lo, hi) != (0, 1) && (lo, hi) != (2, 3) {
            return Err(cfg(format!(
                "rotation plane [{i},{j}] is not tangent to {name}; use [0,1] or [2,3]"
            )));
        }
    }
    Ok(())
}

fn base_point(m: Manifold) -> Vec<f64> {
    let raw: &[f64] = match m.ambient_dim() {
        2 => &[1.0, 0.0],
        3 => &[0.0, 0.0, 1.0],
        _ => &[1.0, 0.0, 1.0, 0.0],
    };
    m.closest_point(raw)
        .expect("canonical seed point lies inside the tube")
}

#[derive(Serialize)]
struct SdeSeedDiag {
    seed: String,
    max_constraint: f64,
    max_drift_violation: f64,
    terminal_mean_disp: f64,
}

#[derive(Serialize)]
struct SdeDiagnostics {
    kind: &'static str,
    scheme: String,
    paths: usize,
    per_seed: Vec<SdeSeedDiag>,
}

fn manifold_sde(c: &ManifoldSdeCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    let m = Manifold::by_name(&c.manifold)
        .ok_or_else(|| cfg(format!("unknown manifold '{}'", c.manifold)))?;
    let scheme = match c.scheme.as_str() {
        "ito" => Scheme::ItoProjected,
        "stratonovich" => Scheme::StratonovichHeun,
        other => return Err(cfg(format!("unknown scheme '{other}'"))),
    };
    for spec in c.drift.iter().chain(&c.noise) {
        validate_plane(m, spec.plane, &c.manifold)?;
    }
    if c.params.paths == 0 {
        return Err(cfg("paths must be positive"));
    }
    let seeds = parse_seeds(&c.seeds)?;
    let x0 = base_point(m);
    let drift_specs = c.drift.clone();
    let drift = move |_t: f64, x: &[f64]| rotation_velocity(&drift_specs, x);
    let noise_fns: Vec<Box<dyn Fn(&[f64]) -> Vec<f64>>> = c
        .noise
        .iter()
        .map(|&s| {
            Box::new(move |x: &[f64]| rotation_velocity(&[s], x))
                as Box<dyn Fn(&[f64]) -> Vec<f64>>
        })
        .collect();
    let noise_refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> =
        noise_fns.iter().map(|b| b.as_ref()).collect();

    let multi = seeds.len() > 1;
    let mut header = vec!["t", "max_constraint", "mean_disp"];
    if multi {
        header.push("seed");
    }
    let mut table = Table::new(&header);
    let mut per_seed = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let mut max_c: Vec<f64> = Vec::new();
        let mut sum_d: Vec<f64> = Vec::new();
        let mut max_viol: f64 = 0.0;
        for p in 0..c.params.paths {
            let driver = BrownianDriver::new(
                c.noise.len(),
                c.params.t_end,
                c.params.h,
                path_seed(seed, p as u64),
            )
            .map_err(cfg_from)?;
            let sample = integrate_manifold_sde(&m, &x0, &drift, &noise_refs, &driver, scheme)
                .map_err(num_from)?;
            if max_c.is_empty() {
                max_c = vec![0.0; sample.points.len()];
                sum_d = vec![0.0; sample.points.len()];
            }
            for (k, pt) in sample.points.iter().enumerate() {
                max_c[k] = max_c[k].max(m.constraint_violation(pt));
                sum_d[k] += dist(pt, &x0);
            }
            max_viol = max_viol.max(sample.max_drift_violation);
        }
        let tail: &[&str] = if multi { &[&c.seeds[si]] } else { &[] };
        for k in 0..max_c.len() {
            let t = k as f64 * c.params.h;
            table.push_f64(&[t, max_c[k], sum_d[k] / c.params.paths as f64], tail)?;
        }
        per_seed.push(SdeSeedDiag {
            seed: c.seeds[si].clone(),
            max_constraint: max_c.iter().fold(0.0, |a, &b| a.max(b)),
            max_drift_violation: max_viol,
            terminal_mean_disp: sum_d.last().copied().unwrap_or(0.0) / c.params.paths as f64,
        });
    }
    let diag = SdeDiagnostics {
        kind: "manifold_sde",
        scheme: c.scheme.clone(),
        paths: c.params.paths,
        per_seed,
    };
    write_run(&out, &table, &diag, &manifest("manifold_sde", raw, &c.seeds))
}

struct S3Run {
    points: Vec<Vec<f64>>,
    /// Constraint violation of the unprojected Heun update at each step.
    gaps: Vec<f64>,
}

fn strat_heun_s3(
    fib: &HopfFibration,
    fields: &[(HarmonicSpec, f64)],
    q0: &[f64],
    driver: &BrownianDriver,
) -> Result<S3Run, Failure> {
    let m = fib.total();
    let base = fib.base();
    let h = driver.h();
    let vel = |q: &[f64], spec: &HarmonicSpec, omega: f64| -> Vec<f64> {
        let y = fib.project(q);
        let g = base.tangent_project(&y, &spec.ambient_gradient(&y));
        let mut w = fib.horizontal_lift_vector(q, &g);
        if omega != 0.0 {
            for (wi, vi) in w.iter_mut().zip(fib.vertical_generator(q)) {
                *wi += omega * vi;
            }
        }
        w
    };
    let mut q = m.closest_point(q0).map_err(cfg_from)?;
    let mut points = vec![q.clone()];
    let mut gaps = vec![0.0];
    for k in 0..driver.steps() {
        let mut xi = Vec::with_capacity(fields.len());
        xi.push(h);
        for ch in 0..driver.channels() {
            xi.push(driver.increments(ch)[k]);
        }
        let step = |at: &[f64]| -> Vec<f64> {
            let mut d = vec![0.0; at.len()];
            for ((spec, omega), &w) in fields.iter().zip(&xi) {
                for (di, vi) in d.iter_mut().zip(vel(at, spec, *omega)) {
                    *di += w * vi;
                }
            }
            d
        };
        let d1 = step(&q);
        let pred: Vec<f64> = q.iter().zip(&d1).map(|(&a, &b)| a + b).collect();
        let pred = m.closest_point(&pred).map_err(num_from)?;
        let d2 = step(&pred);
        let raw: Vec<f64> = q
            .iter()
            .zip(d1.iter().zip(&d2))
            .map(|(&a, (&u, &v))| a + 0.5 * (u + v))
            .collect();
        gaps.push(m.constraint_violation(&raw));
        q = m.closest_point(&raw).map_err(num_from)?;
        points.push(q.clone());
    }
    Ok(S3Run { points, gaps })
}

#[derive(Serialize)]
struct HopfSeedDiag {
    seed: String,
    terminal_phase: f64,
    /// Ambient distance between the first and last projected base points.
    base_return_gap: f64,
    /// Largest base mismatch between the full and the purely horizontal run.
    base_pair_gap: f64,
    max_step_gap: f64,
}

#[derive(Serialize)]
struct HopfDiagnostics {
    kind: &'static str,
    per_seed: Vec<HopfSeedDiag>,
}

fn hopf(c: &HopfCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    let fib = HopfFibration;
    if !c.vertical_noise.is_empty() && c.vertical_noise.len() != c.noise.len() {
        return Err(cfg(format!(
            "vertical_noise has {} entries for {} noise channels",
            c.vertical_noise.len(),
            c.noise.len()
        )));
    }
    let mut omegas = c.vertical_noise.clone();
    omegas.resize(c.noise.len(), 0.0);
    let seeds = parse_seeds(&c.seeds)?;
    let q0 = [1.0, 0.0, 0.0, 0.0];

    let fields: Vec<(HarmonicSpec, f64)> = std::iter::once((c.drift, c.vertical_drift))
        .chain(c.noise.iter().copied().zip(omegas.iter().copied()))
        .collect();
    let hfields: Vec<(HarmonicSpec, f64)> = fields.iter().map(|&(s, _)| (s, 0.0)).collect();

    let multi = seeds.len() > 1;
    let mut header = vec!["t", "base_x", "base_y", "base_z", "phase", "step_gap"];
    if multi {
        header.push("seed");
    }
    let mut table = Table::new(&header);
    let mut per_seed = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let driver = BrownianDriver::new(c.noise.len(), c.params.t_end, c.params.h, seed)
            .map_err(cfg_from)?;
        let full = strat_heun_s3(&fib, &fields, &q0, &driver)?;
        let horiz = strat_heun_s3(&fib, &hfields, &q0, &driver)?;
        let tail: &[&str] = if multi { &[&c.seeds[si]] } else { &[] };
        let mut base_pair_gap = 0.0f64;
        let mut max_step_gap = 0.0f64;
        let mut phase = 0.0;
        for (k, (q, qh)) in full.points.iter().zip(&horiz.points).enumerate() {
            let t = k as f64 * c.params.h;
            let y = fib.project(q);
            phase = fib.fiber_phase(qh, q);
            base_pair_gap = base_pair_gap.max(dist(&y, &fib.project(qh)));
            max_step_gap = max_step_gap.max(full.gaps[k]);
            table.push_f64(&[t, y[0], y[1], y[2], phase, full.gaps[k]], tail)?;
        }
        let first = fib.project(&full.points[0]);
        let last = fib.project(full.points.last().expect("run has points"));
        per_seed.push(HopfSeedDiag {
            seed: c.seeds[si].clone(),
            terminal_phase: phase,
            base_return_gap: dist(&first, &last),
            base_pair_gap,
            max_step_gap,
        });
    }
    let diag = HopfDiagnostics { kind: "hopf", per_seed };
    write_run(&out, &table, &diag, &manifest("hopf", raw, &c.seeds))
}

#[derive(Serialize)]
struct WindowDiag {
    t_start: f64,
    t_end: f64,
    gaps: Vec<f64>,
}

#[derive(Serialize)]
struct MkvSeedDiag {
    seed: String,
    iterations: usize,
    windows: Vec<WindowDiag>,
    halvings: usize,
    monotonicity_violations: usize,
    residual_sup: f64,
    w2_terminal: f64,
}

#[derive(Serialize)]
struct MkvDiagnostics {
    kind: &'static str,
    solver: String,
    ensemble: usize,
    per_seed: Vec<MkvSeedDiag>,
}

fn mkv(c: &MkvCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    if c.manifold != "circle" {
        return Err(cfg("measure dynamics run on the circle"));
    }
    let initial = measure_family(&c.initial, c.params.n)?;
    let seeds = parse_seeds(&c.seeds)?;
    let tests = standard_test_functions();

    let multi = seeds.len() > 1;
    let mut header: Vec<String> = vec!["t".into(), "w2_to_initial".into()];
    for tf in &tests {
        header.push(format!("f_{}", tf.name()));
    }
    for tf in &tests {
        header.push(format!("r_{}", tf.name()));
    }
    if multi {
        header.push("seed".into());
    }
    let mut table = Table::new(&header);
    let mut per_seed = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        // Fields carry boxed closures, so they are rebuilt for every seed.
        let mut fields = vec![mkv_field(&c.drift)?];
        for nv in &c.noise {
            fields.push(mkv_field(nv)?);
        }
        let problem = MKVProblem::new(
            Manifold::Circle,
            fields,
            Measure::Grid(initial.clone()),
            c.params.ensemble,
            c.params.h,
            c.params.t_end,
            seed,
        )
        .map_err(cfg_from)?;
        let sol = match c.solver.as_str() {
            "picard" => picard_solve(&problem, c.params.tol, c.params.max_iter),
            "self_consistent" => self_consistent_step_solve(&problem),
            other => return Err(cfg(format!("unknown solver '{other}'"))),
        }
        .map_err(num_from)?;
        let flow = &sol.flow;
        let steps = flow.steps();
        let path: Vec<Measure> = (0..=steps)
            .map(|k| Measure::Cloud(flow.measure_at(k)))
            .collect();
        let driver = problem.driver().map_err(cfg_from)?;
        let report =
            verify_wasserstein_sde(&path, &problem.fields, &tests, &driver).map_err(num_from)?;
        let m0 = path[0].clone();
        let tail: &[&str] = if multi { &[&c.seeds[si]] } else { &[] };
        let mut w2 = 0.0;
        for k in 0..=steps {
            // Reporting resolution: 1024 quantile samples are ~1e-5 accurate,
            // a decade below anything a per-step plot can show.
            w2 = w2_circle_m(&path[k], &m0, 1024).map_err(num_from)?;
            let mut row = vec![flow.t(k), w2];
            for tf in &tests {
                row.push(tf.mean_under(&path[k]));
            }
            for fr in &report.per_function {
                row.push(fr.path[k]);
            }
            table.push_f64(&row, tail)?;
        }
        per_seed.push(MkvSeedDiag {
            seed: c.seeds[si].clone(),
            iterations: sol.diagnostics.iterations,
            windows: sol
                .diagnostics
                .windows
                .iter()
                .map(|w| WindowDiag {
                    t_start: w.t_start,
                    t_end: w.t_end,
                    gaps: w.gaps.clone(),
                })
                .collect(),
            halvings: sol.diagnostics.halvings,
            monotonicity_violations: sol.diagnostics.monotonicity_violations,
            residual_sup: report.sup,
            w2_terminal: w2,
        });
    }
    let diag = MkvDiagnostics {
        kind: "mkv",
        solver: c.solver.clone(),
        ensemble: c.params.ensemble,
        per_seed,
    };
    write_run(&out, &table, &diag, &manifest("mkv", raw, &c.seeds))
}

/// Exactness of the Helmholtz split of the state's base field; the tangent
/// vector is stored through its samples, so this measures how well the grid
/// readback reassembles it.
fn hodge_residual(state: &TransportState) -> Result<f64, Failure> {
    let field = state.tangent.field_on_grid().map_err(num_from)?;
    let solver =
        WeightedHodgeSolver::new(state.tangent.base().rho().clone()).map_err(num_from)?;
    let refs: Vec<&[f64]> = field.iter().map(|c| c.as_slice()).collect();
    let split = solver.hodge_split(&refs).map_err(num_from)?;
    Ok(split.residual)
}

#[derive(Serialize)]
struct WtSeedDiag {
    seed: String,
    norm_drift: f64,
    max_verticality: f64,
    max_fiber_gap: f64,
    max_reconstruction_error: f64,
    max_hf_fraction: f64,
}

#[derive(Serialize)]
struct WtDiagnostics {
    kind: &'static str,
    per_seed: Vec<WtSeedDiag>,
}

fn wtransport(c: &WtransportCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    let n = c.params.n;
    let mu0 = measure_family(&c.initial, n)?;
    let v0 = c.v0.tangent_potential(n)?;
    let mut fields = vec![c.drift.gradient_field()?];
    for p in &c.noise {
        fields.push(p.gradient_field()?);
    }
    let seeds = parse_seeds(&c.seeds)?;
    let phi0 = DiscreteDiffeo::from_quantile(&mu0).map_err(cfg_from)?;
    let phi_off = phi0.compose_rotation(c.fiber_offset).map_err(cfg_from)?;

    let multi = seeds.len() > 1;
    let mut header = vec![
        "t",
        "norm",
        "verticality",
        "fiber_gap",
        "reconstruction_error",
    ];
    if multi {
        header.push("seed");
    }
    let mut table = Table::new(&header);
    let mut per_seed = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let driver = BrownianDriver::new(c.noise.len(), c.params.t_end, c.params.h, seed)
            .map_err(cfg_from)?;
        let states =
            stochastic_parallel_transport_p_from(&phi0, &fields, &v0, &driver).map_err(num_from)?;
        let states_off = stochastic_parallel_transport_p_from(&phi_off, &fields, &v0, &driver)
            .map_err(num_from)?;
        let tail: &[&str] = if multi { &[&c.seeds[si]] } else { &[] };
        let mut d = WtSeedDiag {
            seed: c.seeds[si].clone(),
            norm_drift: 0.0,
            max_verticality: 0.0,
            max_fiber_gap: 0.0,
            max_reconstruction_error: 0.0,
            max_hf_fraction: 0.0,
        };
        let norm0 = states[0].norm;
        for (s, so) in states.iter().zip(&states_off) {
            let (ga, _) = s.base_horizontal().map_err(num_from)?;
            let (gb, _) = so.base_horizontal().map_err(num_from)?;
            let fiber_gap = sup(&ga.gradient(), &gb.gradient());
            let rec = hodge_residual(s)?;
            table.push_f64(&[s.t, s.norm, s.verticality, fiber_gap, rec], tail)?;
            d.norm_drift = d.norm_drift.max((s.norm - norm0).abs());
            d.max_verticality = d.max_verticality.max(s.verticality);
            d.max_fiber_gap = d.max_fiber_gap.max(fiber_gap);
            d.max_reconstruction_error = d.max_reconstruction_error.max(rec);
            d.max_hf_fraction = d.max_hf_fraction.max(s.hf_fraction);
        }
        per_seed.push(d);
    }
    let diag = WtDiagnostics {
        kind: "wtransport",
        per_seed,
    };
    write_run(&out, &table, &diag, &manifest("wtransport", raw, &c.seeds))
}

/// Heun integration of the unsplit right-invariant system, kept independent
/// of the factorised route so the reconstruction gap is a real comparison.
fn direct_flow(
    fields: &[RightInvariantField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<Vec<Vec<f64>>, otto::Error> {
    let h = driver.h();
    let coeff = |state: &[f64]| -> Result<Vec<Vec<f64>>, otto::Error> {
        let d = DiscreteDiffeo::new_1d(state.to_vec())?;
        let rho = d.rho().clone();
        let phip = d.derivative_at_nodes();
        let wrapped: Vec<f64> = state.iter().map(|&x| x.rem_euclid(TAU)).collect();
        fields
            .iter()
            .map(|f| {
                let mut v = f.z.eval_batch(&wrapped, &rho);
                if let Some(y) = &f.y {
                    let cc = y.coefficient(&MapMeasure::new(state));
                    for (vi, &dp) in v.iter_mut().zip(&phip) {
                        *vi += cc * TAU * dp;
                    }
                }
                Ok(v)
            })
            .collect()
    };
    let mut x = phi0.phi_1d().to_vec();
    let mut path = vec![x.clone()];
    for k in 0..driver.steps() {
        let mut xi = vec![h];
        for ch in 0..driver.channels() {
            xi.push(driver.increments(ch)[k]);
        }
        let k1 = coeff(&x)?;
        let mut pred = x.clone();
        for (ci, &w) in k1.iter().zip(&xi) {
            for (p, &v) in pred.iter_mut().zip(ci) {
                *p += w * v;
            }
        }
        let k2 = coeff(&pred)?;
        for j in 0..x.len() {
            let mut dx = 0.0;
            for (i, &w) in xi.iter().enumerate() {
                dx += 0.5 * w * (k1[i][j] + k2[i][j]);
            }
            x[j] += dx;
        }
        path.push(x.clone());
    }
    Ok(path)
}

#[derive(Serialize)]
struct DecomposeSeedDiag {
    seed: String,
    theta_terminal: f64,
    max_reconstruction_gap: f64,
    max_w2_gauge: f64,
}

#[derive(Serialize)]
struct DecomposeDiagnostics {
    kind: &'static str,
    per_seed: Vec<DecomposeSeedDiag>,
}

fn decompose(c: &DecomposeCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    if c.fields.is_empty() {
        return Err(cfg("need at least the drift field"));
    }
    let n = c.params.n;
    let mu0 = measure_family(&c.initial, n)?;
    let phi0 = DiscreteDiffeo::from_quantile(&mu0).map_err(cfg_from)?;
    let seeds = parse_seeds(&c.seeds)?;
    let uniform = GridDensity::uniform(n);

    let multi = seeds.len() > 1;
    let mut header = vec!["t", "theta", "w2_gauge", "reconstruction_gap"];
    if multi {
        header.push("seed");
    }
    let mut table = Table::new(&header);
    let mut per_seed = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let fields: Vec<RightInvariantField> =
            c.fields.iter().map(ri_field).collect::<Result<_, _>>()?;
        let driver = BrownianDriver::new(c.fields.len() - 1, c.params.t_end, c.params.h, seed)
            .map_err(cfg_from)?;
        let decomp = equivariant_decompose_d(&fields, &phi0, &driver).map_err(num_from)?;
        let direct = direct_flow(&fields, &phi0, &driver).map_err(num_from)?;
        let tail: &[&str] = if multi { &[&c.seeds[si]] } else { &[] };
        let mut d = DecomposeSeedDiag {
            seed: c.seeds[si].clone(),
            theta_terminal: 0.0,
            max_reconstruction_gap: 0.0,
            max_w2_gauge: 0.0,
        };
        for (k, direct_k) in direct.iter().enumerate() {
            let t = k as f64 * c.params.h;
            let theta = decomp.theta[k];
            let gap = sup(&decomp.reconstructed(k), direct_k);
            let gauge: Vec<f64> = (0..n).map(|j| TAU * j as f64 / n as f64 + theta).collect();
            let w2g = uniform
                .pushforward_1d(&gauge)
                .and_then(|g| w2_circle_grids(&g, &uniform))
                .map_err(num_from)?;
            table.push_f64(&[t, theta, w2g, gap], tail)?;
            d.theta_terminal = theta;
            d.max_reconstruction_gap = d.max_reconstruction_gap.max(gap);
            d.max_w2_gauge = d.max_w2_gauge.max(w2g);
        }
        per_seed.push(d);
    }
    let diag = DecomposeDiagnostics {
        kind: "decompose",
        per_seed,
    };
    write_run(&out, &table, &diag, &manifest("decompose", raw, &c.seeds))
}

#[derive(Serialize)]
struct CheckDiag {
    name: &'static str,
    value: f64,
    bound: f64,
    pass: bool,
}

#[derive(Serialize)]
struct InvariantsDiagnostics {
    kind: &'static str,
    all_pass: bool,
    checks: Vec<CheckDiag>,
}

fn invariants(c: &InvariantsCfg, raw: &[u8]) -> Result<(), Failure> {
    let out = OutDir::create(&c.out_dir)?;
    let checks = suite::battery()?;
    let mut table = Table::new(&["check", "value", "bound", "pass"]);
    for ch in &checks {
        table.push(vec![
            ch.name.to_string(),
            fmt_lenient(ch.value),
            fmt_lenient(ch.bound),
            ch.pass().to_string(),
        ]);
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|ch| !ch.pass())
        .map(|ch| ch.name)
        .collect();
    let diag = InvariantsDiagnostics {
        kind: "invariants",
        all_pass: failed.is_empty(),
        checks: checks
            .iter()
            .map(|ch| CheckDiag {
                name: ch.name,
                value: ch.value,
                bound: ch.bound,
                pass: ch.pass(),
            })
            .collect(),
    };
    let no_seeds: Vec<String> = Vec::new();
    write_run(&out, &table, &diag, &manifest("invariants", raw, &no_seeds))?;
    if !failed.is_empty() {
        return Err(Failure::Invariant(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}
