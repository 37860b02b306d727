//! Measure-coupled particle dynamics on the circle: common-noise ensembles,
//! Picard iteration on the frozen measure path, a pathwise Itô check for
//! measure functionals, and the dual density SPDE.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::integrators::BrownianDriver;
use crate::spectral;
use crate::wasserstein::{
    hessian_potential, w2_circle_m, wrap, GridDensity, Measure, ParticleCloud, TangentPotential,
};
use crate::TAU;

/// Pointwise evaluator produced by a field once the measure has been folded.
pub type PointFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Grid size for kernel-density estimates requested by density-based fields.
const KDE_GRID: usize = 256;

/// Time slices per window when estimating sup_t Ŵ₂ between iterate paths.
const GAP_TIME_SLICES: usize = 16;

/// Quantile samples per Ŵ₂ evaluation in the gap metric.
const GAP_QUANTILE_SAMPLES: usize = 512;

/// Particle count above which batch evaluation and updates go through rayon.
const PAR_MIN: usize = 4096;

/// The ensemble at one instant. `density` is present exactly when some field
/// in the problem asked for a kernel-density estimate.
pub struct MeasureSnapshot<'a> {
    pub cloud: &'a ParticleCloud,
    pub density: Option<&'a GridDensity>,
}

/// Vector field Z(x, μ) on the circle. `prepare` folds the measure once per
/// step and returns the pointwise map, so per-particle evaluation never
/// touches μ again; interaction kernels reduce to trig moments this way.
pub struct MKVField {
    name: String,
    smooth: bool,
    kde_grid: Option<usize>,
    prepare: Box<dyn Fn(&MeasureSnapshot) -> Result<PointFn> + Send + Sync>,
}

/// Kernel K in the interaction drift Z(x, μ) = −λ ∫ K(x−y) dμ(y).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKernel {
    Sine,
    Cosine,
}

impl MKVField {
    pub fn measure_free(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let f = Arc::new(f);
        Self {
            name: name.into(),
            smooth: true,
            kde_grid: None,
            prepare: Box::new(move |_| {
                let f = f.clone();
                Ok(Box::new(move |x| f(x)))
            }),
        }
    }

    pub fn zero() -> Self {
        Self::measure_free("zero", |_| 0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::measure_free(format!("constant({c})"), move |_| c)
    }

    /// Z = ∇(a·φ) for a named potential φ from the scenario catalog.
    pub fn gradient_potential(expr: &str, amplitude: f64) -> Result<Self> {
        let a = amplitude;
        let f: PointFn = match expr {
            "cos" => Box::new(move |x: f64| -a * x.sin()),
            "sin" => Box::new(move |x: f64| a * x.cos()),
            "cos2" => Box::new(move |x: f64| -2.0 * a * (2.0 * x).sin()),
            "sin2" => Box::new(move |x: f64| 2.0 * a * (2.0 * x).cos()),
            other => {
                return Err(Error::BadGrid(format!("unknown potential expression '{other}'")))
            }
        };
        let f = Arc::new(f);
        Ok(Self {
            name: format!("gradient_potential({expr},{amplitude})"),
            smooth: true,
            kde_grid: None,
            prepare: Box::new(move |_| {
                let f = f.clone();
                Ok(Box::new(move |x| f(x)))
            }),
        })
    }

    /// Z(x, μ) = −λ ∫ K(x−y) dμ(y), evaluated through first trig moments of
    /// the measure. The sine kernel is the gradient of the cosine
    /// interaction energy, so the field stays gradient-form.
    pub fn interaction(kernel: InteractionKernel, strength: f64) -> Self {
        let kname = match kernel {
            InteractionKernel::Sine => "sin",
            InteractionKernel::Cosine => "cos",
        };
        Self {
            name: format!("interaction({kname},{strength})"),
            smooth: true,
            kde_grid: None,
            prepare: Box::new(move |snap| {
                let (c1, s1) = snap.cloud.trig_moment(1);
                Ok(match kernel {
                    InteractionKernel::Sine => {
                        Box::new(move |x: f64| -strength * (x.sin() * c1 - x.cos() * s1))
                    }
                    InteractionKernel::Cosine => {
                        Box::new(move |x: f64| -strength * (x.cos() * c1 + x.sin() * s1))
                    }
                })
            }),
        }
    }

    /// Z = −s ∇log ρ. Declares a density requirement: particle ensembles are
    /// smoothed onto a grid before this field sees them.
    pub fn entropy_drift(strength: f64) -> Self {
        Self {
            name: format!("entropy_drift({strength})"),
            smooth: true,
            kde_grid: Some(KDE_GRID),
            prepare: Box::new(move |snap| {
                let rho = snap.density.ok_or_else(|| {
                    Error::BadGrid("entropy drift needs a density snapshot".into())
                })?;
                let grad = if rho.is_smooth() {
                    rho.grad_log()?
                } else {
                    // Near-vacuum snapshots are floored so the evaluator
                    // stays total; the SPDE clamp lives below this level.
                    let floored: Vec<f64> =
                        rho.values().iter().map(|v| v.max(1e-8)).collect();
                    GridDensity::new_1d(floored)?.grad_log()?
                };
                Ok(Box::new(move |x| -strength * lerp_periodic(&grad, x)))
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth
    }

    pub fn kde_grid(&self) -> Option<usize> {
        self.kde_grid
    }

    /// Batch evaluation at wrapped positions. Order-preserving, so parallel
    /// evaluation is deterministic.
    pub fn eval(&self, xs: &[f64], snap: &MeasureSnapshot) -> Result<Vec<f64>> {
        let f = (self.prepare)(snap)?;
        Ok(if xs.len() >= PAR_MIN {
            xs.par_iter().with_min_len(1024).map(|&x| f(wrap(x))).collect()
        } else {
            xs.iter().map(|&x| f(wrap(x))).collect()
        })
    }

    /// Evaluation against a grid density (the SPDE and verification route).
    pub fn eval_on_density(&self, xs: &[f64], rho: &GridDensity) -> Result<Vec<f64>> {
        let cloud = rho.to_cloud();
        self.eval(xs, &MeasureSnapshot { cloud: &cloud, density: Some(rho) })
    }
}

fn lerp_periodic(samples: &[f64], x: f64) -> f64 {
    let n = samples.len();
    let t = wrap(x) / (TAU / n as f64);
    let j = (t.floor() as usize) % n;
    let frac = t - t.floor();
    samples[j] * (1.0 - frac) + samples[(j + 1) % n] * frac
}

/// A measure-coupled SDE on the circle: dX = Z₀(X, μ)dt + Σ Zᵢ(X, μ)dWⁱ with
/// μ_t the law of X_t. `fields[0]` drives dt, the rest drive one Brownian
/// channel each, shared by every particle (common noise).
pub struct MKVProblem {
    pub manifold: Manifold,
    pub fields: Vec<MKVField>,
    pub initial: Measure,
    pub ensemble: usize,
    pub h: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl MKVProblem {
    pub fn new(
        manifold: Manifold,
        fields: Vec<MKVField>,
        initial: Measure,
        ensemble: usize,
        h: f64,
        horizon: f64,
        seed: u64,
    ) -> Result<Self> {
        if manifold != Manifold::Circle {
            return Err(Error::BadGrid(
                "measure dynamics are implemented on the circle".into(),
            ));
        }
        if fields.is_empty() {
            return Err(Error::BadGrid("need at least the drift field Z0".into()));
        }
        if ensemble < 2 {
            return Err(Error::BadGrid("ensemble size must be at least 2".into()));
        }
        Ok(Self { manifold, fields, initial, ensemble, h, horizon, seed })
    }

    /// Fresh driver on the problem's grid with one channel per noise field.
    pub fn driver(&self) -> Result<BrownianDriver> {
        BrownianDriver::new(self.fields.len() - 1, self.horizon, self.h, self.seed)
    }

    /// Stratified sample of the initial measure: quantiles at midpoints of
    /// equal-mass slabs. A uniform-weight cloud of matching size passes
    /// through unchanged. Sorted ascending so the lifted flow starts
    /// monotone.
    pub fn initial_particles(&self) -> Result<Vec<f64>> {
        let p = self.ensemble;
        let mut pts = match &self.initial {
            Measure::Grid(g) => (0..p)
                .map(|i| g.quantile((i as f64 + 0.5) / p as f64))
                .collect::<Result<Vec<f64>>>()?,
            Measure::Cloud(c) => {
                let uniform = c
                    .weights()
                    .iter()
                    .all(|&w| (w - 1.0 / c.len() as f64).abs() < 1e-12);
                if uniform && c.len() == p {
                    c.points().to_vec()
                } else {
                    let mut idx: Vec<usize> = (0..c.len()).collect();
                    idx.sort_by(|&a, &b| c.points()[a].total_cmp(&c.points()[b]));
                    let mut out = Vec::with_capacity(p);
                    let mut cum = 0.0;
                    let mut at = 0;
                    for i in 0..p {
                        let s = (i as f64 + 0.5) / p as f64;
                        while at + 1 < idx.len() && cum + c.weights()[idx[at]] < s {
                            cum += c.weights()[idx[at]];
                            at += 1;
                        }
                        out.push(c.points()[idx[at]]);
                    }
                    out
                }
            }
        };
        pts.sort_by(f64::total_cmp);
        Ok(pts)
    }
}

/// Common-noise ensemble trajectory. `states[k][p]` is the lifted position of
/// particle p at time kh; lifted coordinates keep the sorted-initial order
/// observable, and wrapping happens when measures are built.
#[derive(Debug, Clone)]
pub struct ParticleFlow {
    pub h: f64,
    pub states: Vec<Vec<f64>>,
}

impl ParticleFlow {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("flow has at least the initial state")
    }

    /// Empirical measure at step k; shares the flow's own position data, so
    /// pushforward consistency of the measure path is structural.
    pub fn measure_at(&self, k: usize) -> ParticleCloud {
        ParticleCloud::uniform_weights(self.states[k].clone())
    }

    pub fn measure_path(&self) -> Vec<Measure> {
        (0..self.states.len()).map(|k| Measure::Cloud(self.measure_at(k))).collect()
    }

    /// Adjacent-pair order violations of the lifted flow across all recorded
    /// steps, the 1-D proxy for the flow map staying a homeomorphism.
    pub fn monotonicity_violations(&self) -> usize {
        let mut count = 0;
        for s in &self.states {
            for w in s.windows(2) {
                if w[1] < w[0] {
                    count += 1;
                }
            }
        }
        count
    }
}

/// One Picard iterate on the active window.
pub struct PicardState {
    pub n: usize,
    pub states: Vec<Vec<f64>>,
    pub gap: f64,
}

/// Gap sequence of one accepted window.
#[derive(Debug, Clone)]
pub struct WindowReport {
    pub t_start: f64,
    pub t_end: f64,
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PicardDiagnostics {
    pub windows: Vec<WindowReport>,
    pub halvings: usize,
    pub iterations: usize,
    pub monotonicity_violations: usize,
}

#[derive(Debug)]
pub struct MKVSolution {
    pub flow: ParticleFlow,
    pub diagnostics: PicardDiagnostics,
}

impl MKVSolution {
    pub fn measure_at(&self, k: usize) -> ParticleCloud {
        self.flow.measure_at(k)
    }

    pub fn measure_path(&self) -> Vec<Measure> {
        self.flow.measure_path()
    }
}

fn check_driver(problem: &MKVProblem, driver: &BrownianDriver) -> Result<()> {
    if driver.channels() + 1 != problem.fields.len() {
        return Err(Error::BadGrid(format!(
            "driver has {} channels but the problem has {} noise fields",
            driver.channels(),
            problem.fields.len() - 1
        )));
    }
    Ok(())
}

/// One Euler–Maruyama pass over driver steps [k0, k1). `frozen` supplies the
/// measure at each step (Picard); `None` reads the live ensemble. Fields see
/// the left-point state and measure; every particle shares the channel
/// increments.
fn sweep(
    fields: &[MKVField],
    start: &[f64],
    frozen: Option<&[Vec<f64>]>,
    driver: &BrownianDriver,
    k0: usize,
    k1: usize,
) -> Result<Vec<Vec<f64>>> {
    let h = driver.h();
    let kde_n = fields.iter().filter_map(|f| f.kde_grid()).max();
    let mut states = Vec::with_capacity(k1 - k0 + 1);
    states.push(start.to_vec());
    let mut x = start.to_vec();
    for k in k0..k1 {
        let measure_pts = match frozen {
            Some(path) => &path[k - k0],
            None => &x,
        };
        let cloud = ParticleCloud::uniform_weights(measure_pts.clone());
        let density = match kde_n {
            Some(n) => Some(cloud.to_grid(n, None)?),
            None => None,
        };
        let snap = MeasureSnapshot { cloud: &cloud, density: density.as_ref() };
        let vals = fields
            .iter()
            .map(|f| f.eval(&x, &snap))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let dw: Vec<f64> = (1..fields.len()).map(|i| driver.increments(i - 1)[k]).collect();
        // Per-particle summation order is fixed, so the parallel update is
        // deterministic.
        let update = |(p, xp): (usize, &mut f64)| {
            let mut dxp = h * vals[0][p];
            for (i, w) in dw.iter().enumerate() {
                dxp += vals[i + 1][p] * w;
            }
            *xp += dxp;
        };
        if x.len() >= PAR_MIN {
            x.par_iter_mut().enumerate().with_min_len(1024).for_each(update);
        } else {
            x.iter_mut().enumerate().for_each(update);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { norm: f64::INFINITY });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// sup_t Ŵ₂ between two ensemble paths over a fixed time subsample (window
/// endpoint always included; both paths share the start state).
fn path_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let len = a.len() - 1;
    if len == 0 {
        return Ok(0.0);
    }
    let stride = (len / GAP_TIME_SLICES).max(1);
    let mut sup = 0.0f64;
    let mut k = stride.min(len);
    loop {
        let wa = Measure::Cloud(ParticleCloud::uniform_weights(a[k].clone()));
        let wb = Measure::Cloud(ParticleCloud::uniform_weights(b[k].clone()));
        sup = sup.max(w2_circle_m(&wa, &wb, GAP_QUANTILE_SAMPLES)?);
        if k == len {
            break;
        }
        k = (k + stride).min(len);
    }
    Ok(sup)
}

pub fn picard_solve(problem: &MKVProblem, tol: f64, max_iter: usize) -> Result<MKVSolution> {
    let driver = problem.driver()?;
    picard_solve_with(problem, &driver, tol, max_iter)
}

/// Windowed Picard iteration with a caller-supplied driver (whose grid is the
/// time grid; pass a refined driver for dyadic refinement studies). Each
/// iterate re-integrates the whole window against the frozen measure path of
/// the previous iterate, with the same Brownian increments. Windows restart
/// from the converged endpoint; the window length is halved until the first
/// observed gap ratio contracts below 0.9.
pub fn picard_solve_with(
    problem: &MKVProblem,
    driver: &BrownianDriver,
    tol: f64,
    max_iter: usize,
) -> Result<MKVSolution> {
    if tol <= 0.0 {
        return Err(Error::BadGrid("picard tolerance must be positive".into()));
    }
    check_driver(problem, driver)?;
    let steps = driver.steps();
    let mut flow_states: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    flow_states.push(problem.initial_particles()?);
    let mut diag = PicardDiagnostics::default();
    let mut win_len = steps;
    let mut k0 = 0usize;
    'windows: while k0 < steps {
        let len = win_len.min(steps - k0);
        let start = flow_states[k0].clone();
        let mut frozen: Vec<Vec<f64>> = vec![start.clone(); len + 1];
        let mut gaps: Vec<f64> = Vec::new();
        loop {
            if diag.iterations >= max_iter {
                return Err(Error::NoConvergence {
                    iterations: diag.iterations,
                    last_gap: gaps.last().copied().unwrap_or(f64::INFINITY),
                    gaps,
                });
            }
            diag.iterations += 1;
            let states = sweep(&problem.fields, &start, Some(&frozen), driver, k0, k0 + len)?;
            let gap = path_gap(&states, &frozen)?;
            let state = PicardState { n: gaps.len() + 1, states, gap };
            gaps.push(state.gap);
            if state.gap <= tol {
                diag.windows.push(WindowReport {
                    t_start: k0 as f64 * driver.h(),
                    t_end: (k0 + len) as f64 * driver.h(),
                    gaps,
                });
                let mut states = state.states;
                for s in states.drain(1..) {
                    flow_states.push(s);
                }
                k0 += len;
                continue 'windows;
            }
            // A contracting window exists but its size is not known a
            // priori; shrink until the first observed ratio contracts.
            if gaps.len() == 2 && state.gap >= 0.9 * gaps[0] && len > 1 {
                diag.halvings += 1;
                win_len = (len / 2).max(1);
                continue 'windows;
            }
            frozen = state.states;
        }
    }
    let flow = ParticleFlow { h: driver.h(), states: flow_states };
    diag.monotonicity_violations = flow.monotonicity_violations();
    Ok(MKVSolution { flow, diagnostics: diag })
}

pub fn self_consistent_step_solve(problem: &MKVProblem) -> Result<MKVSolution> {
    let driver = problem.driver()?;
    self_consistent_step_solve_with(problem, &driver)
}

/// Single-sweep baseline: the measure each step is the live ensemble. Agrees
/// with `picard_solve` within O(h) + O(P^{-1/2}).
pub fn self_consistent_step_solve_with(
    problem: &MKVProblem,
    driver: &BrownianDriver,
) -> Result<MKVSolution> {
    check_driver(problem, driver)?;
    let start = problem.initial_particles()?;
    let states = sweep(&problem.fields, &start, None, driver, 0, driver.steps())?;
    let flow = ParticleFlow { h: driver.h(), states };
    let violations = flow.monotonicity_violations();
    Ok(MKVSolution {
        flow,
        diagnostics: PicardDiagnostics {
            windows: Vec::new(),
            halvings: 0,
            iterations: 1,
            monotonicity_violations: violations,
        },
    })
}

/// Smooth observable f with derivatives, defining F_f(μ) = ∫ f dμ.
pub struct TestFunction {
    name: String,
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    df: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    d2f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), f: Box::new(f), df: Box::new(df), d2f: Box::new(d2f) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    /// F_f(μ).
    pub fn mean_under(&self, mu: &Measure) -> f64 {
        match mu {
            Measure::Cloud(c) => c
                .points()
                .iter()
                .zip(c.weights())
                .map(|(&x, &w)| w * (self.f)(x))
                .sum(),
            Measure::Grid(g) => {
                let vals: Vec<f64> = g.nodes().iter().map(|&x| (self.f)(x)).collect();
                g.integrate(&vals)
            }
        }
    }
}

pub fn standard_test_functions() -> Vec<TestFunction> {
    vec![
        TestFunction::new("cos", f64::cos, |x| -x.sin(), |x| -x.cos()),
        TestFunction::new("sin", f64::sin, f64::cos, |x| -x.sin()),
        TestFunction::new(
            "cos2x",
            |x| (2.0 * x).cos(),
            |x| -2.0 * (2.0 * x).sin(),
            |x| -4.0 * (2.0 * x).cos(),
        ),
    ]
}

#[derive(Debug, Clone)]
pub struct FunctionResidual {
    pub name: String,
    /// sup_k of the absolute Itô residual along the path.
    pub sup: f64,
    pub terminal: f64,
    /// Residual at every grid time, for per-step reporting.
    pub path: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SdeResidualReport {
    pub per_function: Vec<FunctionResidual>,
    pub sup: f64,
}

/// Pathwise Itô check: for each test function f the report carries
/// F_f(μ_t) − F_f(μ₀) − Σᵢ ∫ L̄_{Zᵢ}F_f dWⁱ − ∫ (L̄_{Z₀}F_f + ½ Σᵢ H̄F_f(Zᵢ,Zᵢ)) dt
/// with left-point sums on the driver grid. The residual is O(h^{1/2})
/// pathwise for a path that solves the SDE on the same grid. Grid measures
/// take the Hessian term through `hessian_potential` on the gradient part of
/// each field plus the exact correction for its harmonic (mean) part.
pub fn verify_wasserstein_sde(
    path: &[Measure],
    fields: &[MKVField],
    tests: &[TestFunction],
    driver: &BrownianDriver,
) -> Result<SdeResidualReport> {
    if path.len() != driver.steps() + 1 {
        return Err(Error::BadGrid(format!(
            "path has {} states for {} driver steps",
            path.len(),
            driver.steps()
        )));
    }
    if fields.is_empty() || fields.len() != driver.channels() + 1 {
        return Err(Error::BadGrid(
            "need one drift field plus one field per driver channel".into(),
        ));
    }
    let h = driver.h();
    let kde_n = fields.iter().filter_map(|f| f.kde_grid()).max();
    let f0: Vec<f64> = tests.iter().map(|tf| tf.mean_under(&path[0])).collect();
    let mut sums = vec![0.0; tests.len()];
    let mut residuals: Vec<Vec<f64>> = vec![Vec::with_capacity(path.len()); tests.len()];
    for k in 0..path.len() {
        for (j, tf) in tests.iter().enumerate() {
            residuals[j].push(tf.mean_under(&path[k]) - f0[j] - sums[j]);
        }
        if k == driver.steps() {
            break;
        }
        match &path[k] {
            Measure::Cloud(c) => {
                let density = match kde_n {
                    Some(n) => Some(c.to_grid(n, None)?),
                    None => None,
                };
                let snap = MeasureSnapshot { cloud: c, density: density.as_ref() };
                let xs = c.points();
                let w = c.weights();
                let zvals = fields
                    .iter()
                    .map(|f| f.eval(xs, &snap))
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                for (j, tf) in tests.iter().enumerate() {
                    let mut drift = 0.0;
                    let mut hess = 0.0;
                    for p in 0..xs.len() {
                        drift += w[p] * (tf.df)(xs[p]) * zvals[0][p];
                        let d2 = (tf.d2f)(xs[p]);
                        for zi in zvals.iter().skip(1) {
                            hess += w[p] * d2 * zi[p] * zi[p];
                        }
                    }
                    let mut inc = h * (drift + 0.5 * hess);
                    for (i, zi) in zvals.iter().enumerate().skip(1) {
                        let lbar: f64 = (0..xs.len())
                            .map(|p| w[p] * (tf.df)(xs[p]) * zi[p])
                            .sum();
                        inc += lbar * driver.increments(i - 1)[k];
                    }
                    sums[j] += inc;
                }
            }
            Measure::Grid(g) => {
                let nodes = g.nodes();
                let zvals = fields
                    .iter()
                    .map(|f| f.eval_on_density(&nodes, g))
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                for (j, tf) in tests.iter().enumerate() {
                    let fg: Vec<f64> = nodes.iter().map(|&x| (tf.f)(x)).collect();
                    let dfg: Vec<f64> = nodes.iter().map(|&x| (tf.df)(x)).collect();
                    let d2fg: Vec<f64> = nodes.iter().map(|&x| (tf.d2f)(x)).collect();
                    let prod0: Vec<f64> =
                        (0..nodes.len()).map(|p| dfg[p] * zvals[0][p]).collect();
                    let mut inc = h * g.integrate(&prod0);
                    for (i, zi) in zvals.iter().enumerate().skip(1) {
                        let c: f64 = zi.iter().sum::<f64>() / zi.len() as f64;
                        let centered: Vec<f64> = zi.iter().map(|v| v - c).collect();
                        let psi = TangentPotential::new(spectral::antiderivative_mean_zero(
                            &centered,
                        ));
                        let hp = hessian_potential(&fg, g, &psi, &psi);
                        let corr: Vec<f64> = (0..nodes.len())
                            .map(|p| d2fg[p] * (2.0 * c * centered[p] + c * c))
                            .collect();
                        inc += 0.5 * h * (hp + g.integrate(&corr));
                        let lvec: Vec<f64> =
                            (0..nodes.len()).map(|p| dfg[p] * zi[p]).collect();
                        inc += g.integrate(&lvec) * driver.increments(i - 1)[k];
                    }
                    sums[j] += inc;
                }
            }
        }
    }
    let per_function: Vec<FunctionResidual> = tests
        .iter()
        .zip(residuals)
        .map(|(tf, path)| {
            let sup = path.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            FunctionResidual {
                name: tf.name.clone(),
                sup,
                terminal: *path.last().expect("residual path is nonempty"),
                path,
            }
        })
        .collect();
    let sup = per_function.iter().fold(0.0f64, |m, fr| m.max(fr.sup));
    Ok(SdeResidualReport { per_function, sup })
}

#[derive(Debug, Clone)]
pub struct DensityPath {
    pub path: Vec<GridDensity>,
    /// Grid nodes lifted back to the positivity floor, summed over steps.
    pub clamp_events: usize,
}

/// Spectral IMEX step of the measure SPDE
/// dρ = −div(ρZ₀)dt − Σ div(ρZᵢ)dWⁱ + ½ Σ div(div(ρZᵢ)Zᵢ)dt.
/// The stiff half of the Itô correction, ½σ̄²Δ with σ̄² the peak total noise
/// intensity at t=0, is taken implicitly; transport noise at the grid's
/// Nyquist modes is unstable under a fully explicit step. Positivity is
/// clamped at 1e-12 with renormalization.
pub fn density_spde_evolve(
    rho0: &GridDensity,
    fields: &[MKVField],
    driver: &BrownianDriver,
) -> Result<DensityPath> {
    if rho0.dim() != 1 {
        return Err(Error::BadGrid("the density SPDE is one-dimensional".into()));
    }
    if !rho0.is_smooth() {
        return Err(Error::NonSmoothDensity);
    }
    if fields.is_empty() || fields.len() != driver.channels() + 1 {
        return Err(Error::BadGrid(
            "need one drift field plus one field per driver channel".into(),
        ));
    }
    let n = rho0.n();
    let h = driver.h();
    let nodes = rho0.nodes();
    let mut sigma2 = 0.0f64;
    {
        let mut total = vec![0.0; n];
        for f in fields.iter().skip(1) {
            let z = f.eval_on_density(&nodes, rho0)?;
            for j in 0..n {
                total[j] += z[j] * z[j];
            }
        }
        for &v in &total {
            sigma2 = sigma2.max(v);
        }
    }
    let lam = 0.5 * h * sigma2;
    let mut path = Vec::with_capacity(driver.steps() + 1);
    path.push(rho0.clone());
    let mut clamp_events = 0usize;
    let mut rho = rho0.clone();
    for k in 0..driver.steps() {
        let v = rho.values().to_vec();
        let zvals = fields
            .iter()
            .map(|f| f.eval_on_density(&nodes, &rho))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let flux0: Vec<f64> = {
            let rz: Vec<f64> = (0..n).map(|j| v[j] * zvals[0][j]).collect();
            spectral::derivative(&rz)
        };
        let lap = spectral::second_derivative(&v);
        let mut rhs: Vec<f64> =
            (0..n).map(|j| v[j] + h * (-flux0[j] - lam / h * lap[j])).collect();
        for (i, zi) in zvals.iter().enumerate().skip(1) {
            let rz: Vec<f64> = (0..n).map(|j| v[j] * zi[j]).collect();
            let fi = spectral::derivative(&rz);
            let fz: Vec<f64> = (0..n).map(|j| fi[j] * zi[j]).collect();
            let gi = spectral::derivative(&fz);
            let dw = driver.increments(i - 1)[k];
            for j in 0..n {
                rhs[j] += 0.5 * h * gi[j] - fi[j] * dw;
            }
        }
        let mut next =
            spectral::apply_multiplier(&rhs, |kk| Complex::new(1.0 / (1.0 + lam * kk * kk), 0.0));
        let mut max = 0.0f64;
        for &u in &next {
            if !u.is_finite() {
                return Err(Error::Blowup { norm: f64::INFINITY });
            }
            max = max.max(u.abs());
        }
        if max > 1e6 {
            return Err(Error::Blowup { norm: max });
        }
        for u in next.iter_mut() {
            if *u < 1e-12 {
                *u = 1e-12;
                clamp_events += 1;
            }
        }
        rho = GridDensity::new_1d(next)?;
        path.push(rho.clone());
    }
    Ok(DensityPath { path, clamp_events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use crate::integrators::fit_log2_slope;
    use crate::wasserstein::{circle_distance, w2_circle_clouds, MeasureVectorField};

    fn rk4(f: impl Fn(f64) -> f64, y0: f64, t_end: f64, steps: usize) -> f64 {
        let h = t_end / steps as f64;
        let mut y = y0;
        for _ in 0..steps {
            let k1 = f(y);
            let k2 = f(y + 0.5 * h * k1);
            let k3 = f(y + 0.5 * h * k2);
            let k4 = f(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        y
    }

    fn atom_pair(theta: f64) -> Measure {
        Measure::Cloud(ParticleCloud::uniform_weights(vec![theta, -theta]))
    }

    fn l2_grid_distance(a: &GridDensity, b: &GridDensity) -> f64 {
        let dx = a.cell();
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y) * dx)
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn field_catalog_evaluates_expected_formulas() {
        let pair = ParticleCloud::uniform_weights(vec![0.7, -0.7]);
        let snap = MeasureSnapshot { cloud: &pair, density: None };
        let z = MKVField::interaction(InteractionKernel::Sine, 1.0);
        let vals = z.eval(&[0.7, 1.3], &snap).unwrap();
        // Two equal atoms at ±θ give Z(θ) = −½ sin 2θ.
        assert_abs_diff_eq!(vals[0], -0.5 * (1.4f64).sin(), epsilon = 1e-14);
        assert_abs_diff_eq!(
            vals[1],
            -(0.7f64.cos()) * (1.3f64).sin(),
            epsilon = 1e-14
        );
        let zc = MKVField::interaction(InteractionKernel::Cosine, 2.0);
        let vc = zc.eval(&[0.4], &snap).unwrap();
        assert_abs_diff_eq!(vc[0], -2.0 * 0.4f64.cos() * 0.7f64.cos(), epsilon = 1e-14);

        let g = MKVField::gradient_potential("cos", 0.3).unwrap();
        let vg = g.eval(&[1.1], &snap).unwrap();
        assert_abs_diff_eq!(vg[0], -0.3 * (1.1f64).sin(), epsilon = 1e-15);
        assert!(MKVField::gradient_potential("tanh", 1.0).is_err());

        // Entropy drift against a von Mises density: −s (log ρ)′ = s·κ·sin(x−loc).
        // Exact at grid nodes; off the grid the evaluator interpolates
        // linearly, so the error there is O(Δx²).
        let rho = GridDensity::von_mises(256, 1.0, 1.0).unwrap();
        let e = MKVField::entropy_drift(0.5);
        let nodes = rho.nodes();
        let at_nodes = e.eval_on_density(&nodes, &rho).unwrap();
        for (x, v) in nodes.iter().zip(&at_nodes) {
            assert_abs_diff_eq!(*v, 0.5 * (x - 1.0).sin(), epsilon = 1e-8);
        }
        let xs: Vec<f64> = (0..7).map(|i| i as f64 * 0.9).collect();
        let ve = e.eval_on_density(&xs, &rho).unwrap();
        for (x, v) in xs.iter().zip(&ve) {
            assert_abs_diff_eq!(*v, 0.5 * (x - 1.0).sin(), epsilon = 1e-4);
        }
        // Without a density snapshot the field must refuse.
        assert!(e.eval(&[0.0], &snap).is_err());
    }

    #[test]
    fn zero_fields_converge_in_one_iteration() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 2.0, 1.5).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::zero(), MKVField::zero()],
            initial,
            32,
            1e-2,
            0.5,
            11,
        )
        .unwrap();
        let sol = picard_solve(&problem, 1e-12, 5).unwrap();
        assert_eq!(sol.diagnostics.iterations, 1);
        assert_eq!(sol.diagnostics.windows.len(), 1);
        assert_eq!(sol.diagnostics.windows[0].gaps, vec![0.0]);
        let x0 = &sol.flow.states[0];
        for s in &sol.flow.states {
            assert_eq!(s, x0);
        }
        assert_eq!(sol.diagnostics.monotonicity_violations, 0);
    }

    #[test]
    fn measure_free_fields_match_direct_integration() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 0.5, 0.8).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![
                MKVField::gradient_potential("cos", 0.4).unwrap(),
                MKVField::constant(0.3),
            ],
            initial,
            64,
            1e-3,
            0.5,
            7,
        )
        .unwrap();
        let sol = picard_solve(&problem, 1e-12, 10).unwrap();
        assert_eq!(sol.diagnostics.iterations, 2);
        assert!(sol.diagnostics.windows[0].gaps[1] <= 1e-14);

        // Independent direct integration with the same driver.
        let driver = problem.driver().unwrap();
        let mut x = problem.initial_particles().unwrap();
        for k in 0..driver.steps() {
            let dw = driver.increments(0)[k];
            for xp in x.iter_mut() {
                let w = wrap(*xp);
                *xp += 1e-3 * (-0.4 * w.sin()) + 0.3 * dw;
            }
        }
        for (a, b) in sol.flow.terminal().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-10);
        }

        // No feedback: the single-sweep scheme is the same recursion.
        let self_sol = self_consistent_step_solve(&problem).unwrap();
        for (s, p) in self_sol.flow.states.iter().zip(&sol.flow.states) {
            for (a, b) in s.iter().zip(p) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_atoms_follow_the_two_body_reduction() {
        let theta0 = 0.7;
        let t_end = 0.5;
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::interaction(InteractionKernel::Sine, 1.0)],
            atom_pair(theta0),
            2,
            2e-6,
            t_end,
            3,
        )
        .unwrap();
        let sol = picard_solve(&problem, 1e-7, 200).unwrap();
        let theta_ref = rk4(|th| -0.5 * (2.0 * th).sin(), theta0, t_end, 4000);
        let terminal: Vec<f64> = sol.flow.terminal().iter().map(|&x| wrap(x)).collect();
        let hit_pos = terminal
            .iter()
            .map(|&x| circle_distance(x, theta_ref))
            .fold(f64::INFINITY, f64::min);
        let hit_neg = terminal
            .iter()
            .map(|&x| circle_distance(x, TAU - theta_ref))
            .fold(f64::INFINITY, f64::min);
        assert!(hit_pos <= 1e-6, "atom missed +θ(T): {hit_pos:.3e}");
        assert!(hit_neg <= 1e-6, "atom missed −θ(T): {hit_neg:.3e}");
        assert_eq!(sol.diagnostics.monotonicity_violations, 0);
    }

    #[test]
    fn picard_contracts_monotonically_for_interaction_drift() {
        let initial = Measure::Grid(GridDensity::von_mises(256, 3.0, 0.5).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::interaction(InteractionKernel::Sine, 1.2)],
            initial,
            512,
            1e-3,
            0.6,
            21,
        )
        .unwrap();
        let sol = picard_solve(&problem, 1e-9, 60).unwrap();
        let gaps = &sol.diagnostics.windows[0].gaps;
        assert!(gaps.len() >= 3, "expected at least 3 iterations, got {}", gaps.len());
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps not decreasing: {gaps:?}");
    }

    #[test]
    fn no_convergence_reports_the_gap_sequence() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 3.0, 0.5).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::interaction(InteractionKernel::Sine, 1.2)],
            initial,
            64,
            1e-2,
            0.4,
            9,
        )
        .unwrap();
        match picard_solve(&problem, 1e-13, 2) {
            Err(Error::NoConvergence { iterations, gaps, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(gaps.len(), 2);
                assert!(gaps.iter().all(|g| g.is_finite()));
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn measure_path_shares_the_flow_arrays() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 1.0, 1.0).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![
                MKVField::interaction(InteractionKernel::Sine, 0.8),
                MKVField::constant(0.2),
            ],
            initial,
            128,
            1e-2,
            0.2,
            5,
        )
        .unwrap();
        let sol = picard_solve(&problem, 1e-8, 40).unwrap();
        for k in [0, sol.flow.steps() / 2, sol.flow.steps()] {
            let m = sol.measure_at(k);
            let rebuilt = ParticleCloud::uniform_weights(sol.flow.states[k].clone());
            assert_eq!(m.points(), rebuilt.points());
            assert!(w2_circle_clouds(&m, &rebuilt).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn self_consistent_matches_picard_within_scheme_error() {
        let h = 1e-3;
        let p = 10_000;
        let initial = Measure::Grid(GridDensity::von_mises(256, 2.5, 0.8).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::interaction(InteractionKernel::Sine, 1.0)],
            initial,
            p,
            h,
            0.5,
            13,
        )
        .unwrap();
        let picard = picard_solve(&problem, 1e-5, 40).unwrap();
        let live = self_consistent_step_solve(&problem).unwrap();
        let bound = 5.0 * (h + (p as f64).powf(-0.5));
        for k in [picard.flow.steps() / 2, picard.flow.steps()] {
            let gap = w2_circle_clouds(&picard.measure_at(k), &live.measure_at(k)).unwrap();
            assert!(gap <= bound, "cross-scheme gap {gap:.3e} above {bound:.3e} at step {k}");
        }
        assert_eq!(picard.diagnostics.monotonicity_violations, 0);
        assert_eq!(live.diagnostics.monotonicity_violations, 0);
    }

    #[test]
    fn verify_residual_zero_for_zero_fields() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 1.0, 1.2).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::zero(), MKVField::zero()],
            initial,
            64,
            1e-2,
            0.3,
            2,
        )
        .unwrap();
        let driver = problem.driver().unwrap();
        let sol = picard_solve_with(&problem, &driver, 1e-12, 5).unwrap();
        let report = verify_wasserstein_sde(
            &sol.measure_path(),
            &problem.fields,
            &standard_test_functions(),
            &driver,
        )
        .unwrap();
        assert_eq!(report.sup, 0.0);
    }

    #[test]
    fn verify_residual_is_time_quadrature_for_deterministic_drift() {
        let initial = Measure::Grid(GridDensity::von_mises(256, 0.5, 1.0).unwrap());
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![MKVField::gradient_potential("cos", 0.3).unwrap()],
            initial,
            2048,
            1e-3,
            0.5,
            17,
        )
        .unwrap();
        let driver = problem.driver().unwrap();
        let sol = self_consistent_step_solve_with(&problem, &driver).unwrap();
        let report = verify_wasserstein_sde(
            &sol.measure_path(),
            &problem.fields,
            &standard_test_functions(),
            &driver,
        )
        .unwrap();
        // No noise: the residual is the left-point quadrature error in time.
        assert!(report.sup <= 1e-4, "quadrature residual {:.3e}", report.sup);
    }

    #[test]
    fn verify_residual_decays_under_dyadic_refinement() {
        let initial = Measure::Grid(GridDensity::von_mises(128, 2.0, 1.0).unwrap());
        let hs = [4e-3, 2e-3, 1e-3];
        let mut means = [0.0f64; 3];
        for seed in 0..8u64 {
            let problem = MKVProblem::new(
                Manifold::Circle,
                vec![
                    MKVField::interaction(InteractionKernel::Sine, 0.8),
                    MKVField::constant(0.25),
                ],
                initial.clone(),
                512,
                hs[0],
                0.5,
                100 + seed,
            )
            .unwrap();
            let mut driver = problem.driver().unwrap();
            for (level, mean) in means.iter_mut().enumerate() {
                if level > 0 {
                    driver = driver.refine();
                }
                let sol = self_consistent_step_solve_with(&problem, &driver).unwrap();
                let report = verify_wasserstein_sde(
                    &sol.measure_path(),
                    &problem.fields,
                    &standard_test_functions(),
                    &driver,
                )
                .unwrap();
                *mean += report.sup / 8.0;
            }
        }
        let slope = fit_log2_slope(&hs, &means);
        assert!(slope >= 0.4, "refinement slope {slope:.3} below 0.4 ({means:?})");
    }

    #[test]
    fn spde_constant_for_zero_fields() {
        let rho0 = GridDensity::von_mises(128, 2.0, 1.0).unwrap();
        let driver = BrownianDriver::new(1, 0.2, 1e-3, 4).unwrap();
        let out =
            density_spde_evolve(&rho0, &[MKVField::zero(), MKVField::zero()], &driver).unwrap();
        assert_eq!(out.clamp_events, 0);
        let terminal = out.path.last().unwrap();
        for (a, b) in terminal.values().iter().zip(rho0.values()) {
            assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn spde_deterministic_drift_matches_characteristics() {
        let rho0 = GridDensity::von_mises(256, 1.0, 1.0).unwrap();
        let t_end = 0.2;
        let driver = BrownianDriver::new(0, t_end, 1e-4, 1).unwrap();
        let fields = vec![MKVField::gradient_potential("cos", 0.25).unwrap()];
        let spde = density_spde_evolve(&rho0, &fields, &driver).unwrap();
        let z = MeasureVectorField::gradient(|xs, _| {
            xs.iter().map(|&x| -0.25 * x.sin()).collect()
        });
        let ode = crate::wasserstein::ode_on_p(&z, &rho0, t_end, 1e-3).unwrap();
        let d = l2_grid_distance(spde.path.last().unwrap(), ode.last().unwrap());
        assert!(d <= 1e-3, "SPDE vs characteristics L2 distance {d:.3e}");
        assert_eq!(spde.clamp_events, 0);
    }

    #[test]
    fn spde_entropy_drift_is_the_heat_flow() {
        let rho0 = GridDensity::cosine_mode(256, 0.3, 1).unwrap();
        let s = 0.5;
        let t_end = 0.3;
        let driver = BrownianDriver::new(0, t_end, 1e-4, 1).unwrap();
        let out = density_spde_evolve(&rho0, &[MKVField::entropy_drift(s)], &driver).unwrap();
        let terminal = out.path.last().unwrap();
        let decay = (-s * t_end).exp();
        for (j, &v) in terminal.values().iter().enumerate() {
            let x = terminal.node(j);
            let expect = (1.0 + 0.3 * decay * x.cos()) / TAU;
            assert_abs_diff_eq!(v, expect, epsilon = 1e-5);
        }
    }

    #[test]
    fn spde_with_common_noise_matches_the_particle_ensemble() {
        let n = 256;
        let p = 100_000;
        let t_end = 0.25;
        let h = 1e-3;
        let rho0 = GridDensity::von_mises(n, 2.0, 1.0).unwrap();
        let problem = MKVProblem::new(
            Manifold::Circle,
            vec![
                MKVField::interaction(InteractionKernel::Sine, 0.8),
                MKVField::constant(0.3),
            ],
            Measure::Grid(rho0.clone()),
            p,
            h,
            t_end,
            42,
        )
        .unwrap();
        let driver = problem.driver().unwrap();
        let sol = picard_solve_with(&problem, &driver, 1e-3, 20).unwrap();
        let fields = vec![
            MKVField::interaction(InteractionKernel::Sine, 0.8),
            MKVField::constant(0.3),
        ];
        let spde = density_spde_evolve(&rho0, &fields, &driver).unwrap();
        let kde = sol.measure_at(sol.flow.steps()).to_grid(n, None).unwrap();
        let d = l2_grid_distance(&kde, spde.path.last().unwrap());
        assert!(d <= 5e-2, "SPDE vs particle KDE L2 distance {d:.3e}");
    }

    #[test]
    fn spde_stays_smooth_in_the_standard_scenario() {
        let rho0 = GridDensity::von_mises(256, 2.0, 1.0).unwrap();
        let driver = BrownianDriver::new(1, 0.5, 1e-3, 8).unwrap();
        let fields = vec![
            MKVField::interaction(InteractionKernel::Sine, 0.8),
            MKVField::constant(0.3),
        ];
        let out = density_spde_evolve(&rho0, &fields, &driver).unwrap();
        let floor = out
            .path
            .iter()
            .flat_map(|d| d.values().iter().copied())
            .fold(f64::INFINITY, f64::min);
        assert!(floor >= 1e-6, "density floor {floor:.3e} below 1e-6");
        assert_eq!(out.clamp_events, 0);
    }

    #[test]
    fn spde_clamps_and_reports_near_vacuum() {
        // Expansion at the density minimum pushes it through the 1e-12 floor
        // well before the peak nears the blow-up guard.
        let rho0 = GridDensity::cosine_mode(256, 0.999_999, 1).unwrap();
        let driver = BrownianDriver::new(0, 0.5, 1e-4, 1).unwrap();
        let fields = vec![MKVField::measure_free("unstable-expansion", |x: f64| -25.0 * x.sin())];
        let out = density_spde_evolve(&rho0, &fields, &driver).unwrap();
        assert!(out.clamp_events > 0);
        let terminal = out.path.last().unwrap();
        let mass: f64 = terminal.values().iter().sum::<f64>() * terminal.cell();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
        let min = terminal.values().iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(min >= 1e-13);
    }

    #[test]
    fn spde_blowup_guard_trips_on_divergent_field() {
        // The positivity clamp plus renormalization caps the stored density
        // at mass/Δx, so ordinary CFL violations decay into clamped noise.
        // The guard's job is the remaining failure mode: a field magnitude
        // far outside the stable envelope must surface as Blowup, not as
        // clamped garbage.
        let rho0 = GridDensity::von_mises(256, 1.0, 1.0).unwrap();
        let driver = BrownianDriver::new(0, 0.1, 0.01, 1).unwrap();
        let fields = vec![MKVField::measure_free("runaway", |x: f64| 1e9 * x.sin())];
        match density_spde_evolve(&rho0, &fields, &driver) {
            Err(Error::Blowup { norm }) => assert!(norm > 1e6),
            other => panic!("expected Blowup, got {:?}", other.map(|p| p.path.len())),
        }
    }

    #[test]
    fn verify_on_grid_route_exercises_the_hessian_term() {
        let rho0 = GridDensity::von_mises(128, 1.5, 1.0).unwrap();
        let t_end = 0.25;
        let driver = BrownianDriver::new(1, t_end, 5e-4, 6).unwrap();
        let fields = vec![
            MKVField::gradient_potential("cos", 0.2).unwrap(),
            MKVField::gradient_potential("sin", 0.2).unwrap(),
        ];
        let spde = density_spde_evolve(&rho0, &fields, &driver).unwrap();
        let path: Vec<Measure> = spde.path.into_iter().map(Measure::Grid).collect();
        let report =
            verify_wasserstein_sde(&path, &fields, &standard_test_functions(), &driver).unwrap();
        assert!(report.sup <= 1e-2, "grid-route residual {:.3e}", report.sup);
        for fr in &report.per_function {
            assert_eq!(fr.path.len(), driver.steps() + 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn measure_free_picard_always_matches_direct(
            a in -0.5f64..0.5,
            b in -0.5f64..0.5,
            seed in 0u64..1_000_000,
        ) {
            let initial = Measure::Grid(GridDensity::von_mises(64, 1.0, 1.0).unwrap());
            let problem = MKVProblem::new(
                Manifold::Circle,
                vec![
                    MKVField::measure_free("trig", move |x: f64| a * x.sin() + b * x.cos()),
                    MKVField::constant(0.2),
                ],
                initial,
                16,
                5e-3,
                0.1,
                seed,
            )
            .unwrap();
            let sol = picard_solve(&problem, 1e-12, 6).unwrap();
            prop_assert_eq!(sol.diagnostics.iterations, 2);
            let driver = problem.driver().unwrap();
            let mut x = problem.initial_particles().unwrap();
            for k in 0..driver.steps() {
                let dw = driver.increments(0)[k];
                for xp in x.iter_mut() {
                    let w = wrap(*xp);
                    *xp += 5e-3 * (a * w.sin() + b * w.cos()) + 0.2 * dw;
                }
            }
            for (u, v) in sol.flow.terminal().iter().zip(&x) {
                prop_assert!((u - v).abs() <= 1e-10);
            }
        }
    }
}
