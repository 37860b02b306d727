//! Measures on S¹ and T² and the Otto-calculus toolkit: Wasserstein-2
//! distances (quantile coupling on the circle, debiased Sinkhorn on the
//! torus), energy functionals with their Wasserstein gradients, Lie
//! derivatives along potential flows, Hessians, monotone transport maps, and
//! deterministic measure ODEs driven by tangent fields.
//!
//! Grid conventions: nodes x_j = 2πj/n with n a power of two, quadrature
//! weight 2π/n per node, and the volume measure normalised to mass one (so
//! the uniform density is 1/2π and entropy is ∫ρ log(2πρ) dx).

use crate::error::{Error, Result};
use crate::spectral::{self, TrigInterp};

/// Midpoint samples used for quantile-coupling integrals.
pub const QUANTILE_SAMPLES: usize = 4096;

/// Wrap to [0, 2π).
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(crate::TAU);
    if r == crate::TAU {
        0.0
    } else {
        r
    }
}

/// Geodesic distance on the circle.
pub fn circle_distance(a: f64, b: f64) -> f64 {
    let d = wrap(a - b);
    d.min(crate::TAU - d)
}

fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// A density sampled on the uniform periodic grid, in one or two dimensions
/// (row-major n×n in 2-D). Unit total mass; `smooth` when strictly positive.
#[derive(Debug, Clone)]
pub struct GridDensity {
    dim: u8,
    n: usize,
    values: Vec<f64>,
    smooth: bool,
}

impl GridDensity {
    fn build(dim: u8, n: usize, mut values: Vec<f64>) -> Result<Self> {
        if !is_power_of_two(n) {
            return Err(Error::BadGrid(format!("grid size {n} is not a power of two")));
        }
        let expect = if dim == 1 { n } else { n * n };
        if values.len() != expect {
            return Err(Error::BadGrid(format!(
                "expected {expect} values for dim {dim}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadGrid("density values must be finite and nonnegative".into()));
        }
        let cell = (crate::TAU / n as f64).powi(dim as i32);
        let mass: f64 = values.iter().sum::<f64>() * cell;
        if mass <= 0.0 {
            return Err(Error::BadGrid("density has zero mass".into()));
        }
        for v in values.iter_mut() {
            *v /= mass;
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self { dim, n, values, smooth: min >= 1e-8 })
    }

    pub fn new_1d(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::build(1, n, values)
    }

    pub fn new_2d(n: usize, values: Vec<f64>) -> Result<Self> {
        Self::build(2, n, values)
    }

    pub fn uniform(n: usize) -> Self {
        Self::build(1, n, vec![1.0; n]).expect("uniform grid is valid")
    }

    pub fn uniform_2d(n: usize) -> Self {
        Self::build(2, n, vec![1.0; n * n]).expect("uniform grid is valid")
    }

    /// ρ ∝ exp(κ cos(x − loc)), normalised by quadrature.
    pub fn von_mises(n: usize, loc: f64, kappa: f64) -> Result<Self> {
        let values = (0..n)
            .map(|j| (kappa * (crate::TAU * j as f64 / n as f64 - loc).cos()).exp())
            .collect();
        Self::build(1, n, values)
    }

    /// ρ = (1 + a cos kx)/2π, |a| < 1.
    pub fn cosine_mode(n: usize, a: f64, k: usize) -> Result<Self> {
        if a.abs() >= 1.0 {
            return Err(Error::BadGrid(format!("cosine amplitude {a} leaves P∞")));
        }
        let values = (0..n)
            .map(|j| (1.0 + a * (k as f64 * crate::TAU * j as f64 / n as f64).cos()) / crate::TAU)
            .collect();
        Self::build(1, n, values)
    }

    /// Product density on T² from two 1-D factors of equal resolution.
    pub fn product(a: &GridDensity, b: &GridDensity) -> Result<Self> {
        if a.dim != 1 || b.dim != 1 || a.n != b.n {
            return Err(Error::BadGrid("product needs two 1-D factors of equal size".into()));
        }
        let n = a.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = a.values[i] * b.values[j];
            }
        }
        Self::build(2, n, values)
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth
    }

    pub fn node(&self, j: usize) -> f64 {
        crate::TAU * j as f64 / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Quadrature cell volume (2π/n)^dim.
    pub fn cell(&self) -> f64 {
        (crate::TAU / self.n as f64).powi(self.dim as i32)
    }

    /// ∫ f dμ for f sampled on the same grid.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.values.len());
        self.cell() * f.iter().zip(&self.values).map(|(a, r)| a * r).sum::<f64>()
    }

    /// ∫ f dx (Lebesgue, not weighted by ρ).
    pub fn integrate_lebesgue(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.values.len());
        self.cell() * f.iter().sum::<f64>()
    }

    /// Boltzmann entropy against the normalised volume: ∫ ρ log(vol·ρ) dx.
    pub fn entropy(&self) -> Result<f64> {
        if !self.smooth {
            return Err(Error::NonSmoothDensity);
        }
        let vol = crate::TAU.powi(self.dim as i32);
        let f: Vec<f64> = self.values.iter().map(|&r| (vol * r).ln()).collect();
        Ok(self.integrate(&f))
    }

    /// (∫ cos kx dμ, ∫ sin kx dμ) for a 1-D density.
    pub fn trig_moment(&self, k: usize) -> (f64, f64) {
        assert_eq!(self.dim, 1);
        let mut c = 0.0;
        let mut s = 0.0;
        for j in 0..self.n {
            let x = k as f64 * self.node(j);
            c += x.cos() * self.values[j];
            s += x.sin() * self.values[j];
        }
        (c * self.cell(), s * self.cell())
    }

    pub fn interp(&self) -> TrigInterp {
        assert_eq!(self.dim, 1);
        TrigInterp::new(&self.values)
    }

    /// (log ρ)′ on the grid (1-D, smooth only).
    pub fn grad_log(&self) -> Result<Vec<f64>> {
        assert_eq!(self.dim, 1);
        if !self.smooth {
            return Err(Error::NonSmoothDensity);
        }
        let logs: Vec<f64> = self.values.iter().map(|v| v.ln()).collect();
        Ok(spectral::derivative(&logs))
    }

    /// Marginal of a 2-D density along the other axis.
    pub fn marginal(&self, axis: usize) -> GridDensity {
        assert_eq!(self.dim, 2);
        let n = self.n;
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let v = self.values[i * n + j];
                out[if axis == 0 { i } else { j }] += v;
            }
        }
        for v in out.iter_mut() {
            *v *= crate::TAU / n as f64;
        }
        GridDensity::new_1d(out).expect("marginal of a density is a density")
    }

    /// CDF F(x) = μ([0, x]) for a smooth 1-D density.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        let (prim, p0) = self.cdf_parts()?;
        Ok(x / crate::TAU + prim.eval(x) - p0)
    }

    fn cdf_parts(&self) -> Result<(TrigInterp, f64)> {
        assert_eq!(self.dim, 1);
        if !self.smooth {
            return Err(Error::NonSmoothDensity);
        }
        let prim = TrigInterp::new(&spectral::antiderivative_mean_zero(&self.values));
        let p0 = prim.eval(0.0);
        Ok((prim, p0))
    }

    /// Quantile Q(s) with the lift Q(s + 1) = Q(s) + 2π.
    pub fn quantile(&self, s: f64) -> Result<f64> {
        let (prim, p0) = self.cdf_parts()?;
        let rho = self.interp();
        let k = s.floor();
        let sr = s - k;
        let f = |x: f64| x / crate::TAU + prim.eval(x) - p0 - sr;
        let fp = |x: f64| rho.eval(x).max(1e-12);
        Ok(solve_monotone(&f, &fp, 0.0, crate::TAU) + crate::TAU * k)
    }

    fn quantile_table(&self, m: usize) -> Result<Vec<f64>> {
        let (prim, p0) = self.cdf_parts()?;
        let rho = self.interp();
        let mut table = Vec::with_capacity(m);
        let mut x = 0.0;
        for i in 0..m {
            let s = (i as f64 + 0.5) / m as f64;
            let f = |x: f64| x / crate::TAU + prim.eval(x) - p0 - s;
            let fp = |x: f64| rho.eval(x).max(1e-12);
            // Warm start from the previous quantile; the bracket stays valid
            // because Q is increasing.
            x = solve_monotone_from(&f, &fp, x, crate::TAU, x);
            table.push(x);
        }
        Ok(table)
    }

    /// Grid → particles: atoms at the quadrature nodes with weights ρ_j·Δx.
    pub fn to_cloud(&self) -> ParticleCloud {
        assert_eq!(self.dim, 1);
        let w: Vec<f64> = self.values.iter().map(|&r| r * self.cell()).collect();
        ParticleCloud::new(self.nodes(), w).expect("node weights are a probability vector")
    }

    /// Exact 1-D monotone change of variables: density of T♯μ for the map
    /// sampled at the quadrature nodes.
    pub fn pushforward_1d(&self, map: &[f64]) -> Result<GridDensity> {
        assert_eq!(self.dim, 1);
        let n = self.n;
        if map.len() != n {
            return Err(Error::BadGrid(format!("map has {} samples, grid has {n}", map.len())));
        }
        // Lifted monotone check on the samples.
        let disp: Vec<f64> = (0..n).map(|j| map[j] - self.node(j)).collect();
        for j in 0..n {
            let step = if j + 1 < n {
                map[j + 1] - map[j]
            } else {
                map[0] + crate::TAU - map[n - 1]
            };
            if step <= 0.0 {
                return Err(Error::NonMonotone1D { index: j });
            }
        }
        let d_interp = TrigInterp::new(&disp);
        let rho = self.interp();
        let t = |x: f64| x + d_interp.eval(x);
        let tp = |x: f64| 1.0 + d_interp.eval_derivative(x);
        let dmax = disp.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs())) + 0.1;
        let dx = crate::TAU / n as f64;
        let mut out = vec![0.0; n];
        let mut prev = -dmax;
        for k in 0..n {
            let y = self.node(k);
            let f = |x: f64| t(x) - y;
            let fp = |x: f64| tp(x).max(1e-12);
            // T is increasing, so the previous preimage plus one cell is a
            // good guess and the previous preimage a valid lower bracket.
            let x = solve_monotone_from(&f, &fp, prev, y + dmax, prev + dx);
            prev = x;
            let slope = tp(x);
            if slope <= 1e-12 {
                return Err(Error::NonMonotone1D { index: k });
            }
            out[k] = (rho.eval(x) / slope).max(0.0);
        }
        GridDensity::new_1d(out)
    }

    /// 2-D pushforward by kernel deposit: each node's mass lands as a wrapped
    /// Gaussian bump (bandwidth 2Δx) at its mapped position.
    pub fn pushforward_2d(&self, map_x: &[f64], map_y: &[f64]) -> Result<GridDensity> {
        assert_eq!(self.dim, 2);
        let n = self.n;
        if map_x.len() != n * n || map_y.len() != n * n {
            return Err(Error::BadGrid("2-D map sample count mismatch".into()));
        }
        let dx = crate::TAU / n as f64;
        let sigma = 2.0 * dx;
        let reach = (6.0 * sigma / dx).ceil() as isize;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let w = self.values[i * n + j];
                if w == 0.0 {
                    continue;
                }
                let (tx, ty) = (wrap(map_x[i * n + j]), wrap(map_y[i * n + j]));
                let ci = (tx / dx).round() as isize;
                let cj = (ty / dx).round() as isize;
                for a in -reach..=reach {
                    let gi = (ci + a).rem_euclid(n as isize) as usize;
                    let ux = tx - (ci + a) as f64 * dx;
                    let kx = (-0.5 * (ux / sigma).powi(2)).exp();
                    for b in -reach..=reach {
                        let gj = (cj + b).rem_euclid(n as isize) as usize;
                        let uy = ty - (cj + b) as f64 * dx;
                        let ky = (-0.5 * (uy / sigma).powi(2)).exp();
                        out[gi * n + gj] += w * kx * ky;
                    }
                }
            }
        }
        GridDensity::new_2d(n, out)
    }
}

/// Weighted particles on the circle.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(points: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::BadGrid("points/weights length mismatch".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::BadGrid("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::BadGrid("weights have zero mass".into()));
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { points: points.into_iter().map(wrap).collect(), weights })
    }

    pub fn uniform_weights(points: Vec<f64>) -> Self {
        let n = points.len();
        Self::new(points, vec![1.0; n]).expect("uniform weights are valid")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// (Σ w cos kx, Σ w sin kx).
    pub fn trig_moment(&self, k: usize) -> (f64, f64) {
        let mut c = 0.0;
        let mut s = 0.0;
        for (p, w) in self.points.iter().zip(&self.weights) {
            c += w * (k as f64 * p).cos();
            s += w * (k as f64 * p).sin();
        }
        (c, s)
    }

    pub fn pushforward(&self, map: &[f64]) -> Result<ParticleCloud> {
        if map.len() != self.points.len() {
            return Err(Error::BadGrid("map sample count mismatch".into()));
        }
        ParticleCloud::new(map.to_vec(), self.weights.clone())
    }

    /// Particles → grid by periodic KDE; default bandwidth 2Δx.
    pub fn to_grid(&self, n: usize, bandwidth: Option<f64>) -> Result<GridDensity> {
        let dx = crate::TAU / n as f64;
        let sigma = bandwidth.unwrap_or(2.0 * dx);
        let reach = (6.0 * sigma / dx).ceil() as isize;
        let mut out = vec![0.0; n];
        for (p, w) in self.points.iter().zip(&self.weights) {
            let c = (p / dx).round() as isize;
            for a in -reach..=reach {
                let g = (c + a).rem_euclid(n as isize) as usize;
                let u = p - (c + a) as f64 * dx;
                out[g] += w * (-0.5 * (u / sigma).powi(2)).exp();
            }
        }
        GridDensity::new_1d(out)
    }

    fn sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| self.points[a].total_cmp(&self.points[b]));
        (
            idx.iter().map(|&i| self.points[i]).collect(),
            idx.iter().map(|&i| self.weights[i]).collect(),
        )
    }
}

/// Either measure representation.
#[derive(Debug, Clone)]
pub enum Measure {
    Grid(GridDensity),
    Cloud(ParticleCloud),
}

impl Measure {
    pub fn entropy(&self) -> Result<f64> {
        match self {
            Measure::Grid(g) => g.entropy(),
            Measure::Cloud(_) => Err(Error::NonSmoothDensity),
        }
    }
}

/// Pushforward dispatch preserving the representation (1-D).
pub fn pushforward(map: &[f64], mu: &Measure) -> Result<Measure> {
    match mu {
        Measure::Grid(g) => Ok(Measure::Grid(g.pushforward_1d(map)?)),
        Measure::Cloud(c) => Ok(Measure::Cloud(c.pushforward(map)?)),
    }
}

/// Mean-zero scalar potential φ on the grid; represents ∇φ ∈ T_μP.
#[derive(Debug, Clone)]
pub struct TangentPotential {
    n: usize,
    values: Vec<f64>,
}

impl TangentPotential {
    pub fn new(mut values: Vec<f64>) -> Self {
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        for v in values.iter_mut() {
            *v -= mean;
        }
        Self { n: values.len(), values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// ∇φ on the grid.
    pub fn gradient(&self) -> Vec<f64> {
        spectral::derivative(&self.values)
    }

    /// ⟨∇φ, ∇ψ⟩_μ = ∫ φ′ψ′ dμ.
    pub fn inner(&self, other: &TangentPotential, mu: &GridDensity) -> f64 {
        let a = self.gradient();
        let b = other.gradient();
        let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        mu.integrate(&prod)
    }
}

/// How a vector field on measures is declared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldForm {
    GradientOfPotential,
    General,
}

type FieldEval = dyn Fn(&[f64], &GridDensity) -> Vec<f64> + Send + Sync;

/// A measure-dependent tangent field: evaluator (points, measure) → values.
pub struct MeasureVectorField {
    pub form: FieldForm,
    pub smooth: bool,
    eval: Box<FieldEval>,
}

impl std::fmt::Debug for MeasureVectorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasureVectorField")
            .field("form", &self.form)
            .field("smooth", &self.smooth)
            .finish()
    }
}

impl MeasureVectorField {
    pub fn general(eval: impl Fn(&[f64], &GridDensity) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { form: FieldForm::General, smooth: true, eval: Box::new(eval) }
    }

    pub fn gradient(eval: impl Fn(&[f64], &GridDensity) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { form: FieldForm::GradientOfPotential, smooth: true, eval: Box::new(eval) }
    }

    /// Gradient field of a measure-dependent potential given by its grid
    /// samples; differentiated spectrally, evaluated anywhere.
    pub fn from_potential_on_grid(
        potential: impl Fn(&GridDensity) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            form: FieldForm::GradientOfPotential,
            smooth: true,
            eval: Box::new(move |xs: &[f64], mu: &GridDensity| {
                let phi = potential(mu);
                let dphi = spectral::derivative(&phi);
                let interp = TrigInterp::new(&dphi);
                xs.iter().map(|&x| interp.eval(x)).collect()
            }),
        }
    }

    pub fn eval_batch(&self, xs: &[f64], mu: &GridDensity) -> Vec<f64> {
        (self.eval)(xs, mu)
    }

    pub fn eval_at(&self, x: f64, mu: &GridDensity) -> f64 {
        (self.eval)(&[x], mu)[0]
    }

    /// 1-D gradient-form defect: a periodic field is a gradient iff its
    /// Lebesgue mean vanishes, so |∮A dx| is the curl analogue.
    pub fn gradient_form_residual(&self, mu: &GridDensity) -> f64 {
        let samples = self.eval_batch(&mu.nodes(), mu);
        mu.integrate_lebesgue(&samples).abs()
    }
}

// ---------------------------------------------------------------------------
// Monotone root solving shared by quantiles and map inversion.
// ---------------------------------------------------------------------------

/// Root of increasing f on [lo, hi] by safeguarded Newton.
fn solve_monotone(f: &dyn Fn(f64) -> f64, fp: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    solve_monotone_from(f, fp, lo, hi, 0.5 * (lo + hi))
}

pub(crate) fn solve_monotone_from(
    f: &dyn Fn(f64) -> f64,
    fp: &dyn Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    guess: f64,
) -> f64 {
    // Expand the bracket if the guess-based one does not straddle the root.
    while f(lo) > 0.0 {
        lo -= hi - lo + 1e-3;
    }
    while f(hi) < 0.0 {
        hi += hi - lo + 1e-3;
    }
    let mut x = guess.clamp(lo, hi);
    for _ in 0..100 {
        let y = f(x);
        if y.abs() <= 1e-14 {
            return x;
        }
        if y > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = y / fp(x);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

// ---------------------------------------------------------------------------
// Circular W₂ by quantile coupling.
// ---------------------------------------------------------------------------

enum QuantileTable {
    /// Smooth quantiles at midpoints s_i = (i+½)/m, linearly interpolated.
    Smooth(Vec<f64>),
    /// Step quantiles of weighted atoms (sorted points, cumulative weights).
    Step { pts: Vec<f64>, cum: Vec<f64> },
}

impl QuantileTable {
    fn of(mu: &Measure, m: usize) -> Result<Self> {
        match mu {
            Measure::Grid(g) => Ok(QuantileTable::Smooth(g.quantile_table(m)?)),
            Measure::Cloud(c) => {
                let (pts, w) = c.sorted();
                let mut cum = Vec::with_capacity(w.len());
                let mut acc = 0.0;
                for wi in &w {
                    acc += wi;
                    cum.push(acc);
                }
                Ok(QuantileTable::Step { pts, cum })
            }
        }
    }

    /// Q(s) on the lift Q(s+1) = Q(s) + 2π.
    fn eval(&self, s: f64) -> f64 {
        let k = s.floor();
        let sr = s - k;
        let base = crate::TAU * k;
        match self {
            QuantileTable::Smooth(table) => {
                let m = table.len();
                let u = sr * m as f64 - 0.5;
                let i0 = u.floor();
                let frac = u - i0;
                let i0 = i0 as isize;
                let at = |i: isize| -> f64 {
                    if i < 0 {
                        table[m - 1] - crate::TAU
                    } else if i as usize >= m {
                        table[0] + crate::TAU
                    } else {
                        table[i as usize]
                    }
                };
                base + at(i0) * (1.0 - frac) + at(i0 + 1) * frac
            }
            QuantileTable::Step { pts, cum } => {
                let idx = cum.partition_point(|&c| c < sr.min(1.0 - 1e-15));
                base + pts[idx.min(pts.len() - 1)]
            }
        }
    }
}

fn coupling_cost_oriented(qmu: &QuantileTable, qnu: &QuantileTable, m: usize, tau: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..m {
        let s = (i as f64 + 0.5) / m as f64;
        let d = qnu.eval(s + tau) - qmu.eval(s);
        acc += d * d;
    }
    acc / m as f64
}

/// Both orientations averaged: in the continuum the two agree by the
/// substitution s ↦ s − τ, and averaging makes the discretisation exactly
/// symmetric under swapping the arguments (the ternary iterates mirror).
fn coupling_cost(qmu: &QuantileTable, qnu: &QuantileTable, m: usize, tau: f64) -> f64 {
    0.5 * (coupling_cost_oriented(qmu, qnu, m, tau) + coupling_cost_oriented(qnu, qmu, m, -tau))
}

/// Minimise the convex coupling cost over the cut offset by ternary search.
fn optimal_cut(qmu: &QuantileTable, qnu: &QuantileTable, m: usize) -> (f64, f64) {
    let mut lo = -2.0;
    let mut hi = 2.0;
    while hi - lo > 1e-12 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if coupling_cost(qmu, qnu, m, m1) < coupling_cost(qmu, qnu, m, m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let tau = 0.5 * (lo + hi);
    (tau, coupling_cost(qmu, qnu, m, tau))
}

/// W₂ on the circle at the default quantile resolution.
pub fn w2_circle(mu: &Measure, nu: &Measure) -> Result<f64> {
    w2_circle_m(mu, nu, QUANTILE_SAMPLES)
}

/// W₂ on the circle with m quantile samples.
pub fn w2_circle_m(mu: &Measure, nu: &Measure, m: usize) -> Result<f64> {
    let qmu = QuantileTable::of(mu, m)?;
    let qnu = QuantileTable::of(nu, m)?;
    let (_, cost) = optimal_cut(&qmu, &qnu, m);
    Ok(cost.max(0.0).sqrt())
}

pub fn w2_circle_grids(mu: &GridDensity, nu: &GridDensity) -> Result<f64> {
    w2_circle(&Measure::Grid(mu.clone()), &Measure::Grid(nu.clone()))
}

pub fn w2_circle_clouds(mu: &ParticleCloud, nu: &ParticleCloud) -> Result<f64> {
    w2_circle(&Measure::Cloud(mu.clone()), &Measure::Cloud(nu.clone()))
}

/// Monotone optimal map samples T(x_j) with T♯μ = ν: quantile composition
/// through the optimal cut, T = Q_ν(F_μ + τ*). Samples are on the lift
/// (T − id is periodic); they may leave [0, 2π).
pub fn transport_map_1d(mu: &GridDensity, nu: &GridDensity) -> Result<Vec<f64>> {
    if !mu.is_smooth() || !nu.is_smooth() {
        return Err(Error::NonSmoothDensity);
    }
    let m = QUANTILE_SAMPLES;
    let qmu = QuantileTable::of(&Measure::Grid(mu.clone()), m)?;
    let qnu = QuantileTable::of(&Measure::Grid(nu.clone()), m)?;
    let (tau, _) = optimal_cut(&qmu, &qnu, m);
    let mut out = Vec::with_capacity(mu.n());
    for j in 0..mu.n() {
        let s = mu.cdf(mu.node(j))?;
        out.push(nu.quantile(s + tau)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Entropic W₂ on the torus (debiased Sinkhorn).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SinkhornParams {
    /// Annealing start; halved down to the target ε.
    pub eps_start: f64,
    pub max_iter_final: usize,
    pub max_iter_anneal: usize,
    /// Sup-norm potential-update tolerance at the target ε. The alternating
    /// updates hit a roundoff limit cycle near ε·1e-3 at small ε, so the
    /// divergence value is already stable to far more digits than the
    /// potentials; tolerances below that floor report NoConvergence.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { eps_start: 0.5, max_iter_final: 8000, max_iter_anneal: 200, tol: 1e-5 }
    }
}

struct SinkhornWorkspace {
    n: usize,
    /// cvec[k] = d_circ(kΔx)², the 1-D factor of the separable cost.
    cvec: Vec<f64>,
    m_buf: Vec<f64>,
}

impl SinkhornWorkspace {
    fn new(n: usize) -> Self {
        let dx = crate::TAU / n as f64;
        let cvec = (0..n)
            .map(|k| {
                let d = (k.min(n - k)) as f64 * dx;
                d * d
            })
            .collect();
        Self { n, cvec, m_buf: vec![0.0; n * n] }
    }

    /// f_i = −ε·lse_j((g_j − c_ij)/ε + log b_j), using the additive split
    /// c_ij = cvec[i1−j1] + cvec[i2−j2] to work one axis at a time.
    fn half_update(&mut self, g: &[f64], log_b: &[f64], eps: f64, out: &mut [f64]) {
        let n = self.n;
        // M(j1, i2) = lse_{j2}( g/ε + log b − c2/ε )
        for j1 in 0..n {
            for i2 in 0..n {
                let mut maxv = f64::NEG_INFINITY;
                for j2 in 0..n {
                    let v = (g[j1 * n + j2] - self.cvec[(i2 + n - j2) % n]) / eps
                        + log_b[j1 * n + j2];
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut acc = 0.0;
                for j2 in 0..n {
                    let v = (g[j1 * n + j2] - self.cvec[(i2 + n - j2) % n]) / eps
                        + log_b[j1 * n + j2];
                    acc += (v - maxv).exp();
                }
                self.m_buf[j1 * n + i2] = maxv + acc.ln();
            }
        }
        // f(i1, i2) = −ε·lse_{j1}( M(j1, i2) − c1/ε )
        for i1 in 0..n {
            for i2 in 0..n {
                let mut maxv = f64::NEG_INFINITY;
                for j1 in 0..n {
                    let v = self.m_buf[j1 * n + i2] - self.cvec[(i1 + n - j1) % n] / eps;
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut acc = 0.0;
                for j1 in 0..n {
                    let v = self.m_buf[j1 * n + i2] - self.cvec[(i1 + n - j1) % n] / eps;
                    acc += (v - maxv).exp();
                }
                out[i1 * n + i2] = -eps * (maxv + acc.ln());
            }
        }
    }

    fn entropic_ot(
        &mut self,
        log_a: &[f64],
        log_b: &[f64],
        a: &[f64],
        b: &[f64],
        eps_target: f64,
        params: &SinkhornParams,
    ) -> Result<f64> {
        let n2 = self.n * self.n;
        let mut f = vec![0.0; n2];
        let mut g = vec![0.0; n2];
        let mut eps_levels = Vec::new();
        let mut e = params.eps_start;
        while e > eps_target {
            eps_levels.push(e);
            e *= 0.5;
        }
        eps_levels.push(eps_target);
        let mut f_next = vec![0.0; n2];
        let mut g_next = vec![0.0; n2];
        let mut total_iters = 0;
        let mut gap = f64::INFINITY;
        for (li, &eps) in eps_levels.iter().enumerate() {
            let last = li + 1 == eps_levels.len();
            let max_iter = if last { params.max_iter_final } else { params.max_iter_anneal };
            let tol = if last { params.tol } else { 1e-6 };
            let mut converged = false;
            let mut history = Vec::new();
            for _ in 0..max_iter {
                total_iters += 1;
                self.half_update(&g, log_b, eps, &mut f_next);
                self.half_update(&f_next, log_a, eps, &mut g_next);
                gap = 0.0;
                for i in 0..n2 {
                    gap = gap.max((f_next[i] - f[i]).abs()).max((g_next[i] - g[i]).abs());
                }
                std::mem::swap(&mut f, &mut f_next);
                std::mem::swap(&mut g, &mut g_next);
                if last {
                    history.push(gap);
                }
                if gap <= tol {
                    converged = true;
                    break;
                }
            }
            if last && !converged {
                return Err(Error::NoConvergence {
                    iterations: total_iters,
                    last_gap: gap,
                    gaps: history,
                });
            }
        }
        let mut value = 0.0;
        for i in 0..n2 {
            value += a[i] * f[i] + b[i] * g[i];
        }
        Ok(value)
    }
}

/// Debiased Sinkhorn divergence on T²: sqrt(OT_ε(μ,ν) − ½OT_ε(μ,μ) − ½OT_ε(ν,ν)).
pub fn w2_sinkhorn_torus(mu: &GridDensity, nu: &GridDensity, eps: f64) -> Result<f64> {
    w2_sinkhorn_torus_with(mu, nu, eps, &SinkhornParams::default())
}

pub fn w2_sinkhorn_torus_with(
    mu: &GridDensity,
    nu: &GridDensity,
    eps: f64,
    params: &SinkhornParams,
) -> Result<f64> {
    assert_eq!(mu.dim(), 2, "torus Sinkhorn needs 2-D grids");
    assert_eq!(nu.dim(), 2, "torus Sinkhorn needs 2-D grids");
    assert_eq!(mu.n(), nu.n(), "resolutions must match");
    let n = mu.n();
    let cell = mu.cell();
    let weights = |d: &GridDensity| -> (Vec<f64>, Vec<f64>) {
        let a: Vec<f64> = d.values().iter().map(|&r| (r * cell).max(1e-300)).collect();
        let la = a.iter().map(|&w| w.ln()).collect();
        (a, la)
    };
    let (a, log_a) = weights(mu);
    let (b, log_b) = weights(nu);
    let mut ws = SinkhornWorkspace::new(n);
    let ot_ab = ws.entropic_ot(&log_a, &log_b, &a, &b, eps, params)?;
    let ot_aa = ws.entropic_ot(&log_a, &log_a, &a, &a, eps, params)?;
    let ot_bb = ws.entropic_ot(&log_b, &log_b, &b, &b, eps, params)?;
    let div = ot_ab - 0.5 * ot_aa - 0.5 * ot_bb;
    Ok(div.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Functionals, gradients, Lie derivatives, Hessians.
// ---------------------------------------------------------------------------

/// The three named functionals on P.
pub enum Functional<'a> {
    /// F_f(μ) = ∫ f dμ; f sampled on the grid.
    Potential(&'a [f64]),
    /// W(μ) = ∫∫ E(x, y) dμ(x) dμ(y).
    Interaction(&'a dyn Fn(f64, f64) -> f64),
    /// Boltzmann H against normalised volume.
    Entropy,
}

pub fn potential_energy(f: &[f64], mu: &GridDensity) -> f64 {
    mu.integrate(f)
}

pub fn interaction_energy(kernel: &dyn Fn(f64, f64) -> f64, mu: &GridDensity) -> f64 {
    let n = mu.n();
    let nodes = mu.nodes();
    let mut acc = 0.0;
    for i in 0..n {
        let mut inner = 0.0;
        for j in 0..n {
            inner += kernel(nodes[i], nodes[j]) * mu.values()[j];
        }
        acc += inner * mu.values()[i];
    }
    acc * mu.cell() * mu.cell()
}

pub fn functional_value(f: &Functional, mu: &GridDensity) -> Result<f64> {
    match f {
        Functional::Potential(vals) => Ok(potential_energy(vals, mu)),
        Functional::Interaction(kernel) => Ok(interaction_energy(*kernel, mu)),
        Functional::Entropy => mu.entropy(),
    }
}

/// The Wasserstein gradient ∇̄F as a tangent potential: f for F_f, log ρ for
/// H, and e(x, μ) = ∫ (E(x,y) + E(y,x)) dμ(y) for the interaction energy.
pub fn gradient_functional(f: &Functional, mu: &GridDensity) -> Result<TangentPotential> {
    match f {
        Functional::Potential(vals) => Ok(TangentPotential::new(vals.to_vec())),
        Functional::Interaction(kernel) => {
            let nodes = mu.nodes();
            let vals: Vec<f64> = nodes
                .iter()
                .map(|&x| {
                    let mut acc = 0.0;
                    for (j, &y) in nodes.iter().enumerate() {
                        acc += (kernel(x, y) + kernel(y, x)) * mu.values()[j];
                    }
                    acc * mu.cell()
                })
                .collect();
            Ok(TangentPotential::new(vals))
        }
        Functional::Entropy => {
            if !mu.is_smooth() {
                return Err(Error::NonSmoothDensity);
            }
            Ok(TangentPotential::new(mu.values().iter().map(|v| v.ln()).collect()))
        }
    }
}

/// Exact time-δ flow samples of ∇φ at the grid nodes (one RK4 step; local
/// error O(δ⁵) is far below the δ² differencing error it feeds).
pub fn flow_map(phi: &TangentPotential, mu: &GridDensity, delta: f64) -> Vec<f64> {
    let grad = TrigInterp::new(&phi.gradient());
    mu.nodes()
        .iter()
        .map(|&x0| {
            let k1 = grad.eval(x0);
            let k2 = grad.eval(x0 + 0.5 * delta * k1);
            let k3 = grad.eval(x0 + 0.5 * delta * k2);
            let k4 = grad.eval(x0 + delta * k3);
            x0 + delta / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        })
        .collect()
}

/// L̄_{V_φ}F(μ): central differences of F along the exact flow of ∇φ,
/// Richardson-extrapolated (δ and δ/2 with δ = 1e-4).
pub fn lie_derivative(f: &Functional, mu: &GridDensity, phi: &TangentPotential) -> Result<f64> {
    let delta = 1e-4;
    let diff = |d: f64| -> Result<f64> {
        let fwd = functional_value(f, &mu.pushforward_1d(&flow_map(phi, mu, d))?)?;
        let bwd = functional_value(f, &mu.pushforward_1d(&flow_map(phi, mu, -d))?)?;
        Ok((fwd - bwd) / (2.0 * d))
    };
    let d1 = diff(delta)?;
    let d2 = diff(0.5 * delta)?;
    Ok((4.0 * d2 - d1) / 3.0)
}

/// ∫ Hess f(Z₁, Z₂) dμ = ∫ f″ φ₁′ φ₂′ dμ on the circle.
pub fn hessian_potential(
    f: &[f64],
    mu: &GridDensity,
    z1: &TangentPotential,
    z2: &TangentPotential,
) -> f64 {
    let fpp = spectral::second_derivative(f);
    let g1 = z1.gradient();
    let g2 = z2.gradient();
    let prod: Vec<f64> = (0..f.len()).map(|j| fpp[j] * g1[j] * g2[j]).collect();
    mu.integrate(&prod)
}

// ---------------------------------------------------------------------------
// Deterministic ODEs on P.
// ---------------------------------------------------------------------------

/// Integrate μ̇ = −div(μ Z(μ)) by Heun characteristics at the quadrature
/// nodes, rebuilding the density by exact monotone pushforward each stage.
///
/// The field evaluator is handed a low-pass copy of the running density
/// (cutoff √(½/h)): density ripples at mode k feed back into the velocity at
/// gain ~k² for dissipative fields, so modes outside Heun's stability region
/// must never reach the evaluator. Returned densities are unfiltered.
pub fn ode_on_p(
    z: &MeasureVectorField,
    mu0: &GridDensity,
    t_end: f64,
    h: f64,
) -> Result<Vec<GridDensity>> {
    assert_eq!(mu0.dim(), 1);
    let steps = (t_end / h).round() as usize;
    if steps == 0 || ((t_end / h) - steps as f64).abs() > 1e-9 * (t_end / h).max(1.0) {
        return Err(Error::BadGrid(format!("t_end/h = {} is not an integer", t_end / h)));
    }
    let k_cut = ((0.5 / h).sqrt() as usize).min(mu0.n() / 2);
    let field_view = |d: &GridDensity| -> Result<GridDensity> {
        let smoothed: Vec<f64> =
            spectral::low_pass(d.values(), k_cut).iter().map(|v| v.max(0.0)).collect();
        GridDensity::new_1d(smoothed)
    };
    let mut positions = mu0.nodes();
    let mut path = vec![mu0.clone()];
    let mut current = field_view(mu0)?;
    for _ in 0..steps {
        let v1 = z.eval_batch(&positions, &current);
        let pred: Vec<f64> = positions.iter().zip(&v1).map(|(x, v)| x + h * v).collect();
        let mu_pred = field_view(&mu0.pushforward_1d(&pred)?)?;
        let v2 = z.eval_batch(&pred, &mu_pred);
        for j in 0..positions.len() {
            positions[j] += 0.5 * h * (v1[j] + v2[j]);
        }
        let exact = mu0.pushforward_1d(&positions)?;
        current = field_view(&exact)?;
        path.push(exact);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // Frozen oracle: W₂(uniform, (1+½cos x)/2π) = 1/(2√2). The optimal cut is
    // τ = 0 and the displacement is −½ sin x, so the cost is
    // ¼∫ sin²x dν = ⅛ exactly.
    const W2_UNIFORM_COSINE: f64 = 0.353_553_390_593_273_7;

    // Frozen oracle: H(von Mises κ=1) = I₁(1)/I₀(1) − log I₀(1).
    const ENTROPY_VON_MISES_1: f64 = 0.210_475_607_389_356_1;

    #[test]
    fn grid_density_normalises_and_tags_smoothness() {
        let d = GridDensity::new_1d(vec![1.0, 2.0, 3.0, 2.0]).unwrap();
        let mass: f64 = d.values().iter().sum::<f64>() * d.cell();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-14);
        assert!(d.is_smooth());
        let z = GridDensity::new_1d(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(!z.is_smooth());
        assert!(matches!(z.entropy(), Err(Error::NonSmoothDensity)));
        assert!(GridDensity::new_1d(vec![1.0; 5]).is_err());
        assert!(GridDensity::new_1d(vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn entropy_matches_frozen_von_mises_value_and_uniform_zero() {
        let u = GridDensity::uniform(128);
        assert_abs_diff_eq!(u.entropy().unwrap(), 0.0, epsilon = 1e-13);
        let vm = GridDensity::von_mises(512, 1.3, 1.0).unwrap();
        assert_abs_diff_eq!(vm.entropy().unwrap(), ENTROPY_VON_MISES_1, epsilon = 1e-10);
        let u2 = GridDensity::uniform_2d(16);
        assert_abs_diff_eq!(u2.entropy().unwrap(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn cdf_and_quantile_invert_each_other() {
        let d = GridDensity::von_mises(256, 2.0, 1.5).unwrap();
        for &s in &[0.05, 0.3, 0.5, 0.77, 0.99] {
            let x = d.quantile(s).unwrap();
            assert_abs_diff_eq!(d.cdf(x).unwrap(), s, epsilon = 1e-12);
        }
        // Lift convention.
        let q = d.quantile(0.25).unwrap();
        assert_abs_diff_eq!(d.quantile(1.25).unwrap(), q + crate::TAU, epsilon = 1e-9);
    }

    #[test]
    fn pushforward_identity_and_rotation_are_exact() {
        let d = GridDensity::von_mises(128, 0.7, 2.0).unwrap();
        let id: Vec<f64> = d.nodes();
        let out = d.pushforward_1d(&id).unwrap();
        for j in 0..d.n() {
            assert_abs_diff_eq!(out.values()[j], d.values()[j], epsilon = 1e-10);
        }
        // Rigid rotation of the uniform measure is uniform.
        let u = GridDensity::uniform(128);
        let rot: Vec<f64> = u.nodes().iter().map(|x| x + 0.9).collect();
        let out = u.pushforward_1d(&rot).unwrap();
        for j in 0..u.n() {
            assert_abs_diff_eq!(out.values()[j], 1.0 / crate::TAU, epsilon = 1e-12);
        }
    }

    #[test]
    fn pushforward_matches_analytic_change_of_variables() {
        // Uniform under x ↦ x + 0.1 sin x: ρ_out(y) = 1/(2π(1 + 0.1 cos x(y))).
        let u = GridDensity::uniform(256);
        let map: Vec<f64> = u.nodes().iter().map(|x| x + 0.1 * x.sin()).collect();
        let out = u.pushforward_1d(&map).unwrap();
        for j in 0..u.n() {
            let y = u.node(j);
            // Invert by bisection, independently of the module's solver.
            let (mut lo, mut hi) = (y - 0.2, y + 0.2);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid + 0.1 * mid.sin() < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = 0.5 * (lo + hi);
            let expect = 1.0 / (crate::TAU * (1.0 + 0.1 * x.cos()));
            assert_abs_diff_eq!(out.values()[j], expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn pushforward_rejects_non_monotone_maps() {
        let u = GridDensity::uniform(64);
        let map: Vec<f64> = u.nodes().iter().map(|x| x + 1.2 * x.sin()).collect();
        assert!(matches!(u.pushforward_1d(&map), Err(Error::NonMonotone1D { .. })));
    }

    #[test]
    fn w2_of_identical_measures_vanishes_and_is_symmetric() {
        let a = GridDensity::von_mises(128, 1.0, 2.0).unwrap();
        let b = GridDensity::cosine_mode(128, 0.4, 1).unwrap();
        let ma = Measure::Grid(a);
        let mb = Measure::Grid(b);
        assert!(w2_circle(&ma, &ma).unwrap() <= 1e-10);
        let ab = w2_circle(&ma, &mb).unwrap();
        let ba = w2_circle(&mb, &ma).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-10);
    }

    #[test]
    fn w2_point_masses_is_the_geodesic_distance() {
        for &s in &[0.3, 1.2, 2.9] {
            let a = Measure::Cloud(ParticleCloud::uniform_weights(vec![1.0]));
            let b = Measure::Cloud(ParticleCloud::uniform_weights(vec![1.0 + s]));
            assert_abs_diff_eq!(w2_circle(&a, &b).unwrap(), s, epsilon = 1e-9);
        }
        // Antipodal-ish pair wraps the short way.
        let a = Measure::Cloud(ParticleCloud::uniform_weights(vec![0.1]));
        let b = Measure::Cloud(ParticleCloud::uniform_weights(vec![0.1 + 5.0]));
        assert_abs_diff_eq!(w2_circle(&a, &b).unwrap(), crate::TAU - 5.0, epsilon = 1e-9);
    }

    #[test]
    fn w2_uniform_vs_cosine_matches_frozen_quantile_oracle() {
        let u = Measure::Grid(GridDensity::uniform(256));
        let c = Measure::Grid(GridDensity::cosine_mode(256, 0.5, 1).unwrap());
        let w_fine = w2_circle_m(&u, &c, 4096).unwrap();
        let w_coarse = w2_circle_m(&u, &c, 2048).unwrap();
        assert!((w_fine - w_coarse).abs() <= 1e-5);
        assert_abs_diff_eq!(w_fine, W2_UNIFORM_COSINE, epsilon = 1e-5);
    }

    // Frozen oracle: W₂ between von Mises(loc 1, κ 1.2) and its rotation by
    // 0.8, from an independent fine-CDF quantile-coupling quadrature. The
    // rigid rotation is NOT optimal here: sliding some mass backward through
    // the cut is cheaper, so the value sits well below 0.8.
    const W2_VON_MISES_ROTATED: f64 = 0.541_668_076_659_147_5;

    #[test]
    fn transport_map_recovers_rotations_and_round_trips() {
        let mu = GridDensity::von_mises(128, 1.0, 1.2).unwrap();
        let t = transport_map_1d(&mu, &mu).unwrap();
        for j in 0..mu.n() {
            assert_abs_diff_eq!(wrap(t[j]), mu.node(j), epsilon = 1e-6);
        }
        // Rotation target: the optimal map beats the rigid rotation.
        let a = 0.8;
        let rot: Vec<f64> = mu.nodes().iter().map(|x| x + a).collect();
        let nu = mu.pushforward_1d(&rot).unwrap();
        let w = w2_circle_grids(&mu, &nu).unwrap();
        assert_abs_diff_eq!(w, W2_VON_MISES_ROTATED, epsilon = 1e-4);
        assert!(w < a);
        let t = transport_map_1d(&mu, &nu).unwrap();
        let pushed = mu.pushforward_1d(&t).unwrap();
        let gap = w2_circle_grids(&pushed, &nu).unwrap();
        assert!(gap <= 1e-5, "rotated pushforward misses target by {gap:.2e}");
        // Round trip through a genuinely non-rigid pair.
        let nu = GridDensity::cosine_mode(128, 0.35, 1).unwrap();
        let t = transport_map_1d(&mu, &nu).unwrap();
        let pushed = mu.pushforward_1d(&t).unwrap();
        let gap = w2_circle_grids(&pushed, &nu).unwrap();
        assert!(gap <= 1e-5, "pushforward misses target by W2 = {gap:.2e}");
        // Cost consistency with the distance.
        let disp: Vec<f64> = t
            .iter()
            .zip(mu.nodes())
            .map(|(ti, xi)| {
                let d = ti - xi;
                d * d
            })
            .collect();
        let cost = mu.integrate(&disp);
        let w2 = w2_circle_grids(&mu, &nu).unwrap();
        assert_abs_diff_eq!(cost, w2 * w2, epsilon = 1e-6);
    }

    #[test]
    fn energies_match_their_defining_quadratures() {
        let mu = GridDensity::von_mises(256, 0.3, 1.0).unwrap();
        // Constant potential.
        let c = vec![2.5; 256];
        assert_abs_diff_eq!(potential_energy(&c, &mu), 2.5, epsilon = 1e-12);
        // cos(x−y) against uniform integrates to zero.
        let u = GridDensity::uniform(128);
        let k = |x: f64, y: f64| (x - y).cos();
        assert_abs_diff_eq!(interaction_energy(&k, &u), 0.0, epsilon = 1e-12);
        // Independent Riemann oracle for a non-trivial pair.
        let nodes = mu.nodes();
        let mut expect = 0.0;
        for i in 0..256 {
            for j in 0..256 {
                expect += (nodes[i] - nodes[j]).cos() * mu.values()[i] * mu.values()[j];
            }
        }
        expect *= mu.cell() * mu.cell();
        assert_abs_diff_eq!(interaction_energy(&k, &mu), expect, epsilon = 1e-12);
    }

    #[test]
    fn gradient_functional_matches_named_potentials() {
        let mu = GridDensity::von_mises(128, 0.0, 0.8).unwrap();
        let f: Vec<f64> = mu.nodes().iter().map(|x| x.cos()).collect();
        let g = gradient_functional(&Functional::Potential(&f), &mu).unwrap();
        for j in 0..128 {
            assert_abs_diff_eq!(g.values()[j], f[j], epsilon = 1e-12);
        }
        let u = GridDensity::uniform(128);
        let g = gradient_functional(&Functional::Entropy, &u).unwrap();
        for v in g.values() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lie_derivative_matches_the_inner_product_quadrature() {
        let u = GridDensity::uniform(256);
        let cos: Vec<f64> = u.nodes().iter().map(|x| x.cos()).collect();
        let sin: Vec<f64> = u.nodes().iter().map(|x| x.sin()).collect();
        // Odd integrand vanishes.
        let l = lie_derivative(
            &Functional::Potential(&cos),
            &u,
            &TangentPotential::new(sin.clone()),
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-9);
        // ∫⟨∇cos, ∇cos⟩ dμ = ∫ sin²/2π = ½ at the uniform measure.
        let l = lie_derivative(
            &Functional::Potential(&cos),
            &u,
            &TangentPotential::new(cos.clone()),
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.5, epsilon = 1e-9);
        // Constant potential has zero flow.
        let l = lie_derivative(
            &Functional::Potential(&cos),
            &u,
            &TangentPotential::new(vec![3.0; 256]),
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lie_derivative_agrees_with_gradient_pairing_for_all_functionals() {
        let mu = GridDensity::von_mises(256, 1.1, 0.9).unwrap();
        let psi = TangentPotential::new(
            mu.nodes().iter().map(|x| 0.4 * x.sin() + 0.2 * (2.0 * x).cos()).collect(),
        );
        let f: Vec<f64> = mu.nodes().iter().map(|x| 0.7 * x.cos() + 0.1 * (3.0 * x).sin()).collect();
        let kernel = |x: f64, y: f64| (x - y).cos() + 0.3 * (x - y).sin();
        for func in [
            Functional::Potential(&f),
            Functional::Interaction(&kernel),
            Functional::Entropy,
        ] {
            let lie = lie_derivative(&func, &mu, &psi).unwrap();
            let grad = gradient_functional(&func, &mu).unwrap();
            let pair = grad.inner(&psi, &mu);
            assert_abs_diff_eq!(lie, pair, epsilon = 1e-6);
        }
    }

    #[test]
    fn hessian_potential_is_symmetric_and_matches_example() {
        let u = GridDensity::uniform(128);
        let f: Vec<f64> = u.nodes().iter().map(|x| x.cos()).collect();
        let z = TangentPotential::new(u.nodes().iter().map(|x| x.sin()).collect());
        // ∫ −cos·cos² /2π dx = 0.
        assert_abs_diff_eq!(hessian_potential(&f, &u, &z, &z), 0.0, epsilon = 1e-12);
        let mu = GridDensity::von_mises(128, 0.4, 1.3).unwrap();
        let z1 = TangentPotential::new(mu.nodes().iter().map(|x| (2.0 * x).sin()).collect());
        let z2 = TangentPotential::new(mu.nodes().iter().map(|x| 0.3 * x.cos()).collect());
        let a = hessian_potential(&f, &mu, &z1, &z2);
        let b = hessian_potential(&f, &mu, &z2, &z1);
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        // Independent quadrature oracle.
        let mut expect = 0.0;
        for j in 0..128 {
            let x = mu.node(j);
            expect += -x.cos() * (2.0 * (2.0 * x).cos()) * (-0.3 * x.sin()) * mu.values()[j];
        }
        expect *= mu.cell();
        assert_abs_diff_eq!(a, expect, epsilon = 1e-10);
    }

    #[test]
    fn ode_on_p_keeps_constants_and_reproduces_the_heat_flow() {
        let mu0 = GridDensity::cosine_mode(256, 0.3, 1).unwrap();
        let zero = MeasureVectorField::general(|xs, _| vec![0.0; xs.len()]);
        let path = ode_on_p(&zero, &mu0, 0.05, 1e-2).unwrap();
        for j in 0..mu0.n() {
            assert_abs_diff_eq!(path.last().unwrap().values()[j], mu0.values()[j], epsilon = 1e-12);
        }

        // Heat flow: Z = −∇ log ρ gives ∂ρ = Δρ; Fourier oracle e^{−k²t}.
        let z = MeasureVectorField::from_potential_on_grid(|mu: &GridDensity| {
            mu.values().iter().map(|v| -v.ln()).collect()
        });
        let t_end = 0.1;
        let path = ode_on_p(&z, &mu0, t_end, 1e-3).unwrap();
        let terminal = path.last().unwrap();
        let decay = (-t_end).exp();
        let mut l2 = 0.0;
        for j in 0..mu0.n() {
            let x = mu0.node(j);
            let oracle = (1.0 + 0.3 * decay * x.cos()) / crate::TAU;
            let d = terminal.values()[j] - oracle;
            l2 += d * d;
        }
        l2 = (l2 * terminal.cell()).sqrt();
        assert!(l2 <= 1e-3, "heat-flow L2 error {l2:.2e}");
        // Entropy decreases along the flow.
        assert!(terminal.entropy().unwrap() < mu0.entropy().unwrap());
    }

    #[test]
    fn ode_on_p_matches_exact_characteristics_for_fixed_fields() {
        // ẋ = sin x, solvable in closed form; μ₀ von Mises.
        let mu0 = GridDensity::von_mises(256, 2.6, 0.5).unwrap();
        let z = MeasureVectorField::general(|xs, _| xs.iter().map(|x| x.sin()).collect());
        let t_end = 0.3;
        let path = ode_on_p(&z, &mu0, t_end, 1e-3).unwrap();
        let terminal = path.last().unwrap();
        let rho0 = mu0.interp();
        for j in 0..mu0.n() {
            let y = mu0.node(j);
            // Inverse flow in centred coordinates z = y − π.
            let zc = y - std::f64::consts::PI;
            let half = 0.5 * zc;
            let t0 = t_end.exp() * half.tan();
            let z0 = 2.0 * t0.atan();
            let x0 = z0 + std::f64::consts::PI;
            let jac = t_end.exp() * (1.0 + half.tan().powi(2)) / (1.0 + t0 * t0);
            let expect = rho0.eval(x0) * jac;
            assert_abs_diff_eq!(terminal.values()[j], expect, epsilon = 1e-4);
        }
    }

    #[test]
    fn sinkhorn_divergence_vanishes_on_equal_inputs() {
        let m1 = GridDensity::von_mises(16, 1.0, 1.5).unwrap();
        let m2 = GridDensity::von_mises(16, 2.0, 0.7).unwrap();
        let mu = GridDensity::product(&m1, &m2).unwrap();
        let d = w2_sinkhorn_torus(&mu, &mu, 0.05).unwrap();
        assert!(d <= 1e-8, "self-divergence {d:.2e}");
    }

    #[test]
    fn sinkhorn_divergence_tensorizes_on_shifted_products() {
        let n = 32;
        let m1 = GridDensity::von_mises(n, 1.0, 1.5).unwrap();
        let m2 = GridDensity::von_mises(n, 2.0, 0.7).unwrap();
        let s = 0.6;
        let shift: Vec<f64> = m1.nodes().iter().map(|x| x + s).collect();
        let m1s = m1.pushforward_1d(&shift).unwrap();
        let mu = GridDensity::product(&m1, &m2).unwrap();
        let nu = GridDensity::product(&m1s, &m2).unwrap();
        let d = w2_sinkhorn_torus(&mu, &nu, 1e-3).unwrap();
        let w = w2_circle_grids(&m1, &m1s).unwrap();
        assert!(
            (d - w).abs() <= 0.03 * w,
            "sinkhorn {d:.5} vs marginal w2 {w:.5}"
        );
    }

    #[test]
    fn sinkhorn_reports_no_convergence_when_capped() {
        let m1 = GridDensity::von_mises(16, 1.0, 1.5).unwrap();
        let m2 = GridDensity::von_mises(16, 2.0, 0.7).unwrap();
        let shift: Vec<f64> = m1.nodes().iter().map(|x| x + 0.6).collect();
        let m1s = m1.pushforward_1d(&shift).unwrap();
        let mu = GridDensity::product(&m1, &m2).unwrap();
        let nu = GridDensity::product(&m1s, &m2).unwrap();
        let params = SinkhornParams {
            eps_start: 1e-3,
            max_iter_final: 3,
            ..Default::default()
        };
        assert!(matches!(
            w2_sinkhorn_torus_with(&mu, &nu, 1e-3, &params),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn measure_conversions_round_trip_within_kde_smoothing() {
        let mu = GridDensity::von_mises(128, 2.2, 1.0).unwrap();
        let cloud = mu.to_cloud();
        assert_abs_diff_eq!(cloud.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let back = cloud.to_grid(128, None).unwrap();
        let gap = w2_circle_grids(&mu, &back).unwrap();
        assert!(gap <= 0.05, "round trip W2 {gap:.3}");
        // Entropy on a cloud is rejected.
        assert!(matches!(
            Measure::Cloud(cloud).entropy(),
            Err(Error::NonSmoothDensity)
        ));
    }

    #[test]
    fn lipschitz_functional_bound_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 256;
        let f: Vec<f64> = (0..n)
            .map(|j| {
                let x = crate::TAU * j as f64 / n as f64;
                0.8 * x.cos() + 0.3 * (2.0 * x).sin()
            })
            .collect();
        // sup |f′| on a fine grid.
        let mut lip: f64 = 0.0;
        for j in 0..4096 {
            let x = crate::TAU * j as f64 / 4096.0;
            lip = lip.max((-0.8 * x.sin() + 0.6 * (2.0 * x).cos()).abs());
        }
        for _ in 0..8 {
            let mu = GridDensity::von_mises(n, rng.gen::<f64>() * crate::TAU, 0.3 + 2.7 * rng.gen::<f64>()).unwrap();
            let nu = GridDensity::cosine_mode(n, rng.gen::<f64>() * 1.4 - 0.7, 1 + rng.gen_range(0..3)).unwrap();
            let gap = (potential_energy(&f, &mu) - potential_energy(&f, &nu)).abs();
            let w = w2_circle_grids(&mu, &nu).unwrap();
            assert!(
                gap <= lip * w + 1e-8,
                "Lipschitz bound violated: {gap:.6} > {lip:.4}·{w:.6}"
            );
        }
    }

    #[test]
    fn pushforward_w2_bound_holds_for_map_pairs() {
        let mu = GridDensity::von_mises(256, 0.5, 1.0).unwrap();
        let u_map: Vec<f64> = mu.nodes().iter().map(|x| x + 0.3 * x.sin()).collect();
        let v_map: Vec<f64> = mu.nodes().iter().map(|x| x + 0.25 * (x + 0.4).sin()).collect();
        let pu = mu.pushforward_1d(&u_map).unwrap();
        let pv = mu.pushforward_1d(&v_map).unwrap();
        let w = w2_circle_grids(&pu, &pv).unwrap();
        let d2: Vec<f64> = u_map
            .iter()
            .zip(&v_map)
            .map(|(a, b)| {
                let d = circle_distance(*a, *b);
                d * d
            })
            .collect();
        let bound = mu.integrate(&d2);
        assert!(w * w <= bound + 1e-8, "w2² {:.4e} > coupling bound {bound:.4e}", w * w);
    }

    #[test]
    fn gradient_form_residual_detects_non_gradients() {
        let mu = GridDensity::uniform(128);
        let grad = MeasureVectorField::from_potential_on_grid(|mu: &GridDensity| {
            mu.nodes().iter().map(|x| x.cos()).collect()
        });
        assert!(grad.gradient_form_residual(&mu) <= 1e-10);
        let not_grad = MeasureVectorField::general(|xs, _| xs.iter().map(|_| 1.0).collect());
        assert!(not_grad.gradient_form_residual(&mu) > 0.1);
    }
}

