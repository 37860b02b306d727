//! Transport upstairs: monotone-map lifts of measure diffusions and parallel
//! transport of tangent fields carried along them.
//!
//! A map φ with p(φ) = φ♯vol = μ names a point in the fiber over μ. Tangent
//! vectors at φ are fields read at the node images, A(φ(x_j)); splitting A at
//! the companion density separates base motion (gradients) from fiber motion
//! (μ-divergence-free remainders, the span of ρ⁻¹ on the circle). Everything
//! here works on flat tori, where the map chart is linear and no curvature
//! correction enters the transport equation.
//!
//! The transported field obeys ∘dU = N(U, ∘dφ) with N the vertical part of
//! the Hessian contraction; a Heun sweep realizes the Stratonovich form and a
//! Milstein sweep the Itô form, so the two can be compared pathwise. Vertical
//! dynamics reduce to a rotation angle on S¹, which is what makes the
//! horizontal/vertical factorization of right-invariant systems explicit.

use crate::error::{Error, Result};
use crate::hodge::{self, TangentInput, WeightedHodgeSolver};
use crate::integrators::BrownianDriver;
use crate::spectral::{self, TrigInterp};
use crate::wasserstein::{
    solve_monotone_from, wrap, FieldForm, GridDensity, MeasureVectorField, TangentPotential,
};

/// Step size for directional differencing of step coefficients.
const FD_EPS: f64 = 1e-5;

/// Shepard bandwidth for moving samples back to the grid in 2-D, in cells.
const TRANSFER_SIGMA_CELLS: f64 = 2.0;

/// Uniform-grid detection threshold for quantile starts.
const UNIFORM_TOL: f64 = 1e-13;

fn grid_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 * crate::TAU / n as f64).collect()
}

/// Moment view of p(φ) that never leaves map coordinates: ∫f dμ = ∮f(φ)dvol.
pub struct MapMeasure<'a> {
    phi: &'a [f64],
}

impl<'a> MapMeasure<'a> {
    pub fn new(phi: &'a [f64]) -> Self {
        Self { phi }
    }

    /// ∫ f dμ by the rectangle rule on the node images.
    pub fn moment(&self, f: impl Fn(f64) -> f64) -> f64 {
        let s: f64 = self.phi.iter().map(|&x| f(wrap(x))).sum();
        s / self.phi.len() as f64
    }

    pub fn trig_moment(&self, k: usize) -> (f64, f64) {
        let kf = k as f64;
        (self.moment(|x| (kf * x).cos()), self.moment(|x| (kf * x).sin()))
    }
}

/// A diffeomorphism of the torus sampled at the quadrature nodes, carrying
/// the exact pushforward of the uniform measure as its companion density.
///
/// One dimension stores the lifted images: strictly increasing values with
/// total increase 2π across the period. Construction fails with
/// `NonMonotone1D` otherwise.
#[derive(Debug, Clone)]
pub struct DiscreteDiffeo {
    dim: u8,
    n: usize,
    phi: Vec<Vec<f64>>,
    rho: GridDensity,
}

impl DiscreteDiffeo {
    pub fn new_1d(phi: Vec<f64>) -> Result<Self> {
        let n = phi.len();
        // pushforward_1d validates strict monotonicity of the lift.
        let rho = GridDensity::uniform(n).pushforward_1d(&phi)?;
        Ok(Self { dim: 1, n, phi: vec![phi], rho })
    }

    /// 2-D maps carry no monotonicity structure; the companion density is the
    /// kernel-deposit pushforward and is therefore approximate.
    pub fn new_2d(phi_x: Vec<f64>, phi_y: Vec<f64>) -> Result<Self> {
        let nn = phi_x.len();
        let n = (nn as f64).sqrt().round() as usize;
        if n * n != nn || phi_y.len() != nn {
            return Err(Error::BadGrid("2-D map sample count is not a square grid".into()));
        }
        let rho = GridDensity::uniform_2d(n).pushforward_2d(&phi_x, &phi_y)?;
        Ok(Self { dim: 2, n, phi: vec![phi_x, phi_y], rho })
    }

    pub fn identity(n: usize) -> Self {
        Self { dim: 1, n, phi: vec![grid_nodes(n)], rho: GridDensity::uniform(n) }
    }

    /// x ↦ x + a with the exact uniform companion.
    pub fn rotation(n: usize, a: f64) -> Self {
        let phi = grid_nodes(n).iter().map(|&x| x + a).collect();
        Self { dim: 1, n, phi: vec![phi], rho: GridDensity::uniform(n) }
    }

    /// The monotone map pushing vol to μ, sampled through the quantile
    /// function. A uniform μ yields the identity exactly.
    pub fn from_quantile(mu: &GridDensity) -> Result<Self> {
        assert_eq!(mu.dim(), 1, "quantile maps are one-dimensional");
        let n = mu.n();
        let flat = 1.0 / crate::TAU;
        if mu.values().iter().all(|&v| (v - flat).abs() <= UNIFORM_TOL) {
            return Ok(Self::identity(n));
        }
        let mut phi = Vec::with_capacity(n);
        for j in 0..n {
            phi.push(mu.quantile(j as f64 / n as f64)?);
        }
        // The companion is μ itself by construction; storing it skips the
        // round trip through the sampled quantiles.
        Ok(Self { dim: 1, n, phi: vec![phi], rho: mu.clone() })
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Lifted node images, one vector per axis.
    pub fn phi(&self) -> &[Vec<f64>] {
        &self.phi
    }

    pub fn phi_1d(&self) -> &[f64] {
        assert_eq!(self.dim, 1);
        &self.phi[0]
    }

    /// p(φ) on the quadrature grid.
    pub fn rho(&self) -> &GridDensity {
        &self.rho
    }

    fn displacement(&self) -> Vec<f64> {
        let nodes = grid_nodes(self.n);
        self.phi[0].iter().zip(&nodes).map(|(&p, &x)| p - x).collect()
    }

    /// Trigonometric evaluation of the lifted map anywhere.
    pub fn eval(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1);
        x + TrigInterp::new(&self.displacement()).eval(x)
    }

    /// φ′ at the nodes, spectrally.
    pub fn derivative_at_nodes(&self) -> Vec<f64> {
        assert_eq!(self.dim, 1);
        spectral::derivative(&self.displacement()).iter().map(|d| 1.0 + d).collect()
    }

    /// φ∘r_a. Grid-commensurate angles resample exactly; others go through
    /// the trigonometric interpolant.
    pub fn compose_rotation(&self, a: f64) -> Result<Self> {
        assert_eq!(self.dim, 1);
        let n = self.n;
        let dx = crate::TAU / n as f64;
        let cells = a / dx;
        let shifted = if (cells - cells.round()).abs() <= 1e-12 {
            let s = cells.round() as i64;
            (0..n)
                .map(|j| {
                    let idx = j as i64 + s;
                    let turns = idx.div_euclid(n as i64);
                    self.phi[0][idx.rem_euclid(n as i64) as usize] + turns as f64 * crate::TAU
                })
                .collect()
        } else {
            let interp = TrigInterp::new(&self.displacement());
            grid_nodes(n).iter().map(|&x| x + a + interp.eval(x + a)).collect()
        };
        Self::new_1d(shifted)
    }
}

/// A tangent vector at φ: field samples at the node images, u_j = A(φ(x_j)).
///
/// `horizontal` records that the samples were built from a potential; the
/// claim is checkable through [`DiffeoTangent::verticality`].
#[derive(Debug, Clone)]
pub struct DiffeoTangent {
    base: DiscreteDiffeo,
    samples: Vec<Vec<f64>>,
    horizontal: bool,
}

impl DiffeoTangent {
    pub fn new(base: DiscreteDiffeo, samples: Vec<Vec<f64>>) -> Self {
        assert_eq!(samples.len(), base.dim() as usize, "one sample vector per axis");
        for s in &samples {
            assert_eq!(s.len(), base.phi[0].len(), "sample count != node count");
        }
        Self { base, samples, horizontal: false }
    }

    /// 𝔥_φ(v): the horizontal vector over ∇ψ_v read at the node images.
    pub fn from_potential(base: DiscreteDiffeo, v: &TangentPotential) -> Self {
        assert_eq!(base.dim(), 1);
        let grad = v.gradient();
        assert_eq!(grad.len(), base.n(), "potential grid != map grid");
        let interp = TrigInterp::new(&grad);
        let samples = base.phi[0].iter().map(|&p| interp.eval(wrap(p))).collect();
        Self { base, samples: vec![samples], horizontal: true }
    }

    pub fn base(&self) -> &DiscreteDiffeo {
        &self.base
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn is_horizontal(&self) -> bool {
        self.horizontal
    }

    /// ‖A∘φ‖ in L²(vol), which equals ‖A‖ in L²(p(φ)).
    pub fn norm_vol(&self) -> f64 {
        let nn = self.samples[0].len() as f64;
        let mut s = 0.0;
        for axis in &self.samples {
            s += axis.iter().map(|u| u * u).sum::<f64>();
        }
        (s / nn).sqrt()
    }

    /// The base field A on the quadrature grid. One dimension inverts the
    /// monotone map; two dimensions use a kernel transfer and are first-order
    /// accurate only.
    pub fn field_on_grid(&self) -> Result<Vec<Vec<f64>>> {
        match self.base.dim {
            1 => Ok(vec![field_on_grid_1d(&self.base, &self.samples[0])?]),
            _ => {
                let n = self.base.n;
                let (px, py) = (&self.base.phi[0], &self.base.phi[1]);
                Ok(self
                    .samples
                    .iter()
                    .map(|s| transfer_to_grid_2d(px, py, s, n))
                    .collect())
            }
        }
    }

    /// μ-norm of the vertical part of the base field.
    pub fn verticality(&self) -> Result<f64> {
        let a = self.field_on_grid()?;
        let solver = WeightedHodgeSolver::new(self.base.rho.clone())?;
        let refs: Vec<&[f64]> = a.iter().map(|c| c.as_slice()).collect();
        let split = solver.hodge_split(&refs)?;
        let y_refs: Vec<&[f64]> = split.y.iter().map(|c| c.as_slice()).collect();
        Ok(solver.inner(&y_refs, &y_refs).sqrt())
    }
}

/// Preimages of the grid nodes under a lifted monotone map. Downstream reads
/// are 2π-periodic, so the branch the root lands on is immaterial.
fn invert_at_nodes(phi: &[f64]) -> Result<Vec<f64>> {
    let n = phi.len();
    let nodes = grid_nodes(n);
    let disp: Vec<f64> = phi.iter().zip(&nodes).map(|(&p, &x)| p - x).collect();
    for j in 0..n {
        let step =
            if j + 1 < n { phi[j + 1] - phi[j] } else { phi[0] + crate::TAU - phi[n - 1] };
        if step <= 0.0 {
            return Err(Error::NonMonotone1D { index: j });
        }
    }
    let interp = TrigInterp::new(&disp);
    let t = |x: f64| x + interp.eval(x);
    let tp = |x: f64| 1.0 + interp.eval_derivative(x);
    let dmax = disp.iter().fold(0.0_f64, |a, &b| a.max(b.abs())) + 0.1;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let y = nodes[k];
        let f = |x: f64| t(x) - y;
        let fp = |x: f64| tp(x).max(1e-12);
        let x = solve_monotone_from(&f, &fp, y - dmax, y + dmax, y);
        if tp(x) <= 1e-12 {
            return Err(Error::NonMonotone1D { index: k });
        }
        out.push(x);
    }
    Ok(out)
}

/// Reconstruct A at the grid from samples at the node images: the composite
/// B = A∘φ is smooth in x, so A(y) = B(φ⁻¹(y)) evaluates spectrally.
fn field_on_grid_1d(diffeo: &DiscreteDiffeo, samples: &[f64]) -> Result<Vec<f64>> {
    let pre = invert_at_nodes(&diffeo.phi[0])?;
    let b = TrigInterp::new(samples);
    Ok(pre.iter().map(|&x| b.eval(x)).collect())
}

/// Shepard transfer of scattered samples to the grid with a wrapped Gaussian.
fn transfer_to_grid_2d(px: &[f64], py: &[f64], values: &[f64], n: usize) -> Vec<f64> {
    let dx = crate::TAU / n as f64;
    // Grid-coincident images (identity, rigid commensurate translations) are
    // assigned exactly; kernel smoothing would blur what resampling can do
    // losslessly.
    let snap = 1e-9;
    let coincident = px.iter().zip(py).all(|(&x, &y)| {
        let fx = wrap(x) / dx;
        let fy = wrap(y) / dx;
        (fx - fx.round()).abs() * dx < snap && (fy - fy.round()).abs() * dx < snap
    });
    if coincident {
        let mut num = vec![0.0; n * n];
        let mut cnt = vec![0.0; n * n];
        for p in 0..values.len() {
            let gi = ((wrap(px[p]) / dx).round() as usize) % n;
            let gj = ((wrap(py[p]) / dx).round() as usize) % n;
            num[gi * n + gj] += values[p];
            cnt[gi * n + gj] += 1.0;
        }
        if cnt.iter().all(|&c| c > 0.0) {
            return num.iter().zip(&cnt).map(|(&a, &b)| a / b).collect();
        }
    }
    let sigma = TRANSFER_SIGMA_CELLS * dx;
    let reach = (6.0 * TRANSFER_SIGMA_CELLS).ceil() as isize;
    let mut num = vec![0.0; n * n];
    let mut den = vec![0.0; n * n];
    for p in 0..values.len() {
        let (x, y) = (wrap(px[p]), wrap(py[p]));
        let ci = (x / dx).floor() as isize;
        let cj = (y / dx).floor() as isize;
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let gi = (ci + di).rem_euclid(n as isize) as usize;
                let gj = (cj + dj).rem_euclid(n as isize) as usize;
                let gx = gi as f64 * dx;
                let gy = gj as f64 * dx;
                let rx = wrap(gx - x + std::f64::consts::PI) - std::f64::consts::PI;
                let ry = wrap(gy - y + std::f64::consts::PI) - std::f64::consts::PI;
                let w = (-(rx * rx + ry * ry) / (2.0 * sigma * sigma)).exp();
                num[gi * n + gj] += w * values[p];
                den[gi * n + gj] += w;
            }
        }
    }
    num.iter().zip(&den).map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 }).collect()
}

/// Periodic bilinear read of a grid function at an arbitrary point.
fn bilinear_2d(grid: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let dx = crate::TAU / n as f64;
    let fx = wrap(x) / dx;
    let fy = wrap(y) / dx;
    let i = fx.floor() as usize % n;
    let j = fy.floor() as usize % n;
    let (tx, ty) = (fx.fract(), fy.fract());
    let ip = (i + 1) % n;
    let jp = (j + 1) % n;
    let v00 = grid[i * n + j];
    let v10 = grid[ip * n + j];
    let v01 = grid[i * n + jp];
    let v11 = grid[ip * n + jp];
    v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty
}

/// The transported vector at one step, with the diagnostics the invariants
/// are phrased in.
#[derive(Debug, Clone)]
pub struct TransportState {
    pub t: f64,
    pub tangent: DiffeoTangent,
    /// ‖U‖ in L²(vol); parallel transport keeps it constant.
    pub norm: f64,
    /// μ-norm of the vertical leak of the base field.
    pub verticality: f64,
    /// Spectral energy fraction of the base field above wavenumber n/4.
    /// Reported, never asserted: transport can roughen a tangent field.
    pub hf_fraction: f64,
}

impl TransportState {
    /// Base field on the grid, all axes.
    pub fn base_field(&self) -> Result<Vec<Vec<f64>>> {
        self.tangent.field_on_grid()
    }

    /// Horizontal projection of the base field as a potential, with the
    /// vertical norm that was discarded.
    pub fn base_horizontal(&self) -> Result<(TangentPotential, f64)> {
        let a = self.tangent.field_on_grid()?;
        let solver = WeightedHodgeSolver::new(self.tangent.base.rho.clone())?;
        let refs: Vec<&[f64]> = a.iter().map(|c| c.as_slice()).collect();
        let split = solver.hodge_split(&refs)?;
        let y_refs: Vec<&[f64]> = split.y.iter().map(|c| c.as_slice()).collect();
        let vert = solver.inner(&y_refs, &y_refs).sqrt();
        Ok((TangentPotential::new(split.psi), vert))
    }
}

/// Time stepping for the transported samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QScheme {
    /// Predictor-corrector average; realizes the Stratonovich form.
    StratonovichHeun,
    /// Left-point rule with directional second-order terms; realizes the Itô
    /// form of the same equation, so the two schemes converge to one path.
    ItoMilstein,
}

struct QRhs {
    /// N(U, Z_i) at the node images, one vector per field.
    n_img: Vec<Vec<f64>>,
    /// Z_i at the node images, one vector per field.
    z_img: Vec<Vec<f64>>,
    verticality: f64,
    hf_fraction: f64,
}

fn hf_energy_fraction(a: &[f64]) -> f64 {
    let coeffs = spectral::dft(a);
    let n = a.len();
    let mut total = 0.0;
    let mut high = 0.0;
    for (idx, c) in coeffs.iter().enumerate() {
        if idx == 0 {
            continue;
        }
        let e = c.norm_sqr();
        total += e;
        if spectral::wavenumber(n, idx).abs() > n as f64 / 4.0 {
            high += e;
        }
    }
    if total > 0.0 {
        high / total
    } else {
        0.0
    }
}

/// One evaluation of the transport right-hand side at a given fiber state.
fn q_rhs(
    fields: &[&MeasureVectorField],
    diffeo: &DiscreteDiffeo,
    samples: &[f64],
) -> Result<QRhs> {
    let a_grid = field_on_grid_1d(diffeo, samples)?;
    let solver = WeightedHodgeSolver::new(diffeo.rho.clone())?;
    let split = solver.hodge_split(&[&a_grid])?;
    let y_refs: Vec<&[f64]> = split.y.iter().map(|c| c.as_slice()).collect();
    let verticality = solver.inner(&y_refs, &y_refs).sqrt();
    let hf_fraction = hf_energy_fraction(&a_grid);
    let nodes = diffeo.rho.nodes();
    let images: Vec<f64> = diffeo.phi[0].iter().map(|&p| wrap(p)).collect();
    let mut n_img = Vec::with_capacity(fields.len());
    let mut z_img = Vec::with_capacity(fields.len());
    for field in fields {
        let z_grid = field.eval_batch(&nodes, &diffeo.rho);
        let nt = hodge::normal_tensor(&solver, &TangentInput::Gradient { psi: &split.psi }, &[
            &z_grid,
        ])?;
        let interp = TrigInterp::new(&nt[0]);
        n_img.push(images.iter().map(|&x| interp.eval(x)).collect());
        z_img.push(field.eval_batch(&images, &diffeo.rho));
    }
    Ok(QRhs { n_img, z_img, verticality, hf_fraction })
}

fn check_gradient_form(fields: &[&MeasureVectorField], rho: &GridDensity) -> Result<()> {
    for field in fields {
        if field.form != FieldForm::GradientOfPotential {
            return Err(Error::NotHorizontal { vertical: field.gradient_form_residual(rho) });
        }
    }
    Ok(())
}

fn lift_inner(
    fields: &[&MeasureVectorField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<Vec<DiscreteDiffeo>> {
    assert_eq!(phi0.dim(), 1, "node lifts of measure diffusions are one-dimensional");
    assert_eq!(
        fields.len(),
        driver.channels() + 1,
        "one drift field plus one field per noise channel"
    );
    check_gradient_form(fields, phi0.rho())?;
    let n = phi0.n();
    let h = driver.h();
    let mut phi = phi0.phi_1d().to_vec();
    let mut out = Vec::with_capacity(driver.steps() + 1);
    out.push(phi0.clone());
    for k in 0..driver.steps() {
        let rho = out[k].rho();
        let wrapped: Vec<f64> = phi.iter().map(|&x| wrap(x)).collect();
        let vals: Vec<Vec<f64>> =
            fields.iter().map(|f| f.eval_batch(&wrapped, rho)).collect();
        for j in 0..n {
            let mut dx = h * vals[0][j];
            for c in 0..driver.channels() {
                dx += vals[c + 1][j] * driver.increments(c)[k];
            }
            phi[j] += dx;
        }
        out.push(DiscreteDiffeo::new_1d(phi.clone())?);
    }
    Ok(out)
}

/// Lift a measure diffusion to the map side: the node images follow the same
/// left-point update a particle ensemble would, so starting from the identity
/// reproduces the particle flow at the nodes, and the companion densities are
/// the measure path.
///
/// `fields[0]` is the drift; each remaining field matches one driver channel.
/// All fields must be gradient-form. A step that destroys monotonicity of the
/// lift surfaces as `NonMonotone1D`.
pub fn horizontal_lift_measure_diffusion(
    fields: &[MeasureVectorField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<Vec<DiscreteDiffeo>> {
    let refs: Vec<&MeasureVectorField> = fields.iter().collect();
    lift_inner(&refs, phi0, driver)
}

fn make_state(
    t: f64,
    diffeo: &DiscreteDiffeo,
    samples: &[f64],
    horizontal: bool,
    verticality: f64,
    hf_fraction: f64,
) -> TransportState {
    let tangent = DiffeoTangent {
        base: diffeo.clone(),
        samples: vec![samples.to_vec()],
        horizontal,
    };
    let norm = tangent.norm_vol();
    TransportState { t, tangent, norm, verticality, hf_fraction }
}

/// Integrate the transported samples along a given diffeomorphism path.
///
/// Both schemes step the same equation; Heun averages the endpoints of each
/// step, the Itô variant adds the directional second-order term per channel
/// through centered differencing of the step coefficient, which covers the
/// drift correction of the N-argument, the measure motion, and the nested
/// tensor term in one evaluation.
pub fn integrate_q(
    fields: &[MeasureVectorField],
    path: &[DiscreteDiffeo],
    u0: &DiffeoTangent,
    driver: &BrownianDriver,
    scheme: QScheme,
) -> Result<Vec<TransportState>> {
    let refs: Vec<&MeasureVectorField> = fields.iter().collect();
    integrate_q_inner(&refs, path, u0, driver, scheme)
}

fn integrate_q_inner(
    fields: &[&MeasureVectorField],
    path: &[DiscreteDiffeo],
    u0: &DiffeoTangent,
    driver: &BrownianDriver,
    scheme: QScheme,
) -> Result<Vec<TransportState>> {
    assert_eq!(path.len(), driver.steps() + 1, "path length != steps + 1");
    assert_eq!(fields.len(), driver.channels() + 1);
    assert_eq!(u0.base().n(), path[0].n());
    let sup0 = u0
        .base()
        .phi_1d()
        .iter()
        .zip(path[0].phi_1d())
        .fold(0.0_f64, |a, (&p, &q)| a.max((p - q).abs()));
    assert!(sup0 <= 1e-9, "u0 is not anchored at the start of the path");
    check_gradient_form(fields, path[0].rho())?;

    let n = path[0].n();
    let h = driver.h();
    let ch = driver.channels();
    let mut m = u0.samples()[0].clone();
    let mut states: Vec<TransportState> = Vec::with_capacity(path.len());

    for k in 0..driver.steps() {
        let rhs1 = q_rhs(fields, &path[k], &m)?;
        states.push(make_state(
            k as f64 * h,
            &path[k],
            &m,
            u0.is_horizontal(),
            rhs1.verticality,
            rhs1.hf_fraction,
        ));
        let mut xi = Vec::with_capacity(ch + 1);
        xi.push(h);
        for c in 0..ch {
            xi.push(driver.increments(c)[k]);
        }
        match scheme {
            QScheme::StratonovichHeun => {
                let mut pred = m.clone();
                for i in 0..fields.len() {
                    for j in 0..n {
                        pred[j] += rhs1.n_img[i][j] * xi[i];
                    }
                }
                let rhs2 = q_rhs(fields, &path[k + 1], &pred)?;
                for i in 0..fields.len() {
                    for j in 0..n {
                        m[j] += 0.5 * (rhs1.n_img[i][j] + rhs2.n_img[i][j]) * xi[i];
                    }
                }
            }
            QScheme::ItoMilstein => {
                let mut delta = vec![0.0; n];
                for j in 0..n {
                    delta[j] += h * rhs1.n_img[0][j];
                }
                for c in 0..ch {
                    let i = c + 1;
                    let dw = xi[i];
                    // Perturb the joint state along the channel direction
                    // (z_i for the map, N_i for the samples).
                    let mut phi_p = path[k].phi_1d().to_vec();
                    let mut phi_m = phi_p.clone();
                    let mut m_p = m.clone();
                    let mut m_m = m.clone();
                    for j in 0..n {
                        phi_p[j] += FD_EPS * rhs1.z_img[i][j];
                        phi_m[j] -= FD_EPS * rhs1.z_img[i][j];
                        m_p[j] += FD_EPS * rhs1.n_img[i][j];
                        m_m[j] -= FD_EPS * rhs1.n_img[i][j];
                    }
                    let dp = DiscreteDiffeo::new_1d(phi_p)?;
                    let dm = DiscreteDiffeo::new_1d(phi_m)?;
                    let rp = q_rhs(fields, &dp, &m_p)?;
                    let rm = q_rhs(fields, &dm, &m_m)?;
                    for j in 0..n {
                        let d = (rp.n_img[i][j] - rm.n_img[i][j]) / (2.0 * FD_EPS);
                        delta[j] += rhs1.n_img[i][j] * dw + 0.5 * d * dw * dw;
                    }
                }
                for j in 0..n {
                    m[j] += delta[j];
                }
            }
        }
    }
    let last = path.len() - 1;
    let rhs = q_rhs(fields, &path[last], &m)?;
    states.push(make_state(
        driver.t_end(),
        &path[last],
        &m,
        u0.is_horizontal(),
        rhs.verticality,
        rhs.hf_fraction,
    ));
    Ok(states)
}

/// Parallel transport on the measure side, realized upstairs: lift the
/// diffusion from the quantile anchor of μ₀, carry 𝔥(v₀) by [`integrate_q`],
/// and read the result back through the fiber projection.
pub fn stochastic_parallel_transport_p(
    fields: &[MeasureVectorField],
    mu0: &GridDensity,
    v0: &TangentPotential,
    driver: &BrownianDriver,
) -> Result<Vec<TransportState>> {
    let phi0 = DiscreteDiffeo::from_quantile(mu0)?;
    stochastic_parallel_transport_p_from(&phi0, fields, v0, driver)
}

/// Same transport started at an arbitrary fiber point over p(φ₀); the
/// projected result does not depend on that choice.
pub fn stochastic_parallel_transport_p_from(
    phi0: &DiscreteDiffeo,
    fields: &[MeasureVectorField],
    v0: &TangentPotential,
    driver: &BrownianDriver,
) -> Result<Vec<TransportState>> {
    let path = horizontal_lift_measure_diffusion(fields, phi0, driver)?;
    let u0 = DiffeoTangent::from_potential(phi0.clone(), v0);
    integrate_q(fields, &path, &u0, driver, QScheme::StratonovichHeun)
}

/// Connection form of a tangent vector: the vertical part of its base field
/// pulled back to the identity component, ϖ = (Dφ)⁻¹·(Y∘φ).
///
/// The result is divergence-free for vol. On S¹ it is a constant; in 2-D the
/// Jacobian must be invertible everywhere, otherwise `NonInvertibleMap`.
pub fn connection_form(tangent: &DiffeoTangent) -> Result<Vec<Vec<f64>>> {
    let base = tangent.base();
    let a = tangent.field_on_grid()?;
    let solver = WeightedHodgeSolver::new(base.rho.clone())?;
    let refs: Vec<&[f64]> = a.iter().map(|c| c.as_slice()).collect();
    let y = solver.project_vertical(&refs)?;
    match base.dim {
        1 => {
            let interp = TrigInterp::new(&y[0]);
            let phip = base.derivative_at_nodes();
            let out = base.phi[0]
                .iter()
                .zip(&phip)
                .map(|(&p, &d)| interp.eval(wrap(p)) / d)
                .collect();
            Ok(vec![out])
        }
        _ => {
            let n = base.n;
            let nodes_len = n * n;
            let dxx = jac_component(&base.phi[0], n, 0, 0);
            let dxy = jac_component(&base.phi[0], n, 0, 1);
            let dyx = jac_component(&base.phi[1], n, 1, 0);
            let dyy = jac_component(&base.phi[1], n, 1, 1);
            let mut min_jac = f64::INFINITY;
            let mut out_x = vec![0.0; nodes_len];
            let mut out_y = vec![0.0; nodes_len];
            for j in 0..nodes_len {
                let det = dxx[j] * dyy[j] - dxy[j] * dyx[j];
                min_jac = min_jac.min(det);
                if det <= 1e-12 {
                    return Err(Error::NonInvertibleMap { min_jac: det });
                }
                let yx = bilinear_2d(&y[0], n, base.phi[0][j], base.phi[1][j]);
                let yy = bilinear_2d(&y[1], n, base.phi[0][j], base.phi[1][j]);
                out_x[j] = (dyy[j] * yx - dxy[j] * yy) / det;
                out_y[j] = (-dyx[j] * yx + dxx[j] * yy) / det;
            }
            Ok(vec![out_x, out_y])
        }
    }
}

/// ∂φ_comp/∂x_axis on the grid: spectral derivative of the periodic
/// displacement plus the identity's contribution on the diagonal.
fn jac_component(phi: &[f64], n: usize, comp_axis: usize, deriv_axis: usize) -> Vec<f64> {
    let dx = crate::TAU / n as f64;
    let disp: Vec<f64> = (0..n * n)
        .map(|idx| {
            let coord = if comp_axis == 0 { idx / n } else { idx % n };
            phi[idx] - coord as f64 * dx
        })
        .collect();
    let mut d = spectral::derivative_2d(&disp, n, deriv_axis);
    if comp_axis == deriv_axis {
        for v in &mut d {
            *v += 1.0;
        }
    }
    d
}

/// Carry a full tangent vector: the horizontal part rides [`integrate_q`],
/// the vertical part keeps its connection-form coordinate and is re-attached
/// by left translation along the moving map.
pub fn lift_transport_full(
    fields: &[MeasureVectorField],
    a0: &DiffeoTangent,
    driver: &BrownianDriver,
) -> Result<Vec<TransportState>> {
    let base = a0.base();
    assert_eq!(base.dim(), 1);
    let a_grid = a0.field_on_grid()?;
    let solver = WeightedHodgeSolver::new(base.rho().clone())?;
    let split = solver.hodge_split(&[&a_grid[0]])?;
    // Constant fiber coordinate of the vertical part.
    let w0 = {
        let y_interp = TrigInterp::new(&split.y[0]);
        let phip = base.derivative_at_nodes();
        let vals: Vec<f64> = base
            .phi_1d()
            .iter()
            .zip(&phip)
            .map(|(&p, &d)| y_interp.eval(wrap(p)) / d)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let v0 = TangentPotential::new(split.psi);
    let u0 = DiffeoTangent::from_potential(base.clone(), &v0);
    let path = horizontal_lift_measure_diffusion(fields, base, driver)?;
    let qstates = integrate_q(fields, &path, &u0, driver, QScheme::StratonovichHeun)?;
    let mut out = Vec::with_capacity(qstates.len());
    for (k, qs) in qstates.iter().enumerate() {
        let phip = path[k].derivative_at_nodes();
        let samples: Vec<f64> = qs.tangent.samples()[0]
            .iter()
            .zip(&phip)
            .map(|(&u, &d)| u + d * w0)
            .collect();
        let tangent = DiffeoTangent::new(path[k].clone(), vec![samples]);
        let norm = tangent.norm_vol();
        let verticality = tangent.verticality()?;
        out.push(TransportState {
            t: qs.t,
            tangent,
            norm,
            verticality,
            hf_fraction: qs.hf_fraction,
        });
    }
    Ok(out)
}

/// Fiber direction Y = c(μ)·ρ⁻¹, the divergence-free family on S¹.
pub struct VerticalField {
    name: String,
    c: Box<dyn Fn(&MapMeasure) -> f64 + Send + Sync>,
}

impl VerticalField {
    pub fn new(
        name: impl Into<String>,
        c: impl Fn(&MapMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), c: Box::new(c) }
    }

    pub fn constant(c0: f64) -> Self {
        Self::new("constant", move |_| c0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn coefficient(&self, mm: &MapMeasure) -> f64 {
        (self.c)(mm)
    }

    /// Samples of Y at the node images of a lifted map: c·2πφ′.
    fn at_images(&self, phi: &[f64], phip: &[f64]) -> Vec<f64> {
        let c = self.coefficient(&MapMeasure::new(phi));
        phip.iter().map(|&d| c * crate::TAU * d).collect()
    }
}

/// A right-invariant direction split into its gradient and fiber parts.
pub struct RightInvariantField {
    pub z: MeasureVectorField,
    pub y: Option<VerticalField>,
}

impl RightInvariantField {
    pub fn horizontal(z: MeasureVectorField) -> Self {
        Self { z, y: None }
    }

    pub fn vertical(y: VerticalField) -> Self {
        Self { z: zero_gradient_field(), y: Some(y) }
    }

    pub fn mixed(z: MeasureVectorField, y: VerticalField) -> Self {
        Self { z, y: Some(y) }
    }
}

fn zero_gradient_field() -> MeasureVectorField {
    MeasureVectorField::gradient(|xs, _| vec![0.0; xs.len()])
}

/// Horizontal/vertical factorization of a right-invariant system.
#[derive(Debug)]
pub struct Decomposition {
    /// Map path carrying the projected (gradient) dynamics.
    pub h_path: Vec<DiscreteDiffeo>,
    /// Rotation angle path; g_t = r_{θ_t} preserves vol exactly.
    pub theta: Vec<f64>,
}

impl Decomposition {
    /// (h_t∘g_t)(x_j): the reconstructed full flow at the nodes.
    pub fn reconstructed(&self, k: usize) -> Vec<f64> {
        let h = &self.h_path[k];
        let interp = TrigInterp::new(&h.displacement());
        let th = self.theta[k];
        grid_nodes(h.n())
            .iter()
            .map(|&x| x + th + interp.eval(x + th))
            .collect()
    }
}

/// Split a right-invariant system into base motion and fiber rotation: h is
/// the lift of the gradient parts, θ integrates the connection-form constants
/// 2πc_i(μ_t) read along h by the trapezoid rule.
///
/// The system is read in Stratonovich form. Reconstruction h∘g matches a
/// direct integration of the unsplit system to first order in the step.
pub fn equivariant_decompose_d(
    fields: &[RightInvariantField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<Decomposition> {
    assert_eq!(phi0.dim(), 1, "the factorization needs the monotone map chart");
    assert_eq!(fields.len(), driver.channels() + 1);
    let refs: Vec<&MeasureVectorField> = fields.iter().map(|f| &f.z).collect();
    let h_path = lift_inner(&refs, phi0, driver)?;
    let h = driver.h();
    // ϖ_i along the h-path; vertical parts are constants in the fiber chart.
    let omega: Vec<Vec<f64>> = h_path
        .iter()
        .map(|d| {
            let mm = MapMeasure::new(d.phi_1d());
            fields
                .iter()
                .map(|f| f.y.as_ref().map_or(0.0, |y| crate::TAU * y.coefficient(&mm)))
                .collect()
        })
        .collect();
    let mut theta = Vec::with_capacity(h_path.len());
    theta.push(0.0);
    for k in 0..driver.steps() {
        let mut d = 0.5 * (omega[k][0] + omega[k + 1][0]) * h;
        for c in 0..driver.channels() {
            d += 0.5 * (omega[k][c + 1] + omega[k + 1][c + 1]) * driver.increments(c)[k];
        }
        theta.push(theta[k] + d);
    }
    Ok(Decomposition { h_path, theta })
}

/// Report from the purely vertical Itô system: the map factor moves by a
/// bounded-variation drift only.
#[derive(Debug)]
pub struct VerticalDriftReport {
    /// Full Stratonovich-converted flow at the nodes, lifted.
    pub phi_path: Vec<Vec<f64>>,
    /// Extracted map factor h_t = Φ_t∘r_{-θ_t}.
    pub h_path: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    /// max over nodes of Σ_k (h_{k+1} - h_k)²; finite variation drives this
    /// to zero linearly in the step.
    pub qv_max: f64,
    /// Horizontal part of the induced drift at t = 0, at the node images.
    pub drift0_h: Vec<f64>,
    /// sup |Y_i| over nodes and fields at t = 0.
    pub field_magnitude: f64,
}

/// Induced Stratonovich drift of a purely vertical Itô system at a fiber
/// state: b = -½ Σ_i ∂_{Y_i}Y_i by centered differencing, split into its
/// gradient part and fiber constant in map coordinates.
pub fn vertical_strat_drift(
    fields: &[VerticalField],
    phi: &[f64],
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let n = phi.len();
    let nodes = grid_nodes(n);
    let disp: Vec<f64> = phi.iter().zip(&nodes).map(|(&p, &x)| p - x).collect();
    let phip: Vec<f64> = spectral::derivative(&disp).iter().map(|d| 1.0 + d).collect();
    if phip.iter().any(|&d| d <= 1e-9) {
        let idx = phip.iter().position(|&d| d <= 1e-9).unwrap();
        return Err(Error::NonMonotone1D { index: idx });
    }
    let coeff_at = |state: &[f64]| -> Vec<Vec<f64>> {
        let d: Vec<f64> = {
            let nodes = grid_nodes(n);
            let disp: Vec<f64> = state.iter().zip(&nodes).map(|(&p, &x)| p - x).collect();
            spectral::derivative(&disp).iter().map(|v| 1.0 + v).collect()
        };
        fields.iter().map(|f| f.at_images(state, &d)).collect()
    };
    let k0 = coeff_at(phi);
    let mut b = vec![0.0; n];
    for (i, ki) in k0.iter().enumerate() {
        let mut up = phi.to_vec();
        let mut dn = phi.to_vec();
        for j in 0..n {
            up[j] += FD_EPS * ki[j];
            dn[j] -= FD_EPS * ki[j];
        }
        let kp = coeff_at(&up);
        let km = coeff_at(&dn);
        for j in 0..n {
            b[j] -= 0.5 * (kp[i][j] - km[i][j]) / (2.0 * FD_EPS);
        }
    }
    // Vertical coefficient of b in map coordinates: all circle integrals pull
    // back through y = φ(x), so no inversion is needed.
    let mean_bp: f64 = b.iter().zip(&phip).map(|(&v, &d)| v * d).sum::<f64>() / n as f64;
    let mean_pp: f64 = phip.iter().map(|&d| d * d).sum::<f64>() / n as f64;
    let c_b = mean_bp / (crate::TAU * mean_pp);
    let b_h: Vec<f64> =
        b.iter().zip(&phip).map(|(&v, &d)| v - c_b * crate::TAU * d).collect();
    Ok((b, c_b, b_h))
}

/// Integrate a purely vertical Itô system and factor out the fiber rotation.
///
/// The Itô form is converted to Stratonovich with the numerically differenced
/// drift, stepped by Heun, and the angle θ accumulates the connection-form
/// coordinates; h = Φ∘r_{-θ} is then finite-variation, which the report's
/// realized quadratic variation makes checkable.
pub fn vertical_ito_drift(
    fields: &[VerticalField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<VerticalDriftReport> {
    assert_eq!(phi0.dim(), 1);
    assert_eq!(
        fields.len(),
        driver.channels(),
        "a purely vertical system has one field per channel and no drift slot"
    );
    let n = phi0.n();
    let h = driver.h();
    let nodes = grid_nodes(n);
    let phip_of = |state: &[f64]| -> Vec<f64> {
        let disp: Vec<f64> = state.iter().zip(&nodes).map(|(&p, &x)| p - x).collect();
        spectral::derivative(&disp).iter().map(|v| 1.0 + v).collect()
    };

    let mut phi = phi0.phi_1d().to_vec();
    let phip0 = phip_of(&phi);
    let field_magnitude = fields
        .iter()
        .map(|f| {
            f.at_images(&phi, &phip0).iter().fold(0.0_f64, |a, &v| a.max(v.abs()))
        })
        .fold(0.0_f64, f64::max);
    let (_, _, drift0_h) = vertical_strat_drift(fields, &phi)?;

    let mut phi_path = Vec::with_capacity(driver.steps() + 1);
    let mut theta = Vec::with_capacity(driver.steps() + 1);
    phi_path.push(phi.clone());
    theta.push(0.0);

    let stage = |state: &[f64]| -> Result<(Vec<f64>, Vec<Vec<f64>>, f64, Vec<f64>)> {
        let phip = phip_of(state);
        if let Some(idx) = phip.iter().position(|&d| d <= 1e-9) {
            return Err(Error::NonMonotone1D { index: idx });
        }
        let ks: Vec<Vec<f64>> = fields.iter().map(|f| f.at_images(state, &phip)).collect();
        let (b, c_b, _) = vertical_strat_drift(fields, state)?;
        let mm = MapMeasure::new(state);
        let omegas: Vec<f64> =
            fields.iter().map(|f| crate::TAU * f.coefficient(&mm)).collect();
        Ok((b, ks, c_b, omegas))
    };

    for k in 0..driver.steps() {
        let (b1, ks1, cb1, om1) = stage(&phi)?;
        let mut pred = phi.clone();
        for j in 0..n {
            let mut d = h * b1[j];
            for c in 0..driver.channels() {
                d += ks1[c][j] * driver.increments(c)[k];
            }
            pred[j] += d;
        }
        let (b2, ks2, cb2, om2) = stage(&pred)?;
        for j in 0..n {
            let mut d = 0.5 * h * (b1[j] + b2[j]);
            for c in 0..driver.channels() {
                d += 0.5 * (ks1[c][j] + ks2[c][j]) * driver.increments(c)[k];
            }
            phi[j] += d;
        }
        // ϖ of the drift's fiber part is 2πc_b.
        let mut dth = 0.5 * h * crate::TAU * (cb1 + cb2);
        for c in 0..driver.channels() {
            dth += 0.5 * (om1[c] + om2[c]) * driver.increments(c)[k];
        }
        theta.push(theta[k] + dth);
        phi_path.push(phi.clone());
    }

    // h = Φ∘r_{-θ}: evaluate the lifted map at x - θ through its interpolant.
    let mut h_path = Vec::with_capacity(phi_path.len());
    for (state, th) in phi_path.iter().zip(&theta) {
        let disp: Vec<f64> = state.iter().zip(&nodes).map(|(&p, &x)| p - x).collect();
        let interp = TrigInterp::new(&disp);
        h_path.push(
            nodes.iter().map(|&x| (x - th) + interp.eval(x - th)).collect::<Vec<f64>>(),
        );
    }
    let mut qv_max = 0.0_f64;
    for j in 0..n {
        let mut qv = 0.0;
        for k in 0..h_path.len() - 1 {
            let d = h_path[k + 1][j] - h_path[k][j];
            qv += d * d;
        }
        qv_max = qv_max.max(qv);
    }
    Ok(VerticalDriftReport { phi_path, h_path, theta, qv_max, drift0_h, field_magnitude })
}

/// Per-axis field closures for the 2-D lift; arguments are the image point
/// and the companion density. Components are expected to form a gradient.
pub struct TorusField {
    eval_x: Box<dyn Fn(f64, f64, &GridDensity) -> f64 + Send + Sync>,
    eval_y: Box<dyn Fn(f64, f64, &GridDensity) -> f64 + Send + Sync>,
}

impl TorusField {
    pub fn gradient(
        eval_x: impl Fn(f64, f64, &GridDensity) -> f64 + Send + Sync + 'static,
        eval_y: impl Fn(f64, f64, &GridDensity) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { eval_x: Box::new(eval_x), eval_y: Box::new(eval_y) }
    }
}

/// 2-D node lift. Same left-point stepping as the 1-D version; the companion
/// density is the kernel-deposit pushforward, so measure feedback through the
/// fields is first-order accurate.
pub fn horizontal_lift_2d(
    fields: &[TorusField],
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> Result<Vec<DiscreteDiffeo>> {
    assert_eq!(phi0.dim(), 2);
    assert_eq!(fields.len(), driver.channels() + 1);
    let nn = phi0.phi[0].len();
    let h = driver.h();
    let mut px = phi0.phi[0].clone();
    let mut py = phi0.phi[1].clone();
    let mut out = Vec::with_capacity(driver.steps() + 1);
    out.push(phi0.clone());
    for k in 0..driver.steps() {
        let rho = out[k].rho();
        for j in 0..nn {
            let (x, y) = (wrap(px[j]), wrap(py[j]));
            let mut dx = h * (fields[0].eval_x)(x, y, rho);
            let mut dy = h * (fields[0].eval_y)(x, y, rho);
            for c in 0..driver.channels() {
                let dw = driver.increments(c)[k];
                dx += (fields[c + 1].eval_x)(x, y, rho) * dw;
                dy += (fields[c + 1].eval_y)(x, y, rho) * dw;
            }
            px[j] += dx;
            py[j] += dy;
        }
        out.push(DiscreteDiffeo::new_2d(px.clone(), py.clone())?);
    }
    Ok(out)
}

struct QRhs2 {
    n_img: Vec<[Vec<f64>; 2]>,
    verticality: f64,
}

fn q_rhs_2d(
    fields: &[TorusField],
    diffeo: &DiscreteDiffeo,
    samples: &[Vec<f64>],
) -> Result<QRhs2> {
    let n = diffeo.n;
    let nn = n * n;
    let (px, py) = (&diffeo.phi[0], &diffeo.phi[1]);
    let ax = transfer_to_grid_2d(px, py, &samples[0], n);
    let ay = transfer_to_grid_2d(px, py, &samples[1], n);
    let solver = WeightedHodgeSolver::new(diffeo.rho.clone())?;
    let split = solver.hodge_split(&[&ax, &ay])?;
    let y_refs: Vec<&[f64]> = split.y.iter().map(|c| c.as_slice()).collect();
    let verticality = solver.inner(&y_refs, &y_refs).sqrt();
    let dx = crate::TAU / n as f64;
    let mut n_img = Vec::with_capacity(fields.len());
    for field in fields {
        let mut zx = vec![0.0; nn];
        let mut zy = vec![0.0; nn];
        for idx in 0..nn {
            let (i, j) = (idx / n, idx % n);
            let (x, y) = (i as f64 * dx, j as f64 * dx);
            zx[idx] = (field.eval_x)(x, y, &diffeo.rho);
            zy[idx] = (field.eval_y)(x, y, &diffeo.rho);
        }
        let nt = hodge::normal_tensor(
            &solver,
            &TangentInput::Gradient { psi: &split.psi },
            &[&zx, &zy],
        )?;
        let at_images_x: Vec<f64> = (0..nn)
            .map(|j| bilinear_2d(&nt[0], n, px[j], py[j]))
            .collect();
        let at_images_y: Vec<f64> = (0..nn)
            .map(|j| bilinear_2d(&nt[1], n, px[j], py[j]))
            .collect();
        n_img.push([at_images_x, at_images_y]);
    }
    Ok(QRhs2 { n_img, verticality })
}

/// 2-D transport along a lifted path, Heun only. Accuracy is limited by the
/// kernel transfer; the exact cancellations (constant-derivative fields) are
/// preserved because they hold at the solver level.
pub fn integrate_q_2d(
    fields: &[TorusField],
    path: &[DiscreteDiffeo],
    u0: &DiffeoTangent,
    driver: &BrownianDriver,
) -> Result<Vec<TransportState>> {
    assert_eq!(path.len(), driver.steps() + 1);
    assert_eq!(fields.len(), driver.channels() + 1);
    assert_eq!(u0.base().dim(), 2);
    let nn = path[0].phi[0].len();
    let h = driver.h();
    let ch = driver.channels();
    let mut mx = u0.samples()[0].clone();
    let mut my = u0.samples()[1].clone();
    let mut states = Vec::with_capacity(path.len());
    for k in 0..driver.steps() {
        let rhs1 = q_rhs_2d(fields, &path[k], &[mx.clone(), my.clone()])?;
        let tangent = DiffeoTangent {
            base: path[k].clone(),
            samples: vec![mx.clone(), my.clone()],
            horizontal: u0.is_horizontal(),
        };
        let norm = tangent.norm_vol();
        states.push(TransportState {
            t: k as f64 * h,
            tangent,
            norm,
            verticality: rhs1.verticality,
            hf_fraction: 0.0,
        });
        let mut xi = vec![h];
        for c in 0..ch {
            xi.push(driver.increments(c)[k]);
        }
        let mut px = mx.clone();
        let mut py = my.clone();
        for i in 0..fields.len() {
            for j in 0..nn {
                px[j] += rhs1.n_img[i][0][j] * xi[i];
                py[j] += rhs1.n_img[i][1][j] * xi[i];
            }
        }
        let rhs2 = q_rhs_2d(fields, &path[k + 1], &[px, py])?;
        for i in 0..fields.len() {
            for j in 0..nn {
                mx[j] += 0.5 * (rhs1.n_img[i][0][j] + rhs2.n_img[i][0][j]) * xi[i];
                my[j] += 0.5 * (rhs1.n_img[i][1][j] + rhs2.n_img[i][1][j]) * xi[i];
            }
        }
    }
    let last = path.len() - 1;
    let rhs = q_rhs_2d(fields, &path[last], &[mx.clone(), my.clone()])?;
    let tangent = DiffeoTangent {
        base: path[last].clone(),
        samples: vec![mx, my],
        horizontal: u0.is_horizontal(),
    };
    let norm = tangent.norm_vol();
    states.push(TransportState {
        t: driver.t_end(),
        tangent,
        norm,
        verticality: rhs.verticality,
        hf_fraction: 0.0,
    });
    Ok(states)
}
