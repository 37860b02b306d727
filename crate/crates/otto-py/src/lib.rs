//! Python bindings: thin wrappers over the otto types, with Python callables
//! admitted where the library takes closures.
//!
//! Wrappers are frozen; every method goes through shared references. Python
//! callables used as field coefficients run under the GIL, so the binding
//! functions that drive them release it for the duration of the solve.

use std::sync::{Arc, Mutex};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use otto::integrators::{BrownianDriver as Driver, Scheme};
use otto::mckean_vlasov::{self as mkv, InteractionKernel, MKVField as Field, MKVProblem as Problem};
use otto::wasserstein::{
    self, GridDensity as Grid, Measure, MeasureVectorField, ParticleCloud as Cloud,
    TangentPotential,
};
use otto::{hodge, submersion, wtransport};

fn oerr(e: otto::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn version() -> &'static str {
    otto::VERSION
}

// ---------------------------------------------------------------------------
// geometry

#[pyclass(frozen)]
struct Manifold {
    inner: otto::geometry::Manifold,
}

#[pymethods]
impl Manifold {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        otto::geometry::Manifold::by_name(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown manifold '{name}'")))
    }

    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }

    fn closest_point(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.closest_point(&y).map_err(oerr)
    }

    fn tangent_project(&self, x: Vec<f64>, v: Vec<f64>) -> Vec<f64> {
        self.inner.tangent_project(&x, &v)
    }

    fn constraint_violation(&self, x: Vec<f64>) -> f64 {
        self.inner.constraint_violation(&x)
    }

    fn distance(&self, x: Vec<f64>, y: Vec<f64>) -> f64 {
        self.inner.distance(&x, &y)
    }
}

// ---------------------------------------------------------------------------
// integrators

#[pyclass(frozen)]
struct BrownianDriver {
    inner: Driver,
}

#[pymethods]
impl BrownianDriver {
    #[new]
    fn new(channels: usize, t_end: f64, h: f64, seed: u64) -> PyResult<Self> {
        Driver::new(channels, t_end, h, seed).map(|inner| Self { inner }).map_err(oerr)
    }

    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn h(&self) -> f64 {
        self.inner.h()
    }

    fn increments(&self, channel: usize) -> Vec<f64> {
        self.inner.increments(channel).to_vec()
    }

    fn refine(&self) -> Self {
        Self { inner: self.inner.refine() }
    }
}

fn parse_scheme(name: &str) -> PyResult<Scheme> {
    match name {
        "ito" => Ok(Scheme::ItoProjected),
        "stratonovich" => Ok(Scheme::StratonovichHeun),
        other => Err(PyValueError::new_err(format!("unknown scheme '{other}'"))),
    }
}

/// Integrates dX = drift dt + sum_i noise_i dW_i on the manifold; `drift` maps
/// (t, x) to a vector, each noise entry maps x to a vector.
#[pyfunction]
#[pyo3(signature = (manifold, x0, drift, noise, driver, scheme = "stratonovich"))]
fn integrate_sde<'py>(
    py: Python<'py>,
    manifold: &Manifold,
    x0: Vec<f64>,
    drift: Bound<'py, PyAny>,
    noise: Vec<Bound<'py, PyAny>>,
    driver: &BrownianDriver,
    scheme: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let scheme = parse_scheme(scheme)?;
    let caught = std::rc::Rc::new(std::cell::RefCell::new(None::<PyErr>));
    let dim = manifold.inner.ambient_dim();
    let catch = move |slot: &std::rc::Rc<std::cell::RefCell<Option<PyErr>>>, e: PyErr| {
        slot.borrow_mut().get_or_insert(e);
        vec![f64::NAN; dim]
    };
    let drift_slot = caught.clone();
    let drift_fn = move |t: f64, x: &[f64]| -> Vec<f64> {
        drift
            .call1((t, x.to_vec()))
            .and_then(|r| r.extract())
            .unwrap_or_else(|e| catch(&drift_slot, e))
    };
    let noise_fns: Vec<Box<dyn Fn(&[f64]) -> Vec<f64> + 'py>> = noise
        .into_iter()
        .map(|cb| {
            let slot = caught.clone();
            Box::new(move |x: &[f64]| {
                cb.call1((x.to_vec(),))
                    .and_then(|r| r.extract())
                    .unwrap_or_else(|e| catch(&slot, e))
            }) as Box<dyn Fn(&[f64]) -> Vec<f64> + 'py>
        })
        .collect();
    let noise_refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> =
        noise_fns.iter().map(|f| f.as_ref() as &dyn Fn(&[f64]) -> Vec<f64>).collect();
    let sample = otto::integrators::integrate_manifold_sde(
        &manifold.inner,
        &x0,
        &drift_fn,
        &noise_refs,
        &driver.inner,
        scheme,
    );
    if let Some(e) = caught.borrow_mut().take() {
        return Err(e);
    }
    let sample = sample.map_err(oerr)?;
    let out = PyDict::new(py);
    out.set_item("points", sample.points)?;
    out.set_item("max_drift_violation", sample.max_drift_violation)?;
    out.set_item("h", sample.h)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// measures

#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct GridDensity {
    inner: Grid,
}

#[pymethods]
impl GridDensity {
    #[staticmethod]
    fn uniform(n: usize) -> PyResult<Self> {
        if !n.is_power_of_two() {
            return Err(PyValueError::new_err(format!("grid size {n} is not a power of two")));
        }
        Ok(Self { inner: Grid::uniform(n) })
    }

    #[staticmethod]
    fn uniform_2d(n: usize) -> PyResult<Self> {
        if !n.is_power_of_two() {
            return Err(PyValueError::new_err(format!("grid size {n} is not a power of two")));
        }
        Ok(Self { inner: Grid::uniform_2d(n) })
    }

    #[staticmethod]
    fn cosine_mode(n: usize, amplitude: f64, k: usize) -> PyResult<Self> {
        Grid::cosine_mode(n, amplitude, k).map(|inner| Self { inner }).map_err(oerr)
    }

    #[staticmethod]
    fn von_mises(n: usize, loc: f64, kappa: f64) -> PyResult<Self> {
        Grid::von_mises(n, loc, kappa).map(|inner| Self { inner }).map_err(oerr)
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn cell(&self) -> f64 {
        self.inner.cell()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn nodes(&self) -> Vec<f64> {
        self.inner.nodes()
    }

    fn integrate(&self, f: Vec<f64>) -> PyResult<f64> {
        if f.len() != self.inner.values().len() {
            return Err(PyValueError::new_err(format!(
                "expected {} samples, got {}",
                self.inner.values().len(),
                f.len()
            )));
        }
        Ok(self.inner.integrate(&f))
    }

    fn quantile(&self, s: f64) -> PyResult<f64> {
        self.inner.quantile(s).map_err(oerr)
    }

    fn trig_moment(&self, k: usize) -> (f64, f64) {
        self.inner.trig_moment(k)
    }

    fn pushforward_1d(&self, map: Vec<f64>) -> PyResult<Self> {
        self.inner.pushforward_1d(&map).map(|inner| Self { inner }).map_err(oerr)
    }
}

#[pyclass(frozen)]
struct ParticleCloud {
    inner: Cloud,
}

#[pymethods]
impl ParticleCloud {
    #[staticmethod]
    fn uniform_weights(points: Vec<f64>) -> Self {
        Self { inner: Cloud::uniform_weights(points) }
    }

    fn points(&self) -> Vec<f64> {
        self.inner.points().to_vec()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn trig_moment(&self, k: usize) -> (f64, f64) {
        self.inner.trig_moment(k)
    }

    #[pyo3(signature = (n, bandwidth = None))]
    fn to_grid(&self, n: usize, bandwidth: Option<f64>) -> PyResult<GridDensity> {
        self.inner.to_grid(n, bandwidth).map(|inner| GridDensity { inner }).map_err(oerr)
    }
}

fn to_measure(obj: &Bound<'_, PyAny>) -> PyResult<Measure> {
    if let Ok(g) = obj.cast::<GridDensity>() {
        return Ok(Measure::Grid(g.get().inner.clone()));
    }
    if let Ok(c) = obj.cast::<ParticleCloud>() {
        return Ok(Measure::Cloud(c.get().inner.clone()));
    }
    Err(PyValueError::new_err("expected a GridDensity or ParticleCloud"))
}

/// Circle W2 between two measures (GridDensity or ParticleCloud).
#[pyfunction]
#[pyo3(signature = (mu, nu, m = None))]
fn w2_circle(mu: &Bound<'_, PyAny>, nu: &Bound<'_, PyAny>, m: Option<usize>) -> PyResult<f64> {
    let (mu, nu) = (to_measure(mu)?, to_measure(nu)?);
    match m {
        Some(m) => wasserstein::w2_circle_m(&mu, &nu, m).map_err(oerr),
        None => wasserstein::w2_circle(&mu, &nu).map_err(oerr),
    }
}

// ---------------------------------------------------------------------------
// hodge

#[pyclass(frozen)]
struct HodgeSolver {
    inner: hodge::WeightedHodgeSolver,
}

#[pymethods]
impl HodgeSolver {
    #[new]
    fn new(rho: &GridDensity) -> PyResult<Self> {
        hodge::WeightedHodgeSolver::new(rho.inner.clone())
            .map(|inner| Self { inner })
            .map_err(oerr)
    }

    fn split<'py>(&self, py: Python<'py>, a: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let refs: Vec<&[f64]> = a.iter().map(|c| c.as_slice()).collect();
        let split = self.inner.hodge_split(&refs).map_err(oerr)?;
        let out = PyDict::new(py);
        out.set_item("psi", split.psi)?;
        out.set_item("y", split.y)?;
        out.set_item("residual", split.residual)?;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// mckean-vlasov

#[derive(Clone)]
enum FieldSpec {
    Zero,
    Constant(f64),
    GradientPotential(String, f64),
    Interaction(String, f64),
    EntropyDrift(f64),
}

impl FieldSpec {
    fn build(&self) -> PyResult<Field> {
        match self {
            FieldSpec::Zero => Ok(Field::zero()),
            FieldSpec::Constant(c) => Ok(Field::constant(*c)),
            FieldSpec::GradientPotential(expr, a) => {
                Field::gradient_potential(expr, *a).map_err(oerr)
            }
            FieldSpec::Interaction(kernel, s) => {
                let kernel = match kernel.as_str() {
                    "sin" => InteractionKernel::Sine,
                    "cos" => InteractionKernel::Cosine,
                    other => {
                        return Err(PyValueError::new_err(format!(
                            "unknown interaction kernel '{other}'"
                        )))
                    }
                };
                Ok(Field::interaction(kernel, *s))
            }
            FieldSpec::EntropyDrift(s) => Ok(Field::entropy_drift(*s)),
        }
    }
}

#[pyclass(frozen)]
struct MKVField {
    spec: FieldSpec,
}

#[pymethods]
impl MKVField {
    #[staticmethod]
    fn zero() -> Self {
        Self { spec: FieldSpec::Zero }
    }

    #[staticmethod]
    fn constant(c: f64) -> Self {
        Self { spec: FieldSpec::Constant(c) }
    }

    #[staticmethod]
    fn gradient_potential(expr: &str, amplitude: f64) -> PyResult<Self> {
        let spec = FieldSpec::GradientPotential(expr.to_owned(), amplitude);
        spec.build()?;
        Ok(Self { spec })
    }

    #[staticmethod]
    fn interaction(kernel: &str, strength: f64) -> PyResult<Self> {
        let spec = FieldSpec::Interaction(kernel.to_owned(), strength);
        spec.build()?;
        Ok(Self { spec })
    }

    #[staticmethod]
    fn entropy_drift(strength: f64) -> Self {
        Self { spec: FieldSpec::EntropyDrift(strength) }
    }

    fn name(&self) -> PyResult<String> {
        Ok(self.spec.build()?.name().to_owned())
    }
}

#[pyclass(frozen)]
struct MKVProblem {
    inner: Problem,
}

#[pymethods]
impl MKVProblem {
    /// fields[0] is the drift; every further field rides one noise channel.
    #[new]
    fn new(
        fields: Vec<Py<MKVField>>,
        initial: &Bound<'_, PyAny>,
        ensemble: usize,
        h: f64,
        horizon: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let fields = fields
            .iter()
            .map(|f| f.get().spec.build())
            .collect::<PyResult<Vec<Field>>>()?;
        Problem::new(
            otto::geometry::Manifold::Circle,
            fields,
            to_measure(initial)?,
            ensemble,
            h,
            horizon,
            seed,
        )
        .map(|inner| Self { inner })
        .map_err(oerr)
    }
}

#[pyclass(frozen)]
struct Solution {
    inner: mkv::MKVSolution,
}

#[pymethods]
impl Solution {
    fn steps(&self) -> usize {
        self.inner.flow.steps()
    }

    fn h(&self) -> f64 {
        self.inner.flow.h
    }

    fn states(&self, k: usize) -> PyResult<Vec<f64>> {
        self.inner
            .flow
            .states
            .get(k)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("step {k} out of range")))
    }

    fn measure_at(&self, k: usize) -> PyResult<ParticleCloud> {
        if k >= self.inner.flow.states.len() {
            return Err(PyValueError::new_err(format!("step {k} out of range")));
        }
        Ok(ParticleCloud { inner: self.inner.flow.measure_at(k) })
    }

    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = &self.inner.diagnostics;
        let out = PyDict::new(py);
        out.set_item("iterations", d.iterations)?;
        out.set_item("halvings", d.halvings)?;
        out.set_item("monotonicity_violations", d.monotonicity_violations)?;
        let windows = PyList::empty(py);
        for w in &d.windows {
            let entry = PyDict::new(py);
            entry.set_item("t_start", w.t_start)?;
            entry.set_item("t_end", w.t_end)?;
            entry.set_item("gaps", w.gaps.clone())?;
            windows.append(entry)?;
        }
        out.set_item("windows", windows)?;
        Ok(out)
    }
}

#[pyfunction]
#[pyo3(signature = (problem, tol = 1e-8, max_iter = 25))]
fn picard_solve(
    py: Python<'_>,
    problem: &MKVProblem,
    tol: f64,
    max_iter: usize,
) -> PyResult<Solution> {
    py.detach(|| mkv::picard_solve(&problem.inner, tol, max_iter))
        .map(|inner| Solution { inner })
        .map_err(oerr)
}

#[pyfunction]
fn step_solve(py: Python<'_>, problem: &MKVProblem) -> PyResult<Solution> {
    py.detach(|| mkv::self_consistent_step_solve(&problem.inner))
        .map(|inner| Solution { inner })
        .map_err(oerr)
}

/// Ito residuals of the solved flow against cos, sin, cos 2x.
#[pyfunction]
fn sde_residuals<'py>(
    py: Python<'py>,
    problem: &MKVProblem,
    solution: &Solution,
) -> PyResult<Bound<'py, PyDict>> {
    let path = solution.inner.flow.measure_path();
    let tests = mkv::standard_test_functions();
    let driver = problem.inner.driver().map_err(oerr)?;
    let report =
        mkv::verify_wasserstein_sde(&path, &problem.inner.fields, &tests, &driver).map_err(oerr)?;
    let out = PyDict::new(py);
    out.set_item("sup", report.sup)?;
    let per = PyList::empty(py);
    for f in &report.per_function {
        let entry = PyDict::new(py);
        entry.set_item("name", f.name.clone())?;
        entry.set_item("sup", f.sup)?;
        entry.set_item("terminal", f.terminal)?;
        per.append(entry)?;
    }
    out.set_item("per_function", per)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// hopf fibration

#[pyclass(frozen)]
struct HopfFibration {
    inner: submersion::HopfFibration,
}

#[pymethods]
impl HopfFibration {
    #[new]
    fn new() -> Self {
        Self { inner: submersion::HopfFibration }
    }

    fn project(&self, q: Vec<f64>) -> Vec<f64> {
        self.inner.project(&q)
    }

    fn differential(&self, q: Vec<f64>, w: Vec<f64>) -> Vec<f64> {
        self.inner.differential(&q, &w)
    }

    fn vertical_generator(&self, q: Vec<f64>) -> Vec<f64> {
        self.inner.vertical_generator(&q)
    }

    fn horizontal_lift_vector(&self, q: Vec<f64>, v: Vec<f64>) -> Vec<f64> {
        self.inner.horizontal_lift_vector(&q, &v)
    }

    fn oneill_tensor(&self, q: Vec<f64>, u: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
        self.inner.oneill_tensor(&q, &u, &b)
    }

    fn fiber_phase(&self, q_start: Vec<f64>, q_end: Vec<f64>) -> f64 {
        self.inner.fiber_phase(&q_start, &q_end)
    }
}

// ---------------------------------------------------------------------------
// transport on the diffeomorphism bundle

/// A measure-indexed vector field whose values come from a Python callable.
/// The callable sees (points, rho_values) and returns one value per point;
/// exceptions surface after the enclosing solve finishes.
#[pyclass(frozen)]
struct MeasureField {
    callable: Py<PyAny>,
    caught: Arc<Mutex<Option<PyErr>>>,
}

impl MeasureField {
    fn build(&self) -> MeasureVectorField {
        let callable = Python::attach(|py| self.callable.clone_ref(py));
        let slot = self.caught.clone();
        MeasureVectorField::gradient(move |xs: &[f64], rho: &Grid| {
            Python::attach(|py| {
                let args = (xs.to_vec(), rho.values().to_vec());
                match callable.bind(py).call1(args).and_then(|r| r.extract::<Vec<f64>>()) {
                    Ok(v) if v.len() == xs.len() => v,
                    Ok(v) => {
                        slot.lock().unwrap().get_or_insert(PyValueError::new_err(format!(
                            "field callable returned {} values for {} points",
                            v.len(),
                            xs.len()
                        )));
                        vec![f64::NAN; xs.len()]
                    }
                    Err(e) => {
                        slot.lock().unwrap().get_or_insert(e);
                        vec![f64::NAN; xs.len()]
                    }
                }
            })
        })
    }
}

#[pymethods]
impl MeasureField {
    #[staticmethod]
    fn gradient(callable: Py<PyAny>) -> Self {
        Self { callable, caught: Arc::new(Mutex::new(None)) }
    }
}

fn raise_caught(fields: &[Py<MeasureField>]) -> PyResult<()> {
    for f in fields {
        if let Some(e) = f.get().caught.lock().unwrap().take() {
            return Err(e);
        }
    }
    Ok(())
}

#[pyclass(frozen)]
struct DiscreteDiffeo {
    inner: wtransport::DiscreteDiffeo,
}

#[pymethods]
impl DiscreteDiffeo {
    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self { inner: wtransport::DiscreteDiffeo::identity(n) }
    }

    #[staticmethod]
    fn from_quantile(mu: &GridDensity) -> PyResult<Self> {
        wtransport::DiscreteDiffeo::from_quantile(&mu.inner)
            .map(|inner| Self { inner })
            .map_err(oerr)
    }

    fn compose_rotation(&self, a: f64) -> PyResult<Self> {
        self.inner.compose_rotation(a).map(|inner| Self { inner }).map_err(oerr)
    }

    fn n(&self) -> usize {
        self.inner.n()
    }

    fn phi(&self) -> Vec<f64> {
        self.inner.phi_1d().to_vec()
    }

    fn derivative_at_nodes(&self) -> Vec<f64> {
        self.inner.derivative_at_nodes()
    }

    fn rho(&self) -> GridDensity {
        GridDensity { inner: self.inner.rho().clone() }
    }
}

/// Horizontal lift of the measure diffusion driven by `fields` (drift first).
#[pyfunction]
fn horizontal_lift(
    py: Python<'_>,
    fields: Vec<Py<MeasureField>>,
    phi0: &DiscreteDiffeo,
    driver: &BrownianDriver,
) -> PyResult<Vec<DiscreteDiffeo>> {
    let built: Vec<MeasureVectorField> = fields.iter().map(|f| f.get().build()).collect();
    let path = py.detach(|| {
        wtransport::horizontal_lift_measure_diffusion(&built, &phi0.inner, &driver.inner)
    });
    raise_caught(&fields)?;
    Ok(path.map_err(oerr)?.into_iter().map(|inner| DiscreteDiffeo { inner }).collect())
}

/// Stochastic parallel transport of the tangent potential `v0` along the
/// measure diffusion; reports one dict per step.
#[pyfunction]
fn parallel_transport<'py>(
    py: Python<'py>,
    fields: Vec<Py<MeasureField>>,
    mu0: &GridDensity,
    v0: Vec<f64>,
    driver: &BrownianDriver,
) -> PyResult<Bound<'py, PyList>> {
    let built: Vec<MeasureVectorField> = fields.iter().map(|f| f.get().build()).collect();
    let v0 = TangentPotential::new(v0);
    let states = py.detach(|| {
        wtransport::stochastic_parallel_transport_p(&built, &mu0.inner, &v0, &driver.inner)
    });
    raise_caught(&fields)?;
    let out = PyList::empty(py);
    for s in states.map_err(oerr)? {
        let entry = PyDict::new(py);
        entry.set_item("t", s.t)?;
        entry.set_item("norm", s.norm)?;
        entry.set_item("verticality", s.verticality)?;
        entry.set_item("hf_fraction", s.hf_fraction)?;
        out.append(entry)?;
    }
    Ok(out)
}

#[pymodule]
fn otto_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Manifold>()?;
    m.add_class::<BrownianDriver>()?;
    m.add_class::<GridDensity>()?;
    m.add_class::<ParticleCloud>()?;
    m.add_class::<HodgeSolver>()?;
    m.add_class::<MKVField>()?;
    m.add_class::<MKVProblem>()?;
    m.add_class::<Solution>()?;
    m.add_class::<HopfFibration>()?;
    m.add_class::<MeasureField>()?;
    m.add_class::<DiscreteDiffeo>()?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_sde, m)?)?;
    m.add_function(wrap_pyfunction!(w2_circle, m)?)?;
    m.add_function(wrap_pyfunction!(picard_solve, m)?)?;
    m.add_function(wrap_pyfunction!(step_solve, m)?)?;
    m.add_function(wrap_pyfunction!(sde_residuals, m)?)?;
    m.add_function(wrap_pyfunction!(horizontal_lift, m)?)?;
    m.add_function(wrap_pyfunction!(parallel_transport, m)?)?;
    Ok(())
}
