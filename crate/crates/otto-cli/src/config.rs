//! Config schema and the catalogs it draws from.
//!
//! A config is a JSON object dispatched on `"kind"`; unknown keys are
//! rejected at every level so a typo cannot silently change a run. Seeds are
//! decimal strings: they name bit-exact RNG streams, and parsing them
//! through f64 would be a portability bug.

use otto::mckean_vlasov::{InteractionKernel, MKVField};
use otto::wasserstein::{GridDensity, MeasureVectorField, TangentPotential};
use otto::wtransport::{RightInvariantField, VerticalField};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::{cfg, cfg_from, Failure};

pub enum Scenario {
    ManifoldSde(ManifoldSdeCfg),
    Hopf(HopfCfg),
    Mkv(MkvCfg),
    Wtransport(WtransportCfg),
    Decompose(DecomposeCfg),
    Invariants(InvariantsCfg),
}

pub fn parse(raw: &[u8]) -> Result<Scenario, Failure> {
    let mut v: Value =
        serde_json::from_slice(raw).map_err(|e| cfg(format!("invalid JSON: {e}")))?;
    let kind = take_tag(&mut v, "kind", "config")?;
    match kind.as_str() {
        "manifold_sde" => Ok(Scenario::ManifoldSde(from_cfg(v)?)),
        "hopf" => Ok(Scenario::Hopf(from_cfg(v)?)),
        "mkv" => Ok(Scenario::Mkv(from_cfg(v)?)),
        "wtransport" => Ok(Scenario::Wtransport(from_cfg(v)?)),
        "decompose" => Ok(Scenario::Decompose(from_cfg(v)?)),
        "invariants" => Ok(Scenario::Invariants(from_cfg(v)?)),
        other => Err(cfg(format!("unknown scenario kind '{other}'"))),
    }
}

fn from_cfg<T: DeserializeOwned>(v: Value) -> Result<T, Failure> {
    serde_json::from_value(v).map_err(|e| cfg(e.to_string()))
}

fn take_tag(v: &mut Value, key: &str, ctx: &str) -> Result<String, Failure> {
    let map = v
        .as_object_mut()
        .ok_or_else(|| cfg(format!("{ctx} must be a JSON object")))?;
    match map.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(cfg(format!("{ctx}: '{key}' must be a string"))),
        None => Err(cfg(format!("{ctx}: missing '{key}'"))),
    }
}

fn default_seeds() -> Vec<String> {
    vec!["0".into()]
}

pub fn parse_seeds(seeds: &[String]) -> Result<Vec<u64>, Failure> {
    if seeds.is_empty() {
        return Err(cfg("at least one seed is required"));
    }
    seeds
        .iter()
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| cfg(format!("seed '{s}' is not a decimal u64")))
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSdeCfg {
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<String>,
    pub manifold: String,
    #[serde(default)]
    pub drift: Vec<RotationSpec>,
    #[serde(default)]
    pub noise: Vec<RotationSpec>,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub params: SdeParams,
}

fn default_scheme() -> String {
    "stratonovich".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeParams {
    pub h: f64,
    pub t_end: f64,
    pub paths: usize,
}

/// Generator of the ambient rotation in coordinate plane (i, j), scaled.
/// These are tangent to every manifold in the catalog as long as the plane
/// respects the product structure, which `validate_plane` enforces.
#[derive(Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct RotationSpec {
    pub plane: [usize; 2],
    pub amplitude: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopfCfg {
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<String>,
    pub drift: HarmonicSpec,
    #[serde(default)]
    pub noise: Vec<HarmonicSpec>,
    /// Vertical scalar added to the drift, as a multiple of V(q).
    #[serde(default)]
    pub vertical_drift: f64,
    /// Vertical scalar per noise channel; empty means all zero.
    #[serde(default)]
    pub vertical_noise: Vec<f64>,
    pub params: HopfParams,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopfParams {
    pub h: f64,
    pub t_end: f64,
}

/// Real spherical-harmonic coefficients of a base potential, degrees 1 and 2:
/// l1 weights (y0, y1, y2); l2 weights (y0y1, y1y2, y2y0, y0^2-y1^2,
/// 2y2^2-y0^2-y1^2).
#[derive(Deserialize, Clone, Copy, Default)]
#[serde(deny_unknown_fields)]
pub struct HarmonicSpec {
    #[serde(default)]
    pub l1: [f64; 3],
    #[serde(default)]
    pub l2: [f64; 5],
}

impl HarmonicSpec {
    /// Ambient gradient of the harmonic polynomial at y.
    pub fn ambient_gradient(&self, y: &[f64]) -> Vec<f64> {
        let [a, b, c] = self.l1;
        let [q01, q12, q20, d01, dz] = self.l2;
        vec![
            a + q01 * y[1] + q20 * y[2] + 2.0 * (d01 - dz) * y[0],
            b + q01 * y[0] + q12 * y[2] - 2.0 * (d01 + dz) * y[1],
            c + q12 * y[1] + q20 * y[0] + 4.0 * dz * y[2],
        ]
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MkvCfg {
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<String>,
    #[serde(default = "default_circle")]
    pub manifold: String,
    pub initial: String,
    pub drift: Value,
    #[serde(default)]
    pub noise: Vec<Value>,
    #[serde(default = "default_solver")]
    pub solver: String,
    pub params: MkvParams,
}

fn default_circle() -> String {
    "circle".into()
}

fn default_solver() -> String {
    "picard".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MkvParams {
    pub h: f64,
    pub t_end: f64,
    pub ensemble: usize,
    #[serde(default = "default_grid_n")]
    pub n: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_grid_n() -> usize {
    256
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    25
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GradSpec {
    expr: String,
    amplitude: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionSpec {
    kernel: String,
    strength: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrengthSpec {
    strength: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantSpec {
    value: f64,
}

pub fn mkv_field(v: &Value) -> Result<MKVField, Failure> {
    let mut v = v.clone();
    let tag = take_tag(&mut v, "type", "field")?;
    match tag.as_str() {
        "gradient_potential" => {
            let s: GradSpec = from_cfg(v)?;
            MKVField::gradient_potential(&s.expr, s.amplitude).map_err(cfg_from)
        }
        "interaction" => {
            let s: InteractionSpec = from_cfg(v)?;
            let kernel = match s.kernel.as_str() {
                "sin" => InteractionKernel::Sine,
                "cos" => InteractionKernel::Cosine,
                other => return Err(cfg(format!("unknown interaction kernel '{other}'"))),
            };
            Ok(MKVField::interaction(kernel, s.strength))
        }
        "entropy_drift" => {
            let s: StrengthSpec = from_cfg(v)?;
            Ok(MKVField::entropy_drift(s.strength))
        }
        "constant" => {
            let s: ConstantSpec = from_cfg(v)?;
            Ok(MKVField::constant(s.value))
        }
        other => Err(cfg(format!("unknown field type '{other}'"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WtransportCfg {
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<String>,
    pub initial: String,
    pub drift: PotentialSpec,
    #[serde(default)]
    pub noise: Vec<PotentialSpec>,
    pub v0: PotentialSpec,
    /// Fiber rotation used for the second run behind the fiber-gap column.
    #[serde(default = "default_fiber_offset")]
    pub fiber_offset: f64,
    pub params: GridRunParams,
}

fn default_fiber_offset() -> f64 {
    0.9
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRunParams {
    pub n: usize,
    pub h: f64,
    pub t_end: f64,
}

/// Trigonometric potential a*expr(x); exprs match the gradient_potential
/// catalog so the same names mean the same fields everywhere.
#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub expr: String,
    pub amplitude: f64,
}

impl PotentialSpec {
    fn pair(&self) -> Result<(fn(f64) -> f64, fn(f64) -> f64), Failure> {
        Ok(match self.expr.as_str() {
            "cos" => (|x: f64| x.cos(), |x: f64| -x.sin()),
            "sin" => (|x: f64| x.sin(), |x: f64| x.cos()),
            "cos2" => (
                |x: f64| (2.0 * x).cos(),
                |x: f64| -2.0 * (2.0 * x).sin(),
            ),
            "sin2" => (
                |x: f64| (2.0 * x).sin(),
                |x: f64| 2.0 * (2.0 * x).cos(),
            ),
            other => return Err(cfg(format!("unknown potential expression '{other}'"))),
        })
    }

    pub fn tangent_potential(&self, n: usize) -> Result<TangentPotential, Failure> {
        let (f, _) = self.pair()?;
        let a = self.amplitude;
        let vals: Vec<f64> = (0..n)
            .map(|j| a * f(otto::TAU * j as f64 / n as f64))
            .collect();
        Ok(TangentPotential::new(vals))
    }

    pub fn gradient_field(&self) -> Result<MeasureVectorField, Failure> {
        let (_, df) = self.pair()?;
        let a = self.amplitude;
        Ok(MeasureVectorField::gradient(move |xs, _| {
            xs.iter().map(|&x| a * df(x)).collect()
        }))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeCfg {
    pub out_dir: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<String>,
    pub initial: String,
    /// fields[0] rides the drift slot, the rest one noise channel each.
    pub fields: Vec<RiSpec>,
    pub params: GridRunParams,
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct RiSpec {
    #[serde(default)]
    pub potential: Option<PotentialSpec>,
    #[serde(default)]
    pub vertical: Option<VerticalSpec>,
}

/// Vertical coefficient c(mu) = c0 + c1 * <cos x>_mu in the fiber chart.
#[derive(Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
pub struct VerticalSpec {
    pub c0: f64,
    #[serde(default)]
    pub c1: f64,
}

pub fn ri_field(spec: &RiSpec) -> Result<RightInvariantField, Failure> {
    let z = spec
        .potential
        .as_ref()
        .map(|p| p.gradient_field())
        .transpose()?;
    let y = spec.vertical.map(|VerticalSpec { c0, c1 }| {
        VerticalField::new(format!("affine({c0},{c1})"), move |mm| {
            c0 + c1 * mm.trig_moment(1).0
        })
    });
    match (z, y) {
        (Some(z), Some(y)) => Ok(RightInvariantField::mixed(z, y)),
        (Some(z), None) => Ok(RightInvariantField::horizontal(z)),
        (None, Some(y)) => Ok(RightInvariantField::vertical(y)),
        (None, None) => Err(cfg("field entry needs a potential, a vertical part, or both")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantsCfg {
    pub out_dir: String,
}

/// Named density families: "uniform", "cosine(a,k)", "vonmises(kappa)" or
/// "vonmises(loc,kappa)".
pub fn measure_family(s: &str, n: usize) -> Result<GridDensity, Failure> {
    if !n.is_power_of_two() {
        return Err(cfg(format!("grid size must be a power of two, got {n}")));
    }
    let (name, args) = split_family(s)?;
    match (name, args.as_slice()) {
        ("uniform", []) => Ok(GridDensity::uniform(n)),
        ("cosine", [a, k]) => {
            if k.fract() != 0.0 || *k < 1.0 {
                return Err(cfg(format!("cosine mode index must be a positive integer, got {k}")));
            }
            GridDensity::cosine_mode(n, *a, *k as usize).map_err(cfg_from)
        }
        ("vonmises", [kappa]) => GridDensity::von_mises(n, 0.0, *kappa).map_err(cfg_from),
        ("vonmises", [loc, kappa]) => GridDensity::von_mises(n, *loc, *kappa).map_err(cfg_from),
        _ => Err(cfg(format!("unknown measure family '{s}'"))),
    }
}

fn split_family(s: &str) -> Result<(&str, Vec<f64>), Failure> {
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s, Vec::new()));
    };
    let Some(stripped) = s.strip_suffix(')') else {
        return Err(cfg(format!("malformed measure family '{s}'")));
    };
    let name = &s[..open];
    let args = stripped[open + 1..]
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| cfg(format!("bad numeric argument in '{s}'")))
        })
        .collect::<Result<Vec<f64>, Failure>>()?;
    Ok((name, args))
}
