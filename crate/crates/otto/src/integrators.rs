//! Time stepping for manifold SDEs: seeded Brownian drivers with dyadic
//! refinement, projected Euler–Maruyama (Itô) and projected Heun
//! (Stratonovich) schemes, drift conversion between the two calculi, and
//! frame/vector transport along discrete paths via exact chord rotations.

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::la;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Pre-drawn Brownian increments on a uniform grid.
///
/// Increments are generated channel-major from a ChaCha8 stream, so a driver
/// is bit-for-bit reproducible from `(channels, t_end, h, seed)`. `refine`
/// produces the half-step driver conditioned on this one: each increment is
/// split by a Brownian bridge, so coarse sums are preserved.
#[derive(Debug, Clone)]
pub struct BrownianDriver {
    channels: usize,
    t_end: f64,
    h: f64,
    steps: usize,
    seed: u64,
    level: u64,
    /// increments[c][k] ~ N(0, h)
    increments: Vec<Vec<f64>>,
}

impl BrownianDriver {
    pub fn new(channels: usize, t_end: f64, h: f64, seed: u64) -> Result<Self> {
        let ratio = t_end / h;
        if h <= 0.0 || t_end <= 0.0 || (ratio - ratio.round()).abs() > 1e-12 * ratio.max(1.0) {
            return Err(Error::BadGrid(format!(
                "t_end/h = {ratio} is not an integer step count"
            )));
        }
        let steps = ratio.round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sqrt_h = h.sqrt();
        let increments = (0..channels)
            .map(|_| {
                (0..steps)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * sqrt_h
                    })
                    .collect()
            })
            .collect();
        Ok(Self { channels, t_end, h, steps, seed, level: 0, increments })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn increments(&self, channel: usize) -> &[f64] {
        &self.increments[channel]
    }

    /// Brownian-bridge refinement: halves h, doubles the step count, and
    /// keeps every coarse increment equal to the sum of its two halves.
    pub fn refine(&self) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.level + 1);
        let half = 0.5 * self.h;
        let bridge_sd = (0.25 * self.h).sqrt();
        let increments = self
            .increments
            .iter()
            .map(|ch| {
                let mut fine = Vec::with_capacity(2 * ch.len());
                for &dw in ch {
                    let xi: f64 = {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * bridge_sd
                    };
                    fine.push(0.5 * dw + xi);
                    fine.push(0.5 * dw - xi);
                }
                fine
            })
            .collect();
        Self {
            channels: self.channels,
            t_end: self.t_end,
            h: half,
            steps: 2 * self.steps,
            seed: self.seed,
            level: self.level + 1,
            increments,
        }
    }

    /// Refine `k` times.
    pub fn refine_to(&self, k: usize) -> Self {
        let mut d = self.clone();
        for _ in 0..k {
            d = d.refine();
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Ambient Euler–Maruyama with the second-fundamental-form drift
    /// correction, followed by closest-point projection.
    ItoProjected,
    /// Projected Heun predictor–corrector (Stratonovich).
    StratonovichHeun,
}

/// A discrete solution path on an embedded manifold.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub scheme: Scheme,
    pub h: f64,
    /// steps + 1 ambient points, points[0] = x0.
    pub points: Vec<Vec<f64>>,
    /// Largest constraint residual of any pre-projection point.
    pub max_drift_violation: f64,
}

impl PathSample {
    pub fn t(&self, k: usize) -> f64 {
        self.h * k as f64
    }

    pub fn terminal(&self) -> &[f64] {
        self.points.last().expect("path has at least the initial point")
    }
}

/// Drift fields may be time dependent; noise fields are autonomous.
pub type DriftFn<'a> = &'a dyn Fn(f64, &[f64]) -> Vec<f64>;
pub type NoiseFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

/// Integrate dX = A₀ dt + Σ A_i ∘/· dW on an embedded manifold.
///
/// `ItoProjected` treats `drift` as the manifold Itô drift and adds the
/// extrinsic correction −½ Σ II(A_i, A_i) before projecting each step;
/// `StratonovichHeun` treats `drift` as the Stratonovich drift.
pub fn integrate_manifold_sde(
    m: &Manifold,
    x0: &[f64],
    drift: DriftFn,
    noise: &[NoiseFn],
    driver: &BrownianDriver,
    scheme: Scheme,
) -> Result<PathSample> {
    assert_eq!(noise.len(), driver.channels(), "one driver channel per noise field");
    let h = driver.h();
    let mut points = Vec::with_capacity(driver.steps() + 1);
    let mut x = m.closest_point(x0)?;
    points.push(x.clone());
    let mut max_violation: f64 = 0.0;

    for k in 0..driver.steps() {
        let t = h * k as f64;
        match scheme {
            Scheme::ItoProjected => {
                let mut y = x.clone();
                let mut v = drift(t, &x);
                for (i, field) in noise.iter().enumerate() {
                    let a = field(&x);
                    la::axpy(&mut y, driver.increments(i)[k], &a);
                    la::axpy(&mut v, -0.5, &m.second_fundamental_form(&x, &a, &a));
                }
                la::axpy(&mut y, h, &v);
                max_violation = max_violation.max(m.constraint_violation(&y));
                x = m.closest_point(&y)?;
            }
            Scheme::StratonovichHeun => {
                let mut d1 = la::scale(&drift(t, &x), h);
                for (i, field) in noise.iter().enumerate() {
                    la::axpy(&mut d1, driver.increments(i)[k], &field(&x));
                }
                let pred_raw = la::add(&x, &d1);
                max_violation = max_violation.max(m.constraint_violation(&pred_raw));
                let pred = m.closest_point(&pred_raw)?;
                let mut d2 = la::scale(&drift(t + h, &pred), h);
                for (i, field) in noise.iter().enumerate() {
                    la::axpy(&mut d2, driver.increments(i)[k], &field(&pred));
                }
                let mut y = x.clone();
                la::axpy(&mut y, 0.5, &d1);
                la::axpy(&mut y, 0.5, &d2);
                max_violation = max_violation.max(m.constraint_violation(&y));
                x = m.closest_point(&y)?;
            }
        }
        points.push(x.clone());
    }

    Ok(PathSample { scheme, h, points, max_drift_violation: max_violation })
}

/// ½ Σ ∇_{A_i} A_i at x, by central differences of each field along itself.
/// This is the manifold Itô/Stratonovich drift gap: ito = strato + correction.
pub fn covariant_self_correction(m: &Manifold, noise: &[NoiseFn], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.ambient_dim()];
    let eps = 1e-6;
    for field in noise {
        let a = field(x);
        let xp = m.closest_point(&la::add(x, &la::scale(&a, eps))).expect("inside tube");
        let xm = m.closest_point(&la::sub(x, &la::scale(&a, eps))).expect("inside tube");
        let d = la::scale(&la::sub(&field(&xp), &field(&xm)), 1.0 / (2.0 * eps));
        la::axpy(&mut out, 0.5, &m.tangent_project(x, &d));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftConvention {
    ItoToStratonovich,
    StratonovichToIto,
}

/// Convert a drift value at x between the two calculi for the given noise.
pub fn ito_stratonovich_convert(
    m: &Manifold,
    drift_at_x: &[f64],
    noise: &[NoiseFn],
    x: &[f64],
    direction: DriftConvention,
) -> Vec<f64> {
    let corr = covariant_self_correction(m, noise, x);
    let sign = match direction {
        DriftConvention::StratonovichToIto => 1.0,
        DriftConvention::ItoToStratonovich => -1.0,
    };
    let mut out = drift_at_x.to_vec();
    la::axpy(&mut out, sign, &corr);
    out
}

/// One exact chord rotation: transport v from x to y along the connecting
/// geodesic (unit-vector form, applied per sphere or per torus factor).
fn chord_rotate(xu: &[f64], yu: &[f64], v: &[f64], step: usize) -> Result<Vec<f64>> {
    let denom = 1.0 + la::dot(xu, yu);
    if denom <= 1e-12 {
        return Err(Error::DegenerateStep { step });
    }
    let c = (la::dot(xu, v) + la::dot(yu, v)) / denom;
    let mut out = v.to_vec();
    for i in 0..out.len() {
        out[i] -= c * (xu[i] + yu[i]);
    }
    Ok(out)
}

fn transport_step(m: &Manifold, x: &[f64], y: &[f64], v: &[f64], step: usize) -> Result<Vec<f64>> {
    match m {
        Manifold::Circle | Manifold::Sphere2 { .. } | Manifold::Sphere3 => {
            let r = match m {
                Manifold::Sphere2 { radius } => *radius,
                _ => 1.0,
            };
            let xu = la::scale(x, 1.0 / r);
            let yu = la::scale(y, 1.0 / r);
            chord_rotate(&xu, &yu, v, step)
        }
        Manifold::Torus2 => {
            let mut out = vec![0.0; 4];
            for f in 0..2 {
                let xu = [x[2 * f], x[2 * f + 1]];
                let yu = [y[2 * f], y[2 * f + 1]];
                let vf = [v[2 * f], v[2 * f + 1]];
                let r = chord_rotate(&xu, &yu, &vf, step)?;
                out[2 * f] = r[0];
                out[2 * f + 1] = r[1];
            }
            Ok(out)
        }
    }
}

/// Parallel transport of a tangent vector along a discrete path; returns the
/// transported vector at every path point.
pub fn parallel_transport_along(
    m: &Manifold,
    path: &[Vec<f64>],
    v0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(path.len());
    let mut v = m.tangent_project(&path[0], v0);
    out.push(v.clone());
    for k in 1..path.len() {
        v = transport_step(m, &path[k - 1], &path[k], &v, k)?;
        out.push(v.clone());
    }
    Ok(out)
}

/// Transport of a full tangent frame, with the orthonormality drift reported.
#[derive(Debug, Clone)]
pub struct FrameTransport {
    /// frames[k][j] = j-th frame vector at path point k.
    pub frames: Vec<Vec<Vec<f64>>>,
    /// max |<e_i, e_j> - δ_ij| over the final frame.
    pub orthonormality_drift: f64,
}

pub fn transport_frame_along(
    m: &Manifold,
    path: &[Vec<f64>],
    frame0: &[Vec<f64>],
) -> Result<FrameTransport> {
    let mut frames = Vec::with_capacity(path.len());
    let mut frame: Vec<Vec<f64>> =
        frame0.iter().map(|v| m.tangent_project(&path[0], v)).collect();
    frames.push(frame.clone());
    for k in 1..path.len() {
        for v in frame.iter_mut() {
            *v = transport_step(m, &path[k - 1], &path[k], v, k)?;
        }
        frames.push(frame.clone());
    }
    let last = frames.last().expect("non-empty path");
    let mut drift: f64 = 0.0;
    for (i, ei) in last.iter().enumerate() {
        for (j, ej) in last.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            drift = drift.max((la::dot(ei, ej) - target).abs());
        }
    }
    Ok(FrameTransport { frames, orthonormality_drift: drift })
}

/// Least-squares slope of log₂(err) against log₂(h); the observed order.
pub fn fit_log2_slope(hs: &[f64], errs: &[f64]) -> f64 {
    assert_eq!(hs.len(), errs.len());
    let n = hs.len() as f64;
    let xs: Vec<f64> = hs.iter().map(|h| h.log2()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.max(1e-300).log2()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_drift(_t: f64, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    #[test]
    fn driver_rejects_non_integral_grid() {
        assert!(matches!(
            BrownianDriver::new(1, 1.0, 0.3, 1),
            Err(Error::BadGrid(_))
        ));
    }

    #[test]
    fn driver_is_reproducible() {
        let a = BrownianDriver::new(2, 1.0, 0.01, 42).unwrap();
        let b = BrownianDriver::new(2, 1.0, 0.01, 42).unwrap();
        assert_eq!(a.increments(0), b.increments(0));
        assert_eq!(a.increments(1), b.increments(1));
        let c = BrownianDriver::new(2, 1.0, 0.01, 43).unwrap();
        assert_ne!(a.increments(0), c.increments(0));
    }

    #[test]
    fn refinement_preserves_coarse_sums() {
        let d = BrownianDriver::new(3, 1.0, 0.05, 7).unwrap();
        let f = d.refine();
        assert_eq!(f.steps(), 2 * d.steps());
        for ch in 0..3 {
            for k in 0..d.steps() {
                let coarse = d.increments(ch)[k];
                let sum = f.increments(ch)[2 * k] + f.increments(ch)[2 * k + 1];
                assert_abs_diff_eq!(coarse, sum, epsilon = 1e-15);
            }
        }
        // Refinement is itself deterministic.
        let f2 = d.refine();
        assert_eq!(f.increments(1), f2.increments(1));
    }

    #[test]
    fn deterministic_rotation_advances_angle() {
        // dX = t̂ dt on the circle: angle advances by T within O(h²).
        let m = Manifold::Circle;
        let rot = |_t: f64, x: &[f64]| vec![-x[1], x[0]];
        let driver = BrownianDriver::new(0, 1.0, 1e-3, 1).unwrap();
        let path =
            integrate_manifold_sde(&m, &[1.0, 0.0], &rot, &[], &driver, Scheme::StratonovichHeun)
                .unwrap();
        let end = path.terminal();
        let angle = end[1].atan2(end[0]);
        assert_abs_diff_eq!(angle, 1.0, epsilon = 1e-6);
        // Euler (Itô scheme, no noise) is first order.
        let path =
            integrate_manifold_sde(&m, &[1.0, 0.0], &rot, &[], &driver, Scheme::ItoProjected)
                .unwrap();
        let end = path.terminal();
        let angle = end[1].atan2(end[0]);
        assert_abs_diff_eq!(angle, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn paths_stay_on_manifold() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let f1 = |x: &[f64]| vec![-x[1], x[0], 0.0];
        let f2 = |x: &[f64]| vec![0.0, -x[2], x[1]];
        let f3 = |x: &[f64]| vec![x[2], 0.0, -x[0]];
        let noise: Vec<NoiseFn> = vec![&f1, &f2, &f3];
        let driver = BrownianDriver::new(3, 1.0, 1e-3, 5).unwrap();
        for scheme in [Scheme::ItoProjected, Scheme::StratonovichHeun] {
            let path =
                integrate_manifold_sde(&m, &[0.0, 0.0, 1.0], &zero_drift, &noise, &driver, scheme)
                    .unwrap();
            for p in &path.points {
                assert!(m.constraint_violation(p) <= 1e-12);
            }
            // Pre-projection residual is O(h) per step; the constant covers
            // the largest squared Gaussian increment over 10³ steps.
            assert!(path.max_drift_violation <= 60.0 * driver.h());
        }
    }

    /// Legendre-mode oracle for the spherical heat kernel: the degree-1 mode
    /// of Brownian motion on S² decays as u' = -u, so E<x_T, x0> = e^{-T}.
    #[test]
    fn spherical_brownian_motion_matches_legendre_mode() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let f1 = |x: &[f64]| vec![-x[1], x[0], 0.0];
        let f2 = |x: &[f64]| vec![0.0, -x[2], x[1]];
        let f3 = |x: &[f64]| vec![x[2], 0.0, -x[0]];
        let noise: Vec<NoiseFn> = vec![&f1, &f2, &f3];
        let t_end = 0.5;
        let paths = 4000;
        let mut mean = 0.0;
        for p in 0..paths {
            let driver = BrownianDriver::new(3, t_end, 1e-3, 1000 + p as u64).unwrap();
            let path = integrate_manifold_sde(
                &m,
                &[0.0, 0.0, 1.0],
                &zero_drift,
                &noise,
                &driver,
                Scheme::ItoProjected,
            )
            .unwrap();
            mean += path.terminal()[2];
        }
        mean /= paths as f64;

        // Oracle: RK4 on the l = 1 Legendre mode ODE u' = -(l(l+1)/2) u.
        let mut u = 1.0_f64;
        let steps = 1000;
        let h = t_end / steps as f64;
        for _ in 0..steps {
            let f = |v: f64| -v;
            let k1 = f(u);
            let k2 = f(u + 0.5 * h * k1);
            let k3 = f(u + 0.5 * h * k2);
            let k4 = f(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert_abs_diff_eq!(u, (-t_end).exp(), epsilon = 1e-10);
        // 4σ Monte-Carlo band plus O(h) scheme bias allowance.
        let band = 4.0 * 0.5 / (paths as f64).sqrt() + 0.02;
        assert!(
            (mean - u).abs() <= band,
            "E<x_T,x0> = {mean:.4} vs oracle {u:.4} (band {band:.4})"
        );
    }

    #[test]
    fn drift_conversion_round_trips_and_matches_analytic() {
        let m = Manifold::Circle;
        // b(θ) t̂ with b = 0.5 + 0.2 cos θ: ∇_A A = b b' t̂.
        let field = |x: &[f64]| {
            let theta = x[1].atan2(x[0]);
            let b = 0.5 + 0.2 * theta.cos();
            vec![-x[1] * b, x[0] * b]
        };
        let noise: Vec<NoiseFn> = vec![&field];
        let theta: f64 = 0.7;
        let x = vec![theta.cos(), theta.sin()];
        let d0 = vec![0.0, 0.0];
        let ito = ito_stratonovich_convert(&m, &d0, &noise, &x, DriftConvention::StratonovichToIto);
        let back = ito_stratonovich_convert(&m, &ito, &noise, &x, DriftConvention::ItoToStratonovich);
        for i in 0..2 {
            assert_abs_diff_eq!(back[i], d0[i], epsilon = 1e-12);
        }
        let b = 0.5 + 0.2 * theta.cos();
        let bp = -0.2 * theta.sin();
        let expected = 0.5 * b * bp;
        let tangent = [-theta.sin(), theta.cos()];
        let got = la::dot(&ito, &tangent);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-6);
    }

    /// Coupling study: Stratonovich–Heun vs Itô-projected with converted
    /// drift, same refined driver; sup distance shrinks at order ≈ 1.
    #[test]
    fn scheme_equivalence_after_drift_conversion() {
        let m = Manifold::Circle;
        let strat_drift = |_t: f64, x: &[f64]| {
            let theta = x[1].atan2(x[0]);
            let s = theta.sin();
            vec![-x[1] * s, x[0] * s]
        };
        let field = |x: &[f64]| vec![-x[1] * 0.3, x[0] * 0.3];
        let noise: Vec<NoiseFn> = vec![&field];
        // Constant intrinsic noise: the Itô and Stratonovich drifts coincide,
        // but the schemes still differ at O(h).
        let ito_drift = |t: f64, x: &[f64]| {
            let d = strat_drift(t, x);
            ito_stratonovich_convert(&m, &d, &[&field], x, DriftConvention::StratonovichToIto)
        };

        let x0 = [1.0, 0.0];
        let base = BrownianDriver::new(1, 1.0, 1.0 / 64.0, 21).unwrap();
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        let mut driver = base;
        for _ in 0..3 {
            let a = integrate_manifold_sde(&m, &x0, &strat_drift, &noise, &driver, Scheme::StratonovichHeun)
                .unwrap();
            let b = integrate_manifold_sde(&m, &x0, &ito_drift, &noise, &driver, Scheme::ItoProjected)
                .unwrap();
            let sup = a
                .points
                .iter()
                .zip(&b.points)
                .map(|(p, q)| la::norm(&la::sub(p, q)))
                .fold(0.0_f64, f64::max);
            hs.push(driver.h());
            errs.push(sup);
            driver = driver.refine();
        }
        let slope = fit_log2_slope(&hs, &errs);
        assert!(slope >= 0.9, "coupling slope {slope:.3} (errs {errs:?})");
    }

    #[test]
    fn transport_is_isometric_and_reduces_holonomy_to_area() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        // Octant loop: three quarter great-circle arcs, 90° angles; enclosed
        // area π/2 equals the holonomy rotation.
        let arc = |a: &[f64], b: &[f64], k: usize, pts: &mut Vec<Vec<f64>>| {
            for i in 0..=k {
                let t = std::f64::consts::FRAC_PI_2 * i as f64 / k as f64;
                let mut p = la::scale(a, t.cos());
                la::axpy(&mut p, t.sin(), b);
                pts.push(p);
            }
        };
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let e3 = [0.0, 0.0, 1.0];
        let mut path = Vec::new();
        arc(&e1, &e2, 300, &mut path);
        arc(&e2, &e3, 300, &mut path);
        arc(&e3, &e1, 300, &mut path);
        let v0 = [0.0, 1.0, 0.0];
        let transported = parallel_transport_along(&m, &path, &v0).unwrap();
        let v_end = transported.last().unwrap();
        assert_abs_diff_eq!(la::norm(v_end), 1.0, epsilon = 1e-12);
        // Angle in the tangent plane at e1, oriented by the frame (e2, e3).
        let angle = la::dot(v_end, &e3).atan2(la::dot(v_end, &e2));
        assert_abs_diff_eq!(angle.abs(), std::f64::consts::FRAC_PI_2, epsilon = 1e-9);

        let frame = transport_frame_along(&m, &path, &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
            .unwrap();
        assert!(frame.orthonormality_drift <= 1e-12);
    }

    #[test]
    fn antipodal_transport_step_is_degenerate() {
        let m = Manifold::Circle;
        let path = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert!(matches!(
            parallel_transport_along(&m, &path, &[0.0, 1.0]),
            Err(Error::DegenerateStep { .. })
        ));
    }
}
