//! Closed-form catalog of embedded manifolds: the unit circle in R², the flat
//! product torus S¹×S¹ in R⁴, round spheres S² in R³ (any radius) and the unit
//! S³ in R⁴.
//!
//! Everything is expressed through the ambient embedding: level-set
//! constraints, tangent projectors, closest-point retraction (valid inside a
//! fixed tubular neighbourhood), second fundamental form, curvature tensor and
//! geodesic exponential. All formulas are exact.

use crate::error::{Error, Result};
use crate::la;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureKind {
    Flat,
    /// Constant sectional curvature κ > 0.
    ConstantPositive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Manifold {
    /// Unit circle in R².
    Circle,
    /// S¹(1) × S¹(1) in R⁴, factors in coordinates (0,1) and (2,3).
    Torus2,
    /// Round 2-sphere of the given radius in R³.
    Sphere2 { radius: f64 },
    /// Unit 3-sphere in R⁴.
    Sphere3,
}

impl Manifold {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "circle" => Some(Manifold::Circle),
            "torus2" => Some(Manifold::Torus2),
            "sphere2" => Some(Manifold::Sphere2 { radius: 1.0 }),
            "sphere3" => Some(Manifold::Sphere3),
            _ => None,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Circle => 2,
            Manifold::Torus2 | Manifold::Sphere3 => 4,
            Manifold::Sphere2 { .. } => 3,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Circle => 1,
            Manifold::Torus2 | Manifold::Sphere2 { .. } => 2,
            Manifold::Sphere3 => 3,
        }
    }

    pub fn curvature_kind(&self) -> CurvatureKind {
        match self {
            Manifold::Circle | Manifold::Torus2 => CurvatureKind::Flat,
            Manifold::Sphere2 { radius } => CurvatureKind::ConstantPositive(1.0 / (radius * radius)),
            Manifold::Sphere3 => CurvatureKind::ConstantPositive(1.0),
        }
    }

    /// Radius of the tubular neighbourhood inside which the closest-point
    /// retraction is used: half the focal distance for every catalog entry.
    pub fn tubular_radius(&self) -> f64 {
        match self {
            Manifold::Circle | Manifold::Torus2 | Manifold::Sphere3 => 0.5,
            Manifold::Sphere2 { radius } => 0.5 * radius,
        }
    }

    /// Level-set residuals; zero exactly on the manifold.
    pub fn constraint(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Circle => vec![la::dot(x, x) - 1.0],
            Manifold::Sphere2 { radius } => vec![la::dot(x, x) - radius * radius],
            Manifold::Sphere3 => vec![la::dot(x, x) - 1.0],
            Manifold::Torus2 => vec![
                x[0] * x[0] + x[1] * x[1] - 1.0,
                x[2] * x[2] + x[3] * x[3] - 1.0,
            ],
        }
    }

    /// Max-norm of the constraint residuals.
    pub fn constraint_violation(&self, x: &[f64]) -> f64 {
        self.constraint(x).iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    fn radius(&self) -> f64 {
        match self {
            Manifold::Sphere2 { radius } => *radius,
            _ => 1.0,
        }
    }

    /// Closest-point retraction. Errors once the point leaves the tube.
    pub fn closest_point(&self, y: &[f64]) -> Result<Vec<f64>> {
        let tube = self.tubular_radius();
        match self {
            Manifold::Circle | Manifold::Sphere2 { .. } | Manifold::Sphere3 => {
                let r = self.radius();
                let n = la::norm(y);
                let dist = (n - r).abs();
                if dist > tube {
                    return Err(Error::OutsideTubularNeighborhood { dist, radius: tube });
                }
                Ok(la::scale(y, r / n))
            }
            Manifold::Torus2 => {
                // Factors project independently; the tube is per factor.
                let mut out = vec![0.0; 4];
                for f in 0..2 {
                    let (a, b) = (y[2 * f], y[2 * f + 1]);
                    let n = (a * a + b * b).sqrt();
                    let dist = (n - 1.0).abs();
                    if dist > tube {
                        return Err(Error::OutsideTubularNeighborhood { dist, radius: tube });
                    }
                    out[2 * f] = a / n;
                    out[2 * f + 1] = b / n;
                }
                Ok(out)
            }
        }
    }

    /// Orthogonal projection of an ambient vector onto T_x M.
    pub fn tangent_project(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Circle | Manifold::Sphere2 { .. } | Manifold::Sphere3 => {
                let r2 = la::dot(x, x);
                let c = la::dot(x, v) / r2;
                v.iter().zip(x).map(|(vi, xi)| vi - c * xi).collect()
            }
            Manifold::Torus2 => {
                let mut out = vec![0.0; 4];
                for f in 0..2 {
                    let (a, b) = (x[2 * f], x[2 * f + 1]);
                    let r2 = a * a + b * b;
                    let c = (v[2 * f] * a + v[2 * f + 1] * b) / r2;
                    out[2 * f] = v[2 * f] - c * a;
                    out[2 * f + 1] = v[2 * f + 1] - c * b;
                }
                out
            }
        }
    }

    /// Second fundamental form II(u, v) for tangent u, v at x; normal-valued.
    pub fn second_fundamental_form(&self, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Circle | Manifold::Sphere3 => la::scale(x, -la::dot(u, v)),
            Manifold::Sphere2 { radius } => la::scale(x, -la::dot(u, v) / (radius * radius)),
            Manifold::Torus2 => {
                let mut out = vec![0.0; 4];
                for f in 0..2 {
                    let huv = u[2 * f] * v[2 * f] + u[2 * f + 1] * v[2 * f + 1];
                    out[2 * f] = -huv * x[2 * f];
                    out[2 * f + 1] = -huv * x[2 * f + 1];
                }
                out
            }
        }
    }

    /// Curvature tensor R(u, v) w for constant-curvature catalog entries.
    pub fn riemann_curvature(&self, _x: &[f64], u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        let kappa = match self.curvature_kind() {
            CurvatureKind::Flat => 0.0,
            CurvatureKind::ConstantPositive(k) => k,
        };
        let vw = la::dot(v, w);
        let uw = la::dot(u, w);
        u.iter()
            .zip(v)
            .map(|(ui, vi)| kappa * (vw * ui - uw * vi))
            .collect()
    }

    /// Geodesic exponential exp_x(v), exact (great circles / per-factor arcs).
    pub fn geodesic_exp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Circle | Manifold::Sphere2 { .. } | Manifold::Sphere3 => {
                let r = self.radius();
                let s = la::norm(v);
                if s == 0.0 {
                    return x.to_vec();
                }
                let theta = s / r;
                let mut out = la::scale(x, theta.cos());
                la::axpy(&mut out, theta.sin() * r / s, v);
                out
            }
            Manifold::Torus2 => {
                let mut out = vec![0.0; 4];
                for f in 0..2 {
                    let (a, b) = (x[2 * f], x[2 * f + 1]);
                    // Tangent coefficient along the factor's unit tangent (-b, a).
                    let t = -b * v[2 * f] + a * v[2 * f + 1];
                    let (sin, cos) = t.sin_cos();
                    out[2 * f] = a * cos - b * sin;
                    out[2 * f + 1] = a * sin + b * cos;
                }
                out
            }
        }
    }

    /// Intrinsic (geodesic) distance.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Manifold::Circle | Manifold::Sphere2 { .. } | Manifold::Sphere3 => {
                let r = self.radius();
                let c = (la::dot(x, y) / (r * r)).clamp(-1.0, 1.0);
                r * c.acos()
            }
            Manifold::Torus2 => {
                let mut s = 0.0;
                for f in 0..2 {
                    let c = (x[2 * f] * y[2 * f] + x[2 * f + 1] * y[2 * f + 1]).clamp(-1.0, 1.0);
                    let d = c.acos();
                    s += d * d;
                }
                s.sqrt()
            }
        }
    }
}

/// Catalog list used by the CLI and test batteries.
pub const CATALOG: [(&str, Manifold); 4] = [
    ("circle", Manifold::Circle),
    ("torus2", Manifold::Torus2),
    ("sphere2", Manifold::Sphere2 { radius: 1.0 }),
    ("sphere3", Manifold::Sphere3),
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_point(m: &Manifold, rng: &mut impl Rng) -> Vec<f64> {
        loop {
            let y: Vec<f64> = (0..m.ambient_dim()).map(|_| rng.gen::<f64>() - 0.5).collect();
            if let Ok(x) = m.closest_point(&y) {
                return x;
            }
        }
    }

    fn random_tangent(m: &Manifold, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..m.ambient_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        m.tangent_project(x, &v)
    }

    /// Finite-difference oracle: II(u, v) is the normal part of the ambient
    /// derivative of the projected extension V(y) = P_y v along u.
    fn second_fundamental_oracle(m: &Manifold, x: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        let eps = 1e-5;
        let xp = m.closest_point(&la::add(x, &la::scale(u, eps))).unwrap();
        let xm = m.closest_point(&la::sub(x, &la::scale(u, eps))).unwrap();
        let vp = m.tangent_project(&xp, v);
        let vm = m.tangent_project(&xm, v);
        let d = la::scale(&la::sub(&vp, &vm), 1.0 / (2.0 * eps));
        // Normal part at x.
        la::sub(&d, &m.tangent_project(x, &d))
    }

    #[test]
    fn closest_point_sphere_is_normalization() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let y = [0.3, 0.4, 1.2];
        let x = m.closest_point(&y).unwrap();
        let n = la::norm(&y);
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], y[i] / n, epsilon = 1e-15);
        }
    }

    #[test]
    fn closest_point_torus_normalizes_each_factor() {
        let m = Manifold::Torus2;
        let s = 1.0 / 2.0_f64.sqrt();
        let y = [1.1 * s, 0.0, 0.9 * s, 0.0];
        let x = m.closest_point(&y).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[3], 0.0, epsilon = 1e-15);
    }

    /// Grid + local golden-section refinement over the parameter square,
    /// independent of the per-factor shortcut used by the implementation.
    #[test]
    fn closest_point_torus_matches_parametric_minimizer() {
        let m = Manifold::Torus2;
        let embed = |t1: f64, t2: f64| vec![t1.cos(), t1.sin(), t2.cos(), t2.sin()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let x = random_point(&m, &mut rng);
            let mut y = x.clone();
            for yi in y.iter_mut() {
                *yi += 0.2 * (rng.gen::<f64>() - 0.5);
            }
            let y = match m.closest_point(&y) {
                Ok(_) => y,
                Err(_) => continue,
            };
            let cost = |t1: f64, t2: f64| {
                let p = embed(t1, t2);
                let d = la::sub(&y, &p);
                la::dot(&d, &d)
            };
            // Coarse grid.
            let n = 64;
            let mut best = (0.0, 0.0, f64::INFINITY);
            for i in 0..n {
                for j in 0..n {
                    let t1 = crate::TAU * i as f64 / n as f64;
                    let t2 = crate::TAU * j as f64 / n as f64;
                    let c = cost(t1, t2);
                    if c < best.2 {
                        best = (t1, t2, c);
                    }
                }
            }
            // Coordinate-wise golden-section refinement.
            let golden = |f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64| {
                let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
                for _ in 0..80 {
                    let c = b - phi * (b - a);
                    let d = a + phi * (b - a);
                    if f(c) < f(d) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                0.5 * (a + b)
            };
            let w = crate::TAU / n as f64;
            let (mut t1, mut t2) = (best.0, best.1);
            for _ in 0..3 {
                t1 = golden(&|t| cost(t, t2), t1 - w, t1 + w);
                t2 = golden(&|t| cost(t1, t), t2 - w, t2 + w);
            }
            let oracle = embed(t1, t2);
            let ours = m.closest_point(&y).unwrap();
            for i in 0..4 {
                assert_abs_diff_eq!(ours[i], oracle[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn second_fundamental_form_sphere_pole() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let x = [0.0, 0.0, 1.0];
        let u = [1.0, 0.0, 0.0];
        let ii = m.second_fundamental_form(&x, &u, &u);
        assert_abs_diff_eq!(ii[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ii[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ii[2], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn second_fundamental_form_torus_factor() {
        let m = Manifold::Torus2;
        let x = [1.0, 0.0, 1.0, 0.0];
        let u = [0.0, 1.0, 0.0, 0.0];
        let ii = m.second_fundamental_form(&x, &u, &u);
        assert_eq!(ii, vec![-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_fundamental_form_matches_projector_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (_, m) in CATALOG {
            for _ in 0..20 {
                let x = random_point(&m, &mut rng);
                let u = random_tangent(&m, &x, &mut rng);
                let v = random_tangent(&m, &x, &mut rng);
                let ours = m.second_fundamental_form(&x, &u, &v);
                let oracle = second_fundamental_oracle(&m, &x, &u, &v);
                for i in 0..m.ambient_dim() {
                    assert_abs_diff_eq!(ours[i], oracle[i], epsilon = 1e-7);
                }
            }
        }
    }

    /// Gauss equation oracle: <R(u,v)w, z> = <II(u,z), II(v,w)> - <II(u,w), II(v,z)>.
    #[test]
    fn curvature_matches_gauss_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (_, m) in CATALOG {
            for _ in 0..20 {
                let x = random_point(&m, &mut rng);
                let u = random_tangent(&m, &x, &mut rng);
                let v = random_tangent(&m, &x, &mut rng);
                let w = random_tangent(&m, &x, &mut rng);
                let z = random_tangent(&m, &x, &mut rng);
                let lhs = la::dot(&m.riemann_curvature(&x, &u, &v, &w), &z);
                let rhs = la::dot(
                    &m.second_fundamental_form(&x, &u, &z),
                    &m.second_fundamental_form(&x, &v, &w),
                ) - la::dot(
                    &m.second_fundamental_form(&x, &u, &w),
                    &m.second_fundamental_form(&x, &v, &z),
                );
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
            }
        }
    }

    /// RK4 on the extrinsic geodesic equation x'' = II(x', x').
    #[test]
    fn geodesic_exp_matches_ode_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (_, m) in CATALOG {
            for _ in 0..5 {
                let x = random_point(&m, &mut rng);
                let mut v = random_tangent(&m, &x, &mut rng);
                let n = la::norm(&v);
                if n < 1e-6 {
                    continue;
                }
                for vi in v.iter_mut() {
                    *vi *= 0.8 / n;
                }
                let expected = m.geodesic_exp(&x, &v);

                let rhs = |p: &[f64], q: &[f64]| -> (Vec<f64>, Vec<f64>) {
                    (q.to_vec(), m.second_fundamental_form(p, q, q))
                };
                let steps = 2000;
                let h = 1.0 / steps as f64;
                let mut p = x.clone();
                let mut q = v.clone();
                for _ in 0..steps {
                    let (k1p, k1q) = rhs(&p, &q);
                    let p2 = la::add(&p, &la::scale(&k1p, 0.5 * h));
                    let q2 = la::add(&q, &la::scale(&k1q, 0.5 * h));
                    let (k2p, k2q) = rhs(&p2, &q2);
                    let p3 = la::add(&p, &la::scale(&k2p, 0.5 * h));
                    let q3 = la::add(&q, &la::scale(&k2q, 0.5 * h));
                    let (k3p, k3q) = rhs(&p3, &q3);
                    let p4 = la::add(&p, &la::scale(&k3p, h));
                    let q4 = la::add(&q, &la::scale(&k3q, h));
                    let (k4p, k4q) = rhs(&p4, &q4);
                    for i in 0..p.len() {
                        p[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
                        q[i] += h / 6.0 * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
                    }
                }
                for i in 0..p.len() {
                    assert_abs_diff_eq!(p[i], expected[i], epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn geodesic_quarter_turn_on_sphere() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let x = [0.0, 0.0, 1.0];
        let v = [std::f64::consts::FRAC_PI_2, 0.0, 0.0];
        let y = m.geodesic_exp(&x, &v);
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn distance_equivalence_reports_empirical_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (name, m) in CATALOG {
            let mut kappa_hat: f64 = 1.0;
            for _ in 0..1000 {
                let x = random_point(&m, &mut rng);
                let y = random_point(&m, &mut rng);
                let chord = la::norm(&la::sub(&x, &y));
                if chord < 1e-9 {
                    continue;
                }
                let d = m.distance(&x, &y);
                // Left inequality is exact: the chord never exceeds the arc.
                assert!(chord <= d + 1e-12, "{name}: chord {chord} > geodesic {d}");
                kappa_hat = kappa_hat.max(d / chord);
            }
            println!("distance equivalence on {name}: empirical kappa = {kappa_hat:.6}");
            assert!(kappa_hat < std::f64::consts::PI / 2.0 + 0.3);
        }
    }

    #[test]
    fn tube_violation_is_an_error() {
        let m = Manifold::Sphere2 { radius: 1.0 };
        let err = m.closest_point(&[0.0, 0.0, 0.2]).unwrap_err();
        match err {
            Error::OutsideTubularNeighborhood { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn projector_is_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (_, m) in CATALOG {
                let x = random_point(&m, &mut rng);
                let v: Vec<f64> = (0..m.ambient_dim()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let pv = m.tangent_project(&x, &v);
                let ppv = m.tangent_project(&x, &pv);
                for i in 0..v.len() {
                    proptest::prop_assert!((pv[i] - ppv[i]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn second_fundamental_form_is_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (_, m) in CATALOG {
                let x = random_point(&m, &mut rng);
                let u = random_tangent(&m, &x, &mut rng);
                let v = random_tangent(&m, &x, &mut rng);
                let a = m.second_fundamental_form(&x, &u, &v);
                let b = m.second_fundamental_form(&x, &v, &u);
                for i in 0..a.len() {
                    proptest::prop_assert!((a[i] - b[i]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn geodesics_stay_on_manifold_with_unit_speed(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (_, m) in CATALOG {
                let x = random_point(&m, &mut rng);
                let mut v = random_tangent(&m, &x, &mut rng);
                let n = la::norm(&v);
                if n < 1e-9 { continue; }
                for vi in v.iter_mut() { *vi *= 0.7 / n; }
                let y = m.geodesic_exp(&x, &v);
                proptest::prop_assert!(m.constraint_violation(&y) <= 1e-12);
                // Inside the injectivity radius the endpoint distance is |v|.
                let d = m.distance(&x, &y);
                proptest::prop_assert!((d - 0.7).abs() <= 1e-9);
            }
        }
    }
}
