//! The Hopf fibration p: S³ → S²(½) as a Riemannian submersion, plus the
//! trivial product control case S¹×S¹ → S¹.
//!
//! Conventions: S³ is the unit sphere of C² ≅ R⁴ with coordinates
//! q = (a, b, c, d) ↔ (z₁, z₂) = (a + ib, c + id); the U(1) action is
//! q·e^{iθ} on both complex coordinates, with vertical generator V(q) = iq.
//! With base radius ½ the differential Tp is an isometry on horizontal
//! vectors, and its ambient transpose is exactly the horizontal lift.

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::integrators::{BrownianDriver, PathSample, Scheme};
use crate::la;

/// Base drift/noise fields live on S²(½); vertical scalars on S³.
pub type BaseDriftFn<'a> = &'a dyn Fn(f64, &[f64]) -> Vec<f64>;
pub type BaseFieldFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;
pub type VerticalScalarFn<'a> = &'a dyn Fn(&[f64]) -> f64;

#[derive(Debug, Clone, Copy)]
pub struct HopfFibration;

impl HopfFibration {
    pub fn total(&self) -> Manifold {
        Manifold::Sphere3
    }

    pub fn base(&self) -> Manifold {
        Manifold::Sphere2 { radius: 0.5 }
    }

    /// p(z₁, z₂) = (½(|z₁|² − |z₂|²), Re(z̄₁ z₂), Im(z̄₁ z₂)).
    pub fn project(&self, q: &[f64]) -> Vec<f64> {
        let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
        vec![
            0.5 * (a * a + b * b - c * c - d * d),
            a * c + b * d,
            a * d - b * c,
        ]
    }

    /// Differential Tp at q applied to an ambient vector w.
    pub fn differential(&self, q: &[f64], w: &[f64]) -> Vec<f64> {
        let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
        vec![
            a * w[0] + b * w[1] - c * w[2] - d * w[3],
            c * w[0] + d * w[1] + a * w[2] + b * w[3],
            d * w[0] - c * w[1] - b * w[2] + a * w[3],
        ]
    }

    /// Unit vertical generator V(q) = iq.
    pub fn vertical_generator(&self, q: &[f64]) -> Vec<f64> {
        vec![-q[1], q[0], -q[3], q[2]]
    }

    /// Fiber rotation q · e^{iθ}.
    pub fn fiber_rotate(&self, q: &[f64], theta: f64) -> Vec<f64> {
        let (sin, cos) = theta.sin_cos();
        vec![
            q[0] * cos - q[1] * sin,
            q[0] * sin + q[1] * cos,
            q[2] * cos - q[3] * sin,
            q[2] * sin + q[3] * cos,
        ]
    }

    /// Split a tangent vector at q into (horizontal part, vertical coefficient).
    pub fn split_vertical_horizontal(&self, q: &[f64], w: &[f64]) -> (Vec<f64>, f64) {
        let w = self.total().tangent_project(q, w);
        let v = self.vertical_generator(q);
        let coeff = la::dot(&w, &v);
        let mut horizontal = w;
        la::axpy(&mut horizontal, -coeff, &v);
        (horizontal, coeff)
    }

    /// Horizontal lift of a base tangent vector: the ambient transpose of Tp.
    /// On S³ the Gram matrix Tp Tpᵀ is the identity, so the transpose lands in
    /// the horizontal space and inverts Tp there isometrically.
    pub fn horizontal_lift_vector(&self, q: &[f64], v: &[f64]) -> Vec<f64> {
        let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
        vec![
            v[0] * a + v[1] * c + v[2] * d,
            v[0] * b + v[1] * d - v[2] * c,
            -v[0] * c + v[1] * a - v[2] * b,
            -v[0] * d + v[1] * b + v[2] * a,
        ]
    }

    /// Lift of a base vector field as the constant-extension horizontal field,
    /// evaluated at q: 𝔥_q(P_{p(q)} applied to the frozen ambient base value).
    fn lifted_extension(&self, q: &[f64], base_ambient: &[f64]) -> Vec<f64> {
        let y = self.project(q);
        let tangent = self.base().tangent_project(&y, base_ambient);
        self.horizontal_lift_vector(q, &tangent)
    }

    /// O'Neill tensor 𝒜_u(b) at q for horizontal u, b: the vertical part of
    /// the ambient derivative of the lift-of-constant-base-field extension of
    /// b along u. Returns the (vertical) ambient vector.
    pub fn oneill_tensor(&self, q: &[f64], u: &[f64], b: &[f64]) -> Vec<f64> {
        let eps = 1e-5;
        let m = self.total();
        let b_base = self.differential(q, b);
        let qp = m.closest_point(&la::add(q, &la::scale(u, eps))).expect("inside tube");
        let qm = m.closest_point(&la::sub(q, &la::scale(u, eps))).expect("inside tube");
        let fp = self.lifted_extension(&qp, &b_base);
        let fm = self.lifted_extension(&qm, &b_base);
        let d = la::scale(&la::sub(&fp, &fm), 1.0 / (2.0 * eps));
        let v = self.vertical_generator(q);
        la::scale(&v, la::dot(&d, &v))
    }

    /// Integrate the horizontal lift of the base Stratonovich SDE
    /// ∘dY = Ā₀ dt + Σ Ā_i ∘dWⁱ starting from q0; the lifted fields are
    /// 𝔥(Ā_i) and the scheme is projected Heun on S³.
    pub fn horizontal_lift_diffusion(
        &self,
        q0: &[f64],
        base_drift: BaseDriftFn,
        base_noise: &[BaseFieldFn],
        driver: &BrownianDriver,
    ) -> Result<PathSample> {
        let m = self.total();
        let h = driver.h();
        let mut points = Vec::with_capacity(driver.steps() + 1);
        let mut q = m.closest_point(q0)?;
        points.push(q.clone());
        let mut max_violation: f64 = 0.0;

        let lifted = |t: f64, q: &[f64]| -> Vec<f64> {
            let y = self.project(q);
            self.horizontal_lift_vector(q, &base_drift(t, &y))
        };

        for k in 0..driver.steps() {
            let t = h * k as f64;
            let mut d1 = la::scale(&lifted(t, &q), h);
            for (i, field) in base_noise.iter().enumerate() {
                let y = self.project(&q);
                let a = self.horizontal_lift_vector(&q, &field(&y));
                la::axpy(&mut d1, driver.increments(i)[k], &a);
            }
            let pred_raw = la::add(&q, &d1);
            max_violation = max_violation.max(m.constraint_violation(&pred_raw));
            let pred = m.closest_point(&pred_raw)?;
            let mut d2 = la::scale(&lifted(t + h, &pred), h);
            for (i, field) in base_noise.iter().enumerate() {
                let y = self.project(&pred);
                let a = self.horizontal_lift_vector(&pred, &field(&y));
                la::axpy(&mut d2, driver.increments(i)[k], &a);
            }
            let mut next = q.clone();
            la::axpy(&mut next, 0.5, &d1);
            la::axpy(&mut next, 0.5, &d2);
            max_violation = max_violation.max(m.constraint_violation(&next));
            q = m.closest_point(&next)?;
            points.push(q.clone());
        }

        Ok(PathSample { scheme: Scheme::StratonovichHeun, h, points, max_drift_violation: max_violation })
    }

    /// Phase θ with q_end ≈ q_start · e^{iθ}, assuming both lie on one fiber.
    pub fn fiber_phase(&self, q_start: &[f64], q_end: &[f64]) -> f64 {
        let re = la::dot(q_end, q_start);
        let im = la::dot(q_end, &self.vertical_generator(q_start));
        im.atan2(re)
    }

    /// Horizontal (O'Neill-corrected) transport of u0 along a path in S³:
    /// ∘Dτ = 𝒜_{∘dX}(τ) = −𝒜_τ(∘dX). Plain parallel transport leaks
    /// vertically at exactly −𝒜_{∘dX}(τ), so the correction keeps τ
    /// horizontal and the pushforward Tp(τ) parallel on the base.
    /// Discretised by chord rotations plus a Heun correction stage.
    pub fn horizontal_transport(&self, path: &[Vec<f64>], u0: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = self.total();
        let mut out = Vec::with_capacity(path.len());
        let (mut v, _) = self.split_vertical_horizontal(&path[0], u0);
        out.push(v.clone());
        for k in 1..path.len() {
            let q0 = &path[k - 1];
            let q1 = &path[k];
            let delta = la::sub(q1, q0);
            let (d0, _) = self.split_vertical_horizontal(q0, &delta);
            let k1 = self.oneill_tensor(q0, &d0, &v);
            let mut pred = v.clone();
            la::axpy(&mut pred, 1.0, &k1);
            let pred = crate::integrators::parallel_transport_along(&m, &path[k - 1..=k], &pred)?
                .pop()
                .expect("two-point path");
            let (d1, _) = self.split_vertical_horizontal(q1, &delta);
            let k2 = self.oneill_tensor(q1, &d1, &pred);
            let mut base = v.clone();
            la::axpy(&mut base, 0.5, &k1);
            let mut moved = crate::integrators::parallel_transport_along(&m, &path[k - 1..=k], &base)?
                .pop()
                .expect("two-point path");
            la::axpy(&mut moved, 0.5, &k2);
            v = moved;
            out.push(v.clone());
        }
        Ok(out)
    }

    /// Equivariant transport of a full tangent vector: horizontal part by
    /// O'Neill-corrected transport, vertical part by carrying its fiber
    /// coordinate ϖ(w) = <w, V(q)> to the moving point.
    pub fn equivariant_lift_transport(
        &self,
        path: &[Vec<f64>],
        w0: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let (h0, c) = self.split_vertical_horizontal(&path[0], w0);
        let horizontal = self.horizontal_transport(path, &h0)?;
        Ok(horizontal
            .into_iter()
            .zip(path)
            .map(|(mut h, q)| {
                la::axpy(&mut h, c, &self.vertical_generator(q));
                h
            })
            .collect())
    }
}

/// Result of factoring a fiber-invariant diffusion U_t = h_t · e^{iθ_t}.
#[derive(Debug, Clone)]
pub struct EquivariantDecomposition {
    /// Horizontal-lift component h_t.
    pub h_path: PathSample,
    /// Group phases θ_t (the 1-D right stochastic exponential).
    pub group_path: GroupPath,
    /// h_t · e^{iθ_t}.
    pub reconstructed: Vec<Vec<f64>>,
    /// Direct integration of the full SDE with the same driver.
    pub direct: PathSample,
}

#[derive(Debug, Clone)]
pub struct GroupPath {
    pub theta: Vec<f64>,
}

impl HopfFibration {
    /// Check that vertical scalars are constant along fibers.
    fn check_right_invariance(&self, vertical: &[VerticalScalarFn]) -> Result<()> {
        let samples: [[f64; 4]; 3] = [
            [1.0, 0.0, 0.0, 0.0],
            [0.5, -0.3, 0.7, 0.2],
            [-0.2, 0.8, 0.1, -0.4],
        ];
        let mut max_dev: f64 = 0.0;
        for s in samples {
            let q = self.total().closest_point(&s).expect("inside tube");
            for a in vertical {
                let v0 = a(&q);
                for k in 1..8 {
                    let rq = self.fiber_rotate(&q, 0.77 * k as f64);
                    max_dev = max_dev.max((a(&rq) - v0).abs());
                }
            }
        }
        if max_dev > 1e-8 {
            return Err(Error::NotRightInvariant { max_dev });
        }
        Ok(())
    }

    /// Factor the right-invariant Stratonovich SDE with fields
    /// A_i = 𝔥(Ā_i) + a_i V into the horizontal lift h_t of the projected
    /// diffusion and the fiber phase flow dθ = Σ a_i(h_t) ∘dWⁱ + a₀(h_t) dt.
    #[allow(clippy::too_many_arguments)]
    pub fn equivariant_decompose(
        &self,
        q0: &[f64],
        base_drift: BaseDriftFn,
        base_noise: &[BaseFieldFn],
        vertical_drift: VerticalScalarFn,
        vertical_noise: &[VerticalScalarFn],
        driver: &BrownianDriver,
    ) -> Result<EquivariantDecomposition> {
        assert_eq!(base_noise.len(), vertical_noise.len(), "one vertical scalar per channel");
        let mut all_vertical: Vec<VerticalScalarFn> = vec![vertical_drift];
        all_vertical.extend_from_slice(vertical_noise);
        self.check_right_invariance(&all_vertical)?;

        let m = self.total();
        let h = driver.h();
        let mut q = m.closest_point(q0)?;
        let mut theta = 0.0_f64;
        let mut h_points = vec![q.clone()];
        let mut thetas = vec![0.0];
        let mut max_violation: f64 = 0.0;

        for k in 0..driver.steps() {
            let t = h * k as f64;
            // Joint Heun step for (h_t, θ_t).
            let slope = |t: f64, q: &[f64], k: usize| -> (Vec<f64>, f64) {
                let y = self.project(q);
                let mut dq = la::scale(&self.horizontal_lift_vector(q, &base_drift(t, &y)), h);
                let mut dth = vertical_drift(q) * h;
                for (i, field) in base_noise.iter().enumerate() {
                    let dw = driver.increments(i)[k];
                    la::axpy(&mut dq, dw, &self.horizontal_lift_vector(q, &field(&y)));
                    dth += vertical_noise[i](q) * dw;
                }
                (dq, dth)
            };
            let (d1, dth1) = slope(t, &q, k);
            let pred_raw = la::add(&q, &d1);
            max_violation = max_violation.max(m.constraint_violation(&pred_raw));
            let pred = m.closest_point(&pred_raw)?;
            let (d2, dth2) = slope(t + h, &pred, k);
            let mut next = q.clone();
            la::axpy(&mut next, 0.5, &d1);
            la::axpy(&mut next, 0.5, &d2);
            q = m.closest_point(&next)?;
            theta += 0.5 * (dth1 + dth2);
            h_points.push(q.clone());
            thetas.push(theta);
        }

        let reconstructed: Vec<Vec<f64>> = h_points
            .iter()
            .zip(&thetas)
            .map(|(hq, th)| self.fiber_rotate(hq, *th))
            .collect();

        // Direct integration of the full SDE, same driver.
        let full_drift = |t: f64, q: &[f64]| -> Vec<f64> {
            let y = self.project(q);
            let mut out = self.horizontal_lift_vector(q, &base_drift(t, &y));
            la::axpy(&mut out, vertical_drift(q), &self.vertical_generator(q));
            out
        };
        let owned_noise: Vec<Box<dyn Fn(&[f64]) -> Vec<f64>>> = (0..base_noise.len())
            .map(|i| {
                let base = base_noise[i];
                let vert = vertical_noise[i];
                let fib = *self;
                Box::new(move |q: &[f64]| {
                    let y = fib.project(q);
                    let mut out = fib.horizontal_lift_vector(q, &base(&y));
                    la::axpy(&mut out, vert(q), &fib.vertical_generator(q));
                    out
                }) as Box<dyn Fn(&[f64]) -> Vec<f64>>
            })
            .collect();
        let noise_refs: Vec<crate::integrators::NoiseFn> =
            owned_noise.iter().map(|b| b.as_ref() as crate::integrators::NoiseFn).collect();
        let direct = crate::integrators::integrate_manifold_sde(
            &m,
            q0,
            &full_drift,
            &noise_refs,
            driver,
            Scheme::StratonovichHeun,
        )?;

        Ok(EquivariantDecomposition {
            h_path: PathSample {
                scheme: Scheme::StratonovichHeun,
                h,
                points: h_points,
                max_drift_violation: max_violation,
            },
            group_path: GroupPath { theta: thetas },
            reconstructed,
            direct,
        })
    }
}

/// Zero-O'Neill control: the product submersion S¹×S¹ → S¹ (first factor).
#[derive(Debug, Clone, Copy)]
pub struct ProductCircleSubmersion;

impl ProductCircleSubmersion {
    pub fn total(&self) -> Manifold {
        Manifold::Torus2
    }

    pub fn base(&self) -> Manifold {
        Manifold::Circle
    }

    pub fn project(&self, q: &[f64]) -> Vec<f64> {
        vec![q[0], q[1]]
    }

    pub fn differential(&self, _q: &[f64], w: &[f64]) -> Vec<f64> {
        vec![w[0], w[1]]
    }

    /// Vertical generator: the second factor's unit tangent.
    pub fn vertical_generator(&self, q: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0, -q[3], q[2]]
    }

    pub fn horizontal_lift_vector(&self, _q: &[f64], v: &[f64]) -> Vec<f64> {
        vec![v[0], v[1], 0.0, 0.0]
    }

    /// Same finite-difference construction as the Hopf case; identically zero
    /// here because the horizontal distribution is integrable.
    pub fn oneill_tensor(&self, q: &[f64], u: &[f64], b: &[f64]) -> Vec<f64> {
        let eps = 1e-5;
        let m = self.total();
        let b_base = self.differential(q, b);
        let lifted = |q: &[f64], amb: &[f64]| -> Vec<f64> {
            let y = self.project(q);
            let t = self.base().tangent_project(&y, amb);
            self.horizontal_lift_vector(q, &t)
        };
        let qp = m.closest_point(&la::add(q, &la::scale(u, eps))).expect("inside tube");
        let qm = m.closest_point(&la::sub(q, &la::scale(u, eps))).expect("inside tube");
        let d = la::scale(&la::sub(&lifted(&qp, &b_base), &lifted(&qm, &b_base)), 1.0 / (2.0 * eps));
        let v = self.vertical_generator(q);
        la::scale(&v, la::dot(&d, &v))
    }
}
