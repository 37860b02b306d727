//! Helmholtz–Hodge decomposition weighted by a smooth density: splits a
//! vector field into a gradient and a μ-divergence-free remainder, and builds
//! on it the horizontal/vertical projections, the normal tensor N with its
//! operator adjoint, and the Levi-Civita covariant derivative on the
//! Wasserstein side.
//!
//! On S¹ the vertical space is the line spanned by ρ⁻¹, so the split is a
//! closed-form quadrature. On T² the weighted Poisson problem is solved by
//! conjugate gradients preconditioned with the flat inverse Laplacian.

use crate::error::{Error, Result};
use crate::spectral;
use crate::wasserstein::{
    flow_map, FieldForm, GridDensity, MeasureVectorField, TangentPotential,
};

/// Relative residual accepted from the weighted Poisson solve.
pub const SOLVER_TOL: f64 = 1e-10;

const CG_MAX_ITER: usize = 800;

/// Gradient part ∇ψ plus μ-divergence-free remainder Y, with the solver's
/// relative residual.
#[derive(Debug, Clone)]
pub struct HodgeSplit {
    /// Mean-zero potential on the grid.
    pub psi: Vec<f64>,
    /// One component per axis, grid-sampled.
    pub y: Vec<Vec<f64>>,
    pub residual: f64,
}

/// Weighted projections with a fixed smooth density.
#[derive(Debug, Clone)]
pub struct WeightedHodgeSolver {
    rho: GridDensity,
    /// ∇log ρ per axis.
    grad_log: Vec<Vec<f64>>,
    tol: f64,
}

impl WeightedHodgeSolver {
    pub fn new(rho: GridDensity) -> Result<Self> {
        if !rho.is_smooth() {
            return Err(Error::NonSmoothDensity);
        }
        let grad_log = match rho.dim() {
            1 => vec![spectral::derivative(
                &rho.values().iter().map(|v| v.ln()).collect::<Vec<_>>(),
            )],
            _ => {
                let logs: Vec<f64> = rho.values().iter().map(|v| v.ln()).collect();
                vec![
                    spectral::derivative_2d(&logs, rho.n(), 0),
                    spectral::derivative_2d(&logs, rho.n(), 1),
                ]
            }
        };
        Ok(Self { rho, grad_log, tol: SOLVER_TOL })
    }

    pub fn rho(&self) -> &GridDensity {
        &self.rho
    }

    fn dim(&self) -> usize {
        self.rho.dim() as usize
    }

    fn check_components(&self, a: &[&[f64]]) {
        assert_eq!(a.len(), self.dim(), "field component count != grid dimension");
        for c in a {
            assert_eq!(c.len(), self.rho.values().len(), "component length != grid size");
        }
    }

    /// div_μ(A) = div A + ⟨∇log ρ, A⟩.
    pub fn weighted_div(&self, a: &[&[f64]]) -> Vec<f64> {
        self.check_components(a);
        let len = self.rho.values().len();
        let mut out = vec![0.0; len];
        for (axis, comp) in a.iter().enumerate() {
            let d = match self.dim() {
                1 => spectral::derivative(comp),
                _ => spectral::derivative_2d(comp, self.rho.n(), axis),
            };
            for j in 0..len {
                out[j] += d[j] + self.grad_log[axis][j] * comp[j];
            }
        }
        out
    }

    /// ⟨A, B⟩_μ = ∫ Σ_axis A·B dμ.
    pub fn inner(&self, a: &[&[f64]], b: &[&[f64]]) -> f64 {
        self.check_components(a);
        self.check_components(b);
        let len = self.rho.values().len();
        let mut prod = vec![0.0; len];
        for axis in 0..a.len() {
            for j in 0..len {
                prod[j] += a[axis][j] * b[axis][j];
            }
        }
        self.rho.integrate(&prod)
    }

    /// A = ∇ψ + Y with div_μ Y = 0 and ψ mean-zero.
    pub fn hodge_split(&self, a: &[&[f64]]) -> Result<HodgeSplit> {
        self.check_components(a);
        match self.dim() {
            1 => Ok(self.split_circle(a[0])),
            _ => self.split_torus(a),
        }
    }

    /// Gradient components of the split.
    pub fn project_horizontal(&self, a: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let split = self.hodge_split(a)?;
        Ok(grad_components(&split.psi, &self.rho))
    }

    /// μ-divergence-free components of the split.
    pub fn project_vertical(&self, a: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.hodge_split(a)?.y)
    }

    /// The vertical space on S¹ is span{ρ⁻¹}: P_V(A) = (∫A dx / ∫ρ⁻¹dx)·ρ⁻¹.
    fn split_circle(&self, a: &[f64]) -> HodgeSplit {
        let rho = self.rho.values();
        let inv_rho: Vec<f64> = rho.iter().map(|r| 1.0 / r).collect();
        let c = self.rho.integrate_lebesgue(a) / self.rho.integrate_lebesgue(&inv_rho);
        let y: Vec<f64> = inv_rho.iter().map(|ir| c * ir).collect();
        let grad: Vec<f64> = a.iter().zip(&y).map(|(ai, yi)| ai - yi).collect();
        let psi = spectral::antiderivative_mean_zero(&grad);
        // Reconstruction is exact by construction; report the divergence
        // defect of Y as the residual.
        let div_y = self.weighted_div(&[&y]);
        let residual = norm2(&div_y) / (1.0 + norm2(a));
        HodgeSplit { psi, y: vec![y], residual }
    }

    fn split_torus(&self, a: &[&[f64]]) -> Result<HodgeSplit> {
        let n = self.rho.n();
        let len = n * n;
        // rhs = −div(ρA); the operator is L(ψ) = −div(ρ∇ψ), SPD on mean-zero.
        let rho = self.rho.values();
        let mut rho_a0 = vec![0.0; len];
        let mut rho_a1 = vec![0.0; len];
        for j in 0..len {
            rho_a0[j] = rho[j] * a[0][j];
            rho_a1[j] = rho[j] * a[1][j];
        }
        let mut rhs = spectral::derivative_2d(&rho_a0, n, 0);
        let d1 = spectral::derivative_2d(&rho_a1, n, 1);
        for j in 0..len {
            rhs[j] = -(rhs[j] + d1[j]);
        }
        let mean = rhs.iter().sum::<f64>() / len as f64;
        for v in rhs.iter_mut() {
            *v -= mean;
        }
        let apply = |psi: &[f64]| -> Vec<f64> {
            let gx = spectral::derivative_2d(psi, n, 0);
            let gy = spectral::derivative_2d(psi, n, 1);
            let px: Vec<f64> = (0..len).map(|j| rho[j] * gx[j]).collect();
            let py: Vec<f64> = (0..len).map(|j| rho[j] * gy[j]).collect();
            let dx = spectral::derivative_2d(&px, n, 0);
            let dy = spectral::derivative_2d(&py, n, 1);
            (0..len).map(|j| -(dx[j] + dy[j])).collect()
        };
        let precond = |r: &[f64]| -> Vec<f64> { spectral::inverse_laplacian_2d(r, n) };

        let rhs_norm = norm2(&rhs).max(1e-300);
        let mut psi = vec![0.0; len];
        let mut r = rhs.clone();
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut residual = norm2(&r) / rhs_norm;
        let mut iter = 0;
        while residual > self.tol {
            if iter >= CG_MAX_ITER || !residual.is_finite() {
                return Err(Error::SolverDivergence { residual });
            }
            iter += 1;
            let ap = apply(&p);
            let alpha = rz / dot(&p, &ap).max(1e-300);
            for j in 0..len {
                psi[j] += alpha * p[j];
                r[j] -= alpha * ap[j];
            }
            residual = norm2(&r) / rhs_norm;
            z = precond(&r);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz.max(1e-300);
            rz = rz_next;
            for j in 0..len {
                p[j] = z[j] + beta * p[j];
            }
        }
        let mean = psi.iter().sum::<f64>() / len as f64;
        for v in psi.iter_mut() {
            *v -= mean;
        }
        let grads = grad_components(&psi, &self.rho);
        let y = vec![
            (0..len).map(|j| a[0][j] - grads[0][j]).collect(),
            (0..len).map(|j| a[1][j] - grads[1][j]).collect(),
        ];
        Ok(HodgeSplit { psi, y, residual })
    }
}

/// Free-function form of div_μ for one-off use.
pub fn weighted_div(rho: &GridDensity, a: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(WeightedHodgeSolver::new(rho.clone())?.weighted_div(a))
}

fn grad_components(psi: &[f64], rho: &GridDensity) -> Vec<Vec<f64>> {
    match rho.dim() {
        1 => vec![spectral::derivative(psi)],
        _ => vec![
            spectral::derivative_2d(psi, rho.n(), 0),
            spectral::derivative_2d(psi, rho.n(), 1),
        ],
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A tangent argument that is either declared horizontal (a gradient with a
/// known potential) or raw samples.
#[derive(Debug, Clone, Copy)]
pub enum TangentInput<'a> {
    /// ∇ψ for the grid-sampled potential ψ.
    Gradient { psi: &'a [f64] },
    /// Component samples with no declared potential.
    Samples { components: &'a [&'a [f64]] },
}

fn require_potential<'a>(
    u: &TangentInput<'a>,
    solver: &WeightedHodgeSolver,
) -> Result<&'a [f64]> {
    match u {
        TangentInput::Gradient { psi } => Ok(psi),
        TangentInput::Samples { components } => {
            let split = solver.hodge_split(components)?;
            let y_refs: Vec<&[f64]> = split.y.iter().map(|c| c.as_slice()).collect();
            let vertical = solver.inner(&y_refs, &y_refs).sqrt();
            Err(Error::NotHorizontal { vertical })
        }
    }
}

/// Hessian-of-potential contraction (Hess ψ · A) per axis.
fn hessian_apply(psi: &[f64], a: &[&[f64]], rho: &GridDensity) -> Vec<Vec<f64>> {
    match rho.dim() {
        1 => {
            let h = spectral::second_derivative(psi);
            vec![h.iter().zip(a[0]).map(|(hj, aj)| hj * aj).collect()]
        }
        _ => {
            let n = rho.n();
            let gx = spectral::derivative_2d(psi, n, 0);
            let gy = spectral::derivative_2d(psi, n, 1);
            let hxx = spectral::derivative_2d(&gx, n, 0);
            let hxy = spectral::derivative_2d(&gx, n, 1);
            let hyy = spectral::derivative_2d(&gy, n, 1);
            let len = n * n;
            let mut ox = vec![0.0; len];
            let mut oy = vec![0.0; len];
            for j in 0..len {
                ox[j] = hxx[j] * a[0][j] + hxy[j] * a[1][j];
                oy[j] = hxy[j] * a[0][j] + hyy[j] * a[1][j];
            }
            vec![ox, oy]
        }
    }
}

/// N(U, A) = P_V((∇U)ᵀA): the vertical part of the Hessian contraction. U
/// must come with its potential; the tensor is antisymmetric when both
/// arguments are horizontal.
pub fn normal_tensor(
    solver: &WeightedHodgeSolver,
    u: &TangentInput,
    a: &[&[f64]],
) -> Result<Vec<Vec<f64>>> {
    let psi = require_potential(u, solver)?;
    let prod = hessian_apply(psi, a, solver.rho());
    let refs: Vec<&[f64]> = prod.iter().map(|c| c.as_slice()).collect();
    solver.project_vertical(&refs)
}

/// O*_U(B) = P_H((∇U)·P_V(B)); adjoint to C ↦ N(U, C) in ⟨·,·⟩_μ.
pub fn oneill_adjoint(
    solver: &WeightedHodgeSolver,
    u: &TangentInput,
    b: &[&[f64]],
) -> Result<Vec<Vec<f64>>> {
    let psi = require_potential(u, solver)?;
    let vertical = solver.project_vertical(b)?;
    let refs: Vec<&[f64]> = vertical.iter().map(|c| c.as_slice()).collect();
    let prod = hessian_apply(psi, &refs, solver.rho());
    let prod_refs: Vec<&[f64]> = prod.iter().map(|c| c.as_slice()).collect();
    solver.project_horizontal(&prod_refs)
}

/// Covariant derivative ∇̄_v Z on the Wasserstein side:
/// Π_μ(∇_v ∇φ_Z) + ∇(L_v φ_Z), returned through its potential.
///
/// The first term projects the pointwise Hessian contraction horizontally;
/// the second differentiates the measure dependence of Z's potential along
/// the exact flow of v (central differences at δ = 1e-4, Richardson).
pub fn levi_civita_p(
    mu: &GridDensity,
    v: &TangentPotential,
    z: &MeasureVectorField,
) -> Result<TangentPotential> {
    assert_eq!(mu.dim(), 1, "the covariant derivative is implemented on S¹");
    if z.form != FieldForm::GradientOfPotential {
        return Err(Error::NotHorizontal { vertical: z.gradient_form_residual(mu) });
    }
    let nodes = mu.nodes();
    let solver = WeightedHodgeSolver::new(mu.clone())?;

    // Π_μ(Hess φ_Z · v) from the split of the pointwise term.
    let z_now = z.eval_batch(&nodes, mu);
    let hess = spectral::derivative(&z_now);
    let vgrad = v.gradient();
    let pointwise: Vec<f64> = (0..nodes.len()).map(|j| hess[j] * vgrad[j]).collect();
    let split = solver.hodge_split(&[&pointwise])?;

    // L_v φ_Z by differencing the potential along the flow of ∇ψ_v.
    let delta = 1e-4;
    let potential_at = |d: f64| -> Result<Vec<f64>> {
        let pushed = mu.pushforward_1d(&flow_map(v, mu, d))?;
        Ok(spectral::antiderivative_mean_zero(&z.eval_batch(&nodes, &pushed)))
    };
    let diff = |d: f64| -> Result<Vec<f64>> {
        let fwd = potential_at(d)?;
        let bwd = potential_at(-d)?;
        Ok(fwd.iter().zip(&bwd).map(|(a, b)| (a - b) / (2.0 * d)).collect())
    };
    let d1 = diff(delta)?;
    let d2 = diff(0.5 * delta)?;

    let combined: Vec<f64> = (0..nodes.len())
        .map(|j| split.psi[j] + (4.0 * d2[j] - d1[j]) / 3.0)
        .collect();
    Ok(TangentPotential::new(combined))
}
