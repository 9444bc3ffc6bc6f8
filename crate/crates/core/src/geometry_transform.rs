//! Front lifts, eikonal transport, the flattened operator `L(U, Psi)` and the
//! nonlinear boundary operator.
//!
//! The discrete operator applied to a field `V` in a frame `(U, Psi)` is
//! `A0 (D_t V - sum nu_j D_jj V) + Abar1 D_1 V + A2 D_2 V + A3 D_3 V` with
//! forward differences in time, centered differences in space (second-order
//! one-sided at the x1 ends) and constant Rusanov coefficients `nu_j`.

use nalgebra::SymmetricEigen;
use ndarray::{s, Array3, Axis, Zip};

use crate::eos_state::{
    state_at, total_pressure, BoundaryField, Eos, Grid, Pair, ScalarField, State, StateField,
    TwoPhaseField, H1, H2, H3, NCOMP, V1, V2, V3,
};
use crate::error::{CvsError, Result};
use crate::function_spaces::lift_profile;
use crate::mhd_system::{augmented_matrices, lambda_pair_raw, Mat8, Vec8, TOL_PARALLEL};
use crate::stencil::{d1, d2, forward_diff, AxisKind};

/// Default hodograph validity bound.
pub const KAPPA_MIN: f64 = 0.5;

/// First derivatives `(d_t, d_1, d_2, d_3)` of a lift.
#[derive(Debug, Clone)]
pub struct PsiGradients {
    pub dt: ScalarField,
    pub d1: ScalarField,
    pub d2: ScalarField,
    pub d3: ScalarField,
}

impl PsiGradients {
    #[inline]
    pub fn at(&self, m: usize, i: usize, j: usize, k: usize) -> [f64; 4] {
        [
            self.dt[[m, i, j, k]],
            self.d1[[m, i, j, k]],
            self.d2[[m, i, j, k]],
            self.d3[[m, i, j, k]],
        ]
    }
}

pub fn psi_gradients(grid: &Grid, psi: &ScalarField) -> PsiGradients {
    PsiGradients {
        dt: forward_diff(psi, 0, grid.dt),
        d1: d1(psi, 1, grid.dx1(), AxisKind::Bounded),
        d2: d1(psi, 2, grid.dx2(), AxisKind::Periodic),
        d3: d1(psi, 3, grid.dx3(), AxisKind::Periodic),
    }
}

/// Front trace and its two lifts on the common computational domain.
#[derive(Debug, Clone)]
pub struct FrontGeometry {
    pub grid: Grid,
    pub psi: BoundaryField,
    pub lift: Pair<ScalarField>,
    pub kappa: f64,
}

impl FrontGeometry {
    /// `Psi = +-x1`, `psi = 0`.
    pub fn planar(grid: &Grid) -> Self {
        let psi = grid.boundary_field();
        let lift = lift_front(grid, &psi, 1.0);
        Self {
            grid: *grid,
            psi,
            lift,
            kappa: 1.0,
        }
    }

    /// Validates trace matching and hodograph positivity.
    pub fn from_lifts(grid: &Grid, lift: Pair<ScalarField>, kappa_min: f64) -> Result<Self> {
        let psi = lift.plus.slice(s![.., 0, .., ..]).to_owned();
        let mismatch = trace_mismatch(&lift);
        if mismatch > 1e-12 * (1.0 + psi.iter().fold(0.0f64, |a, &b| a.max(b.abs()))) {
            return Err(CvsError::Constraint(format!(
                "lift traces differ by {mismatch:.3e}"
            )));
        }
        let kappa = check_kappa(grid, &lift, kappa_min)?;
        Ok(Self {
            grid: *grid,
            psi,
            lift,
            kappa,
        })
    }

    pub fn gradients(&self) -> Pair<PsiGradients> {
        self.lift.map(|l| psi_gradients(&self.grid, l))
    }
}

pub fn trace_mismatch(lift: &Pair<ScalarField>) -> f64 {
    let a = lift.plus.slice(s![.., 0, .., ..]);
    let b = lift.minus.slice(s![.., 0, .., ..]);
    Zip::from(&a)
        .and(&b)
        .fold(0.0f64, |acc, &x, &y| acc.max((x - y).abs()))
}

/// `Psi^{+-} = +-x1 + chi(x1 / width) psi` with the Gaussian lift profile.
pub fn lift_front(grid: &Grid, psi: &BoundaryField, width: f64) -> Pair<ScalarField> {
    let mut plus = grid.scalar_field();
    let mut minus = grid.scalar_field();
    let nt = psi.len_of(Axis(0));
    for m in 0..nt.min(grid.nt + 1) {
        for i in 0..=grid.n1 {
            let x = grid.x1(i);
            let c = lift_profile(x / width);
            for j in 0..grid.n2 {
                for k in 0..grid.n3 {
                    plus[[m, i, j, k]] = x + c * psi[[m, j, k]];
                    minus[[m, i, j, k]] = -x + c * psi[[m, j, k]];
                }
            }
        }
    }
    Pair::new(plus, minus)
}

/// Minimum of `+-d1 Psi^{+-}`; errors if below `kappa_min`.
pub fn check_kappa(grid: &Grid, lift: &Pair<ScalarField>, kappa_min: f64) -> Result<f64> {
    let kp = d1(&lift.plus, 1, grid.dx1(), AxisKind::Bounded)
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let km = d1(&lift.minus, 1, grid.dx1(), AxisKind::Bounded)
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(-b));
    let kappa = kp.min(km);
    if !(kappa >= kappa_min) {
        return Err(CvsError::FrontDegenerate {
            value: kappa,
            kappa_min,
        });
    }
    Ok(kappa)
}

/// One forward-Euler eikonal step on a spatial slice; `nu` adds tangential
/// second-difference dissipation.
pub fn eikonal_step(grid: &Grid, psi: &Array3<f64>, u: &ndarray::ArrayView4<f64>, nu: [f64; 2]) -> Array3<f64> {
    let p2 = d1(psi, 1, grid.dx2(), AxisKind::Periodic);
    let p3 = d1(psi, 2, grid.dx3(), AxisKind::Periodic);
    let q2 = if nu[0] > 0.0 { Some(d2(psi, 1, grid.dx2(), AxisKind::Periodic)) } else { None };
    let q3 = if nu[1] > 0.0 && grid.n3 > 1 { Some(d2(psi, 2, grid.dx3(), AxisKind::Periodic)) } else { None };
    let mut out = psi.clone();
    Zip::indexed(&mut out).for_each(|(i, j, k), x| {
        let mut r = u[[i, j, k, V1]] - u[[i, j, k, V2]] * p2[[i, j, k]] - u[[i, j, k, V3]] * p3[[i, j, k]];
        if let Some(q) = &q2 {
            r += nu[0] * q[[i, j, k]];
        }
        if let Some(q) = &q3 {
            r += nu[1] * q[[i, j, k]];
        }
        *x += grid.dt * r;
    });
    out
}

#[derive(Debug, Clone)]
pub struct EikonalReport {
    pub lift: Pair<ScalarField>,
    /// Largest `|Psi+ - Psi-|` at `x1 = 0` over all levels.
    pub trace_residual: f64,
    pub kappa: f64,
}

/// Integrates the eikonal equations for both lifts in a given velocity field.
pub fn solve_eikonal(
    field: &TwoPhaseField,
    initial: &Pair<Array3<f64>>,
    kappa_min: f64,
    nu: [f64; 2],
) -> Result<EikonalReport> {
    let g = field.grid;
    let mut lift = Pair::new(g.scalar_field(), g.scalar_field());
    let mut kappa = f64::INFINITY;
    for plus in [true, false] {
        let f = field.phase(plus);
        let out = lift.get_mut(plus);
        out.index_axis_mut(Axis(0), 0).assign(initial.get(plus));
        for m in 0..g.nt {
            let cur = out.index_axis(Axis(0), m).to_owned();
            let next = eikonal_step(&g, &cur, &f.index_axis(Axis(0), m), nu);
            out.index_axis_mut(Axis(0), m + 1).assign(&next);
        }
    }
    for m in 0..=g.nt {
        let sl = Pair::new(
            lift.plus.slice(s![m..m + 1, .., .., ..]).to_owned(),
            lift.minus.slice(s![m..m + 1, .., .., ..]).to_owned(),
        );
        kappa = kappa.min(check_kappa(&g, &sl, kappa_min)?);
    }
    Ok(EikonalReport {
        trace_residual: trace_mismatch(&lift),
        lift,
        kappa,
    })
}

/// `(A0, Abar1, A2, A3)` with `Abar1 = (A1 - Psi_t A0 - Psi_2 A2 - Psi_3 A3) / Psi_1`.
pub fn assemble_lbar(a: &[Mat8; 4], grad: [f64; 4], kappa_min: f64) -> Result<[Mat8; 4]> {
    if !(grad[1].abs() >= kappa_min) {
        return Err(CvsError::FrontDegenerate {
            value: grad[1].abs(),
            kappa_min,
        });
    }
    Ok(lbar(a, grad))
}

#[inline]
pub fn lbar(a: &[Mat8; 4], grad: [f64; 4]) -> [Mat8; 4] {
    let ab = (a[1] - a[0] * grad[0] - a[2] * grad[2] - a[3] * grad[3]) / grad[1];
    [a[0], ab, a[2], a[3]]
}

/// `(psi_t - v_N+, psi_t - v_N-, H_N+, H_N-, q+ - q-)`.
pub fn boundary_operator(up: &State, um: &State, psi_t: f64, psi_x2: f64, psi_x3: f64) -> [f64; 5] {
    let vn = |u: &State| u[V1] - psi_x2 * u[V2] - psi_x3 * u[V3];
    let hn = |u: &State| u[H1] - psi_x2 * u[H2] - psi_x3 * u[H3];
    [
        psi_t - vn(up),
        psi_t - vn(um),
        hn(up),
        hn(um),
        total_pressure(up) - total_pressure(um),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualNorms {
    pub max: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    pub eikonal_collar: Pair<ResidualNorms>,
    pub eikonal_global: Pair<ResidualNorms>,
    pub normal_field_collar: Pair<ResidualNorms>,
    pub normal_field_global: Pair<ResidualNorms>,
}

/// Residuals of the eikonal equation (levels `0..nt`, forward differences)
/// and of `H1 - Psi_2 H2 - Psi_3 H3 = 0` (all levels).
pub fn eikonal_constraint_residual(
    field: &TwoPhaseField,
    front: &FrontGeometry,
    collar_width: f64,
) -> ConstraintReport {
    let g = &field.grid;
    let grads = front.gradients();
    let dv = g.dt * g.dx1() * g.dx2() * g.dx3();
    let one = |plus: bool| {
        let f = field.phase(plus);
        let gr = grads.get(plus);
        let mut acc = [ResidualNorms::default(); 4];
        let mut sq = [0.0; 4];
        for m in 0..=g.nt {
            for i in 0..=g.n1 {
                let in_collar = g.x1(i) <= collar_width;
                for j in 0..g.n2 {
                    for k in 0..g.n3 {
                        let u = state_at(f, m, i, j, k);
                        let p = gr.at(m, i, j, k);
                        let hn = (u[H1] - p[2] * u[H2] - p[3] * u[H3]).abs();
                        let mut vals = vec![(2usize, hn)];
                        if m < g.nt {
                            let e = (p[0] - u[V1] + u[V2] * p[2] + u[V3] * p[3]).abs();
                            vals.push((0, e));
                        }
                        for (slot, v) in vals {
                            acc[slot + 1].max = acc[slot + 1].max.max(v);
                            sq[slot + 1] += v * v * dv;
                            if in_collar {
                                acc[slot].max = acc[slot].max.max(v);
                                sq[slot] += v * v * dv;
                            }
                        }
                    }
                }
            }
        }
        for s in 0..4 {
            acc[s].l2 = sq[s].sqrt();
        }
        acc
    };
    let p = one(true);
    let mm = one(false);
    ConstraintReport {
        eikonal_collar: Pair::new(p[0], mm[0]),
        eikonal_global: Pair::new(p[1], mm[1]),
        normal_field_collar: Pair::new(p[2], mm[2]),
        normal_field_global: Pair::new(p[3], mm[3]),
    }
}

/// Difference quotients of a space-time field used by the discrete operator.
#[derive(Debug, Clone)]
pub struct FieldDerivs {
    pub dt: StateField,
    pub d: [StateField; 3],
    pub dd: [StateField; 3],
}

pub fn field_derivs(grid: &Grid, v: &StateField) -> FieldDerivs {
    let h = grid.spacings();
    let kinds = grid.tangential_kind();
    FieldDerivs {
        dt: forward_diff(v, 0, grid.dt),
        d: [0, 1, 2].map(|j| d1(v, j + 1, h[j], kinds[j])),
        dd: [0, 1, 2].map(|j| d2(v, j + 1, h[j], kinds[j])),
    }
}

impl FieldDerivs {
    #[inline]
    fn get(a: &StateField, m: usize, i: usize, j: usize, k: usize) -> Vec8 {
        Vec8::from_fn(|c, _| a[[m, i, j, k, c]])
    }

    /// `(D_t V - sum nu_j D_jj V, D_1 V, D_2 V, D_3 V)` at a node.
    #[inline]
    pub fn columns(&self, nu: &[f64; 3], m: usize, i: usize, j: usize, k: usize) -> [Vec8; 4] {
        let mut t = Self::get(&self.dt, m, i, j, k);
        for d in 0..3 {
            if nu[d] != 0.0 {
                t -= Self::get(&self.dd[d], m, i, j, k) * nu[d];
            }
        }
        [
            t,
            Self::get(&self.d[0], m, i, j, k),
            Self::get(&self.d[1], m, i, j, k),
            Self::get(&self.d[2], m, i, j, k),
        ]
    }
}

#[inline]
pub fn contract(mats: &[Mat8; 4], cols: &[Vec8; 4]) -> Vec8 {
    mats[0] * cols[0] + mats[1] * cols[1] + mats[2] * cols[2] + mats[3] * cols[3]
}

/// Multiplier field from the boundary traces, constant in x1.
pub fn lambda_from_traces(u: &Pair<StateField>, grid: &Grid) -> Result<Pair<BoundaryField>> {
    let mut lp = grid.boundary_field();
    let mut lm = grid.boundary_field();
    let nt = u.plus.len_of(Axis(0));
    for m in 0..nt {
        for j in 0..grid.n2 {
            for k in 0..grid.n3 {
                let a = state_at(&u.plus, m, 0, j, k);
                let b = state_at(&u.minus, m, 0, j, k);
                let l = lambda_pair_raw(&a, &b, TOL_PARALLEL)?;
                lp[[m, j, k]] = l.lambda_plus;
                lm[[m, j, k]] = l.lambda_minus;
            }
        }
    }
    Ok(Pair::new(lp, lm))
}

/// Coefficient frame `(U, Psi, lambda, nu)` for both phases.
#[derive(Debug, Clone)]
pub struct OperatorFrame {
    pub eos: Eos,
    pub grid: Grid,
    pub u: Pair<StateField>,
    pub psi: Pair<ScalarField>,
    pub grad: Pair<PsiGradients>,
    pub lambda: Pair<BoundaryField>,
    pub nu: Pair<[f64; 3]>,
    pub derivs: Pair<FieldDerivs>,
    /// Largest characteristic speeds per direction; zero until measured.
    pub speeds: Pair<[f64; 3]>,
}

impl OperatorFrame {
    pub fn new(
        eos: Eos,
        grid: Grid,
        u: Pair<StateField>,
        psi: Pair<ScalarField>,
        lambda: Pair<BoundaryField>,
        nu: Pair<[f64; 3]>,
        kappa_min: f64,
    ) -> Result<Self> {
        check_kappa(&grid, &psi, kappa_min)?;
        let grad = psi.map(|p| psi_gradients(&grid, p));
        let derivs = u.map(|f| field_derivs(&grid, f));
        Ok(Self {
            eos,
            grid,
            u,
            psi,
            grad,
            lambda,
            nu,
            derivs,
            speeds: Pair::new([0.0; 3], [0.0; 3]),
        })
    }

    /// Frame with trace `lambda`, measured speeds and Rusanov coefficients
    /// `nu_j = safety * a_j * dx_j / 2`.
    pub fn rusanov(
        eos: Eos,
        grid: Grid,
        u: Pair<StateField>,
        psi: Pair<ScalarField>,
        safety: f64,
        kappa_min: f64,
    ) -> Result<Self> {
        let zero = Pair::new([0.0; 3], [0.0; 3]);
        let mut f = Self::with_trace_lambda(eos, grid, u, psi, zero, kappa_min)?;
        f.measure_speeds(safety);
        Ok(f)
    }

    /// Recomputes `speeds` (without the safety factor) and `nu` from them.
    pub fn measure_speeds(&mut self, safety: f64) {
        for plus in [true, false] {
            let sp = characteristic_speeds(
                &self.eos,
                &self.grid,
                self.u.get(plus),
                self.grad.get(plus),
                self.lambda.get(plus),
                1.0,
            );
            *self.speeds.get_mut(plus) = sp;
            *self.nu.get_mut(plus) = dissipation_from_speeds(&self.grid, sp.map(|a| safety * a));
        }
    }

    /// Largest speeds over both phases.
    pub fn max_speeds(&self) -> [f64; 3] {
        let (a, b) = (self.speeds.plus, self.speeds.minus);
        [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
    }

    /// Frame with `lambda` from the traces of `u`.
    pub fn with_trace_lambda(
        eos: Eos,
        grid: Grid,
        u: Pair<StateField>,
        psi: Pair<ScalarField>,
        nu: Pair<[f64; 3]>,
        kappa_min: f64,
    ) -> Result<Self> {
        let lambda = lambda_from_traces(&u, &grid)?;
        Self::new(eos, grid, u, psi, lambda, nu, kappa_min)
    }

    #[inline]
    pub fn state(&self, plus: bool, m: usize, i: usize, j: usize, k: usize) -> State {
        state_at(self.u.get(plus), m, i, j, k)
    }

    /// `(A0, Abar1, A2, A3)` at a node for an arbitrary state `u`.
    #[inline]
    pub fn matrices_for(&self, plus: bool, u: &State, m: usize, i: usize, j: usize, k: usize) -> [Mat8; 4] {
        let lam = self.lambda.get(plus)[[m, j, k]];
        let a = augmented_matrices(&self.eos, u, lam);
        lbar(&a, self.grad.get(plus).at(m, i, j, k))
    }

    #[inline]
    pub fn matrices(&self, plus: bool, m: usize, i: usize, j: usize, k: usize) -> [Mat8; 4] {
        let u = self.state(plus, m, i, j, k);
        self.matrices_for(plus, &u, m, i, j, k)
    }

    /// `M(u)[dU]` with the frame's own difference quotients of `U` at the node.
    #[inline]
    pub fn base_action(&self, plus: bool, u: &State, m: usize, i: usize, j: usize, k: usize) -> Vec8 {
        let cols = self.derivs.get(plus).columns(self.nu.get(plus), m, i, j, k);
        contract(&self.matrices_for(plus, u, m, i, j, k), &cols)
    }

    /// Zeroth-order term `E W` at a node by central differencing of the
    /// coefficients along `W`.
    #[inline]
    pub fn e_at(&self, plus: bool, w: &State, m: usize, i: usize, j: usize, k: usize) -> Vec8 {
        let wmax = w.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if wmax == 0.0 {
            return Vec8::zeros();
        }
        let u = self.state(plus, m, i, j, k);
        let umax = u.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let eps = 1e-5 * (1.0 + umax) / wmax;
        let mut up = u;
        let mut um = u;
        for c in 0..NCOMP {
            up[c] += eps * w[c];
            um[c] -= eps * w[c];
        }
        (self.base_action(plus, &up, m, i, j, k) - self.base_action(plus, &um, m, i, j, k)) / (2.0 * eps)
    }

    /// `L_h(U, Psi) V` on every node; the last time level is zero.
    pub fn apply_l(&self, plus: bool, v: &StateField) -> StateField {
        let der = field_derivs(&self.grid, v);
        self.apply_l_with(plus, &der)
    }

    pub fn apply_l_with(&self, plus: bool, der: &FieldDerivs) -> StateField {
        let g = self.grid;
        let mut out = g.state_field();
        let nu = *self.nu.get(plus);
        Zip::indexed(out.lanes_mut(Axis(4))).par_for_each(|(m, i, j, k), mut lane| {
            if m >= g.nt {
                return;
            }
            let r = contract(&self.matrices(plus, m, i, j, k), &der.columns(&nu, m, i, j, k));
            for c in 0..NCOMP {
                lane[c] = r[c];
            }
        });
        out
    }

    /// `E_h W` on every node; the last time level is zero.
    pub fn apply_e(&self, plus: bool, w: &StateField) -> StateField {
        let g = self.grid;
        let mut out = g.state_field();
        Zip::indexed(out.lanes_mut(Axis(4))).par_for_each(|(m, i, j, k), mut lane| {
            if m >= g.nt {
                return;
            }
            let wv = state_at(w, m, i, j, k);
            let r = self.e_at(plus, &wv, m, i, j, k);
            for c in 0..NCOMP {
                lane[c] = r[c];
            }
        });
        out
    }

    /// `L_h(U, Psi) U`.
    pub fn self_residual(&self, plus: bool) -> StateField {
        self.apply_l_with(plus, self.derivs.get(plus))
    }
}

/// Rusanov coefficients `nu_j = safety * a_j * dx_j / 2` from the largest
/// spectral radii of `A0^{-1} Abar1`, `A0^{-1} A2`, `A0^{-1} A3` over a field.
pub fn dissipation_from_speeds(grid: &Grid, speeds: [f64; 3]) -> [f64; 3] {
    let h = grid.spacings();
    let mut nu = [0.5 * speeds[0] * h[0], 0.5 * speeds[1] * h[1], 0.5 * speeds[2] * h[2]];
    if grid.n3 == 1 {
        nu[2] = 0.0;
    }
    nu
}

pub fn characteristic_speeds(
    eos: &Eos,
    grid: &Grid,
    u: &StateField,
    grad: &PsiGradients,
    lambda: &BoundaryField,
    safety: f64,
) -> [f64; 3] {
    use rayon::prelude::*;
    let nt = u.len_of(Axis(0));
    let per_level: Vec<[f64; 3]> = (0..nt)
        .into_par_iter()
        .map(|m| {
            let mut best = [0.0f64; 3];
            for i in 0..=grid.n1 {
                for j in 0..grid.n2 {
                    for k in 0..grid.n3 {
                        let st = state_at(u, m, i, j, k);
                        let a = augmented_matrices(eos, &st, lambda[[m, j, k]]);
                        let mats = lbar(&a, grad.at(m, i, j, k));
                        let rad = generalized_radii(&mats);
                        for d in 0..3 {
                            best[d] = best[d].max(rad[d]);
                        }
                    }
                }
            }
            best
        })
        .collect();
    let mut out = [0.0f64; 3];
    for b in per_level {
        for d in 0..3 {
            out[d] = out[d].max(safety * b[d]);
        }
    }
    out
}

/// Spectral radii of `A0^{-1} A_j` for `j = 1, 2, 3` (symmetric reduction).
pub fn generalized_radii(mats: &[Mat8; 4]) -> [f64; 3] {
    let Some(ch) = mats[0].cholesky() else {
        return [f64::INFINITY; 3];
    };
    let linv = ch.l().try_inverse().unwrap_or_else(Mat8::zeros);
    let mut out = [0.0; 3];
    for d in 0..3 {
        let m = &linv * mats[d + 1] * linv.transpose();
        out[d] = SymmetricEigen::new(0.5 * (m + m.transpose()))
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, &x| a.max(x.abs()));
    }
    out
}

/// Explicit nonlinear evolution of the flattened problem with free
/// one-sided rows at both x1 ends. `lambda` is recomputed from the current
/// traces at every level.
#[derive(Debug, Clone)]
pub struct NonlinearRun {
    pub field: TwoPhaseField,
    pub lift: Pair<ScalarField>,
    pub lambda: Pair<BoundaryField>,
    pub nu: Pair<[f64; 3]>,
}

pub fn evolve_nonlinear(
    eos: &Eos,
    grid: &Grid,
    u0: &Pair<ndarray::Array4<f64>>,
    psi0: &Pair<Array3<f64>>,
    nu: Pair<[f64; 3]>,
    steps: usize,
    kappa_min: f64,
) -> Result<NonlinearRun> {
    let g = *grid;
    if steps > g.nt {
        return Err(CvsError::Parameter(format!("{steps} steps exceed grid levels {}", g.nt)));
    }
    let mut field = TwoPhaseField::zeros(g, false);
    let mut lift = Pair::new(g.scalar_field(), g.scalar_field());
    let mut lambda = Pair::new(g.boundary_field(), g.boundary_field());
    for plus in [true, false] {
        field.plus.index_axis_mut(Axis(0), 0);
        let f = if plus { &mut field.plus } else { &mut field.minus };
        f.index_axis_mut(Axis(0), 0).assign(u0.get(plus));
        lift.get_mut(plus).index_axis_mut(Axis(0), 0).assign(psi0.get(plus));
    }
    let h = g.spacings();
    let kinds = g.tangential_kind();
    for m in 0..steps {
        // lambda from current traces
        for j in 0..g.n2 {
            for k in 0..g.n3 {
                let a = state_at(&field.plus, m, 0, j, k);
                let b = state_at(&field.minus, m, 0, j, k);
                let l = lambda_pair_raw(&a, &b, TOL_PARALLEL)?;
                lambda.plus[[m, j, k]] = l.lambda_plus;
                lambda.minus[[m, j, k]] = l.lambda_minus;
            }
        }
        for plus in [true, false] {
            let f = field.phase(plus).index_axis(Axis(0), m).to_owned();
            let p = lift.get(plus).index_axis(Axis(0), m).to_owned();
            let pn = eikonal_step(&g, &p, &f.view(), [0.0, 0.0]);
            let pd = [
                (&pn - &p) / g.dt,
                d1(&p, 0, h[0], AxisKind::Bounded),
                d1(&p, 1, h[1], AxisKind::Periodic),
                d1(&p, 2, h[2], AxisKind::Periodic),
            ];
            let du = [0, 1, 2].map(|a| d1(&f, a, h[a], kinds[a]));
            let ddu = [0, 1, 2].map(|a| d2(&f, a, h[a], kinds[a]));
            let lam = lambda.get(plus).index_axis(Axis(0), m).to_owned();
            let nuv = *nu.get(plus);
            let mut next = f.clone();
            let mut fail: Option<CvsError> = None;
            for i in 0..=g.n1 {
                for j in 0..g.n2 {
                    for k in 0..g.n3 {
                        let mut u = [0.0; NCOMP];
                        for c in 0..NCOMP {
                            u[c] = f[[i, j, k, c]];
                        }
                        let grad = [pd[0][[i, j, k]], pd[1][[i, j, k]], pd[2][[i, j, k]], pd[3][[i, j, k]]];
                        if grad[1].abs() < kappa_min {
                            fail = Some(CvsError::FrontDegenerate {
                                value: grad[1].abs(),
                                kappa_min,
                            });
                        }
                        let a = augmented_matrices(eos, &u, lam[[j, k]]);
                        let mats = lbar(&a, grad);
                        let col = |arr: &ndarray::Array4<f64>| Vec8::from_fn(|c, _| arr[[i, j, k, c]]);
                        let flux = mats[1] * col(&du[0]) + mats[2] * col(&du[1]) + mats[3] * col(&du[2]);
                        let Some(ch) = mats[0].cholesky() else {
                            return Err(CvsError::Diverged {
                                step: m,
                                reason: "A0 lost definiteness".into(),
                            });
                        };
                        let rate = -ch.solve(&flux)
                            + col(&ddu[0]) * nuv[0]
                            + col(&ddu[1]) * nuv[1]
                            + col(&ddu[2]) * nuv[2];
                        for c in 0..NCOMP {
                            next[[i, j, k, c]] = u[c] + g.dt * rate[c];
                        }
                    }
                }
            }
            if let Some(e) = fail {
                return Err(e);
            }
            if next.iter().any(|x| !x.is_finite()) || next.index_axis(Axis(3), 0).iter().any(|&p| p <= 0.0) {
                return Err(CvsError::Diverged {
                    step: m,
                    reason: "nonphysical state".into(),
                });
            }
            let f = if plus { &mut field.plus } else { &mut field.minus };
            f.index_axis_mut(Axis(0), m + 1).assign(&next);
            lift.get_mut(plus).index_axis_mut(Axis(0), m + 1).assign(&pn);
        }
    }
    Ok(NonlinearRun {
        field,
        lift,
        lambda,
        nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eos_state::MhdState;
    use crate::mhd_system::{rh_residual, to_vec8};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn eos() -> Eos {
        Eos::new(1.4).unwrap()
    }

    const UP: State = [1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0];
    const UM: State = [0.98, 0.0, -0.2, 0.1, 0.0, 0.2, 1.0, 0.0];

    #[test]
    fn identity_transform_keeps_a1() {
        let e = eos();
        let a = augmented_matrices(&e, &UP, 0.3);
        let b = assemble_lbar(&a, [0.0, 1.0, 0.0, 0.0], KAPPA_MIN).unwrap();
        assert_eq!(b[1], a[1]);
        let c = assemble_lbar(&a, [0.0, 2.0, 0.0, 0.0], KAPPA_MIN).unwrap();
        assert!((c[1] - a[1] / 2.0).amax() < 1e-15);
        assert!(matches!(
            assemble_lbar(&a, [0.0, 0.1, 0.0, 0.0], KAPPA_MIN),
            Err(CvsError::FrontDegenerate { .. })
        ));
    }

    proptest! {
        #[test]
        fn lbar_matches_normal_contraction(g in prop::array::uniform4(-1.0f64..1.0), s in 0.5f64..2.0) {
            let e = eos();
            let a = augmented_matrices(&e, &UM, 0.05);
            let grad = [g[0], s, g[2], g[3]];
            let b = lbar(&a, grad);
            // contraction of (A0..A3) with the space-time co-normal (-Psi_t, 1, -Psi_2, -Psi_3) / Psi_1
            let n = [-grad[0], 1.0, -grad[2], -grad[3]];
            let mut c = Mat8::zeros();
            for d in 0..4 {
                c += a[d] * (n[d] / grad[1]);
            }
            prop_assert!((b[1] - c).amax() <= 1e-12 * c.amax().max(1.0));
            prop_assert!((b[1] - b[1].transpose()).amax() <= 1e-12 * b[1].amax());
        }

        #[test]
        fn boundary_operator_matches_contact_residual(
            up in prop::array::uniform8(0.2f64..1.5), um in prop::array::uniform8(0.2f64..1.5),
            d in prop::array::uniform3(-0.5f64..0.5)) {
            let e = eos();
            let b = boundary_operator(&up, &um, d[0], d[1], d[2]);
            let r = rh_residual(&e, &MhdState::new(&e, up).unwrap(), &MhdState::new(&e, um).unwrap(), d[0], d[1], d[2]);
            for c in 0..5 {
                prop_assert!((b[c] - r.contact[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn boundary_operator_examples() {
        let b = boundary_operator(&UP, &UM, 0.0, 0.0, 0.0);
        assert!(b.iter().all(|x| x.abs() < 1e-15));
        let mut u = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        u[H2] = 1.0;
        let eps = 1e-3;
        let b = boundary_operator(&u, &u, 0.0, eps, 0.0);
        assert!((b[2] + eps).abs() < 1e-15);
    }

    fn grid() -> Grid {
        Grid::new(16, 16, 1, 2.0, 2.0 * PI, 1.0, 0.2, 0.01).unwrap()
    }

    #[test]
    fn eikonal_closed_forms() {
        let g = grid();
        let planar = FrontGeometry::planar(&g);
        let init = Pair::new(
            planar.lift.plus.index_axis(Axis(0), 0).to_owned(),
            planar.lift.minus.index_axis(Axis(0), 0).to_owned(),
        );
        let zero = TwoPhaseField::constant(g, [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let r = solve_eikonal(&zero, &init, KAPPA_MIN, [0.0, 0.0]).unwrap();
        assert!((&r.lift.plus - &planar.lift.plus).iter().all(|x| x.abs() < 1e-15));
        let a = 0.3;
        let moving = TwoPhaseField::constant(g, [1.0, a, 0.5, 0.1, 0.0, 1.0, 0.0, 0.0], [1.0, a, -0.2, 0.3, 0.0, 0.0, 1.0, 0.0]);
        let r = solve_eikonal(&moving, &init, KAPPA_MIN, [0.0, 0.0]).unwrap();
        for m in 0..=g.nt {
            for i in 0..=g.n1 {
                let want = g.x1(i) + a * g.t(m);
                assert!((r.lift.plus[[m, i, 3, 0]] - want).abs() < 1e-13);
                assert!((r.lift.minus[[m, i, 3, 0]] - (-g.x1(i) + a * g.t(m))).abs() < 1e-13);
            }
        }
        assert!(r.trace_residual < 1e-13);
    }

    #[test]
    fn eikonal_rejects_degenerate_lift() {
        let g = grid();
        let mut psi = g.boundary_field();
        psi.fill(0.0);
        let mut lift = lift_front(&g, &psi, 1.0);
        lift.plus.mapv_inplace(|x| 0.2 * x);
        assert!(matches!(
            check_kappa(&g, &lift, KAPPA_MIN),
            Err(CvsError::FrontDegenerate { .. })
        ));
    }

    #[test]
    fn planar_sheet_satisfies_constraints() {
        let g = grid();
        let f = TwoPhaseField::constant(g, UP, UM);
        let front = FrontGeometry::planar(&g);
        let r = eikonal_constraint_residual(&f, &front, 0.5);
        assert_eq!(r.eikonal_global.plus.max, 0.0);
        assert_eq!(r.normal_field_global.minus.max, 0.0);
        let mut rnd = f.clone();
        rnd.plus.slice_mut(s![.., .., .., .., H1]).fill(0.1);
        let r = eikonal_constraint_residual(&rnd, &front, 0.5);
        assert!((r.normal_field_global.plus.max - 0.1).abs() < 1e-15);
    }

    #[test]
    fn planar_frame_has_no_self_residual() {
        let g = grid();
        let e = eos();
        let f = TwoPhaseField::constant(g, UP, UM);
        let front = FrontGeometry::planar(&g);
        let frame = OperatorFrame::with_trace_lambda(
            e,
            g,
            Pair::new(f.plus.clone(), f.minus.clone()),
            front.lift.clone(),
            Pair::new([0.01, 0.02, 0.0], [0.01, 0.02, 0.0]),
            KAPPA_MIN,
        )
        .unwrap();
        assert!(frame.self_residual(true).iter().all(|x| x.abs() < 1e-14));
        assert!(frame.self_residual(false).iter().all(|x| x.abs() < 1e-14));
        let w = f.plus.mapv(|x| 0.1 * x);
        assert!(frame.apply_e(true, &w).iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn e_term_matches_directional_derivative() {
        let g = grid();
        let e = eos();
        let mut u = TwoPhaseField::constant(g, UP, UM);
        Zip::indexed(&mut u.plus).for_each(|(m, i, j, _, c), x| {
            *x += 0.05 * ((c + 1) as f64 * g.x2(j) + g.x1(i) - g.t(m)).sin();
        });
        let front = FrontGeometry::planar(&g);
        let frame = OperatorFrame::with_trace_lambda(
            e,
            g,
            Pair::new(u.plus.clone(), u.minus.clone()),
            front.lift.clone(),
            Pair::new([0.0; 3], [0.0; 3]),
            KAPPA_MIN,
        )
        .unwrap();
        let w: State = [0.1, -0.2, 0.3, 0.05, 0.2, -0.1, 0.15, 0.3];
        let (m, i, j, k) = (2, 5, 3, 0);
        let got = frame.e_at(true, &w, m, i, j, k);
        let h = 1e-4;
        let base = frame.state(true, m, i, j, k);
        let act = |s: f64| {
            let mut x = base;
            for c in 0..NCOMP {
                x[c] += s * w[c];
            }
            frame.base_action(true, &x, m, i, j, k)
        };
        let fd = (act(h) - act(-h)) / (2.0 * h);
        assert!((got - fd).amax() < 1e-7 * (1.0 + fd.amax()));
        let _ = to_vec8(&w);
    }

    #[test]
    fn nonlinear_stepper_preserves_planar_sheet() {
        let g = grid();
        let e = eos();
        let f = TwoPhaseField::constant(g, UP, UM);
        let front = FrontGeometry::planar(&g);
        let u0 = Pair::new(f.plus.index_axis(Axis(0), 0).to_owned(), f.minus.index_axis(Axis(0), 0).to_owned());
        let p0 = Pair::new(
            front.lift.plus.index_axis(Axis(0), 0).to_owned(),
            front.lift.minus.index_axis(Axis(0), 0).to_owned(),
        );
        let run = evolve_nonlinear(&e, &g, &u0, &p0, Pair::new([0.01; 3], [0.01; 3]), g.nt, KAPPA_MIN).unwrap();
        assert!((&run.field.plus - &f.plus).iter().all(|x| x.abs() < 1e-14));
        assert!((&run.lift.minus - &front.lift.minus).iter().all(|x| x.abs() < 1e-14));
    }
}
