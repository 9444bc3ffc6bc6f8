//! Linearized problem in good unknowns: the `J` and `P` transforms, the
//! decoupled boundary-value solve with the front update, and energy monitors.
//!
//! The interior is advanced in the good unknown `W` by a forward-Euler
//! Rusanov step of `L W + E W = F`. At `x1 = 0` a first-order one-sided
//! predictor is corrected along the single incoming characteristic of each
//! phase so that `[X1] = h3` and `[X2 - lambda X5]` equals its required value,
//! both expressed in `X = J^{-1} W`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use ndarray::{Array4, Axis, Zip};
use rand::Rng;

use crate::eos_state::{
    state_at, total_pressure, BoundaryField, Eos, Grid, Pair, State, StateField, H1, H2, H3,
    NCOMP, P, S, V1, V2, V3,
};
use crate::error::{CvsError, Result};
use crate::function_spaces::{boundary_norm, AnisotropicNorm, X1Range};
use crate::geometry_transform::{characteristic_speeds, contract, lbar, OperatorFrame};
use crate::mhd_system::{augmented_matrices, lambda_pair_raw, to_vec8, Mat8, Vec8, TOL_PARALLEL};
use crate::stencil::{d1, d2, point_partials, AxisKind};

/// Step of the closed-form partials used by the pointwise oracles.
pub const ORACLE_STEP: f64 = 1e-3;

fn to_state(v: &Vec8) -> State {
    let mut s = [0.0; NCOMP];
    for c in 0..NCOMP {
        s[c] = v[c];
    }
    s
}

/// `W = V - (Phi / d1 Psi) d1 U`.
pub fn good_unknown_point(v: &State, phi: f64, psi_x1: f64, u_x1: &State) -> State {
    let r = phi / psi_x1;
    let mut w = *v;
    for c in 0..NCOMP {
        w[c] -= r * u_x1[c];
    }
    w
}

/// Inverse of [`good_unknown_point`].
pub fn recover_point(w: &State, phi: f64, psi_x1: f64, u_x1: &State) -> State {
    let r = phi / psi_x1;
    let mut v = *w;
    for c in 0..NCOMP {
        v[c] += r * u_x1[c];
    }
    v
}

/// Good unknown on a whole phase of a frame; `d1 U` and `d1 Psi` are the
/// frame's discrete derivatives.
pub fn good_unknown(
    frame: &OperatorFrame,
    plus: bool,
    v: &StateField,
    phi: &ndarray::Array4<f64>,
    kappa_min: f64,
) -> Result<StateField> {
    map_good_unknown(frame, plus, v, phi, kappa_min, false)
}

pub fn recover_increment(
    frame: &OperatorFrame,
    plus: bool,
    w: &StateField,
    phi: &ndarray::Array4<f64>,
    kappa_min: f64,
) -> Result<StateField> {
    map_good_unknown(frame, plus, w, phi, kappa_min, true)
}

fn map_good_unknown(
    frame: &OperatorFrame,
    plus: bool,
    v: &StateField,
    phi: &ndarray::Array4<f64>,
    kappa_min: f64,
    inverse: bool,
) -> Result<StateField> {
    let g1 = &frame.grad.get(plus).d1;
    let worst = g1.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(worst >= kappa_min) {
        return Err(CvsError::FrontDegenerate {
            value: worst,
            kappa_min,
        });
    }
    let du = &frame.derivs.get(plus).d[0];
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = v.clone();
    Zip::indexed(&mut out).for_each(|(m, i, j, k, c), x| {
        *x += sign * phi[[m, i, j, k]] / g1[[m, i, j, k]] * du[[m, i, j, k, c]];
    });
    Ok(out)
}

/// `X = J^{-1} W` with `u` the base state and `(p2, p3)` the tangential
/// gradients of the lift.
pub fn x_from_w(w: &State, u: &State, p2: f64, p3: f64) -> State {
    let mut x = *w;
    x[P] = w[P] + u[H1] * w[H1] + u[H2] * w[H2] + u[H3] * w[H3];
    x[V1] = w[V1] - p2 * w[V2] - p3 * w[V3];
    x[H1] = w[H1] - p2 * w[H2] - p3 * w[H3];
    x
}

pub fn w_from_x(x: &State, u: &State, p2: f64, p3: f64) -> State {
    let mut w = *x;
    w[V1] = x[V1] + p2 * x[V2] + p3 * x[V3];
    w[H1] = x[H1] + p2 * x[H2] + p3 * x[H3];
    w[P] = x[P] - u[H1] * w[H1] - u[H2] * w[H2] - u[H3] * w[H3];
    w
}

/// The matrix `J` with `W = J X`.
pub fn j_matrix(u: &State, p2: f64, p3: f64) -> Mat8 {
    let mut j = Mat8::zeros();
    for c in 0..NCOMP {
        let mut e = [0.0; NCOMP];
        e[c] = 1.0;
        let col = w_from_x(&e, u, p2, p3);
        for r in 0..NCOMP {
            j[(r, c)] = col[r];
        }
    }
    j
}

/// `J^T A J` for each coefficient.
pub fn transformed(mats: &[Mat8; 4], j: &Mat8) -> [Mat8; 4] {
    mats.map(|a| j.transpose() * a * j)
}

/// `P` with `X = P Y`, so that `Y1 = X1` and `Y2 = X2 - lambda X5`.
pub fn p_matrix(lambda: f64) -> Mat8 {
    let mut p = Mat8::zeros();
    // column c of P is X for Y = e_c
    let image = |y: &[f64; NCOMP]| -> [f64; NCOMP] {
        [y[0], y[1] + lambda * y[2], y[3], y[4], y[2], y[5], y[6], y[7]]
    };
    for c in 0..NCOMP {
        let mut e = [0.0; NCOMP];
        e[c] = 1.0;
        let col = image(&e);
        for r in 0..NCOMP {
            p[(r, c)] = col[r];
        }
    }
    p
}

/// Boundary quadratic form in `X` against its reduced expressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryForm {
    /// `<diag(A1+, A1-) X, X>` with the `J`-transformed normal matrices.
    pub form: f64,
    /// `sum 2 X1 (X2 - lambda X5) / d1 Psi` over both phases.
    pub reduced: f64,
    /// `2 X1+ [X2 - lambda X5]`.
    pub jump_form: f64,
    /// `form - jump_form`.
    pub difference: f64,
    /// Magnitude used to normalize `difference`.
    pub scale: f64,
}

/// Boundary data of one phase at a point: state, lift gradients, multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub u: State,
    pub grad: [f64; 4],
    pub lambda: f64,
}

impl BoundaryPoint {
    pub fn normal_matrix(&self, eos: &Eos) -> Mat8 {
        let a = augmented_matrices(eos, &self.u, self.lambda);
        let j = j_matrix(&self.u, self.grad[2], self.grad[3]);
        j.transpose() * lbar(&a, self.grad)[1] * j
    }
}

pub fn boundary_quadratic_form(
    eos: &Eos,
    xp: &State,
    xm: &State,
    bp: &BoundaryPoint,
    bm: &BoundaryPoint,
) -> BoundaryForm {
    let mut form = 0.0;
    let mut reduced = 0.0;
    let mut scale: f64 = 0.0;
    let mut n = [0.0; 2];
    for (idx, (x, b)) in [(xp, bp), (xm, bm)].into_iter().enumerate() {
        let a1 = b.normal_matrix(eos);
        let xv = to_vec8(x);
        form += xv.dot(&(a1 * xv));
        n[idx] = x[V1] - b.lambda * x[H1];
        reduced += 2.0 * x[P] * n[idx] / b.grad[1];
        scale = scale.max(a1.amax() * xv.norm_squared());
    }
    let jump_form = 2.0 * xp[P] * (n[0] - n[1]);
    BoundaryForm {
        form,
        reduced,
        jump_form,
        difference: form - jump_form,
        scale: scale.max(f64::MIN_POSITIVE),
    }
}

/// A random boundary configuration satisfying the contact conditions:
/// `psi_t = v_N+-`, `H_N+- = 0`, `[q] = 0`, `d1 Psi+- = +-1`, with
/// `lambda` from the tangential traces.
pub fn constrained_boundary_sample<R: Rng>(rng: &mut R) -> (BoundaryPoint, BoundaryPoint) {
    loop {
        let p2 = rng.gen_range(-0.5..0.5);
        let p3 = rng.gen_range(-0.5..0.5);
        let mut up = [0.0; NCOMP];
        let mut um = [0.0; NCOMP];
        up[P] = rng.gen_range(0.5..2.0);
        for u in [&mut up, &mut um] {
            u[V2] = rng.gen_range(-0.5..0.5);
            u[V3] = rng.gen_range(-0.5..0.5);
            u[H2] = rng.gen_range(-1.0..1.0);
            u[H3] = rng.gen_range(-1.0..1.0);
            u[S] = rng.gen_range(-0.5..0.5);
            u[H1] = p2 * u[H2] + p3 * u[H3];
        }
        up[V1] = rng.gen_range(-0.5..0.5);
        let psi_t = up[V1] - p2 * up[V2] - p3 * up[V3];
        um[V1] = psi_t + p2 * um[V2] + p3 * um[V3];
        um[P] = 0.0;
        um[P] = total_pressure(&up) - total_pressure(&um);
        if um[P] < 0.2 {
            continue;
        }
        let Ok(l) = lambda_pair_raw(&up, &um, TOL_PARALLEL) else {
            continue;
        };
        if l.lambda_plus.abs() > 2.0 || l.lambda_minus.abs() > 2.0 {
            continue;
        }
        return (
            BoundaryPoint {
                u: up,
                grad: [psi_t, 1.0, p2, p3],
                lambda: l.lambda_plus,
            },
            BoundaryPoint {
                u: um,
                grad: [psi_t, -1.0, p2, p3],
                lambda: l.lambda_minus,
            },
        );
    }
}

/// Deviations of `d1 Psi * P^T (J^T Abar1 J) P` from the
/// `[[0,1],[1,0]] (+) 0` block structure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockDeviation {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl BlockDeviation {
    pub fn max(&self) -> f64 {
        self.a11.max(self.a12).max(self.a22)
    }

    fn merge(&mut self, o: &BlockDeviation) {
        self.a11 = self.a11.max(o.a11);
        self.a12 = self.a12.max(o.a12);
        self.a22 = self.a22.max(o.a22);
    }
}

pub fn p_block_deviation(eos: &Eos, b: &BoundaryPoint) -> BlockDeviation {
    let p = p_matrix(b.lambda);
    let m = p.transpose() * b.normal_matrix(eos) * p * b.grad[1];
    let mut d = BlockDeviation::default();
    for r in 0..NCOMP {
        for c in 0..NCOMP {
            let v = m[(r, c)];
            if r < 2 && c < 2 {
                let want = if r != c { 1.0 } else { 0.0 };
                d.a11 = d.a11.max((v - want).abs());
            } else if r < 2 || c < 2 {
                d.a12 = d.a12.max(v.abs());
            } else {
                d.a22 = d.a22.max(v.abs());
            }
        }
    }
    d
}

/// Block structure of a frame over all boundary points, with the boundary
/// constraint residuals that the structure presumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PCheckReport {
    pub deviation: BlockDeviation,
    /// Largest `|psi_t - v_N|` at `x1 = 0`.
    pub eikonal_residual: f64,
    /// Largest `|H_N|` at `x1 = 0`.
    pub normal_field_residual: f64,
    /// Largest `||d1 Psi| - 1|` at `x1 = 0`.
    pub normal_scale_residual: f64,
}

pub fn p_transform_check(frame: &OperatorFrame) -> PCheckReport {
    let g = frame.grid;
    let mut dev = BlockDeviation::default();
    let (mut e, mut h, mut sc) = (0.0f64, 0.0f64, 0.0f64);
    for plus in [true, false] {
        for m in 0..=g.nt {
            for j in 0..g.n2 {
                for k in 0..g.n3 {
                    let b = BoundaryPoint {
                        u: frame.state(plus, m, 0, j, k),
                        grad: frame.grad.get(plus).at(m, 0, j, k),
                        lambda: frame.lambda.get(plus)[[m, j, k]],
                    };
                    dev.merge(&p_block_deviation(&frame.eos, &b));
                    let u = &b.u;
                    let gr = b.grad;
                    if m < g.nt {
                        e = e.max((gr[0] - u[V1] + gr[2] * u[V2] + gr[3] * u[V3]).abs());
                    }
                    h = h.max((u[H1] - gr[2] * u[H2] - gr[3] * u[H3]).abs());
                    sc = sc.max((gr[1].abs() - 1.0).abs());
                }
            }
        }
    }
    PCheckReport {
        deviation: dev,
        eikonal_residual: e,
        normal_field_residual: h,
        normal_scale_residual: sc,
    }
}

/// Boundary data `(h1+-, h2+-, h3)` of the linearized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub h1: Pair<BoundaryField>,
    pub h2: Pair<BoundaryField>,
    pub h3: BoundaryField,
}

impl BoundaryData {
    pub fn zeros(grid: &Grid) -> Self {
        let z = grid.boundary_field();
        Self {
            h1: Pair::new(z.clone(), z.clone()),
            h2: Pair::new(z.clone(), z.clone()),
            h3: z,
        }
    }

    /// Sum of the squared `H^s_mu` norms of the five components.
    pub fn norm_sq(&self, grid: &Grid, s: usize, mu: f64) -> f64 {
        [&self.h1.plus, &self.h1.minus, &self.h2.plus, &self.h2.minus, &self.h3]
            .iter()
            .map(|f| boundary_norm(grid, f, s, mu).powi(2))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        [&self.h1.plus, &self.h1.minus, &self.h2.plus, &self.h2.minus, &self.h3]
            .iter()
            .all(|f| f.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub cfl_limit: f64,
    pub include_e: bool,
    /// Overwrites `W` at time level 1 (stability probes).
    pub inject: Option<Pair<Array4<f64>>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            cfl_limit: 0.45,
            include_e: true,
            inject: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GapStats {
    pub max: f64,
    /// `L^2` over `[0,T] x T^2`.
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct LinearSolveReport {
    pub w: Pair<StateField>,
    pub x: Pair<StateField>,
    pub phi: BoundaryField,
    /// Plus minus front-speed gap with the algebraic tangential gradient
    /// `a = M^{-1}(X5 - h2)`.
    pub algebraic_gap: GapStats,
    /// The same gap with the discrete gradient of `phi` in place of `a`.
    pub gradient_gap: GapStats,
    /// Largest violation of the two imposed jump conditions.
    pub boundary_residual: f64,
    /// Smallest determinant of the boundary correction systems.
    pub min_det: f64,
    pub cfl: f64,
}

/// Eigenvector of `A0^{-1} Abar1` with the largest positive speed.
pub fn incoming_mode(a0: &Mat8, a1: &Mat8) -> Option<(f64, Vec8)> {
    let ch = a0.cholesky()?;
    let l = ch.l();
    let linv = l.try_inverse()?;
    let m = &linv * a1 * linv.transpose();
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let (idx, speed) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    if !(speed > 0.0) {
        return None;
    }
    let y = eig.eigenvectors.column(idx).into_owned();
    Some((speed, linv.transpose() * y))
}

fn tangential_traces(u: &State) -> ([f64; 2], [f64; 2]) {
    ([u[V2], u[V3]], [u[H2], u[H3]])
}

/// Boundary-phase quantities at one `(m, j, k)`.
struct Trace {
    x: Pair<State>,
    u: Pair<State>,
    lambda: Pair<f64>,
}

fn trace_at(frame: &OperatorFrame, w: &Pair<Array4<f64>>, m: usize, j: usize, k: usize) -> Trace {
    let one = |plus: bool| {
        let u = frame.state(plus, m, 0, j, k);
        let gr = frame.grad.get(plus).at(m, 0, j, k);
        let wl = w.get(plus);
        let mut wv = [0.0; NCOMP];
        for c in 0..NCOMP {
            wv[c] = wl[[0, j, k, c]];
        }
        (x_from_w(&wv, &u, gr[2], gr[3]), u, frame.lambda.get(plus)[[m, j, k]])
    };
    let (xp, up, lp) = one(true);
    let (xm, um, lm) = one(false);
    Trace {
        x: Pair::new(xp, xm),
        u: Pair::new(up, um),
        lambda: Pair::new(lp, lm),
    }
}

/// Front speeds from the boundary relations: the two phase expressions with
/// `a = M^{-1}(X5 - h2)` and with the discrete gradient `phi_x`.
fn front_speeds(
    tr: &Trace,
    data: &BoundaryData,
    m: usize,
    j: usize,
    k: usize,
    phi_x: [f64; 2],
) -> Result<([f64; 2], [f64; 2])> {
    let (_, hp) = tangential_traces(&tr.u.plus);
    let (_, hm) = tangential_traces(&tr.u.minus);
    let mm = Matrix2::new(hp[0], hp[1], hm[0], hm[1]);
    let scale = (hp[0].hypot(hp[1]) * hm[0].hypot(hm[1])).max(f64::MIN_POSITIVE);
    if mm.determinant().abs() <= TOL_PARALLEL * scale {
        return Err(CvsError::DegenerateConfiguration(format!(
            "tangential fields parallel at boundary node ({m}, {j}, {k})"
        )));
    }
    let rhs = Vector2::new(
        tr.x.plus[H1] - data.h2.plus[[m, j, k]],
        tr.x.minus[H1] - data.h2.minus[[m, j, k]],
    );
    let a = mm.lu().solve(&rhs).unwrap_or_else(Vector2::zeros);
    let mut alg = [0.0; 2];
    let mut grd = [0.0; 2];
    for (idx, plus) in [true, false].into_iter().enumerate() {
        let (v, _) = tangential_traces(tr.u.get(plus));
        let base = tr.x.get(plus)[V1] + data.h1.get(plus)[[m, j, k]];
        alg[idx] = base - v[0] * a[0] - v[1] * a[1];
        grd[idx] = base - v[0] * phi_x[0] - v[1] * phi_x[1];
    }
    Ok((alg, grd))
}

fn boundary_gradient(grid: &Grid, phi: &ndarray::Array2<f64>) -> [ndarray::Array2<f64>; 2] {
    [
        d1(phi, 0, grid.dx2(), AxisKind::Periodic),
        d1(phi, 1, grid.dx3(), AxisKind::Periodic),
    ]
}

/// Solves `L W + E W = F` with the boundary conditions expressed in `X` and
/// integrates the front increment.
pub fn solve_linearized(
    frame: &OperatorFrame,
    forcing: &Pair<StateField>,
    data: &BoundaryData,
    opts: &SolveOptions,
) -> Result<LinearSolveReport> {
    let g = frame.grid;
    let mut speeds = frame.max_speeds();
    if speeds == [0.0; 3] {
        for plus in [true, false] {
            let sp = characteristic_speeds(
                &frame.eos,
                &g,
                frame.u.get(plus),
                frame.grad.get(plus),
                frame.lambda.get(plus),
                1.0,
            );
            for d in 0..3 {
                speeds[d] = speeds[d].max(sp[d]);
            }
        }
    }
    let cfl = g.cfl_number(speeds);
    g.check_cfl(speeds, opts.cfl_limit)?;
    let h = g.spacings();
    let kinds = g.tangential_kind();
    let dims = (g.n1 + 1, g.n2, g.n3, NCOMP);
    let mut w = Pair::new(g.state_field(), g.state_field());
    let mut phi = g.boundary_field();
    let mut cur = Pair::new(Array4::<f64>::zeros(dims), Array4::<f64>::zeros(dims));
    let mut alg_stats = GapStats::default();
    let mut grd_stats = GapStats::default();
    let mut min_det = f64::INFINITY;
    let mut bres: f64 = 0.0;
    let area = g.dx2() * g.dx3();
    let record = |stats: &mut GapStats, gap: f64, m: usize| {
        let wt = if m == 0 || m == g.nt { 0.5 } else { 1.0 } * g.dt * area;
        stats.max = stats.max.max(gap.abs());
        stats.l2 += wt * gap * gap;
    };

    for m in 0..=g.nt {
        // front speeds at level m
        let phi_m = phi.index_axis(Axis(0), m).to_owned();
        let dphi = boundary_gradient(&g, &phi_m);
        let mut rate = ndarray::Array2::<f64>::zeros((g.n2, g.n3));
        for j in 0..g.n2 {
            for k in 0..g.n3 {
                let tr = trace_at(frame, &cur, m, j, k);
                let (alg, grd) = front_speeds(&tr, data, m, j, k, [dphi[0][[j, k]], dphi[1][[j, k]]])?;
                rate[[j, k]] = 0.5 * (alg[0] + alg[1]);
                record(&mut alg_stats, alg[0] - alg[1], m);
                record(&mut grd_stats, grd[0] - grd[1], m);
            }
        }
        if m == g.nt {
            break;
        }
        let phi_next = &phi_m + &(rate * g.dt);
        phi.index_axis_mut(Axis(0), m + 1).assign(&phi_next);

        // interior predictor per phase
        let mut next = Pair::new(Array4::<f64>::zeros(dims), Array4::<f64>::zeros(dims));
        for plus in [true, false] {
            let wm = cur.get(plus);
            let dw = [0, 1, 2].map(|a| d1(wm, a, h[a], kinds[a]));
            let ddw = [0, 1, 2].map(|a| d2(wm, a, h[a], kinds[a]));
            let nu = *frame.nu.get(plus);
            let f = forcing.get(plus);
            let out = next.get_mut(plus);
            let fail = std::sync::Mutex::new(None::<CvsError>);
            Zip::indexed(out.lanes_mut(Axis(3))).par_for_each(|(i, j, k), mut lane| {
                if i == g.n1 {
                    return;
                }
                let col = |a: &Array4<f64>, ii: usize| Vec8::from_fn(|c, _| a[[ii, j, k, c]]);
                let wv = col(wm, i);
                let d1w = if i == 0 { (col(wm, 1) - wv) / h[0] } else { col(&dw[0], i) };
                let mut diss = col(&ddw[1], i) * nu[1] + col(&ddw[2], i) * nu[2];
                if i > 0 {
                    diss += col(&ddw[0], i) * nu[0];
                }
                let mats = frame.matrices(plus, m, i, j, k);
                let mut rhs = Vec8::from_fn(|c, _| f[[m, i, j, k, c]])
                    - mats[1] * d1w
                    - mats[2] * col(&dw[1], i)
                    - mats[3] * col(&dw[2], i);
                if opts.include_e {
                    rhs -= frame.e_at(plus, &to_state(&wv), m, i, j, k);
                }
                let Some(ch) = mats[0].cholesky() else {
                    *fail.lock().unwrap() = Some(CvsError::Diverged {
                        step: m,
                        reason: "A0 lost definiteness".into(),
                    });
                    return;
                };
                let upd = wv + (diss + ch.solve(&rhs)) * g.dt;
                for c in 0..NCOMP {
                    lane[c] = upd[c];
                }
            });
            if let Some(e) = fail.into_inner().unwrap() {
                return Err(e);
            }
            // far end: zero-order extrapolation
            let last = out.index_axis(Axis(0), g.n1 - 1).to_owned();
            out.index_axis_mut(Axis(0), g.n1).assign(&last);
        }
        if m == 0 {
            if let Some(inj) = &opts.inject {
                next = inj.clone();
            }
        }

        // boundary correction at level m+1
        let dphi = boundary_gradient(&g, &phi_next);
        let m1 = m + 1;
        for j in 0..g.n2 {
            for k in 0..g.n3 {
                let tr = trace_at(frame, &next, m1, j, k);
                let px = [dphi[0][[j, k]], dphi[1][[j, k]]];
                let mut modes = [(Vec8::zeros(), [0.0; NCOMP]); 2];
                for (idx, plus) in [true, false].into_iter().enumerate() {
                    let mats = frame.matrices(plus, m1, 0, j, k);
                    let Some((_, r)) = incoming_mode(&mats[0], &mats[1]) else {
                        return Err(CvsError::DegenerateConfiguration(format!(
                            "no incoming characteristic at boundary node ({m1}, {j}, {k})"
                        )));
                    };
                    let gr = frame.grad.get(plus).at(m1, 0, j, k);
                    let rx = x_from_w(&to_state(&r), tr.u.get(plus), gr[2], gr[3]);
                    let nrm = rx.iter().map(|x| x * x).sum::<f64>().sqrt();
                    modes[idx] = (r / nrm, rx.map(|x| x / nrm));
                }
                let (lp, lm) = (tr.lambda.plus, tr.lambda.minus);
                let nform = |x: &State, l: f64| x[V1] - l * x[H1];
                let (vp, hp) = tangential_traces(&tr.u.plus);
                let (vm, hm) = tangential_traces(&tr.u.minus);
                let jump_n = (0..2)
                    .map(|d| px[d] * ((vp[d] - lp * hp[d]) - (vm[d] - lm * hm[d])))
                    .sum::<f64>()
                    - (data.h1.plus[[m1, j, k]] + lp * data.h2.plus[[m1, j, k]])
                    + (data.h1.minus[[m1, j, k]] + lm * data.h2.minus[[m1, j, k]]);
                let target = Vector2::new(data.h3[[m1, j, k]], jump_n);
                let have = Vector2::new(
                    tr.x.plus[P] - tr.x.minus[P],
                    nform(&tr.x.plus, lp) - nform(&tr.x.minus, lm),
                );
                let (rp, rm) = (&modes[0].1, &modes[1].1);
                let sys = Matrix2::new(rp[P], -rm[P], nform(rp, lp), -nform(rm, lm));
                let det = sys.determinant();
                min_det = min_det.min(det);
                if det.abs() < 1e-12 {
                    return Err(CvsError::DegenerateConfiguration(format!(
                        "boundary closure singular at ({m1}, {j}, {k})"
                    )));
                }
                let beta = sys.lu().solve(&(target - have)).unwrap_or_else(Vector2::zeros);
                for (idx, plus) in [true, false].into_iter().enumerate() {
                    let wl = next.get_mut(plus);
                    for c in 0..NCOMP {
                        wl[[0, j, k, c]] += beta[idx] * modes[idx].0[c];
                    }
                }
                let after = trace_at(frame, &next, m1, j, k);
                let got = Vector2::new(
                    after.x.plus[P] - after.x.minus[P],
                    nform(&after.x.plus, lp) - nform(&after.x.minus, lm),
                );
                bres = bres.max((got - target).amax());
            }
        }
        for plus in [true, false] {
            w.get_mut(plus).index_axis_mut(Axis(0), m1).assign(next.get(plus));
        }
        cur = next;
    }
    alg_stats.l2 = alg_stats.l2.sqrt();
    grd_stats.l2 = grd_stats.l2.sqrt();
    let x = Pair::new(to_x_field(frame, true, &w.plus), to_x_field(frame, false, &w.minus));
    Ok(LinearSolveReport {
        w,
        x,
        phi,
        algebraic_gap: alg_stats,
        gradient_gap: grd_stats,
        boundary_residual: bres,
        min_det,
        cfl,
    })
}

/// `X = J^{-1} W` on every node of one phase.
pub fn to_x_field(frame: &OperatorFrame, plus: bool, w: &StateField) -> StateField {
    let mut out = w.clone();
    Zip::indexed(out.lanes_mut(Axis(4))).par_for_each(|(m, i, j, k), mut lane| {
        let u = frame.state(plus, m, i, j, k);
        let gr = frame.grad.get(plus).at(m, i, j, k);
        let wv = state_at(w, m, i, j, k);
        let x = x_from_w(&wv, &u, gr[2], gr[3]);
        for c in 0..NCOMP {
            lane[c] = x[c];
        }
    });
    out
}

/// `J^T F` on every node of one phase.
pub fn transform_forcing(frame: &OperatorFrame, plus: bool, f: &StateField) -> StateField {
    let mut out = f.clone();
    Zip::indexed(out.lanes_mut(Axis(4))).par_for_each(|(m, i, j, k), mut lane| {
        let u = frame.state(plus, m, i, j, k);
        let gr = frame.grad.get(plus).at(m, i, j, k);
        let jm = j_matrix(&u, gr[2], gr[3]);
        let r = jm.transpose() * to_vec8(&state_at(f, m, i, j, k));
        for c in 0..NCOMP {
            lane[c] = r[c];
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub mu: f64,
    /// `max_t ||X(t)||^2_{s,mu} + mu ||X||^2_{s,mu,T}` over both phases.
    pub lhs: f64,
    /// `||J^T F||^2_{s,mu,T} + ||h||^2_{H^{s+1}_mu}`.
    pub rhs: f64,
    pub c0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub s: usize,
    pub rows: Vec<EnergyRow>,
    /// `max C0 / min C0` across the weights.
    pub drift: Option<f64>,
    pub vacuous: bool,
}

pub fn energy_report(
    frame: &OperatorFrame,
    report: &LinearSolveReport,
    forcing: &Pair<StateField>,
    data: &BoundaryData,
    s: usize,
    mus: &[f64],
) -> Result<EnergyReport> {
    let g = frame.grid;
    let range = X1Range::full(&g);
    let ft = Pair::new(
        transform_forcing(frame, true, &forcing.plus),
        transform_forcing(frame, false, &forcing.minus),
    );
    let mut rows = Vec::with_capacity(mus.len());
    for &mu in mus {
        let nrm = AnisotropicNorm::new(s, mu)?;
        let mut lhs = 0.0;
        let mut rhs = data.norm_sq(&g, s + 1, mu);
        for plus in [true, false] {
            let x = report.x.get(plus);
            lhs += nrm.sup_in_time_state(&g, x, range)?.powi(2) + mu * nrm.eval_state(&g, x, range)?.powi(2);
            rhs += nrm.eval_state(&g, ft.get(plus), range)?.powi(2);
        }
        let c0 = if rhs > 0.0 { Some(lhs * mu / rhs) } else { None };
        rows.push(EnergyRow { mu, lhs, rhs, c0 });
    }
    let c: Vec<f64> = rows.iter().filter_map(|r| r.c0).collect();
    let vacuous = c.is_empty();
    let drift = if c.len() == rows.len() && !c.is_empty() && c.iter().all(|&x| x > 0.0) {
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(hi / lo)
    } else {
        None
    };
    Ok(EnergyReport { s, rows, drift, vacuous })
}

/// `max_t ||X(t)||_0` relative to its value at level 1, as a rate
/// `ln(ratio) / T`.
pub fn discrete_growth_rate(grid: &Grid, report: &LinearSolveReport) -> f64 {
    let level = |m: usize| -> f64 {
        [true, false]
            .iter()
            .map(|&plus| {
                report
                    .x
                    .get(plus)
                    .index_axis(Axis(0), m)
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let first = level(1);
    if first == 0.0 {
        return 0.0;
    }
    let peak = (1..=grid.nt).map(level).fold(0.0f64, f64::max);
    (peak / first).ln() / grid.t_final
}

/// Continuum first-variation identity at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationCheck {
    pub steps: Vec<f64>,
    /// `|N(s) - N(0) - s N'(0)|` with `N'(0)` from the good-unknown identity.
    pub remainders: Vec<f64>,
    pub slope: f64,
}

/// `L(U, Psi) U` of closed-form fields at `x`, with `lambda` frozen.
pub fn continuum_operator<FU, FP>(eos: &Eos, lambda: f64, u: &FU, psi: &FP, x: [f64; 4]) -> Vec8
where
    FU: Fn([f64; 4]) -> State,
    FP: Fn([f64; 4]) -> f64,
{
    let du = point_partials(u, x, ORACLE_STEP);
    let dp = point_partials(|y| [psi(y)], x, ORACLE_STEP);
    let grad = [dp[0][0], dp[1][0], dp[2][0], dp[3][0]];
    let mats = lbar(&augmented_matrices(eos, &u(x), lambda), grad);
    contract(&mats, &du.map(|d| to_vec8(&d)))
}

/// `E(U, Psi) W` of the continuum operator including the `A0` term.
pub fn continuum_e<FU, FP>(eos: &Eos, lambda: f64, u: &FU, psi: &FP, w: &State, x: [f64; 4]) -> Vec8
where
    FU: Fn([f64; 4]) -> State,
    FP: Fn([f64; 4]) -> f64,
{
    let du = point_partials(u, x, ORACLE_STEP).map(|d| to_vec8(&d));
    let dp = point_partials(|y| [psi(y)], x, ORACLE_STEP);
    let grad = [dp[0][0], dp[1][0], dp[2][0], dp[3][0]];
    let u0 = u(x);
    let eps = 1e-5;
    let act = |s: f64| {
        let mut v = u0;
        for c in 0..NCOMP {
            v[c] += s * w[c];
        }
        contract(&lbar(&augmented_matrices(eos, &v, lambda), grad), &du)
    };
    (act(eps) - act(-eps)) / (2.0 * eps)
}

pub fn linearization_identity<FU, FV, FP, FQ>(
    eos: &Eos,
    lambda: f64,
    u: FU,
    v: FV,
    psi: FP,
    phi: FQ,
    x: [f64; 4],
    steps: &[f64],
) -> LinearizationCheck
where
    FU: Fn([f64; 4]) -> State,
    FV: Fn([f64; 4]) -> State,
    FP: Fn([f64; 4]) -> f64,
    FQ: Fn([f64; 4]) -> f64,
{
    let w_fn = |y: [f64; 4]| {
        let du = point_partials(&u, y, ORACLE_STEP);
        let dp = point_partials(|z| [psi(z)], y, ORACLE_STEP);
        good_unknown_point(&v(y), phi(y), dp[1][0], &du[1])
    };
    let lu = |y: [f64; 4]| to_state(&continuum_operator(eos, lambda, &u, &psi, y));
    let d_lu = point_partials(lu, x, ORACLE_STEP);
    let dp = point_partials(|z| [psi(z)], x, ORACLE_STEP);
    let wx = w_fn(x);
    // L W: the operator frozen at (U, Psi) applied to W
    let dw = point_partials(w_fn, x, ORACLE_STEP).map(|d| to_vec8(&d));
    let grad = [dp[0][0], dp[1][0], dp[2][0], dp[3][0]];
    let mats = lbar(&augmented_matrices(eos, &u(x), lambda), grad);
    let deriv = contract(&mats, &dw)
        + continuum_e(eos, lambda, &u, &psi, &wx, x)
        + to_vec8(&d_lu[1]) * (phi(x) / grad[1]);
    let n_of = |s: f64| {
        let us = |y: [f64; 4]| {
            let (a, b) = (u(y), v(y));
            let mut o = a;
            for c in 0..NCOMP {
                o[c] += s * b[c];
            }
            o
        };
        let ps = |y: [f64; 4]| psi(y) + s * phi(y);
        continuum_operator(eos, lambda, &us, &ps, x)
    };
    let n0 = n_of(0.0);
    let remainders: Vec<f64> = steps.iter().map(|&s| (n_of(s) - n0 - deriv * s).amax()).collect();
    let slope = loglog_slope(steps, &remainders);
    LinearizationCheck {
        steps: steps.to_vec(),
        remainders,
        slope,
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Manufactured linearized problem on a planar sheet: a prescribed smooth
/// `W*`, `phi*` vanishing at `t = 0` with the forcing and boundary data that
/// they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct ManufacturedCase {
    pub eos: Eos,
    pub up: State,
    pub um: State,
    pub amplitude: f64,
    /// Tangential wave number in `x2`.
    pub k2: f64,
    /// `W*` vanishes at `x1 = 0` and `phi* = 0`, so all boundary data vanish.
    pub homogeneous: bool,
}

#[derive(Debug, Clone)]
pub struct ManufacturedRun {
    pub frame: OperatorFrame,
    pub forcing: Pair<StateField>,
    pub data: BoundaryData,
    pub report: LinearSolveReport,
    /// Space-time `L^2` error of `W` over both phases.
    pub w_error: f64,
    /// Space-time `L^2` error of `phi`.
    pub phi_error: f64,
}

impl ManufacturedCase {
    pub fn new(eos: Eos, up: State, um: State) -> Self {
        Self {
            eos,
            up,
            um,
            amplitude: 0.1,
            k2: 1.0,
            homogeneous: false,
        }
    }

    pub fn exact_w(&self, plus: bool, x1_max: f64, y: [f64; 4]) -> State {
        let [t, x1, x2, x3] = y;
        let sgn = if plus { 1.0 } else { -1.0 };
        let mut w = [0.0; NCOMP];
        for c in 0..NCOMP {
            let cf = c as f64;
            let prof = if self.homogeneous {
                (0.5 * std::f64::consts::PI * x1 / x1_max).sin() * (1.0 + 0.3 * cf * x1)
            } else {
                (std::f64::consts::PI * x1 / x1_max + 0.3 * cf).cos()
            };
            w[c] = self.amplitude
                * t
                * t
                * (1.0 + 0.1 * cf * sgn)
                * prof
                * (self.k2 * x2 + 0.7 * cf + 0.4 * sgn).sin()
                * (1.0 + 0.2 * x3.cos());
        }
        w
    }

    pub fn exact_phi(&self, y: [f64; 4]) -> f64 {
        let [t, _, x2, x3] = y;
        if self.homogeneous {
            return 0.0;
        }
        self.amplitude * t * t * (self.k2 * x2 + 0.2).cos() * (1.0 + 0.2 * x3.cos())
    }

    /// Planar frame `Psi = +-x1` with constant states.
    pub fn frame(&self, grid: &Grid) -> Result<OperatorFrame> {
        let f = crate::eos_state::TwoPhaseField::constant(*grid, self.up, self.um);
        let front = crate::geometry_transform::FrontGeometry::planar(grid);
        OperatorFrame::rusanov(
            self.eos,
            *grid,
            Pair::new(f.plus, f.minus),
            front.lift,
            1.2,
            crate::geometry_transform::KAPPA_MIN,
        )
    }

    fn point(grid: &Grid, m: usize, i: usize, j: usize, k: usize) -> [f64; 4] {
        [grid.t(m), grid.x1(i), grid.x2(j), grid.x3(k)]
    }

    /// Continuum forcing `L W* + E W*` sampled on the grid.
    pub fn forcing(&self, frame: &OperatorFrame) -> Pair<StateField> {
        let g = frame.grid;
        let one = |plus: bool| {
            let mut out = g.state_field();
            let x1_max = g.x1_max;
            Zip::indexed(out.lanes_mut(Axis(4))).par_for_each(|(m, i, j, k), mut lane| {
                let y = Self::point(&g, m, i, j, k);
                let d = point_partials(|z| self.exact_w(plus, x1_max, z), y, ORACLE_STEP).map(|r| to_vec8(&r));
                let mats = frame.matrices(plus, m, i, j, k);
                let r = contract(&mats, &d) + frame.e_at(plus, &self.exact_w(plus, x1_max, y), m, i, j, k);
                for c in 0..NCOMP {
                    lane[c] = r[c];
                }
            });
            out
        };
        Pair::new(one(true), one(false))
    }

    /// Boundary data produced by `(W*, phi*)` through the boundary relations
    /// written in `X`.
    pub fn boundary_data(&self, frame: &OperatorFrame) -> BoundaryData {
        let g = frame.grid;
        let mut d = BoundaryData::zeros(&g);
        for m in 0..=g.nt {
            for j in 0..g.n2 {
                for k in 0..g.n3 {
                    let y = Self::point(&g, m, 0, j, k);
                    let dp = point_partials(|z| [self.exact_phi(z)], y, ORACLE_STEP);
                    let mut x1 = [0.0; 2];
                    for (idx, plus) in [true, false].into_iter().enumerate() {
                        let u = frame.state(plus, m, 0, j, k);
                        let gr = frame.grad.get(plus).at(m, 0, j, k);
                        let x = x_from_w(&self.exact_w(plus, g.x1_max, y), &u, gr[2], gr[3]);
                        d.h1.get_mut(plus)[[m, j, k]] = dp[0][0] - x[V1] + u[V2] * dp[2][0] + u[V3] * dp[3][0];
                        d.h2.get_mut(plus)[[m, j, k]] = x[H1] - u[H2] * dp[2][0] - u[H3] * dp[3][0];
                        x1[idx] = x[P];
                    }
                    d.h3[[m, j, k]] = x1[0] - x1[1];
                }
            }
        }
        d
    }

    pub fn run(&self, grid: &Grid, opts: &SolveOptions) -> Result<ManufacturedRun> {
        let frame = self.frame(grid)?;
        let forcing = self.forcing(&frame);
        let data = self.boundary_data(&frame);
        let report = solve_linearized(&frame, &forcing, &data, opts)?;
        let g = *grid;
        let cell = g.dt * g.dx1() * g.dx2() * g.dx3();
        let mut we = 0.0;
        for plus in [true, false] {
            for ((m, i, j, k, c), &x) in report.w.get(plus).indexed_iter() {
                let e = x - self.exact_w(plus, g.x1_max, Self::point(&g, m, i, j, k))[c];
                we += cell * e * e;
            }
        }
        let mut pe = 0.0;
        for ((m, j, k), &x) in report.phi.indexed_iter() {
            let e = x - self.exact_phi(Self::point(&g, m, 0, j, k));
            pe += g.dt * g.dx2() * g.dx3() * e * e;
        }
        Ok(ManufacturedRun {
            frame,
            forcing,
            data,
            report,
            w_error: we.sqrt(),
            phi_error: pe.sqrt(),
        })
    }
}

/// Base states of the standard planar scenario.
pub const PLANAR_PLUS: State = [1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0];
pub const PLANAR_MINUS: State = [0.98, 0.0, -0.2, 0.1, 0.0, 0.2, 1.0, 0.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_transform::FrontGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn eos() -> Eos {
        Eos::new(1.4).unwrap()
    }

    proptest! {
        #[test]
        fn j_round_trip(w in prop::array::uniform8(-2.0f64..2.0), u in prop::array::uniform8(-2.0f64..2.0),
                        p in prop::array::uniform2(-1.0f64..1.0)) {
            let x = x_from_w(&w, &u, p[0], p[1]);
            let back = w_from_x(&x, &u, p[0], p[1]);
            let again = x_from_w(&back, &u, p[0], p[1]);
            for c in 0..NCOMP {
                prop_assert!((back[c] - w[c]).abs() <= 1e-13);
                prop_assert!((again[c] - x[c]).abs() <= 1e-13);
            }
            let j = j_matrix(&u, p[0], p[1]);
            prop_assert!((j * to_vec8(&x) - to_vec8(&w)).amax() <= 1e-13);
        }

        #[test]
        fn good_unknown_inverts(v in prop::array::uniform8(-1.0f64..1.0), d in prop::array::uniform8(-1.0f64..1.0),
                                phi in -1.0f64..1.0, s in 0.5f64..2.0) {
            let w = good_unknown_point(&v, phi, s, &d);
            let back = recover_point(&w, phi, s, &d);
            for c in 0..NCOMP {
                prop_assert!((back[c] - v[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn j_transform_examples() {
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let zero = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(x_from_w(&w, &zero, 0.0, 0.0), w);
        let mut u = zero;
        u[H1] = 1.0;
        let mut e5 = [0.0; NCOMP];
        e5[H1] = 1.0;
        assert_eq!(x_from_w(&e5, &u, 0.0, 0.0)[P], 1.0);
    }

    #[test]
    fn decoupling_identity_on_constrained_samples() {
        let e = eos();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (bp, bm) = constrained_boundary_sample(&mut rng);
            let mut xp: State = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mut xm: State = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            xm[P] = xp[P];
            let f = boundary_quadratic_form(&e, &xp, &xm, &bp, &bm);
            assert!(f.difference.abs() <= 1e-11 * f.scale, "{f:?}");
            assert!((f.reduced - f.jump_form).abs() <= 1e-12 * f.scale);
            xp[P] = 0.0;
            xm[P] = 0.0;
            let z = boundary_quadratic_form(&e, &xp, &xm, &bp, &bm);
            assert!(z.form.abs() <= 1e-12 * z.scale && z.jump_form == 0.0);
        }
        let (bp, bm) = constrained_boundary_sample(&mut rng);
        let xp = [1.0, 0.3, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0];
        let xm = [0.0, -0.4, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0];
        let f = boundary_quadratic_form(&e, &xp, &xm, &bp, &bm);
        assert!(f.difference.abs() > 1e-3);
    }

    #[test]
    fn p_structure_on_constrained_samples() {
        let e = eos();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (bp, bm) = constrained_boundary_sample(&mut rng);
            assert!(p_block_deviation(&e, &bp).max() < 1e-12);
            assert!(p_block_deviation(&e, &bm).max() < 1e-12);
        }
        let (mut bp, _) = constrained_boundary_sample(&mut rng);
        bp.u[H1] += 1e-2;
        let d = p_block_deviation(&e, &bp);
        assert!(d.a22 > 1e-3 && d.a22 < 1e-1, "{d:?}");
    }

    fn grid(n: usize) -> Grid {
        Grid::new(n, n, 1, 2.0, 2.0 * PI, 1.0, 0.25, 0.45 / (n as f64 * 3.0)).unwrap()
    }

    #[test]
    fn planar_frame_p_check() {
        let g = grid(8);
        let case = ManufacturedCase::new(eos(), PLANAR_PLUS, PLANAR_MINUS);
        let frame = case.frame(&g).unwrap();
        let r = p_transform_check(&frame);
        assert!(r.deviation.max() < 1e-12, "{r:?}");
        assert_eq!(r.eikonal_residual, 0.0);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = grid(8);
        let case = ManufacturedCase::new(eos(), PLANAR_PLUS, PLANAR_MINUS);
        let frame = case.frame(&g).unwrap();
        let f = Pair::new(g.state_field(), g.state_field());
        let r = solve_linearized(&frame, &f, &BoundaryData::zeros(&g), &SolveOptions::default()).unwrap();
        assert!(r.w.plus.iter().chain(r.w.minus.iter()).all(|&x| x == 0.0));
        assert!(r.phi.iter().all(|&x| x == 0.0));
        let er = energy_report(&frame, &r, &f, &BoundaryData::zeros(&g), 0, &[4.0, 8.0]).unwrap();
        assert!(er.vacuous);
    }

    #[test]
    fn manufactured_solution_converges() {
        let case = ManufacturedCase::new(eos(), PLANAR_PLUS, PLANAR_MINUS);
        let errs: Vec<_> = [8usize, 16, 32]
            .iter()
            .map(|&n| case.run(&grid(n), &SolveOptions::default()).unwrap())
            .collect();
        for r in &errs {
            assert!(r.report.boundary_residual < 1e-12);
            assert!(r.report.algebraic_gap.max < 1e-12, "{:?}", r.report.algebraic_gap);
            assert!(r.report.min_det > 0.0);
        }
        let o1 = (errs[0].w_error / errs[1].w_error).log2();
        let o2 = (errs[1].w_error / errs[2].w_error).log2();
        assert!(o1 > 0.6 && o2 > 0.8, "orders {o1} {o2}");
        let g1 = (errs[1].report.gradient_gap.l2 / errs[2].report.gradient_gap.l2).log2();
        assert!(g1 > 0.8, "gap order {g1}");
    }

    #[test]
    fn single_mode_forcing_stays_single_mode() {
        let g = grid(16);
        let case = ManufacturedCase::new(eos(), PLANAR_PLUS, PLANAR_MINUS);
        let frame = case.frame(&g).unwrap();
        let mut f = Pair::new(g.state_field(), g.state_field());
        let k = 3.0;
        for plus in [true, false] {
            Zip::indexed(f.get_mut(plus)).for_each(|(m, i, j, _, c), x| {
                *x = g.t(m) * (1.0 + c as f64) * (-(g.x1(i))).exp() * (k * g.x2(j) + 0.1 * c as f64).sin();
            });
        }
        let r = solve_linearized(&frame, &f, &BoundaryData::zeros(&g), &SolveOptions::default()).unwrap();
        // project on span{cos kx2, sin kx2}
        let mut total = 0.0;
        let mut resid = 0.0;
        for plus in [true, false] {
            for lane in r.w.get(plus).lanes(Axis(2)) {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..g.n2 {
                    a += lane[j] * (k * g.x2(j)).cos() * 2.0 / g.n2 as f64;
                    b += lane[j] * (k * g.x2(j)).sin() * 2.0 / g.n2 as f64;
                }
                for j in 0..g.n2 {
                    let fit = a * (k * g.x2(j)).cos() + b * (k * g.x2(j)).sin();
                    resid += (lane[j] - fit).powi(2);
                    total += lane[j].powi(2);
                }
            }
        }
        assert!(total > 0.0 && resid <= 1e-20 * total.max(1.0), "{resid} {total}");
    }

    #[test]
    fn injected_perturbation_stays_bounded() {
        let case = ManufacturedCase::new(eos(), PLANAR_PLUS, PLANAR_MINUS);
        let mut rates = vec![];
        for n in [8usize, 16] {
            let g = grid(n);
            let frame = case.frame(&g).unwrap();
            let f = Pair::new(g.state_field(), g.state_field());
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let dims = (g.n1 + 1, g.n2, g.n3, NCOMP);
            let inj = Pair::new(
                Array4::from_shape_fn(dims, |_| rng.gen_range(-1e-3..1e-3)),
                Array4::from_shape_fn(dims, |_| rng.gen_range(-1e-3..1e-3)),
            );
            let opts = SolveOptions {
                inject: Some(inj),
                ..SolveOptions::default()
            };
            let r = solve_linearized(&frame, &f, &BoundaryData::zeros(&g), &opts).unwrap();
            rates.push(discrete_growth_rate(&g, &r));
        }
        assert!(rates.iter().all(|&r| r.is_finite() && r < 5.0), "{rates:?}");
    }

    #[test]
    fn linearization_identity_slope() {
        let e = eos();
        let u = |y: [f64; 4]| {
            let mut s = PLANAR_PLUS;
            for c in 0..NCOMP {
                s[c] += 0.05 * (y[2] + 0.3 * c as f64 + y[1] - 0.5 * y[0]).sin();
            }
            s
        };
        let v = |y: [f64; 4]| -> State {
            std::array::from_fn(|c| 0.3 * (y[1] * (c as f64 + 1.0) * 0.5 + y[2]).cos())
        };
        let psi = |y: [f64; 4]| y[1] + 0.1 * y[2].sin() * (-y[1]).exp() + 0.05 * y[0];
        let phi = |y: [f64; 4]| 0.2 * (y[2] + y[1]).sin();
        let steps = [0.1, 0.05, 0.025, 0.0125];
        let r = linearization_identity(&e, 0.3, u, v, psi, phi, [0.1, 0.4, 0.7, 0.0], &steps);
        assert!(r.slope > 1.9, "{r:?}");
    }

    #[test]
    fn boundary_form_sign_of_incoming_mode() {
        let e = eos();
        let g = grid(4);
        let front = FrontGeometry::planar(&g);
        let _ = front;
        for (u, s1) in [(PLANAR_PLUS, 1.0), (PLANAR_MINUS, -1.0)] {
            let a = augmented_matrices(&e, &u, 0.1);
            let mats = lbar(&a, [0.0, s1, 0.0, 0.0]);
            let (speed, r) = incoming_mode(&mats[0], &mats[1]).unwrap();
            assert!(speed > 0.0);
            let rr = (mats[1] * r - mats[0] * r * speed).amax();
            assert!(rr < 1e-10);
        }
    }
}
