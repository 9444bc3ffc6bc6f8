//! Nash-Moser-Hörmander iteration around the approximate solution:
//! modified states, effective linear solves, front increments, error
//! bookkeeping and convergence monitoring.
//!
//! Error fields are only meaningful on interior x1 rows, since the linear
//! solver replaces the end rows by its boundary closure. Before smoothing,
//! the end rows of every volume error are overwritten by linear
//! extrapolation from the interior.

use std::time::Instant;

use ndarray::{s, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::approx_solution::ApproxSolution;
use crate::eos_state::{BoundaryField, Grid, Pair, ScalarField, StateField, H1, H2, H3, V1, V2, V3};
use crate::error::{CvsError, Result};
use crate::function_spaces::{boundary_norm, lift_profile, theta_schedule, AnisotropicNorm, Smoother, X1Range};
use crate::geometry_transform::OperatorFrame;
use crate::linearized_solver::{loglog_slope, recover_increment, solve_linearized, BoundaryData, SolveOptions};
use crate::stencil::{d1, forward_diff, AxisKind};

/// Boundary residual field `(m, j, k, component)`, components ordered as
/// `boundary_operator`.
pub type BoundaryVector = Array4<f64>;

pub const NB: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub theta0: f64,
    pub n_max: usize,
    pub s_list: Vec<usize>,
    pub s0: usize,
    pub alpha: usize,
    pub s1: usize,
    /// Weight of the anisotropic norms.
    pub mu: f64,
    /// Consecutive growth steps of the `s0` residual that abort the run.
    pub divergence_window: usize,
    /// Evaluate the individual error terms (three extra linearizations per step).
    pub detailed_errors: bool,
    pub solve: SolveSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    pub cfl_limit: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            theta0: 4.0,
            n_max: 15,
            s_list: vec![2, 4],
            s0: 4,
            alpha: 8,
            s1: 13,
            mu: 0.0,
            divergence_window: 5,
            detailed_errors: true,
            solve: SolveSettings { cfl_limit: 0.45 },
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        theta_schedule(self.theta0, 0)?;
        if !self.s_list.contains(&self.s0) {
            return Err(CvsError::Config(format!("s_list must contain s0 = {}", self.s0)));
        }
        if self.alpha < self.s0 || self.s1 < self.alpha {
            return Err(CvsError::Config("need s0 <= alpha <= s1".into()));
        }
        if self.divergence_window == 0 {
            return Err(CvsError::Config("divergence window must be positive".into()));
        }
        Ok(())
    }
}

/// Reference exponents of the error estimates.
pub mod reference {
    fn pos(x: f64) -> f64 {
        x.max(0.0)
    }

    /// Volume error `e`.
    pub fn l1(s: f64, s0: f64, alpha: f64) -> f64 {
        if alpha == s + 2.0 {
            s0 + 2.0 - alpha
        } else if alpha == s + 4.0 {
            (s0 - alpha).max(2.0 * (s0 - alpha) + 4.0)
        } else {
            (pos(s + 2.0 - alpha) + s0 - alpha - 1.0).max(s + s0 + 4.0 - 2.0 * alpha)
        }
    }

    /// Front error `e-bar`.
    pub fn l2(s: f64, s0: f64, alpha: f64) -> f64 {
        if alpha == s + 2.0 {
            s0 - alpha
        } else if alpha == s + 3.0 {
            s0 - alpha - 1.0
        } else {
            (pos(s + 2.0 - alpha) + 2.0 * (s0 - alpha)).max(s + s0 + 2.0 - 2.0 * alpha)
        }
    }

    /// Boundary error `e-tilde`.
    pub fn l3(s: f64, s0: f64, alpha: f64) -> f64 {
        if alpha == s + 3.0 {
            s0 - alpha
        } else if alpha == s + 4.0 {
            s0 - alpha - 1.0
        } else {
            (pos(s + 3.0 - alpha) + 2.0 * (s0 - alpha)).max(s + s0 + 3.0 - 2.0 * alpha)
        }
    }

    /// Increments and right-hand sides scale like `theta^{s - alpha - 1} Delta`.
    pub fn increment(s: f64, alpha: f64) -> f64 {
        s - alpha - 1.0
    }

    /// Modified state minus smoothed state.
    pub fn modified_state(s: f64, alpha: f64) -> f64 {
        s + 1.0 - alpha
    }
}

pub fn max_abs<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

pub fn pair_add<A>(a: &Pair<A>, b: &Pair<A>) -> Pair<A>
where
    for<'x> &'x A: std::ops::Add<&'x A, Output = A>,
{
    Pair::new(&a.plus + &b.plus, &a.minus + &b.minus)
}

pub fn pair_sub<A>(a: &Pair<A>, b: &Pair<A>) -> Pair<A>
where
    for<'x> &'x A: std::ops::Sub<&'x A, Output = A>,
{
    Pair::new(&a.plus - &b.plus, &a.minus - &b.minus)
}

pub fn pair_scale<A>(a: &Pair<A>, f: f64) -> Pair<A>
where
    for<'x> &'x A: std::ops::Mul<f64, Output = A>,
{
    Pair::new(&a.plus * f, &a.minus * f)
}

fn extrapolate_ends(f: &mut StateField) {
    let n = f.len_of(Axis(1)) - 1;
    if n < 3 {
        return;
    }
    let a = f.index_axis(Axis(1), 1).to_owned();
    let b = f.index_axis(Axis(1), 2).to_owned();
    f.index_axis_mut(Axis(1), 0).assign(&(&a * 2.0 - &b));
    let a = f.index_axis(Axis(1), n - 1).to_owned();
    let b = f.index_axis(Axis(1), n - 2).to_owned();
    f.index_axis_mut(Axis(1), n).assign(&(&a * 2.0 - &b));
}

/// Smoothing of the iteration's field types with one shared filter.
#[derive(Debug)]
pub struct Smoothing {
    pub smoother: Smoother,
    pub lift_width: f64,
}

impl Smoothing {
    pub fn new(grid: &Grid, lift_width: f64) -> Self {
        Self {
            smoother: Smoother::new(grid),
            lift_width,
        }
    }

    pub fn state(&self, v: &Pair<StateField>, theta: f64) -> Pair<StateField> {
        v.map(|f| self.smoother.state(f, theta))
    }

    /// Trace-preserving smoothing for front lifts and front-type errors.
    pub fn front(&self, v: &Pair<ScalarField>, theta: f64) -> Pair<ScalarField> {
        v.map(|f| self.smoother.front(f, theta, self.lift_width))
    }

    pub fn boundary(&self, v: &BoundaryField, theta: f64) -> BoundaryField {
        self.smoother.boundary(v, theta)
    }

    pub fn boundary_vector(&self, v: &BoundaryVector, theta: f64) -> BoundaryVector {
        let mut out = v.clone();
        for c in 0..v.len_of(Axis(3)) {
            let comp = v.index_axis(Axis(3), c).to_owned();
            out.index_axis_mut(Axis(3), c).assign(&self.smoother.boundary(&comp, theta));
        }
        out
    }
}

/// `V^{n+1/2}` together with the smoothed front it was built on.
#[derive(Debug, Clone)]
pub struct ModifiedState {
    pub v: Pair<StateField>,
    pub smoothed_v: Pair<StateField>,
    pub phi: Pair<ScalarField>,
    pub phi_b: BoundaryField,
    /// `max |B_{1,2}|` at `x1 = 0` over all levels, relative to `1 + max |U|`.
    pub constraint_residual: f64,
}

/// Smooths `(V, Phi, phi)` and rebuilds `v1` and `H1` so that the first
/// two boundary components vanish on the modified state.
pub fn modified_state(
    approx: &ApproxSolution,
    smoothing: &Smoothing,
    v: &Pair<StateField>,
    phi: &Pair<ScalarField>,
    phi_b: &BoundaryField,
    theta: f64,
) -> ModifiedState {
    let g = *approx.grid();
    let sv = smoothing.state(v, theta);
    let sphi = smoothing.front(phi, theta);
    let sphib = smoothing.boundary(phi_b, theta);
    let mut out = sv.clone();
    for plus in [true, false] {
        let sp = sphi.get(plus);
        let dt = forward_diff(sp, 0, g.dt);
        let q2 = d1(sp, 2, g.dx2(), AxisKind::Periodic);
        let q3 = d1(sp, 3, g.dx3(), AxisKind::Periodic);
        let ga = approx.frame.grad.get(plus);
        let ua = approx.frame.u.get(plus);
        Zip::indexed(out.get_mut(plus).lanes_mut(Axis(4))).for_each(|(m, i, j, k), mut l| {
            let ix = [m, i, j, k];
            let a = |c: usize| ua[[m, i, j, k, c]];
            let p2 = ga.d2[ix] + q2[ix];
            let p3 = ga.d3[ix] + q3[ix];
            l[V1] = dt[ix] + p2 * l[V2] + p3 * l[V3] + a(V2) * q2[ix] + a(V3) * q3[ix];
            l[H1] = p2 * l[H2] + p3 * l[H3] + a(H2) * q2[ix] + a(H3) * q3[ix];
        });
    }
    let b = approx.boundary_residual(&out, &sphib);
    let scale = 1.0 + max_abs(approx.frame.u.plus.iter().chain(approx.frame.u.minus.iter()));
    let mut res: f64 = 0.0;
    for ((_, _, _, c), &x) in b.indexed_iter() {
        if c < 4 {
            res = res.max(x.abs());
        }
    }
    ModifiedState {
        v: out,
        smoothed_v: sv,
        phi: sphi,
        phi_b: sphib,
        constraint_residual: res / scale,
    }
}

/// `d/de calL(V + e W, Phi + e Theta)` by a central difference whose step
/// is `1e-4` in absolute amplitude.
pub fn linearized_residual(
    approx: &ApproxSolution,
    v: &Pair<StateField>,
    phi: &Pair<ScalarField>,
    w: &Pair<StateField>,
    theta: &Pair<ScalarField>,
) -> Result<Pair<StateField>> {
    let amp = max_abs(w.plus.iter().chain(w.minus.iter()).chain(theta.plus.iter()).chain(theta.minus.iter()));
    if amp == 0.0 {
        let g = approx.grid();
        return Ok(Pair::new(g.state_field(), g.state_field()));
    }
    let eps = 1e-4 / amp;
    let rp = approx.interior_residual(&pair_add(v, &pair_scale(w, eps)), &pair_add(phi, &pair_scale(theta, eps)))?;
    let rm = approx.interior_residual(&pair_sub(v, &pair_scale(w, eps)), &pair_sub(phi, &pair_scale(theta, eps)))?;
    Ok(pair_scale(&pair_sub(&rp, &rm), 0.5 / eps))
}

/// `B'` at `(V, phi)`; exact because the boundary operator is quadratic.
pub fn linearized_boundary(
    approx: &ApproxSolution,
    v: &Pair<StateField>,
    phi: &BoundaryField,
    w: &Pair<StateField>,
    theta: &BoundaryField,
) -> BoundaryVector {
    let a = approx.boundary_residual(&pair_add(v, w), &(phi + theta));
    let b = approx.boundary_residual(&pair_sub(v, w), &(phi - theta));
    (a - b) * 0.5
}

/// Closed form of the linearized eikonal operator at `(V, Phi)`.
pub fn linearized_eikonal(
    approx: &ApproxSolution,
    v: &Pair<StateField>,
    phi: &Pair<ScalarField>,
    w: &Pair<StateField>,
    theta: &Pair<ScalarField>,
) -> Pair<ScalarField> {
    let g = *approx.grid();
    let one = |plus: bool| {
        let th = theta.get(plus);
        let ph = phi.get(plus);
        let ga = approx.frame.grad.get(plus);
        let ua = approx.frame.u.get(plus);
        let (vv, ww) = (v.get(plus), w.get(plus));
        let tt = forward_diff(th, 0, g.dt);
        let t2 = d1(th, 2, g.dx2(), AxisKind::Periodic);
        let t3 = d1(th, 3, g.dx3(), AxisKind::Periodic);
        let p2 = d1(ph, 2, g.dx2(), AxisKind::Periodic);
        let p3 = d1(ph, 3, g.dx3(), AxisKind::Periodic);
        let mut out = g.scalar_field();
        Zip::indexed(&mut out).for_each(|(m, i, j, k), x| {
            let ix = [m, i, j, k];
            let wc = |c: usize| ww[[m, i, j, k, c]];
            let uc = |c: usize| ua[[m, i, j, k, c]] + vv[[m, i, j, k, c]];
            *x = tt[ix] - wc(V1)
                + (ga.d2[ix] + p2[ix]) * wc(V2)
                + (ga.d3[ix] + p3[ix]) * wc(V3)
                + uc(V2) * t2[ix]
                + uc(V3) * t3[ix];
        });
        out
    };
    Pair::new(one(true), one(false))
}

/// Closed form of the quadratic front error `d2(dPhi) dV_2 + d3(dPhi) dV_3`.
pub fn front_newton_error(grid: &Grid, dv: &Pair<StateField>, dphi: &Pair<ScalarField>) -> Pair<ScalarField> {
    let one = |plus: bool| {
        let ph = dphi.get(plus);
        let p2 = d1(ph, 2, grid.dx2(), AxisKind::Periodic);
        let p3 = d1(ph, 3, grid.dx3(), AxisKind::Periodic);
        let w = dv.get(plus);
        let mut out = grid.scalar_field();
        Zip::indexed(&mut out).for_each(|(m, i, j, k), x| {
            *x = p2[[m, i, j, k]] * w[[m, i, j, k, V2]] + p3[[m, i, j, k]] * w[[m, i, j, k, V3]];
        });
        out
    };
    Pair::new(one(true), one(false))
}

fn boundary_data_from(g: &BoundaryVector) -> BoundaryData {
    let c = |i: usize| g.index_axis(Axis(3), i).to_owned();
    BoundaryData {
        h1: Pair::new(c(0), c(1)),
        h2: Pair::new(c(2), c(3)),
        h3: c(4),
    }
}

/// Effective linear solve on the frame of the modified state.
pub fn effective_solve(
    frame: &OperatorFrame,
    f: &Pair<StateField>,
    g: &BoundaryVector,
    settings: &SolveSettings,
) -> Result<(Pair<StateField>, BoundaryField)> {
    let opts = SolveOptions {
        cfl_limit: settings.cfl_limit,
        ..SolveOptions::default()
    };
    let rep = solve_linearized(frame, f, &boundary_data_from(g), &opts)?;
    Ok((rep.w, rep.phi))
}

#[derive(Debug, Clone)]
pub struct FrontIncrement {
    pub dphi: Pair<ScalarField>,
    /// `max |dPhi+- (x1 = 0) - dphi|` before the trace correction.
    pub trace_gap: f64,
    /// Discrete L2 norm of the same gap over the boundary.
    pub trace_gap_l2: f64,
}

/// Forward transport of the linearized eikonal equation with source `h`,
/// followed by a cutoff correction that makes both traces equal `dphi_b`.
pub fn front_increment_solve(
    approx: &ApproxSolution,
    modified: &ModifiedState,
    dv_dot: &Pair<StateField>,
    h: &Pair<ScalarField>,
    dphi_b: &BoundaryField,
) -> Result<FrontIncrement> {
    let g = *approx.grid();
    let kinds = [AxisKind::Periodic, AxisKind::Periodic];
    let mut out = Pair::new(g.scalar_field(), g.scalar_field());
    let mut gap: f64 = 0.0;
    let mut gap_l2 = 0.0;
    for plus in [true, false] {
        let ph = modified.phi.get(plus);
        let ga = approx.frame.grad.get(plus);
        let p2 = &ga.d2 + &d1(ph, 2, g.dx2(), kinds[0]);
        let p3 = &ga.d3 + &d1(ph, 3, g.dx3(), kinds[1]);
        let ua = approx.frame.u.get(plus);
        let vh = modified.v.get(plus);
        let w = dv_dot.get(plus);
        let src = h.get(plus);
        let th = out.get_mut(plus);
        for m in 0..g.nt {
            let cur = th.index_axis(Axis(0), m).to_owned();
            let c2 = d1(&cur, 1, g.dx2(), kinds[0]);
            let c3 = d1(&cur, 2, g.dx3(), kinds[1]);
            let mut next = cur.clone();
            Zip::indexed(&mut next).for_each(|(i, j, k), x| {
                let ix = [m, i, j, k];
                let wc = |c: usize| w[[m, i, j, k, c]];
                let uc = |c: usize| ua[[m, i, j, k, c]] + vh[[m, i, j, k, c]];
                let rate = src[ix] + wc(V1) - p2[ix] * wc(V2) - p3[ix] * wc(V3)
                    - uc(V2) * c2[[i, j, k]]
                    - uc(V3) * c3[[i, j, k]];
                *x += g.dt * rate;
            });
            th.index_axis_mut(Axis(0), m + 1).assign(&next);
        }
        if !th.iter().all(|x| x.is_finite()) {
            return Err(CvsError::Diverged {
                step: 0,
                reason: "front increment blew up".into(),
            });
        }
        let chi: Vec<f64> = (0..=g.n1).map(|i| lift_profile(g.x1(i) / approx.params.lift_width)).collect();
        let trace = th.slice(s![.., 0, .., ..]).to_owned();
        for ((m, j, k), &x) in trace.indexed_iter() {
            let d = dphi_b[[m, j, k]] - x;
            gap = gap.max(d.abs());
            let wt = if m == 0 || m == g.nt { 0.5 } else { 1.0 } * g.dt * g.dx2() * g.dx3();
            gap_l2 += wt * d * d;
        }
        Zip::indexed(th).for_each(|(m, i, j, k), x| {
            *x += chi[i] * (dphi_b[[m, j, k]] - trace[[m, j, k]]);
        });
    }
    Ok(FrontIncrement {
        dphi: out,
        trace_gap: gap,
        trace_gap_l2: (0.5 * gap_l2).sqrt(),
    })
}

/// Error split of one step. Volume errors are per phase, front errors are
/// scalar volume fields and boundary errors carry the five components.
#[derive(Debug, Clone)]
pub struct StepErrors {
    pub e: [Pair<StateField>; 4],
    pub e_bar: [Pair<ScalarField>; 4],
    pub e_tilde: [BoundaryVector; 4],
    /// Mismatch left by the trace correction of the front increment.
    pub front_trace: Pair<ScalarField>,
    /// Closed-form value of the remaining volume error, for comparison.
    pub e4_closed_form: Pair<StateField>,
}

impl StepErrors {
    pub fn total_e(&self) -> Pair<StateField> {
        let mut t = self.e[0].clone();
        for x in &self.e[1..] {
            t = pair_add(&t, x);
        }
        t
    }

    /// Sum of the four front errors. The trace-correction mismatch is kept
    /// apart: it has no boundary counterpart, and feeding it back would break
    /// the agreement between the trace of `h_n` and `g_n`.
    pub fn total_e_bar(&self) -> Pair<ScalarField> {
        let mut t = self.e_bar[0].clone();
        for x in &self.e_bar[1..] {
            t = pair_add(&t, x);
        }
        t
    }

    pub fn total_e_tilde(&self) -> BoundaryVector {
        self.e_tilde.iter().skip(1).fold(self.e_tilde[0].clone(), |a, b| a + b)
    }
}

/// Per-step record of norms and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub n: usize,
    pub theta: f64,
    pub delta: f64,
    /// Norm tables indexed like `s_list`.
    pub dv_norm: Vec<f64>,
    pub dphi_norm: Vec<f64>,
    pub dphib_norm: Vec<f64>,
    /// `||calL(V^{n+1}) V^{n+1} - f_a||_s` over interior rows.
    pub residual: Vec<f64>,
    /// `||calB(V^{n+1}, phi^{n+1})||_{H^{s-1}}`.
    pub boundary_residual: Vec<f64>,
    pub e_norm: Vec<f64>,
    pub e_bar_norm: Vec<f64>,
    pub e_tilde_norm: Vec<f64>,
    /// `||V^{n+1/2} - S V^n||_s`.
    pub modified_gap: Vec<f64>,
    pub modified_constraint: f64,
    pub telescoping_f: f64,
    pub telescoping_g: f64,
    pub telescoping_h: f64,
    /// `max |e_bar^(3)|`; zero by construction.
    pub e_bar3_max: f64,
    /// `max |e^(4) - closed form|` relative to `max |e^(4)|`.
    pub e4_commutator: f64,
    pub trace_gap: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub reference: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub residual_ratio: f64,
    pub converged: bool,
    /// Fit of `log ||residual||_{s0}` against `log theta`.
    pub residual_fit: Option<Fit>,
    /// Fit of `log (||dV||_{s0} / Delta)` against `log theta` over `n >= 1`.
    pub increment_fit: Option<Fit>,
    pub within_band: bool,
    pub aborted: Option<String>,
}

/// Iterates, accumulated errors and right-hand sides.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub n: usize,
    pub v: Pair<StateField>,
    pub phi: Pair<ScalarField>,
    pub phi_b: BoundaryField,
    pub theta: f64,
    pub delta: f64,
    /// `E_n = sum_{k < n} e_k` and the two companions.
    pub acc_e: Pair<StateField>,
    pub acc_e_bar: Pair<ScalarField>,
    pub acc_e_tilde: BoundaryVector,
    /// Running sums of the right-hand sides.
    pub sum_f: Pair<StateField>,
    pub sum_g: BoundaryVector,
    pub sum_h: Pair<ScalarField>,
    pub history: Vec<StepRecord>,
    /// `calL(V^n) V^n - f_a` on the current iterate.
    residual: Pair<StateField>,
    prev: Option<PrevSmoothed>,
}

#[derive(Debug, Clone)]
struct PrevSmoothed {
    f_a: Pair<StateField>,
    acc_e: Pair<StateField>,
    acc_e_bar: Pair<ScalarField>,
    acc_e_tilde: BoundaryVector,
}

impl IterationState {
    pub fn new(approx: &ApproxSolution, theta0: f64) -> Result<Self> {
        let g = approx.grid();
        let (theta, delta) = theta_schedule(theta0, 0)?;
        let zs = Pair::new(g.state_field(), g.state_field());
        let zf = Pair::new(g.scalar_field(), g.scalar_field());
        let zb = Array4::<f64>::zeros((g.nt + 1, g.n2, g.n3, NB));
        Ok(Self {
            n: 0,
            v: zs.clone(),
            phi: zf.clone(),
            phi_b: g.boundary_field(),
            theta,
            delta,
            acc_e: zs.clone(),
            acc_e_bar: zf.clone(),
            acc_e_tilde: zb.clone(),
            sum_f: zs.clone(),
            sum_g: zb,
            sum_h: zf,
            history: Vec::new(),
            residual: approx.interior_residual(&zs, &Pair::new(g.scalar_field(), g.scalar_field()))?,
            prev: None,
        })
    }

    /// Largest `|iterate|` at `t = 0`.
    pub fn past_max(&self) -> f64 {
        let a = max_abs(self.v.plus.index_axis(Axis(0), 0).iter().chain(self.v.minus.index_axis(Axis(0), 0).iter()));
        let b = max_abs(self.phi.plus.index_axis(Axis(0), 0).iter().chain(self.phi.minus.index_axis(Axis(0), 0).iter()));
        a.max(b)
    }

    /// Largest `|Phi+-(x1 = 0) - phi|`.
    pub fn trace_coupling(&self) -> f64 {
        let mut r: f64 = 0.0;
        for plus in [true, false] {
            let tr = self.phi.get(plus).slice(s![.., 0, .., ..]).to_owned();
            r = r.max(max_abs((&tr - &self.phi_b).iter()));
        }
        r
    }
}

/// Right-hand sides of step `n` and the smoothed quantities reused at `n + 1`.
#[derive(Debug, Clone)]
pub struct RhsTriple {
    pub f: Pair<StateField>,
    pub g: BoundaryVector,
    pub h: Pair<ScalarField>,
}

/// `f_n = (S_n - S_{n-1}) f_a - (S_n E_{n-1} - S_{n-1} E_{n-2})`, and
/// likewise for `g`, `h` without the `f_a` term; `n = 0` gives `(S_0 f_a, 0, 0)`.
pub fn rhs_recursion(
    approx: &ApproxSolution,
    smoothing: &Smoothing,
    state: &mut IterationState,
) -> RhsTriple {
    let th = state.theta;
    let sfa = smoothing.state(&approx.f_a, th);
    let se = smoothing.state(&state.acc_e, th);
    let seb = smoothing.front(&state.acc_e_bar, th);
    let set = smoothing.boundary_vector(&state.acc_e_tilde, th);
    let out = match &state.prev {
        None => RhsTriple {
            f: sfa.clone(),
            g: Array4::zeros(state.acc_e_tilde.raw_dim()),
            h: Pair::new(seb.plus.mapv(|_| 0.0), seb.minus.mapv(|_| 0.0)),
        },
        Some(p) => RhsTriple {
            f: pair_sub(&pair_sub(&sfa, &p.f_a), &pair_sub(&se, &p.acc_e)),
            g: &p.acc_e_tilde - &set,
            h: pair_sub(&p.acc_e_bar, &seb),
        },
    };
    state.prev = Some(PrevSmoothed {
        f_a: sfa,
        acc_e: se,
        acc_e_bar: seb,
        acc_e_tilde: set,
    });
    out
}

/// Residuals of the three telescoping identities after adding step `n`'s
/// right-hand sides, relative to `max |f_a|`.
pub fn telescoping_residuals(approx: &ApproxSolution, smoothing: &Smoothing, state: &IterationState) -> (f64, f64, f64) {
    let th = state.theta;
    let scale = max_abs(approx.f_a.plus.iter().chain(approx.f_a.minus.iter())).max(f64::MIN_POSITIVE);
    let sfa = smoothing.state(&approx.f_a, th);
    let se = smoothing.state(&state.acc_e, th);
    let r = pair_sub(&pair_add(&state.sum_f, &se), &sfa);
    let rf = max_abs(r.plus.iter().chain(r.minus.iter())) / scale;
    let rg = max_abs((&state.sum_g + &smoothing.boundary_vector(&state.acc_e_tilde, th)).iter()) / scale;
    let rh = pair_add(&state.sum_h, &smoothing.front(&state.acc_e_bar, th));
    let rh = max_abs(rh.plus.iter().chain(rh.minus.iter())) / scale;
    (rf, rg, rh)
}

fn state_norm(grid: &Grid, f: &Pair<StateField>, s: usize, mu: f64) -> Result<f64> {
    let nrm = AnisotropicNorm::new(s, mu)?;
    let r = X1Range::interior(grid);
    Ok(nrm.eval_state(grid, &f.plus, r)?.hypot(nrm.eval_state(grid, &f.minus, r)?))
}

fn scalar_norm(grid: &Grid, f: &Pair<ScalarField>, s: usize, mu: f64) -> Result<f64> {
    let nrm = AnisotropicNorm::new(s, mu)?;
    let r = X1Range::interior(grid);
    Ok(nrm.eval_scalar(grid, &f.plus, r)?.hypot(nrm.eval_scalar(grid, &f.minus, r)?))
}

fn boundary_vector_norm(grid: &Grid, b: &BoundaryVector, s: usize, mu: f64) -> f64 {
    (0..b.len_of(Axis(3)))
        .map(|c| boundary_norm(grid, &b.index_axis(Axis(3), c).to_owned(), s, mu).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Everything one step produces besides the updated state.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub modified: ModifiedState,
    pub rhs: RhsTriple,
    pub dv_dot: Pair<StateField>,
    pub dv: Pair<StateField>,
    pub dphi: Pair<ScalarField>,
    pub dphi_b: BoundaryField,
    pub errors: StepErrors,
    pub record: StepRecord,
}

/// One full iteration step `n -> n + 1`.
pub fn iterate_step(
    approx: &ApproxSolution,
    smoothing: &Smoothing,
    cfg: &IterationConfig,
    state: &mut IterationState,
) -> Result<StepOutput> {
    let clock = Instant::now();
    let g = *approx.grid();
    let kappa = approx.params.kappa_min;
    let (theta, delta) = theta_schedule(cfg.theta0, state.n)?;
    state.theta = theta;
    state.delta = delta;

    let rhs = rhs_recursion(approx, smoothing, state);
    state.sum_f = pair_add(&state.sum_f, &rhs.f);
    state.sum_g = &state.sum_g + &rhs.g;
    state.sum_h = pair_add(&state.sum_h, &rhs.h);
    let (tf, tg, th) = telescoping_residuals(approx, smoothing, state);

    let modified = modified_state(approx, smoothing, &state.v, &state.phi, &state.phi_b, theta);
    let frame = approx.shifted_frame(&modified.v, &modified.phi)?;
    let (dv_dot, dphi_b) = effective_solve(&frame, &rhs.f, &rhs.g, &cfg.solve)?;
    let front = front_increment_solve(approx, &modified, &dv_dot, &rhs.h, &dphi_b)?;
    let dphi = front.dphi;
    let dv = Pair::new(
        recover_increment(&frame, true, &dv_dot.plus, &dphi.plus, kappa)?,
        recover_increment(&frame, false, &dv_dot.minus, &dphi.minus, kappa)?,
    );

    let v1 = pair_add(&state.v, &dv);
    let phi1 = pair_add(&state.phi, &dphi);
    let phib1 = &state.phi_b + &dphi_b;
    let res1 = approx.interior_residual(&v1, &phi1)?;

    // volume errors
    let le = Pair::new(
        &frame.apply_l(true, &dv_dot.plus) + &frame.apply_e(true, &dv_dot.plus),
        &frame.apply_l(false, &dv_dot.minus) + &frame.apply_e(false, &dv_dot.minus),
    );
    let jump = pair_sub(&res1, &state.residual);
    let zero_s = Pair::new(g.state_field(), g.state_field());
    let (mut e, e4_cf) = if cfg.detailed_errors {
        let ln = linearized_residual(approx, &state.v, &state.phi, &dv, &dphi)?;
        let ls = linearized_residual(approx, &modified.smoothed_v, &modified.phi, &dv, &dphi)?;
        let lh = linearized_residual(approx, &modified.v, &modified.phi, &dv, &dphi)?;
        let base = Pair::new(frame.self_residual(true), frame.self_residual(false));
        let mut cf = zero_s.clone();
        for plus in [true, false] {
            let dx = d1(base.get(plus), 1, g.dx1(), AxisKind::Bounded);
            let gr = frame.grad.get(plus);
            let ph = dphi.get(plus);
            Zip::indexed(cf.get_mut(plus)).for_each(|(m, i, j, k, c), x| {
                *x = ph[[m, i, j, k]] / gr.d1[[m, i, j, k]] * dx[[m, i, j, k, c]];
            });
        }
        (
            [pair_sub(&jump, &ln), pair_sub(&ln, &ls), pair_sub(&ls, &lh), pair_sub(&lh, &le)],
            cf,
        )
    } else {
        (
            [pair_sub(&jump, &le), zero_s.clone(), zero_s.clone(), zero_s.clone()],
            zero_s.clone(),
        )
    };
    for term in e.iter_mut() {
        for plus in [true, false] {
            extrapolate_ends(term.get_mut(plus));
        }
    }
    let e4_commutator = {
        let d = pair_sub(&e[3], &e4_cf);
        let scale = max_abs(e[3].plus.iter().chain(e[3].minus.iter())).max(f64::MIN_POSITIVE);
        if cfg.detailed_errors {
            max_abs(d.plus.iter().chain(d.minus.iter())) / scale
        } else {
            0.0
        }
    };

    // front errors
    let eb1 = front_newton_error(&g, &dv, &dphi);
    let en = linearized_eikonal(approx, &state.v, &state.phi, &dv, &dphi);
    let es = linearized_eikonal(approx, &modified.smoothed_v, &modified.phi, &dv, &dphi);
    let eh = linearized_eikonal(approx, &modified.v, &modified.phi, &dv, &dphi);
    let eh_dot = linearized_eikonal(approx, &modified.v, &modified.phi, &dv_dot, &dphi);
    let front_trace = pair_sub(&eh_dot, &rhs.h);
    let e_bar = [eb1, pair_sub(&en, &es), pair_sub(&es, &eh), pair_sub(&eh, &eh_dot)];
    let e_bar3_max = max_abs(e_bar[2].plus.iter().chain(e_bar[2].minus.iter()));

    // boundary errors
    let b0 = approx.boundary_residual(&state.v, &state.phi_b);
    let b1 = approx.boundary_residual(&v1, &phib1);
    let bn = linearized_boundary(approx, &state.v, &state.phi_b, &dv, &dphi_b);
    let bs = linearized_boundary(approx, &modified.smoothed_v, &modified.phi_b, &dv, &dphi_b);
    let bh = linearized_boundary(approx, &modified.v, &modified.phi_b, &dv, &dphi_b);
    let bh_dot = linearized_boundary(approx, &modified.v, &modified.phi_b, &dv_dot, &dphi_b);
    let e_tilde = [&b1 - &b0 - &bn, &bn - &bs, &bs - &bh, &bh - &bh_dot];

    let errors = StepErrors {
        e,
        e_bar,
        e_tilde,
        front_trace,
        e4_closed_form: e4_cf,
    };
    state.acc_e = pair_add(&state.acc_e, &errors.total_e());
    state.acc_e_bar = pair_add(&state.acc_e_bar, &errors.total_e_bar());
    state.acc_e_tilde = &state.acc_e_tilde + &errors.total_e_tilde();

    let mu = cfg.mu;
    let mut rec = StepRecord {
        n: state.n,
        theta,
        delta,
        dv_norm: vec![],
        dphi_norm: vec![],
        dphib_norm: vec![],
        residual: vec![],
        boundary_residual: vec![],
        e_norm: vec![],
        e_bar_norm: vec![],
        e_tilde_norm: vec![],
        modified_gap: vec![],
        modified_constraint: modified.constraint_residual,
        telescoping_f: tf,
        telescoping_g: tg,
        telescoping_h: th,
        e_bar3_max,
        e4_commutator,
        trace_gap: front.trace_gap,
        wall_time: 0.0,
    };
    let te = errors.total_e();
    let teb = errors.total_e_bar();
    let tet = errors.total_e_tilde();
    let mgap = pair_sub(&modified.v, &modified.smoothed_v);
    for &s in &cfg.s_list {
        rec.dv_norm.push(state_norm(&g, &dv, s, mu)?);
        rec.dphi_norm.push(scalar_norm(&g, &dphi, s, mu)?);
        rec.dphib_norm.push(boundary_norm(&g, &dphi_b, s.saturating_sub(1), mu));
        rec.residual.push(state_norm(&g, &res1, s, mu)?);
        rec.boundary_residual.push(boundary_vector_norm(&g, &b1, s.saturating_sub(1), mu));
        rec.e_norm.push(state_norm(&g, &te, s, mu)?);
        rec.e_bar_norm.push(scalar_norm(&g, &teb, s, mu)?);
        rec.e_tilde_norm.push(boundary_vector_norm(&g, &tet, s, mu));
        rec.modified_gap.push(state_norm(&g, &mgap, s, mu)?);
    }
    for x in rec
        .dv_norm
        .iter()
        .chain(&rec.residual)
        .chain(&rec.e_norm)
        .chain(&rec.boundary_residual)
    {
        if !x.is_finite() {
            return Err(CvsError::Diverged {
                step: state.n,
                reason: "non-finite norm".into(),
            });
        }
    }

    state.v = v1;
    state.phi = phi1;
    state.phi_b = phib1;
    state.residual = res1;
    state.n += 1;
    rec.wall_time = clock.elapsed().as_secs_f64();
    state.history.push(rec.clone());
    Ok(StepOutput {
        modified,
        rhs,
        dv_dot,
        dv,
        dphi,
        dphi_b,
        errors,
        record: rec,
    })
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct IterationRun {
    pub state: IterationState,
    pub initial_residual: Vec<f64>,
    pub report: ConvergenceReport,
}

/// `||f_a||_s` for every configured `s`: the residual of the zero iterate.
pub fn initial_residuals(approx: &ApproxSolution, cfg: &IterationConfig) -> Result<Vec<f64>> {
    cfg.s_list
        .iter()
        .map(|&s| state_norm(approx.grid(), &approx.f_a, s, cfg.mu))
        .collect()
}

pub fn run_iteration(
    approx: &ApproxSolution,
    cfg: &IterationConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<IterationRun> {
    cfg.validate()?;
    let smoothing = Smoothing::new(approx.grid(), approx.params.lift_width);
    let mut state = IterationState::new(approx, cfg.theta0)?;
    let initial = initial_residuals(approx, cfg)?;
    let i0 = cfg.s_list.iter().position(|&s| s == cfg.s0).unwrap_or(0);
    let mut aborted = None;
    let mut growth = 0usize;
    let mut last = initial[i0];
    for _ in 0..cfg.n_max {
        match iterate_step(approx, &smoothing, cfg, &mut state) {
            Ok(out) => {
                on_step(&out.record);
                let r = out.record.residual[i0];
                growth = if r > last { growth + 1 } else { 0 };
                last = r;
                if growth >= cfg.divergence_window {
                    aborted = Some(format!(
                        "s0 residual grew for {growth} consecutive steps (last {r:.3e} at n = {})",
                        out.record.n
                    ));
                    break;
                }
            }
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
    }
    let report = convergence_report(&state.history, initial[i0], i0, cfg, aborted);
    Ok(IterationRun {
        state,
        initial_residual: initial,
        report,
    })
}

/// Fits over the step history; `i0` indexes `s0` in the norm tables.
pub fn convergence_report(
    history: &[StepRecord],
    initial_residual: f64,
    i0: usize,
    cfg: &IterationConfig,
    aborted: Option<String>,
) -> ConvergenceReport {
    let final_residual = history.last().map_or(initial_residual, |r| r.residual[i0]);
    let ratio = if initial_residual > 0.0 { final_residual / initial_residual } else { 0.0 };
    let fit = |pts: Vec<(f64, f64)>, reference: f64| {
        let pts: Vec<(f64, f64)> = pts.into_iter().filter(|p| p.1 > 0.0 && p.1.is_finite()).collect();
        if pts.len() < 3 {
            return None;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        Some(Fit {
            slope: loglog_slope(&x, &y),
            reference,
            points: x.len(),
        })
    };
    let reference = reference::increment(cfg.s0 as f64, cfg.alpha as f64);
    // residual after step n sits at theta_{n+1}
    let residual_fit = fit(
        history
            .iter()
            .map(|r| ((r.theta + r.delta), r.residual[i0]))
            .collect(),
        reference,
    );
    let increment_fit = fit(
        history
            .iter()
            .filter(|r| r.n >= 1)
            .map(|r| (r.theta, r.dv_norm[i0] / r.delta))
            .collect(),
        reference,
    );
    let within_band = increment_fit
        .as_ref()
        .is_some_and(|f| (f.slope - f.reference).abs() <= 1.0);
    ConvergenceReport {
        initial_residual,
        final_residual,
        residual_ratio: ratio,
        converged: aborted.is_none() && ratio <= 0.1,
        residual_fit,
        increment_fit,
        within_band,
        aborted,
    }
}

/// `log ||e1(t)||` against `log t` for the Newton error of scaled increments.
pub fn newton_quadraticity(
    approx: &ApproxSolution,
    v: &Pair<StateField>,
    phi: &Pair<ScalarField>,
    dv: &Pair<StateField>,
    dphi: &Pair<ScalarField>,
    scales: &[f64],
) -> Result<f64> {
    let base = approx.interior_residual(v, phi)?;
    let lin = linearized_residual(approx, v, phi, dv, dphi)?;
    let mut vals = Vec::new();
    for &t in scales {
        let r = approx.interior_residual(&pair_add(v, &pair_scale(dv, t)), &pair_add(phi, &pair_scale(dphi, t)))?;
        let mut e1 = pair_sub(&pair_sub(&r, &base), &pair_scale(&lin, t));
        for plus in [true, false] {
            extrapolate_ends(e1.get_mut(plus));
        }
        vals.push(max_abs(e1.plus.iter().chain(e1.minus.iter())));
    }
    Ok(loglog_slope(scales, &vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx_solution::tests_support::{build, grid};
    use rand::{Rng, SeedableRng};

    fn random_like<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, amp: f64, seed: u64) -> ndarray::Array<f64, D> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        a.mapv(|_| amp * rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn reference_exponents_match_case_table() {
        // (s0, alpha) = (4, 8)
        assert_eq!(reference::l1(4.0, 4.0, 8.0), -4.0);
        assert_eq!(reference::l1(6.0, 4.0, 8.0), -2.0);
        assert_eq!(reference::l1(2.0, 4.0, 8.0), -5.0);
        assert_eq!(reference::l2(5.0, 4.0, 8.0), -5.0);
        assert_eq!(reference::l3(4.0, 4.0, 8.0), -5.0);
        assert_eq!(reference::increment(4.0, 8.0), -5.0);
        assert_eq!(reference::modified_state(4.0, 8.0), -3.0);
    }

    #[test]
    fn zero_iterate_gives_inherited_constraints() {
        let g = grid(16, 0.2);
        let a = build(&g, 1e-3, 1);
        let sm = Smoothing::new(&g, a.params.lift_width);
        let zs = Pair::new(g.state_field(), g.state_field());
        let zf = Pair::new(g.scalar_field(), g.scalar_field());
        let m = modified_state(&a, &sm, &zs, &zf, &g.boundary_field(), 4.0);
        assert!(m.v.plus.iter().chain(m.v.minus.iter()).all(|&x| x == 0.0));
        assert!(m.constraint_residual < 1e-12);
    }

    #[test]
    fn modified_state_nulls_boundary_constraint() {
        let g = grid(16, 0.2);
        let a = build(&g, 1e-3, 1);
        let sm = Smoothing::new(&g, a.params.lift_width);
        let zs = Pair::new(g.state_field(), g.state_field());
        let v = Pair::new(random_like(&zs.plus, 1e-3, 1), random_like(&zs.minus, 1e-3, 2));
        let phib = random_like(&g.boundary_field(), 1e-3, 3);
        let mut phi = Pair::new(random_like(&g.scalar_field(), 1e-3, 4), random_like(&g.scalar_field(), 1e-3, 5));
        for plus in [true, false] {
            phi.get_mut(plus).slice_mut(s![.., 0, .., ..]).assign(&phib);
        }
        let m = modified_state(&a, &sm, &v, &phi, &phib, 4.0);
        assert!(m.constraint_residual < 1e-10, "{}", m.constraint_residual);
        for c in [V2, V3, H2, H3, 0, 7] {
            let d = &m.v.plus.index_axis(Axis(4), c) - &m.smoothed_v.plus.index_axis(Axis(4), c);
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn band_limited_planar_reconstruction() {
        // planar Psi_a, Phi = 0: the rebuilt v1 and H1 vanish identically
        let g = grid(16, 0.2);
        let a = build(&g, 0.0, 1);
        let sm = Smoothing::new(&g, a.params.lift_width);
        let mut v = Pair::new(g.state_field(), g.state_field());
        Zip::indexed(&mut v.plus).for_each(|(m, i, j, _, c), x| {
            *x = 1e-3 * g.t(m) * (g.x2(j) + c as f64).cos() * (-(g.x1(i) - 1.0).powi(2)).exp();
        });
        let zf = Pair::new(g.scalar_field(), g.scalar_field());
        let m = modified_state(&a, &sm, &v, &zf, &g.boundary_field(), 4.0);
        assert!(max_abs(m.v.plus.index_axis(Axis(4), V1).iter()) < 1e-15);
        assert!(max_abs(m.v.plus.index_axis(Axis(4), H1).iter()) < 1e-15);
    }

    #[test]
    fn front_error_closed_form_matches_difference() {
        let g = grid(8, 0.2);
        let a = build(&g, 1e-3, 1);
        let zs = Pair::new(g.state_field(), g.state_field());
        let zf = Pair::new(g.scalar_field(), g.scalar_field());
        let v = Pair::new(random_like(&zs.plus, 1e-3, 7), random_like(&zs.minus, 1e-3, 8));
        let phi = Pair::new(random_like(&zf.plus, 1e-3, 9), random_like(&zf.minus, 1e-3, 10));
        let dv = Pair::new(random_like(&zs.plus, 1e-3, 11), random_like(&zs.minus, 1e-3, 12));
        let dphi = Pair::new(random_like(&zf.plus, 1e-3, 13), random_like(&zf.minus, 1e-3, 14));
        let e0 = a.eikonal_form(&v, &phi);
        let e1 = a.eikonal_form(&pair_add(&v, &dv), &pair_add(&phi, &dphi));
        let lin = linearized_eikonal(&a, &v, &phi, &dv, &dphi);
        let diff = pair_sub(&pair_sub(&e1, &e0), &lin);
        let cf = front_newton_error(&g, &dv, &dphi);
        let d = pair_sub(&diff, &cf);
        assert!(max_abs(d.plus.iter().chain(d.minus.iter())) < 1e-12);
    }

    #[test]
    fn recursion_telescopes_with_random_errors() {
        let g = grid(8, 0.2);
        let a = build(&g, 1e-3, 1);
        let sm = Smoothing::new(&g, a.params.lift_width);
        let mut st = IterationState::new(&a, 4.0).unwrap();
        for n in 0..4 {
            let (t, d) = theta_schedule(4.0, n).unwrap();
            st.theta = t;
            st.delta = d;
            if n > 0 {
                let zs = &st.acc_e;
                st.acc_e = pair_add(zs, &Pair::new(random_like(&zs.plus, 1e-3, n as u64), random_like(&zs.minus, 1e-3, 50 + n as u64)));
                st.acc_e_tilde = &st.acc_e_tilde + &random_like(&st.acc_e_tilde, 1e-3, 90 + n as u64);
                let zf = &st.acc_e_bar;
                st.acc_e_bar = pair_add(zf, &Pair::new(random_like(&zf.plus, 1e-3, 70 + n as u64), random_like(&zf.minus, 1e-3, 80 + n as u64)));
            }
            let r = rhs_recursion(&a, &sm, &mut st);
            if n == 0 {
                let d0 = pair_sub(&r.f, &sm.state(&a.f_a, t));
                assert!(max_abs(d0.plus.iter().chain(d0.minus.iter())) == 0.0);
                assert!(r.g.iter().all(|&x| x == 0.0));
            }
            st.sum_f = pair_add(&st.sum_f, &r.f);
            st.sum_g = &st.sum_g + &r.g;
            st.sum_h = pair_add(&st.sum_h, &r.h);
            let (rf, rg, rh) = telescoping_residuals(&a, &sm, &st);
            assert!(rf < 1e-10 && rg < 1e-10 && rh < 1e-10, "{n}: {rf} {rg} {rh}");
        }
    }

    #[test]
    fn planar_iteration_is_fixed_point() {
        let g = grid(8, 0.2);
        let a = build(&g, 0.0, 1);
        let cfg = IterationConfig {
            n_max: 2,
            s_list: vec![2],
            s0: 2,
            alpha: 4,
            s1: 6,
            ..IterationConfig::default()
        };
        let run = run_iteration(&a, &cfg, |_| {}).unwrap();
        assert!(run.report.aborted.is_none());
        for r in &run.state.history {
            assert!(r.dv_norm[0] < 1e-12 && r.dphi_norm[0] < 1e-12);
            assert!(r.residual[0] < 1e-13);
        }
    }

    #[test]
    fn small_run_reduces_residual_and_keeps_invariants() {
        let g = grid(16, 0.2);
        let a = build(&g, 1e-3, 1);
        let cfg = IterationConfig {
            n_max: 3,
            s_list: vec![0, 2],
            s0: 2,
            alpha: 4,
            s1: 6,
            ..IterationConfig::default()
        };
        let run = run_iteration(&a, &cfg, |r| eprintln!("{r:?}")).unwrap();
        assert!(run.report.aborted.is_none(), "{:?}", run.report);
        for r in &run.state.history {
            assert!(r.modified_constraint < 1e-10);
            assert!(r.telescoping_f < 1e-10 && r.telescoping_g < 1e-10 && r.telescoping_h < 1e-10);
            assert_eq!(r.e_bar3_max, 0.0);
        }
        assert_eq!(run.state.past_max(), 0.0);
        assert!(run.state.trace_coupling() < 1e-14);
        assert!(run.report.residual_ratio < 0.5, "{:?} {:?}", run.initial_residual, run.report);
    }
}
