//! Symmetric-hyperbolic form of ideal MHD in primitive variables, its
//! divergence-augmented variant, the tangential multiplier pair, jump
//! residuals across a contact front and the magnetic divergence monitor.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use ndarray::{Array3, Axis};

use crate::eos_state::{
    conservative, conservative_flux, Eos, MhdState, Pair, State, TwoPhaseField, H1, H2, H3,
    NCOMP, P, S, V1, V2, V3,
};
use crate::error::{CvsError, Result};
use crate::stencil::{d1, AxisKind};

pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Vec8 = SVector<f64, 8>;

/// Default relative tolerance for non-parallel tangential fields.
pub const TOL_PARALLEL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricSystem {
    /// `[A0, A1, A2, A3]`.
    pub a: [Mat8; 4],
    pub augmented: bool,
    pub lambda: f64,
}

impl SymmetricSystem {
    /// Largest relative asymmetry over all four matrices.
    pub fn symmetry_defect(&self) -> f64 {
        self.a
            .iter()
            .map(|m| {
                let scale = m.amax().max(f64::MIN_POSITIVE);
                (m - m.transpose()).amax() / scale
            })
            .fold(0.0, f64::max)
    }

    pub fn min_eig_a0(&self) -> f64 {
        min_eigenvalue(&self.a[0])
    }
}

pub fn min_eigenvalue(m: &Mat8) -> f64 {
    SymmetricEigen::new(0.5 * (m + m.transpose()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn to_vec8(u: &State) -> Vec8 {
    Vec8::from_column_slice(u)
}

/// Unsymmetrized primitive matrices `[B0, B1, B2, B3]` at a raw state.
pub fn primitive_matrices(eos: &Eos, u: &State) -> [Mat8; 4] {
    let rho = eos.density_unchecked(u[P], u[S]);
    let rc2 = eos.gamma * u[P];
    let v = [u[V1], u[V2], u[V3]];
    let h = [u[H1], u[H2], u[H3]];
    let mut b0 = Mat8::zeros();
    b0[(P, P)] = 1.0 / rc2;
    for i in 0..3 {
        b0[(V1 + i, V1 + i)] = rho;
        b0[(H1 + i, H1 + i)] = 1.0;
    }
    b0[(S, S)] = 1.0;
    let mut out = [b0, Mat8::zeros(), Mat8::zeros(), Mat8::zeros()];
    for j in 0..3 {
        let b = &mut out[j + 1];
        b[(P, P)] = v[j] / rc2;
        b[(P, V1 + j)] = 1.0;
        b[(V1 + j, P)] = 1.0;
        for i in 0..3 {
            b[(V1 + i, V1 + i)] = rho * v[j];
            b[(H1 + i, H1 + i)] = v[j];
            for k in 0..3 {
                let dij = if i == j { 1.0 } else { 0.0 };
                let dik = if i == k { 1.0 } else { 0.0 };
                let djk = if j == k { 1.0 } else { 0.0 };
                b[(V1 + i, H1 + k)] = dij * h[k] - h[j] * dik;
                b[(H1 + i, V1 + k)] = -h[j] * dik + h[i] * djk;
            }
        }
        b[(S, S)] = v[j];
    }
    out
}

/// Mixing matrix of the augmented system.
pub fn mixing_matrix(eos: &Eos, u: &State, lambda: f64) -> Mat8 {
    let rho = eos.density_unchecked(u[P], u[S]);
    let rc2 = eos.gamma * u[P];
    let mut d = Mat8::identity();
    for i in 0..3 {
        let hi = u[H1 + i];
        d[(P, V1 + i)] = lambda * hi / rc2;
        d[(V1 + i, P)] = lambda * rho * hi;
        d[(V1 + i, H1 + i)] = -rho * lambda;
        d[(H1 + i, V1 + i)] = -lambda;
    }
    d
}

/// Unsymmetrized augmented matrices `[A0, A1, A2, A3]`.
pub fn augmented_matrices_raw(eos: &Eos, u: &State, lambda: f64) -> [Mat8; 4] {
    let b = primitive_matrices(eos, u);
    let d = mixing_matrix(eos, u, lambda);
    let mut g = Vec8::zeros();
    g[P] = -1.0;
    g[H1] = -u[H1];
    g[H2] = -u[H2];
    g[H3] = -u[H3];
    let mut a = [d * b[0], d * b[1], d * b[2], d * b[3]];
    for j in 0..3 {
        for r in 0..NCOMP {
            a[j + 1][(r, H1 + j)] += lambda * g[r];
        }
    }
    a
}

/// Symmetrized augmented matrices; no admissibility checks.
pub fn augmented_matrices(eos: &Eos, u: &State, lambda: f64) -> [Mat8; 4] {
    let a = augmented_matrices_raw(eos, u, lambda);
    a.map(|m| 0.5 * (m + m.transpose()))
}

pub fn assemble_primitive(eos: &Eos, state: &MhdState) -> SymmetricSystem {
    let b = primitive_matrices(eos, &state.u);
    SymmetricSystem {
        a: b.map(|m| 0.5 * (m + m.transpose())),
        augmented: false,
        lambda: 0.0,
    }
}

pub fn assemble_augmented(eos: &Eos, state: &MhdState, lambda: f64) -> Result<SymmetricSystem> {
    let bound = state.sonic_bound();
    if !(lambda * lambda < bound) {
        return Err(CvsError::StabilityCondition {
            lambda_sq: lambda * lambda,
            bound,
        });
    }
    let sys = SymmetricSystem {
        a: augmented_matrices(eos, &state.u, lambda),
        augmented: true,
        lambda,
    };
    let m = sys.min_eig_a0();
    if !(m > 0.0) {
        return Err(CvsError::StabilityCondition {
            lambda_sq: lambda * lambda,
            bound,
        });
    }
    Ok(sys)
}

/// `c^2 / (rho c^2 + |H|^2) - lambda^2`.
pub fn stability_margin(state: &MhdState, lambda: f64) -> f64 {
    state.sonic_bound() - lambda * lambda
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPair {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub det_tau: f64,
}

impl LambdaPair {
    pub fn get(&self, plus: bool) -> f64 {
        if plus {
            self.lambda_plus
        } else {
            self.lambda_minus
        }
    }

    /// Residual of `[v_tau] = lambda+ H_tau+ - lambda- H_tau-`.
    pub fn residual(&self, up: &State, um: &State) -> [f64; 2] {
        [
            up[V2] - um[V2] - self.lambda_plus * up[H2] + self.lambda_minus * um[H2],
            up[V3] - um[V3] - self.lambda_plus * up[H3] + self.lambda_minus * um[H3],
        ]
    }
}

/// Solves the 2x2 tangential system for the multiplier pair.
pub fn lambda_pair_raw(up: &State, um: &State, tol: f64) -> Result<LambdaPair> {
    let (a, b) = (up[H2], up[H3]);
    let (c, d) = (um[H2], um[H3]);
    let det = -a * d + c * b;
    let scale = (a * a + b * b).sqrt() * (c * c + d * d).sqrt();
    if !(det.abs() > tol * scale) || scale == 0.0 {
        return Err(CvsError::DegenerateConfiguration(format!(
            "tangential magnetic fields are parallel (det {det:.3e}, scale {scale:.3e})"
        )));
    }
    let j2 = up[V2] - um[V2];
    let j3 = up[V3] - um[V3];
    Ok(LambdaPair {
        lambda_plus: (-j2 * d + c * j3) / det,
        lambda_minus: (a * j3 - b * j2) / det,
        det_tau: det,
    })
}

pub fn lambda_pair(up: &MhdState, um: &MhdState) -> Result<LambdaPair> {
    lambda_pair_raw(&up.u, &um.u, TOL_PARALLEL)
}

/// Jump residuals across a front `x1 = psi` with slopes `(psi_t, psi_x2, psi_x3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhResidual {
    pub mass: f64,
    pub normal_field_jump: f64,
    pub momentum: [f64; 3],
    pub momentum_normal: f64,
    pub momentum_tangential: [f64; 2],
    pub induction: [f64; 3],
    pub energy: f64,
    /// `(psi_t - v_N+, psi_t - v_N-, H_N+, H_N-, [q])`.
    pub contact: [f64; 5],
    pub det_tau: f64,
}

impl RhResidual {
    /// General jump vector in conservative component order.
    pub fn general(&self) -> State {
        [
            self.mass,
            self.momentum[0],
            self.momentum[1],
            self.momentum[2],
            self.induction[0],
            self.induction[1],
            self.induction[2],
            self.energy,
        ]
    }
}

pub fn normal_velocity(u: &State, psi_x2: f64, psi_x3: f64) -> f64 {
    u[V1] - psi_x2 * u[V2] - psi_x3 * u[V3]
}

pub fn normal_field(u: &State, psi_x2: f64, psi_x3: f64) -> f64 {
    u[H1] - psi_x2 * u[H2] - psi_x3 * u[H3]
}

pub fn rh_residual(
    eos: &Eos,
    up: &MhdState,
    um: &MhdState,
    psi_t: f64,
    psi_x2: f64,
    psi_x3: f64,
) -> RhResidual {
    let n = [1.0, -psi_x2, -psi_x3];
    let side = |st: &MhdState| {
        let u = &st.u;
        let vn = normal_velocity(u, psi_x2, psi_x3);
        let hn = normal_field(u, psi_x2, psi_x3);
        let m = st.rho * (vn - psi_t);
        let q = st.q();
        let e = eos.internal_energy(st.rho, u[S]);
        let v = st.v();
        let h = st.h();
        let v2: f64 = v.iter().map(|x| x * x).sum();
        let vh: f64 = (0..3).map(|k| v[k] * h[k]).sum();
        let mom = [0, 1, 2].map(|k| m * v[k] - hn * h[k] + q * n[k]);
        let ind = [0, 1, 2].map(|k| m * h[k] / st.rho - hn * v[k]);
        let en = m * (e + 0.5 * (v2 + st.h_sq() / st.rho)) + q * vn - hn * vh;
        (m, hn, mom, ind, en, vn, q)
    };
    let (mp, hp, momp, indp, ep, vnp, qp) = side(up);
    let (mm, hm, momm, indm, em, vnm, qm) = side(um);
    let momentum = [0, 1, 2].map(|k| momp[k] - momm[k]);
    let tau = [[psi_x2, 1.0, 0.0], [psi_x3, 0.0, 1.0]];
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let det = -up.u[H2] * um.u[H3] + um.u[H2] * up.u[H3];
    RhResidual {
        mass: mp - mm,
        normal_field_jump: hp - hm,
        momentum,
        momentum_normal: dot(&momentum, &n),
        momentum_tangential: [dot(&momentum, &tau[0]), dot(&momentum, &tau[1])],
        induction: [0, 1, 2].map(|k| indp[k] - indm[k]),
        energy: ep - em,
        contact: [psi_t - vnp, psi_t - vnm, hp, hm, qp - qm],
        det_tau: det,
    }
}

/// Jump of `-psi_t W + sum_j N_j F_j` contracted directly from the fluxes.
pub fn flux_jump(eos: &Eos, up: &State, um: &State, psi_t: f64, psi_x2: f64, psi_x3: f64) -> State {
    let n = [1.0, -psi_x2, -psi_x3];
    let side = |u: &State| {
        let w = conservative(eos, u);
        let mut r = w.map(|x| -psi_t * x);
        for j in 0..3 {
            let f = conservative_flux(eos, u, j);
            for c in 0..NCOMP {
                r[c] += n[j] * f[c];
            }
        }
        r
    };
    let a = side(up);
    let b = side(um);
    let mut out = [0.0; NCOMP];
    for c in 0..NCOMP {
        out[c] = a[c] - b[c];
    }
    out
}

#[derive(Debug, Clone)]
pub struct DivHReport {
    /// `(x1, x2, x3)` divergence per phase.
    pub field: Pair<Array3<f64>>,
    pub l2: Pair<f64>,
    pub max: Pair<f64>,
    /// Same norms restricted to interior x1 nodes.
    pub interior_max: Pair<f64>,
}

/// Discrete divergence of `H` at one time slice, per phase.
pub fn div_h(field: &TwoPhaseField, t_index: usize) -> Result<DivHReport> {
    let g = &field.grid;
    if t_index > g.nt {
        return Err(CvsError::Parameter(format!("time index {t_index} out of range")));
    }
    let one = |f: &ndarray::Array5<f64>| {
        let slice = f.index_axis(Axis(0), t_index);
        let h = g.spacings();
        let kinds = [AxisKind::Bounded, AxisKind::Periodic, AxisKind::Periodic];
        let mut div = Array3::<f64>::zeros((g.n1 + 1, g.n2, g.n3));
        for j in 0..3 {
            let comp = slice.index_axis(Axis(3), H1 + j);
            div += &d1(&comp, j, h[j], kinds[j]);
        }
        div
    };
    let dp = one(&field.plus);
    let dm = one(&field.minus);
    let norms = |d: &Array3<f64>| {
        let dv = g.dx1() * g.dx2() * g.dx3();
        let mut l2 = 0.0;
        let mut mx: f64 = 0.0;
        let mut interior: f64 = 0.0;
        for ((i, _, _), &x) in d.indexed_iter() {
            let w = if i == 0 || i == g.n1 { 0.5 } else { 1.0 };
            l2 += w * x * x * dv;
            mx = mx.max(x.abs());
            if i > 0 && i < g.n1 {
                interior = interior.max(x.abs());
            }
        }
        (l2.sqrt(), mx, interior)
    };
    let (lp, mp, ip) = norms(&dp);
    let (lm, mm, im) = norms(&dm);
    Ok(DivHReport {
        field: Pair::new(dp, dm),
        l2: Pair::new(lp, lm),
        max: Pair::new(mp, mm),
        interior_max: Pair::new(ip, im),
    })
}

/// Local spectral radius of `A0^{-1} A_j` for the augmented system.
pub fn spectral_radius(a0: &Mat8, aj: &Mat8) -> f64 {
    let Some(chol) = a0.cholesky() else {
        return f64::INFINITY;
    };
    let linv = chol.l().try_inverse().unwrap_or_else(Mat8::zeros);
    let m = &linv * aj * linv.transpose();
    SymmetricEigen::new(0.5 * (m + m.transpose()))
        .eigenvalues
        .iter()
        .fold(0.0_f64, |a, &x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eos() -> Eos {
        Eos::new(1.4).unwrap()
    }

    fn state_strategy() -> impl Strategy<Value = State> {
        (
            0.3f64..3.0,
            prop::array::uniform3(-1.0f64..1.0),
            prop::array::uniform3(-1.5f64..1.5),
            -0.5f64..0.5,
        )
            .prop_map(|(p, v, h, s)| [p, v[0], v[1], v[2], h[0], h[1], h[2], s])
    }

    #[test]
    fn zero_fields_couple_only_pressure_and_normal_velocity() {
        let b = primitive_matrices(&eos(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b1 = b[1];
        for r in 0..8 {
            for c in 0..8 {
                let expect = if (r, c) == (P, V1) || (r, c) == (V1, P) { 1.0 } else { 0.0 };
                assert_eq!(b1[(r, c)], expect, "({r},{c})");
            }
        }
    }

    proptest! {
        #[test]
        fn raw_matrices_are_symmetric(u in state_strategy(), t in -0.99f64..0.99) {
            let e = eos();
            let st = MhdState::new(&e, u).unwrap();
            let lambda = t * st.sonic_bound().sqrt();
            for m in primitive_matrices(&e, &u).iter().chain(augmented_matrices_raw(&e, &u, lambda).iter()) {
                prop_assert!((m - m.transpose()).amax() <= 1e-12 * m.amax());
            }
            let sys = assemble_augmented(&e, &st, lambda).unwrap();
            prop_assert!(sys.min_eig_a0() > 0.0);
        }

        #[test]
        fn primitive_form_reproduces_quasilinear_equations(u in state_strategy(),
            ut in prop::array::uniform8(-1.0f64..1.0),
            g in prop::array::uniform3(prop::array::uniform8(-1.0f64..1.0))) {
            let e = eos();
            let b = primitive_matrices(&e, &u);
            let r = crate::eos_state::quasilinear_residual(&e, &u, &ut, &g);
            let mut lhs = b[0] * to_vec8(&ut);
            for j in 0..3 {
                lhs += b[j + 1] * to_vec8(&g[j]);
            }
            let st = MhdState::new(&e, u).unwrap();
            for c in 0..8 {
                let want = if c == P { r[c] / (st.rho * st.c2) } else if (V1..=V3).contains(&c) { r[c] * st.rho } else { r[c] };
                prop_assert!((lhs[c] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn rh_two_routes_agree(up in state_strategy(), um in state_strategy(),
            d in prop::array::uniform3(-0.5f64..0.5)) {
            let e = eos();
            let sp = MhdState::new(&e, up).unwrap();
            let sm = MhdState::new(&e, um).unwrap();
            let r = rh_residual(&e, &sp, &sm, d[0], d[1], d[2]).general();
            let f = flux_jump(&e, &up, &um, d[0], d[1], d[2]);
            for c in 0..8 {
                prop_assert!((r[c] - f[c]).abs() <= 1e-12 * (1.0 + f[c].abs()));
            }
        }
    }

    #[test]
    fn lambda_zero_gives_primitive_system() {
        let e = eos();
        let u = [1.2, 0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.1];
        let st = MhdState::new(&e, u).unwrap();
        let a = assemble_augmented(&e, &st, 0.0).unwrap();
        let b = assemble_primitive(&e, &st);
        for j in 0..4 {
            assert_eq!(a.a[j], b.a[j]);
        }
    }

    #[test]
    fn definiteness_sweep_across_bound() {
        let e = eos();
        let st = MhdState::new(&e, [1.0, 0.0, 0.2, 0.0, 0.3, 1.0, 0.4, 0.0]).unwrap();
        let lb = st.sonic_bound().sqrt();
        assert!(assemble_augmented(&e, &st, 0.99 * lb).is_ok());
        assert!(matches!(
            assemble_augmented(&e, &st, 1.01 * lb),
            Err(CvsError::StabilityCondition { .. })
        ));
        let a = augmented_matrices(&e, &st.u, 1.01 * lb);
        assert!(min_eigenvalue(&a[0]) < 0.0);
        let a = augmented_matrices(&e, &st.u, 0.99 * lb);
        assert!(min_eigenvalue(&a[0]) > 0.0);
    }

    #[test]
    fn lambda_pair_examples() {
        let mk = |v2: f64, v3: f64, h2: f64, h3: f64| [1.0, 0.0, v2, v3, 0.0, h2, h3, 0.0];
        let l = lambda_pair_raw(&mk(1.0, 1.0, 2.0, 0.0), &mk(0.0, 0.0, 1.0, 1.0), TOL_PARALLEL).unwrap();
        assert!((l.lambda_plus - 0.0).abs() < 1e-15);
        assert!((l.lambda_minus + 1.0).abs() < 1e-15);
        let z = lambda_pair_raw(&mk(0.3, 0.3, 2.0, 0.0), &mk(0.3, 0.3, 1.0, 1.0), TOL_PARALLEL).unwrap();
        assert_eq!((z.lambda_plus, z.lambda_minus), (0.0, 0.0));
        assert!(matches!(
            lambda_pair_raw(&mk(0.0, 0.0, 1.0, 2.0), &mk(0.0, 0.0, 2.0, 4.0), TOL_PARALLEL),
            Err(CvsError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn stability_margin_examples() {
        let st = MhdState {
            u: [1.0 / 1.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            rho: 1.0,
            c2: 1.0,
        };
        assert!((stability_margin(&st, 0.5) - 0.75).abs() < 1e-15);
        assert!((stability_margin(&st, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn margin_sign_change_at_bound() {
        let e = eos();
        let st = MhdState::new(&e, [0.8, 0.1, 0.0, 0.3, 0.2, 0.7, -0.4, 0.2]).unwrap();
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if stability_margin(&st, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo * lo - st.sonic_bound()).abs() < 1e-12);
    }

    #[test]
    fn planar_sheet_contact_residual_vanishes() {
        let e = eos();
        let up = MhdState::new(&e, [1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let um = MhdState::new(&e, [0.98, 0.0, -0.2, 0.1, 0.0, 0.2, 1.0, 0.0]).unwrap();
        let r = rh_residual(&e, &up, &um, 0.0, 0.0, 0.0);
        for c in r.contact {
            assert!(c.abs() < 1e-15);
        }
        let eps = 1e-3;
        let mut u2 = up.u;
        u2[P] += eps;
        let up2 = MhdState::new(&e, u2).unwrap();
        let r = rh_residual(&e, &up2, &um, 0.0, 0.0, 0.0);
        assert!((r.contact[4] - eps).abs() < 1e-15);
    }

    #[test]
    fn divergence_of_linear_and_constant_fields() {
        let g = crate::eos_state::Grid::new(8, 8, 1, 2.0, 1.0, 1.0, 0.1, 0.1).unwrap();
        let mut f = TwoPhaseField::constant(g, [1.0, 0.0, 0.0, 0.0, 0.3, 0.2, 0.1, 0.0], [1.0; 8]);
        let r = div_h(&f, 0).unwrap();
        assert!(r.max.plus < 1e-13);
        for i in 0..=g.n1 {
            f.plus.slice_mut(ndarray::s![.., i, .., .., H1]).fill(g.x1(i));
        }
        let r = div_h(&f, 0).unwrap();
        assert!(r.field.plus.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }
}
