//! Conormal weight, discrete anisotropic norms, smoothing operators and the
//! boundary-data lift.
//!
//! In the anisotropic norm a tangential operator `M = (sigma d1, d2, d3)`
//! counts one order and a plain normal derivative `d1` counts two.

use std::sync::Arc;

use ndarray::{s, Array1, Array3, ArrayView1, ArrayView3, ArrayViewMut1, Axis, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::eos_state::{BoundaryField, Grid, ScalarField, StateField};
use crate::error::{CvsError, Result};
use crate::stencil::{d1, AxisKind};

/// C-infinity step: 1 for `r <= 0`, 0 for `r >= 1`, all derivatives vanish at both ends.
pub fn smooth_cutoff(r: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    if r >= 1.0 {
        return 0.0;
    }
    let g = |y: f64| (-1.0 / y).exp();
    let a = g(1.0 - r);
    a / (a + g(r))
}

/// Derivative of [`smooth_cutoff`].
pub fn smooth_cutoff_deriv(r: f64) -> f64 {
    if r <= 0.0 || r >= 1.0 {
        return 0.0;
    }
    let g = |y: f64| (-1.0 / y).exp();
    let dg = |y: f64| (-1.0 / y).exp() / (y * y);
    let (a, b) = (g(1.0 - r), g(r));
    let (da, db) = (-dg(1.0 - r), dg(r));
    (da * (a + b) - a * (da + db)) / ((a + b) * (a + b))
}

/// Gaussian profile used to lift boundary data and blend repairs into the
/// interior: flat at `r = 0` and spectrally negligible beyond `r ~ 4`.
pub fn lift_profile(r: f64) -> f64 {
    (-r * r).exp()
}

/// Filter multiplier: 1 on `[0, 0.5]`, 0 on `[1, inf)`.
pub fn plateau(r: f64) -> f64 {
    smooth_cutoff((r - 0.5) / 0.5)
}

/// Conormal weight.
pub fn sigma(x1: f64) -> Result<f64> {
    if x1 < 0.0 || !x1.is_finite() {
        return Err(CvsError::Domain(format!("sigma needs x1 >= 0, got {x1}")));
    }
    Ok(sigma_unchecked(x1))
}

pub fn sigma_unchecked(x1: f64) -> f64 {
    if x1 <= 1.0 {
        x1
    } else if x1 >= 2.0 {
        2.0
    } else {
        let s = x1 - 1.0;
        1.0 + s + 4.0 * s.powi(3) - 7.0 * s.powi(4) + 3.0 * s.powi(5)
    }
}

pub fn sigma_deriv(x1: f64) -> f64 {
    if x1 <= 1.0 {
        1.0
    } else if x1 >= 2.0 {
        0.0
    } else {
        let s = x1 - 1.0;
        (1.0 - s).powi(2) * (15.0 * s * s + 2.0 * s + 1.0)
    }
}

/// Multi-indices `(a1, a2, a3, k)` with `a1 + a2 + a3 + 2k <= s`.
pub fn multi_indices(s: usize, with_x3: bool) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for k in 0..=s / 2 {
        let rest = s - 2 * k;
        for a1 in 0..=rest {
            for a2 in 0..=rest - a1 {
                let a3max = if with_x3 { rest - a1 - a2 } else { 0 };
                for a3 in 0..=a3max {
                    out.push((a1, a2, a3, k));
                }
            }
        }
    }
    out
}

/// Discrete `B^s_mu` norm over `[0,T] x {x1 >= 0} x T^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisotropicNorm {
    pub s: usize,
    pub mu: f64,
}

/// Contiguous x1 node range `[lo, hi]` over which a norm is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct X1Range {
    pub lo: usize,
    pub hi: usize,
}

impl X1Range {
    pub fn full(grid: &Grid) -> Self {
        Self { lo: 0, hi: grid.n1 }
    }

    pub fn interior(grid: &Grid) -> Self {
        Self {
            lo: 1,
            hi: grid.n1 - 1,
        }
    }
}

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else if i == 0 || i == n {
        0.5
    } else {
        1.0
    }
}

impl AnisotropicNorm {
    pub fn new(s: usize, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) {
            return Err(CvsError::Parameter(format!("norm weight must be >= 0, got {mu}")));
        }
        Ok(Self { s, mu })
    }

    /// Squared spatial norm of one slice `(x1, x2, x3)` (no time weight).
    pub fn slice_sq(&self, grid: &Grid, u: ArrayView3<f64>, x1_offset: usize) -> Result<f64> {
        let (n1, _, n3) = u.dim();
        if n1 < 4 || n1 < self.s + 3 {
            return Err(CvsError::Resolution(format!(
                "{n1} normal nodes cannot carry order {}",
                self.s
            )));
        }
        let with_x3 = n3 > 1;
        let h = grid.spacings();
        let sig: Array1<f64> = (0..n1)
            .map(|i| sigma_unchecked(grid.x1(i + x1_offset)))
            .collect();
        let wx: Array1<f64> = (0..n1).map(|i| trapezoid_weight(i, n1 - 1) * h[0]).collect();
        let cell = h[1] * h[2];
        let mu = self.mu;
        let weight = |order: usize| {
            if mu > 0.0 {
                mu.powi(2 * (self.s - order) as i32)
            } else {
                1.0
            }
        };
        let l2 = |a: &Array3<f64>| {
            let mut acc = 0.0;
            for ((i, _, _), &x) in a.indexed_iter() {
                acc += wx[i] * x * x;
            }
            acc * cell
        };
        let mut total = 0.0;
        let mut base = u.to_owned();
        for k in 0..=self.s / 2 {
            if k > 0 {
                base = d1(&base, 0, h[0], AxisKind::Bounded);
            }
            let rest = self.s - 2 * k;
            let mut t2 = base.clone();
            for a2 in 0..=rest {
                if a2 > 0 {
                    t2 = d1(&t2, 1, h[1], AxisKind::Periodic);
                }
                let mut t3 = t2.clone();
                let a3max = if with_x3 { rest - a2 } else { 0 };
                for a3 in 0..=a3max {
                    if a3 > 0 {
                        t3 = d1(&t3, 2, h[2], AxisKind::Periodic);
                    }
                    let mut t1 = t3.clone();
                    for a1 in 0..=rest - a2 - a3 {
                        if a1 > 0 {
                            t1 = d1(&t1, 0, h[0], AxisKind::Bounded);
                            Zip::indexed(&mut t1).for_each(|(i, _, _), x| *x *= sig[i]);
                        }
                        total += weight(a1 + a2 + a3 + 2 * k) * l2(&t1);
                    }
                }
            }
        }
        Ok(total)
    }

    /// Space-time norm of a scalar field restricted to `range` and time levels `0..=m_max`.
    pub fn eval_scalar(&self, grid: &Grid, u: &ScalarField, range: X1Range) -> Result<f64> {
        Ok(self.eval_scalar_sq(grid, u, range)?.sqrt())
    }

    fn eval_scalar_sq(&self, grid: &Grid, u: &ScalarField, range: X1Range) -> Result<f64> {
        let nt = u.len_of(Axis(0));
        let mut total = 0.0;
        for m in 0..nt {
            let slice = u.slice(s![m, range.lo..=range.hi, .., ..]);
            let w = trapezoid_weight(m, nt - 1) * if nt > 1 { grid.dt } else { 1.0 };
            let decay = (-2.0 * self.mu * grid.t(m)).exp();
            total += w * decay * self.slice_sq(grid, slice, range.lo)?;
        }
        Ok(total)
    }

    /// Norm of an 8-component field: root of the summed component squares.
    pub fn eval_state(&self, grid: &Grid, u: &StateField, range: X1Range) -> Result<f64> {
        let mut total = 0.0;
        for c in 0..u.len_of(Axis(4)) {
            let comp = u.index_axis(Axis(4), c).to_owned();
            total += self.eval_scalar_sq(grid, &comp, range)?;
        }
        Ok(total.sqrt())
    }

    /// `sup_t ||u(t)||_{s,mu}` with the `e^{-mu t}` weight.
    pub fn sup_in_time_state(&self, grid: &Grid, u: &StateField, range: X1Range) -> Result<f64> {
        let nt = u.len_of(Axis(0));
        let mut best: f64 = 0.0;
        for m in 0..nt {
            let mut acc = 0.0;
            for c in 0..u.len_of(Axis(4)) {
                let slice = u.slice(s![m, range.lo..=range.hi, .., .., c]);
                acc += self.slice_sq(grid, slice, range.lo)?;
            }
            best = best.max((-2.0 * self.mu * grid.t(m)).exp() * acc);
        }
        Ok(best.sqrt())
    }
}

/// Tangential `H^s_mu` norm of a boundary field over `[0,T] x T^2`.
pub fn boundary_norm(grid: &Grid, v: &BoundaryField, s: usize, mu: f64) -> f64 {
    let nt = v.len_of(Axis(0));
    let with_x3 = v.len_of(Axis(2)) > 1;
    let h = grid.spacings();
    let mut total = 0.0;
    for m in 0..nt {
        let slice = v.index_axis(Axis(0), m).to_owned();
        let mut acc = 0.0;
        let mut t2 = slice.clone();
        for a2 in 0..=s {
            if a2 > 0 {
                t2 = d1(&t2, 0, h[1], AxisKind::Periodic);
            }
            let mut t3 = t2.clone();
            let a3max = if with_x3 { s - a2 } else { 0 };
            for a3 in 0..=a3max {
                if a3 > 0 {
                    t3 = d1(&t3, 1, h[2], AxisKind::Periodic);
                }
                let w = if mu > 0.0 { mu.powi(2 * (s - a2 - a3) as i32) } else { 1.0 };
                acc += w * t3.iter().map(|x| x * x).sum::<f64>() * h[1] * h[2];
            }
        }
        let wt = trapezoid_weight(m, nt - 1) * if nt > 1 { grid.dt } else { 1.0 };
        total += wt * (-2.0 * mu * grid.t(m)).exp() * acc;
    }
    total.sqrt()
}

/// `theta_n = sqrt(theta0^2 + n)` and `Delta_n = theta_{n+1} - theta_n`.
pub fn theta_schedule(theta0: f64, n: usize) -> Result<(f64, f64)> {
    if !(theta0 >= 1.0) {
        return Err(CvsError::Parameter(format!("theta0 must be >= 1, got {theta0}")));
    }
    let t = (theta0 * theta0 + n as f64).sqrt();
    let t1 = (theta0 * theta0 + n as f64 + 1.0).sqrt();
    Ok((t, 1.0 / (t1 + t)))
}

/// Reflection used by the normal filter at `x1 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalParity {
    /// Even about both ends (cosine series).
    Even,
    /// Odd about `x1 = 0`, even about `x1_max` (quarter-wave sine series).
    Odd,
}

/// Spectral smoothing family `S_theta` acting slice-wise in space.
#[derive(Clone)]
pub struct Smoother {
    grid: Grid,
    fwd2: Arc<dyn Fft<f64>>,
    inv2: Arc<dyn Fft<f64>>,
    fwd3: Arc<dyn Fft<f64>>,
    inv3: Arc<dyn Fft<f64>>,
    fwd_even: Arc<dyn Fft<f64>>,
    inv_even: Arc<dyn Fft<f64>>,
    fwd_odd: Arc<dyn Fft<f64>>,
    inv_odd: Arc<dyn Fft<f64>>,
    /// Edge profiles with unit one-sided slope at `x1 = 0` and `x1 = x1_max`.
    edges: [Array1<f64>; 2],
}

impl std::fmt::Debug for Smoother {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smoother").field("grid", &self.grid).finish()
    }
}

fn signed_index(q: usize, n: usize) -> f64 {
    if q <= n / 2 {
        q as f64
    } else {
        q as f64 - n as f64
    }
}

/// Second-order one-sided slopes at both ends, outward sign at the far end.
fn end_slopes(u: ArrayView1<f64>, h: f64) -> (f64, f64) {
    let n = u.len() - 1;
    (
        (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h),
        (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * h),
    )
}

fn edge_profiles(grid: &Grid) -> [Array1<f64>; 2] {
    let n1 = grid.n1;
    if n1 < 4 {
        return [Array1::zeros(n1 + 1), Array1::zeros(n1 + 1)];
    }
    let w = 0.25 * grid.x1_max;
    let near = Array1::from_shape_fn(n1 + 1, |i| {
        let x = grid.x1(i);
        x * lift_profile(x / w)
    });
    let far = Array1::from_shape_fn(n1 + 1, |i| near[n1 - i]);
    let (a, _) = end_slopes(near.view(), grid.dx1());
    let (_, b) = end_slopes(far.view(), grid.dx1());
    [near / a, far / b]
}

impl Smoother {
    pub fn new(grid: &Grid) -> Self {
        let mut p = FftPlanner::new();
        let n1 = grid.n1;
        Self {
            grid: *grid,
            fwd2: p.plan_fft_forward(grid.n2),
            inv2: p.plan_fft_inverse(grid.n2),
            fwd3: p.plan_fft_forward(grid.n3),
            inv3: p.plan_fft_inverse(grid.n3),
            fwd_even: p.plan_fft_forward(2 * n1),
            inv_even: p.plan_fft_inverse(2 * n1),
            fwd_odd: p.plan_fft_forward(4 * n1),
            inv_odd: p.plan_fft_inverse(4 * n1),
            edges: edge_profiles(grid),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Tangential filter on one `(x2, x3)` plane.
    pub fn tangential_plane(&self, mut plane: ndarray::ArrayViewMut2<f64>, theta: f64) {
        let (n2, n3) = plane.dim();
        let mut buf: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        // row-major (j, k): lanes along x3 are contiguous
        if n3 > 1 {
            for row in buf.chunks_mut(n3) {
                self.fwd3.process(row);
            }
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n2];
        let k2s = 2.0 * std::f64::consts::PI / self.grid.l2;
        let k3s = 2.0 * std::f64::consts::PI / self.grid.l3;
        for k in 0..n3 {
            for j in 0..n2 {
                col[j] = buf[j * n3 + k];
            }
            if n2 > 1 {
                self.fwd2.process(&mut col);
            }
            let kk3 = if n3 > 1 { signed_index(k, n3) * k3s } else { 0.0 };
            for j in 0..n2 {
                let kk2 = signed_index(j, n2) * k2s;
                col[j] *= plateau((kk2 * kk2 + kk3 * kk3).sqrt() / theta);
            }
            if n2 > 1 {
                self.inv2.process(&mut col);
            }
            for j in 0..n2 {
                buf[j * n3 + k] = col[j];
            }
        }
        if n3 > 1 {
            for row in buf.chunks_mut(n3) {
                self.inv3.process(row);
            }
        }
        let norm = (n2 * n3) as f64;
        for (x, c) in plane.iter_mut().zip(buf.iter()) {
            *x = c.re / norm;
        }
    }

    /// Normal filter on one x1 lane with cutoff scale `theta^2`.
    ///
    /// Even parity first removes the end slopes that the reflection would
    /// turn into kinks: the slope carried by the high-pass part is moved
    /// onto fixed Gaussian edge profiles, which are passed through
    /// unfiltered. Band-limited lanes have no such slope and stay fixed.
    pub fn normal_lane(&self, mut lane: ArrayViewMut1<f64>, theta: f64, parity: NormalParity) {
        if parity == NormalParity::Odd || self.grid.n1 < 4 {
            self.spectral_lane(lane, theta, parity);
            return;
        }
        let orig = lane.to_owned();
        let mut low = orig.clone();
        self.spectral_lane(low.view_mut(), theta, parity);
        let (s0, s1) = end_slopes(orig.view(), self.grid.dx1());
        let (f0, f1) = end_slopes(low.view(), self.grid.dx1());
        let (c0, c1) = (s0 - f0, s1 - f1);
        if c0 == 0.0 && c1 == 0.0 {
            lane.assign(&low);
            return;
        }
        let [e0, e1] = &self.edges;
        let mut rest = &orig - &(e0 * c0) - &(e1 * c1);
        self.spectral_lane(rest.view_mut(), theta, parity);
        lane.assign(&(rest + e0 * c0 + e1 * c1));
    }

    fn spectral_lane(&self, mut lane: ArrayViewMut1<f64>, theta: f64, parity: NormalParity) {
        let n1 = self.grid.n1;
        let (len, fwd, inv) = match parity {
            NormalParity::Even => (2 * n1, &self.fwd_even, &self.inv_even),
            NormalParity::Odd => (4 * n1, &self.fwd_odd, &self.inv_odd),
        };
        let mut g = vec![Complex64::new(0.0, 0.0); len];
        match parity {
            NormalParity::Even => {
                for i in 0..=n1 {
                    g[i] = Complex64::new(lane[i], 0.0);
                    if i > 0 && i < n1 {
                        g[2 * n1 - i] = Complex64::new(lane[i], 0.0);
                    }
                }
            }
            NormalParity::Odd => {
                for i in 1..=n1 {
                    let x = Complex64::new(lane[i], 0.0);
                    g[i] = x;
                    g[2 * n1 - i] = x;
                    g[2 * n1 + i] = -x;
                    g[4 * n1 - i] = -x;
                }
            }
        }
        fwd.process(&mut g);
        let xi_s = 2.0 * std::f64::consts::PI / (len as f64 * self.grid.dx1());
        let cut = theta * theta;
        for q in 0..len {
            let xi = signed_index(q, len).abs() * xi_s;
            g[q] *= plateau(xi / cut);
        }
        inv.process(&mut g);
        for i in 0..=n1 {
            lane[i] = g[i].re / len as f64;
        }
        if parity == NormalParity::Odd {
            lane[0] = 0.0;
        }
    }

    /// Applies `S_theta` to a 3D spatial slice in place.
    pub fn apply_slice(&self, mut u: ndarray::ArrayViewMut3<f64>, theta: f64, parity: NormalParity) {
        for mut plane in u.axis_iter_mut(Axis(0)) {
            self.tangential_plane(plane.view_mut(), theta);
        }
        if self.grid.n1 >= 1 {
            for lane in u.lanes_mut(Axis(0)) {
                self.normal_lane(lane, theta, parity);
            }
        }
    }

    pub fn scalar(&self, u: &ScalarField, theta: f64) -> ScalarField {
        self.scalar_with(u, theta, NormalParity::Even)
    }

    pub fn scalar_with(&self, u: &ScalarField, theta: f64, parity: NormalParity) -> ScalarField {
        let mut out = u.clone();
        for slice in out.axis_iter_mut(Axis(0)) {
            self.apply_slice(slice, theta, parity);
        }
        out
    }

    pub fn state(&self, u: &StateField, theta: f64) -> StateField {
        let mut out = u.clone();
        for mut slice in out.axis_iter_mut(Axis(0)) {
            for c in 0..slice.len_of(Axis(3)) {
                let comp = slice.index_axis_mut(Axis(3), c);
                self.apply_slice(comp, theta, NormalParity::Even);
            }
        }
        out
    }

    /// Tangential-only smoothing of a boundary field.
    pub fn boundary(&self, v: &BoundaryField, theta: f64) -> BoundaryField {
        let mut out = v.clone();
        for plane in out.axis_iter_mut(Axis(0)) {
            self.tangential_plane(plane, theta);
        }
        out
    }

    /// Trace-preserving smoothing for front lifts: the trace is smoothed
    /// tangentially and lifted with `cutoff`, the rest is filtered with the
    /// odd normal reflection so the trace stays `S_b(trace)`.
    pub fn front(&self, phi: &ScalarField, theta: f64, lift_width: f64) -> ScalarField {
        let g = &self.grid;
        let trace = phi.slice(s![.., 0, .., ..]).to_owned();
        let sb = self.boundary(&trace, theta);
        let chi: Vec<f64> = (0..=g.n1).map(|i| lift_profile(g.x1(i) / lift_width)).collect();
        let mut rest = phi.clone();
        Zip::indexed(&mut rest).for_each(|(m, i, j, k), x| *x -= chi[i] * trace[[m, j, k]]);
        let mut out = self.scalar_with(&rest, theta, NormalParity::Odd);
        Zip::indexed(&mut out).for_each(|(m, i, j, k), x| *x += chi[i] * sb[[m, j, k]]);
        out
    }
}

/// Result of lifting boundary data into the half-space.
#[derive(Debug, Clone)]
pub struct LiftReport {
    pub field: ScalarField,
    pub trace_error: f64,
    /// `||u||_{order+1,T} / ||v||_{H^order}`; `None` for zero data.
    pub norm_ratio: Option<f64>,
}

/// `u(x1, .) = v(.) chi(x1)` with `chi(0) = 1`, `chi = 0` for `x1 >= 1`.
pub fn lift_boundary_data(grid: &Grid, v: &BoundaryField, order: usize) -> Result<LiftReport> {
    let mut u = grid.scalar_field();
    let nt = v.len_of(Axis(0));
    if u.len_of(Axis(0)) != nt {
        return Err(CvsError::Parameter("boundary data does not match grid".into()));
    }
    Zip::indexed(&mut u).for_each(|(m, i, j, k), x| {
        *x = v[[m, j, k]] * smooth_cutoff(grid.x1(i));
    });
    let mut trace_error: f64 = 0.0;
    for ((m, j, k), &val) in v.indexed_iter() {
        trace_error = trace_error.max((u[[m, 0, j, k]] - val).abs());
    }
    let bn = boundary_norm(grid, v, order, 0.0);
    let norm_ratio = if bn > 0.0 {
        let vn = AnisotropicNorm::new(order + 1, 0.0)?.eval_scalar(grid, &u, X1Range::full(grid))?;
        Some(vn / bn)
    } else {
        None
    };
    Ok(LiftReport {
        field: u,
        trace_error,
        norm_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn sigma_values() {
        assert_eq!(sigma(0.5).unwrap(), 0.5);
        assert_eq!(sigma(3.0).unwrap(), 2.0);
        let m = sigma(1.5).unwrap();
        assert!(m > 1.0 && m < 2.0);
        assert!(sigma_deriv(1.5) >= 0.0);
        assert!(sigma(-0.1).is_err());
        for i in 0..=1000 {
            let x = 1.0 + i as f64 / 1000.0;
            assert!(sigma_deriv(x) >= 0.0);
        }
        let h = 1e-6;
        for x in [1.2, 1.5, 1.9] {
            let fd = (sigma_unchecked(x + h) - sigma_unchecked(x - h)) / (2.0 * h);
            assert!((fd - sigma_deriv(x)).abs() < 1e-8);
        }
        assert!((sigma_unchecked(1.0 + 1e-9) - 1.0).abs() < 1e-8);
        assert!((sigma_unchecked(2.0 - 1e-9) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn multi_index_count() {
        assert_eq!(multi_indices(4, true).len(), 46);
        assert_eq!(multi_indices(0, true).len(), 1);
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(smooth_cutoff(0.0), 1.0);
        assert_eq!(smooth_cutoff(1.0), 0.0);
        assert!((smooth_cutoff(0.5) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        for r in [0.1, 0.4, 0.8] {
            let fd = (smooth_cutoff(r + h) - smooth_cutoff(r - h)) / (2.0 * h);
            assert!((fd - smooth_cutoff_deriv(r)).abs() < 1e-6);
        }
    }

    #[test]
    fn theta_schedule_values() {
        assert_eq!(theta_schedule(1.0, 0).unwrap().0, 1.0);
        assert_eq!(theta_schedule(1.0, 3).unwrap().0, 2.0);
        assert!(theta_schedule(0.5, 0).is_err());
        for n in 0..=10_000 {
            let (t, d) = theta_schedule(1.0, n).unwrap();
            let (t1, _) = theta_schedule(1.0, n + 1).unwrap();
            let lower = d * 2.0 * t;
            let upper = d * 2.0 * t1;
            assert!(lower > 0.0 && lower <= 1.0, "{n} {lower}");
            assert!(upper >= 1.0, "{n} {upper}");
            if n >= 25 {
                assert!(lower > 0.99, "{n} {lower}");
            }
            assert!((d * (t1 + t) - 1.0).abs() < 1e-12);
        }
    }

    fn grid(n1: usize, n2: usize) -> Grid {
        Grid::new(n1, n2, 1, 2.0, 2.0 * PI, 1.0, 0.1, 0.1).unwrap()
    }

    #[test]
    fn zero_and_constant_norms() {
        let g = grid(16, 8);
        let z = g.scalar_field();
        let n0 = AnisotropicNorm::new(2, 1.0).unwrap();
        assert_eq!(n0.eval_scalar(&g, &z, X1Range::full(&g)).unwrap(), 0.0);
        let one = ScalarField::ones(z.raw_dim());
        let n = AnisotropicNorm::new(0, 0.0).unwrap().eval_scalar(&g, &one, X1Range::full(&g)).unwrap();
        let measure = g.t_final * g.x1_max * g.l2 * g.l3;
        assert!((n * n - measure).abs() < 1e-12);
    }

    #[test]
    fn single_tangential_mode_ratio() {
        let g = grid(8, 32);
        let k = 3.0;
        let mut u = g.scalar_field();
        Zip::indexed(&mut u).for_each(|(_, _, j, _), x| *x = (k * g.x2(j)).cos());
        let r = X1Range::full(&g);
        let a = AnisotropicNorm::new(2, 1.0).unwrap().eval_scalar(&g, &u, r).unwrap();
        let b = AnisotropicNorm::new(0, 1.0).unwrap().eval_scalar(&g, &u, r).unwrap();
        let ke = (k * g.dx2()).sin() / g.dx2();
        let want = (1.0 + ke * ke + ke.powi(4)).sqrt();
        assert!((a / b - want).abs() < 1e-10 * want, "{} {}", a / b, want);
    }

    #[test]
    fn band_limited_input_is_fixed() {
        let g = grid(32, 32);
        let sm = Smoother::new(&g);
        let theta = 4.0;
        let mut u = g.scalar_field();
        // tangential k = 1 < 2, normal xi = pi m / 2 with m = 3 < 8
        Zip::indexed(&mut u).for_each(|(_, i, j, _), x| {
            *x = (g.x2(j)).sin() * (1.5 * PI * g.x1(i)).cos() + 0.3;
        });
        let v = sm.scalar(&u, theta);
        let err = (&v - &u).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn high_tangential_mode_is_removed() {
        let g = grid(8, 128);
        let sm = Smoother::new(&g);
        let theta = 4.0;
        let mut u = g.scalar_field();
        Zip::indexed(&mut u).for_each(|(_, _, j, _), x| *x = (16.0 * g.x2(j)).cos());
        let v = sm.scalar(&u, theta);
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt() / u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(r <= 1e-6);
    }

    #[test]
    fn odd_parity_keeps_zero_trace_and_fixes_quarter_waves() {
        let g = grid(32, 4);
        let sm = Smoother::new(&g);
        let mut u = g.scalar_field();
        Zip::indexed(&mut u).for_each(|(_, i, _, _), x| *x = (0.25 * PI * g.x1(i)).sin());
        let v = sm.scalar_with(&u, 4.0, NormalParity::Odd);
        let err = (&v - &u).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn front_smoothing_preserves_trace_relation() {
        let g = grid(32, 16);
        let sm = Smoother::new(&g);
        let mut phi = g.scalar_field();
        Zip::indexed(&mut phi).for_each(|(m, i, j, _), x| {
            *x = (m as f64 + 1.0) * ((3.0 * g.x2(j)).sin() + (7.0 * g.x2(j)).cos()) * (1.0 - 0.2 * g.x1(i));
        });
        let out = sm.front(&phi, 4.0, 1.0);
        let trace = phi.slice(s![.., 0, .., ..]).to_owned();
        let sb = sm.boundary(&trace, 4.0);
        let gap = (&out.slice(s![.., 0, .., ..]) - &sb).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(gap < 1e-14);
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = grid(8, 8);
            let sm = Smoother::new(&g);
            let mut u = g.scalar_field();
            let mut w = g.scalar_field();
            u.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            w.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let lhs = sm.scalar(&(&u * a + &w * b), 3.0);
            let rhs = sm.scalar(&u, 3.0) * a + sm.scalar(&w, 3.0) * b;
            let err = (&lhs - &rhs).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            prop_assert!(err < 1e-12);
        }
    }

    #[test]
    fn lift_traces() {
        let g = grid(16, 8);
        let z = g.boundary_field();
        let r = lift_boundary_data(&g, &z, 1).unwrap();
        assert!(r.field.iter().all(|&x| x == 0.0));
        assert!(r.norm_ratio.is_none());
        let one = BoundaryField::ones(z.raw_dim());
        let r = lift_boundary_data(&g, &one, 1).unwrap();
        assert_eq!(r.trace_error, 0.0);
        for i in 0..=g.n1 {
            assert_eq!(r.field[[0, i, 0, 0]], smooth_cutoff(g.x1(i)));
        }
    }
}
