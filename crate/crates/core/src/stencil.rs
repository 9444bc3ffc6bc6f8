//! Finite-difference stencils along one axis of an n-dimensional array.
//!
//! Bounded axes use second-order centered differences in the interior and
//! second-order one-sided differences at both ends. Periodic axes wrap.

use ndarray::{Array, ArrayBase, ArrayView1, ArrayViewMut1, Axis, Data, Dimension, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    Bounded,
    Periodic,
}

fn lane_first(u: ArrayView1<f64>, mut o: ArrayViewMut1<f64>, h: f64, kind: AxisKind) {
    let n = u.len();
    if n < 2 {
        o.fill(0.0);
        return;
    }
    match kind {
        AxisKind::Periodic => {
            for i in 0..n {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                o[i] = (u[ip] - u[im]) / (2.0 * h);
            }
        }
        AxisKind::Bounded => {
            if n == 2 {
                let d = (u[1] - u[0]) / h;
                o[0] = d;
                o[1] = d;
                return;
            }
            o[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
            for i in 1..n - 1 {
                o[i] = (u[i + 1] - u[i - 1]) / (2.0 * h);
            }
            o[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
        }
    }
}

fn lane_second(u: ArrayView1<f64>, mut o: ArrayViewMut1<f64>, h: f64, kind: AxisKind) {
    let n = u.len();
    let h2 = h * h;
    match kind {
        AxisKind::Periodic => {
            if n < 3 {
                o.fill(0.0);
                return;
            }
            for i in 0..n {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                o[i] = (u[ip] - 2.0 * u[i] + u[im]) / h2;
            }
        }
        AxisKind::Bounded => {
            if n < 3 {
                o.fill(0.0);
                return;
            }
            if n == 3 {
                let d = (u[2] - 2.0 * u[1] + u[0]) / h2;
                o.fill(d);
                return;
            }
            o[0] = (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) / h2;
            for i in 1..n - 1 {
                o[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / h2;
            }
            o[n - 1] = (2.0 * u[n - 1] - 5.0 * u[n - 2] + 4.0 * u[n - 3] - u[n - 4]) / h2;
        }
    }
}

/// First derivative along `axis`.
pub fn d1<S, D>(u: &ArrayBase<S, D>, axis: usize, h: f64, kind: AxisKind) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let mut out = Array::zeros(u.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(u.lanes(Axis(axis)))
        .for_each(|o, l| lane_first(l, o, h, kind));
    out
}

/// Second derivative along `axis`.
pub fn d2<S, D>(u: &ArrayBase<S, D>, axis: usize, h: f64, kind: AxisKind) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let mut out = Array::zeros(u.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(u.lanes(Axis(axis)))
        .for_each(|o, l| lane_second(l, o, h, kind));
    out
}

/// Forward difference in the leading (time) axis; the last level reuses the
/// backward difference.
pub fn forward_diff<S, D>(u: &ArrayBase<S, D>, axis: usize, h: f64) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let mut out = Array::zeros(u.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(u.lanes(Axis(axis)))
        .for_each(|mut o, l| {
            let n = l.len();
            if n < 2 {
                o.fill(0.0);
                return;
            }
            for i in 0..n - 1 {
                o[i] = (l[i + 1] - l[i]) / h;
            }
            o[n - 1] = (l[n - 1] - l[n - 2]) / h;
        });
    out
}

/// Fourth-order central partials `(d_t, d_1, d_2, d_3)` of a closed-form
/// map at a space-time point.
pub fn point_partials<F, const N: usize>(f: F, x: [f64; 4], h: f64) -> [[f64; N]; 4]
where
    F: Fn([f64; 4]) -> [f64; N],
{
    let mut out = [[0.0; N]; 4];
    for (d, row) in out.iter_mut().enumerate() {
        let at = |s: f64| {
            let mut y = x;
            y[d] += s * h;
            f(y)
        };
        let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
        for c in 0..N {
            row[c] = (8.0 * (p1[c] - m1[c]) - (p2[c] - m2[c])) / (12.0 * h);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn bounded_first_derivative_exact_on_quadratics() {
        let h = 0.1;
        let u: Array1<f64> = (0..11).map(|i| (i as f64 * h).powi(2)).collect();
        let d = d1(&u, 0, h, AxisKind::Bounded);
        for i in 0..11 {
            assert!((d[i] - 2.0 * i as f64 * h).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_second_derivative_exact_on_cubics() {
        let h = 0.1;
        let u: Array1<f64> = (0..11).map(|i| (i as f64 * h).powi(3)).collect();
        let d = d2(&u, 0, h, AxisKind::Bounded);
        for i in 0..11 {
            assert!((d[i] - 6.0 * i as f64 * h).abs() < 1e-10, "{i} {}", d[i]);
        }
    }

    #[test]
    fn periodic_derivative_of_sine_is_second_order() {
        let err = |n: usize| {
            let h = 2.0 * std::f64::consts::PI / n as f64;
            let u: Array1<f64> = (0..n).map(|i| (i as f64 * h).sin()).collect();
            let d = d1(&u, 0, h, AxisKind::Periodic);
            (0..n)
                .map(|i| (d[i] - (i as f64 * h).cos()).abs())
                .fold(0.0, f64::max)
        };
        let r = err(32) / err(64);
        assert!((r - 4.0).abs() < 0.1);
    }

    #[test]
    fn point_partials_exact_on_quartics() {
        let f = |x: [f64; 4]| [x[0].powi(4) + x[1] * x[2], x[3].powi(3)];
        let d = point_partials(f, [0.5, 1.0, 2.0, -1.0], 0.1);
        assert!((d[0][0] - 0.5).abs() < 1e-10);
        assert!((d[1][0] - 2.0).abs() < 1e-12);
        assert!((d[2][0] - 1.0).abs() < 1e-12);
        assert!((d[3][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_axis_has_zero_derivative() {
        let u = Array1::from(vec![3.0]);
        assert_eq!(d1(&u, 0, 1.0, AxisKind::Periodic)[0], 0.0);
        assert_eq!(d2(&u, 0, 1.0, AxisKind::Periodic)[0], 0.0);
    }
}
