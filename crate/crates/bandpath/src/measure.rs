//! Heat kernel, inner products, and Cameron-Martin path weights.

use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::grid::GridPath;
use crate::math;

/// Gaussian transition density `(2*pi*t)^(-1/2) exp(-(x-y)^2 / (2t))`.
pub fn heat_kernel(t: f64, x: f64, y: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::Domain("heat kernel needs t > 0"));
    }
    Ok(heat_kernel_unchecked(t, x, y))
}

#[inline]
pub(crate) fn heat_kernel_unchecked(t: f64, x: f64, y: f64) -> f64 {
    let d = x - y;
    math::exp(-d * d / (2.0 * t)) / math::sqrt(math::TAU * t)
}

#[inline]
pub(crate) fn log_heat_kernel(t: f64, x: f64, y: f64) -> f64 {
    let d = x - y;
    -d * d / (2.0 * t) - 0.5 * math::ln(math::TAU * t)
}

/// Trapezoid quadrature of `f` over the nodes of `path`'s partition.
pub(crate) fn trapezoid_nodes(path: &GridPath, mut f: impl FnMut(usize, f64) -> f64) -> f64 {
    let p = path.partition();
    let n = p.n();
    let mut acc = 0.5 * (f(0, p.node(0)) + f(n, p.node(n)));
    for k in 1..n {
        acc += f(k, p.node(k));
    }
    acc * p.step()
}

/// Trapezoid quadrature of the product `x(t) * kernel(t)` on the path's grid.
pub fn inner_product(x: &GridPath, kernel: impl Fn(f64) -> f64) -> f64 {
    trapezoid_nodes(x, |k, t| x.value(k) * kernel(t))
}

/// Exponential weight tilting a Brownian path law by the curve `g`:
/// `exp(g'(t2) X(t2) - g'(t1) X(t1) - int X g'' du - 1/2 int (g')^2 du)`,
/// with both integrals taken by the trapezoid rule on the path's grid.
pub fn cameron_martin(g: &Curve, path: &GridPath) -> f64 {
    if g.is_const() {
        return 1.0;
    }
    let p = path.partition();
    let t1 = p.node(0);
    let t2 = p.node(p.n());
    let boundary = g.derivative(t2) * path.value(p.n()) - g.derivative(t1) * path.value(0);
    let drift = trapezoid_nodes(path, |k, t| path.value(k) * g.second_derivative(t));
    let energy = trapezoid_nodes(path, |_, t| {
        let d = g.derivative(t);
        d * d
    });
    math::exp(boundary - drift - 0.5 * energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{polygonalize, Partition};
    use alloc::vec::Vec;

    #[test]
    fn heat_kernel_values() {
        assert!((heat_kernel(1.0, 0.0, 0.0).unwrap() - 0.3989422804).abs() < 1e-9);
        // (2 pi / 4)^(-1/2) e^{-2}
        assert!((heat_kernel(0.25, 0.0, 1.0).unwrap() - 0.1079819330).abs() < 1e-9);
        for t in [0.03, 0.7, 2.5] {
            let same = heat_kernel(t, 1.3, 1.3).unwrap();
            assert!((same - 1.0 / math::sqrt(math::TAU * t)).abs() < 1e-14);
        }
        assert_eq!(
            heat_kernel(1.0, 0.7, -0.4).unwrap(),
            heat_kernel(1.0, -0.4, 0.7).unwrap()
        );
        assert!(heat_kernel(0.0, 0.0, 0.0).is_err());
        assert!(heat_kernel(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn heat_kernel_normalizes() {
        // Fine trapezoid over +-8 sqrt(t).
        for t in [0.1, 1.0] {
            let half = 8.0 * math::sqrt(t);
            let n = 400_000;
            let h = 2.0 * half / n as f64;
            let mut acc = 0.5
                * (heat_kernel(t, 0.0, -half).unwrap() + heat_kernel(t, 0.0, half).unwrap());
            for i in 1..n {
                acc += heat_kernel(t, 0.0, -half + i as f64 * h).unwrap();
            }
            assert!((acc * h - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        let (s, t) = (0.3, 0.45);
        let (a, b) = (0.2, -0.5);
        let half = 10.0;
        let n = 200_000;
        let h = 2.0 * half / n as f64;
        let f = |c: f64| heat_kernel_unchecked(s, a, c) * heat_kernel_unchecked(t, c, b);
        let mut acc = 0.5 * (f(-half) + f(half));
        for i in 1..n {
            acc += f(-half + i as f64 * h);
        }
        let composed = acc * h;
        assert!((composed - heat_kernel(s + t, a, b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn inner_product_exact_cases() {
        let p = Partition::new(0.0, 1.0, 40).unwrap();
        let ones = polygonalize(alloc::vec![1.0; 41], p).unwrap();
        assert!((inner_product(&ones, |_| 1.0) - 1.0).abs() < 1e-14);

        let ramp_vals: Vec<f64> = (0..=40).map(|k| p.node(k)).collect();
        let ramp = polygonalize(ramp_vals, p).unwrap();
        // Trapezoid is exact for affine integrands.
        assert!((inner_product(&ramp, |_| 1.0) - 0.5).abs() < 1e-14);

        let p100 = Partition::new(0.0, 1.0, 100).unwrap();
        let ramp100 = polygonalize((0..=100).map(|k| p100.node(k)).collect(), p100).unwrap();
        assert!((inner_product(&ramp100, |t| t) - 1.0 / 3.0).abs() < 2e-5);
    }

    #[test]
    fn cameron_martin_examples() {
        let p = Partition::new(0.0, 1.0, 200).unwrap();
        let ramp = polygonalize((0..=200).map(|k| p.node(k)).collect(), p).unwrap();

        assert_eq!(cameron_martin(&Curve::Const(3.0), &ramp), 1.0);

        // g(t) = t, X(t) = t: exponent 1 - 0 - 0 - 1/2.
        let g = Curve::Linear { intercept: 0.0, slope: 1.0 };
        assert!((cameron_martin(&g, &ramp) - math::exp(0.5)).abs() < 1e-10);

        // g(t) = t^2, X = 1: exponent 2 - 0 - 2 - 2/3 = -2/3, up to the
        // trapezoid error of int (2u)^2 du.
        let ones = polygonalize(alloc::vec![1.0; 201], p).unwrap();
        let g2 = Curve::Quadratic { c0: 0.0, c1: 0.0, c2: 1.0 };
        let exact = math::exp(-2.0 / 3.0);
        assert!(
            (cameron_martin(&g2, &ones) - exact).abs() / exact < 1e-4,
            "{} vs {exact}",
            cameron_martin(&g2, &ones)
        );
    }
}
