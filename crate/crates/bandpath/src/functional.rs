//! Cylindrical path functionals, their directional derivatives, and discrete
//! stochastic integrals against grid paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::GridPath;
use crate::math;
use crate::measure::{inner_product, trapezoid_nodes};

/// Smooth direction with compact support `[alpha, beta]` inside `(0, 1)`:
/// a polynomial bump `amp * (t - alpha)^3 (beta - t)^3 / ((beta - alpha)/2)^6`
/// with analytic first and second derivatives. Vanishes to second order at
/// the support edges, so it is C^2 across them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionFunction {
    alpha: f64,
    beta: f64,
    amplitude: f64,
}

impl DirectionFunction {
    /// Peak-one bump supported on `[alpha, beta]`.
    pub fn bump(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha < beta && beta < 1.0) {
            return Err(Error::Domain("bump support must satisfy 0 < alpha < beta < 1"));
        }
        Ok(DirectionFunction { alpha, beta, amplitude: 1.0 })
    }

    pub fn scaled(&self, c: f64) -> Self {
        DirectionFunction { amplitude: self.amplitude * c, ..*self }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }

    #[inline]
    fn norm(&self) -> f64 {
        let half = (self.beta - self.alpha) / 2.0;
        let h3 = half * half * half;
        h3 * h3
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= self.alpha || t >= self.beta {
            return 0.0;
        }
        let u = t - self.alpha;
        let v = self.beta - t;
        self.amplitude * (u * u * u) * (v * v * v) / self.norm()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= self.alpha || t >= self.beta {
            return 0.0;
        }
        let u = t - self.alpha;
        let v = self.beta - t;
        self.amplitude * 3.0 * u * u * v * v * (v - u) / self.norm()
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        if t <= self.alpha || t >= self.beta {
            return 0.0;
        }
        let u = t - self.alpha;
        let v = self.beta - t;
        self.amplitude * 6.0 * u * v * (u * u - 3.0 * u * v + v * v) / self.norm()
    }
}

/// Construct the catalog bump (alias kept close to the operation name).
pub fn make_bump(alpha: f64, beta: f64) -> Result<DirectionFunction> {
    DirectionFunction::bump(alpha, beta)
}

/// Scalar kernels pairing paths into cylinder coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Const(f64),
    Time,
    SinPi,
}

impl Kernel {
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Kernel::Const(c) => *c,
            Kernel::Time => t,
            Kernel::SinPi => math::sin(math::PI * t),
        }
    }
}

/// Outer functions with closed-form mixed partials.
#[derive(Clone, Debug, PartialEq)]
pub enum Phi {
    Const(f64),
    /// `sum_j coeffs[j] * u_j`
    Linear(Vec<f64>),
    /// `u_i^2`
    Square(usize),
    /// `u_i^3`
    Cube(usize),
    /// `tanh(u_i)` — bounded with bounded derivatives of every order used.
    Tanh(usize),
}

impl Phi {
    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            Phi::Const(c) => *c,
            Phi::Linear(coeffs) => coeffs.iter().zip(u).map(|(c, v)| c * v).sum(),
            Phi::Square(i) => u[*i] * u[*i],
            Phi::Cube(i) => u[*i] * u[*i] * u[*i],
            Phi::Tanh(i) => math::tanh(u[*i]),
        }
    }

    /// Mixed partial of order `multi.len()`, differentiating once per entry
    /// with respect to the listed coordinate.
    pub fn partial(&self, multi: &[usize], u: &[f64]) -> f64 {
        let order = multi.len();
        if order == 0 {
            return self.eval(u);
        }
        match self {
            Phi::Const(_) => 0.0,
            Phi::Linear(coeffs) => {
                if order == 1 {
                    coeffs[multi[0]]
                } else {
                    0.0
                }
            }
            Phi::Square(i) => {
                if multi.iter().any(|m| m != i) {
                    return 0.0;
                }
                match order {
                    1 => 2.0 * u[*i],
                    2 => 2.0,
                    _ => 0.0,
                }
            }
            Phi::Cube(i) => {
                if multi.iter().any(|m| m != i) {
                    return 0.0;
                }
                match order {
                    1 => 3.0 * u[*i] * u[*i],
                    2 => 6.0 * u[*i],
                    3 => 6.0,
                    _ => 0.0,
                }
            }
            Phi::Tanh(i) => {
                if multi.iter().any(|m| m != i) {
                    return 0.0;
                }
                let t = math::tanh(u[*i]);
                let s = 1.0 - t * t;
                match order {
                    1 => s,
                    2 => -2.0 * t * s,
                    3 => s * (6.0 * t * t - 2.0),
                    4 => s * (16.0 * t - 24.0 * t * t * t),
                    _ => f64::NAN,
                }
            }
        }
    }

    /// Highest derivative order with a closed form here.
    pub fn supported_order(&self) -> usize {
        match self {
            Phi::Tanh(_) => 4,
            _ => usize::MAX,
        }
    }

    fn max_coord(&self) -> usize {
        match self {
            Phi::Const(_) => 0,
            Phi::Linear(coeffs) => coeffs.len(),
            Phi::Square(i) | Phi::Cube(i) | Phi::Tanh(i) => i + 1,
        }
    }
}

/// Cylindrical functional `x -> Phi(<x, k_1>, ..., <x, k_l>)` with partial
/// derivatives available up to `order`.
#[derive(Clone, Debug, PartialEq)]
pub struct CylFunctional {
    pub phi: Phi,
    pub kernels: Vec<Kernel>,
    pub order: usize,
}

impl CylFunctional {
    pub fn new(phi: Phi, kernels: Vec<Kernel>, order: usize) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Domain("cylindrical functional needs at least one kernel"));
        }
        if phi.max_coord() > kernels.len() {
            return Err(Error::Domain("outer function addresses a missing kernel"));
        }
        if order > phi.supported_order() {
            return Err(Error::Domain("derivative order above the implemented closed forms"));
        }
        Ok(CylFunctional { phi, kernels, order })
    }

    fn coordinates(&self, x: &GridPath) -> Vec<f64> {
        self.kernels
            .iter()
            .map(|k| inner_product(x, |t| k.eval(t)))
            .collect()
    }
}

/// Evaluate the functional on a path (kernel pairings by trapezoid rule on
/// the path's grid).
pub fn eval_phi(f: &CylFunctional, x: &GridPath) -> f64 {
    f.phi.eval(&f.coordinates(x))
}

/// Analytic mixed directional derivative of order `hs.len()` along the given
/// directions: chain rule over all kernel multi-indices.
pub fn grad_phi(f: &CylFunctional, hs: &[DirectionFunction], x: &GridPath) -> Result<f64> {
    let d = hs.len();
    if d == 0 || d > f.order {
        return Err(Error::Domain("direction count must be between 1 and the declared order"));
    }
    let u = f.coordinates(x);
    let ell = f.kernels.len();
    // <h_i, kernel_j> pairings on x's grid.
    let mut pair = vec![0.0; d * ell];
    for (i, h) in hs.iter().enumerate() {
        for (jk, kernel) in f.kernels.iter().enumerate() {
            pair[i * ell + jk] =
                trapezoid_nodes(x, |_, t| h.value(t) * kernel.eval(t));
        }
    }
    let mut multi = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let dphi = f.phi.partial(&multi, &u);
        if dphi != 0.0 {
            let mut prod = dphi;
            for (i, &j) in multi.iter().enumerate() {
                prod *= pair[i * ell + j];
            }
            total += prod;
        }
        // Odometer over {0..ell}^d.
        let mut pos = 0;
        loop {
            if pos == d {
                return Ok(total);
            }
            multi[pos] += 1;
            if multi[pos] < ell {
                break;
            }
            multi[pos] = 0;
            pos += 1;
        }
    }
}

/// Central-difference oracle for [`grad_phi`]: the order-2 tensor stencil of
/// `s -> phi(x + s_1 h_1 + ... + s_d h_d)` at the origin, `2^d` evaluations.
pub fn grad_phi_fd(
    f: &CylFunctional,
    hs: &[DirectionFunction],
    x: &GridPath,
    step: f64,
) -> Result<f64> {
    let d = hs.len();
    if d == 0 {
        return Err(Error::Domain("direction count must be at least one"));
    }
    if step <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive"));
    }
    let p = *x.partition();
    let mut total = 0.0;
    for signs in 0..(1u32 << d) {
        let mut coeff = 1.0;
        let mut values = x.values().to_vec();
        for (i, h) in hs.iter().enumerate() {
            let s = if signs >> i & 1 == 1 { 1.0 } else { -1.0 };
            coeff *= s;
            for (k, v) in values.iter_mut().enumerate() {
                *v += s * step * h.value(p.node(k));
            }
        }
        let shifted = GridPath::from_samples(values, p)?;
        total += coeff * eval_phi(f, &shifted);
    }
    let mut scale = 1.0;
    for _ in 0..d {
        scale *= 2.0 * step;
    }
    Ok(total / scale)
}

/// Discrete stochastic integral of `h'` against a path, in its two forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItoIntegral {
    /// Left-point sum `sum_k h'(t_k) (x_{k+1} - x_k)` (primary form).
    pub left_point: f64,
    /// Companion `-int h'' x dt` by the trapezoid rule; agrees with the
    /// left-point form up to an O(1/n) pairing error.
    pub curvature_form: f64,
}

/// Evaluate both discrete forms of `int h' dX` on the path's grid.
pub fn ito_integral(h: &DirectionFunction, x: &GridPath) -> ItoIntegral {
    let p = x.partition();
    let mut left = 0.0;
    for k in 0..p.n() {
        let hp = h.derivative(p.node(k));
        if hp != 0.0 {
            left += hp * (x.value(k + 1) - x.value(k));
        }
    }
    let curv = -trapezoid_nodes(x, |k, t| h.second_derivative(t) * x.value(k));
    ItoIntegral { left_point: left, curvature_form: curv }
}

/// Pairing of `h` against the scaled second differences of the path:
/// `sum_k h(t_k) (x_{k+1} - 2 x_k + x_{k-1}) / step`. Abel summation turns
/// this into the negative left-point integral up to O(1/n).
pub fn second_difference_pairing(h: &DirectionFunction, x: &GridPath) -> f64 {
    let p = x.partition();
    let inv_step = 1.0 / p.step();
    let mut acc = 0.0;
    for k in 1..p.n() {
        let hv = h.value(p.node(k));
        if hv != 0.0 {
            acc += hv * (x.value(k + 1) - 2.0 * x.value(k) + x.value(k - 1));
        }
    }
    acc * inv_step
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{polygonalize, Partition};
    use crate::rng::RngStream;
    use crate::sampler::sample_bridge;

    fn path_of(f: impl Fn(f64) -> f64, n: usize) -> GridPath {
        let p = Partition::new(0.0, 1.0, n).unwrap();
        polygonalize((0..=n).map(|k| f(p.node(k))).collect(), p).unwrap()
    }

    #[test]
    fn bump_boundary_and_peak() {
        let h = make_bump(0.2, 0.8).unwrap();
        for t in [0.2, 0.8, 0.1, 0.95] {
            assert_eq!(h.value(t), 0.0);
            assert_eq!(h.derivative(t), 0.0);
            assert_eq!(h.second_derivative(t), 0.0);
        }
        assert!((h.value(0.5) - 1.0).abs() < 1e-14);
        assert!(make_bump(0.5, 0.5).is_err());
        assert!(make_bump(0.8, 0.2).is_err());
    }

    #[test]
    fn bump_derivatives_integrate_to_zero() {
        // The exact integrals vanish by compact support; the quadrature sees
        // them at its own accuracy.
        let h = make_bump(0.3, 0.7).unwrap();
        let n = 4000;
        let (mut ip, mut ipp) = (0.0, 0.0);
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            ip += w * h.derivative(t);
            ipp += w * h.second_derivative(t);
        }
        assert!((ip / n as f64).abs() < 1e-4);
        assert!((ipp / n as f64).abs() < 5e-3);
        assert_eq!(h.value(0.7) - h.value(0.3), 0.0);
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let h = make_bump(0.25, 0.65).unwrap();
        let eps = 1e-6;
        let mut t = 0.26;
        while t < 0.65 {
            let d = (h.value(t + eps) - h.value(t - eps)) / (2.0 * eps);
            let dd = (h.value(t + eps) - 2.0 * h.value(t) + h.value(t - eps)) / (eps * eps);
            assert!((d - h.derivative(t)).abs() < 1e-6);
            assert!((dd - h.second_derivative(t)).abs() < 2e-3);
            t += 0.017;
        }
    }

    #[test]
    fn eval_phi_examples() {
        let x = path_of(|_| 2.0, 50);
        let constant = CylFunctional::new(Phi::Const(7.5), vec![Kernel::Const(1.0)], 2).unwrap();
        assert_eq!(eval_phi(&constant, &x), 7.5);

        let linear =
            CylFunctional::new(Phi::Linear(vec![1.0]), vec![Kernel::Const(1.0)], 2).unwrap();
        assert!((eval_phi(&linear, &x) - 2.0).abs() < 1e-12);

        let ramp = path_of(|t| t, 100);
        let square = CylFunctional::new(Phi::Square(0), vec![Kernel::Const(1.0)], 2).unwrap();
        assert!((eval_phi(&square, &ramp) - 0.25).abs() < 1e-4);
    }

    #[test]
    fn grad_phi_linear_and_square() {
        let x = path_of(|t| t * t - 0.3, 100);
        let h1 = make_bump(0.2, 0.6).unwrap();
        let h2 = make_bump(0.4, 0.9).unwrap();

        let linear =
            CylFunctional::new(Phi::Linear(vec![1.0]), vec![Kernel::Const(1.0)], 2).unwrap();
        let g = grad_phi(&linear, &[h1], &x).unwrap();
        let want = inner_product(&path_of(|t| h1.value(t), 100), |_| 1.0);
        assert!((g - want).abs() < 1e-12);

        let square = CylFunctional::new(Phi::Square(0), vec![Kernel::Const(1.0)], 2).unwrap();
        let g2 = grad_phi(&square, &[h1, h2], &x).unwrap();
        let p1 = trapezoid_nodes(&x, |_, t| h1.value(t));
        let p2 = trapezoid_nodes(&x, |_, t| h2.value(t));
        assert!((g2 - 2.0 * p1 * p2).abs() < 1e-12);

        // Symmetry and multilinearity.
        let g2_swapped = grad_phi(&square, &[h2, h1], &x).unwrap();
        assert!((g2 - g2_swapped).abs() < 1e-14);
        let g2_scaled = grad_phi(&square, &[h1.scaled(2.0), h2], &x).unwrap();
        assert!((g2_scaled - 2.0 * g2).abs() < 1e-12);
    }

    #[test]
    fn grad_phi_order_mismatch_rejected() {
        let square = CylFunctional::new(Phi::Square(0), vec![Kernel::Const(1.0)], 1).unwrap();
        let h = make_bump(0.2, 0.8).unwrap();
        let x = path_of(|_| 0.0, 10);
        assert!(grad_phi(&square, &[h, h], &x).is_err());
    }

    #[test]
    fn finite_difference_oracle_agrees() {
        let x = path_of(|t| 0.3 + 0.4 * math::sin(2.0 * math::PI * t), 100);
        let h1 = make_bump(0.15, 0.55).unwrap();
        let h2 = make_bump(0.35, 0.85).unwrap();

        // Linear outer function: no curvature, exact to round-off.
        let linear =
            CylFunctional::new(Phi::Linear(vec![1.3]), vec![Kernel::Time], 2).unwrap();
        let a = grad_phi(&linear, &[h1], &x).unwrap();
        let fd = grad_phi_fd(&linear, &[h1], &x, 1e-3).unwrap();
        assert!((a - fd).abs() < 1e-12);

        // Cubic outer function at d = 2: 6 <x,k> <h1,k> <h2,k>.
        let cube = CylFunctional::new(Phi::Cube(0), vec![Kernel::Const(1.0)], 3).unwrap();
        let a2 = grad_phi(&cube, &[h1, h2], &x).unwrap();
        let u = inner_product(&x, |_| 1.0);
        let p1 = trapezoid_nodes(&x, |_, t| h1.value(t));
        let p2 = trapezoid_nodes(&x, |_, t| h2.value(t));
        assert!((a2 - 6.0 * u * p1 * p2).abs() < 1e-12);
        let fd2 = grad_phi_fd(&cube, &[h1, h2], &x, 1e-3).unwrap();
        assert!((a2 - fd2).abs() / (1.0 + a2.abs()) < 1e-6);

        // Richardson consistency: halving the step divides the error by ~4.
        let tanh = CylFunctional::new(Phi::Tanh(0), vec![Kernel::SinPi], 4).unwrap();
        let exact = grad_phi(&tanh, &[h1, h2], &x).unwrap();
        let e1 = (grad_phi_fd(&tanh, &[h1, h2], &x, 2e-2).unwrap() - exact).abs();
        let e2 = (grad_phi_fd(&tanh, &[h1, h2], &x, 1e-2).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn catalog_gradients_match_fd_on_random_paths() {
        let h1 = make_bump(0.2, 0.6).unwrap();
        let h2 = make_bump(0.4, 0.9).unwrap();
        let kernels = vec![Kernel::Const(1.0), Kernel::Time, Kernel::SinPi];
        let functionals = [
            CylFunctional::new(Phi::Linear(vec![0.7, -0.2, 1.1]), kernels.clone(), 2).unwrap(),
            CylFunctional::new(Phi::Square(1), kernels.clone(), 2).unwrap(),
            CylFunctional::new(Phi::Cube(2), kernels.clone(), 2).unwrap(),
            CylFunctional::new(Phi::Tanh(0), kernels.clone(), 2).unwrap(),
        ];
        let p = Partition::new(0.0, 1.0, 60).unwrap();
        let stream = RngStream::new(1234);
        for i in 0..100 {
            let mut rng = stream.sample_rng(i);
            let x = sample_bridge(0.1, -0.4, &p, &mut rng);
            for f in &functionals {
                for hs in [&[h1][..], &[h1, h2][..]] {
                    let a = grad_phi(f, hs, &x).unwrap();
                    let fd = grad_phi_fd(f, hs, &x, 1e-3).unwrap();
                    assert!(
                        (a - fd).abs() / (1.0 + a.abs()) <= 1e-6,
                        "{f:?} d={} a={a} fd={fd}",
                        hs.len()
                    );
                }
            }
        }
    }

    #[test]
    fn ito_integral_examples() {
        let h = make_bump(0.2, 0.8).unwrap();

        let flat = path_of(|_| 0.7, 100);
        assert_eq!(ito_integral(&h, &flat).left_point, 0.0);

        // x = t: the left sum is a Riemann sum of int h' = 0.
        let ramp = path_of(|t| t, 200);
        assert!(ito_integral(&h, &ramp).left_point.abs() < 2.0 / 200.0);

        // x = t^2: int h' 2t dt = -2 int h.
        let quad = path_of(|t| t * t, 400);
        let n_fine = 40_000;
        let mut int_h = 0.0;
        for k in 0..=n_fine {
            let w = if k == 0 || k == n_fine { 0.5 } else { 1.0 };
            int_h += w * h.value(k as f64 / n_fine as f64);
        }
        int_h /= n_fine as f64;
        let got = ito_integral(&h, &quad).left_point;
        assert!((got + 2.0 * int_h).abs() < 4.0 / 400.0, "{got} vs {}", -2.0 * int_h);
    }

    #[test]
    fn ito_forms_and_second_difference_pairing_agree_on_samples() {
        let h = make_bump(0.2, 0.8).unwrap();
        let p = Partition::new(0.0, 1.0, 100).unwrap();
        let stream = RngStream::new(777);
        for i in 0..200 {
            let mut rng = stream.sample_rng(i);
            let x = sample_bridge(0.0, 0.0, &p, &mut rng);
            let ito = ito_integral(&h, &x);
            // Both pairings carry an O(1/n) stochastic error whose scale is
            // half the L2 norm of h'' (about 16.5/n for this bump); 120/n
            // leaves 4-sigma headroom over the 200 draws.
            assert!(
                (ito.left_point - ito.curvature_form).abs() < 120.0 / 100.0,
                "forms differ: {} vs {}",
                ito.left_point,
                ito.curvature_form
            );
            let sd = second_difference_pairing(&h, &x);
            assert!(
                (sd + ito.left_point).abs() < 120.0 / 100.0,
                "second-difference {} vs -ito {}",
                sd,
                -ito.left_point
            );
        }
    }
}
