//! Smoothing operators on the tail component: the mollifier/truncation
//! operators used to regularize states into the discrete `~D`, and the Yosida
//! resolvent of the delay generator.

use std::sync::OnceLock;

use crate::error::{PathflowError, Result};
use crate::pathspace::ProductState;

/// Quadrature sub-nodes used when integrating against the mollifier kernel.
const KERNEL_QUAD_NODES: usize = 200;

/// Normalization constant of the standard bump, `1 / int_{-1}^{1} e^{-1/(1-x^2)} dx`.
fn bump_norm() -> f64 {
    static NORM: OnceLock<f64> = OnceLock::new();
    *NORM.get_or_init(|| {
        // The integrand is C^inf with all derivatives vanishing at +-1, so
        // the trapezoid rule converges faster than any power of the step.
        let n = 20_000;
        let h = 2.0 / n as f64;
        let mut sum = 0.0;
        for i in 1..n {
            sum += bump_raw(-1.0 + i as f64 * h);
        }
        1.0 / (h * sum)
    })
}

fn bump_raw(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - x * x)).exp()
    }
}

/// The standard C^inf bump `rho(x) = C e^{-1/(1-x^2)}` on `(-1, 1)`,
/// normalized to unit mass, together with its rescalings `rho_n(x) = n rho(nx)`.
#[derive(Debug, Clone, Copy)]
pub struct MollifierFamily {
    scale: u32,
}

impl MollifierFamily {
    pub fn new(scale: u32) -> Result<Self> {
        if scale == 0 {
            return Err(PathflowError::InvalidConfig(
                "mollifier scale must be positive".into(),
            ));
        }
        Ok(MollifierFamily { scale })
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// `rho_n(x) = n rho(n x)`; zero for `|x| >= 1/n`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.scale as f64;
        n * bump_norm() * bump_raw(n * x)
    }

    /// Mass of `rho_n` by trapezoid quadrature, for diagnostics and tests.
    pub fn mass(&self, nodes: usize) -> f64 {
        let n = self.scale as f64;
        let (a, b) = (-1.0 / n, 1.0 / n);
        trapezoid(a, b, nodes, |x| self.eval(x))
    }
}

/// The truncation `tau_eps: [-T, 0] -> [-T + eps, -eps]`: identity in the
/// middle band, clamped near the ends.
#[derive(Debug, Clone, Copy)]
pub struct TruncationMap {
    epsilon: f64,
    horizon: f64,
}

impl TruncationMap {
    pub fn new(epsilon: f64, horizon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < horizon / 2.0) {
            return Err(PathflowError::InvalidConfig(format!(
                "truncation epsilon must lie in (0, T/2), got {epsilon} with T = {horizon}"
            )));
        }
        Ok(TruncationMap { epsilon, horizon })
    }

    /// Evaluation, extended by its boundary values outside `[-T, 0]`.
    pub fn eval(&self, x: f64) -> f64 {
        x.clamp(-self.horizon + self.epsilon, -self.epsilon)
    }
}

/// The smoothed clamp `sigma_n = rho_{2n} * tau_{1/n}` precomputed on the tail
/// grid. It is a scalar reparametrization of `[-T, 0]` with range inside
/// `[-T + 1/n, -1/n]`, so the mollifier kernel centered at `sigma_n(r)` has
/// support inside `[-T, 0]`.
#[derive(Debug, Clone)]
pub struct SmoothingKernel {
    scale: u32,
    sigma: Vec<f64>,
}

impl SmoothingKernel {
    pub fn build(scale: u32, grid: &crate::pathspace::TimeGrid) -> Result<Self> {
        if scale < 2 {
            return Err(PathflowError::InvalidConfig(
                "smoothing scale must be >= 2 so that 1/n < T/2".into(),
            ));
        }
        let n = scale as f64;
        if 1.0 / n >= grid.horizon() / 2.0 {
            return Err(PathflowError::InvalidConfig(format!(
                "smoothing scale {scale} too small for horizon {}",
                grid.horizon()
            )));
        }
        let tau = TruncationMap::new(1.0 / n, grid.horizon())?;
        let rho2n = MollifierFamily::new(2 * scale)?;
        let half = 1.0 / (2.0 * n);
        let sigma = (0..=grid.n_steps())
            .map(|j| {
                let r = grid.tail_node(j);
                trapezoid(r - half, r + half, KERNEL_QUAD_NODES, |z| {
                    rho2n.eval(r - z) * tau.eval(z)
                })
            })
            .collect();
        Ok(SmoothingKernel { scale, sigma })
    }

    pub fn sigma(&self, j: usize) -> f64 {
        self.sigma[j]
    }
}

/// The smoothing operator on states: head unchanged, tail replaced by
/// `(J_n x2)(r) = int rho_n(sigma_n(r) - y) x2(y) dy`, evaluated on the grid
/// with the tail interpolated piecewise-linearly between nodes.
pub fn smooth_state(kernel: &SmoothingKernel, x: &ProductState) -> ProductState {
    let n_steps = x.grid.n_steps();
    let rho = MollifierFamily::new(kernel.scale).expect("positive scale");
    let half = 1.0 / kernel.scale as f64;
    let smooth_at = |j: usize| -> Vec<f64> {
        let center = kernel.sigma(j);
        let d = x.dim();
        let mut acc = vec![0.0; d];
        let (a, b) = (center - half, center + half);
        let h = (b - a) / KERNEL_QUAD_NODES as f64;
        for q in 0..=KERNEL_QUAD_NODES {
            let y = a + q as f64 * h;
            let w = if q == 0 || q == KERNEL_QUAD_NODES {
                0.5
            } else {
                1.0
            };
            let k = w * h * rho.eval(center - y);
            if k != 0.0 {
                let v = x.tail_at(y);
                for i in 0..d {
                    acc[i] += k * v[i];
                }
            }
        }
        acc
    };
    let tail: Vec<Vec<f64>> = (0..n_steps).map(smooth_at).collect();
    let tail_left_limit = smooth_at(n_steps);
    ProductState {
        grid: x.grid,
        head: x.head.clone(),
        tail,
        tail_left_limit,
    }
}

/// Yosida approximation `J_n y = n (n - A)^{-1} y` for the delay generator.
///
/// The resolvent is solved in closed form: with `x = (n - A)^{-1} y`,
/// `x1 = y1 / n` and `x2(r) = e^{nr} x1 + int_r^0 e^{n(r-s)} y2(s) ds`,
/// stepped backward from `r = 0` with the convolution integral taken exactly
/// against the piecewise-linear interpolant of `y2` (a plain trapezoid rule
/// degrades once `n dt` is not small). The output satisfies the domain
/// boundary condition `x1 = x2(0^-)` by construction.
pub fn yosida_resolvent(n: u32, y: &ProductState) -> Result<ProductState> {
    if n == 0 {
        return Err(PathflowError::InvalidConfig(
            "yosida scale must be positive".into(),
        ));
    }
    let nf = n as f64;
    let n_steps = y.grid.n_steps();
    let dt = y.grid.dt();
    let d = y.dim();
    let a = nf * dt;
    let decay = (-a).exp();
    // Exact cell weights for int_0^dt e^{-n u} (y_lo + (u/dt)(y_hi - y_lo)) du.
    let w_const = (1.0 - decay) / nf;
    let w_slope = (1.0 - decay * (1.0 + a)) / (nf * nf * dt);

    // Resolvent tail at node indices n_steps down to 0, then scale by n.
    let mut res = vec![vec![0.0; d]; n_steps + 1];
    for i in 0..d {
        res[n_steps][i] = y.head[i] / nf;
    }
    for j in (0..n_steps).rev() {
        let y_lo = y.tail_node(j);
        let y_hi = y.tail_node(j + 1);
        for i in 0..d {
            let conv = w_const * y_lo[i] + w_slope * (y_hi[i] - y_lo[i]);
            res[j][i] = decay * res[j + 1][i] + conv;
        }
    }

    let tail: Vec<Vec<f64>> = res[..n_steps]
        .iter()
        .map(|row| row.iter().map(|v| nf * v).collect())
        .collect();
    let tail_left_limit: Vec<f64> = res[n_steps].iter().map(|v| nf * v).collect();
    ProductState::new(y.grid, y.head.clone(), tail, tail_left_limit)
}

/// Grid L^2 norm of the difference between the tails of two states.
pub fn tail_l2_dist(a: &ProductState, b: &ProductState) -> f64 {
    let n = a.grid.n_steps();
    let dt = a.grid.dt();
    let mut acc = 0.0;
    for j in 0..=n {
        let (u, v) = (a.tail_node(j), b.tail_node(j));
        let w = if j == 0 || j == n { 0.5 } else { 1.0 };
        for i in 0..a.dim() {
            acc += w * dt * (u[i] - v[i]).powi(2);
        }
    }
    acc.sqrt()
}

/// Sup distance between the tails of two states on the grid.
pub fn tail_sup_dist(a: &ProductState, b: &ProductState) -> f64 {
    let n = a.grid.n_steps();
    (0..=n)
        .map(|j| crate::pathspace::sup_dist(a.tail_node(j), b.tail_node(j)))
        .fold(0.0, f64::max)
}

fn trapezoid(a: f64, b: f64, nodes: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / nodes as f64;
    let mut sum = 0.5 * (f(a) + f(b));
    for i in 1..nodes {
        sum += f(a + i as f64 * h);
    }
    h * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::{in_tilde_d, TimeGrid, TOL_E};

    #[test]
    fn mollifier_support_and_peak() {
        let fam = MollifierFamily::new(8).unwrap();
        assert_eq!(fam.eval(0.125), 0.0);
        assert_eq!(fam.eval(-0.2), 0.0);
        // rho_n(0) = n * C * e^{-1}
        let expected = 8.0 * bump_norm() * (-1.0f64).exp();
        assert!((fam.eval(0.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn mollifier_unit_mass() {
        for n in [1u32, 4, 16, 64] {
            let fam = MollifierFamily::new(n).unwrap();
            assert!(
                (fam.mass(20_000) - 1.0).abs() < 1e-8,
                "mass off at n = {n}: {}",
                fam.mass(20_000)
            );
        }
    }

    #[test]
    fn truncation_range() {
        let tau = TruncationMap::new(0.1, 1.0).unwrap();
        assert_eq!(tau.eval(-1.0), -0.9);
        assert_eq!(tau.eval(-0.5), -0.5);
        assert_eq!(tau.eval(-0.05), -0.1);
        assert_eq!(tau.eval(0.0), -0.1);
        assert!(TruncationMap::new(0.6, 1.0).is_err());
    }

    #[test]
    fn smooth_constant_tail_is_constant() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let x = ProductState::constant(grid, &[2.0]).unwrap();
        let kernel = SmoothingKernel::build(8, &grid).unwrap();
        let y = smooth_state(&kernel, &x);
        assert_eq!(y.head, vec![2.0]);
        let err = tail_sup_dist(&y, &x);
        assert!(err < 1e-6, "constant tail error {err}");
    }

    #[test]
    fn smooth_head_untouched_under_mismatch() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let mut x = ProductState::from_tail_fn(grid, 1, |r| vec![r.cos()]).unwrap();
        x.head = vec![5.0];
        let kernel = SmoothingKernel::build(4, &grid).unwrap();
        let y = smooth_state(&kernel, &x);
        assert_eq!(y.head, vec![5.0]);
    }

    #[test]
    fn smooth_converges_on_lipschitz_tail() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let x = ProductState::from_tail_fn(grid, 1, |r| vec![(r + 0.3).abs()]).unwrap();
        let mut prev = f64::INFINITY;
        for n in [4u32, 8, 16, 32, 64] {
            let kernel = SmoothingKernel::build(n, &grid).unwrap();
            let err = tail_sup_dist(&smooth_state(&kernel, &x), &x);
            assert!(err < prev, "error not decreasing at n = {n}");
            prev = err;
        }
    }

    #[test]
    fn smooth_output_in_discrete_tilde_d() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let x = ProductState::from_tail_fn(grid, 1, |r| vec![(r + 0.3).abs()]).unwrap();
        let n = 16u32;
        let kernel = SmoothingKernel::build(n, &grid).unwrap();
        let mut y = smooth_state(&kernel, &x);
        // The smoothed tail is C^inf but its value at 0^- is a local average,
        // so close the boundary gap before the C^1 test.
        y.head = y.tail_left_limit.clone();
        assert!(in_tilde_d(&y, 4.0 * n as f64 / 256.0 + 1.0));
    }

    #[test]
    fn smooth_equibounded() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let x = ProductState::from_tail_fn(grid, 1, |r| vec![(7.0 * r).sin()]).unwrap();
        let bound = (0..=256)
            .map(|j| x.tail_node(j)[0].abs())
            .fold(0.0, f64::max);
        for n in [4u32, 16, 64] {
            let kernel = SmoothingKernel::build(n, &grid).unwrap();
            let y = smooth_state(&kernel, &x);
            let sup = (0..=256)
                .map(|j| y.tail_node(j)[0].abs())
                .fold(0.0, f64::max);
            assert!(sup <= bound + 1e-6, "n = {n}: {sup} > {bound}");
        }
    }

    #[test]
    fn yosida_converges_on_constant() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let c = 3.0;
        let y = ProductState::constant(grid, &[c]).unwrap();
        // Constants lie in D(A) with A y = 0, so J_n y = y up to roundoff.
        for n in [16u32, 32, 64, 128, 256] {
            let jy = yosida_resolvent(n, &y).unwrap();
            let err = tail_l2_dist(&jy, &y);
            assert!(err < 1e-12, "n = {n}: err = {err}");
        }
    }

    #[test]
    fn yosida_rate_on_smooth_state() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let y = ProductState::from_tail_fn(grid, 1, |r| vec![(2.0 * r).cos()]).unwrap();
        let errs: Vec<f64> = [16u32, 32, 64, 128, 256]
            .iter()
            .map(|&n| tail_l2_dist(&yosida_resolvent(n, &y).unwrap(), &y))
            .collect();
        for w in errs.windows(2) {
            // O(1/n): doubling n should at least roughly halve the error.
            assert!(w[1] < 0.7 * w[0], "errors {errs:?}");
        }
    }

    #[test]
    fn yosida_boundary_condition() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let y = ProductState::from_tail_fn(grid, 1, |r| vec![r * r + 0.5]).unwrap();
        for n in [16u32, 64, 256] {
            let jy = yosida_resolvent(n, &y).unwrap();
            assert!(
                crate::pathspace::sup_dist(&jy.head, &jy.tail_left_limit) < 1e-12,
                "boundary condition broken at n = {n}"
            );
        }
    }

    #[test]
    fn yosida_inverts_generator() {
        // (n - A)(J_n y) / n = y, checked with the finite-difference generator.
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let y = ProductState::from_tail_fn(grid, 1, |r| vec![(r).sin() + 1.0]).unwrap();
        let n = 32u32;
        let jy = yosida_resolvent(n, &y).unwrap();
        let a_jy = crate::pathspace::generator_apply(&jy).unwrap();
        let nf = n as f64;
        // Interior nodes only; one-sided differences at the ends are O(dr).
        for j in 1..512 {
            let lhs = nf * jy.tail_node(j)[0] - a_jy.tail_derivative[j][0];
            let rhs = nf * y.tail_node(j)[0];
            assert!(
                (lhs - rhs).abs() < 2e-2 * nf,
                "node {j}: {lhs} vs {rhs}"
            );
        }
        assert!(crate::pathspace::in_tilde_e(&jy, TOL_E));
    }
}
