//! Explicit Gaussian model for the path-dependent Kolmogorov equation: the
//! covariance `Sigma(t)`, its density, the finite-dimensional value function
//! `u_tilde`, its path-dependent form `u_eval` through Stieltjes integrals of
//! the tail, the associated martingale, and the extension operator.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{PathflowError, Result};
use crate::pathspace::TimeGrid;

type TimeFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;
type TerminalFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

const SIMPSON_TOL: f64 = 1e-10;

/// Gaussian model on `R^{N+1}`: weights `g_1..g_N` on `[0, T]` (with `g_0 = 1`
/// implicit), a terminal function `f` of polynomial growth, and a
/// Gauss-Hermite order used for all expectations.
pub struct GaussianModel {
    horizon: f64,
    g_funcs: Vec<TimeFn>,
    terminal: TerminalFn,
    gh_order: usize,
}

impl GaussianModel {
    pub fn new(
        horizon: f64,
        g_funcs: Vec<TimeFn>,
        terminal: TerminalFn,
        gh_order: usize,
    ) -> Result<Self> {
        if horizon <= 0.0 {
            return Err(PathflowError::InvalidConfig("horizon must be positive".into()));
        }
        if gh_order < 2 || gh_order > 128 {
            return Err(PathflowError::InvalidConfig(format!(
                "gauss-hermite order {gh_order} outside [2, 128]"
            )));
        }
        if g_funcs.len() > 3 {
            return Err(PathflowError::InvalidConfig(
                "at most N = 3 weight functions supported".into(),
            ));
        }
        let model = GaussianModel {
            horizon,
            g_funcs,
            terminal,
            gh_order,
        };
        // Probe positive definiteness away from the degenerate endpoint.
        for k in 0..16 {
            let t = horizon * k as f64 / 16.0;
            let sigma = model.sigma_matrix(t)?;
            if Cholesky::new(sigma).is_none() {
                return Err(PathflowError::NotPositiveDefinite { t });
            }
        }
        Ok(model)
    }

    /// Number of weight functions `N` (state dimension is `N + 1`).
    pub fn n_weights(&self) -> usize {
        self.g_funcs.len()
    }

    pub fn dim(&self) -> usize {
        self.g_funcs.len() + 1
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `g_i` including the implicit `g_0 = 1`, with the argument clamped to
    /// `[0, T]` (continuous extension by the boundary values).
    pub fn g(&self, i: usize, s: f64) -> f64 {
        let s = s.clamp(0.0, self.horizon);
        if i == 0 {
            1.0
        } else {
            (self.g_funcs[i - 1])(s)
        }
    }

    pub fn terminal(&self, xi: &[f64]) -> f64 {
        (self.terminal)(xi)
    }

    /// `Sigma_ij(t) = int_t^T g_i(s) g_j(s) ds`, adaptive Simpson per entry,
    /// upper triangle mirrored.
    pub fn sigma_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(PathflowError::InvalidConfig(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = adaptive_simpson(
                    &|s| self.g(i, s) * self.g(j, s),
                    t,
                    self.horizon,
                    SIMPSON_TOL,
                );
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }

    /// Gaussian density with covariance `Sigma(t)`, by Cholesky solve.
    pub fn gaussian_density(&self, t: f64, xi: &[f64]) -> Result<f64> {
        let sigma = self.sigma_matrix(t)?;
        let chol =
            Cholesky::new(sigma).ok_or(PathflowError::NotPositiveDefinite { t })?;
        let d = self.dim();
        let x = DVector::from_column_slice(xi);
        let solved = chol.solve(&x);
        let quad = x.dot(&solved);
        let det = chol.l().diagonal().iter().map(|v| v * v).product::<f64>();
        Ok((-0.5 * quad).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt())
    }

    /// `u_tilde(t, x) = E[f(x + Z)]`, `Z ~ N(0, Sigma(t))`, by tensor
    /// Gauss-Hermite after Cholesky whitening. At `t = T` this is `f(x)`.
    pub fn u_tilde(&self, t: f64, x: &[f64]) -> Result<f64> {
        if (self.horizon - t).abs() <= 1e-12 {
            return Ok(self.terminal(x));
        }
        let sigma = self.sigma_matrix(t)?;
        let chol =
            Cholesky::new(sigma).ok_or(PathflowError::NotPositiveDefinite { t })?;
        let transform = chol.l() * std::f64::consts::SQRT_2;
        self.gh_expectation(x, &transform)
    }

    fn gh_expectation(&self, x: &[f64], transform: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim();
        let (nodes, weights) = hermite_rule(self.gh_order);
        let mut idx = vec![0usize; d];
        let mut acc = 0.0;
        let mut shifted = vec![0.0; d];
        loop {
            let mut w = 1.0;
            for i in 0..d {
                w *= weights[idx[i]];
            }
            for i in 0..d {
                let mut v = x[i];
                for j in 0..d {
                    v += transform[(i, j)] * nodes[idx[j]];
                }
                shifted[i] = v;
            }
            acc += w * self.terminal(&shifted);
            // Advance the tensor multi-index.
            let mut k = 0;
            loop {
                if k == d {
                    let norm = std::f64::consts::PI.powf(d as f64 / 2.0);
                    let out = acc / norm;
                    if !out.is_finite() {
                        return Err(PathflowError::NonFinite("u_tilde expectation".into()));
                    }
                    return Ok(out);
                }
                idx[k] += 1;
                if idx[k] < self.gh_order {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// Stieltjes integrals `int_{[-T,0]} g_j(xi + t) dpsi(xi)` as left-point
    /// sums over the tail grid increments; `psi` holds the tail samples
    /// including `psi(0)` at the last index.
    pub fn stieltjes_integrals(&self, grid: &TimeGrid, t: f64, psi: &[f64]) -> Vec<f64> {
        let n = grid.n_steps();
        assert_eq!(psi.len(), n + 1, "tail samples must cover the full grid");
        let mut out = vec![0.0; self.n_weights()];
        for l in 0..n {
            let arg = grid.tail_node(l) + t;
            let inc = psi[l + 1] - psi[l];
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.g(j + 1, arg) * inc;
            }
        }
        out
    }

    /// Path-dependent value `u_eval(t, x, psi) = u_tilde(t, x, S_1, .., S_N)`
    /// with `S_j` the Stieltjes integrals of the tail.
    pub fn u_eval(&self, grid: &TimeGrid, t: f64, head: f64, psi: &[f64]) -> Result<f64> {
        let s = self.stieltjes_integrals(grid, t, psi);
        let mut arg = Vec::with_capacity(self.dim());
        arg.push(head);
        arg.extend_from_slice(&s);
        self.u_tilde(t, &arg)
    }

    /// Residual of the Kolmogorov equation
    /// `|d/dt u_tilde + 1/2 sum_ij g_i(t) g_j(t) d2_ij u_tilde|`
    /// by central differences.
    ///
    /// The second-order coefficients are the instantaneous covariance rates
    /// `g_i(t) g_j(t) = -d/dt Sigma_ij(t)`: the heat-type equation with these
    /// coefficients is what the Gaussian family with covariance `Sigma(t)`
    /// satisfies, as the quadratic-terminal closed form confirms.
    pub fn pde_residual(&self, t: f64, x: &[f64], h_t: f64, h_x: f64) -> Result<f64> {
        if !(t > 0.0 && t < self.horizon) {
            return Err(PathflowError::InvalidConfig(
                "pde residual requires t in (0, T)".into(),
            ));
        }
        let dt_term =
            (self.u_tilde(t + h_t, x)? - self.u_tilde(t - h_t, x)?) / (2.0 * h_t);
        let d = self.dim();
        let center = self.u_tilde(t, x)?;
        let mut acc = 0.0;
        let mut xp = x.to_vec();
        for i in 0..d {
            for j in 0..d {
                let coeff = self.g(i, t) * self.g(j, t);
                if coeff == 0.0 {
                    continue;
                }
                let second = if i == j {
                    xp.copy_from_slice(x);
                    xp[i] = x[i] + h_x;
                    let p = self.u_tilde(t, &xp)?;
                    xp[i] = x[i] - h_x;
                    let m = self.u_tilde(t, &xp)?;
                    (p - 2.0 * center + m) / (h_x * h_x)
                } else {
                    let mut eval = |si: f64, sj: f64| -> Result<f64> {
                        xp.copy_from_slice(x);
                        xp[i] = x[i] + si * h_x;
                        xp[j] = x[j] + sj * h_x;
                        self.u_tilde(t, &xp)
                    };
                    (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)?
                        + eval(-1.0, -1.0)?)
                        / (4.0 * h_x * h_x)
                };
                acc += coeff * second;
            }
        }
        Ok((dt_term + 0.5 * acc).abs())
    }

    /// Martingale values `M_{t_k} = u_tilde(t_k, W_{t_k}, I_1, .., I_N)` with
    /// `I_j(t_k)` the left-point Ito sums of `g_j` against the increments.
    pub fn martingale_path(&self, grid: &TimeGrid, dw: &[f64]) -> Result<Vec<f64>> {
        let n = grid.n_steps();
        assert_eq!(dw.len(), n, "one increment per grid step");
        let mut w = 0.0;
        let mut ito = vec![0.0; self.n_weights()];
        let mut out = Vec::with_capacity(n + 1);
        let mut arg = vec![0.0; self.dim()];
        for k in 0..=n {
            arg[0] = w;
            arg[1..].copy_from_slice(&ito);
            out.push(self.u_tilde(grid.node(k), &arg)?);
            if k < n {
                let t = grid.node(k);
                for (j, i) in ito.iter_mut().enumerate() {
                    *i += self.g(j + 1, t) * dw[k];
                }
                w += dw[k];
            }
        }
        Ok(out)
    }

    /// Extension operator value: the time derivative of `u_tilde` at the
    /// Stieltjes coordinates of the tail, with those coordinates held fixed
    /// (the pairing against the tail derivative cancels out).
    pub fn a_operator(
        &self,
        grid: &TimeGrid,
        t: f64,
        head: f64,
        psi: &[f64],
        h_t: f64,
    ) -> Result<f64> {
        let s = self.stieltjes_integrals(grid, t, psi);
        let mut arg = Vec::with_capacity(self.dim());
        arg.push(head);
        arg.extend_from_slice(&s);
        Ok((self.u_tilde(t + h_t, &arg)? - self.u_tilde(t - h_t, &arg)?) / (2.0 * h_t))
    }

    /// Head second derivative of the path-dependent value, with the tail
    /// endpoint `psi(0)` moving together with the head (states on the
    /// boundary-matched subspace keep them equal).
    pub fn head_second_derivative(
        &self,
        grid: &TimeGrid,
        t: f64,
        head: f64,
        psi: &[f64],
        h_x: f64,
    ) -> Result<f64> {
        let mut shifted = psi.to_vec();
        let n = grid.n_steps();
        let mut eval = |s: f64| -> Result<f64> {
            shifted[n] = psi[n] + s;
            self.u_eval(grid, t, head + s, &shifted)
        };
        let p = eval(h_x)?;
        let c = eval(0.0)?;
        let m = eval(-h_x)?;
        Ok((p - 2.0 * c + m) / (h_x * h_x))
    }
}

/// Gauss-Hermite nodes and weights for weight `e^{-x^2}`, by symmetric
/// eigen-decomposition of the Jacobi matrix.
pub fn hermite_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 0..order - 1 {
        let b = ((k + 1) as f64 / 2.0).sqrt();
        jacobi[(k, k + 1)] = b;
        jacobi[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * v0 * v0,
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, right, 0.5 * tol, depth - 1)
        }
    }
    if a >= b {
        return 0.0;
    }
    recurse(f, a, b, simpson(f, a, b), tol, 30)
}
