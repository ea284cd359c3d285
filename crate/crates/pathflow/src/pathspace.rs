//! Discrete representations of the window spaces `C_t`, the product space
//! `E = R^d x C([-T,0))` and the operators acting on them: lift, restriction,
//! the left-shift semigroup and its generator.
//!
//! The tail grid of `[-T, 0]` reuses the `n_steps` subdivisions of the main
//! grid, so lift, restriction and the semigroup are pure index shifts with no
//! interpolation error.

use serde::{Deserialize, Serialize};

use crate::error::{PathflowError, Result};

/// Default tolerance for the head / tail-left-limit match defining `~E`.
pub const TOL_E: f64 = 1e-9;

/// Uniform discretization of `[0, T]`, shared by windows, tails and integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(PathflowError::InvalidConfig(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(PathflowError::InvalidConfig(
                "n_steps must be positive".into(),
            ));
        }
        Ok(TimeGrid {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of the k-th node. The last node is forced to `T` exactly.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Time of the k-th tail node, in `[-T, 0]`.
    pub fn tail_node(&self, k: usize) -> f64 {
        self.node(k) - self.horizon
    }
}

/// Element of `C_t`: a path on `[0, t]`, continuous on `[0, t)`, with one
/// admissible terminal value at `t` that may differ from the left limit.
///
/// `values[i]` is the path at node `i` for `i = 0..=t_index`; `values[t_index]`
/// is the left limit at `t`. The jump at `t` lives in the dedicated `terminal`
/// field. Between nodes the path is interpreted as piecewise linear.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPath {
    pub grid: TimeGrid,
    pub t_index: usize,
    pub values: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

impl WindowPath {
    pub fn new(
        grid: TimeGrid,
        t_index: usize,
        values: Vec<Vec<f64>>,
        terminal: Vec<f64>,
    ) -> Result<Self> {
        if t_index > grid.n_steps() {
            return Err(PathflowError::IndexOutOfBounds {
                index: t_index,
                n_steps: grid.n_steps(),
            });
        }
        if values.len() != t_index + 1 {
            return Err(PathflowError::GridMismatch(format!(
                "expected {} node values, got {}",
                t_index + 1,
                values.len()
            )));
        }
        let dim = terminal.len();
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(PathflowError::GridMismatch(format!(
                    "node {i} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PathflowError::NonFinite(format!("window node {i}")));
            }
        }
        if terminal.iter().any(|x| !x.is_finite()) {
            return Err(PathflowError::NonFinite("window terminal".into()));
        }
        Ok(WindowPath {
            grid,
            t_index,
            values,
            terminal,
        })
    }

    /// Continuous window: terminal equals the last stored node.
    pub fn continuous(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        let t_index = values.len() - 1;
        let terminal = values[t_index].clone();
        WindowPath::new(grid, t_index, values, terminal)
    }

    /// Constant window `gamma == c` on `[0, t]`.
    pub fn constant(grid: TimeGrid, t_index: usize, c: &[f64]) -> Result<Self> {
        WindowPath::new(
            grid,
            t_index,
            vec![c.to_vec(); t_index + 1],
            c.to_vec(),
        )
    }

    pub fn dim(&self) -> usize {
        self.terminal.len()
    }

    /// Time `t` of the window's right end.
    pub fn t(&self) -> f64 {
        self.grid.node(self.t_index)
    }

    /// Left limit of the path at `t`.
    pub fn left_limit(&self) -> &[f64] {
        &self.values[self.t_index]
    }

    /// Size of the jump at `t`.
    pub fn jump_norm(&self) -> f64 {
        sup_dist(&self.terminal, self.left_limit())
    }

    /// CSV dump, one node per row: time then components. The terminal value is
    /// emitted as an extra row at time `t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.values.iter().enumerate() {
            push_csv_row(&mut out, self.grid.node(i), v);
        }
        push_csv_row(&mut out, self.t(), &self.terminal);
        out
    }
}

/// Element of the product space `E`: head vector plus discretized tail on
/// `[-T, 0)`. `tail[j]` samples the tail at `-T + j*dt` for `j = 0..n_steps`;
/// the left limit at `0^-` is stored explicitly in `tail_left_limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductState {
    pub grid: TimeGrid,
    pub head: Vec<f64>,
    pub tail: Vec<Vec<f64>>,
    pub tail_left_limit: Vec<f64>,
}

impl ProductState {
    pub fn new(
        grid: TimeGrid,
        head: Vec<f64>,
        tail: Vec<Vec<f64>>,
        tail_left_limit: Vec<f64>,
    ) -> Result<Self> {
        if tail.len() != grid.n_steps() {
            return Err(PathflowError::GridMismatch(format!(
                "expected {} tail nodes, got {}",
                grid.n_steps(),
                tail.len()
            )));
        }
        let dim = head.len();
        if tail_left_limit.len() != dim || tail.iter().any(|v| v.len() != dim) {
            return Err(PathflowError::GridMismatch(
                "head/tail dimension mismatch".into(),
            ));
        }
        let finite = head.iter().chain(tail_left_limit.iter()).all(|x| x.is_finite())
            && tail.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(PathflowError::NonFinite("product state".into()));
        }
        Ok(ProductState {
            grid,
            head,
            tail,
            tail_left_limit,
        })
    }

    /// Constant state `(c, c 1_[-T,0))`.
    pub fn constant(grid: TimeGrid, c: &[f64]) -> Result<Self> {
        ProductState::new(
            grid,
            c.to_vec(),
            vec![c.to_vec(); grid.n_steps()],
            c.to_vec(),
        )
    }

    /// Build a state from a tail closure sampled on the grid, with the head
    /// set to the tail's value at `0^-` (so the state lies in `~E`).
    pub fn from_tail_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let tail: Vec<Vec<f64>> = (0..grid.n_steps())
            .map(|j| f(grid.tail_node(j)))
            .collect();
        let limit = f(0.0);
        assert_eq!(limit.len(), dim);
        ProductState::new(grid, limit.clone(), tail, limit)
    }

    pub fn dim(&self) -> usize {
        self.head.len()
    }

    /// Tail value at node `j`, for `j = 0..=n_steps`; `j = n_steps` is the
    /// left limit at `0^-`.
    pub fn tail_node(&self, j: usize) -> &[f64] {
        if j == self.grid.n_steps() {
            &self.tail_left_limit
        } else {
            &self.tail[j]
        }
    }

    /// Piecewise-linear evaluation of the tail at `r` in `[-T, 0]`.
    pub fn tail_at(&self, r: f64) -> Vec<f64> {
        let n = self.grid.n_steps();
        let dt = self.grid.dt();
        let s = (r + self.grid.horizon()) / dt;
        let s = s.clamp(0.0, n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let w = s - j as f64;
        let a = self.tail_node(j);
        let b = self.tail_node(j + 1);
        a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        let mut m = self.head.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        for j in 0..=self.grid.n_steps() {
            for x in self.tail_node(j) {
                m = m.max(x.abs());
            }
        }
        m
    }

    /// CSV dump of the tail, one node per row: time in `[-T, 0]` then
    /// components; the last row holds the left limit at `0^-`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..=self.grid.n_steps() {
            push_csv_row(&mut out, self.grid.tail_node(j), self.tail_node(j));
        }
        out
    }

    pub fn to_envelope(&self) -> StateEnvelope {
        StateEnvelope {
            grid: GridEnvelope {
                horizon: self.grid.horizon(),
                n_steps: self.grid.n_steps(),
            },
            head: self.head.clone(),
            tail: self.tail.clone(),
            terminal: self.tail_left_limit.clone(),
        }
    }

    pub fn from_envelope(env: &StateEnvelope) -> Result<Self> {
        let grid = TimeGrid::new(env.grid.horizon, env.grid.n_steps)?;
        ProductState::new(
            grid,
            env.head.clone(),
            env.tail.clone(),
            env.terminal.clone(),
        )
    }
}

/// JSON envelope for a product state; `terminal` carries the tail's left
/// limit at `0^-`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEnvelope {
    pub grid: GridEnvelope,
    pub head: Vec<f64>,
    pub tail: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEnvelope {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
}

/// Image of the generator `A(x1, x2) = (0, x2')`. The head is zero exactly;
/// `tail_derivative[j]` is the discrete derivative at tail node `j`,
/// `j = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorImage {
    pub head: Vec<f64>,
    pub tail_derivative: Vec<Vec<f64>>,
}

/// Lift `L^t: C_t -> E`. The tail is `gamma(0)` on `[-T, -t)` and
/// `gamma(t + r)` on `[-t, 0)`; the head is `gamma(t)` (the terminal value).
pub fn lift(gamma: &WindowPath) -> ProductState {
    let n = gamma.grid.n_steps();
    let t_idx = gamma.t_index;
    let mut tail = Vec::with_capacity(n);
    for j in 0..n {
        // r_j = (j - n) * dt; t + r_j lands on node t_idx + j - n when >= 0.
        if j + t_idx < n {
            tail.push(gamma.values[0].clone());
        } else {
            tail.push(gamma.values[t_idx + j - n].clone());
        }
    }
    ProductState {
        grid: gamma.grid,
        head: gamma.terminal.clone(),
        tail,
        tail_left_limit: gamma.left_limit().to_vec(),
    }
}

/// Restriction `M_t: E -> C_t`, `(M_t x)(s) = x2(s - t)` on `[0, t)` and
/// `x1` at `s = t`. Left inverse of `lift`: `restrict(t, lift(gamma)) = gamma`.
pub fn restrict(t_index: usize, x: &ProductState) -> Result<WindowPath> {
    let n = x.grid.n_steps();
    if t_index > n {
        return Err(PathflowError::IndexOutOfBounds {
            index: t_index,
            n_steps: n,
        });
    }
    let mut values = Vec::with_capacity(t_index + 1);
    for i in 0..t_index {
        values.push(x.tail[n + i - t_index].clone());
    }
    values.push(x.tail_left_limit.clone());
    Ok(WindowPath {
        grid: x.grid,
        t_index,
        values,
        terminal: x.head.clone(),
    })
}

/// Left-shift semigroup `e^{tA}`: head unchanged, tail shifted left by `t`
/// and padded with the head on `[-t, 0)`. Exact at grid-aligned shifts.
pub fn semigroup_apply(t_index: usize, x: &ProductState) -> Result<ProductState> {
    let n = x.grid.n_steps();
    if t_index > n {
        return Err(PathflowError::IndexOutOfBounds {
            index: t_index,
            n_steps: n,
        });
    }
    if t_index == 0 {
        return Ok(x.clone());
    }
    let mut tail = Vec::with_capacity(n);
    for j in 0..n {
        if j + t_index < n {
            tail.push(x.tail[j + t_index].clone());
        } else {
            tail.push(x.head.clone());
        }
    }
    Ok(ProductState {
        grid: x.grid,
        head: x.head.clone(),
        tail,
        tail_left_limit: x.head.clone(),
    })
}

/// Membership in `~E`: head matches the tail's left limit at `0^-`.
pub fn in_tilde_e(x: &ProductState, tol: f64) -> bool {
    sup_dist(&x.head, &x.tail_left_limit) <= tol
}

/// Heuristic membership in the discrete `~D`: `~E` membership plus a bound on
/// the tail's second differences (`max_j |x2(r_{j+1}) - 2 x2(r_j) + x2(r_{j-1})|
/// <= tol * dt`, a discrete C^1 proxy). Smooth tails pass; Brownian-sample
/// tails fail at fine grids since their second-difference statistic grows like
/// `dt^{-1/2}` relative to the bound.
pub fn in_tilde_d(x: &ProductState, tol: f64) -> bool {
    if !in_tilde_e(x, TOL_E) {
        return false;
    }
    let n = x.grid.n_steps();
    let bound = tol * x.grid.dt();
    for j in 1..n {
        let (a, b, c) = (x.tail_node(j - 1), x.tail_node(j), x.tail_node(j + 1));
        for i in 0..x.dim() {
            if (c[i] - 2.0 * b[i] + a[i]).abs() > bound {
                return false;
            }
        }
    }
    true
}

/// Generator `A x = (0, x2')`, defined on states satisfying the boundary
/// condition `x1 = x2(0^-)`. The tail derivative is computed by central
/// differences, one-sided at the ends (exact slopes in the interior for
/// piecewise-linear tails at matching breakpoints).
pub fn generator_apply(x: &ProductState) -> Result<GeneratorImage> {
    if !in_tilde_e(x, TOL_E) {
        return Err(PathflowError::DomainViolation(format!(
            "head does not match tail left limit (gap {:.3e})",
            sup_dist(&x.head, &x.tail_left_limit)
        )));
    }
    let n = x.grid.n_steps();
    let dt = x.grid.dt();
    let d = x.dim();
    let mut deriv = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let (lo, hi, span) = if j == 0 {
            (0, 1, dt)
        } else if j == n {
            (n - 1, n, dt)
        } else {
            (j - 1, j + 1, 2.0 * dt)
        };
        let a = x.tail_node(lo);
        let b = x.tail_node(hi);
        let row: Vec<f64> = (0..d).map(|i| (b[i] - a[i]) / span).collect();
        deriv.push(row);
    }
    Ok(GeneratorImage {
        head: vec![0.0; d],
        tail_derivative: deriv,
    })
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn push_csv_row(out: &mut String, t: f64, v: &[f64]) {
    out.push_str(&format!("{t}"));
    for x in v {
        out.push_str(&format!(",{x}"));
    }
    out.push('\n');
}
