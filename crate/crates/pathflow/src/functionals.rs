//! Path-dependent functionals `f(t, .): C_t -> R` through their product-space
//! form `F(t, x) = f(t, M_t x)`, with analytic Frechet data and the extension
//! `G` that makes `dF/dt + <Ax, DF>` continuous off the generator's domain.

use nalgebra::{DMatrix, DVector};

use crate::pathspace::{generator_apply, GeneratorImage, ProductState, TimeGrid};

type ScalarFn2 = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type VecFn2 = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type MatFn2 = Box<dyn Fn(&[f64], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

/// Value, first and second Frechet data of `F` at a state, plus the extension
/// value `G(t, x)`.
///
/// The tail gradient is split into a density on the tail grid and a list of
/// atoms `(node, weight)`; pointwise-evaluation functionals carry their tail
/// dependence as an atom.
#[derive(Debug, Clone)]
pub struct FrechetBundle {
    pub value: f64,
    pub grad_head: Vec<f64>,
    pub grad_tail_density: Vec<Vec<f64>>,
    pub tail_atoms: Vec<(usize, Vec<f64>)>,
    pub hess_head: Vec<Vec<f64>>,
    pub extension_g: f64,
    t_index: usize,
}

impl FrechetBundle {
    /// Pairing `<h, DF>` with a direction state `h` (head and tail parts).
    pub fn pair_direction(&self, grid: &TimeGrid, h: &ProductState) -> f64 {
        let mut acc = dot(&self.grad_head, &h.head);
        acc += self.pair_tail(grid, |j| h.tail_node(j).to_vec());
        acc
    }

    /// Pairing of the tail part of `DF` against the generator image `Ax`.
    pub fn pair_generator(&self, grid: &TimeGrid, ax: &GeneratorImage) -> f64 {
        self.pair_tail(grid, |j| ax.tail_derivative[j].clone())
    }

    /// Density integrated over `[-t, 0]` by trapezoid, plus atomic terms.
    fn pair_tail(&self, grid: &TimeGrid, tail: impl Fn(usize) -> Vec<f64>) -> f64 {
        let n = grid.n_steps();
        let lo = n - self.t_index;
        let mut acc = 0.0;
        if self.t_index > 0 {
            for j in lo..=n {
                let w = if j == lo || j == n { 0.5 } else { 1.0 };
                acc += w * grid.dt() * dot(&self.grad_tail_density[j], &tail(j));
            }
        }
        for (node, weight) in &self.tail_atoms {
            acc += dot(weight, &tail(*node));
        }
        acc
    }

    pub fn hessian_form(&self, h: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.hess_head.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                acc += h[i] * v * h[j];
            }
        }
        acc
    }
}

/// The pieces of a [`FrechetBundle`] that enter the Ito ledger. Splitting them
/// out lets functionals skip the tail-density array in the per-node hot loop.
#[derive(Debug, Clone)]
pub struct LedgerBundle {
    pub value: f64,
    pub grad_head: Vec<f64>,
    pub hess_head: Vec<Vec<f64>>,
    pub extension_g: f64,
}

/// A path-dependent functional in product-space form.
pub trait PathFunctional: Send + Sync {
    /// `F(t, x)` at a grid time.
    fn eval(&self, t_index: usize, x: &ProductState) -> f64;

    /// `F(t, x)` at continuum `t`, used by finite-difference time derivatives.
    /// Agrees with `eval` at grid times.
    fn eval_time(&self, t: f64, x: &ProductState) -> f64;

    fn frechet(&self, t_index: usize, x: &ProductState) -> FrechetBundle;

    /// Cheap subset of `frechet` for the ledger hot loop.
    fn ledger_terms(&self, t_index: usize, x: &ProductState) -> LedgerBundle {
        let b = self.frechet(t_index, x);
        LedgerBundle {
            value: b.value,
            grad_head: b.grad_head,
            hess_head: b.hess_head,
            extension_g: b.extension_g,
        }
    }

    /// Grid times where `t -> F(t, y)` jumps.
    fn jump_times(&self) -> Vec<usize> {
        Vec::new()
    }

    /// `F(t_j, x) - F(t_j^-, x)` at a jump time.
    fn jump_value(&self, _t_index: usize, _x: &ProductState) -> f64 {
        0.0
    }
}

/// Integral functional `F(t, x) = int_{-t}^{0} g(x1, x2(r)) dr` with extension
/// `G(t, x) = g(x1, x1)`.
pub struct IntegralFunctional {
    g: ScalarFn2,
    dg_head: VecFn2,
    dg_tail: VecFn2,
    d2g_head: MatFn2,
}

impl IntegralFunctional {
    pub fn new(g: ScalarFn2, dg_head: VecFn2, dg_tail: VecFn2, d2g_head: MatFn2) -> Self {
        IntegralFunctional {
            g,
            dg_head,
            dg_tail,
            d2g_head,
        }
    }

    /// Trapezoid of a node function over the tail nodes of `[-t, 0]`.
    fn tail_trapezoid<T, F>(&self, grid: &TimeGrid, t_index: usize, zero: T, mut f: F) -> T
    where
        T: Axpy,
        F: FnMut(usize) -> T,
    {
        let n = grid.n_steps();
        let mut acc = zero;
        if t_index == 0 {
            return acc;
        }
        let lo = n - t_index;
        for j in lo..=n {
            let w = if j == lo || j == n { 0.5 } else { 1.0 };
            acc.axpy(w * grid.dt(), &f(j));
        }
        acc
    }
}

impl PathFunctional for IntegralFunctional {
    fn eval(&self, t_index: usize, x: &ProductState) -> f64 {
        self.tail_trapezoid(&x.grid, t_index, 0.0, |j| {
            (self.g)(&x.head, x.tail_node(j))
        })
    }

    fn eval_time(&self, t: f64, x: &ProductState) -> f64 {
        let n = x.grid.n_steps();
        let dt = x.grid.dt();
        let t = t.clamp(0.0, x.grid.horizon());
        // Index of the first full node at or right of -t.
        let s = n as f64 - t / dt;
        let lo = s.ceil() as usize;
        let mut acc = 0.0;
        for j in lo..n {
            acc += 0.5
                * dt
                * ((self.g)(&x.head, x.tail_node(j)) + (self.g)(&x.head, x.tail_node(j + 1)));
        }
        // Partial cell between -t and the node lo.
        let frac = lo as f64 - s;
        if frac > 0.0 && lo > 0 {
            let q_edge = (self.g)(&x.head, &x.tail_at(-t));
            let q_node = (self.g)(&x.head, x.tail_node(lo));
            acc += 0.5 * frac * dt * (q_edge + q_node);
        }
        acc
    }

    fn frechet(&self, t_index: usize, x: &ProductState) -> FrechetBundle {
        let n = x.grid.n_steps();
        let d = x.dim();
        let mut density = vec![vec![0.0; d]; n + 1];
        for j in (n - t_index)..=n {
            density[j] = (self.dg_tail)(&x.head, x.tail_node(j));
        }
        FrechetBundle {
            value: self.eval(t_index, x),
            grad_head: self.tail_trapezoid(&x.grid, t_index, vec![0.0; d], |j| {
                (self.dg_head)(&x.head, x.tail_node(j))
            }),
            grad_tail_density: density,
            tail_atoms: Vec::new(),
            hess_head: self.tail_trapezoid(&x.grid, t_index, vec![vec![0.0; d]; d], |j| {
                (self.d2g_head)(&x.head, x.tail_node(j))
            }),
            extension_g: (self.g)(&x.head, &x.head),
            t_index,
        }
    }

    fn ledger_terms(&self, t_index: usize, x: &ProductState) -> LedgerBundle {
        let d = x.dim();
        LedgerBundle {
            value: self.eval(t_index, x),
            grad_head: self.tail_trapezoid(&x.grid, t_index, vec![0.0; d], |j| {
                (self.dg_head)(&x.head, x.tail_node(j))
            }),
            hess_head: self.tail_trapezoid(&x.grid, t_index, vec![vec![0.0; d]; d], |j| {
                (self.d2g_head)(&x.head, x.tail_node(j))
            }),
            extension_g: (self.g)(&x.head, &x.head),
        }
    }
}

/// Pointwise-evaluation functional `F(t, x) = q(x1, x2(t0 - t)) 1_{t >= t0}`,
/// with extension `G = 0` and a single jump at `t0`.
///
/// The indicator is taken right-continuous (`t >= t0`) so that `t -> F(t, y)`
/// is cadlag and the jump sits at `t0`.
pub struct PointEvalFunctional {
    q: ScalarFn2,
    dq_head: VecFn2,
    dq_tail: VecFn2,
    d2q_head: MatFn2,
    t0_index: usize,
}

impl PointEvalFunctional {
    pub fn new(
        q: ScalarFn2,
        dq_head: VecFn2,
        dq_tail: VecFn2,
        d2q_head: MatFn2,
        t0_index: usize,
    ) -> Self {
        PointEvalFunctional {
            q,
            dq_head,
            dq_tail,
            d2q_head,
            t0_index,
        }
    }

    fn eval_node(&self, t_index: usize, x: &ProductState) -> usize {
        x.grid.n_steps() + self.t0_index - t_index
    }
}

impl PathFunctional for PointEvalFunctional {
    fn eval(&self, t_index: usize, x: &ProductState) -> f64 {
        if t_index < self.t0_index {
            return 0.0;
        }
        (self.q)(&x.head, x.tail_node(self.eval_node(t_index, x)))
    }

    fn eval_time(&self, t: f64, x: &ProductState) -> f64 {
        let t0 = x.grid.node(self.t0_index);
        if t < t0 {
            return 0.0;
        }
        (self.q)(&x.head, &x.tail_at(t0 - t))
    }

    fn frechet(&self, t_index: usize, x: &ProductState) -> FrechetBundle {
        let d = x.dim();
        let n = x.grid.n_steps();
        if t_index < self.t0_index {
            return FrechetBundle {
                value: 0.0,
                grad_head: vec![0.0; d],
                grad_tail_density: vec![vec![0.0; d]; n + 1],
                tail_atoms: Vec::new(),
                hess_head: vec![vec![0.0; d]; d],
                extension_g: 0.0,
                t_index,
            };
        }
        let node = self.eval_node(t_index, x);
        let b = x.tail_node(node);
        FrechetBundle {
            value: (self.q)(&x.head, b),
            grad_head: (self.dq_head)(&x.head, b),
            grad_tail_density: vec![vec![0.0; d]; n + 1],
            tail_atoms: vec![(node, (self.dq_tail)(&x.head, b))],
            hess_head: (self.d2q_head)(&x.head, b),
            extension_g: 0.0,
            t_index,
        }
    }

    fn jump_times(&self) -> Vec<usize> {
        vec![self.t0_index]
    }

    fn jump_value(&self, t_index: usize, x: &ProductState) -> f64 {
        if t_index != self.t0_index {
            return 0.0;
        }
        // F(t0, x) - F(t0^-, x); x2(t0 - t0) is the tail's left limit.
        (self.q)(&x.head, &x.tail_left_limit)
    }
}

type GroupScalarFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GroupVecFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type GroupMatFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type GroupTScalarFn = Box<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
type GroupTVecFn = Box<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type GroupTMatFn = Box<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Finite-dimensional stand-in for the group-generator case:
/// `F(t, x) = F0(e^{-tA} x) + int_0^t H0(s, e^{-(t-s)A} x) ds` on `R^m`,
/// whose extension is `G(t, x) = H0(t, x)`.
pub struct GroupFunctional {
    a_matrix: DMatrix<f64>,
    f0: GroupScalarFn,
    df0: GroupVecFn,
    d2f0: GroupMatFn,
    h0: GroupTScalarFn,
    dh0: GroupTVecFn,
    d2h0: GroupTMatFn,
    grid: TimeGrid,
    /// `exp(-l dt A)` for `l = 0..=n_steps`.
    exp_cache: Vec<DMatrix<f64>>,
}

impl GroupFunctional {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_matrix: DMatrix<f64>,
        grid: TimeGrid,
        f0: GroupScalarFn,
        df0: GroupVecFn,
        d2f0: GroupMatFn,
        h0: GroupTScalarFn,
        dh0: GroupTVecFn,
        d2h0: GroupTMatFn,
    ) -> Self {
        let step = (-grid.dt() * &a_matrix).exp();
        let mut exp_cache = Vec::with_capacity(grid.n_steps() + 1);
        exp_cache.push(DMatrix::identity(a_matrix.nrows(), a_matrix.ncols()));
        for l in 1..=grid.n_steps() {
            let next = &exp_cache[l - 1] * &step;
            exp_cache.push(next);
        }
        GroupFunctional {
            a_matrix,
            f0,
            df0,
            d2f0,
            h0,
            dh0,
            d2h0,
            grid,
            exp_cache,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn value(&self, t_index: usize, x: &DVector<f64>) -> f64 {
        let mut acc = (self.f0)(&(&self.exp_cache[t_index] * x));
        if t_index > 0 {
            let dt = self.grid.dt();
            for l in 0..=t_index {
                let w = if l == 0 || l == t_index { 0.5 } else { 1.0 };
                let y = &self.exp_cache[t_index - l] * x;
                acc += w * dt * (self.h0)(self.grid.node(l), &y);
            }
        }
        acc
    }

    /// `F(t, x)` at continuum `t`, with the time integral on a fixed-count
    /// subgrid so the value is smooth in `t` (for finite-difference checks).
    pub fn value_time(&self, t: f64, x: &DVector<f64>) -> f64 {
        let e = (-t * &self.a_matrix).exp();
        let mut acc = (self.f0)(&(&e * x));
        let k = 256;
        if t > 0.0 {
            let h = t / k as f64;
            for l in 0..=k {
                let w = if l == 0 || l == k { 0.5 } else { 1.0 };
                let s = l as f64 * h;
                let y = ((s - t) * &self.a_matrix).exp() * x;
                acc += w * h * (self.h0)(s, &y);
            }
        }
        acc
    }

    pub fn grad(&self, t_index: usize, x: &DVector<f64>) -> DVector<f64> {
        let e = &self.exp_cache[t_index];
        let mut acc = e.transpose() * (self.df0)(&(e * x));
        if t_index > 0 {
            let dt = self.grid.dt();
            for l in 0..=t_index {
                let w = if l == 0 || l == t_index { 0.5 } else { 1.0 };
                let es = &self.exp_cache[t_index - l];
                let y = es * x;
                acc += w * dt * es.transpose() * (self.dh0)(self.grid.node(l), &y);
            }
        }
        acc
    }

    pub fn hess(&self, t_index: usize, x: &DVector<f64>) -> DMatrix<f64> {
        let e = &self.exp_cache[t_index];
        let mut acc = e.transpose() * (self.d2f0)(&(e * x)) * e;
        if t_index > 0 {
            let dt = self.grid.dt();
            for l in 0..=t_index {
                let w = if l == 0 || l == t_index { 0.5 } else { 1.0 };
                let es = &self.exp_cache[t_index - l];
                let y = es * x;
                acc += w * dt * es.transpose() * (self.d2h0)(self.grid.node(l), &y) * es;
            }
        }
        acc
    }

    pub fn extension_g(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.h0)(t, x)
    }
}

/// `x + eps * h` on states.
pub fn state_axpy(x: &ProductState, eps: f64, h: &ProductState) -> ProductState {
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(u, v)| u + eps * v).collect()
    };
    ProductState {
        grid: x.grid,
        head: add(&x.head, &h.head),
        tail: x
            .tail
            .iter()
            .zip(&h.tail)
            .map(|(a, b)| add(a, b))
            .collect(),
        tail_left_limit: add(&x.tail_left_limit, &h.tail_left_limit),
    }
}

/// Validates a Frechet bundle against central finite differences.
///
/// Returns the worst relative error over the gradient pairing and the
/// head-Hessian quadratic form.
pub fn frechet_fd_check(
    f: &dyn PathFunctional,
    t_index: usize,
    x: &ProductState,
    h: &ProductState,
    step: f64,
) -> f64 {
    assert!(step > 0.0);
    let bundle = f.frechet(t_index, x);

    let analytic = bundle.pair_direction(&x.grid, h);
    let plus = f.eval(t_index, &state_axpy(x, step, h));
    let minus = f.eval(t_index, &state_axpy(x, -step, h));
    let fd = (plus - minus) / (2.0 * step);
    let mut worst = (analytic - fd).abs() / (1.0 + analytic.abs());

    // Head-only direction for the Hessian quadratic form. The second
    // difference loses about half the working precision to cancellation, so
    // use the square root of the gradient step.
    let hstep = step.sqrt();
    let mut head_dir = ProductState::constant(x.grid, &vec![0.0; x.dim()]).expect("zero state");
    head_dir.head = h.head.clone();
    let analytic_h = bundle.hessian_form(&h.head);
    let p = f.eval(t_index, &state_axpy(x, hstep, &head_dir));
    let c = f.eval(t_index, x);
    let m = f.eval(t_index, &state_axpy(x, -hstep, &head_dir));
    let fd_h = (p - 2.0 * c + m) / (hstep * hstep);
    worst = worst.max((analytic_h - fd_h).abs() / (1.0 + analytic_h.abs()));
    worst
}

/// Residual of the cancellation identity
/// `|[dF/dt(t, x) + <Ax, DF(t, x)>] - G(t, x)|` at a discrete-`~D` state,
/// with the time derivative by central differences and the pairing through
/// the discrete generator. Returns `(residual, g)`.
pub fn cancellation_residual(
    f: &dyn PathFunctional,
    t_index: usize,
    x: &ProductState,
    fd_step: f64,
) -> (f64, f64) {
    let t = x.grid.node(t_index);
    let dfdt =
        (f.eval_time(t + fd_step, x) - f.eval_time(t - fd_step, x)) / (2.0 * fd_step);
    let ax = generator_apply(x).expect("state must satisfy the boundary condition");
    let bundle = f.frechet(t_index, x);
    let pairing = bundle.pair_generator(&x.grid, &ax);
    let g = bundle.extension_g;
    ((dfdt + pairing - g).abs(), g)
}

/// Same residual for the finite-dimensional group functional, where
/// `<Ax, DF>` is an ordinary inner product and `G = H0`.
pub fn cancellation_residual_group(
    f: &GroupFunctional,
    t_index: usize,
    x: &DVector<f64>,
    fd_step: f64,
) -> (f64, f64) {
    let t = f.grid().node(t_index);
    let dfdt = (f.value_time(t + fd_step, x) - f.value_time(t - fd_step, x)) / (2.0 * fd_step);
    let pairing = (f.a_matrix() * x).dot(&f.grad(t_index, x));
    let g = f.extension_g(t, x);
    ((dfdt + pairing - g).abs(), g)
}

trait Axpy {
    fn axpy(&mut self, a: f64, other: &Self);
}

impl Axpy for f64 {
    fn axpy(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
}

impl Axpy for Vec<f64> {
    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.iter_mut().zip(other) {
            *x += a * y;
        }
    }
}

impl Axpy for Vec<Vec<f64>> {
    fn axpy(&mut self, a: f64, other: &Self) {
        for (row, orow) in self.iter_mut().zip(other) {
            row.axpy(a, orow);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::{lift, WindowPath};

    fn bilinear() -> IntegralFunctional {
        // g(a, b) = a * b, scalar head.
        IntegralFunctional::new(
            Box::new(|a, b| a[0] * b[0]),
            Box::new(|_a, b| vec![b[0]]),
            Box::new(|a, _b| vec![a[0]]),
            Box::new(|_a, _b| vec![vec![0.0]]),
        )
    }

    fn tail_only() -> IntegralFunctional {
        // g(a, b) = b.
        IntegralFunctional::new(
            Box::new(|_a, b| b[0]),
            Box::new(|_a, _b| vec![0.0]),
            Box::new(|_a, _b| vec![1.0]),
            Box::new(|_a, _b| vec![vec![0.0]]),
        )
    }

    fn qsecond(t0_index: usize) -> PointEvalFunctional {
        // q(a, b) = b.
        PointEvalFunctional::new(
            Box::new(|_a, b| b[0]),
            Box::new(|_a, _b| vec![0.0]),
            Box::new(|_a, _b| vec![1.0]),
            Box::new(|_a, _b| vec![vec![0.0]]),
            t0_index,
        )
    }

    fn smooth_state(grid: TimeGrid, k: f64) -> ProductState {
        ProductState::from_tail_fn(grid, 1, |r| vec![(k * r).sin() + 0.5 * r * r + 1.0]).unwrap()
    }

    #[test]
    fn integral_tail_only_values() {
        // g(a,b) = b: F = int_{-t}^0 x2, G = x1, grad_head = 0, hess = 0.
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let x = ProductState::from_tail_fn(grid, 1, |r| vec![r]).unwrap();
        let f = tail_only();
        let t_idx = 64;
        // int_{-1/2}^0 r dr = -1/8.
        assert!((f.eval(t_idx, &x) + 0.125).abs() < 1e-12);
        let b = f.frechet(t_idx, &x);
        assert_eq!(b.grad_head, vec![0.0]);
        assert_eq!(b.hess_head, vec![vec![0.0]]);
        assert!((b.extension_g - 0.0).abs() < 1e-15); // x1 = tail(0^-) = 0
    }

    #[test]
    fn integral_extension_is_g_on_diagonal() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let x = smooth_state(grid, 2.0);
        let f = bilinear();
        let b = f.frechet(32, &x);
        assert!((b.extension_g - x.head[0] * x.head[0]).abs() < 1e-14);
    }

    #[test]
    fn integral_directional_derivative_matches_fd() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let x = smooth_state(grid, 3.0);
        let h = ProductState::from_tail_fn(grid, 1, |r| vec![(2.0 * r).cos()]).unwrap();
        for t_idx in [1usize, 37, 128] {
            let err = frechet_fd_check(&bilinear(), t_idx, &x, &h, 1e-5);
            assert!(err < 1e-8, "t_idx = {t_idx}: err = {err}");
        }
    }

    #[test]
    fn integral_eval_time_matches_grid_eval() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let x = smooth_state(grid, 2.0);
        let f = bilinear();
        for t_idx in [0usize, 1, 50, 128] {
            let a = f.eval(t_idx, &x);
            let b = f.eval_time(grid.node(t_idx), &x);
            assert!((a - b).abs() < 1e-13, "t_idx = {t_idx}");
        }
    }

    #[test]
    fn pointeval_values_and_jump() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let t0 = 32usize;
        let f = qsecond(t0);
        // Build X(t) = L^t y_t for y(s) = sin(3 s); value at t > t0 is y(t0).
        let values: Vec<Vec<f64>> = (0..=48).map(|i| vec![(3.0 * grid.node(i)).sin()]).collect();
        let w = WindowPath::continuous(grid, values).unwrap();
        let x = lift(&w);
        let y_t0 = (3.0 * grid.node(t0)).sin();
        assert!((f.eval(48, &x) - y_t0).abs() < 1e-14);

        // t < t0: zero value, all-zero bundle.
        let b = f.frechet(10, &x);
        assert_eq!(b.value, 0.0);
        assert_eq!(b.grad_head, vec![0.0]);
        assert!(b.tail_atoms.is_empty());

        // Jump at t0 equals q(x1, x2(0^-)).
        let w0 = WindowPath::continuous(
            grid,
            (0..=t0).map(|i| vec![(3.0 * grid.node(i)).sin()]).collect(),
        )
        .unwrap();
        let x0 = lift(&w0);
        assert!((f.jump_value(t0, &x0) - y_t0).abs() < 1e-14);
        assert_eq!(f.jump_times(), vec![t0]);
    }

    #[test]
    fn pointeval_fd_check_away_from_jump() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let x = smooth_state(grid, 1.5);
        let h = ProductState::from_tail_fn(grid, 1, |r| vec![r + 0.2]).unwrap();
        let f = qsecond(64);
        for t_idx in [80usize, 100, 128] {
            let err = frechet_fd_check(&f, t_idx, &x, &h, 1e-5);
            assert!(err < 1e-9, "t_idx = {t_idx}: err = {err}");
        }
    }

    #[test]
    fn cancellation_integral() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let x = smooth_state(grid, 2.0);
        let f = bilinear();
        for t_idx in [64usize, 256, 448] {
            let (res, g) = cancellation_residual(&f, t_idx, &x, 1e-4);
            assert!(res <= 1e-2 * (1.0 + g.abs()), "t_idx = {t_idx}: res = {res}");
            assert!((g - x.head[0] * x.head[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn cancellation_pointeval() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let x = smooth_state(grid, 2.0);
        let f = qsecond(128);
        for t_idx in [192usize, 320, 448] {
            let (res, g) = cancellation_residual(&f, t_idx, &x, 1e-4);
            assert_eq!(g, 0.0);
            assert!(res <= 1e-2, "t_idx = {t_idx}: res = {res}");
        }
    }

    fn rotation() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])
    }

    fn generic_group(grid: TimeGrid) -> GroupFunctional {
        GroupFunctional::new(
            rotation(),
            grid,
            Box::new(|x| x[0].sin() + x[0] * x[1]),
            Box::new(|x| DVector::from_vec(vec![x[0].cos() + x[1], x[0]])),
            Box::new(|x| DMatrix::from_row_slice(2, 2, &[-x[0].sin(), 1.0, 1.0, 0.0])),
            Box::new(|t, x| x[0] * x[0] + t * x[1]),
            Box::new(|t, x| DVector::from_vec(vec![2.0 * x[0], t])),
            Box::new(|_t, _x| DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])),
        )
    }

    #[test]
    fn group_rotation_invariance() {
        // H0 = 0, F0 = |x|^2, A skew: F(t, x) = |x|^2 for all t.
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let f = GroupFunctional::new(
            rotation(),
            grid,
            Box::new(|x| x.norm_squared()),
            Box::new(|x| 2.0 * x),
            Box::new(|x| 2.0 * DMatrix::identity(x.len(), x.len())),
            Box::new(|_t, _x| 0.0),
            Box::new(|_t, x| DVector::zeros(x.len())),
            Box::new(|_t, x| DMatrix::zeros(x.len(), x.len())),
        );
        let x = DVector::from_vec(vec![0.6, -0.8]);
        for t_idx in [0usize, 17, 64] {
            assert!((f.value(t_idx, &x) - 1.0).abs() < 1e-12);
            assert!((f.extension_g(grid.node(t_idx), &x)).abs() == 0.0);
        }
    }

    #[test]
    fn group_gradient_matches_fd() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let f = generic_group(grid);
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let h = DVector::from_vec(vec![-0.5, 0.4]);
        let step = 1e-5;
        for t_idx in [0usize, 40, 128] {
            let analytic = f.grad(t_idx, &x).dot(&h);
            let fd = (f.value(t_idx, &(&x + step * &h)) - f.value(t_idx, &(&x - step * &h)))
                / (2.0 * step);
            assert!((analytic - fd).abs() < 1e-7, "t_idx = {t_idx}");
            let qa = (&f.hess(t_idx, &x) * &h).dot(&h);
            let qfd = (f.value(t_idx, &(&x + step * &h)) - 2.0 * f.value(t_idx, &x)
                + f.value(t_idx, &(&x - step * &h)))
                / (step * step);
            assert!((qa - qfd).abs() < 1e-4, "hessian at t_idx = {t_idx}");
        }
    }

    #[test]
    fn group_time_derivative_cancellation() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let f = generic_group(grid);
        let x = DVector::from_vec(vec![0.4, -0.2]);
        for t_idx in [32usize, 128, 224] {
            let (res, g) = cancellation_residual_group(&f, t_idx, &x, 1e-4);
            assert!(res <= 1e-2 * (1.0 + g.abs()), "t_idx = {t_idx}: res = {res}");
        }
    }

    #[test]
    fn group_rotation_time_derivative_fd() {
        // F0(x) = x . v, H0 = 0: dF/dt = -<DF0(e^{-tA}x), e^{-tA} A x>.
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let vc = v.clone();
        let f = GroupFunctional::new(
            rotation(),
            grid,
            Box::new(move |x| x.dot(&v)),
            Box::new(move |_x| vc.clone()),
            Box::new(|_x| DMatrix::zeros(2, 2)),
            Box::new(|_t, _x| 0.0),
            Box::new(|_t, _x| DVector::zeros(2)),
            Box::new(|_t, _x| DMatrix::zeros(2, 2)),
        );
        let x = DVector::from_vec(vec![0.5, 0.1]);
        let t = 0.3;
        let h = 1e-5;
        let fd = (f.value_time(t + h, &x) - f.value_time(t - h, &x)) / (2.0 * h);
        let e = (-t * f.a_matrix()).exp();
        let analytic = -DVector::from_vec(vec![1.0, 2.0]).dot(&(&e * (f.a_matrix() * &x)));
        assert!((fd - analytic).abs() < 1e-8);
    }
}
