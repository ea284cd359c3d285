//! Brownian drivers and process simulation: reproducible counter-based noise,
//! refinement-consistent increments, path-dependent Euler-Maruyama, lifting of
//! simulated windows into product states, and the mild group process.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PathflowError, Result};
use crate::pathspace::{ProductState, TimeGrid};

const TAG_BASE: u64 = 0x42_41_53_45; // "BASE"
const TAG_BRIDGE: u64 = 0x42_52_44_47; // "BRDG"

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless uniform draw keyed by a counter tuple; every call with the same
/// key returns the same value regardless of call order or thread.
fn counter_uniform(seed: u64, words: &[u64]) -> f64 {
    let mut h = mix64(seed);
    for &w in words {
        h = mix64(h ^ mix64(w));
    }
    // 53 random bits, offset to stay strictly inside (0, 1).
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn counter_normal(seed: u64, words: &[u64]) -> f64 {
    let std_normal = Normal::standard();
    std_normal.inverse_cdf(counter_uniform(seed, words))
}

/// Rounds to the absolute dyadic grid of spacing `2^-52`. All increments are
/// kept on this grid so that a bridge split `(a, delta - a)` sums back to
/// `delta` without rounding: every child is an exact multiple of the spacing
/// and the subtraction is exact. The grid error (about 2e-16) is far below
/// the increments' statistical scale.
fn quantize(x: f64) -> f64 {
    let s = (1u64 << 52) as f64;
    (x * s).round() / s
}

/// Brownian increments on a grid, reproducible from `(seed, path_index)` and
/// refinable by Brownian-bridge splitting: each coarse increment is exactly
/// the sum of its two children.
#[derive(Debug, Clone)]
pub struct BrownianDriver {
    grid: TimeGrid,
    k: usize,
    seed: u64,
    path_index: u64,
    level: u32,
    increments: Vec<Vec<f64>>,
}

impl BrownianDriver {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Increment over step `l`, an `R^k` vector with variance `dt` per
    /// component.
    pub fn increment(&self, l: usize) -> &[f64] {
        &self.increments[l]
    }

    pub fn increments(&self) -> &[Vec<f64>] {
        &self.increments
    }

    /// Cumulative path `W(t_l)`, `l = 0..=n`, starting at zero.
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.grid.n_steps() + 1);
        out.push(vec![0.0; self.k]);
        for inc in &self.increments {
            let prev = out.last().unwrap();
            out.push(prev.iter().zip(inc).map(|(a, b)| a + b).collect());
        }
        out
    }

    /// Doubles the grid by conditional midpoint sampling. The two children of
    /// a coarse increment sum back to it exactly (bit for bit), so ledger
    /// studies across refinement levels share the same Brownian path.
    pub fn refine(&self) -> Result<BrownianDriver> {
        let n = self.grid.n_steps();
        let fine_grid = TimeGrid::new(self.grid.horizon(), 2 * n)?;
        // Midpoint of a bridge over one coarse step: half the increment plus
        // an independent N(0, dt/4) offset.
        let half_sd = 0.5 * self.grid.dt().sqrt();
        let mut increments = Vec::with_capacity(2 * n);
        for l in 0..n {
            let mut first = vec![0.0; self.k];
            let mut second = vec![0.0; self.k];
            for c in 0..self.k {
                let delta = self.increments[l][c];
                let xi = half_sd
                    * counter_normal(
                        self.seed,
                        &[
                            TAG_BRIDGE,
                            self.path_index,
                            (self.level + 1) as u64,
                            l as u64,
                            c as u64,
                        ],
                    );
                let a = quantize(0.5 * delta + xi);
                let b = delta - a;
                if a + b != delta {
                    return Err(PathflowError::NonFinite(
                        "refinement split failed to reproduce coarse increment".into(),
                    ));
                }
                first[c] = a;
                second[c] = b;
            }
            increments.push(first);
            increments.push(second);
        }
        Ok(BrownianDriver {
            grid: fine_grid,
            k: self.k,
            seed: self.seed,
            path_index: self.path_index,
            level: self.level + 1,
            increments,
        })
    }
}

/// Fresh increments from the counter generator, `N(0, dt I_k)` per step.
pub fn sample_brownian(
    grid: TimeGrid,
    k: usize,
    seed: u64,
    path_index: u64,
) -> BrownianDriver {
    let sd = grid.dt().sqrt();
    let increments = (0..grid.n_steps())
        .map(|l| {
            (0..k)
                .map(|c| {
                    quantize(
                        sd * counter_normal(seed, &[TAG_BASE, path_index, l as u64, c as u64]),
                    )
                })
                .collect()
        })
        .collect();
    BrownianDriver {
        grid,
        k,
        seed,
        path_index,
        level: 0,
        increments,
    }
}

/// Borrowed view of the simulated path up to the current node; coefficient
/// closures read it without copying.
pub struct WindowView<'a> {
    grid: &'a TimeGrid,
    values: &'a [Vec<f64>],
}

impl<'a> WindowView<'a> {
    pub fn new(grid: &'a TimeGrid, values: &'a [Vec<f64>]) -> Self {
        assert!(!values.is_empty(), "window must contain the initial node");
        WindowView { grid, values }
    }

    /// Index of the current node (window covers `[0, t_index]`).
    pub fn t_index(&self) -> usize {
        self.values.len() - 1
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    pub fn value(&self, l: usize) -> &[f64] {
        &self.values[l]
    }

    pub fn current(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// Node average of the window, one entry per component.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.values[0].len();
        let mut out = vec![0.0; d];
        for v in self.values {
            for i in 0..d {
                out[i] += v[i];
            }
        }
        let m = self.values.len() as f64;
        out.iter_mut().for_each(|v| *v /= m);
        out
    }
}

pub type DriftFn = Box<dyn Fn(f64, &WindowView) -> Vec<f64> + Send + Sync>;
pub type DiffusionFn = Box<dyn Fn(f64, &WindowView) -> Vec<Vec<f64>> + Send + Sync>;

/// Path-dependent SDE coefficients: drift into `R^d`, diffusion into
/// `R^{d x k}`, both reading the window of the solution so far.
pub struct SdeModel {
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub initial: Vec<f64>,
}

impl SdeModel {
    pub fn dim(&self) -> usize {
        self.initial.len()
    }
}

/// Euler-Maruyama with left-point coefficients:
/// `y_{l+1} = y_l + b(t_l, window) dt + sigma(t_l, window) dW_l`.
/// Returns the node values `y(t_l)`, `l = 0..=n`.
pub fn euler_pathdep(model: &SdeModel, driver: &BrownianDriver) -> Result<Vec<Vec<f64>>> {
    euler_pathdep_from(model, driver, vec![model.initial.clone()])
}

/// Continues the Euler scheme from an already-known window (node values up to
/// some grid node), consuming driver increments from there on. Used to
/// restart the SDE from a restricted product state.
pub fn euler_pathdep_from(
    model: &SdeModel,
    driver: &BrownianDriver,
    window: Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let grid = driver.grid();
    let n = grid.n_steps();
    let d = model.dim();
    let k = driver.noise_dim();
    let dt = grid.dt();
    assert!(
        !window.is_empty() && window.len() <= n + 1,
        "window must cover at least the initial node"
    );
    let from = window.len() - 1;
    let mut y = window;
    y.reserve(n + 1 - y.len());
    for l in from..n {
        let t = grid.node(l);
        let (b, sigma) = {
            let view = WindowView {
                grid,
                values: &y,
            };
            ((model.drift)(t, &view), (model.diffusion)(t, &view))
        };
        let dw = driver.increment(l);
        let prev = &y[l];
        let mut next = vec![0.0; d];
        for i in 0..d {
            let mut v = prev[i] + b[i] * dt;
            for c in 0..k {
                v += sigma[i][c] * dw[c];
            }
            if !v.is_finite() {
                return Err(PathflowError::NonFinite(format!(
                    "euler step {l}, component {i}"
                )));
            }
            next[i] = v;
        }
        y.push(next);
    }
    Ok(y)
}

/// Lift of the simulated window at a node: `X(t) = L^t y_t`, with the
/// prehistory flattened to the initial value.
pub fn lift_process(grid: &TimeGrid, y: &[Vec<f64>], t_index: usize) -> Result<ProductState> {
    let n = grid.n_steps();
    if t_index > n || y.len() <= t_index {
        return Err(PathflowError::IndexOutOfBounds {
            index: t_index,
            n_steps: n,
        });
    }
    let tail = (0..n)
        .map(|j| {
            if j + t_index < n {
                y[0].clone()
            } else {
                y[t_index + j - n].clone()
            }
        })
        .collect();
    Ok(ProductState {
        grid: *grid,
        head: y[t_index].clone(),
        tail,
        tail_left_limit: y[t_index].clone(),
    })
}

/// In-place variant of [`lift_process`] reusing an existing state's buffers,
/// for per-node lifting loops that would otherwise allocate quadratically.
pub fn lift_process_into(
    grid: &TimeGrid,
    y: &[Vec<f64>],
    t_index: usize,
    state: &mut ProductState,
) {
    let n = grid.n_steps();
    for j in 0..n {
        let src = if j + t_index < n {
            &y[0]
        } else {
            &y[t_index + j - n]
        };
        state.tail[j].copy_from_slice(src);
    }
    state.head.copy_from_slice(&y[t_index]);
    state.tail_left_limit.copy_from_slice(&y[t_index]);
}

pub type GroupCoeffFn = Box<dyn Fn(f64, &[DVector<f64>]) -> DVector<f64> + Send + Sync>;
pub type GroupDiffFn = Box<dyn Fn(f64, &[DVector<f64>]) -> DMatrix<f64> + Send + Sync>;

/// Mild solution of `dX = (A X + B) dt + C dW` on `R^m` by the
/// variation-of-constants accumulation
/// `X(t_l) = e^{t_l A} (x0 + sum e^{-t_j A} (B_j dt + C_j dW_j))`,
/// with the matrix exponentials cached per node.
pub fn group_mild_process(
    a_matrix: &DMatrix<f64>,
    x0: &DVector<f64>,
    b_fn: &GroupCoeffFn,
    c_fn: &GroupDiffFn,
    driver: &BrownianDriver,
) -> Result<Vec<DVector<f64>>> {
    let grid = driver.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let m = a_matrix.nrows();
    let step_fwd = (dt * a_matrix).exp();
    let step_bwd = (-dt * a_matrix).exp();
    let mut fwd = DMatrix::identity(m, m);
    let mut bwd = DMatrix::identity(m, m);

    let mut acc = x0.clone();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    for l in 0..n {
        let t = grid.node(l);
        let b = (b_fn)(t, &states);
        let c = (c_fn)(t, &states);
        let dw = DVector::from_column_slice(driver.increment(l));
        // bwd = e^{-t_l A} here.
        acc += &bwd * (b * dt + c * dw);
        fwd *= &step_fwd;
        bwd *= &step_bwd;
        let x = &fwd * &acc;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PathflowError::NonFinite(format!("group step {l}")));
        }
        states.push(x);
    }
    Ok(states)
}
