//! Verification harness: per-path Ito ledgers, Feynman-Kac estimates,
//! martingale drift checks, and convergence studies over refined Brownian
//! paths.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PathflowError, Result};
use crate::functionals::{GroupFunctional, PathFunctional};
use crate::pathspace::{in_tilde_e, restrict, ProductState, TimeGrid, TOL_E};
use crate::simulate::{
    euler_pathdep, euler_pathdep_from, group_mild_process, lift_process, lift_process_into,
    sample_brownian, BrownianDriver, GroupCoeffFn, GroupDiffFn, SdeModel, WindowView,
};

/// Both sides of the Ito identity accumulated along one path. The residual is
/// `lhs` minus the sum of the five right-hand terms.
#[derive(Debug, Clone, Serialize)]
pub struct ItoLedger {
    pub lhs: f64,
    pub term_g: f64,
    pub term_drift: f64,
    pub term_trace: f64,
    pub term_stoch: f64,
    pub term_jumps: f64,
    pub residual: f64,
}

impl ItoLedger {
    fn close(
        lhs: f64,
        term_g: f64,
        term_drift: f64,
        term_trace: f64,
        term_stoch: f64,
        term_jumps: f64,
    ) -> Result<ItoLedger> {
        let residual = lhs - (term_g + term_drift + term_trace + term_stoch + term_jumps);
        if !residual.is_finite() {
            return Err(PathflowError::NonFinite("ito ledger".into()));
        }
        Ok(ItoLedger {
            lhs,
            term_g,
            term_drift,
            term_trace,
            term_stoch,
            term_jumps,
            residual,
        })
    }
}

/// Per-level RMS residuals of an Ito ledger over shared Brownian paths, with
/// a least-squares slope on the log-log scale.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub n_list: Vec<usize>,
    pub rms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub m_paths: usize,
    pub seed: u64,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub m_paths: usize,
}

impl MonteCarloEstimate {
    fn from_samples(samples: &[f64]) -> MonteCarloEstimate {
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        MonteCarloEstimate {
            mean,
            std_error: (var / m).sqrt(),
            m_paths: samples.len(),
        }
    }
}

/// Accumulates the Ito identity of the lifted process `X(t) = L^t y_t` along
/// one simulated path: Lebesgue terms by trapezoid, the stochastic term by
/// left-point sums with the same increments that drove the simulation, jumps
/// at the functional's jump times.
pub fn ito_ledger(
    f: &dyn PathFunctional,
    model: &SdeModel,
    driver: &BrownianDriver,
) -> Result<ItoLedger> {
    let grid = *driver.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let d = model.dim();
    let k = driver.noise_dim();
    let y = euler_pathdep(model, driver)?;

    let jump_times = f.jump_times();
    let mut state = ProductState::constant(grid, &vec![0.0; d]).expect("scratch state");

    let mut lhs_start = 0.0;
    let mut lhs_end = 0.0;
    let mut term_g = 0.0;
    let mut term_drift = 0.0;
    let mut term_trace = 0.0;
    let mut term_stoch = 0.0;
    let mut term_jumps = 0.0;
    // Previous node's trapezoid integrands.
    let mut prev = (0.0, 0.0, 0.0);
    for l in 0..=n {
        lift_process_into(&grid, &y, l, &mut state);
        let bundle = f.ledger_terms(l, &state);
        let t = grid.node(l);
        let view = WindowView::new(&grid, &y[..=l]);
        let b = (model.drift)(t, &view);
        let sigma = (model.diffusion)(t, &view);

        let drift_val: f64 = (0..d).map(|i| b[i] * bundle.grad_head[i]).sum();
        let mut trace_val = 0.0;
        for i in 0..d {
            for j in 0..d {
                let mut a_ij = 0.0;
                for c in 0..k {
                    a_ij += sigma[i][c] * sigma[j][c];
                }
                trace_val += a_ij * bundle.hess_head[i][j];
            }
        }
        trace_val *= 0.5;

        if l == 0 {
            lhs_start = bundle.value;
        } else {
            term_g += 0.5 * dt * (prev.0 + bundle.extension_g);
            term_drift += 0.5 * dt * (prev.1 + drift_val);
            term_trace += 0.5 * dt * (prev.2 + trace_val);
        }
        if l == n {
            lhs_end = bundle.value;
        } else {
            let dw = driver.increment(l);
            for i in 0..d {
                let mut noise = 0.0;
                for c in 0..k {
                    noise += sigma[i][c] * dw[c];
                }
                term_stoch += bundle.grad_head[i] * noise;
            }
        }
        if jump_times.contains(&l) {
            term_jumps += f.jump_value(l, &state);
        }
        prev = (bundle.extension_g, drift_val, trace_val);
    }
    ItoLedger::close(
        lhs_end - lhs_start,
        term_g,
        term_drift,
        term_trace,
        term_stoch,
        term_jumps,
    )
}

/// Same ledger for the finite-dimensional group instance over the mild
/// process; the trace contracts the full Hessian.
pub fn ito_ledger_group(
    f: &GroupFunctional,
    a_matrix: &DMatrix<f64>,
    b_fn: &GroupCoeffFn,
    c_fn: &GroupDiffFn,
    x0: &DVector<f64>,
    driver: &BrownianDriver,
) -> Result<ItoLedger> {
    let grid = *driver.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let states = group_mild_process(a_matrix, x0, b_fn, c_fn, driver)?;

    let mut lhs_start = 0.0;
    let mut lhs_end = 0.0;
    let mut term_g = 0.0;
    let mut term_drift = 0.0;
    let mut term_trace = 0.0;
    let mut term_stoch = 0.0;
    let mut prev = (0.0, 0.0, 0.0);
    for l in 0..=n {
        let t = grid.node(l);
        let x = &states[l];
        let value = f.value(l, x);
        let grad = f.grad(l, x);
        let hess = f.hess(l, x);
        let b = (b_fn)(t, &states[..=l]);
        let c = (c_fn)(t, &states[..=l]);

        let g_val = f.extension_g(t, x);
        let drift_val = b.dot(&grad);
        let trace_val = 0.5 * (&c * c.transpose() * &hess).trace();

        if l == 0 {
            lhs_start = value;
        } else {
            term_g += 0.5 * dt * (prev.0 + g_val);
            term_drift += 0.5 * dt * (prev.1 + drift_val);
            term_trace += 0.5 * dt * (prev.2 + trace_val);
        }
        if l == n {
            lhs_end = value;
        } else {
            let dw = DVector::from_column_slice(driver.increment(l));
            term_stoch += grad.dot(&(&c * dw));
        }
        prev = (g_val, drift_val, trace_val);
    }
    ItoLedger::close(lhs_end - lhs_start, term_g, term_drift, term_trace, term_stoch, 0.0)
}

/// Feynman-Kac estimate `E[phi(X^{t,x}(T))]`: restart the SDE from the
/// restriction of `x` at the given node and average the terminal functional
/// of the lifted endpoint. Refuses states off the boundary-matched subspace,
/// where the representation does not hold.
pub fn feynman_kac(
    phi: &(dyn Fn(&ProductState) -> f64 + Sync),
    model: &SdeModel,
    t_index: usize,
    x: &ProductState,
    m_paths: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if !in_tilde_e(x, TOL_E) {
        return Err(PathflowError::DomainViolation(
            "feynman-kac start state must have head equal to the tail left limit".into(),
        ));
    }
    if m_paths < 2 {
        return Err(PathflowError::InvalidConfig("need at least two paths".into()));
    }
    let grid = x.grid;
    let window = restrict(t_index, x)?;
    let base: Vec<Vec<f64>> = window.values[..=t_index].to_vec();
    let samples: Result<Vec<f64>> = (0..m_paths as u64)
        .into_par_iter()
        .map(|p| {
            let driver = sample_brownian(grid, model.dim(), seed, p);
            let y = euler_pathdep_from(model, &driver, base.clone())?;
            let x_t = lift_process(&grid, &y, grid.n_steps())?;
            Ok(phi(&x_t))
        })
        .collect();
    Ok(MonteCarloEstimate::from_samples(&samples?))
}

/// Sample drift of a candidate Kolmogorov solution along the mild process:
/// mean and standard error of `F(T, X(T)) - F(0, x0)` over `m_paths` paths.
/// For an exact solution the mean vanishes within sampling error.
pub fn kolmogorov_group_martingale(
    f_val: &(dyn Fn(f64, &DVector<f64>) -> f64 + Sync),
    a_matrix: &DMatrix<f64>,
    b_fn: &GroupCoeffFn,
    c_fn: &GroupDiffFn,
    x0: &DVector<f64>,
    grid: TimeGrid,
    m_paths: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if m_paths < 2 {
        return Err(PathflowError::InvalidConfig("need at least two paths".into()));
    }
    let start = f_val(0.0, x0);
    let horizon = grid.horizon();
    let k = a_matrix.nrows();
    let samples: Result<Vec<f64>> = (0..m_paths as u64)
        .into_par_iter()
        .map(|p| {
            let driver = sample_brownian(grid, k, seed, p);
            let states = group_mild_process(a_matrix, x0, b_fn, c_fn, &driver)?;
            Ok(f_val(horizon, states.last().unwrap()) - start)
        })
        .collect();
    Ok(MonteCarloEstimate::from_samples(&samples?))
}

/// RMS ledger residuals across a doubling chain of grids with shared Brownian
/// paths. The per-path closure receives the level index and the driver for
/// that level and returns one residual.
pub fn convergence_study<F>(
    n_list: &[usize],
    m_paths: usize,
    seed: u64,
    noise_dim: usize,
    horizon: f64,
    per_path: F,
) -> Result<ConvergenceReport>
where
    F: Fn(usize, &BrownianDriver) -> Result<f64> + Sync,
{
    if n_list.len() < 2 {
        return Err(PathflowError::InvalidConfig(
            "need at least two grid sizes".into(),
        ));
    }
    for w in n_list.windows(2) {
        if w[1] != 2 * w[0] {
            return Err(PathflowError::InvalidConfig(
                "grid sizes must form a doubling chain so paths can be shared".into(),
            ));
        }
    }
    let base_grid = TimeGrid::new(horizon, n_list[0])?;
    let levels = n_list.len();
    // One row of squared residuals per path, in fixed path order.
    let rows: Result<Vec<Vec<f64>>> = (0..m_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut driver = sample_brownian(base_grid, noise_dim, seed, p);
            let mut row = Vec::with_capacity(levels);
            for level in 0..levels {
                if level > 0 {
                    driver = driver.refine()?;
                }
                let r = per_path(level, &driver)?;
                row.push(r * r);
            }
            Ok(row)
        })
        .collect();
    let rows = rows?;
    let mut rms = vec![0.0f64; levels];
    for row in &rows {
        for (acc, v) in rms.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in rms.iter_mut() {
        *v = (*v / m_paths as f64).sqrt();
    }
    let (slope, intercept) = log_log_fit(n_list, &rms);
    Ok(ConvergenceReport {
        n_list: n_list.to_vec(),
        rms,
        slope,
        intercept,
        m_paths,
        seed,
    })
}

fn log_log_fit(n_list: &[usize], rms: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = n_list
        .iter()
        .zip(rms)
        .map(|(&n, &r)| ((n as f64).ln(), r.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let intercept = (sy - slope * sx) / m;
    (slope, intercept)
}

/// Sup-norm error table of the mollifier operator over test tails.
#[derive(Debug, Clone, Serialize)]
pub struct MollifierRow {
    pub name: String,
    pub errors: Vec<f64>,
}

pub fn mollifier_convergence(
    tails: &[(String, ProductState)],
    n_list: &[u32],
) -> Result<Vec<MollifierRow>> {
    let mut out = Vec::with_capacity(tails.len());
    for (name, state) in tails {
        let mut errors = Vec::with_capacity(n_list.len());
        for &n in n_list {
            let kernel = crate::smoothing::SmoothingKernel::build(n, &state.grid)?;
            let smoothed = crate::smoothing::smooth_state(&kernel, state);
            errors.push(crate::smoothing::tail_sup_dist(&smoothed, state));
        }
        out.push(MollifierRow {
            name: name.clone(),
            errors,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{IntegralFunctional, PointEvalFunctional};
    use crate::pathspace::lift;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    fn tail_only_functional() -> IntegralFunctional {
        IntegralFunctional::new(
            Box::new(|_a, b| b[0]),
            Box::new(|_a, _b| vec![0.0]),
            Box::new(|_a, _b| vec![1.0]),
            Box::new(|_a, _b| vec![vec![0.0]]),
        )
    }

    fn bilinear_functional() -> IntegralFunctional {
        IntegralFunctional::new(
            Box::new(|a, b| a[0] * b[0]),
            Box::new(|_a, b| vec![b[0]]),
            Box::new(|a, _b| vec![a[0]]),
            Box::new(|_a, _b| vec![vec![0.0]]),
        )
    }

    fn mean_reverting_model() -> SdeModel {
        SdeModel {
            drift: Box::new(|_t, w: &WindowView| vec![-w.mean()[0]]),
            diffusion: Box::new(|_t, _w| vec![vec![1.0]]),
            initial: vec![0.5],
        }
    }

    #[test]
    fn ledger_tail_only_is_pure_quadrature() {
        // g(a, b) = b: no derivative terms; lhs and term_g are the same
        // trapezoid over the path, so the residual is roundoff.
        let f = tail_only_functional();
        let model = mean_reverting_model();
        let driver = sample_brownian(grid(128), 1, 21, 0);
        let ledger = ito_ledger(&f, &model, &driver).unwrap();
        assert_eq!(ledger.term_drift, 0.0);
        assert_eq!(ledger.term_trace, 0.0);
        assert_eq!(ledger.term_stoch, 0.0);
        assert!(ledger.residual.abs() < 1e-12, "residual {}", ledger.residual);
    }

    #[test]
    fn ledger_pointeval_reduces_to_jump() {
        let f = PointEvalFunctional::new(
            Box::new(|_a, b| b[0]),
            Box::new(|_a, _b| vec![0.0]),
            Box::new(|_a, _b| vec![1.0]),
            Box::new(|_a, _b| vec![vec![0.0]]),
            32,
        );
        let model = mean_reverting_model();
        for p in 0..5 {
            let driver = sample_brownian(grid(64), 1, 33, p);
            let y = euler_pathdep(&model, &driver).unwrap();
            let ledger = ito_ledger(&f, &model, &driver).unwrap();
            assert!((ledger.lhs - y[32][0]).abs() < 1e-14);
            assert!((ledger.term_jumps - y[32][0]).abs() < 1e-14);
            assert!(ledger.residual.abs() < 1e-12, "path {p}: {}", ledger.residual);
        }
    }

    #[test]
    fn ledger_bilinear_residual_decays() {
        let f = bilinear_functional();
        let model = mean_reverting_model();
        let report = convergence_study(&[32, 64, 128], 80, 5, 1, 1.0, |_lvl, drv| {
            ito_ledger(&f, &model, drv).map(|l| l.residual)
        })
        .unwrap();
        assert!(
            report.rms[1] < report.rms[0] && report.rms[2] < report.rms[1],
            "rms {:?}",
            report.rms
        );
        assert!(report.slope < -0.3, "slope {}", report.slope);
    }

    #[test]
    fn group_ledger_rotation_invariant_all_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let g = grid(64);
        let f = GroupFunctional::new(
            a.clone(),
            g,
            Box::new(|x| x.norm_squared()),
            Box::new(|x| 2.0 * x),
            Box::new(|x| 2.0 * DMatrix::identity(x.len(), x.len())),
            Box::new(|_t, _x| 0.0),
            Box::new(|_t, x| DVector::zeros(x.len())),
            Box::new(|_t, x| DMatrix::zeros(x.len(), x.len())),
        );
        let zero_b: GroupCoeffFn = Box::new(|_t, _s| DVector::zeros(2));
        let zero_c: GroupDiffFn = Box::new(|_t, _s| DMatrix::zeros(2, 2));
        let x0 = DVector::from_vec(vec![0.6, -0.8]);
        let driver = sample_brownian(g, 2, 7, 0);
        let ledger = ito_ledger_group(&f, &a, &zero_b, &zero_c, &x0, &driver).unwrap();
        for v in [
            ledger.lhs,
            ledger.term_g,
            ledger.term_drift,
            ledger.term_trace,
            ledger.term_stoch,
            ledger.residual,
        ] {
            assert!(v.abs() < 1e-10, "ledger not null: {ledger:?}");
        }
    }

    #[test]
    fn group_ledger_h0_norm_squared_deterministic() {
        // H0 = |x|^2, B = C = 0, A skew: F0 = 0 gives
        // lhs = int_0^T |e^{-(T-s)A} x0|^2 ds = T |x0|^2 = term_g.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let g = grid(128);
        let f = GroupFunctional::new(
            a.clone(),
            g,
            Box::new(|_x| 0.0),
            Box::new(|x| DVector::zeros(x.len())),
            Box::new(|x| DMatrix::zeros(x.len(), x.len())),
            Box::new(|_t, x| x.norm_squared()),
            Box::new(|_t, x| 2.0 * x),
            Box::new(|_t, x| 2.0 * DMatrix::identity(x.len(), x.len())),
        );
        let zero_b: GroupCoeffFn = Box::new(|_t, _s| DVector::zeros(2));
        let zero_c: GroupDiffFn = Box::new(|_t, _s| DMatrix::zeros(2, 2));
        let x0 = DVector::from_vec(vec![0.3, 0.4]);
        let driver = sample_brownian(g, 2, 2, 0);
        let ledger = ito_ledger_group(&f, &a, &zero_b, &zero_c, &x0, &driver).unwrap();
        let exact = 0.25; // T |x0|^2
        assert!((ledger.lhs - exact).abs() < 1e-10, "lhs {}", ledger.lhs);
        assert!((ledger.term_g - exact).abs() < 1e-10);
        // Drift term uses B = 0, stochastic term C = 0.
        assert!(ledger.residual.abs() < 1e-10, "residual {}", ledger.residual);
    }

    #[test]
    fn feynman_kac_martingale_head() {
        let model = SdeModel {
            drift: Box::new(|_t, _w| vec![0.0]),
            diffusion: Box::new(|_t, _w| vec![vec![1.0]]),
            initial: vec![0.0],
        };
        let g = grid(64);
        let x = ProductState::from_tail_fn(g, 1, |r| vec![0.8 + 0.3 * r]).unwrap();
        let est = feynman_kac(&|s: &ProductState| s.head[0], &model, 16, &x, 2000, 3).unwrap();
        assert!(
            (est.mean - x.head[0]).abs() <= 3.0 * est.std_error,
            "mean {} vs {}",
            est.mean,
            x.head[0]
        );
    }

    #[test]
    fn feynman_kac_second_moment() {
        let model = SdeModel {
            drift: Box::new(|_t, _w| vec![0.0]),
            diffusion: Box::new(|_t, _w| vec![vec![1.0]]),
            initial: vec![0.0],
        };
        let g = grid(64);
        let t_index = 16;
        let x = ProductState::constant(g, &[0.4]).unwrap();
        let est =
            feynman_kac(&|s: &ProductState| s.head[0] * s.head[0], &model, t_index, &x, 4000, 9)
                .unwrap();
        let exact = 0.4 * 0.4 + (1.0 - g.node(t_index));
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_error,
            "mean {} vs {exact} (se {})",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn feynman_kac_refuses_mismatched_state() {
        let model = SdeModel {
            drift: Box::new(|_t, _w| vec![0.0]),
            diffusion: Box::new(|_t, _w| vec![vec![1.0]]),
            initial: vec![0.0],
        };
        let mut x = ProductState::constant(grid(16), &[1.0]).unwrap();
        x.head = vec![2.0];
        let r = feynman_kac(&|s: &ProductState| s.head[0], &model, 4, &x, 10, 1);
        assert!(matches!(r, Err(PathflowError::DomainViolation(_))));
    }

    #[test]
    fn feynman_kac_worker_count_invariant() {
        let model = SdeModel {
            drift: Box::new(|_t, w: &WindowView| vec![-0.5 * w.current()[0]]),
            diffusion: Box::new(|_t, _w| vec![vec![1.0]]),
            initial: vec![0.0],
        };
        let g = grid(32);
        let x = ProductState::constant(g, &[0.2]).unwrap();
        let phi = |s: &ProductState| s.head[0].tanh();
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| feynman_kac(&phi, &model, 8, &x, 500, 17).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| feynman_kac(&phi, &model, 8, &x, 500, 17).unwrap());
        assert_eq!(serial.mean.to_bits(), parallel.mean.to_bits());
        assert_eq!(serial.std_error.to_bits(), parallel.std_error.to_bits());
    }

    #[test]
    fn kolmogorov_heat_type_drift() {
        // A = 0, C = I, F(t, x) = |x|^2 + m (T - t) solves the backward
        // equation, so its terminal drift vanishes in mean.
        let a = DMatrix::zeros(2, 2);
        let zero_b: GroupCoeffFn = Box::new(|_t, _s| DVector::zeros(2));
        let ident_c: GroupDiffFn = Box::new(|_t, _s| DMatrix::identity(2, 2));
        let x0 = DVector::from_vec(vec![0.2, -0.1]);
        let f = |t: f64, x: &DVector<f64>| x.norm_squared() + 2.0 * (1.0 - t);
        let est =
            kolmogorov_group_martingale(&f, &a, &zero_b, &ident_c, &x0, grid(32), 3000, 11)
                .unwrap();
        assert!(
            est.mean.abs() <= 3.0 * est.std_error,
            "drift {} (se {})",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn kolmogorov_deterministic_flow_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let zero_b: GroupCoeffFn = Box::new(|_t, _s| DVector::zeros(2));
        let zero_c: GroupDiffFn = Box::new(|_t, _s| DMatrix::zeros(2, 2));
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let a_cl = a.clone();
        // phi(e^{(T-t)A} x) is constant along the deterministic flow.
        let f = move |t: f64, x: &DVector<f64>| {
            let e = ((1.0 - t) * &a_cl).exp();
            let y = &e * x;
            y[0] + 0.5 * y[1]
        };
        let est = kolmogorov_group_martingale(&f, &a, &zero_b, &zero_c, &x0, grid(64), 10, 1)
            .unwrap();
        assert!(est.mean.abs() < 1e-9, "drift {}", est.mean);
    }

    #[test]
    fn convergence_study_rejects_bad_chain() {
        let f = tail_only_functional();
        let model = mean_reverting_model();
        let r = convergence_study(&[32, 48], 4, 1, 1, 1.0, |_lvl, drv| {
            ito_ledger(&f, &model, drv).map(|l| l.residual)
        });
        assert!(matches!(r, Err(PathflowError::InvalidConfig(_))));
    }

    #[test]
    fn mollifier_table_shapes_and_decay() {
        let g = grid(256);
        let tails = vec![
            (
                "constant".to_string(),
                ProductState::constant(g, &[1.0]).unwrap(),
            ),
            (
                "lipschitz".to_string(),
                ProductState::from_tail_fn(g, 1, |r| vec![(r + 0.4).abs()]).unwrap(),
            ),
        ];
        let rows = mollifier_convergence(&tails, &[4, 8, 16, 32, 64]).unwrap();
        assert!(rows[0].errors.iter().all(|e| *e < 1e-6));
        let lip = &rows[1].errors;
        assert!(lip[4] < lip[0] / 4.0, "errors {lip:?}");
    }

    #[test]
    fn ledger_lifted_state_matches_direct_lift() {
        let model = mean_reverting_model();
        let driver = sample_brownian(grid(32), 1, 13, 2);
        let y = euler_pathdep(&model, &driver).unwrap();
        let g = grid(32);
        let mut scratch = ProductState::constant(g, &[0.0]).unwrap();
        for l in [0usize, 10, 32] {
            lift_process_into(&g, &y, l, &mut scratch);
            let direct = lift_process(&g, &y, l).unwrap();
            assert_eq!(scratch, direct);
            let w = restrict(l, &direct).unwrap();
            assert_eq!(lift(&w), direct);
        }
    }
}
