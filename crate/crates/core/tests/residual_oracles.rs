//! Decoupling fields checked through the FBSDE itself: a one-step backward
//! residual `y(t+h, X') - y(t, X) + f h - z ΔW` with `X'` an Euler step driven
//! by the fields has root-mean-square O(h), or better when y is linear in x.

use fbsde::linalg::{self, Matrix};
use fbsde::problem::{make_problem, FbsdeProblem, LqParams, ProblemKind, ProblemParams};
use fbsde::riccati::solve_riccati;
use fbsde::rng::NormalStream;
use fbsde::solver::fit_rate;

fn gaussian(seed: u64, rows: usize, cols: usize, scale: f64, shift: f64) -> Matrix {
    let mut s = NormalStream::new(seed, 0);
    Matrix::from_vec(&[rows, cols], (0..rows * cols).map(|_| shift + scale * s.next_normal()).collect()).unwrap()
}

fn residual_rms(prob: &FbsdeProblem, t: f64, h: f64, x: &Matrix, xi: &Matrix) -> f64 {
    let dims = prob.dims();
    let (y, z) = prob.fields(t, x).unwrap();
    let dw = xi.map(|v| v * h.sqrt());
    let b = prob.drift(t, x, &y, &z).unwrap();
    let sdw = prob.diffusion_increment(t, x, &y, &dw).unwrap();
    let mut x_next = x.clone();
    for ((xv, bv), sv) in x_next.data_mut().iter_mut().zip(b.data()).zip(sdw.data()) {
        *xv += h * bv + sv;
    }
    let (y_next, _) = prob.fields(t + h, &x_next).unwrap();
    let f = prob.driver(t, x, &y, &z).unwrap();
    let mut total = 0.0;
    for r in 0..x.rows() {
        let zr = z.row_slice(r);
        let dwr = dw.row_slice(r);
        for k in 0..dims.q {
            let zdw: f64 = (0..dims.m).map(|j| zr[k * dims.m + j] * dwr[j]).sum();
            let res = y_next.at(r, k) - y.at(r, k) + f.at(r, k) * h - zdw;
            total += res * res;
        }
    }
    (total / x.rows() as f64).sqrt()
}

fn residual_slope(prob: &FbsdeProblem, t: f64, x: &Matrix, seed: u64) -> (f64, Vec<f64>) {
    let hs = [1e-2, 1e-3, 1e-4];
    let xi = gaussian(seed, x.rows(), prob.dims().m, 1.0, 0.0);
    let rms: Vec<f64> = hs.iter().map(|&h| residual_rms(prob, t, h, x, &xi)).collect();
    (fit_rate(&hs, &rms), rms)
}

#[test]
fn example1_analytic_fields_residual_is_first_order() {
    let prob = make_problem(ProblemKind::Example1, &ProblemKind::Example1.default_params()).unwrap();
    let x = gaussian(1, 20_000, 10, 0.2, core::f64::consts::FRAC_PI_4);
    let (slope, rms) = residual_slope(&prob, 0.1, &x, 2);
    assert!((slope - 1.0).abs() < 0.05, "slope {slope}, rms {rms:?}");
}

fn benchmark(kind: ProblemKind) -> FbsdeProblem {
    make_problem(kind, &ProblemParams::Lq(LqParams::benchmark())).unwrap()
}

#[test]
fn lq_dp_riccati_fields_residual_is_first_order() {
    let prob = benchmark(ProblemKind::LqDp);
    let x = gaussian(3, 4000, 25, 0.1, 0.1);
    let (slope, rms) = residual_slope(&prob, 0.2, &x, 4);
    assert!((slope - 1.0).abs() < 0.05, "slope {slope}, rms {rms:?}");
}

#[test]
fn lq_smp_riccati_fields_residual_is_order_three_halves() {
    let prob = benchmark(ProblemKind::LqSmp);
    let x = gaussian(5, 4000, 25, 0.1, 0.1);
    let (slope, rms) = residual_slope(&prob, 0.2, &x, 6);
    // y = -P(t)x is linear in x, so the ½ΔXᵀ∂²y ΔX term behind the O(h) rate
    // vanishes and only (P(t+h) - P(t))ΣΔW = O(h^{3/2}) is left.
    assert!((slope - 1.5).abs() < 0.05, "slope {slope}, rms {rms:?}");
}

#[test]
fn flipped_smp_sign_breaks_the_residual() {
    // With y = +P x the residual keeps an O(h) drift mismatch that does not
    // cancel, so its RMS sits far above the correct field's.
    let prob = benchmark(ProblemKind::LqSmp);
    let sol = prob.riccati().unwrap();
    let (t, h) = (0.2, 1e-4);
    let x = gaussian(7, 500, 25, 0.1, 0.1);
    let xi = gaussian(8, 500, 25, 1.0, 0.0);
    let good = residual_rms(&prob, t, h, &x, &xi);
    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        let xr = x.row_slice(r);
        let (y, _) = sol.smp_fields(t, xr);
        let (y_next, _) = sol.smp_fields(t + h, xr);
        // Deterministic part only: dy/dt + f with the sign flipped.
        let flipped: Vec<f64> = y.iter().map(|v| -v).collect();
        let flipped_next: Vec<f64> = y_next.iter().map(|v| -v).collect();
        let ym = Matrix::from_vec(&[1, 25], flipped).unwrap();
        let xm = Matrix::from_vec(&[1, 25], xr.to_vec()).unwrap();
        let zm = Matrix::zeros(&[1, 625]);
        let f = prob.driver(t, &xm, &ym, &zm).unwrap();
        let err: f64 = (0..25).map(|k| (flipped_next[k] - ym.at(0, k) + f.at(0, k) * h).powi(2)).sum();
        worst = worst.max(err.sqrt());
    }
    assert!(worst > 10.0 * good, "flipped {worst} vs {good}");
}

#[test]
fn smp_adjoint_is_minus_dp_gradient() {
    let prob = benchmark(ProblemKind::LqDp);
    let sol = prob.riccati().unwrap();
    let mut s = NormalStream::new(9, 0);
    let eps = 1e-4;
    for k in 0..50 {
        let t = 0.5 * (k as f64 + 0.5) / 50.0;
        let x: Vec<f64> = (0..25).map(|_| 0.3 * s.next_normal()).collect();
        let (y_smp, _) = sol.smp_fields(t, &x);
        for i in 0..25 {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += eps;
            down[i] -= eps;
            let grad = (sol.dp_fields(t, &up).0 - sol.dp_fields(t, &down).0) / (2.0 * eps);
            assert!((y_smp[i] + grad).abs() < 1e-8, "t {t} i {i}: {} vs {grad}", y_smp[i]);
        }
    }
}

#[test]
fn riccati_nodes_satisfy_the_ode() {
    let lq = LqParams::benchmark();
    let sol = solve_riccati(&lq, 0.5, 4000).unwrap();
    let h = 0.5 / 4000.0;
    let k = lq.control_gain();
    let sst = linalg::matmul(&lq.sigma, &linalg::transpose(&lq.sigma));
    for i in (1..4000).step_by(333) {
        let p = sol.node_p(i);
        let pk = linalg::matmul(&p, &k);
        let rhs_p = linalg::add(
            &linalg::add(&linalg::matmul(&linalg::transpose(&lq.mx), &p), &linalg::matmul(&p, &lq.mx)),
            &linalg::add(&lq.rx, &linalg::scaled(&linalg::matmul(&pk, &p), -1.0)),
        );
        let (prev, next) = (sol.node_p(i - 1), sol.node_p(i + 1));
        let scale = rhs_p.max_abs();
        for j in 0..p.len() {
            // -dP/dt = rhs, central difference in t.
            let dpdt = (next.data()[j] - prev.data()[j]) / (2.0 * h);
            assert!((dpdt + rhs_p.data()[j]).abs() < 1e-3 * scale, "node {i} entry {j}");
        }
        let dcdt = (sol.node_c(i + 1) - sol.node_c(i - 1)) / (2.0 * h);
        let rhs_c = 0.5 * linalg::trace(&linalg::matmul(&sst, &p));
        assert!((dcdt + rhs_c).abs() < 1e-3 * rhs_c.abs());
    }
}

#[test]
fn smp_reference_paths_follow_minus_p_x() {
    use fbsde::sde::{reference_rollout, RowStreams, TimeGrid};
    let lq = LqParams { horizon: 1e-3, ..LqParams::benchmark() };
    let prob = make_problem(ProblemKind::LqSmp, &ProblemParams::Lq(lq)).unwrap();
    let grid = TimeGrid::new(5, 1e-3).unwrap();
    let mut src = RowStreams::new(21, 0..32, 25, grid.h() / 20.0);
    let reference = reference_rollout(&prob, &grid, 20, &mut src).unwrap();
    let sol = prob.riccati().unwrap();
    for (n, (x, y)) in reference.trajectory.x.iter().zip(&reference.trajectory.y).enumerate() {
        let p = sol.p_at(grid.t(n));
        for r in 0..x.rows() {
            let px = linalg::matvec(&p, x.row_slice(r));
            for (a, b) in y.row_slice(r).iter().zip(&px) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }
}
