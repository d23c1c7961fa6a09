//! Matrix Riccati reference solutions for the linear-quadratic problems.
//!
//! For `dX = (M_x X + M_u u) dt + Σ dW` with running cost
//! `½(XᵀR_x X + R_u u²)` and terminal cost `½XᵀGX`, the value function is
//! `½xᵀP(t)x + c(t)` where, with `K = M_u R_u⁻¹ M_uᵀ`,
//!
//! ```text
//! -dP/dt = M_xᵀP + P M_x - P K P + R_x,   P(T) = G
//! -dc/dt = ½ tr(Σ Σᵀ P),                   c(T) = 0
//! ```
//!
//! Both FBSDE formulations of the control problem decouple through `P`.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::problem::LqParams;

/// `P(t)` and `c(t)` on a uniform mesh of `[0, T]`, linearly interpolated.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    horizon: f64,
    dim: usize,
    /// `P` at each node, row-major, node `i` at time `i * T / steps`.
    p: Vec<f64>,
    c: Vec<f64>,
    sigma: Matrix,
}

const BLOW_UP: f64 = 1e12;

struct Rhs<'a> {
    mx_t: &'a Matrix,
    mx: &'a Matrix,
    k: &'a Matrix,
    rx: &'a Matrix,
    sst: &'a Matrix,
}

impl Rhs<'_> {
    /// Derivative in time-to-go `τ = T - t`.
    fn eval(&self, p: &Matrix) -> (Matrix, f64) {
        let a = linalg::matmul(self.mx_t, p);
        let b = linalg::matmul(p, self.mx);
        let pk = linalg::matmul(p, self.k);
        let pkp = linalg::matmul(&pk, p);
        let mut dp = linalg::add(&linalg::add(&a, &b), self.rx);
        dp.data_mut().iter_mut().zip(pkp.data()).for_each(|(d, q)| *d -= q);
        let dc = 0.5 * linalg::trace(&linalg::matmul(self.sst, p));
        (dp, dc)
    }
}

fn axpy(p: &Matrix, dp: &Matrix, h: f64) -> Matrix {
    let data = p.data().iter().zip(dp.data()).map(|(a, b)| a + h * b).collect();
    Matrix::from_vec(p.shape(), data).expect("same shape")
}

fn symmetrize(p: &mut Matrix) {
    let n = p.rows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (p.at(i, j) + p.at(j, i));
            p.data_mut()[i * n + j] = avg;
            p.data_mut()[j * n + i] = avg;
        }
    }
}

/// Integrates the Riccati system backward from `T` with classical RK4.
pub fn solve_riccati(lq: &LqParams, horizon: f64, steps: usize) -> Result<RiccatiSolution> {
    if steps == 0 {
        return Err(Error::InvalidParameter("Riccati mesh needs at least one step".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    if !(lq.ru > 0.0) {
        return Err(Error::InvalidParameter("R_u must be positive".into()));
    }
    let d = lq.dim();
    let k = lq.control_gain();
    let mx_t = linalg::transpose(&lq.mx);
    let sst = linalg::matmul(&lq.sigma, &linalg::transpose(&lq.sigma));
    let rhs = Rhs { mx_t: &mx_t, mx: &lq.mx, k: &k, rx: &lq.rx, sst: &sst };

    let h = horizon / steps as f64;
    // Stored in backward order first, reversed at the end.
    let mut ps: Vec<f64> = Vec::with_capacity((steps + 1) * d * d);
    let mut cs: Vec<f64> = Vec::with_capacity(steps + 1);
    let mut p = lq.g.clone();
    let mut c = 0.0;
    ps.extend_from_slice(p.data());
    cs.push(c);
    for s in 0..steps {
        let (k1, l1) = rhs.eval(&p);
        let (k2, l2) = rhs.eval(&axpy(&p, &k1, 0.5 * h));
        let (k3, l3) = rhs.eval(&axpy(&p, &k2, 0.5 * h));
        let (k4, l4) = rhs.eval(&axpy(&p, &k3, h));
        let mut next = p.clone();
        for (i, v) in next.data_mut().iter_mut().enumerate() {
            *v += h / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
        }
        symmetrize(&mut next);
        c += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        p = next;
        if !p.all_finite() || p.max_abs() > BLOW_UP {
            return Err(Error::RiccatiBlowUp { t: horizon - (s + 1) as f64 * h });
        }
        ps.extend_from_slice(p.data());
        cs.push(c);
    }
    // Reverse node order so index i is time i*h.
    let mut p_fwd = Vec::with_capacity(ps.len());
    for node in ps.chunks(d * d).rev() {
        p_fwd.extend_from_slice(node);
    }
    cs.reverse();
    // Pin the terminal node to G exactly.
    let last = steps * d * d;
    p_fwd[last..].copy_from_slice(lq.g.data());
    Ok(RiccatiSolution { horizon, dim: d, p: p_fwd, c: cs, sigma: lq.sigma.clone() })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.c.len() - 1
    }

    pub fn node_time(&self, i: usize) -> f64 {
        if i == self.steps() {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps() as f64
        }
    }

    pub fn node_p(&self, i: usize) -> Matrix {
        let n = self.dim * self.dim;
        Matrix::from_vec(&[self.dim, self.dim], self.p[i * n..(i + 1) * n].to_vec()).expect("node size")
    }

    pub fn node_c(&self, i: usize) -> f64 {
        self.c[i]
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let steps = self.steps();
        let s = (t / self.horizon).clamp(0.0, 1.0) * steps as f64;
        let i = (s.floor() as usize).min(steps - 1);
        (i, s - i as f64)
    }

    /// `P(t)`, linear in `t` between mesh nodes.
    pub fn p_at(&self, t: f64) -> Matrix {
        let (i, w) = self.bracket(t);
        let n = self.dim * self.dim;
        let (a, b) = (&self.p[i * n..(i + 1) * n], &self.p[(i + 1) * n..(i + 2) * n]);
        let data = a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        Matrix::from_vec(&[self.dim, self.dim], data).expect("node size")
    }

    pub fn c_at(&self, t: f64) -> f64 {
        let (i, w) = self.bracket(t);
        (1.0 - w) * self.c[i] + w * self.c[i + 1]
    }

    /// Value-function fields: `y = ½xᵀP(t)x + c(t)`, `z = xᵀP(t)Σ` (length m).
    pub fn dp_fields(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
        let p = self.p_at(t);
        let px = linalg::matvec(&p, x);
        let y = 0.5 * x.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>() + self.c_at(t);
        // xᵀPΣ = (Σᵀ P x)ᵀ since P is symmetric.
        let z = linalg::matvec(&linalg::transpose(&self.sigma), &px);
        (y, z)
    }

    /// Adjoint fields: `y = -P(t)x`, `z = -P(t)Σ` (row-major `d x m`).
    pub fn smp_fields(&self, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.p_at(t);
        let y = linalg::matvec(&p, x).into_iter().map(|v| -v).collect();
        let z = linalg::matmul(&p, &self.sigma).into_data().into_iter().map(|v| -v).collect();
        (y, z)
    }

    pub fn max_asymmetry(&self) -> f64 {
        (0..=self.steps()).map(|i| linalg::max_asymmetry(&self.node_p(i))).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{column, diag};

    fn scalar_lq(g0: f64) -> LqParams {
        LqParams {
            mx: diag(&[0.0]),
            mu: column(&[1.0]),
            mc: alloc::vec![0.0],
            sigma: diag(&[1.0]),
            rx: diag(&[0.0]),
            ru: 1.0,
            g: diag(&[g0]),
            r_x: 1.0,
            r_z: 1.0,
            riccati_steps: 100,
            horizon: 1.0,
            x0: 0.0,
        }
    }

    #[test]
    fn scalar_closed_form() {
        let (g0, t_end) = (2.0, 1.5);
        let sol = solve_riccati(&scalar_lq(g0), t_end, 10_000).unwrap();
        for i in (0..=10_000).step_by(500) {
            let t = sol.node_time(i);
            let exact = g0 / (1.0 + g0 * (t_end - t));
            assert!((sol.node_p(i).item() - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn terminal_conditions_exact() {
        let lq = LqParams::benchmark();
        let sol = solve_riccati(&lq, 0.5, 200).unwrap();
        assert_eq!(sol.p_at(0.5), lq.g);
        assert_eq!(sol.c_at(0.5), 0.0);
        assert!(sol.max_asymmetry() <= 1e-10);
    }

    #[test]
    fn rk4_self_convergence_order() {
        let lq = LqParams::benchmark();
        let t_end = 0.5;
        let coarse = solve_riccati(&lq, t_end, 1600).unwrap();
        let mid = solve_riccati(&lq, t_end, 3200).unwrap();
        let fine = solve_riccati(&lq, t_end, 6400).unwrap();
        let diff = |a: &RiccatiSolution, b: &RiccatiSolution| {
            let pa = a.p_at(0.0);
            let pb = b.p_at(0.0);
            pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let ratio = diff(&coarse, &mid) / diff(&mid, &fine);
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_reported() {
        // dP/dτ = -P² with negative terminal value reaches -∞ in finite time.
        let lq = scalar_lq(-1.0);
        match solve_riccati(&lq, 2.0, 1000) {
            Err(Error::RiccatiBlowUp { t }) => assert!(t > 0.0 && t < 1.1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn fields_at_origin_and_terminal_time() {
        let lq = LqParams::benchmark();
        let sol = solve_riccati(&lq, 0.5, 500).unwrap();
        let zero = alloc::vec![0.0; 25];
        let (y, z) = sol.dp_fields(0.2, &zero);
        assert_eq!(y, sol.c_at(0.2));
        assert!(z.iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..25).map(|i| 0.1 + 0.01 * i as f64).collect();
        let (y_dp, _) = sol.dp_fields(0.5, &x);
        let gx = linalg::matvec(&lq.g, &x);
        let expect = 0.5 * x.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>();
        assert!((y_dp - expect).abs() < 1e-12);
        let (y_smp, _) = sol.smp_fields(0.5, &x);
        for (a, b) in y_smp.iter().zip(&gx) {
            assert!((a + b).abs() < 1e-12);
        }
    }
}
