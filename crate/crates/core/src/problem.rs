//! The FBSDE abstraction and the built-in benchmark equations.
//!
//! A problem is the system
//!
//! ```text
//! dX = b(t, X, Y, Z) dt + σ(t, X, Y) dW,     X_0 = x0
//! dY = -f(t, X, Y, Z) dt + Z dW,            Y_T = g(X_T)
//! ```
//!
//! with `X` in R^d, `Y` in R^q, `Z` in R^{q x m}. All coefficient functions are
//! batched: every argument is a matrix with one row per sample path, and `Z`
//! rows hold the `q x m` matrix in row-major order.
//!
//! Each coefficient exists twice, once on plain `f64` matrices (references,
//! property checks) and once recorded on a [`Tape`] (training). The two are
//! tested against each other.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_4;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::real::Real;
use crate::riccati::{solve_riccati, RiccatiSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProblemKind {
    Example1,
    Example1Reformulated,
    LqDp,
    LqSmp,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] =
        [ProblemKind::Example1, ProblemKind::Example1Reformulated, ProblemKind::LqDp, ProblemKind::LqSmp];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "example1" => Ok(Self::Example1),
            "example1_reformulated" => Ok(Self::Example1Reformulated),
            "lq_dp" => Ok(Self::LqDp),
            "lq_smp" => Ok(Self::LqSmp),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Example1 => "example1",
            Self::Example1Reformulated => "example1_reformulated",
            Self::LqDp => "lq_dp",
            Self::LqSmp => "lq_smp",
        }
    }

    pub fn is_lq(self) -> bool {
        matches!(self, Self::LqDp | Self::LqSmp)
    }

    /// Default parameters for this problem.
    pub fn default_params(self) -> ProblemParams {
        if self.is_lq() {
            ProblemParams::Lq(LqParams::benchmark())
        } else {
            ProblemParams::Example1(Example1Params::default())
        }
    }
}

impl core::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sin-type equation with coupling through both `Y` and `Z` in the drift.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example1Params {
    pub d: usize,
    pub r: f64,
    pub sigma: f64,
    pub kappa_y: f64,
    pub kappa_z: f64,
    pub horizon: f64,
    /// Every component of the initial state.
    pub x0: f64,
}

impl Default for Example1Params {
    fn default() -> Self {
        Self { d: 10, r: 1.0, sigma: 0.1, kappa_y: 0.1, kappa_z: 0.01, horizon: 0.25, x0: FRAC_PI_4 }
    }
}

impl Example1Params {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidParameter("d must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        check_horizon(self.horizon)?;
        for (name, v) in [("r", self.r), ("kappa_y", self.kappa_y), ("kappa_z", self.kappa_z), ("x0", self.x0)] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// `y(t, x) = e^{-r(T-t)} Σ sin x_i`.
    pub fn y_exact(&self, t: f64, x: &[f64]) -> f64 {
        libm::exp(-self.r * (self.horizon - t)) * x.iter().map(|&v| libm::sin(v)).sum::<f64>()
    }

    /// `z_i(t, x) = e^{-2r(T-t)} σ̄ (Σ sin x_j) cos x_i`.
    pub fn z_exact(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s: f64 = x.iter().map(|&v| libm::sin(v)).sum();
        let c = libm::exp(-2.0 * self.r * (self.horizon - t)) * self.sigma * s;
        x.iter().map(|&v| c * libm::cos(v)).collect()
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!("horizon T must be positive, got {horizon}")));
    }
    Ok(())
}

/// Linear-quadratic control problem
/// `dX = (M_x X + M_u u) dt + Σ dW`, cost `E[∫ ½(XᵀR_x X + R_u u²) dt + ½X_TᵀG X_T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqParams {
    pub mx: Matrix,
    /// `d x 1`.
    pub mu: Matrix,
    /// Kept for completeness; neither formulation uses it.
    pub mc: Vec<f64>,
    /// Diagonal.
    pub sigma: Matrix,
    pub rx: Matrix,
    pub ru: f64,
    pub g: Matrix,
    /// Localization radius for `x` used only by the Lipschitz bookkeeping.
    pub r_x: f64,
    /// Localization radius for `z`.
    pub r_z: f64,
    pub riccati_steps: usize,
    pub horizon: f64,
    /// Every component of the initial state.
    pub x0: f64,
}

impl LqParams {
    /// The 25-dimensional benchmark coefficients at `T = 1/2`, `x0 = 0.1`.
    pub fn benchmark() -> Self {
        let d = 25;
        let mx: Vec<f64> = (0..d).map(|i| -[1.0, 2.0, 3.0][i % 3]).collect();
        let mu: Vec<f64> = (0..d).map(|i| [1.0, 1.0, 0.5, 1.0, 0.0, 0.0][i % 6]).collect();
        let shift: Vec<f64> = (0..d).map(|i| [-0.2, -0.1, 0.0, 0.0, 0.1, 0.2][i % 6]).collect();
        let mc = mx.iter().zip(&shift).map(|(a, s)| -a * s).collect();
        let sigma: Vec<f64> = (0..d).map(|i| if matches!(i, 0 | 1 | 12 | 13) { 0.15 } else { 0.25 }).collect();
        let rx: Vec<f64> = (0..d).map(|i| 2.0 * if i % 2 == 0 { 25.0 } else { 1.0 }).collect();
        let g: Vec<f64> = (0..d)
            .map(|i| {
                let block = i % 12;
                let weight = if block >= 6 && block % 2 == 0 { 1.0 } else { 25.0 };
                // The last entry closes the pattern with a 1.
                2.0 * if i == d - 1 { 1.0 } else { weight }
            })
            .collect();
        Self {
            mx: linalg::diag(&mx),
            mu: linalg::column(&mu),
            mc,
            sigma: linalg::diag(&sigma),
            rx: linalg::diag(&rx),
            ru: 2.0,
            g: linalg::diag(&g),
            r_x: 1.0,
            r_z: 10.0,
            riccati_steps: 10_000,
            horizon: 0.5,
            x0: 0.1,
        }
    }

    /// Same problem with `M_u` multiplied by `scale`.
    pub fn with_control_scale(mut self, scale: f64) -> Self {
        self.mu = linalg::scaled(&self.mu, scale);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn dim(&self) -> usize {
        self.mx.rows()
    }

    /// `K = M_u R_u⁻¹ M_uᵀ`.
    pub fn control_gain(&self) -> Matrix {
        linalg::scaled(&linalg::matmul(&self.mu, &linalg::transpose(&self.mu)), 1.0 / self.ru)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |name: &str, m: &Matrix| {
            if m.shape() != [d, d] {
                return Err(Error::InvalidParameter(format!("{name} must be {d}x{d}, got {:?}", m.shape())));
            }
            Ok(())
        };
        if d == 0 {
            return Err(Error::InvalidParameter("M_x must be non-empty".into()));
        }
        square("M_x", &self.mx)?;
        square("Sigma", &self.sigma)?;
        square("R_x", &self.rx)?;
        square("G", &self.g)?;
        if self.mu.shape() != [d, 1] {
            return Err(Error::InvalidParameter(format!("M_u must be {d}x1, got {:?}", self.mu.shape())));
        }
        if self.mc.len() != d {
            return Err(Error::InvalidParameter(format!("M_c must have {d} entries, got {}", self.mc.len())));
        }
        linalg::diag_inverse(&self.sigma)
            .map_err(|e| Error::InvalidParameter(format!("Sigma must be diagonal and invertible: {e}")))?;
        if !(self.ru > 0.0) {
            return Err(Error::InvalidParameter(format!("R_u must be positive, got {}", self.ru)));
        }
        for (name, m) in [("R_x", &self.rx), ("G", &self.g)] {
            if !linalg::is_symmetric(m, 1e-12) || !linalg::is_psd(m) {
                return Err(Error::InvalidParameter(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        if !(self.r_x > 0.0 && self.r_z > 0.0) {
            return Err(Error::InvalidParameter("localization radii must be positive".into()));
        }
        if self.riccati_steps == 0 {
            return Err(Error::InvalidParameter("riccati_steps must be at least 1".into()));
        }
        check_horizon(self.horizon)
    }
}

// Built once per run, so the size gap between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemParams {
    Example1(Example1Params),
    Lq(LqParams),
}

impl ProblemParams {
    pub fn horizon(&self) -> f64 {
        match self {
            Self::Example1(p) => p.horizon,
            Self::Lq(p) => p.horizon,
        }
    }

    pub fn set_horizon(&mut self, horizon: f64) {
        match self {
            Self::Example1(p) => p.horizon = horizon,
            Self::Lq(p) => p.horizon = horizon,
        }
    }

    /// Number of Brownian components.
    pub fn noise_dim(&self) -> usize {
        match self {
            Self::Example1(p) => p.d,
            Self::Lq(p) => p.dim(),
        }
    }

    fn check_kind(&self, kind: ProblemKind) -> Result<()> {
        match (self, kind.is_lq()) {
            (Self::Example1(_), false) | (Self::Lq(_), true) => Ok(()),
            _ => Err(Error::InvalidParameter(format!("parameters do not fit problem `{kind}`"))),
        }
    }
}

/// Lipschitz and monotonicity constants of the coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LipschitzBundle {
    pub lb_x: f64,
    pub lb_y: f64,
    pub lb_z: f64,
    pub lsigma_x: f64,
    pub lsigma_y: f64,
    pub lf_x: f64,
    pub lf_y: f64,
    pub lf_z: f64,
    pub lg_x: f64,
    pub k_b: f64,
    pub k_f: f64,
}

impl LipschitzBundle {
    pub fn validate(&self) -> Result<()> {
        let ls = [
            ("L^b_x", self.lb_x),
            ("L^b_y", self.lb_y),
            ("L^b_z", self.lb_z),
            ("L^sigma_x", self.lsigma_x),
            ("L^sigma_y", self.lsigma_y),
            ("L^f_x", self.lf_x),
            ("L^f_y", self.lf_y),
            ("L^f_z", self.lf_z),
            ("L^g_x", self.lg_x),
        ];
        for (name, v) in ls {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.k_b.is_finite() || self.k_b > libm::sqrt(self.lb_x) {
            return Err(Error::InvalidParameter(format!("k^b = {} exceeds sqrt(L^b_x)", self.k_b)));
        }
        if !self.k_f.is_finite() || self.k_f > libm::sqrt(self.lf_y) {
            return Err(Error::InvalidParameter(format!("k^f = {} exceeds sqrt(L^f_y)", self.k_f)));
        }
        Ok(())
    }
}

const NORM_TOL: f64 = 1e-10;

/// The constants for a built-in problem. The reformulated sin-type equation
/// has a driver that is not Lipschitz, so it has no bundle.
pub fn lipschitz_constants(kind: ProblemKind, params: &ProblemParams) -> Result<Option<LipschitzBundle>> {
    params.check_kind(kind)?;
    let bundle = match (kind, params) {
        (ProblemKind::Example1Reformulated, _) => return Ok(None),
        (ProblemKind::Example1, ProblemParams::Example1(p)) => {
            let d = p.d as f64;
            let inner = 3.0 * p.sigma * p.sigma * d * d / 2.0 + 2.0 * p.kappa_z * p.sigma * d;
            LipschitzBundle {
                lg_x: d,
                lb_y: 2.0 * (p.kappa_y * p.sigma).powi(2),
                lb_z: 2.0 * p.kappa_z * p.kappa_z,
                lsigma_y: d * p.sigma * p.sigma,
                lf_x: 1.5 * d * inner * inner,
                lf_y: 18.0 * p.r * p.r,
                lf_z: 3.6 * d * p.kappa_y * p.kappa_y,
                k_f: -p.r,
                ..LipschitzBundle::default()
            }
        }
        (ProblemKind::LqDp, ProblemParams::Lq(p)) => {
            let norm = |m: &Matrix| linalg::spectral_norm(m, NORM_TOL);
            let k = p.control_gain();
            let sigma_inv = linalg::diag_inverse(&p.sigma)?;
            let sigma_inv_t = linalg::transpose(&sigma_inv);
            let gain_z = linalg::matmul(&k, &sigma_inv_t);
            // Σ⁻¹ (R_u⁻¹ M_uᵀ)ᵀ M_uᵀ Σ⁻ᵀ
            let ru_mu_t = linalg::scaled(&linalg::transpose(&p.mu), 1.0 / p.ru);
            let quad_z = linalg::matmul(
                &linalg::matmul(&linalg::matmul(&sigma_inv, &linalg::transpose(&ru_mu_t)), &linalg::transpose(&p.mu)),
                &sigma_inv_t,
            );
            LipschitzBundle {
                lg_x: p.r_x * p.r_x * norm(&p.g).powi(2) / 2.0,
                lb_x: 2.0 * norm(&p.mx).powi(2),
                lb_z: 2.0 * norm(&gain_z).powi(2),
                lf_x: p.r_x * p.r_x * norm(&p.rx).powi(2),
                lf_z: p.r_z * p.r_z * norm(&quad_z).powi(2),
                k_b: -1.0,
                ..LipschitzBundle::default()
            }
        }
        (ProblemKind::LqSmp, ProblemParams::Lq(p)) => {
            let norm = |m: &Matrix| linalg::spectral_norm(m, NORM_TOL);
            LipschitzBundle {
                lg_x: norm(&p.g).powi(2),
                lb_x: 2.0 * norm(&p.mx).powi(2),
                lb_y: 2.0 * norm(&p.control_gain()).powi(2),
                lf_x: 2.0 * norm(&p.rx).powi(2),
                lf_y: 2.0 * norm(&p.mx).powi(2),
                k_f: -1.0,
                k_b: -1.0,
                ..LipschitzBundle::default()
            }
        }
        _ => unreachable!("kind and params checked above"),
    };
    Ok(Some(bundle))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
    pub q: usize,
}

impl Dims {
    /// Width of a flattened `Z` row.
    pub fn z_width(&self) -> usize {
        self.q * self.m
    }
}

#[derive(Clone, Debug)]
struct LqModel {
    params: LqParams,
    mx_t: Matrix,
    k_t: Matrix,
    /// `-Σ⁻¹Kᵀ`, maps a DP `z` row to its drift contribution.
    z_to_drift: Matrix,
    sigma_t: Matrix,
    sigma_inv: Matrix,
    rx_t: Matrix,
    g_t: Matrix,
    riccati: RiccatiSolution,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum Coefficients {
    Example1(Example1Params),
    Lq(LqModel),
}

/// An FBSDE with its coefficient functions and decoupling fields.
#[derive(Clone, Debug)]
pub struct FbsdeProblem {
    kind: ProblemKind,
    dims: Dims,
    horizon: f64,
    x0: Vec<f64>,
    coefficients: Coefficients,
}

/// Builds a built-in problem. The LQ problems solve their Riccati reference
/// on `riccati_steps` nodes here.
pub fn make_problem(kind: ProblemKind, params: &ProblemParams) -> Result<FbsdeProblem> {
    params.check_kind(kind)?;
    match params {
        ProblemParams::Example1(p) => {
            p.validate()?;
            Ok(FbsdeProblem {
                kind,
                dims: Dims { d: p.d, m: p.d, q: 1 },
                horizon: p.horizon,
                x0: vec![p.x0; p.d],
                coefficients: Coefficients::Example1(*p),
            })
        }
        ProblemParams::Lq(p) => {
            p.validate()?;
            let d = p.dim();
            let k = p.control_gain();
            let sigma_inv = linalg::diag_inverse(&p.sigma)?;
            let z_to_drift = linalg::scaled(&linalg::matmul(&sigma_inv, &linalg::transpose(&k)), -1.0);
            let riccati = solve_riccati(p, p.horizon, p.riccati_steps)?;
            let q = if kind == ProblemKind::LqSmp { d } else { 1 };
            Ok(FbsdeProblem {
                kind,
                dims: Dims { d, m: d, q },
                horizon: p.horizon,
                x0: vec![p.x0; d],
                coefficients: Coefficients::Lq(LqModel {
                    mx_t: linalg::transpose(&p.mx),
                    k_t: linalg::transpose(&k),
                    z_to_drift,
                    sigma_t: linalg::transpose(&p.sigma),
                    sigma_inv,
                    rx_t: linalg::transpose(&p.rx),
                    g_t: linalg::transpose(&p.g),
                    riccati,
                    params: p.clone(),
                }),
            })
        }
    }
}

fn sum_sin(row: &[f64]) -> f64 {
    row.iter().map(|&v| libm::sin(v)).sum()
}

fn row_dot(a: &Matrix, b: &Matrix) -> Matrix {
    let data = (0..a.rows()).map(|r| a.row_slice(r).iter().zip(b.row_slice(r)).map(|(x, y)| x * y).sum()).collect();
    Matrix::from_vec(&[a.rows(), 1], data).expect("row count")
}

fn combine(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.shape(), data).expect("same shape")
}

fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
    Matrix::from_vec(&[rows, cols], data).expect("row-major fill")
}

impl FbsdeProblem {
    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn riccati(&self) -> Option<&RiccatiSolution> {
        match &self.coefficients {
            Coefficients::Lq(lq) => Some(&lq.riccati),
            Coefficients::Example1(_) => None,
        }
    }

    pub fn example1_params(&self) -> Option<&Example1Params> {
        match &self.coefficients {
            Coefficients::Example1(p) => Some(p),
            Coefficients::Lq(_) => None,
        }
    }

    pub fn lq_params(&self) -> Option<&LqParams> {
        match &self.coefficients {
            Coefficients::Lq(lq) => Some(&lq.params),
            Coefficients::Example1(_) => None,
        }
    }

    fn check(&self, name: &str, m: &Matrix, cols: usize, rows: usize) -> Result<()> {
        if m.shape() != [rows, cols] {
            return Err(Error::Shape(format!("{name} must be {rows}x{cols}, got {:?}", m.shape())));
        }
        Ok(())
    }

    fn check_state(&self, x: &Matrix, y: Option<&Matrix>, z: Option<&Matrix>) -> Result<usize> {
        let b = x.rows();
        self.check("x", x, self.dims.d, b)?;
        if let Some(y) = y {
            self.check("y", y, self.dims.q, b)?;
        }
        if let Some(z) = z {
            self.check("z", z, self.dims.z_width(), b)?;
        }
        Ok(b)
    }

    /// Forward drift `b`, one row per path.
    pub fn drift(&self, _t: f64, x: &Matrix, y: &Matrix, z: &Matrix) -> Result<Matrix> {
        let rows = self.check_state(x, Some(y), Some(z))?;
        let d = self.dims.d;
        Ok(match &self.coefficients {
            Coefficients::Example1(p) => {
                let kz = if self.kind == ProblemKind::Example1 { p.kappa_z } else { 0.0 };
                let mut out = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    let yb = p.kappa_y * p.sigma * y.at(r, 0);
                    out.extend(z.row_slice(r).iter().map(|&zi| yb + kz * zi));
                }
                from_rows(rows, d, out)
            }
            Coefficients::Lq(lq) => {
                let lin = linalg::matmul(x, &lq.mx_t);
                let coupling = if self.kind == ProblemKind::LqDp {
                    linalg::matmul(z, &lq.z_to_drift)
                } else {
                    linalg::matmul(y, &lq.k_t)
                };
                linalg::add(&lin, &coupling)
            }
        })
    }

    /// Diffusion matrices `σ`, each row a row-major `d x m` matrix.
    pub fn diffusion(&self, _t: f64, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        let rows = self.check_state(x, Some(y), None)?;
        let (d, m) = (self.dims.d, self.dims.m);
        let mut out = Matrix::zeros(&[rows, d * m]);
        for r in 0..rows {
            let dst = &mut out.data_mut()[r * d * m..(r + 1) * d * m];
            match &self.coefficients {
                Coefficients::Example1(p) => {
                    for i in 0..d {
                        dst[i * m + i] = p.sigma * y.at(r, 0);
                    }
                }
                Coefficients::Lq(lq) => dst.copy_from_slice(lq.params.sigma.data()),
            }
        }
        Ok(out)
    }

    /// `σ(t, x, y) ΔW`, one row per path.
    pub fn diffusion_increment(&self, _t: f64, x: &Matrix, y: &Matrix, dw: &Matrix) -> Result<Matrix> {
        let rows = self.check_state(x, Some(y), None)?;
        self.check("dW", dw, self.dims.m, rows)?;
        Ok(match &self.coefficients {
            Coefficients::Example1(p) => {
                let mut out = dw.clone();
                for r in 0..rows {
                    let s = p.sigma * y.at(r, 0);
                    out.data_mut()[r * self.dims.m..(r + 1) * self.dims.m].iter_mut().for_each(|v| *v *= s);
                }
                out
            }
            Coefficients::Lq(lq) => linalg::matmul(dw, &lq.sigma_t),
        })
    }

    /// Backward driver `f`, one row per path.
    pub fn driver(&self, t: f64, x: &Matrix, y: &Matrix, z: &Matrix) -> Result<Matrix> {
        let rows = self.check_state(x, Some(y), Some(z))?;
        Ok(match &self.coefficients {
            Coefficients::Example1(p) => {
                let e3 = libm::exp(-3.0 * p.r * (p.horizon - t));
                let mut out = Vec::with_capacity(rows);
                for r in 0..rows {
                    let xr = x.row_slice(r);
                    let zr = z.row_slice(r);
                    let yv = y.at(r, 0);
                    let s = sum_sin(xr);
                    let cos2: f64 = xr.iter().map(|&v| libm::cos(v).powi(2)).sum();
                    let mut f = -p.r * yv + 0.5 * e3 * p.sigma * p.sigma * s * s * s
                        - p.kappa_y * zr.iter().sum::<f64>()
                        - p.kappa_z * p.sigma * e3 * s * cos2;
                    if self.kind == ProblemKind::Example1Reformulated {
                        f += p.kappa_z * zr.iter().map(|v| v * v).sum::<f64>() / (p.sigma * yv);
                    }
                    out.push(f);
                }
                from_rows(rows, 1, out)
            }
            Coefficients::Lq(lq) => {
                if self.kind == ProblemKind::LqDp {
                    let xr = row_dot(x, &linalg::matmul(x, &lq.rx_t));
                    let w = linalg::matmul(z, &lq.sigma_inv);
                    let wk = row_dot(&w, &linalg::matmul(&w, &lq.k_t));
                    combine(&xr, &wk, |a, b| 0.5 * (a + b))
                } else {
                    let a = linalg::matmul(x, &lq.rx_t);
                    let b = linalg::matmul(y, &lq.mx_t);
                    combine(&a, &b, |a, b| b - a)
                }
            }
        })
    }

    /// Terminal condition `g`, one row per path.
    pub fn terminal(&self, x: &Matrix) -> Result<Matrix> {
        let rows = self.check_state(x, None, None)?;
        Ok(match &self.coefficients {
            Coefficients::Example1(_) => from_rows(rows, 1, (0..rows).map(|r| sum_sin(x.row_slice(r))).collect()),
            Coefficients::Lq(lq) => {
                let gx = linalg::matmul(x, &lq.g_t);
                if self.kind == ProblemKind::LqDp {
                    row_dot(x, &gx).map(|v| 0.5 * v)
                } else {
                    gx.map(|v| -v)
                }
            }
        })
    }

    /// `(b, σ, f)` at one batch of arguments.
    pub fn eval_coefficients(&self, t: f64, x: &Matrix, y: &Matrix, z: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((self.drift(t, x, y, z)?, self.diffusion(t, x, y)?, self.driver(t, x, y, z)?))
    }

    /// Decoupling fields `y(t, x)`, `z(t, x)`: analytic for the sin-type
    /// equations, Riccati-based for the LQ problems.
    pub fn fields(&self, t: f64, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let rows = self.check_state(x, None, None)?;
        let Dims { d, m, q } = self.dims;
        match &self.coefficients {
            Coefficients::Example1(p) => {
                let ey = libm::exp(-p.r * (p.horizon - t));
                let ez = libm::exp(-2.0 * p.r * (p.horizon - t)) * p.sigma;
                let mut ys = Vec::with_capacity(rows);
                let mut zs = Vec::with_capacity(rows * m);
                for r in 0..rows {
                    let s = sum_sin(x.row_slice(r));
                    ys.push(ey * s);
                    zs.extend(x.row_slice(r).iter().map(|&v| ez * s * libm::cos(v)));
                }
                Ok((from_rows(rows, 1, ys), from_rows(rows, m, zs)))
            }
            Coefficients::Lq(lq) => {
                let p = lq.riccati.p_at(t);
                let xp = linalg::matmul(x, &p);
                if self.kind == ProblemKind::LqDp {
                    let c = lq.riccati.c_at(t);
                    let y = row_dot(x, &xp).map(|v| 0.5 * v + c);
                    let z = linalg::matmul(&xp, &lq.params.sigma);
                    Ok((y, z))
                } else {
                    let y = xp.map(|v| -v);
                    let ps = linalg::matmul(&p, &lq.params.sigma).map(|v| -v);
                    let mut z = Vec::with_capacity(rows * q * m);
                    for _ in 0..rows {
                        z.extend_from_slice(ps.data());
                    }
                    debug_assert_eq!(q, d);
                    Ok((y, from_rows(rows, q * m, z)))
                }
            }
        }
    }

    /// Puts the constant matrices of the coefficients on `tape`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Result<BoundProblem<'_>> {
        let mut konst = |m: &Matrix| tape.constant(m.cast::<T>());
        let consts = match &self.coefficients {
            Coefficients::Example1(_) => None,
            Coefficients::Lq(lq) => Some(LqVars {
                mx_t: konst(&lq.mx_t)?,
                k_t: konst(&lq.k_t)?,
                z_to_drift: konst(&lq.z_to_drift)?,
                sigma_t: konst(&lq.sigma_t)?,
                sigma_inv: konst(&lq.sigma_inv)?,
                rx_t: konst(&lq.rx_t)?,
                g_t: konst(&lq.g_t)?,
            }),
        };
        Ok(BoundProblem { problem: self, consts })
    }
}

#[derive(Clone, Copy, Debug)]
struct LqVars {
    mx_t: Var,
    k_t: Var,
    z_to_drift: Var,
    sigma_t: Var,
    sigma_inv: Var,
    rx_t: Var,
    g_t: Var,
}

/// A problem whose coefficients record onto a tape.
#[derive(Clone, Debug)]
pub struct BoundProblem<'a> {
    problem: &'a FbsdeProblem,
    consts: Option<LqVars>,
}

impl BoundProblem<'_> {
    pub fn problem(&self) -> &FbsdeProblem {
        self.problem
    }

    fn example1(&self) -> Option<&Example1Params> {
        self.problem.example1_params()
    }

    pub fn drift<T: Real>(&self, tape: &mut Tape<T>, _t: f64, x: Var, y: Var, z: Var) -> Result<Var> {
        if let Some(p) = self.example1() {
            let yb = tape.scale(y, T::of(p.kappa_y * p.sigma));
            if self.problem.kind == ProblemKind::Example1 {
                let zb = tape.scale(z, T::of(p.kappa_z));
                return tape.add(yb, zb);
            }
            // The reformulated drift carries no z; broadcast the y column to d.
            let zero = tape.scale(x, T::zero());
            return tape.add(zero, yb);
        }
        let c = self.consts.expect("LQ constants bound");
        let lin = tape.matmul(x, c.mx_t)?;
        let coupling =
            if self.problem.kind == ProblemKind::LqDp { tape.matmul(z, c.z_to_drift)? } else { tape.matmul(y, c.k_t)? };
        tape.add(lin, coupling)
    }

    pub fn diffusion_increment<T: Real>(&self, tape: &mut Tape<T>, _t: f64, _x: Var, y: Var, dw: Var) -> Result<Var> {
        if let Some(p) = self.example1() {
            let sy = tape.scale(y, T::of(p.sigma));
            return tape.mul(sy, dw);
        }
        let c = self.consts.expect("LQ constants bound");
        tape.matmul(dw, c.sigma_t)
    }

    pub fn driver<T: Real>(&self, tape: &mut Tape<T>, t: f64, x: Var, y: Var, z: Var) -> Result<Var> {
        if let Some(p) = self.example1() {
            let e3 = libm::exp(-3.0 * p.r * (p.horizon - t));
            let sin = tape.sin(x);
            let s = tape.sum_cols(sin);
            let s2 = tape.square(s);
            let s3 = tape.mul(s2, s)?;
            let cubic = tape.scale(s3, T::of(0.5 * e3 * p.sigma * p.sigma));
            let linear = tape.scale(y, T::of(-p.r));
            let zsum = tape.sum_cols(z);
            let zterm = tape.scale(zsum, T::of(-p.kappa_y));
            let cos = tape.cos(x);
            let cos2 = tape.square(cos);
            let cos2sum = tape.sum_cols(cos2);
            let mixed = tape.mul(s, cos2sum)?;
            let mixed = tape.scale(mixed, T::of(-p.kappa_z * p.sigma * e3));
            let f = tape.add(linear, cubic)?;
            let f = tape.add(f, zterm)?;
            let mut f = tape.add(f, mixed)?;
            if self.problem.kind == ProblemKind::Example1Reformulated {
                let z2 = tape.square(z);
                let z2sum = tape.sum_cols(z2);
                let sy = tape.scale(y, T::of(p.sigma));
                let quad = tape.div(z2sum, sy)?;
                let quad = tape.scale(quad, T::of(p.kappa_z));
                f = tape.add(f, quad)?;
            }
            return Ok(f);
        }
        let c = self.consts.expect("LQ constants bound");
        if self.problem.kind == ProblemKind::LqDp {
            let xr = tape.matmul(x, c.rx_t)?;
            let xrx = tape.mul(x, xr)?;
            let xrx = tape.sum_cols(xrx);
            let w = tape.matmul(z, c.sigma_inv)?;
            let wk = tape.matmul(w, c.k_t)?;
            let wkw = tape.mul(w, wk)?;
            let wkw = tape.sum_cols(wkw);
            let s = tape.add(xrx, wkw)?;
            Ok(tape.scale(s, T::of(0.5)))
        } else {
            let a = tape.matmul(x, c.rx_t)?;
            let b = tape.matmul(y, c.mx_t)?;
            tape.sub(b, a)
        }
    }

    pub fn terminal<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.example1().is_some() {
            let sin = tape.sin(x);
            return Ok(tape.sum_cols(sin));
        }
        let c = self.consts.expect("LQ constants bound");
        let gx = tape.matmul(x, c.g_t)?;
        if self.problem.kind == ProblemKind::LqDp {
            let xgx = tape.mul(x, gx)?;
            let s = tape.sum_cols(xgx);
            Ok(tape.scale(s, T::of(0.5)))
        } else {
            Ok(tape.neg(gx))
        }
    }
}

/// Random batch for property checks: rows drawn from a fixed ChaCha stream.
#[cfg(test)]
pub(crate) fn test_batch(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut s = crate::rng::NormalStream::new(seed, 0);
    Matrix::from_vec(&[rows, cols], (0..rows * cols).map(|_| scale * s.next_normal()).collect()).unwrap()
}
