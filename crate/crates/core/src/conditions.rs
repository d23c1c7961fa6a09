//! Sufficient convergence conditions `max(B̄, Ā) < 1` and their search.
//!
//! The constants depend on the Lipschitz bundle, the Brownian dimension `m`,
//! the horizon `T` and four free parameters `λ = (λ₁, λ₂, λ₃, λ₄)` with
//! `λ₁ > 0`, `λ₂ > L^f_z`, `λ₃ > 2m L^f_z`, `λ₄ > 0`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::problem::LipschitzBundle;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LambdaQuad {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl LambdaQuad {
    pub fn new(l1: f64, l2: f64, l3: f64, l4: f64) -> Self {
        Self { l1, l2, l3, l4 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l1, self.l2, self.l3, self.l4]
    }

    pub fn check_domain(&self, bundle: &LipschitzBundle, m: usize) -> Result<()> {
        let two_m_lfz = 2.0 * m as f64 * bundle.lf_z;
        if !(self.l1 > 0.0) {
            return Err(Error::LambdaDomain(format!("λ1 = {} must be positive", self.l1)));
        }
        if !(self.l2 > bundle.lf_z) {
            return Err(Error::LambdaDomain(format!("λ2 = {} must exceed L^f_z = {}", self.l2, bundle.lf_z)));
        }
        if !(self.l3 > two_m_lfz) {
            return Err(Error::LambdaDomain(format!("λ3 = {} must exceed 2m L^f_z = {two_m_lfz}", self.l3)));
        }
        if !(self.l4 > 0.0) {
            return Err(Error::LambdaDomain(format!("λ4 = {} must be positive", self.l4)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LimitConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

pub fn limit_constants(bundle: &LipschitzBundle, lambda: &LambdaQuad, m: usize) -> Result<LimitConstants> {
    lambda.check_domain(bundle, m)?;
    let b = bundle;
    let LambdaQuad { l1, l2, l3, .. } = *lambda;
    let mf = m as f64;
    Ok(LimitConstants {
        k1: 2.0 * b.k_b + l1 + b.lsigma_x,
        k2: b.lb_y / l1 + b.lsigma_y,
        k3: 2.0 * b.k_f + l2,
        k4: b.lf_x / l2,
        c1: b.lb_z / l1,
        c2: 2.0 * (b.lf_y / l3 + l3),
        c3: 2.0 / l3,
        c4: mf / (1.0 - 2.0 * mf * b.lf_z / l3),
    })
}

/// Below this `|aT|` the removable singularities use their Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `φ(a, T) = (e^{aT} - 1) / a`, equal to `T` at `a = 0`.
pub fn phi(a: f64, t: f64) -> f64 {
    let x = a * t;
    if x.abs() < SERIES_THRESHOLD {
        t * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        libm::expm1(x) / a
    }
}

/// `ψ(a, T) = (1 - e^{-aT}) / a`, equal to `T` at `a = 0`.
pub fn psi(a: f64, t: f64) -> f64 {
    let x = a * t;
    if x.abs() < SERIES_THRESHOLD {
        t * (1.0 - x / 2.0 + x * x / 6.0)
    } else {
        -libm::expm1(-x) / a
    }
}

/// `(B̄, Ā)` at one λ. `Ā` is `+∞` whenever `B̄ ≥ 1`.
pub fn ab_bar(bundle: &LipschitzBundle, lambda: &LambdaQuad, m: usize, horizon: f64) -> Result<(f64, f64)> {
    let c = limit_constants(bundle, lambda, m)?;
    let t = horizon;
    let l4 = lambda.l4;
    let damp = libm::exp((-c.k1 * t).max(0.0));
    let coupling = damp * c.c1 * c.c4;
    let b_bar = coupling * (bundle.lf_x * c.c3 * phi(c.k1, t) + bundle.lg_x * (1.0 + l4) * libm::exp(c.k1 * t));
    if !(b_bar < 1.0) {
        return Ok((b_bar, f64::INFINITY));
    }
    let k13 = c.k1 + c.k3;
    let front = bundle.lg_x * (1.0 + l4) * libm::exp(k13 * t) + c.k4 * phi(k13, t);
    let back = c.k2 * psi(k13, t) + coupling * c.c2 * psi(c.k3, t);
    Ok((b_bar, front / (1.0 - b_bar) * back))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LowerBoundBranch {
    /// Stationary point `λ₁ = 1/T`.
    Stationary,
    /// Boundary `λ₁ = -2k^b - L^σ_x`.
    Boundary,
}

/// Infimum of `B̄` over the λ domain and where it is attained. `l3 = ∞`,
/// `l4 = 0` in the arg-inf are exact limits.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LowerBound {
    pub value: f64,
    pub l1: f64,
    pub l3: f64,
    pub l4: f64,
    pub branch: LowerBoundBranch,
}

pub fn b_lower_bound(bundle: &LipschitzBundle, m: usize, horizon: f64) -> LowerBound {
    let t = horizon;
    let scale = m as f64 * bundle.lb_z * bundle.lg_x;
    let a = -2.0 * bundle.k_b - bundle.lsigma_x;
    let stationary = (1.0 / t >= a.max(0.0)).then(|| LowerBound {
        value: scale * libm::exp((2.0 * bundle.k_b + 1.0 / t + bundle.lsigma_x) * t) * t,
        l1: 1.0 / t,
        l3: f64::INFINITY,
        l4: 0.0,
        branch: LowerBoundBranch::Stationary,
    });
    let boundary = (a > 0.0).then(|| LowerBound {
        value: scale / a,
        l1: a,
        l3: f64::INFINITY,
        l4: 0.0,
        branch: LowerBoundBranch::Boundary,
    });
    match (stationary, boundary) {
        (Some(s), Some(b)) => {
            if b.value < s.value {
                b
            } else {
                s
            }
        }
        (Some(s), None) => s,
        (None, Some(b)) => b,
        (None, None) => unreachable!("a <= 0 always admits the stationary branch"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SearchConfig {
    /// Base-10 exponent range of the grid.
    pub log10_min: f64,
    pub log10_max: f64,
    pub points_per_axis: usize,
    /// Objective evaluations spent in simplex refinement.
    pub refine_evals: usize,
    /// Number of best grid points refined.
    pub starts: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { log10_min: -6.0, log10_max: 6.0, points_per_axis: 13, refine_evals: 500, starts: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    pub lambda: LambdaQuad,
    pub b_bar: f64,
    pub a_bar: f64,
}

impl Candidate {
    pub fn max(&self) -> f64 {
        self.b_bar.max(self.a_bar)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConditionReport {
    pub b_lower: LowerBound,
    /// `None` when the lower bound already rules out feasibility.
    pub best: Option<Candidate>,
    pub feasible: bool,
    pub grid_evaluations: usize,
    pub refine_evaluations: usize,
    pub short_circuit: bool,
}

/// Maps unconstrained coordinates to the λ domain:
/// `λ₁ = e^{p₁}`, `λ₂ = L^f_z + e^{p₂}`, `λ₃ = 2mL^f_z + e^{p₃}`, `λ₄ = e^{p₄}`.
fn to_lambda(p: &[f64; 4], bundle: &LipschitzBundle, m: usize) -> LambdaQuad {
    LambdaQuad {
        l1: libm::exp(p[0]),
        l2: bundle.lf_z + libm::exp(p[1]),
        l3: 2.0 * m as f64 * bundle.lf_z + libm::exp(p[2]),
        l4: libm::exp(p[3]),
    }
}

fn objective(bundle: &LipschitzBundle, lambda: &LambdaQuad, m: usize, horizon: f64) -> Candidate {
    match ab_bar(bundle, lambda, m, horizon) {
        Ok((b, a)) if !b.is_nan() && !a.is_nan() => Candidate { lambda: *lambda, b_bar: b, a_bar: a },
        _ => Candidate { lambda: *lambda, b_bar: f64::INFINITY, a_bar: f64::INFINITY },
    }
}

/// Minimizes `f` with the Nelder–Mead simplex method from `start`, spending at
/// most `budget` evaluations. Returns the best point and value.
pub fn nelder_mead<const D: usize>(
    mut f: impl FnMut(&[f64; D]) -> f64,
    start: [f64; D],
    step: f64,
    budget: usize,
) -> ([f64; D], f64, usize) {
    let mut evals = 0;
    let mut eval = |p: &[f64; D], evals: &mut usize| {
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<([f64; D], f64)> = Vec::with_capacity(D + 1);
    let v0 = eval(&start, &mut evals);
    simplex.push((start, v0));
    for i in 0..D {
        let mut p = start;
        p[i] += step;
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }
    let blend = |a: &[f64; D], b: &[f64; D], w: f64| {
        let mut out = [0.0; D];
        for k in 0..D {
            out[k] = a[k] + w * (b[k] - a[k]);
        }
        out
    };
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[D].1 - simplex[0].1;
        if spread.abs() < 1e-14 * (1.0 + simplex[0].1.abs()) && simplex[0].1.is_finite() {
            break;
        }
        let mut centroid = [0.0; D];
        for (p, _) in &simplex[..D] {
            for k in 0..D {
                centroid[k] += p[k] / D as f64;
            }
        }
        let worst = simplex[D];
        let reflected = blend(&centroid, &worst.0, -1.0);
        let fr = eval(&reflected, &mut evals);
        if fr < simplex[0].1 {
            let expanded = blend(&centroid, &worst.0, -2.0);
            let fe = eval(&expanded, &mut evals);
            simplex[D] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[D - 1].1 {
            simplex[D] = (reflected, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflected, fr) } else { (worst.0, worst.1) };
            let contracted = blend(&centroid, &target, 0.5);
            let fc = eval(&contracted, &mut evals);
            if fc < ft {
                simplex[D] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    let p = blend(&best, &entry.0, 0.5);
                    *entry = (p, eval(&p, &mut evals));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, simplex[0].1, evals)
}

/// Searches for λ with `max(B̄, Ā) < 1`: a log-spaced grid over the domain,
/// then simplex refinement from the best grid points.
pub fn feasibility_search(bundle: &LipschitzBundle, m: usize, horizon: f64, config: &SearchConfig) -> ConditionReport {
    let b_lower = b_lower_bound(bundle, m, horizon);
    if b_lower.value >= 1.0 {
        return ConditionReport {
            b_lower,
            best: None,
            feasible: false,
            grid_evaluations: 0,
            refine_evaluations: 0,
            short_circuit: true,
        };
    }
    let n = config.points_per_axis.max(1);
    let ln10 = core::f64::consts::LN_10;
    let axis: Vec<f64> = (0..n)
        .map(|i| {
            let e = if n == 1 {
                config.log10_min
            } else {
                config.log10_min + (config.log10_max - config.log10_min) * i as f64 / (n - 1) as f64
            };
            e * ln10
        })
        .collect();
    let mut scored: Vec<([f64; 4], f64)> = Vec::with_capacity(n.pow(4));
    for &p1 in &axis {
        for &p2 in &axis {
            for &p3 in &axis {
                for &p4 in &axis {
                    let p = [p1, p2, p3, p4];
                    let c = objective(bundle, &to_lambda(&p, bundle, m), m, horizon);
                    scored.push((p, c.max()));
                }
            }
        }
    }
    let grid_evaluations = scored.len();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best = objective(bundle, &to_lambda(&scored[0].0, bundle, m), m, horizon);
    let starts = config.starts.max(1).min(scored.len());
    let per_start = config.refine_evals / starts;
    let mut refine_evaluations = 0;
    if per_start > 4 {
        for (start, _) in scored.iter().take(starts) {
            let (p, _, used) = nelder_mead(
                |p| objective(bundle, &to_lambda(p, bundle, m), m, horizon).max(),
                *start,
                ln10 / 2.0,
                per_start,
            );
            refine_evaluations += used;
            let c = objective(bundle, &to_lambda(&p, bundle, m), m, horizon);
            if c.max() < best.max() {
                best = c;
            }
        }
    }
    ConditionReport {
        b_lower,
        feasible: best.max() < 1.0,
        best: Some(best),
        grid_evaluations,
        refine_evaluations,
        short_circuit: false,
    }
}

/// `(λ₁, B̄, Ā)` along a log-spaced λ₁ sweep at fixed `(λ₂, λ₃, λ₄)`.
pub fn lambda1_sweep(
    bundle: &LipschitzBundle,
    m: usize,
    horizon: f64,
    fixed: (f64, f64, f64),
    log10_range: (f64, f64),
    points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let e = log10_range.0 + (log10_range.1 - log10_range.0) * i as f64 / (points - 1) as f64;
            let l1 = libm::pow(10.0, e);
            let (b, a) = ab_bar(bundle, &LambdaQuad::new(l1, fixed.0, fixed.1, fixed.2), m, horizon)?;
            Ok((l1, b, a))
        })
        .collect()
}
