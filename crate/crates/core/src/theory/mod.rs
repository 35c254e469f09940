//! Numerical checks of the gradient-recovery and time-stepping analysis.

mod stability;
mod sweeps;
mod wls;

use std::fmt;
use std::time::Instant;

use serde::Serialize;

pub use stability::{
    a_stability_violations, amplification, forward_euler_mismatches, identity_check,
    identity_sweep, stability_region, StabilityGrid,
};
pub use sweeps::{
    affine_exactness, assumption_sweep, h1_bound_sweep, jittered_grid_mesh, loglog_slope,
    mean_squared_gradient_error, quadratic_gradient_errors, BoundReport, BoundRow,
};
pub use wls::{
    wls_gradient, AssumptionCheck, WlsOperator, WlsStencil, WlsWeighting, DEGENERACY_TOL,
};

use crate::data::generate_mesh;
use crate::error::Result;

/// Mesh spacings of the convergence sweeps.
pub const SWEEP_H: [f64; 3] = [0.1, 0.05, 0.025];
/// Node perturbation sizes of the bound sweep, in successive doublings.
pub const SWEEP_EPSILON: [f64; 5] = [0.0, 2.5e-4, 5e-4, 1e-3, 2e-3];
pub const DOUBLING_MARGIN: f64 = 0.1;
pub const CONSTANT_SPREAD_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{mark} {:<34} {:>12.4e}  ({})",
            self.name, self.value, self.threshold
        )
    }
}

fn check(name: &str, value: f64, threshold: &str, passed: bool) -> Check {
    Check {
        name: name.into(),
        value,
        threshold: threshold.into(),
        passed,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientSuite {
    pub checks: Vec<Check>,
    pub quadratic_errors: Vec<f64>,
    pub bound: BoundReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilitySuite {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

/// WLS exactness, first-order recovery, spectral bounds and the discrete-H¹ sweep.
pub fn gradient_suite(seed: u64) -> Result<GradientSuite> {
    let start = Instant::now();
    let mesh = generate_mesh(400, seed)?;
    let mut checks = Vec::new();
    let affine = [WlsWeighting::Uniform, WlsWeighting::InverseDistance]
        .iter()
        .map(|&w| affine_exactness(&mesh, w, 10, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(check(
        "wls affine exactness",
        affine,
        "< 1e-10",
        affine < 1e-10,
    ));
    let quad = quadratic_gradient_errors(&mesh, &SWEEP_H)?;
    let slope = loglog_slope(&SWEEP_H, &quad);
    checks.push(check("wls quadratic order", slope, ">= 0.9", slope >= 0.9));
    let (c0, c1, fails) = assumption_sweep(400, seed)?;
    checks.push(check(
        "spectral bounds c0_hat (min)",
        c0,
        "> 0, all stencils",
        fails == 0 && c0 > 0.0,
    ));
    checks.push(check(
        "spectral bounds c1_hat (max)",
        c1,
        "finite",
        c1.is_finite(),
    ));
    let bound = h1_bound_sweep(&SWEEP_H, &SWEEP_EPSILON, 0.25, seed)?;
    checks.push(check(
        "h1 consistency slope",
        bound.consistency_slope,
        ">= 1.8",
        bound.consistency_slope >= 1.8,
    ));
    let limit = 4.0 * (1.0 + DOUBLING_MARGIN);
    checks.push(check(
        "h1 epsilon doubling ratio",
        bound.max_doubling_ratio,
        "<= 4.4",
        bound.max_doubling_ratio <= limit,
    ));
    checks.push(check(
        "h1 constant spread",
        bound.constant_spread,
        "< 10",
        bound.constant_spread < CONSTANT_SPREAD_LIMIT,
    ));
    checks.push(check(
        "h1 linear field lhs",
        bound.linear_lhs,
        "< 1e-20",
        bound.linear_lhs < 1e-20,
    ));
    Ok(GradientSuite {
        checks,
        quadratic_errors: quad,
        bound,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A-stability grid, forward-Euler disk and the algebraic identity.
pub fn stability_suite(seed: u64) -> Result<StabilitySuite> {
    let start = Instant::now();
    let grid = StabilityGrid::default();
    let mut checks = Vec::new();
    for theta in [0.5, 0.75, 1.0] {
        let v = a_stability_violations(theta, &grid, 1e-12)?;
        checks.push(check(
            &format!("a-stability theta={theta}"),
            v as f64,
            "0 violations",
            v == 0,
        ));
    }
    let mism = forward_euler_mismatches(&grid)?;
    checks.push(check(
        "forward euler disk",
        mism as f64,
        "0 mismatches",
        mism == 0,
    ));
    let boundary = amplification(0.0, num_complex::Complex64::new(-2.0, 0.0))?.norm();
    checks.push(check(
        "forward euler |R(-2)|",
        boundary,
        "= 1",
        boundary == 1.0,
    ));
    let res = identity_sweep(10_000, 8.0, seed);
    checks.push(check(
        "theta identity residual",
        res,
        "< 1e-12",
        res < 1e-12,
    ));
    Ok(StabilitySuite {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
