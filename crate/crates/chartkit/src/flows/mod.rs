//! ODE flows: exponential maps of control combinations, the base chart map,
//! fixed-step integration of time-varying control paths, and the net-based
//! distance and ball-volume estimators in [`cc`].
//!
//! The adaptive integrator is an embedded Dormand–Prince 5(4) pair. Flow
//! endpoints feed numerical differentiation downstream, so the default
//! per-step tolerance sits far below grid truncation error.

use thiserror::Error;

use crate::fieldspec::{Ball, FieldSet};

pub mod cc;

/// Default absolute per-step error tolerance.
pub const DEFAULT_FLOW_TOL: f64 = 1e-10;

/// Checkpoints stored on a default trace (segment boundaries of [0, r_end]).
pub const DEFAULT_CHECKPOINTS: usize = 64;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("integrator step underflow at r={r} after {steps} accepted steps")]
    StepUnderflow { r: f64, steps: usize },
    #[error("control vector has {found} entries, family has {expected} fields")]
    BadControls { found: usize, expected: usize },
    #[error("curve left the working domain at r={r}")]
    LeftDomain { r: f64 },
}

/// A flowed curve E(r), r in [0, r_end], with uniform checkpoints.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    /// Checkpoint parameters; uniform, plus the exit parameter when `exited`.
    pub rs: Vec<f64>,
    /// E(r) at each checkpoint.
    pub points: Vec<Vec<f64>>,
    /// Velocity sum_j a_j X_j(E(r)) recorded at each checkpoint.
    pub velocities: Vec<Vec<f64>>,
    /// Controls the curve was flowed with.
    pub controls: Vec<f64>,
    /// The curve left the domain ball; no extrapolation past the recorded end.
    pub exited: bool,
    /// Accepted integrator steps.
    pub step_count: usize,
    /// Sum of accepted per-step embedded error estimates.
    pub error_estimate: f64,
}

impl FlowTrace {
    pub fn end(&self) -> &[f64] {
        self.points.last().expect("trace always holds the start point")
    }

    /// Max Euclidean defect between stored velocities and a fresh evaluation
    /// of the control combination at the stored points. Guards control and
    /// point bookkeeping; the integration error itself is `error_estimate`.
    pub fn max_defect(&self, fields: &FieldSet) -> f64 {
        let mut buf = vec![0.0; fields.n()];
        let mut worst = 0.0f64;
        for (p, v) in self.points.iter().zip(&self.velocities) {
            fields.combination_into(&self.controls, p, &mut buf);
            let d: f64 = buf
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
        worst
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = B1 - 5179.0 / 57600.0;
const E3: f64 = B3 - 7571.0 / 16695.0;
const E4: f64 = B4 - 393.0 / 640.0;
const E5: f64 = B5 + 92097.0 / 339200.0;
const E6: f64 = B6 - 187.0 / 2100.0;
const E7: f64 = -1.0 / 40.0;

struct Dopri5<'f> {
    f: &'f dyn Fn(&[f64], &mut [f64]),
    k: [Vec<f64>; 7],
    ytmp: Vec<f64>,
    ynew: Vec<f64>,
    tol: f64,
    pub steps: usize,
    pub err_accum: f64,
}

impl<'f> Dopri5<'f> {
    fn new(f: &'f dyn Fn(&[f64], &mut [f64]), n: usize, tol: f64) -> Self {
        Dopri5 {
            f,
            k: std::array::from_fn(|_| vec![0.0; n]),
            ytmp: vec![0.0; n],
            ynew: vec![0.0; n],
            tol,
            steps: 0,
            err_accum: 0.0,
        }
    }

    fn stage(&mut self, y: &[f64], h: f64, coeffs: &[(f64, usize)], out: usize) {
        for i in 0..y.len() {
            let mut acc = y[i];
            for &(c, kj) in coeffs {
                acc += h * c * self.k[kj][i];
            }
            self.ytmp[i] = acc;
        }
        (self.f)(&self.ytmp, &mut self.k[out]);
    }

    /// One attempted step from `y` with size `h`; on acceptance writes the
    /// advanced state into `y` and returns the error estimate.
    fn try_step(&mut self, y: &mut [f64], h: f64) -> Option<f64> {
        (self.f)(y, &mut self.k[0]);
        self.stage(y, h, &[(A21, 0)], 1);
        self.stage(y, h, &[(A31, 0), (A32, 1)], 2);
        self.stage(y, h, &[(A41, 0), (A42, 1), (A43, 2)], 3);
        self.stage(y, h, &[(A51, 0), (A52, 1), (A53, 2), (A54, 3)], 4);
        self.stage(y, h, &[(A61, 0), (A62, 1), (A63, 2), (A64, 3), (A65, 4)], 5);
        for i in 0..y.len() {
            self.ynew[i] = y[i]
                + h * (B1 * self.k[0][i]
                    + B3 * self.k[2][i]
                    + B4 * self.k[3][i]
                    + B5 * self.k[4][i]
                    + B6 * self.k[5][i]);
        }
        (self.f)(&self.ynew, &mut self.k[6]);
        let mut err = 0.0f64;
        for i in 0..y.len() {
            let e = h * (E1 * self.k[0][i]
                + E3 * self.k[2][i]
                + E4 * self.k[3][i]
                + E5 * self.k[4][i]
                + E6 * self.k[5][i]
                + E7 * self.k[6][i]);
            err = err.max(e.abs());
        }
        if err <= self.tol {
            y.copy_from_slice(&self.ynew);
            self.steps += 1;
            self.err_accum += err;
            Some(err)
        } else {
            None
        }
    }

    /// Integrates y' = f(y) from `r` to `r_target` in place.
    fn advance(
        &mut self,
        y: &mut [f64],
        r: &mut f64,
        r_target: f64,
        h: &mut f64,
    ) -> Result<(), FlowError> {
        let span = r_target.max(1.0);
        while *r < r_target {
            let hs = h.min(r_target - *r);
            match self.try_step(y, hs) {
                Some(err) => {
                    *r += hs;
                    let factor = if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * (self.tol / err).powf(0.2)).clamp(0.2, 5.0)
                    };
                    *h = hs * factor;
                }
                None => {
                    // err > tol is guaranteed here, shrink and retry.
                    let mut err = 0.0f64;
                    for i in 0..y.len() {
                        let e = hs
                            * (E1 * self.k[0][i]
                                + E3 * self.k[2][i]
                                + E4 * self.k[3][i]
                                + E5 * self.k[4][i]
                                + E6 * self.k[5][i]
                                + E7 * self.k[6][i]);
                        err = err.max(e.abs());
                    }
                    *h = hs * (0.9 * (self.tol / err).powf(0.2)).clamp(0.1, 0.9);
                }
            }
            if *h < 1e-14 * span {
                return Err(FlowError::StepUnderflow {
                    r: *r,
                    steps: self.steps,
                });
            }
        }
        Ok(())
    }
}

/// Flows x' = sum_j a_j X_j(x) from `x0` over r in [0, r_end], recording
/// `checkpoints` uniform segments. Leaving `u` stops the flow and flags the
/// trace; it is not an error.
pub fn flow_controls_with(
    fields: &FieldSet,
    a: &[f64],
    x0: &[f64],
    r_end: f64,
    u: &Ball,
    tol: f64,
    checkpoints: usize,
) -> Result<FlowTrace, FlowError> {
    if a.len() != fields.q() {
        return Err(FlowError::BadControls {
            found: a.len(),
            expected: fields.q(),
        });
    }
    let n = fields.n();
    let deriv = |y: &[f64], out: &mut [f64]| fields.combination_into(a, y, out);
    let mut integ = Dopri5::new(&deriv, n, tol);

    let mut trace = FlowTrace {
        rs: Vec::with_capacity(checkpoints + 1),
        points: Vec::with_capacity(checkpoints + 1),
        velocities: Vec::with_capacity(checkpoints + 1),
        controls: a.to_vec(),
        exited: false,
        step_count: 0,
        error_estimate: 0.0,
    };
    let mut record = |r: f64, y: &[f64], integ: &Dopri5| {
        let mut v = vec![0.0; n];
        (integ.f)(y, &mut v);
        trace.rs.push(r);
        trace.points.push(y.to_vec());
        trace.velocities.push(v);
    };

    let mut y = x0.to_vec();
    let mut r = 0.0;
    record(0.0, &y, &integ);
    if !u.contains(&y) {
        trace.exited = true;
        return Ok(trace);
    }
    if r_end == 0.0 {
        return Ok(trace);
    }

    let segs = checkpoints.max(1);
    let mut h = r_end / segs as f64;
    for seg in 1..=segs {
        let target = r_end * seg as f64 / segs as f64;
        // Exit checks happen at accepted steps inside a sub-loop so that the
        // curve never runs far past the domain boundary.
        while r < target {
            let before = r;
            let step_target = target.min(r + h.max(1e-12 * r_end));
            integ.advance(&mut y, &mut r, step_target, &mut h)?;
            debug_assert!(r > before);
            if !u.contains(&y) {
                record(r, &y, &integ);
                trace.exited = true;
                trace.step_count = integ.steps;
                trace.error_estimate = integ.err_accum;
                return Ok(trace);
            }
        }
        record(target, &y, &integ);
    }
    trace.step_count = integ.steps;
    trace.error_estimate = integ.err_accum;
    Ok(trace)
}

/// Endpoint map of the unit-time flow of sum_j a_j X_j.
pub fn exp_map(
    fields: &FieldSet,
    a: &[f64],
    x0: &[f64],
    u: &Ball,
    tol: f64,
) -> Result<FlowTrace, FlowError> {
    flow_controls_with(fields, a, x0, 1.0, u, tol, DEFAULT_CHECKPOINTS)
}

/// e^{t_1 X_{j0_1} + ... + t_n X_{j0_n}} x0 as a full trace.
pub fn phi0_trace(
    fields: &FieldSet,
    j0: &[usize],
    x0: &[f64],
    t: &[f64],
    u: &Ball,
    tol: f64,
) -> Result<FlowTrace, FlowError> {
    assert_eq!(j0.len(), t.len(), "one control per frame slot");
    let mut a = vec![0.0; fields.q()];
    for (slot, &j) in j0.iter().enumerate() {
        a[j - 1] = t[slot];
    }
    flow_controls_with(fields, &a, x0, 1.0, u, tol, 16)
}

/// e^{t·X_{J0}} x0; leaving the domain is an error here because callers use
/// the value as a chart point.
pub fn phi0(
    fields: &FieldSet,
    j0: &[usize],
    x0: &[f64],
    t: &[f64],
    u: &Ball,
    tol: f64,
) -> Result<Vec<f64>, FlowError> {
    let trace = phi0_trace(fields, j0, x0, t, u, tol)?;
    if trace.exited {
        return Err(FlowError::LeftDomain {
            r: *trace.rs.last().expect("nonempty trace"),
        });
    }
    Ok(trace.end().to_vec())
}

/// Fixed-step RK4 flow of x' = sum_j d_j(t) X_j(x) over [0, t_end], returning
/// `steps`+1 equally spaced points. Fixed stepping keeps the integration
/// exactly equivariant under affine changes of the ambient coordinates, which
/// adapted-norm comparisons rely on.
pub fn flow_path(
    fields: &FieldSet,
    d: &dyn Fn(f64, &mut [f64]),
    x0: &[f64],
    t_end: f64,
    steps: usize,
    u: &Ball,
) -> Result<Vec<Vec<f64>>, FlowError> {
    let n = fields.n();
    let q = fields.q();
    let mut ctrl = vec![0.0; q];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let eval = |t: f64, y: &[f64], ctrl: &mut Vec<f64>, out: &mut Vec<f64>| {
        d(t, ctrl);
        fields.combination_into(ctrl, y, out);
    };

    let mut out = Vec::with_capacity(steps + 1);
    let mut y = x0.to_vec();
    out.push(y.clone());
    let h = t_end / steps as f64;
    for i in 0..steps {
        let t = t_end * i as f64 / steps as f64;
        eval(t, &y, &mut ctrl, &mut k1);
        for j in 0..n {
            ytmp[j] = y[j] + 0.5 * h * k1[j];
        }
        eval(t + 0.5 * h, &ytmp, &mut ctrl, &mut k2);
        for j in 0..n {
            ytmp[j] = y[j] + 0.5 * h * k2[j];
        }
        eval(t + 0.5 * h, &ytmp, &mut ctrl, &mut k3);
        for j in 0..n {
            ytmp[j] = y[j] + h * k3[j];
        }
        eval(t + h, &ytmp, &mut ctrl, &mut k4);
        for j in 0..n {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !u.contains(&y) {
            return Err(FlowError::LeftDomain {
                r: t_end * (i + 1) as f64 / steps as f64,
            });
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldspec::{Ball, FieldSet};
    use approx::assert_relative_eq;

    fn euclid2() -> FieldSet {
        FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            Ball::new(vec![0.0, 0.0], 10.0),
        )
        .unwrap()
    }

    /// Rotation flow padded with an unused second field so the family spans.
    fn rotation() -> FieldSet {
        FieldSet::parse(
            &[vec!["-x2", "x1"], vec!["1", "0"]],
            Ball::new(vec![0.0, 0.0], 10.0),
        )
        .unwrap()
    }

    fn grushin() -> FieldSet {
        FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "x1"]],
            Ball::new(vec![0.0, 0.0], 10.0),
        )
        .unwrap()
    }

    #[test]
    fn constant_fields_flow_exactly() {
        let fs = euclid2();
        let tr = exp_map(&fs, &[1.0, 2.0], &[0.0, 0.0], &fs.domain, 1e-10).unwrap();
        assert!(!tr.exited);
        assert_relative_eq!(tr.end()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(tr.end()[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_flow_hits_closed_form() {
        let fs = rotation();
        let tr = exp_map(&fs, &[1.0, 0.0], &[1.0, 0.0], &fs.domain, 1e-10).unwrap();
        assert!((tr.end()[0] - 1.0f64.cos()).abs() < 1e-9);
        assert!((tr.end()[1] - 1.0f64.sin()).abs() < 1e-9);
        // Interior checkpoints sit on the unit circle.
        for p in &tr.points {
            assert_relative_eq!(p[0] * p[0] + p[1] * p[1], 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn grushin_flow_matches_closed_form() {
        // x' = t1, y' = t2 x gives x(1) = 1 + t1, y(1) = t2(1 + t1/2) from (1,0).
        let fs = grushin();
        for (t1, t2) in [(0.3, 0.5), (-0.2, 0.7), (0.05, -0.4)] {
            let tr = exp_map(&fs, &[t1, t2], &[1.0, 0.0], &fs.domain, 1e-12).unwrap();
            assert!((tr.end()[0] - (1.0 + t1)).abs() < 1e-10);
            assert!((tr.end()[1] - t2 * (1.0 + t1 / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_velocities_are_consistent() {
        let fs = rotation();
        let tr = exp_map(&fs, &[1.0, 0.0], &[1.0, 0.0], &fs.domain, 1e-10).unwrap();
        assert_eq!(tr.max_defect(&fs), 0.0);
        assert_eq!(tr.points.len(), DEFAULT_CHECKPOINTS + 1);
    }

    #[test]
    fn trace_satisfies_ode_by_finite_differences() {
        let fs = rotation();
        let tr = exp_map(&fs, &[1.0, 0.0], &[1.0, 0.0], &fs.domain, 1e-10).unwrap();
        // 4th-order central differences on the uniform checkpoints; accuracy
        // is limited by h^4, not the integrator.
        let h = tr.rs[1] - tr.rs[0];
        let mut worst = 0.0f64;
        for i in 2..tr.points.len() - 2 {
            for c in 0..2 {
                let fd = (-tr.points[i + 2][c] + 8.0 * tr.points[i + 1][c]
                    - 8.0 * tr.points[i - 1][c]
                    + tr.points[i - 2][c])
                    / (12.0 * h);
                worst = worst.max((fd - tr.velocities[i][c]).abs());
            }
        }
        assert!(worst < 1e-7, "ODE residual {worst}");
    }

    #[test]
    fn flow_group_law() {
        let fs = rotation();
        let a = [0.8, 0.0];
        let tol = 1e-10;
        let full = exp_map(&fs, &a, &[1.0, 0.0], &fs.domain, tol).unwrap();
        for i in 1..=10 {
            let s = i as f64 / 11.0;
            // Flowing controls s*a for unit time equals flowing a for time s.
            let first = exp_map(&fs, &[a[0] * s, 0.0], &[1.0, 0.0], &fs.domain, tol).unwrap();
            let rest = exp_map(
                &fs,
                &[a[0] * (1.0 - s), 0.0],
                first.end(),
                &fs.domain,
                tol,
            )
            .unwrap();
            for c in 0..2 {
                assert!(
                    (rest.end()[c] - full.end()[c]).abs() < 10.0 * tol,
                    "split at {s}: {} vs {}",
                    rest.end()[c],
                    full.end()[c]
                );
            }
        }
    }

    #[test]
    fn exit_is_flagged_without_extrapolation() {
        let fs = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            Ball::new(vec![0.0, 0.0], 1.0),
        )
        .unwrap();
        let tr = exp_map(&fs, &[3.0, 0.0], &[0.0, 0.0], &fs.domain, 1e-10).unwrap();
        assert!(tr.exited);
        let end = tr.end();
        // The exit point is just past the boundary, never near r=3.
        assert!(end[0] >= 1.0 - 1e-9 && end[0] < 1.2, "end {end:?}");
    }

    #[test]
    fn phi0_matches_grushin_oracle() {
        let fs = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"], vec!["0", "x1"]],
            Ball::new(vec![0.0, 0.0], 10.0),
        )
        .unwrap();
        // Frame (X1, X3) = (dx, x dy) from (1,0).
        let p = phi0(&fs, &[1, 3], &[1.0, 0.0], &[0.4, 0.6], &fs.domain, 1e-12).unwrap();
        assert!((p[0] - 1.4).abs() < 1e-10);
        assert!((p[1] - 0.6 * 1.2).abs() < 1e-10);
    }

    #[test]
    fn phi0_with_coordinate_fields_is_translation() {
        let fs = euclid2();
        let p = phi0(&fs, &[1, 2], &[0.5, -0.2], &[0.3, 0.8], &fs.domain, 1e-10).unwrap();
        assert_relative_eq!(p[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn phi0_zero_controls_is_identity() {
        let fs = grushin();
        let p = phi0(&fs, &[1, 2], &[1.0, 0.5], &[0.0, 0.0], &fs.domain, 1e-10).unwrap();
        assert_eq!(p, vec![1.0, 0.5]);
    }

    #[test]
    fn phi0_out_of_domain_errors() {
        let fs = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            Ball::new(vec![0.0, 0.0], 1.0),
        )
        .unwrap();
        let err = phi0(&fs, &[1, 2], &[0.0, 0.0], &[5.0, 0.0], &fs.domain, 1e-10).unwrap_err();
        assert!(matches!(err, FlowError::LeftDomain { .. }));
    }

    #[test]
    fn control_length_is_validated() {
        let fs = euclid2();
        let err = exp_map(&fs, &[1.0], &[0.0, 0.0], &fs.domain, 1e-10).unwrap_err();
        assert!(matches!(
            err,
            FlowError::BadControls {
                found: 1,
                expected: 2
            }
        ));
    }

    #[test]
    fn time_varying_path_flow_matches_quadrature() {
        // x' = t, y' = 3t^2 model: d1(t) = t, d2(t) = 3t^2 on unit fields.
        let fs = euclid2();
        let d = |t: f64, out: &mut [f64]| {
            out[0] = t;
            out[1] = 3.0 * t * t;
        };
        let pts = flow_path(&fs, &d, &[0.0, 0.0], 1.0, 64, &fs.domain).unwrap();
        let end = pts.last().unwrap();
        assert!((end[0] - 0.5).abs() < 1e-12);
        assert!((end[1] - 1.0).abs() < 1e-10);
        assert_eq!(pts.len(), 65);
    }
}
