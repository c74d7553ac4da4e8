//! Density pullbacks through an adapted chart. An ambient density is a
//! weight against Lebesgue measure; pulling it back through the chart map
//! gives Phi* nu = h Leb on the unit cube, and h factors as (g o Phi) h0
//! where h0 = det(K(I + Ahat))^{-1} depends only on the rebuilt frame and
//! g is the weight times the frame wedge in ambient coordinates. The
//! module evaluates both routes to h independently, checks the factor
//! identities, and compares weighted ball masses of the frame-only and
//! full-family balls against the wedge values at the base point.

use crate::chart::{increasing_tuples, AdaptedChart, ChartError};
use crate::fieldspec::{FieldError, FieldExpr, FieldSet, ParseError};
use crate::flows::cc::{cc_ball_volume, BallEstimate};
use crate::flows::FlowError;
use crate::funcspaces::{zygmund_norm_grid, NormError, ZygTarget, ZygmundCfg};
use crate::grid::{GridError, GridField};
use crate::vectorfield::{wedge_det, FrameError};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold below which the frame wedge counts as singular.
const FRAME_DET_REL_TOL: f64 = 1e-12;
/// Fixed-point sweeps used to bound the Euclidean reach of a control ball.
const BOX_BOUND_SWEEPS: usize = 3;
/// Safety factor on the reach bound of the Monte Carlo binning box.
const BOX_BOUND_SLACK: f64 = 1.1;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("frame wedge is singular at the evaluation point (det {det:.3e})")]
    SingularFrame { det: f64 },
    #[error("{what}: expected {expected} entries, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate ball estimate for the {which}")]
    DegenerateBall { which: &'static str },
}

/// Ambient density nu = weight * Lebesgue. The weight may vanish or change
/// sign; the pullback report flags both.
#[derive(Debug, Clone, Serialize)]
pub struct DensitySpec {
    pub weight: FieldExpr,
}

impl DensitySpec {
    pub fn new(weight: FieldExpr) -> Self {
        DensitySpec { weight }
    }

    /// Plain Lebesgue measure on n variables.
    pub fn lebesgue(n: usize) -> Self {
        let weight = crate::fieldspec::parse_field_expr("1", n)
            .expect("constant weight always parses");
        DensitySpec { weight }
    }

    /// Parses the weight from the shared expression grammar.
    pub fn parse(text: &str, n: usize) -> Result<Self, DensityError> {
        Ok(DensitySpec {
            weight: crate::fieldspec::parse_field_expr(text, n)?,
        })
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.weight.eval(p)
    }

    /// Logarithmic rates f_j = div(w X_j) / w, one closed-form expression
    /// per field; these drive the density along each field flow.
    pub fn divergence_rates(&self, fields: &FieldSet) -> Vec<FieldExpr> {
        let n = fields.n();
        (0..fields.q())
            .map(|j| {
                let mut sum: Option<FieldExpr> = None;
                for k in 0..n {
                    let term = (self.weight.clone() * fields.coeff(j, k).clone())
                        .differentiate(k + 1);
                    sum = Some(match sum {
                        None => term,
                        Some(s) => s + term,
                    });
                }
                sum.expect("fields have at least one variable") / self.weight.clone()
            })
            .collect()
    }
}

/// Wedge ratio |det(Z columns)| / |det(frame columns)| at `p`; the
/// normalization that assigns the frame tuple itself unit density. `z`
/// holds the candidate field values at `p`, one vector per slot.
pub fn nu0_eval(
    fields: &FieldSet,
    j0: &[usize],
    z: &[Vec<f64>],
    p: &[f64],
) -> Result<f64, DensityError> {
    let n = fields.n();
    if z.len() != n {
        return Err(DensityError::Dim {
            what: "candidate field list",
            expected: n,
            got: z.len(),
        });
    }
    for v in z {
        if v.len() != n {
            return Err(DensityError::Dim {
                what: "candidate field value",
                expected: n,
                got: v.len(),
            });
        }
    }
    let det_frame = wedge_det(fields, j0, p)?;
    let scale: f64 = j0
        .iter()
        .map(|&j| {
            fields
                .eval_field(j - 1, p)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .product();
    if det_frame.abs() <= FRAME_DET_REL_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(DensityError::SingularFrame { det: det_frame });
    }
    let det_z = DMatrix::from_fn(n, n, |r, c| z[c][r]).determinant();
    Ok((det_z / det_frame).abs())
}

/// Monte Carlo controls for the weighted ball masses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeCfg {
    /// Cells per axis of the binning box around the base point.
    pub grid_res: usize,
    /// Control trajectories per ball.
    pub samples: usize,
    pub seed: u64,
}

impl Default for VolumeCfg {
    fn default() -> Self {
        VolumeCfg {
            grid_res: 64,
            samples: 60_000,
            seed: 29,
        }
    }
}

/// Sampling controls for the density pullback.
#[derive(Debug, Clone)]
pub struct DensityCfg {
    /// Grid resolution per axis for h, h0, and the ratio samples on the
    /// unit cube; 32 is the smallest value the exponent ladder accepts.
    pub res: usize,
    /// Smoothness order for the fitted-exponent scan of h.
    pub s: f64,
    /// When set, the report also carries the ball-mass table.
    pub volumes: Option<VolumeCfg>,
}

impl Default for DensityCfg {
    fn default() -> Self {
        DensityCfg {
            res: 32,
            s: crate::chart::DEFAULT_S0,
            volumes: None,
        }
    }
}

/// One increasing tuple at the base point: nu applied to the tuple fields
/// and its size relative to the frame tuple.
#[derive(Debug, Clone, Serialize)]
pub struct WedgeRow {
    pub tuple: Vec<usize>,
    pub nu: f64,
    pub ratio: f64,
}

/// Serializable digest of one Monte Carlo ball run.
#[derive(Debug, Clone, Serialize)]
pub struct BallSummary {
    pub delta: f64,
    pub volume: f64,
    pub mass: f64,
    pub hit_cells: usize,
    pub samples: usize,
    pub completed: usize,
    pub box_half: f64,
    pub degenerate: bool,
}

/// Weighted ball masses at the chart radius against the wedge values at
/// the base point.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeTable {
    pub xi2: f64,
    /// nu-mass of the ball reachable with frame fields only.
    pub mass_frame_ball: f64,
    /// nu-mass of the ball reachable with the full family.
    pub mass_full_ball: f64,
    /// nu applied to the frame fields at the base point.
    pub nu_frame: f64,
    /// Largest |nu| over increasing tuples at the base point.
    pub max_wedge: f64,
    pub max_wedge_tuple: Vec<usize>,
    pub wedge_rows: Vec<WedgeRow>,
    pub ratio_frame_to_full: f64,
    pub ratio_frame_ball_to_point: f64,
    pub ratio_full_ball_to_point: f64,
    pub frame_ball: BallSummary,
    pub full_ball: BallSummary,
}

/// Pullback of a density through the chart, with both evaluation routes
/// and their cross-checks.
#[derive(Debug)]
pub struct DensityReport {
    /// h with Phi* nu = h Leb, sampled as weight at the chart point times
    /// the flow-differenced Jacobian.
    pub h: GridField,
    /// Frame-volume factor h0(t) = det(K(I + Ahat(t)))^{-1}.
    pub h0: GridField,
    /// Ratio samples g o Phi = h / h0, the weight times the absolute
    /// frame wedge along the chart image.
    pub g_ratio: GridField,
    /// False when the weight vanishes or changes sign somewhere along the
    /// sampled image while staying nonzero elsewhere.
    pub g_ratio_defined: bool,
    /// h never takes both signs over the sampled cube.
    pub sign_constant: bool,
    /// Max |h - (g o Phi) h0| over nodes: the flow-differenced route
    /// against the determinant-formula route.
    pub jacobian_residual: f64,
    /// Max |h0 * det(K(I + Ahat)) - 1| over nodes.
    pub h0_identity_residual: f64,
    /// g at the origin through the chart route.
    pub g_origin: f64,
    /// nu applied to the frame fields at the base point.
    pub nu_frame_origin: f64,
    /// |g_origin - nu_frame_origin|.
    pub g_origin_defect: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Fitted smoothness exponent of h on the unit ball.
    pub h_fitted: f64,
    /// True when the exponent scan saturated its measurable window.
    pub h_capped: bool,
    pub h_norm: f64,
    /// Divergence rates div(w X_j) / w for every field of the family.
    pub f_j: Vec<FieldExpr>,
    pub volume_table: Option<VolumeTable>,
}

struct NodeSample {
    h: f64,
    h0: f64,
    g: f64,
    formula_gap: f64,
    identity_gap: f64,
    weight: f64,
}

/// Pulls `nu` back through the chart and cross-checks the factorization
/// h = (g o Phi) h0 node by node on the unit cube.
pub fn pullback_density(
    chart: &AdaptedChart,
    nu: &DensitySpec,
    cfg: &DensityCfg,
) -> Result<DensityReport, DensityError> {
    let fields = &chart.chart0.fields;
    let n = fields.n();
    let j0 = chart.chart0.frame.j0.clone();
    let k_scale = chart.k_scale;

    let mut h = GridField::centered_cube(n, 1.0, cfg.res, 1, 0)?;
    let fd = 0.5 * chart.gamma * h.spacing();
    let nodes = h.num_nodes();

    let sampled: Vec<Result<NodeSample, DensityError>> = (0..nodes)
        .into_par_iter()
        .map(|lin| {
            let mut idx = vec![0usize; n];
            let mut t = vec![0.0; n];
            h.decompose(lin, &mut idx);
            h.node_point_into(&idx, &mut t);
            let (point, det_fd) = chart.point_and_jacobian(&t, fd)?;
            let ahat = chart.corrector.a_hat_at(&t);
            let rebuilt = DMatrix::from_fn(n, n, |r, c| {
                k_scale * (ahat[(r, c)] + if r == c { 1.0 } else { 0.0 })
            });
            let det_rebuilt = rebuilt.determinant();
            if !(det_rebuilt.is_finite() && det_rebuilt > 0.0) {
                return Err(DensityError::SingularFrame { det: det_rebuilt });
            }
            let h0_val = 1.0 / det_rebuilt;
            let weight = nu.weight.eval(&point);
            let det_frame = wedge_det(fields, &j0, &point)?;
            let h_val = weight * det_fd.abs();
            let g_val = weight * det_frame.abs();
            Ok(NodeSample {
                h: h_val,
                h0: h0_val,
                g: g_val,
                formula_gap: (h_val - g_val * h0_val).abs(),
                identity_gap: (h0_val * det_rebuilt - 1.0).abs(),
                weight,
            })
        })
        .collect();

    let mut h_buf = vec![0.0; nodes];
    let mut h0_buf = vec![0.0; nodes];
    let mut g_buf = vec![0.0; nodes];
    let mut jacobian_residual = 0.0f64;
    let mut h0_identity_residual = 0.0f64;
    let mut h_min = f64::INFINITY;
    let mut h_max = f64::NEG_INFINITY;
    let mut w_min = f64::INFINITY;
    let mut w_max = f64::NEG_INFINITY;
    let mut w_abs_min = f64::INFINITY;
    for (lin, s) in sampled.into_iter().enumerate() {
        let s = s?;
        h_buf[lin] = s.h;
        h0_buf[lin] = s.h0;
        g_buf[lin] = s.g;
        jacobian_residual = jacobian_residual.max(s.formula_gap);
        h0_identity_residual = h0_identity_residual.max(s.identity_gap);
        h_min = h_min.min(s.h);
        h_max = h_max.max(s.h);
        w_min = w_min.min(s.weight);
        w_max = w_max.max(s.weight);
        w_abs_min = w_abs_min.min(s.weight.abs());
    }
    h.set_component(0, &h_buf)?;
    let mut h0 = GridField::centered_cube(n, 1.0, cfg.res, 1, 0)?;
    h0.set_component(0, &h0_buf)?;
    let mut g_ratio = GridField::centered_cube(n, 1.0, cfg.res, 1, 0)?;
    g_ratio.set_component(0, &g_buf)?;

    let sign_constant = !(h_min < 0.0 && h_max > 0.0);
    let w_abs_max = w_min.abs().max(w_max.abs());
    let g_ratio_defined =
        w_abs_max == 0.0 || (w_abs_min > 0.0 && !(w_min < 0.0 && w_max > 0.0));

    // The origin flows with zero controls, so the chart route lands on the
    // base point exactly and the two sides below must agree.
    let origin_point = chart.phi(&vec![0.0; n])?;
    let g_origin =
        nu.weight.eval(&origin_point) * wedge_det(fields, &j0, &origin_point)?.abs();
    let x0 = &chart.chart0.x0;
    let nu_frame_origin = nu.weight.eval(x0) * wedge_det(fields, &j0, x0)?.abs();
    let g_origin_defect = (g_origin - nu_frame_origin).abs();

    let ball = crate::fieldspec::Ball::new(vec![0.0; n], 1.0);
    let zyg = zygmund_norm_grid(
        ZygTarget::Sampled(&h),
        cfg.s,
        &ball,
        &ZygmundCfg {
            res: cfg.res,
            ..ZygmundCfg::default()
        },
    )?;

    let volume_table = match &cfg.volumes {
        Some(vc) => Some(volume_compare(chart, nu, vc)?),
        None => None,
    };

    Ok(DensityReport {
        h,
        h0,
        g_ratio,
        g_ratio_defined,
        sign_constant,
        jacobian_residual,
        h0_identity_residual,
        g_origin,
        nu_frame_origin,
        g_origin_defect,
        h_min,
        h_max,
        h_fitted: zyg.fitted_exponent,
        h_capped: zyg.capped,
        h_norm: zyg.norm,
        f_j: nu.divergence_rates(fields),
        volume_table,
    })
}

/// Euclidean half-width of a box certain to contain the control ball:
/// a fixed point of reach <- slack * delta * sup of the field norm over
/// the current box, capped at the domain margin.
fn local_box_half(fields: &FieldSet, x0: &[f64], delta: f64) -> f64 {
    let n = fields.n();
    let sigma = |p: &[f64]| {
        fields
            .field_matrix(p)
            .svd(false, false)
            .singular_values
            .max()
    };
    let offset: f64 = x0
        .iter()
        .zip(&fields.domain.center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let cap = (0.95 * (fields.domain.radius - offset)).max(f64::MIN_POSITIVE);
    let stencil_sup = |half: f64| -> f64 {
        let offsets = [-1.0, 0.0, 1.0];
        let mut idx = vec![0usize; n];
        let mut sup = 0.0f64;
        loop {
            let p: Vec<f64> = (0..n).map(|k| x0[k] + offsets[idx[k]] * half).collect();
            sup = sup.max(sigma(&p));
            let mut k = 0;
            loop {
                if k == n {
                    return sup;
                }
                idx[k] += 1;
                if idx[k] < offsets.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    };
    let mut half = (BOX_BOUND_SLACK * delta * sigma(x0)).clamp(f64::MIN_POSITIVE, cap);
    for _ in 0..BOX_BOUND_SWEEPS {
        half = (BOX_BOUND_SLACK * delta * stencil_sup(half)).clamp(half, cap);
    }
    half
}

/// nu-mass over the hit cells of a Monte Carlo ball run, midpoint rule.
fn weighted_mass(est: &BallEstimate, weight: &FieldExpr) -> f64 {
    let n = est.center.len();
    let cell = 2.0 * est.box_half / est.grid_res as f64;
    let cellvol = cell.powi(n as i32);
    est.hit_cells
        .iter()
        .map(|&lin| {
            let coords = est.cell_coords(lin);
            let p: Vec<f64> = (0..n)
                .map(|k| est.center[k] - est.box_half + (coords[k] as f64 + 0.5) * cell)
                .collect();
            weight.eval(&p)
        })
        .sum::<f64>()
        * cellvol
}

fn summarize(est: &BallEstimate, mass: f64) -> BallSummary {
    BallSummary {
        delta: est.delta,
        volume: est.volume,
        mass,
        hit_cells: est.hit_cells.len(),
        samples: est.samples,
        completed: est.completed,
        box_half: est.box_half,
        degenerate: est.degenerate,
    }
}

/// Weighted mass of a control ball of radius `delta` around `x0`,
/// binned into a shared box when `box_half` is given.
pub fn nu_ball_mass(
    fields: &FieldSet,
    x0: &[f64],
    delta: f64,
    nu: &DensitySpec,
    cfg: &VolumeCfg,
    box_half: Option<f64>,
) -> Result<BallSummary, DensityError> {
    let half = box_half.unwrap_or_else(|| local_box_half(fields, x0, delta));
    let est = cc_ball_volume(
        fields,
        x0,
        delta,
        cfg.grid_res,
        cfg.samples,
        cfg.seed,
        Some(half),
    )?;
    let mass = weighted_mass(&est, &nu.weight);
    Ok(summarize(&est, mass))
}

/// Compares the nu-masses of the frame-only and full-family balls at the
/// chart radius against the wedge values of nu at the base point.
pub fn volume_compare(
    chart: &AdaptedChart,
    nu: &DensitySpec,
    cfg: &VolumeCfg,
) -> Result<VolumeTable, DensityError> {
    let c0 = &chart.chart0;
    let fields = &c0.fields;
    let n = fields.n();
    let q = fields.q();
    let x0 = &c0.x0;
    let xi2 = chart.radii.xi2;
    if !(xi2 > 0.0) {
        return Err(DensityError::DegenerateBall {
            which: "chart radius",
        });
    }

    // Both balls share one binning box so their masses quantize alike.
    let half = local_box_half(fields, x0, xi2);
    let frame_rows: Vec<Vec<FieldExpr>> = c0
        .frame
        .j0
        .iter()
        .map(|&j| (0..n).map(|k| fields.coeff(j - 1, k).clone()).collect())
        .collect();
    let frame_fields = FieldSet::new(frame_rows, fields.domain.clone())?;
    let frame_est = cc_ball_volume(
        &frame_fields,
        x0,
        xi2,
        cfg.grid_res,
        cfg.samples,
        cfg.seed,
        Some(half),
    )?;
    if frame_est.degenerate {
        return Err(DensityError::DegenerateBall {
            which: "frame-only ball",
        });
    }
    let full_est = cc_ball_volume(
        fields,
        x0,
        xi2,
        cfg.grid_res,
        cfg.samples,
        cfg.seed,
        Some(half),
    )?;
    if full_est.degenerate {
        return Err(DensityError::DegenerateBall {
            which: "full-family ball",
        });
    }
    let mass_frame = weighted_mass(&frame_est, &nu.weight);
    let mass_full = weighted_mass(&full_est, &nu.weight);

    let w0 = nu.weight.eval(x0);
    let nu_frame = w0 * wedge_det(fields, &c0.frame.j0, x0)?.abs();
    let mut wedge_rows = Vec::new();
    let mut max_wedge = 0.0f64;
    let mut max_wedge_tuple = c0.frame.j0.clone();
    for tuple in increasing_tuples(q, n) {
        let nu_t = w0 * wedge_det(fields, &tuple, x0)?.abs();
        if nu_t.abs() > max_wedge {
            max_wedge = nu_t.abs();
            max_wedge_tuple = tuple.clone();
        }
        wedge_rows.push(WedgeRow {
            ratio: nu_t.abs() / nu_frame.abs(),
            tuple,
            nu: nu_t,
        });
    }

    Ok(VolumeTable {
        xi2,
        mass_frame_ball: mass_frame,
        mass_full_ball: mass_full,
        nu_frame,
        max_wedge,
        max_wedge_tuple,
        wedge_rows,
        ratio_frame_to_full: mass_frame / mass_full,
        ratio_frame_ball_to_point: mass_frame / nu_frame,
        ratio_full_ball_to_point: mass_full / nu_frame,
        frame_ball: summarize(&frame_est, mass_frame),
        full_ball: summarize(&full_est, mass_full),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::{build_full_chart, ChartCfg};
    use crate::fieldspec::Ball;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coordinate_fields() -> FieldSet {
        FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"]],
            Ball::new(vec![0.0, 0.0], 10.0),
        )
        .unwrap()
    }

    fn quick_cfg() -> ChartCfg {
        ChartCfg {
            radius: 5.0,
            phi0_res: 32,
            rescale_res: 32,
            final_res: 16,
            sweep_res: 32,
            cc_samples: 16,
            ..ChartCfg::default()
        }
    }

    fn component_range(g: &GridField) -> (f64, f64) {
        let vals = g.component(0);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    #[test]
    fn nu0_is_one_on_the_frame_and_alternates() {
        let fields = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"], vec!["x1", "x2"]],
            Ball::new(vec![0.0, 0.0], 2.0),
        )
        .unwrap();
        let j0 = [1usize, 2];
        let p = [0.3, -0.2];
        let frame_vals: Vec<Vec<f64>> = j0.iter().map(|&j| fields.eval_field(j - 1, &p)).collect();
        assert!((nu0_eval(&fields, &j0, &frame_vals, &p).unwrap() - 1.0).abs() < 1e-14);

        let mut doubled = frame_vals.clone();
        for v in &mut doubled[0] {
            *v *= 2.0;
        }
        assert!((nu0_eval(&fields, &j0, &doubled, &p).unwrap() - 2.0).abs() < 1e-14);

        let repeated = vec![frame_vals[0].clone(), frame_vals[0].clone()];
        assert_eq!(nu0_eval(&fields, &j0, &repeated, &p).unwrap(), 0.0);

        let swapped = vec![frame_vals[1].clone(), frame_vals[0].clone()];
        assert!(
            (nu0_eval(&fields, &j0, &swapped, &p).unwrap() - 1.0).abs() < 1e-14,
            "absolute ratio ignores orientation"
        );
    }

    #[test]
    fn nu0_matches_a_signed_determinant_oracle() {
        let fields = FieldSet::parse(
            &[vec!["1", "x2"], vec!["x1", "2"]],
            Ball::new(vec![0.0, 0.0], 2.0),
        )
        .unwrap();
        let j0 = [1usize, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let p: Vec<f64> = (0..2).map(|_| rng.random::<f64>() - 0.5).collect();
            let za: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let zb: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let alpha = rng.random::<f64>() * 3.0 - 1.5;
            let det = |z: &[Vec<f64>]| z[0][0] * z[1][1] - z[0][1] * z[1][0];
            let frame = DMatrix::from_fn(2, 2, |r, c| fields.eval_field(j0[c] - 1, &p)[r]);
            // Combination in the first slot only, so the signed oracle is
            // det-linear there.
            let mixed = vec![
                za[0].iter().zip(&zb[0]).map(|(a, b)| a + alpha * b).collect(),
                za[1].clone(),
            ];
            let oracle = (det(&za) + alpha * det(&vec![zb[0].clone(), za[1].clone()]))
                / frame.determinant();
            let got = nu0_eval(&fields, &j0, &mixed, &p).unwrap();
            assert!(
                (got - oracle.abs()).abs() < 1e-12,
                "got {got}, oracle {oracle}"
            );
        }
    }

    #[test]
    fn nu0_rejects_wrong_arity() {
        let fields = coordinate_fields();
        let err = nu0_eval(&fields, &[1, 2], &[vec![1.0, 0.0]], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, DensityError::Dim { .. }), "{err}");
    }

    #[test]
    fn divergence_rates_recover_closed_forms() {
        let fields = FieldSet::parse(
            &[vec!["1", "0"], vec!["x1", "0"], vec!["0", "1"]],
            Ball::new(vec![0.0, 0.0], 2.0),
        )
        .unwrap();
        let nu = DensitySpec::parse("exp(x1)", 2).unwrap();
        let rates = nu.divergence_rates(&fields);
        assert_eq!(rates.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            assert!((rates[0].eval(&p) - 1.0).abs() < 1e-12);
            assert!((rates[1].eval(&p) - (1.0 + p[0])).abs() < 1e-12);
            assert!(rates[2].eval(&p).abs() < 1e-12);
        }
    }

    #[test]
    fn lebesgue_on_coordinate_chart_is_flat() {
        let fields = coordinate_fields();
        let chart = build_full_chart(&fields, &[0.5, -0.25], &quick_cfg()).unwrap();
        assert_eq!(chart.k_scale, 1.0);
        let nu = DensitySpec::lebesgue(2);
        let rep = pullback_density(&chart, &nu, &DensityCfg::default()).unwrap();
        assert!((rep.h_min - 1.0).abs() < 1e-8, "h_min {}", rep.h_min);
        assert!((rep.h_max - 1.0).abs() < 1e-8, "h_max {}", rep.h_max);
        let (lo, hi) = component_range(&rep.h0);
        assert!((lo - 1.0).abs() < 1e-10 && (hi - 1.0).abs() < 1e-10);
        assert!(rep.jacobian_residual < 1e-6, "{}", rep.jacobian_residual);
        assert!(rep.h0_identity_residual < 1e-8);
        assert!(rep.g_origin_defect < 1e-10);
        assert!(rep.sign_constant && rep.g_ratio_defined);
        assert_eq!(rep.f_j.len(), 2);
    }

    #[test]
    fn halved_scale_reports_the_quarter_frame_factor() {
        let fields = coordinate_fields();
        let cfg = ChartCfg {
            radius: 2.5,
            ..quick_cfg()
        };
        let chart = build_full_chart(&fields, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(chart.k_scale, 2.0);
        let rep = pullback_density(&chart, &DensitySpec::lebesgue(2), &DensityCfg::default())
            .unwrap();
        let (lo, hi) = component_range(&rep.h0);
        assert!((lo - 0.25).abs() < 1e-10 && (hi - 0.25).abs() < 1e-10);
        assert!((rep.h_min - 0.25).abs() < 1e-8);
        assert!((rep.h_max - 0.25).abs() < 1e-8);
        assert!(rep.g_origin_defect < 1e-10);
        assert!(rep.h0_identity_residual < 1e-8);
    }

    #[test]
    fn exponential_weight_matches_the_direct_jacobian() {
        let fields = coordinate_fields();
        let x0 = [0.2, -0.1];
        let chart = build_full_chart(&fields, &x0, &quick_cfg()).unwrap();
        let nu = DensitySpec::parse("exp(x1)", 2).unwrap();
        let cfg = DensityCfg::default();
        let rep = pullback_density(&chart, &nu, &cfg).unwrap();
        assert!(rep.jacobian_residual < 1e-6, "{}", rep.jacobian_residual);
        assert!(rep.g_origin_defect < 1e-10);
        assert!(rep.sign_constant && rep.g_ratio_defined);
        // The chart is a translation, so h(t) = exp(x0_1 + t_1) on the
        // cell-centered cube.
        let edge = 1.0 - 1.0 / cfg.res as f64;
        let want_max = (x0[0] + edge).exp();
        let want_min = (x0[0] - edge).exp();
        assert!((rep.h_max - want_max).abs() < 1e-7 * want_max, "{}", rep.h_max);
        assert!((rep.h_min - want_min).abs() < 1e-7 * want_min, "{}", rep.h_min);
    }

    #[test]
    fn sign_flipping_weight_is_flagged() {
        let fields = coordinate_fields();
        let chart = build_full_chart(&fields, &[0.0, 0.0], &quick_cfg()).unwrap();
        let nu = DensitySpec::parse("x1", 2).unwrap();
        let rep = pullback_density(&chart, &nu, &DensityCfg::default()).unwrap();
        assert!(!rep.sign_constant);
        assert!(!rep.g_ratio_defined);
        assert!(rep.h_min < 0.0 && rep.h_max > 0.0);
    }

    #[test]
    fn shear_chart_routes_agree() {
        let fields = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "x1"]],
            Ball::new(vec![1.0, 0.0], 0.9),
        )
        .unwrap();
        let cfg = ChartCfg {
            radius: 0.5,
            ..quick_cfg()
        };
        let chart = build_full_chart(&fields, &[1.0, 0.0], &cfg).unwrap();
        let rep = pullback_density(&chart, &DensitySpec::lebesgue(2), &DensityCfg::default())
            .unwrap();
        assert!(rep.jacobian_residual < 1e-5, "{}", rep.jacobian_residual);
        assert!(rep.h0_identity_residual < 1e-8);
        assert!(rep.g_origin_defect < 1e-10);
        assert!(rep.sign_constant && rep.g_ratio_defined);
        // g(0) is the frame wedge at the base point, x1 = 1.
        assert!((rep.g_origin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_masses_match_the_disk_area() {
        let fields = coordinate_fields();
        let chart = build_full_chart(&fields, &[0.5, -0.25], &quick_cfg()).unwrap();
        let table = volume_compare(&chart, &DensitySpec::lebesgue(2), &VolumeCfg::default())
            .unwrap();
        let xi2 = table.xi2;
        assert!(xi2 > 0.0);
        let disk = std::f64::consts::PI * xi2 * xi2;
        assert!(
            (table.mass_frame_ball - disk).abs() / disk < 0.05,
            "mass {} vs {disk}",
            table.mass_frame_ball
        );
        assert!(
            (table.mass_full_ball - disk).abs() / disk < 0.05,
            "mass {} vs {disk}",
            table.mass_full_ball
        );
        assert!((table.nu_frame - 1.0).abs() < 1e-12);
        assert!((table.max_wedge - 1.0).abs() < 1e-12);
        // Same fields and seed on both sides, so the runs coincide.
        assert!((table.ratio_frame_to_full - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tuple_ratios_stay_below_one_for_the_maximal_frame() {
        let fields = FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"], vec!["0", "x1"]],
            Ball::new(vec![2.0, 0.0], 1.5),
        )
        .unwrap();
        let cfg = ChartCfg {
            radius: 0.5,
            ..quick_cfg()
        };
        let chart = build_full_chart(&fields, &[2.0, 0.0], &cfg).unwrap();
        assert_eq!(chart.chart0.frame.j0, vec![1, 3]);
        let vc = VolumeCfg {
            samples: 20_000,
            ..VolumeCfg::default()
        };
        let table = volume_compare(&chart, &DensitySpec::lebesgue(2), &vc).unwrap();
        for row in &table.wedge_rows {
            assert!(
                row.ratio <= 1.0 + 1e-12,
                "tuple {:?} ratio {}",
                row.tuple,
                row.ratio
            );
        }
        assert!((table.max_wedge - table.nu_frame.abs()).abs() < 1e-12);
        // The full family reaches at least as far as the frame alone.
        assert!(table.ratio_frame_to_full <= 1.0 + 0.05);
    }

    #[test]
    fn masses_grow_with_the_radius() {
        let fields = coordinate_fields();
        let nu = DensitySpec::lebesgue(2);
        let cfg = VolumeCfg {
            samples: 20_000,
            ..VolumeCfg::default()
        };
        let small = nu_ball_mass(&fields, &[0.0, 0.0], 0.25, &nu, &cfg, Some(0.6)).unwrap();
        let large = nu_ball_mass(&fields, &[0.0, 0.0], 0.5, &nu, &cfg, Some(0.6)).unwrap();
        assert!(
            large.mass >= small.mass,
            "mass dropped from {} to {}",
            small.mass,
            large.mass
        );
        assert!(!small.degenerate && !large.degenerate);
    }
}
