//! Pointwise linear algebra of a field family: Lie brackets, wedge
//! determinants, base-frame selection, and commutator coefficients.
//!
//! Everything here is exact symbolic algebra or dense linear algebra at a
//! point; no grids or flows. Field and coordinate indices in the public API
//! are 1-based to match the `x1..xn` expression variables.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fieldspec::{FieldError, FieldExpr, FieldSet};

/// Scale-invariant rank cutoff: a frame spans when its determinant exceeds
/// this fraction of the n-th power of the largest column norm.
pub const SPAN_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("fields do not span at the base point: max |det| {max_det:e} is below {threshold:e}")]
    NotSpanning { max_det: f64, threshold: f64 },
    #[error("singular base frame: |det| = {det:e}")]
    SingularFrame { det: f64 },
    #[error("{failed} of {total} sample points fall below spanning rank (limit {limit})")]
    RankDeficientRegion {
        failed: usize,
        total: usize,
        limit: usize,
    },
    #[error("index tuple {tuple:?} is not strictly increasing within 1..={q}")]
    BadTuple { tuple: Vec<usize>, q: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// A single vector field with symbolic components.
#[derive(Debug, Clone)]
pub struct VectorField {
    n: usize,
    comps: Vec<FieldExpr>,
}

impl VectorField {
    pub fn new(comps: Vec<FieldExpr>) -> Self {
        assert!(!comps.is_empty(), "a vector field needs at least one component");
        let n = comps[0].n();
        assert!(
            comps.len() == n && comps.iter().all(|c| c.n() == n),
            "components must be n expressions over n variables"
        );
        VectorField { n, comps }
    }

    /// Field `j` (1-based) of the family.
    pub fn from_set(fields: &FieldSet, j: usize) -> Self {
        assert!(j >= 1 && j <= fields.q(), "field index out of range");
        let comps = (0..fields.n()).map(|k| fields.coeff(j - 1, k).clone()).collect();
        VectorField {
            n: fields.n(),
            comps,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Component `k` (1-based).
    pub fn comp(&self, k: usize) -> &FieldExpr {
        &self.comps[k - 1]
    }

    pub fn components(&self) -> &[FieldExpr] {
        &self.comps
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.comps.iter().map(|c| c.eval(x)).collect()
    }

    /// Directional derivative Xf = sum_j X_j (df/dx_j), symbolically.
    pub fn apply(&self, f: &FieldExpr) -> FieldExpr {
        let mut acc = FieldExpr::constant(0.0, self.n);
        for (j, xj) in self.comps.iter().enumerate() {
            acc = acc + xj.clone() * f.differentiate(j + 1);
        }
        acc
    }

    /// Lie bracket [X,Y] = X(Y) - Y(X), componentwise symbolic.
    pub fn lie_bracket(&self, other: &VectorField) -> VectorField {
        assert_eq!(self.n, other.n, "bracket needs fields over the same dimension");
        let comps = (1..=self.n)
            .map(|k| self.apply(other.comp(k)) - other.apply(self.comp(k)))
            .collect();
        VectorField {
            n: self.n,
            comps,
        }
    }

    pub fn any_weak(&self) -> bool {
        self.comps.iter().any(|c| c.weak())
    }
}

/// Strictly increasing `n`-tuples from `1..=q`, in lexicographic order.
pub fn increasing_tuples(q: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    fn rec(start: usize, q: usize, n: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        let remaining = n - current.len();
        for v in start..=(q + 1 - remaining) {
            current.push(v);
            rec(v + 1, q, n, current, out);
            current.pop();
        }
    }
    rec(1, q, n, &mut current, &mut out);
    out
}

fn validate_tuple(tuple: &[usize], q: usize, n: usize) -> Result<(), FrameError> {
    let increasing = tuple.len() == n
        && tuple.windows(2).all(|w| w[0] < w[1])
        && tuple.iter().all(|&j| j >= 1 && j <= q);
    if increasing {
        Ok(())
    } else {
        Err(FrameError::BadTuple {
            tuple: tuple.to_vec(),
            q,
        })
    }
}

/// Determinant of the n-by-n matrix whose columns are the `tuple` fields at `p`.
pub fn wedge_det(fields: &FieldSet, tuple: &[usize], p: &[f64]) -> Result<f64, FrameError> {
    validate_tuple(tuple, fields.q(), fields.n())?;
    let m = fields.field_matrix(p);
    Ok(tuple_det(&m, tuple))
}

fn tuple_det(field_matrix: &DMatrix<f64>, tuple: &[usize]) -> f64 {
    let n = field_matrix.nrows();
    DMatrix::from_fn(n, n, |r, c| field_matrix[(r, tuple[c] - 1)]).determinant()
}

fn max_column_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).norm())
        .fold(0.0, f64::max)
}

fn spanning_threshold(m: &DMatrix<f64>) -> f64 {
    SPAN_REL_TOL * max_column_norm(m).powi(m.nrows() as i32)
}

/// det(M_J)/det(M_J0) at `p`; both tuples 1-based and strictly increasing.
pub fn wedge_ratio(
    j: &[usize],
    j0: &[usize],
    fields: &FieldSet,
    p: &[f64],
) -> Result<f64, FrameError> {
    validate_tuple(j, fields.q(), fields.n())?;
    validate_tuple(j0, fields.q(), fields.n())?;
    let m = fields.field_matrix(p);
    let den = tuple_det(&m, j0);
    if den.abs() < spanning_threshold(&m) || den == 0.0 {
        return Err(FrameError::SingularFrame { det: den.abs() });
    }
    Ok(tuple_det(&m, j) / den)
}

/// The base frame chosen at a point, with the full ratio table.
#[derive(Debug, Clone)]
pub struct FrameSelection {
    /// Strictly increasing 1-based field indices of the chosen frame.
    pub j0: Vec<usize>,
    /// Largest |wedge ratio| over all tuples; 1 for the built-in selection.
    pub zeta_achieved: f64,
    /// (tuple, det(M_J)/det(M_J0)) for every strictly increasing tuple, in
    /// lexicographic tuple order.
    pub all_ratios: Vec<(Vec<usize>, f64)>,
    /// det(M_J0) at the selection point, sign included.
    pub det_j0: f64,
}

/// Picks the frame maximizing |det| over strictly increasing tuples, breaking
/// ties toward the lexicographically first tuple.
pub fn select_frame(fields: &FieldSet, x0: &[f64]) -> Result<FrameSelection, FrameError> {
    let m = fields.field_matrix(x0);
    let threshold = spanning_threshold(&m);
    let tuples = increasing_tuples(fields.q(), fields.n());
    let dets: Vec<f64> = tuples.iter().map(|t| tuple_det(&m, t)).collect();
    let mut best = 0usize;
    for (idx, d) in dets.iter().enumerate() {
        if d.abs() > dets[best].abs() {
            best = idx;
        }
    }
    let max_det = dets[best].abs();
    if max_det < threshold || max_det == 0.0 {
        return Err(FrameError::NotSpanning { max_det, threshold });
    }
    let det_j0 = dets[best];
    let all_ratios = tuples
        .iter()
        .zip(&dets)
        .map(|(t, d)| (t.clone(), d / det_j0))
        .collect();
    Ok(FrameSelection {
        j0: tuples[best].clone(),
        zeta_achieved: 1.0,
        all_ratios,
        det_j0,
    })
}

/// How commutator coefficients are solved from the frame at each point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMode {
    /// Unique solve over the n-field subframe selected at the first sample
    /// point; coefficients vanish off that subframe.
    ExactFrame,
    /// Minimal-Euclidean-norm solution over all q fields.
    MinimalNorm,
}

/// Grid-sampled commutator coefficients c with [X_i,X_j] = sum_k c_{i,j}^k X_k.
#[derive(Debug, Clone)]
pub struct CommutatorTensor {
    pub q: usize,
    pub mode: CoeffMode,
    /// Sample points, in input order.
    pub points: Vec<Vec<f64>>,
    /// Flattened as ((i*q + j)*q + k)*points.len() + p, indices 0-based.
    c: Vec<f64>,
    /// Max over points and pairs of the Euclidean defect of the decomposition.
    pub residual: f64,
    /// Points where the frame fell below spanning rank (coefficients zeroed).
    pub failed_points: usize,
}

impl CommutatorTensor {
    /// c_{i,j}^k at sample point `p`; all indices 1-based except `p`.
    pub fn coeff(&self, i: usize, j: usize, k: usize, p: usize) -> f64 {
        let q = self.q;
        self.c[(((i - 1) * q + (j - 1)) * q + (k - 1)) * self.points.len() + p]
    }

    pub fn max_abs(&self) -> f64 {
        self.c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Solves [X_i,X_j](p) = sum_k c_{i,j}^k(p) X_k(p) at each sample point.
///
/// Fails when more than 0.1% of points (rounded up, at least one allowed to
/// pass small samples) lack spanning rank.
pub fn commutator_coeffs(
    fields: &FieldSet,
    points: &[Vec<f64>],
    mode: CoeffMode,
) -> Result<CommutatorTensor, FrameError> {
    assert!(!points.is_empty(), "need at least one sample point");
    let n = fields.n();
    let q = fields.q();
    let npts = points.len();

    // Brackets are symbolic and shared across points; only i<j computed.
    let field_objs: Vec<VectorField> = (1..=q).map(|j| VectorField::from_set(fields, j)).collect();
    let mut brackets = Vec::new();
    for i in 0..q {
        for j in (i + 1)..q {
            brackets.push(((i, j), field_objs[i].lie_bracket(&field_objs[j])));
        }
    }

    let exact_frame = match mode {
        CoeffMode::ExactFrame => Some(select_frame(fields, &points[0])?.j0),
        CoeffMode::MinimalNorm => None,
    };

    let mut c = vec![0.0; q * q * q * npts];
    let mut residual = 0.0f64;
    let mut failed = 0usize;

    for (p_idx, p) in points.iter().enumerate() {
        let m = fields.field_matrix(p);
        let threshold = spanning_threshold(&m);
        let solver: Box<dyn Fn(&DVector<f64>) -> Option<DVector<f64>>> = match &exact_frame {
            Some(j0) => {
                let sub = DMatrix::from_fn(n, n, |r, col| m[(r, j0[col] - 1)]);
                if sub.determinant().abs() < threshold {
                    None
                } else {
                    sub.clone().lu().try_inverse().map(
                        |inv| -> Box<dyn Fn(&DVector<f64>) -> Option<DVector<f64>>> {
                            let j0 = j0.clone();
                            Box::new(move |b: &DVector<f64>| {
                                let sol = &inv * b;
                                let mut full = DVector::zeros(q);
                                for (slot, &fj) in j0.iter().enumerate() {
                                    full[fj - 1] = sol[slot];
                                }
                                Some(full)
                            })
                        },
                    )
                }
            }
            None => {
                let svd = m.clone().svd(true, true);
                let rank = svd.rank(threshold.max(f64::EPSILON * max_column_norm(&m)));
                if rank < n {
                    None
                } else {
                    Some(Box::new(move |b: &DVector<f64>| svd.solve(b, 0.0).ok())
                        as Box<dyn Fn(&DVector<f64>) -> Option<DVector<f64>>>)
                }
            }
        }
        .unwrap_or_else(|| {
            Box::new(|_b: &DVector<f64>| None)
        });

        let mut point_ok = true;
        for ((i, j), br) in &brackets {
            let b = DVector::from_vec(br.eval(p));
            match solver(&b) {
                Some(sol) => {
                    let defect = (&m * &sol - &b).norm();
                    residual = residual.max(defect);
                    for k in 0..q {
                        c[((i * q + j) * q + k) * npts + p_idx] = sol[k];
                        c[((j * q + i) * q + k) * npts + p_idx] = -sol[k];
                    }
                }
                None => point_ok = false,
            }
        }
        if !point_ok {
            failed += 1;
        }
    }

    // Budget: 0.1% of sample points may lack spanning rank.
    if failed * 1000 > npts {
        return Err(FrameError::RankDeficientRegion {
            failed,
            total: npts,
            limit: npts / 1000,
        });
    }

    Ok(CommutatorTensor {
        q,
        mode,
        points: points.to_vec(),
        c,
        residual,
        failed_points: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldspec::{parse_field_expr, Ball};
    use approx::assert_relative_eq;

    fn vf(comps: &[&str], n: usize) -> VectorField {
        VectorField::new(
            comps
                .iter()
                .map(|t| parse_field_expr(t, n).unwrap())
                .collect(),
        )
    }

    fn grushin() -> FieldSet {
        FieldSet::parse(
            &[vec!["1", "0"], vec!["0", "1"], vec!["0", "x1"]],
            Ball::new(vec![0.0, 0.0], 5.0),
        )
        .unwrap()
    }

    #[test]
    fn coordinate_fields_commute() {
        let x = vf(&["1", "0"], 2);
        let y = vf(&["0", "1"], 2);
        let b = x.lie_bracket(&y);
        assert!(b.comp(1).is_zero());
        assert!(b.comp(2).is_zero());
    }

    #[test]
    fn bracket_of_dx_with_x_dy() {
        let x = vf(&["1", "0"], 2);
        let xdy = vf(&["0", "x1"], 2);
        let b = x.lie_bracket(&xdy);
        assert!(b.comp(1).is_zero());
        assert_eq!(b.comp(2).to_string(), "1");
    }

    #[test]
    fn rotation_style_bracket_matches_hand_expansion() {
        // [x dy, y dx] = x dx - y dy.
        let a = vf(&["0", "x1"], 2);
        let b = vf(&["x2", "0"], 2);
        let br = a.lie_bracket(&b);
        let pts = [
            [0.7, -0.3],
            [1.4, 2.2],
            [-0.9, 0.5],
            [0.05, -2.0],
            [3.1, 1.7],
        ];
        for p in pts {
            let got = br.eval(&p);
            assert_relative_eq!(got[0], p[0], max_relative = 1e-12);
            assert_relative_eq!(got[1], -p[1], max_relative = 1e-12);
        }
    }

    #[test]
    fn bracket_matches_finite_differences() {
        let a = vf(&["0", "x1"], 2);
        let b = vf(&["x2", "0"], 2);
        let br = a.lie_bracket(&b);
        let h = 1e-6;
        let pts = [[0.7, -0.3], [1.4, 2.2], [-0.9, 0.5], [0.05, -2.0], [3.1, 1.7]];
        for p in pts {
            // X(Y)_k approximated by central differences of Y along X, and
            // conversely.
            let xa = a.eval(&p);
            let xb = b.eval(&p);
            let shift = |base: &[f64; 2], dir: &[f64], s: f64| {
                [base[0] + s * dir[0], base[1] + s * dir[1]]
            };
            let mut fd = [0.0; 2];
            for k in 0..2 {
                let dyk = (b.comp(k + 1).eval(&shift(&p, &xa, h))
                    - b.comp(k + 1).eval(&shift(&p, &xa, -h)))
                    / (2.0 * h);
                let dxk = (a.comp(k + 1).eval(&shift(&p, &xb, h))
                    - a.comp(k + 1).eval(&shift(&p, &xb, -h)))
                    / (2.0 * h);
                fd[k] = dyk - dxk;
            }
            let sym = br.eval(&p);
            for k in 0..2 {
                if fd[k].abs() > 1e-9 {
                    assert_relative_eq!(sym[k], fd[k], max_relative = 1e-6);
                } else {
                    assert!((sym[k] - fd[k]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn bracket_antisymmetry_is_exact() {
        let a = vf(&["x1*x2", "sin(x1)"], 2);
        let b = vf(&["x2^2", "exp(x1/3)"], 2);
        let ab = a.lie_bracket(&b);
        let ba = b.lie_bracket(&a);
        for p in [[0.3, 0.8], [-1.2, 0.4], [2.0, -0.7]] {
            for k in 1..=2 {
                assert_eq!(ab.comp(k).eval(&p), -ba.comp(k).eval(&p));
            }
        }
    }

    #[test]
    fn jacobi_identity_on_polynomial_fields() {
        let x = vf(&["x2", "x1*x2"], 2);
        let y = vf(&["x1^2", "1-x2"], 2);
        let z = vf(&["x1+x2", "x1"], 2);
        let j1 = x.lie_bracket(&y.lie_bracket(&z));
        let j2 = y.lie_bracket(&z.lie_bracket(&x));
        let j3 = z.lie_bracket(&x.lie_bracket(&y));
        // Deterministic low-discrepancy points in [-1,1]^2.
        for i in 0..20 {
            let p = [
                2.0 * ((i * 7 + 3) % 17) as f64 / 17.0 - 1.0,
                2.0 * ((i * 11 + 5) % 19) as f64 / 19.0 - 1.0,
            ];
            for k in 1..=2 {
                let total = j1.comp(k).eval(&p) + j2.comp(k).eval(&p) + j3.comp(k).eval(&p);
                assert!(total.abs() < 1e-10, "jacobi defect {total} at {p:?}");
            }
        }
    }

    #[test]
    fn bracket_is_bilinear() {
        let x = vf(&["x2", "x1*x2"], 2);
        let y = vf(&["x1^2", "1-x2"], 2);
        let z = vf(&["x1+x2", "x1"], 2);
        let lhs = VectorField::new(
            x.components()
                .iter()
                .zip(y.components())
                .map(|(a, b)| a.clone().scale(2.5) + b.clone())
                .collect(),
        )
        .lie_bracket(&z);
        for p in [[0.4, -0.6], [1.1, 0.9]] {
            for k in 1..=2 {
                let want = 2.5 * x.lie_bracket(&z).comp(k).eval(&p)
                    + y.lie_bracket(&z).comp(k).eval(&p);
                assert_relative_eq!(lhs.comp(k).eval(&p), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weak_flags_propagate_through_brackets() {
        let a = vf(&["abs(x1)^1.3", "0"], 2);
        let b = vf(&["0", "1"], 2);
        assert!(!a.any_weak());
        assert!(a.lie_bracket(&b).any_weak());
    }

    #[test]
    fn wedge_ratio_examples() {
        let fs = grushin();
        let p = [3.0, 1.0];
        assert_relative_eq!(
            wedge_ratio(&[1, 3], &[1, 2], &fs, &p).unwrap(),
            3.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            wedge_ratio(&[1, 2], &[1, 2], &fs, &p).unwrap(),
            1.0,
            max_relative = 1e-14
        );
        assert_eq!(wedge_ratio(&[2, 3], &[1, 2], &fs, &p).unwrap(), 0.0);
    }

    #[test]
    fn wedge_ratio_rejects_singular_base() {
        let fs = grushin();
        let err = wedge_ratio(&[1, 2], &[2, 3], &fs, &[3.0, 1.0]).unwrap_err();
        assert!(matches!(err, FrameError::SingularFrame { .. }));
    }

    #[test]
    fn select_frame_prefers_largest_wedge() {
        let fs = grushin();
        let sel = select_frame(&fs, &[3.0, 1.0]).unwrap();
        assert_eq!(sel.j0, vec![1, 3]);
        assert_eq!(sel.zeta_achieved, 1.0);
        assert!(sel
            .all_ratios
            .iter()
            .all(|(_, r)| r.abs() <= 1.0 + 1e-14));
        assert_relative_eq!(sel.det_j0, 3.0, max_relative = 1e-14);
    }

    #[test]
    fn select_frame_single_tuple() {
        let fs = FieldSet::parse(&[vec!["1", "0"], vec!["0", "1"]], Ball::unit(2)).unwrap();
        let sel = select_frame(&fs, &[0.3, -0.2]).unwrap();
        assert_eq!(sel.j0, vec![1, 2]);
    }

    #[test]
    fn select_frame_reports_non_spanning() {
        let fs = FieldSet::parse(
            &[vec!["x1", "0"], vec!["0", "x1"]],
            Ball::new(vec![0.5, 0.0], 0.4),
        )
        .unwrap();
        let err = select_frame(&fs, &[0.5, 0.0]).map(|s| s.j0);
        assert!(err.is_ok());
        // At a point where both fields vanish the selection must fail.
        let fs_at_zero = FieldSet::parse(
            &[vec!["x1", "0"], vec!["0", "x1"]],
            Ball::new(vec![0.0, 0.0], 0.4),
        )
        .unwrap();
        match select_frame(&fs_at_zero, &[0.0, 0.0]) {
            Err(FrameError::NotSpanning { max_det, .. }) => assert_eq!(max_det, 0.0),
            other => panic!("expected spanning failure, got {other:?}"),
        }
    }

    #[test]
    fn tuple_enumeration_is_lexicographic() {
        assert_eq!(
            increasing_tuples(4, 2),
            vec![
                vec![1, 2],
                vec![1, 3],
                vec![1, 4],
                vec![2, 3],
                vec![2, 4],
                vec![3, 4]
            ]
        );
        assert_eq!(increasing_tuples(3, 3), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn exact_frame_coefficients_for_grushin() {
        let fs = grushin();
        // Base point (0,0) selects the coordinate subframe (1,2).
        let points: Vec<Vec<f64>> = (0..21)
            .map(|i| vec![-1.0 + 0.1 * i as f64, 0.3])
            .collect();
        let t = commutator_coeffs(&fs, &points, CoeffMode::ExactFrame).unwrap();
        assert!(t.residual < 1e-12);
        assert_eq!(t.failed_points, 0);
        for p in 0..points.len() {
            assert_relative_eq!(t.coeff(1, 3, 2, p), 1.0, max_relative = 1e-12);
            assert_relative_eq!(t.coeff(3, 1, 2, p), -1.0, max_relative = 1e-12);
            for (i, j, k) in [(1, 2, 1), (1, 2, 2), (1, 2, 3), (1, 3, 1), (1, 3, 3), (2, 3, 1), (2, 3, 2), (2, 3, 3)] {
                assert!(t.coeff(i, j, k, p).abs() < 1e-12, "c[{i},{j}]^{k} at {p}");
            }
        }
    }

    #[test]
    fn minimal_norm_matches_pseudoinverse_oracle() {
        let fs = grushin();
        // At x1=2 the system [[1,0,0],[0,1,2]] a = (0,1) has least-norm
        // solution (0, 0.2, 0.4).
        let t = commutator_coeffs(&fs, &[vec![2.0, 0.0]], CoeffMode::MinimalNorm).unwrap();
        assert!(t.residual < 1e-12);
        assert_relative_eq!(t.coeff(1, 3, 1, 0), 0.0, epsilon = 1e-13);
        assert_relative_eq!(t.coeff(1, 3, 2, 0), 0.2, max_relative = 1e-10);
        assert_relative_eq!(t.coeff(1, 3, 3, 0), 0.4, max_relative = 1e-10);
    }

    #[test]
    fn commuting_fields_give_zero_tensor() {
        let fs = FieldSet::parse(&[vec!["1", "0"], vec!["0", "1"]], Ball::unit(2)).unwrap();
        let points = vec![vec![0.1, 0.2], vec![-0.3, 0.4]];
        let t = commutator_coeffs(&fs, &points, CoeffMode::MinimalNorm).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        assert_eq!(t.residual, 0.0);
    }

    #[test]
    fn antisymmetry_of_tensor_is_structural() {
        let fs = grushin();
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![0.2 * i as f64, -0.1]).collect();
        let t = commutator_coeffs(&fs, &points, CoeffMode::MinimalNorm).unwrap();
        for p in 0..points.len() {
            for i in 1..=3 {
                for j in 1..=3 {
                    for k in 1..=3 {
                        assert_eq!(t.coeff(i, j, k, p), -t.coeff(j, i, k, p));
                    }
                }
            }
        }
    }
}
