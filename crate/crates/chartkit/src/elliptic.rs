//! First-order curl/divergence operator, its spectral right inverse on a
//! periodic extension, the corrector solve, and the regularity bootstrap
//! check.
//!
//! The operator maps a vector field A to the pair (curl, div): all
//! antisymmetrized derivatives `d_j A_k - d_k A_j` for `j < k`, then the
//! divergence. Its adjoint composes with it to the (negative) Laplacian,
//! which is what makes every solve here a Poisson solve in disguise.
//!
//! All solves run on a periodic cube twice the side of the input cube:
//! inputs are multiplied by a smooth cutoff (identically 1 on the inner
//! 95%, supported on the inner 99%), so spectral derivatives are exact
//! wherever results are consumed. Grids must be cell-centered cubes with
//! even resolution so the embedding lands on nodes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::fieldspec::Ball;
use crate::funcspaces::{zygmund_norm_grid, NormError, ZygTarget, ZygmundCfg};
use crate::grid::{GridError, GridField};

/// Cutoff plateau for the right inverse, as a fraction of the input cube
/// half-side; the reconstruction claim holds on the ball of this radius.
pub const CUTOFF_PLATEAU_FRAC: f64 = 0.95;
/// Cutoff support, as a fraction of the input cube half-side.
pub const CUTOFF_SUPPORT_FRAC: f64 = 0.99;
/// Cutoff plateau for the corrector solve. Its claims are verified on the
/// 3/4 ball, so the transition band can be wide enough to stay spectrally
/// clean at moderate resolutions.
pub const CORRECTOR_PLATEAU_FRAC: f64 = 0.8;
/// Working threshold on the measured input norm above which the corrector
/// solve refuses to start.
pub const CORRECTOR_NORM_LIMIT: f64 = 0.5;
/// Working threshold on the sup norm of the coefficient matrix fed to the
/// bootstrap check.
pub const BOOTSTRAP_SUP_LIMIT: f64 = 0.5;
/// Point-inversion Newton iteration cap and tolerance.
pub const NEWTON_MAX_ITERS: usize = 20;
pub const NEWTON_TOL: f64 = 1e-12;
/// Jacobian determinant floor for a usable coordinate change.
pub const MIN_DET_DH: f64 = 0.5;

/// Errors for the elliptic operations.
#[derive(Debug, Error)]
pub enum EllipticError {
    #[error("grid is not a centered cube with even resolution")]
    NotCenteredCube,
    #[error("rank mismatch: expected {expected}, found {found}")]
    BadRank { expected: usize, found: usize },
    #[error("measured input norm {measured:.6} exceeds working threshold {limit}")]
    NormTooLarge { measured: f64, limit: f64 },
    #[error(
        "iteration stopped contracting after {iterations} steps \
         (residual {residual:.3e}, best {best:.3e}); try a smaller coefficient scale"
    )]
    NonContraction {
        iterations: usize,
        residual: f64,
        best: f64,
    },
    #[error("no convergence in {max_iter} iterations (residual {residual:.3e})")]
    MaxIterations { max_iter: usize, residual: f64 },
    #[error("Jacobian determinant dropped to {det:.3e}")]
    DegenerateJacobian { det: f64 },
    #[error("point inversion did not converge")]
    NewtonFailed,
    #[error("inner ball is not covered by the image of the coordinate change")]
    CoverageFailed,
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Ordered curl index pairs `(j, k)` with `j < k`, 0-based.
pub fn curl_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for j in 0..n {
        for k in j + 1..n {
            out.push((j, k));
        }
    }
    out
}

/// Components of the operator image: curl pairs plus one divergence.
pub fn target_rank(n: usize) -> usize {
    n * (n - 1) / 2 + 1
}

/// Validates a cell-centered cube grid and returns its half-side.
fn cube_half(grid: &GridField) -> Result<f64, EllipticError> {
    let n = grid.n();
    let res = grid.shape()[0];
    if grid.shape().iter().any(|&e| e != res) || res % 2 != 0 {
        return Err(EllipticError::NotCenteredCube);
    }
    let half = 0.5 * res as f64 * grid.spacing();
    for a in 0..n {
        let expect = -half + 0.5 * grid.spacing();
        if (grid.origin()[a] - expect).abs() > 1e-9 * half.max(1.0) {
            return Err(EllipticError::NotCenteredCube);
        }
    }
    Ok(half)
}

/// Smooth bump profile: 1 on `[0, plateau]`, 0 beyond `support`, joined by
/// a degree-19 polynomial step. A polynomial profile keeps the spectral
/// tail of the transition polynomially small in the number of grid cells
/// it spans, which exponential bumps do not achieve at these widths.
fn bump_profile(x: f64, plateau: f64, support: f64) -> f64 {
    let r = x.abs();
    if r <= plateau {
        return 1.0;
    }
    if r >= support {
        return 0.0;
    }
    let s = (r - plateau) / (support - plateau);
    1.0 - smoothstep9(s)
}

/// Polynomial step of smoothness order 9: 0 at 0, 1 at 1, first nine
/// derivatives vanishing at both ends.
fn smoothstep9(x: f64) -> f64 {
    let binom = |n: u64, k: u64| -> f64 {
        let mut acc = 1.0;
        for i in 0..k {
            acc = acc * (n - i) as f64 / (i + 1) as f64;
        }
        acc
    };
    let mut sum = 0.0;
    let mut xk = 1.0;
    for k in 0..=9u64 {
        sum += binom(9 + k, k) * binom(19, 9 - k) * if k % 2 == 0 { xk } else { -xk };
        xk *= x;
    }
    x.powi(10) * sum
}

/// Product cutoff on a cube: 1 where every coordinate is within the
/// plateau, 0 where any exceeds the support.
fn cutoff_at(p: &[f64], plateau: f64, support: f64) -> f64 {
    p.iter()
        .map(|&x| bump_profile(x, plateau, support))
        .product()
}

/// Lattice refinement factor for the stored interpolation grids. Off-grid
/// reads of the corrector (point inversion, matrix assembly, downstream
/// field sampling) go through polynomial interpolation; on the working
/// lattice that interpolation error sits at the grid scale and pollutes
/// smoothness measurements of the assembled fields. Two dimensions refine
/// fourfold; three-dimensional grids stay as they are, since nothing
/// downstream reads them off-grid at comparable tolerances and the memory
/// cost grows with the cube.
fn interp_refine_factor(n: usize) -> usize {
    if n <= 2 {
        4
    } else {
        1
    }
}

/// Zero-pads a spectrum onto a lattice refined by an integer factor with
/// the same period, rescaled so the inverse transform reproduces the same
/// trigonometric interpolant at the new nodes.
fn pad_spectrum(hat: &[Complex64], shape: &[usize], fine_shape: &[usize]) -> Vec<Complex64> {
    let n = shape.len();
    let fine_nodes: usize = fine_shape.iter().product();
    let nodes: usize = shape.iter().product();
    let scale = fine_nodes as f64 / nodes as f64;
    let mut out = vec![Complex64::default(); fine_nodes];
    let mut idx = vec![0usize; n];
    for (lin, &h) in hat.iter().enumerate() {
        let mut rest = lin;
        for axis in (0..n).rev() {
            idx[axis] = rest % shape[axis];
            rest /= shape[axis];
        }
        let mut fine_lin = 0usize;
        for a in 0..n {
            let len = shape[a] as isize;
            let k = idx[a] as isize;
            let signed = if 2 * k < len { k } else { k - len };
            let fk = if signed >= 0 {
                signed as usize
            } else {
                (signed + fine_shape[a] as isize) as usize
            };
            fine_lin = fine_lin * fine_shape[a] + fk;
        }
        out[fine_lin] = h * scale;
    }
    out
}

/// FFT plans and frequency tables for one periodic grid.
struct SpectralBox {
    shape: Vec<usize>,
    origin: Vec<f64>,
    spacing: f64,
    nodes: usize,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
    /// Angular frequencies per axis; the unmatched half-spectrum mode is
    /// zeroed so derivative multipliers stay conjugate-symmetric.
    omega: Vec<Vec<f64>>,
}

impl SpectralBox {
    fn for_grid(grid: &GridField) -> Self {
        let mut planner = FftPlanner::new();
        let shape = grid.shape().to_vec();
        let spacing = grid.spacing();
        let mut fwd = Vec::new();
        let mut inv = Vec::new();
        let mut omega = Vec::new();
        for &len in &shape {
            fwd.push(planner.plan_fft_forward(len));
            inv.push(planner.plan_fft_inverse(len));
            let period = len as f64 * spacing;
            let mut om = vec![0.0; len];
            for (k, slot) in om.iter_mut().enumerate() {
                let signed = if 2 * k < len {
                    k as isize
                } else if 2 * k == len {
                    0
                } else {
                    k as isize - len as isize
                };
                *slot = 2.0 * std::f64::consts::PI * signed as f64 / period;
            }
            omega.push(om);
        }
        SpectralBox {
            shape,
            origin: grid.origin().to_vec(),
            spacing,
            nodes: grid.num_nodes(),
            fwd,
            inv,
            omega,
        }
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    fn axis_pass(&self, buf: &mut [Complex64], axis: usize, inverse: bool) {
        let len = self.shape[axis];
        let stride = self.stride(axis);
        let plan = if inverse {
            &self.inv[axis]
        } else {
            &self.fwd[axis]
        };
        let mut line = vec![Complex64::default(); len];
        let block = len * stride;
        for base in (0..self.nodes).step_by(block) {
            for off in 0..stride {
                for (i, slot) in line.iter_mut().enumerate() {
                    *slot = buf[base + off + i * stride];
                }
                plan.process(&mut line);
                for (i, &v) in line.iter().enumerate() {
                    buf[base + off + i * stride] = v;
                }
            }
        }
    }

    fn fft(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for axis in 0..self.shape.len() {
            self.axis_pass(&mut buf, axis, false);
        }
        buf
    }

    fn ifft(&self, hat: &[Complex64]) -> Vec<f64> {
        let mut buf = hat.to_vec();
        for axis in 0..self.shape.len() {
            self.axis_pass(&mut buf, axis, true);
        }
        let scale = 1.0 / self.nodes as f64;
        buf.iter().map(|v| v.re * scale).collect()
    }

    /// Frequency vector of linear mode index `lin`, written into `out`.
    fn mode_omega(&self, lin: usize, out: &mut [f64]) {
        let mut rest = lin;
        for axis in (0..self.shape.len()).rev() {
            let k = rest % self.shape[axis];
            rest /= self.shape[axis];
            out[axis] = self.omega[axis][k];
        }
    }

    fn derivative_hat(&self, hat: &[Complex64], axis: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); hat.len()];
        let mut om = vec![0.0; self.shape.len()];
        for (lin, slot) in out.iter_mut().enumerate() {
            self.mode_omega(lin, &mut om);
            *slot = hat[lin] * Complex64::new(0.0, om[axis]);
        }
        out
    }

    fn laplacian_hat(&self, hat: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); hat.len()];
        let mut om = vec![0.0; self.shape.len()];
        for (lin, slot) in out.iter_mut().enumerate() {
            self.mode_omega(lin, &mut om);
            let w2: f64 = om.iter().map(|w| w * w).sum();
            *slot = -hat[lin] * w2;
        }
        out
    }

    /// Solves `-lap u = f` spectrally; modes with zero symbol (the mean,
    /// and the zeroed unmatched modes) are dropped.
    fn inv_neg_laplacian_hat(&self, hat: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); hat.len()];
        let mut om = vec![0.0; self.shape.len()];
        for (lin, slot) in out.iter_mut().enumerate() {
            self.mode_omega(lin, &mut om);
            let w2: f64 = om.iter().map(|w| w * w).sum();
            *slot = if w2 > 0.0 {
                hat[lin] / w2
            } else {
                Complex64::default()
            };
        }
        out
    }

    /// Band-limited evaluation of a transformed field at an arbitrary point.
    fn eval_at(&self, hat: &[Complex64], p: &[f64]) -> f64 {
        let n = self.shape.len();
        let mut s = vec![0.0; n];
        for a in 0..n {
            s[a] = (p[a] - self.origin[a]) / self.spacing;
        }
        let mut acc = Complex64::default();
        let mut idx = vec![0usize; n];
        for (lin, &h) in hat.iter().enumerate() {
            let mut rest = lin;
            for axis in (0..n).rev() {
                idx[axis] = rest % self.shape[axis];
                rest /= self.shape[axis];
            }
            let mut phase = 0.0;
            for a in 0..n {
                let k = idx[a];
                let len = self.shape[a];
                let signed = if 2 * k < len {
                    k as f64
                } else if 2 * k == len {
                    0.0
                } else {
                    k as f64 - len as f64
                };
                phase += 2.0 * std::f64::consts::PI * signed * s[a] / len as f64;
            }
            acc += h * Complex64::new(phase.cos(), phase.sin());
        }
        acc.re / self.nodes as f64
    }
}

/// Applies the curl/divergence operator with 4th-order finite differences.
pub fn apply_e(a: &GridField) -> Result<GridField, EllipticError> {
    let n = a.n();
    if a.rank() != n {
        return Err(EllipticError::BadRank {
            expected: n,
            found: a.rank(),
        });
    }
    let pairs = curl_pairs(n);
    let mut out = GridField::new(
        a.shape(),
        a.spacing(),
        a.origin(),
        target_rank(n),
        a.boundary_margin(),
    )?;
    let mut partials: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for c in 0..n {
        partials.push((0..n).map(|axis| a.fd_partial(c, axis)).collect());
    }
    for (ci, &(j, k)) in pairs.iter().enumerate() {
        let curl: Vec<f64> = partials[k][j]
            .iter()
            .zip(&partials[j][k])
            .map(|(djak, dkaj)| djak - dkaj)
            .collect();
        out.set_component(ci, &curl)?;
    }
    let mut div = vec![0.0; a.num_nodes()];
    for j in 0..n {
        for (slot, &v) in div.iter_mut().zip(&partials[j][j]) {
            *slot += v;
        }
    }
    out.set_component(pairs.len(), &div)?;
    Ok(out)
}

/// Applies the curl/divergence operator spectrally, treating the grid as
/// one period of a periodic field.
pub fn apply_e_spectral(a: &GridField) -> Result<GridField, EllipticError> {
    let n = a.n();
    if a.rank() != n {
        return Err(EllipticError::BadRank {
            expected: n,
            found: a.rank(),
        });
    }
    let sbox = SpectralBox::for_grid(a);
    let hats: Vec<Vec<Complex64>> = (0..n).map(|c| sbox.fft(a.component(c))).collect();
    let out_hats = e_hat(&sbox, &hats);
    let mut out = GridField::new(
        a.shape(),
        a.spacing(),
        a.origin(),
        target_rank(n),
        a.boundary_margin(),
    )?;
    for (c, h) in out_hats.iter().enumerate() {
        out.set_component(c, &sbox.ifft(h))?;
    }
    Ok(out)
}

/// Curl/divergence in frequency space.
fn e_hat(sbox: &SpectralBox, a_hats: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let n = a_hats.len();
    let pairs = curl_pairs(n);
    let mut out = Vec::with_capacity(pairs.len() + 1);
    for &(j, k) in &pairs {
        let dj_ak = sbox.derivative_hat(&a_hats[k], j);
        let dk_aj = sbox.derivative_hat(&a_hats[j], k);
        out.push(dj_ak.iter().zip(&dk_aj).map(|(x, y)| x - y).collect());
    }
    let mut div = vec![Complex64::default(); a_hats[0].len()];
    for j in 0..n {
        let d = sbox.derivative_hat(&a_hats[j], j);
        for (slot, v) in div.iter_mut().zip(d) {
            *slot += v;
        }
    }
    out.push(div);
    out
}

/// Adjoint of the curl/divergence operator in frequency space: component
/// `j` collects signed derivatives of the curl entries containing `j`,
/// minus the gradient of the divergence part.
fn e_star_hat(sbox: &SpectralBox, target_hats: &[Vec<Complex64>], n: usize) -> Vec<Vec<Complex64>> {
    let pairs = curl_pairs(n);
    let len = target_hats[0].len();
    let mut out = vec![vec![Complex64::default(); len]; n];
    for (ci, &(j, k)) in pairs.iter().enumerate() {
        let dk = sbox.derivative_hat(&target_hats[ci], k);
        for (slot, v) in out[j].iter_mut().zip(dk) {
            *slot += v;
        }
        let dj = sbox.derivative_hat(&target_hats[ci], j);
        for (slot, v) in out[k].iter_mut().zip(dj) {
            *slot -= v;
        }
    }
    let g = &target_hats[pairs.len()];
    for j in 0..n {
        let dj = sbox.derivative_hat(g, j);
        for (slot, v) in out[j].iter_mut().zip(dj) {
            *slot -= v;
        }
    }
    out
}

/// Result of [`right_inverse_p`].
#[derive(Debug)]
pub struct PSolution {
    /// Solution on the input grid geometry.
    pub b: GridField,
    /// Sup of the reconstruction error against the input on the inner
    /// plateau ball, relative to the input sup.
    pub residual_inf: f64,
    /// Per-component means removed before the spectral solve (restored via
    /// an exact linear particular solution, so they do not hurt the
    /// residual).
    pub mean_removed: Vec<f64>,
    /// `|B(0)| + |dB(0)|` after normalization. Only the constant and the
    /// symmetric-traceless gradient can be removed without disturbing the
    /// equation, so this equals the curl/trace content of the input at 0;
    /// it vanishes exactly when the input vanishes at 0.
    pub jet_origin: f64,
}

/// Right inverse of the curl/divergence operator: solves `E B = g` on the
/// inner plateau of the input cube. The input is cut off, embedded in a
/// periodic cube of twice the side, and inverted through the adjoint and
/// the inverse Laplacian; removed means are restored by a linear particular
/// solution. The output is normalized at the origin by subtracting the
/// kernel part of its affine jet.
pub fn right_inverse_p(g: &GridField) -> Result<PSolution, EllipticError> {
    let n = g.n();
    let m = target_rank(n);
    if g.rank() != m {
        return Err(EllipticError::BadRank {
            expected: m,
            found: g.rank(),
        });
    }
    let half = cube_half(g)?;
    let res = g.shape()[0];
    let plateau = CUTOFF_PLATEAU_FRAC * half;
    let support = CUTOFF_SUPPORT_FRAC * half;

    let big = embed_cutoff(g, plateau, support)?;
    let sbox = SpectralBox::for_grid(&big);
    let mut mean_removed = vec![0.0; m];
    let mut hats: Vec<Vec<Complex64>> = Vec::with_capacity(m);
    for c in 0..m {
        let mut h = sbox.fft(big.component(c));
        mean_removed[c] = h[0].re / sbox.nodes as f64;
        h[0] = Complex64::default();
        hats.push(h);
    }
    let u_hats: Vec<Vec<Complex64>> = hats
        .iter()
        .map(|h| sbox.inv_neg_laplacian_hat(h))
        .collect();
    let b_hats = e_star_hat(&sbox, &u_hats, n);

    // Linear particular solution restoring the removed means: a matrix L
    // with prescribed antisymmetric part (curl means) and trace (div mean);
    // B_lin(t) = L t maps to exactly those constants.
    let pairs = curl_pairs(n);
    let mut lin = DMatrix::<f64>::zeros(n, n);
    for (ci, &(j, k)) in pairs.iter().enumerate() {
        // Component row k, column j: d_j B_k - d_k B_j = L[(k,j)] - L[(j,k)].
        lin[(k, j)] = mean_removed[ci];
    }
    for j in 0..n {
        lin[(j, j)] = mean_removed[pairs.len()] / n as f64;
    }

    // Affine jet at the origin; the linear part contributes only to the
    // gradient.
    let mut b0 = vec![0.0; n];
    let mut db0 = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        b0[j] = sbox.eval_at(&b_hats[j], &vec![0.0; n]);
        for k in 0..n {
            let d = sbox.derivative_hat(&b_hats[j], k);
            db0[(j, k)] = sbox.eval_at(&d, &vec![0.0; n]) + lin[(j, k)];
        }
    }
    // Kernel part of the gradient: symmetric and traceless.
    let sym = (&db0 + db0.transpose()) * 0.5;
    let kernel_grad = &sym - DMatrix::identity(n, n) * (sym.trace() / n as f64);
    let resid_grad = &db0 - &kernel_grad;
    let jet_origin = resid_grad.iter().map(|v| v * v).sum::<f64>().sqrt();

    // Assemble on the big grid: spectral part + linear restore - jet.
    let mut b_big = GridField::new(big.shape(), big.spacing(), big.origin(), n, 0)?;
    let mut point = vec![0.0; n];
    let mut idx = vec![0usize; n];
    for j in 0..n {
        let vals = sbox.ifft(&b_hats[j]);
        let comp = b_big.component_mut(j);
        for (lin_idx, slot) in comp.iter_mut().enumerate() {
            *slot = vals[lin_idx];
        }
    }
    for lin_idx in 0..b_big.num_nodes() {
        b_big.decompose(lin_idx, &mut idx);
        b_big.node_point_into(&idx, &mut point);
        for j in 0..n {
            let mut v = b_big.get_lin(lin_idx, j) - b0[j];
            for k in 0..n {
                v += (lin[(j, k)] - kernel_grad[(j, k)]) * point[k];
            }
            b_big.set_lin(lin_idx, j, v);
        }
    }

    // Reconstruction residual on the plateau ball, checked spectrally so
    // the only error sources are the removed kernel jet and rounding.
    let rec_hats = e_hat(&sbox, &b_hats);
    let mut rec = GridField::new(big.shape(), big.spacing(), big.origin(), m, 0)?;
    for (c, h) in rec_hats.iter().enumerate() {
        rec.set_component(c, &sbox.ifft(h))?;
    }
    let sup_g = g.sup_value_norm().max(f64::MIN_POSITIVE);
    let mut residual_inf = 0.0f64;
    for lin_idx in 0..rec.num_nodes() {
        rec.decompose(lin_idx, &mut idx);
        rec.node_point_into(&idx, &mut point);
        let r2: f64 = point.iter().map(|x| x * x).sum();
        if r2.sqrt() > plateau {
            continue;
        }
        // E of the linear restore is the removed mean; E of the subtracted
        // jet is zero.
        for (ci, &(j, k)) in pairs.iter().enumerate() {
            let want = big.get_lin(lin_idx, ci);
            let got = rec.get_lin(lin_idx, ci) + (lin[(k, j)] - lin[(j, k)]);
            residual_inf = residual_inf.max((got - want).abs());
        }
        let want = big.get_lin(lin_idx, pairs.len());
        let got = rec.get_lin(lin_idx, pairs.len()) + lin.trace();
        residual_inf = residual_inf.max((got - want).abs());
    }
    residual_inf /= sup_g;

    let b = restrict_to_inner(&b_big, res)?;
    Ok(PSolution {
        b,
        residual_inf,
        mean_removed,
        jet_origin,
    })
}

/// Origin value of the input as the right-inverse solve sees it: the
/// spectral interpolant of the cutoff periodic embedding, evaluated at 0.
/// The affine obstruction of [`right_inverse_p`] equals the curl/trace
/// content of this vector, so centering an input by it (twice, since the
/// cutoff weighs the shift) makes the origin normalization exact.
pub fn embedded_origin_value(g: &GridField) -> Result<Vec<f64>, EllipticError> {
    let half = cube_half(g)?;
    let big = embed_cutoff(g, CUTOFF_PLATEAU_FRAC * half, CUTOFF_SUPPORT_FRAC * half)?;
    let sbox = SpectralBox::for_grid(&big);
    let origin = vec![0.0; g.n()];
    let mut out = vec![0.0; g.rank()];
    for (c, slot) in out.iter_mut().enumerate() {
        let h = sbox.fft(big.component(c));
        *slot = sbox.eval_at(&h, &origin);
    }
    Ok(out)
}

/// Embeds a cube grid into a periodic working grid of odd size `2 res + 1`
/// sharing the input nodes, multiplied by the smooth cutoff. An odd size
/// leaves no unmatched half-spectrum mode, so every nonzero frequency is
/// differentiable exactly and only the mean needs special handling.
fn embed_cutoff(g: &GridField, plateau: f64, support: f64) -> Result<GridField, EllipticError> {
    let n = g.n();
    let res = g.shape()[0];
    cube_half(g)?;
    let spacing = g.spacing();
    let offset = res / 2;
    let origin_big: Vec<f64> = g
        .origin()
        .iter()
        .map(|&o| o - offset as f64 * spacing)
        .collect();
    let mut big = GridField::new(&vec![2 * res + 1; n], spacing, &origin_big, g.rank(), 0)?;
    let mut idx = vec![0usize; n];
    let mut point = vec![0.0; n];
    for lin in 0..g.num_nodes() {
        g.decompose(lin, &mut idx);
        g.node_point_into(&idx, &mut point);
        let w = cutoff_at(&point, plateau, support);
        if w == 0.0 {
            continue;
        }
        let big_idx: Vec<usize> = idx.iter().map(|&i| i + offset).collect();
        let big_lin = big.linear(&big_idx);
        for c in 0..g.rank() {
            big.set_lin(big_lin, c, w * g.get_lin(lin, c));
        }
    }
    Ok(big)
}

/// Restricts the periodic working grid back to the inner cube geometry.
fn restrict_to_inner(big: &GridField, res: usize) -> Result<GridField, EllipticError> {
    let n = big.n();
    let offset = res / 2;
    let spacing = big.spacing();
    let origin: Vec<f64> = big
        .origin()
        .iter()
        .map(|&o| o + offset as f64 * spacing)
        .collect();
    let mut inner = GridField::new(&vec![res; n], spacing, &origin, big.rank(), 0)?;
    let mut idx = vec![0usize; n];
    for lin in 0..inner.num_nodes() {
        inner.decompose(lin, &mut idx);
        let big_idx: Vec<usize> = idx.iter().map(|&i| i + offset).collect();
        let big_lin = big.linear(&big_idx);
        for c in 0..big.rank() {
            inner.set_lin(lin, c, big.get_lin(big_lin, c));
        }
    }
    Ok(inner)
}

/// Smooth periodic interpolation: tensor-product 6-point Lagrange with
/// periodic wrapping. Exact on quintics; error decays with the sixth power
/// of the spacing on smooth fields.
pub(crate) fn interp6_periodic(grid: &GridField, p: &[f64], out: &mut [f64]) {
    let n = grid.n();
    let h = grid.spacing();
    let mut base = vec![0isize; n];
    let mut weights = vec![[0.0f64; 6]; n];
    for a in 0..n {
        let s = (p[a] - grid.origin()[a]) / h;
        let i0 = s.floor();
        let x = s - i0;
        base[a] = i0 as isize;
        for (j, w) in weights[a].iter_mut().enumerate() {
            let off = j as f64 - 2.0;
            let mut acc = 1.0;
            for m in 0..6 {
                if m == j {
                    continue;
                }
                let om = m as f64 - 2.0;
                acc *= (x - om) / (off - om);
            }
            *w = acc;
        }
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut combo = vec![0usize; n];
    loop {
        let mut w = 1.0;
        let mut idx = vec![0usize; n];
        for a in 0..n {
            w *= weights[a][combo[a]];
            let len = grid.shape()[a] as isize;
            let i = (base[a] + combo[a] as isize - 2).rem_euclid(len);
            idx[a] = i as usize;
        }
        let lin = grid.linear(&idx);
        for (c, slot) in out.iter_mut().enumerate() {
            *slot += w * grid.get_lin(lin, c);
        }
        // Odometer over the 6^n stencil.
        let mut a = n;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            combo[a] += 1;
            if combo[a] < 6 {
                break;
            }
            combo[a] = 0;
        }
    }
}

/// Result of [`solve_corrector`]: the corrector field R, the assembled
/// coefficient matrix in the new coordinates, and the run diagnostics.
#[derive(Debug)]
pub struct CorrectorSolution {
    /// Corrector on the input cube geometry, affine-normalized so the value
    /// and gradient at the origin vanish.
    pub r: GridField,
    /// Corrector on the periodic working cube (twice the side), for smooth
    /// off-grid evaluation. In two dimensions this lattice is refined by
    /// [`interp_refine_factor`] via zero-padded resampling.
    pub r_ext: GridField,
    /// Gradient of the corrector on the working cube (same lattice as
    /// `r_ext`), component `(j, k)` holding `d_k R_j` at slot `j * n + k`.
    pub dr_ext: GridField,
    /// Assembled coefficient matrix in the corrected coordinates on the
    /// working cube (same lattice as `r_ext`), divergence-free columns up
    /// to the reported residual.
    pub a_hat: GridField,
    pub iterations: usize,
    /// Final sup of the divergence functional driving the iteration,
    /// measured on the inner verification ball.
    pub residual_psi: f64,
    /// Independent divergence check of the assembled matrix, by spectral
    /// differentiation after point inversion, on the verification ball.
    pub div_residual: f64,
    /// Minimum Jacobian determinant of the coordinate change on the
    /// verification ball.
    pub det_dh_min: f64,
    /// Largest input norm witnessed to converge; for a plain solve this is
    /// the measured input norm.
    pub gamma2_estimate: f64,
}

impl CorrectorSolution {
    fn n(&self) -> usize {
        self.r_ext.n()
    }

    /// Corrector value at an arbitrary point of the working cube.
    pub fn r_at(&self, t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        interp6_periodic(&self.r_ext, t, &mut out);
        out
    }

    /// Corrector gradient at an arbitrary point, entry `(j, k) = d_k R_j`.
    pub fn dr_at(&self, t: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut flat = vec![0.0; n * n];
        interp6_periodic(&self.dr_ext, t, &mut flat);
        DMatrix::from_fn(n, n, |j, k| flat[j * n + k])
    }

    /// The coordinate change `H(t) = t + R(t)`.
    pub fn h_at(&self, t: &[f64]) -> Vec<f64> {
        let r = self.r_at(t);
        t.iter().zip(r).map(|(a, b)| a + b).collect()
    }

    /// Inverts the coordinate change at `v` by Newton iteration started
    /// from `v` itself.
    pub fn h_inverse(&self, v: &[f64]) -> Result<Vec<f64>, EllipticError> {
        let n = self.n();
        let mut x = v.to_vec();
        for _ in 0..NEWTON_MAX_ITERS {
            let r = self.r_at(&x);
            let f = DVector::from_fn(n, |j, _| x[j] + r[j] - v[j]);
            if f.norm() < NEWTON_TOL {
                return Ok(x);
            }
            let dh = DMatrix::identity(n, n) + self.dr_at(&x);
            let delta = dh
                .lu()
                .solve(&f)
                .ok_or(EllipticError::NewtonFailed)?;
            for j in 0..n {
                x[j] -= delta[j];
            }
        }
        let r = self.r_at(&x);
        let f = DVector::from_fn(n, |j, _| x[j] + r[j] - v[j]);
        if f.norm() < NEWTON_TOL {
            Ok(x)
        } else {
            Err(EllipticError::NewtonFailed)
        }
    }

    /// Assembled coefficient matrix at an arbitrary point, entry
    /// `(j, k)` at slot `j * n + k`.
    pub fn a_hat_at(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut flat = vec![0.0; n * n];
        interp6_periodic(&self.a_hat, v, &mut flat);
        DMatrix::from_fn(n, n, |j, k| flat[j * n + k])
    }
}

/// Solves for the corrector R making the columns of the transported
/// coefficient matrix divergence-free. The input matrix field A must live
/// on a cell-centered cube with even resolution; the measured norm of A at
/// order `s0` must not exceed the working threshold.
pub fn solve_corrector(
    a: &GridField,
    s0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CorrectorSolution, EllipticError> {
    solve_corrector_gated(a, s0, tol, max_iter, CORRECTOR_NORM_LIMIT)
}

fn solve_corrector_gated(
    a: &GridField,
    s0: f64,
    tol: f64,
    max_iter: usize,
    gate: f64,
) -> Result<CorrectorSolution, EllipticError> {
    let n = a.n();
    if a.rank() != n * n {
        return Err(EllipticError::BadRank {
            expected: n * n,
            found: a.rank(),
        });
    }
    let half = cube_half(a)?;
    let res = a.shape()[0];
    let plateau = CORRECTOR_PLATEAU_FRAC * half;
    let support = CUTOFF_SUPPORT_FRAC * half;
    let verify_radius = 0.75 * half;

    let a_norm = zygmund_norm_grid(
        ZygTarget::Sampled(a),
        s0,
        &Ball::new(vec![0.0; n], half),
        &ZygmundCfg::default(),
    )?
    .norm;
    if a_norm > gate {
        return Err(EllipticError::NormTooLarge {
            measured: a_norm,
            limit: gate,
        });
    }

    let a_ext = embed_cutoff(a, plateau, support)?;
    let sbox = SpectralBox::for_grid(&a_ext);
    let nodes = a_ext.num_nodes();
    let origin0 = vec![0.0; n];

    // Node coordinates and the verification mask, computed once.
    let mut points = vec![0.0; nodes * n];
    let mut verify = vec![false; nodes];
    {
        let mut idx = vec![0usize; n];
        let mut p = vec![0.0; n];
        for lin in 0..nodes {
            a_ext.decompose(lin, &mut idx);
            a_ext.node_point_into(&idx, &mut p);
            points[lin * n..(lin + 1) * n].copy_from_slice(&p);
            let r2: f64 = p.iter().map(|x| x * x).sum();
            verify[lin] = r2.sqrt() <= verify_radius;
        }
    }

    // State: periodic part of R per component, plus the affine correction
    // subtracted analytically (value and gradient at the origin).
    let mut r_p: Vec<Vec<f64>> = vec![vec![0.0; nodes]; n];
    let mut aff_a = vec![0.0; n];
    let mut aff_m = DMatrix::<f64>::zeros(n, n);

    let mut best = f64::INFINITY;
    let mut prev = f64::INFINITY;
    let mut rises = 0usize;
    let mut iterations = 0usize;
    let mut residual: f64;
    let mut dr = vec![0.0; nodes * n * n];
    let mut w = vec![0.0; nodes * n * n];

    loop {
        iterations += 1;
        let r_hats: Vec<Vec<Complex64>> = r_p.iter().map(|c| sbox.fft(c)).collect();
        // dr[(lin, j, k)] = d_k R_j.
        for j in 0..n {
            for k in 0..n {
                let d = sbox.ifft(&sbox.derivative_hat(&r_hats[j], k));
                let m = aff_m[(j, k)];
                for lin in 0..nodes {
                    dr[(j * n + k) * nodes + lin] = d[lin] - m;
                }
            }
        }
        // W = dR^T + A (I + dR^T), with A already cut off.
        for lin in 0..nodes {
            for j in 0..n {
                for k in 0..n {
                    // (dR^T)_{jk} = d_j R_k.
                    let mut v = dr[(k * n + j) * nodes + lin];
                    for l in 0..n {
                        let a_jl = a_ext.get_lin(lin, j * n + l);
                        let drt_lk = dr[(k * n + l) * nodes + lin];
                        v += a_jl * (if l == k { 1.0 } else { 0.0 }) + a_jl * drt_lk;
                    }
                    w[(j * n + k) * nodes + lin] = v;
                }
            }
        }
        // Divergence functional: psi_k = sum_j grad(W_{jk}) . J e_j with
        // J = (I + dR)^{-1}, evaluated in the flat coordinates.
        let w_hats: Vec<Vec<Complex64>> = (0..n * n)
            .map(|c| sbox.fft(&w[c * nodes..(c + 1) * nodes]))
            .collect();
        let mut dw = vec![0.0; nodes * n * n * n];
        for c in 0..n * n {
            for axis in 0..n {
                let d = sbox.ifft(&sbox.derivative_hat(&w_hats[c], axis));
                dw[(c * n + axis) * nodes..(c * n + axis + 1) * nodes].copy_from_slice(&d);
            }
        }
        let mut psi = vec![0.0; nodes * n];
        let mut min_det = f64::INFINITY;
        for lin in 0..nodes {
            let dh = DMatrix::from_fn(n, n, |j, k| {
                (if j == k { 1.0 } else { 0.0 }) + dr[(j * n + k) * nodes + lin]
            });
            let det = dh.determinant();
            if verify[lin] {
                min_det = min_det.min(det);
            }
            let jmat = match dh.try_inverse() {
                Some(m) => m,
                None => {
                    return Err(EllipticError::DegenerateJacobian { det });
                }
            };
            for k in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    for axis in 0..n {
                        acc += dw[((j * n + k) * n + axis) * nodes + lin] * jmat[(axis, j)];
                    }
                }
                psi[k * nodes + lin] = acc;
            }
        }
        residual = 0.0;
        for lin in 0..nodes {
            if !verify[lin] {
                continue;
            }
            for k in 0..n {
                residual = residual.max(psi[k * nodes + lin].abs());
            }
        }
        if min_det < 0.1 {
            return Err(EllipticError::DegenerateJacobian { det: min_det });
        }

        if residual < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(EllipticError::MaxIterations { max_iter, residual });
        }
        if residual > prev {
            rises += 1;
            if rises >= 3 {
                return Err(EllipticError::NonContraction {
                    iterations,
                    residual,
                    best,
                });
            }
        } else {
            rises = 0;
        }
        prev = residual;
        best = best.min(residual);

        // Update: split the functional as lap R + remainder and solve the
        // Poisson problem for the remainder.
        for k in 0..n {
            let lap = sbox.ifft(&sbox.laplacian_hat(&r_hats[k]));
            let mut rhs = vec![0.0; nodes];
            for lin in 0..nodes {
                rhs[lin] = psi[k * nodes + lin] - lap[lin];
            }
            let mut rhs_hat = sbox.fft(&rhs);
            rhs_hat[0] = Complex64::default();
            let new_hat = sbox.inv_neg_laplacian_hat(&rhs_hat);
            r_p[k] = sbox.ifft(&new_hat);
            aff_a[k] = sbox.eval_at(&new_hat, &origin0);
            for axis in 0..n {
                let d = sbox.derivative_hat(&new_hat, axis);
                aff_m[(k, axis)] = sbox.eval_at(&d, &origin0);
            }
        }
    }

    // Bake the affine correction into output grids.
    let mut r_ext = GridField::new(a_ext.shape(), a_ext.spacing(), a_ext.origin(), n, 0)?;
    let mut det_dh_min = f64::INFINITY;
    for lin in 0..nodes {
        let p = &points[lin * n..(lin + 1) * n];
        for j in 0..n {
            let mut v = r_p[j][lin] - aff_a[j];
            for k in 0..n {
                v -= aff_m[(j, k)] * p[k];
            }
            r_ext.set_lin(lin, j, v);
        }
        if verify[lin] {
            let dh = DMatrix::from_fn(n, n, |j, k| {
                (if j == k { 1.0 } else { 0.0 }) + dr[(j * n + k) * nodes + lin]
            });
            det_dh_min = det_dh_min.min(dh.determinant());
        }
    }
    if det_dh_min < MIN_DET_DH {
        return Err(EllipticError::DegenerateJacobian { det: det_dh_min });
    }
    let r_inner = restrict_to_inner(&r_ext, res)?;

    // Storage lattice for the interpolated fields, refined by zero-padded
    // resampling where the factor asks for it.
    let factor = interp_refine_factor(n);
    let store_shape: Vec<usize> = a_ext.shape().iter().map(|&s| s * factor).collect();
    let store_spacing = a_ext.spacing() / factor as f64;
    let store_nodes: usize = store_shape.iter().product();
    let mut r_store = GridField::new(&store_shape, store_spacing, a_ext.origin(), n, 0)?;
    let mut dr_store = GridField::new(&store_shape, store_spacing, a_ext.origin(), n * n, 0)?;
    let mut w_store = GridField::new(&store_shape, store_spacing, a_ext.origin(), n * n, 0)?;
    if factor == 1 {
        r_store = r_ext;
        for c in 0..n * n {
            dr_store.set_component(c, &dr[c * nodes..(c + 1) * nodes])?;
            w_store.set_component(c, &w[c * nodes..(c + 1) * nodes])?;
        }
    } else {
        let store_box = SpectralBox::for_grid(&r_store);
        let mut p = vec![0.0; n];
        let mut idx = vec![0usize; n];
        for j in 0..n {
            let fh = pad_spectrum(&sbox.fft(&r_p[j]), a_ext.shape(), &store_shape);
            let vals = store_box.ifft(&fh);
            for lin in 0..store_nodes {
                r_store.decompose(lin, &mut idx);
                r_store.node_point_into(&idx, &mut p);
                let mut v = vals[lin] - aff_a[j];
                for k in 0..n {
                    v -= aff_m[(j, k)] * p[k];
                }
                r_store.set_lin(lin, j, v);
            }
            for k in 0..n {
                let dvals = store_box.ifft(&store_box.derivative_hat(&fh, k));
                let m = aff_m[(j, k)];
                let shifted: Vec<f64> = dvals.iter().map(|d| d - m).collect();
                dr_store.set_component(j * n + k, &shifted)?;
            }
        }
        for c in 0..n * n {
            let fh = pad_spectrum(
                &sbox.fft(&w[c * nodes..(c + 1) * nodes]),
                a_ext.shape(),
                &store_shape,
            );
            w_store.set_component(c, &store_box.ifft(&fh))?;
        }
    }

    let mut partial = CorrectorSolution {
        r: r_inner,
        r_ext: r_store,
        dr_ext: dr_store,
        a_hat: GridField::new(&store_shape, store_spacing, a_ext.origin(), n * n, 0)?,
        iterations,
        residual_psi: residual,
        div_residual: f64::NAN,
        det_dh_min,
        gamma2_estimate: a_norm,
    };

    // Assemble the transported matrix on the storage lattice by inverting
    // the coordinate change at every node.
    let w_ref = &w_store;
    let a_hat_vals: Vec<Vec<f64>> = (0..store_nodes)
        .into_par_iter()
        .map(|lin| {
            let mut idx = vec![0usize; n];
            let mut v = vec![0.0; n];
            partial.a_hat.decompose(lin, &mut idx);
            partial.a_hat.node_point_into(&idx, &mut v);
            let t = partial.h_inverse(&v)?;
            let mut flat = vec![0.0; n * n];
            interp6_periodic(w_ref, &t, &mut flat);
            Ok(flat)
        })
        .collect::<Result<Vec<_>, EllipticError>>()?;
    for (lin, flat) in a_hat_vals.iter().enumerate() {
        for c in 0..n * n {
            partial.a_hat.set_lin(lin, c, flat[c]);
        }
    }

    // Divergence check on the working lattice, which the refined lattice
    // contains as an integer-stride sublattice.
    let mut sub = vec![0.0; nodes];
    let mut div_residual = 0.0f64;
    let mut idx = vec![0usize; n];
    for k in 0..n {
        let mut div = vec![0.0; nodes];
        for j in 0..n {
            for (lin, slot) in sub.iter_mut().enumerate() {
                a_ext.decompose(lin, &mut idx);
                for i in idx.iter_mut() {
                    *i *= factor;
                }
                *slot = partial.a_hat.get(&idx, j * n + k);
            }
            let h = sbox.fft(&sub);
            let d = sbox.ifft(&sbox.derivative_hat(&h, j));
            for (slot, v) in div.iter_mut().zip(d) {
                *slot += v;
            }
        }
        for lin in 0..nodes {
            if verify[lin] {
                div_residual = div_residual.max(div[lin].abs());
            }
        }
    }
    partial.div_residual = div_residual;

    // Coverage: the inner half-radius ball must invert into the
    // verification ball.
    let dirs = 16 * n;
    for d in 0..dirs {
        for &rad in &[0.25 * half, 0.5 * half] {
            let mut v = vec![0.0; n];
            let angle = 2.0 * std::f64::consts::PI * d as f64 / dirs as f64;
            if n == 2 {
                v[0] = rad * angle.cos();
                v[1] = rad * angle.sin();
            } else {
                // Low-discrepancy direction on the sphere via normalized
                // lattice offsets.
                let mut norm = 0.0;
                for (a, slot) in v.iter_mut().enumerate() {
                    let u = ((d + 1) as f64 * (a as f64 + 1.0) * 0.7548776662).fract() - 0.5;
                    *slot = u;
                    norm += u * u;
                }
                let norm = norm.sqrt().max(1e-9);
                for slot in v.iter_mut() {
                    *slot *= rad / norm;
                }
            }
            let t = partial
                .h_inverse(&v)
                .map_err(|_| EllipticError::CoverageFailed)?;
            let tr: f64 = t.iter().map(|x| x * x).sum::<f64>();
            if tr.sqrt() > verify_radius {
                return Err(EllipticError::CoverageFailed);
            }
        }
    }

    Ok(partial)
}

/// One row of a convergence sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Result of [`gamma2_sweep`].
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Largest tested norm that converged; 0 when none did.
    pub gamma2: f64,
}

/// Dyadic convergence sweep: rescales the input to a ladder of norms and
/// records which scales the corrector solve still handles.
pub fn gamma2_sweep(
    a: &GridField,
    s0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SweepReport, EllipticError> {
    let half = cube_half(a)?;
    let a_norm = zygmund_norm_grid(
        ZygTarget::Sampled(a),
        s0,
        &Ball::new(vec![0.0; a.n()], half),
        &ZygmundCfg::default(),
    )?
    .norm;
    if a_norm <= 0.0 {
        return Ok(SweepReport {
            rows: vec![],
            gamma2: 0.0,
        });
    }
    let mut rows = Vec::new();
    let mut gamma2 = 0.0f64;
    for k in 0..6 {
        let target = 0.8 * 0.5f64.powi(k);
        let scale = target / a_norm;
        let mut scaled = a.clone();
        for v in scaled.values_mut() {
            *v *= scale;
        }
        let run = solve_corrector_gated(&scaled, s0, tol, max_iter, f64::INFINITY);
        let (converged, iterations) = match &run {
            Ok(sol) => (true, sol.iterations),
            Err(_) => (false, max_iter),
        };
        if converged {
            gamma2 = gamma2.max(target);
        }
        rows.push(SweepRow {
            norm: target,
            converged,
            iterations,
        });
    }
    Ok(SweepReport { rows, gamma2 })
}

/// Result of [`bootstrap_check`].
#[derive(Debug, Clone)]
pub struct BootstrapReport {
    /// Fitted exponent of the coefficient matrix.
    pub exponent_a: f64,
    pub capped_a: bool,
    /// Fitted exponent of the commutator data.
    pub exponent_c: f64,
    /// Top of the measurable window at the output order.
    pub cap: f64,
    /// Exponent the coefficient matrix is required to reach.
    pub required: f64,
    pub satisfied: bool,
    /// Sup of the assembled system residual on the measurement ball.
    pub residual: f64,
    /// Gap between the two evaluation orders of the quadratic term.
    pub gamma_gap: f64,
    /// Sup norm of the coefficient matrix.
    pub sup_a: f64,
}

/// Quadratic term of the curl system: for output column `i` and curl pair
/// `(j, k)`, `sum_l (A_{jl} d_l A_{ki} - A_{kl} d_l A_{ji})`.
fn gamma_term(
    a: &GridField,
    partials: &[Vec<f64>],
    i: usize,
    j: usize,
    k: usize,
    fused: bool,
) -> Vec<f64> {
    let n = a.n();
    let nodes = a.num_nodes();
    let mut out = vec![0.0; nodes];
    if fused {
        for lin in 0..nodes {
            let mut acc = 0.0;
            for l in 0..n {
                acc += a.get_lin(lin, j * n + l) * partials[(k * n + i) * n + l][lin]
                    - a.get_lin(lin, k * n + l) * partials[(j * n + i) * n + l][lin];
            }
            out[lin] = acc;
        }
    } else {
        // Termwise accumulation: each product summed into the output in a
        // separate pass, exercising a different association order.
        for l in 0..n {
            for lin in 0..nodes {
                out[lin] += a.get_lin(lin, j * n + l) * partials[(k * n + i) * n + l][lin];
            }
        }
        for l in 0..n {
            for lin in 0..nodes {
                out[lin] -= a.get_lin(lin, k * n + l) * partials[(j * n + i) * n + l][lin];
            }
        }
    }
    out
}

/// Checks the regularity transfer from commutator data to coefficients:
/// the coefficient matrix must be one order smoother than the data, up to
/// the measurable window and a fixed tolerance. Also verifies the
/// assembled curl system and the consistency of the quadratic term.
pub fn bootstrap_check(
    a_hat: &GridField,
    c_hat: &GridField,
    ball: &Ball,
    s_input: f64,
    s_output: f64,
    cfg_in: &ZygmundCfg,
    cfg_out: &ZygmundCfg,
) -> Result<BootstrapReport, EllipticError> {
    let n = a_hat.n();
    let pairs = curl_pairs(n);
    if a_hat.rank() != n * n {
        return Err(EllipticError::BadRank {
            expected: n * n,
            found: a_hat.rank(),
        });
    }
    if c_hat.rank() != n * pairs.len() {
        return Err(EllipticError::BadRank {
            expected: n * pairs.len(),
            found: c_hat.rank(),
        });
    }
    let sup_a = a_hat.sup_value_norm();
    if sup_a > BOOTSTRAP_SUP_LIMIT {
        return Err(EllipticError::NormTooLarge {
            measured: sup_a,
            limit: BOOTSTRAP_SUP_LIMIT,
        });
    }

    // All first partials of all entries, index (entry, axis).
    let nodes = a_hat.num_nodes();
    let mut partials: Vec<Vec<f64>> = Vec::with_capacity(n * n * n);
    for c in 0..n * n {
        for axis in 0..n {
            partials.push(a_hat.fd_partial(c, axis));
        }
    }

    // Ball mask for the residual sup.
    let mut mask = vec![false; nodes];
    {
        let mut idx = vec![0usize; a_hat.n()];
        let mut p = vec![0.0; a_hat.n()];
        for lin in 0..nodes {
            a_hat.decompose(lin, &mut idx);
            a_hat.node_point_into(&idx, &mut p);
            mask[lin] = ball.contains(&p);
        }
    }

    let mut residual = 0.0f64;
    let mut gamma_gap = 0.0f64;
    for i in 0..n {
        for (ci, &(j, k)) in pairs.iter().enumerate() {
            let fused = gamma_term(a_hat, &partials, i, j, k, true);
            let termwise = gamma_term(a_hat, &partials, i, j, k, false);
            let c_comp = c_hat.component(i * pairs.len() + ci);
            // Curl of column i over the pair (j, k).
            for lin in 0..nodes {
                if !mask[lin] {
                    continue;
                }
                gamma_gap = gamma_gap.max((fused[lin] - termwise[lin]).abs());
                let curl = partials[(k * n + i) * n + j][lin] - partials[(j * n + i) * n + k][lin];
                residual = residual.max((curl + fused[lin] - c_comp[lin]).abs());
            }
        }
    }

    let rep_a = zygmund_norm_grid(ZygTarget::Sampled(a_hat), s_output, ball, cfg_out)?;
    let rep_c = zygmund_norm_grid(ZygTarget::Sampled(c_hat), s_input, ball, cfg_in)?;
    let cap = rep_a.m as f64 + 2.0;
    let required = (rep_c.fitted_exponent + 1.0).min(cap) - 0.15;
    Ok(BootstrapReport {
        exponent_a: rep_a.fitted_exponent,
        capped_a: rep_a.capped,
        exponent_c: rep_c.fitted_exponent,
        cap,
        required,
        satisfied: rep_a.fitted_exponent >= required,
        residual,
        gamma_gap,
        sup_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random band-limited periodic field on a centered cube: modes up to
    /// `kmax` per axis with smooth decay.
    fn bandlimited(n: usize, res: usize, half: f64, rank: usize, kmax: i32, seed: u64) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes: Vec<(Vec<i32>, f64, f64, usize)> = Vec::new();
        for c in 0..rank {
            for _ in 0..6 {
                let kv: Vec<i32> = (0..n).map(|_| rng.random_range(-kmax..=kmax)).collect();
                if kv.iter().all(|&k| k == 0) {
                    continue;
                }
                let amp = rng.random::<f64>() - 0.5;
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                modes.push((kv, amp, phase, c));
            }
        }
        let period = 2.0 * half;
        GridField::from_fn(
            &vec![res; n],
            period / res as f64,
            &vec![-half + period / res as f64 / 2.0; n],
            rank,
            0,
            |p, out| {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (kv, amp, phase, c) in &modes {
                    let arg: f64 = kv
                        .iter()
                        .zip(p)
                        .map(|(&k, &x)| 2.0 * std::f64::consts::PI * k as f64 * x / period)
                        .sum();
                    out[*c] += amp * (arg + phase).cos();
                }
            },
        )
        .unwrap()
    }

    #[test]
    fn fd_operator_matches_hand_examples() {
        let res = 64;
        let a1 = GridField::from_fn(&[res, res], 8.0 / res as f64, &[-4.0 + 4.0 / res as f64; 2], 2, 0, |p, out| {
            out[0] = p[0];
            out[1] = p[1];
        })
        .unwrap();
        let e1 = apply_e(&a1).unwrap();
        for lin in 0..e1.num_nodes() {
            assert!(e1.get_lin(lin, 0).abs() < 1e-10, "curl of identity field");
            assert!((e1.get_lin(lin, 1) - 2.0).abs() < 1e-10, "div of identity field");
        }

        let a2 = GridField::from_fn(&[res, res], 8.0 / res as f64, &[-4.0 + 4.0 / res as f64; 2], 2, 0, |p, out| {
            out[0] = -p[1];
            out[1] = p[0];
        })
        .unwrap();
        let e2 = apply_e(&a2).unwrap();
        for lin in 0..e2.num_nodes() {
            assert!((e2.get_lin(lin, 0) - 2.0).abs() < 1e-10);
            assert!(e2.get_lin(lin, 1).abs() < 1e-10);
        }

        let a3 = GridField::from_fn(&[res, res], 8.0 / res as f64, &[-4.0 + 4.0 / res as f64; 2], 2, 0, |p, out| {
            out[0] = p[1].sin();
            out[1] = 0.0;
        })
        .unwrap();
        let e3 = apply_e(&a3).unwrap();
        let mut idx = [0usize; 2];
        let mut p = [0.0f64; 2];
        for lin in 0..e3.num_nodes() {
            e3.decompose(lin, &mut idx);
            e3.node_point_into(&idx, &mut p);
            // One-sided edge stencils carry a larger constant; check the
            // centered-stencil region.
            if idx.iter().any(|&i| i < 2 || i >= res - 2) {
                continue;
            }
            assert!((e3.get_lin(lin, 0) + p[1].cos()).abs() < 2e-5);
            assert!(e3.get_lin(lin, 1).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_composition_is_negative_laplacian() {
        for (n, res) in [(2usize, 64usize), (3, 32)] {
            for seed in 0..5 {
                let a = bandlimited(n, res, 4.0, n, 3, 100 + seed);
                let sbox = SpectralBox::for_grid(&a);
                let hats: Vec<Vec<Complex64>> =
                    (0..n).map(|c| sbox.fft(a.component(c))).collect();
                let ee = e_star_hat(&sbox, &e_hat(&sbox, &hats), n);
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..n {
                    let lap = sbox.ifft(&sbox.laplacian_hat(&hats[j]));
                    let comp = sbox.ifft(&ee[j]);
                    for (x, y) in comp.iter().zip(&lap) {
                        num += (x + y) * (x + y);
                        den += y * y;
                    }
                }
                assert!(
                    num.sqrt() / den.sqrt() < 1e-10,
                    "n={n} seed={seed}: relative error {}",
                    num.sqrt() / den.sqrt()
                );
            }
        }
    }

    #[test]
    fn right_inverse_reconstructs_bandlimited_input() {
        // Inputs centered so their embedded origin value vanishes; on that
        // class the affine normalization is exact alongside the
        // reconstruction. A constant shift embeds weighted by the cutoff,
        // so the exact centering divides by the embedded constant.
        let n = 2;
        let res = 64;
        let m = target_rank(n);
        let mut g = bandlimited(n, res, 4.0, m, 3, 7);
        let mut ones = GridField::new(g.shape(), g.spacing(), g.origin(), m, 0).unwrap();
        ones.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let weight = embedded_origin_value(&ones).unwrap();
        let at0 = embedded_origin_value(&g).unwrap();
        for c in 0..m {
            let shift = at0[c] / weight[c];
            let shifted: Vec<f64> = g.component(c).iter().map(|v| v - shift).collect();
            g.set_component(c, &shifted).unwrap();
        }
        let sol = right_inverse_p(&g).unwrap();
        assert!(
            sol.residual_inf < 1e-8,
            "reconstruction residual {}",
            sol.residual_inf
        );
        assert!(sol.jet_origin < 1e-12, "origin jet {}", sol.jet_origin);
        assert_eq!(sol.b.rank(), n);
    }

    #[test]
    fn right_inverse_of_zero_is_zero() {
        let g = GridField::centered_cube(2, 4.0, 32, 2, 0).unwrap();
        let sol = right_inverse_p(&g).unwrap();
        assert!(sol.b.sup_value_norm() < 1e-14);
    }

    #[test]
    fn right_inverse_handles_compactly_supported_3d_input() {
        // A rapidly decaying smooth potential keeps the input inside the
        // solvable class in three dimensions, where the target space is
        // larger than the source. The envelope must be negligible at the
        // cutoff shell and spectrally negligible at the grid Nyquist
        // frequency, which a unit-width Gaussian achieves at this
        // resolution.
        let n = 3;
        let res = 48;
        let a = GridField::from_fn(
            &[res, res, res],
            8.0 / res as f64,
            &[-4.0 + 4.0 / res as f64; 3],
            n,
            0,
            |p, out| {
                let r2: f64 = p.iter().map(|x| x * x).sum();
                let bump = (-2.0 * r2).exp();
                out[0] = bump * p[1];
                out[1] = bump * (p[0] - 0.5 * p[2]);
                out[2] = bump * p[0] * p[1] * 0.5;
            },
        )
        .unwrap();
        let g = apply_e_spectral(&a).unwrap();
        // No origin shift: subtracting a constant and then applying the
        // cutoff would push the input off the solvable class, which in
        // three dimensions is a proper subspace. The residual claim is
        // unaffected; the origin jet is reported, not forced.
        let sol = right_inverse_p(&g).unwrap();
        assert!(
            sol.residual_inf < 1e-8,
            "reconstruction residual {}",
            sol.residual_inf
        );
        assert_eq!(sol.b.rank(), n);
    }

    fn sine_coefficient_grid(eps: f64, res: usize) -> GridField {
        GridField::from_fn(
            &[res, res],
            8.0 / res as f64,
            &[-4.0 + 4.0 / res as f64; 2],
            4,
            0,
            |p, out| {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[1] = eps * p[0].sin();
            },
        )
        .unwrap()
    }

    #[test]
    fn corrector_zero_input_converges_immediately() {
        let a = GridField::centered_cube(2, 4.0, 64, 4, 0).unwrap();
        let sol = solve_corrector(&a, 1.5, 1e-10, 50).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.r.sup_value_norm() < 1e-12);
        assert!(sol.residual_psi < 1e-10);
        assert!((sol.det_dh_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corrector_constant_input_needs_no_correction() {
        let mut a = GridField::centered_cube(2, 4.0, 64, 4, 0).unwrap();
        // Constant matrix inside the cutoff plateau; entries beyond it are
        // shaped by the cutoff but the functional only sees derivatives.
        let nodes = a.num_nodes();
        for lin in 0..nodes {
            a.set_lin(lin, 1, 0.05);
        }
        let sol = solve_corrector(&a, 1.5, 1e-8, 50).unwrap();
        // The cutoff creates boundary variation, so R is not identically
        // zero on the working cube, but on the verification ball the
        // constant needs no correction and the functional vanishes fast.
        assert!(sol.iterations <= 10, "iterations {}", sol.iterations);
        assert!(sol.residual_psi < 1e-8);
    }

    #[test]
    fn corrector_sine_input_converges_with_small_divergence() {
        // Resolution keeps the cutoff transition around twelve cells wide;
        // the assembled divergence floor is set by product aliasing at the
        // transition and needs that much.
        let a = sine_coefficient_grid(0.05, 128);
        let sol = solve_corrector(&a, 1.5, 1e-8, 50).unwrap();
        assert!(sol.iterations <= 50);
        assert!(sol.residual_psi < 1e-8);
        assert!(sol.div_residual < 1e-6, "div residual {}", sol.div_residual);
        assert!(sol.det_dh_min >= MIN_DET_DH);
        // The corrector is nontrivial.
        assert!(sol.r.sup_value_norm() > 1e-5);
    }

    #[test]
    fn corrector_refuses_large_inputs() {
        let a = sine_coefficient_grid(2.0, 64);
        match solve_corrector(&a, 1.5, 1e-8, 50) {
            Err(EllipticError::NormTooLarge { measured, limit }) => {
                assert!(measured > limit);
            }
            other => panic!("expected norm refusal, got {other:?}"),
        }
    }

    #[test]
    fn corrector_point_inversion_round_trips() {
        let a = sine_coefficient_grid(0.05, 64);
        let sol = solve_corrector(&a, 1.5, 1e-8, 50).unwrap();
        for (vx, vy) in [(0.3, -1.2), (1.9, 0.4), (-2.0, -2.0), (0.0, 0.0)] {
            let v = [vx, vy];
            let t = sol.h_inverse(&v).unwrap();
            let back = sol.h_at(&t);
            let err = ((back[0] - v[0]).powi(2) + (back[1] - v[1]).powi(2)).sqrt();
            assert!(err < 1e-9, "round trip error {err} at {v:?}");
        }
    }

    #[test]
    fn oversized_inputs_fail_without_convergence() {
        let a = sine_coefficient_grid(0.05, 64);
        let mut scaled = a.clone();
        for v in scaled.values_mut() {
            *v *= 60.0;
        }
        assert!(solve_corrector_gated(&scaled, 1.5, 1e-8, 40, f64::INFINITY).is_err());
    }

    #[test]
    fn gamma2_sweep_is_stable_under_refinement() {
        let tol = 1e-7;
        let coarse = gamma2_sweep(&sine_coefficient_grid(0.05, 48), 1.5, tol, 40).unwrap();
        let fine = gamma2_sweep(&sine_coefficient_grid(0.05, 96), 1.5, tol, 40).unwrap();
        assert!(coarse.gamma2 > 0.0);
        assert!(fine.gamma2 > 0.0);
        let ratio = coarse.gamma2 / fine.gamma2;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "sweep moved by more than 2x: {} vs {}",
            coarse.gamma2,
            fine.gamma2
        );
    }

    #[test]
    fn bootstrap_check_passes_on_smooth_consistent_data() {
        let n = 2;
        let res = 128;
        // Smooth small coefficient matrix.
        let a = GridField::from_fn(
            &[res, res],
            2.0 / res as f64,
            &[-1.0 + 1.0 / res as f64; 2],
            4,
            0,
            |p, out| {
                out[0] = 0.02 * (p[0] + 0.3 * p[1]).sin();
                out[1] = 0.02 * (p[1] * 0.7).cos() * 0.1;
                out[2] = 0.015 * p[0].cos() * 0.2;
                out[3] = 0.02 * (p[0] - p[1]).sin() * 0.5;
            },
        )
        .unwrap();
        // Build the data so the system holds exactly, with the same
        // derivatives the check uses.
        let mut partials: Vec<Vec<f64>> = Vec::new();
        for c in 0..n * n {
            for axis in 0..n {
                partials.push(a.fd_partial(c, axis));
            }
        }
        let pairs = curl_pairs(n);
        let mut c_hat = GridField::new(a.shape(), a.spacing(), a.origin(), n * pairs.len(), 0).unwrap();
        for i in 0..n {
            for (ci, &(j, k)) in pairs.iter().enumerate() {
                let gam = gamma_term(&a, &partials, i, j, k, true);
                let comp: Vec<f64> = (0..a.num_nodes())
                    .map(|lin| {
                        partials[(k * n + i) * n + j][lin] - partials[(j * n + i) * n + k][lin]
                            + gam[lin]
                    })
                    .collect();
                c_hat.set_component(i * pairs.len() + ci, &comp).unwrap();
            }
        }
        let ball = Ball::new(vec![0.0, 0.0], 0.8);
        let rep = bootstrap_check(
            &a,
            &c_hat,
            &ball,
            1.5,
            1.5,
            &ZygmundCfg::default(),
            &ZygmundCfg::default(),
        )
        .unwrap();
        assert!(rep.residual < 1e-8, "residual {}", rep.residual);
        assert!(rep.gamma_gap < 1e-12, "gamma gap {}", rep.gamma_gap);
        assert!(rep.capped_a, "smooth data should cap the fit");
        assert!(rep.satisfied);
    }

    #[test]
    fn linear_perturbation_solve_gains_regularity() {
        // Solve (E + L)u = g for a kink-limited right side and verify the
        // solution is about one order smoother, L a small smooth
        // first-order perturbation handled by fixed point.
        let res = 256;
        let g = GridField::from_fn(
            &[res, res],
            8.0 / res as f64,
            &[-4.0 + 4.0 / res as f64; 2],
            2,
            0,
            |p, out| {
                let u = (std::f64::consts::PI * p[0] / 8.0).sin() * 8.0 / std::f64::consts::PI;
                out[0] = u.abs().powf(1.3);
                out[1] = 0.4 * u.abs().powf(1.3) * (0.3 * p[1]).cos();
            },
        )
        .unwrap();
        // Subtract origin values to stay in the normalized class.
        let sbox = SpectralBox::for_grid(&g);
        let mut g0 = g.clone();
        for c in 0..2 {
            let h = sbox.fft(g.component(c));
            let at0 = sbox.eval_at(&h, &[0.0, 0.0]);
            let shifted: Vec<f64> = g.component(c).iter().map(|v| v - at0).collect();
            g0.set_component(c, &shifted).unwrap();
        }

        let eps = 0.05;
        let coeff = |p: &[f64]| eps * (0.4 * p[0]).sin() * (0.3 * p[1]).cos();
        let mut u = GridField::new(g0.shape(), g0.spacing(), g0.origin(), 2, 0).unwrap();
        let mut rhs = g0.clone();
        for _ in 0..8 {
            let sol = right_inverse_p(&rhs).unwrap();
            u = sol.b;
            // rhs = g - L u with L u = coeff * (d1 u2, d2 u1).
            let d1u2 = u.fd_partial(1, 0);
            let d2u1 = u.fd_partial(0, 1);
            let mut idx = [0usize; 2];
            let mut p = [0.0f64; 2];
            for lin in 0..u.num_nodes() {
                u.decompose(lin, &mut idx);
                u.node_point_into(&idx, &mut p);
                let c = coeff(&p);
                rhs.set_lin(lin, 0, g0.get_lin(lin, 0) - c * d1u2[lin]);
                rhs.set_lin(lin, 1, g0.get_lin(lin, 1) - c * d2u1[lin]);
            }
        }
        let ball = Ball::new(vec![0.0, 0.0], 2.0);
        // Start the scale ladder at the ball diameter so enough scales
        // survive for an uncapped fit.
        let cfg = ZygmundCfg {
            k_min: 0,
            ..ZygmundCfg::default()
        };
        let exp_g = zygmund_norm_grid(ZygTarget::Sampled(&g0), 1.5, &ball, &cfg)
            .unwrap()
            .fitted_exponent;
        let exp_u = zygmund_norm_grid(ZygTarget::Sampled(&u), 2.5, &ball, &cfg)
            .unwrap()
            .fitted_exponent;
        assert!(
            (1.1..=1.5).contains(&exp_g),
            "right side exponent {exp_g}"
        );
        assert!(
            exp_u >= exp_g + 0.85,
            "solution exponent {exp_u} vs right side {exp_g}"
        );
    }
}
