//! Affine alignment penalty between paired head rows.
//!
//! For pairs `(u_i, v_i)` the penalty is `Σ_i ||u_i − (Ψ v_i + b)||²`. The
//! training loop scales it by λ; everything here is the unscaled term.

use crate::error::{ClarError, Result};
use crate::label_space::{LabelId, LabeledMatrix};
use crate::linalg::{axpy, cholesky_solve, Matrix};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// `v ↦ Ψ v + b`
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub psi: Matrix,
    pub b: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        AffineTransform { psi: Matrix::identity(dim), b: vec![0.0; dim] }
    }

    pub fn new(psi: Matrix, b: Vec<f64>) -> Result<Self> {
        if psi.rows() != psi.cols() || psi.rows() != b.len() {
            return Err(ClarError::Dimension(format!(
                "transform with {}x{} matrix and {}-vector offset",
                psi.rows(),
                psi.cols(),
                b.len()
            )));
        }
        Ok(AffineTransform { psi, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.psi.matvec(v);
        for (o, bi) in out.iter_mut().zip(&self.b) {
            *o += bi;
        }
        out
    }

    /// Rows `PSI/0..d-1` followed by `B/0`, in the weight-matrix layout.
    pub fn to_labeled_matrix(&self) -> LabeledMatrix {
        let d = self.dim();
        let mut labels: Vec<LabelId> = (0..d).map(|i| LabelId::new("PSI", i.to_string())).collect();
        labels.push(LabelId::new("B", "0"));
        let mut data = self.psi.as_slice().to_vec();
        data.extend_from_slice(&self.b);
        let rows = Matrix::from_vec(d + 1, d, data).expect("shape is consistent");
        LabeledMatrix::new(labels, rows).expect("labels are distinct")
    }

    pub fn from_labeled_matrix(m: &LabeledMatrix) -> Result<Self> {
        let d = m.dim();
        if m.len() != d + 1 {
            return Err(ClarError::Dimension(format!("transform needs {} rows, found {}", d + 1, m.len())));
        }
        let mut psi = Matrix::zeros(d, d);
        for i in 0..d {
            let row = m
                .row_of(&LabelId::new("PSI", i.to_string()))
                .ok_or_else(|| ClarError::Format { line: i + 1, msg: format!("missing row PSI/{i}") })?;
            psi.row_mut(i).copy_from_slice(row);
        }
        let b = m
            .row_of(&LabelId::new("B", "0"))
            .ok_or_else(|| ClarError::Format { line: d + 1, msg: "missing row B/0".into() })?
            .to_vec();
        AffineTransform::new(psi, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub ridge: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { lambda: DEFAULT_LAMBDA, ridge: DEFAULT_RIDGE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClarGradients {
    pub d_psi: Matrix,
    pub d_b: Vec<f64>,
    pub d_u: Matrix,
    pub d_v: Matrix,
}

fn check_shapes(u: &Matrix, v: &Matrix, t: &AffineTransform) -> Result<()> {
    if u.rows() != v.rows() {
        return Err(ClarError::Dimension(format!("{} source rows vs {} target rows", u.rows(), v.rows())));
    }
    if u.cols() != t.dim() || v.cols() != t.dim() {
        return Err(ClarError::Dimension(format!(
            "row dimensions {} / {} vs transform dimension {}",
            u.cols(),
            v.cols(),
            t.dim()
        )));
    }
    Ok(())
}

/// `r_i = u_i − Ψ v_i − b`, one row per pair.
fn residuals(u: &Matrix, v: &Matrix, t: &AffineTransform) -> Matrix {
    let mut r = u.clone();
    for i in 0..u.rows() {
        let mapped = t.apply(v.row(i));
        for (ri, m) in r.row_mut(i).iter_mut().zip(mapped) {
            *ri -= m;
        }
    }
    r
}

pub fn clar_penalty(u: &Matrix, v: &Matrix, t: &AffineTransform) -> Result<f64> {
    check_shapes(u, v, t)?;
    Ok(residuals(u, v, t).frobenius_sq())
}

/// Penalty value together with its gradients.
///
/// Per-pair contributions are accumulated in pair order.
pub fn clar_penalty_and_gradients(u: &Matrix, v: &Matrix, t: &AffineTransform) -> Result<(f64, ClarGradients)> {
    check_shapes(u, v, t)?;
    let (k, d) = (u.rows(), t.dim());
    let r = residuals(u, v, t);
    let mut d_psi = Matrix::zeros(d, d);
    let mut d_b = vec![0.0; d];
    let mut d_u = Matrix::zeros(k, d);
    let mut d_v = Matrix::zeros(k, d);
    for i in 0..k {
        let ri = r.row(i);
        let vi = v.row(i);
        for (g, &x) in d_u.row_mut(i).iter_mut().zip(ri) {
            *g = 2.0 * x;
        }
        let back = t.psi.matvec_t(ri);
        for (g, x) in d_v.row_mut(i).iter_mut().zip(back) {
            *g = -2.0 * x;
        }
        for a in 0..d {
            axpy(-2.0 * ri[a], vi, d_psi.row_mut(a));
        }
        axpy(-2.0, ri, &mut d_b);
    }
    Ok((r.frobenius_sq(), ClarGradients { d_psi, d_b, d_u, d_v }))
}

pub fn clar_gradients(u: &Matrix, v: &Matrix, t: &AffineTransform) -> Result<ClarGradients> {
    clar_penalty_and_gradients(u, v, t).map(|(_, g)| g)
}

/// Closed-form minimizer of `Σ ||u_i − (Ψ v_i + b)||² + ridge·||Ψ||_F²`.
///
/// Solved through the normal equations on augmented inputs `(v_i, 1)`; the
/// offset column is not penalized.
pub fn fit_affine_least_squares(u: &Matrix, v: &Matrix, ridge: f64) -> Result<AffineTransform> {
    if u.rows() != v.rows() || u.cols() != v.cols() {
        return Err(ClarError::Dimension(format!(
            "{}x{} source rows vs {}x{} target rows",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if u.rows() == 0 {
        return Err(ClarError::Degenerate("no pairs to fit".into()));
    }
    if !(ridge >= 0.0) {
        return Err(ClarError::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let (k, d) = (u.rows(), u.cols());
    let mut x = Matrix::zeros(k, d + 1);
    for i in 0..k {
        x.row_mut(i)[..d].copy_from_slice(v.row(i));
        x[(i, d)] = 1.0;
    }
    let xt = x.transpose();
    let mut gram = xt.matmul(&x)?;
    for a in 0..d {
        gram[(a, a)] += ridge;
    }
    let rhs = xt.matmul(u)?;
    // w is (d+1) x d with w[a][c] = Ψ[c][a] for a < d and w[d][c] = b[c]
    let w = cholesky_solve(&gram, &rhs)?;
    let mut psi = Matrix::zeros(d, d);
    for c in 0..d {
        for a in 0..d {
            psi[(c, a)] = w[(a, c)];
        }
    }
    let b = w.row(d).to_vec();
    AffineTransform::new(psi, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_alignment_is_zero() {
        let u = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(clar_penalty(&u, &u, &AffineTransform::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset() {
        let p = clar_penalty(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 0.0]]), &AffineTransform::identity(2)).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn scalar_gradients() {
        let t = AffineTransform::identity(1);
        let g = clar_gradients(&m(&[&[2.0]]), &m(&[&[1.0]]), &t).unwrap();
        assert_eq!(g.d_u.as_slice(), &[2.0]);
        assert_eq!(g.d_v.as_slice(), &[-2.0]);
        assert_eq!(g.d_psi.as_slice(), &[-2.0]);
        assert_eq!(g.d_b, vec![-2.0]);
    }

    #[test]
    fn zero_residual_zero_gradients() {
        let u = m(&[&[1.0, 2.0], &[0.5, 0.5]]);
        let g = clar_gradients(&u, &u, &AffineTransform::identity(2)).unwrap();
        assert!(g.d_u.as_slice().iter().chain(g.d_v.as_slice()).chain(g.d_psi.as_slice()).chain(&g.d_b).all(|&x| x == 0.0));
    }

    #[test]
    fn shape_errors() {
        let t = AffineTransform::identity(2);
        assert!(clar_penalty(&m(&[&[1.0, 2.0]]), &m(&[&[1.0, 2.0], &[0.0, 0.0]]), &t).is_err());
        assert!(clar_penalty(&m(&[&[1.0]]), &m(&[&[1.0]]), &t).is_err());
    }

    #[test]
    fn pure_translation_fit() {
        let u = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[2.0, 3.0]]);
        let c = [0.5, -1.5];
        let mut v = u.clone();
        for i in 0..v.rows() {
            for (x, ci) in v.row_mut(i).iter_mut().zip(c) {
                *x -= ci;
            }
        }
        let t = fit_affine_least_squares(&u, &v, DEFAULT_RIDGE).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((t.psi[(a, b)] - expect).abs() < 1e-6);
            }
            assert!((t.b[a] - c[a]).abs() < 1e-6);
        }
        assert!(clar_penalty(&u, &v, &t).unwrap() < 1e-12);
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let u = m(&[&[1.0, 2.0]]);
        assert!(matches!(fit_affine_least_squares(&u, &u, 0.0), Err(ClarError::Singular(_))));
        // ridge makes the under-determined problem well posed
        let t = fit_affine_least_squares(&u, &u, 1e-3).unwrap();
        assert!(clar_penalty(&u, &u, &t).unwrap() < 1e-6);
    }

    #[test]
    fn labeled_round_trip() {
        let t = AffineTransform::new(m(&[&[1.0, 2.0], &[3.0, 4.0]]), vec![5.0, 6.0]).unwrap();
        let lm = t.to_labeled_matrix();
        assert_eq!(lm.labels()[2], LabelId::new("B", "0"));
        assert_eq!(AffineTransform::from_labeled_matrix(&lm).unwrap(), t);
    }
}
