//! Diagnostics over trained head rows: low-dimensional projection and the
//! comparison of paired distance structure across the two languages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ClarError, Result};
use crate::label_space::{format_real, LabelId, LabeledMatrix};
use crate::linalg::{dot, squared_distance, symmetric_eigen, Matrix};
use crate::matcher::Pairing;

const SVD_TOLERANCE: f64 = 1e-10;
const SVD_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub labels: Vec<LabelId>,
    /// One k-dimensional point per label.
    pub coordinates: Vec<Vec<f64>>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, one per row.
    pub components: Matrix,
}

impl ProjectionResult {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (l, p) in self.labels.iter().zip(&self.coordinates) {
            s.push_str(&l.language);
            s.push('\t');
            s.push_str(&l.name);
            for x in p {
                s.push('\t');
                s.push_str(&format_real(*x));
            }
            s.push('\n');
        }
        s
    }

    pub fn point(&self, label: &LabelId) -> Option<&[f64]> {
        self.labels.iter().position(|l| l == label).map(|i| self.coordinates[i].as_slice())
    }
}

/// Projects mean-centred rows onto their top-`k` right singular vectors.
///
/// The singular vectors come from orthogonal iteration with Rayleigh-Ritz
/// on the `d x d` Gram matrix. Each vector is oriented so that its first
/// largest-magnitude component is positive.
pub fn svd_project(m: &LabeledMatrix, k: usize) -> Result<ProjectionResult> {
    let (n, d) = (m.len(), m.dim());
    if n == 0 {
        return Err(ClarError::Degenerate("no rows to project".into()));
    }
    if k == 0 || k > n.min(d) {
        return Err(ClarError::Config(format!("cannot keep {k} directions of a {n}x{d} matrix")));
    }
    let mut centered = m.matrix().clone();
    let mean: Vec<f64> = (0..d).map(|c| centered.iter_rows().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    for i in 0..n {
        for (x, mu) in centered.row_mut(i).iter_mut().zip(&mean) {
            *x -= mu;
        }
    }
    let gram = centered.transpose().matmul(&centered)?;
    let (_, vectors) = top_eigenpairs(&gram, k)?;

    let mut components = Matrix::zeros(k, d);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|r| vectors[(r, c)]).collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(c).copy_from_slice(&v);
    }
    let coordinates: Vec<Vec<f64>> = centered
        .iter_rows()
        .map(|r| components.iter_rows().map(|c| dot(r, c)).collect())
        .collect();
    // ||X q|| rather than sqrt(eigenvalue): the square root would amplify
    // round-off in near-zero eigenvalues
    let singular_values: Vec<f64> =
        (0..k).map(|c| coordinates.iter().map(|p| p[c] * p[c]).sum::<f64>().sqrt()).collect();
    Ok(ProjectionResult { labels: m.labels().to_vec(), coordinates, singular_values, components })
}

/// Leading `k` eigenpairs of a symmetric PSD matrix by block orthogonal
/// iteration. Eigenvectors are returned as columns.
fn top_eigenpairs(g: &Matrix, k: usize) -> Result<(Vec<f64>, Matrix)> {
    let d = g.rows();
    let block = d.min(k + 2);
    let scale = g.as_slice().iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if scale == 0.0 {
        let mut q = Matrix::zeros(d, k);
        for c in 0..k {
            q[(c, c)] = 1.0;
        }
        return Ok((vec![0.0; k], q));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = Matrix::zeros(d, block);
    for x in q.as_mut_slice() {
        *x = rng.gen_range(-1.0..1.0);
    }
    orthonormalize_columns(&mut q);
    let mut residual = f64::INFINITY;
    for _ in 0..SVD_MAX_ITERATIONS {
        let mut z = g.matmul(&q)?;
        orthonormalize_columns(&mut z);
        let small = z.transpose().matmul(&g.matmul(&z)?)?;
        let (theta, w) = symmetric_eigen(&small);
        q = z.matmul(&w)?;
        let gq = g.matmul(&q)?;
        residual = (0..k)
            .map(|c| (0..d).map(|r| (gq[(r, c)] - theta[c] * q[(r, c)]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if residual <= SVD_TOLERANCE * scale {
            let mut out = Matrix::zeros(d, k);
            for r in 0..d {
                for c in 0..k {
                    out[(r, c)] = q[(r, c)];
                }
            }
            return Ok((theta[..k].to_vec(), out));
        }
    }
    Err(ClarError::NoConvergence { iterations: SVD_MAX_ITERATIONS, residual })
}

/// Modified Gram-Schmidt. A column that collapses is replaced by the first
/// unit basis vector not yet spanned.
fn orthonormalize_columns(q: &mut Matrix) {
    let (d, p) = (q.rows(), q.cols());
    let mut basis = 0;
    for c in 0..p {
        loop {
            for prev in 0..c {
                let proj: f64 = (0..d).map(|r| q[(r, c)] * q[(r, prev)]).sum();
                for r in 0..d {
                    q[(r, c)] -= proj * q[(r, prev)];
                }
            }
            let norm = (0..d).map(|r| q[(r, c)].powi(2)).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for r in 0..d {
                    q[(r, c)] /= norm;
                }
                break;
            }
            for r in 0..d {
                q[(r, c)] = if r == basis % d { 1.0 } else { 0.0 };
            }
            basis += 1;
        }
    }
}

/// Euclidean distance between every pair of rows.
pub fn pairwise_distances(rows: &Matrix) -> Matrix {
    let n = rows.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let dist = squared_distance(rows.row(i), rows.row(j)).sqrt();
            out[(i, j)] = dist;
            out[(j, i)] = dist;
        }
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(ClarError::UndefinedCorrelation(format!("need two equal samples of size >= 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ClarError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldReport {
    pub dist_source: Matrix,
    pub dist_target: Matrix,
    pub pearson: f64,
    pub frobenius_sq_diff: f64,
}

impl ManifoldReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "pairs\t{}\npearson\t{}\nfrobenius_sq_diff\t{}\n",
            self.dist_source.rows(),
            format_real(self.pearson),
            format_real(self.frobenius_sq_diff)
        );
        for (name, m) in [("dist_source", &self.dist_source), ("dist_target", &self.dist_target)] {
            s.push_str(&format!("[{name}]\n"));
            for row in m.iter_rows() {
                let cells: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
                s.push_str(&cells.join("\t"));
                s.push('\n');
            }
        }
        s
    }
}

fn upper_triangle(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect()
}

/// Compares the distance structure of paired rows (row `i` of each side is
/// pair `i`).
pub fn manifold_report(source: &Matrix, target: &Matrix) -> Result<ManifoldReport> {
    if source.rows() != target.rows() {
        return Err(ClarError::Dimension(format!("{} source rows vs {} target rows", source.rows(), target.rows())));
    }
    if source.rows() < 3 {
        return Err(ClarError::UndefinedCorrelation(format!("need at least 3 pairs, got {}", source.rows())));
    }
    let dist_source = pairwise_distances(source);
    let dist_target = pairwise_distances(target);
    let pearson = pearson(&upper_triangle(&dist_source), &upper_triangle(&dist_target))?;
    let frobenius_sq_diff = dist_source
        .as_slice()
        .iter()
        .zip(dist_target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ManifoldReport { dist_source, dist_target, pearson, frobenius_sq_diff })
}

/// Stacks the rows named by a pairing: `(U_p, V_p)` in pairing order.
pub fn paired_rows(source: &LabeledMatrix, target: &LabeledMatrix, pairing: &Pairing) -> Result<(Matrix, Matrix)> {
    let u = source.select(&pairing.sources())?;
    let v = target.select(&pairing.targets())?;
    Ok((u.matrix().clone(), v.matrix().clone()))
}

/// Line segments joining each paired label in a joint projection, as TSV
/// `src_lang src_label x1 y1 tgt_lang tgt_label x2 y2`.
pub fn pair_segments(projection: &ProjectionResult, pairing: &Pairing) -> Result<String> {
    let mut s = String::new();
    for p in &pairing.pairs {
        let a = projection
            .point(&p.source)
            .ok_or_else(|| ClarError::Degenerate(format!("{} not in projection", p.source)))?;
        let b = projection
            .point(&p.target)
            .ok_or_else(|| ClarError::Degenerate(format!("{} not in projection", p.target)))?;
        let fmt = |xs: &[f64]| xs.iter().map(|x| format_real(*x)).collect::<Vec<_>>().join("\t");
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.source.language,
            p.source.name,
            fmt(a),
            p.target.language,
            p.target.name,
            fmt(b)
        ));
    }
    Ok(s)
}
