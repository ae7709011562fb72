//! Exact label pair matching between two languages.
//!
//! Pairs source rows `u_i` with target rows `v_j` so that the summed squared
//! distance is minimal, each target label is used at most once and each
//! source label at most `M` times, with exactly `K'` pairs selected. The
//! problem is a transportation problem; it is solved as a min-cost flow
//!
//! ```text
//! s --(cap M)--> row i --(cap 1, cost c_ij)--> col j --(cap 1)--> t
//! ```
//!
//! by successive shortest paths, which yields the optimum for every flow
//! value along the way.

use std::fmt;

use crate::error::{ClarError, Result};
use crate::label_space::{filter_frequent_labels, format_real, FrequencyTable, LabelId, LabeledMatrix};
use crate::label_space::DEFAULT_FREQUENCY_THRESHOLD;
use crate::linalg::{squared_distance, Matrix};

/// Tolerance for reduced-cost comparisons inside the shortest path search.
const REDUCED_COST_EPS: f64 = 1e-12;
/// Relative tolerance under which two totals count as the same optimum.
const TIE_REL_TOL: f64 = 1e-9;
/// Largest `rows * cols` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 36;

/// Requested number of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cardinality {
    /// `min(k̂_t, M·k̂_s)`: every pair the constraints allow.
    All,
    /// `⌈min(k̂_s, k̂_t) / 2⌉`.
    Half,
    Exactly(usize),
}

impl Cardinality {
    pub fn resolve(self, k_source: usize, k_target: usize, capacity: usize) -> usize {
        match self {
            Cardinality::All => k_target.min(capacity * k_source),
            Cardinality::Half => k_source.min(k_target).div_ceil(2),
            Cardinality::Exactly(k) => k,
        }
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cardinality::All => f.write_str("all"),
            Cardinality::Half => f.write_str("half"),
            Cardinality::Exactly(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for Cardinality {
    type Err = ClarError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Cardinality::All),
            "half" => Ok(Cardinality::Half),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .map(Cardinality::Exactly)
                .ok_or_else(|| ClarError::Config(format!("bad cardinality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub frequency_threshold: f64,
    /// `None` picks the mode default: half when `source_capacity == 1`,
    /// otherwise every frequent target label.
    pub cardinality: Option<Cardinality>,
    pub source_capacity: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            frequency_threshold: DEFAULT_FREQUENCY_THRESHOLD,
            cardinality: None,
            source_capacity: 1,
        }
    }
}

impl MatchConfig {
    pub fn effective_cardinality(&self) -> Cardinality {
        self.cardinality.unwrap_or(if self.source_capacity > 1 {
            Cardinality::All
        } else {
            Cardinality::Half
        })
    }
}

/// Solution of the index-level problem; `pairs` sorted by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    pub source: LabelId,
    pub target: LabelId,
    pub sq_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pairing {
    pub pairs: Vec<LabelPair>,
}

impl Pairing {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.sq_distance).sum()
    }

    pub fn sources(&self) -> Vec<LabelId> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<LabelId> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    /// TSV sorted ascending by squared distance.
    pub fn to_tsv(&self) -> String {
        let mut order: Vec<&LabelPair> = self.pairs.iter().collect();
        order.sort_by(|a, b| a.sq_distance.total_cmp(&b.sq_distance));
        let mut s = String::new();
        for p in order {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                p.source.language,
                p.source.name,
                p.target.language,
                p.target.name,
                format_real(p.sq_distance)
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| ClarError::Format { line: idx + 1, msg };
            let cols: Vec<&str> = line.split('\t').collect();
            let [sl, sn, tl, tn, d] = cols.as_slice() else {
                return Err(bad(format!("expected 5 columns, found {}", cols.len())));
            };
            let sq_distance: f64 = d.parse().map_err(|_| bad(format!("unparseable real {d:?}")))?;
            if sn.is_empty() || tn.is_empty() {
                return Err(bad("empty label name".into()));
            }
            pairs.push(LabelPair {
                source: LabelId::new(*sl, *sn),
                target: LabelId::new(*tl, *tn),
                sq_distance,
            });
        }
        Ok(Pairing { pairs })
    }
}

/// Squared Euclidean distances between every source row and target row.
pub fn build_cost_matrix(source: &Matrix, target: &Matrix) -> Result<Matrix> {
    if source.cols() != target.cols() {
        return Err(ClarError::Dimension(format!(
            "source rows have dimension {}, target rows {}",
            source.cols(),
            target.cols()
        )));
    }
    let mut cost = Matrix::zeros(source.rows(), target.rows());
    for (i, u) in source.iter_rows().enumerate() {
        for (j, v) in target.iter_rows().enumerate() {
            cost[(i, j)] = squared_distance(u, v);
        }
    }
    Ok(cost)
}

fn validate(cost: &Matrix, k: usize, capacity: usize) -> Result<()> {
    if capacity == 0 {
        return Err(ClarError::Config("source capacity must be at least 1".into()));
    }
    if k == 0 {
        return Err(ClarError::Infeasible("cardinality must be at least 1".into()));
    }
    let max_pairs = cost.cols().min(capacity * cost.rows());
    if k > max_pairs {
        return Err(ClarError::Infeasible(format!(
            "{k} pairs requested but a {}x{} instance with capacity {capacity} admits at most {max_pairs}",
            cost.rows(),
            cost.cols()
        )));
    }
    for i in 0..cost.rows() {
        for j in 0..cost.cols() {
            let value = cost[(i, j)];
            if !value.is_finite() || value < 0.0 {
                return Err(ClarError::InvalidCost { row: i, col: j, value });
            }
        }
    }
    Ok(())
}

fn same_optimum(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= TIE_REL_TOL * scale.abs().max(1.0)
}

/// Exact minimum-cost selection of `k` pairs with column capacity 1 and row
/// capacity `capacity`.
///
/// Among equal-cost optima the lexicographically smallest sorted pair list is
/// returned.
pub fn solve_matching(cost: &Matrix, k: usize, capacity: usize) -> Result<Assignment> {
    validate(cost, k, capacity)?;
    let (rows, cols) = (cost.rows(), cost.cols());
    let flow = FlowProblem {
        cost,
        row_capacity: vec![capacity; rows],
        column_open: vec![true; cols],
        first_allowed: 0,
    };
    let mut current = flow
        .solve(k)
        .ok_or_else(|| ClarError::Infeasible(format!("no feasible selection of {k} pairs")))?;
    let optimum = current.total;

    // Greedy lexicographic refinement. `current` is always an optimal
    // completion of `fixed` using only pairs after the last fixed one.
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut fixed_cost = 0.0;
    let mut row_capacity = vec![capacity; rows];
    let mut column_open = vec![true; cols];
    let mut next = 0;
    while fixed.len() < k {
        let incumbent = current.pairs[0];
        let incumbent_flat = incumbent.0 * cols + incumbent.1;
        let mut chosen = None;
        for flat in next..incumbent_flat {
            let (i, j) = (flat / cols, flat % cols);
            if row_capacity[i] == 0 || !column_open[j] {
                continue;
            }
            let needed = optimum - fixed_cost - cost[(i, j)];
            if needed < -TIE_REL_TOL * optimum.max(1.0) {
                continue;
            }
            let mut rc = row_capacity.clone();
            rc[i] -= 1;
            let mut co = column_open.clone();
            co[j] = false;
            let sub = FlowProblem { cost, row_capacity: rc, column_open: co, first_allowed: flat + 1 };
            if let Some(rest) = sub.solve(k - fixed.len() - 1) {
                if same_optimum(rest.total, needed, optimum) {
                    let mut pairs = vec![(i, j)];
                    pairs.extend(rest.pairs);
                    chosen = Some(Assignment { pairs, total: rest.total + cost[(i, j)] });
                    break;
                }
            }
        }
        if let Some(better) = chosen {
            current = better;
        }
        let (i, j) = current.pairs[0];
        fixed.push((i, j));
        fixed_cost += cost[(i, j)];
        row_capacity[i] -= 1;
        column_open[j] = false;
        next = i * cols + j + 1;
        current.total -= cost[(i, j)];
        current.pairs.remove(0);
    }
    let total = fixed.iter().map(|&(i, j)| cost[(i, j)]).sum();
    Ok(Assignment { pairs: fixed, total })
}

/// Residual problem: remaining row capacities, open columns, and only pairs
/// whose row-major index is at least `first_allowed`.
struct FlowProblem<'a> {
    cost: &'a Matrix,
    row_capacity: Vec<usize>,
    column_open: Vec<bool>,
    first_allowed: usize,
}

struct Edge {
    to: usize,
    rev: usize,
    cap: usize,
    cost: f64,
}

impl FlowProblem<'_> {
    /// Optimal `k`-pair selection, sorted, or `None` if infeasible.
    fn solve(&self, k: usize) -> Option<Assignment> {
        if k == 0 {
            return Some(Assignment { pairs: Vec::new(), total: 0.0 });
        }
        let (rows, cols) = (self.cost.rows(), self.cost.cols());
        let n = rows + cols + 2;
        let (src, sink) = (0, n - 1);
        let mut graph: Vec<Vec<Edge>> = (0..n).map(|_| Vec::new()).collect();
        let add = |g: &mut Vec<Vec<Edge>>, a: usize, b: usize, cap: usize, cost: f64| {
            let (ra, rb) = (g[b].len(), g[a].len());
            g[a].push(Edge { to: b, rev: ra, cap, cost });
            g[b].push(Edge { to: a, rev: rb, cap: 0, cost: -cost });
        };
        for i in 0..rows {
            if self.row_capacity[i] > 0 {
                add(&mut graph, src, 1 + i, self.row_capacity[i], 0.0);
            }
        }
        for i in 0..rows {
            for j in 0..cols {
                if i * cols + j >= self.first_allowed && self.column_open[j] && self.row_capacity[i] > 0 {
                    add(&mut graph, 1 + i, 1 + rows + j, 1, self.cost[(i, j)]);
                }
            }
        }
        for j in 0..cols {
            if self.column_open[j] {
                add(&mut graph, 1 + rows + j, sink, 1, 0.0);
            }
        }

        // All original costs are non-negative, so zero potentials are valid.
        let mut potential = vec![0.0; n];
        for _ in 0..k {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
            let mut done = vec![false; n];
            dist[src] = 0.0;
            loop {
                // dense Dijkstra; ties go to the lowest node index
                let mut u = None;
                for v in 0..n {
                    if !done[v] && dist[v].is_finite() && u.is_none_or(|b: usize| dist[v] < dist[b]) {
                        u = Some(v);
                    }
                }
                let Some(u) = u else { break };
                done[u] = true;
                for (ei, e) in graph[u].iter().enumerate() {
                    if e.cap == 0 || done[e.to] {
                        continue;
                    }
                    let reduced = (e.cost + potential[u] - potential[e.to]).max(0.0);
                    let cand = dist[u] + reduced;
                    if cand < dist[e.to] - REDUCED_COST_EPS {
                        dist[e.to] = cand;
                        prev[e.to] = Some((u, ei));
                    }
                }
            }
            if !dist[sink].is_finite() {
                return None;
            }
            let reach = dist[sink];
            for v in 0..n {
                potential[v] += dist[v].min(reach);
            }
            let mut v = sink;
            while let Some((u, ei)) = prev[v] {
                let rev = graph[u][ei].rev;
                graph[u][ei].cap -= 1;
                graph[v][rev].cap += 1;
                v = u;
            }
        }

        let mut pairs = Vec::with_capacity(k);
        for i in 0..rows {
            for e in &graph[1 + i] {
                if e.to > rows && e.to <= rows + cols && e.cap == 0 && e.cost >= 0.0 {
                    pairs.push((i, e.to - 1 - rows));
                }
            }
        }
        pairs.sort_unstable();
        debug_assert_eq!(pairs.len(), k);
        let total = pairs.iter().map(|&(i, j)| self.cost[(i, j)]).sum();
        Some(Assignment { pairs, total })
    }
}

/// Exhaustive oracle: enumerates every feasible selection of exactly `k`
/// pairs. Only for small instances (`rows * cols <= 36`).
///
/// With non-negative costs no selection of more than `k` pairs is cheaper
/// than the best one of exactly `k`, so the optimum value is the same as for
/// the "at least `k`" formulation.
pub fn brute_force_matching(cost: &Matrix, k: usize, capacity: usize) -> Result<Assignment> {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows * cols > BRUTE_FORCE_LIMIT {
        return Err(ClarError::TooLarge { rows, cols });
    }
    validate(cost, k, capacity)?;

    struct Search<'a> {
        cost: &'a Matrix,
        k: usize,
        used: Vec<usize>,
        capacity: usize,
        chosen: Vec<(usize, usize)>,
        best: Option<Assignment>,
    }

    impl Search<'_> {
        fn visit(&mut self, col: usize, partial: f64) {
            let cols = self.cost.cols();
            if self.chosen.len() == self.k {
                let mut pairs = self.chosen.clone();
                pairs.sort_unstable();
                let better = match &self.best {
                    None => true,
                    Some(b) => {
                        if same_optimum(partial, b.total, b.total) {
                            pairs < b.pairs
                        } else {
                            partial < b.total
                        }
                    }
                };
                if better {
                    self.best = Some(Assignment { pairs, total: partial });
                }
                return;
            }
            if col == cols || cols - col < self.k - self.chosen.len() {
                return;
            }
            for i in 0..self.cost.rows() {
                if self.used[i] < self.capacity {
                    self.used[i] += 1;
                    self.chosen.push((i, col));
                    self.visit(col + 1, partial + self.cost[(i, col)]);
                    self.chosen.pop();
                    self.used[i] -= 1;
                }
            }
            self.visit(col + 1, partial);
        }
    }

    let mut search = Search { cost, k, used: vec![0; rows], capacity, chosen: Vec::new(), best: None };
    search.visit(0, 0.0);
    search
        .best
        .map(|mut b| {
            b.total = b.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
            b
        })
        .ok_or_else(|| ClarError::Infeasible(format!("no feasible selection of {k} pairs")))
}

/// Frequency filter, cost matrix over the surviving labels, exact solve, and
/// mapping back to label ids.
///
/// Surviving labels keep the row order of `source` / `target`, which is the
/// index order used for tie-breaking.
pub fn match_labels(
    source: &LabeledMatrix,
    target: &LabeledMatrix,
    freq_source: &FrequencyTable,
    freq_target: &FrequencyTable,
    cfg: &MatchConfig,
) -> Result<Pairing> {
    let keep_s = filter_frequent_labels(freq_source, cfg.frequency_threshold)?;
    let keep_t = filter_frequent_labels(freq_target, cfg.frequency_threshold)?;
    let survivors = |m: &LabeledMatrix, keep: &std::collections::BTreeSet<LabelId>, side: &str| {
        for l in keep {
            if m.position(l).is_none() {
                return Err(ClarError::Degenerate(format!("{side} weights have no row for frequent label {l}")));
            }
        }
        let labels: Vec<LabelId> = m.labels().iter().filter(|l| keep.contains(*l)).cloned().collect();
        if labels.is_empty() {
            return Err(ClarError::Degenerate(format!("no frequent {side} labels survive the filter")));
        }
        m.select(&labels)
    };
    let u = survivors(source, &keep_s, "source")?;
    let v = survivors(target, &keep_t, "target")?;
    let cost = build_cost_matrix(u.matrix(), v.matrix())?;
    let k = cfg.effective_cardinality().resolve(u.len(), v.len(), cfg.source_capacity);
    let assignment = solve_matching(&cost, k, cfg.source_capacity)?;
    Ok(Pairing {
        pairs: assignment
            .pairs
            .iter()
            .map(|&(i, j)| LabelPair {
                source: u.labels()[i].clone(),
                target: v.labels()[j].clone(),
                sq_distance: cost[(i, j)],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn three_four_five() {
        let c = build_cost_matrix(&m(&[&[0.0, 0.0]]), &m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(c[(0, 0)], 25.0);
    }

    #[test]
    fn self_cost_has_zero_diagonal() {
        let u = m(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 7.0]]);
        let c = build_cost_matrix(&u, &u).unwrap();
        for i in 0..3 {
            assert_eq!(c[(i, i)], 0.0);
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            build_cost_matrix(&m(&[&[0.0]]), &m(&[&[1.0, 2.0]])),
            Err(ClarError::Dimension(_))
        ));
    }

    #[test]
    fn zero_cost_perfect_matching() {
        let a = solve_matching(&m(&[&[0.0, 5.0], &[5.0, 0.0]]), 2, 1).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total, 0.0);
    }

    #[test]
    fn single_pair_tie_prefers_lowest_indices() {
        let c = m(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let a = solve_matching(&c, 1, 1).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total, 1.0);
        assert_eq!(brute_force_matching(&c, 1, 1).unwrap(), a);
    }

    #[test]
    fn all_equal_costs_give_lexicographic_first() {
        let c = Matrix::from_vec(3, 3, vec![4.0; 9]).unwrap();
        let a = solve_matching(&c, 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (0, 1)]);
        let a = solve_matching(&c, 3, 1).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn brute_force_trivial_cases() {
        let a = brute_force_matching(&m(&[&[7.0]]), 1, 1).unwrap();
        assert_eq!(a.total, 7.0);
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(brute_force_matching(&id, 2, 1).unwrap().total, 0.0);
        assert!(matches!(
            brute_force_matching(&Matrix::zeros(6, 7), 1, 1),
            Err(ClarError::TooLarge { .. })
        ));
    }

    #[test]
    fn capacity_allows_many_to_one() {
        // both targets are closest to source 0
        let c = m(&[&[0.0, 1.0], &[10.0, 10.0]]);
        assert_eq!(solve_matching(&c, 2, 1).unwrap().total, 10.0);
        let a = solve_matching(&c, 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (0, 1)]);
        assert_eq!(a.total, 1.0);
    }

    #[test]
    fn invalid_inputs() {
        let c = m(&[&[1.0, 2.0]]);
        assert!(matches!(solve_matching(&c, 2, 1), Err(ClarError::Infeasible(_))));
        assert!(matches!(solve_matching(&c, 0, 1), Err(ClarError::Infeasible(_))));
        assert!(solve_matching(&c, 2, 2).is_ok());
        let neg = m(&[&[1.0, -2.0]]);
        assert!(matches!(solve_matching(&neg, 1, 1), Err(ClarError::InvalidCost { row: 0, col: 1, .. })));
        let nan = m(&[&[f64::NAN]]);
        assert!(matches!(solve_matching(&nan, 1, 1), Err(ClarError::InvalidCost { .. })));
    }

    #[test]
    fn cardinality_resolution() {
        assert_eq!(Cardinality::All.resolve(5, 7, 1), 5);
        assert_eq!(Cardinality::All.resolve(5, 8, 2), 8);
        assert_eq!(Cardinality::Half.resolve(5, 7, 1), 3);
        assert_eq!(Cardinality::Half.resolve(6, 7, 1), 3);
        assert_eq!("ALL".parse::<Cardinality>().unwrap(), Cardinality::All);
        assert_eq!("4".parse::<Cardinality>().unwrap(), Cardinality::Exactly(4));
        assert!("0".parse::<Cardinality>().is_err());
        assert_eq!(MatchConfig::default().effective_cardinality(), Cardinality::Half);
        let many = MatchConfig { source_capacity: 2, ..MatchConfig::default() };
        assert_eq!(many.effective_cardinality(), Cardinality::All);
    }

    #[test]
    fn pairing_tsv_sorted_by_distance() {
        let p = Pairing {
            pairs: vec![
                LabelPair { source: LabelId::new("es", "A0"), target: LabelId::new("ca", "A0"), sq_distance: 2.5 },
                LabelPair { source: LabelId::new("es", "A1"), target: LabelId::new("ca", "A1"), sq_distance: 0.5 },
            ],
        };
        let text = p.to_tsv();
        assert!(text.starts_with("es\tA1\tca\tA1\t"));
        let back = Pairing::from_tsv(&text).unwrap();
        assert_eq!(back.pairs[0], p.pairs[1]);
        assert_eq!(back.pairs[1], p.pairs[0]);
    }
}
