use clar::label_space::{FrequencyTable, LabelId, LabeledMatrix};
use clar::matcher::{brute_force_matching, match_labels, solve_matching, Cardinality, MatchConfig, Pairing};
use clar::Matrix;
use proptest::prelude::*;

fn cost_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(0u32..100, r * c).prop_map(move |v| {
            Matrix::from_vec(r, c, v.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

fn max_pairs(cost: &Matrix, capacity: usize) -> usize {
    cost.cols().min(cost.rows() * capacity)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn agrees_with_enumeration(cost in cost_strategy(5), capacity in 1usize..=2) {
        for k in 1..=max_pairs(&cost, capacity) {
            let fast = solve_matching(&cost, k, capacity).unwrap();
            let exact = brute_force_matching(&cost, k, capacity).unwrap();
            prop_assert_eq!(fast.total, exact.total);
            prop_assert_eq!(fast.pairs.len(), k);
        }
    }

    #[test]
    fn respects_capacities(cost in cost_strategy(6), capacity in 1usize..=3) {
        let k = max_pairs(&cost, capacity);
        let a = solve_matching(&cost, k, capacity).unwrap();
        let mut per_row = vec![0; cost.rows()];
        let mut per_col = vec![0; cost.cols()];
        for &(i, j) in &a.pairs {
            per_row[i] += 1;
            per_col[j] += 1;
        }
        prop_assert!(per_row.iter().all(|&n| n <= capacity));
        prop_assert!(per_col.iter().all(|&n| n <= 1));
        let total: f64 = a.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
        prop_assert_eq!(total, a.total);
    }

    #[test]
    fn total_grows_with_pair_count(cost in cost_strategy(6), capacity in 1usize..=2) {
        let totals: Vec<f64> =
            (1..=max_pairs(&cost, capacity)).map(|k| solve_matching(&cost, k, capacity).unwrap().total).collect();
        prop_assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn relaxing_capacity_never_costs_more(cost in cost_strategy(6)) {
        for k in 1..=max_pairs(&cost, 1) {
            let strict = solve_matching(&cost, k, 1).unwrap().total;
            let loose = solve_matching(&cost, k, 2).unwrap().total;
            prop_assert!(loose <= strict);
        }
    }

    #[test]
    fn permuting_rows_and_columns_keeps_the_optimum(cost in cost_strategy(6), seed in 0u64..1000) {
        let (r, c) = (cost.rows(), cost.cols());
        let rp = rotate(r, seed as usize);
        let cp = rotate(c, (seed / 7) as usize);
        let mut permuted = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                permuted[(rp[i], cp[j])] = cost[(i, j)];
            }
        }
        for k in 1..=max_pairs(&cost, 1) {
            prop_assert_eq!(solve_matching(&cost, k, 1).unwrap().total, solve_matching(&permuted, k, 1).unwrap().total);
        }
    }

    #[test]
    fn repeated_solves_are_identical(cost in cost_strategy(6), capacity in 1usize..=2) {
        let k = max_pairs(&cost, capacity);
        prop_assert_eq!(solve_matching(&cost, k, capacity).unwrap(), solve_matching(&cost, k, capacity).unwrap());
    }
}

fn rotate(n: usize, by: usize) -> Vec<usize> {
    (0..n).map(|i| (i + by) % n).collect()
}

fn labeled(lang: &str, prefix: &str, rows: &[Vec<f64>]) -> LabeledMatrix {
    let labels = (0..rows.len()).map(|i| LabelId::new(lang, format!("{prefix}{i}"))).collect();
    LabeledMatrix::new(labels, Matrix::from_rows(rows).unwrap()).unwrap()
}

fn uniform_freqs(m: &LabeledMatrix) -> FrequencyTable {
    FrequencyTable::from_counts(m.labels().iter().map(|l| (l.clone(), 10)))
}

#[test]
fn permuted_weights_recover_the_permutation() {
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.3, -(i as f64)]).collect();
    let perm = [3, 0, 5, 1, 4, 2];
    let target_rows: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].iter().map(|x| x + 0.01).collect()).collect();
    let src = labeled("en", "A", &rows);
    let tgt = labeled("de", "B", &target_rows);
    let cfg = MatchConfig { cardinality: Some(Cardinality::All), ..MatchConfig::default() };
    let pairing = match_labels(&src, &tgt, &uniform_freqs(&src), &uniform_freqs(&tgt), &cfg).unwrap();
    assert_eq!(pairing.len(), 6);
    for p in &pairing.pairs {
        let j: usize = p.target.name[1..].parse().unwrap();
        assert_eq!(p.source.name, format!("A{}", perm[j]));
    }
}

#[test]
fn self_match_has_zero_distances() {
    let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
    let src = labeled("en", "A", &rows);
    let tgt = labeled("de", "A", &rows);
    let cfg = MatchConfig { cardinality: Some(Cardinality::All), ..MatchConfig::default() };
    let pairing = match_labels(&src, &tgt, &uniform_freqs(&src), &uniform_freqs(&tgt), &cfg).unwrap();
    assert!(pairing.pairs.iter().all(|p| p.sq_distance == 0.0 && p.source.name == p.target.name));
    assert_eq!(Pairing::from_tsv(&pairing.to_tsv()).unwrap(), pairing);
}

#[test]
fn rare_labels_are_left_out() {
    let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
    let src = labeled("en", "A", &rows);
    let tgt = labeled("de", "B", &rows);
    let freq_s = FrequencyTable::from_counts([
        (LabelId::new("en", "A0"), 500),
        (LabelId::new("en", "A1"), 500),
        (LabelId::new("en", "A2"), 10),
    ]);
    // exactly 1% is not "more than" 1%
    let freq_t = FrequencyTable::from_counts([
        (LabelId::new("de", "B0"), 495),
        (LabelId::new("de", "B1"), 495),
        (LabelId::new("de", "B2"), 10),
    ]);
    let cfg = MatchConfig { cardinality: Some(Cardinality::All), ..MatchConfig::default() };
    let pairing = match_labels(&src, &tgt, &freq_s, &freq_t, &cfg).unwrap();
    assert_eq!(pairing.len(), 2);
    assert!(pairing.pairs.iter().all(|p| p.source.name != "A2" && p.target.name != "B2"));
}

#[test]
fn half_cardinality_rounds_up() {
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    let src = labeled("en", "A", &rows);
    let tgt = labeled("de", "B", &rows);
    let pairing = match_labels(&src, &tgt, &uniform_freqs(&src), &uniform_freqs(&tgt), &MatchConfig::default()).unwrap();
    assert_eq!(pairing.len(), 3);
}
