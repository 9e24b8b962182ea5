//! Exact rectangular linear assignment (shortest augmenting path form of
//! the Hungarian algorithm). Scores are maximized; the rectangular problem
//! is padded to square with zero-cost dummies, which leaves the optimum of
//! the real block unchanged.

use crate::tape::Mat;

/// Maximum-score one-to-one assignment. Returns, per row, the matched
/// column (or `None` when the row is left unmatched in a rectangular
/// problem). Scores must be finite.
pub fn solve_max(score: &Mat) -> Vec<Option<usize>> {
    let rows = score.rows;
    let cols = score.cols;
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let max_score = score.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // cost[i][j]: padded square, minimized
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            max_score - score.at(i, j)
        } else {
            0.0
        }
    };

    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for (j, &i) in p.iter().enumerate().skip(1).take(cols) {
        if i >= 1 && i <= rows {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Greedy fallback: repeatedly match the highest remaining score.
pub fn solve_greedy(score: &Mat) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..score.rows {
        for j in 0..score.cols {
            pairs.push((i, j, score.at(i, j)));
        }
    }
    pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut row_used = vec![false; score.rows];
    let mut col_used = vec![false; score.cols];
    let mut assignment = vec![None; score.rows];
    for (i, j, _) in pairs {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            assignment[i] = Some(j);
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn total(score: &Mat, assignment: &[Option<usize>]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| score.at(i, j)))
            .sum()
    }

    fn brute_force_max(score: &Mat) -> f64 {
        // enumerate all injective row->col maps
        fn rec(score: &Mat, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == score.rows {
                if acc > *best {
                    *best = acc;
                }
                return;
            }
            // leave row unmatched only when rows > cols
            let must_match = score.rows <= score.cols;
            if !must_match {
                rec(score, row + 1, used, acc, best);
            }
            for j in 0..score.cols {
                if !used[j] {
                    used[j] = true;
                    rec(score, row + 1, used, acc + score.at(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(score, 0, &mut vec![false; score.cols], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for case in 0..200 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let score = Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect(),
            );
            let a = solve_max(&score);
            let got = total(&score, &a);
            let want = brute_force_max(&score);
            assert!(
                (got - want).abs() < 1e-9,
                "case {case}: {rows}x{cols} got {got} want {want}"
            );
        }
    }

    #[test]
    fn assignment_is_injective() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let rows = rng.random_range(1..=8);
            let cols = rng.random_range(1..=8);
            let score = Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect(),
            );
            let a = solve_max(&score);
            let mut seen = std::collections::HashSet::new();
            for j in a.iter().flatten() {
                assert!(seen.insert(*j), "column {j} assigned twice");
            }
            let matched = a.iter().flatten().count();
            assert_eq!(matched, rows.min(cols));
        }
    }

    #[test]
    fn rectangular_leaves_extra_rows_unmatched() {
        let score = Mat::from_vec(3, 1, vec![0.2, 0.9, 0.4]);
        let a = solve_max(&score);
        assert_eq!(a, vec![None, Some(0), None]);
    }

    #[test]
    fn identity_preferred() {
        let score = Mat::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = solve_max(&score);
        assert_eq!(a, vec![Some(0), Some(1), Some(2)]);
    }
}
