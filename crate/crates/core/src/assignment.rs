//! Minimum-cost perfect matching on square cost matrices, and centroid
//! alignment between two clusterings built on top of it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Square matrix of assignment costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != size) {
            return Err(validation!(
                "cost matrix is not square: row {i} has {} entries, expected {size}",
                r.len()
            ));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_flat(size, entries)
    }

    pub fn from_flat(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(validation!(
                "cost matrix with {} entries is not {size}x{size}",
                entries.len()
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(validation!("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.size + col]
    }

    pub fn negated(&self) -> CostMatrix {
        CostMatrix {
            size: self.size,
            entries: self.entries.iter().map(|v| -v).collect(),
        }
    }

    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// A bijection rows → columns: row `i` is matched to column `perm[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl Mapping {
    /// Column → row.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// Minimum-cost assignment. Among equal-cost optima the lexicographically
/// smallest `perm` is returned.
///
/// The O(K³) shortest-augmenting-path solver yields optimal dual potentials.
/// Every optimal assignment uses only edges with zero reduced cost, so the
/// lexicographic optimum is the lexicographically smallest perfect matching
/// of that tight-edge graph, found greedily row by row with alternating-path
/// repairs.
pub fn hungarian(cost: &CostMatrix) -> Mapping {
    let n = cost.size;
    if n == 0 {
        return Mapping {
            perm: Vec::new(),
            total_cost: 0.0,
        };
    }
    let (row_pot, col_pot, mut match_col) = solve_with_potentials(cost);

    let scale = cost.entries.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost.get(i, j) - row_pot[i] - col_pot[j] <= tol)
                .collect()
        })
        .collect();

    let mut match_row = vec![0; n];
    for (i, &j) in match_col.iter().enumerate() {
        match_row[j] = i;
    }
    let mut fixed = vec![false; n];
    for i in 0..n {
        for j in 0..match_col[i] {
            if !tight[i][j] || fixed_col(&fixed, &match_row, j) {
                continue;
            }
            if reroute(i, j, &tight, &fixed, &mut match_col, &mut match_row) {
                break;
            }
        }
        fixed[i] = true;
    }

    Mapping {
        total_cost: cost.cost_of(&match_col),
        perm: match_col,
    }
}

fn fixed_col(fixed: &[bool], match_row: &[usize], col: usize) -> bool {
    fixed[match_row[col]]
}

/// Try to give row `i` column `j` while keeping a perfect matching of tight
/// edges: the row currently holding `j` must reach `i`'s old column through
/// an alternating path over unfixed rows.
fn reroute(
    i: usize,
    j: usize,
    tight: &[Vec<bool>],
    fixed: &[bool],
    match_col: &mut [usize],
    match_row: &mut [usize],
) -> bool {
    let n = match_col.len();
    let target = match_col[i];
    let start = match_row[j];
    // BFS over rows; parent_col[c] = row that reached column c
    let mut parent_col: Vec<Option<usize>> = vec![None; n];
    let mut seen_row = vec![false; n];
    seen_row[i] = true;
    seen_row[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut found = false;
    'bfs: while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if !tight[r][c] || c == j || parent_col[c].is_some() {
                continue;
            }
            if c == target {
                parent_col[c] = Some(r);
                found = true;
                break 'bfs;
            }
            let next = match_row[c];
            if fixed[next] || seen_row[next] {
                continue;
            }
            parent_col[c] = Some(r);
            seen_row[next] = true;
            queue.push_back(next);
        }
    }
    if !found {
        return false;
    }
    // shift along the path back from target to start
    let mut c = target;
    loop {
        let r = parent_col[c].unwrap();
        let prev = match_col[r];
        match_col[r] = c;
        match_row[c] = r;
        if r == start {
            break;
        }
        c = prev;
    }
    match_col[i] = j;
    match_row[j] = i;
    true
}

/// Shortest augmenting path Hungarian method with row and column potentials.
/// Returns `(row_pot, col_pot, col_of_row)` with
/// `cost[i][j] - row_pot[i] - col_pot[j] >= 0` everywhere and equality on the
/// returned matching.
fn solve_with_potentials(cost: &CostMatrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = cost.size;
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), col_of_row)
}

/// Match previous-epoch centroids (rows) to current centroids (columns) by
/// minimum total squared Euclidean distance. Current cluster `perm[i]`
/// inherits label `i`.
pub fn align_clusters(prev: &[Vec<f64>], cur: &[Vec<f64>]) -> Result<Mapping> {
    if prev.len() != cur.len() {
        return Err(validation!(
            "cannot align {} centroids with {}",
            prev.len(),
            cur.len()
        ));
    }
    let dim = prev.first().map_or(0, Vec::len);
    if prev.iter().chain(cur).any(|c| c.len() != dim) {
        return Err(validation!("centroid dimensions differ"));
    }
    let k = prev.len();
    let mut entries = Vec::with_capacity(k * k);
    for p in prev {
        for c in cur {
            entries.push(p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(hungarian(&CostMatrix::from_flat(k, entries)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &CostMatrix) -> (f64, Vec<usize>) {
        let n = cost.size();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = (f64::INFINITY, perm.clone());
        permute(&mut perm, 0, cost, &mut best);
        best
    }

    // lexicographic enumeration order keeps the first minimum
    fn permute(p: &mut Vec<usize>, k: usize, cost: &CostMatrix, best: &mut (f64, Vec<usize>)) {
        if k == p.len() {
            let c = cost.cost_of(p);
            if c < best.0 || (c == best.0 && *p < best.1) {
                *best = (c, p.clone());
            }
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, cost, best);
            p.swap(k, i);
        }
    }

    #[test]
    fn diagonal_optimum() {
        let m = hungarian(&CostMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert_eq!(m.perm, vec![0, 1]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn constant_matrix_breaks_ties_to_identity() {
        let m = hungarian(&CostMatrix::new(vec![vec![2.5; 3]; 3]).unwrap());
        assert_eq!(m.perm, vec![0, 1, 2]);
        assert_eq!(m.total_cost, 7.5);
    }

    #[test]
    fn tie_break_prefers_smaller_first_row_column() {
        // both [1,0] and [0,1] cost 0 once row 0 is shifted
        let m = hungarian(&CostMatrix::new(vec![vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        assert_eq!(m.perm, vec![0, 1]);
        let m = hungarian(
            &CostMatrix::new(vec![
                vec![5.0, 1.0, 1.0],
                vec![1.0, 5.0, 1.0],
                vec![1.0, 1.0, 5.0],
            ])
            .unwrap(),
        );
        assert_eq!(m.perm, vec![1, 2, 0]);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(CostMatrix::new(vec![vec![1.0, 2.0]]).is_err());
        assert!(CostMatrix::new(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn empty_matrix() {
        let m = hungarian(&CostMatrix::new(vec![]).unwrap());
        assert!(m.perm.is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_5x5() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(11);
        for _ in 0..1000 {
            let e: Vec<f64> = (0..25).map(|_| rng.random_range(0..10) as f64).collect();
            let c = CostMatrix::from_flat(5, e).unwrap();
            let (best, best_perm) = brute_force(&c);
            let m = hungarian(&c);
            assert_eq!(m.total_cost, best);
            assert_eq!(m.perm, best_perm);
        }
    }

    #[test]
    fn align_identical_is_identity() {
        let c = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        let m = align_clusters(&c, &c).unwrap();
        assert_eq!(m.perm, vec![0, 1, 2]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn align_swapped_is_transposition() {
        let a = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![9.0, 0.0]];
        let b = vec![a[1].clone(), a[0].clone(), a[2].clone()];
        assert_eq!(align_clusters(&a, &b).unwrap().perm, vec![1, 0, 2]);
    }

    #[test]
    fn align_count_mismatch() {
        assert!(align_clusters(&[vec![0.0]], &[]).is_err());
    }

    #[test]
    fn align_matches_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(5);
        for _ in 0..50 {
            let mut pts = || -> Vec<Vec<f64>> {
                (0..6)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let (a, b) = (pts(), pts());
            let m = align_clusters(&a, &b).unwrap();
            let mut e = Vec::new();
            for p in &a {
                for q in &b {
                    e.push(p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
            let (best, _) = brute_force(&CostMatrix::from_flat(6, e).unwrap());
            assert!((m.total_cost - best).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn never_worse_than_any_permutation(
            n in 1usize..=6,
            raw in prop::collection::vec(-20i32..20, 36),
        ) {
            let c = CostMatrix::from_flat(n, raw[..n * n].iter().map(|&v| v as f64).collect()).unwrap();
            let (best, best_perm) = brute_force(&c);
            let m = hungarian(&c);
            prop_assert_eq!(m.total_cost, best);
            prop_assert_eq!(m.perm, best_perm);
        }

        #[test]
        fn row_and_column_shifts_keep_the_permutation(
            n in 1usize..=6,
            raw in prop::collection::vec(0i32..10, 36),
            row in 0usize..6,
            col in 0usize..6,
            shift in -50i32..50,
        ) {
            let base: Vec<f64> = raw[..n * n].iter().map(|&v| v as f64).collect();
            let (row, col) = (row % n, col % n);
            let mut shifted = base.clone();
            for j in 0..n { shifted[row * n + j] += shift as f64; }
            for i in 0..n { shifted[i * n + col] += shift as f64; }
            let a = hungarian(&CostMatrix::from_flat(n, base).unwrap());
            let b = hungarian(&CostMatrix::from_flat(n, shifted).unwrap());
            prop_assert_eq!(a.perm, b.perm);
        }
    }
}
