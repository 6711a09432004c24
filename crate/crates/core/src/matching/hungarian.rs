//! Rectangular maximum-weight assignment.

/// Assigns each row of `scores` (`n` rows of `m ≥ n` columns) to a distinct
/// column maximizing the total score. Returns the column of every row.
///
/// Shortest augmenting paths with row/column potentials on the negated
/// matrix; `O(n² m)`.
pub fn assign(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let m = scores[0].len();
    assert!(m >= n, "assignment needs at least as many columns as rows");
    assert!(scores.iter().all(|r| r.len() == m), "ragged score matrix");
    let cost = |i: usize, j: usize| -scores[i - 1][j - 1];
    // index 0 is the virtual source row/column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            out[row_of[j] - 1] = j - 1;
        }
    }
    out
}

/// Exhaustive search over injective row → column maps.
pub fn assign_brute_force(scores: &[Vec<f64>]) -> Vec<usize> {
    fn go(scores: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == scores.len() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            cur.push(j);
            go(scores, row + 1, used, cur, acc + scores[row][j], best);
            cur.pop();
            used[j] = false;
        }
    }
    if scores.is_empty() {
        return Vec::new();
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(scores, 0, &mut vec![false; scores[0].len()], &mut Vec::new(), 0.0, &mut best);
    best.1
}

/// Total score of an assignment, summed in row order.
pub fn total(scores: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| scores[i][j]).sum()
}
