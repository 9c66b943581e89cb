//! Minimum-cost bipartite assignment (Hungarian algorithm with potentials,
//! O(n²·m)). Used to match detection-head predictions to ground-truth agents
//! before computing the set-prediction loss.

use uwm_core::tensor::Mat;

use crate::ModelError;

/// Match every ground-truth column to a distinct prediction row of the
/// `(n_pred, n_gt)` cost matrix, minimizing total cost. Returns `assign`
/// with `assign[g] = p`. Requires `n_gt ≤ n_pred`; any non-finite cost is
/// rejected with its coordinates.
pub fn assign(cost: &Mat) -> Result<Vec<usize>, ModelError> {
    let (n_pred, n_gt) = cost.dim();
    for p in 0..n_pred {
        for g in 0..n_gt {
            if !cost[(p, g)].is_finite() {
                return Err(ModelError::InvalidCost { row: p, col: g });
            }
        }
    }
    if n_gt == 0 {
        return Ok(Vec::new());
    }
    if n_gt > n_pred {
        return Err(ModelError::Shape(format!(
            "{n_gt} targets cannot be matched to {n_pred} predictions"
        )));
    }

    // Classic potentials formulation, 1-indexed; rows are ground truths,
    // columns are predictions.
    let (n, m) = (n_gt, n_pred);
    let a = |i: usize, j: usize| cost[(j - 1, i - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched = vec![0usize; m + 1]; // matched[j] = row using column j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if matched[j] != 0 {
            out[matched[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&p| p != usize::MAX));
    Ok(out)
}

/// Total cost of an assignment under the same `(n_pred, n_gt)` matrix.
pub fn assignment_cost(cost: &Mat, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(g, &p)| cost[(p, g)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use uwm_core::rng::DetRng;

    /// Exhaustive minimum over all injective gt→pred maps.
    pub(crate) fn brute_force(cost: &Mat) -> f64 {
        let (n_pred, n_gt) = cost.dim();
        fn rec(cost: &Mat, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (n_pred, n_gt) = cost.dim();
            if g == n_gt {
                *best = best.min(acc);
                return;
            }
            for p in 0..n_pred {
                if !used[p] {
                    used[p] = true;
                    rec(cost, g + 1, used, acc + cost[(p, g)], best);
                    used[p] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; n_pred], 0.0, &mut best);
        if n_gt == 0 {
            0.0
        } else {
            best
        }
    }

    #[test]
    fn hand_worked_square_case() {
        // Row-major (pred, gt) costs; unique optimum is g0→p1, g1→p0, g2→p2.
        let cost = Mat::from_shape_vec(
            (3, 3),
            vec![
                4.0, 1.0, 3.0, // pred 0
                2.0, 0.0, 5.0, // pred 1
                3.0, 2.0, 2.0, // pred 2
            ],
        )
        .unwrap();
        let a = assign(&cost).unwrap();
        assert_eq!(a, vec![1, 0, 2]);
        assert_eq!(assignment_cost(&cost, &a), 2.0 + 1.0 + 2.0);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        for seed in 0..50u64 {
            let mut rng = DetRng::indexed(77, "hungarian", seed, 0);
            let n_pred = 1 + rng.below(7);
            let n_gt = 1 + rng.below(n_pred);
            let data: Vec<f64> = (0..n_pred * n_gt).map(|_| rng.range(-3.0, 9.0)).collect();
            let cost = Mat::from_shape_vec((n_pred, n_gt), data).unwrap();
            let a = assign(&cost).unwrap();
            let mut seen = vec![false; n_pred];
            for &p in &a {
                assert!(!seen[p], "prediction {p} used twice (seed {seed})");
                seen[p] = true;
            }
            let got = assignment_cost(&cost, &a);
            let want = brute_force(&cost);
            assert!(
                (got - want).abs() < 1e-9,
                "seed {seed}: got {got}, brute force {want}"
            );
        }
    }

    #[test]
    fn non_finite_cost_is_located() {
        let mut cost = Mat::zeros((4, 2));
        cost[(2, 1)] = f64::NAN;
        match assign(&cost) {
            Err(ModelError::InvalidCost { row: 2, col: 1 }) => {}
            other => panic!("expected located cost error, got {other:?}"),
        }
    }

    #[test]
    fn empty_target_set_matches_nothing() {
        let cost = Mat::zeros((5, 0));
        assert!(assign(&cost).unwrap().is_empty());
    }

    #[test]
    fn more_targets_than_predictions_is_rejected() {
        let cost = Mat::zeros((2, 3));
        assert!(matches!(assign(&cost), Err(ModelError::Shape(_))));
    }

    #[test]
    fn rectangular_assignment_prefers_cheap_predictions() {
        // One target, many predictions: picks the row with minimal cost.
        let cost = Mat::from_shape_vec((5, 1), vec![3.0, 0.5, 2.0, 0.4, 1.0]).unwrap();
        assert_eq!(assign(&cost).unwrap(), vec![3]);
    }
}
