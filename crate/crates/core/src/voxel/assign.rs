//! Linear assignment under squared Euclidean cost.
//!
//! A permutation `perm` maps item `i` to target `perm[i]`.

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;

/// Problems up to this size are solved exactly by default.
pub const EXACT_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Hungarian up to [`EXACT_LIMIT`], auction above.
    Auto,
    Hungarian,
    Auction,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
    /// Cost of the sequential nearest-free-target baseline.
    pub greedy_cost: f64,
    /// Dual lower bound on the optimal cost, when the solver provides one.
    pub lower_bound: Option<f64>,
    /// Solver whose permutation was returned.
    pub method: Solver,
}

pub fn sq_dist(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

pub fn assignment_cost(items: &[Vector3<f64>], targets: &[Vector3<f64>], perm: &[usize]) -> f64 {
    items.iter().zip(perm).map(|(p, &j)| sq_dist(p, &targets[j])).sum()
}

/// Each item in turn takes its nearest free target (lowest index on ties).
pub fn greedy_assign(items: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Vec<usize> {
    let mut free = vec![true; targets.len()];
    items
        .iter()
        .map(|p| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, t) in targets.iter().enumerate() {
                if free[j] {
                    let d = sq_dist(p, t);
                    if d < best_d || best == usize::MAX {
                        best = j;
                        best_d = d;
                    }
                }
            }
            free[best] = false;
            best
        })
        .collect()
}

/// Exact O(n³) Hungarian method with row/column potentials on a dense cost matrix.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of[j] - 1] = j - 1;
    }
    perm
}

/// Jacobi auction with ε-scaling. Bids are computed in parallel and resolved
/// in item order, so the result does not depend on the thread count.
/// Returns the permutation and the dual lower bound of the final prices.
pub fn auction_assign(items: &[Vector3<f64>], targets: &[Vector3<f64>], eps_final: f64) -> (Vec<usize>, f64) {
    let n = items.len();
    if n <= 1 {
        return ((0..n).collect(), items.first().map_or(0.0, |p| sq_dist(p, &targets[0])));
    }
    let max_cost = items
        .iter()
        .flat_map(|p| targets.iter().map(move |t| sq_dist(p, t)))
        .fold(0.0, f64::max);
    // benefit of item i for target j is -cost(i, j)
    let mut price = vec![0.0; n];
    let mut owner = vec![usize::MAX; n];
    let mut target_of = vec![usize::MAX; n];
    let eps_final = eps_final.max(max_cost * 1e-14).max(f64::MIN_POSITIVE);
    let mut eps = (max_cost / 4.0).max(eps_final);
    loop {
        owner.fill(usize::MAX);
        target_of.fill(usize::MAX);
        let mut unassigned: Vec<usize> = (0..n).collect();
        while !unassigned.is_empty() {
            let bids = exec::map_slice(&unassigned, |&i| {
                let p = &items[i];
                let (mut best, mut v1, mut v2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for (j, t) in targets.iter().enumerate() {
                    let val = -sq_dist(p, t) - price[j];
                    if val > v1 {
                        v2 = v1;
                        v1 = val;
                        best = j;
                    } else if val > v2 {
                        v2 = val;
                    }
                }
                (i, best, price[best] + (v1 - v2) + eps)
            });
            let mut winner: Vec<Option<(usize, f64)>> = vec![None; n];
            for &(i, j, bid) in &bids {
                match winner[j] {
                    Some((_, b)) if b >= bid => {}
                    _ => winner[j] = Some((i, bid)),
                }
            }
            let mut next = Vec::new();
            for (j, w) in winner.iter().enumerate() {
                if let Some((i, bid)) = *w {
                    if owner[j] != usize::MAX {
                        target_of[owner[j]] = usize::MAX;
                        next.push(owner[j]);
                    }
                    owner[j] = i;
                    target_of[i] = j;
                    price[j] = bid;
                }
            }
            for &(i, _, _) in &bids {
                if target_of[i] == usize::MAX {
                    next.push(i);
                }
            }
            next.sort_unstable();
            next.dedup();
            unassigned = next;
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    // max over perms of Σ benefit ≤ Σ_j p_j + Σ_i max_j (benefit − p_j)
    let dual: f64 = price.iter().sum::<f64>()
        + exec::map_slice(items, |p| {
            targets
                .iter()
                .zip(&price)
                .map(|(t, pj)| -sq_dist(p, t) - pj)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .iter()
        .sum::<f64>();
    (target_of, -dual)
}

fn check_points(items: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Result<()> {
    if items.len() != targets.len() {
        return Err(Error::dims(format!("{} items but {} targets", items.len(), targets.len())));
    }
    if items.iter().chain(targets).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("assignment input".into()));
    }
    Ok(())
}

/// Minimum squared-distance bijection from `items` to `targets`.
pub fn assign_ot(items: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Result<Assignment> {
    assign_with(items, targets, Solver::Auto)
}

/// As [`assign_ot`] with an explicit solver. Any returned permutation costs
/// no more than the greedy baseline.
pub fn assign_with(items: &[Vector3<f64>], targets: &[Vector3<f64>], solver: Solver) -> Result<Assignment> {
    check_points(items, targets)?;
    let n = items.len();
    let greedy = greedy_assign(items, targets);
    let greedy_cost = assignment_cost(items, targets, &greedy);
    let solver = match solver {
        Solver::Auto if n <= EXACT_LIMIT => Solver::Hungarian,
        Solver::Auto => Solver::Auction,
        s => s,
    };
    let (perm, lower_bound) = match solver {
        Solver::Hungarian => {
            let rows = exec::map_slice(items, |p| targets.iter().map(|t| sq_dist(p, t)).collect::<Vec<_>>());
            (hungarian(&rows.concat(), n), None)
        }
        Solver::Auction => {
            let (perm, lb) = auction_assign(items, targets, 1e-6 * greedy_cost / n.max(1) as f64);
            (perm, Some(lb))
        }
        _ => (greedy.clone(), None),
    };
    let cost = assignment_cost(items, targets, &perm);
    let out = if cost <= greedy_cost {
        Assignment {
            perm,
            cost,
            greedy_cost,
            lower_bound,
            method: solver,
        }
    } else {
        Assignment {
            perm: greedy,
            cost: greedy_cost,
            greedy_cost,
            lower_bound,
            method: Solver::Greedy,
        }
    };
    Ok(out)
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_and_reverse() {
        let t = random(27, 1);
        let a = assign_ot(&t, &t).unwrap();
        assert_eq!(a.perm, (0..27).collect::<Vec<_>>());
        assert_eq!(a.cost, 0.0);
        let rev: Vec<_> = t.iter().rev().copied().collect();
        let a = assign_ot(&rev, &t).unwrap();
        assert_eq!(a.perm, (0..27).rev().collect::<Vec<_>>());
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn hungarian_small_matrix() {
        // optimum 1 + 2 + 2 = 5 via (0→1, 1→0, 2→2)
        let c = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let p = hungarian(&c, 3);
        assert_eq!(p.iter().enumerate().map(|(i, &j)| c[i * 3 + j]).sum::<f64>(), 5.0);
    }

    #[test]
    fn auction_close_to_exact() {
        for seed in 0..5 {
            let (a, b) = (random(60, seed), random(60, seed + 100));
            let exact = assign_with(&a, &b, Solver::Hungarian).unwrap();
            let auc = assign_with(&a, &b, Solver::Auction).unwrap();
            assert!(is_permutation(&auc.perm));
            let lb = auc.lower_bound.unwrap();
            assert!(lb <= exact.cost + 1e-9, "{lb} {}", exact.cost);
            assert!(auc.cost <= exact.cost * 1.01, "{} {}", auc.cost, exact.cost);
            assert!(auc.cost <= auc.greedy_cost);
        }
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let same = vec![Vector3::new(0.3, 0.3, 0.3); 8];
        let t = random(8, 4);
        assert!(is_permutation(&assign_ot(&same, &t).unwrap().perm));
        assert!(is_permutation(&assign_with(&same, &t, Solver::Auction).unwrap().perm));
        let mut bad = t.clone();
        bad[2].x = f64::NAN;
        assert!(assign_ot(&bad, &t).is_err());
        assert!(assign_ot(&t[..3], &t).is_err());
        assert!(assign_ot(&[], &[]).unwrap().perm.is_empty());
    }
}
