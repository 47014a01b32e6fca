//! Exact minimum-cost assignment (Hungarian algorithm, potentials form,
//! O(n³)). Used for the optional minibatch endpoint coupling: pairing source
//! and target draws by squared Euclidean distance.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Minimum-total-cost perfect matching on a square cost matrix. Returns
/// `perm` with row `i` assigned to column `perm[i]`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if n == 0 || cost.ncols() != n {
        return Err(Error::Shape(format!(
            "assignment needs a non-empty square cost matrix, got {}x{}",
            cost.nrows(),
            cost.ncols()
        )));
    }
    if cost.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }

    // Dual potentials u (rows), v (columns); p[j] = row matched to column j,
    // with index 0 as the virtual unmatched slot (1-based internally).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
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
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
        // Augment along the recorded alternating path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}
