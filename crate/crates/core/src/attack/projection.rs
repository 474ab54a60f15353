use crate::engine::Matrix;

/// Indices of the `b` largest entries of `values` among those allowed by
/// `eligible`, ties toward the lowest index. Returned in selection order.
pub fn top_b_indices(values: &[f64], b: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&j| eligible(j)).collect();
    idx.sort_by(|&x, &y| values[y].total_cmp(&values[x]).then(x.cmp(&y)));
    idx.truncate(b);
    idx
}

/// Binarizes continuous blocks so that each injected row of
/// `[A_inter | A_intra]` keeps its `budget` largest scores.
///
/// `inter_mask` limits which original nodes may be linked; `allow_intra`
/// toggles injected-injected edges. An intra edge survives only when both
/// endpoints picked it, and a row that loses one is refilled with its next
/// best inter entry, so the block stays symmetric without any row exceeding
/// the budget.
pub fn project_top_b(
    inter: &Matrix,
    intra: &Matrix,
    budget: usize,
    inter_mask: Option<&[bool]>,
    allow_intra: bool,
) -> (Matrix, Matrix) {
    let (m, n) = inter.shape();
    assert_eq!(intra.shape(), (m, m), "intra block must be m x m");
    let cap = (n + m).saturating_sub(1);
    let budget = if budget > cap {
        log::warn!("budget {budget} exceeds n + m - 1 = {cap}; clamping");
        cap
    } else {
        budget
    };
    let inter_ok = |j: usize| inter_mask.is_none_or(|mask| mask[j]);

    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut scores = inter.row(i).to_vec();
        scores.extend_from_slice(intra.row(i));
        let pick = top_b_indices(&scores, budget, |j| if j < n { inter_ok(j) } else { allow_intra && j - n != i });
        rows.push(pick);
    }

    let mut out_inter = Matrix::zeros(m, n);
    let mut out_intra = Matrix::zeros(m, m);
    let chose = |rows: &[Vec<usize>], i: usize, k: usize| rows[i].contains(&(n + k));
    for i in 0..m {
        let mut degree = 0;
        for &j in &rows[i] {
            if j < n {
                out_inter.set(i, j, 1.0);
                degree += 1;
            } else if chose(&rows, j - n, i) {
                out_intra.set(i, j - n, 1.0);
                degree += 1;
            }
        }
        if degree < rows[i].len() {
            let refill = top_b_indices(inter.row(i), n, |j| inter_ok(j) && out_inter.get(i, j) == 0.0);
            for j in refill.into_iter().take(rows[i].len() - degree) {
                out_inter.set(i, j, 1.0);
            }
        }
    }
    (out_inter, out_intra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest() {
        let mut got = top_b_indices(&[0.9, 0.1, 0.8, 0.2], 2, |_| true);
        got.sort_unstable();
        assert_eq!(got, vec![0, 2]);
    }

    #[test]
    fn ties_go_low() {
        assert_eq!(top_b_indices(&[0.5; 4], 2, |_| true), vec![0, 1]);
    }

    #[test]
    fn row_budget_and_symmetry() {
        let inter = Matrix::from_fn(3, 6, |i, j| ((i * 7 + j * 3) % 10) as f64 / 10.0);
        let intra = Matrix::from_rows(&[vec![0.0, 0.99, 0.95], vec![0.99, 0.0, 0.1], vec![0.95, 0.1, 0.0]]);
        let (a, b) = project_top_b(&inter, &intra, 2, None, true);
        for i in 0..3 {
            let deg: f64 = a.row(i).iter().sum::<f64>() + b.row(i).iter().sum::<f64>();
            assert_eq!(deg, 2.0);
            assert_eq!(b.get(i, i), 0.0);
            for k in 0..3 {
                assert_eq!(b.get(i, k), b.get(k, i));
            }
        }
        assert_eq!(b.get(0, 1), 1.0);
    }

    #[test]
    fn one_sided_intra_is_refilled() {
        // Row 0 wants injected node 1, row 1 prefers original nodes.
        let inter = Matrix::from_rows(&[vec![0.5, 0.4, 0.3], vec![0.9, 0.8, 0.7]]);
        let intra = Matrix::from_rows(&[vec![0.0, 0.95], vec![0.2, 0.0]]);
        let (a, b) = project_top_b(&inter, &intra, 2, None, true);
        assert_eq!(b, Matrix::zeros(2, 2));
        assert_eq!(a.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(a.row(1), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_and_clamp() {
        let inter = Matrix::from_rows(&[vec![0.9, 0.8, 0.7, 0.6]]);
        let intra = Matrix::zeros(1, 1);
        let (a, _) = project_top_b(&inter, &intra, 2, Some(&[false, true, false, true]), false);
        assert_eq!(a.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let (a, _) = project_top_b(&inter, &intra, 10, None, true);
        assert_eq!(a.row(0).iter().sum::<f64>(), 4.0);
    }
}
