use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solution of `rows · beta ≈ targets`.
///
/// Solved through the eigen-decomposition of the (small) Gram matrix, with
/// eigen-directions below a relative cutoff discarded. Columns are rescaled to
/// unit max-magnitude first so mixed units do not swamp the cutoff.
pub(crate) fn solve(rows: &[Vec<f64>], targets: &[f64]) -> Option<Vec<f64>> {
    let m = rows.len();
    let n = rows.first()?.len();
    if n == 0 || targets.len() != m {
        return None;
    }
    let mut scale = vec![0.0f64; n];
    for r in rows {
        for (s, v) in scale.iter_mut().zip(r) {
            *s = s.max(v.abs());
        }
    }
    for s in &mut scale {
        if *s == 0.0 || !s.is_finite() {
            *s = 1.0;
        }
    }
    let a = DMatrix::from_fn(m, n, |i, j| rows[i][j] / scale[j]);
    let b = DVector::from_column_slice(targets);
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * b;
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if top == 0.0 {
        return Some(vec![0.0; n]);
    }
    let cutoff = top * 1e-13 * n as f64;
    let mut beta = DVector::<f64>::zeros(n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.eigenvectors.column(k);
            beta += v * (v.dot(&rhs) / lambda);
        }
    }
    let out: Vec<f64> = beta.iter().zip(&scale).map(|(b, s)| b / s).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_system_gets_min_norm_solution() {
        let rows: Vec<Vec<f64>> = (0..17).map(|_| vec![1.0; 4]).collect();
        let beta = solve(&rows, &[1.0; 17]).unwrap();
        for b in beta {
            assert!((b - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn full_rank_system_is_exact() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let beta = solve(&rows, &[1.0, 3.0, 5.0]).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
    }
}
