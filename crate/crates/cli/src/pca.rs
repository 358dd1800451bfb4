//! Top principal components by cyclic Jacobi rotation of the covariance.

use ndarray::{Array1, Array2, Axis};

/// Eigen-decomposition of a symmetric matrix; eigenvalues descending,
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Scores of the rows of `x` on the first `k` principal components. Each
/// component's sign is fixed so its largest-magnitude loading is positive.
pub fn project(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let k = k.min(d);
    if n == 0 {
        return Array2::zeros((0, k));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let (_, vecs) = symmetric_eigen(&cov);
    let mut basis = vecs.slice(ndarray::s![.., ..k]).to_owned();
    for mut col in basis.columns_mut() {
        let lead = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if lead < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    centered.dot(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_matrix() {
        let (vals, vecs) = symmetric_eigen(&array![[1.0, 0.0], [0.0, 3.0]]);
        assert_eq!(vals.to_vec(), vec![3.0, 1.0]);
        assert_eq!(vecs[[1, 0]].abs(), 1.0);
    }

    #[test]
    fn two_by_two() {
        // eigenvalues 3 and 1, vectors (1,1)/√2 and (1,-1)/√2
        let (vals, vecs) = symmetric_eigen(&array![[2.0, 1.0], [1.0, 2.0]]);
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        assert!((vecs[[0, 0]].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((vecs[[0, 0]] - vecs[[1, 0]]).abs() < 1e-12);
    }

    #[test]
    fn points_on_a_line() {
        let x = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let p = project(&x, 2);
        let unit = 5.0f64.sqrt();
        for (i, row) in p.rows().into_iter().enumerate() {
            assert!((row[0] - (i as f64 - 1.5) * unit).abs() < 1e-12);
            assert!(row[1].abs() < 1e-12);
        }
    }
}
