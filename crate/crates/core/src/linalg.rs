//! Small dense helpers generic over [`Scalar`].

use crate::Scalar;

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen<T: Scalar>(matrix: &[T], n: usize) -> (Vec<T>, Vec<Vec<T>>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let scale = a.iter().map(|x| *x * *x).sum::<T>().sqrt();
    let tiny = T::epsilon() * T::epsilon() * scale.max(T::min_positive_value());
    for _sweep in 0..100 {
        let off = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<T>()
            .sqrt();
        if off <= T::epsilon() * scale || off <= tiny {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tiny {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..n).map(|i| v[i * n + k]).collect())
        .collect();
    (values, vectors)
}

/// Orthonormalizes `vectors` in place by two passes of modified Gram-Schmidt,
/// dropping any that become (numerically) dependent. Returns the indices kept.
pub fn orthonormalize<T: Scalar>(vectors: &mut Vec<Vec<T>>) -> Vec<usize> {
    let mut out: Vec<Vec<T>> = Vec::with_capacity(vectors.len());
    let mut kept = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.drain(..).enumerate() {
        let start = crate::scalar::norm(&v);
        let mut v = v;
        for _ in 0..2 {
            for u in &out {
                let d = crate::scalar::dot(u, &v);
                for (x, &y) in v.iter_mut().zip(u) {
                    *x -= d * y;
                }
            }
        }
        let nv = crate::scalar::norm(&v);
        if nv > T::of(1e-8) * start.max(T::min_positive_value()) && nv > T::zero() {
            v.iter_mut().for_each(|x| *x /= nv);
            out.push(v);
            kept.push(i);
        }
    }
    *vectors = out;
    kept
}

/// Extends an orthonormal set to `k` vectors in dimension `d` with standard basis directions.
pub fn complete_basis<T: Scalar>(vectors: &mut Vec<Vec<T>>, d: usize, k: usize) {
    let mut axis = 0;
    while vectors.len() < k && axis < d {
        let mut e = vec![T::zero(); d];
        e[axis] = T::one();
        axis += 1;
        for _ in 0..2 {
            for u in vectors.iter() {
                let dd = crate::scalar::dot(u, &e);
                for (x, &y) in e.iter_mut().zip(u) {
                    *x -= dd * y;
                }
            }
        }
        let n = crate::scalar::norm(&e);
        if n > T::of(1e-6) {
            e.iter_mut().for_each(|x| *x /= n);
            vectors.push(e);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reconstructs_matrix() {
        let n = 6;
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = ((i * 7 + j * 3) % 5) as f64 + ((j * 7 + i * 3) % 5) as f64 + if i == j { 4.0 } else { 0.0 };
            }
        }
        let (vals, vecs) = symmetric_eigen(&m, n);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| vals[k] * vecs[k][i] * vecs[k][j]).sum();
                assert!((r - m[i * n + j]).abs() < 1e-10);
                let o: f64 = (0..n).map(|k| vecs[i][k] * vecs[j][k]).sum();
                assert!((o - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn basis_completion() {
        let mut v = vec![vec![1.0f64, 1.0, 0.0]];
        orthonormalize(&mut v);
        complete_basis(&mut v, 3, 3);
        assert_eq!(v.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let d = crate::scalar::dot(&v[i], &v[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
