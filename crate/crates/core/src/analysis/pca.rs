use nalgebra::{DMatrix, SymmetricEigen};

use super::{check_matrix, AnalysisError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// `[n, 2]`, row-major.
    pub projections: Vec<f64>,
    /// Two orthonormal rows of width `d`.
    pub components: [Vec<f64>; 2],
    /// Sample variances (n - 1 denominator) along each component, descending.
    pub explained_variance: [f64; 2],
    pub mean: Vec<f64>,
}

/// Top-two principal components of row-major `x [n, d]`.
///
/// Diagonalizes whichever of the covariance (`d x d`) or Gram (`n x n`)
/// matrix is smaller.
pub fn pca2(x: &[f64], d: usize) -> Result<Pca2> {
    let n = check_matrix(x, d)?;
    if n < 3 {
        return Err(AnalysisError::TooFewSamples { need: 3, got: n });
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc = DMatrix::from_fn(n, d, |i, j| x[i * d + j] - mean[j]);
    let denom = (n - 1) as f64;

    let (vals, vecs) = if d <= n {
        let eig = SymmetricEigen::new(xc.transpose() * &xc / denom);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        // Gram trick: Xc Xcᵀ u = λ' u  ⇒  v = Xcᵀ u / |Xcᵀ u|, λ = λ' / (n - 1).
        let eig = SymmetricEigen::new(&xc * xc.transpose());
        let v = xc.transpose() * &eig.eigenvectors;
        let mut v = v;
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        (eig.eigenvalues / denom, v)
    };
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let top = vals[order[0]];
    if !(top > 1e-12 * (1.0 + xc.norm_squared() / denom)) {
        return Err(AnalysisError::ZeroVariance);
    }
    let comp = |k: usize| -> Vec<f64> {
        let mut c: Vec<f64> = vecs.column(order[k]).iter().copied().collect();
        // sign convention: largest-magnitude loading is positive
        let big = c.iter().copied().fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    };
    let components = [comp(0), comp(1)];
    let mut projections = Vec::with_capacity(2 * n);
    for i in 0..n {
        for c in &components {
            projections.push((0..d).map(|j| xc[(i, j)] * c[j]).sum());
        }
    }
    let explained_variance = [vals[order[0]].max(0.0), vals[order[1]].max(0.0)];
    Ok(Pca2 {
        projections,
        components,
        explained_variance,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::seed;

    fn gaussian(n: usize, sds: &[f64], s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        let mut out = Vec::with_capacity(n * sds.len());
        for _ in 0..n {
            for &sd in sds {
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(sd * z);
            }
        }
        out
    }

    fn check_structure(x: &[f64], d: usize) {
        let p = pca2(x, d).unwrap();
        let n = x.len() / d;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&p.components[0], &p.components[0]) - 1.0).abs() < 1e-10);
        assert!((dot(&p.components[1], &p.components[1]) - 1.0).abs() < 1e-10);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-10);
        let cov = |a: usize, b: usize| {
            (0..n).map(|i| p.projections[2 * i + a] * p.projections[2 * i + b]).sum::<f64>() / (n - 1) as f64
        };
        assert!((cov(0, 0) - p.explained_variance[0]).abs() < 1e-8);
        assert!((cov(1, 1) - p.explained_variance[1]).abs() < 1e-8);
        assert!(cov(0, 1).abs() < 1e-8);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn anisotropic_gaussian_first_axis() {
        let x = gaussian(400, &[10.0, 3.0, 0.5, 0.5], 1);
        let p = pca2(&x, 4).unwrap();
        assert!(p.components[0][0].abs() > 0.99);
        assert!(p.components[1][1].abs() > 0.99);
        check_structure(&x, 4);
    }

    #[test]
    fn wide_data_uses_gram_path() {
        let mut sds = vec![0.1; 50];
        sds[7] = 5.0;
        sds[20] = 2.0;
        let x = gaussian(20, &sds, 2);
        check_structure(&x, 50);
        let p = pca2(&x, 50).unwrap();
        assert!(p.components[0][7].abs() > 0.99);
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        let basis = [[1.0, 2.0, 0.0, -1.0], [0.0, 1.0, 1.0, 1.0]];
        let offset = [3.0, -1.0, 0.5, 2.0];
        let coef = gaussian(30, &[2.0, 1.0], 3);
        let x: Vec<f64> = coef
            .chunks(2)
            .flat_map(|c| (0..4).map(move |j| offset[j] + c[0] * basis[0][j] + c[1] * basis[1][j]))
            .collect();
        let p = pca2(&x, 4).unwrap();
        for i in 0..30 {
            for j in 0..4 {
                let r = p.mean[j]
                    + p.projections[2 * i] * p.components[0][j]
                    + p.projections[2 * i + 1] * p.components[1][j];
                assert!((r - x[i * 4 + j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn errors() {
        assert_eq!(pca2(&[1.0; 6], 2), Err(AnalysisError::ZeroVariance));
        assert!(matches!(pca2(&[1.0, 2.0], 1), Err(AnalysisError::TooFewSamples { .. })));
    }
}
