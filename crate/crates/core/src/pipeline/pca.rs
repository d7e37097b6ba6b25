//! Two-component PCA of profile vectors via power iteration with deflation.

use crate::error::{FcxError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca2d {
    /// Row-wise 2-d coordinates, one per input profile.
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// Set when the covariance is (near-)degenerate and the second
    /// component is zeroed.
    pub degenerate: bool,
}

fn matvec(a: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * v[j];
        }
        out[i] = acc;
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Leading eigenpair of a symmetric matrix by power iteration. The start
/// vector is a fixed ramp, so the result is deterministic.
fn power_iteration(a: &[f64], d: usize, tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    normalize(&mut v);
    for _ in 0..max_iter {
        let mut w = matvec(a, d, &v);
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return (w, 0.0);
        }
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let delta_neg: f64 = w.iter().zip(&v).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        v = w;
        if delta.min(delta_neg) < tol {
            break;
        }
    }
    // Rayleigh quotient gives the signed eigenvalue
    let av = matvec(a, d, &v);
    let rq: f64 = av.iter().zip(&v).map(|(a, b)| a * b).sum();
    (v, rq)
}

/// Mean-centers the profiles and projects onto the top-2 eigenvectors of
/// the sample covariance. Sign convention: the largest-magnitude coordinate
/// of each component is positive.
pub fn pca2d(profiles: &[Vec<f64>]) -> Result<Pca2d> {
    let n = profiles.len();
    if n < 3 {
        return Err(FcxError::EmptyInput("pca2d needs at least 3 profiles"));
    }
    let d = profiles[0].len();
    for p in profiles {
        if p.len() != d {
            return Err(FcxError::ShapeMismatch { expected: vec![d], got: vec![p.len()] });
        }
    }
    let mut mean = vec![0.0; d];
    for p in profiles {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // sample covariance
    let mut cov = vec![0.0; d * d];
    for p in profiles {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 1e-300 {
        // isotropic duplicates: all coordinates zero
        return Ok(Pca2d {
            coords: vec![[0.0, 0.0]; n],
            explained: [0.0, 0.0],
            components: [vec![0.0; d], vec![0.0; d]],
            mean,
            degenerate: true,
        });
    }

    let tol = 1e-10;
    let (mut v1, l1) = power_iteration(&cov, d, tol, 10_000);
    fix_sign(&mut v1);
    // deflate and repeat
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2_raw) = power_iteration(&deflated, d, tol, 10_000);
    let mut degenerate = false;
    let l2 = if l2_raw <= tol * l1.max(1.0) {
        degenerate = true;
        v2 = vec![0.0; d];
        0.0
    } else {
        fix_sign(&mut v2);
        l2_raw
    };

    let coords: Vec<[f64; 2]> = profiles
        .iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            let x: f64 = c.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let y: f64 = c.iter().zip(&v2).map(|(a, b)| a * b).sum();
            [x, y]
        })
        .collect();
    Ok(Pca2d {
        coords,
        explained: [l1 / trace, l2 / trace],
        components: [v1, v2],
        mean,
        degenerate,
    })
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn exact_plane_explains_everything() {
        // points on a 2-d plane inside 8-d space
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
        let profiles: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                (0..8).map(|i| a * u[i] + b * w[i] + 3.0).collect()
            })
            .collect();
        let p = pca2d(&profiles).unwrap();
        assert!(
            (p.explained[0] + p.explained[1] - 1.0).abs() < 1e-8,
            "explained {:?}",
            p.explained
        );
        assert!(!p.degenerate);
    }

    #[test]
    fn duplicates_give_zero_coordinates() {
        let profiles = vec![vec![1.0, 2.0, 3.0]; 5];
        let p = pca2d(&profiles).unwrap();
        assert!(p.degenerate);
        for c in &p.coords {
            assert_eq!(*c, [0.0, 0.0]);
        }
    }

    #[test]
    fn sign_convention_fixed() {
        let profiles = vec![
            vec![1.0, 0.0],
            vec![2.0, 0.1],
            vec![3.0, -0.1],
            vec![4.0, 0.0],
        ];
        let p = pca2d(&profiles).unwrap();
        let c0 = &p.components[0];
        let best = if c0[0].abs() > c0[1].abs() { c0[0] } else { c0[1] };
        assert!(best > 0.0);
    }

    /// Dense Jacobi eigensolver as an independent oracle.
    fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..d {
                for j in i + 1..d {
                    off += a[i * d + j] * a[i * d + j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    if a[p * d + q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * a[p * d + q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k * d + p];
                        let akq = a[k * d + q];
                        a[k * d + p] = c * akp - s * akq;
                        a[k * d + q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p * d + k];
                        let aqk = a[q * d + k];
                        a[p * d + k] = c * apk - s * aqk;
                        a[q * d + k] = s * apk + c * aqk;
                    }
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let eigvals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
        (eigvals, v)
    }

    #[test]
    fn matches_dense_eigendecomposition_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let d = 8;
        let n = 30;
        let profiles: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let p = pca2d(&profiles).unwrap();

        // build the covariance the same way and run the oracle
        let mut mean = vec![0.0; d];
        for row in &profiles {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for row in &profiles {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j] / (n - 1) as f64;
                }
            }
        }
        let (eigvals, eigvecs) = jacobi_eigen(cov.clone(), d);
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));
        let trace: f64 = eigvals.iter().sum();
        assert!((p.explained[0] - eigvals[idx[0]] / trace).abs() < 1e-6);
        assert!((p.explained[1] - eigvals[idx[1]] / trace).abs() < 1e-6);
        for comp in 0..2 {
            let oracle: Vec<f64> = (0..d).map(|i| eigvecs[i * d + idx[comp]]).collect();
            let dot: f64 =
                oracle.iter().zip(&p.components[comp]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() > 1.0 - 1e-6, "component {comp} misaligned: |dot| {}", dot.abs());
        }
    }
}
