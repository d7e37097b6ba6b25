//! Linear regression from complexity profiles to performance, with
//! repeated-split cross-validation against a constant-mean baseline.

use crate::error::{FcxError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Accuracy,
    TaskLoss,
}

/// Linear model over a profile vector: reliable weights, unreliable
/// weights, and a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// α_i, one per depth (reliable increments).
    pub alpha: Vec<f64>,
    /// β_i, one per depth (unreliable increments).
    pub beta: Vec<f64>,
    pub bias: f64,
    pub target: TargetKind,
    /// True when the ridge fallback engaged on rank deficiency.
    pub ridge_engaged: bool,
}

impl RegressionModel {
    pub fn predict(&self, profile: &[f64]) -> f64 {
        let d = self.alpha.len();
        let mut out = self.bias;
        for i in 0..d {
            out += self.alpha[i] * profile[i] + self.beta[i] * profile[d + i];
        }
        out
    }
}

/// Gaussian elimination with partial pivoting; `None` when the pivot
/// collapses (rank deficiency).
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, d: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r * d + col].abs() > a[piv * d + col].abs() {
                piv = r;
            }
        }
        if a[piv * d + col].abs() < 1e-12 * scale {
            return None;
        }
        for j in 0..d {
            a.swap(col * d + j, piv * d + j);
        }
        b.swap(col, piv);
        let diag = a[col * d + col];
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = a[r * d + col] / diag;
            if f == 0.0 {
                continue;
            }
            for j in 0..d {
                a[r * d + j] -= f * a[col * d + j];
            }
            b[r] -= f * b[col];
        }
    }
    Some((0..d).map(|i| b[i] / a[i * d + i]).collect())
}

/// Ordinary least squares via normal equations; falls back to ridge
/// (λ = 1e-8) when the design matrix is rank deficient. Errors with
/// `Underdetermined` when there are fewer samples than unknowns, unless
/// `allow_ridge` forces the regularized fit.
pub fn fit_regressor(
    profiles: &[Vec<f64>],
    targets: &[f64],
    target_kind: TargetKind,
    allow_ridge: bool,
) -> Result<RegressionModel> {
    if profiles.is_empty() {
        return Err(FcxError::EmptyInput("no profiles to fit"));
    }
    if profiles.len() != targets.len() {
        return Err(FcxError::ShapeMismatch {
            expected: vec![profiles.len()],
            got: vec![targets.len()],
        });
    }
    let p = profiles[0].len();
    if p == 0 || p % 2 != 0 {
        return Err(FcxError::InvalidShape(format!(
            "profile length must be even and positive, got {p}"
        )));
    }
    for row in profiles {
        if row.len() != p {
            return Err(FcxError::ShapeMismatch { expected: vec![p], got: vec![row.len()] });
        }
    }
    let unknowns = p + 1;
    if profiles.len() < unknowns && !allow_ridge {
        return Err(FcxError::Underdetermined { samples: profiles.len(), unknowns });
    }

    let d = unknowns;
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    for (row, &y) in profiles.iter().zip(targets) {
        let mut x = row.clone();
        x.push(1.0);
        for a in 0..d {
            for b in 0..d {
                xtx[a * d + b] += x[a] * x[b];
            }
            xty[a] += x[a] * y;
        }
    }

    let (solution, ridge_engaged) = match if allow_ridge {
        None
    } else {
        solve_dense(xtx.clone(), xty.clone(), d)
    } {
        Some(sol) => (sol, false),
        None => {
            let lambda = 1e-8;
            let mut ridged = xtx;
            for i in 0..d {
                ridged[i * d + i] += lambda;
            }
            let sol = solve_dense(ridged, xty, d).ok_or_else(|| {
                FcxError::DegenerateFeature("ridge-regularized system still singular".into())
            })?;
            (sol, true)
        }
    };
    let half = p / 2;
    Ok(RegressionModel {
        alpha: solution[..half].to_vec(),
        beta: solution[half..p].to_vec(),
        bias: solution[p],
        target: target_kind,
        ridge_engaged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub per_repeat_mae: Vec<f64>,
    pub per_repeat_baseline_mae: Vec<f64>,
    pub mean_mae: f64,
    pub median_mae: f64,
    pub mean_baseline_mae: f64,
    pub median_baseline_mae: f64,
    pub repeats: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Repeated random-split cross-validation. Each repeat samples a
/// permutation (pure function of `seed`), fits on the first `train_k`
/// profiles, and scores MAE on the next `test_k`, alongside the
/// constant-mean predictor trained on the same split.
pub fn cross_validate(
    profiles: &[Vec<f64>],
    targets: &[f64],
    target_kind: TargetKind,
    train_k: usize,
    test_k: usize,
    repeats: usize,
    seed: u64,
) -> Result<CrossValidationReport> {
    let n = profiles.len();
    if train_k == 0 || test_k == 0 || train_k + test_k > n {
        return Err(FcxError::InvalidSplit(format!(
            "train_k {train_k} + test_k {test_k} must fit in population {n}"
        )));
    }
    if repeats == 0 {
        return Err(FcxError::InvalidSplit("repeats must be >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut maes = Vec::with_capacity(repeats);
    let mut base_maes = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        order.shuffle(&mut rng);
        let train_idx = &order[..train_k];
        let test_idx = &order[train_k..train_k + test_k];
        let train_p: Vec<Vec<f64>> = train_idx.iter().map(|&i| profiles[i].clone()).collect();
        let train_t: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
        let model = fit_regressor(&train_p, &train_t, target_kind, true)?;
        let mean_t: f64 = train_t.iter().sum::<f64>() / train_t.len() as f64;
        let mut mae = 0.0;
        let mut base = 0.0;
        for &i in test_idx {
            mae += (model.predict(&profiles[i]) - targets[i]).abs();
            base += (mean_t - targets[i]).abs();
        }
        maes.push(mae / test_k as f64);
        base_maes.push(base / test_k as f64);
    }
    let mean_mae = maes.iter().sum::<f64>() / repeats as f64;
    let mean_base = base_maes.iter().sum::<f64>() / repeats as f64;
    let median_mae = median(&mut maes.clone());
    let median_base = median(&mut base_maes.clone());
    Ok(CrossValidationReport {
        per_repeat_mae: maes,
        per_repeat_baseline_mae: base_maes,
        mean_mae,
        median_mae,
        mean_baseline_mae: mean_base,
        median_baseline_mae: median_base,
        repeats,
    })
}
