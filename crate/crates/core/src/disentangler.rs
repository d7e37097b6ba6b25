//! Depth-indexed distillation of a teacher feature and its telescoped
//! decomposition into complexity-ordered components.
//!
//! A family of disentangler nets of ascending ReLU depth is trained
//! independently to mimic the (optionally per-channel standardized) teacher
//! feature with an MSE loss. Components are consecutive differences of the
//! family outputs; whatever the deepest net leaves unexplained is the
//! residual.
//!
//! Additive identities are anchored on a canonical teacher feature: the
//! stored feature is the left-to-right sum of components plus residual,
//! which differs from the freshly computed feature by at most one rounding
//! per element (see `tensor::exact_split`). All downstream statistics use
//! the stored tensors, so telescoping is exact to the bit.

use crate::error::{FcxError, Result};
use crate::tensor::{exact_split, variance_of_batch, Tensor};
use crate::train::{fit, TrainConfig, TrainReport, TrainTarget};
use crate::zoo::{DisentanglerFamilySpec, Network};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Per-channel affine normalization of a feature tensor, fitted on the
/// training set. Emulates placing a batch-norm in front of the target
/// feature; components are reported in standardized space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits channel statistics over the batch and spatial axes of
    /// `[n, c, ...]` features.
    pub fn fit(features: &Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() < 2 {
            return Err(FcxError::InvalidShape(format!(
                "standardizer wants [n, c, ...], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in 0..inner {
                    mean[ci] += features.data()[base + i];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in 0..inner {
                    let d = features.data()[base + i] - mean[ci];
                    std[ci] += d * d;
                }
            }
        }
        for v in std.iter_mut() {
            *v = (*v / count).sqrt().max(1e-12);
        }
        Ok(Standardizer { mean, std })
    }

    fn map(&self, features: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = features.shape();
        let c = s[1];
        if c != self.mean.len() {
            return Err(FcxError::ShapeMismatch {
                expected: vec![self.mean.len()],
                got: vec![c],
            });
        }
        let inner: usize = s[2..].iter().product();
        let mut out = features.data().to_vec();
        for ni in 0..s[0] {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for v in &mut out[base..base + inner] {
                    *v = f(*v, self.mean[ci], self.std[ci]);
                }
            }
        }
        Tensor::from_vec(s, out)
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        self.map(features, |v, m, s| (v - m) / s)
    }

    /// Back to raw teacher-feature space: `v * std + mean`.
    pub fn invert(&self, features: &Tensor) -> Result<Tensor> {
        self.map(features, |v, m, s| v * s + m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// Standardize the target feature per channel before the MSE.
    pub standardize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { train: TrainConfig::default(), standardize: true }
    }
}

/// Trained disentangler family, frozen, with the standardizer it was
/// trained against and per-depth loss curves.
#[derive(Debug, Clone)]
pub struct DistilledFamily {
    pub spec: DisentanglerFamilySpec,
    pub depths: Vec<usize>,
    pub nets: Vec<Network>,
    pub standardizer: Option<Standardizer>,
    pub reports: Vec<TrainReport>,
}

impl DistilledFamily {
    /// Teacher feature mapped into the space the family was trained in.
    pub fn standardized(&self, features: &Tensor) -> Result<Tensor> {
        match &self.standardizer {
            Some(s) => s.apply(features),
            None => Ok(features.clone()),
        }
    }

    /// Standardized-space tensor mapped back to raw teacher space.
    pub fn unstandardized(&self, features: &Tensor) -> Result<Tensor> {
        match &self.standardizer {
            Some(s) => s.invert(features),
            None => Ok(features.clone()),
        }
    }
}

/// Telescoped decomposition of a dataset's teacher features.
///
/// Invariants: `components[0] = phi[0]`, `components[i] = phi[i] -
/// phi[i-1]`, and the left-to-right sum of components plus `residual` equals
/// `teacher_feature` bit-exactly.
#[derive(Debug, Clone)]
pub struct FeatureDecomposition {
    pub depths: Vec<usize>,
    /// `phi[i]` stacks Φ^(l_i)(x) over the dataset, standardized space.
    pub phi: Vec<Tensor>,
    pub components: Vec<Tensor>,
    pub residual: Tensor,
    /// Canonical teacher feature (standardized space).
    pub teacher_feature: Tensor,
    pub dataset_id: String,
    /// Largest |canonical - computed| teacher-feature element.
    pub canonicalization_err: f64,
    /// Standardizer the family was trained with; all stored tensors live in
    /// this space.
    pub standardizer: Option<Standardizer>,
}

impl FeatureDecomposition {
    pub fn n_samples(&self) -> usize {
        self.teacher_feature.shape()[0]
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

/// Per-component variance statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentStats {
    pub depths: Vec<usize>,
    pub var_components: Vec<f64>,
    /// ρ_c per component: Var[c] / Var[f].
    pub rho_c: Vec<f64>,
    pub var_f: f64,
    pub residual_share: f64,
}

fn derive_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Trains one disentangler per depth in the family against the frozen
/// teacher's tap feature on `inputs`. Depths train concurrently; each net
/// gets a fresh seed-derived initialization.
pub fn distill(
    teacher: &Network,
    family: &DisentanglerFamilySpec,
    inputs: &Tensor,
    cfg: &DistillConfig,
) -> Result<DistilledFamily> {
    if !teacher.is_frozen() {
        return Err(FcxError::PhaseOrderError("distill requires a frozen teacher"));
    }
    family.validate()?;
    if inputs.shape()[0] == 0 {
        return Err(FcxError::EmptyInput("distillation dataset is empty"));
    }
    let tap_shape = teacher.spec.tap_shape()?;
    if family.output_shape != tap_shape {
        return Err(FcxError::ShapeMismatch {
            expected: tap_shape,
            got: family.output_shape.clone(),
        });
    }

    let features = teacher.forward_to_feature(inputs)?;
    let standardizer = if cfg.standardize { Some(Standardizer::fit(&features)?) } else { None };
    let target = match &standardizer {
        Some(s) => s.apply(&features)?,
        None => features,
    };

    let seeds = derive_seeds(cfg.train.seed, 2 * family.m_values.len());
    let results: Result<Vec<(Network, TrainReport)>> = family
        .m_values
        .par_iter()
        .enumerate()
        .map(|(i, &m)| {
            let mut net = family.build(m, seeds[2 * i])?;
            let mut tcfg = cfg.train.clone();
            tcfg.seed = seeds[2 * i + 1];
            let report = fit(&mut net, inputs, &TrainTarget::Tensors(&target), &tcfg)?;
            net.freeze();
            Ok((net, report))
        })
        .collect();
    let results = results?;
    let (nets, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(DistilledFamily {
        spec: family.clone(),
        depths: family.depths(),
        nets,
        standardizer,
        reports,
    })
}

/// Runs the frozen family and telescopes its outputs into components plus
/// residual. The stored teacher feature is the canonical reconstruction.
pub fn decompose(
    family: &DistilledFamily,
    teacher: &Network,
    inputs: &Tensor,
    dataset_id: &str,
) -> Result<FeatureDecomposition> {
    let features = teacher.forward_to_feature(inputs)?;
    let f_std = family.standardized(&features)?;

    let phi: Result<Vec<Tensor>> = family.nets.par_iter().map(|net| net.forward(inputs)).collect();
    let phi = phi?;

    let mut components = Vec::with_capacity(phi.len());
    components.push(phi[0].clone());
    for i in 1..phi.len() {
        components.push(phi[i].sub(&phi[i - 1])?);
    }
    // Left-to-right partial sum; fixed order makes recomputation bit-stable.
    let mut running = components[0].clone();
    for c in &components[1..] {
        running = running.add(c)?;
    }
    let split = exact_split(&f_std, &running)?;
    Ok(FeatureDecomposition {
        depths: family.depths.clone(),
        phi,
        components,
        residual: split.complement,
        teacher_feature: split.canonical,
        dataset_id: dataset_id.to_string(),
        canonicalization_err: split.canonicalization_err,
        standardizer: family.standardizer.clone(),
    })
}

/// ρ_c per component: variance relative to the teacher feature's variance
/// over the same samples.
pub fn significance(dec: &FeatureDecomposition) -> Result<ComponentStats> {
    if dec.n_samples() < 2 {
        return Err(FcxError::EmptyInput("significance needs at least 2 samples"));
    }
    let var_f = variance_of_batch(&dec.teacher_feature)?;
    if var_f <= 0.0 {
        return Err(FcxError::DegenerateFeature(
            "teacher feature has zero variance over the sample set".into(),
        ));
    }
    let var_components: Result<Vec<f64>> =
        dec.components.iter().map(variance_of_batch).collect();
    let var_components = var_components?;
    let rho_c = var_components.iter().map(|v| v / var_f).collect();
    let residual_share = variance_of_batch(&dec.residual)? / var_f;
    Ok(ComponentStats {
        depths: dec.depths.clone(),
        var_components,
        rho_c,
        var_f,
        residual_share,
    })
}

/// Normalized residual `MSE(Φ^(l), f) / Var[f]` per depth, in the family's
/// training space.
pub fn residual_curve(
    family: &DistilledFamily,
    teacher: &Network,
    inputs: &Tensor,
) -> Result<Vec<(usize, f64)>> {
    let features = teacher.forward_to_feature(inputs)?;
    let f_std = family.standardized(&features)?;
    let var_f = variance_of_batch(&f_std)?;
    if var_f <= 0.0 {
        return Err(FcxError::DegenerateFeature(
            "teacher feature has zero variance over the sample set".into(),
        ));
    }
    let numel_per_sample = (f_std.len() / f_std.shape()[0]) as f64;
    let mut out = Vec::with_capacity(family.nets.len());
    for (net, &depth) in family.nets.iter().zip(&family.depths) {
        let phi = net.forward(inputs)?;
        let mse = crate::ops::mse_forward(&phi, &f_std)?;
        // MSE is per element; Var[f] sums over elements of one sample.
        out.push((depth, mse * numel_per_sample / var_f));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use crate::zoo::build_task_net;

    fn small_family() -> DisentanglerFamilySpec {
        DisentanglerFamilySpec {
            m_values: vec![1],
            width_factor: 1.0,
            base_widths: [8, 12, 16],
            input_shape: vec![1, 8, 8],
            output_shape: vec![4, 4, 4],
        }
    }

    fn linear_teacher(seed: u64) -> Network {
        build_task_net(0, seed, &[1, 8, 8], &[4, 4, 4]).unwrap()
    }

    #[test]
    fn standardizer_roundtrip_and_stats() {
        let f = Tensor::new(&[10, 3, 2, 2], Init::Uniform(-2.0, 5.0), 3).unwrap();
        let s = Standardizer::fit(&f).unwrap();
        let z = s.apply(&f).unwrap();
        // standardized channels have ~zero mean and unit variance
        let inner = 4;
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..10 {
                let base = (ni * 3 + ci) * inner;
                vals.extend_from_slice(&z.data()[base..base + inner]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
        let back = s.invert(&z).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_requires_frozen_teacher() {
        let teacher = crate::zoo::build_teacher(
            crate::zoo::TeacherArch::SmallConv,
            crate::zoo::TeacherHead::Regress,
            &[1, 8, 8],
            4,
            0,
        )
        .unwrap();
        let x = Tensor::zeros(&[4, 1, 8, 8]);
        let family = DisentanglerFamilySpec {
            output_shape: vec![32, 4, 4],
            ..small_family()
        };
        assert!(matches!(
            distill(&teacher, &family, &x, &DistillConfig::default()),
            Err(FcxError::PhaseOrderError(_))
        ));
    }

    #[test]
    fn distill_memorizes_single_repeated_sample() {
        let teacher = linear_teacher(1);
        let one = Tensor::new(&[1, 1, 8, 8], Init::Uniform(-1.0, 1.0), 2).unwrap();
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(one.data());
        }
        let x = Tensor::from_vec(&[8, 1, 8, 8], data).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.max_epochs = 300;
        cfg.train.lr = 3e-3;
        cfg.train.batch_size = 1;
        cfg.train.patience = 50;
        cfg.train.seed = 5;
        // constant target: standardization would divide ~zero stds away, so
        // fit in raw space
        cfg.standardize = false;
        let fam = distill(&teacher, &small_family(), &x, &cfg).unwrap();
        assert!(
            fam.reports[0].final_loss < 1e-6,
            "memorization loss {}",
            fam.reports[0].final_loss
        );
    }

    #[test]
    fn distill_fits_linear_target_over_seeds() {
        // Linear teacher features are representable at any depth; the final
        // train MSE must land far below the feature variance.
        let teacher = linear_teacher(7);
        let x = Tensor::new(&[32, 1, 8, 8], Init::Uniform(-1.0, 1.0), 11).unwrap();
        let mut losses = Vec::new();
        let mut var_f = 0.0;
        for seed in 0..3u64 {
            let mut cfg = DistillConfig::default();
            cfg.train.max_epochs = 300;
            cfg.train.lr = 1e-2;
            cfg.train.batch_size = 4;
            cfg.train.patience = 60;
            cfg.train.seed = seed;
            let fam = distill(&teacher, &small_family(), &x, &cfg).unwrap();
            losses.push(fam.reports[0].final_loss);
            let f_std = fam
                .standardized(&teacher.forward_to_feature(&x).unwrap())
                .unwrap();
            var_f = variance_of_batch(&f_std).unwrap();
        }
        losses.sort_by(f64::total_cmp);
        let median = losses[1];
        assert!(median < 1e-3 * var_f, "median linear-fit loss {losses:?} vs Var[f] {var_f}");
        // stricter sanity check: unexplained variance fraction below 1%
        let numel = 4.0 * 4.0 * 4.0;
        assert!(median * numel / var_f < 1e-2, "normalized residual {}", median * numel / var_f);
    }

    #[test]
    fn distill_is_bit_reproducible() {
        let teacher = linear_teacher(3);
        let x = Tensor::new(&[16, 1, 8, 8], Init::Uniform(-1.0, 1.0), 4).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.max_epochs = 3;
        cfg.train.seed = 9;
        let a = distill(&teacher, &small_family(), &x, &cfg).unwrap();
        let b = distill(&teacher, &small_family(), &x, &cfg).unwrap();
        for (na, nb) in a.nets.iter().zip(&b.nets) {
            for (pa, pb) in na.params().values().zip(nb.params().values()) {
                assert_eq!(pa.data(), pb.data());
            }
        }
    }

    #[test]
    fn decompose_telescopes_exactly() {
        let teacher = linear_teacher(5);
        let x = Tensor::new(&[12, 1, 8, 8], Init::Uniform(-1.0, 1.0), 6).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.max_epochs = 10;
        cfg.train.seed = 2;
        let family = DisentanglerFamilySpec { m_values: vec![1, 2], ..small_family() };
        let fam = distill(&teacher, &family, &x, &cfg).unwrap();
        let dec = decompose(&fam, &teacher, &x, "unit").unwrap();

        assert_eq!(dec.components[0].data(), dec.phi[0].data());
        // c2 telescopes phi
        for i in 0..dec.phi[1].len() {
            assert_eq!(
                dec.components[1].data()[i],
                dec.phi[1].data()[i] - dec.phi[0].data()[i]
            );
        }
        // left-to-right sum + residual reconstructs the stored feature bitwise
        let mut sum = dec.components[0].clone();
        for c in &dec.components[1..] {
            sum = sum.add(c).unwrap();
        }
        let rec = sum.add(&dec.residual).unwrap();
        assert_eq!(rec.data(), dec.teacher_feature.data());
        // and the canonical feature is within an ulp-scale nudge of the
        // computed one
        assert!(dec.canonicalization_err < 1e-12, "{}", dec.canonicalization_err);
    }

    #[test]
    fn significance_hand_case() {
        // two samples, two components, hand-computed ratios
        let c1 = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap(); // Var = 1
        let c2 = Tensor::from_vec(&[2, 1], vec![0.0, 4.0]).unwrap(); // Var = 4
        let residual = Tensor::zeros(&[2, 1]);
        let f = c1.add(&c2).unwrap(); // [0, 6] -> Var = 9
        let dec = FeatureDecomposition {
            depths: vec![4, 7],
            phi: vec![c1.clone(), f.clone()],
            components: vec![c1, c2],
            residual,
            teacher_feature: f,
            dataset_id: "hand".into(),
            canonicalization_err: 0.0,
            standardizer: None,
        };
        let stats = significance(&dec).unwrap();
        assert!((stats.var_f - 9.0).abs() < 1e-12);
        assert!((stats.rho_c[0] - 1.0 / 9.0).abs() < 1e-12);
        assert!((stats.rho_c[1] - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(stats.residual_share, 0.0);
    }

    #[test]
    fn significance_scale_invariant_and_perfect_shallow() {
        let c1 = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.25]).unwrap();
        let zeros = Tensor::zeros(&[3, 2]);
        let dec = FeatureDecomposition {
            depths: vec![4, 7],
            phi: vec![c1.clone(), c1.clone()],
            components: vec![c1.clone(), zeros.clone()],
            residual: zeros.clone(),
            teacher_feature: c1.clone(),
            dataset_id: "x".into(),
            canonicalization_err: 0.0,
            standardizer: None,
        };
        let stats = significance(&dec).unwrap();
        assert!((stats.rho_c[0] - 1.0).abs() < 1e-12);
        assert_eq!(stats.rho_c[1], 0.0);

        // uniform rescaling leaves every rho unchanged
        let s = 3.7;
        let dec2 = FeatureDecomposition {
            depths: vec![4, 7],
            phi: vec![c1.scale(s), c1.scale(s)],
            components: vec![c1.scale(s), zeros.clone()],
            residual: zeros,
            teacher_feature: c1.scale(s),
            dataset_id: "x".into(),
            canonicalization_err: 0.0,
            standardizer: None,
        };
        let stats2 = significance(&dec2).unwrap();
        for (a, b) in stats.rho_c.iter().zip(&stats2.rho_c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn significance_degenerate_feature() {
        let z = Tensor::zeros(&[3, 2]);
        let dec = FeatureDecomposition {
            depths: vec![4],
            phi: vec![z.clone()],
            components: vec![z.clone()],
            residual: z.clone(),
            teacher_feature: z,
            dataset_id: "zero".into(),
            canonicalization_err: 0.0,
            standardizer: None,
        };
        assert!(matches!(significance(&dec), Err(FcxError::DegenerateFeature(_))));
    }

    #[test]
    fn residual_curve_shape_and_perfect_fit() {
        let teacher = linear_teacher(8);
        let x = Tensor::new(&[10, 1, 8, 8], Init::Uniform(-1.0, 1.0), 9).unwrap();
        let mut cfg = DistillConfig::default();
        cfg.train.max_epochs = 2;
        let fam = distill(&teacher, &small_family(), &x, &cfg).unwrap();
        let curve = residual_curve(&fam, &teacher, &x).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].0, 4);
        assert!(curve[0].1 >= 0.0);
    }
}
