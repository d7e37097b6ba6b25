//! Experiment runners: task complexity, disentangler robustness, sample-size
//! effects, attribution analysis, feature substitution, compression and
//! distillation comparison, and the complexity-profile regression study.

use crate::attribution::{attribute, overfit_game, train_loss_game, AttributionReport, TaskTargets};
use crate::disentangler::{decompose, distill, significance, ComponentStats, DistillConfig, DistilledFamily};
use crate::error::{FcxError, Result};
use crate::pipeline::compress::{build_regression_teacher, compress_model, distill_model, CompressConfig, DistillModelConfig};
use crate::pipeline::dataset::{gen_dataset, Dataset, DatasetKind, DatasetSpec, Targets};
use crate::pipeline::pca::{pca2d, Pca2d};
use crate::pipeline::profile::{complexity_profile, ComplexityProfile};
use crate::pipeline::regress::{cross_validate, fit_regressor, CrossValidationReport, RegressionModel, TargetKind};
use crate::reliability::{build_reliability_stack, extract_split, reliability_rho, train_phase_g, train_phase_h, ReliabilityConfig};
use crate::tensor::{variance_of_batch, Tensor};
use crate::train::{fit, TrainConfig, TrainTarget};
use crate::zoo::{build_teacher, DisentanglerFamilySpec, Network, TeacherArch, TeacherHead};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.next_u64()
}

/// Mean-weighted complexity order: `Σ l_i ρ_i / Σ ρ_i`.
pub fn weighted_complexity_order(depths: &[usize], rho: &[f64]) -> f64 {
    let total: f64 = rho.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    depths.iter().zip(rho).map(|(&d, &r)| d as f64 * r).sum::<f64>() / total
}

fn median_f64(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Classification accuracy by argmax.
pub fn classify_accuracy(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = net.forward(inputs)?;
    Ok(accuracy_from_logits(&logits, labels))
}

fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut hits = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Exp. 1: task complexity vs feature complexity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    pub task_n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub input_shape: Vec<usize>,
    pub task_output_shape: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// ReLU depth of the regression teacher trained to reconstruct the task
    /// net's output.
    pub target_depth: usize,
    pub target_widths: [usize; 3],
    pub target_train: TrainConfig,
    pub family_m_values: Vec<usize>,
    pub family_widths: [usize; 3],
    pub width_factor: f64,
    pub distill: DistillConfig,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Exp1Config {
            task_n_values: vec![0, 2, 8],
            seeds: vec![0, 1, 2],
            input_shape: vec![1, 16, 16],
            task_output_shape: vec![8, 4, 4],
            n_train: 96,
            n_test: 32,
            data_seed: 11,
            target_depth: 7,
            target_widths: [16, 32, 64],
            target_train: TrainConfig { max_epochs: 50, ..Default::default() },
            family_m_values: vec![1, 2, 4],
            family_widths: [16, 32, 64],
            width_factor: 1.0,
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp1SeedResult {
    pub seed: u64,
    pub rho_c: Vec<f64>,
    pub residual_share: f64,
    pub weighted_order: f64,
    pub target_loss: (f64, f64),
    pub residual_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp1TaskResult {
    pub task_n: usize,
    pub depths: Vec<usize>,
    pub per_seed: Vec<Exp1SeedResult>,
    pub median_weighted_order: f64,
    pub median_rho_c: Vec<f64>,
    /// Median over seeds of the normalized residual MSE at each depth.
    pub median_residual_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp1Report {
    pub tasks: Vec<Exp1TaskResult>,
}

/// Trains one regression teacher against a task net and disentangles its
/// output feature.
fn exp1_single(cfg: &Exp1Config, task_n: usize, seed: u64) -> Result<Exp1SeedResult> {
    let spec = DatasetSpec {
        kind: DatasetKind::TaskN {
            n: task_n,
            task_seed: derive_seed(cfg.data_seed, task_n as u64 + 1),
            output_shape: cfg.task_output_shape.clone(),
        },
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        input_shape: cfg.input_shape.clone(),
        seed: derive_seed(cfg.data_seed, 7919 + task_n as u64),
    };
    let data = gen_dataset(&spec)?;
    let Targets::Tensors { train: train_y, .. } = &data.targets else {
        unreachable!("task_n produces tensor targets")
    };

    let mut target_net = build_regression_teacher(
        cfg.target_depth,
        cfg.target_widths,
        &cfg.input_shape,
        &cfg.task_output_shape,
        derive_seed(seed, 100 + task_n as u64),
    )?;
    let mut tcfg = cfg.target_train.clone();
    tcfg.seed = derive_seed(seed, 200 + task_n as u64);
    let report = fit(&mut target_net, &data.train_x, &TrainTarget::Tensors(train_y), &tcfg)?;
    target_net.freeze();

    let family = DisentanglerFamilySpec {
        m_values: cfg.family_m_values.clone(),
        width_factor: cfg.width_factor,
        base_widths: cfg.family_widths,
        input_shape: cfg.input_shape.clone(),
        output_shape: cfg.task_output_shape.clone(),
    };
    let mut dcfg = cfg.distill.clone();
    dcfg.train.seed = derive_seed(seed, 300 + task_n as u64);
    let fam = distill(&target_net, &family, &data.train_x, &dcfg)?;
    let dec = decompose(&fam, &target_net, &data.train_x, &format!("task{task_n}"))?;
    let stats = significance(&dec)?;
    let curve = crate::disentangler::residual_curve(&fam, &target_net, &data.train_x)?;
    Ok(Exp1SeedResult {
        seed,
        weighted_order: weighted_complexity_order(&stats.depths, &stats.rho_c),
        rho_c: stats.rho_c,
        residual_share: stats.residual_share,
        target_loss: (report.init_loss, report.final_loss),
        residual_curve: curve,
    })
}

pub fn run_task_complexity_experiment(cfg: &Exp1Config) -> Result<Exp1Report> {
    let jobs: Vec<(usize, u64)> = cfg
        .task_n_values
        .iter()
        .flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Result<Vec<((usize, u64), Exp1SeedResult)>> = jobs
        .par_iter()
        .map(|&(n, s)| Ok(((n, s), exp1_single(cfg, n, s)?)))
        .collect();
    let results = results?;
    let depths: Vec<usize> = cfg.family_m_values.iter().map(|m| 3 * m + 1).collect();
    let mut tasks = Vec::new();
    for &n in &cfg.task_n_values {
        let per_seed: Vec<Exp1SeedResult> = results
            .iter()
            .filter(|((tn, _), _)| *tn == n)
            .map(|(_, r)| r.clone())
            .collect();
        let orders: Vec<f64> = per_seed.iter().map(|r| r.weighted_order).collect();
        let median_rho: Vec<f64> = (0..depths.len())
            .map(|i| median_f64(&per_seed.iter().map(|r| r.rho_c[i]).collect::<Vec<_>>()))
            .collect();
        let median_curve: Vec<(usize, f64)> = (0..depths.len())
            .map(|i| {
                let vals: Vec<f64> =
                    per_seed.iter().map(|r| r.residual_curve[i].1).collect();
                (depths[i], median_f64(&vals))
            })
            .collect();
        tasks.push(Exp1TaskResult {
            task_n: n,
            depths: depths.clone(),
            per_seed,
            median_weighted_order: median_f64(&orders),
            median_rho_c: median_rho,
            median_residual_curve: median_curve,
        });
    }
    Ok(Exp1Report { tasks })
}

// ---------------------------------------------------------------------------
// Disentangler robustness (Fig. 5 analog)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    pub width_factors: Vec<f64>,
    pub base: Exp1Config,
    pub task_n: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            width_factors: vec![0.5, 1.0, 2.0],
            base: Exp1Config::default(),
            task_n: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub width_factors: Vec<f64>,
    pub depths: Vec<usize>,
    /// Normalized ρ_c distribution per width factor.
    pub distributions: Vec<Vec<f64>>,
    pub max_pairwise_l1: f64,
}

/// Distills the same teacher with differently sized disentangler nets and
/// compares the normalized component distributions.
pub fn run_disentangler_robustness(cfg: &RobustnessConfig) -> Result<RobustnessReport> {
    let base = &cfg.base;
    let spec = DatasetSpec {
        kind: DatasetKind::TaskN {
            n: cfg.task_n,
            task_seed: derive_seed(base.data_seed, cfg.task_n as u64 + 1),
            output_shape: base.task_output_shape.clone(),
        },
        n_train: base.n_train,
        n_test: base.n_test,
        input_shape: base.input_shape.clone(),
        seed: derive_seed(base.data_seed, 7919 + cfg.task_n as u64),
    };
    let data = gen_dataset(&spec)?;
    let Targets::Tensors { train: train_y, .. } = &data.targets else { unreachable!() };
    let mut target_net = build_regression_teacher(
        base.target_depth,
        base.target_widths,
        &base.input_shape,
        &base.task_output_shape,
        derive_seed(cfg.seed, 17),
    )?;
    let mut tcfg = base.target_train.clone();
    tcfg.seed = derive_seed(cfg.seed, 18);
    fit(&mut target_net, &data.train_x, &TrainTarget::Tensors(train_y), &tcfg)?;
    target_net.freeze();

    let distributions: Result<Vec<Vec<f64>>> = cfg
        .width_factors
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let family = DisentanglerFamilySpec {
                m_values: base.family_m_values.clone(),
                width_factor: r,
                base_widths: base.family_widths,
                input_shape: base.input_shape.clone(),
                output_shape: base.task_output_shape.clone(),
            };
            let mut dcfg = base.distill.clone();
            dcfg.train.seed = derive_seed(cfg.seed, 300 + i as u64);
            let fam = distill(&target_net, &family, &data.train_x, &dcfg)?;
            let dec = decompose(&fam, &target_net, &data.train_x, "robustness")?;
            let stats = significance(&dec)?;
            let total: f64 = stats.rho_c.iter().sum();
            Ok(stats.rho_c.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect())
        })
        .collect();
    let distributions = distributions?;
    let mut max_l1 = 0.0f64;
    for i in 0..distributions.len() {
        for j in i + 1..distributions.len() {
            let l1: f64 = distributions[i]
                .iter()
                .zip(&distributions[j])
                .map(|(a, b)| (a - b).abs())
                .sum();
            max_l1 = max_l1.max(l1);
        }
    }
    Ok(RobustnessReport {
        width_factors: cfg.width_factors.clone(),
        depths: base.family_m_values.iter().map(|m| 3 * m + 1).collect(),
        distributions,
        max_pairwise_l1: max_l1,
    })
}

// ---------------------------------------------------------------------------
// Model analysis shared by Exp. 2/3/5: significance + reliability +
// attribution for one classification model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub family_m_values: Vec<usize>,
    pub family_widths: [usize; 3],
    pub width_factor: f64,
    pub distill: DistillConfig,
    pub reliability: ReliabilityConfig,
    /// Depths at which reliability stacks are trained.
    pub reliability_depths: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            family_m_values: vec![1, 2],
            family_widths: [16, 32, 64],
            width_factor: 1.0,
            distill: DistillConfig::default(),
            reliability: ReliabilityConfig::default(),
            reliability_depths: vec![4, 7],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAnalysis {
    pub label: String,
    pub depths: Vec<usize>,
    pub rho_c: Vec<f64>,
    pub residual_share: f64,
    /// ρ^reli of the analyzed model (k = 0 in each stack), per depth.
    pub rho_reli: Vec<(usize, f64)>,
    pub attribution: AttributionReport,
    pub accuracy_train: f64,
    pub accuracy_test: f64,
}

/// Exemplary networks: independently trained teachers the reliability
/// analysis shares across all analyzed models.
pub struct Exemplars {
    pub nets: Vec<Network>,
}

/// Trains `count` exemplar classifiers on the full training pool.
pub fn train_exemplars(
    data: &Dataset,
    arch: TeacherArch,
    count: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<Exemplars> {
    let Targets::Labels { train: labels, classes, .. } = &data.targets else {
        return Err(FcxError::InvalidShape("exemplars need a classification dataset".into()));
    };
    let nets: Result<Vec<Network>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut net = build_teacher(
                arch,
                TeacherHead::Classify { classes: *classes },
                &data.spec.input_shape,
                4,
                derive_seed(seed, 900 + i as u64),
            )?;
            let mut cfg = train.clone();
            cfg.seed = derive_seed(seed, 950 + i as u64);
            fit(&mut net, &data.train_x, &TrainTarget::Labels(labels), &cfg)?;
            net.freeze();
            Ok(net)
        })
        .collect();
    Ok(Exemplars { nets: nets? })
}

/// Full metric suite for one frozen classification model.
pub fn analyze_model(
    label: &str,
    model: &Network,
    data: &Dataset,
    exemplars: &Exemplars,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<ModelAnalysis> {
    let Targets::Labels { train: train_labels, test: test_labels, .. } = &data.targets else {
        return Err(FcxError::InvalidShape("analysis needs a classification dataset".into()));
    };
    let tap_shape = model.spec.tap_shape()?;
    let family_spec = DisentanglerFamilySpec {
        m_values: cfg.family_m_values.clone(),
        width_factor: cfg.width_factor,
        base_widths: cfg.family_widths,
        input_shape: data.spec.input_shape.clone(),
        output_shape: tap_shape,
    };
    let mut dcfg = cfg.distill.clone();
    dcfg.train.seed = derive_seed(seed, 1);
    let fam = distill(model, &family_spec, &data.train_x, &dcfg)?;
    let dec_train = decompose(&fam, model, &data.train_x, "train")?;
    let dec_test = decompose(&fam, model, &data.test_x, "test")?;
    let stats = significance(&dec_train)?;

    let train_targets = TaskTargets::Labels(train_labels.clone());
    let test_targets = TaskTargets::Labels(test_labels.clone());
    let tg = train_loss_game(&dec_train, &fam, model, &train_targets)?;
    let og = overfit_game(&dec_train, Some(&dec_test), &fam, model, &train_targets, &test_targets)?;
    let attribution = attribute(&tg, &og, &dec_train.depths, &stats.var_components)?;

    // reliability of the analyzed model against the shared exemplars
    let rho_reli = reliability_for_model(model, data, exemplars, cfg, seed)?;

    Ok(ModelAnalysis {
        label: label.to_string(),
        depths: dec_train.depths.clone(),
        rho_c: stats.rho_c,
        residual_share: stats.residual_share,
        rho_reli,
        attribution,
        accuracy_train: classify_accuracy(model, &data.train_x, train_labels)?,
        accuracy_test: classify_accuracy(model, &data.test_x, test_labels)?,
    })
}

/// ρ^reli of `model` at each configured depth (model is network 0, the
/// exemplars follow), together with the splits and the model's feature
/// variance for profile building.
pub struct ModelReliability {
    pub rho_per_depth: Vec<(usize, f64)>,
    pub splits: Vec<crate::reliability::ReliabilitySplit>,
    pub var_f: f64,
}

pub fn model_reliability(
    model: &Network,
    data: &Dataset,
    exemplars: &Exemplars,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<ModelReliability> {
    let mut teachers: Vec<Network> = vec![model.clone()];
    teachers.extend(exemplars.nets.iter().cloned());
    let tap_shapes: Vec<Vec<usize>> =
        teachers.iter().map(|t| t.spec.tap_shape()).collect::<Result<_>>()?;

    // per-network distilled families cover every requested depth
    let m_values: Vec<usize> = cfg.reliability_depths.iter().map(|d| (d - 1) / 3).collect();
    let families: Result<Vec<DistilledFamily>> = teachers
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let spec = DisentanglerFamilySpec {
                m_values: m_values.clone(),
                width_factor: cfg.width_factor,
                base_widths: cfg.family_widths,
                input_shape: data.spec.input_shape.clone(),
                output_shape: t.spec.tap_shape()?,
            };
            let mut dcfg = cfg.distill.clone();
            dcfg.train.seed = derive_seed(seed, 2000 + k as u64);
            distill(t, &spec, &data.train_x, &dcfg)
        })
        .collect();
    let families = families?;
    let decs: Result<Vec<_>> = teachers
        .iter()
        .zip(&families)
        .map(|(t, f)| decompose(f, t, &data.train_x, "reliability"))
        .collect();
    let decs = decs?;

    let splits: Result<Vec<_>> = cfg
        .reliability_depths
        .par_iter()
        .enumerate()
        .map(|(di, &depth)| {
            let mut stack = build_reliability_stack(
                depth,
                &data.spec.input_shape,
                &tap_shapes,
                &cfg.reliability,
                derive_seed(seed, 3000 + di as u64),
            )?;
            let mut rcfg = cfg.reliability.clone();
            rcfg.phase_g.seed = derive_seed(seed, 3100 + di as u64);
            rcfg.phase_h.seed = derive_seed(seed, 3200 + di as u64);
            train_phase_g(&mut stack, &teachers, &data.train_x, &rcfg)?;
            train_phase_h(&mut stack, &data.train_x, &rcfg)?;
            let dec_refs: Vec<&_> = decs.iter().collect();
            extract_split(&stack, &dec_refs, &teachers, &data.train_x)
        })
        .collect();
    let splits = splits?;
    let mut rho_per_depth = Vec::new();
    for (s, &depth) in splits.iter().zip(&cfg.reliability_depths) {
        let rho = reliability_rho(s, cfg.reliability.rho_denominator)?;
        rho_per_depth.push((depth, rho[0]));
    }
    let f = model.forward_to_feature(&data.train_x)?;
    let f_std = match &families[0].standardizer {
        Some(s) => s.apply(&f)?,
        None => f,
    };
    Ok(ModelReliability { rho_per_depth, splits, var_f: variance_of_batch(&f_std)? })
}

fn reliability_for_model(
    model: &Network,
    data: &Dataset,
    exemplars: &Exemplars,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    Ok(model_reliability(model, data, exemplars, cfg, seed)?.rho_per_depth)
}

// ---------------------------------------------------------------------------
// Exp. 2/3: sample count vs significance / reliability / attribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub dataset: DatasetSpec,
    pub train_sizes: Vec<usize>,
    pub teacher_arch: TeacherArch,
    pub teacher_train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub exemplar_count: usize,
    pub exemplar_train: TrainConfig,
    pub seed: u64,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Exp2Config {
            dataset: DatasetSpec {
                kind: DatasetKind::Rings { classes: 3 },
                n_train: 192,
                n_test: 64,
                input_shape: vec![1, 16, 16],
                seed: 5,
            },
            train_sizes: vec![64, 192],
            teacher_arch: TeacherArch::SmallResNet { blocks_per_stage: 1 },
            teacher_train: TrainConfig { max_epochs: 40, ..Default::default() },
            analysis: AnalysisConfig::default(),
            exemplar_count: 2,
            exemplar_train: TrainConfig { max_epochs: 40, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp2Report {
    pub per_size: Vec<ModelAnalysis>,
}

/// Takes the first `k` training samples (the pool is already shuffled by
/// construction) and keeps the test split.
pub fn subset_dataset(data: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 || k > data.train_x.shape()[0] {
        return Err(FcxError::InvalidSplit(format!(
            "subset size {k} out of range for pool {}",
            data.train_x.shape()[0]
        )));
    }
    let idx: Vec<usize> = (0..k).collect();
    let train_x = data.train_x.gather_rows(&idx)?;
    let targets = match &data.targets {
        Targets::Labels { train, test, classes } => Targets::Labels {
            train: train[..k].to_vec(),
            test: test.clone(),
            classes: *classes,
        },
        Targets::Tensors { train, test } => {
            Targets::Tensors { train: train.gather_rows(&idx)?, test: test.clone() }
        }
    };
    let mut spec = data.spec.clone();
    spec.n_train = k;
    Ok(Dataset { spec, train_x, test_x: data.test_x.clone(), targets })
}

pub fn run_sample_size_experiment(cfg: &Exp2Config) -> Result<Exp2Report> {
    let pool = gen_dataset(&cfg.dataset)?;
    let exemplars = train_exemplars(
        &pool,
        cfg.teacher_arch,
        cfg.exemplar_count,
        &cfg.exemplar_train,
        derive_seed(cfg.seed, 5000),
    )?;
    let Targets::Labels { classes, .. } = &pool.targets else { unreachable!() };
    let classes = *classes;
    let per_size: Result<Vec<ModelAnalysis>> = cfg
        .train_sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let subset = subset_dataset(&pool, size)?;
            let Targets::Labels { train: labels, .. } = &subset.targets else { unreachable!() };
            let mut net = build_teacher(
                cfg.teacher_arch,
                TeacherHead::Classify { classes },
                &subset.spec.input_shape,
                4,
                derive_seed(cfg.seed, 6000 + i as u64),
            )?;
            let mut tcfg = cfg.teacher_train.clone();
            tcfg.seed = derive_seed(cfg.seed, 6100 + i as u64);
            fit(&mut net, &subset.train_x, &TrainTarget::Labels(labels), &tcfg)?;
            net.freeze();
            analyze_model(
                &format!("n{size}"),
                &net,
                &subset,
                &exemplars,
                &cfg.analysis,
                derive_seed(cfg.seed, 6200 + i as u64),
            )
        })
        .collect();
    Ok(Exp2Report { per_size: per_size? })
}

// ---------------------------------------------------------------------------
// Exp. 4: feature substitution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstitutionReport {
    pub acc_f: f64,
    pub acc_substitute: f64,
    pub delta: f64,
}

/// Accuracy with the teacher's own feature vs a substituted feature batch
/// (already in raw teacher space).
pub fn feature_substitution_eval(
    teacher: &Network,
    substitute_feature: &Tensor,
    test_x: &Tensor,
    labels: &[usize],
) -> Result<SubstitutionReport> {
    let f = teacher.forward_to_feature(test_x)?;
    if substitute_feature.shape() != f.shape() {
        return Err(FcxError::ShapeMismatch {
            expected: f.shape().to_vec(),
            got: substitute_feature.shape().to_vec(),
        });
    }
    let acc_f = accuracy_from_logits(&teacher.head_forward(&f)?, labels);
    let acc_sub = accuracy_from_logits(&teacher.head_forward(substitute_feature)?, labels);
    Ok(SubstitutionReport { acc_f, acc_substitute: acc_sub, delta: acc_sub - acc_f })
}

// ---------------------------------------------------------------------------
// Exp. 5: compression and distillation comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp5Config {
    pub dataset: DatasetSpec,
    pub teacher_arch: TeacherArch,
    pub teacher_train: TrainConfig,
    pub compress: CompressConfig,
    pub distill_model: DistillModelConfig,
    pub analysis: AnalysisConfig,
    pub exemplar_train: TrainConfig,
    pub seed: u64,
}

impl Default for Exp5Config {
    fn default() -> Self {
        Exp5Config {
            dataset: DatasetSpec {
                kind: DatasetKind::Rings { classes: 3 },
                n_train: 128,
                n_test: 64,
                input_shape: vec![1, 16, 16],
                seed: 23,
            },
            teacher_arch: TeacherArch::SmallResNet { blocks_per_stage: 1 },
            teacher_train: TrainConfig { max_epochs: 40, ..Default::default() },
            compress: CompressConfig::default(),
            distill_model: DistillModelConfig::default(),
            analysis: AnalysisConfig::default(),
            exemplar_train: TrainConfig { max_epochs: 40, ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp5Report {
    pub original: ModelAnalysis,
    pub compressed: ModelAnalysis,
    pub distilled: ModelAnalysis,
    pub compress_report: crate::pipeline::compress::CompressReport,
}

pub fn run_compression_experiment(cfg: &Exp5Config) -> Result<Exp5Report> {
    let data = gen_dataset(&cfg.dataset)?;
    let Targets::Labels { train: labels, classes, .. } = &data.targets else {
        return Err(FcxError::InvalidShape("exp5 needs a classification dataset".into()));
    };
    let mut original = build_teacher(
        cfg.teacher_arch,
        TeacherHead::Classify { classes: *classes },
        &data.spec.input_shape,
        4,
        derive_seed(cfg.seed, 1),
    )?;
    let mut tcfg = cfg.teacher_train.clone();
    tcfg.seed = derive_seed(cfg.seed, 2);
    fit(&mut original, &data.train_x, &TrainTarget::Labels(labels), &tcfg)?;
    original.freeze();

    let (compressed, compress_report) =
        compress_model(&original, &data.train_x, &TrainTarget::Labels(labels), &cfg.compress)?;
    let mut dm_cfg = cfg.distill_model.clone();
    dm_cfg.distill.train.seed = derive_seed(cfg.seed, 3);
    let distilled = distill_model(&original, &data.train_x, &dm_cfg)?;

    let exemplars = train_exemplars(
        &data,
        cfg.teacher_arch,
        2,
        &cfg.exemplar_train,
        derive_seed(cfg.seed, 4),
    )?;
    let analyses: Result<Vec<ModelAnalysis>> = [
        ("original", &original),
        ("compressed", &compressed),
        ("distilled", &distilled.network),
    ]
    .par_iter()
    .enumerate()
    .map(|(i, (label, net))| {
        analyze_model(label, net, &data, &exemplars, &cfg.analysis, derive_seed(cfg.seed, 10 + i as u64))
    })
    .collect();
    let mut analyses = analyses?;
    let distilled_a = analyses.pop().unwrap();
    let compressed_a = analyses.pop().unwrap();
    let original_a = analyses.pop().unwrap();
    Ok(Exp5Report {
        original: original_a,
        compressed: compressed_a,
        distilled: distilled_a,
        compress_report,
    })
}

// ---------------------------------------------------------------------------
// Exp. 6: complexity profile vs performance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp6Config {
    pub dataset: DatasetSpec,
    pub blocks_per_stage: Vec<usize>,
    pub train_sizes: Vec<usize>,
    pub seeds_per_cell: usize,
    pub teacher_train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub exemplar_train: TrainConfig,
    pub profile_depths: Vec<usize>,
    pub cv_train_k: usize,
    pub cv_test_k: usize,
    pub cv_repeats: usize,
    pub seed: u64,
}

impl Default for Exp6Config {
    fn default() -> Self {
        let mut analysis = AnalysisConfig::default();
        analysis.family_m_values = vec![1, 2];
        Exp6Config {
            dataset: DatasetSpec {
                kind: DatasetKind::Rings { classes: 3 },
                n_train: 128,
                n_test: 64,
                input_shape: vec![1, 8, 8],
                seed: 31,
            },
            blocks_per_stage: vec![1, 2],
            train_sizes: vec![48, 96, 128],
            seeds_per_cell: 2,
            teacher_train: TrainConfig { max_epochs: 30, ..Default::default() },
            analysis,
            exemplar_train: TrainConfig { max_epochs: 30, ..Default::default() },
            profile_depths: vec![4, 7],
            cv_train_k: 9,
            cv_test_k: 3,
            cv_repeats: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfiledModel {
    pub label: String,
    pub profile: ComplexityProfile,
    pub accuracy: f64,
    pub task_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exp6Report {
    pub models: Vec<ProfiledModel>,
    pub regressor_accuracy: RegressionModel,
    pub cv_accuracy: CrossValidationReport,
    pub cv_task_loss: CrossValidationReport,
    pub pca: Pca2d,
}

pub fn run_profile_regression_experiment(cfg: &Exp6Config) -> Result<Exp6Report> {
    let pool = gen_dataset(&cfg.dataset)?;
    let Targets::Labels { classes, .. } = &pool.targets else {
        return Err(FcxError::InvalidShape("exp6 needs a classification dataset".into()));
    };
    let classes = *classes;
    let exemplars = train_exemplars(
        &pool,
        TeacherArch::SmallResNet { blocks_per_stage: 1 },
        2,
        &cfg.exemplar_train,
        derive_seed(cfg.seed, 8000),
    )?;

    let mut jobs = Vec::new();
    for &blocks in &cfg.blocks_per_stage {
        for &size in &cfg.train_sizes {
            for rep in 0..cfg.seeds_per_cell {
                jobs.push((blocks, size, rep as u64));
            }
        }
    }
    let mut analysis = cfg.analysis.clone();
    analysis.reliability_depths = cfg.profile_depths.clone();
    analysis.family_m_values = cfg.profile_depths.iter().map(|d| (d - 1) / 3).collect();

    let models: Result<Vec<ProfiledModel>> = jobs
        .par_iter()
        .map(|&(blocks, size, rep)| {
            let salt = blocks as u64 * 1_000_000 + size as u64 * 100 + rep;
            let subset = subset_dataset(&pool, size)?;
            let Targets::Labels { train: labels, test: test_labels, .. } = &subset.targets
            else {
                unreachable!()
            };
            let mut net = build_teacher(
                TeacherArch::SmallResNet { blocks_per_stage: blocks },
                TeacherHead::Classify { classes },
                &subset.spec.input_shape,
                4,
                derive_seed(cfg.seed, salt),
            )?;
            let mut tcfg = cfg.teacher_train.clone();
            tcfg.seed = derive_seed(cfg.seed, salt + 1);
            fit(&mut net, &subset.train_x, &TrainTarget::Labels(labels), &tcfg)?;
            net.freeze();

            let rel = model_reliability(&net, &subset, &exemplars, &analysis, derive_seed(cfg.seed, salt + 2))?;
            let split_refs: Vec<&_> = rel.splits.iter().collect();
            let profile = complexity_profile(&cfg.profile_depths, &split_refs, 0, rel.var_f)?;
            let accuracy = classify_accuracy(&net, &subset.test_x, test_labels)?;
            let logits = net.forward(&subset.test_x)?;
            let task_loss = crate::ops::softmax_ce_forward(&logits, test_labels)?.0;
            Ok(ProfiledModel {
                label: format!("b{blocks}-n{size}-r{rep}"),
                profile,
                accuracy,
                task_loss,
            })
        })
        .collect();
    let models = models?;

    let profiles: Vec<Vec<f64>> = models.iter().map(|m| m.profile.as_vector()).collect();
    let accs: Vec<f64> = models.iter().map(|m| m.accuracy).collect();
    let losses: Vec<f64> = models.iter().map(|m| m.task_loss).collect();
    let regressor_accuracy = fit_regressor(&profiles, &accs, TargetKind::Accuracy, true)?;
    let cv_accuracy = cross_validate(
        &profiles,
        &accs,
        TargetKind::Accuracy,
        cfg.cv_train_k,
        cfg.cv_test_k,
        cfg.cv_repeats,
        derive_seed(cfg.seed, 8100),
    )?;
    let cv_task_loss = cross_validate(
        &profiles,
        &losses,
        TargetKind::TaskLoss,
        cfg.cv_train_k,
        cfg.cv_test_k,
        cfg.cv_repeats,
        derive_seed(cfg.seed, 8200),
    )?;
    let pca = pca2d(&profiles)?;
    Ok(Exp6Report { models, regressor_accuracy, cv_accuracy, cv_task_loss, pca })
}
