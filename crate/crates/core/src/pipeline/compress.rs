//! Network compression (global magnitude pruning + uniform quantization)
//! and whole-model distillation.

use crate::disentangler::{distill, DistillConfig, DistilledFamily};
use crate::error::{FcxError, Result};
use crate::graph::Graph;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::train::TrainTarget;
use crate::zoo::{build_disentangler, Layer, Network, NetworkSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    /// Fraction of prunable weights to zero, in [0, 1).
    pub prune_fraction: f64,
    pub conv_bits: u32,
    pub fc_bits: u32,
    pub retrain: crate::train::TrainConfig,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            prune_fraction: 0.5,
            conv_bits: 8,
            fc_bits: 5,
            retrain: crate::train::TrainConfig { max_epochs: 20, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressReport {
    pub total_weights: usize,
    pub pruned_weights: usize,
    pub achieved_fraction: f64,
    pub retrain_init_loss: f64,
    pub retrain_final_loss: f64,
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".weight")
}

fn layer_index_of(name: &str) -> usize {
    name.trim_start_matches("layer").split('.').next().unwrap().parse().unwrap()
}

/// Symmetric uniform quantization to `2^bits - 1` levels: grid step
/// `max|w| / (2^(bits-1) - 1)`, zero preserved exactly.
fn quantize_uniform(t: &mut Tensor, bits: u32) {
    let half_levels = (1u64 << (bits - 1)) - 1;
    let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 || half_levels == 0 {
        return;
    }
    let step = max_abs / half_levels as f64;
    for v in t.data_mut() {
        let q = (*v / step).round().clamp(-(half_levels as f64), half_levels as f64);
        *v = q * step;
    }
}

/// Prunes the smallest-magnitude weights globally, briefly retrains the
/// survivors with the mask fixed, then quantizes each layer's weights to a
/// uniform grid (conv and affine layers get separate bit widths). Biases
/// are left untouched. Returns the frozen compressed network.
pub fn compress_model(
    teacher: &Network,
    dataset_inputs: &Tensor,
    targets: &TrainTarget,
    cfg: &CompressConfig,
) -> Result<(Network, CompressReport)> {
    if !(0.0..1.0).contains(&cfg.prune_fraction) {
        return Err(FcxError::InvalidFraction(cfg.prune_fraction));
    }
    if !(2..=16).contains(&cfg.conv_bits) || !(2..=16).contains(&cfg.fc_bits) {
        return Err(FcxError::InvalidShape(format!(
            "quantization bits must lie in [2,16], got conv={} fc={}",
            cfg.conv_bits, cfg.fc_bits
        )));
    }
    let mut net = teacher.thawed_clone();

    // global magnitude ranking over all weight tensors
    let mut magnitudes: Vec<(f64, String, usize)> = Vec::new();
    for (name, t) in net.params() {
        if is_weight(name) {
            for (i, v) in t.data().iter().enumerate() {
                magnitudes.push((v.abs(), name.clone(), i));
            }
        }
    }
    let total = magnitudes.len();
    let k = (cfg.prune_fraction * total as f64).round() as usize;
    magnitudes.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mask: BTreeMap<String, Vec<bool>> = net
        .params()
        .iter()
        .filter(|(n, _)| is_weight(n))
        .map(|(n, t)| (n.clone(), vec![true; t.len()]))
        .collect();
    for (_, name, idx) in magnitudes.iter().take(k) {
        mask.get_mut(name).unwrap()[*idx] = false;
    }
    let apply_mask = |params: &mut BTreeMap<String, Tensor>| {
        for (name, keep) in &mask {
            let t = params.get_mut(name).unwrap();
            for (v, &keep) in t.data_mut().iter_mut().zip(keep) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    };
    apply_mask(net.params_mut()?);

    // brief retraining of the survivors, mask re-applied after each step
    let init_loss = crate::train::eval_loss(&net, dataset_inputs, targets)?;
    let rcfg = &cfg.retrain;
    let mut opt = OptimizerState::new(rcfg.optimizer, rcfg.lr);
    let mut rng = ChaCha20Rng::seed_from_u64(rcfg.seed);
    let n = dataset_inputs.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..rcfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(rcfg.batch_size.max(1)) {
            let bx = dataset_inputs.gather_rows(chunk)?;
            let mut g = Graph::new();
            let ids = net.bind(&mut g);
            let x = g.input(bx);
            let out = net.forward_on_graph(&mut g, &ids, x, 0..net.spec.layers.len())?;
            let loss = match targets {
                TrainTarget::Tensors(t) => {
                    let bt = g.input(t.gather_rows(chunk)?);
                    g.mse(out, bt)?
                }
                TrainTarget::Labels(l) => {
                    let bl: Vec<usize> = chunk.iter().map(|&i| l[i]).collect();
                    g.softmax_cross_entropy(out, &bl)?
                }
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(FcxError::TrainingDiverged("compression retraining diverged".into()));
            }
            g.backward(loss)?;
            let grads = g.trainable_grads();
            opt.step(net.params_mut()?, &grads)?;
            apply_mask(net.params_mut()?);
        }
    }
    let final_loss = crate::train::eval_loss(&net, dataset_inputs, targets)?;

    // per-layer uniform quantization of weights
    let layers = net.spec.layers.clone();
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        if !is_weight(&name) {
            continue;
        }
        let bits = match layers[layer_index_of(&name)] {
            Layer::Affine { .. } => cfg.fc_bits,
            Layer::Conv { .. } | Layer::ResidualBlock { .. } => cfg.conv_bits,
            _ => continue,
        };
        quantize_uniform(net.params_mut()?.get_mut(&name).unwrap(), bits);
    }
    net.freeze();

    let pruned = mask.values().flat_map(|v| v.iter()).filter(|&&keep| !keep).count();
    Ok((
        net,
        CompressReport {
            total_weights: total,
            pruned_weights: pruned,
            achieved_fraction: pruned as f64 / total as f64,
            retrain_init_loss: init_loss,
            retrain_final_loss: final_loss,
        },
    ))
}

/// A distilled stand-in for the teacher: a disentangler-net student that
/// mimics the teacher's tap feature, with the teacher's head grafted on for
/// end-to-end evaluation. The standardizer is folded into the student's
/// final 1x1 conv so its tap output lives in raw teacher space.
#[derive(Debug, Clone)]
pub struct DistilledModel {
    pub network: Network,
    pub student_report: crate::train::TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillModelConfig {
    /// Student ReLU depth `l = 3m + 1`.
    pub depth: usize,
    pub base_widths: [usize; 3],
    pub width_factor: f64,
    pub distill: DistillConfig,
}

impl Default for DistillModelConfig {
    fn default() -> Self {
        DistillModelConfig {
            depth: 7,
            base_widths: [16, 32, 64],
            width_factor: 1.0,
            distill: DistillConfig::default(),
        }
    }
}

pub fn distill_model(
    teacher: &Network,
    inputs: &Tensor,
    cfg: &DistillModelConfig,
) -> Result<DistilledModel> {
    if cfg.depth < 4 || (cfg.depth - 1) % 3 != 0 {
        return Err(FcxError::InvalidDepth(format!(
            "student depth must be 3m+1 for m >= 1, got {}",
            cfg.depth
        )));
    }
    let m = (cfg.depth - 1) / 3;
    let tap_shape = teacher.spec.tap_shape()?;
    let family = crate::zoo::DisentanglerFamilySpec {
        m_values: vec![m],
        width_factor: cfg.width_factor,
        base_widths: cfg.base_widths,
        input_shape: teacher.spec.input_shape.clone(),
        output_shape: tap_shape,
    };
    let fam = distill(teacher, &family, inputs, &cfg.distill)?;
    let model = assemble_distilled(&fam, teacher, 0)?;
    Ok(DistilledModel { network: model, student_report: fam.reports[0].clone() })
}

/// Grafts the teacher head onto family member `idx`, folding the
/// standardizer into the student's final 1x1 conv.
pub fn assemble_distilled(
    family: &DistilledFamily,
    teacher: &Network,
    idx: usize,
) -> Result<Network> {
    let student = &family.nets[idx];
    let mut layers = student.spec.layers.clone();
    let tap = student.spec.tap;
    for layer in &teacher.spec.layers[teacher.spec.tap + 1..] {
        layers.push(layer.clone());
    }
    let spec = NetworkSpec { input_shape: student.spec.input_shape.clone(), layers, tap };

    let mut params: BTreeMap<String, Tensor> = student.params().clone();
    // fold (v * std + mean) into the output-matching 1x1 conv
    if let Some(s) = &family.standardizer {
        let out_idx = tap;
        let wname = format!("layer{out_idx:03}.weight");
        let bname = format!("layer{out_idx:03}.bias");
        let w = params.get_mut(&wname).unwrap();
        let c_out = w.shape()[0];
        let per_out = w.len() / c_out;
        for co in 0..c_out {
            for v in &mut w.data_mut()[co * per_out..(co + 1) * per_out] {
                *v *= s.std[co];
            }
        }
        let b = params.get_mut(&bname).unwrap();
        for (co, v) in b.data_mut().iter_mut().enumerate() {
            *v = *v * s.std[co] + s.mean[co];
        }
    }
    // teacher head parameters keep their layer indices shifted into place
    for (i, layer) in teacher.spec.layers[teacher.spec.tap + 1..].iter().enumerate() {
        let src = teacher.spec.tap + 1 + i;
        let dst = tap + 1 + i;
        match layer {
            Layer::Conv { .. } | Layer::Affine { .. } | Layer::ResidualBlock { .. } => {
                for which in ["weight", "bias"] {
                    let from = format!("layer{src:03}.{which}");
                    let to = format!("layer{dst:03}.{which}");
                    params.insert(to, teacher.params()[&from].clone());
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
    }
    let mut net = Network::from_parts(spec, params, student.seed, false)?;
    net.freeze();
    Ok(net)
}

/// Builds a disentangler-architecture regression teacher (used as the
/// target net of the synthetic-task experiments). The tap is its output.
pub fn build_regression_teacher(
    depth: usize,
    base_widths: [usize; 3],
    input_shape: &[usize],
    output_shape: &[usize],
    seed: u64,
) -> Result<Network> {
    if depth < 4 || (depth - 1) % 3 != 0 {
        return Err(FcxError::InvalidDepth(format!(
            "regression teacher depth must be 3m+1, got {depth}"
        )));
    }
    build_disentangler((depth - 1) / 3, 1.0, base_widths, input_shape, output_shape, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use crate::zoo::{build_teacher, TeacherArch, TeacherHead};

    fn toy_teacher() -> (Network, Tensor, Vec<usize>) {
        let mut net = build_teacher(
            TeacherArch::SmallConv,
            TeacherHead::Classify { classes: 2 },
            &[1, 8, 8],
            4,
            3,
        )
        .unwrap();
        let x = Tensor::new(&[16, 1, 8, 8], Init::Uniform(-1.0, 1.0), 5).unwrap();
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let cfg = crate::train::TrainConfig { max_epochs: 5, ..Default::default() };
        crate::train::fit(&mut net, &x, &TrainTarget::Labels(&labels), &cfg).unwrap();
        net.freeze();
        (net, x, labels)
    }

    #[test]
    fn quantizer_distinct_value_counts() {
        let (teacher, x, labels) = toy_teacher();
        let cfg = CompressConfig {
            prune_fraction: 0.3,
            conv_bits: 8,
            fc_bits: 5,
            retrain: crate::train::TrainConfig { max_epochs: 2, ..Default::default() },
        };
        let (net, _) = compress_model(&teacher, &x, &TrainTarget::Labels(&labels), &cfg).unwrap();
        for (name, t) in net.params() {
            if !name.ends_with(".weight") {
                continue;
            }
            let bits = match net.spec.layers[layer_index_of(name)] {
                Layer::Affine { .. } => 5u32,
                _ => 8,
            };
            let mut vals: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            vals.sort_unstable();
            vals.dedup();
            assert!(
                vals.len() <= (1usize << bits),
                "{name}: {} distinct values for {bits} bits",
                vals.len()
            );
        }
    }

    #[test]
    fn quantized_values_form_arithmetic_grid() {
        let (teacher, x, labels) = toy_teacher();
        let cfg = CompressConfig {
            prune_fraction: 0.2,
            retrain: crate::train::TrainConfig { max_epochs: 1, ..Default::default() },
            ..Default::default()
        };
        let (net, _) = compress_model(&teacher, &x, &TrainTarget::Labels(&labels), &cfg).unwrap();
        for (name, t) in net.params() {
            if !name.ends_with(".weight") {
                continue;
            }
            let bits = match net.spec.layers[layer_index_of(name)] {
                Layer::Affine { .. } => 5u32,
                _ => 8,
            };
            let half = ((1u64 << (bits - 1)) - 1) as f64;
            let max_abs = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if max_abs == 0.0 {
                continue;
            }
            let step = max_abs / half;
            for v in t.data() {
                let q = v / step;
                assert!((q - q.round()).abs() < 1e-7, "{name}: {v} off grid (step {step})");
            }
        }
    }

    #[test]
    fn pruned_fraction_hits_target() {
        let (teacher, x, labels) = toy_teacher();
        for frac in [0.0, 0.25, 0.7] {
            let cfg = CompressConfig {
                prune_fraction: frac,
                retrain: crate::train::TrainConfig { max_epochs: 1, ..Default::default() },
                ..Default::default()
            };
            let (_, report) =
                compress_model(&teacher, &x, &TrainTarget::Labels(&labels), &cfg).unwrap();
            let tol = 1.0 / report.total_weights as f64;
            assert!(
                (report.achieved_fraction - frac).abs() <= tol,
                "frac {frac}: achieved {}",
                report.achieved_fraction
            );
        }
    }

    #[test]
    fn no_prune_high_bits_is_near_identity() {
        let (teacher, x, labels) = toy_teacher();
        let cfg = CompressConfig {
            prune_fraction: 0.0,
            conv_bits: 16,
            fc_bits: 16,
            retrain: crate::train::TrainConfig { max_epochs: 0, ..Default::default() },
        };
        let (net, _) = compress_model(&teacher, &x, &TrainTarget::Labels(&labels), &cfg).unwrap();
        let a = teacher.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            let rel = (u - v).abs() / u.abs().max(v.abs()).max(1e-3);
            assert!(rel < 1e-3, "{u} vs {v}");
        }
    }

    #[test]
    fn invalid_fraction_rejected() {
        let (teacher, x, labels) = toy_teacher();
        let cfg = CompressConfig { prune_fraction: 1.0, ..Default::default() };
        assert!(matches!(
            compress_model(&teacher, &x, &TrainTarget::Labels(&labels), &cfg),
            Err(FcxError::InvalidFraction(_))
        ));
    }

    #[test]
    fn distilled_model_composes_head() {
        let (teacher, x, _) = toy_teacher();
        let mut cfg = DistillModelConfig::default();
        cfg.base_widths = [8, 12, 16];
        cfg.distill.train.max_epochs = 8;
        let model = distill_model(&teacher, &x, &cfg).unwrap();
        // end-to-end output equals head(student feature) by construction
        let f = model.network.forward_to_feature(&x).unwrap();
        let via = model.network.head_forward(&f).unwrap();
        let full = model.network.forward(&x).unwrap();
        assert_eq!(via.data(), full.data());
        assert_eq!(full.shape(), &[16, 2]);
        // student made progress on the feature-mimicry loss
        assert!(model.student_report.final_loss <= model.student_report.init_loss);
    }

    #[test]
    fn standardizer_fold_is_exact() {
        // the folded tap output must equal unstandardize(student output)
        let (teacher, x, _) = toy_teacher();
        let tap_shape = teacher.spec.tap_shape().unwrap();
        let family = crate::zoo::DisentanglerFamilySpec {
            m_values: vec![1],
            width_factor: 1.0,
            base_widths: [8, 12, 16],
            input_shape: teacher.spec.input_shape.clone(),
            output_shape: tap_shape,
        };
        let mut dcfg = DistillConfig::default();
        dcfg.train.max_epochs = 3;
        let fam = crate::disentangler::distill(&teacher, &family, &x, &dcfg).unwrap();
        let folded = assemble_distilled(&fam, &teacher, 0).unwrap();
        let via_fold = folded.forward_to_feature(&x).unwrap();
        let raw = fam.unstandardized(&fam.nets[0].forward(&x).unwrap()).unwrap();
        for (a, b) in via_fold.data().iter().zip(raw.data()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}
