//! Reliable/unreliable feature disentanglement across K networks.
//!
//! One backbone of the requested ReLU depth feeds K linear 1x1-conv heads,
//! each mimicking one teacher's tap feature (phase g, joint distillation).
//! Linear inverses are then trained to reconstruct the backbone output from
//! each head's output through R sequential cycle phases (phase h); the
//! backbone and heads stay frozen there. The head outputs are the reliable
//! components; subtracting them from the per-network distilled features
//! yields the unreliable remainder.

use crate::disentangler::{FeatureDecomposition, Standardizer};
use crate::error::{FcxError, Result};
use crate::graph::Graph;
use crate::optim::OptimizerState;
use crate::tensor::{exact_split, variance_of_batch, Tensor};
use crate::train::{fit, TrainConfig, TrainTarget};
use crate::zoo::{build_disentangler, Layer, Network, NetworkSpec};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which variance normalizes ρ^reli.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RhoDenominator {
    /// Var of the per-network distilled feature Φ_k^(l) (literal reading).
    DistilledPhi,
    /// Var of the teacher's standardized tap feature itself.
    TeacherFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityConfig {
    /// Cycle iterations R.
    pub cycle_iterations: usize,
    /// Backbone output channels; defaults to the first teacher's tap
    /// channel count.
    pub latent_channels: Option<usize>,
    pub base_widths: [usize; 3],
    pub width_factor: f64,
    pub phase_g: TrainConfig,
    /// Per-iteration budget for the inverse fits.
    pub phase_h: TrainConfig,
    pub standardize: bool,
    pub rho_denominator: RhoDenominator,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            cycle_iterations: 10,
            latent_channels: None,
            base_widths: [16, 32, 64],
            width_factor: 1.0,
            phase_g: TrainConfig::default(),
            phase_h: TrainConfig { max_epochs: 40, lr: 1e-2, ..TrainConfig::default() },
            standardize: true,
            rho_denominator: RhoDenominator::DistilledPhi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    Built,
    GTrained,
    HTrained,
}

/// Phase-h loss bookkeeping for one cycle iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CyclePhaseLoss {
    pub iteration: usize,
    pub init: f64,
    pub r#final: f64,
}

/// Backbone + K linear heads + K linear inverses.
#[derive(Debug, Clone)]
pub struct ReliabilityStack {
    pub backbone: Network,
    pub heads: Vec<Network>,
    pub inverses: Vec<Network>,
    pub standardizers: Vec<Option<Standardizer>>,
    pub depth: usize,
    pub cycle_iterations: usize,
    phase: Phase,
    /// Joint distillation loss at init/final of phase g.
    pub distill_loss: Option<(f64, f64)>,
    pub cycle_losses: Vec<CyclePhaseLoss>,
    /// Eq.-5-style total: sum over r of the cycle loss evaluated with the
    /// final parameters.
    pub cycle_total_at_final: Option<f64>,
}

fn linear_map_net(c_in: usize, c_out: usize, spatial: (usize, usize), seed: u64) -> Result<Network> {
    let spec = NetworkSpec {
        input_shape: vec![c_in, spatial.0, spatial.1],
        layers: vec![Layer::Conv { c_out, k: 1, stride: 1, pad: 0 }],
        tap: 0,
    };
    Network::init(spec, seed)
}

/// Builds the stack for depth `l = 3m + 1` over K teacher tap shapes (all
/// spatial extents must agree).
pub fn build_reliability_stack(
    l: usize,
    input_shape: &[usize],
    tap_shapes: &[Vec<usize>],
    cfg: &ReliabilityConfig,
    seed: u64,
) -> Result<ReliabilityStack> {
    let k = tap_shapes.len();
    if k < 2 {
        return Err(FcxError::TooFewNetworks { k });
    }
    if l < 4 || (l - 1) % 3 != 0 {
        return Err(FcxError::InvalidDepth(format!(
            "reliability depth must be 3m+1 for m >= 1, got {l}"
        )));
    }
    let m = (l - 1) / 3;
    let spatial = (tap_shapes[0][1], tap_shapes[0][2]);
    for shape in tap_shapes {
        if shape.len() != 3 || (shape[1], shape[2]) != spatial {
            return Err(FcxError::ShapeMismatch {
                expected: vec![0, spatial.0, spatial.1],
                got: shape.clone(),
            });
        }
    }
    let latent = cfg.latent_channels.unwrap_or(tap_shapes[0][0]);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let backbone = build_disentangler(
        m,
        cfg.width_factor,
        cfg.base_widths,
        input_shape,
        &[latent, spatial.0, spatial.1],
        rng.next_u64(),
    )?;
    let heads: Result<Vec<Network>> = tap_shapes
        .iter()
        .map(|s| linear_map_net(latent, s[0], spatial, rng.next_u64()))
        .collect();
    let inverses: Result<Vec<Network>> = tap_shapes
        .iter()
        .map(|s| linear_map_net(s[0], latent, spatial, rng.next_u64()))
        .collect();
    Ok(ReliabilityStack {
        backbone,
        heads: heads?,
        inverses: inverses?,
        standardizers: vec![None; k],
        depth: l,
        cycle_iterations: cfg.cycle_iterations,
        phase: Phase::Built,
        distill_loss: None,
        cycle_losses: Vec::new(),
        cycle_total_at_final: None,
    })
}

fn prefixed(prefix: &str, name: &str) -> String {
    format!("{prefix}/{name}")
}

fn bind_from_pool(
    g: &mut Graph,
    pool: &BTreeMap<String, Tensor>,
    prefix: &str,
    net: &Network,
) -> BTreeMap<String, crate::graph::NodeId> {
    let mut ids = BTreeMap::new();
    for name in net.params().keys() {
        let key = prefixed(prefix, name);
        ids.insert(name.clone(), g.param(&key, pool[&key].clone()));
    }
    ids
}

/// Phase g: jointly trains the backbone and all heads on the summed
/// distillation loss against the K frozen teachers' tap features.
pub fn train_phase_g(
    stack: &mut ReliabilityStack,
    teachers: &[Network],
    inputs: &Tensor,
    cfg: &ReliabilityConfig,
) -> Result<()> {
    if stack.phase != Phase::Built {
        return Err(FcxError::PhaseOrderError("phase g may only run once, directly after build"));
    }
    let k = stack.heads.len();
    if teachers.len() != k {
        return Err(FcxError::ShapeMismatch { expected: vec![k], got: vec![teachers.len()] });
    }
    for t in teachers {
        if !t.is_frozen() {
            return Err(FcxError::PhaseOrderError("phase g requires frozen teachers"));
        }
    }
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(FcxError::EmptyInput("reliability dataset is empty"));
    }

    // standardized targets per teacher
    let mut targets = Vec::with_capacity(k);
    for (i, t) in teachers.iter().enumerate() {
        let f = t.forward_to_feature(inputs)?;
        if cfg.standardize {
            let s = Standardizer::fit(&f)?;
            targets.push(s.apply(&f)?);
            stack.standardizers[i] = Some(s);
        } else {
            targets.push(f);
            stack.standardizers[i] = None;
        }
    }

    // parameter pool: backbone plus all heads
    let mut pool: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in stack.backbone.params() {
        pool.insert(prefixed("backbone", name), t.clone());
    }
    for (ki, head) in stack.heads.iter().enumerate() {
        for (name, t) in head.params() {
            pool.insert(prefixed(&format!("head{ki}"), name), t.clone());
        }
    }
    let init_pool = pool.clone();

    let eval_total = |pool: &BTreeMap<String, Tensor>,
                      stack: &ReliabilityStack|
     -> Result<f64> {
        let mut backbone = stack.backbone.thawed_clone();
        let map: BTreeMap<String, Tensor> = backbone
            .params()
            .keys()
            .map(|n| (n.clone(), pool[&prefixed("backbone", n)].clone()))
            .collect();
        backbone.set_params(map)?;
        let psi = backbone.forward(inputs)?;
        let mut total = 0.0;
        for (ki, head) in stack.heads.iter().enumerate() {
            let mut h = head.thawed_clone();
            let map: BTreeMap<String, Tensor> = h
                .params()
                .keys()
                .map(|n| (n.clone(), pool[&prefixed(&format!("head{ki}"), n)].clone()))
                .collect();
            h.set_params(map)?;
            let phi = h.forward(&psi)?;
            total += crate::ops::mse_forward(&phi, &targets[ki])?;
        }
        Ok(total)
    };

    let init_loss = eval_total(&pool, stack)?;
    let mut opt = OptimizerState::new(cfg.phase_g.optimizer, cfg.phase_g.lr);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.phase_g.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let milestones = [(cfg.phase_g.max_epochs * 3) / 5, (cfg.phase_g.max_epochs * 17) / 20];

    for epoch in 0..cfg.phase_g.max_epochs {
        if cfg.phase_g.lr_decay && milestones.contains(&epoch) && epoch > 0 {
            opt.lr *= 0.1;
            stale = 0;
        }
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.phase_g.batch_size.max(1)) {
            let bx = inputs.gather_rows(chunk)?;
            let mut g = Graph::new();
            let bb_ids = bind_from_pool(&mut g, &pool, "backbone", &stack.backbone);
            let head_ids: Vec<_> = stack
                .heads
                .iter()
                .enumerate()
                .map(|(ki, h)| bind_from_pool(&mut g, &pool, &format!("head{ki}"), h))
                .collect();
            let x = g.input(bx);
            let psi = stack.backbone.forward_on_graph(&mut g, &bb_ids, x, 0..stack.backbone.spec.layers.len())?;
            let mut total: Option<crate::graph::NodeId> = None;
            for (ki, head) in stack.heads.iter().enumerate() {
                let phi =
                    head.forward_on_graph(&mut g, &head_ids[ki], psi, 0..head.spec.layers.len())?;
                let bt = g.input(targets[ki].gather_rows(chunk)?);
                let l = g.mse(phi, bt)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss = total.expect("k >= 2");
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(FcxError::TrainingDiverged(format!(
                    "phase g loss became {lv} at epoch {epoch}"
                )));
            }
            g.backward(loss)?;
            let grads = g.trainable_grads();
            opt.step(&mut pool, &grads)?;
            loss_sum += lv;
            batches += 1;
        }
        let epoch_loss = loss_sum / batches as f64;
        if epoch_loss < best * (1.0 - cfg.phase_g.rel_tol) {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.phase_g.patience {
                break;
            }
        }
    }

    let mut final_loss = eval_total(&pool, stack)?;
    if final_loss > init_loss {
        pool = init_pool;
        final_loss = init_loss;
    }

    // write the pool back into the stack
    let bb_params: BTreeMap<String, Tensor> = stack
        .backbone
        .params()
        .keys()
        .map(|n| (n.clone(), pool[&prefixed("backbone", n)].clone()))
        .collect();
    stack.backbone.set_params(bb_params)?;
    stack.backbone.freeze();
    for (ki, head) in stack.heads.iter_mut().enumerate() {
        let p: BTreeMap<String, Tensor> = head
            .params()
            .keys()
            .map(|n| (n.clone(), pool[&prefixed(&format!("head{ki}"), n)].clone()))
            .collect();
        head.set_params(p)?;
        head.freeze();
    }
    stack.distill_loss = Some((init_loss, final_loss));
    stack.phase = Phase::GTrained;
    Ok(())
}

/// Phase h: trains the inverses over R sequential cycle iterations; the
/// backbone and heads stay frozen. Each iteration fits every `h_k` to map
/// `g_k(ψ_{r-1}(x))` back to `ψ_{r-1}(x)`, then recomputes
/// `ψ_r = E_k[h_k(g_k(ψ_{r-1}))]`.
pub fn train_phase_h(
    stack: &mut ReliabilityStack,
    inputs: &Tensor,
    cfg: &ReliabilityConfig,
) -> Result<()> {
    if stack.phase != Phase::GTrained {
        return Err(FcxError::PhaseOrderError("phase h requires a completed phase g"));
    }
    let k = stack.heads.len();
    let mut psi_prev = stack.backbone.forward(inputs)?;
    let mut seeds = ChaCha20Rng::seed_from_u64(cfg.phase_h.seed);

    for r in 1..=stack.cycle_iterations {
        let mut init_total = 0.0;
        let mut final_total = 0.0;
        let mut recon: Option<Tensor> = None;
        for ki in 0..k {
            let u = stack.heads[ki].forward(&psi_prev)?;
            let mut inv = stack.inverses[ki].thawed_clone();
            let mut hcfg = cfg.phase_h.clone();
            hcfg.seed = seeds.next_u64();
            let report = fit(&mut inv, &u, &TrainTarget::Tensors(&psi_prev), &hcfg)?;
            init_total += report.init_loss;
            final_total += report.final_loss;
            stack.inverses[ki] = inv;
            let back = stack.inverses[ki].forward(&u)?;
            recon = Some(match recon {
                None => back,
                Some(acc) => acc.add(&back)?,
            });
        }
        stack.cycle_losses.push(CyclePhaseLoss { iteration: r, init: init_total, r#final: final_total });
        psi_prev = recon.expect("k >= 2").scale(1.0 / k as f64);
    }

    // Eq.-5-style total at the returned parameters.
    let mut total = 0.0;
    let mut psi = stack.backbone.forward(inputs)?;
    for _ in 1..=stack.cycle_iterations {
        let mut recon: Option<Tensor> = None;
        for ki in 0..k {
            let u = stack.heads[ki].forward(&psi)?;
            let back = stack.inverses[ki].forward(&u)?;
            total += crate::ops::mse_forward(&back, &psi)?;
            recon = Some(match recon {
                None => back,
                Some(acc) => acc.add(&back)?,
            });
        }
        psi = recon.expect("k >= 2").scale(1.0 / k as f64);
    }
    stack.cycle_total_at_final = Some(total);
    for inv in stack.inverses.iter_mut() {
        inv.freeze();
    }
    stack.phase = Phase::HTrained;
    Ok(())
}

/// Reliable/unreliable split for every network at the stack's depth.
#[derive(Debug, Clone)]
pub struct ReliabilitySplit {
    pub depth: usize,
    /// `Φ_k^reli(x) = g_k(ψ(x))`, standardized space of teacher k.
    pub reli: Vec<Tensor>,
    /// `Φ_k^unreli = Φ_k - Φ_k^reli` (complement against the canonical phi).
    pub unreli: Vec<Tensor>,
    /// Canonical distilled feature the additive identity is exact for.
    pub phi: Vec<Tensor>,
    pub var_reli: Vec<f64>,
    pub var_phi: Vec<f64>,
    /// Var of each teacher's standardized tap feature.
    pub var_feature: Vec<f64>,
}

/// Extracts the split. `decs[k]` must be the module-disentangler
/// decomposition for network `k` containing the stack's depth, over the
/// same dataset and standardization space.
pub fn extract_split(
    stack: &ReliabilityStack,
    decs: &[&FeatureDecomposition],
    teachers: &[Network],
    inputs: &Tensor,
) -> Result<ReliabilitySplit> {
    if stack.phase != Phase::HTrained {
        return Err(FcxError::PhaseOrderError("split extraction requires both phases trained"));
    }
    let k = stack.heads.len();
    if decs.len() != k || teachers.len() != k {
        return Err(FcxError::ShapeMismatch { expected: vec![k], got: vec![decs.len()] });
    }
    let psi = stack.backbone.forward(inputs)?;
    let mut reli = Vec::with_capacity(k);
    let mut unreli = Vec::with_capacity(k);
    let mut phi_canon = Vec::with_capacity(k);
    let mut var_reli = Vec::with_capacity(k);
    let mut var_phi = Vec::with_capacity(k);
    let mut var_feature = Vec::with_capacity(k);
    for ki in 0..k {
        let dec = decs[ki];
        let idx = dec
            .depths
            .iter()
            .position(|&d| d == stack.depth)
            .ok_or(FcxError::DepthMismatch { expected: stack.depth, got: dec.depths[0] })?;
        if dec.standardizer != stack.standardizers[ki] {
            return Err(FcxError::IncompatibleDecomposition(format!(
                "network {ki}: decomposition and stack use different standardizers"
            )));
        }
        let r = stack.heads[ki].forward(&psi)?;
        let split = exact_split(&dec.phi[idx], &r)?;
        var_reli.push(variance_of_batch(&r)?);
        var_phi.push(variance_of_batch(&split.canonical)?);
        let f = teachers[ki].forward_to_feature(inputs)?;
        let f_std = match &stack.standardizers[ki] {
            Some(s) => s.apply(&f)?,
            None => f,
        };
        var_feature.push(variance_of_batch(&f_std)?);
        reli.push(r);
        unreli.push(split.complement);
        phi_canon.push(split.canonical);
    }
    Ok(ReliabilitySplit { depth: stack.depth, reli, unreli, phi: phi_canon, var_reli, var_phi, var_feature })
}

/// `ρ^reli` per network: Var[reliable] over the configured denominator.
pub fn reliability_rho(split: &ReliabilitySplit, denominator: RhoDenominator) -> Result<Vec<f64>> {
    let denom = match denominator {
        RhoDenominator::DistilledPhi => &split.var_phi,
        RhoDenominator::TeacherFeature => &split.var_feature,
    };
    split
        .var_reli
        .iter()
        .zip(denom)
        .map(|(&num, &den)| {
            if den <= 0.0 {
                Err(FcxError::DegenerateFeature("zero variance in rho denominator".into()))
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disentangler::{decompose, distill, DistillConfig};
    use crate::tensor::Init;
    use crate::zoo::{build_task_net, DisentanglerFamilySpec};

    const IN_SHAPE: [usize; 3] = [1, 8, 8];
    const TAP: [usize; 3] = [4, 4, 4];

    fn quick_cfg() -> ReliabilityConfig {
        let mut cfg = ReliabilityConfig::default();
        cfg.base_widths = [8, 12, 16];
        cfg.phase_g = TrainConfig { max_epochs: 8, batch_size: 8, ..Default::default() };
        cfg.phase_h = TrainConfig { max_epochs: 10, batch_size: 8, lr: 1e-2, ..Default::default() };
        cfg.cycle_iterations = 2;
        cfg
    }

    fn teachers(k: usize) -> Vec<Network> {
        (0..k).map(|i| build_task_net(1, 50 + i as u64, &IN_SHAPE, &TAP).unwrap()).collect()
    }

    #[test]
    fn build_shapes_and_counts() {
        let cfg = quick_cfg();
        let taps = vec![TAP.to_vec(), vec![6, 4, 4], vec![4, 4, 4]];
        let stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 1).unwrap();
        assert_eq!(stack.backbone.spec.relu_count(), 4);
        assert_eq!(stack.heads.len(), 3);
        assert_eq!(stack.inverses.len(), 3);
        // head k maps latent to teacher-k tap shape
        assert_eq!(stack.heads[1].spec.output_shape().unwrap(), vec![6, 4, 4]);
        // heads and inverses are purely linear
        for h in stack.heads.iter().chain(&stack.inverses) {
            assert_eq!(h.spec.relu_count(), 0);
        }
    }

    #[test]
    fn too_few_networks() {
        let cfg = quick_cfg();
        assert!(matches!(
            build_reliability_stack(4, &IN_SHAPE, &[TAP.to_vec()], &cfg, 1),
            Err(FcxError::TooFewNetworks { k: 1 })
        ));
    }

    #[test]
    fn invalid_depth() {
        let cfg = quick_cfg();
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        assert!(matches!(
            build_reliability_stack(5, &IN_SHAPE, &taps, &cfg, 1),
            Err(FcxError::InvalidDepth(_))
        ));
    }

    #[test]
    fn phase_order_enforced() {
        let cfg = quick_cfg();
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        let mut stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 1).unwrap();
        let x = Tensor::new(&[8, 1, 8, 8], Init::Uniform(-1.0, 1.0), 3).unwrap();
        assert!(matches!(
            train_phase_h(&mut stack, &x, &cfg),
            Err(FcxError::PhaseOrderError(_))
        ));
    }

    #[test]
    fn phase_g_makes_progress_and_phase_h_preserves_upstream() {
        let cfg = quick_cfg();
        let ts = teachers(2);
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        let mut stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 2).unwrap();
        let x = Tensor::new(&[16, 1, 8, 8], Init::Uniform(-1.0, 1.0), 4).unwrap();
        train_phase_g(&mut stack, &ts, &x, &cfg).unwrap();
        let (init, fin) = stack.distill_loss.unwrap();
        assert!(fin <= init, "phase g regressed: {init} -> {fin}");

        let bb_before: Vec<f64> =
            stack.backbone.params().values().flat_map(|t| t.data().to_vec()).collect();
        let heads_before: Vec<f64> =
            stack.heads.iter().flat_map(|h| h.params().values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()).collect();
        train_phase_h(&mut stack, &x, &cfg).unwrap();
        let bb_after: Vec<f64> =
            stack.backbone.params().values().flat_map(|t| t.data().to_vec()).collect();
        let heads_after: Vec<f64> =
            stack.heads.iter().flat_map(|h| h.params().values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()).collect();
        assert_eq!(bb_before, bb_after);
        assert_eq!(heads_before, heads_after);
        // cycle losses are non-negative and non-increasing within each phase
        for cl in &stack.cycle_losses {
            assert!(cl.init >= 0.0 && cl.r#final >= 0.0);
            assert!(cl.r#final <= cl.init + 1e-12);
        }
        assert_eq!(stack.cycle_losses.len(), 2);
    }

    #[test]
    fn zero_cycle_iterations_is_noop() {
        let mut cfg = quick_cfg();
        cfg.cycle_iterations = 0;
        let ts = teachers(2);
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        let mut stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 5).unwrap();
        let x = Tensor::new(&[8, 1, 8, 8], Init::Uniform(-1.0, 1.0), 6).unwrap();
        train_phase_g(&mut stack, &ts, &x, &cfg).unwrap();
        let inv_before: Vec<f64> =
            stack.inverses.iter().flat_map(|h| h.params().values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()).collect();
        train_phase_h(&mut stack, &x, &cfg).unwrap();
        let inv_after: Vec<f64> =
            stack.inverses.iter().flat_map(|h| h.params().values().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()).collect();
        assert_eq!(inv_before, inv_after);
        assert!(stack.cycle_losses.is_empty());
        assert_eq!(stack.cycle_total_at_final, Some(0.0));
    }

    #[test]
    fn invertible_heads_admit_tiny_cycle_loss() {
        // With square, well-conditioned linear heads an exact linear inverse
        // exists; training should push the cycle loss far below Var[psi].
        let mut cfg = quick_cfg();
        cfg.cycle_iterations = 1;
        cfg.phase_h = TrainConfig {
            max_epochs: 500,
            batch_size: 2,
            lr: 3e-2,
            patience: 80,
            ..Default::default()
        };
        let ts = teachers(2);
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        let mut stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 7).unwrap();
        let x = Tensor::new(&[24, 1, 8, 8], Init::Uniform(-1.0, 1.0), 8).unwrap();
        train_phase_g(&mut stack, &ts, &x, &cfg).unwrap();
        train_phase_h(&mut stack, &x, &cfg).unwrap();

        let psi = stack.backbone.forward(&x).unwrap();
        let var_psi = variance_of_batch(&psi).unwrap();
        let numel = (psi.len() / psi.shape()[0]) as f64;
        let cl = &stack.cycle_losses[0];

        // least-squares oracle: solve each inverse in closed form per output
        // channel over the cached features and confirm the attainable loss
        let u = stack.heads[0].forward(&psi).unwrap();
        let oracle_mse = linear_fit_oracle_mse(&u, &psi);
        assert!(
            oracle_mse * numel <= 1e-6 * var_psi,
            "oracle says inverse is not exact: {oracle_mse}"
        );
        assert!(
            cl.r#final / 2.0 * numel < 1e-4 * var_psi,
            "trained cycle loss {} vs Var[psi] {var_psi}",
            cl.r#final
        );
    }

    /// Closed-form ridge-free least squares for a 1x1-conv map u -> psi,
    /// fitted per spatial site across channels jointly (weights + bias).
    fn linear_fit_oracle_mse(u: &Tensor, psi: &Tensor) -> f64 {
        let (n, cu) = (u.shape()[0], u.shape()[1]);
        let cp = psi.shape()[1];
        let hw = u.shape()[2] * u.shape()[3];
        // design rows: every (sample, site) pair; predictors = u channels + 1
        let rows = n * hw;
        let d = cu + 1;
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d * cp];
        for ni in 0..n {
            for s in 0..hw {
                let mut xrow = Vec::with_capacity(d);
                for c in 0..cu {
                    xrow.push(u.data()[(ni * cu + c) * hw + s]);
                }
                xrow.push(1.0);
                for a in 0..d {
                    for b in 0..d {
                        xtx[a * d + b] += xrow[a] * xrow[b];
                    }
                    for t in 0..cp {
                        xty[a * cp + t] += xrow[a] * psi.data()[(ni * cp + t) * hw + s];
                    }
                }
            }
        }
        // solve (XtX) W = XtY by Gaussian elimination with partial pivoting
        let mut a = xtx;
        let mut b = xty;
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if a[r * d + col].abs() > a[piv * d + col].abs() {
                    piv = r;
                }
            }
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
            }
            for j in 0..cp {
                b.swap(col * cp + j, piv * cp + j);
            }
            let diag = a[col * d + col];
            for r in 0..d {
                if r == col || a[r * d + col] == 0.0 {
                    continue;
                }
                let f = a[r * d + col] / diag;
                for j in 0..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
                for j in 0..cp {
                    b[r * cp + j] -= f * b[col * cp + j];
                }
            }
        }
        let mut w = vec![0.0; d * cp];
        for r in 0..d {
            for j in 0..cp {
                w[r * cp + j] = b[r * cp + j] / a[r * d + r];
            }
        }
        // residual MSE
        let mut acc = 0.0;
        for ni in 0..n {
            for s in 0..hw {
                for t in 0..cp {
                    let mut pred = w[cu * cp + t];
                    for c in 0..cu {
                        pred += u.data()[(ni * cu + c) * hw + s] * w[c * cp + t];
                    }
                    let e = pred - psi.data()[(ni * cp + t) * hw + s];
                    acc += e * e;
                }
            }
        }
        acc / (rows * cp) as f64
    }

    #[test]
    fn split_identity_and_rho() {
        let cfg = quick_cfg();
        let ts = teachers(2);
        let taps = vec![TAP.to_vec(), TAP.to_vec()];
        let mut stack = build_reliability_stack(4, &IN_SHAPE, &taps, &cfg, 9).unwrap();
        let x = Tensor::new(&[12, 1, 8, 8], Init::Uniform(-1.0, 1.0), 10).unwrap();
        train_phase_g(&mut stack, &ts, &x, &cfg).unwrap();
        train_phase_h(&mut stack, &x, &cfg).unwrap();

        // module-disentangler decompositions per network at depth 4
        let family = DisentanglerFamilySpec {
            m_values: vec![1],
            width_factor: 1.0,
            base_widths: [8, 12, 16],
            input_shape: IN_SHAPE.to_vec(),
            output_shape: TAP.to_vec(),
        };
        let mut dcfg = DistillConfig::default();
        dcfg.train.max_epochs = 6;
        let fams: Vec<_> =
            ts.iter().map(|t| distill(t, &family, &x, &dcfg).unwrap()).collect();
        let decs: Vec<_> = ts
            .iter()
            .zip(&fams)
            .map(|(t, f)| decompose(f, t, &x, "unit").unwrap())
            .collect();
        let dec_refs: Vec<&FeatureDecomposition> = decs.iter().collect();
        let split = extract_split(&stack, &dec_refs, &ts, &x).unwrap();

        // additive identity is bit-exact against the canonical phi
        for ki in 0..2 {
            let rec = split.reli[ki].add(&split.unreli[ki]).unwrap();
            assert_eq!(rec.data(), split.phi[ki].data());
        }
        let rho = reliability_rho(&split, RhoDenominator::DistilledPhi).unwrap();
        assert_eq!(rho.len(), 2);
        for r in &rho {
            assert!(*r >= 0.0);
        }
        // independent two-pass variance recomputation
        for ki in 0..2 {
            let oracle = variance_of_batch(&split.reli[ki]).unwrap()
                / variance_of_batch(&split.phi[ki]).unwrap();
            assert!((rho[ki] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_edge_cases() {
        // reli identical to phi -> rho = 1; constant reli -> rho = 0
        let phi = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let split = ReliabilitySplit {
            depth: 4,
            reli: vec![phi.clone()],
            unreli: vec![Tensor::zeros(&[2, 1, 1, 1])],
            phi: vec![phi.clone()],
            var_reli: vec![variance_of_batch(&phi).unwrap()],
            var_phi: vec![variance_of_batch(&phi).unwrap()],
            var_feature: vec![1.0],
        };
        let rho = reliability_rho(&split, RhoDenominator::DistilledPhi).unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-12);

        let constant = Tensor::from_vec(&[2, 1, 1, 1], vec![5.0, 5.0]).unwrap();
        let split2 = ReliabilitySplit {
            depth: 4,
            reli: vec![constant.clone()],
            unreli: vec![phi.sub(&constant).unwrap()],
            phi: vec![phi.clone()],
            var_reli: vec![variance_of_batch(&constant).unwrap()],
            var_phi: vec![variance_of_batch(&phi).unwrap()],
            var_feature: vec![1.0],
        };
        let rho2 = reliability_rho(&split2, RhoDenominator::DistilledPhi).unwrap();
        assert_eq!(rho2[0], 0.0);

        // joint rescaling leaves rho unchanged
        let s = 2.5;
        let split3 = ReliabilitySplit {
            depth: 4,
            reli: vec![phi.scale(s)],
            unreli: vec![Tensor::zeros(&[2, 1, 1, 1])],
            phi: vec![phi.scale(s)],
            var_reli: vec![variance_of_batch(&phi.scale(s)).unwrap()],
            var_phi: vec![variance_of_batch(&phi.scale(s)).unwrap()],
            var_feature: vec![1.0],
        };
        let rho3 = reliability_rho(&split3, RhoDenominator::DistilledPhi).unwrap();
        assert!((rho3[0] - rho[0]).abs() < 1e-12);
    }
}
