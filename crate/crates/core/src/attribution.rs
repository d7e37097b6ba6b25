//! Shapley attribution over complexity components.
//!
//! Components are the players; the residual rides along as background
//! context in every coalition. Two games are built per analysis: the change
//! of the training loss, and the change of the train/test loss gap. Exact
//! enumeration is the default (the component count is small); permutation
//! sampling is available for longer depth lists.

use crate::disentangler::{DistilledFamily, FeatureDecomposition};
use crate::error::{FcxError, Result};
use crate::tensor::Tensor;
use crate::zoo::Network;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const EXACT_PLAYER_LIMIT: usize = 20;

/// A coalition game `v : 2^N -> R` with a memoized value oracle. Every
/// subset is evaluated at most once per game instance.
pub struct CoalitionGame {
    n_players: usize,
    eval: Box<dyn Fn(u32) -> Result<f64> + Sync + Send>,
    cache: Mutex<HashMap<u32, f64>>,
    evals: AtomicUsize,
}

impl CoalitionGame {
    pub fn new(
        n_players: usize,
        eval: impl Fn(u32) -> Result<f64> + Sync + Send + 'static,
    ) -> Self {
        CoalitionGame {
            n_players,
            eval: Box::new(eval),
            cache: Mutex::new(HashMap::new()),
            evals: AtomicUsize::new(0),
        }
    }

    /// Table-backed game; `values[mask]` is the worth of that subset.
    pub fn from_table(n_players: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), 1 << n_players);
        CoalitionGame::new(n_players, move |mask| Ok(values[mask as usize]))
    }

    pub fn n_players(&self) -> usize {
        self.n_players
    }

    /// Number of underlying oracle evaluations so far.
    pub fn eval_count(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn value(&self, mask: u32) -> Result<f64> {
        debug_assert!(mask < (1u64 << self.n_players) as u32 || self.n_players == 32);
        let mut cache = self.cache.lock().expect("game cache poisoned");
        if let Some(&v) = cache.get(&mask) {
            return Ok(v);
        }
        let v = (self.eval)(mask)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        cache.insert(mask, v);
        Ok(v)
    }

    /// Evaluates all missing masks in parallel, each exactly once.
    fn precompute(&self, masks: impl Iterator<Item = u32>) -> Result<()> {
        let missing: Vec<u32> = {
            let cache = self.cache.lock().expect("game cache poisoned");
            masks.filter(|m| !cache.contains_key(m)).collect()
        };
        let computed: Result<Vec<(u32, f64)>> = missing
            .par_iter()
            .map(|&m| Ok((m, (self.eval)(m)?)))
            .collect();
        let computed = computed?;
        let mut cache = self.cache.lock().expect("game cache poisoned");
        for (m, v) in computed {
            if cache.insert(m, v).is_none() {
                self.evals.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }
}

/// Exact Shapley values: `φ_i = Σ_S |S|!(n-|S|-1)!/n! [v(S∪{i}) - v(S)]`
/// over all subsets not containing `i`. All `2^n` subset values are
/// computed at most once each.
pub fn exact_shapley(game: &CoalitionGame) -> Result<Vec<f64>> {
    let n = game.n_players();
    if n > EXACT_PLAYER_LIMIT {
        return Err(FcxError::TooManyPlayers { n, max: EXACT_PLAYER_LIMIT });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let total = 1u32 << n;
    game.precompute(0..total)?;

    // subset-size weights as exact integer ratios
    let fact = |k: usize| -> u128 { (1..=k as u128).product::<u128>().max(1) };
    let denom = fact(n) as f64;
    let weights: Vec<f64> =
        (0..n).map(|s| (fact(s) * fact(n - 1 - s)) as f64 / denom).collect();

    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for mask in 0..total {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            *phi_i += weights[s] * (game.value(mask | bit)? - game.value(mask)?);
        }
    }
    Ok(phi)
}

/// Monte-Carlo Shapley estimate with per-player standard errors: averages
/// marginal contributions over `permutations` uniformly sampled player
/// orders. Unbiased; reproducible by seed.
pub fn sampled_shapley(
    game: &CoalitionGame,
    permutations: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if permutations == 0 {
        return Err(FcxError::EmptyInput("at least one permutation required"));
    }
    let n = game.n_players();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut sums = vec![0.0; n];
    let mut sq_sums = vec![0.0; n];
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut mask = 0u32;
        for &i in &order {
            let before = game.value(mask)?;
            mask |= 1 << i;
            let after = game.value(mask)?;
            let marginal = after - before;
            sums[i] += marginal;
            sq_sums[i] += marginal * marginal;
        }
    }
    let p = permutations as f64;
    let phi: Vec<f64> = sums.iter().map(|s| s / p).collect();
    let stderr: Vec<f64> = phi
        .iter()
        .zip(&sq_sums)
        .map(|(&m, &sq)| {
            if permutations == 1 {
                f64::INFINITY
            } else {
                let var = (sq / p - m * m).max(0.0) * p / (p - 1.0);
                (var / p).sqrt()
            }
        })
        .collect();
    Ok((phi, stderr))
}

/// Ground truth for the task loss inside the games.
#[derive(Debug, Clone)]
pub enum TaskTargets {
    Labels(Vec<usize>),
    Tensors(Tensor),
}

impl TaskTargets {
    fn len(&self) -> usize {
        match self {
            TaskTargets::Labels(l) => l.len(),
            TaskTargets::Tensors(t) => t.shape()[0],
        }
    }
}

/// Mean task loss of the teacher head applied to a raw-space feature batch.
fn head_loss(teacher: &Network, feature_raw: &Tensor, targets: &TaskTargets) -> Result<f64> {
    let out = teacher.head_forward(feature_raw)?;
    match targets {
        TaskTargets::Labels(l) => Ok(crate::ops::softmax_ce_forward(&out, l)?.0),
        TaskTargets::Tensors(t) => crate::ops::mse_forward(&out, t),
    }
}

struct CoalitionAssembler {
    residual: Tensor,
    components: Vec<Tensor>,
    family_standardizer: Option<crate::disentangler::Standardizer>,
}

impl CoalitionAssembler {
    fn new(dec: &FeatureDecomposition, family: &DistilledFamily) -> Self {
        CoalitionAssembler {
            residual: dec.residual.clone(),
            components: dec.components.clone(),
            family_standardizer: family.standardizer.clone(),
        }
    }

    /// `Δf + Σ_{i∈S} c_i` in standardized space (ascending component order),
    /// mapped back to raw teacher space. The full mask reproduces the stored
    /// teacher feature bit-exactly before un-standardization.
    fn assemble(&self, mask: u32) -> Result<Tensor> {
        let mut t = Tensor::zeros(self.residual.shape());
        let mut first = true;
        for (i, c) in self.components.iter().enumerate() {
            if mask & (1 << i) != 0 {
                if first {
                    t = c.clone();
                    first = false;
                } else {
                    t.add_assign(c)?;
                }
            }
        }
        let coalition = if first { self.residual.clone() } else { t.add(&self.residual)? };
        match &self.family_standardizer {
            Some(s) => s.invert(&coalition),
            None => Ok(coalition),
        }
    }
}

fn check_compatible(
    dec: &FeatureDecomposition,
    family: &DistilledFamily,
    teacher: &Network,
    targets: &TaskTargets,
) -> Result<()> {
    if dec.depths != family.depths {
        return Err(FcxError::IncompatibleDecomposition(format!(
            "decomposition depths {:?} do not match family depths {:?}",
            dec.depths, family.depths
        )));
    }
    let tap = teacher.spec.tap_shape()?;
    if dec.teacher_feature.shape()[1..] != tap {
        return Err(FcxError::IncompatibleDecomposition(format!(
            "feature shape {:?} does not match teacher tap {:?}",
            &dec.teacher_feature.shape()[1..],
            tap
        )));
    }
    if targets.len() != dec.n_samples() {
        return Err(FcxError::IncompatibleDecomposition(format!(
            "{} targets for {} samples",
            targets.len(),
            dec.n_samples()
        )));
    }
    Ok(())
}

/// Training-loss game: `v(S) = E[L(Δf)] - E[L(Δf + Σ_S c)]` over the train
/// set; `v(∅) = 0` by construction. Coalition features are un-standardized
/// back to teacher space before the head runs.
pub fn train_loss_game(
    dec: &FeatureDecomposition,
    family: &DistilledFamily,
    teacher: &Network,
    train_targets: &TaskTargets,
) -> Result<CoalitionGame> {
    check_compatible(dec, family, teacher, train_targets)?;
    let assembler = CoalitionAssembler::new(dec, family);
    let teacher = teacher.clone();
    let targets = train_targets.clone();
    let baseline = head_loss(&teacher, &assembler.assemble(0)?, &targets)?;
    let n = dec.n_components();
    Ok(CoalitionGame::new(n, move |mask| {
        let loss = head_loss(&teacher, &assembler.assemble(mask)?, &targets)?;
        Ok(baseline - loss)
    }))
}

/// Over-fitting game on the train/test loss gap:
/// `w(S) = L_overfit(Δf + Σ_S c) - L_overfit(Δf)` where
/// `L_overfit(t) = E_test[L(t)] - E_train[L(t)]`; `w(∅) = 0`.
pub fn overfit_game(
    train_dec: &FeatureDecomposition,
    test_dec: Option<&FeatureDecomposition>,
    family: &DistilledFamily,
    teacher: &Network,
    train_targets: &TaskTargets,
    test_targets: &TaskTargets,
) -> Result<CoalitionGame> {
    let test_dec = test_dec.ok_or(FcxError::MissingSplit(
        "overfit game requires a decomposition of the test split",
    ))?;
    check_compatible(train_dec, family, teacher, train_targets)?;
    check_compatible(test_dec, family, teacher, test_targets)?;
    if train_dec.depths != test_dec.depths {
        return Err(FcxError::IncompatibleDecomposition(
            "train and test decompositions come from different depth lists".into(),
        ));
    }
    let train_asm = CoalitionAssembler::new(train_dec, family);
    let test_asm = CoalitionAssembler::new(test_dec, family);
    let teacher = teacher.clone();
    let train_targets = train_targets.clone();
    let test_targets = test_targets.clone();
    let gap = |mask: u32, train_asm: &CoalitionAssembler, test_asm: &CoalitionAssembler, teacher: &Network, train_targets: &TaskTargets, test_targets: &TaskTargets| -> Result<f64> {
        let lt = head_loss(teacher, &test_asm.assemble(mask)?, test_targets)?;
        let ln = head_loss(teacher, &train_asm.assemble(mask)?, train_targets)?;
        Ok(lt - ln)
    };
    let baseline = gap(0, &train_asm, &test_asm, &teacher, &train_targets, &test_targets)?;
    let n = train_dec.n_components();
    Ok(CoalitionGame::new(n, move |mask| {
        let g = gap(mask, &train_asm, &test_asm, &teacher, &train_targets, &test_targets)?;
        Ok(g - baseline)
    }))
}

/// Attribution value that may be undefined (with the reason recorded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value")]
pub enum AlphaValue {
    Defined(f64),
    Undefined { reason: String },
}

impl AlphaValue {
    pub fn as_defined(&self) -> Option<f64> {
        match self {
            AlphaValue::Defined(v) => Some(*v),
            AlphaValue::Undefined { .. } => None,
        }
    }
}

/// `α_effective = φ_train / sqrt(Var[c])`; degenerate (zero-variance)
/// components are undefined.
pub fn effectiveness_alpha(phi_train: &[f64], var_components: &[f64]) -> Vec<AlphaValue> {
    phi_train
        .iter()
        .zip(var_components)
        .map(|(&phi, &var)| {
            if var > 0.0 {
                AlphaValue::Defined(phi / var.sqrt())
            } else {
                AlphaValue::Undefined { reason: "component variance is zero".into() }
            }
        })
        .collect()
}

/// `α_overfit = φ_overfit / φ_train`, guarded: undefined where
/// `|φ_train| < ε` (default `1e-6 * |v_train(N)|`).
pub fn overfit_alpha(
    phi_overfit: &[f64],
    phi_train: &[f64],
    v_train_total: f64,
    guard: Option<f64>,
) -> Vec<AlphaValue> {
    let eps = guard.unwrap_or(1e-6 * v_train_total.abs());
    phi_overfit
        .iter()
        .zip(phi_train)
        .map(|(&po, &pt)| {
            if pt.abs() >= eps && pt != 0.0 {
                AlphaValue::Defined(po / pt)
            } else {
                AlphaValue::Undefined {
                    reason: format!("|phi_train| = {} below guard {eps}", pt.abs()),
                }
            }
        })
        .collect()
}

/// Shapley attributions and derived metrics for one decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub depths: Vec<usize>,
    pub phi_train: Vec<f64>,
    pub phi_overfit: Vec<f64>,
    pub alpha_effective: Vec<AlphaValue>,
    pub alpha_overfit: Vec<AlphaValue>,
    pub v_train_total: f64,
    pub v_overfit_total: f64,
    pub var_components: Vec<f64>,
}

/// Runs both games exactly and assembles the report.
pub fn attribute(
    train_game: &CoalitionGame,
    over_game: &CoalitionGame,
    depths: &[usize],
    var_components: &[f64],
) -> Result<AttributionReport> {
    let phi_train = exact_shapley(train_game)?;
    let phi_overfit = exact_shapley(over_game)?;
    let full = (1u32 << train_game.n_players()) - 1;
    let v_train_total = train_game.value(full)?;
    let v_overfit_total = over_game.value(full)?;
    let alpha_effective = effectiveness_alpha(&phi_train, var_components);
    let alpha_overfit = overfit_alpha(&phi_overfit, &phi_train, v_train_total, None);
    Ok(AttributionReport {
        depths: depths.to_vec(),
        phi_train,
        phi_overfit,
        alpha_effective,
        alpha_overfit,
        v_train_total,
        v_overfit_total,
        var_components: var_components.to_vec(),
    })
}

/// CSV of every subset's worth in both games:
/// `subset_bitmask,v_train,v_overfit`.
pub fn subset_table_csv(train_game: &CoalitionGame, over_game: &CoalitionGame) -> Result<String> {
    let n = train_game.n_players();
    let mut out = String::from("subset_bitmask,v_train,v_overfit\n");
    for mask in 0..(1u32 << n) {
        out.push_str(&format!(
            "{mask},{},{}\n",
            train_game.value(mask)?,
            over_game.value(mask)?
        ));
    }
    Ok(out)
}
