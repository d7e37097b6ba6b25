//! Complexity profiles: reliable/unreliable variance increments across the
//! depth list, normalized by the teacher feature's variance.

use crate::error::{FcxError, Result};
use crate::reliability::ReliabilitySplit;
use crate::tensor::{variance_of_batch, Tensor};
use serde::{Deserialize, Serialize};

/// `2 * |depths|` non-negative reals: for each depth, the reliable
/// increment `Var[Φ^(l),reli - Φ^(l-),reli] / Var[f]`, then the unreliable
/// increments in the same depth order. The baseline below the first depth
/// is the zero tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProfile {
    pub depths: Vec<usize>,
    pub reliable: Vec<f64>,
    pub unreliable: Vec<f64>,
}

impl ComplexityProfile {
    /// Flat feature vector: reliable increments then unreliable increments.
    pub fn as_vector(&self) -> Vec<f64> {
        let mut v = self.reliable.clone();
        v.extend_from_slice(&self.unreliable);
        v
    }

    pub fn len(&self) -> usize {
        2 * self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Builds the profile for one network from its splits at every depth in
/// ascending order. `splits[i]` must carry that network's tensors at
/// `depths[i]` (network index `k` inside each split), and `var_f` is the
/// variance of the network's tap feature over the same samples.
pub fn complexity_profile(
    depths: &[usize],
    splits: &[&ReliabilitySplit],
    k: usize,
    var_f: f64,
) -> Result<ComplexityProfile> {
    if depths.is_empty() {
        return Err(FcxError::EmptyInput("profile needs at least one depth"));
    }
    if var_f <= 0.0 {
        return Err(FcxError::DegenerateFeature("Var[f] must be positive".into()));
    }
    if depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FcxError::InvalidDepth(format!("depths must ascend, got {depths:?}")));
    }
    for &d in depths {
        if !splits.iter().any(|s| s.depth == d) {
            return Err(FcxError::MissingDepth(d));
        }
    }
    let split_at = |d: usize| splits.iter().find(|s| s.depth == d).unwrap();

    let mut reliable = Vec::with_capacity(depths.len());
    let mut unreliable = Vec::with_capacity(depths.len());
    let mut prev: Option<(&Tensor, &Tensor)> = None;
    for &d in depths {
        let s = split_at(d);
        if k >= s.reli.len() {
            return Err(FcxError::InvalidShape(format!(
                "network index {k} out of range for split with {} networks",
                s.reli.len()
            )));
        }
        let (reli, unreli) = (&s.reli[k], &s.unreli[k]);
        let (r_inc, u_inc) = match prev {
            None => (variance_of_batch(reli)?, variance_of_batch(unreli)?),
            Some((pr, pu)) => (
                variance_of_batch(&reli.sub(pr)?)?,
                variance_of_batch(&unreli.sub(pu)?)?,
            ),
        };
        reliable.push(r_inc / var_f);
        unreliable.push(u_inc / var_f);
        prev = Some((reli, unreli));
    }
    Ok(ComplexityProfile { depths: depths.to_vec(), reliable, unreliable })
}
