use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::network::PrunerNetwork;

/// Per-channel weights for one conv layer, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub layer_index: usize,
    pub values: Vec<f64>,
}

impl ChannelWeights {
    pub fn new(layer_index: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Mask(format!(
                "layer {layer_index}: weight {v} outside [0, 1]"
            )));
        }
        Ok(ChannelWeights {
            layer_index,
            values,
        })
    }

    pub fn ones(layer_index: usize, n: usize) -> Self {
        ChannelWeights {
            layer_index,
            values: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone())
    }
}

/// Layers whose channel weights are forced to be identical. The first
/// member is the representative whose head output is used for all.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGroup {
    pub members: Vec<usize>,
}

impl MaskGroup {
    pub fn representative(&self) -> usize {
        self.members[0]
    }
}

fn check_groups(groups: &[MaskGroup]) -> Result<()> {
    let mut seen = Vec::new();
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::Mask("empty mask group".into()));
        }
        for m in &g.members {
            if seen.contains(m) {
                return Err(Error::Mask(format!("layer {m} appears in two mask groups")));
            }
            seen.push(*m);
        }
    }
    Ok(())
}

/// Replaces every group member's weights by its representative's.
pub fn apply_mask_groups(weights: &[ChannelWeights], groups: &[MaskGroup]) -> Result<Vec<ChannelWeights>> {
    check_groups(groups)?;
    let mut out = weights.to_vec();
    for g in groups {
        let pos = |layer: usize| {
            weights
                .iter()
                .position(|w| w.layer_index == layer)
                .ok_or_else(|| Error::Mask(format!("mask group names missing layer {layer}")))
        };
        let rep = &weights[pos(g.representative())?];
        for &m in &g.members[1..] {
            let i = pos(m)?;
            if out[i].len() != rep.len() {
                return Err(Error::Mask(format!(
                    "group tying layer {m} ({} channels) to layer {} ({} channels)",
                    out[i].len(),
                    rep.layer_index,
                    rep.len()
                )));
            }
            out[i].values.clone_from(&rep.values);
        }
    }
    Ok(out)
}

/// Tape counterpart of [`apply_mask_groups`]: members reuse the
/// representative's node, so gradients only reach the representative.
/// `vars[i]` belongs to layer `i + 1`.
pub fn tie_mask_vars(tape: &Tape, vars: &[Var], groups: &[MaskGroup]) -> Result<Vec<Var>> {
    check_groups(groups)?;
    let mut out = vars.to_vec();
    for g in groups {
        let get = |layer: usize| {
            layer
                .checked_sub(1)
                .and_then(|i| vars.get(i))
                .copied()
                .ok_or_else(|| Error::Mask(format!("mask group names missing layer {layer}")))
        };
        let rep = get(g.representative())?;
        for &m in &g.members[1..] {
            let v = get(m)?;
            if tape.shape(v) != tape.shape(rep) {
                return Err(Error::Mask(format!(
                    "group tying layer {m} {:?} to layer {} {:?}",
                    tape.shape(v),
                    g.representative(),
                    tape.shape(rep)
                )));
            }
            out[m - 1] = rep;
        }
    }
    Ok(out)
}

/// Static mask for pruning: the per-layer mean of the pruner's head outputs
/// over all calibration batches, tied by `groups`.
pub fn derive_inference_mask(
    pruner: &PrunerNetwork,
    calibration: &[Tensor],
    scale: f64,
    groups: &[MaskGroup],
) -> Result<Vec<ChannelWeights>> {
    if calibration.is_empty() {
        return Err(Error::Mask("calibration set is empty".into()));
    }
    let mut sums: Vec<Vec<f64>> = pruner
        .spec()
        .filter_counts()
        .into_iter()
        .map(|n| vec![0.0; n])
        .collect();
    for batch in calibration {
        let heads = pruner.head_outputs(batch, scale)?;
        for (acc, h) in sums.iter_mut().zip(&heads) {
            for (a, v) in acc.iter_mut().zip(&h.values) {
                *a += v;
            }
        }
    }
    let n = calibration.len() as f64;
    let mask: Vec<ChannelWeights> = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| ChannelWeights {
            layer_index: i + 1,
            values: s.into_iter().map(|v| v / n).collect(),
        })
        .collect();
    apply_mask_groups(&mask, groups)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cw(layer: usize, v: &[f64]) -> ChannelWeights {
        ChannelWeights::new(layer, v.to_vec()).unwrap()
    }

    #[test]
    fn no_groups_is_identity() {
        let w = vec![cw(1, &[0.1, 0.2]), cw(2, &[0.3])];
        assert_eq!(apply_mask_groups(&w, &[]).unwrap(), w);
    }

    #[test]
    fn grouped_layers_become_identical() {
        let w = vec![
            cw(1, &[0.1]),
            cw(2, &[0.9, 0.2, 0.7]),
            cw(3, &[0.5]),
            cw(4, &[0.5]),
            cw(5, &[0.0, 1.0, 0.3]),
        ];
        let g = [MaskGroup {
            members: vec![2, 5],
        }];
        let out = apply_mask_groups(&w, &g).unwrap();
        assert_eq!(out[1].values, out[4].values);
        assert_eq!(out[4].values, vec![0.9, 0.2, 0.7]);
        assert_eq!(out[4].layer_index, 5);
    }

    #[test]
    fn inconsistent_group_lengths_error() {
        let w = vec![cw(1, &[0.1, 0.2]), cw(2, &[0.3])];
        let g = [MaskGroup {
            members: vec![1, 2],
        }];
        assert!(apply_mask_groups(&w, &g).is_err());
    }

    #[test]
    fn out_of_range_weights_rejected() {
        assert!(ChannelWeights::new(1, vec![1.5]).is_err());
        assert!(ChannelWeights::new(1, vec![-0.1]).is_err());
    }

    proptest! {
        #[test]
        fn tying_is_idempotent(vals in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let w: Vec<_> = vals.chunks(3).enumerate().map(|(i, c)| cw(i + 1, c)).collect();
            let g = [MaskGroup { members: vec![1, 3, 4] }];
            let once = apply_mask_groups(&w, &g).unwrap();
            let twice = apply_mask_groups(&once, &g).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
