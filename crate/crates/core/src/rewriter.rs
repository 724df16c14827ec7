//! Physical removal of filters: thresholding a mask into a keep plan and
//! slicing the network's tensors accordingly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Stream};

use crate::error::{Error, Result};
use crate::model::params::{conv_bias, conv_weight, fc_weight};
use crate::model::{build_main_network, ChannelWeights, InputShape, MainNetwork, MaskGroup, NetworkSpec, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub layer_index: usize,
    /// Surviving filters (output channels), ascending.
    pub kept_out: Vec<usize>,
    /// Surviving input channels: the producer's `kept_out`, or every image
    /// channel for the first layer.
    pub kept_in: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepPlan {
    pub layers: Vec<LayerKeep>,
    #[serde(default)]
    pub groups: Vec<MaskGroup>,
}

impl KeepPlan {
    /// Keeps every channel of every layer.
    pub fn keep_all(spec: &NetworkSpec) -> Self {
        let mut prev: Vec<usize> = (0..spec.input.channels).collect();
        let layers = spec
            .conv_layers
            .iter()
            .map(|l| {
                let kept_out: Vec<usize> = (0..l.out_channels).collect();
                LayerKeep {
                    layer_index: l.index,
                    kept_out: kept_out.clone(),
                    kept_in: std::mem::replace(&mut prev, kept_out),
                }
            })
            .collect();
        KeepPlan {
            layers,
            groups: spec.mask_groups(),
        }
    }

    pub fn is_identity(&self, spec: &NetworkSpec) -> bool {
        self.layers
            .iter()
            .zip(&spec.conv_layers)
            .all(|(k, l)| k.kept_out.len() == l.out_channels && k.kept_in.len() == l.in_channels)
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.kept_out.len()).collect()
    }

    /// Checks the plan against `spec`: ranges, ordering, producer/consumer
    /// agreement and identical index sets inside every group.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::Mask(format!(
                "plan covers {} layers, spec has {}",
                self.layers.len(),
                spec.num_layers()
            )));
        }
        for g in &self.groups {
            let rep = self.layer(g.representative())?;
            for &m in &g.members[1..] {
                if self.layer(m)?.kept_out != rep.kept_out {
                    return Err(Error::GroupInconsistent(format!(
                        "layer {m} keeps {:?} but its group representative {} keeps {:?}",
                        self.layer(m)?.kept_out,
                        rep.layer_index,
                        rep.kept_out
                    )));
                }
            }
        }
        for link in &spec.residual_links {
            if self.layer(link.source)?.kept_out != self.layer(link.dest)?.kept_out {
                return Err(Error::GroupInconsistent(format!(
                    "residual link {}->{} joins different channel sets",
                    link.source, link.dest
                )));
            }
        }
        let mut prev: Vec<usize> = (0..spec.input.channels).collect();
        for (keep, layer) in self.layers.iter().zip(&spec.conv_layers) {
            if keep.layer_index != layer.index {
                return Err(Error::Mask(format!(
                    "plan entry {} is out of order at layer {}",
                    keep.layer_index, layer.index
                )));
            }
            check_indices(&keep.kept_out, layer.out_channels, layer.index)?;
            if keep.kept_in != prev {
                return Err(Error::Mask(format!(
                    "layer {} keeps inputs {:?} but its producer keeps {:?}",
                    layer.index, keep.kept_in, prev
                )));
            }
            prev.clone_from(&keep.kept_out);
        }
        Ok(())
    }

    fn layer(&self, index: usize) -> Result<&LayerKeep> {
        self.layers
            .iter()
            .find(|l| l.layer_index == index)
            .ok_or_else(|| Error::Mask(format!("plan has no layer {index}")))
    }

    /// The exactly-binary mask equivalent to this plan.
    /// The architecture left after applying the plan to `spec`.
    pub fn pruned_spec(&self, spec: &NetworkSpec) -> Result<NetworkSpec> {
        self.validate(spec)?;
        let mut out = spec.clone();
        for (layer, keep) in out.conv_layers.iter_mut().zip(&self.layers) {
            layer.in_channels = keep.kept_in.len();
            layer.out_channels = keep.kept_out.len();
        }
        Ok(out)
    }

    pub fn binary_mask(&self, spec: &NetworkSpec) -> Vec<ChannelWeights> {
        self.layers
            .iter()
            .zip(&spec.conv_layers)
            .map(|(k, l)| {
                let mut values = vec![0.0; l.out_channels];
                for &j in &k.kept_out {
                    values[j] = 1.0;
                }
                ChannelWeights {
                    layer_index: l.index,
                    values,
                }
            })
            .collect()
    }
}

fn check_indices(idx: &[usize], n: usize, layer: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Mask(format!("layer {layer} keeps no channels")));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&j| j >= n) {
        return Err(Error::Mask(format!(
            "layer {layer}: kept indices {idx:?} must be ascending and below {n}"
        )));
    }
    Ok(())
}

/// Thresholds a mask: channel `j` survives iff `w_j >= threshold`. A layer
/// left with fewer than `min_filters` keeps its `min_filters` largest
/// weights instead (lower index first on ties). Group members copy their
/// representative's decision.
pub fn plan_prune(
    mask: &[ChannelWeights],
    spec: &NetworkSpec,
    groups: &[MaskGroup],
    threshold: f64,
    min_filters: usize,
) -> Result<KeepPlan> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if min_filters == 0 {
        return Err(Error::Config("min_filters_per_layer must be at least 1".into()));
    }
    if mask.len() != spec.num_layers() {
        return Err(Error::Mask(format!(
            "mask has {} layers, spec has {}",
            mask.len(),
            spec.num_layers()
        )));
    }
    for (m, l) in mask.iter().zip(&spec.conv_layers) {
        if m.layer_index != l.index || m.len() != l.out_channels {
            return Err(Error::Mask(format!(
                "mask entry for layer {} has {} weights, layer {} has {} filters",
                m.layer_index,
                m.len(),
                l.index,
                l.out_channels
            )));
        }
    }
    let mut decisions: Vec<Vec<usize>> = mask
        .iter()
        .map(|m| threshold_layer(&m.values, threshold, min_filters))
        .collect();
    for g in groups {
        let rep_len = mask
            .get(g.representative().wrapping_sub(1))
            .map(ChannelWeights::len)
            .ok_or_else(|| Error::Mask(format!("group names missing layer {}", g.representative())))?;
        let rep = decisions[g.representative() - 1].clone();
        for &m in &g.members[1..] {
            if mask.get(m.wrapping_sub(1)).map(ChannelWeights::len) != Some(rep_len) {
                return Err(Error::Mask(format!(
                    "group member {m} does not match representative width {rep_len}"
                )));
            }
            decisions[m - 1] = rep.clone();
        }
    }
    let mut prev: Vec<usize> = (0..spec.input.channels).collect();
    let layers = decisions
        .into_iter()
        .zip(&spec.conv_layers)
        .map(|(kept_out, l)| LayerKeep {
            layer_index: l.index,
            kept_in: std::mem::replace(&mut prev, kept_out.clone()),
            kept_out,
        })
        .collect();
    let plan = KeepPlan {
        layers,
        groups: groups.to_vec(),
    };
    plan.validate(spec)?;
    Ok(plan)
}

fn threshold_layer(w: &[f64], threshold: f64, min_filters: usize) -> Vec<usize> {
    let kept: Vec<usize> = (0..w.len()).filter(|&j| w[j] >= threshold).collect();
    if kept.len() >= min_filters.min(w.len()) {
        return kept;
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    order.truncate(min_filters);
    order.sort_unstable();
    order
}

/// Builds the physically smaller network described by `plan`.
pub fn rewrite(network: &MainNetwork, plan: &KeepPlan) -> Result<MainNetwork> {
    let spec = network.spec();
    plan.validate(spec)?;
    let params = network.params();
    let mut new_spec = spec.clone();
    let mut new_params = ParameterSet::new();
    for (keep, layer) in plan.layers.iter().zip(new_spec.conv_layers.iter_mut()) {
        let w = params.get(&conv_weight(layer.index))?;
        let (kh, kw) = layer.kernel;
        let cin = layer.in_channels;
        let per_in = kh * kw;
        let mut data = Vec::with_capacity(keep.kept_out.len() * keep.kept_in.len() * per_in);
        for &o in &keep.kept_out {
            for &i in &keep.kept_in {
                let start = (o * cin + i) * per_in;
                data.extend_from_slice(&w.data()[start..start + per_in]);
            }
        }
        layer.in_channels = keep.kept_in.len();
        layer.out_channels = keep.kept_out.len();
        new_params.insert(
            conv_weight(layer.index),
            Tensor::new(vec![layer.out_channels, layer.in_channels, kh, kw], data)?,
        );
        let b = params.get(&conv_bias(layer.index))?;
        new_params.insert(
            conv_bias(layer.index),
            Tensor::from_vec(keep.kept_out.iter().map(|&o| b.data()[o]).collect()),
        );
    }

    // The first fully connected layer reads the flattened final map, so its
    // columns are grouped by channel.
    let geom = spec.geometry()?;
    for (name, t) in params.iter() {
        if name.starts_with("fc") {
            new_params.insert(name.clone(), t.clone());
        }
    }
    if let (Some(last), Some(g)) = (plan.layers.last(), geom.last()) {
        let plane = g.out_h * g.out_w;
        let name = fc_weight(1);
        let w = params.get(&name)?;
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let mut data = Vec::with_capacity(d_out * last.kept_out.len() * plane);
        for r in 0..d_out {
            let row = &w.data()[r * d_in..(r + 1) * d_in];
            for &c in &last.kept_out {
                data.extend_from_slice(&row[c * plane..(c + 1) * plane]);
            }
        }
        new_params.insert(name, Tensor::new(vec![d_out, last.kept_out.len() * plane], data)?);
    }
    build_main_network(new_spec, new_params)
}

/// Largest absolute logit difference between the masked original network
/// and the rewritten one over all probe batches.
pub fn verify_equivalence(
    original: &MainNetwork,
    mask: &[ChannelWeights],
    pruned: &MainNetwork,
    probes: &[Tensor],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in probes {
        let a = original.logits(p, Some(mask))?;
        let b = pruned.logits(p, None)?;
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok(worst)
}

/// Seeded random inputs for [`verify_equivalence`], uniform in `[-2, 2]`.
pub fn probe_batches(input: InputShape, batches: usize, batch_size: usize, seed: u64) -> Vec<Tensor> {
    (0..batches)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Probe, i as u64);
            Tensor::from_fn(&[batch_size, input.channels, input.height, input.width], |_| {
                rng.gen_range(-2.0..=2.0)
            })
        })
        .collect()
}
