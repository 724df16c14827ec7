//! FLOPs and parameter accounting, pruning reports and CPU timing.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions contribute
//! `out_h * out_w * k_h * k_w * c_in * c_out`, fully connected layers
//! `d_in * d_out`; pooling, activations and bias adds are not counted.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::model::{MainNetwork, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub flops: u64,
    pub params: u64,
}

/// Per conv layer, then one entry per fully connected layer.
pub fn layer_costs(spec: &NetworkSpec) -> Result<Vec<LayerCost>> {
    let geom = spec.geometry()?;
    let mut out: Vec<LayerCost> = spec
        .conv_layers
        .iter()
        .zip(&geom)
        .map(|(l, g)| {
            let macs_per_pixel = (l.kernel.0 * l.kernel.1 * l.in_channels * l.out_channels) as u64;
            LayerCost {
                flops: (g.conv_h * g.conv_w) as u64 * macs_per_pixel,
                params: macs_per_pixel + l.out_channels as u64,
            }
        })
        .collect();
    let dims = spec.classifier_dims()?;
    for w in dims.windows(2) {
        let (d_in, d_out) = (w[0] as u64, w[1] as u64);
        out.push(LayerCost {
            flops: d_in * d_out,
            params: d_in * d_out + d_out,
        });
    }
    Ok(out)
}

pub fn count_flops(spec: &NetworkSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|c| c.flops).sum())
}

pub fn count_params(spec: &NetworkSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|c| c.params).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    pub filters_before: usize,
    pub filters_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl LayerReport {
    pub fn kept_fraction(&self) -> f64 {
        self.filters_after as f64 / self.filters_before as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub batch_size: usize,
    pub original_seconds_per_image: f64,
    pub pruned_seconds_per_image: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub rows: Vec<TimingRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub pruned_flops_percent: f64,
    pub pruned_params_percent: f64,
    /// Largest logit difference between the masked and rewritten networks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingTable>,
    pub notes: Vec<String>,
}

fn pruned_percent(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

impl PruneReport {
    /// Compares two specs of the same architecture (same layer count).
    pub fn from_specs(before: &NetworkSpec, after: &NetworkSpec) -> Result<Self> {
        if before.num_layers() != after.num_layers() {
            return Err(Error::InvalidSpec(format!(
                "cannot compare {} layers with {}",
                before.num_layers(),
                after.num_layers()
            )));
        }
        let cb = layer_costs(before)?;
        let ca = layer_costs(after)?;
        let layers = before
            .conv_layers
            .iter()
            .zip(&after.conv_layers)
            .enumerate()
            .map(|(i, (b, a))| LayerReport {
                layer_index: b.index,
                filters_before: b.out_channels,
                filters_after: a.out_channels,
                flops_before: cb[i].flops,
                flops_after: ca[i].flops,
            })
            .collect();
        let flops_before = cb.iter().map(|c| c.flops).sum();
        let flops_after = ca.iter().map(|c| c.flops).sum();
        let params_before = cb.iter().map(|c| c.params).sum();
        let params_after = ca.iter().map(|c| c.params).sum();
        Ok(PruneReport {
            layers,
            flops_before,
            flops_after,
            params_before,
            params_after,
            pruned_flops_percent: pruned_percent(flops_before, flops_after),
            pruned_params_percent: pruned_percent(params_before, params_after),
            max_deviation: None,
            timing: None,
            notes: vec![
                "FLOPs are multiply-accumulates of conv and linear layers; pooling and activations excluded".into(),
            ],
        })
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops_before as f64 / self.flops_after.max(1) as f64
    }

    /// Spread between the largest and smallest per-layer kept fraction, in
    /// percentage points.
    pub fn kept_fraction_spread(&self) -> f64 {
        let f: Vec<f64> = self.layers.iter().map(LayerReport::kept_fraction).collect();
        let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = f.iter().copied().fold(f64::INFINITY, f64::min);
        if f.is_empty() {
            0.0
        } else {
            100.0 * (max - min)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "{:>5}  {:>7}  {:>7}  {:>6}  {:>14}  {:>14}", "layer", "before", "after", "kept%", "flops_before", "flops_after");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5}  {:>7}  {:>7}  {:>6.1}  {:>14}  {:>14}",
                l.layer_index,
                l.filters_before,
                l.filters_after,
                100.0 * l.kept_fraction(),
                l.flops_before,
                l.flops_after
            );
        }
        let _ = writeln!(
            s,
            "FLOPs  {} -> {}  (pruned {:.2}%, {:.2}x fewer)",
            self.flops_before,
            self.flops_after,
            self.pruned_flops_percent,
            self.flops_ratio()
        );
        let _ = writeln!(
            s,
            "params {} -> {}  (pruned {:.2}%)",
            self.params_before, self.params_after, self.pruned_params_percent
        );
        if let Some(d) = self.max_deviation {
            let _ = writeln!(s, "max logit deviation after rewrite: {d:.3e}");
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(
                s,
                "timing: median of {} after {} warm-up, {} thread(s)",
                t.repeats, t.warmup, t.threads
            );
            let _ = writeln!(s, "{:>6}  {:>14}  {:>14}  {:>8}", "batch", "orig s/img", "pruned s/img", "speedup");
            for r in &t.rows {
                let _ = writeln!(
                    s,
                    "{:>6}  {:>14.3e}  {:>14.3e}  {:>8.2}",
                    r.batch_size, r.original_seconds_per_image, r.pruned_seconds_per_image, r.speedup
                );
            }
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Shortest wall time one timing sample accumulates; fast passes are looped.
const MIN_SAMPLE_SECONDS: f64 = 0.05;

/// Seconds per pass, averaged over as many passes as fill one sample.
fn sample_forward(net: &MainNetwork, input: &Tensor) -> Result<f64> {
    let t = Instant::now();
    let mut passes = 0u32;
    loop {
        std::hint::black_box(net.logits(std::hint::black_box(input), None)?);
        passes += 1;
        let elapsed = t.elapsed().as_secs_f64();
        if elapsed >= MIN_SAMPLE_SECONDS {
            return Ok(elapsed / passes as f64);
        }
    }
}

/// Per-image forward latency of both networks at each batch size: one
/// warm-up pass each, then the median of `repeats` samples, alternating
/// between the networks. Runs on the calling thread only.
pub fn measure_speedup(
    original: &MainNetwork,
    pruned: &MainNetwork,
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<TimingTable> {
    let shape = original.spec().input;
    if pruned.spec().input != shape {
        return Err(Error::InvalidSpec("networks take different inputs".into()));
    }
    let mut rng = stream_rng(0, Stream::Probe, 0);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let input = Tensor::from_fn(&[b, shape.channels, shape.height, shape.width], |_| {
            rng.gen_range(-1.0..1.0)
        });
        original.logits(&input, None)?;
        pruned.logits(&input, None)?;
        let (mut os, mut ps) = (Vec::new(), Vec::new());
        for _ in 0..repeats.max(1) {
            os.push(sample_forward(original, &input)?);
            ps.push(sample_forward(pruned, &input)?);
        }
        let o = median(os) / b as f64;
        let p = median(ps) / b as f64;
        rows.push(TimingRow {
            batch_size: b,
            original_seconds_per_image: o,
            pruned_seconds_per_image: p,
            speedup: o / p,
        });
    }
    Ok(TimingTable {
        threads: 1,
        repeats: repeats.max(1),
        warmup: 1,
        rows,
    })
}
