use crate::autodiff::kernels::{self, ConvGeom, PoolGeom};
use crate::autodiff::{conv_out_extent, Tape, Var};
use crate::PoolKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mask::ChannelWeights;
use super::params::{self, BoundParams, ParameterSet};
use super::spec::NetworkSpec;

/// The network being compressed. Its trunk can take one channel-weight
/// vector per conv layer, applied to the activated feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MainNetwork {
    spec: NetworkSpec,
    params: ParameterSet,
}

/// Same trunk as the main network; the classifier is replaced by one
/// linear head per conv layer producing that layer's channel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunerNetwork {
    spec: NetworkSpec,
    params: ParameterSet,
}

pub fn build_main_network(spec: NetworkSpec, params: ParameterSet) -> Result<MainNetwork> {
    spec.validate()?;
    params.check_shapes(&ParameterSet::expected_main_shapes(&spec)?)?;
    Ok(MainNetwork { spec, params })
}

pub fn build_pruner_network(spec: NetworkSpec, params: ParameterSet) -> Result<PrunerNetwork> {
    spec.validate()?;
    params.check_shapes(&ParameterSet::expected_pruner_shapes(&spec)?)?;
    Ok(PrunerNetwork { spec, params })
}

/// Runs the conv trunk, returning the final feature map. `masks[i]`, when
/// given, scales the channels of layer `i + 1` after its activation.
fn trunk_forward(
    spec: &NetworkSpec,
    tape: &mut Tape,
    bound: &BoundParams,
    input: Var,
    masks: Option<&[Var]>,
) -> Result<Var> {
    if let Some(m) = masks {
        if m.len() != spec.num_layers() {
            return Err(Error::Mask(format!(
                "expected {} channel-weight vectors, got {}",
                spec.num_layers(),
                m.len()
            )));
        }
    }
    let mut outputs: Vec<Var> = Vec::with_capacity(spec.num_layers());
    let mut x = input;
    for layer in &spec.conv_layers {
        let w = bound.var(&params::conv_weight(layer.index))?;
        let b = bound.var(&params::conv_bias(layer.index))?;
        let mut z = tape.conv2d(x, w, b, layer.stride, layer.padding)?;
        if let Some(link) = spec.residual_into(layer.index) {
            z = tape.add(z, outputs[link.source - 1])?;
        }
        let mut a = tape.relu(z);
        if let Some(m) = masks {
            a = tape.channel_scale(a, m[layer.index - 1])?;
        }
        if let Some(p) = layer.pool {
            a = tape.pool2d(a, p.kind, p.window, p.stride)?;
        }
        outputs.push(a);
        x = a;
    }
    Ok(x)
}

impl MainNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetworkSpec, ParameterSet) {
        (self.spec, self.params)
    }

    /// Logits for an NCHW batch already on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: Var,
        masks: Option<&[Var]>,
    ) -> Result<Var> {
        let feat = trunk_forward(&self.spec, tape, bound, input, masks)?;
        let mut h = tape.flatten(feat)?;
        let n_fc = self.spec.classifier.hidden.len() + 1;
        for j in 1..=n_fc {
            let w = bound.var(&params::fc_weight(j))?;
            let b = bound.var(&params::fc_bias(j))?;
            h = tape.linear(h, w, b)?;
            if j < n_fc {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Evaluates logits without a tape: same kernels and operation order
    /// as [`MainNetwork::forward`], but each activation is dropped once the
    /// next layer no longer needs it.
    pub fn logits(&self, input: &Tensor, masks: Option<&[ChannelWeights]>) -> Result<Tensor> {
        let spec = &self.spec;
        let want = [spec.input.channels, spec.input.height, spec.input.width];
        let xs = input.shape();
        if xs.len() != 4 || xs[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "logits",
                lhs: xs.to_vec(),
                rhs: want.to_vec(),
            });
        }
        if let Some(m) = masks {
            if m.len() != spec.num_layers() {
                return Err(Error::Mask(format!(
                    "expected {} channel-weight vectors, got {}",
                    spec.num_layers(),
                    m.len()
                )));
            }
            for (w, l) in m.iter().zip(&spec.conv_layers) {
                if w.len() != l.out_channels {
                    return Err(Error::Mask(format!(
                        "layer {} has {} filters, got {} weights",
                        l.index,
                        l.out_channels,
                        w.len()
                    )));
                }
            }
        }
        let batch = xs[0];
        let (mut c, mut h, mut w) = (want[0], want[1], want[2]);
        let mut x = input.data().to_vec();
        let mut kept: Vec<Option<Vec<f64>>> = vec![None; spec.num_layers()];
        for layer in &spec.conv_layers {
            let (kh, kw) = layer.kernel;
            let g = ConvGeom {
                batch,
                in_ch: c,
                in_h: h,
                in_w: w,
                out_ch: layer.out_channels,
                k_h: kh,
                k_w: kw,
                stride: layer.stride,
                padding: layer.padding,
                out_h: conv_out_extent(h, kh, layer.stride, layer.padding)
                    .ok_or_else(|| Error::InvalidSpec(format!("layer {} output is empty", layer.index)))?,
                out_w: conv_out_extent(w, kw, layer.stride, layer.padding)
                    .ok_or_else(|| Error::InvalidSpec(format!("layer {} output is empty", layer.index)))?,
            };
            let kernel = self.params.get(&params::conv_weight(layer.index))?;
            let bias = self.params.get(&params::conv_bias(layer.index))?;
            let mut a = kernels::conv2d_forward(&x, kernel.data(), bias.data(), &g);
            if let Some(link) = spec.residual_into(layer.index) {
                let src = kept[link.source - 1]
                    .as_ref()
                    .ok_or_else(|| Error::InvalidSpec(format!("skip into layer {} has no source", layer.index)))?;
                if src.len() != a.len() {
                    return Err(Error::ShapeMismatch {
                        op: "residual",
                        lhs: vec![a.len()],
                        rhs: vec![src.len()],
                    });
                }
                a.iter_mut().zip(src).for_each(|(z, s)| *z += s);
            }
            let plane = g.out_plane();
            let scale = masks.map(|m| m[layer.index - 1].values.as_slice());
            for (i, v) in a.iter_mut().enumerate() {
                // NaN passes through, as in the tape's relu.
                if *v < 0.0 {
                    *v = 0.0;
                }
                if let Some(s) = scale {
                    *v *= s[(i / plane) % layer.out_channels];
                }
            }
            (c, h, w) = (layer.out_channels, g.out_h, g.out_w);
            if let Some(p) = layer.pool {
                let pg = PoolGeom {
                    planes: batch * c,
                    in_h: h,
                    in_w: w,
                    window: p.window,
                    stride: p.stride,
                    out_h: (h - p.window) / p.stride + 1,
                    out_w: (w - p.window) / p.stride + 1,
                };
                a = match p.kind {
                    PoolKind::Max => kernels::max_pool_forward(&a, &pg).0,
                    PoolKind::Avg => kernels::avg_pool_forward(&a, &pg),
                };
                (h, w) = (pg.out_h, pg.out_w);
            }
            if spec.residual_links.iter().any(|l| l.source == layer.index) {
                kept[layer.index - 1] = Some(a.clone());
            }
            x = a;
        }
        let n_fc = spec.classifier.hidden.len() + 1;
        let mut d_in = c * h * w;
        for j in 1..=n_fc {
            let wt = self.params.get(&params::fc_weight(j))?;
            let b = self.params.get(&params::fc_bias(j))?;
            let d_out = wt.shape()[0];
            x = kernels::linear_forward(&x, wt.data(), b.data(), batch, d_in, d_out);
            if j < n_fc {
                x.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                });
            }
            d_in = d_out;
        }
        Tensor::new(vec![batch, d_in], x)
    }
}

impl PrunerNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetworkSpec, ParameterSet) {
        (self.spec, self.params)
    }

    /// One `[n_i]` weight vector per conv layer: linear head, scaled
    /// sigmoid, then the mean over the batch.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, input: Var, scale: f64) -> Result<Vec<Var>> {
        let feat = trunk_forward(&self.spec, tape, bound, input, None)?;
        let flat = tape.flatten(feat)?;
        let mut heads = Vec::with_capacity(self.spec.num_layers());
        for layer in &self.spec.conv_layers {
            let w = bound.var(&params::head_weight(layer.index))?;
            let b = bound.var(&params::head_bias(layer.index))?;
            let pre = tape.linear(flat, w, b)?;
            let s = tape.scaled_sigmoid(pre, scale)?;
            heads.push(tape.mean_rows(s)?);
        }
        Ok(heads)
    }

    pub fn head_outputs(&self, input: &Tensor, scale: f64) -> Result<Vec<ChannelWeights>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let heads = self.forward(&mut tape, &bound, x, scale)?;
        Ok(heads
            .iter()
            .enumerate()
            .map(|(i, v)| ChannelWeights {
                layer_index: i + 1,
                values: tape.value(*v).data().to_vec(),
            })
            .collect())
    }
}
