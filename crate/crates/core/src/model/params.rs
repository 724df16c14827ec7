use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::spec::NetworkSpec;

pub fn conv_weight(layer: usize) -> String {
    format!("conv{layer}.weight")
}

pub fn conv_bias(layer: usize) -> String {
    format!("conv{layer}.bias")
}

pub fn fc_weight(j: usize) -> String {
    format!("fc{j}.weight")
}

pub fn fc_bias(j: usize) -> String {
    format!("fc{j}.bias")
}

pub fn head_weight(layer: usize) -> String {
    format!("head{layer}.weight")
}

pub fn head_bias(layer: usize) -> String {
    format!("head{layer}.bias")
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the raw bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Puts every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Trunk and classifier tensors expected by `spec`, with shapes.
    pub fn expected_main_shapes(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = trunk_shapes(spec);
        let dims = spec.classifier_dims()?;
        for (j, w) in dims.windows(2).enumerate() {
            out.push((fc_weight(j + 1), vec![w[1], w[0]]));
            out.push((fc_bias(j + 1), vec![w[1]]));
        }
        Ok(out)
    }

    /// Trunk and head tensors of the pruner built on `spec`.
    pub fn expected_pruner_shapes(spec: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = trunk_shapes(spec);
        let feat = spec.feature_dim()?;
        for l in &spec.conv_layers {
            out.push((head_weight(l.index), vec![l.out_channels, feat]));
            out.push((head_bias(l.index), vec![l.out_channels]));
        }
        Ok(out)
    }

    /// Errors unless the set holds exactly the tensors in `expected`.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        if self.len() != expected.len() {
            let extra: Vec<_> = self
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == *n))
                .cloned()
                .collect();
            return Err(Error::InvalidSpec(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// He-uniform initialisation of the trunk and classifier.
    pub fn init_main(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut set = ParameterSet::new();
        for (name, shape) in Self::expected_main_shapes(spec)? {
            set.insert(name, he_uniform(&shape, rng));
        }
        Ok(set)
    }

    /// Pruner parameters: trunk copied from `main`, heads with small
    /// uniform weights and a constant bias so every initial channel weight
    /// starts near `sigmoid(head_bias)`.
    pub fn init_pruner(
        spec: &NetworkSpec,
        main: &ParameterSet,
        head_bias_init: f64,
        head_init_range: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, _) in trunk_shapes(spec) {
            set.insert(name.clone(), main.get(&name)?.clone());
        }
        let feat = spec.feature_dim()?;
        for l in &spec.conv_layers {
            let w = Tensor::from_fn(&[l.out_channels, feat], |_| {
                rng.gen_range(-head_init_range..=head_init_range)
            });
            set.insert(head_weight(l.index), w);
            set.insert(head_bias(l.index), Tensor::full(&[l.out_channels], head_bias_init));
        }
        set.check_shapes(&Self::expected_pruner_shapes(spec)?)?;
        Ok(set)
    }
}

fn trunk_shapes(spec: &NetworkSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in &spec.conv_layers {
        out.push((
            conv_weight(l.index),
            vec![l.out_channels, l.in_channels, l.kernel.0, l.kernel.1],
        ));
        out.push((conv_bias(l.index), vec![l.out_channels]));
    }
    out
}

fn he_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Tape handles for a bound [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
