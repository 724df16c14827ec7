use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_extent, PoolKind};
use crate::error::{Error, Result};

use super::mask::MaskGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn max2() -> Self {
        PoolSpec {
            kind: PoolKind::Max,
            window: 2,
            stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    /// 1-based position in the trunk.
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
}

/// A skip connection: the output of `source` is added to the
/// pre-activation of `dest`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualLink {
    pub source: usize,
    pub dest: usize,
    #[serde(default)]
    pub projection: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Hidden widths of the fully connected head; the output layer to
/// `num_classes` is implicit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputShape,
    pub conv_layers: Vec<ConvLayerSpec>,
    #[serde(default)]
    pub residual_links: Vec<ResidualLink>,
    pub classifier: ClassifierSpec,
    pub num_classes: usize,
}

/// Spatial bookkeeping for one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub in_h: usize,
    pub in_w: usize,
    /// Extent of the conv output, before any pooling.
    pub conv_h: usize,
    pub conv_w: usize,
    /// Extent after pooling.
    pub out_h: usize,
    pub out_w: usize,
}

impl NetworkSpec {
    pub fn num_layers(&self) -> usize {
        self.conv_layers.len()
    }

    pub fn layer(&self, index: usize) -> Option<&ConvLayerSpec> {
        index
            .checked_sub(1)
            .and_then(|i| self.conv_layers.get(i))
    }

    /// `n_i` for every conv layer, in order.
    pub fn filter_counts(&self) -> Vec<usize> {
        self.conv_layers.iter().map(|l| l.out_channels).collect()
    }

    pub fn residual_into(&self, dest: usize) -> Option<&ResidualLink> {
        self.residual_links.iter().find(|l| l.dest == dest)
    }

    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for layer in &self.conv_layers {
            let bad = || {
                Error::InvalidSpec(format!(
                    "layer {} produces a non-positive extent from {h}x{w}",
                    layer.index
                ))
            };
            if layer.stride == 0 {
                return Err(Error::InvalidSpec(format!("layer {} has stride 0", layer.index)));
            }
            let conv_h = conv_out_extent(h, layer.kernel.0, layer.stride, layer.padding).ok_or_else(bad)?;
            let conv_w = conv_out_extent(w, layer.kernel.1, layer.stride, layer.padding).ok_or_else(bad)?;
            let (out_h, out_w) = match layer.pool {
                None => (conv_h, conv_w),
                Some(p) => {
                    if p.window == 0 || p.stride == 0 || p.window > conv_h || p.window > conv_w {
                        return Err(Error::InvalidSpec(format!(
                            "pool window {} does not fit layer {} output {conv_h}x{conv_w}",
                            p.window, layer.index
                        )));
                    }
                    ((conv_h - p.window) / p.stride + 1, (conv_w - p.window) / p.stride + 1)
                }
            };
            out.push(LayerGeometry {
                in_h: h,
                in_w: w,
                conv_h,
                conv_w,
                out_h,
                out_w,
            });
            h = out_h;
            w = out_w;
        }
        Ok(out)
    }

    /// Length of the flattened trunk output fed to the classifier and to
    /// the pruner heads.
    pub fn feature_dim(&self) -> Result<usize> {
        let geom = self.geometry()?;
        Ok(match (self.conv_layers.last(), geom.last()) {
            (Some(l), Some(g)) => l.out_channels * g.out_h * g.out_w,
            _ => self.input.channels * self.input.height * self.input.width,
        })
    }

    /// Widths of the fully connected layers, input first.
    pub fn classifier_dims(&self) -> Result<Vec<usize>> {
        let mut dims = vec![self.feature_dim()?];
        dims.extend(&self.classifier.hidden);
        dims.push(self.num_classes);
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return Err(Error::InvalidSpec("input extents must be positive".into()));
        }
        let mut prev = self.input.channels;
        for (pos, layer) in self.conv_layers.iter().enumerate() {
            if layer.index != pos + 1 {
                return Err(Error::InvalidSpec(format!(
                    "layer at position {} has index {}",
                    pos + 1,
                    layer.index
                )));
            }
            if layer.out_channels == 0 || layer.kernel.0 == 0 || layer.kernel.1 == 0 {
                return Err(Error::InvalidSpec(format!("layer {} has an empty extent", layer.index)));
            }
            if layer.in_channels != prev {
                return Err(Error::InvalidSpec(format!(
                    "layer {} expects {} input channels but its producer emits {prev}",
                    layer.index, layer.in_channels
                )));
            }
            prev = layer.out_channels;
        }
        if self.classifier.hidden.contains(&0) {
            return Err(Error::InvalidSpec("classifier widths must be positive".into()));
        }
        let geom = self.geometry()?;
        let mut seen_dest = Vec::new();
        for link in &self.residual_links {
            if link.projection {
                return Err(Error::InvalidSpec(format!(
                    "projection skip {}->{} is not supported; only identity skips",
                    link.source, link.dest
                )));
            }
            let (Some(src), Some(dst)) = (self.layer(link.source), self.layer(link.dest)) else {
                return Err(Error::InvalidSpec(format!(
                    "residual link {}->{} names a missing layer",
                    link.source, link.dest
                )));
            };
            if link.source >= link.dest {
                return Err(Error::InvalidSpec(format!(
                    "residual link {}->{} must point forward",
                    link.source, link.dest
                )));
            }
            if seen_dest.contains(&link.dest) {
                return Err(Error::InvalidSpec(format!(
                    "layer {} receives more than one skip",
                    link.dest
                )));
            }
            seen_dest.push(link.dest);
            let gs = geom[link.source - 1];
            let gd = geom[link.dest - 1];
            if src.out_channels != dst.out_channels || (gs.out_h, gs.out_w) != (gd.conv_h, gd.conv_w) {
                return Err(Error::InvalidSpec(format!(
                    "residual link {}->{} joins {}x{}x{} with {}x{}x{}",
                    link.source,
                    link.dest,
                    src.out_channels,
                    gs.out_h,
                    gs.out_w,
                    dst.out_channels,
                    gd.conv_h,
                    gd.conv_w
                )));
            }
        }
        Ok(())
    }

    /// Layers tied together by identity skips. Each connected component of
    /// the skip graph becomes one group; its lowest layer index is the
    /// representative.
    pub fn mask_groups(&self) -> Vec<MaskGroup> {
        let k = self.conv_layers.len();
        let mut parent: Vec<usize> = (0..=k).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for link in &self.residual_links {
            if link.source == 0 || link.dest == 0 || link.source > k || link.dest > k {
                continue;
            }
            let (a, b) = (find(&mut parent, link.source), find(&mut parent, link.dest));
            let (lo, hi) = (a.min(b), a.max(b));
            parent[hi] = lo;
        }
        let mut groups: Vec<MaskGroup> = Vec::new();
        for i in 1..=k {
            let root = find(&mut parent, i);
            if root == i {
                continue;
            }
            match groups.iter_mut().find(|g| g.members[0] == root) {
                Some(g) => g.members.push(i),
                None => groups.push(MaskGroup {
                    members: vec![root, i],
                }),
            }
        }
        groups
    }

    /// Six 3×3 conv layers `[32, 32, 64, 64, 128, 128]`, 2×2 max pooling
    /// after layers 2, 4 and 6, and a single linear classifier.
    pub fn vgg_mini(input: InputShape, num_classes: usize) -> Self {
        let widths = [32, 32, 64, 64, 128, 128];
        Self::plain("vgg-mini", input, &widths, &[2, 4, 6], Vec::new(), num_classes)
    }

    /// Stem conv plus three residual blocks of two 3×3 convs each. Each
    /// block's second conv receives an identity skip from the block input
    /// and is followed by 2×2 max pooling.
    pub fn res_mini(input: InputShape, num_classes: usize) -> Self {
        let widths = [32; 7];
        let links = vec![
            ResidualLink {
                source: 1,
                dest: 3,
                projection: false,
            },
            ResidualLink {
                source: 3,
                dest: 5,
                projection: false,
            },
            ResidualLink {
                source: 5,
                dest: 7,
                projection: false,
            },
        ];
        Self::plain("res-mini", input, &widths, &[3, 5, 7], links, num_classes)
    }

    /// The CIFAR-10 VGG-16 variant: thirteen 3×3 convs, five max pools and a
    /// single 512-wide hidden layer.
    pub fn vgg16_cifar() -> Self {
        let widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
        let mut spec = Self::plain(
            "vgg16-cifar",
            InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            &widths,
            &[2, 4, 7, 10, 13],
            Vec::new(),
            10,
        );
        spec.classifier.hidden = vec![512];
        spec
    }

    /// Builds a chain of padded 3×3 convs with 2×2 max pooling after the
    /// listed layers.
    pub fn plain(
        name: &str,
        input: InputShape,
        widths: &[usize],
        pool_after: &[usize],
        residual_links: Vec<ResidualLink>,
        num_classes: usize,
    ) -> Self {
        let mut prev = input.channels;
        let conv_layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let layer = ConvLayerSpec {
                    index: i + 1,
                    in_channels: prev,
                    out_channels: w,
                    kernel: (3, 3),
                    stride: 1,
                    padding: 1,
                    pool: pool_after.contains(&(i + 1)).then(PoolSpec::max2),
                };
                prev = w;
                layer
            })
            .collect();
        NetworkSpec {
            name: name.to_string(),
            input,
            conv_layers,
            residual_links,
            classifier: ClassifierSpec::default(),
            num_classes,
        }
    }
}

impl InputShape {
    pub const MNIST: InputShape = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    pub const CIFAR: InputShape = InputShape {
        channels: 3,
        height: 32,
        width: 32,
    };
}
