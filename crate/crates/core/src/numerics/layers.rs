use std::fmt;

use rand::Rng;

use super::{kaiming_uniform, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// One entry of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    /// Convolution along the last axis of `[N, C, L]`.
    Conv1d { in_ch: usize, out_ch: usize, kernel: usize, pad: usize },
    FullyConnected { in_dim: usize, out_dim: usize },
    Relu,
    Sigmoid,
    SoftmaxRows,
    Dropout { rate: f64 },
    /// `[N, ...] -> [N, prod(...)]`.
    Flatten,
    /// Nearest-neighbour upsampling by `factor` followed by a stride-1 conv.
    UpsampleConv2d { in_ch: usize, out_ch: usize, kernel: usize, pad: usize, factor: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::SoftmaxRows => "softmax-rows",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::UpsampleConv2d { .. } => "upsample-conv2d",
        }
    }

    /// Weight and bias shapes, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. }
            | LayerSpec::UpsampleConv2d { in_ch, out_ch, kernel, .. } => {
                Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch]))
            }
            LayerSpec::Conv1d { in_ch, out_ch, kernel, .. } => {
                Some((vec![out_ch, in_ch, kernel], vec![out_ch]))
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                Some((vec![out_dim, in_dim], vec![out_dim]))
            }
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, pad } => write!(
                f,
                "conv2d in={in_ch} out={out_ch} kernel={kernel} stride={stride} pad={pad}"
            ),
            LayerSpec::Conv1d { in_ch, out_ch, kernel, pad } => {
                write!(f, "conv1d in={in_ch} out={out_ch} kernel={kernel} pad={pad}")
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                write!(f, "fully-connected in={in_dim} out={out_dim}")
            }
            LayerSpec::Dropout { rate } => write!(f, "dropout rate={rate}"),
            LayerSpec::UpsampleConv2d { in_ch, out_ch, kernel, pad, factor } => write!(
                f,
                "upsample-conv2d in={in_ch} out={out_ch} kernel={kernel} pad={pad} factor={factor}"
            ),
            other => f.write_str(other.kind()),
        }
    }
}

/// Ordered stack of [`LayerSpec`]s whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sequential {
    name: String,
    layers: Vec<(LayerSpec, Option<(ParamId, ParamId)>)>,
}

impl Sequential {
    /// Registers parameters as `{name}.{index}.weight` / `.bias`, Kaiming-uniform
    /// weights and zero biases.
    pub fn build<R: Rng + ?Sized>(
        name: &str,
        specs: &[LayerSpec],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut channels: Option<usize> = None;
        for (i, spec) in specs.iter().enumerate() {
            let (input, output) = match *spec {
                LayerSpec::Conv2d { in_ch, out_ch, .. }
                | LayerSpec::Conv1d { in_ch, out_ch, .. }
                | LayerSpec::UpsampleConv2d { in_ch, out_ch, .. } => (Some(in_ch), Some(out_ch)),
                LayerSpec::FullyConnected { out_dim, .. } => (None, Some(out_dim)),
                LayerSpec::Flatten => (None, None),
                _ => (None, channels),
            };
            if let (Some(want), Some(have)) = (input, channels) {
                if want != have {
                    return Err(Error::shape(
                        format!("{name}.{i} ({})", spec.kind()),
                        format!("expects {want} input channels, previous layer yields {have}"),
                    ));
                }
            }
            if matches!(spec, LayerSpec::FullyConnected { .. } | LayerSpec::Flatten) {
                channels = None;
            }
            channels = output.or(channels);

            let params = match spec.param_shapes() {
                Some((w_shape, b_shape)) => {
                    let fan_in = w_shape[1..].iter().product();
                    let w = store.add(format!("{name}.{i}.weight"), kaiming_uniform(&w_shape, fan_in, rng))?;
                    let b = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&b_shape))?;
                    Some((w, b))
                }
                None => None,
            };
            if let LayerSpec::Dropout { rate } = spec {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArgument(format!("{name}.{i}: dropout rate {rate}")));
                }
            }
            layers.push((spec.clone(), params));
        }
        Ok(Self {
            name: name.to_owned(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|(s, _)| s)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers
            .iter()
            .filter_map(|(_, p)| *p)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (spec, params)) in self.layers.iter().enumerate() {
            h = self.apply(g, store, h, spec, *params).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape(format!("{}.{i} ({})", self.name, spec.kind()), detail),
                other => other,
            })?;
        }
        Ok(h)
    }

    fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        spec: &LayerSpec,
        params: Option<(ParamId, ParamId)>,
    ) -> Result<Var> {
        let wb = |g: &mut Graph| {
            let (w, b) = params.expect("parametric layer has params");
            (g.param(store, w), g.param(store, b))
        };
        match *spec {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let (w, b) = wb(g);
                g.conv2d(h, w, b, stride, pad)
            }
            LayerSpec::Conv1d { pad, .. } => {
                let (w, b) = wb(g);
                g.conv1d(h, w, b, pad)
            }
            LayerSpec::FullyConnected { in_dim, .. } => {
                let have = g.shape(h).to_vec();
                if have.len() != 2 || have[1] != in_dim {
                    return Err(Error::shape("", format!("expects [N, {in_dim}], got {have:?}")));
                }
                let (w, b) = wb(g);
                g.linear(h, w, b)
            }
            LayerSpec::Relu => Ok(g.relu(h)),
            LayerSpec::Sigmoid => Ok(g.sigmoid(h)),
            LayerSpec::SoftmaxRows => g.softmax_rows(h),
            LayerSpec::Dropout { rate } => Ok(g.dropout(h, rate)),
            LayerSpec::Flatten => g.flatten(h),
            LayerSpec::UpsampleConv2d { pad, factor, .. } => {
                let up = g.upsample(h, factor)?;
                let (w, b) = wb(g);
                g.conv2d(up, w, b, 1, pad)
            }
        }
    }

    /// Plain-text description, one layer per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (i, (spec, _)) in self.layers.iter().enumerate() {
            out.push_str(&format!("{}.{i} {spec}\n", self.name));
        }
        out
    }
}
