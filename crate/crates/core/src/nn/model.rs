//! The classifier: a small convolutional encoder, a flatten + FC trunk, a
//! classification head and a two-layer MLP projection head. Width, depth
//! and input geometry are configuration, so the full-scale setup and the
//! reduced desk-scale setup are the same code.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::layers::{
    max_pool2, max_pool2_backward, relu2, relu2_backward, relu4, relu4_backward, Conv2d, Linear,
};
use crate::rng::{derive_rng, stream};
use crate::{QmixError, Result};

/// Network geometry. Every stage is `convs_per_stage` (conv3x3 + ReLU)
/// blocks followed by a 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels per stage.
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    /// Feature dimension after the flatten -> FC -> ReLU trunk.
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Hidden width of the projection MLP.
    pub projection_hidden: usize,
    /// Projection output dimension (embeddings are L2-normalized downstream).
    pub projection_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            image_size: 32,
            stage_channels: vec![16, 32, 64],
            convs_per_stage: 2,
            feature_dim: 128,
            num_classes: 10,
            projection_hidden: 128,
            projection_dim: 128,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.convs_per_stage == 0 {
            return Err(QmixError::invalid("encoder needs at least one conv stage"));
        }
        if self.num_classes < 2 {
            return Err(QmixError::invalid("need at least two classes"));
        }
        let mut size = self.image_size;
        for _ in &self.stage_channels {
            size /= 2;
            if size == 0 {
                return Err(QmixError::invalid(
                    "image too small for the configured number of pooling stages",
                ));
            }
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let mut size = self.image_size;
        for _ in &self.stage_channels {
            size /= 2;
        }
        size * size * self.stage_channels.last().unwrap()
    }
}

/// Activations recorded during a training-mode forward pass.
pub struct ForwardCache {
    conv_inputs: Vec<Array4<f64>>,
    conv_outputs: Vec<Array4<f64>>,
    pool_argmax: Vec<Vec<u32>>,
    pool_input_dims: Vec<(usize, usize, usize, usize)>,
    flat: Array2<f64>,
    features: Array2<f64>,
    proj_hidden_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub config: NetConfig,
    convs: Vec<Conv2d>,
    /// True where a pool follows the conv at the same index.
    pool_after: Vec<bool>,
    trunk: Linear,
    class_head: Linear,
    proj_hidden: Linear,
    proj_out: Linear,
}

impl ClassifierNet {
    /// Builds a freshly initialized network. `net_tag` separates the RNG
    /// streams of co-trained peers.
    pub fn new(config: &NetConfig, seed: u64, net_tag: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, &[stream::NET_INIT, net_tag]);
        let mut convs = Vec::new();
        let mut pool_after = Vec::new();
        let mut in_c = config.in_channels;
        for &out_c in &config.stage_channels {
            for conv_idx in 0..config.convs_per_stage {
                convs.push(Conv2d::new(in_c, out_c, &mut rng));
                in_c = out_c;
                pool_after.push(conv_idx + 1 == config.convs_per_stage);
            }
        }
        let flat = config.flat_dim();
        Ok(ClassifierNet {
            trunk: Linear::new(flat, config.feature_dim, &mut rng),
            class_head: Linear::new(config.feature_dim, config.num_classes, &mut rng),
            proj_hidden: Linear::new(config.feature_dim, config.projection_hidden, &mut rng),
            proj_out: Linear::new(config.projection_hidden, config.projection_dim, &mut rng),
            config: config.clone(),
            convs,
            pool_after,
        })
    }

    /// Inference-mode forward: logits and raw projection embeddings.
    pub fn forward(&self, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
        let (logits, proj, _) = self.forward_impl(x, false);
        (logits, proj)
    }

    /// Logits only (saves the projection head work).
    pub fn forward_logits(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            cur = relu4(&conv.forward(&cur));
            if self.pool_after[i] {
                cur = max_pool2(&cur).0;
            }
        }
        let flat = flatten(&cur);
        let features = relu2(&self.trunk.forward(&flat));
        self.class_head.forward(&features)
    }

    /// Training-mode forward retaining every activation needed by
    /// [`ClassifierNet::backward`].
    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array2<f64>, Array2<f64>, ForwardCache) {
        let (logits, proj, cache) = self.forward_impl(x, true);
        (logits, proj, cache.unwrap())
    }

    fn forward_impl(
        &self,
        x: &Array4<f64>,
        keep: bool,
    ) -> (Array2<f64>, Array2<f64>, Option<ForwardCache>) {
        let mut conv_inputs = Vec::new();
        let mut conv_outputs = Vec::new();
        let mut pool_argmax = Vec::new();
        let mut pool_input_dims = Vec::new();

        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if keep {
                conv_inputs.push(cur.clone());
            }
            let act = relu4(&conv.forward(&cur));
            if keep {
                conv_outputs.push(act.clone());
            }
            cur = if self.pool_after[i] {
                let dims = act.dim();
                let (pooled, argmax) = max_pool2(&act);
                if keep {
                    pool_argmax.push(argmax);
                    pool_input_dims.push(dims);
                }
                pooled
            } else {
                act
            };
        }

        let flat = flatten(&cur);
        let features = relu2(&self.trunk.forward(&flat));
        let logits = self.class_head.forward(&features);
        let hidden = relu2(&self.proj_hidden.forward(&features));
        let proj = self.proj_out.forward(&hidden);

        let cache = keep.then(|| ForwardCache {
            conv_inputs,
            conv_outputs,
            pool_argmax,
            pool_input_dims,
            flat,
            features: features.clone(),
            proj_hidden_out: hidden,
        });
        (logits, proj, cache)
    }

    /// Accumulates parameter gradients from upstream gradients on the logits
    /// and the raw projection output. Either gradient may be all-zero.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
        grad_proj: &Array2<f64>,
    ) {
        let mut grad_features = self.class_head.backward(&cache.features, grad_logits);

        if grad_proj.iter().any(|&v| v != 0.0) {
            let grad_hidden_out = self.proj_out.backward(&cache.proj_hidden_out, grad_proj);
            let grad_hidden = relu2_backward(&cache.proj_hidden_out, &grad_hidden_out);
            grad_features += &self.proj_hidden.backward(&cache.features, &grad_hidden);
        }

        let grad_trunk_out = relu2_backward(&cache.features, &grad_features);
        let grad_flat = self.trunk.backward(&cache.flat, &grad_trunk_out);

        let last = self.convs.len() - 1;
        let (b, c, h, w) = if self.pool_after[last] {
            let dims = *cache.pool_input_dims.last().unwrap();
            (dims.0, dims.1, dims.2 / 2, dims.3 / 2)
        } else {
            cache.conv_outputs[last].dim()
        };
        let mut grad4 = grad_flat.into_shape_with_order((b, c, h, w)).unwrap();

        let mut pool_idx = cache.pool_argmax.len();
        for i in (0..self.convs.len()).rev() {
            if self.pool_after[i] {
                pool_idx -= 1;
                grad4 = max_pool2_backward(
                    &grad4,
                    &cache.pool_argmax[pool_idx],
                    cache.pool_input_dims[pool_idx],
                );
            }
            let grad_act = relu4_backward(&cache.conv_outputs[i], &grad4);
            grad4 = self.convs[i].backward(&cache.conv_inputs[i], &grad_act);
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, grad| grad.fill(0.0));
    }

    /// Visits `(value, grad)` slices of every parameter tensor in a fixed
    /// order (the order the optimizer and checkpoints rely on).
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for conv in &mut self.convs {
            f(
                conv.weight.as_slice_mut().unwrap(),
                conv.grad_weight.as_slice_mut().unwrap(),
            );
            f(
                conv.bias.as_slice_mut().unwrap(),
                conv.grad_bias.as_slice_mut().unwrap(),
            );
        }
        for linear in [
            &mut self.trunk,
            &mut self.class_head,
            &mut self.proj_hidden,
            &mut self.proj_out,
        ] {
            f(
                linear.weight.as_slice_mut().unwrap(),
                linear.grad_weight.as_slice_mut().unwrap(),
            );
            f(
                linear.bias.as_slice_mut().unwrap(),
                linear.grad_bias.as_slice_mut().unwrap(),
            );
        }
    }

    /// Visits `(name, shape, values)` for serialization.
    pub fn visit_named(&self, f: &mut dyn FnMut(&str, Vec<usize>, &[f64])) {
        for (i, conv) in self.convs.iter().enumerate() {
            f(
                &format!("conv{i}.weight"),
                conv.weight.shape().to_vec(),
                conv.weight.as_slice().unwrap(),
            );
            f(
                &format!("conv{i}.bias"),
                conv.bias.shape().to_vec(),
                conv.bias.as_slice().unwrap(),
            );
        }
        let named: [(&str, &Linear); 4] = [
            ("trunk", &self.trunk),
            ("class_head", &self.class_head),
            ("proj_hidden", &self.proj_hidden),
            ("proj_out", &self.proj_out),
        ];
        for (name, linear) in named {
            f(
                &format!("{name}.weight"),
                linear.weight.shape().to_vec(),
                linear.weight.as_slice().unwrap(),
            );
            f(
                &format!("{name}.bias"),
                linear.bias.shape().to_vec(),
                linear.bias.as_slice().unwrap(),
            );
        }
    }

    /// Writes `values` into the named parameter; shape must match.
    pub fn load_named(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let target: (&mut Array2<f64>, &mut ndarray::Array1<f64>) = if let Some(rest) =
            name.strip_prefix("conv")
        {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| QmixError::Parse(format!("bad parameter name `{name}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| QmixError::Parse(format!("bad parameter name `{name}`")))?;
            let conv = self
                .convs
                .get_mut(idx)
                .ok_or_else(|| QmixError::Parse(format!("no such conv layer `{name}`")))?;
            match field {
                "weight" => (&mut conv.weight, &mut conv.bias),
                "bias" => {
                    return write_vec(&mut conv.bias, shape, values, name);
                }
                _ => return Err(QmixError::Parse(format!("bad parameter name `{name}`"))),
            }
        } else {
            let (layer_name, field) = name
                .split_once('.')
                .ok_or_else(|| QmixError::Parse(format!("bad parameter name `{name}`")))?;
            let linear = match layer_name {
                "trunk" => &mut self.trunk,
                "class_head" => &mut self.class_head,
                "proj_hidden" => &mut self.proj_hidden,
                "proj_out" => &mut self.proj_out,
                _ => return Err(QmixError::Parse(format!("unknown layer `{name}`"))),
            };
            match field {
                "weight" => (&mut linear.weight, &mut linear.bias),
                "bias" => return write_vec(&mut linear.bias, shape, values, name),
                _ => return Err(QmixError::Parse(format!("bad parameter name `{name}`"))),
            }
        };
        let (weight, _) = target;
        if weight.shape() != shape {
            return Err(QmixError::Parse(format!(
                "shape mismatch for `{name}`: checkpoint {shape:?} vs model {:?}",
                weight.shape()
            )));
        }
        weight.as_slice_mut().unwrap().copy_from_slice(values);
        Ok(())
    }
}

fn write_vec(
    target: &mut ndarray::Array1<f64>,
    shape: &[usize],
    values: &[f64],
    name: &str,
) -> Result<()> {
    if target.shape() != shape {
        return Err(QmixError::Parse(format!(
            "shape mismatch for `{name}`: checkpoint {shape:?} vs model {:?}",
            target.shape()
        )));
    }
    target.as_slice_mut().unwrap().copy_from_slice(values);
    Ok(())
}

fn flatten(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    x.clone().into_shape_with_order((b, c * h * w)).unwrap()
}
