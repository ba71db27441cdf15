//! CIFAR-style 6n+2 ResNet: plan construction, forward and backward passes.
//!
//! Layout: a 3×3 stem convolution with batch norm and ReLU, three stages of
//! two-convolution residual blocks at widths [16, 32, 64], stride-2 stage
//! transitions with 1×1 projection shortcuts, global average pooling and a
//! linear head on the pooled features.

use ndarray::{Array1, Array2, Array4};

use crate::nn::{
    bn_backward, bn_forward_eval, bn_forward_train, conv2d_backward, conv2d_forward,
    conv2d_output_shape, global_avg_pool_backward, global_avg_pool_forward, linear_backward,
    linear_forward, relu_backward, relu_forward, BnCache,
};

use super::params::{ParamDef, ParamGrads, ParamKind, ParamState};
use super::{ModelError, ModelSpec};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ConvDesc {
    weight: String,
    bias: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvDesc {
    fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn defs(&self, out: &mut Vec<ParamDef>) {
        out.push(ParamDef {
            name: self.weight.clone(),
            shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            kind: ParamKind::Weight,
        });
        out.push(ParamDef {
            name: self.bias.clone(),
            shape: vec![self.out_ch],
            kind: ParamKind::Bias,
        });
    }

    fn forward(&self, params: &ParamState, x: &Array4<f64>) -> Array4<f64> {
        conv2d_forward(
            x,
            &params.view4(&self.weight),
            &params.view1(&self.bias),
            self.stride,
            self.pad,
        )
    }

    fn backward(
        &self,
        params: &ParamState,
        grads: &mut ParamGrads,
        dy: &Array4<f64>,
        x: &Array4<f64>,
    ) -> Array4<f64> {
        let (dx, dw, db) = conv2d_backward(dy, x, &params.view4(&self.weight), self.stride, self.pad);
        grads.accumulate(params, &self.weight, dw);
        grads.accumulate(params, &self.bias, db);
        dx
    }

    fn macs(&self, (h, w): (usize, usize)) -> (u64, (usize, usize)) {
        let (ho, wo) = conv2d_output_shape((h, w), self.kernel, self.stride, self.pad);
        let macs = (self.kernel * self.kernel * self.in_ch * self.out_ch * ho * wo) as u64;
        (macs, (ho, wo))
    }
}

#[derive(Debug, Clone)]
struct BnDesc {
    scale: String,
    shift: String,
    running_mean: String,
    running_var: String,
    ch: usize,
}

impl BnDesc {
    fn new(name: &str, ch: usize) -> Self {
        Self {
            scale: format!("{name}.scale"),
            shift: format!("{name}.shift"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            ch,
        }
    }

    fn defs(&self, out: &mut Vec<ParamDef>) {
        for (name, kind) in [
            (&self.scale, ParamKind::BnScale),
            (&self.shift, ParamKind::BnShift),
            (&self.running_mean, ParamKind::BnRunningMean),
            (&self.running_var, ParamKind::BnRunningVar),
        ] {
            out.push(ParamDef {
                name: name.clone(),
                shape: vec![self.ch],
                kind,
            });
        }
    }

    fn forward_train(
        &self,
        params: &ParamState,
        x: &Array4<f64>,
        updates: &mut Vec<BnStatUpdate>,
    ) -> (Array4<f64>, BnCache) {
        let (y, cache, mean, var) =
            bn_forward_train(x, &params.view1(&self.scale), &params.view1(&self.shift), BN_EPS);
        let (b, _, h, w) = x.dim();
        updates.push(BnStatUpdate {
            mean_name: self.running_mean.clone(),
            var_name: self.running_var.clone(),
            mean,
            var_biased: var,
            count: b * h * w,
        });
        (y, cache)
    }

    fn forward_eval(&self, params: &ParamState, x: &Array4<f64>) -> Array4<f64> {
        bn_forward_eval(
            x,
            &params.view1(&self.scale),
            &params.view1(&self.shift),
            &params.view1(&self.running_mean),
            &params.view1(&self.running_var),
            BN_EPS,
        )
    }

    fn backward(
        &self,
        params: &ParamState,
        grads: &mut ParamGrads,
        dy: &Array4<f64>,
        cache: &BnCache,
    ) -> Array4<f64> {
        let (dx, dgamma, dbeta) = bn_backward(dy, cache, &params.view1(&self.scale));
        grads.accumulate(params, &self.scale, dgamma);
        grads.accumulate(params, &self.shift, dbeta);
        dx
    }
}

#[derive(Debug, Clone)]
struct BlockDesc {
    conv1: ConvDesc,
    bn1: BnDesc,
    conv2: ConvDesc,
    bn2: BnDesc,
    proj: Option<(ConvDesc, BnDesc)>,
}

impl BlockDesc {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let proj = if in_ch != out_ch || stride != 1 {
            Some((
                ConvDesc::new(&format!("{name}.proj.conv"), in_ch, out_ch, 1, stride),
                BnDesc::new(&format!("{name}.proj.bn"), out_ch),
            ))
        } else {
            None
        };
        Self {
            conv1: ConvDesc::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride),
            bn1: BnDesc::new(&format!("{name}.bn1"), out_ch),
            conv2: ConvDesc::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1),
            bn2: BnDesc::new(&format!("{name}.bn2"), out_ch),
            proj,
        }
    }

    fn defs(&self, out: &mut Vec<ParamDef>) {
        self.conv1.defs(out);
        self.bn1.defs(out);
        self.conv2.defs(out);
        self.bn2.defs(out);
        if let Some((conv, bn)) = &self.proj {
            conv.defs(out);
            bn.defs(out);
        }
    }

    fn macs(&self, dims: (usize, usize)) -> (u64, (usize, usize)) {
        let (m1, mid) = self.conv1.macs(dims);
        let (m2, out) = self.conv2.macs(mid);
        let mp = self.proj.as_ref().map_or(0, |(conv, _)| conv.macs(dims).0);
        (m1 + m2 + mp, out)
    }
}

/// Per-batch-norm statistics gathered during a training-mode forward pass.
/// The caller folds them into the running statistics.
#[derive(Debug, Clone)]
pub struct BnStatUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Array1<f64>,
    pub var_biased: Array1<f64>,
    /// Number of samples each statistic was computed over (batch × spatial).
    pub count: usize,
}

/// Features and logits of one network on one batch.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
}

struct BlockCache {
    bn1: BnCache,
    relu1: Array4<f64>,
    bn2: BnCache,
    proj_bn: Option<BnCache>,
    /// Block output after the final ReLU; also the next layer's input.
    out: Array4<f64>,
}

/// Activations retained by a training-mode forward pass.
pub struct NetCache {
    input: Array4<f64>,
    stem_bn: BnCache,
    stem_out: Array4<f64>,
    blocks: Vec<BlockCache>,
    features: Array2<f64>,
    final_hw: (usize, usize),
}

/// The full layer graph of one 6n+2 ResNet, with parameter names scoped by a
/// prefix so several networks can share one [`ParamState`].
#[derive(Debug, Clone)]
pub struct ResNetPlan {
    pub spec: ModelSpec,
    prefix: String,
    in_channels: usize,
    stem_conv: ConvDesc,
    stem_bn: BnDesc,
    blocks: Vec<BlockDesc>,
    head_weight: String,
    head_bias: String,
}

impl ResNetPlan {
    pub fn new(prefix: impl Into<String>, spec: ModelSpec, in_channels: usize) -> Self {
        let prefix = prefix.into();
        let widths = spec.stage_widths;
        let stem_conv = ConvDesc::new(&format!("{prefix}stem.conv"), in_channels, widths[0], 3, 1);
        let stem_bn = BnDesc::new(&format!("{prefix}stem.bn"), widths[0]);

        let per_stage = spec.blocks_per_stage();
        let mut blocks = Vec::with_capacity(3 * per_stage);
        let mut in_ch = widths[0];
        for (stage, &width) in widths.iter().enumerate() {
            for block in 0..per_stage {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                let name = format!("{prefix}stage{stage}.block{block}");
                blocks.push(BlockDesc::new(&name, in_ch, width, stride));
                in_ch = width;
            }
        }

        Self {
            spec,
            in_channels,
            stem_conv,
            stem_bn,
            blocks,
            head_weight: format!("{prefix}head.weight"),
            head_bias: format!("{prefix}head.bias"),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn head_weight_name(&self) -> &str {
        &self.head_weight
    }

    pub fn head_bias_name(&self) -> &str {
        &self.head_bias
    }

    /// Every tensor this network needs, in forward order.
    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        self.stem_conv.defs(&mut defs);
        self.stem_bn.defs(&mut defs);
        for block in &self.blocks {
            block.defs(&mut defs);
        }
        defs.push(ParamDef {
            name: self.head_weight.clone(),
            shape: vec![self.spec.feature_dim(), self.spec.num_classes],
            kind: ParamKind::Weight,
        });
        defs.push(ParamDef {
            name: self.head_bias.clone(),
            shape: vec![self.spec.num_classes],
            kind: ParamKind::Bias,
        });
        defs
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels || h == 0 || w == 0 {
            return Err(ModelError::ShapeMismatch {
                layer: self.stem_conv.weight.clone(),
                expected: format!("(_, {}, h>0, w>0)", self.in_channels),
                got: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    /// Training-mode forward: batch statistics in every batch norm, full
    /// cache for backward, running-stat updates reported to the caller.
    pub fn forward_train(
        &self,
        params: &ParamState,
        x: &Array4<f64>,
    ) -> Result<(NetOutput, NetCache, Vec<BnStatUpdate>), ModelError> {
        self.check_input(x)?;
        let mut updates = Vec::new();

        let stem_pre = self.stem_conv.forward(params, x);
        let (stem_norm, stem_bn_cache) = self.stem_bn.forward_train(params, &stem_pre, &mut updates);
        let stem_out = relu_forward(stem_norm);

        let mut blocks: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let current = if i == 0 { &stem_out } else { &blocks[i - 1].out };
            let pre1 = block.conv1.forward(params, current);
            let (norm1, bn1) = block.bn1.forward_train(params, &pre1, &mut updates);
            let relu1 = relu_forward(norm1);
            let pre2 = block.conv2.forward(params, &relu1);
            let (main, bn2) = block.bn2.forward_train(params, &pre2, &mut updates);

            let (shortcut, proj_bn) = match &block.proj {
                Some((conv, bn)) => {
                    let projected = conv.forward(params, current);
                    let (normed, cache) = bn.forward_train(params, &projected, &mut updates);
                    (normed, Some(cache))
                }
                None => (current.clone(), None),
            };
            let out = relu_forward(main + shortcut);
            blocks.push(BlockCache {
                bn1,
                relu1,
                bn2,
                proj_bn,
                out,
            });
        }

        let final_out = blocks.last().map_or(&stem_out, |b| &b.out);
        let (_, _, fh, fw) = final_out.dim();
        let features = global_avg_pool_forward(final_out);
        let logits = linear_forward(
            &features,
            &params.view2(&self.head_weight),
            &params.view1(&self.head_bias),
        );

        let output = NetOutput {
            features: features.clone(),
            logits,
        };
        let cache = NetCache {
            input: x.clone(),
            stem_bn: stem_bn_cache,
            stem_out,
            blocks,
            features,
            final_hw: (fh, fw),
        };
        Ok((output, cache, updates))
    }

    /// Inference-mode forward: running statistics, no cache.
    pub fn forward_eval(&self, params: &ParamState, x: &Array4<f64>) -> Result<NetOutput, ModelError> {
        self.check_input(x)?;
        let stem_pre = self.stem_conv.forward(params, x);
        let mut current = relu_forward(self.stem_bn.forward_eval(params, &stem_pre));
        for block in &self.blocks {
            let pre1 = block.conv1.forward(params, &current);
            let relu1 = relu_forward(block.bn1.forward_eval(params, &pre1));
            let pre2 = block.conv2.forward(params, &relu1);
            let main = block.bn2.forward_eval(params, &pre2);
            let shortcut = match &block.proj {
                Some((conv, bn)) => bn.forward_eval(params, &conv.forward(params, &current)),
                None => current,
            };
            current = relu_forward(main + shortcut);
        }
        let features = global_avg_pool_forward(&current);
        let logits = linear_forward(
            &features,
            &params.view2(&self.head_weight),
            &params.view1(&self.head_bias),
        );
        Ok(NetOutput { features, logits })
    }

    /// Backward from a logit gradient, accumulating parameter gradients.
    pub fn backward(
        &self,
        params: &ParamState,
        cache: &NetCache,
        dlogits: &Array2<f64>,
        grads: &mut ParamGrads,
    ) {
        let (dfeatures, dw_head, db_head) = linear_backward(
            dlogits,
            &cache.features,
            &params.view2(&self.head_weight),
        );
        grads.accumulate(params, &self.head_weight, dw_head);
        grads.accumulate(params, &self.head_bias, db_head);

        let mut d_out = global_avg_pool_backward(&dfeatures, cache.final_hw);

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let block_cache = &cache.blocks[i];
            let block_input = if i == 0 {
                &cache.stem_out
            } else {
                &cache.blocks[i - 1].out
            };

            let d_sum = relu_backward(&d_out, &block_cache.out);

            let d_main = block.bn2.backward(params, grads, &d_sum, &block_cache.bn2);
            let d_relu1 = block.conv2.backward(params, grads, &d_main, &block_cache.relu1);
            let d_norm1 = relu_backward(&d_relu1, &block_cache.relu1);
            let d_pre1 = block.bn1.backward(params, grads, &d_norm1, &block_cache.bn1);
            let mut d_in = block.conv1.backward(params, grads, &d_pre1, block_input);

            match (&block.proj, &block_cache.proj_bn) {
                (Some((conv, bn)), Some(proj_cache)) => {
                    let d_proj = bn.backward(params, grads, &d_sum, proj_cache);
                    d_in += &conv.backward(params, grads, &d_proj, block_input);
                }
                _ => d_in += &d_sum,
            }
            d_out = d_in;
        }

        let d_stem = relu_backward(&d_out, &cache.stem_out);
        let d_stem_pre = self.stem_bn.backward(params, grads, &d_stem, &cache.stem_bn);
        let _ = self
            .stem_conv
            .backward(params, grads, &d_stem_pre, &cache.input);
    }

    /// Multiply-accumulate count over convolutions (projection shortcuts
    /// included) and the linear head, for one sample at the given input size.
    pub fn count_flops(&self, input: (usize, usize)) -> u64 {
        let (stem, mut dims) = self.stem_conv.macs(input);
        let mut total = stem;
        for block in &self.blocks {
            let (macs, next) = block.macs(dims);
            total += macs;
            dims = next;
        }
        total + (self.spec.feature_dim() * self.spec.num_classes) as u64
    }
}
