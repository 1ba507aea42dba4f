//! Residual backbone, MLP heads and the full branch forward/backward.

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, BatchNorm,
    BnCache, Conv2d, Linear, Tensor,
};
use super::params::{Declare, Layout, ParamSet};
use super::{BranchParams, EncoderConfig};

const NORM_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

struct BlockCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    down_bn: Option<BnCache>,
    out: Tensor,
}

impl Block {
    fn declare(d: &mut impl Declare, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::declare(d, &format!("{name}.conv1"), cin, cout, 3, stride);
        let bn1 = BatchNorm::declare(d, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::declare(d, &format!("{name}.conv2"), cout, cout, 3, 1);
        let bn2 = BatchNorm::declare(d, &format!("{name}.bn2"), cout);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::declare(d, &format!("{name}.downsample.conv"), cin, cout, 1, stride),
                BatchNorm::declare(d, &format!("{name}.downsample.bn"), cout),
            )
        });
        Block {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let mut r1 = self.bn1.forward_eval(ps, &self.conv1.forward(ps, x));
        relu_inplace(&mut r1);
        let mut out = self.bn2.forward_eval(ps, &self.conv2.forward(ps, &r1));
        match &self.down {
            Some((conv, bn)) => {
                let s = bn.forward_eval(ps, &conv.forward(ps, x));
                add_inplace(&mut out, &s);
            }
            None => add_inplace(&mut out, x),
        }
        relu_inplace(&mut out);
        out
    }

    fn forward_train(&self, ps: &mut ParamSet, x: Tensor) -> BlockCache {
        let (mut r1, bn1) = self.bn1.forward_train(ps, &self.conv1.forward(ps, &x));
        relu_inplace(&mut r1);
        let (mut out, bn2) = self.bn2.forward_train(ps, &self.conv2.forward(ps, &r1));
        let down_bn = match &self.down {
            Some((conv, bn)) => {
                let (s, cache) = bn.forward_train(ps, &conv.forward(ps, &x));
                add_inplace(&mut out, &s);
                Some(cache)
            }
            None => {
                add_inplace(&mut out, &x);
                None
            }
        };
        relu_inplace(&mut out);
        BlockCache {
            x,
            bn1,
            r1,
            bn2,
            down_bn,
            out,
        }
    }

    fn backward(&self, ps: &ParamSet, cache: &BlockCache, mut dy: Tensor, grads: &mut ParamSet) -> Tensor {
        relu_backward_inplace(&cache.out, &mut dy);
        let da2 = self.bn2.backward(ps, &cache.bn2, &dy, grads);
        let mut dr1 = self
            .conv2
            .backward(ps, &cache.r1, &da2, grads, true)
            .expect("input gradient requested");
        relu_backward_inplace(&cache.r1, &mut dr1);
        let da1 = self.bn1.backward(ps, &cache.bn1, &dr1, grads);
        let mut dx = self
            .conv1
            .backward(ps, &cache.x, &da1, grads, true)
            .expect("input gradient requested");
        match (&self.down, &cache.down_bn) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let ds = bn.backward(ps, bn_cache, &dy, grads);
                let dxs = conv
                    .backward(ps, &cache.x, &ds, grads, true)
                    .expect("input gradient requested");
                add_inplace(&mut dx, &dxs);
            }
            _ => add_inplace(&mut dx, &dy),
        }
        dx
    }
}

fn add_inplace(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.data.len(), b.data.len());
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Stem convolution followed by residual stages and global average pooling.
#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    pub out_channels: usize,
}

struct BackboneCache {
    input: Tensor,
    stem_bn: BnCache,
    stem_out: Tensor,
    blocks: Vec<BlockCache>,
    final_hw: (usize, usize),
}

impl Backbone {
    pub fn declare(d: &mut impl Declare, config: &EncoderConfig) -> Self {
        let width0 = config.widths[0];
        let stem = Conv2d::declare(d, "encoder.stem.conv", config.in_channels, width0, config.stem_kernel, 1);
        let stem_bn = BatchNorm::declare(d, "encoder.stem.bn", width0);
        let mut blocks = Vec::new();
        let mut cin = width0;
        for (s, ((&width, &count), &stride)) in config
            .widths
            .iter()
            .zip(&config.blocks_per_stage)
            .zip(&config.stage_strides)
            .enumerate()
        {
            for b in 0..count {
                let block_stride = if b == 0 { stride } else { 1 };
                blocks.push(Block::declare(
                    d,
                    &format!("encoder.stage{}.block{}", s + 1, b + 1),
                    cin,
                    width,
                    block_stride,
                ));
                cin = width;
            }
        }
        Backbone {
            stem,
            stem_bn,
            blocks,
            out_channels: cin,
        }
    }

    fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let mut h = self.stem_bn.forward_eval(ps, &self.stem.forward(ps, x));
        relu_inplace(&mut h);
        for block in &self.blocks {
            h = block.forward_eval(ps, &h);
        }
        global_avg_pool(&h)
    }

    fn forward_train(&self, ps: &mut ParamSet, x: Tensor) -> (Tensor, BackboneCache) {
        let (mut stem_out, stem_bn) = self.stem_bn.forward_train(ps, &self.stem.forward(ps, &x));
        relu_inplace(&mut stem_out);
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = caches.last().map_or_else(|| stem_out.clone(), |c| c.out.clone());
            caches.push(block.forward_train(ps, input));
        }
        let last = caches.last().map_or(&stem_out, |c| &c.out);
        let final_hw = (last.h, last.w);
        let pooled = global_avg_pool(last);
        (
            pooled,
            BackboneCache {
                input: x,
                stem_bn,
                stem_out,
                blocks: caches,
                final_hw,
            },
        )
    }

    fn backward(&self, ps: &ParamSet, cache: &BackboneCache, dpooled: &Tensor, grads: &mut ParamSet) {
        let mut dh = global_avg_pool_backward(dpooled, cache.final_hw.0, cache.final_hw.1);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(ps, bc, dh, grads);
        }
        relu_backward_inplace(&cache.stem_out, &mut dh);
        let da = self.stem_bn.backward(ps, &cache.stem_bn, &dh, grads);
        self.stem.backward(ps, &cache.input, &da, grads, false);
    }
}

/// Two dense layers with a ReLU between them and optional batch norm
/// before the ReLU.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    bn: Option<BatchNorm>,
    fc2: Linear,
}

struct MlpCache {
    x: Tensor,
    bn: Option<BnCache>,
    hidden: Tensor,
}

impl Mlp {
    pub fn declare(d: &mut impl Declare, name: &str, din: usize, hidden: usize, dout: usize, with_bn: bool) -> Self {
        let fc1 = Linear::declare(d, &format!("{name}.fc1"), din, hidden);
        let bn = with_bn.then(|| BatchNorm::declare(d, &format!("{name}.bn"), hidden));
        let fc2 = Linear::declare(d, &format!("{name}.fc2"), hidden, dout);
        Mlp { fc1, bn, fc2 }
    }

    fn forward_eval(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let mut h = self.fc1.forward(ps, x);
        if let Some(bn) = &self.bn {
            h = bn.forward_eval(ps, &h);
        }
        relu_inplace(&mut h);
        self.fc2.forward(ps, &h)
    }

    fn forward_train(&self, ps: &mut ParamSet, x: Tensor) -> (Tensor, MlpCache) {
        let mut h = self.fc1.forward(ps, &x);
        let bn = match &self.bn {
            Some(bn) => {
                let (out, cache) = bn.forward_train(ps, &h);
                h = out;
                Some(cache)
            }
            None => None,
        };
        relu_inplace(&mut h);
        let y = self.fc2.forward(ps, &h);
        (y, MlpCache { x, bn, hidden: h })
    }

    fn backward(&self, ps: &ParamSet, cache: &MlpCache, dy: &Tensor, grads: &mut ParamSet) -> Tensor {
        let mut dh = self.fc2.backward(ps, &cache.hidden, dy, grads);
        relu_backward_inplace(&cache.hidden, &mut dh);
        if let (Some(bn), Some(bc)) = (&self.bn, &cache.bn) {
            dh = bn.backward(ps, bc, &dh, grads);
        }
        self.fc1.backward(ps, &cache.x, &dh, grads)
    }
}

/// Topology of one branch: backbone, projector, and optional predictor.
/// Holds indices only; values live in [`BranchParams`].
#[derive(Debug, Clone)]
pub struct BranchNet {
    backbone: Backbone,
    projector: Mlp,
    predictor: Option<Mlp>,
}

/// Activations retained by a training forward pass.
pub struct ForwardCache {
    backbone: BackboneCache,
    projector: MlpCache,
    predictor: Option<MlpCache>,
    pre_norm: Tensor,
    normed: Tensor,
}

impl BranchNet {
    pub(crate) fn declare<D: Declare>(
        config: &EncoderConfig,
        with_predictor: bool,
        encoder: &mut D,
        projector: &mut D,
        predictor: Option<&mut D>,
    ) -> Self {
        let backbone = Backbone::declare(encoder, config);
        let proj = Mlp::declare(
            projector,
            "projector",
            backbone.out_channels,
            config.projector_hidden,
            config.embed_dim,
            false,
        );
        let pred = match (with_predictor, predictor) {
            (true, Some(d)) => Some(Mlp::declare(
                d,
                "predictor",
                config.embed_dim,
                config.predictor_hidden,
                config.embed_dim,
                true,
            )),
            _ => None,
        };
        BranchNet {
            backbone,
            projector: proj,
            predictor: pred,
        }
    }

    /// Layouts (encoder, projector, predictor) implied by a config.
    pub fn layouts(config: &EncoderConfig, with_predictor: bool) -> (Self, Layout, Layout, Option<Layout>) {
        let (mut enc, mut proj, mut pred) = (Layout::default(), Layout::default(), Layout::default());
        let net = BranchNet::declare(config, with_predictor, &mut enc, &mut proj, Some(&mut pred));
        (net, enc, proj, with_predictor.then_some(pred))
    }

    pub fn for_params(params: &BranchParams) -> Self {
        Self::layouts(&params.config, params.predictor.is_some()).0
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    /// Evaluation-mode forward (running batch-norm statistics). Input is a
    /// `C x N x H x W` tensor; output is `D x N` with unit-norm columns.
    pub fn forward_eval(&self, params: &BranchParams, x: &Tensor, use_predictor: bool) -> Tensor {
        let feat = self.backbone.forward_eval(&params.encoder, x);
        let mut z = self.projector.forward_eval(&params.projector, &feat);
        if use_predictor {
            let (pred, ps) = (
                self.predictor.as_ref().expect("predictor checked by caller"),
                params.predictor.as_ref().expect("predictor checked by caller"),
            );
            z = pred.forward_eval(ps, &z);
        }
        l2_normalize_columns(&z).0
    }

    /// Training-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(
        &self,
        params: &mut BranchParams,
        x: Tensor,
        use_predictor: bool,
    ) -> (Tensor, ForwardCache) {
        let (feat, backbone) = self.backbone.forward_train(&mut params.encoder, x);
        let (mut z, projector) = self.projector.forward_train(&mut params.projector, feat);
        let predictor = if use_predictor {
            let (pred, ps) = (
                self.predictor.as_ref().expect("predictor checked by caller"),
                params.predictor.as_mut().expect("predictor checked by caller"),
            );
            let (q, cache) = pred.forward_train(ps, z);
            z = q;
            Some(cache)
        } else {
            None
        };
        let (normed, _) = l2_normalize_columns(&z);
        (
            normed.clone(),
            ForwardCache {
                backbone,
                projector,
                predictor,
                pre_norm: z,
                normed,
            },
        )
    }

    /// Accumulates parameter gradients given `d_out`, the gradient with
    /// respect to the normalized `D x N` output.
    pub fn backward(&self, params: &BranchParams, cache: &ForwardCache, d_out: &Tensor, grads: &mut BranchParams) {
        let mut dz = l2_normalize_backward(&cache.pre_norm, &cache.normed, d_out);
        if let (Some(pred), Some(pc)) = (&self.predictor, &cache.predictor) {
            dz = pred.backward(
                params.predictor.as_ref().expect("predictor params"),
                pc,
                &dz,
                grads.predictor.as_mut().expect("predictor grads"),
            );
        }
        let dfeat = self
            .projector
            .backward(&params.projector, &cache.projector, &dz, &mut grads.projector);
        self.backbone
            .backward(&params.encoder, &cache.backbone, &dfeat, &mut grads.encoder);
    }
}

/// Normalizes each column of a `D x N` tensor; returns the result and the
/// column norms.
fn l2_normalize_columns(z: &Tensor) -> (Tensor, Vec<f32>) {
    let (d, n) = (z.c, z.n);
    let mut norms = vec![0.0f32; n];
    for j in 0..n {
        let s: f64 = (0..d).map(|i| (z.data[i * n + j] as f64).powi(2)).sum();
        norms[j] = (s.sqrt() as f32).max(NORM_FLOOR);
    }
    let mut out = z.clone();
    for i in 0..d {
        for j in 0..n {
            out.data[i * n + j] /= norms[j];
        }
    }
    (out, norms)
}

fn l2_normalize_backward(z: &Tensor, normed: &Tensor, d_out: &Tensor) -> Tensor {
    let (d, n) = (z.c, z.n);
    let mut dz = d_out.clone();
    for j in 0..n {
        let norm: f64 = (0..d).map(|i| (z.data[i * n + j] as f64).powi(2)).sum::<f64>().sqrt();
        let norm = (norm as f32).max(NORM_FLOOR);
        let proj: f32 = (0..d).map(|i| normed.data[i * n + j] * d_out.data[i * n + j]).sum();
        for i in 0..d {
            dz.data[i * n + j] = (d_out.data[i * n + j] - normed.data[i * n + j] * proj) / norm;
        }
    }
    dz
}
