use super::config::{ModelConfig, SegHead, OUTPUT_STRIDE};
use super::params::{Architecture, Binding, LayerSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchStats, Mode, BN_EPS};
use crate::tensor::Real;

/// Records the network on a tape, resolving layers by name.
pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub binding: &'a Binding<T>,
    pub arch: &'a Architecture,
    pub mode: Mode,
    /// Batch statistics of every batch-norm layer run in train mode.
    pub stats: Vec<(String, BatchStats<T>)>,
}

/// Head outputs of one forward pass, all at input resolution.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    /// `N x 1 x H x W`
    pub loc_logits_pre: Var,
    pub loc_logits_post: Var,
    /// `N x 4 x H x W`, from the post image.
    pub damage_logits_seg: Var,
    pub damage_logits_change: Option<Var>,
    /// ASPP output difference `post - pre` fed to the change head.
    pub change_input: Var,
    /// Backbone output for both images, pre first: `2N x C x H/8 x W/8`.
    pub backbone_out: Var,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        binding: &'a Binding<T>,
        arch: &'a Architecture,
        mode: Mode,
    ) -> Self {
        Graph {
            tape,
            binding,
            arch,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let LayerSpec::Conv { geom, bias, .. } = *self.arch.get(name)? else {
            return Err(Error::Internal(format!("`{name}` is not a convolution")));
        };
        let w = self.binding.var(&format!("{name}.weight"))?;
        let b = if bias {
            Some(self.binding.var(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, geom)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.binding.var(&format!("{name}.gamma"))?;
        let beta = self.binding.var(&format!("{name}.beta"))?;
        let eps = T::from_f64_lossy(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.binding.buffer(&format!("{name}.running_mean"))?;
                let var = self.binding.buffer(&format!("{name}.running_var"))?;
                self.tape
                    .batch_norm_eval(x, gamma, beta, mean.data(), var.data(), eps)
            }
        }
    }

    /// Convolution, batch norm and optional ReLU under prefix `name`.
    fn conv_bn(&mut self, name: &str, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn has(&self, name: &str) -> bool {
        self.arch.get(name).is_ok()
    }

    fn residual_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv_bn(&format!("{prefix}.0"), x, true)?;
        let y = self.conv_bn(&format!("{prefix}.1"), y, false)?;
        let shortcut = format!("{prefix}.shortcut");
        let skip = if self.has(&format!("{shortcut}.conv")) {
            self.conv_bn(&shortcut, x, false)?
        } else {
            x
        };
        let sum = self.tape.add(y, skip)?;
        Ok(self.tape.relu(sum))
    }

    /// Stem and four residual stages. Returns `(stage-1 features at 1/4,
    /// stage-4 features at 1/8)`.
    pub fn backbone(&mut self, x: Var, blocks_per_stage: &[usize]) -> Result<(Var, Var)> {
        let mut y = self.conv_bn("backbone.stem.0", x, true)?;
        y = self.conv_bn("backbone.stem.1", y, true)?;
        let mut low = y;
        for (s, &blocks) in blocks_per_stage.iter().enumerate() {
            for b in 0..blocks {
                y = self.residual_block(&format!("backbone.stage{}.block{b}", s + 1), y)?;
            }
            if s == 0 {
                low = y;
            }
        }
        Ok((low, y))
    }

    /// Dilated 3x3 branches plus an image-pooling branch, concatenated and
    /// projected by a 1x1 convolution.
    pub fn aspp(&mut self, feats: Var, branches: usize) -> Result<Var> {
        let mut outs = Vec::with_capacity(branches + 1);
        for i in 0..branches {
            outs.push(self.conv_bn(&format!("aspp.branch{i}"), feats, true)?);
        }
        let shape = self.tape.shape(feats).to_vec();
        let pooled = self.tape.global_avg_pool(feats)?;
        let pooled = self.conv_bn("aspp.pool", pooled, true)?;
        let c = self.tape.shape(pooled)[1];
        outs.push(
            self.tape
                .expand(pooled, [shape[0], c, shape[2], shape[3]])?,
        );
        let cat = self.tape.concat(&outs, 1)?;
        self.conv_bn("aspp.project", cat, true)
    }

    /// Returns `1 + C` logit channels at input resolution.
    pub fn seg_head(&mut self, variant: SegHead, aspp_out: Var, low_level: Var) -> Result<Var> {
        match variant {
            SegHead::Simple => {
                let y = self.conv_bn("seg_head.block", aspp_out, true)?;
                let y = self.conv("seg_head.classifier", y)?;
                self.tape.upsample_bilinear(y, OUTPUT_STRIDE)
            }
            SegHead::EncoderDecoder => {
                let up = self.tape.upsample_bilinear(aspp_out, 2)?;
                let low = self.conv_bn("seg_head.low", low_level, true)?;
                let cat = self.tape.concat(&[up, low], 1)?;
                let y = self.conv_bn("seg_head.block", cat, true)?;
                let y = self.conv("seg_head.classifier", y)?;
                self.tape.upsample_bilinear(y, OUTPUT_STRIDE / 2)
            }
        }
    }

    /// Two hidden 1x1 layers and a 1x1 classifier on the feature difference.
    pub fn change_head(&mut self, diff: Var) -> Result<Var> {
        let y = self.conv_bn("change_head.0", diff, true)?;
        let y = self.conv_bn("change_head.1", y, true)?;
        let y = self.conv("change_head.classifier", y)?;
        self.tape.upsample_bilinear(y, OUTPUT_STRIDE)
    }
}

/// Checks that a pre/post pair is `N x 3 x H x W` with `H, W` positive
/// multiples of 8.
pub fn check_pair_shape(pre: &[usize], post: &[usize]) -> Result<()> {
    if pre != post {
        return Err(Error::ShapeMismatch {
            lhs: pre.to_vec(),
            rhs: post.to_vec(),
        });
    }
    let ok = pre.len() == 4
        && pre[0] > 0
        && pre[1] == 3
        && pre[2] > 0
        && pre[3] > 0
        && pre[2].is_multiple_of(OUTPUT_STRIDE)
        && pre[3].is_multiple_of(OUTPUT_STRIDE);
    if !ok {
        return Err(Error::InvalidShape {
            shape: pre.to_vec(),
            reason: format!(
                "expected N x 3 x H x W with H and W positive multiples of {OUTPUT_STRIDE}"
            ),
        });
    }
    Ok(())
}

/// Runs both images through one shared backbone and ASPP (stacked on the
/// batch axis), the segmentation head on both, and the change head on the
/// ASPP feature difference.
pub fn forward_pair<T: Real>(
    tape: &mut Tape<T>,
    binding: &Binding<T>,
    arch: &Architecture,
    config: &ModelConfig,
    pre: Var,
    post: Var,
    mode: Mode,
) -> Result<ForwardOutputs<T>> {
    check_pair_shape(tape.shape(pre), tape.shape(post))?;
    let n = tape.shape(pre)[0];
    let k = config.num_damage_classes;

    let mut g = Graph::new(tape, binding, arch, mode);
    let both = g.tape.concat(&[pre, post], 0)?;
    let (low, feats) = g.backbone(both, &config.blocks_per_stage)?;
    let aspp = g.aspp(feats, config.effective_dilations().len())?;
    let seg = g.seg_head(config.seg_head, aspp, low)?;

    let seg_pre = g.tape.narrow(seg, 0, 0, n)?;
    let seg_post = g.tape.narrow(seg, 0, n, n)?;
    let loc_logits_pre = g.tape.narrow(seg_pre, 1, 0, 1)?;
    let loc_logits_post = g.tape.narrow(seg_post, 1, 0, 1)?;
    let damage_logits_seg = g.tape.narrow(seg_post, 1, 1, k)?;

    let aspp_pre = g.tape.narrow(aspp, 0, 0, n)?;
    let aspp_post = g.tape.narrow(aspp, 0, n, n)?;
    let change_input = g.tape.sub(aspp_post, aspp_pre)?;
    let damage_logits_change = if config.change_head_enabled {
        Some(g.change_head(change_input)?)
    } else {
        None
    };

    Ok(ForwardOutputs {
        loc_logits_pre,
        loc_logits_post,
        damage_logits_seg,
        damage_logits_change,
        change_input,
        backbone_out: feats,
        bn_stats: g.stats,
    })
}
