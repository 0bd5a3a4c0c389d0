use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, SegHead, STAGE_DILATIONS, STAGE_STRIDES};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::ConvGeom;
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// One parameterized layer of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
}

impl LayerSpec {
    fn conv(in_ch: usize, out_ch: usize, kernel: usize, geom: ConvGeom) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            geom,
            bias: false,
        }
    }

    fn classifier(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 1,
            geom: ConvGeom::default(),
            bias: true,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => out_ch * in_ch * kernel * kernel + if bias { out_ch } else { 0 },
            LayerSpec::BatchNorm { channels } => 2 * channels,
        }
    }
}

/// Ordered inventory of every layer, keyed by path prefix. Forward passes
/// look layers up here, so shapes and geometry have a single source.
#[derive(Clone, Debug)]
pub struct Architecture {
    layers: Vec<(String, LayerSpec)>,
    index: HashMap<String, usize>,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut add = |name: String, spec: LayerSpec| layers.push((name, spec));
        let conv_bn = |add: &mut dyn FnMut(String, LayerSpec), name: &str, spec: LayerSpec| {
            let ch = match spec {
                LayerSpec::Conv { out_ch, .. } => out_ch,
                LayerSpec::BatchNorm { .. } => unreachable!(),
            };
            add(format!("{name}.conv"), spec);
            add(format!("{name}.bn"), LayerSpec::BatchNorm { channels: ch });
        };

        let b = config.base_channels;
        conv_bn(
            &mut add,
            "backbone.stem.0",
            LayerSpec::conv(3, b, 3, ConvGeom::new(2, 1, 1)),
        );
        conv_bn(
            &mut add,
            "backbone.stem.1",
            LayerSpec::conv(b, b, 3, ConvGeom::new(2, 1, 1)),
        );

        let widths = config.stage_channels();
        let mut in_ch = b;
        for (s, &blocks) in config.blocks_per_stage.iter().enumerate() {
            let (out, dil) = (widths[s], STAGE_DILATIONS[s]);
            for blk in 0..blocks {
                let stride = if blk == 0 { STAGE_STRIDES[s] } else { 1 };
                let p = format!("backbone.stage{}.block{blk}", s + 1);
                conv_bn(
                    &mut add,
                    &format!("{p}.0"),
                    LayerSpec::conv(in_ch, out, 3, ConvGeom::new(stride, dil, dil)),
                );
                conv_bn(
                    &mut add,
                    &format!("{p}.1"),
                    LayerSpec::conv(out, out, 3, ConvGeom::same(3, dil)),
                );
                if stride != 1 || in_ch != out {
                    conv_bn(
                        &mut add,
                        &format!("{p}.shortcut"),
                        LayerSpec::conv(in_ch, out, 1, ConvGeom::new(stride, 1, 0)),
                    );
                }
                in_ch = out;
            }
        }

        let a = config.aspp_channels();
        let dilations = config.effective_dilations();
        for (i, &d) in dilations.iter().enumerate() {
            conv_bn(
                &mut add,
                &format!("aspp.branch{i}"),
                LayerSpec::conv(in_ch, a, 3, ConvGeom::same(3, d)),
            );
        }
        conv_bn(
            &mut add,
            "aspp.pool",
            LayerSpec::conv(in_ch, a, 1, ConvGeom::default()),
        );
        conv_bn(
            &mut add,
            "aspp.project",
            LayerSpec::conv(a * (dilations.len() + 1), a, 1, ConvGeom::default()),
        );

        let h = config.head_channels();
        let out_ch = 1 + config.num_damage_classes;
        match config.seg_head {
            SegHead::Simple => {
                conv_bn(
                    &mut add,
                    "seg_head.block",
                    LayerSpec::conv(a, h, 3, ConvGeom::same(3, 1)),
                );
            }
            SegHead::EncoderDecoder => {
                let l = config.low_level_channels();
                conv_bn(
                    &mut add,
                    "seg_head.low",
                    LayerSpec::conv(widths[0], l, 1, ConvGeom::default()),
                );
                conv_bn(
                    &mut add,
                    "seg_head.block",
                    LayerSpec::conv(a + l, h, 3, ConvGeom::same(3, 1)),
                );
            }
        }
        add(
            "seg_head.classifier".into(),
            LayerSpec::classifier(h, out_ch),
        );

        if config.change_head_enabled {
            let c = config.change_channels();
            conv_bn(
                &mut add,
                "change_head.0",
                LayerSpec::conv(a, c, 1, ConvGeom::default()),
            );
            conv_bn(
                &mut add,
                "change_head.1",
                LayerSpec::conv(c, c, 1, ConvGeom::default()),
            );
            add(
                "change_head.classifier".into(),
                LayerSpec::classifier(c, config.num_damage_classes),
            );
        }

        let index = layers
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(Architecture { layers, index })
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn get(&self, name: &str) -> Result<&LayerSpec> {
        self.index
            .get(name)
            .map(|&i| &self.layers[i].1)
            .ok_or_else(|| Error::Internal(format!("no layer named `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, l)| l.param_count()).sum()
    }

    /// Human-readable table: one line per layer.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for (name, spec) in &self.layers {
            match spec {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    geom,
                    bias,
                } => writeln!(
                    s,
                    "{name:<36} conv {in_ch:>4} -> {out_ch:<4} k{kernel} s{} d{} p{}{} params={}",
                    geom.stride,
                    geom.dilation,
                    geom.padding,
                    if *bias { " +bias" } else { "" },
                    spec.param_count()
                ),
                LayerSpec::BatchNorm { channels } => writeln!(
                    s,
                    "{name:<36} bn   {channels:>4}                       params={}",
                    spec.param_count()
                ),
            }
            .expect("write to string");
        }
        writeln!(s, "total params={}", self.param_count()).expect("write to string");
        s
    }
}

/// Suffixes of non-trainable tensors.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(path: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| path.ends_with(s))
}

/// Every tensor of a model keyed by path, in lexicographic path order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|p| !is_buffer(p))
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(p, _)| !is_buffer(p))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
    }
}

fn path_key(path: &str) -> u64 {
    // FNV-1a
    path.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Deterministic initialization: He-normal conv weights (std sqrt(2/fan_in)),
/// zero biases, unit gamma, zero beta, zero running mean, unit running var.
/// Each tensor draws from its own stream keyed by path.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let arch = Architecture::new(config)?;
    let root = SplitMix64::new(seed);
    let mut tensors = BTreeMap::new();
    for (name, spec) in arch.layers() {
        match *spec {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let path = format!("{name}.weight");
                let mut rng = root.derive(path_key(&path));
                let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
                let w = Tensor::from_fn([out_ch, in_ch, kernel, kernel], |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32
                });
                tensors.insert(path, w);
                if bias {
                    tensors.insert(format!("{name}.bias"), Tensor::zeros([out_ch]));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                tensors.insert(format!("{name}.gamma"), Tensor::ones([channels]));
                tensors.insert(format!("{name}.beta"), Tensor::zeros([channels]));
                tensors.insert(format!("{name}.running_mean"), Tensor::zeros([channels]));
                tensors.insert(format!("{name}.running_var"), Tensor::ones([channels]));
            }
        }
    }
    Ok(ModelParams { tensors })
}

/// Model tensors placed on a tape: trainable ones as leaves, running
/// statistics as plain values.
pub struct Binding<T: Real> {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Binding<T> {
    /// Binds every tensor of `params`; leaves track gradients iff `track`.
    pub fn new(tape: &mut Tape<T>, params: &ModelParams, track: bool) -> Self {
        Self::with_overrides(tape, params, track, &BTreeMap::new())
    }

    /// Like [`Binding::new`], but tensors in `overrides` replace those of
    /// `params` (used to evaluate a model in 64-bit precision).
    pub fn with_overrides(
        tape: &mut Tape<T>,
        params: &ModelParams,
        track: bool,
        overrides: &BTreeMap<String, Tensor<T>>,
    ) -> Self {
        let mut vars = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for (path, t) in params.iter() {
            let value = overrides
                .get(path)
                .cloned()
                .unwrap_or_else(|| t.cast::<T>());
            if is_buffer(path) {
                buffers.insert(path.clone(), value);
            } else {
                vars.insert(path.clone(), tape.leaf(value, track));
            }
        }
        Binding { vars, buffers }
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Internal(format!("parameter `{path}` is not bound")))
    }

    /// Points `path` at another variable, e.g. a perturbation input of a
    /// finite-difference check.
    pub fn replace(&mut self, path: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(path) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Internal(format!("parameter `{path}` is not bound"))),
        }
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::Internal(format!("buffer `{path}` is not bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_unique_and_sorted() {
        let p = build_model(&ModelConfig::default(), 1).unwrap();
        let paths: Vec<_> = p.paths().cloned().collect();
        let mut sorted = paths.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(paths, sorted);
        assert!(p.get("backbone.stem.0.conv.weight").is_some());
        assert!(p.get("aspp.branch2.bn.running_var").is_some());
    }

    #[test]
    fn architecture_count_matches_tensors() {
        let c = ModelConfig::default();
        let arch = Architecture::new(&c).unwrap();
        let p = build_model(&c, 0).unwrap();
        assert_eq!(arch.param_count(), p.param_count());
        assert!(arch.table().contains("total params="));
    }

    #[test]
    fn disabled_change_head_has_no_params() {
        let c = ModelConfig {
            change_head_enabled: false,
            ..ModelConfig::default()
        };
        let p = build_model(&c, 0).unwrap();
        assert!(p.paths().all(|k| !k.starts_with("change_head")));
    }
}
