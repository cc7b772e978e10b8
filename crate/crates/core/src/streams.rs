//! The two-stream network.
//!
//! The appearance stream is a plain stack of ReLU convolutions. The part
//! stream runs a shared backbone producing `F`, then `T_P` affinity stages
//! `L¹ = φ¹(F)`, `Lᵗ = φᵗ(F ⊕ Lᵗ⁻¹)` and `T_C` confidence stages seeded by
//! `F ⊕ L^{T_P}` and continued with `F ⊕ L^{T_P} ⊕ Sᵗ⁻¹` (⊕ = channel concat).
//! The last confidence map is the part map `p`.
//!
//! Each stage is `conv → ReLU → conv` with "same" padding.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        (self.kernel <= padded && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// `(channels, H, W)` of the input image.
    pub input_shape: (usize, usize, usize),
    pub appearance_layers: Vec<ConvSpec>,
    pub backbone_layers: Vec<ConvSpec>,
    /// Affinity-field stages, `T_P`.
    pub paf_stages: usize,
    /// Confidence stages, `T_C`.
    pub conf_stages: usize,
    pub paf_channels: usize,
    /// Channels of the part map `p`.
    pub conf_channels: usize,
    pub stage_hidden: usize,
    /// Odd kernel size of both stage convolutions.
    pub stage_kernel: usize,
    /// Zero-based appearance layer indices whose outputs are tapped.
    pub tap_layers: Vec<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            input_shape: (3, 64, 32),
            appearance_layers: vec![
                ConvSpec::new(8, 3, 2, 1),
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 3, 1, 1),
            ],
            backbone_layers: vec![
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 3, 2, 1),
            ],
            paf_stages: 2,
            conf_stages: 1,
            paf_channels: 8,
            conf_channels: 8,
            stage_hidden: 16,
            stage_kernel: 3,
            tap_layers: vec![1, 2],
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.paf_stages < 1 || self.conf_stages < 1 {
            problems.push(format!(
                "need at least one affinity and one confidence stage, got paf_stages={} conf_stages={}",
                self.paf_stages, self.conf_stages
            ));
        }
        if self.appearance_layers.is_empty() || self.backbone_layers.is_empty() {
            problems.push("appearance and backbone stacks need at least one layer each".into());
        }
        if self.stage_kernel.is_multiple_of(2) {
            problems.push(format!("stage kernel must be odd, got {}", self.stage_kernel));
        }
        if [self.paf_channels, self.conf_channels, self.stage_hidden].contains(&0) {
            problems.push("stage channel counts must be positive".into());
        }
        let all_layers = self.appearance_layers.iter().chain(&self.backbone_layers);
        if all_layers
            .clone()
            .any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            problems.push("conv layers need positive channels, kernel and stride".into());
        }
        for &t in &self.tap_layers {
            if t >= self.appearance_layers.len() {
                problems.push(format!(
                    "tap layer {t} outside the {} appearance layers",
                    self.appearance_layers.len()
                ));
            }
        }
        if problems.is_empty() {
            match (
                stack_shapes(self.input_shape, &self.appearance_layers),
                stack_shapes(self.input_shape, &self.backbone_layers),
            ) {
                (Some(app), Some(bb)) => {
                    let (a, b) = (app.last().unwrap(), bb.last().unwrap());
                    if (a.1, a.2) != (b.1, b.2) {
                        problems.push(format!(
                            "appearance output {}×{} and part output {}×{} are not spatially aligned",
                            a.1, a.2, b.1, b.2
                        ));
                    }
                }
                _ => problems.push("a conv kernel exceeds its padded input".into()),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `C_a`
    pub fn appearance_channels(&self) -> usize {
        self.appearance_layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone_layers.last().map_or(0, |l| l.out_channels)
    }

    /// Output shape of every appearance layer.
    pub fn appearance_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        stack_shapes(self.input_shape, &self.appearance_layers)
            .ok_or_else(|| Error::Config("appearance kernel exceeds its padded input".into()))
    }

    /// Spatial extents shared by `a` and `p`.
    pub fn output_spatial(&self) -> Result<(usize, usize)> {
        let (_, h, w) = *self.appearance_shapes()?.last().unwrap();
        Ok((h, w))
    }

    /// Channels of each tapped layer, in `tap_layers` order.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_layers
            .iter()
            .map(|&t| self.appearance_layers[t].out_channels)
            .collect()
    }

    fn stage_inputs(&self) -> (Vec<usize>, Vec<usize>) {
        let f = self.backbone_channels();
        let paf = (1..=self.paf_stages)
            .map(|t| if t == 1 { f } else { f + self.paf_channels })
            .collect();
        let conf = (1..=self.conf_stages)
            .map(|t| f + self.paf_channels + if t == 1 { 0 } else { self.conf_channels })
            .collect();
        (paf, conf)
    }

    /// Initializes every stream parameter uniformly in `±1/√fan_in`, in a fixed order.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut in_ch = self.input_shape.0;
        for (i, l) in self.appearance_layers.iter().enumerate() {
            init_conv(&mut store, &format!("app.{i}"), in_ch, l.out_channels, l.kernel, rng);
            in_ch = l.out_channels;
        }
        let mut in_ch = self.input_shape.0;
        for (i, l) in self.backbone_layers.iter().enumerate() {
            init_conv(
                &mut store,
                &format!("backbone.{i}"),
                in_ch,
                l.out_channels,
                l.kernel,
                rng,
            );
            in_ch = l.out_channels;
        }
        let (paf_in, conf_in) = self.stage_inputs();
        for (t, &cin) in paf_in.iter().enumerate() {
            self.init_stage(&mut store, &format!("paf.{}", t + 1), cin, self.paf_channels, rng);
        }
        for (t, &cin) in conf_in.iter().enumerate() {
            self.init_stage(&mut store, &format!("conf.{}", t + 1), cin, self.conf_channels, rng);
        }
        Ok(store)
    }

    fn init_stage<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut R) {
        let k = self.stage_kernel;
        init_conv(store, &format!("{prefix}.conv0"), cin, self.stage_hidden, k, rng);
        init_conv(store, &format!("{prefix}.conv1"), self.stage_hidden, cout, k, rng);
    }

    /// Parameter names belonging to the part stream.
    pub fn is_part_param(name: &str) -> bool {
        name.starts_with("backbone.") || name.starts_with("paf.") || name.starts_with("conf.")
    }

    pub fn is_appearance_param(name: &str) -> bool {
        name.starts_with("app.")
    }
}

fn stack_shapes(input: (usize, usize, usize), layers: &[ConvSpec]) -> Option<Vec<(usize, usize, usize)>> {
    let (_, mut h, mut w) = input;
    let mut shapes = Vec::with_capacity(layers.len());
    for l in layers {
        h = l.output_extent(h)?;
        w = l.output_extent(w)?;
        shapes.push((l.out_channels, h, w));
    }
    Some(shapes)
}

fn init_conv<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::uniform(&[cout], -bound, bound, rng));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Appearance,
    Paf,
    Confidence,
    Backbone,
}

/// A `C×H×W` feature map tagged with the stream that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, kind: FeatureKind) -> Result<Self> {
        tensor.chw()?;
        Ok(FeatureMap { tensor, kind })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub layer_index: usize,
    pub feature: FeatureMap,
}

/// Tape handles produced by one appearance pass.
#[derive(Debug, Clone)]
pub struct AppearanceOutput {
    pub a: Var,
    /// `(layer index, output)` for every configured tap.
    pub taps: Vec<(usize, Var)>,
}

/// Tape handles of every intermediate map of one part pass.
#[derive(Debug, Clone)]
pub struct PartOutput {
    pub backbone: Var,
    pub pafs: Vec<Var>,
    pub confs: Vec<Var>,
}

impl PartOutput {
    pub fn p(&self) -> Var {
        *self.confs.last().expect("at least one confidence stage")
    }
}

fn check_image(tape: &Tape, image: Var, config: &StreamConfig) -> Result<()> {
    let (c, h, w) = tape.value(image).chw()?;
    if (c, h, w) != config.input_shape {
        return Err(Error::Config(format!(
            "image shape {c}×{h}×{w} does not match configured input {:?}",
            config.input_shape
        )));
    }
    Ok(())
}

fn conv_layer(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = params.var(&format!("{prefix}.weight"))?;
    let b = params.var(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, b, stride, padding)
}

fn stage(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str, config: &StreamConfig) -> Result<Var> {
    let pad = config.stage_kernel / 2;
    let h = conv_layer(tape, x, params, &format!("{prefix}.conv0"), 1, pad)?;
    let h = tape.relu(h);
    conv_layer(tape, h, params, &format!("{prefix}.conv1"), 1, pad)
}

pub fn appearance_forward_on(
    tape: &mut Tape,
    image: Var,
    config: &StreamConfig,
    params: &BoundParams,
) -> Result<AppearanceOutput> {
    check_image(tape, image, config)?;
    let mut x = image;
    let mut taps = Vec::new();
    for (i, spec) in config.appearance_layers.iter().enumerate() {
        let y = conv_layer(tape, x, params, &format!("app.{i}"), spec.stride, spec.padding)?;
        x = tape.relu(y);
        if config.tap_layers.contains(&i) {
            taps.push((i, x));
        }
    }
    // taps are reported in configured order
    let taps = config
        .tap_layers
        .iter()
        .map(|t| *taps.iter().find(|(i, _)| i == t).expect("validated tap"))
        .collect();
    Ok(AppearanceOutput { a: x, taps })
}

pub fn part_forward_on(tape: &mut Tape, image: Var, config: &StreamConfig, params: &BoundParams) -> Result<PartOutput> {
    if config.paf_stages < 1 || config.conf_stages < 1 {
        return Err(Error::Config(format!(
            "need at least one affinity and one confidence stage, got paf_stages={} conf_stages={}",
            config.paf_stages, config.conf_stages
        )));
    }
    check_image(tape, image, config)?;
    let mut x = image;
    for (i, spec) in config.backbone_layers.iter().enumerate() {
        let y = conv_layer(tape, x, params, &format!("backbone.{i}"), spec.stride, spec.padding)?;
        x = tape.relu(y);
    }
    let f = x;
    let mut pafs = Vec::with_capacity(config.paf_stages);
    for t in 1..=config.paf_stages {
        let input = match pafs.last() {
            None => f,
            Some(&prev) => tape.concat_channels(&[f, prev])?,
        };
        pafs.push(stage(tape, input, params, &format!("paf.{t}"), config)?);
    }
    let last_paf = *pafs.last().unwrap();
    let mut confs = Vec::with_capacity(config.conf_stages);
    for t in 1..=config.conf_stages {
        let input = match confs.last() {
            None => tape.concat_channels(&[f, last_paf])?,
            Some(&prev) => tape.concat_channels(&[f, last_paf, prev])?,
        };
        confs.push(stage(tape, input, params, &format!("conf.{t}"), config)?);
    }
    Ok(PartOutput {
        backbone: f,
        pafs,
        confs,
    })
}

pub fn two_stream_forward_on(
    tape: &mut Tape,
    image: Var,
    config: &StreamConfig,
    params: &BoundParams,
) -> Result<(AppearanceOutput, PartOutput)> {
    let app = appearance_forward_on(tape, image, config, params)?;
    let part = part_forward_on(tape, image, config, params)?;
    let (sa, sp) = (tape.value(app.a).shape(), tape.value(part.p()).shape());
    if sa[1..] != sp[1..] {
        return Err(Error::Config(format!(
            "stream outputs {sa:?} and {sp:?} are not spatially aligned"
        )));
    }
    Ok((app, part))
}

fn untracked(params: &ParamStore, image: &Tensor) -> (Tape, Var, BoundParams) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let x = tape.constant(image.clone());
    (tape, x, bound)
}

fn map(tape: &Tape, var: Var, kind: FeatureKind) -> FeatureMap {
    FeatureMap {
        tensor: tape.value(var).clone(),
        kind,
    }
}

pub fn appearance_forward(
    image: &Tensor,
    config: &StreamConfig,
    params: &ParamStore,
) -> Result<(FeatureMap, Vec<LayerTap>)> {
    let (mut tape, x, bound) = untracked(params, image);
    let out = appearance_forward_on(&mut tape, x, config, &bound)?;
    let taps = out
        .taps
        .iter()
        .map(|&(layer_index, v)| LayerTap {
            layer_index,
            feature: map(&tape, v, FeatureKind::Appearance),
        })
        .collect();
    Ok((map(&tape, out.a, FeatureKind::Appearance), taps))
}

pub fn part_forward(image: &Tensor, config: &StreamConfig, params: &ParamStore) -> Result<FeatureMap> {
    let (mut tape, x, bound) = untracked(params, image);
    let out = part_forward_on(&mut tape, x, config, &bound)?;
    Ok(map(&tape, out.p(), FeatureKind::Confidence))
}

pub fn two_stream_forward(
    image: &Tensor,
    config: &StreamConfig,
    params: &ParamStore,
) -> Result<(FeatureMap, FeatureMap, Vec<LayerTap>)> {
    let (a, taps) = appearance_forward(image, config, params)?;
    let p = part_forward(image, config, params)?;
    Ok((a, p, taps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_config(channels: usize, h: usize, w: usize) -> StreamConfig {
        StreamConfig {
            input_shape: (channels, h, w),
            appearance_layers: vec![ConvSpec::new(channels, 1, 1, 0)],
            backbone_layers: vec![ConvSpec::new(channels, 1, 1, 0)],
            paf_stages: 1,
            conf_stages: 1,
            paf_channels: channels,
            conf_channels: channels,
            stage_hidden: channels,
            stage_kernel: 1,
            tap_layers: vec![0],
        }
    }

    /// Weights making every conv an identity on the leading `C` channels.
    fn identity_params(config: &StreamConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = config.init_params(&mut rng).unwrap();
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let t = params.get_mut(&name).unwrap();
            if name.ends_with(".bias") {
                t.data_mut().fill(0.0);
            } else {
                let (co, ci) = (t.shape()[0], t.shape()[1]);
                let data = t.data_mut();
                data.fill(0.0);
                for o in 0..co {
                    data[o * ci + o] = 1.0;
                }
            }
        }
        params
    }

    #[test]
    fn default_shapes() {
        let config = StreamConfig::default();
        config.validate().unwrap();
        let params = config.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let image = Tensor::uniform(&[3, 64, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let (a, p, taps) = two_stream_forward(&image, &config, &params).unwrap();
        assert_eq!(a.tensor.shape(), &[16, 8, 4]);
        assert_eq!(p.tensor.shape(), &[8, 8, 4]);
        assert_eq!(p.kind, FeatureKind::Confidence);
        assert_eq!(taps.iter().map(|t| t.layer_index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(taps[0].feature.tensor.shape(), &[16, 16, 8]);
        assert_eq!(taps[1].feature.tensor.shape(), &[16, 8, 4]);
    }

    #[test]
    fn identity_streams_return_input() {
        let config = identity_config(1, 4, 3);
        let params = identity_params(&config);
        let image = Tensor::uniform(&[1, 4, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let (a, p, taps) = two_stream_forward(&image, &config, &params).unwrap();
        assert_eq!(a.tensor, image);
        assert_eq!(p.tensor, image);
        assert_eq!(taps[0].feature.tensor, image);
    }

    #[test]
    fn configuration_errors() {
        let config = StreamConfig {
            paf_stages: 0,
            ..StreamConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = StreamConfig::default();
        config.backbone_layers.pop();
        assert!(config.validate().is_err(), "16×8 part map vs 8×4 appearance");
        let config = StreamConfig {
            tap_layers: vec![7],
            ..StreamConfig::default()
        };
        assert!(config.validate().is_err());
        let config = StreamConfig::default();
        let params = config.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            appearance_forward(&Tensor::zeros(&[3, 32, 32]), &config, &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn affinity_stages_differ() {
        let config = StreamConfig::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = config.init_params(&mut rng).unwrap();
            let image = Tensor::uniform(&[3, 64, 32], 0.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false);
            let x = tape.constant(image);
            let out = part_forward_on(&mut tape, x, &config, &bound).unwrap();
            let (l1, l2) = (tape.value(out.pafs[0]), tape.value(out.pafs[1]));
            let diff = l1
                .data()
                .iter()
                .zip(l2.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff > 1e-9);
        }
    }

    #[test]
    fn every_stage_influences_part_map() {
        let config = StreamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = config.init_params(&mut rng).unwrap();
        let image = Tensor::uniform(&[3, 64, 32], 0.0, 1.0, &mut rng);
        let base = part_forward(&image, &config, &params).unwrap();
        for prefix in [
            "backbone.0",
            "paf.1.conv0",
            "paf.2.conv1",
            "conf.1.conv0",
            "conf.1.conv1",
        ] {
            let mut perturbed = params.clone();
            perturbed
                .get_mut(&format!("{prefix}.bias"))
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.1);
            let p = part_forward(&image, &config, &perturbed).unwrap();
            assert_ne!(p.tensor, base.tensor, "{prefix} did not affect p");
        }
    }
}
