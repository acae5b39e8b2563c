//! MobileNetV2-style networks with attention attached inside the inverted
//! bottlenecks.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, AttentiveConv, ConvShape, Mechanism};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Dropout, DropoutConfig, Linear, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Rounds `v` to the nearest multiple of `divisor` (at least `divisor`),
/// stepping up once if rounding lost more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor.max(1) as f64;
    let rounded = (((v + d / 2.0) / d).floor() * d).max(d);
    let rounded = if rounded < 0.9 * v { rounded + d } else { rounded };
    rounded as usize
}

/// The three convolutions of an inverted bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    /// Expanding 1×1 pointwise conv.
    C1,
    /// 3×3 depthwise conv.
    C2,
    /// Projecting 1×1 pointwise conv.
    C3,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C1" => Ok(Site::C1),
            "C2" => Ok(Site::C2),
            "C3" => Ok(Site::C3),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

/// Which bottleneck convolutions carry attention. Serialized as a list such
/// as `["C1", "C3"]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement(BTreeSet<Site>);

impl Placement {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::of(&[Site::C1, Site::C2, Site::C3])
    }

    pub fn of(sites: &[Site]) -> Self {
        Self(sites.iter().copied().collect())
    }

    pub fn contains(&self, site: Site) -> bool {
        self.0.contains(&site)
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;

    /// Parses `"C1+C3"` or `"C1,C3"`; an empty string or `"none"` is empty.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::none());
        }
        s.split(['+', ',']).map(str::parse).collect::<Result<BTreeSet<_>>>().map(Self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Imagenet,
    Cifar,
}

/// One row `(t, c, n, s)` of the bottleneck table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(expansion: usize, channels: usize, repeats: usize, stride: usize) -> Self {
        Self { expansion, channels, repeats, stride }
    }
}

pub const MOBILENET_V2_STAGES: [StageSpec; 7] = [
    StageSpec::new(1, 16, 1, 1),
    StageSpec::new(6, 24, 2, 2),
    StageSpec::new(6, 32, 3, 2),
    StageSpec::new(6, 64, 4, 2),
    StageSpec::new(6, 96, 3, 1),
    StageSpec::new(6, 160, 3, 2),
    StageSpec::new(6, 320, 1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub attention: AttentionSpec,
    pub placement: Placement,
    pub input_resolution: usize,
    pub classifier_dropout: f64,
    pub variant: Variant,
    /// Replaces the standard bottleneck table, channels before width scaling.
    pub stages: Option<Vec<StageSpec>>,
    /// Stem width before width scaling; 32 when absent.
    pub stem_channels: Option<usize>,
    /// Head width; `make_divisible(1280 · max(1, w))` when absent.
    pub head_channels: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            num_classes: 1000,
            attention: AttentionSpec::default(),
            placement: Placement::all(),
            input_resolution: 224,
            classifier_dropout: 0.2,
            variant: Variant::Imagenet,
            stages: None,
            stem_channels: None,
            head_channels: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn imagenet(width: f64) -> Self {
        Self { width_multiplier: width, ..Self::default() }
    }

    pub fn cifar(width: f64) -> Self {
        Self {
            width_multiplier: width,
            num_classes: 10,
            input_resolution: 32,
            variant: Variant::Cifar,
            ..Self::default()
        }
    }

    /// A two-block network for quick CPU experiments on 32×32 inputs. The
    /// stem keeps its stride of 2, so the blocks run at 16×16 and 8×8.
    pub fn toy() -> Self {
        Self {
            stages: Some(vec![StageSpec::new(4, 24, 1, 1), StageSpec::new(4, 48, 1, 2)]),
            stem_channels: Some(16),
            head_channels: Some(128),
            num_classes: 10,
            input_resolution: 32,
            classifier_dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn with_attention(mut self, spec: AttentionSpec, placement: Placement) -> Self {
        self.attention = spec;
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.num_classes == 0 || self.input_resolution == 0 {
            return Err(Error::Config("class count and input resolution must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(Error::Config(format!("classifier dropout {} outside [0, 1)", self.classifier_dropout)));
        }
        if let Some(stages) = &self.stages {
            if stages.is_empty() {
                return Err(Error::Config("at least one bottleneck stage is required".into()));
            }
            if stages.iter().any(|s| s.expansion == 0 || s.channels == 0 || s.repeats == 0 || s.stride == 0) {
                return Err(Error::Config("stage entries must be positive".into()));
            }
        }
        self.attention.validate()
    }

    pub fn stem_width(&self) -> usize {
        make_divisible(self.stem_channels.unwrap_or(32) as f64 * self.width_multiplier, 8)
    }

    pub fn head_width(&self) -> usize {
        self.head_channels.unwrap_or_else(|| make_divisible(1280.0 * self.width_multiplier.max(1.0), 8))
    }

    pub fn stem_stride(&self) -> usize {
        match self.variant {
            Variant::Imagenet => 2,
            Variant::Cifar => 1,
        }
    }

    /// The bottleneck table after the variant's stride adjustments.
    pub fn stage_table(&self) -> Vec<StageSpec> {
        match &self.stages {
            Some(s) => s.clone(),
            None => {
                let mut table = MOBILENET_V2_STAGES.to_vec();
                if self.variant == Variant::Cifar {
                    table[1].stride = 1;
                }
                table
            }
        }
    }

    /// Every bottleneck in order, with scaled widths.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut c_in = self.stem_width();
        let mut blocks = Vec::new();
        for stage in self.stage_table() {
            let c_out = make_divisible(stage.channels as f64 * self.width_multiplier, 8);
            for i in 0..stage.repeats {
                blocks.push(BlockSpec {
                    in_channels: c_in,
                    out_channels: c_out,
                    expansion: stage.expansion,
                    stride: if i == 0 { stage.stride } else { 1 },
                });
                c_in = c_out;
            }
        }
        blocks
    }

    /// Attention spec for one bottleneck conv, or the static spec when the
    /// site is not placed.
    fn spec_for(&self, site: Site) -> AttentionSpec {
        if self.attention.mechanism != Mechanism::Static && self.placement.contains(site) {
            self.attention.clone()
        } else {
            AttentionSpec { mechanism: Mechanism::Static, ..self.attention.clone() }
        }
    }
}

/// Conv, BN and optional ReLU6.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub conv: AttentiveConv,
    pub bn: BatchNorm,
    pub activation: bool,
}

impl ConvUnit {
    fn new(
        store: &mut ParamStore,
        name: &str,
        shape: ConvShape,
        spec: &AttentionSpec,
        activation: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = AttentiveConv::new(store, name, shape, spec, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), shape.c_out);
        Ok(Self { conv, bn, activation })
    }

    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let previous = g.set_scope(&self.conv.name);
        let out = (|| {
            let y = self.conv.forward(g, store, x, mode)?;
            let y = self.bn.forward(g, store, y, mode)?;
            if self.activation {
                g.relu6(y)
            } else {
                Ok(y)
            }
        })();
        g.restore_scope(previous);
        out
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.bn.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedBottleneck {
    pub name: String,
    pub spec: BlockSpec,
    /// Absent when the expansion factor is 1.
    pub expand: Option<ConvUnit>,
    pub depthwise: ConvUnit,
    pub project: ConvUnit,
}

impl InvertedBottleneck {
    /// Units draw from streams `first_stream`, `+1` and `+2`.
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: BlockSpec,
        config: &ModelConfig,
        first_stream: u64,
    ) -> Result<Self> {
        let seed = config.init_seed;
        let hidden = spec.hidden_channels();
        let expand = if spec.expansion != 1 {
            let shape = ConvShape::pointwise(spec.in_channels, hidden);
            let mut rng = layer_rng(seed, first_stream);
            Some(ConvUnit::new(store, &format!("{name}.c1"), shape, &config.spec_for(Site::C1), true, &mut rng)?)
        } else {
            None
        };
        let shape = ConvShape::depthwise(hidden, 3, spec.stride);
        let mut rng = layer_rng(seed, first_stream + 1);
        let depthwise = ConvUnit::new(store, &format!("{name}.c2"), shape, &config.spec_for(Site::C2), true, &mut rng)?;
        let shape = ConvShape::pointwise(hidden, spec.out_channels);
        let mut rng = layer_rng(seed, first_stream + 2);
        let project = ConvUnit::new(store, &format!("{name}.c3"), shape, &config.spec_for(Site::C3), false, &mut rng)?;
        Ok(Self { name: name.to_string(), spec, expand, depthwise, project })
    }

    pub fn units(&self) -> impl Iterator<Item = (Site, &ConvUnit)> {
        self.expand.iter().map(|u| (Site::C1, u)).chain([(Site::C2, &self.depthwise), (Site::C3, &self.project)])
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit> {
        self.expand.iter_mut().chain([&mut self.depthwise, &mut self.project])
    }

    /// C1 → C2 → C3, plus the shortcut when shapes allow it.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for unit in self.units_mut() {
            h = unit.forward(g, store, h, mode)?;
        }
        if self.spec.has_residual() {
            let previous = g.set_scope(&self.name);
            let out = g.add(x, h);
            g.restore_scope(previous);
            out
        } else {
            Ok(h)
        }
    }

    pub fn param_count(&self) -> usize {
        self.units().map(|(_, u)| u.param_count()).sum()
    }
}

/// `forward_inverted_bottleneck(x, block)` in free-function form.
pub fn forward_inverted_bottleneck(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    block: &mut InvertedBottleneck,
    mode: Mode,
) -> Result<Var> {
    block.forward(g, store, x, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: ConvUnit,
    pub blocks: Vec<InvertedBottleneck>,
    pub head: ConvUnit,
    pub dropout: Option<Dropout>,
    pub classifier: Linear,
}

/// A seeded stream per conv unit, so trunk weights do not depend on which
/// attention mechanism any layer carries.
fn layer_rng(seed: u64, layer: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer);
    rng
}

pub fn build_mobilenet_v2(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::new();
    let seed = config.init_seed;
    let static_spec = AttentionSpec::new(Mechanism::Static);

    let stem_shape = ConvShape::full(3, config.stem_width(), 3, config.stem_stride());
    let stem = ConvUnit::new(&mut store, "stem", stem_shape, &static_spec, true, &mut layer_rng(seed, 0))?;
    let blocks = config
        .blocks()
        .into_iter()
        .enumerate()
        .map(|(i, spec)| InvertedBottleneck::new(&mut store, &format!("block{i}"), spec, config, 1 + 3 * i as u64))
        .collect::<Result<Vec<_>>>()?;
    let last = blocks.last().map_or(config.stem_width(), |b| b.spec.out_channels);
    let n = 3 * blocks.len() as u64;
    let head_shape = ConvShape::pointwise(last, config.head_width());
    let head = ConvUnit::new(&mut store, "head", head_shape, &static_spec, true, &mut layer_rng(seed, n + 1))?;
    let mut rng = layer_rng(seed, n + 2);
    let classifier = Linear::new(&mut store, "classifier", config.head_width(), config.num_classes, &mut rng)?;
    let dropout = if config.classifier_dropout > 0.0 {
        Some(Dropout::new(DropoutConfig { rate: config.classifier_dropout, rng_seed: seed ^ 0x5eed })?)
    } else {
        None
    };
    Ok(Model { config: config.clone(), store, stem, blocks, head, dropout, classifier })
}

/// One convolution of a built model with its spatial extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescription {
    pub name: String,
    /// `conv`, `depthwise` or `fc`.
    pub kind: String,
    pub mechanism: Mechanism,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub input_hw: [usize; 2],
    pub output_hw: [usize; 2],
    /// Hidden width of the attention branch, 0 when there is none.
    pub branch_hidden: usize,
    pub experts: usize,
    pub params: usize,
    /// Set on the last conv of a block whose input is added to its output.
    #[serde(default)]
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub config: ModelConfig,
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 2],
    pub layers: Vec<LayerDescription>,
    pub param_count: usize,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let r = self.config.input_resolution;
        [batch, 3, r, r]
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().flat_map(|b| b.units().map(|(_, u)| u)))
            .chain(std::iter::once(&self.head))
    }

    /// `(conv name, λ)` for every shift-and-balance site.
    pub fn lambda_sites(&self) -> Vec<(String, ParamId)> {
        self.units().filter_map(|u| u.conv.lambda().map(|l| (u.conv.name.clone(), l))).collect()
    }

    /// Logits `[N, num_classes]` for an NCHW batch.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let Model { store, stem, blocks, head, dropout, classifier, .. } = self;
        let store = &*store;
        let mut h = stem.forward(g, store, x, mode)?;
        for block in blocks.iter_mut() {
            h = block.forward(g, store, h, mode)?;
        }
        h = head.forward(g, store, h, mode)?;
        let previous = g.set_scope("classifier");
        let out = (|| {
            let pooled = g.global_avg_pool(h)?;
            let pooled = match dropout {
                Some(d) => d.forward(g, pooled, mode)?,
                None => pooled,
            };
            classifier.forward(g, store, pooled)
        })();
        g.restore_scope(previous);
        out
    }

    /// Eval-mode logits for a batch, without keeping the graph.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let logits = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(logits).clone())
    }

    pub fn describe(&self) -> ModelDescription {
        let r = self.config.input_resolution;
        let mut hw = [r, r];
        let mut layers = Vec::new();
        let residual_ends: Vec<&str> =
            self.blocks.iter().filter(|b| b.spec.has_residual()).map(|b| b.project.conv.name.as_str()).collect();
        for unit in self.units() {
            let s = unit.conv.shape;
            let (ho, wo) = s.output_hw(hw[0], hw[1]);
            let experts = match &unit.conv.weights {
                crate::attention::ConvWeights::Dynamic(d) => d.len(),
                crate::attention::ConvWeights::Static(_) => 1,
            };
            layers.push(LayerDescription {
                name: unit.conv.name.clone(),
                kind: if s.is_depthwise() { "depthwise" } else { "conv" }.to_string(),
                mechanism: unit.conv.mechanism(),
                c_in: s.c_in,
                c_out: s.c_out,
                kernel: s.kernel,
                stride: s.stride,
                groups: s.groups,
                input_hw: hw,
                output_hw: [ho, wo],
                branch_hidden: unit.conv.branch().map_or(0, |b| b.c_hid()),
                experts,
                params: unit.param_count(),
                residual: residual_ends.contains(&unit.conv.name.as_str()),
            });
            hw = [ho, wo];
        }
        let c = &self.classifier;
        layers.push(LayerDescription {
            name: "classifier".into(),
            kind: "fc".into(),
            mechanism: Mechanism::Static,
            c_in: c.c_in,
            c_out: c.c_out,
            kernel: 1,
            stride: 1,
            groups: 1,
            input_hw: [1, 1],
            output_hw: [1, 1],
            branch_hidden: 0,
            experts: 1,
            params: c.param_count(),
            residual: false,
        });
        ModelDescription {
            config: self.config.clone(),
            input_shape: self.input_shape(1),
            output_shape: [1, self.config.num_classes],
            layers,
            param_count: self.param_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_examples() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(24.0 * 0.35, 8), 8);
        assert_eq!(make_divisible(32.0 * 0.75, 8), 24);
        assert_eq!(make_divisible(32.0 * 0.35, 8), 16);
        assert_eq!(make_divisible(1.0, 8), 8);
    }

    #[test]
    fn placement_parsing_and_serde() {
        let p: Placement = "C1+C3".parse().unwrap();
        assert_eq!(p, Placement::of(&[Site::C1, Site::C3]));
        assert_eq!("none".parse::<Placement>().unwrap(), Placement::none());
        assert!("C4".parse::<Placement>().is_err());
        let json = serde_json::to_string(&Placement::all()).unwrap();
        assert_eq!(json, r#"["C1","C2","C3"]"#);
        assert_eq!(serde_json::from_str::<Placement>(&json).unwrap(), Placement::all());
    }

    #[test]
    fn cifar_variant_keeps_early_resolution() {
        let cfg = ModelConfig::cifar(1.0);
        assert_eq!(cfg.stem_stride(), 1);
        let strides: Vec<_> = cfg.blocks().iter().map(|b| b.stride).collect();
        assert_eq!(strides.iter().filter(|&&s| s == 2).count(), 3);
        let imagenet: Vec<_> = ModelConfig::imagenet(1.0).blocks().iter().map(|b| b.stride).collect();
        assert_eq!(imagenet.iter().filter(|&&s| s == 2).count(), 4);
        assert_eq!(imagenet.len(), 17);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"width": 1.0}"#);
        assert!(err.is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"width_multiplier": 0.5, "placement": ["C2"]}"#).unwrap();
        assert_eq!(cfg.width_multiplier, 0.5);
        assert_eq!(cfg.placement, Placement::of(&[Site::C2]));
    }
}
