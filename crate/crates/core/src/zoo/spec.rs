use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ic::{BlockKind, IcMode};
use crate::nn::PoolKind;
use crate::tensor::kernels::window_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    IcConv,
    Dense,
    IcDense,
    Bn,
    Relu,
    Pool,
    BasicBlock,
    IcBasicBlock,
    BottleneckBlock,
    IcBottleneckBlock,
    Flatten,
}

impl LayerKind {
    pub fn block(self) -> Option<(BlockKind, bool)> {
        match self {
            LayerKind::BasicBlock => Some((BlockKind::Basic, false)),
            LayerKind::IcBasicBlock => Some((BlockKind::Basic, true)),
            LayerKind::BottleneckBlock => Some((BlockKind::Bottleneck, false)),
            LayerKind::IcBottleneckBlock => Some((BlockKind::Bottleneck, true)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::IcConv => "ic_conv",
            LayerKind::Dense => "dense",
            LayerKind::IcDense => "ic_dense",
            LayerKind::Bn => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::BasicBlock => "basic_block",
            LayerKind::IcBasicBlock => "ic_basic_block",
            LayerKind::BottleneckBlock => "bottleneck_block",
            LayerKind::IcBottleneckBlock => "ic_bottleneck_block",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// One entry of a model spec. Fields that do not apply to `kind` must be
/// left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// output channels (convolutions, blocks) or width (dense)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic_mode: Option<IcMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolKind>,
    /// convolutions default to no bias, dense layers to a bias
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
    /// bottleneck inner width, default `channels / 4`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// use IC kernels for the k ≥ 2 convolutions inside a block
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic_layers: Option<bool>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            channels: None,
            kernel: None,
            stride: None,
            padding: None,
            ic_mode: None,
            pool: None,
            bias: None,
            width: None,
            ic_layers: None,
        }
    }

    pub fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            channels: Some(channels),
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Self::new(LayerKind::Conv)
        }
    }

    pub fn dense(width: usize) -> Self {
        LayerSpec {
            channels: Some(width),
            ..Self::new(LayerKind::Dense)
        }
    }

    pub fn block(kind: LayerKind, channels: usize, stride: usize) -> Self {
        LayerSpec {
            channels: Some(channels),
            stride: Some(stride),
            ..Self::new(kind)
        }
    }

    pub fn pool(kind: PoolKind, kernel: Option<usize>) -> Self {
        LayerSpec {
            pool: Some(kind),
            kernel,
            ..Self::new(LayerKind::Pool)
        }
    }

    pub fn with_kind(&self, kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            ..self.clone()
        }
    }

    pub fn stride_or_default(&self) -> usize {
        self.stride.unwrap_or(1)
    }

    pub fn has_bias(&self) -> bool {
        self.bias
            .unwrap_or(matches!(self.kind, LayerKind::Dense | LayerKind::IcDense))
    }

    pub fn ic_mode_or_default(&self) -> IcMode {
        self.ic_mode.unwrap_or_default()
    }

    pub fn uses_ic_layers(&self) -> bool {
        self.ic_layers.unwrap_or(false)
    }
}

/// A sequential network description with its per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: String,
    /// `[C, H, W]` for images, `[D]` for vectors
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.infer_shapes()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// Per-sample output shape of every layer, checking every layer's
    /// field and channel contract along the way.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::spec(None::<usize>, format!("invalid input shape {:?}", self.input)));
        }
        let mut shape = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_output(layer, &shape).map_err(|m| Error::spec(i, m))?;
            out.push(shape.clone());
        }
        Ok(out)
    }
}

pub(crate) type Check<T> = std::result::Result<T, String>;

fn require(value: Option<usize>, what: &str, kind: LayerKind) -> Check<usize> {
    match value {
        Some(0) => Err(format!("{} needs a positive {what}", kind.name())),
        Some(v) => Ok(v),
        None => Err(format!("{} needs a {what}", kind.name())),
    }
}

fn forbid(layer: &LayerSpec, fields: &[(&str, bool)]) -> Check<()> {
    for (name, present) in fields {
        if *present {
            return Err(format!("field `{name}` does not apply to {}", layer.kind.name()));
        }
    }
    Ok(())
}

fn image(shape: &[usize], kind: LayerKind) -> Check<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(format!("{} needs a [C,H,W] input, got {shape:?}", kind.name())),
    }
}

fn spatial(input: usize, k: usize, stride: usize, padding: usize) -> Check<usize> {
    window_extent(input, k, stride, padding).map_err(|e| e.to_string())
}

/// Resolved channel plan of a residual block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    /// `(c_in, c_out, kernel, stride, padding)` per main-path convolution
    pub convs: Vec<(usize, usize, usize, usize, usize)>,
    pub projection: bool,
    pub ic_layers: bool,
    pub combine: bool,
}

pub fn block_plan(layer: &LayerSpec, c_in: usize) -> Check<BlockPlan> {
    let (kind, combine) = layer
        .kind
        .block()
        .ok_or_else(|| format!("{} is not a block", layer.kind.name()))?;
    forbid(
        layer,
        &[
            ("kernel", layer.kernel.is_some()),
            ("padding", layer.padding.is_some()),
            ("ic_mode", layer.ic_mode.is_some() && !layer.uses_ic_layers()),
            ("pool", layer.pool.is_some()),
            ("bias", layer.bias.is_some()),
        ],
    )?;
    let c_out = require(layer.channels, "channels", layer.kind)?;
    let stride = layer.stride_or_default();
    if stride == 0 {
        return Err("block stride must be positive".into());
    }
    let convs = match kind {
        BlockKind::Basic => {
            if layer.width.is_some() {
                return Err("field `width` applies to bottleneck blocks only".into());
            }
            vec![(c_in, c_out, 3, stride, 1), (c_out, c_out, 3, 1, 1)]
        }
        BlockKind::Bottleneck => {
            let width = match layer.width {
                Some(0) => return Err("bottleneck width must be positive".into()),
                Some(w) => w,
                None if c_out % 4 == 0 => c_out / 4,
                None => {
                    return Err(format!(
                        "bottleneck channels {c_out} not divisible by 4; set `width`"
                    ))
                }
            };
            vec![
                (c_in, width, 1, 1, 0),
                (width, width, 3, stride, 1),
                (width, c_out, 1, 1, 0),
            ]
        }
    };
    Ok(BlockPlan {
        kind,
        c_in,
        c_out,
        stride,
        convs,
        projection: stride != 1 || c_in != c_out,
        ic_layers: layer.uses_ic_layers(),
        combine,
    })
}

fn layer_output(layer: &LayerSpec, shape: &[usize]) -> Check<Vec<usize>> {
    let kind = layer.kind;
    let no_block_fields = |extra: &[(&str, bool)]| {
        let mut fields = vec![
            ("width", layer.width.is_some()),
            ("ic_layers", layer.ic_layers.is_some()),
        ];
        fields.extend_from_slice(extra);
        forbid(layer, &fields)
    };
    match kind {
        LayerKind::Conv | LayerKind::IcConv => {
            no_block_fields(&[
                ("pool", layer.pool.is_some()),
                ("ic_mode", kind == LayerKind::Conv && layer.ic_mode.is_some()),
            ])?;
            let (_, h, w) = image(shape, kind)?;
            let c_out = require(layer.channels, "channels", kind)?;
            let k = require(layer.kernel, "kernel", kind)?;
            if kind == LayerKind::IcConv && k < 2 {
                return Err("ic_conv requires kernel >= 2; 1x1 convolutions stay plain".into());
            }
            let (s, p) = (layer.stride_or_default(), layer.padding.unwrap_or(0));
            Ok(vec![c_out, spatial(h, k, s, p)?, spatial(w, k, s, p)?])
        }
        LayerKind::Dense | LayerKind::IcDense => {
            no_block_fields(&[
                ("kernel", layer.kernel.is_some()),
                ("stride", layer.stride.is_some()),
                ("padding", layer.padding.is_some()),
                ("ic_mode", layer.ic_mode.is_some()),
                ("pool", layer.pool.is_some()),
            ])?;
            if shape.len() != 1 {
                return Err(format!(
                    "{} needs a flat input, got {shape:?}; insert a flatten layer",
                    kind.name()
                ));
            }
            Ok(vec![require(layer.channels, "width", kind)?])
        }
        LayerKind::Bn | LayerKind::Relu | LayerKind::Flatten => {
            no_block_fields(&[
                ("channels", layer.channels.is_some()),
                ("kernel", layer.kernel.is_some()),
                ("stride", layer.stride.is_some()),
                ("padding", layer.padding.is_some()),
                ("ic_mode", layer.ic_mode.is_some()),
                ("pool", layer.pool.is_some()),
                ("bias", layer.bias.is_some()),
            ])?;
            match kind {
                LayerKind::Flatten => Ok(vec![shape.iter().product()]),
                LayerKind::Bn if shape.len() != 3 => {
                    Err(format!("bn needs a [C,H,W] input, got {shape:?}"))
                }
                _ => Ok(shape.to_vec()),
            }
        }
        LayerKind::Pool => {
            no_block_fields(&[
                ("channels", layer.channels.is_some()),
                ("padding", layer.padding.is_some()),
                ("ic_mode", layer.ic_mode.is_some()),
                ("bias", layer.bias.is_some()),
            ])?;
            let (c, h, w) = image(shape, kind)?;
            layer.pool.ok_or("pool needs `pool`: max or avg")?;
            match layer.kernel {
                None => {
                    if layer.stride.is_some() {
                        return Err("global pool takes no stride".into());
                    }
                    Ok(vec![c, 1, 1])
                }
                Some(k) => {
                    let s = layer.stride.unwrap_or(k);
                    Ok(vec![c, spatial(h, k, s, 0)?, spatial(w, k, s, 0)?])
                }
            }
        }
        LayerKind::BasicBlock
        | LayerKind::IcBasicBlock
        | LayerKind::BottleneckBlock
        | LayerKind::IcBottleneckBlock => {
            let (c, h, w) = image(shape, kind)?;
            let plan = block_plan(layer, c)?;
            let (mut h, mut w) = (h, w);
            for &(_, _, k, s, p) in &plan.convs {
                h = spatial(h, k, s, p)?;
                w = spatial(w, k, s, p)?;
            }
            Ok(vec![plan.c_out, h, w])
        }
    }
}

/// The three aligned networks compared throughout: the plain model, the
/// "B" model whose k ≥ 2 convolutions carry IC kernels, and the model whose
/// residual blocks combine the block-input rough feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    IcLayer,
    IcBlock,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::IcLayer, Variant::IcBlock];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::IcLayer => "ic_layer",
            Variant::IcBlock => "ic_block",
        }
    }
}

fn strip_ic(layer: &LayerSpec) -> Check<LayerSpec> {
    let mut out = layer.clone();
    match layer.kind {
        LayerKind::IcDense => {
            return Err("ic_dense has no plain counterpart in the paired variants".into())
        }
        LayerKind::IcConv => {
            out.kind = LayerKind::Conv;
            out.ic_mode = None;
        }
        LayerKind::IcBasicBlock => out.kind = LayerKind::BasicBlock,
        LayerKind::IcBottleneckBlock => out.kind = LayerKind::BottleneckBlock,
        _ => {}
    }
    if out.kind.block().is_some() {
        out.ic_layers = None;
        out.ic_mode = None;
    }
    Ok(out)
}

impl ModelSpec {
    /// Rewrite the spec as `variant`. IC parts already present in `self`
    /// are first stripped, so any member of a pair maps to the same triple.
    pub fn variant(&self, variant: Variant) -> Result<ModelSpec> {
        self.infer_shapes()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let base = strip_ic(layer).map_err(|m| Error::spec(i, m))?;
            let mapped = match variant {
                Variant::Baseline => base,
                Variant::IcLayer => match base.kind {
                    LayerKind::Conv if base.kernel.is_some_and(|k| k >= 2) => LayerSpec {
                        ic_mode: layer.ic_mode,
                        ..base.with_kind(LayerKind::IcConv)
                    },
                    LayerKind::BasicBlock | LayerKind::BottleneckBlock => LayerSpec {
                        ic_layers: Some(true),
                        ..base
                    },
                    _ => base,
                },
                Variant::IcBlock => match base.kind {
                    LayerKind::BasicBlock => base.with_kind(LayerKind::IcBasicBlock),
                    LayerKind::BottleneckBlock => base.with_kind(LayerKind::IcBottleneckBlock),
                    _ => base,
                },
            };
            layers.push(mapped);
        }
        let suffix = match variant {
            Variant::Baseline => "",
            Variant::IcLayer => "-B",
            Variant::IcBlock => "-IC",
        };
        let stem = self
            .name
            .trim_end_matches("-B")
            .trim_end_matches("-IC")
            .to_string();
        Ok(ModelSpec {
            name: format!("{stem}{suffix}"),
            input: self.input.clone(),
            layers,
        })
    }
}

/// `(baseline, B version, block version)` of `spec`.
pub fn paired_variants(spec: &ModelSpec) -> Result<(ModelSpec, ModelSpec, ModelSpec)> {
    Ok((
        spec.variant(Variant::Baseline)?,
        spec.variant(Variant::IcLayer)?,
        spec.variant(Variant::IcBlock)?,
    ))
}
