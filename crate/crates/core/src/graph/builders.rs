//! SSD and ESSD graph builders.

use serde::{Deserialize, Serialize};

use super::{GraphBuilder, LayerKind, LayerParams, LayerSpec, NetGraph};
use crate::error::GraphError;

/// How an extension module merges its upsampled and refined branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Sum,
    Prod,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Sum, Fusion::Prod, Fusion::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Sum => "sum",
            Fusion::Prod => "prod",
            Fusion::Concat => "concat",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Fusion::Sum),
            "prod" => Ok(Fusion::Prod),
            "concat" => Ok(Fusion::Concat),
            other => Err(format!("unknown fusion `{other}` (expected sum, prod or concat)")),
        }
    }
}

/// Small executable backbone with the same structure as SSD300: a pooled
/// stem, a first prediction source, then strided stages that each halve the
/// resolution and add one more source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub source_channels: usize,
    pub stem_pools: usize,
    pub num_scales: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { input_size: 64, base_channels: 8, source_channels: 16, stem_pools: 2, num_scales: 4 }
    }
}

impl ToyConfig {
    /// Spatial size of each prediction source.
    pub fn grid_sizes(&self) -> Result<Vec<usize>, GraphError> {
        let div = 1usize << self.stem_pools;
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(GraphError::Config(format!(
                "input size {} is not divisible by 2^{} stem pools",
                self.input_size, self.stem_pools
            )));
        }
        if self.num_scales < 4 {
            return Err(GraphError::Config(format!("need at least 4 prediction scales, got {}", self.num_scales)));
        }
        if self.base_channels == 0 || self.source_channels == 0 {
            return Err(GraphError::Config("channel counts must be positive".into()));
        }
        let mut sizes = vec![self.input_size / div];
        for _ in 1..self.num_scales {
            let h = *sizes.last().unwrap();
            let (k, s, p) = Self::stage_window(h).ok_or_else(|| {
                GraphError::Config(format!("{} scales do not fit input size {}", self.num_scales, self.input_size))
            })?;
            sizes.push((h + 2 * p - k) / s + 1);
        }
        Ok(sizes)
    }

    fn stage_window(h: usize) -> Option<(usize, usize, usize)> {
        match h {
            0 | 1 => None,
            2 | 3 => Some((h, 1, 0)),
            _ => Some((3, 2, 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "profile")]
pub enum Profile {
    /// Topology-only SSD300 (VGG-16 backbone plus extra layers); never executed.
    Canonical300,
    Toy(ToyConfig),
}

impl Profile {
    pub fn is_executable(&self) -> bool {
        matches!(self, Profile::Toy(_))
    }
}

fn conv_params(channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerParams {
    LayerParams { channels: Some(channels), kernel: Some(kernel), stride: Some(stride), pad: Some(pad), ..Default::default() }
}

/// Adds `{name}_conv` (+ `{name}_bn`) + `{name}` (relu) and returns `name`.
#[allow(clippy::too_many_arguments)]
fn block(
    b: &mut GraphBuilder,
    name: &str,
    input: &str,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    bn: bool,
) -> Result<String, GraphError> {
    let conv = b.add(LayerSpec::new(format!("{name}_conv"), LayerKind::Conv, &[input], conv_params(channels, kernel, stride, pad)))?;
    let pre = if bn {
        b.add(LayerSpec::new(format!("{name}_bn"), LayerKind::Bn, &[&conv], LayerParams::default()))?
    } else {
        conv
    };
    b.add(LayerSpec::new(name, LayerKind::Relu, &[&pre], LayerParams::default()))
}

fn pool(b: &mut GraphBuilder, name: &str, input: &str, kernel: usize, stride: usize, pad: usize) -> Result<String, GraphError> {
    b.add(LayerSpec::new(
        name,
        LayerKind::Pool,
        &[input],
        LayerParams { kernel: Some(kernel), stride: Some(stride), pad: Some(pad), ..Default::default() },
    ))
}

fn data(b: &mut GraphBuilder, size: usize) -> Result<String, GraphError> {
    b.add(LayerSpec::new(
        "data",
        LayerKind::Data,
        &[],
        LayerParams { channels: Some(3), height: Some(size), width: Some(size), ..Default::default() },
    ))
}

fn canonical_ssd() -> Result<GraphBuilder, GraphError> {
    let mut b = GraphBuilder::new();
    let mut x = data(&mut b, 300)?;
    let vgg: [(&str, usize, usize); 5] = [("1", 64, 2), ("2", 128, 2), ("3", 256, 3), ("4", 512, 3), ("5", 512, 3)];
    let mut conv4_3 = String::new();
    for (stage, channels, depth) in vgg {
        for i in 1..=depth {
            x = block(&mut b, &format!("conv{stage}_{i}"), &x, channels, 3, 1, 1, false)?;
        }
        x = match stage {
            "3" => pool(&mut b, "pool3", &x, 2, 2, 1)?, // 75 -> 38, ceil-mode equivalent
            "4" => {
                conv4_3 = x.clone();
                pool(&mut b, "pool4", &x, 2, 2, 0)?
            }
            "5" => pool(&mut b, "pool5", &x, 3, 1, 1)?,
            _ => pool(&mut b, &format!("pool{stage}"), &x, 2, 2, 0)?,
        };
    }
    let fc6 = block(&mut b, "fc6", &x, 1024, 3, 1, 1, false)?;
    let fc7 = block(&mut b, "fc7", &fc6, 1024, 1, 1, 0, false)?;
    let mut sources = vec![conv4_3, fc7.clone()];
    let extras: [(&str, usize, usize, usize, usize); 4] =
        [("8", 256, 512, 2, 1), ("9", 128, 256, 2, 1), ("10", 128, 256, 1, 0), ("11", 128, 256, 1, 0)];
    let mut x = fc7;
    for (stage, reduce, channels, stride, pad) in extras {
        let r = block(&mut b, &format!("conv{stage}_1"), &x, reduce, 1, 1, 0, false)?;
        x = block(&mut b, &format!("conv{stage}_2"), &r, channels, 3, stride, pad, false)?;
        sources.push(x.clone());
    }
    b.set_prediction_sources(sources);
    Ok(b)
}

fn toy_ssd(cfg: &ToyConfig) -> Result<GraphBuilder, GraphError> {
    let sizes = cfg.grid_sizes()?;
    let mut b = GraphBuilder::new();
    let mut x = data(&mut b, cfg.input_size)?;
    for i in 1..=cfg.stem_pools {
        let channels = (cfg.base_channels << (i - 1)).min(cfg.source_channels);
        x = block(&mut b, &format!("stem{i}"), &x, channels, 3, 1, 1, true)?;
        x = pool(&mut b, &format!("pool{i}"), &x, 2, 2, 0)?;
    }
    x = block(&mut b, "src1", &x, cfg.source_channels, 3, 1, 1, true)?;
    let mut sources = vec![x.clone()];
    for (s, &h) in sizes.iter().enumerate().take(cfg.num_scales - 1) {
        let (k, stride, pad) = ToyConfig::stage_window(h).expect("checked by grid_sizes");
        x = block(&mut b, &format!("src{}", s + 2), &x, cfg.source_channels, k, stride, pad, true)?;
        sources.push(x.clone());
    }
    b.set_prediction_sources(sources);
    Ok(b)
}

fn ssd_builder(profile: &Profile) -> Result<GraphBuilder, GraphError> {
    match profile {
        Profile::Canonical300 => canonical_ssd(),
        Profile::Toy(cfg) => toy_ssd(cfg),
    }
}

pub fn build_ssd(profile: &Profile) -> Result<NetGraph, GraphError> {
    ssd_builder(profile)?.seal()
}

/// Stride-2 transposed-convolution window `(kernel, stride, pad)` mapping a
/// `from`-sized map exactly onto `to`: `to = 2·from` uses 2/2/0, and the odd
/// neighbours `2·from ∓ 1` use 3/2/1 and 3/2/0.
pub fn upsample_geometry(from: usize, to: usize) -> Option<(usize, usize, usize)> {
    if from == 0 {
        return None;
    }
    if to == 2 * from {
        Some((2, 2, 0))
    } else if to + 1 == 2 * from {
        Some((3, 2, 1))
    } else if to == 2 * from + 1 {
        Some((3, 2, 0))
    } else {
        None
    }
}

/// Adds an extension module that enriches `low` (layer n) with the deeper
/// `high` (layer n+1):
///
/// - high branch: transposed conv up to `low`'s size, then conv-bn-relu;
/// - low branch: two conv-bn-relu blocks on `low`;
/// - a fusion node (sum/prod with input weights 0.5/0.5, or concat).
///
/// All branch convolutions are 3×3/pad 1 with `low`'s channel count. The
/// fusion node's name is returned and, if `low` is a prediction source,
/// replaces it there.
pub fn make_extension_module(b: &mut GraphBuilder, low: &str, high: &str, fusion: Fusion) -> Result<String, GraphError> {
    let lo = b.shape(low)?;
    let hi = b.shape(high)?;
    let size_err = || GraphError::FusionSize { low: low.into(), low_size: lo.height, high: high.into(), high_size: hi.height };
    let (k, s, p) = upsample_geometry(hi.height, lo.height).ok_or_else(size_err)?;
    if upsample_geometry(hi.width, lo.width) != Some((k, s, p)) {
        return Err(size_err());
    }
    let c = lo.channels;
    let ext = format!("{low}_ext");

    let up = b.add(LayerSpec::new(format!("{ext}_up_deconv"), LayerKind::Deconv, &[high], conv_params(c, k, s, p)))?;
    let up = block(b, &format!("{ext}_up"), &up, c, 3, 1, 1, true)?;
    let lo1 = block(b, &format!("{ext}_lo1"), low, c, 3, 1, 1, true)?;
    let lo2 = block(b, &format!("{ext}_lo2"), &lo1, c, 3, 1, 1, true)?;

    let (kind, weights) = match fusion {
        Fusion::Sum => (LayerKind::EltwiseSum, Some(vec![0.5, 0.5])),
        Fusion::Prod => (LayerKind::EltwiseProd, Some(vec![0.5, 0.5])),
        Fusion::Concat => (LayerKind::Concat, None),
    };
    let fused = b.add(LayerSpec::new(&ext, kind, &[&lo2, &up], LayerParams { weights, ..Default::default() }))?;
    if let Some(i) = b.prediction_sources().iter().position(|s| s == low) {
        b.replace_source(i, fused.clone());
    }
    Ok(fused)
}

/// SSD plus extension modules on the first three prediction sources, each
/// fused with the next-deeper original source. With `extra_pred_conv`, a 1×1
/// conv + relu (512 channels for SSD300, the source width for toys) sits
/// between each extended source and its heads.
pub fn build_essd(profile: &Profile, fusion: Fusion, extra_pred_conv: bool) -> Result<NetGraph, GraphError> {
    let mut b = ssd_builder(profile)?;
    let original = b.prediction_sources().to_vec();
    let pred_channels = match profile {
        Profile::Canonical300 => 512,
        Profile::Toy(cfg) => cfg.source_channels,
    };
    for i in 0..3 {
        let fused = make_extension_module(&mut b, &original[i], &original[i + 1], fusion)?;
        if extra_pred_conv {
            let conv = b.add(LayerSpec::new(
                format!("{fused}_pred_conv"),
                LayerKind::Conv,
                &[&fused],
                conv_params(pred_channels, 1, 1, 0),
            ))?;
            let act = b.add(LayerSpec::new(format!("{fused}_pred"), LayerKind::Relu, &[&conv], LayerParams::default()))?;
            b.set_head_input(i, act);
        }
    }
    b.seal()
}

/// Adds a 3×3/pad-1 confidence head (`boxes·(classes+1)` channels, background
/// included) and localization head (`boxes·4`) to every prediction source.
pub fn attach_heads(graph: &NetGraph, num_classes: usize, boxes_per_cell: &[usize]) -> Result<NetGraph, GraphError> {
    if graph.prediction_sources().is_empty() {
        return Err(GraphError::NoSources);
    }
    if boxes_per_cell.len() != graph.prediction_sources().len() {
        return Err(GraphError::Config(format!(
            "{} boxes-per-cell entries for {} prediction sources",
            boxes_per_cell.len(),
            graph.prediction_sources().len()
        )));
    }
    if num_classes == 0 || boxes_per_cell.contains(&0) {
        return Err(GraphError::Config("class and box counts must be positive".into()));
    }
    let mut b = GraphBuilder::from_graph(graph);
    let pairs: Vec<(String, String)> =
        graph.prediction_sources().iter().cloned().zip(graph.head_inputs().iter().cloned()).collect();
    for ((source, input), &boxes) in pairs.iter().zip(boxes_per_cell) {
        let head = |channels| LayerParams {
            boxes_per_cell: Some(boxes),
            num_classes: Some(num_classes),
            ..conv_params(channels, 3, 1, 1)
        };
        b.add(LayerSpec::new(format!("{source}_mbox_conf"), LayerKind::ConfHead, &[input], head(boxes * (num_classes + 1))))?;
        let mut loc = head(boxes * 4);
        loc.num_classes = None;
        b.add(LayerSpec::new(format!("{source}_mbox_loc"), LayerKind::LocHead, &[input], loc))?;
    }
    b.seal()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Profile {
        Profile::Toy(ToyConfig::default())
    }

    #[test]
    fn canonical_scales() {
        let g = build_ssd(&Profile::Canonical300).unwrap();
        let sizes: Vec<usize> = g.prediction_sources().iter().map(|s| g.shape(s).unwrap().height).collect();
        assert_eq!(sizes, vec![38, 19, 10, 5, 3, 1]);
        assert_eq!(g.prediction_sources(), &["conv4_3", "fc7", "conv8_2", "conv9_2", "conv10_2", "conv11_2"]);
    }

    #[test]
    fn toy_grid_sizes() {
        assert_eq!(ToyConfig::default().grid_sizes().unwrap(), vec![16, 8, 4, 2]);
        let spec_like = ToyConfig { input_size: 96, stem_pools: 3, ..Default::default() };
        assert_eq!(spec_like.grid_sizes().unwrap(), vec![12, 6, 3, 1]);
        let bad = ToyConfig { num_scales: 3, ..Default::default() };
        assert!(bad.grid_sizes().is_err());
        let odd = ToyConfig { input_size: 66, ..Default::default() };
        assert!(odd.grid_sizes().is_err());
    }

    #[test]
    fn upsample_windows() {
        assert_eq!(upsample_geometry(19, 38), Some((2, 2, 0)));
        assert_eq!(upsample_geometry(10, 19), Some((3, 2, 1)));
        assert_eq!(upsample_geometry(1, 3), Some((3, 2, 0)));
        assert_eq!(upsample_geometry(3, 10), None);
    }

    #[test]
    fn extension_rejects_size_mismatch() {
        let mut b = toy_ssd(&ToyConfig::default()).unwrap();
        let err = make_extension_module(&mut b, "src1", "src3", Fusion::Sum).unwrap_err();
        assert!(matches!(err, GraphError::FusionSize { .. }), "{err}");
    }

    #[test]
    fn concat_doubles_channels() {
        let mut b = toy_ssd(&ToyConfig::default()).unwrap();
        let fused = make_extension_module(&mut b, "src1", "src2", Fusion::Concat).unwrap();
        assert_eq!(b.shape(&fused).unwrap().channels, 32);
        assert_eq!(b.prediction_sources()[0], fused);
    }

    #[test]
    fn heads_channel_arithmetic() {
        let g = attach_heads(&build_ssd(&toy()).unwrap(), 3, &[4, 4, 4, 4]).unwrap();
        for h in g.heads() {
            assert_eq!(g.layer(&h.conf).unwrap().params.channels, Some(16));
            assert_eq!(g.layer(&h.loc).unwrap().params.channels, Some(16));
            let src = g.shape(&h.source).unwrap();
            let conf = g.shape(&h.conf).unwrap();
            assert_eq!((src.height, src.width), (conf.height, conf.width));
        }
        let voc = attach_heads(&build_ssd(&Profile::Canonical300).unwrap(), 20, &[4; 6]).unwrap();
        assert_eq!(voc.layer("conv4_3_mbox_conf").unwrap().params.channels, Some(84));
    }

    #[test]
    fn heads_need_sources_and_matching_lengths() {
        let g = build_ssd(&toy()).unwrap();
        assert!(attach_heads(&g, 3, &[4, 4]).is_err());
    }

    #[test]
    fn extra_pred_conv_feeds_heads() {
        let g = build_essd(&toy(), Fusion::Sum, true).unwrap();
        assert_eq!(g.head_inputs()[0], "src1_ext_pred");
        assert_eq!(g.head_inputs()[3], "src4");
        let g = attach_heads(&g, 3, &[3; 4]).unwrap();
        assert_eq!(g.layer("src1_ext_mbox_conf").unwrap().inputs, vec!["src1_ext_pred".to_string()]);
    }
}
