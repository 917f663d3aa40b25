//! Model variants: topology, heads and default boxes bundled together.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorSet};
use crate::error::{GeometryError, GraphError};
use crate::graph::{attach_heads, build_essd, build_ssd, Fusion, NetGraph, Profile, ToyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ssd,
    Essd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Canonical300,
    Toy,
}

/// Box sizes per scale (fractions of the image side) and the aspect ratios
/// tiled at every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Geometric progression from `min_size` to `max_size` when absent.
    pub sizes: Option<Vec<f64>>,
    pub min_size: f64,
    pub max_size: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { sizes: None, min_size: 0.12, max_size: 0.66, aspect_ratios: vec![1.0, 2.0, 0.5] }
    }
}

impl AnchorConfig {
    pub fn sizes_for(&self, scales: usize) -> Vec<f64> {
        if let Some(s) = &self.sizes {
            return s.clone();
        }
        if scales == 1 {
            return vec![self.min_size];
        }
        let step = (self.max_size / self.min_size).powf(1.0 / (scales - 1) as f64);
        (0..scales).map(|k| self.min_size * step.powi(k as i32)).collect()
    }
}

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

/// SSD300 with VOC heads, as shipped in `data/ssd300.json`.
pub const SSD300_DESCRIPTOR: &str = include_str!("../data/ssd300.json");
/// ESSD300 (sum fusion, extra prediction convolutions) with VOC heads.
pub const ESSD300_SUM_DESCRIPTOR: &str = include_str!("../data/essd300_sum.json");

/// Boxes per cell of the SSD300 heads.
pub const CANONICAL_BOXES: [usize; 6] = [4, 6, 6, 6, 4, 4];
pub const CANONICAL_CLASSES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub profile: ProfileKind,
    pub toy: ToyConfig,
    pub variant: Variant,
    pub fusion: Fusion,
    pub extra_pred_conv: bool,
    /// Object classes, background excluded. Ignored by the canonical profile.
    pub num_classes: usize,
    pub anchors: AnchorConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            profile: ProfileKind::Toy,
            toy: ToyConfig::default(),
            variant: Variant::Essd,
            fusion: Fusion::Sum,
            extra_pred_conv: true,
            num_classes: SHAPE_CLASSES.len(),
            anchors: AnchorConfig::default(),
        }
    }
}

/// Named variants: `SSD`, `ESSD-less` (sum fusion, no extra prediction conv),
/// `ESSD-sum`, `ESSD-prod`, `ESSD-concat`.
pub const VARIANT_NAMES: [&str; 5] = ["SSD", "ESSD-less", "ESSD-sum", "ESSD-prod", "ESSD-concat"];

impl ModelSpec {
    pub fn toy(name: &str) -> Result<Self, GraphError> {
        name.parse::<ModelSpec>()
    }

    pub fn profile(&self) -> Profile {
        match self.profile {
            ProfileKind::Canonical300 => Profile::Canonical300,
            ProfileKind::Toy => Profile::Toy(self.toy),
        }
    }

    pub fn name(&self) -> String {
        match (self.variant, self.fusion, self.extra_pred_conv) {
            (Variant::Ssd, ..) => "SSD".into(),
            (Variant::Essd, Fusion::Sum, false) => "ESSD-less".into(),
            (Variant::Essd, f, true) => format!("ESSD-{}", f.as_str()),
            (Variant::Essd, f, false) => format!("ESSD-less-{}", f.as_str()),
        }
    }

    fn class_count(&self) -> usize {
        match self.profile {
            ProfileKind::Canonical300 => CANONICAL_CLASSES,
            ProfileKind::Toy => self.num_classes,
        }
    }

    fn boxes_per_cell(&self, scales: usize) -> Vec<usize> {
        match self.profile {
            ProfileKind::Canonical300 => CANONICAL_BOXES.to_vec(),
            ProfileKind::Toy => vec![self.anchors.aspect_ratios.len(); scales],
        }
    }

    /// Topology without heads.
    pub fn trunk(&self) -> Result<NetGraph, GraphError> {
        match self.variant {
            Variant::Ssd => build_ssd(&self.profile()),
            Variant::Essd => build_essd(&self.profile(), self.fusion, self.extra_pred_conv),
        }
    }

    /// Full detector with confidence and localization heads.
    pub fn graph(&self) -> Result<NetGraph, GraphError> {
        let trunk = self.trunk()?;
        let n = trunk.prediction_sources().len();
        attach_heads(&trunk, self.class_count(), &self.boxes_per_cell(n))
    }

    /// The plain SSD detector this model extends (itself for SSD).
    pub fn base_graph(&self) -> Result<NetGraph, GraphError> {
        ModelSpec { variant: Variant::Ssd, ..self.clone() }.graph()
    }

    /// Layers of the detector that the base SSD does not have.
    pub fn extension_layers(&self) -> Result<BTreeSet<String>, GraphError> {
        let base = self.base_graph()?;
        Ok(self.graph()?.layers().iter().filter(|l| !base.contains(&l.name)).map(|l| l.name.clone()).collect())
    }

    pub fn input_size(&self) -> usize {
        match self.profile {
            ProfileKind::Canonical300 => 300,
            ProfileKind::Toy => self.toy.input_size,
        }
    }

    /// Default boxes matching the head layout of [`ModelSpec::graph`].
    pub fn anchors(&self) -> Result<AnchorSet, GeometryError> {
        if self.profile != ProfileKind::Toy {
            return Err(GeometryError::Config("default boxes are only defined for the toy profile".into()));
        }
        let grids = self.toy.grid_sizes().map_err(|e| GeometryError::Config(e.to_string()))?;
        let sizes = self.anchors.sizes_for(grids.len());
        let ratios = vec![self.anchors.aspect_ratios.clone(); grids.len()];
        let grids: Vec<(usize, usize)> = grids.iter().map(|&g| (g, g)).collect();
        generate_anchors(&sizes, &ratios, &grids)
    }
}

impl FromStr for ModelSpec {
    type Err = GraphError;

    /// Parses a variant name into a toy-profile spec.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (variant, fusion, extra) = match s.to_ascii_lowercase().as_str() {
            "ssd" => (Variant::Ssd, Fusion::Sum, false),
            "essd-less" => (Variant::Essd, Fusion::Sum, false),
            "essd" | "essd-sum" => (Variant::Essd, Fusion::Sum, true),
            "essd-prod" => (Variant::Essd, Fusion::Prod, true),
            "essd-concat" => (Variant::Essd, Fusion::Concat, true),
            _ => return Err(GraphError::Config(format!("unknown model `{s}`; expected one of {VARIANT_NAMES:?}"))),
        };
        Ok(ModelSpec { variant, fusion, extra_pred_conv: extra, ..Default::default() })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for name in VARIANT_NAMES {
            assert_eq!(ModelSpec::toy(name).unwrap().name(), name);
        }
        assert!(ModelSpec::toy("YOLO").is_err());
    }

    #[test]
    fn anchor_count_matches_head_rows() {
        for name in VARIANT_NAMES {
            let spec = ModelSpec::toy(name).unwrap();
            let g = spec.graph().unwrap();
            let rows: usize = g
                .heads()
                .iter()
                .map(|h| {
                    let s = g.shape(&h.input).unwrap();
                    s.height * s.width * h.boxes_per_cell
                })
                .sum();
            let expected: usize = [16usize, 8, 4, 2].iter().map(|g| g * g * 3).sum();
            assert_eq!(rows, expected);
            assert_eq!(spec.anchors().unwrap().len(), expected);
        }
    }

    #[test]
    fn default_sizes_span_configured_range() {
        let s = AnchorConfig::default().sizes_for(4);
        assert!((s[0] - 0.12).abs() < 1e-12 && (s[3] - 0.66).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn extension_layers_are_new() {
        let ext = ModelSpec::toy("ESSD-sum").unwrap().extension_layers().unwrap();
        assert!(ext.iter().any(|n| n.ends_with("_ext_up_deconv")));
        assert!(ext.iter().any(|n| n.ends_with("_pred_conv")));
        assert!(ext.iter().any(|n| n.ends_with("_ext_mbox_conf")));
        assert!(ModelSpec::toy("SSD").unwrap().extension_layers().unwrap().is_empty());
    }

    #[test]
    fn canonical_graph_has_voc_heads() {
        let spec = ModelSpec { profile: ProfileKind::Canonical300, ..ModelSpec::toy("ESSD-sum").unwrap() };
        let g = spec.graph().unwrap();
        assert_eq!(g.num_classes(), Some(20));
        assert!(spec.anchors().is_err());
    }

    #[test]
    fn shipped_descriptors_match_builders() {
        for (name, json) in [("SSD", SSD300_DESCRIPTOR), ("ESSD-sum", ESSD300_SUM_DESCRIPTOR)] {
            let spec = ModelSpec { profile: ProfileKind::Canonical300, ..ModelSpec::toy(name).unwrap() };
            let shipped = NetGraph::from_json(json).unwrap();
            assert_eq!(shipped.to_json(), spec.graph().unwrap().to_json(), "{name}");
        }
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ModelSpec = serde_json::from_str(r#"{"variant":"ssd"}"#).unwrap();
        assert_eq!(spec.name(), "SSD");
        assert_eq!(spec.profile, ProfileKind::Toy);
    }
}
