//! The full network: backbone, pyramid, gates and detection heads over one
//! parameter store, plus inference and checkpoint I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{apply_attention, AttentionParams};
use crate::backbone::{extract_levels, BackboneConfig, BackboneParams, FeatureSet};
use crate::config;
use crate::detector::{
    classify_and_regress, generate_anchors, pool_rois, postprocess, run_proposal_heads, select_proposals,
    AnchorSet, Detection, DetectorConfig, HeadParams, Roi,
};
use crate::error::{invalid, Error, Result};
use crate::multilevel::{build_pyramid, project_levels, PyramidParams};
use crate::params::{ParamKind, ParamStore, Phase, Session};
use crate::tensor::{parse_shape, parse_value, Tensor, Var};

/// Which parts of the feature path are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Levels are projected and smoothed independently, without top-down
    /// fusion.
    NoMultilevel,
    /// The gates are bypassed.
    NoAttention,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoMultilevel, Variant::NoAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultilevel => "no_multilevel",
            Variant::NoAttention => "no_attention",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid!("unknown variant {s:?}; expected full, no_multilevel or no_attention"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Channel width shared by every pyramid level.
    pub pyramid_channels: usize,
    pub beta: f64,
    pub variant: Variant,
    pub detector: DetectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            pyramid_channels: 128,
            beta: 1.0,
            variant: Variant::Full,
            detector: DetectorConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A narrow network that trains in minutes on one CPU core.
    pub fn compact() -> Self {
        Self {
            backbone: BackboneConfig {
                stem_channels: 8,
                stage_channels: [16, 24, 32, 48],
                blocks_per_stage: [1, 1, 1, 1],
            },
            pyramid_channels: 16,
            detector: DetectorConfig {
                hidden: 64,
                ..DetectorConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.detector.validate()?;
        if self.pyramid_channels == 0 {
            return Err(invalid!("pyramid channels must be positive"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(invalid!("beta must be finite and non-negative, got {}", self.beta));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let d = &self.detector;
        let out = vec![
            ("model.variant", self.variant.to_string()),
            ("backbone.stem_channels", b.stem_channels.to_string()),
            ("backbone.stage_channels", config::join(&b.stage_channels)),
            ("backbone.blocks_per_stage", config::join(&b.blocks_per_stage)),
            ("multilevel.channels", self.pyramid_channels.to_string()),
            ("attention.beta", self.beta.to_string()),
            ("detector.anchor_base", d.anchor_base.to_string()),
            ("detector.anchor_ratios", config::join(&d.anchor_ratios)),
            ("detector.rpn_pos_iou", d.rpn_pos_iou.to_string()),
            ("detector.rpn_neg_iou", d.rpn_neg_iou.to_string()),
            ("detector.rpn_batch", d.rpn_batch.to_string()),
            ("detector.rpn_pos_fraction", d.rpn_pos_fraction.to_string()),
            ("detector.pre_nms_top_k", d.pre_nms_top_k.to_string()),
            ("detector.post_nms_top_k", d.post_nms_top_k.to_string()),
            ("detector.proposal_nms", d.proposal_nms.to_string()),
            ("detector.roi_batch", d.roi_batch.to_string()),
            ("detector.roi_pos_fraction", d.roi_pos_fraction.to_string()),
            ("detector.roi_fg_iou", d.roi_fg_iou.to_string()),
            ("detector.roi_size", d.roi_size.to_string()),
            ("detector.hidden", d.hidden.to_string()),
            ("detector.dropout", d.dropout.to_string()),
            ("detector.smooth_l1_beta", d.smooth_l1_beta.to_string()),
            ("detector.box_weights", config::join(&d.box_weights)),
            ("detector.score_floor", d.score_floor.to_string()),
            ("detector.final_nms", d.final_nms.to_string()),
            ("detector.max_detections", d.max_detections.to_string()),
        ];
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        use config::{array, list, value};
        let d = &mut self.detector;
        match key {
            "model.variant" => self.variant = raw.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "backbone.stem_channels" => self.backbone.stem_channels = value(key, raw)?,
            "backbone.stage_channels" => self.backbone.stage_channels = array(key, raw)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = array(key, raw)?,
            "multilevel.channels" => self.pyramid_channels = value(key, raw)?,
            "attention.beta" => self.beta = value(key, raw)?,
            "detector.anchor_base" => d.anchor_base = value(key, raw)?,
            "detector.anchor_ratios" => d.anchor_ratios = list(key, raw)?,
            "detector.rpn_pos_iou" => d.rpn_pos_iou = value(key, raw)?,
            "detector.rpn_neg_iou" => d.rpn_neg_iou = value(key, raw)?,
            "detector.rpn_batch" => d.rpn_batch = value(key, raw)?,
            "detector.rpn_pos_fraction" => d.rpn_pos_fraction = value(key, raw)?,
            "detector.pre_nms_top_k" => d.pre_nms_top_k = value(key, raw)?,
            "detector.post_nms_top_k" => d.post_nms_top_k = value(key, raw)?,
            "detector.proposal_nms" => d.proposal_nms = value(key, raw)?,
            "detector.roi_batch" => d.roi_batch = value(key, raw)?,
            "detector.roi_pos_fraction" => d.roi_pos_fraction = value(key, raw)?,
            "detector.roi_fg_iou" => d.roi_fg_iou = value(key, raw)?,
            "detector.roi_size" => d.roi_size = value(key, raw)?,
            "detector.hidden" => d.hidden = value(key, raw)?,
            "detector.dropout" => d.dropout = value(key, raw)?,
            "detector.smooth_l1_beta" => d.smooth_l1_beta = value(key, raw)?,
            "detector.box_weights" => d.box_weights = array(key, raw)?,
            "detector.score_floor" => d.score_floor = value(key, raw)?,
            "detector.final_nms" => d.final_nms = value(key, raw)?,
            "detector.max_detections" => d.max_detections = value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub pyramid: PyramidParams,
    pub attention: AttentionParams,
    pub heads: HeadParams,
}

const CHECKPOINT_MAGIC: &str = "defectnet-checkpoint 1";

impl Model {
    /// All weights zero, batch-norm at identity; see `trainer::init_params`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = BackboneParams::new(&mut store, &config.backbone)?;
        let pyramid = PyramidParams::new(&mut store, config.backbone.stage_channels, config.pyramid_channels);
        let attention = AttentionParams::new(&mut store, config.pyramid_channels, config.beta);
        let heads = HeadParams::new(&mut store, config.pyramid_channels, &config.detector);
        Ok(Self {
            config,
            store,
            backbone,
            pyramid,
            attention,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Backbone levels, the pyramid (or plain projections) and the gates
    /// (unless bypassed), for a normalized `[N, 1, H, W]` batch.
    pub fn features(&self, s: &mut Session, images: Var) -> Result<FeatureSet> {
        let c = extract_levels(s, images, &self.backbone)?;
        let p = match self.config.variant {
            Variant::NoMultilevel => project_levels(s, &c, &self.pyramid)?,
            _ => build_pyramid(s, &c, &self.pyramid)?,
        };
        match self.config.variant {
            Variant::NoAttention => Ok(p),
            _ => apply_attention(s, &p, &self.attention),
        }
    }

    pub fn anchors(&self, height: usize, width: usize) -> AnchorSet {
        let d = &self.config.detector;
        generate_anchors(height, width, d.anchor_base, &d.anchor_ratios)
    }

    /// Eval-mode detection for every image of a normalized batch.
    pub fn detect(&self, images: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let [n, _, h, w] = images.dims4()?;
        let d = &self.config.detector;
        let mut s = Session::new(&self.store, Phase::Eval);
        let x = s.tape.constant(images.clone());
        let features = self.features(&mut s, x)?;
        let heads = run_proposal_heads(&mut s, &features, &self.heads)?;
        let anchors = self.anchors(h, w);
        let mut rois = Vec::new();
        for i in 0..n {
            let (logits, deltas) = anchors.gather(&s.tape, &heads, i);
            let props = select_proposals(
                &anchors,
                &logits,
                &deltas,
                (h, w),
                d.pre_nms_top_k,
                d.post_nms_top_k,
                d.proposal_nms,
            );
            rois.extend(props.into_iter().map(|p| Roi { batch: i, bbox: p.bbox }));
        }
        let mut out = vec![Vec::new(); n];
        if rois.is_empty() {
            return Ok(out);
        }
        let (pooled, order) = pool_rois(&mut s.tape, &features, &rois, d.roi_size)?;
        let (logits, deltas) = classify_and_regress(&mut s, pooled, &self.heads, 0.0)?;
        let (lv, dv) = (s.tape.value(logits).data(), s.tape.value(deltas).data());
        let (lw, dw) = (lv.len() / order.len(), dv.len() / order.len());
        for (i, dets) in out.iter_mut().enumerate() {
            let rows: Vec<usize> = (0..order.len()).filter(|&r| rois[order[r]].batch == i).collect();
            let boxes: Vec<_> = rows.iter().map(|&r| rois[order[r]].bbox).collect();
            let l: Vec<f64> = rows.iter().flat_map(|&r| lv[r * lw..(r + 1) * lw].iter().copied()).collect();
            let dd: Vec<f64> = rows.iter().flat_map(|&r| dv[r * dw..(r + 1) * dw].iter().copied()).collect();
            *dets = postprocess(&boxes, &l, &dd, (h, w), d);
        }
        Ok(out)
    }

    /// Header, `meta key = value` lines (the model configuration followed by
    /// `extra`), then each parameter as `tensor <name> <kind>` and its text
    /// dump.
    pub fn checkpoint_text(&self, extra: &[(String, String)]) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in self.config.pairs().iter().chain(extra) {
            out.push_str(&format!("meta {k} = {v}\n"));
        }
        for e in self.store.entries() {
            out.push_str(&format!("tensor {} {}\n", e.name, e.kind.as_str()));
            e.value.write_text(&mut out);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &[(String, String)]) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.checkpoint_text(extra)).map_err(|e| Error::file(path, e))
    }

    /// Rebuilds a model from checkpoint text. Returns it together with the
    /// meta entries that are not model keys.
    pub fn from_checkpoint(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(Error::parse(1, format!("expected {CHECKPOINT_MAGIC:?}"))),
        }
        let mut config = ModelConfig::default();
        let mut extra = Vec::new();
        while let Some(&(no, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix("meta ") else { break };
            lines.next();
            let (k, v) = rest
                .split_once(" = ")
                .ok_or_else(|| Error::parse(no, "meta line needs `key = value`"))?;
            if !config.set(k, v).map_err(|e| Error::parse(no, e.to_string()))? {
                extra.push((k.to_string(), v.to_string()));
            }
        }
        let mut model = Model::new(config)?;
        let mut loaded = ParamStore::new();
        while let Some((no, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            let (Some("tensor"), Some(name), Some(kind), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(no, format!("expected `tensor <name> <kind>`, got {line:?}")));
            };
            let kind = ParamKind::parse(kind).ok_or_else(|| Error::parse(no, format!("unknown kind {kind:?}")))?;
            let (sno, shape_line) = lines.next().ok_or_else(|| Error::parse(no + 1, "missing shape"))?;
            let shape = parse_shape(shape_line, sno)?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let (vno, v) = lines.next().ok_or_else(|| Error::parse(sno, "truncated tensor"))?;
                data.push(parse_value(v, vno)?);
            }
            loaded.add(name, kind, Tensor::new(shape, data)?);
        }
        model.store.load_from(&loaded)?;
        Ok((model, extra))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<(String, String)>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// Keys whose values differ between two model configurations.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    a.pairs()
        .into_iter()
        .zip(b.pairs())
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0)
        .collect()
}
