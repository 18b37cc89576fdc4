//! Residual feature extractor producing four feature levels at strides
//! 4, 8, 16 and 32 from a single-channel image.

use crate::error::{invalid, Result};
use crate::params::{BnParams, ConvParams, ParamStore, Session};
use crate::tensor::{PoolKind, Var};

/// Cumulative stride of the coarsest level; inputs must be multiples of it.
pub const MAX_STRIDE: usize = 32;

/// Per-level strides relative to the input, finest first.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }
}

impl BackboneConfig {
    /// Stride of the first block of each stage; the stem already reduces by 4.
    pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels[0] == 0 {
            return Err(invalid!("backbone channel counts must be positive"));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(invalid!("every stage needs at least one block"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub conv1: ConvParams,
    pub bn1: BnParams,
    pub conv2: ConvParams,
    pub bn2: BnParams,
    /// 1×1 projection used when the block changes shape.
    pub shortcut: Option<ConvParams>,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1)
            .then(|| ConvParams::new(store, &format!("{name}.shortcut"), cin, cout, 1, stride, 0));
        Self {
            conv1: ConvParams::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1),
            bn1: BnParams::new(store, &format!("{name}.bn1"), cout),
            conv2: ConvParams::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            bn2: BnParams::new(store, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub stem_conv: ConvParams,
    pub stem_bn: BnParams,
    pub stages: Vec<Vec<BlockParams>>,
}

impl BackboneParams {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem_conv = ConvParams::new(store, "backbone.stem.conv", 1, config.stem_channels, 7, 2, 3);
        let stem_bn = BnParams::new(store, "backbone.stem.bn", config.stem_channels);
        let mut cin = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (s, (&cout, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if b == 0 { BackboneConfig::STAGE_STRIDES[s] } else { 1 };
                    let block = BlockParams::new(
                        store,
                        &format!("backbone.stage{}.block{b}", s + 2),
                        cin,
                        cout,
                        stride,
                    );
                    cin = cout;
                    block
                })
                .collect();
            stages.push(stage);
        }
        Ok(Self {
            stem_conv,
            stem_bn,
            stages,
        })
    }
}

/// Four feature maps, finest (stride 4) first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureSet {
    pub levels: [Var; 4],
}

impl FeatureSet {
    /// `[N, C, H, W]` of every level.
    pub fn shapes(&self, s: &Session) -> [[usize; 4]; 4] {
        self.levels.map(|v| {
            let sh = s.tape.shape(v);
            [sh[0], sh[1], sh[2], sh[3]]
        })
    }
}

/// 7×7/2 conv, batch norm, relu, 3×3/2 max-pool.
pub fn stem(s: &mut Session, image: Var, p: &BackboneParams) -> Result<Var> {
    let shape = s.tape.shape(image).to_vec();
    match shape.as_slice() {
        [_, 1, h, w] if h % MAX_STRIDE == 0 && w % MAX_STRIDE == 0 && *h > 0 && *w > 0 => {}
        [_, 1, h, w] => {
            return Err(invalid!(
                "image height and width must be positive multiples of {MAX_STRIDE}, got {h}x{w}"
            ))
        }
        _ => return Err(invalid!("expected a [N, 1, H, W] image, got shape {shape:?}")),
    }
    let x = s.conv(image, &p.stem_conv)?;
    let x = s.batch_norm(x, &p.stem_bn)?;
    let x = s.tape.relu(x);
    s.tape.pool2d(x, PoolKind::Max, 3, 3, 2, 1)
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
pub fn residual_block(s: &mut Session, x: Var, p: &BlockParams) -> Result<Var> {
    let y = s.conv(x, &p.conv1)?;
    let y = s.batch_norm(y, &p.bn1)?;
    let y = s.tape.relu(y);
    let y = s.conv(y, &p.conv2)?;
    let y = s.batch_norm(y, &p.bn2)?;
    let short = match &p.shortcut {
        Some(proj) => s.conv(x, proj)?,
        None => x,
    };
    let sum = s.tape.add(y, short)?;
    Ok(s.tape.relu(sum))
}

pub fn extract_levels(s: &mut Session, image: Var, p: &BackboneParams) -> Result<FeatureSet> {
    let mut x = stem(s, image, p)?;
    let mut levels = [x; 4];
    for (i, stage) in p.stages.iter().enumerate() {
        for block in stage {
            x = residual_block(s, x, block)?;
        }
        levels[i] = x;
    }
    Ok(FeatureSet { levels })
}
