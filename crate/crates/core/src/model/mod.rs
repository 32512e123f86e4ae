//! The detector network at toy scale.
//!
//! A small strided 2D backbone with a top-down pyramid produces spatial
//! features at strides {8, 16, 32}; a 3D stand-in collapses the clip by
//! temporal averaging and runs a second stem to stride 32. Per level the
//! spatio-temporal features are upsampled, fused into the classification and
//! regression streams by channel encoders (channel concatenation, two convs,
//! channel self-attention, one more conv), and decoded by sigmoid/raw
//! prediction branches. Exactly one prediction tuple per spatial position —
//! there are no anchor boxes.
//!
//! A model is immutable during inference; concurrent forward passes over the
//! same weights are safe. Training mutates weights through the tape and is
//! single-writer.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numeric::graph::{ConvLayer, NodeId, ParamStore, Tape};
use crate::numeric::{self, FeatureMap, Matrix, PostOp};

/// Pyramid strides, level 1 to 3.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Bias for the final classification/confidence convs; sigmoid(-4.6) is
/// about 0.01, which keeps early BCE terms stable.
const PRIOR_BIAS: f64 = -4.6;

/// Head topology: `Decoupled` fuses the 3D features separately into the
/// classification and regression streams; `Coupled` drops the parallel
/// branch convs and fuses once per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    Decoupled,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of the per-level 2D feature maps after compression.
    pub c_o1: usize,
    /// Channels of the spatio-temporal features.
    pub c_o2: usize,
    /// Channels inside and after the channel encoders.
    pub c_o3: usize,
    pub num_classes: usize,
    /// Frames per clip; the last frame is the key frame.
    pub clip_len: usize,
    pub variant: HeadVariant,
    /// Stem width of the 2D backbone (stages use twice this).
    pub width_2d: usize,
    /// Stem width of the 3D backbone (later stages use twice this).
    pub width_3d: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Full-scale channel plan; desk runs use the presets below.
        Self {
            c_o1: 256,
            c_o2: 64,
            c_o3: 256,
            num_classes: 24,
            clip_len: 16,
            variant: HeadVariant::Decoupled,
            width_2d: 16,
            width_3d: 16,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults: narrow maps, same topology.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            c_o1: 32,
            c_o2: 64,
            c_o3: 32,
            num_classes,
            clip_len: 16,
            variant: HeadVariant::Decoupled,
            width_2d: 8,
            width_3d: 8,
        }
    }

    /// Narrow enough that a finite-difference sweep over every parameter is
    /// cheap.
    pub fn gradcheck() -> Self {
        Self {
            c_o1: 6,
            c_o2: 6,
            c_o3: 6,
            num_classes: 2,
            clip_len: 4,
            variant: HeadVariant::Decoupled,
            width_2d: 4,
            width_3d: 4,
        }
    }

    /// Capacity used by the toy training loop.
    pub fn overfit(num_classes: usize) -> Self {
        Self {
            c_o1: 16,
            c_o2: 16,
            c_o3: 16,
            num_classes,
            clip_len: 4,
            variant: HeadVariant::Decoupled,
            width_2d: 8,
            width_3d: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_o1", self.c_o1),
            ("c_o2", self.c_o2),
            ("c_o3", self.c_o3),
            ("num_classes", self.num_classes),
            ("clip_len", self.clip_len),
            ("width_2d", self.width_2d),
            ("width_3d", self.width_3d),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(contract(format!("model config field {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Input clip: `clip_len` frames of H x W x 3, last frame is the key frame.
#[derive(Debug, Clone)]
pub struct Clip {
    frames: Vec<FeatureMap>,
}

impl Clip {
    pub fn new(frames: Vec<FeatureMap>) -> Result<Self> {
        if frames.is_empty() {
            return Err(contract("clip needs at least one frame".to_string()));
        }
        let (h, w, c) = frames[0].shape();
        if c != 3 {
            return Err(contract("clip frames must have 3 channels".to_string()));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(contract(format!("frame size {h}x{w} must be divisible by 32")));
        }
        if frames.iter().any(|f| f.shape() != (h, w, c)) {
            return Err(contract("clip frames must share one shape".to_string()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[FeatureMap] {
        &self.frames
    }

    pub fn key_frame(&self) -> &FeatureMap {
        self.frames.last().expect("non-empty by construction")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Pixel-wise mean over frames. Values are sorted before a pairwise
    /// reduction, so the result is bit-exact under any frame permutation and
    /// a clip of identical frames averages to exactly that frame.
    pub fn temporal_mean(&self) -> FeatureMap {
        let (h, w, c) = self.frames[0].shape();
        let mut out = FeatureMap::zeros(h, w, c);
        let mut column: Vec<f64> = vec![0.0; self.frames.len()];
        for i in 0..h * w * c {
            for (k, f) in self.frames.iter().enumerate() {
                column[k] = f.data()[i];
            }
            column.sort_by(f64::total_cmp);
            out.data_mut()[i] = pairwise_mean(&mut column);
        }
        out
    }
}

fn pairwise_mean(vals: &mut [f64]) -> f64 {
    let n = vals.len() as f64;
    let mut len = vals.len();
    while len > 1 {
        let half = len / 2;
        for i in 0..half {
            vals[i] = vals[2 * i] + vals[2 * i + 1];
        }
        if len % 2 == 1 {
            vals[half] = vals[len - 1];
            len = half + 1;
        } else {
            len = half;
        }
    }
    vals[0] / n
}

/// Channel fusion block: concat(2D, 3D) -> two 1x1 convs -> channel
/// self-attention -> 1x1 conv, all at `c_o3` channels.
#[derive(Debug, Clone)]
pub struct ChannelEncoder {
    fuse1: ConvLayer,
    fuse2: ConvLayer,
    post: ConvLayer,
}

impl ChannelEncoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut StdRng,
        name: &str,
        in_channels: usize,
        c_o3: usize,
    ) -> Result<Self> {
        Ok(Self {
            fuse1: ConvLayer::new(store, rng, &format!("{name}.fuse1"), 1, in_channels, c_o3, true, PostOp::LeakyRelu)?,
            fuse2: ConvLayer::new(store, rng, &format!("{name}.fuse2"), 1, c_o3, c_o3, true, PostOp::LeakyRelu)?,
            post: ConvLayer::new(store, rng, &format!("{name}.post"), 1, c_o3, c_o3, true, PostOp::LeakyRelu)?,
        })
    }

    fn apply(
        &self,
        tape: &mut Tape,
        spatial: NodeId,
        temporal: NodeId,
        store: &ParamStore,
    ) -> Result<NodeId> {
        let cat = tape.concat(spatial, temporal)?;
        let f1 = tape.conv(&self.fuse1, cat, store)?;
        let fused = tape.conv(&self.fuse2, f1, store)?;
        let (h, w, _) = tape.map(fused)?.shape();
        let m = tape.map_to_mat(fused)?;
        let gram = tape.matmul_nt(m, m)?;
        let attn = tape.softmax_rows(gram)?;
        let mixed = tape.matmul(attn, m)?;
        let back = tape.mat_to_map(mixed, h, w)?;
        tape.conv(&self.post, back, store)
    }
}

/// Pure form of the encoder's attention stage: `softmax_rows(m * m^T) * m`.
pub fn channel_attention(m: &Matrix) -> Result<Matrix> {
    let gram = numeric::matmul_nt(m, m)?;
    let attn = numeric::softmax_rows(&gram)?;
    numeric::matmul(&attn, m)
}

struct Backbone2d {
    stem1: ConvLayer,
    stem2: ConvLayer,
    stages: [ConvLayer; 3],
    laterals: [ConvLayer; 3],
    compress: [ConvLayer; 3],
}

struct Backbone3d {
    stages: [ConvLayer; 5],
    out: ConvLayer,
}

struct LevelBranches {
    cls: [ConvLayer; 2],
    reg: [ConvLayer; 2],
}

enum LevelFusion {
    Decoupled { branches: LevelBranches, enc_cls: ChannelEncoder, enc_reg: ChannelEncoder },
    Coupled { enc: ChannelEncoder },
}

struct LevelHead {
    cls_convs: [ConvLayer; 2],
    cls_out: ConvLayer,
    reg_convs: [ConvLayer; 2],
    reg_out: ConvLayer,
    conf_out: ConvLayer,
}

/// The full network: parameters plus the layer graph over them.
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    backbone_2d: Backbone2d,
    backbone_3d: Backbone3d,
    fusion: [LevelFusion; 3],
    heads: [LevelHead; 3],
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let leaky = PostOp::LeakyRelu;
        let w2 = config.width_2d;
        let s2 = 2 * w2;
        let backbone_2d = Backbone2d {
            stem1: ConvLayer::new(&mut store, &mut rng, "b2d.stem1", 3, 3, w2, true, leaky)?,
            stem2: ConvLayer::new(&mut store, &mut rng, "b2d.stem2", 3, w2, w2, true, leaky)?,
            stages: [
                ConvLayer::new(&mut store, &mut rng, "b2d.stage1", 3, w2, s2, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.stage2", 3, s2, s2, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.stage3", 3, s2, s2, true, leaky)?,
            ],
            laterals: [
                ConvLayer::new(&mut store, &mut rng, "b2d.lat1", 1, s2, config.c_o1, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.lat2", 1, s2, config.c_o1, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.lat3", 1, s2, config.c_o1, true, leaky)?,
            ],
            compress: [
                ConvLayer::new(&mut store, &mut rng, "b2d.out1", 1, config.c_o1, config.c_o1, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.out2", 1, config.c_o1, config.c_o1, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b2d.out3", 1, config.c_o1, config.c_o1, true, leaky)?,
            ],
        };

        let w3 = config.width_3d;
        let s3 = 2 * w3;
        let backbone_3d = Backbone3d {
            stages: [
                ConvLayer::new(&mut store, &mut rng, "b3d.stage1", 3, 3, w3, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b3d.stage2", 3, w3, w3, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b3d.stage3", 3, w3, s3, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b3d.stage4", 3, s3, s3, true, leaky)?,
                ConvLayer::new(&mut store, &mut rng, "b3d.stage5", 3, s3, s3, true, leaky)?,
            ],
            out: ConvLayer::new(&mut store, &mut rng, "b3d.out", 1, s3, config.c_o2, true, leaky)?,
        };

        let enc_in = config.c_o1 + config.c_o2;
        let fusion = [1usize, 2, 3].map(|level| -> Result<LevelFusion> {
            match config.variant {
                HeadVariant::Decoupled => Ok(LevelFusion::Decoupled {
                    branches: LevelBranches {
                        cls: [
                            ConvLayer::new(&mut store, &mut rng, &format!("branch.l{level}.cls1"), 3, config.c_o1, config.c_o1, true, leaky)?,
                            ConvLayer::new(&mut store, &mut rng, &format!("branch.l{level}.cls2"), 3, config.c_o1, config.c_o1, true, leaky)?,
                        ],
                        reg: [
                            ConvLayer::new(&mut store, &mut rng, &format!("branch.l{level}.reg1"), 3, config.c_o1, config.c_o1, true, leaky)?,
                            ConvLayer::new(&mut store, &mut rng, &format!("branch.l{level}.reg2"), 3, config.c_o1, config.c_o1, true, leaky)?,
                        ],
                    },
                    enc_cls: ChannelEncoder::new(&mut store, &mut rng, &format!("enc.l{level}.cls"), enc_in, config.c_o3)?,
                    enc_reg: ChannelEncoder::new(&mut store, &mut rng, &format!("enc.l{level}.reg"), enc_in, config.c_o3)?,
                }),
                HeadVariant::Coupled => Ok(LevelFusion::Coupled {
                    enc: ChannelEncoder::new(&mut store, &mut rng, &format!("enc.l{level}"), enc_in, config.c_o3)?,
                }),
            }
        });
        let fusion = unwrap_levels(fusion)?;

        let silu = PostOp::Silu;
        let heads = [1usize, 2, 3].map(|level| -> Result<LevelHead> {
            let cls_out = ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.cls_out"), 1, config.c_o3, config.num_classes, false, PostOp::Sigmoid)?;
            cls_out.set_bias(&mut store, PRIOR_BIAS);
            let conf_out = ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.conf_out"), 1, config.c_o3, 1, false, PostOp::Sigmoid)?;
            conf_out.set_bias(&mut store, PRIOR_BIAS);
            Ok(LevelHead {
                cls_convs: [
                    ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.cls1"), 3, config.c_o3, config.c_o3, true, silu)?,
                    ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.cls2"), 3, config.c_o3, config.c_o3, true, silu)?,
                ],
                cls_out,
                reg_convs: [
                    ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.reg1"), 3, config.c_o3, config.c_o3, true, silu)?,
                    ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.reg2"), 3, config.c_o3, config.c_o3, true, silu)?,
                ],
                reg_out: ConvLayer::new(&mut store, &mut rng, &format!("head.l{level}.reg_out"), 1, config.c_o3, 4, false, PostOp::None)?,
                conf_out,
            })
        });
        let heads = unwrap_levels(heads)?;

        Ok(Self { config: config.clone(), params: store, backbone_2d, backbone_3d, fusion, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Full forward pass with the model's own parameters.
    pub fn forward(&self, clip: &Clip) -> Result<(Tape, Predictions)> {
        self.forward_with(clip, &self.params)
    }

    /// Forward pass with explicit parameter values (used by the
    /// finite-difference sweeps). The store must have the layout produced by
    /// [`Model::new`] for the same config.
    pub fn forward_with(&self, clip: &Clip, store: &ParamStore) -> Result<(Tape, Predictions)> {
        if clip.len() != self.config.clip_len {
            return Err(contract(format!(
                "clip length {} does not match configured {}",
                clip.len(),
                self.config.clip_len
            )));
        }
        let mut tape = Tape::new();
        let spatial = self.forward_2d(&mut tape, clip.key_frame().clone(), store)?;
        let temporal = self.forward_3d(&mut tape, clip, store)?;
        // Align the stride-32 spatio-temporal map to each level.
        let aligned = [
            tape.upsample(temporal, 4)?,
            tape.upsample(temporal, 2)?,
            temporal,
        ];

        let mut levels = Vec::with_capacity(3);
        for i in 0..3 {
            let (fused_cls, fused_reg) = match &self.fusion[i] {
                LevelFusion::Decoupled { branches, enc_cls, enc_reg } => {
                    let c1 = tape.conv(&branches.cls[0], spatial[i], store)?;
                    let f_cls = tape.conv(&branches.cls[1], c1, store)?;
                    let r1 = tape.conv(&branches.reg[0], spatial[i], store)?;
                    let f_reg = tape.conv(&branches.reg[1], r1, store)?;
                    (
                        enc_cls.apply(&mut tape, f_cls, aligned[i], store)?,
                        enc_reg.apply(&mut tape, f_reg, aligned[i], store)?,
                    )
                }
                LevelFusion::Coupled { enc } => {
                    let fused = enc.apply(&mut tape, spatial[i], aligned[i], store)?;
                    (fused, fused)
                }
            };

            let head = &self.heads[i];
            let h1 = tape.conv(&head.cls_convs[0], fused_cls, store)?;
            let h2 = tape.conv(&head.cls_convs[1], h1, store)?;
            let cls = tape.conv(&head.cls_out, h2, store)?;
            let g1 = tape.conv(&head.reg_convs[0], fused_reg, store)?;
            let g2 = tape.conv(&head.reg_convs[1], g1, store)?;
            let reg = tape.conv(&head.reg_out, g2, store)?;
            let conf = tape.conv(&head.conf_out, g2, store)?;

            let (gh, gw, _) = tape.map(cls)?.shape();
            levels.push(LevelNodes { cls, reg, conf, grid_h: gh, grid_w: gw, stride: STRIDES[i] });
        }
        Ok((tape, Predictions { levels }))
    }

    /// Key frame -> three spatial maps at strides {8, 16, 32}, `c_o1`
    /// channels each.
    fn forward_2d(
        &self,
        tape: &mut Tape,
        key_frame: FeatureMap,
        store: &ParamStore,
    ) -> Result<[NodeId; 3]> {
        let b = &self.backbone_2d;
        let x = tape.input(key_frame);
        let x = tape.conv(&b.stem1, x, store)?;
        let x = tape.avg_pool(x, 2)?;
        let x = tape.conv(&b.stem2, x, store)?;
        let x = tape.avg_pool(x, 2)?; // stride 4
        let c1 = {
            let y = tape.conv(&b.stages[0], x, store)?;
            tape.avg_pool(y, 2)? // stride 8
        };
        let c2 = {
            let y = tape.conv(&b.stages[1], c1, store)?;
            tape.avg_pool(y, 2)? // stride 16
        };
        let c3 = {
            let y = tape.conv(&b.stages[2], c2, store)?;
            tape.avg_pool(y, 2)? // stride 32
        };
        // Top-down pyramid with 1x1 laterals, then the per-level 1x1
        // compression convs.
        let l1 = tape.conv(&b.laterals[0], c1, store)?;
        let l2 = tape.conv(&b.laterals[1], c2, store)?;
        let l3 = tape.conv(&b.laterals[2], c3, store)?;
        let p3 = l3;
        let up3 = tape.upsample(p3, 2)?;
        let p2 = tape.add(l2, up3)?;
        let up2 = tape.upsample(p2, 2)?;
        let p1 = tape.add(l1, up2)?;
        Ok([
            tape.conv(&b.compress[0], p1, store)?,
            tape.conv(&b.compress[1], p2, store)?,
            tape.conv(&b.compress[2], p3, store)?,
        ])
    }

    /// Clip -> stride-32 spatio-temporal map with `c_o2` channels. Temporal
    /// information is collapsed by frame averaging before the spatial stem.
    fn forward_3d(&self, tape: &mut Tape, clip: &Clip, store: &ParamStore) -> Result<NodeId> {
        let b = &self.backbone_3d;
        let mut x = tape.input(clip.temporal_mean());
        for stage in &b.stages {
            x = tape.conv(stage, x, store)?;
            x = tape.avg_pool(x, 2)?;
        }
        tape.conv(&b.out, x, store)
    }
}

fn unwrap_levels<T>(arr: [Result<T>; 3]) -> Result<[T; 3]> {
    let [a, b, c] = arr;
    Ok([a?, b?, c?])
}

/// Node handles for the per-level outputs of one forward pass.
pub struct LevelNodes {
    pub cls: NodeId,
    pub reg: NodeId,
    pub conf: NodeId,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
}

pub struct Predictions {
    pub levels: Vec<LevelNodes>,
}

/// Per-level gradients of a scalar objective with respect to the prediction
/// maps, in the same order as [`Predictions::levels`].
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub cls: FeatureMap,
    pub reg: FeatureMap,
    pub conf: FeatureMap,
}

impl Predictions {
    /// Pairs gradient maps with the prediction nodes for [`Tape::backward`].
    pub fn seed_grads(&self, grads: Vec<FeatureGrads>) -> Result<Vec<(NodeId, FeatureMap)>> {
        if grads.len() != self.levels.len() {
            return Err(contract("gradient level count mismatch".to_string()));
        }
        let mut seeds = Vec::with_capacity(grads.len() * 3);
        for (l, g) in self.levels.iter().zip(grads.into_iter()) {
            seeds.push((l.cls, g.cls));
            seeds.push((l.reg, g.reg));
            seeds.push((l.conf, g.conf));
        }
        Ok(seeds)
    }

    /// Copies the prediction values off the tape.
    pub fn extract(&self, tape: &Tape) -> Result<PredictionSet> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            levels.push(LevelPredictions {
                stride: l.stride,
                cls: tape.map(l.cls)?.clone(),
                reg: tape.map(l.reg)?.clone(),
                conf: tape.map(l.conf)?.clone(),
            });
        }
        Ok(PredictionSet { levels })
    }
}

/// Per-level prediction maps: `cls` sigmoid class probabilities, `reg` raw
/// offsets, `conf` sigmoid actionness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPredictions {
    pub stride: usize,
    pub cls: FeatureMap,
    pub reg: FeatureMap,
    pub conf: FeatureMap,
}

impl LevelPredictions {
    /// 1-based pyramid level for this stride.
    pub fn level_index(&self) -> usize {
        STRIDES.iter().position(|&s| s == self.stride).map(|i| i + 1).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub levels: Vec<LevelPredictions>,
}

/// A spatial position in the canonical enumeration order: levels in order,
/// rows, then columns.
#[derive(Debug, Clone, Copy)]
pub struct Position {
    pub index: usize,
    pub level_idx: usize,
    pub y: usize,
    pub x: usize,
    pub stride: usize,
}

impl PredictionSet {
    pub fn total_positions(&self) -> usize {
        self.levels.iter().map(|l| l.cls.height() * l.cls.width()).sum()
    }

    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.total_positions());
        let mut index = 0;
        for (level_idx, l) in self.levels.iter().enumerate() {
            for y in 0..l.cls.height() {
                for x in 0..l.cls.width() {
                    out.push(Position { index, level_idx, y, x, stride: l.stride });
                    index += 1;
                }
            }
        }
        out
    }
}
