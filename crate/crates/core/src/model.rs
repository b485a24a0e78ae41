//! Toy detector: a four-stage conv backbone, a lateral/top-down neck, and per
//! level heads with the depth prior, optional depth-conditioned modulation,
//! and objectness/class/box branches.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Category};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::impl_module;
use crate::kernels::{
    dck_generate, dck_generate_backward, dck_modulate, dck_modulate_backward, DckConfig,
    DckGenCache, DckParams, KernelField, MsdpLevel, MsdpLevelCache,
};
use crate::layers::{Conv, ConvBlock, ConvBlockCache};
use crate::losses::{CellTarget, HeadOutput, LevelTargets};
use crate::params::{join, Module, ParamView, ParamViewMut};
use crate::tensor::{
    avg_pool2d, avg_pool2d_backward, upsample_nearest, upsample_nearest_backward, NormCache,
    StatsMode, Tensor,
};

pub const BACKBONE_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square network input side in pixels.
    pub input_size: usize,
    /// Output channels of backbone stages 1..4.
    pub widths: [usize; BACKBONE_STAGES],
    pub neck_channels: usize,
    /// Contiguous pyramid levels; level `n` has stride `2^n`.
    pub levels: Vec<u32>,
    pub depth_convs: usize,
    /// `None` disables depth-conditioned modulation.
    pub dck: Option<DckConfig>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            widths: [8, 16, 32, 64],
            neck_channels: 16,
            levels: vec![3, 4, 5],
            depth_convs: 2,
            dck: Some(DckConfig {
                kernel_size: 5,
                groups: 4,
                reduction: 4,
                channels: 16,
            }),
            num_classes: Category::ALL.len(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let first = *self
            .levels
            .first()
            .ok_or_else(|| Error::invalid("model needs at least one level"))?;
        if !(2..=BACKBONE_STAGES as u32).contains(&first) {
            return Err(Error::invalid(format!(
                "lowest pyramid level must be in 2..={BACKBONE_STAGES}, got {first}"
            )));
        }
        if self.levels.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::invalid(format!(
                "pyramid levels must be contiguous, got {:?}",
                self.levels
            )));
        }
        let coarsest = 1usize << self.levels.last().expect("non-empty");
        if self.input_size < coarsest || self.input_size % coarsest != 0 {
            return Err(Error::invalid(format!(
                "input size {} must be a positive multiple of the coarsest stride {coarsest}",
                self.input_size
            )));
        }
        if self.widths.contains(&0) || self.neck_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.depth_convs < 1 {
            return Err(Error::invalid(
                "MSDP needs at least one depth-specific convolution (M >= 1)",
            ));
        }
        if let Some(dck) = &self.dck {
            dck.validate()?;
            if dck.channels != self.neck_channels {
                return Err(Error::invalid(format!(
                    "DCK channels {} must equal neck channels {}",
                    dck.channels, self.neck_channels
                )));
            }
        }
        Ok(())
    }

    pub fn stride(level: u32) -> usize {
        1 << level
    }

    /// Levels fed by a lateral connection from a backbone stage.
    fn lateral_levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.levels
            .iter()
            .copied()
            .filter(|&n| n as usize <= BACKBONE_STAGES)
    }

    fn top_lateral(&self) -> u32 {
        self.lateral_levels().last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelHead {
    pub msdp: MsdpLevel,
    pub dck: Option<DckParams>,
    pub tower: ConvBlock,
    pub obj: Conv,
    pub cls: Conv,
    pub bbox: Conv,
}

impl_module!(LevelHead {
    msdp,
    dck,
    tower,
    obj,
    cls,
    bbox
});

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub lateral: BTreeMap<u32, Conv>,
}

impl_module!(Neck { lateral });

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub backbone: Vec<ConvBlock>,
    pub neck: Neck,
    pub head: BTreeMap<u32, LevelHead>,
}

impl Module for ToyModel {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, s) in self.backbone.iter().enumerate() {
            s.params(&join(prefix, &format!("backbone.{}", i + 1)), out);
        }
        self.neck.params(&join(prefix, "neck"), out);
        self.head.params(&join(prefix, "head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, s) in self.backbone.iter_mut().enumerate() {
            s.params_mut(&join(prefix, &format!("backbone.{}", i + 1)), out);
        }
        self.neck.params_mut(&join(prefix, "neck"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}

/// Objectness prior: sigmoid(-4) ≈ 0.018.
const OBJ_PRIOR_LOGIT: f64 = -4.0;

/// Separate stream for DCK weights so shared parameters are identical with and
/// without modulation for the same seed.
const DCK_STREAM: u64 = 0x6463_6b5f_696e_6974;

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dck_rng = ChaCha8Rng::seed_from_u64(seed ^ DCK_STREAM);
        let mut c_in = 3;
        let mut backbone = Vec::with_capacity(BACKBONE_STAGES);
        for &w in &config.widths {
            backbone.push(ConvBlock::new(c_in, w, 3, 2, &mut rng));
            c_in = w;
        }
        let c = config.neck_channels;
        let lateral = config
            .lateral_levels()
            .map(|n| {
                (
                    n,
                    Conv::new(config.widths[n as usize - 1], c, 1, 1, &mut rng),
                )
            })
            .collect();
        let mut head = BTreeMap::new();
        for &n in &config.levels {
            let msdp = MsdpLevel::new(c, config.depth_convs, &mut rng)?;
            let tower = ConvBlock::new(c, c, 3, 1, &mut rng);
            let mut obj = Conv::new(c, 1, 1, 1, &mut rng);
            obj.weight = obj.weight.scale(0.1);
            obj.bias = Tensor::full(&[1], OBJ_PRIOR_LOGIT);
            let mut cls = Conv::new(c, config.num_classes, 1, 1, &mut rng);
            cls.weight = cls.weight.scale(0.1);
            let mut bbox = Conv::new(c, 4, 1, 1, &mut rng);
            bbox.weight = bbox.weight.scale(0.1);
            let dck = config
                .dck
                .as_ref()
                .map(|d| DckParams::new(d, &mut dck_rng))
                .transpose()?;
            head.insert(
                n,
                LevelHead {
                    msdp,
                    dck,
                    tower,
                    obj,
                    cls,
                    bbox,
                },
            );
        }
        Ok(Self {
            config,
            backbone,
            neck: Neck { lateral },
            head,
        })
    }

    pub fn forward(&self, image: &Tensor, mode: StatsMode) -> Result<ForwardPass> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!(
                "model expects input [3, {s}, {s}], got {:?}",
                image.shape()
            )));
        }
        let mut stage_caches = Vec::with_capacity(BACKBONE_STAGES);
        let mut stage_out = Vec::with_capacity(BACKBONE_STAGES);
        let mut x = image.clone();
        for block in &self.backbone {
            let (y, cache) = block.forward(&x, mode)?;
            stage_caches.push(cache);
            stage_out.push(y.clone());
            x = y;
        }
        let mut laterals = BTreeMap::new();
        for (&n, conv) in &self.neck.lateral {
            laterals.insert(n, conv.forward(&stage_out[n as usize - 1])?);
        }
        let mut pyramid: BTreeMap<u32, Tensor> = BTreeMap::new();
        let top = self.config.top_lateral();
        for n in self
            .config
            .lateral_levels()
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
        {
            let mut p = laterals[&n].clone();
            if n < top {
                p.add_assign(&upsample_nearest(&pyramid[&(n + 1)], 2)?)?;
            }
            pyramid.insert(n, p);
        }
        for &n in self.config.levels.iter().filter(|&&n| n > top) {
            let pooled = avg_pool2d(&pyramid[&(n - 1)], 2)?;
            pyramid.insert(n, pooled);
        }
        let mut heads = Vec::with_capacity(self.config.levels.len());
        let mut depth_preds = BTreeMap::new();
        let mut head_caches = BTreeMap::new();
        for &n in &self.config.levels {
            let h = &self.head[&n];
            let p = &pyramid[&n];
            let (d, depth_logit, msdp_cache) = h.msdp.forward(p, mode)?;
            let (y, dck) = match (&h.dck, &self.config.dck) {
                (Some(params), Some(cfg)) => {
                    let (field, gen) = dck_generate(&d, params, cfg, mode)?;
                    let y = p.add(&dck_modulate(p, &field, cfg)?)?;
                    (y, Some((field, gen)))
                }
                _ => (p.clone(), None),
            };
            let (t, tower) = h.tower.forward(&y, mode)?;
            heads.push(HeadOutput {
                objectness: h.obj.forward(&t)?,
                class_logits: h.cls.forward(&t)?,
                boxes: h.bbox.forward(&t)?,
            });
            depth_preds.insert(n, depth_logit.map(f64::exp));
            head_caches.insert(
                n,
                HeadCache {
                    msdp: msdp_cache,
                    depth_logit,
                    dck,
                    tower,
                    tower_out: t,
                },
            );
        }
        Ok(ForwardPass {
            heads,
            depth_preds,
            cache: ModelCache {
                input: image.clone(),
                stage_caches,
                stage_out,
                pyramid,
                heads: head_caches,
            },
        })
    }

    /// Parameter gradients given cotangents at the head outputs and at the
    /// predicted (positive) depth maps.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_heads: &[HeadOutput],
        grad_depth: &BTreeMap<u32, Tensor>,
    ) -> Result<ToyModel> {
        if grad_heads.len() != self.config.levels.len() {
            return Err(Error::shape(format!(
                "{} head gradients for {} levels",
                grad_heads.len(),
                self.config.levels.len()
            )));
        }
        let mut grads = self.zeros_like();
        let mut g_pyr: BTreeMap<u32, Tensor> = BTreeMap::new();
        for (&n, gh) in self.config.levels.iter().zip(grad_heads) {
            let h = &self.head[&n];
            let hc = &cache.heads[&n];
            let hg = grads.head.get_mut(&n).expect("same structure");
            let t = &hc.tower_out;
            let mut g_t = h.obj.backward(&gh.objectness, t, &mut hg.obj)?;
            g_t.add_assign(&h.cls.backward(&gh.class_logits, t, &mut hg.cls)?)?;
            g_t.add_assign(&h.bbox.backward(&gh.boxes, t, &mut hg.bbox)?)?;
            let g_y = h.tower.backward(&g_t, &hc.tower, &mut hg.tower)?;
            let p = &cache.pyramid[&n];
            let mut g_p = g_y.clone();
            let mut g_d = None;
            if let (Some(params), Some(cfg), Some((field, gen))) =
                (&h.dck, &self.config.dck, &hc.dck)
            {
                let (g_feat, g_field) = dck_modulate_backward(&g_y, p, field, cfg)?;
                g_p.add_assign(&g_feat)?;
                let pg = hg.dck.as_mut().expect("same structure");
                g_d = Some(dck_generate_backward(&g_field, gen, params, cfg, pg)?);
            }
            let g_logit = match grad_depth.get(&n) {
                Some(gd) => {
                    let pred = hc.depth_logit.map(f64::exp);
                    gd.same_shape(&pred, "depth gradient")?;
                    Some(Tensor::from_vec(
                        pred.shape(),
                        gd.data()
                            .iter()
                            .zip(pred.data())
                            .map(|(g, p)| g * p)
                            .collect(),
                    )?)
                }
                None => None,
            };
            g_p.add_assign(&h.msdp.backward(
                g_d.as_ref(),
                g_logit.as_ref(),
                &hc.msdp,
                &mut hg.msdp,
            )?)?;
            g_pyr.insert(n, g_p);
        }
        let top = self.config.top_lateral();
        for &n in self.config.levels.iter().rev().filter(|&&n| n > top) {
            let g = g_pyr.remove(&n).expect("level present");
            let shape = cache.pyramid[&(n - 1)].shape().to_vec();
            let back = avg_pool2d_backward(&g, &shape, 2)?;
            g_pyr
                .get_mut(&(n - 1))
                .expect("level present")
                .add_assign(&back)?;
        }
        let mut g_stage: Vec<Option<Tensor>> = vec![None; BACKBONE_STAGES];
        for n in self.config.lateral_levels().collect::<Vec<_>>() {
            let g = g_pyr.remove(&n).expect("level present");
            if n < top {
                let up = upsample_nearest_backward(&g, 2)?;
                g_pyr
                    .get_mut(&(n + 1))
                    .expect("level present")
                    .add_assign(&up)?;
            }
            let idx = n as usize - 1;
            let gl = self.neck.lateral[&n].backward(
                &g,
                &cache.stage_out[idx],
                grads.neck.lateral.get_mut(&n).expect("same structure"),
            )?;
            g_stage[idx] = Some(gl);
        }
        let mut carry: Option<Tensor> = None;
        for idx in (0..BACKBONE_STAGES).rev() {
            let mut g = match (carry.take(), g_stage[idx].take()) {
                (Some(a), Some(b)) => a.add(&b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            g = self.backbone[idx].backward(
                &g,
                &cache.stage_caches[idx],
                &mut grads.backbone[idx],
            )?;
            if idx > 0 {
                carry = Some(g);
            }
        }
        Ok(grads)
    }

    /// Folds this pass's batch statistics into the running buffers of every
    /// norm whose parameter prefix is not frozen.
    pub fn absorb_stats(&mut self, cache: &ModelCache, frozen: &dyn Fn(&str) -> bool) {
        let absorb = |name: String, norm: &mut crate::layers::Norm, c: &NormCache| {
            if !frozen(&format!("{name}.gamma")) {
                norm.absorb(c);
            }
        };
        for (i, (block, c)) in self
            .backbone
            .iter_mut()
            .zip(&cache.stage_caches)
            .enumerate()
        {
            absorb(
                format!("backbone.{}.norm", i + 1),
                &mut block.norm,
                c.norm(),
            );
        }
        for (&n, h) in self.head.iter_mut() {
            let hc = &cache.heads[&n];
            for (b, (block, c)) in h
                .msdp
                .blocks
                .iter_mut()
                .zip(hc.msdp.block_caches())
                .enumerate()
            {
                absorb(
                    format!("head.p{n}.msdp.blocks.{b}.norm"),
                    &mut block.norm,
                    c.norm(),
                );
            }
            if let (Some(p), Some((_, gen))) = (h.dck.as_mut(), &hc.dck) {
                absorb(format!("head.p{n}.dck.norm"), &mut p.norm, gen.norm());
            }
            absorb(
                format!("head.p{n}.tower.norm"),
                &mut h.tower.norm,
                hc.tower.norm(),
            );
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_list()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    msdp: MsdpLevelCache,
    depth_logit: Tensor,
    dck: Option<(KernelField, DckGenCache)>,
    tower: ConvBlockCache,
    tower_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    input: Tensor,
    stage_caches: Vec<ConvBlockCache>,
    stage_out: Vec<Tensor>,
    pyramid: BTreeMap<u32, Tensor>,
    heads: BTreeMap<u32, HeadCache>,
}

impl ModelCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub heads: Vec<HeadOutput>,
    /// Positive depth predictions per level, `[1, H, W]`.
    pub depth_preds: BTreeMap<u32, Tensor>,
    pub cache: ModelCache,
}

/// Level for a box of the given size (input pixels): the finest level whose
/// stride times four covers the longer side, else the coarsest.
pub fn assign_level(levels: &[u32], w: f64, h: f64) -> u32 {
    let side = w.max(h);
    for &n in levels {
        if side <= 4.0 * ModelConfig::stride(n) as f64 {
            return n;
        }
    }
    *levels.last().expect("non-empty levels")
}

/// Center-cell targets per level; a cell already claimed keeps its first
/// (larger) object.
pub fn encode_targets(config: &ModelConfig, boxes: &[(usize, BBox)]) -> Vec<LevelTargets> {
    let s = config.input_size;
    let mut targets: BTreeMap<u32, LevelTargets> = config
        .levels
        .iter()
        .map(|&n| {
            let g = s / ModelConfig::stride(n);
            (n, LevelTargets::empty(g, g))
        })
        .collect();
    let mut order: Vec<&(usize, BBox)> = boxes.iter().collect();
    order.sort_by(|a, b| (b.1[2] * b.1[3]).total_cmp(&(a.1[2] * a.1[3])));
    for &(category, [x, y, w, h]) in order {
        let n = assign_level(&config.levels, w, h);
        let stride = ModelConfig::stride(n) as f64;
        let t = targets.get_mut(&n).expect("level present");
        let (cx, cy) = ((x + w / 2.0) / stride, (y + h / 2.0) / stride);
        let j = (cx.floor() as usize).min(t.width - 1);
        let i = (cy.floor() as usize).min(t.height - 1);
        let cell = &mut t.cells[i * t.width + j];
        if cell.is_none() {
            *cell = Some(CellTarget {
                category,
                offsets: [
                    cx - (j as f64 + 0.5),
                    cy - (i as f64 + 0.5),
                    (w / stride).ln(),
                    (h / stride).ln(),
                ],
            });
        }
    }
    targets.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Boxes in input pixels, sorted by descending score after class-wise NMS.
pub fn decode(config: &ModelConfig, heads: &[HeadOutput], opts: &DecodeConfig) -> Vec<Decoded> {
    let s = config.input_size as f64;
    let mut cands = Vec::new();
    for (&n, out) in config.levels.iter().zip(heads) {
        let stride = ModelConfig::stride(n) as f64;
        let (_, h, w) = out.objectness.dims3().expect("head layout");
        let nc = out.class_logits.shape()[0];
        let hw = h * w;
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let obj = sigmoid(out.objectness.data()[cell]);
                let (cat, cls) = (0..nc)
                    .map(|c| (c, out.class_logits.data()[c * hw + cell]))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .expect("classes");
                let score = obj * sigmoid(cls);
                if score < opts.score_threshold {
                    continue;
                }
                let bx = &out.boxes.data()[..];
                let cx = (j as f64 + 0.5 + bx[cell]) * stride;
                let cy = (i as f64 + 0.5 + bx[hw + cell]) * stride;
                let bw = bx[2 * hw + cell].clamp(-6.0, 6.0).exp() * stride;
                let bh = bx[3 * hw + cell].clamp(-6.0, 6.0).exp() * stride;
                let x0 = (cx - bw / 2.0).clamp(0.0, s);
                let y0 = (cy - bh / 2.0).clamp(0.0, s);
                let x1 = (cx + bw / 2.0).clamp(0.0, s);
                let y1 = (cy + bh / 2.0).clamp(0.0, s);
                if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                    continue;
                }
                cands.push(Decoded {
                    category: cat,
                    bbox: [x0, y0, x1 - x0, y1 - y0],
                    score,
                });
            }
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Decoded> = Vec::new();
    for c in cands {
        if kept.len() >= opts.max_detections {
            break;
        }
        if kept
            .iter()
            .all(|k| k.category != c.category || iou(&k.bbox, &c.bbox) <= opts.nms_iou)
        {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            widths: [2, 3, 4, 4],
            neck_channels: 4,
            levels: vec![3, 4, 5],
            depth_convs: 1,
            dck: Some(DckConfig {
                kernel_size: 3,
                groups: 2,
                reduction: 2,
                channels: 4,
            }),
            num_classes: 3,
        }
    }

    #[test]
    fn names_are_stage_prefixed_and_unique() {
        let m = ToyModel::new(small(), 1).unwrap();
        let names: Vec<String> = m.param_list().into_iter().map(|p| p.name).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        for s in 1..=4 {
            assert!(names
                .iter()
                .any(|n| n.starts_with(&format!("backbone.{s}."))));
        }
        assert!(names.iter().all(|n| n.starts_with("backbone.")
            || n.starts_with("neck.")
            || n.starts_with("head.")));
        assert!(names.contains(&"head.p3.dck.w2".to_string()));
    }

    #[test]
    fn shared_parameters_do_not_depend_on_dck() {
        let a = ToyModel::new(small(), 7).unwrap();
        let b = ToyModel::new(
            ModelConfig {
                dck: None,
                ..small()
            },
            7,
        )
        .unwrap();
        let pb: BTreeMap<String, Vec<f64>> = b
            .param_list()
            .into_iter()
            .map(|p| (p.name, p.data.to_vec()))
            .collect();
        for p in a.param_list() {
            if let Some(v) = pb.get(&p.name) {
                assert_eq!(v.as_slice(), p.data, "{}", p.name);
            } else {
                assert!(p.name.contains(".dck."));
            }
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = small();
        let m = ToyModel::new(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let out = m.forward(&x, StatsMode::Batch).unwrap();
        let sides: Vec<usize> = out.heads.iter().map(|h| h.objectness.shape()[1]).collect();
        assert_eq!(sides, vec![4, 2, 1]);
        assert_eq!(out.depth_preds[&5].shape(), &[1, 1, 1]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let cfg = ModelConfig::default();
        let boxes = vec![
            (1usize, [10.0, 20.0, 24.0, 10.0]),
            (2usize, [40.0, 50.0, 60.0, 20.0]),
        ];
        let targets = encode_targets(&cfg, &boxes);
        assert_eq!(
            targets.iter().map(LevelTargets::positives).sum::<usize>(),
            2
        );
        let heads: Vec<HeadOutput> = cfg
            .levels
            .iter()
            .zip(&targets)
            .map(|(_, t)| {
                let hw = t.height * t.width;
                let mut obj = vec![-20.0; hw];
                let mut cls = vec![-20.0; 3 * hw];
                let mut bx = vec![0.0; 4 * hw];
                for (cell, c) in t.cells.iter().enumerate() {
                    if let Some(c) = c {
                        obj[cell] = 20.0;
                        cls[c.category * hw + cell] = 20.0;
                        for k in 0..4 {
                            bx[k * hw + cell] = c.offsets[k];
                        }
                    }
                }
                HeadOutput {
                    objectness: Tensor::from_vec(&[1, t.height, t.width], obj).unwrap(),
                    class_logits: Tensor::from_vec(&[3, t.height, t.width], cls).unwrap(),
                    boxes: Tensor::from_vec(&[4, t.height, t.width], bx).unwrap(),
                }
            })
            .collect();
        let dets = decode(&cfg, &heads, &DecodeConfig::default());
        assert_eq!(dets.len(), 2);
        for (cat, b) in &boxes {
            assert!(dets
                .iter()
                .any(|d| d.category == *cat && iou(&d.bbox, b) > 0.999));
        }
    }
}
