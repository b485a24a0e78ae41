//! Staged training: freeze masks, SGD with momentum and weight decay, single
//! stages over a manifest, and the two-stage domain fine-tuning schedule.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::losses::{detection_loss, sir_loss, total_loss, RefurbishConfig};
use crate::model::{ModelCache, ToyModel};
use crate::params::Module;
use crate::pipeline::{boxes_by_image, load_sample, Sample, SampleOptions};
use crate::tensor::StatsMode;

pub const MOMENTUM: f64 = 0.938;
pub const WEIGHT_DECAY: f64 = 1e-4;
pub const BASE_LR: f64 = 0.02;
pub const GAMMA: f64 = 0.1;
pub const FROZEN_STAGES: usize = 3;

fn matches_prefix(name: &str, prefix: &str) -> bool {
    if prefix.ends_with('.') {
        name.starts_with(prefix)
    } else {
        name == prefix
            || name
                .strip_prefix(prefix)
                .is_some_and(|rest| rest.starts_with('.'))
    }
}

/// One flag per entry of `model.param_list()`. A prefix matches whole dotted
/// segments (`backbone.1` does not match `backbone.10`); a trailing dot
/// matches anything under it.
pub fn freeze_mask<M: Module>(model: &M, prefixes: &[String]) -> Result<Vec<bool>> {
    let names: Vec<String> = model.param_list().into_iter().map(|p| p.name).collect();
    for p in prefixes {
        if !names.iter().any(|n| matches_prefix(n, p)) {
            return Err(Error::invalid(format!(
                "freeze prefix {p:?} matches no parameter"
            )));
        }
    }
    Ok(names
        .iter()
        .map(|n| prefixes.iter().any(|p| matches_prefix(n, p)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← m·v + g + wd·p; p ← p − lr·v` on trainable, unmasked entries.
/// Rejects the whole step if any such gradient is non-finite.
pub fn sgd_step<M: Module>(
    params: &mut M,
    grads: &M,
    velocity: &mut M,
    opts: &SgdConfig,
    mask: &[bool],
) -> Result<()> {
    let gl = grads.param_list();
    if gl.len() != mask.len() {
        return Err(Error::shape(format!(
            "mask has {} flags for {} tensors",
            mask.len(),
            gl.len()
        )));
    }
    for (g, &frozen) in gl.iter().zip(mask) {
        if frozen || !g.trainable {
            continue;
        }
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite gradient in {} at flat index {i}; step rejected",
                g.name
            )));
        }
    }
    let mut pl = params.param_list_mut();
    let mut vl = velocity.param_list_mut();
    if pl.len() != gl.len() || vl.len() != gl.len() {
        return Err(Error::shape(
            "params, grads and velocity differ in structure",
        ));
    }
    for (((p, g), v), &frozen) in pl.iter_mut().zip(&gl).zip(vl.iter_mut()).zip(mask) {
        if frozen || !p.trainable {
            continue;
        }
        if p.data.len() != g.data.len() || v.data.len() != g.data.len() {
            return Err(Error::shape(format!("tensor {} differs in size", p.name)));
        }
        for ((pv, &gv), vv) in p.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
            *vv = opts.momentum * *vv + gv + opts.weight_decay * *pv;
            *pv -= opts.lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Label for logs, e.g. `sim` or `real`.
    pub dataset: String,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub frozen_prefixes: Vec<String>,
    pub batch_size: usize,
    pub seed: u64,
    pub refurbish: RefurbishConfig,
    pub depth_noise_variance: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            dataset: "train".into(),
            epochs: 1,
            lr: BASE_LR,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            frozen_prefixes: Vec::new(),
            batch_size: 2,
            seed: 0,
            refurbish: RefurbishConfig::default(),
            depth_noise_variance: 0.0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "momentum must be in [0,1) and weight decay >= 0",
            ));
        }
        if !(self.depth_noise_variance >= 0.0) {
            return Err(Error::invalid("depth noise variance must be >= 0"));
        }
        self.refurbish.validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Scalars held fixed by the freeze mask.
    pub frozen_param_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub detection: f64,
    pub depth: f64,
}

/// Loss and parameter gradients for one sample; also returns the forward
/// cache so the caller can fold batch statistics.
pub fn sample_gradients(
    model: &ToyModel,
    sample: &Sample,
    refurbish: &RefurbishConfig,
) -> Result<(SampleLoss, ToyModel, ModelCache)> {
    let fp = model.forward(&sample.image, StatsMode::Batch)?;
    let det = detection_loss(&fp.heads, &sample.targets)?;
    let mut grad_depth = BTreeMap::new();
    let mut depth = 0.0;
    if !sample.depth.is_empty() {
        let levels = sample.depth.len() as f64;
        for (n, target) in &sample.depth {
            let pred = fp
                .depth_preds
                .get(n)
                .ok_or_else(|| Error::shape(format!("no depth prediction at level {n}")))?;
            let (l, g) = sir_loss(pred, target, refurbish.alpha)?;
            depth += l / levels;
            grad_depth.insert(*n, g.scale(refurbish.loss_weight / levels));
        }
    }
    let grads = model.backward(&fp.cache, &det.grads, &grad_depth)?;
    let loss = SampleLoss {
        total: total_loss(det.total, depth, refurbish.loss_weight),
        detection: det.total,
        depth,
    };
    Ok((loss, grads, fp.cache))
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: ToyModel,
    pub log: Vec<EpochLog>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    idx.shuffle(&mut rng);
    idx
}

/// `epochs` passes of seeded-shuffled batches over `manifest`.
pub fn run_stage(
    model: &ToyModel,
    manifest: &Manifest,
    base_dir: &Path,
    stage: &StageConfig,
) -> Result<StageOutcome> {
    stage.validate()?;
    if manifest.images.is_empty() {
        return Err(Error::invalid("training manifest has no images"));
    }
    let mut model = model.clone();
    let mask = freeze_mask(&model, &stage.frozen_prefixes)?;
    let frozen_param_count = model
        .param_list()
        .iter()
        .zip(&mask)
        .filter(|(p, &m)| m && p.trainable)
        .map(|(p, _)| p.data.len())
        .sum();
    let frozen_names: Vec<String> = model
        .param_list()
        .into_iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.name)
        .collect();
    let is_frozen = |name: &str| frozen_names.iter().any(|n| n == name);
    let boxes = boxes_by_image(manifest);
    let mut velocity = model.zeros_like();
    let opts = SampleOptions {
        depth_noise_variance: stage.depth_noise_variance,
        seed: stage.seed,
    };
    let mut log = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let order = epoch_order(manifest.images.len(), stage.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(stage.batch_size) {
            let mut acc: Option<ToyModel> = None;
            for &i in batch {
                let rec = &manifest.images[i];
                let sample = load_sample(
                    rec,
                    boxes.get(&rec.id).map_or(&[][..], Vec::as_slice),
                    base_dir,
                    &model.config,
                    &opts,
                )?;
                let (loss, grads, cache) = sample_gradients(&model, &sample, &stage.refurbish)?;
                if !loss.total.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite loss on image {} in epoch {epoch}",
                        rec.id
                    )));
                }
                loss_sum += loss.total;
                model.absorb_stats(&cache, &is_frozen);
                match acc.as_mut() {
                    Some(a) => a.accumulate(&grads),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale_all(1.0 / batch.len() as f64);
            sgd_step(&mut model, &grads, &mut velocity, &stage.sgd(), &mask)?;
        }
        log.push(EpochLog {
            stage: stage.dataset.clone(),
            epoch: epoch + 1,
            lr: stage.lr,
            mean_loss: loss_sum / manifest.images.len() as f64,
            frozen_param_count,
        });
    }
    Ok(StageOutcome { model, log })
}

pub fn backbone_prefixes(stages: std::ops::RangeInclusive<usize>) -> Vec<String> {
    stages.map(|s| format!("backbone.{s}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdftConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub gamma: f64,
    pub k: usize,
}

impl PdftConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage2.lr != self.stage1.lr * self.gamma {
            return Err(Error::invalid(format!(
                "stage-2 lr {} must equal stage-1 lr {} times gamma {}",
                self.stage2.lr, self.stage1.lr, self.gamma
            )));
        }
        if !(1..=4).contains(&self.k) {
            return Err(Error::invalid(format!(
                "k must be in 1..=4, got {}",
                self.k
            )));
        }
        if self.stage1.frozen_prefixes != backbone_prefixes(1..=1) {
            return Err(Error::invalid(
                "stage 1 must freeze exactly backbone stage 1",
            ));
        }
        if self.stage2.frozen_prefixes != backbone_prefixes(1..=self.k) {
            return Err(Error::invalid(format!(
                "stage 2 must freeze backbone stages 1..={}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Compact form of a fine-tuning schedule from which both stages derive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdftSettings {
    pub lr: f64,
    pub gamma: f64,
    pub k: usize,
    pub epochs_sim: usize,
    pub epochs_real: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub refurbish: RefurbishConfig,
    pub depth_noise_variance: f64,
}

impl Default for PdftSettings {
    fn default() -> Self {
        Self {
            lr: BASE_LR,
            gamma: GAMMA,
            k: FROZEN_STAGES,
            epochs_sim: 1,
            epochs_real: 1,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            batch_size: 2,
            seed: 0,
            refurbish: RefurbishConfig::default(),
            depth_noise_variance: 0.0,
        }
    }
}

impl PdftSettings {
    pub fn derive(&self) -> Result<PdftConfig> {
        let base = StageConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            refurbish: self.refurbish,
            depth_noise_variance: self.depth_noise_variance,
            ..StageConfig::default()
        };
        let cfg = PdftConfig {
            stage1: StageConfig {
                dataset: "sim".into(),
                epochs: self.epochs_sim,
                lr: self.lr,
                frozen_prefixes: backbone_prefixes(1..=1),
                seed: self.seed,
                ..base.clone()
            },
            stage2: StageConfig {
                dataset: "real".into(),
                epochs: self.epochs_real,
                lr: self.lr * self.gamma,
                frozen_prefixes: backbone_prefixes(1..=self.k.max(1)),
                seed: self.seed.wrapping_add(1),
                ..base
            },
            gamma: self.gamma,
            k: self.k,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct PdftOutcome {
    pub stage1: ToyModel,
    pub stage2: ToyModel,
    pub log: Vec<EpochLog>,
}

pub fn pdft(
    model0: &ToyModel,
    sim: (&Manifest, &Path),
    real: (&Manifest, &Path),
    config: &PdftConfig,
) -> Result<PdftOutcome> {
    config.validate()?;
    let s1 = run_stage(model0, sim.0, sim.1, &config.stage1)?;
    let s2 = run_stage(&s1.model, real.0, real.1, &config.stage2)?;
    let mut log = s1.log;
    log.extend(s2.log);
    Ok(PdftOutcome {
        stage1: s1.model,
        stage2: s2.model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[derive(Clone, Debug, PartialEq)]
    pub struct Params(pub Vec<Tensor>);

    impl Module for Params {
        fn params<'a>(&'a self, prefix: &str, out: &mut Vec<crate::params::ParamView<'a>>) {
            self.0.params(prefix, out);
        }

        fn params_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<crate::params::ParamViewMut<'a>>,
        ) {
            self.0.params_mut(prefix, out);
        }
    }

    fn one(v: f64) -> Params {
        Params(vec![Tensor::full(&[1], v)])
    }

    fn no_momentum(lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = one(1.0);
        let mut v = one(0.0);
        sgd_step(&mut p, &one(0.5), &mut v, &no_momentum(0.1), &[false]).unwrap();
        assert!((p.0[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn masked_entries_untouched() {
        let mut p = one(1.0);
        let mut v = one(0.25);
        sgd_step(&mut p, &one(9.0), &mut v, &no_momentum(0.1), &[true]).unwrap();
        assert_eq!(p, one(1.0));
        assert_eq!(v, one(0.25));
    }

    #[test]
    fn zero_lr_still_accumulates_velocity() {
        let mut p = one(1.0);
        let mut v = one(0.0);
        sgd_step(&mut p, &one(0.5), &mut v, &no_momentum(0.0), &[false]).unwrap();
        assert_eq!(p, one(1.0));
        assert_eq!(v, one(0.5));
    }

    #[test]
    fn nan_gradient_rejected_without_change() {
        let mut p = one(1.0);
        let mut v = one(0.0);
        let err =
            sgd_step(&mut p, &one(f64::NAN), &mut v, &no_momentum(0.1), &[false]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(p, one(1.0));
    }

    #[test]
    fn freeze_masks() {
        let m = ToyModel::new(ModelConfig::default(), 0).unwrap();
        let names: Vec<String> = m.param_list().into_iter().map(|p| p.name).collect();
        assert!(freeze_mask(&m, &[]).unwrap().iter().all(|&f| !f));
        let all_bb = freeze_mask(&m, &["backbone.".into()]).unwrap();
        for (n, f) in names.iter().zip(&all_bb) {
            assert_eq!(*f, n.starts_with("backbone."));
        }
        let k3 = freeze_mask(&m, &backbone_prefixes(1..=3)).unwrap();
        for (n, f) in names.iter().zip(&k3) {
            let stage_1_3 = ["backbone.1.", "backbone.2.", "backbone.3."]
                .iter()
                .any(|p| n.starts_with(p));
            assert_eq!(*f, stage_1_3, "{n}");
        }
        assert!(freeze_mask(&m, &["backbone.9".into()]).is_err());
        assert!(freeze_mask(&m, &["backbon".into()]).is_err());
    }

    #[test]
    fn derived_schedule() {
        let cfg = PdftSettings::default().derive().unwrap();
        assert_eq!(cfg.stage2.lr, 0.002);
        assert!(cfg
            .stage1
            .frozen_prefixes
            .iter()
            .all(|p| cfg.stage2.frozen_prefixes.contains(p)));
        let mut bad = cfg.clone();
        bad.stage2.lr = 0.0021;
        assert!(bad.validate().is_err());
    }
}
