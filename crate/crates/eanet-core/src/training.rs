//! Two-phase offline training: each attribute branch is trained on its own
//! subset of sequences first, then the trained branches are frozen and the
//! aggregation stage plus a fresh FC stack are refined on all data.
//!
//! Optimizer: SGD with momentum and weight decay. Freezing is exact: frozen
//! tensors are never touched by the update step, so they stay bit-identical,
//! not merely close.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD};
use rand::prelude::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_patch, Patch};
use crate::checkpoint::Checkpoint;
use crate::datasets::{EvalAttributeId, Sequence};
use crate::error::{Error, Result};
use crate::fusion::{AttributeId, FusionMode};
use crate::geometry::{BoundingBox, SampleSpec};
use crate::head::{
    bce_loss, bce_loss_grad, concat_features, hard_negative_mining, head_backward,
    head_forward_batch, head_scores, split_feature_grad, HeadGrads, HeadParams,
};
use crate::model::{ModelGrads, ModelParams};
use crate::params::{export, ParamBundle};

/// Training samples are the sample box itself, no context padding.
pub const PATCH_CONTEXT: f64 = 1.0;

/// Positive samples must overlap ground truth at least this much.
pub const POS_IOU_LO: f64 = 0.7;
/// Negative samples must overlap ground truth at most this much.
pub const NEG_IOU_HI: f64 = 0.5;

/// Proposal spread for positive samples (tight around ground truth).
const POS_SIGMA: (f64, f64) = (0.1, 0.1);
/// Proposal spread for negative samples (broad, mostly off-target).
const NEG_SIGMA: (f64, f64) = (1.0, 0.5);

/// Hyperparameters for one training phase.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// 1 trains one branch; 2 trains aggregation + FC on frozen branches.
    pub phase: u8,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Learning rate for newly introduced layers (branches, aggregation, FC).
    pub lr_new: f64,
    /// Learning rate for pre-initialized layers. Both stock phases freeze
    /// the backbone outright, so this applies only if a caller unfreezes it.
    pub lr_pretrained: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pos_per_iter: usize,
    pub neg_per_iter: usize,
    /// Frames drawn per iteration from the active domain.
    pub frames_per_iter: usize,
    /// Negatives drawn before mining; scores keep the top `neg_per_iter`.
    /// Equal to `neg_per_iter` disables mining.
    pub neg_pool: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn phase1() -> Self {
        TrainConfig {
            phase: 1,
            epochs: 100,
            iterations_per_epoch: 100,
            lr_new: 1e-3,
            lr_pretrained: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            pos_per_iter: 32,
            neg_per_iter: 96,
            frames_per_iter: 8,
            neg_pool: 1024,
            seed: 0,
        }
    }

    pub fn phase2() -> Self {
        TrainConfig {
            phase: 2,
            epochs: 500,
            ..Self::phase1()
        }
    }

    pub fn iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("pos_per_iter", self.pos_per_iter),
            ("neg_per_iter", self.neg_per_iter),
            ("frames_per_iter", self.frames_per_iter),
            ("neg_pool", self.neg_pool),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::UnknownName {
                    what: "zero training setting",
                    value: what.to_string(),
                });
            }
        }
        if self.phase != 1 && self.phase != 2 {
            return Err(Error::UnknownName {
                what: "training phase",
                value: self.phase.to_string(),
            });
        }
        if self.neg_pool < self.neg_per_iter {
            return Err(Error::TopKOutOfRange {
                k: self.neg_per_iter,
                len: self.neg_pool,
            });
        }
        let finite_positive = [
            ("lr_new", self.lr_new),
            ("lr_pretrained", self.lr_pretrained),
        ];
        for (what, v) in finite_positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::UnknownName {
                    what: "non-positive learning rate",
                    value: what.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Key=value summary, one setting per line, stable order.
    pub fn summary(&self) -> String {
        format!(
            "phase={}\nepochs={}\niterations_per_epoch={}\nlr_new={}\nlr_pretrained={}\n\
             momentum={}\nweight_decay={}\npos_per_iter={}\nneg_per_iter={}\n\
             frames_per_iter={}\nneg_pool={}\nseed={}\n",
            self.phase,
            self.epochs,
            self.iterations_per_epoch,
            self.lr_new,
            self.lr_pretrained,
            self.momentum,
            self.weight_decay,
            self.pos_per_iter,
            self.neg_per_iter,
            self.frames_per_iter,
            self.neg_pool,
            self.seed
        )
    }
}

/// Sequence flags that qualify a sequence as training data for a branch.
pub fn qualifying_flags(attr: AttributeId) -> &'static [EvalAttributeId] {
    match attr {
        AttributeId::ThermalCrossover => &[EvalAttributeId::Tc],
        AttributeId::IlluminationVariation => &[EvalAttributeId::Li],
        AttributeId::ScaleVariation => &[EvalAttributeId::Sv],
        AttributeId::Occlusion => &[EvalAttributeId::Ho, EvalAttributeId::Po],
        AttributeId::FastMotion => &[EvalAttributeId::Fm],
    }
}

/// Stable-order subset of `sequences` qualifying for `attr`'s branch.
pub fn sequences_for_attribute<'a>(
    sequences: &'a [Sequence],
    attr: AttributeId,
) -> Vec<&'a Sequence> {
    sequences
        .iter()
        .filter(|s| qualifying_flags(attr).iter().any(|f| s.has_attribute(*f)))
        .collect()
}

/// One training minibatch: patch pairs, positives first, and the FC6 domain
/// they belong to.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub patches: Vec<(Patch, Patch)>,
    /// 1 per positive, 0 per negative, aligned with `patches`.
    pub labels: Vec<usize>,
    pub domain: usize,
}

/// Spread `total` samples over `parts` buckets, remainder to the front.
fn spread(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn features_for(
    model: &ModelParams,
    mode: FusionMode,
    patches: &[(Patch, Patch)],
) -> Result<Array2<f64>> {
    let mut features = Array2::<f64>::zeros((patches.len(), model.config.feature_len()));
    for (i, (rgb, tir)) in patches.iter().enumerate() {
        let (r, t, _) = model.fused_forward(rgb, tir, mode)?;
        let f = concat_features(&r, &t)?;
        features.row_mut(i).assign(&f);
    }
    Ok(features)
}

/// Build one minibatch from `frames_per_iter` random annotated frames of
/// domain `domain`: `pos_per_iter` positives (IoU >= 0.7), `neg_pool`
/// negatives (IoU <= 0.5) reduced to the `neg_per_iter` hardest under the
/// current model. Domains shorter than `frames_per_iter` are sampled with
/// replacement.
pub fn make_minibatch(
    data: &[Sequence],
    domain: usize,
    model: &ModelParams,
    mode: FusionMode,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Minibatch> {
    let seq = data.get(domain).ok_or(Error::DomainOutOfRange {
        index: domain,
        count: data.len(),
    })?;
    let annotated: Vec<(usize, BoundingBox)> = seq
        .ground_truth()
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (i, b)))
        .collect();
    if annotated.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let chosen: Vec<(usize, BoundingBox)> = if annotated.len() >= config.frames_per_iter {
        annotated
            .choose_multiple(rng, config.frames_per_iter)
            .copied()
            .collect()
    } else {
        (0..config.frames_per_iter)
            .map(|_| annotated[rng.random_range(0..annotated.len())])
            .collect()
    };

    let pos_counts = spread(config.pos_per_iter, chosen.len());
    let neg_counts = spread(config.neg_pool, chosen.len());
    let mut pos_patches = Vec::with_capacity(config.pos_per_iter);
    let mut neg_patches = Vec::with_capacity(config.neg_pool);
    for ((frame_idx, gt), (n_pos, n_neg)) in
        chosen.iter().zip(pos_counts.iter().zip(&neg_counts))
    {
        let pair = seq.frame(*frame_idx)?;
        let (h, w, _) = pair.rgb.dim();
        let bounds = (w, h);
        let pos_spec = SampleSpec::new(*n_pos, POS_SIGMA.0, POS_SIGMA.1, rng.random());
        let neg_spec = SampleSpec::new(*n_neg, NEG_SIGMA.0, NEG_SIGMA.1, rng.random());
        for b in crate::geometry::sample_by_iou(gt, *n_pos, POS_IOU_LO, 1.0, &pos_spec, bounds)? {
            pos_patches.push((
                extract_patch(&pair.rgb, &b, PATCH_CONTEXT)?,
                extract_patch(&pair.tir, &b, PATCH_CONTEXT)?,
            ));
        }
        for b in crate::geometry::sample_by_iou(gt, *n_neg, 0.0, NEG_IOU_HI, &neg_spec, bounds)? {
            neg_patches.push((
                extract_patch(&pair.rgb, &b, PATCH_CONTEXT)?,
                extract_patch(&pair.tir, &b, PATCH_CONTEXT)?,
            ));
        }
    }

    if neg_patches.len() > config.neg_per_iter {
        let features = features_for(model, mode, &neg_patches)?;
        let scores = head_scores(&features, &model.head, domain)?;
        let keep = hard_negative_mining(&scores.to_vec(), config.neg_per_iter)?;
        neg_patches = keep.into_iter().map(|i| neg_patches[i].clone()).collect();
    }

    let labels: Vec<usize> = std::iter::repeat_n(1, pos_patches.len())
        .chain(std::iter::repeat_n(0, neg_patches.len()))
        .collect();
    pos_patches.extend(neg_patches);
    Ok(Minibatch {
        patches: pos_patches,
        labels,
        domain,
    })
}

fn add_bundle(map: &mut BTreeMap<String, ArrayD<f64>>, prefix: &str, bundle: &dyn ParamBundle) {
    for (name, arr) in export(bundle) {
        let key = format!("{prefix}{name}");
        match map.get_mut(&key) {
            Some(dst) => *dst += &arr,
            None => {
                map.insert(key, arr);
            }
        }
    }
}

/// Flatten per-level gradients into the model's parameter namespace.
fn accumulate_model_grads(map: &mut BTreeMap<String, ArrayD<f64>>, grads: &ModelGrads) {
    for (lvl, g) in grads.levels.iter().enumerate() {
        add_bundle(map, &format!("backbone.rgb.conv{}.", lvl + 1), &g.rgb_conv);
        add_bundle(map, &format!("backbone.tir.conv{}.", lvl + 1), &g.tir_conv);
        for (bi, bg) in &g.branches {
            add_bundle(
                map,
                &format!("fusion{}.branch.{}.", lvl + 1, AttributeId::ALL[*bi].code()),
                bg,
            );
        }
        if let Some(agg) = &g.aggregation {
            add_bundle(map, &format!("fusion{}.agg.", lvl + 1), agg);
        }
    }
}

fn accumulate_head_grads(map: &mut BTreeMap<String, ArrayD<f64>>, hg: &HeadGrads) {
    add_bundle(map, "head.fc4.", &hg.fc4);
    add_bundle(map, "head.fc5.", &hg.fc5);
    add_bundle(map, &format!("head.fc6.{}.", hg.domain), &hg.fc6);
}

/// SGD with momentum and weight decay over a named parameter map. Parameters
/// for which `lr_for` returns `None` are frozen and never written.
pub struct Sgd {
    velocity: BTreeMap<String, ArrayD<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: BTreeMap::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        model: &mut dyn ParamBundle,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr_for: &dyn Fn(&str) -> Option<f64>,
    ) {
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        model.for_each_mut(&mut |name, mut param| {
            let Some(lr) = lr_for(name) else { return };
            let Some(g) = grads.get(name) else { return };
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(param.shape().to_vec()));
            ndarray::Zip::from(&mut *v)
                .and(g)
                .and(&param.view())
                .for_each(|v, g, p| *v = momentum * *v - lr * (g + wd * p));
            param.zip_mut_with(v, |p, v| *p += v);
        });
    }
}

/// Loss trace and final checkpoint of one training phase.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One loss value per iteration.
    pub losses: Vec<f64>,
}

fn train_loop(
    model: &mut ModelParams,
    data: &[Sequence],
    mode: FusionMode,
    lr_for: &dyn Fn(&str) -> Option<f64>,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let feat_shape = model.config.feature_shape();
    let mut losses = Vec::with_capacity(config.iterations());
    for iter in 0..config.iterations() {
        let domain = iter % data.len();
        let batch = make_minibatch(data, domain, model, mode, config, &mut rng)?;

        let mut features = Array2::<f64>::zeros((batch.patches.len(), model.config.feature_len()));
        let mut caches = Vec::with_capacity(batch.patches.len());
        for (i, (rgb, tir)) in batch.patches.iter().enumerate() {
            let (r, t, cache) = model.fused_forward(rgb, tir, mode)?;
            features.row_mut(i).assign(&concat_features(&r, &t)?);
            caches.push(cache);
        }
        let (logits, head_cache) = head_forward_batch(&features, &model.head, domain, Some(&mut rng))?;
        losses.push(bce_loss(&logits, &batch.labels)?);

        let g_logits = bce_loss_grad(&logits, &batch.labels)?;
        let (g_features, head_grads) = head_backward(&model.head, &head_cache, &g_logits);
        let mut grads = BTreeMap::new();
        accumulate_head_grads(&mut grads, &head_grads);
        for (i, cache) in caches.iter().enumerate() {
            let (g_rgb, g_tir) = split_feature_grad(&g_features.row(i).to_owned(), feat_shape);
            let model_grads = model.fused_backward(cache, &g_rgb, &g_tir);
            accumulate_model_grads(&mut grads, &model_grads);
        }
        opt.step(model, &grads, lr_for);
    }
    Ok(losses)
}

fn finish_checkpoint(
    model: &ModelParams,
    config: &TrainConfig,
    keep_fc6: bool,
    extra: &[(&str, String)],
) -> Checkpoint {
    let mut ckpt = model.to_checkpoint(keep_fc6);
    ckpt.set_meta("phase", config.phase);
    ckpt.set_meta("epoch", config.epochs);
    ckpt.set_meta("seed", config.seed);
    ckpt.set_meta(
        "config",
        crate::checkpoint::fnv64_hex(config.summary().as_bytes()),
    );
    for (k, v) in extra {
        ckpt.set_meta(k, v);
    }
    ckpt
}

/// Phase 1: train `attribute`'s branch (all levels) plus the FC stack on
/// sequences tagged with that attribute. The backbone and every other
/// branch stay bit-identical. The model must hold one FC6 domain per
/// sequence.
pub fn train_phase1(
    model: &mut ModelParams,
    attribute: AttributeId,
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    for seq in data {
        if !qualifying_flags(attribute)
            .iter()
            .any(|f| seq.has_attribute(*f))
        {
            return Err(Error::AttributeMismatch {
                sequence: seq.name.clone(),
                attribute: attribute.code(),
            });
        }
    }
    if model.head.domains() != data.len() {
        return Err(Error::DimensionMismatch {
            context: "fc6 domain bank",
            expected: data.len(),
            got: model.head.domains(),
        });
    }
    let branch_key = format!(".branch.{}.", attribute.code());
    let lr_new = config.lr_new;
    let lr_for = move |name: &str| -> Option<f64> {
        if name.starts_with("head.") || (name.starts_with("fusion") && name.contains(&branch_key))
        {
            Some(lr_new)
        } else {
            None
        }
    };
    let losses = train_loop(model, data, FusionMode::Single(attribute), &lr_for, config)?;
    let ckpt = finish_checkpoint(
        model,
        config,
        true,
        &[("attribute", attribute.code().to_string())],
    );
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}

/// Assemble the phase-2 starting model from five phase-1 checkpoints, one
/// per attribute in `AttributeId::ALL` order: shared backbone from the
/// first, each attribute's branches from its own checkpoint, and a fresh
/// FC stack sized to `domains`.
pub fn assemble_phase2_model(
    branch_checkpoints: &[Checkpoint],
    domains: usize,
    config: &TrainConfig,
) -> Result<ModelParams> {
    if branch_checkpoints.len() != AttributeId::ALL.len() {
        return Err(Error::BranchCountMismatch {
            got: branch_checkpoints.len(),
        });
    }
    let mut model = ModelParams::from_checkpoint(&branch_checkpoints[0])?;
    for (i, ckpt) in branch_checkpoints.iter().enumerate().skip(1) {
        let donor = ModelParams::from_checkpoint(ckpt)?;
        if donor.config.preset != model.config.preset {
            return Err(Error::CheckpointFormat(format!(
                "branch checkpoint {i} is preset {:?}, expected {:?}",
                donor.config.preset, model.config.preset
            )));
        }
        for lvl in 0..model.fusion.len() {
            model.fusion[lvl].branches[i] = donor.fusion[lvl].branches[i].clone();
        }
    }
    // Fresh FC stack for the refinement phase; offset the seed so the init
    // stream differs from the training loop's sampling stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let dropout = model.head.dropout;
    model.head = HeadParams::seeded(
        model.config.feature_len(),
        model.config.fc_dim,
        domains,
        &mut rng,
    );
    model.head.dropout = dropout;
    Ok(model)
}

/// Phase 2: with all branches and the backbone frozen bit-exactly, train the
/// aggregation stage and the FC stack on the full sequence set. The stored
/// checkpoint drops the FC6 domain bank (trackers re-initialize it online).
pub fn train_phase2(
    data: &[Sequence],
    branch_checkpoints: &[Checkpoint],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainOutcome)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let mut model = assemble_phase2_model(branch_checkpoints, data.len(), config)?;
    let lr_new = config.lr_new;
    let lr_for = move |name: &str| -> Option<f64> {
        if name.starts_with("head.") || (name.starts_with("fusion") && name.contains(".agg.")) {
            Some(lr_new)
        } else {
            None
        }
    };
    let mode = model.variant.mode();
    let losses = train_loop(&mut model, data, mode, &lr_for, config)?;
    let ckpt = finish_checkpoint(&model, config, false, &[]);
    Ok((
        model,
        TrainOutcome {
            checkpoint: ckpt,
            losses,
        },
    ))
}
