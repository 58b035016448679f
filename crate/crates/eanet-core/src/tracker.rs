//! Online tracking loop: initialize on the first frame's box, then per frame
//! score Gaussian candidates around the previous estimate, report the mean of
//! the top scorers, refine it with the bounding-box regressor on success, and
//! fine-tune the FC stack from sample memories on failure (short horizon) or
//! on a fixed interval (long horizon).
//!
//! Only FC parameters ever change online; the convolution and fusion stages
//! stay bit-identical to the loaded checkpoint for the whole run.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::prelude::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::extract_patch;
use crate::checkpoint::Checkpoint;
use crate::datasets::{FramePair, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{
    gaussian_sample, regressor_apply, regressor_fit, sample_by_iou, BoundingBox, RegressorParams,
    SampleSpec,
};
use crate::head::{
    bce_loss, bce_loss_grad, hard_negative_mining, head_backward, head_forward_batch, head_scores,
    HeadGrads, HeadParams,
};
use crate::model::ModelParams;
use crate::params::export;
use crate::training::{Sgd, NEG_IOU_HI, PATCH_CONTEXT, POS_IOU_LO};

/// Proposal spread for positive update samples (tight around the estimate).
const POS_SIGMA: (f64, f64) = (0.1, 0.15);
/// Proposal spread for negative update samples (broad ring).
const NEG_SIGMA: (f64, f64) = (1.0, 0.5);
/// Proposal spread for regressor training samples.
const REG_SIGMA: (f64, f64) = (0.3, 0.3);

/// Knobs of the online loop. Defaults give the full-scale tracker; tests
/// shrink the counts.
#[derive(Debug, Clone)]
pub struct TrackerConfig {
    /// Candidates scored per frame.
    pub n_candidates: usize,
    /// The reported box is the mean of this many top-scoring candidates.
    pub top_k: usize,
    /// A frame succeeds when the mean top-k score exceeds this.
    pub success_threshold: f64,
    pub candidate_sigma_xy: f64,
    pub candidate_sigma_scale: f64,
    pub n_pos_init: usize,
    pub n_neg_init: usize,
    /// Regressor training samples (overlap >= `reg_iou_lo`).
    pub n_reg: usize,
    pub reg_iou_lo: f64,
    pub ridge_lambda: f64,
    /// Update samples banked after each successful frame.
    pub pos_per_frame: usize,
    pub neg_per_frame: usize,
    /// A failed frame triggers a short-horizon update, at most one per this
    /// many frames.
    pub short_interval: usize,
    /// Long-horizon update fires every this many frames.
    pub long_interval: usize,
    /// Memory caps, counted in banked frames, not samples.
    pub long_capacity: usize,
    pub short_capacity: usize,
    pub init_iterations: usize,
    pub update_iterations: usize,
    pub batch_pos: usize,
    pub batch_neg: usize,
    /// Negatives scored per fine-tune iteration before keeping the hardest
    /// `batch_neg`.
    pub neg_pool: usize,
    pub lr_init: f64,
    pub lr_update: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            n_candidates: 256,
            top_k: 5,
            success_threshold: 0.0,
            candidate_sigma_xy: 0.6,
            candidate_sigma_scale: 0.05,
            n_pos_init: 500,
            n_neg_init: 5000,
            n_reg: 1000,
            reg_iou_lo: 0.6,
            ridge_lambda: 1000.0,
            pos_per_frame: 50,
            neg_per_frame: 200,
            short_interval: 1,
            long_interval: 10,
            long_capacity: 100,
            short_capacity: 20,
            init_iterations: 30,
            update_iterations: 10,
            batch_pos: 32,
            batch_neg: 96,
            neg_pool: 1024,
            lr_init: 1e-2,
            lr_update: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_candidates {
            return Err(Error::TopKOutOfRange {
                k: self.top_k,
                len: self.n_candidates,
            });
        }
        let positive = [
            ("n_candidates", self.n_candidates),
            ("n_pos_init", self.n_pos_init),
            ("n_neg_init", self.n_neg_init),
            ("n_reg", self.n_reg),
            ("pos_per_frame", self.pos_per_frame),
            ("neg_per_frame", self.neg_per_frame),
            ("short_interval", self.short_interval),
            ("long_interval", self.long_interval),
            ("long_capacity", self.long_capacity),
            ("short_capacity", self.short_capacity),
            ("init_iterations", self.init_iterations),
            ("update_iterations", self.update_iterations),
            ("batch_pos", self.batch_pos),
            ("batch_neg", self.batch_neg),
            ("neg_pool", self.neg_pool),
        ];
        for (what, v) in positive {
            if v == 0 {
                return Err(Error::UnknownName {
                    what: "zero tracker setting",
                    value: what.to_string(),
                });
            }
        }
        for (what, v) in [("lr_init", self.lr_init), ("lr_update", self.lr_update)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::UnknownName {
                    what: "non-positive learning rate",
                    value: what.to_string(),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.reg_iou_lo) {
            return Err(Error::UnknownName {
                what: "regressor overlap floor",
                value: self.reg_iou_lo.to_string(),
            });
        }
        Ok(())
    }
}

/// Features banked from one frame, tagged with its index.
#[derive(Debug, Clone)]
pub struct FrameSamples {
    pub frame: usize,
    /// `[n_pos, F]` positive features.
    pub pos: Array2<f64>,
    /// `[n_neg, F]` negative features.
    pub neg: Array2<f64>,
}

/// Which memory horizon an update draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Short,
    Long,
}

/// FIFO store of per-frame sample features. The long view is everything
/// retained (up to `long_capacity` frames); the short view is the most
/// recent `short_capacity` frames of it.
#[derive(Debug, Clone)]
pub struct SampleMemory {
    frames: VecDeque<FrameSamples>,
    long_capacity: usize,
    short_capacity: usize,
}

impl SampleMemory {
    pub fn new(long_capacity: usize, short_capacity: usize) -> Self {
        SampleMemory {
            frames: VecDeque::new(),
            long_capacity,
            short_capacity,
        }
    }

    /// Bank one frame, evicting the oldest frames beyond capacity.
    pub fn push(&mut self, samples: FrameSamples) {
        self.frames.push_back(samples);
        while self.frames.len() > self.long_capacity {
            self.frames.pop_front();
        }
    }

    pub fn view(&self, kind: UpdateKind) -> Vec<&FrameSamples> {
        let skip = match kind {
            UpdateKind::Long => 0,
            UpdateKind::Short => self.frames.len().saturating_sub(self.short_capacity),
        };
        self.frames.iter().skip(skip).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn oldest_frame(&self) -> Option<usize> {
        self.frames.front().map(|f| f.frame)
    }

    pub fn newest_frame(&self) -> Option<usize> {
        self.frames.back().map(|f| f.frame)
    }
}

/// Everything observable about one tracked frame.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Frame index after the step (init frame is 1).
    pub frame: usize,
    /// The reported box: top-k mean, regressor-refined on success.
    pub estimate: BoundingBox,
    /// Mean score of the top-k candidates.
    pub score: f64,
    pub success: bool,
    /// Index of the highest-scoring candidate (ties keep the lower index).
    pub raw_argmax: usize,
    pub candidates: Vec<BoundingBox>,
    pub candidate_scores: Vec<f64>,
    /// Whether update samples were banked this frame.
    pub collected: bool,
    pub short_updated: bool,
    pub long_updated: bool,
}

/// Single-owner online tracker state for one sequence.
pub struct Tracker {
    pub config: TrackerConfig,
    model: ModelParams,
    pub regressor: RegressorParams,
    memory: SampleMemory,
    pub current_box: BoundingBox,
    /// Frame counter; 1 after init.
    pub t: usize,
    pub last_score: f64,
    rng: ChaCha8Rng,
    last_short_update: usize,
}

fn features_of(
    model: &ModelParams,
    frame: &FramePair,
    boxes: &[BoundingBox],
) -> Result<Array2<f64>> {
    let mut out = Array2::<f64>::zeros((boxes.len(), model.config.feature_len()));
    for (i, b) in boxes.iter().enumerate() {
        let rgb = extract_patch(&frame.rgb, b, PATCH_CONTEXT)?;
        let tir = extract_patch(&frame.tir, b, PATCH_CONTEXT)?;
        out.row_mut(i).assign(&model.features(&rgb, &tir)?);
    }
    Ok(out)
}

fn head_grad_map(hg: &HeadGrads) -> std::collections::BTreeMap<String, ndarray::ArrayD<f64>> {
    let mut map = std::collections::BTreeMap::new();
    for (name, arr) in export(&hg.fc4) {
        map.insert(format!("fc4.{name}"), arr);
    }
    for (name, arr) in export(&hg.fc5) {
        map.insert(format!("fc5.{name}"), arr);
    }
    for (name, arr) in export(&hg.fc6) {
        map.insert(format!("fc6.{}.{name}", hg.domain), arr);
    }
    map
}

/// SGD fine-tuning of the FC stack on banked features: each iteration takes
/// `batch_pos` random positives and the hardest `batch_neg` of a random
/// negative pool under the current head.
fn fine_tune(
    head: &mut HeadParams,
    pos: &Array2<f64>,
    neg: &Array2<f64>,
    iterations: usize,
    lr: f64,
    config: &TrackerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if pos.nrows() == 0 || neg.nrows() == 0 {
        return Err(Error::EmptyTrainingData);
    }
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let lr_for = move |_: &str| Some(lr);
    let mut losses = Vec::with_capacity(iterations);
    let all_pos: Vec<usize> = (0..pos.nrows()).collect();
    let all_neg: Vec<usize> = (0..neg.nrows()).collect();
    for _ in 0..iterations {
        let pos_idx: Vec<usize> = if all_pos.len() >= config.batch_pos {
            all_pos
                .choose_multiple(rng, config.batch_pos)
                .copied()
                .collect()
        } else {
            (0..config.batch_pos)
                .map(|_| rng.random_range(0..all_pos.len()))
                .collect()
        };
        let pool_size = config.neg_pool.min(all_neg.len());
        let pool_idx: Vec<usize> = all_neg.choose_multiple(rng, pool_size).copied().collect();
        let pool = neg.select(Axis(0), &pool_idx);
        let k = config.batch_neg.min(pool_size);
        let hardest = if pool_size > k {
            let scores = head_scores(&pool, head, 0)?;
            hard_negative_mining(&scores.to_vec(), k)?
        } else {
            (0..pool_size).collect()
        };
        let neg_idx: Vec<usize> = hardest.into_iter().map(|i| pool_idx[i]).collect();

        let mut rows = pos.select(Axis(0), &pos_idx);
        rows.append(Axis(0), neg.select(Axis(0), &neg_idx).view())
            .expect("feature widths match");
        let labels: Vec<usize> = std::iter::repeat_n(1, pos_idx.len())
            .chain(std::iter::repeat_n(0, neg_idx.len()))
            .collect();

        let (logits, cache) = head_forward_batch(&rows, head, 0, Some(rng))?;
        losses.push(bce_loss(&logits, &labels)?);
        let g = bce_loss_grad(&logits, &labels)?;
        let (_, head_grads) = head_backward(head, &cache, &g);
        let grads = head_grad_map(&head_grads);
        opt.step(head, &grads, &lr_for);
    }
    Ok(losses)
}

impl Tracker {
    /// Set up on the first frame: load the checkpoint with a fresh
    /// single-domain FC6, fine-tune the FC stack on samples around `gt`,
    /// fit the box regressor, and seed the sample memory.
    pub fn init(
        frame: &FramePair,
        gt: &BoundingBox,
        checkpoint: &Checkpoint,
        config: TrackerConfig,
    ) -> Result<Tracker> {
        config.validate()?;
        if gt.w < 2.0 || gt.h < 2.0 {
            return Err(Error::DegenerateInit { w: gt.w, h: gt.h });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelParams::from_checkpoint(checkpoint)?;
        model.head.reset_domains(1, &mut rng);

        let (h, w, _) = frame.rgb.dim();
        let bounds = (w, h);
        let pos_spec = SampleSpec::new(config.n_pos_init, POS_SIGMA.0, POS_SIGMA.1, rng.random());
        let pos_boxes = sample_by_iou(gt, config.n_pos_init, POS_IOU_LO, 1.0, &pos_spec, bounds)?;
        let neg_spec = SampleSpec::new(config.n_neg_init, NEG_SIGMA.0, NEG_SIGMA.1, rng.random());
        let neg_boxes = sample_by_iou(gt, config.n_neg_init, 0.0, NEG_IOU_HI, &neg_spec, bounds)?;
        let pos = features_of(&model, frame, &pos_boxes)?;
        let neg = features_of(&model, frame, &neg_boxes)?;
        fine_tune(
            &mut model.head,
            &pos,
            &neg,
            config.init_iterations,
            config.lr_init,
            &config,
            &mut rng,
        )?;

        let reg_spec = SampleSpec::new(config.n_reg, REG_SIGMA.0, REG_SIGMA.1, rng.random());
        let reg_boxes = sample_by_iou(gt, config.n_reg, config.reg_iou_lo, 1.0, &reg_spec, bounds)?;
        let reg_features = features_of(&model, frame, &reg_boxes)?;
        let gts = vec![*gt; reg_boxes.len()];
        let regressor = regressor_fit(&reg_features, &reg_boxes, &gts, config.ridge_lambda)?;

        let mut memory = SampleMemory::new(config.long_capacity, config.short_capacity);
        memory.push(FrameSamples { frame: 1, pos, neg });

        Ok(Tracker {
            config,
            model,
            regressor,
            memory,
            current_box: *gt,
            t: 1,
            last_score: f64::INFINITY,
            rng,
            last_short_update: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn memory(&self) -> &SampleMemory {
        &self.memory
    }

    /// Track one frame. Always returns a box; failure only suppresses the
    /// regressor and sample collection and schedules a short update.
    pub fn step(&mut self, frame: &FramePair) -> Result<StepReport> {
        self.t += 1;
        let (h, w, _) = frame.rgb.dim();
        let bounds = (w, h);
        let spec = SampleSpec::new(
            self.config.n_candidates,
            self.config.candidate_sigma_xy,
            self.config.candidate_sigma_scale,
            self.rng.random(),
        );
        let candidates = gaussian_sample(&self.current_box, &spec, bounds);
        let features = features_of(&self.model, frame, &candidates)?;
        let scores = head_scores(&features, &self.model.head, 0)?.to_vec();

        let mut raw_argmax = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[raw_argmax] {
                raw_argmax = i;
            }
        }
        let top = hard_negative_mining(&scores, self.config.top_k)?;
        let k = top.len() as f64;
        let mean_box = BoundingBox {
            x: top.iter().map(|&i| candidates[i].x).sum::<f64>() / k,
            y: top.iter().map(|&i| candidates[i].y).sum::<f64>() / k,
            w: top.iter().map(|&i| candidates[i].w).sum::<f64>() / k,
            h: top.iter().map(|&i| candidates[i].h).sum::<f64>() / k,
        };
        let score = top.iter().map(|&i| scores[i]).sum::<f64>() / k;
        let success = score > self.config.success_threshold;

        let mut collected = false;
        if success {
            // Refine each top candidate with the regressor, then average.
            let mut rx = 0.0;
            let mut ry = 0.0;
            let mut rw = 0.0;
            let mut rh = 0.0;
            for &i in &top {
                let refined = regressor_apply(
                    &self.regressor,
                    &features.row(i).to_owned(),
                    &candidates[i],
                )?;
                rx += refined.x;
                ry += refined.y;
                rw += refined.w;
                rh += refined.h;
            }
            self.current_box =
                BoundingBox { x: rx / k, y: ry / k, w: rw / k, h: rh / k }
                    .clip_to(w as f64, h as f64);
            collected = self.collect_samples(frame, bounds)?;
        } else {
            self.current_box = mean_box.clip_to(w as f64, h as f64);
        }
        self.last_score = score;

        let mut short_updated = false;
        let mut long_updated = false;
        if !success {
            if self.t - self.last_short_update >= self.config.short_interval {
                self.update(UpdateKind::Short)?;
                self.last_short_update = self.t;
                short_updated = true;
            }
        } else if self.t % self.config.long_interval == 0 {
            self.update(UpdateKind::Long)?;
            long_updated = true;
        }

        Ok(StepReport {
            frame: self.t,
            estimate: self.current_box,
            score,
            success,
            raw_argmax,
            candidates,
            candidate_scores: scores,
            collected,
            short_updated,
            long_updated,
        })
    }

    /// Bank update samples around the current estimate. A crowded image edge
    /// can exhaust the rejection budget; that frame is skipped, not fatal.
    fn collect_samples(&mut self, frame: &FramePair, bounds: (usize, usize)) -> Result<bool> {
        let c = &self.config;
        let pos_spec = SampleSpec::new(c.pos_per_frame, POS_SIGMA.0, POS_SIGMA.1, self.rng.random());
        let neg_spec = SampleSpec::new(c.neg_per_frame, NEG_SIGMA.0, NEG_SIGMA.1, self.rng.random());
        let pos_boxes = sample_by_iou(
            &self.current_box,
            c.pos_per_frame,
            POS_IOU_LO,
            1.0,
            &pos_spec,
            bounds,
        );
        let neg_boxes = sample_by_iou(
            &self.current_box,
            c.neg_per_frame,
            0.0,
            NEG_IOU_HI,
            &neg_spec,
            bounds,
        );
        let (Ok(pos_boxes), Ok(neg_boxes)) = (pos_boxes, neg_boxes) else {
            return Ok(false);
        };
        let pos = features_of(&self.model, frame, &pos_boxes)?;
        let neg = features_of(&self.model, frame, &neg_boxes)?;
        self.memory.push(FrameSamples { frame: self.t, pos, neg });
        Ok(true)
    }

    /// Fine-tune the FC stack from one memory horizon. A no-op if the
    /// memory is empty (cannot happen after init).
    pub fn update(&mut self, kind: UpdateKind) -> Result<()> {
        let view = self.memory.view(kind);
        if view.is_empty() {
            return Ok(());
        }
        let pos_views: Vec<_> = view.iter().map(|f| f.pos.view()).collect();
        let neg_views: Vec<_> = view.iter().map(|f| f.neg.view()).collect();
        let pos = ndarray::concatenate(Axis(0), &pos_views).expect("uniform feature width");
        let neg = ndarray::concatenate(Axis(0), &neg_views).expect("uniform feature width");
        fine_tune(
            &mut self.model.head,
            &pos,
            &neg,
            self.config.update_iterations,
            self.config.lr_update,
            &self.config,
            &mut self.rng,
        )?;
        Ok(())
    }
}

/// Run one-pass tracking over a whole sequence: init on frame 1's ground
/// truth, then step through the rest. Returns the per-frame boxes (frame 1
/// is the init box) and the per-step reports.
pub fn track_sequence(
    checkpoint: &Checkpoint,
    seq: &Sequence,
    config: &TrackerConfig,
) -> Result<(Vec<BoundingBox>, Vec<StepReport>)> {
    let gt0 = seq
        .ground_truth()
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| Error::MissingInitGroundTruth(seq.name.clone()))?;
    let mut tracker = Tracker::init(&seq.frame(0)?, &gt0, checkpoint, config.clone())?;
    let mut boxes = Vec::with_capacity(seq.len());
    boxes.push(gt0);
    let mut reports = Vec::with_capacity(seq.len().saturating_sub(1));
    for i in 1..seq.len() {
        let report = tracker.step(&seq.frame(i)?)?;
        boxes.push(report.estimate);
        reports.push(report);
    }
    Ok((boxes, reports))
}

/// Write one box per line as "x,y,w,h" rounded to integers.
pub fn write_result_file(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    for b in boxes {
        writeln!(
            f,
            "{},{},{},{}",
            b.x.round() as i64,
            b.y.round() as i64,
            b.w.round() as i64,
            b.h.round() as i64
        )?;
    }
    Ok(())
}
