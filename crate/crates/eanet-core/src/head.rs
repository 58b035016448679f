//! Multi-domain fully connected classifier on top of the fused features.
//!
//! The two modality feature maps are flattened and concatenated, passed
//! through two shared FC layers (ReLU + dropout during training), then
//! through one domain-specific FC block producing two logits. Column 0
//! scores background, column 1 scores the target; the positive logit is the
//! candidate score used by the tracker. Softmax happens only inside the
//! loss.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamBundle;

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// One fully connected layer, `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearParams {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            weight: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
        }
    }

    /// He-scaled Gaussian weights (std sqrt(2/fan_in)), zero bias.
    pub fn seeded(out: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid normal");
        Self {
            weight: Array2::from_shape_simple_fn((out, input), || dist.sample(rng)),
            bias: Array1::zeros(out),
        }
    }
}

impl ParamBundle for LinearParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("weight", self.weight.view().into_dyn());
        f("bias", self.bias.view().into_dyn());
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("weight", self.weight.view_mut().into_dyn());
        f("bias", self.bias.view_mut().into_dyn());
    }
}

/// The FC stack: two shared layers plus one binary block per domain.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc4: LinearParams,
    pub fc5: LinearParams,
    pub fc6: Vec<LinearParams>,
    pub dropout: f64,
}

impl HeadParams {
    pub fn seeded(feat_in: usize, hidden: usize, domains: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc4: LinearParams::seeded(hidden, feat_in, rng),
            fc5: LinearParams::seeded(hidden, hidden, rng),
            fc6: (0..domains)
                .map(|_| LinearParams::seeded(2, hidden, rng))
                .collect(),
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.fc4.weight.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.fc4.weight.nrows()
    }

    pub fn domains(&self) -> usize {
        self.fc6.len()
    }

    /// Replace the domain bank with freshly initialized blocks. Used when a
    /// trained head is repurposed (online tracking uses a single domain).
    pub fn reset_domains(&mut self, domains: usize, rng: &mut ChaCha8Rng) {
        self.fc6 = (0..domains)
            .map(|_| LinearParams::seeded(2, self.hidden(), rng))
            .collect();
    }
}

impl ParamBundle for HeadParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc4.for_each(&mut |n, v| f(&format!("fc4.{n}"), v));
        self.fc5.for_each(&mut |n, v| f(&format!("fc5.{n}"), v));
        for (d, block) in self.fc6.iter().enumerate() {
            block.for_each(&mut |n, v| f(&format!("fc6.{d}.{n}"), v));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc4.for_each_mut(&mut |n, v| f(&format!("fc4.{n}"), v));
        self.fc5.for_each_mut(&mut |n, v| f(&format!("fc5.{n}"), v));
        for (d, block) in self.fc6.iter_mut().enumerate() {
            block.for_each_mut(&mut |n, v| f(&format!("fc6.{d}.{n}"), v));
        }
    }
}

/// Flatten both modality maps and concatenate (RGB first).
pub fn concat_features(rgb: &Array3<f64>, tir: &Array3<f64>) -> Result<Array1<f64>> {
    if rgb.dim() != tir.dim() {
        return Err(Error::ShapeMismatch {
            context: "head modality features",
            expected: rgb.shape().to_vec(),
            got: tir.shape().to_vec(),
        });
    }
    let n = rgb.len();
    let mut out = Array1::<f64>::zeros(2 * n);
    for (dst, src) in out.slice_mut(ndarray::s![..n]).iter_mut().zip(rgb.iter()) {
        *dst = *src;
    }
    for (dst, src) in out.slice_mut(ndarray::s![n..]).iter_mut().zip(tir.iter()) {
        *dst = *src;
    }
    Ok(out)
}

/// Split a feature gradient back into per-modality maps of the given shape.
pub fn split_feature_grad(
    grad: &Array1<f64>,
    shape: (usize, usize, usize),
) -> (Array3<f64>, Array3<f64>) {
    let n = shape.0 * shape.1 * shape.2;
    let rgb = Array3::from_shape_vec(shape, grad.slice(ndarray::s![..n]).to_vec()).unwrap();
    let tir = Array3::from_shape_vec(shape, grad.slice(ndarray::s![n..]).to_vec()).unwrap();
    (rgb, tir)
}

fn linear_batch(x: &Array2<f64>, layer: &LinearParams) -> Array2<f64> {
    x.dot(&layer.weight.t()) + &layer.bias
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub features: Array2<f64>,
    pub h4_pre: Array2<f64>,
    pub h4: Array2<f64>,
    pub mask4: Option<Array2<f64>>,
    pub h5_pre: Array2<f64>,
    pub h5: Array2<f64>,
    pub mask5: Option<Array2<f64>>,
    pub domain: usize,
}

/// Parameter gradients for one backward pass; only the touched domain block
/// carries a gradient.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub fc4: LinearParams,
    pub fc5: LinearParams,
    pub fc6: LinearParams,
    pub domain: usize,
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

/// Batched forward through the FC stack. Pass an RNG to enable inverted
/// dropout (training); without one the pass is deterministic (inference).
pub fn head_forward_batch(
    features: &Array2<f64>,
    params: &HeadParams,
    domain: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<f64>, HeadCache)> {
    if domain >= params.domains() {
        return Err(Error::DomainOutOfRange {
            index: domain,
            count: params.domains(),
        });
    }
    if features.ncols() != params.feature_len() {
        return Err(Error::DimensionMismatch {
            context: "head feature length",
            expected: params.feature_len(),
            got: features.ncols(),
        });
    }
    let h4_pre = linear_batch(features, &params.fc4);
    let mut h4 = h4_pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let (mask4, mask5) = match dropout_rng {
        Some(rng) => {
            let m4 = dropout_mask(h4.dim(), params.dropout, rng);
            let m5 = dropout_mask((h4.nrows(), params.hidden()), params.dropout, rng);
            (Some(m4), Some(m5))
        }
        None => (None, None),
    };
    if let Some(m) = &mask4 {
        h4 = &h4 * m;
    }
    let h5_pre = linear_batch(&h4, &params.fc5);
    let mut h5 = h5_pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    if let Some(m) = &mask5 {
        h5 = &h5 * m;
    }
    let logits = linear_batch(&h5, &params.fc6[domain]);
    Ok((
        logits,
        HeadCache {
            features: features.clone(),
            h4_pre,
            h4,
            mask4,
            h5_pre,
            h5,
            mask5,
            domain,
        },
    ))
}

/// Backward through the FC stack; returns the feature gradient and the
/// parameter gradients (FC6 gradient belongs to `cache.domain` only).
pub fn head_backward(
    params: &HeadParams,
    cache: &HeadCache,
    grad_logits: &Array2<f64>,
) -> (Array2<f64>, HeadGrads) {
    let g_fc6_w = grad_logits.t().dot(&cache.h5);
    let g_fc6_b = grad_logits.sum_axis(Axis(0));
    let mut g_h5 = grad_logits.dot(&params.fc6[cache.domain].weight);
    if let Some(m) = &cache.mask5 {
        g_h5 = &g_h5 * m;
    }
    g_h5.zip_mut_with(&cache.h5_pre, |g, pre| {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    });
    let g_fc5_w = g_h5.t().dot(&cache.h4);
    let g_fc5_b = g_h5.sum_axis(Axis(0));
    let mut g_h4 = g_h5.dot(&params.fc5.weight);
    if let Some(m) = &cache.mask4 {
        g_h4 = &g_h4 * m;
    }
    g_h4.zip_mut_with(&cache.h4_pre, |g, pre| {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    });
    let g_fc4_w = g_h4.t().dot(&cache.features);
    let g_fc4_b = g_h4.sum_axis(Axis(0));
    let g_features = g_h4.dot(&params.fc4.weight);
    (
        g_features,
        HeadGrads {
            fc4: LinearParams {
                weight: g_fc4_w,
                bias: g_fc4_b,
            },
            fc5: LinearParams {
                weight: g_fc5_w,
                bias: g_fc5_b,
            },
            fc6: LinearParams {
                weight: g_fc6_w,
                bias: g_fc6_b,
            },
            domain: cache.domain,
        },
    )
}

/// Inference scores for one sample pair: `(score_pos, score_neg)`.
pub fn head_forward(
    rgb_feat: &Array3<f64>,
    tir_feat: &Array3<f64>,
    params: &HeadParams,
    domain: usize,
) -> Result<(f64, f64)> {
    let features = concat_features(rgb_feat, tir_feat)?;
    let batch = features.insert_axis(Axis(0));
    let (logits, _) = head_forward_batch(&batch, params, domain, None)?;
    Ok((logits[[0, 1]], logits[[0, 0]]))
}

/// Positive-class logits f+ for a batch of precomputed features.
pub fn head_scores(
    features: &Array2<f64>,
    params: &HeadParams,
    domain: usize,
) -> Result<Array1<f64>> {
    let (logits, _) = head_forward_batch(features, params, domain, None)?;
    Ok(logits.column(1).to_owned())
}

/// Mean softmax cross-entropy. Labels: 1 marks a target sample (column 1),
/// 0 marks background (column 0).
pub fn bce_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() == 0 {
        return Err(Error::EmptyTrainingData);
    }
    if logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "loss labels",
            expected: logits.nrows(),
            got: labels.len(),
        });
    }
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if label > 1 {
            return Err(Error::InvalidLabel { value: label });
        }
        let a = row[0];
        let b = row[1];
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - row[label];
    }
    Ok(total / logits.nrows() as f64)
}

/// Gradient of [`bce_loss`] w.r.t. the logits: `(softmax - onehot) / batch`.
pub fn bce_loss_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    if logits.nrows() == 0 {
        return Err(Error::EmptyTrainingData);
    }
    if logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "loss labels",
            expected: logits.nrows(),
            got: labels.len(),
        });
    }
    let inv_b = 1.0 / logits.nrows() as f64;
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if label > 1 {
            return Err(Error::InvalidLabel { value: label });
        }
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let z = e0 + e1;
        grad[[i, 0]] = (e0 / z - if label == 0 { 1.0 } else { 0.0 }) * inv_b;
        grad[[i, 1]] = (e1 / z - if label == 1 { 1.0 } else { 0.0 }) * inv_b;
    }
    Ok(grad)
}

/// Indices of the k highest-scoring negatives; ties broken by lower index.
pub fn hard_negative_mining(neg_scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > neg_scores.len() {
        return Err(Error::TopKOutOfRange {
            k,
            len: neg_scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..neg_scores.len()).collect();
    order.sort_by(|&i, &j| {
        neg_scores[j]
            .partial_cmp(&neg_scores[i])
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}
