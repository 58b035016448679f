//! Attribute-specific fusion branches and the attention-based aggregation
//! module inserted after every backbone layer.
//!
//! Each of the five challenge attributes owns a branch: channel-concatenate
//! the two modality features, conv 5x5, ReLU, conv 4x4, then a two-candidate
//! selective refinement over the pre/post conv4x4 maps. The aggregation
//! module runs the same selection over the five branch outputs and its
//! result is added residually to both modality streams.
//!
//! The selection combines a cross-candidate channel softmax and a
//! cross-candidate spatial softmax multiplicatively, then renormalizes the
//! combined weight per element so the weights still sum to one across
//! candidates; identical candidates therefore pass through unchanged.

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    conv_stage_backward, conv_stage_forward, post_stage_backward, post_stage_forward,
    ConvLayerSpec, ConvParams, ConvStageCache, PostStageCache,
};
use crate::error::{Error, Result};
use crate::params::ParamBundle;
use crate::tensor::{
    conv2d_backward, conv2d_forward, relu, relu_backward, softmax, softmax_backward, ConvCfg,
};

/// Channel-attention bottleneck ratio.
pub const REDUCTION_RATIO: usize = 16;
/// Floor for the bottleneck width.
pub const MIN_REDUCED: usize = 4;
/// Spatial-attention convolution kernel (odd, symmetric padding).
pub const SPATIAL_KERNEL: usize = 7;

/// The five challenge attributes that own fusion branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeId {
    ThermalCrossover,
    IlluminationVariation,
    ScaleVariation,
    Occlusion,
    FastMotion,
}

impl AttributeId {
    pub const ALL: [AttributeId; 5] = [
        AttributeId::ThermalCrossover,
        AttributeId::IlluminationVariation,
        AttributeId::ScaleVariation,
        AttributeId::Occlusion,
        AttributeId::FastMotion,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|a| *a == self).unwrap()
    }

    /// Short code used in parameter paths, file names, and the CLI.
    pub fn code(self) -> &'static str {
        match self {
            AttributeId::ThermalCrossover => "tc",
            AttributeId::IlluminationVariation => "iv",
            AttributeId::ScaleVariation => "sv",
            AttributeId::Occlusion => "occ",
            AttributeId::FastMotion => "fm",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code.to_ascii_lowercase().as_str() {
            "tc" | "thermal-crossover" => Ok(AttributeId::ThermalCrossover),
            "iv" | "illumination-variation" => Ok(AttributeId::IlluminationVariation),
            "sv" | "scale-variation" => Ok(AttributeId::ScaleVariation),
            "occ" | "occlusion" => Ok(AttributeId::Occlusion),
            "fm" | "fast-motion" => Ok(AttributeId::FastMotion),
            other => Err(Error::UnknownName {
                what: "attribute",
                value: other.to_string(),
            }),
        }
    }
}

/// Parameters of one selective-refinement block over M candidate maps.
#[derive(Debug, Clone)]
pub struct ESKParams {
    /// Bottleneck projection `[d, C]`.
    pub reduce_w: Array2<f64>,
    pub reduce_b: Array1<f64>,
    /// One expansion head per candidate, each `[C, d]`.
    pub expand_w: Vec<Array2<f64>>,
    pub expand_b: Vec<Array1<f64>>,
    /// Shared spatial-attention convolution `[1, 2, 7, 7]` over the
    /// per-candidate [channel-mean; channel-max] maps. No bias: the conv is
    /// shared across candidates and the softmax is shift-invariant, so a
    /// bias would be unidentifiable (structurally zero gradient).
    pub spatial_w: ndarray::Array4<f64>,
}

impl ESKParams {
    pub fn reduced_dim(channels: usize) -> usize {
        (channels / REDUCTION_RATIO).max(MIN_REDUCED)
    }

    pub fn channels(&self) -> usize {
        self.reduce_w.ncols()
    }

    pub fn candidates(&self) -> usize {
        self.expand_w.len()
    }

    pub fn zeros(channels: usize, m: usize) -> Self {
        let d = Self::reduced_dim(channels);
        Self {
            reduce_w: Array2::zeros((d, channels)),
            reduce_b: Array1::zeros(d),
            expand_w: (0..m).map(|_| Array2::zeros((channels, d))).collect(),
            expand_b: (0..m).map(|_| Array1::zeros(channels)).collect(),
            spatial_w: ndarray::Array4::zeros((1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL)),
        }
    }

    /// Gaussian weights (std 0.01), zero biases.
    pub fn seeded(channels: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 0.01).expect("valid normal");
        let d = Self::reduced_dim(channels);
        let mut draw2 = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || dist.sample(rng));
        let reduce_w = draw2(d, channels);
        let expand_w: Vec<Array2<f64>> = (0..m).map(|_| draw2(channels, d)).collect();
        let spatial_w = ndarray::Array4::from_shape_simple_fn(
            (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
            || dist.sample(rng),
        );
        Self {
            reduce_w,
            reduce_b: Array1::zeros(d),
            expand_w,
            expand_b: (0..m).map(|_| Array1::zeros(channels)).collect(),
            spatial_w,
        }
    }
}

impl ParamBundle for ESKParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("reduce.weight", self.reduce_w.view().into_dyn());
        f("reduce.bias", self.reduce_b.view().into_dyn());
        for (m, (w, b)) in self.expand_w.iter().zip(&self.expand_b).enumerate() {
            f(&format!("expand{m}.weight"), w.view().into_dyn());
            f(&format!("expand{m}.bias"), b.view().into_dyn());
        }
        f("spatial.weight", self.spatial_w.view().into_dyn());
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("reduce.weight", self.reduce_w.view_mut().into_dyn());
        f("reduce.bias", self.reduce_b.view_mut().into_dyn());
        for (m, (w, b)) in self.expand_w.iter_mut().zip(&mut self.expand_b).enumerate() {
            f(&format!("expand{m}.weight"), w.view_mut().into_dyn());
            f(&format!("expand{m}.bias"), b.view_mut().into_dyn());
        }
        f("spatial.weight", self.spatial_w.view_mut().into_dyn());
    }
}

/// Selection result: the fused map plus both attention families.
#[derive(Debug, Clone)]
pub struct EskOutput {
    pub selected: Array3<f64>,
    /// `[M, C]`, softmax across M per channel.
    pub channel_weights: Array2<f64>,
    /// `[M, H, W]`, softmax across M per location.
    pub spatial_weights: Array3<f64>,
}

/// Intermediates needed by [`esk_backward`].
#[derive(Debug, Clone)]
pub struct EskCache {
    pub candidates: Vec<Array3<f64>>,
    pub z: Array1<f64>,
    pub zr_pre: Array1<f64>,
    pub zr: Array1<f64>,
    pub channel_weights: Array2<f64>,
    pub spatial_weights: Array3<f64>,
    /// Per-candidate [mean; max] channel-pooled maps `[2, H, W]`.
    pub pooled: Vec<Array3<f64>>,
    /// Winning channel of the max pooling, per candidate and location.
    pub max_idx: Vec<Array2<usize>>,
    /// Renormalized combined weights, per candidate `[C, H, W]`.
    pub w_norm: Vec<Array3<f64>>,
}

/// Select across M candidate maps with channel and spatial attention.
pub fn esk_select(candidates: &[Array3<f64>], params: &ESKParams) -> Result<(EskOutput, EskCache)> {
    let m = candidates.len();
    if m < 2 {
        return Err(Error::TooFewCandidates { got: m });
    }
    if params.candidates() != m {
        return Err(Error::DimensionMismatch {
            context: "selection heads",
            expected: params.candidates(),
            got: m,
        });
    }
    let dim0 = candidates[0].dim();
    for cand in candidates {
        if cand.dim() != dim0 {
            return Err(Error::ShapeMismatch {
                context: "selection candidates",
                expected: vec![dim0.0, dim0.1, dim0.2],
                got: cand.shape().to_vec(),
            });
        }
    }
    let (c, h, w) = dim0;
    if params.channels() != c {
        return Err(Error::DimensionMismatch {
            context: "selection channels",
            expected: params.channels(),
            got: c,
        });
    }

    // Channel attention: pooled descriptor of the candidate sum, squeezed
    // through the bottleneck, expanded per candidate, softmaxed across M.
    let mut u_sum = candidates[0].clone();
    for cand in &candidates[1..] {
        u_sum.zip_mut_with(cand, |a, b| *a += b);
    }
    let hw = (h * w) as f64;
    let z = Array1::from_shape_fn(c, |ci| u_sum.index_axis(Axis(0), ci).sum() / hw);
    let zr_pre = params.reduce_w.dot(&z) + &params.reduce_b;
    let zr = zr_pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let mut logits = Array2::<f64>::zeros((m, c));
    for mi in 0..m {
        let e = params.expand_w[mi].dot(&zr) + &params.expand_b[mi];
        logits.row_mut(mi).assign(&e);
    }
    let mut a = Array2::<f64>::zeros((m, c));
    for ci in 0..c {
        let col: Vec<f64> = (0..m).map(|mi| logits[[mi, ci]]).collect();
        let sm = softmax(&col);
        for mi in 0..m {
            a[[mi, ci]] = sm[mi];
        }
    }

    // Spatial attention: a shared conv scores each candidate's
    // [mean; max] channel pooling, softmaxed across M per location.
    let cfg = ConvCfg::new(1, SPATIAL_KERNEL / 2);
    let no_bias = Array1::<f64>::zeros(1);
    let mut pooled = Vec::with_capacity(m);
    let mut max_idx = Vec::with_capacity(m);
    let mut q = Array3::<f64>::zeros((m, h, w));
    for (mi, cand) in candidates.iter().enumerate() {
        let mut sm = Array3::<f64>::zeros((2, h, w));
        let mut idx = Array2::<usize>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ci in 0..c {
                    let v = cand[[ci, y, x]];
                    sum += v;
                    if v > best {
                        best = v;
                        bi = ci;
                    }
                }
                sm[[0, y, x]] = sum / c as f64;
                sm[[1, y, x]] = best;
                idx[[y, x]] = bi;
            }
        }
        let qm = conv2d_forward(&sm, &params.spatial_w, &no_bias, cfg)?;
        q.index_axis_mut(Axis(0), mi)
            .assign(&qm.index_axis(Axis(0), 0));
        pooled.push(sm);
        max_idx.push(idx);
    }
    let mut b = Array3::<f64>::zeros((m, h, w));
    for y in 0..h {
        for x in 0..w {
            let col: Vec<f64> = (0..m).map(|mi| q[[mi, y, x]]).collect();
            let sm = softmax(&col);
            for mi in 0..m {
                b[[mi, y, x]] = sm[mi];
            }
        }
    }

    // Combine multiplicatively and renormalize across candidates.
    let mut selected = Array3::<f64>::zeros((c, h, w));
    let mut w_norm: Vec<Array3<f64>> = (0..m).map(|_| Array3::zeros((c, h, w))).collect();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0;
                for mi in 0..m {
                    total += a[[mi, ci]] * b[[mi, y, x]];
                }
                let mut v = 0.0;
                for mi in 0..m {
                    let wt = a[[mi, ci]] * b[[mi, y, x]] / total;
                    w_norm[mi][[ci, y, x]] = wt;
                    v += wt * candidates[mi][[ci, y, x]];
                }
                selected[[ci, y, x]] = v;
            }
        }
    }

    Ok((
        EskOutput {
            selected,
            channel_weights: a.clone(),
            spatial_weights: b.clone(),
        },
        EskCache {
            candidates: candidates.to_vec(),
            z,
            zr_pre,
            zr,
            channel_weights: a,
            spatial_weights: b,
            pooled,
            max_idx,
            w_norm,
        },
    ))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

/// Gradients of a scalar loss w.r.t. every candidate and every parameter,
/// given the gradient at the selected output.
pub fn esk_backward(
    params: &ESKParams,
    cache: &EskCache,
    grad_out: &Array3<f64>,
) -> (Vec<Array3<f64>>, ESKParams) {
    let m = cache.candidates.len();
    let (c, h, w) = cache.candidates[0].dim();
    let a = &cache.channel_weights;
    let b = &cache.spatial_weights;

    let mut gcand: Vec<Array3<f64>> = (0..m).map(|_| Array3::zeros((c, h, w))).collect();
    let mut ga = Array2::<f64>::zeros((m, c));
    let mut gb = Array3::<f64>::zeros((m, h, w));

    // Through the renormalized combination. With raw weights w = a*b,
    // W = sum_m w and wn = w/W: d wn_m / d w_j = (delta - wn_m) / W.
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[[ci, y, x]];
                let mut total = 0.0;
                for mi in 0..m {
                    total += a[[mi, ci]] * b[[mi, y, x]];
                }
                let mut dot = 0.0;
                for mi in 0..m {
                    let gwt = g * cache.candidates[mi][[ci, y, x]];
                    dot += gwt * cache.w_norm[mi][[ci, y, x]];
                }
                for mi in 0..m {
                    gcand[mi][[ci, y, x]] += g * cache.w_norm[mi][[ci, y, x]];
                    let gwt = g * cache.candidates[mi][[ci, y, x]];
                    let gw_raw = (gwt - dot) / total;
                    ga[[mi, ci]] += gw_raw * b[[mi, y, x]];
                    gb[[mi, y, x]] += gw_raw * a[[mi, ci]];
                }
            }
        }
    }

    // Channel softmax backward per channel, then the two FC layers.
    let mut ge = Array2::<f64>::zeros((m, c));
    for ci in 0..c {
        let sm: Vec<f64> = (0..m).map(|mi| a[[mi, ci]]).collect();
        let up: Vec<f64> = (0..m).map(|mi| ga[[mi, ci]]).collect();
        let gi = softmax_backward(&sm, &up);
        for mi in 0..m {
            ge[[mi, ci]] = gi[mi];
        }
    }
    let d = params.reduce_b.len();
    let mut g_expand_w = Vec::with_capacity(m);
    let mut g_expand_b = Vec::with_capacity(m);
    let mut gzr = Array1::<f64>::zeros(d);
    for mi in 0..m {
        let ge_m = ge.row(mi).to_owned();
        g_expand_w.push(outer(&ge_m, &cache.zr));
        gzr = gzr + params.expand_w[mi].t().dot(&ge_m);
        g_expand_b.push(ge_m);
    }
    let mut gzr_pre = gzr;
    for (gv, pre) in gzr_pre.iter_mut().zip(cache.zr_pre.iter()) {
        if *pre <= 0.0 {
            *gv = 0.0;
        }
    }
    let g_reduce_w = outer(&gzr_pre, &cache.z);
    let g_reduce_b = gzr_pre.clone();
    let gz = params.reduce_w.t().dot(&gzr_pre);

    // Pooled descriptor: z = mean over H*W of the candidate sum.
    let scale = 1.0 / (h * w) as f64;
    for gc in &mut gcand {
        for ci in 0..c {
            let add = gz[ci] * scale;
            gc.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + add);
        }
    }

    // Spatial softmax backward per location, then the shared conv and the
    // [mean; max] channel pooling.
    let mut gq = Array3::<f64>::zeros((m, h, w));
    for y in 0..h {
        for x in 0..w {
            let sm: Vec<f64> = (0..m).map(|mi| b[[mi, y, x]]).collect();
            let up: Vec<f64> = (0..m).map(|mi| gb[[mi, y, x]]).collect();
            let gi = softmax_backward(&sm, &up);
            for mi in 0..m {
                gq[[mi, y, x]] = gi[mi];
            }
        }
    }
    let cfg = ConvCfg::new(1, SPATIAL_KERNEL / 2);
    let mut g_spatial_w = ndarray::Array4::<f64>::zeros(params.spatial_w.raw_dim());
    for mi in 0..m {
        let gq_m = gq
            .index_axis(Axis(0), mi)
            .to_owned()
            .insert_axis(Axis(0));
        let (gs, gw, _) = conv2d_backward(&cache.pooled[mi], &params.spatial_w, cfg, &gq_m);
        g_spatial_w.zip_mut_with(&gw, |x, y| *x += y);
        let inv_c = 1.0 / c as f64;
        for y in 0..h {
            for x in 0..w {
                let gmean = gs[[0, y, x]] * inv_c;
                for ci in 0..c {
                    gcand[mi][[ci, y, x]] += gmean;
                }
                let arg = cache.max_idx[mi][[y, x]];
                gcand[mi][[arg, y, x]] += gs[[1, y, x]];
            }
        }
    }

    (
        gcand,
        ESKParams {
            reduce_w: g_reduce_w,
            reduce_b: g_reduce_b,
            expand_w: g_expand_w,
            expand_b: g_expand_b,
            spatial_w: g_spatial_w,
        },
    )
}

/// One attribute's fusion branch.
#[derive(Debug, Clone)]
pub struct BranchParams {
    /// `[C, 2C, 5, 5]`, symmetric pad 2.
    pub conv5: ConvParams,
    /// `[C, C, 4, 4]`, asymmetric pad (1, 2).
    pub conv4: ConvParams,
    /// Two-candidate refinement over the pre/post conv4x4 maps.
    pub esk: ESKParams,
}

impl BranchParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv5: ConvParams::zeros(channels, 2 * channels, 5, 5),
            conv4: ConvParams::zeros(channels, channels, 4, 4),
            esk: ESKParams::zeros(channels, 2),
        }
    }

    pub fn seeded(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv5: ConvParams::seeded(channels, 2 * channels, 5, 5, rng),
            conv4: ConvParams::seeded(channels, channels, 4, 4, rng),
            esk: ESKParams::seeded(channels, 2, rng),
        }
    }
}

impl ParamBundle for BranchParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.conv5
            .for_each(&mut |name, v| f(&format!("conv5.{name}"), v));
        self.conv4
            .for_each(&mut |name, v| f(&format!("conv4.{name}"), v));
        self.esk
            .for_each(&mut |name, v| f(&format!("esk.{name}"), v));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv5
            .for_each_mut(&mut |name, v| f(&format!("conv5.{name}"), v));
        self.conv4
            .for_each_mut(&mut |name, v| f(&format!("conv4.{name}"), v));
        self.esk
            .for_each_mut(&mut |name, v| f(&format!("esk.{name}"), v));
    }
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    pub concat: Array3<f64>,
    pub pre5: Array3<f64>,
    pub esk_cache: EskCache,
}

/// Fuse one attribute's view of the two modality features. Spatial size and
/// channel count are preserved.
pub fn branch_forward(
    rgb: &Array3<f64>,
    tir: &Array3<f64>,
    params: &BranchParams,
) -> Result<(Array3<f64>, BranchCache)> {
    if rgb.dim() != tir.dim() {
        return Err(Error::ShapeMismatch {
            context: "branch modality features",
            expected: rgb.shape().to_vec(),
            got: tir.shape().to_vec(),
        });
    }
    let (c, h, w) = rgb.dim();
    let mut concat = Array3::<f64>::zeros((2 * c, h, w));
    concat.slice_mut(s![..c, .., ..]).assign(rgb);
    concat.slice_mut(s![c.., .., ..]).assign(tir);
    let pre5 = conv2d_forward(&concat, &params.conv5.weight, &params.conv5.bias, ConvCfg::new(1, 2))?;
    let t1 = relu(&pre5);
    let t2 = conv2d_forward(
        &t1,
        &params.conv4.weight,
        &params.conv4.bias,
        ConvCfg::asymmetric(1, 1, 2),
    )?;
    let (out, esk_cache) = esk_select(&[t1, t2], &params.esk)?;
    Ok((
        out.selected,
        BranchCache {
            concat,
            pre5,
            esk_cache,
        },
    ))
}

/// Gradients w.r.t. both modality inputs and all branch parameters.
pub fn branch_backward(
    params: &BranchParams,
    cache: &BranchCache,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>, BranchParams) {
    let (gcand, g_esk) = esk_backward(&params.esk, &cache.esk_cache, grad_out);
    let t1 = &cache.esk_cache.candidates[0];
    let (g_t1_conv, g_w4, g_b4) = conv2d_backward(
        t1,
        &params.conv4.weight,
        ConvCfg::asymmetric(1, 1, 2),
        &gcand[1],
    );
    let g_t1 = &gcand[0] + &g_t1_conv;
    let g_pre5 = relu_backward(&cache.pre5, &g_t1);
    let (g_concat, g_w5, g_b5) =
        conv2d_backward(&cache.concat, &params.conv5.weight, ConvCfg::new(1, 2), &g_pre5);
    let c = cache.concat.dim().0 / 2;
    let g_rgb = g_concat.slice(s![..c, .., ..]).to_owned();
    let g_tir = g_concat.slice(s![c.., .., ..]).to_owned();
    (
        g_rgb,
        g_tir,
        BranchParams {
            conv5: ConvParams {
                weight: g_w5,
                bias: g_b5,
            },
            conv4: ConvParams {
                weight: g_w4,
                bias: g_b4,
            },
            esk: g_esk,
        },
    )
}

/// Aggregation over the five branch outputs: the same selective block with
/// five candidate heads.
#[derive(Debug, Clone)]
pub struct AggregationParams {
    pub esk: ESKParams,
}

impl AggregationParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            esk: ESKParams::zeros(channels, AttributeId::ALL.len()),
        }
    }

    pub fn seeded(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            esk: ESKParams::seeded(channels, AttributeId::ALL.len(), rng),
        }
    }
}

impl ParamBundle for AggregationParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.esk.for_each(f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.esk.for_each_mut(f);
    }
}

/// Select across the five branch outputs.
pub fn aggregate(
    branch_outputs: &[Array3<f64>],
    params: &AggregationParams,
) -> Result<(EskOutput, EskCache)> {
    if branch_outputs.len() != AttributeId::ALL.len() {
        return Err(Error::BranchCountMismatch {
            got: branch_outputs.len(),
        });
    }
    esk_select(branch_outputs, &params.esk)
}

pub fn aggregate_backward(
    params: &AggregationParams,
    cache: &EskCache,
    grad_out: &Array3<f64>,
) -> (Vec<Array3<f64>>, ESKParams) {
    esk_backward(&params.esk, cache, grad_out)
}

/// Elementwise combine used by the ablation variant. Mean keeps the
/// residual magnitude comparable to a single branch; Add is the literal
/// alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumCombine {
    Mean,
    Add,
}

impl SumCombine {
    pub fn name(self) -> &'static str {
        match self {
            SumCombine::Mean => "mean",
            SumCombine::Add => "add",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mean" => Ok(SumCombine::Mean),
            "add" => Ok(SumCombine::Add),
            other => Err(Error::UnknownName {
                what: "sum combine",
                value: other.to_string(),
            }),
        }
    }
}

/// How branch outputs are combined into the residual V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// All five branches, combined by the aggregation module.
    Aggregate,
    /// All five branches, combined elementwise (ablation).
    SumBranches(SumCombine),
    /// A single branch's output used directly (per-attribute training).
    Single(AttributeId),
}

/// All fusion parameters at one backbone level.
#[derive(Debug, Clone)]
pub struct LevelFusionParams {
    /// One branch per attribute, in [`AttributeId::ALL`] order.
    pub branches: Vec<BranchParams>,
    /// Present only for the aggregation variant.
    pub aggregation: Option<AggregationParams>,
}

impl LevelFusionParams {
    pub fn zeros(channels: usize, with_aggregation: bool) -> Self {
        Self {
            branches: AttributeId::ALL
                .iter()
                .map(|_| BranchParams::zeros(channels))
                .collect(),
            aggregation: with_aggregation.then(|| AggregationParams::zeros(channels)),
        }
    }

    pub fn seeded(channels: usize, with_aggregation: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            branches: AttributeId::ALL
                .iter()
                .map(|_| BranchParams::seeded(channels, rng))
                .collect(),
            aggregation: with_aggregation.then(|| AggregationParams::seeded(channels, rng)),
        }
    }
}

impl ParamBundle for LevelFusionParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (attr, branch) in AttributeId::ALL.iter().zip(&self.branches) {
            branch.for_each(&mut |name, v| f(&format!("branch.{}.{name}", attr.code()), v));
        }
        if let Some(agg) = &self.aggregation {
            agg.for_each(&mut |name, v| f(&format!("agg.{name}"), v));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (attr, branch) in AttributeId::ALL.iter().zip(&mut self.branches) {
            branch.for_each_mut(&mut |name, v| f(&format!("branch.{}.{name}", attr.code()), v));
        }
        if let Some(agg) = &mut self.aggregation {
            agg.for_each_mut(&mut |name, v| f(&format!("agg.{name}"), v));
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusedLayerCache {
    pub mode: FusionMode,
    pub rgb_conv: ConvStageCache,
    pub tir_conv: ConvStageCache,
    /// Attribute index and cache for every branch that ran.
    pub branch_caches: Vec<(usize, BranchCache)>,
    pub agg_cache: Option<EskCache>,
    pub rgb_post: PostStageCache,
    pub tir_post: PostStageCache,
}

/// Parameter gradients produced by [`fused_layer_backward`]. Only the
/// branches that ran appear; aggregation gradients exist only in
/// [`FusionMode::Aggregate`].
#[derive(Debug, Clone)]
pub struct FusedLayerGrads {
    pub rgb_conv: ConvParams,
    pub tir_conv: ConvParams,
    pub branches: Vec<(usize, BranchParams)>,
    pub aggregation: Option<ESKParams>,
}

/// One fused backbone level: per-modality conv stage, branch fusion into a
/// shared residual V added to both streams, then the level's normalization
/// and pooling.
pub fn fused_layer_forward(
    rgb_in: &Array3<f64>,
    tir_in: &Array3<f64>,
    rgb_conv: &ConvParams,
    tir_conv: &ConvParams,
    spec: &ConvLayerSpec,
    fusion: &LevelFusionParams,
    mode: FusionMode,
) -> Result<(Array3<f64>, Array3<f64>, FusedLayerCache)> {
    let (rgb_mid, rgb_cache) = conv_stage_forward(rgb_in, rgb_conv, spec)?;
    let (tir_mid, tir_cache) = conv_stage_forward(tir_in, tir_conv, spec)?;

    let mut branch_caches = Vec::new();
    let mut agg_cache = None;
    let v = match mode {
        FusionMode::Single(attr) => {
            let i = attr.index();
            let (u, bc) = branch_forward(&rgb_mid, &tir_mid, &fusion.branches[i])?;
            branch_caches.push((i, bc));
            u
        }
        FusionMode::SumBranches(combine) => {
            let mut acc: Option<Array3<f64>> = None;
            for (i, branch) in fusion.branches.iter().enumerate() {
                let (u, bc) = branch_forward(&rgb_mid, &tir_mid, branch)?;
                branch_caches.push((i, bc));
                match &mut acc {
                    Some(total) => total.zip_mut_with(&u, |a, b| *a += b),
                    None => acc = Some(u),
                }
            }
            let mut total = acc.expect("five branches");
            if combine == SumCombine::Mean {
                total.mapv_inplace(|x| x / AttributeId::ALL.len() as f64);
            }
            total
        }
        FusionMode::Aggregate => {
            let mut outputs = Vec::with_capacity(AttributeId::ALL.len());
            for (i, branch) in fusion.branches.iter().enumerate() {
                let (u, bc) = branch_forward(&rgb_mid, &tir_mid, branch)?;
                branch_caches.push((i, bc));
                outputs.push(u);
            }
            let agg = fusion
                .aggregation
                .as_ref()
                .expect("aggregation params required in aggregate mode");
            let (out, ac) = aggregate(&outputs, agg)?;
            agg_cache = Some(ac);
            out.selected
        }
    };

    let rgb_sum = &rgb_mid + &v;
    let tir_sum = &tir_mid + &v;
    let (rgb_out, rgb_post) = post_stage_forward(&rgb_sum, spec);
    let (tir_out, tir_post) = post_stage_forward(&tir_sum, spec);
    Ok((
        rgb_out,
        tir_out,
        FusedLayerCache {
            mode,
            rgb_conv: rgb_cache,
            tir_conv: tir_cache,
            branch_caches,
            agg_cache,
            rgb_post,
            tir_post,
        },
    ))
}

/// Backward through one fused level. Returns gradients w.r.t. the two level
/// inputs plus all parameter gradients.
pub fn fused_layer_backward(
    rgb_conv: &ConvParams,
    tir_conv: &ConvParams,
    spec: &ConvLayerSpec,
    fusion: &LevelFusionParams,
    cache: &FusedLayerCache,
    grad_rgb_out: &Array3<f64>,
    grad_tir_out: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>, FusedLayerGrads) {
    let g_rgb_sum = post_stage_backward(spec, &cache.rgb_post, grad_rgb_out);
    let g_tir_sum = post_stage_backward(spec, &cache.tir_post, grad_tir_out);
    let g_v = &g_rgb_sum + &g_tir_sum;
    let mut g_rgb_mid = g_rgb_sum;
    let mut g_tir_mid = g_tir_sum;

    let mut branch_grads = Vec::new();
    let mut agg_grads = None;
    match cache.mode {
        FusionMode::Single(_) => {
            let (i, bc) = &cache.branch_caches[0];
            let (g_r, g_t, g_p) = branch_backward(&fusion.branches[*i], bc, &g_v);
            g_rgb_mid += &g_r;
            g_tir_mid += &g_t;
            branch_grads.push((*i, g_p));
        }
        FusionMode::SumBranches(combine) => {
            let g_u = match combine {
                SumCombine::Mean => g_v.mapv(|x| x / AttributeId::ALL.len() as f64),
                SumCombine::Add => g_v.clone(),
            };
            for (i, bc) in &cache.branch_caches {
                let (g_r, g_t, g_p) = branch_backward(&fusion.branches[*i], bc, &g_u);
                g_rgb_mid += &g_r;
                g_tir_mid += &g_t;
                branch_grads.push((*i, g_p));
            }
        }
        FusionMode::Aggregate => {
            let agg = fusion.aggregation.as_ref().expect("aggregation params");
            let ac = cache.agg_cache.as_ref().expect("aggregation cache");
            let (g_outputs, g_agg) = aggregate_backward(agg, ac, &g_v);
            agg_grads = Some(g_agg);
            for ((i, bc), g_u) in cache.branch_caches.iter().zip(&g_outputs) {
                let (g_r, g_t, g_p) = branch_backward(&fusion.branches[*i], bc, g_u);
                g_rgb_mid += &g_r;
                g_tir_mid += &g_t;
                branch_grads.push((*i, g_p));
            }
        }
    }

    let (g_rgb_in, g_rgb_conv) = conv_stage_backward(rgb_conv, spec, &cache.rgb_conv, &g_rgb_mid);
    let (g_tir_in, g_tir_conv) = conv_stage_backward(tir_conv, spec, &cache.tir_conv, &g_tir_mid);
    (
        g_rgb_in,
        g_tir_in,
        FusedLayerGrads {
            rgb_conv: g_rgb_conv,
            tir_conv: g_tir_conv,
            branches: branch_grads,
            aggregation: agg_grads,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::conv_layer_forward;
    use crate::gradcheck::{max_relative_error, numeric_gradient, seeded_uniform, FD_EPS};
    use crate::params;
    use ndarray::{Ix1, Ix2, Ix3, Ix4};
    use rand::SeedableRng;

    /// Selection params with weights large enough to keep gradients well
    /// scaled and a positive reduce bias so the bottleneck stays active.
    fn esk_toy(channels: usize, m: usize, seed: u64) -> ESKParams {
        let d = ESKParams::reduced_dim(channels);
        ESKParams {
            reduce_w: seeded_uniform(Ix2(d, channels), seed, -0.5, 0.5),
            reduce_b: seeded_uniform(Ix1(d), seed + 1, 0.1, 0.4),
            expand_w: (0..m)
                .map(|i| seeded_uniform(Ix2(channels, d), seed + 2 + i as u64, -0.5, 0.5))
                .collect(),
            expand_b: (0..m)
                .map(|i| seeded_uniform(Ix1(channels), seed + 10 + i as u64, -0.2, 0.2))
                .collect(),
            spatial_w: seeded_uniform(Ix4(1, 2, 7, 7), seed + 20, -0.3, 0.3),
        }
    }

    /// Like [`esk_toy`] but with a strictly positive bottleneck so no ReLU
    /// unit is dead when the pooled descriptor is positive.
    fn esk_active(channels: usize, m: usize, seed: u64) -> ESKParams {
        let mut p = esk_toy(channels, m, seed);
        p.reduce_w = seeded_uniform(p.reduce_w.raw_dim(), seed + 30, 0.05, 0.5);
        p
    }

    fn branch_toy(channels: usize, seed: u64) -> BranchParams {
        BranchParams {
            conv5: ConvParams {
                weight: seeded_uniform(Ix4(channels, 2 * channels, 5, 5), seed, -0.2, 0.2),
                bias: seeded_uniform(Ix1(channels), seed + 1, 0.05, 0.2),
            },
            conv4: ConvParams {
                weight: seeded_uniform(Ix4(channels, channels, 4, 4), seed + 2, -0.2, 0.2),
                bias: seeded_uniform(Ix1(channels), seed + 3, -0.1, 0.1),
            },
            esk: esk_toy(channels, 2, seed + 4),
        }
    }

    #[test]
    fn attribute_ids_round_trip() {
        assert_eq!(AttributeId::ALL.len(), 5);
        for (i, attr) in AttributeId::ALL.iter().enumerate() {
            assert_eq!(attr.index(), i);
            assert_eq!(AttributeId::from_code(attr.code()).unwrap(), *attr);
        }
        assert_eq!(
            AttributeId::from_code("thermal-crossover").unwrap(),
            AttributeId::ThermalCrossover
        );
        assert!(AttributeId::from_code("bogus").is_err());
    }

    #[test]
    fn esk_weights_sum_to_one() {
        let params = esk_toy(4, 3, 100);
        let candidates: Vec<_> = (0..3)
            .map(|i| seeded_uniform(Ix3(4, 5, 5), 110 + i, -1.0, 1.0))
            .collect();
        let (out, _) = esk_select(&candidates, &params).unwrap();
        for ci in 0..4 {
            let s: f64 = (0..3).map(|mi| out.channel_weights[[mi, ci]]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for y in 0..5 {
            for x in 0..5 {
                let s: f64 = (0..3).map(|mi| out.spatial_weights[[mi, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn esk_equal_inputs_give_uniform_weights_and_identity() {
        let mut params = esk_toy(3, 4, 120);
        // Symmetric heads: all expansion heads identical.
        let w0 = params.expand_w[0].clone();
        let b0 = params.expand_b[0].clone();
        for m in 1..4 {
            params.expand_w[m] = w0.clone();
            params.expand_b[m] = b0.clone();
        }
        let common = seeded_uniform(Ix3(3, 4, 4), 121, -1.0, 1.0);
        let candidates = vec![common.clone(); 4];
        let (out, _) = esk_select(&candidates, &params).unwrap();
        for v in out.channel_weights.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for v in out.spatial_weights.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for (s, c) in out.selected.iter().zip(common.iter()) {
            assert!((s - c).abs() < 1e-12);
        }
    }

    #[test]
    fn esk_rejects_invalid_inputs() {
        let params = esk_toy(2, 2, 130);
        let a = seeded_uniform(Ix3(2, 3, 3), 131, -1.0, 1.0);
        assert!(matches!(
            esk_select(&[a.clone()], &params),
            Err(Error::TooFewCandidates { got: 1 })
        ));
        let b = seeded_uniform(Ix3(2, 4, 3), 132, -1.0, 1.0);
        assert!(esk_select(&[a.clone(), b], &params).is_err());
        // Three candidates against a two-head parameter set.
        let params3 = esk_toy(3, 2, 134);
        assert!(esk_select(&[a.clone(), a.clone(), a], &params3).is_err());
        // Channel count differs from the parameter set.
        let d = seeded_uniform(Ix3(3, 3, 3), 135, -1.0, 1.0);
        assert!(esk_select(&[d.clone(), d], &params).is_err());
    }

    #[test]
    fn esk_gradients_match_finite_differences() {
        let params = esk_toy(2, 2, 140);
        let candidates: Vec<_> = (0..2)
            .map(|i| seeded_uniform(Ix3(2, 3, 3), 145 + i, -1.0, 1.0))
            .collect();
        let (out, cache) = esk_select(&candidates, &params).unwrap();
        let r = seeded_uniform(out.selected.raw_dim(), 150, -1.0, 1.0);
        let (gcand, gparams) = esk_backward(&params, &cache, &r);

        let loss = |p: &ESKParams, cands: &[Array3<f64>]| {
            let (o, _) = esk_select(cands, p).unwrap();
            (&o.selected * &r).sum()
        };

        for mi in 0..2 {
            let ng = numeric_gradient(
                |probe| {
                    let mut cands = candidates.clone();
                    cands[mi] = probe.clone();
                    loss(&params, &cands)
                },
                &candidates[mi],
                FD_EPS,
            );
            assert!(
                max_relative_error(&ng, &gcand[mi]) < 1e-6,
                "candidate {mi} gradient"
            );
        }

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.reduce_w = probe.clone();
                loss(&p, &candidates)
            },
            &params.reduce_w,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gparams.reduce_w) < 1e-6, "reduce_w");

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.reduce_b = probe.clone();
                loss(&p, &candidates)
            },
            &params.reduce_b,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gparams.reduce_b) < 1e-6, "reduce_b");

        for mi in 0..2 {
            let ng = numeric_gradient(
                |probe| {
                    let mut p = params.clone();
                    p.expand_w[mi] = probe.clone();
                    loss(&p, &candidates)
                },
                &params.expand_w[mi],
                FD_EPS,
            );
            assert!(
                max_relative_error(&ng, &gparams.expand_w[mi]) < 1e-6,
                "expand_w {mi}"
            );
            let ng = numeric_gradient(
                |probe| {
                    let mut p = params.clone();
                    p.expand_b[mi] = probe.clone();
                    loss(&p, &candidates)
                },
                &params.expand_b[mi],
                FD_EPS,
            );
            assert!(
                max_relative_error(&ng, &gparams.expand_b[mi]) < 1e-6,
                "expand_b {mi}"
            );
        }

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.spatial_w = probe.clone();
                loss(&p, &candidates)
            },
            &params.spatial_w,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gparams.spatial_w) < 1e-6, "spatial_w");
    }

    #[test]
    fn branch_preserves_shape() {
        let params = branch_toy(8, 160);
        let rgb = seeded_uniform(Ix3(8, 6, 6), 161, -1.0, 1.0);
        let tir = seeded_uniform(Ix3(8, 6, 6), 162, -1.0, 1.0);
        let (out, _) = branch_forward(&rgb, &tir, &params).unwrap();
        assert_eq!(out.dim(), (8, 6, 6));
    }

    #[test]
    fn branch_zero_inputs_zero_biases_give_zero() {
        let mut params = branch_toy(4, 170);
        params.conv5.bias.fill(0.0);
        params.conv4.bias.fill(0.0);
        let zero = Array3::<f64>::zeros((4, 5, 5));
        let (out, _) = branch_forward(&zero, &zero, &params).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn branch_rejects_shape_mismatch() {
        let params = branch_toy(4, 171);
        let rgb = Array3::<f64>::zeros((4, 5, 5));
        let tir = Array3::<f64>::zeros((4, 6, 5));
        assert!(branch_forward(&rgb, &tir, &params).is_err());
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let params = branch_toy(2, 180);
        let rgb = seeded_uniform(Ix3(2, 5, 5), 181, -1.0, 1.0);
        let tir = seeded_uniform(Ix3(2, 5, 5), 182, -1.0, 1.0);
        let (out, cache) = branch_forward(&rgb, &tir, &params).unwrap();
        let r = seeded_uniform(out.raw_dim(), 183, -1.0, 1.0);
        let (g_rgb, g_tir, gp) = branch_backward(&params, &cache, &r);

        let loss = |p: &BranchParams, rg: &Array3<f64>, ti: &Array3<f64>| {
            let (o, _) = branch_forward(rg, ti, p).unwrap();
            (&o * &r).sum()
        };

        let ng = numeric_gradient(|probe| loss(&params, probe, &tir), &rgb, FD_EPS);
        assert!(max_relative_error(&ng, &g_rgb) < 1e-6, "rgb input");
        let ng = numeric_gradient(|probe| loss(&params, &rgb, probe), &tir, FD_EPS);
        assert!(max_relative_error(&ng, &g_tir) < 1e-6, "tir input");

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.conv5.weight = probe.clone();
                loss(&p, &rgb, &tir)
            },
            &params.conv5.weight,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gp.conv5.weight) < 1e-6, "conv5 weight");

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.conv5.bias = probe.clone();
                loss(&p, &rgb, &tir)
            },
            &params.conv5.bias,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gp.conv5.bias) < 1e-6, "conv5 bias");

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.conv4.weight = probe.clone();
                loss(&p, &rgb, &tir)
            },
            &params.conv4.weight,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gp.conv4.weight) < 1e-6, "conv4 weight");

        let ng = numeric_gradient(
            |probe| {
                let mut p = params.clone();
                p.esk.reduce_w = probe.clone();
                loss(&p, &rgb, &tir)
            },
            &params.esk.reduce_w,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &gp.esk.reduce_w) < 1e-6, "esk reduce");
    }

    #[test]
    fn aggregate_requires_five_inputs() {
        let params = AggregationParams {
            esk: esk_toy(2, 5, 190),
        };
        let inputs: Vec<_> = (0..4)
            .map(|i| seeded_uniform(Ix3(2, 3, 3), 191 + i, -1.0, 1.0))
            .collect();
        assert!(matches!(
            aggregate(&inputs, &params),
            Err(Error::BranchCountMismatch { got: 4 })
        ));
    }

    #[test]
    fn aggregate_identical_inputs_permutation_invariant() {
        let params = AggregationParams {
            esk: esk_toy(3, 5, 200),
        };
        let common = seeded_uniform(Ix3(3, 4, 4), 201, -1.0, 1.0);
        let inputs = vec![common.clone(); 5];
        let (out1, _) = aggregate(&inputs, &params).unwrap();
        let mut permuted = inputs.clone();
        permuted.rotate_left(2);
        let (out2, _) = aggregate(&permuted, &params).unwrap();
        for (a, b) in out1.selected.iter().zip(out2.selected.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn aggregate_near_uniform_weights_pass_one_fifth() {
        // Tiny weights keep both attention families near uniform, so a
        // single nonzero branch contributes about a fifth of its map.
        let mut rng = ChaCha8Rng::seed_from_u64(210);
        let params = AggregationParams::seeded(4, &mut rng);
        let hot = seeded_uniform(Ix3(4, 3, 3), 211, 0.5, 1.5);
        let mut inputs = vec![Array3::<f64>::zeros((4, 3, 3)); 5];
        inputs[2] = hot.clone();
        let (out, _) = aggregate(&inputs, &params).unwrap();
        for (v, u) in out.selected.iter().zip(hot.iter()) {
            let expect = u / 5.0;
            assert!(
                (v - expect).abs() < 0.02 * u.abs(),
                "got {v}, expected about {expect}"
            );
        }
    }

    fn toy_spec() -> ConvLayerSpec {
        ConvLayerSpec {
            kernel: 3,
            stride: 1,
            out_channels: 2,
            pooled: true,
            normalized: true,
        }
    }

    fn toy_level(seed: u64) -> (ConvParams, ConvParams, LevelFusionParams) {
        let rgb_conv = ConvParams {
            weight: seeded_uniform(Ix4(2, 2, 3, 3), seed, -0.4, 0.4),
            bias: seeded_uniform(Ix1(2), seed + 1, 0.0, 0.2),
        };
        let tir_conv = ConvParams {
            weight: seeded_uniform(Ix4(2, 2, 3, 3), seed + 2, -0.4, 0.4),
            bias: seeded_uniform(Ix1(2), seed + 3, 0.0, 0.2),
        };
        let fusion = LevelFusionParams {
            branches: (0..5).map(|i| branch_toy(2, seed + 10 + i as u64 * 40)).collect(),
            aggregation: Some(AggregationParams {
                esk: esk_toy(2, 5, seed + 300),
            }),
        };
        (rgb_conv, tir_conv, fusion)
    }

    #[test]
    fn fused_layer_with_zero_branches_is_plain_backbone() {
        let spec = toy_spec();
        let (rgb_conv, tir_conv, mut fusion) = toy_level(220);
        for branch in &mut fusion.branches {
            *branch = BranchParams::zeros(2);
        }
        let rgb_in = seeded_uniform(Ix3(2, 7, 7), 221, -1.0, 1.0);
        let tir_in = seeded_uniform(Ix3(2, 7, 7), 222, -1.0, 1.0);
        let (rgb_out, tir_out, _) = fused_layer_forward(
            &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion,
            FusionMode::Aggregate,
        )
        .unwrap();
        let (rgb_plain, _, _) = conv_layer_forward(&rgb_in, &rgb_conv, &spec).unwrap();
        let (tir_plain, _, _) = conv_layer_forward(&tir_in, &tir_conv, &spec).unwrap();
        for (a, b) in rgb_out.iter().zip(rgb_plain.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in tir_out.iter().zip(tir_plain.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fused_layer_shapes_match_across_modes() {
        let spec = toy_spec();
        let (rgb_conv, tir_conv, fusion) = toy_level(230);
        let rgb_in = seeded_uniform(Ix3(2, 7, 7), 231, -1.0, 1.0);
        let tir_in = seeded_uniform(Ix3(2, 7, 7), 232, -1.0, 1.0);
        for mode in [
            FusionMode::Aggregate,
            FusionMode::SumBranches(SumCombine::Mean),
            FusionMode::SumBranches(SumCombine::Add),
            FusionMode::Single(AttributeId::Occlusion),
        ] {
            let (rgb_out, tir_out, _) = fused_layer_forward(
                &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion, mode,
            )
            .unwrap();
            // 7x7 -> conv3 s1 -> 5x5 -> pool3 s2 -> 2x2
            assert_eq!(rgb_out.dim(), (2, 2, 2));
            assert_eq!(tir_out.dim(), (2, 2, 2));
        }
    }

    #[test]
    fn single_mode_ignores_other_branches() {
        let spec = toy_spec();
        let (rgb_conv, tir_conv, mut fusion) = toy_level(240);
        let rgb_in = seeded_uniform(Ix3(2, 7, 7), 241, -1.0, 1.0);
        let tir_in = seeded_uniform(Ix3(2, 7, 7), 242, -1.0, 1.0);
        let mode = FusionMode::Single(AttributeId::ThermalCrossover);
        let (out1, _, cache) = fused_layer_forward(
            &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion, mode,
        )
        .unwrap();
        // Perturb every branch except the selected one.
        for i in 1..5 {
            fusion.branches[i] = branch_toy(2, 900 + i as u64);
        }
        let (out2, _, _) = fused_layer_forward(
            &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion, mode,
        )
        .unwrap();
        for (a, b) in out1.iter().zip(out2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(cache.branch_caches.len(), 1);
        assert_eq!(cache.branch_caches[0].0, 0);
    }

    #[test]
    fn fused_layer_gradients_match_finite_differences() {
        let spec = toy_spec();
        let (rgb_conv, tir_conv, fusion) = toy_level(250);
        let rgb_in = seeded_uniform(Ix3(2, 7, 7), 251, -1.0, 1.0);
        let tir_in = seeded_uniform(Ix3(2, 7, 7), 252, -1.0, 1.0);
        let (rgb_out, tir_out, cache) = fused_layer_forward(
            &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion,
            FusionMode::Aggregate,
        )
        .unwrap();
        let r1 = seeded_uniform(rgb_out.raw_dim(), 253, -1.0, 1.0);
        let r2 = seeded_uniform(tir_out.raw_dim(), 254, -1.0, 1.0);
        let (g_rgb_in, g_tir_in, grads) = fused_layer_backward(
            &rgb_conv, &tir_conv, &spec, &fusion, &cache, &r1, &r2,
        );

        let loss = |rc: &ConvParams, fu: &LevelFusionParams, ri: &Array3<f64>, ti: &Array3<f64>| {
            let (o1, o2, _) = fused_layer_forward(
                ri, ti, rc, &tir_conv, &spec, fu, FusionMode::Aggregate,
            )
            .unwrap();
            (&o1 * &r1).sum() + (&o2 * &r2).sum()
        };

        let ng = numeric_gradient(|p| loss(&rgb_conv, &fusion, p, &tir_in), &rgb_in, FD_EPS);
        assert!(max_relative_error(&ng, &g_rgb_in) < 1e-6, "rgb input");
        let ng = numeric_gradient(|p| loss(&rgb_conv, &fusion, &rgb_in, p), &tir_in, FD_EPS);
        assert!(max_relative_error(&ng, &g_tir_in) < 1e-6, "tir input");

        let ng = numeric_gradient(
            |p| {
                let mut rc = rgb_conv.clone();
                rc.weight = p.clone();
                loss(&rc, &fusion, &rgb_in, &tir_in)
            },
            &rgb_conv.weight,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &grads.rgb_conv.weight) < 1e-6, "conv weight");

        let ng = numeric_gradient(
            |p| {
                let mut fu = fusion.clone();
                fu.branches[3].conv5.weight = p.clone();
                loss(&rgb_conv, &fu, &rgb_in, &tir_in)
            },
            &fusion.branches[3].conv5.weight,
            FD_EPS,
        );
        let g_branch3 = &grads.branches.iter().find(|(i, _)| *i == 3).unwrap().1;
        assert!(max_relative_error(&ng, &g_branch3.conv5.weight) < 1e-6, "branch conv5");

        let agg = fusion.aggregation.as_ref().unwrap();
        let ng = numeric_gradient(
            |p| {
                let mut fu = fusion.clone();
                fu.aggregation.as_mut().unwrap().esk.expand_w[2] = p.clone();
                loss(&rgb_conv, &fu, &rgb_in, &tir_in)
            },
            &agg.esk.expand_w[2],
            FD_EPS,
        );
        let g_agg = grads.aggregation.as_ref().unwrap();
        assert!(max_relative_error(&ng, &g_agg.expand_w[2]) < 1e-6, "agg expand");

        let ng = numeric_gradient(
            |p| {
                let mut fu = fusion.clone();
                fu.aggregation.as_mut().unwrap().esk.spatial_w = p.clone();
                loss(&rgb_conv, &fu, &rgb_in, &tir_in)
            },
            &agg.esk.spatial_w,
            FD_EPS,
        );
        assert!(max_relative_error(&ng, &g_agg.spatial_w) < 1e-6, "agg spatial");
    }

    #[test]
    fn sum_mode_gradients_match_finite_differences() {
        let spec = toy_spec();
        let (rgb_conv, tir_conv, mut fusion) = toy_level(260);
        fusion.aggregation = None;
        let rgb_in = seeded_uniform(Ix3(2, 7, 7), 261, -1.0, 1.0);
        let tir_in = seeded_uniform(Ix3(2, 7, 7), 262, -1.0, 1.0);
        for combine in [SumCombine::Mean, SumCombine::Add] {
            let mode = FusionMode::SumBranches(combine);
            let (rgb_out, _, cache) = fused_layer_forward(
                &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fusion, mode,
            )
            .unwrap();
            let r = seeded_uniform(rgb_out.raw_dim(), 263, -1.0, 1.0);
            let zero = Array3::<f64>::zeros(rgb_out.raw_dim());
            let (_, _, grads) = fused_layer_backward(
                &rgb_conv, &tir_conv, &spec, &fusion, &cache, &r, &zero,
            );
            let ng = numeric_gradient(
                |p| {
                    let mut fu = fusion.clone();
                    fu.branches[1].conv4.weight = p.clone();
                    let (o, _, _) = fused_layer_forward(
                        &rgb_in, &tir_in, &rgb_conv, &tir_conv, &spec, &fu, mode,
                    )
                    .unwrap();
                    (&o * &r).sum()
                },
                &fusion.branches[1].conv4.weight,
                FD_EPS,
            );
            let g1 = &grads.branches.iter().find(|(i, _)| *i == 1).unwrap().1;
            assert!(max_relative_error(&ng, &g1.conv4.weight) < 1e-6);
            assert!(grads.aggregation.is_none());
        }
    }

    #[test]
    fn every_fusion_parameter_receives_gradient() {
        // A large conv5 bias keeps every pre-ReLU activation positive and a
        // positive bottleneck keeps every reduce unit active; any exact zero
        // in the gradients then indicates a structurally dead parameter.
        let mut params = branch_toy(2, 270);
        params.conv5.bias = seeded_uniform(Ix1(2), 274, 3.0, 3.5);
        params.esk = esk_active(2, 2, 275);
        let rgb = seeded_uniform(Ix3(2, 5, 5), 271, 0.1, 1.0);
        let tir = seeded_uniform(Ix3(2, 5, 5), 272, 0.1, 1.0);
        let (out, cache) = branch_forward(&rgb, &tir, &params).unwrap();
        assert!(
            cache.pre5.iter().all(|v| *v > 0.0),
            "test setup must keep the conv5 activations live"
        );
        let r = seeded_uniform(out.raw_dim(), 273, 0.5, 1.5);
        let (_, _, gp) = branch_backward(&params, &cache, &r);
        gp.for_each(&mut |name, view| {
            for (k, v) in view.iter().enumerate() {
                assert!(*v != 0.0, "branch parameter {name}[{k}] has zero gradient");
            }
        });

        let agg = AggregationParams {
            esk: esk_active(2, 5, 280),
        };
        let inputs: Vec<_> = (0..5)
            .map(|i| seeded_uniform(Ix3(2, 4, 4), 281 + i, 0.1, 1.0))
            .collect();
        let (aout, acache) = aggregate(&inputs, &agg).unwrap();
        let ar = seeded_uniform(aout.selected.raw_dim(), 290, 0.5, 1.5);
        let (_, g_agg) = aggregate_backward(&agg, &acache, &ar);
        g_agg.for_each(&mut |name, view| {
            for (k, v) in view.iter().enumerate() {
                assert!(*v != 0.0, "aggregation parameter {name}[{k}] has zero gradient");
            }
        });
    }

    #[test]
    fn level_param_names_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let with_agg = LevelFusionParams::seeded(2, true, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(300);
        let without_agg = LevelFusionParams::seeded(2, false, &mut rng2);
        let names: Vec<String> = {
            let mut v = Vec::new();
            with_agg.for_each(&mut |n, _| v.push(n.to_string()));
            v
        };
        assert!(names.contains(&"branch.tc.conv5.weight".to_string()));
        assert!(names.contains(&"branch.fm.esk.expand1.bias".to_string()));
        assert!(names.contains(&"agg.reduce.weight".to_string()));
        assert!(names.contains(&"agg.expand4.weight".to_string()));
        assert!(
            params::param_count(&with_agg) > params::param_count(&without_agg),
            "aggregation variant must carry strictly more parameters"
        );
    }
}
