//! Two parallel convolutional streams (RGB and thermal) plus target-patch
//! extraction.
//!
//! Each stream is the first three VGG-M-style convolution layers. A layer is
//! split into a conv stage (convolution + ReLU) and a post stage (optional
//! local response normalization, optional 3x3 stride-2 max pool) so that
//! fusion modules can insert themselves between the two.

use ndarray::{Array1, Array3, Array4, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::params::ParamBundle;
use crate::tensor::{
    conv2d_backward, conv2d_forward, lrn_backward, lrn_forward, maxpool2d_backward,
    maxpool2d_forward, relu, relu_backward, ConvCfg, LrnParams,
};

/// Interleaved 8-bit image, indexed `[y, x, channel]`.
pub type RawImage = Array3<u8>;

/// Fixed spatial size of every network input patch.
pub const PATCH_SIZE: usize = 107;

/// Subtracted from every raw pixel value during patch extraction.
pub const PIXEL_MEAN: f64 = 128.0;

/// Divides mean-subtracted pixels so network inputs sit near [-1, 1];
/// keeps activation scales usable by randomly initialized layers.
pub const PIXEL_SCALE: f64 = 128.0;

/// Normalization constants for layers with `normalized = true`.
pub const LRN: LrnParams = LrnParams {
    n: 5,
    k: 2.0,
    alpha: 1e-4,
    beta: 0.75,
};

/// Pool window and stride for layers with `pooled = true`.
pub const POOL_K: usize = 3;
pub const POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Tir,
}

/// Mean-subtracted network input, `[channels, 107, 107]`.
#[derive(Debug, Clone)]
pub struct Patch {
    pub data: Array3<f64>,
}

impl Patch {
    pub fn new(data: Array3<f64>) -> Self {
        let (_, h, w) = data.dim();
        assert_eq!((h, w), (PATCH_SIZE, PATCH_SIZE), "patch must be 107x107");
        Self { data }
    }
}

fn bilinear_tap(image: &RawImage, c: usize, sx: f64, sy: f64) -> Option<f64> {
    let (h, w, _) = image.dim();
    if sx < -0.5 || sx > w as f64 - 0.5 || sy < -0.5 || sy > h as f64 - 0.5 {
        return None;
    }
    let x0f = sx.floor();
    let y0f = sy.floor();
    let fx = sx - x0f;
    let fy = sy - y0f;
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let x0 = clamp(x0f, w);
    let x1 = clamp(x0f + 1.0, w);
    let y0 = clamp(y0f, h);
    let y1 = clamp(y0f + 1.0, h);
    let p = |yy: usize, xx: usize| image[[yy, xx, c]] as f64;
    Some(
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1)),
    )
}

/// Crop `bbox` (scaled by `context_scale` about its center) and resample it
/// bilinearly to 107x107 with half-pixel centers. Sample points inside the
/// image support are border-clamped and mean-subtracted; points outside
/// contribute zero.
pub fn extract_patch(image: &RawImage, bbox: &BoundingBox, context_scale: f64) -> Result<Patch> {
    assert!(context_scale > 0.0, "context_scale must be positive");
    let (h, w, c) = image.dim();
    let crop_w = bbox.w * context_scale;
    let crop_h = bbox.h * context_scale;
    let (cx, cy) = bbox.center();
    let crop_x = cx - crop_w / 2.0;
    let crop_y = cy - crop_h / 2.0;
    let overlaps = crop_x < w as f64 && crop_x + crop_w > 0.0 && crop_y < h as f64 && crop_y + crop_h > 0.0;
    if !overlaps {
        return Err(Error::BoxOutsideImage { img_w: w, img_h: h });
    }
    let mut data = Array3::<f64>::zeros((c, PATCH_SIZE, PATCH_SIZE));
    let n = PATCH_SIZE as f64;
    for oy in 0..PATCH_SIZE {
        let sy = crop_y + (oy as f64 + 0.5) * crop_h / n - 0.5;
        for ox in 0..PATCH_SIZE {
            let sx = crop_x + (ox as f64 + 0.5) * crop_w / n - 0.5;
            for ci in 0..c {
                if let Some(v) = bilinear_tap(image, ci, sx, sy) {
                    data[[ci, oy, ox]] = (v - PIXEL_MEAN) / PIXEL_SCALE;
                }
            }
        }
    }
    Ok(Patch { data })
}

/// One backbone layer: kernel size, stride, output channels, and whether a
/// 3x3 stride-2 max pool and local response normalization follow the ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub pooled: bool,
    pub normalized: bool,
}

/// The three-layer table: 7x7 s2 + LRN + pool, 5x5 s2 + LRN + pool, 3x3 s1.
pub fn vgg_m_specs(c1: usize, c2: usize, c3: usize) -> [ConvLayerSpec; 3] {
    [
        ConvLayerSpec {
            kernel: 7,
            stride: 2,
            out_channels: c1,
            pooled: true,
            normalized: true,
        },
        ConvLayerSpec {
            kernel: 5,
            stride: 2,
            out_channels: c2,
            pooled: true,
            normalized: true,
        },
        ConvLayerSpec {
            kernel: 3,
            stride: 1,
            out_channels: c3,
            pooled: false,
            normalized: false,
        },
    ]
}

/// Weights and bias of one convolution.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Self {
        Self {
            weight: Array4::zeros((out_c, in_c, kh, kw)),
            bias: Array1::zeros(out_c),
        }
    }

    /// He-scaled Gaussian weights (std sqrt(2/fan_in)), zero bias.
    pub fn seeded(out_c: usize, in_c: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        // He scaling keeps activation variance roughly constant through the
        // ReLU stack, so random checkpoints still produce usable features.
        let fan_in = (in_c * kh * kw) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
        Self {
            weight: Array4::from_shape_simple_fn((out_c, in_c, kh, kw), || dist.sample(rng)),
            bias: Array1::zeros(out_c),
        }
    }
}

impl ParamBundle for ConvParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("weight", self.weight.view().into_dyn());
        f("bias", self.bias.view().into_dyn());
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("weight", self.weight.view_mut().into_dyn());
        f("bias", self.bias.view_mut().into_dyn());
    }
}

/// One modality's three convolution layers.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub layers: Vec<ConvParams>,
}

impl StreamParams {
    pub fn seeded(specs: &[ConvLayerSpec; 3], in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(3);
        let mut c_in = in_channels;
        for spec in specs {
            layers.push(ConvParams::seeded(
                spec.out_channels,
                c_in,
                spec.kernel,
                spec.kernel,
                rng,
            ));
            c_in = spec.out_channels;
        }
        Self { layers }
    }
}

impl ParamBundle for StreamParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&mut |name, view| f(&format!("conv{}.{name}", i + 1), view));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&mut |name, view| f(&format!("conv{}.{name}", i + 1), view));
        }
    }
}

/// Both independent streams.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub rgb: StreamParams,
    pub tir: StreamParams,
}

impl BackboneParams {
    pub fn seeded(specs: &[ConvLayerSpec; 3], in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            rgb: StreamParams::seeded(specs, in_channels, &mut rng),
            tir: StreamParams::seeded(specs, in_channels, &mut rng),
        }
    }

    pub fn stream(&self, modality: Modality) -> &StreamParams {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
        }
    }
}

impl ParamBundle for BackboneParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.rgb
            .for_each(&mut |name, view| f(&format!("rgb.{name}"), view));
        self.tir
            .for_each(&mut |name, view| f(&format!("tir.{name}"), view));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.rgb
            .for_each_mut(&mut |name, view| f(&format!("rgb.{name}"), view));
        self.tir
            .for_each_mut(&mut |name, view| f(&format!("tir.{name}"), view));
    }
}

/// Cache for the conv + ReLU stage.
#[derive(Debug, Clone)]
pub struct ConvStageCache {
    pub input: Array3<f64>,
    pub pre_relu: Array3<f64>,
}

/// Convolution (valid, per-spec stride) followed by ReLU.
pub fn conv_stage_forward(
    x: &Array3<f64>,
    params: &ConvParams,
    spec: &ConvLayerSpec,
) -> Result<(Array3<f64>, ConvStageCache)> {
    let cfg = ConvCfg::new(spec.stride, 0);
    let pre = conv2d_forward(x, &params.weight, &params.bias, cfg)?;
    let out = relu(&pre);
    Ok((
        out,
        ConvStageCache {
            input: x.clone(),
            pre_relu: pre,
        },
    ))
}

pub fn conv_stage_backward(
    params: &ConvParams,
    spec: &ConvLayerSpec,
    cache: &ConvStageCache,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, ConvParams) {
    let g_pre = relu_backward(&cache.pre_relu, grad_out);
    let cfg = ConvCfg::new(spec.stride, 0);
    let (gx, gw, gb) = conv2d_backward(&cache.input, &params.weight, cfg, &g_pre);
    (gx, ConvParams { weight: gw, bias: gb })
}

/// Cache for the normalization + pooling stage.
#[derive(Debug, Clone)]
pub struct PostStageCache {
    pub lrn_input: Option<Array3<f64>>,
    pub pool_in_shape: Option<(usize, usize, usize)>,
    pub pool_argmax: Option<Array3<usize>>,
}

/// Optional LRN then optional 3x3 stride-2 max pool, per the layer spec.
pub fn post_stage_forward(x: &Array3<f64>, spec: &ConvLayerSpec) -> (Array3<f64>, PostStageCache) {
    let mut cache = PostStageCache {
        lrn_input: None,
        pool_in_shape: None,
        pool_argmax: None,
    };
    let mut cur = x.clone();
    if spec.normalized {
        cache.lrn_input = Some(cur.clone());
        cur = lrn_forward(&cur, LRN);
    }
    if spec.pooled {
        cache.pool_in_shape = Some(cur.dim());
        let (pooled, argmax) = maxpool2d_forward(&cur, POOL_K, POOL_STRIDE);
        cache.pool_argmax = Some(argmax);
        cur = pooled;
    }
    (cur, cache)
}

pub fn post_stage_backward(
    spec: &ConvLayerSpec,
    cache: &PostStageCache,
    grad_out: &Array3<f64>,
) -> Array3<f64> {
    let mut g = grad_out.clone();
    if spec.pooled {
        let argmax = cache.pool_argmax.as_ref().expect("pool cache");
        let shape = cache.pool_in_shape.expect("pool cache");
        g = maxpool2d_backward(argmax, shape, &g);
    }
    if spec.normalized {
        let x = cache.lrn_input.as_ref().expect("lrn cache");
        g = lrn_backward(x, LRN, &g);
    }
    g
}

/// Full backbone layer: conv stage then post stage.
pub fn conv_layer_forward(
    x: &Array3<f64>,
    params: &ConvParams,
    spec: &ConvLayerSpec,
) -> Result<(Array3<f64>, ConvStageCache, PostStageCache)> {
    let (mid, conv_cache) = conv_stage_forward(x, params, spec)?;
    let (out, post_cache) = post_stage_forward(&mid, spec);
    Ok((out, conv_cache, post_cache))
}

/// Per-layer caches for one modality's full pass.
#[derive(Debug, Clone)]
pub struct StreamCache {
    pub stages: Vec<(ConvStageCache, PostStageCache)>,
}

/// Run one modality stream; returns all three layer outputs (post-pool).
pub fn stream_forward(
    patch: &Patch,
    modality: Modality,
    params: &BackboneParams,
    specs: &[ConvLayerSpec; 3],
) -> Result<(Vec<Array3<f64>>, StreamCache)> {
    let stream = params.stream(modality);
    let mut outputs = Vec::with_capacity(3);
    let mut stages = Vec::with_capacity(3);
    let mut cur = patch.data.clone();
    for (layer, spec) in stream.layers.iter().zip(specs.iter()) {
        let (out, conv_cache, post_cache) = conv_layer_forward(&cur, layer, spec)?;
        outputs.push(out.clone());
        stages.push((conv_cache, post_cache));
        cur = out;
    }
    Ok((outputs, StreamCache { stages }))
}

/// Backpropagate a gradient at the last layer's output through the whole
/// stream. Returns per-layer parameter gradients (same order as layers).
pub fn stream_backward(
    stream: &StreamParams,
    specs: &[ConvLayerSpec; 3],
    cache: &StreamCache,
    grad_last: &Array3<f64>,
) -> Vec<ConvParams> {
    let mut grads: Vec<Option<ConvParams>> = vec![None; 3];
    let mut g = grad_last.clone();
    for i in (0..3).rev() {
        let (conv_cache, post_cache) = &cache.stages[i];
        let g_mid = post_stage_backward(&specs[i], post_cache, &g);
        let (gx, gp) = conv_stage_backward(&stream.layers[i], &specs[i], conv_cache, &g_mid);
        grads[i] = Some(gp);
        g = gx;
    }
    grads.into_iter().map(|g| g.expect("all layers visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient, seeded_uniform, FD_EPS};
    use crate::params;
    use ndarray::{Ix3, Ix4};

    fn const_image(h: usize, w: usize, value: u8) -> RawImage {
        Array3::from_elem((h, w, 3), value)
    }

    /// Horizontal gradient image: pixel (y, x, c) = x * 2 clipped to u8.
    fn ramp_image(h: usize, w: usize) -> RawImage {
        Array3::from_shape_fn((h, w, 3), |(_, x, _)| ((x * 2) % 256) as u8)
    }

    #[test]
    fn patch_from_constant_image_is_constant() {
        let img = const_image(60, 80, 200);
        let b = BoundingBox::new(10.0, 10.0, 40.0, 30.0).unwrap();
        let patch = extract_patch(&img, &b, 1.0).unwrap();
        assert_eq!(patch.data.dim(), (3, PATCH_SIZE, PATCH_SIZE));
        for v in patch.data.iter() {
            assert!((v - (200.0 - PIXEL_MEAN) / PIXEL_SCALE).abs() < 1e-9);
        }
    }

    #[test]
    fn full_image_box_resamples_whole_image() {
        let img = ramp_image(50, 70);
        let b = BoundingBox::new(0.0, 0.0, 70.0, 50.0).unwrap();
        let patch = extract_patch(&img, &b, 1.0).unwrap();
        // Leftmost output column samples near x=0, rightmost near x=69.
        let left = patch.data[[0, 50, 0]] * PIXEL_SCALE + PIXEL_MEAN;
        let right = patch.data[[0, 50, PATCH_SIZE - 1]] * PIXEL_SCALE + PIXEL_MEAN;
        assert!(left < 2.0, "left column {left}");
        assert!(right > 135.0, "right column {right}");
    }

    /// Independent nearest-4 resampler used as an oracle, written directly
    /// from the half-pixel mapping definition.
    fn oracle_resample(img: &RawImage, c: usize, crop: (f64, f64, f64, f64)) -> Array3<f64> {
        let (cx, cy, cw, ch) = crop;
        let (h, w, _) = img.dim();
        let mut out = Array3::<f64>::zeros((1, PATCH_SIZE, PATCH_SIZE));
        for oy in 0..PATCH_SIZE {
            for ox in 0..PATCH_SIZE {
                let sx = cx + (ox as f64 + 0.5) / PATCH_SIZE as f64 * cw - 0.5;
                let sy = cy + (oy as f64 + 0.5) / PATCH_SIZE as f64 * ch - 0.5;
                if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                    continue;
                }
                let gx = |xi: i64| xi.clamp(0, w as i64 - 1) as usize;
                let gy = |yi: i64| yi.clamp(0, h as i64 - 1) as usize;
                let x0 = sx.floor() as i64;
                let y0 = sy.floor() as i64;
                let tx = sx - x0 as f64;
                let ty = sy - y0 as f64;
                let mut acc = 0.0;
                for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
                    for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
                        acc += wy * wx * img[[gy(y0 + dy), gx(x0 + dx), c]] as f64;
                    }
                }
                out[[0, oy, ox]] = (acc - PIXEL_MEAN) / PIXEL_SCALE;
            }
        }
        out
    }

    #[test]
    fn gradient_crop_matches_reference_resampler() {
        let img = ramp_image(48, 64);
        let b = BoundingBox::new(5.5, 3.25, 31.0, 22.5).unwrap();
        let patch = extract_patch(&img, &b, 1.0).unwrap();
        let oracle = oracle_resample(&img, 0, (5.5, 3.25, 31.0, 22.5));
        for (pv, ov) in patch.data.index_axis(ndarray::Axis(0), 0).iter().zip(oracle.index_axis(ndarray::Axis(0), 0).iter()) {
            assert!((pv - ov).abs() < 1e-5, "{pv} vs {ov}");
        }
    }

    #[test]
    fn context_scale_widens_the_crop() {
        let img = ramp_image(48, 64);
        let b = BoundingBox::new(20.0, 20.0, 16.0, 12.0).unwrap();
        let patch = extract_patch(&img, &b, 2.0).unwrap();
        let oracle = oracle_resample(&img, 0, (12.0, 14.0, 32.0, 24.0));
        for (pv, ov) in patch.data.index_axis(ndarray::Axis(0), 0).iter().zip(oracle.index_axis(ndarray::Axis(0), 0).iter()) {
            assert!((pv - ov).abs() < 1e-5);
        }
    }

    #[test]
    fn box_fully_outside_is_an_error() {
        let img = const_image(40, 40, 10);
        let b = BoundingBox::new(100.0, 100.0, 10.0, 10.0).unwrap();
        assert!(matches!(
            extract_patch(&img, &b, 1.0),
            Err(Error::BoxOutsideImage { .. })
        ));
    }

    #[test]
    fn box_partially_outside_pads_with_zero() {
        let img = const_image(40, 40, 255);
        // Left half of the crop hangs off the image.
        let b = BoundingBox::new(-20.0, 10.0, 40.0, 20.0).unwrap();
        let patch = extract_patch(&img, &b, 1.0).unwrap();
        // Output column 10 maps to sx = -20 + 10.5/107*40 - 0.5 < -0.5.
        assert_eq!(patch.data[[0, 50, 10]], 0.0);
        // Far right column lies inside the image.
        assert!(
            (patch.data[[0, 50, PATCH_SIZE - 1]] - (255.0 - PIXEL_MEAN) / PIXEL_SCALE).abs()
                < 1e-9
        );
    }

    #[test]
    fn layer1_shape_chain() {
        let specs = vgg_m_specs(2, 2, 2);
        let x = seeded_uniform(Ix3(1, 107, 107), 70, -1.0, 1.0);
        let params = ConvParams::seeded(2, 1, 7, 7, &mut ChaCha8Rng::seed_from_u64(71));
        let (mid, _) = conv_stage_forward(&x, &params, &specs[0]).unwrap();
        assert_eq!(mid.dim(), (2, 51, 51));
        let (out, _) = post_stage_forward(&mid, &specs[0]);
        assert_eq!(out.dim(), (2, 25, 25));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let specs = vgg_m_specs(2, 2, 2);
        let x = Array3::<f64>::zeros((1, 107, 107));
        let params = ConvParams::seeded(2, 1, 7, 7, &mut ChaCha8Rng::seed_from_u64(72));
        let (out, _, _) = conv_layer_forward(&x, &params, &specs[0]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standard_channel_shape_chain() {
        let specs = vgg_m_specs(96, 256, 512);
        let patch = Patch::new(seeded_uniform(Ix3(3, 107, 107), 73, -1.0, 1.0));
        let params = BackboneParams::seeded(&specs, 3, 74);
        let (outs, _) = stream_forward(&patch, Modality::Rgb, &params, &specs).unwrap();
        assert_eq!(outs[0].dim(), (96, 25, 25));
        assert_eq!(outs[1].dim(), (256, 5, 5));
        assert_eq!(outs[2].dim(), (512, 3, 3));
    }

    #[test]
    fn streams_are_independent() {
        let specs = vgg_m_specs(2, 3, 4);
        let patch = Patch::new(seeded_uniform(Ix3(3, 107, 107), 75, -1.0, 1.0));
        let mut params = BackboneParams::seeded(&specs, 3, 76);
        let (tir_before, _) = stream_forward(&patch, Modality::Tir, &params, &specs).unwrap();
        params.rgb.layers[0].weight[[0, 0, 0, 0]] += 10.0;
        params.rgb.layers[2].bias[1] -= 3.0;
        let (tir_after, _) = stream_forward(&patch, Modality::Tir, &params, &specs).unwrap();
        for (a, b) in tir_before[2].iter().zip(tir_after[2].iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn param_names_cover_both_streams() {
        let specs = vgg_m_specs(2, 3, 4);
        let params = BackboneParams::seeded(&specs, 3, 77);
        let names: Vec<String> = {
            let mut v = Vec::new();
            params.for_each(&mut |n, _| v.push(n.to_string()));
            v
        };
        assert_eq!(names.len(), 12);
        assert!(names.contains(&"rgb.conv1.weight".to_string()));
        assert!(names.contains(&"tir.conv3.bias".to_string()));
        assert_eq!(params::param_count(&params), {
            let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
            2 * (conv(2, 3, 7) + conv(3, 2, 5) + conv(4, 3, 3))
        });
    }

    #[test]
    fn conv_layer_gradient_matches_finite_differences() {
        // Toy layer with pooling and normalization on a 7x7 input.
        let spec = ConvLayerSpec {
            kernel: 3,
            stride: 1,
            out_channels: 3,
            pooled: true,
            normalized: true,
        };
        let x = seeded_uniform(Ix3(2, 7, 7), 80, -1.0, 1.0);
        let params = ConvParams {
            weight: seeded_uniform(Ix4(3, 2, 3, 3), 81, -0.5, 0.5),
            bias: seeded_uniform(ndarray::Ix1(3), 82, -0.2, 0.2),
        };
        let (out, conv_cache, post_cache) = conv_layer_forward(&x, &params, &spec).unwrap();
        let r = seeded_uniform(out.raw_dim(), 83, -1.0, 1.0);
        let g_mid = post_stage_backward(&spec, &post_cache, &r);
        let (gx, gp) = conv_stage_backward(&params, &spec, &conv_cache, &g_mid);

        let run = |w: &Array4<f64>, b: &Array1<f64>, xin: &Array3<f64>| {
            let p = ConvParams {
                weight: w.clone(),
                bias: b.clone(),
            };
            let (o, _, _) = conv_layer_forward(xin, &p, &spec).unwrap();
            (&o * &r).sum()
        };
        let ngw = numeric_gradient(|w| run(w, &params.bias, &x), &params.weight, FD_EPS);
        let ngb = numeric_gradient(|b| run(&params.weight, b, &x), &params.bias, FD_EPS);
        let ngx = numeric_gradient(|p| run(&params.weight, &params.bias, p), &x, FD_EPS);
        assert!(max_relative_error(&ngw, &gp.weight) < 1e-6);
        assert!(max_relative_error(&ngb, &gp.bias) < 1e-6);
        assert!(max_relative_error(&ngx, &gx) < 1e-6);
    }

    #[test]
    fn full_stream_gradient_matches_finite_differences() {
        // 1-channel-per-layer toy on a real-size patch; checks gradients of
        // every layer's weights through pools and normalizations.
        let specs = vgg_m_specs(1, 1, 1);
        let patch = Patch::new(seeded_uniform(Ix3(1, 107, 107), 90, -1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut stream = StreamParams::seeded(&specs, 1, &mut rng);
        // Larger-scale weights keep activations away from ReLU kinks.
        for layer in &mut stream.layers {
            layer.weight.mapv_inplace(|v| v * 30.0);
        }
        let params = BackboneParams {
            rgb: stream.clone(),
            tir: stream.clone(),
        };
        let (outs, cache) = stream_forward(&patch, Modality::Rgb, &params, &specs).unwrap();
        let r = seeded_uniform(outs[2].raw_dim(), 92, -1.0, 1.0);
        let grads = stream_backward(&stream, &specs, &cache, &r);

        for li in 0..3 {
            let mut probe = stream.clone();
            let nw = numeric_gradient(
                |w| {
                    probe.layers[li].weight.assign(w);
                    let p = BackboneParams {
                        rgb: probe.clone(),
                        tir: probe.clone(),
                    };
                    let (o, _) = stream_forward(&patch, Modality::Rgb, &p, &specs).unwrap();
                    (&o[2] * &r).sum()
                },
                &stream.layers[li].weight,
                FD_EPS,
            );
            assert!(
                max_relative_error(&nw, &grads[li].weight) < 1e-6,
                "layer {} weight gradient",
                li + 1
            );
        }
    }
}
