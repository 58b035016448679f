//! Full network assembly: two fused backbone streams, the per-level fusion
//! stacks, and the FC head, with checkpoint serialization and an optional
//! pre-trained backbone loader.

use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::backbone::{vgg_m_specs, BackboneParams, ConvLayerSpec, Patch, StreamParams};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{
    fused_layer_backward, fused_layer_forward, FusedLayerCache, FusedLayerGrads, FusionMode,
    LevelFusionParams, SumCombine,
};
use crate::head::HeadParams;
use crate::params::ParamBundle;

/// Channel widths for the three conv levels plus the FC width. The standard
/// preset matches the published architecture; the smaller presets keep the
/// same shape chain and exist so end-to-end runs finish quickly on a CPU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub preset: String,
    pub channels: [usize; 3],
    pub fc_dim: usize,
}

pub const IN_CHANNELS: usize = 3;

impl NetConfig {
    pub fn standard() -> Self {
        Self {
            preset: "standard".into(),
            channels: [96, 256, 512],
            fc_dim: 512,
        }
    }

    pub fn small() -> Self {
        Self {
            preset: "small".into(),
            channels: [16, 32, 64],
            fc_dim: 128,
        }
    }

    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            channels: [4, 8, 16],
            fc_dim: 64,
        }
    }

    pub fn micro() -> Self {
        Self {
            preset: "micro".into(),
            channels: [2, 4, 8],
            fc_dim: 32,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::UnknownName {
                what: "net preset",
                value: other.to_string(),
            }),
        }
    }

    pub fn specs(&self) -> [ConvLayerSpec; 3] {
        vgg_m_specs(self.channels[0], self.channels[1], self.channels[2])
    }

    /// Final per-modality feature map shape (channels, 3, 3).
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.channels[2], 3, 3)
    }

    /// Length of the concatenated two-modality feature vector.
    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.feature_shape();
        2 * c * h * w
    }
}

/// Structural variant: attention-based aggregation (the proposed method) or
/// plain elementwise combination of the branch outputs (the ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationVariant {
    EskSelect,
    Sum(SumCombine),
}

impl AggregationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AggregationVariant::EskSelect => "agg-esk",
            AggregationVariant::Sum(_) => "sum",
        }
    }

    pub fn from_names(variant: &str, sum_combine: &str) -> Result<Self> {
        match variant {
            "agg-esk" => Ok(AggregationVariant::EskSelect),
            "sum" => Ok(AggregationVariant::Sum(SumCombine::from_name(sum_combine)?)),
            other => Err(Error::UnknownName {
                what: "variant",
                value: other.to_string(),
            }),
        }
    }

    pub fn has_aggregation_params(self) -> bool {
        matches!(self, AggregationVariant::EskSelect)
    }

    /// The forward mode used for inference and phase-2 training.
    pub fn mode(self) -> FusionMode {
        match self {
            AggregationVariant::EskSelect => FusionMode::Aggregate,
            AggregationVariant::Sum(c) => FusionMode::SumBranches(c),
        }
    }
}

/// Every parameter of the network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    pub variant: AggregationVariant,
    pub backbone: BackboneParams,
    pub fusion: Vec<LevelFusionParams>,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn seeded(
        config: NetConfig,
        variant: AggregationVariant,
        domains: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = config.specs();
        let backbone = BackboneParams {
            rgb: StreamParams::seeded(&specs, IN_CHANNELS, &mut rng),
            tir: StreamParams::seeded(&specs, IN_CHANNELS, &mut rng),
        };
        let fusion = config
            .channels
            .iter()
            .map(|&c| LevelFusionParams::seeded(c, variant.has_aggregation_params(), &mut rng))
            .collect();
        let head = HeadParams::seeded(config.feature_len(), config.fc_dim, domains, &mut rng);
        Self {
            config,
            variant,
            backbone,
            fusion,
            head,
        }
    }

    pub fn zeros(config: NetConfig, variant: AggregationVariant, domains: usize) -> Self {
        let mut model = Self::seeded(config, variant, domains, 0);
        crate::params::zero_all(&mut model);
        model
    }

    /// Forward through all three fused levels. Returns the final RGB and
    /// TIR feature maps plus the caches needed for backward.
    pub fn fused_forward(
        &self,
        rgb: &Patch,
        tir: &Patch,
        mode: FusionMode,
    ) -> Result<(Array3<f64>, Array3<f64>, ForwardCache)> {
        let specs = self.config.specs();
        let mut rgb_x = rgb.data.clone();
        let mut tir_x = tir.data.clone();
        let mut levels = Vec::with_capacity(3);
        for (level, spec) in specs.iter().enumerate() {
            let (r, t, cache) = fused_layer_forward(
                &rgb_x,
                &tir_x,
                &self.backbone.rgb.layers[level],
                &self.backbone.tir.layers[level],
                spec,
                &self.fusion[level],
                mode,
            )?;
            rgb_x = r;
            tir_x = t;
            levels.push(cache);
        }
        Ok((rgb_x, tir_x, ForwardCache { levels }))
    }

    /// Backward through all three fused levels; parameter gradients only
    /// (the patch itself is not a parameter).
    pub fn fused_backward(
        &self,
        cache: &ForwardCache,
        grad_rgb_feat: &Array3<f64>,
        grad_tir_feat: &Array3<f64>,
    ) -> ModelGrads {
        let specs = self.config.specs();
        let mut g_rgb = grad_rgb_feat.clone();
        let mut g_tir = grad_tir_feat.clone();
        let mut levels: Vec<Option<FusedLayerGrads>> = vec![None, None, None];
        for level in (0..3).rev() {
            let (gr, gt, grads) = fused_layer_backward(
                &self.backbone.rgb.layers[level],
                &self.backbone.tir.layers[level],
                &specs[level],
                &self.fusion[level],
                &cache.levels[level],
                &g_rgb,
                &g_tir,
            );
            g_rgb = gr;
            g_tir = gt;
            levels[level] = Some(grads);
        }
        ModelGrads {
            levels: levels.into_iter().map(Option::unwrap).collect(),
        }
    }

    /// Full feature vector for one sample pair (both modalities, inference
    /// fusion mode of the variant).
    pub fn features(&self, rgb: &Patch, tir: &Patch) -> Result<Array1<f64>> {
        let (r, t, _) = self.fused_forward(rgb, tir, self.variant.mode())?;
        crate::head::concat_features(&r, &t)
    }

    /// Serialize every tensor plus structural metadata. `keep_fc6` controls
    /// whether the multi-domain bank is stored (phase-2 artifacts drop it).
    pub fn to_checkpoint(&self, keep_fc6: bool) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("format", "eanet-model");
        ckpt.set_meta("net", &self.config.preset);
        ckpt.set_meta("variant", self.variant.name());
        if let AggregationVariant::Sum(c) = self.variant {
            ckpt.set_meta("sum_combine", c.name());
        }
        ckpt.set_meta("dropout", self.head.dropout);
        let domains = if keep_fc6 { self.head.domains() } else { 0 };
        ckpt.set_meta("domains", domains);
        ckpt.insert_bundle("backbone", &self.backbone);
        for (i, level) in self.fusion.iter().enumerate() {
            ckpt.insert_bundle(&format!("fusion{}", i + 1), level);
        }
        if keep_fc6 {
            ckpt.insert_bundle("head", &self.head);
        } else {
            let mut trimmed = self.head.clone();
            trimmed.fc6.clear();
            ckpt.insert_bundle("head", &trimmed);
        }
        ckpt
    }

    /// Rebuild a model from a checkpoint produced by [`to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            ckpt.meta(key)
                .ok_or_else(|| Error::CheckpointFormat(format!("missing metadata key {key:?}")))
        };
        if meta("format")? != "eanet-model" {
            return Err(Error::CheckpointFormat(
                "not a model checkpoint (format key mismatch)".into(),
            ));
        }
        let config = NetConfig::preset(meta("net")?)?;
        let variant =
            AggregationVariant::from_names(meta("variant")?, ckpt.meta("sum_combine").unwrap_or("mean"))?;
        let domains: usize = meta("domains")?
            .parse()
            .map_err(|_| Error::CheckpointFormat("bad domains count".into()))?;
        let dropout: f64 = meta("dropout")?
            .parse()
            .map_err(|_| Error::CheckpointFormat("bad dropout value".into()))?;
        let mut model = Self::zeros(config, variant, domains);
        model.head.dropout = dropout;
        ckpt.extract_bundle("backbone", &mut model.backbone)?;
        for (i, level) in model.fusion.iter_mut().enumerate() {
            ckpt.extract_bundle(&format!("fusion{}", i + 1), level)?;
        }
        ckpt.extract_bundle("head", &mut model.head)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, keep_fc6: bool, meta: &[(&str, String)]) -> Result<()> {
        let mut ckpt = self.to_checkpoint(keep_fc6);
        for (k, v) in meta {
            ckpt.set_meta(k, v.clone());
        }
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl ParamBundle for ModelParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.backbone
            .for_each(&mut |n, v| f(&format!("backbone.{n}"), v));
        for (i, level) in self.fusion.iter().enumerate() {
            level.for_each(&mut |n, v| f(&format!("fusion{}.{n}", i + 1), v));
        }
        self.head.for_each(&mut |n, v| f(&format!("head.{n}"), v));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.backbone
            .for_each_mut(&mut |n, v| f(&format!("backbone.{n}"), v));
        for (i, level) in self.fusion.iter_mut().enumerate() {
            level.for_each_mut(&mut |n, v| f(&format!("fusion{}.{n}", i + 1), v));
        }
        self.head.for_each_mut(&mut |n, v| f(&format!("head.{n}"), v));
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub levels: Vec<FusedLayerCache>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub levels: Vec<FusedLayerGrads>,
}

/// Load pre-trained backbone weights from a checkpoint file. Tensors may be
/// keyed per modality (`rgb.conv1.weight`, `tir.conv1.weight`, ...) or
/// shared (`conv1.weight`, ...); shared tensors initialize both streams
/// identically.
pub fn load_pretrained_backbone(
    path: impl AsRef<Path>,
    config: &NetConfig,
) -> Result<BackboneParams> {
    let ckpt = Checkpoint::load(path)?;
    let specs = config.specs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut backbone = BackboneParams {
        rgb: StreamParams::seeded(&specs, IN_CHANNELS, &mut rng),
        tir: StreamParams::seeded(&specs, IN_CHANNELS, &mut rng),
    };
    crate::params::zero_all(&mut backbone);
    let modality_keyed = ckpt.tensors.keys().any(|k| k.starts_with("rgb."));
    if modality_keyed {
        ckpt.extract_bundle("", &mut backbone)?;
    } else {
        // One shared stream: duplicate into both.
        let mut shared = StreamParams::seeded(&specs, IN_CHANNELS, &mut rng);
        crate::params::zero_all(&mut shared);
        ckpt.extract_bundle("", &mut shared)?;
        backbone.rgb = shared.clone();
        backbone.tir = shared;
    }
    Ok(backbone)
}
