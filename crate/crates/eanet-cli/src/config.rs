//! Run configuration: a flat `key=value` map assembled from an optional file,
//! repeatable `--set` overrides, and the `--seed` / `--data-root` flags.
//! Later sources win. Unknown keys are rejected up front so typos surface as
//! usage errors instead of silently running with defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eanet_core::evaluation::CurveFormat;

use eanet_core::model::{AggregationVariant, NetConfig};
use eanet_core::tracker::TrackerConfig;
use eanet_core::training::TrainConfig;

use crate::CliError;

/// Every key a config file or `--set` may mention. The `train.` and `track.`
/// entries mirror the fields of [`TrainConfig`] and [`TrackerConfig`]; keys
/// left unset keep those structs' defaults.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "preset",
    "variant",
    "sum_combine",
    "dropout",
    "dataset",
    "data_root",
    "sequences",
    "tracker_name",
    "curve_format",
    "synth.sequences",
    "synth.frames",
    "synth.width",
    "synth.height",
    "train.epochs",
    "train.iterations_per_epoch",
    "train.lr_new",
    "train.lr_pretrained",
    "train.momentum",
    "train.weight_decay",
    "train.pos_per_iter",
    "train.neg_per_iter",
    "train.frames_per_iter",
    "train.neg_pool",
    "track.n_candidates",
    "track.top_k",
    "track.success_threshold",
    "track.candidate_sigma_xy",
    "track.candidate_sigma_scale",
    "track.n_pos_init",
    "track.n_neg_init",
    "track.n_reg",
    "track.reg_iou_lo",
    "track.ridge_lambda",
    "track.pos_per_frame",
    "track.neg_per_frame",
    "track.short_interval",
    "track.long_interval",
    "track.long_capacity",
    "track.short_capacity",
    "track.init_iterations",
    "track.update_iterations",
    "track.batch_pos",
    "track.batch_neg",
    "track.neg_pool",
    "track.lr_init",
    "track.lr_update",
    "track.momentum",
    "track.weight_decay",
];

/// Name of the environment variable consulted when neither `--data-root` nor
/// the `data_root` key names a dataset directory.
pub const DATA_ROOT_ENV: &str = "EANET_DATA_ROOT";

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn split_kv(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k, v.trim()))
}

impl RunConfig {
    /// Build a config from `file` (if given) then apply `overrides` in order.
    /// File lines are `key=value`; blank lines and `#` comments are skipped.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Data(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = split_kv(line).ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected key=value, got {raw:?}",
                        path.display(),
                        idx + 1
                    ))
                })?;
                cfg.set(key, value)?;
            }
        }
        for item in overrides {
            let (key, value) = split_kv(item).ok_or_else(|| {
                CliError::Usage(format!("--set expects key=value, got {item:?}"))
            })?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Assemble from the shared CLI flags: the config file first, `--set`
    /// overrides next, then the explicit `--seed` and `--data-root` flags.
    pub fn from_common(common: &crate::CommonArgs) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
        if let Some(seed) = common.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(root) = &common.data_root {
            cfg.set("data_root", &root.display().to_string())?;
        }
        Ok(cfg)
    }

    /// Insert one key, rejecting names outside [`KNOWN_KEYS`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!(
                "unknown config key {key:?}; known keys: {}",
                KNOWN_KEYS.join(", ")
            )));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Value for `key` if set and non-empty.
    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None => Ok(None),
            Some(text) => text.parse::<T>().map(Some).map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse {text:?} as {kind}"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.parse::<usize>(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.parse::<f64>(key, "a number")?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.parse::<u64>("seed", "an unsigned integer")?.unwrap_or(0))
    }

    pub fn preset(&self) -> Result<NetConfig, CliError> {
        NetConfig::preset(self.raw("preset").unwrap_or("standard"))
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn variant(&self) -> Result<AggregationVariant, CliError> {
        AggregationVariant::from_names(
            self.raw("variant").unwrap_or("agg-esk"),
            self.raw("sum_combine").unwrap_or("mean"),
        )
        .map_err(|e| CliError::Usage(e.to_string()))
    }

    /// The summation variant with the configured combine rule, for ablations.
    pub fn sum_variant(&self) -> Result<AggregationVariant, CliError> {
        AggregationVariant::from_names("sum", self.raw("sum_combine").unwrap_or("mean"))
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn dropout(&self) -> Result<f64, CliError> {
        let p = self.f64_or("dropout", 0.5)?;
        if !(0.0..1.0).contains(&p) {
            return Err(CliError::Usage(format!(
                "config key dropout: {p} outside [0, 1)"
            )));
        }
        Ok(p)
    }

    pub fn dataset_name(&self) -> &str {
        self.raw("dataset").unwrap_or("rgbt234")
    }

    pub fn tracker_name(&self) -> &str {
        self.raw("tracker_name").unwrap_or("EANet")
    }

    /// Comma-separated sequence filter, if set.
    pub fn sequence_filter(&self) -> Option<Vec<String>> {
        self.raw("sequences").map(|list| {
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
    }

    pub fn curve_format(&self, default: CurveFormat) -> Result<CurveFormat, CliError> {
        match self.raw("curve_format") {
            None => Ok(default),
            Some("csv") => Ok(CurveFormat::Csv),
            Some("image") => Ok(CurveFormat::Image),
            Some(other) => Err(CliError::Usage(format!(
                "config key curve_format: expected csv or image, got {other:?}"
            ))),
        }
    }

    /// Dataset root: `data_root` key, else the `EANET_DATA_ROOT` environment
    /// variable. Commands that read data fail with a usage error without one.
    pub fn data_root(&self) -> Result<PathBuf, CliError> {
        if let Some(root) = self.raw("data_root") {
            return Ok(PathBuf::from(root));
        }
        match std::env::var(DATA_ROOT_ENV) {
            Ok(root) if !root.is_empty() => Ok(PathBuf::from(root)),
            _ => Err(CliError::Usage(format!(
                "no dataset root: pass --data-root, set data_root in the config, or export {DATA_ROOT_ENV}"
            ))),
        }
    }

    /// Training config for `phase` (1 or 2): the phase defaults with any
    /// `train.*` keys applied on top, seeded from the `seed` key.
    pub fn train_config(&self, phase: u8) -> Result<TrainConfig, CliError> {
        let mut t = match phase {
            1 => TrainConfig::phase1(),
            2 => TrainConfig::phase2(),
            other => return Err(CliError::Usage(format!("no training phase {other}"))),
        };
        t.seed = self.seed()?;
        t.epochs = self.usize_or("train.epochs", t.epochs)?;
        t.iterations_per_epoch =
            self.usize_or("train.iterations_per_epoch", t.iterations_per_epoch)?;
        t.lr_new = self.f64_or("train.lr_new", t.lr_new)?;
        t.lr_pretrained = self.f64_or("train.lr_pretrained", t.lr_pretrained)?;
        t.momentum = self.f64_or("train.momentum", t.momentum)?;
        t.weight_decay = self.f64_or("train.weight_decay", t.weight_decay)?;
        t.pos_per_iter = self.usize_or("train.pos_per_iter", t.pos_per_iter)?;
        t.neg_per_iter = self.usize_or("train.neg_per_iter", t.neg_per_iter)?;
        t.frames_per_iter = self.usize_or("train.frames_per_iter", t.frames_per_iter)?;
        t.neg_pool = self.usize_or("train.neg_pool", t.neg_pool)?;
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    /// Tracker config: defaults with any `track.*` keys applied on top,
    /// seeded from the `seed` key.
    pub fn tracker_config(&self) -> Result<TrackerConfig, CliError> {
        let mut t = TrackerConfig::default();
        t.seed = self.seed()?;
        t.n_candidates = self.usize_or("track.n_candidates", t.n_candidates)?;
        t.top_k = self.usize_or("track.top_k", t.top_k)?;
        t.success_threshold = self.f64_or("track.success_threshold", t.success_threshold)?;
        t.candidate_sigma_xy = self.f64_or("track.candidate_sigma_xy", t.candidate_sigma_xy)?;
        t.candidate_sigma_scale =
            self.f64_or("track.candidate_sigma_scale", t.candidate_sigma_scale)?;
        t.n_pos_init = self.usize_or("track.n_pos_init", t.n_pos_init)?;
        t.n_neg_init = self.usize_or("track.n_neg_init", t.n_neg_init)?;
        t.n_reg = self.usize_or("track.n_reg", t.n_reg)?;
        t.reg_iou_lo = self.f64_or("track.reg_iou_lo", t.reg_iou_lo)?;
        t.ridge_lambda = self.f64_or("track.ridge_lambda", t.ridge_lambda)?;
        t.pos_per_frame = self.usize_or("track.pos_per_frame", t.pos_per_frame)?;
        t.neg_per_frame = self.usize_or("track.neg_per_frame", t.neg_per_frame)?;
        t.short_interval = self.usize_or("track.short_interval", t.short_interval)?;
        t.long_interval = self.usize_or("track.long_interval", t.long_interval)?;
        t.long_capacity = self.usize_or("track.long_capacity", t.long_capacity)?;
        t.short_capacity = self.usize_or("track.short_capacity", t.short_capacity)?;
        t.init_iterations = self.usize_or("track.init_iterations", t.init_iterations)?;
        t.update_iterations = self.usize_or("track.update_iterations", t.update_iterations)?;
        t.batch_pos = self.usize_or("track.batch_pos", t.batch_pos)?;
        t.batch_neg = self.usize_or("track.batch_neg", t.batch_neg)?;
        t.neg_pool = self.usize_or("track.neg_pool", t.neg_pool)?;
        t.lr_init = self.f64_or("track.lr_init", t.lr_init)?;
        t.lr_update = self.f64_or("track.lr_update", t.lr_update)?;
        t.momentum = self.f64_or("track.momentum", t.momentum)?;
        t.weight_decay = self.f64_or("track.weight_decay", t.weight_decay)?;
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    /// Resolved general keys (defaults filled in) as sorted `key=value` lines.
    /// Command-specific sections append their own resolved fields.
    pub fn general_echo(&self) -> Result<String, CliError> {
        let mut map = BTreeMap::new();
        map.insert("seed", self.seed()?.to_string());
        map.insert("preset", self.preset()?.preset.clone());
        map.insert("variant", self.variant()?.name().to_string());
        map.insert(
            "sum_combine",
            self.raw("sum_combine").unwrap_or("mean").to_string(),
        );
        map.insert("dropout", self.dropout()?.to_string());
        map.insert("dataset", self.dataset_name().to_string());
        map.insert("tracker_name", self.tracker_name().to_string());
        if let Ok(root) = self.data_root() {
            map.insert("data_root", root.display().to_string());
        }
        if let Some(filter) = self.sequence_filter() {
            map.insert("sequences", filter.join(","));
        }
        let mut text = String::new();
        for (key, value) in map {
            text.push_str(&format!("{key}={value}\n"));
        }
        Ok(text)
    }
}

/// Resolved `train.*` lines for the echo file.
pub fn train_echo(t: &TrainConfig) -> String {
    format!(
        "train.epochs={}\ntrain.frames_per_iter={}\ntrain.iterations_per_epoch={}\n\
         train.lr_new={}\ntrain.lr_pretrained={}\ntrain.momentum={}\ntrain.neg_per_iter={}\n\
         train.neg_pool={}\ntrain.phase={}\ntrain.pos_per_iter={}\ntrain.weight_decay={}\n",
        t.epochs,
        t.frames_per_iter,
        t.iterations_per_epoch,
        t.lr_new,
        t.lr_pretrained,
        t.momentum,
        t.neg_per_iter,
        t.neg_pool,
        t.phase,
        t.pos_per_iter,
        t.weight_decay,
    )
}

/// Resolved `track.*` lines for the echo file, sorted by key.
pub fn tracker_echo(t: &TrackerConfig) -> String {
    let mut text = String::new();
    let pairs: &[(&str, String)] = &[
        ("batch_neg", t.batch_neg.to_string()),
        ("batch_pos", t.batch_pos.to_string()),
        ("candidate_sigma_scale", t.candidate_sigma_scale.to_string()),
        ("candidate_sigma_xy", t.candidate_sigma_xy.to_string()),
        ("init_iterations", t.init_iterations.to_string()),
        ("long_capacity", t.long_capacity.to_string()),
        ("long_interval", t.long_interval.to_string()),
        ("lr_init", t.lr_init.to_string()),
        ("lr_update", t.lr_update.to_string()),
        ("momentum", t.momentum.to_string()),
        ("n_candidates", t.n_candidates.to_string()),
        ("n_neg_init", t.n_neg_init.to_string()),
        ("n_pos_init", t.n_pos_init.to_string()),
        ("n_reg", t.n_reg.to_string()),
        ("neg_per_frame", t.neg_per_frame.to_string()),
        ("neg_pool", t.neg_pool.to_string()),
        ("pos_per_frame", t.pos_per_frame.to_string()),
        ("reg_iou_lo", t.reg_iou_lo.to_string()),
        ("ridge_lambda", t.ridge_lambda.to_string()),
        ("short_capacity", t.short_capacity.to_string()),
        ("short_interval", t.short_interval.to_string()),
        ("success_threshold", t.success_threshold.to_string()),
        ("top_k", t.top_k.to_string()),
        ("update_iterations", t.update_iterations.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
    ];
    for (key, value) in pairs {
        text.push_str(&format!("track.{key}={value}\n"));
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CliError;

    fn write_file(dir: &std::path::Path, text: &str) -> PathBuf {
        let path = dir.join("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn file_lines_parse_with_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "# full line comment\n\nseed=7\npreset=micro # trailing comment\n  track.top_k = 3  \n",
        );
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.preset().unwrap().preset, "micro");
        assert_eq!(cfg.tracker_config().unwrap().top_k, 3);
    }

    #[test]
    fn overrides_beat_file_and_flags_beat_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "seed=1\npreset=tiny\n");
        let cfg = RunConfig::load(Some(&path), &["seed=2".into()]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 2);
        assert_eq!(cfg.preset().unwrap().preset, "tiny");

        let common = crate::CommonArgs {
            config: Some(path),
            set: vec!["seed=2".into()],
            data_root: None,
            seed: Some(3),
            out: dir.path().to_path_buf(),
        };
        let cfg = RunConfig::from_common(&common).unwrap();
        assert_eq!(cfg.seed().unwrap(), 3);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = RunConfig::load(None, &["track.warp_speed=9".into()]).unwrap_err();
        match err {
            CliError::Usage(msg) => assert!(msg.contains("track.warp_speed"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_value_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "seed\n");
        assert!(matches!(
            RunConfig::load(Some(&path), &[]),
            Err(CliError::Usage(_))
        ));
        let err = RunConfig::load(None, &["seed=banana".into()])
            .unwrap()
            .seed()
            .unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn train_and_tracker_configs_apply_overrides_on_defaults() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=11".into(),
                "train.epochs=4".into(),
                "train.lr_new=0.01".into(),
                "track.n_candidates=32".into(),
                "track.lr_update=0.005".into(),
            ],
        )
        .unwrap();
        let t1 = cfg.train_config(1).unwrap();
        assert_eq!((t1.phase, t1.epochs, t1.seed), (1, 4, 11));
        assert_eq!(t1.lr_new, 0.01);
        let t2 = cfg.train_config(2).unwrap();
        assert_eq!(t2.phase, 2);
        assert_eq!(t2.epochs, 4);
        let tk = cfg.tracker_config().unwrap();
        assert_eq!((tk.n_candidates, tk.seed), (32, 11));
        assert_eq!(tk.lr_update, 0.005);
        assert_eq!(tk.top_k, TrackerConfig::default().top_k);
    }

    #[test]
    fn variant_and_curve_format_parse() {
        let cfg = RunConfig::load(None, &["variant=sum".into(), "sum_combine=add".into()]).unwrap();
        assert_eq!(cfg.variant().unwrap().name(), "sum");
        assert!(format!("{:?}", cfg.variant().unwrap().mode()).contains("Add"));
        let cfg = RunConfig::load(None, &["curve_format=image".into()]).unwrap();
        assert!(matches!(
            cfg.curve_format(CurveFormat::Csv).unwrap(),
            CurveFormat::Image
        ));
        let bad = RunConfig::load(None, &["curve_format=svg".into()])
            .unwrap()
            .curve_format(CurveFormat::Csv);
        assert!(matches!(bad, Err(CliError::Usage(_))));
    }

    #[test]
    fn general_echo_lists_resolved_defaults() {
        let cfg = RunConfig::load(None, &["preset=micro".into()]).unwrap();
        let echo = cfg.general_echo().unwrap();
        assert!(echo.contains("preset=micro\n"));
        assert!(echo.contains("seed=0\n"));
        assert!(echo.contains("variant=agg-esk\n"));
        assert!(echo.contains("dropout=0.5\n"));
    }
}
