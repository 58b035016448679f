//! Subcommand implementations. Every command materializes its output under
//! `--out` in fixed subfolders (results/, reports/, curves/, checkpoints/,
//! data/ for synth) and writes the resolved configuration next to them as
//! `config_<command>.txt`, so a run can always be reproduced from its output
//! directory alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eanet_core::checkpoint::Checkpoint;
use eanet_core::datasets::{
    list_sequences, load_sequence, synth_sequence, write_rgbt234_layout, DatasetKind,
    EvalAttributeId, Sequence, SynthSpec,
};
use eanet_core::evaluation::{emit_curves, evaluate, safe_stem, CurveFormat, EvalReport};
use eanet_core::fusion::AttributeId;
use eanet_core::model::{AggregationVariant, ModelParams};
use eanet_core::tracker::{track_sequence, write_result_file, TrackerConfig};
use eanet_core::training::{sequences_for_attribute, train_phase1, train_phase2, TrainOutcome};

use crate::config::{train_echo, tracker_echo, RunConfig};
use crate::{CliError, CommonArgs};

/// Attribute tags cycled over synthetic sequences so each branch attribute
/// has qualifying training data once five or more sequences exist. Occlusion
/// qualifies via the hard-occlusion flag.
const SYNTH_TAGS: [EvalAttributeId; 5] = [
    EvalAttributeId::Tc,
    EvalAttributeId::Li,
    EvalAttributeId::Sv,
    EvalAttributeId::Ho,
    EvalAttributeId::Fm,
];

fn dataset_kind(cfg: &RunConfig) -> Result<DatasetKind, CliError> {
    DatasetKind::from_name(cfg.dataset_name()).map_err(|e| CliError::Usage(e.to_string()))
}

/// Load every sequence under the configured data root, honoring the
/// `sequences` filter. A requested name that does not exist is a data error.
fn load_data(cfg: &RunConfig) -> Result<Vec<Sequence>, CliError> {
    let root = cfg.data_root()?;
    let kind = dataset_kind(cfg)?;
    let names = list_sequences(&root, kind)?;
    let selected: Vec<String> = match cfg.sequence_filter() {
        Some(filter) => {
            for want in &filter {
                if !names.contains(want) {
                    return Err(CliError::Data(format!(
                        "sequence {want:?} not found under {}",
                        root.display()
                    )));
                }
            }
            filter
        }
        None => names,
    };
    if selected.is_empty() {
        return Err(CliError::Data(format!(
            "no sequences under {}",
            root.display()
        )));
    }
    selected
        .iter()
        .map(|name| load_sequence(&root, kind, name).map_err(CliError::from))
        .collect()
}

/// Write the resolved configuration next to the command's outputs.
fn write_echo(out: &Path, command: &str, cfg: &RunConfig, extra: &str) -> Result<PathBuf, CliError> {
    let path = out.join(format!("config_{command}.txt"));
    let text = format!("command={command}\n{}{extra}", cfg.general_echo()?);
    fs::write(&path, text)?;
    Ok(path)
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("iteration,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{},{loss:.6}\n", i + 1));
    }
    fs::write(path, text)?;
    Ok(())
}

/// A model checkpoint for tracking: loaded from `path` when given, otherwise
/// seeded from the configured preset, variant, and seed.
fn tracking_checkpoint(
    cfg: &RunConfig,
    variant: AggregationVariant,
    path: Option<&Path>,
) -> Result<Checkpoint, CliError> {
    match path {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if let Some(stored) = ckpt.meta("variant") {
                if stored != variant.name() {
                    return Err(CliError::Usage(format!(
                        "checkpoint {} holds variant {stored:?}, expected {:?}",
                        p.display(),
                        variant.name()
                    )));
                }
            }
            Ok(ckpt)
        }
        None => {
            let model = ModelParams::seeded(cfg.preset()?, variant, 1, cfg.seed()?);
            Ok(model.to_checkpoint(false))
        }
    }
}

/// Track every sequence with `ckpt` and write one result file per sequence
/// under `results_dir`. Returns per-sequence (name, frames, successes).
fn track_all(
    ckpt: &Checkpoint,
    data: &[Sequence],
    config: &TrackerConfig,
    results_dir: &Path,
) -> Result<Vec<(String, usize, usize)>, CliError> {
    let mut lines = Vec::new();
    for seq in data {
        let started = Instant::now();
        let (boxes, reports) = track_sequence(ckpt, seq, config)?;
        write_result_file(&results_dir.join(format!("{}.txt", seq.name)), &boxes)?;
        let successes = reports.iter().filter(|r| r.success).count();
        println!(
            "tracked {}: {} frames, {} scored successful, {:.1}s",
            seq.name,
            boxes.len(),
            successes,
            started.elapsed().as_secs_f64()
        );
        lines.push((seq.name.clone(), boxes.len(), successes));
    }
    Ok(lines)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<PathBuf, CliError> {
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let path = reports_dir.join(format!("{}.csv", safe_stem(&report.tracker)));
    fs::write(&path, report.to_csv())?;
    Ok(path)
}

pub fn cmd_synth(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let count = cfg.usize_or("synth.sequences", 5)?;
    if count == 0 {
        return Err(CliError::Usage("synth.sequences must be positive".into()));
    }
    let frames = cfg.usize_or("synth.frames", 20)?;
    let width = cfg.usize_or("synth.width", 160)?;
    let height = cfg.usize_or("synth.height", 120)?;
    let seed = cfg.seed()?;
    let root = common.out.join("data");
    for i in 0..count {
        let mut spec = SynthSpec::new(&format!("seq{:02}", i + 1));
        spec.frames = frames;
        spec.width = width;
        spec.height = height;
        spec.attributes = [SYNTH_TAGS[i % SYNTH_TAGS.len()]].into_iter().collect();
        let seq = synth_sequence(&spec, seed.wrapping_add(i as u64));
        let dir = write_rgbt234_layout(&seq, &root)?;
        println!(
            "wrote {} ({} frames, flag {})",
            dir.display(),
            frames,
            SYNTH_TAGS[i % SYNTH_TAGS.len()].code()
        );
    }
    let extra = format!(
        "synth.frames={frames}\nsynth.height={height}\nsynth.sequences={count}\nsynth.width={width}\n"
    );
    write_echo(&common.out, "synth", &cfg, &extra)?;
    println!("dataset root: {}", root.display());
    Ok(())
}

fn report_training(
    out: &Path,
    stem: &str,
    outcome: &TrainOutcome,
) -> Result<(PathBuf, PathBuf), CliError> {
    let ckpt_dir = out.join("checkpoints");
    let reports_dir = out.join("reports");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&reports_dir)?;
    let ckpt_path = ckpt_dir.join(format!("{stem}.ckpt"));
    outcome.checkpoint.save(&ckpt_path)?;
    let loss_path = reports_dir.join(format!("{stem}_loss.csv"));
    write_loss_csv(&loss_path, &outcome.losses)?;
    Ok((ckpt_path, loss_path))
}

pub fn cmd_train_phase1(common: &CommonArgs, attribute: &str) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let attr = AttributeId::from_code(attribute).map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load_data(&cfg)?;
    let subset: Vec<Sequence> = sequences_for_attribute(&data, attr)
        .into_iter()
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(CliError::Data(format!(
            "no sequence carries a flag qualifying for attribute {}",
            attr.code()
        )));
    }
    let train_cfg = cfg.train_config(1)?;
    let mut model = ModelParams::seeded(cfg.preset()?, cfg.variant()?, subset.len(), train_cfg.seed);
    model.head.dropout = cfg.dropout()?;
    println!(
        "phase 1 ({}): {} sequences, {} iterations",
        attr.code(),
        subset.len(),
        train_cfg.iterations()
    );
    let outcome = train_phase1(&mut model, attr, &subset, &train_cfg)?;
    let stem = format!("phase1_{}", attr.code());
    let (ckpt_path, loss_path) = report_training(&common.out, &stem, &outcome)?;
    write_echo(&common.out, "train-phase1", &cfg, &train_echo(&train_cfg))?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.4}");
    println!("checkpoint: {}", ckpt_path.display());
    println!("loss log: {}", loss_path.display());
    Ok(())
}

pub fn cmd_train_phase2(common: &CommonArgs, checkpoints: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let data = load_data(&cfg)?;
    let mut branch_ckpts = Vec::new();
    for attr in AttributeId::ALL {
        let path = checkpoints.join(format!("phase1_{}.ckpt", attr.code()));
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "missing branch checkpoint {}",
                path.display()
            )));
        }
        branch_ckpts.push(Checkpoint::load(&path)?);
    }
    let train_cfg = cfg.train_config(2)?;
    println!(
        "phase 2: {} sequences, {} iterations",
        data.len(),
        train_cfg.iterations()
    );
    let (_, outcome) = train_phase2(&data, &branch_ckpts, &train_cfg)?;
    let (ckpt_path, loss_path) = report_training(&common.out, "phase2", &outcome)?;
    write_echo(&common.out, "train-phase2", &cfg, &train_echo(&train_cfg))?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.4}");
    println!("checkpoint: {}", ckpt_path.display());
    println!("loss log: {}", loss_path.display());
    Ok(())
}

pub fn cmd_track(common: &CommonArgs, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let data = load_data(&cfg)?;
    let tracker_cfg = cfg.tracker_config()?;
    let ckpt = tracking_checkpoint(&cfg, cfg.variant()?, checkpoint)?;
    let results_dir = common.out.join("results").join(safe_stem(cfg.tracker_name()));
    fs::create_dir_all(&results_dir)?;
    track_all(&ckpt, &data, &tracker_cfg, &results_dir)?;
    write_echo(&common.out, "track", &cfg, &tracker_echo(&tracker_cfg))?;
    println!("results: {}", results_dir.display());
    Ok(())
}

pub fn cmd_eval(common: &CommonArgs, results: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let data = load_data(&cfg)?;
    let report = evaluate(results, &data, cfg.tracker_name())?;
    let report_path = write_report(&common.out, &report)?;
    let curves_dir = common.out.join("curves");
    emit_curves(
        std::slice::from_ref(&report),
        &curves_dir,
        cfg.curve_format(CurveFormat::Csv)?,
    )?;
    write_echo(&common.out, "eval", &cfg, "")?;
    println!("{}", report.to_table());
    println!("report: {}", report_path.display());
    println!("curves: {}", curves_dir.display());
    Ok(())
}

pub fn cmd_plot(common: &CommonArgs, results: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let mut labeled = Vec::new();
    for item in results {
        let (name, dir) = item.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--results expects NAME=DIR, got {item:?}"))
        })?;
        labeled.push((name, dir));
    }
    let data = load_data(&cfg)?;
    let mut reports = Vec::new();
    for (name, dir) in labeled {
        reports.push(evaluate(Path::new(dir), &data, name)?);
    }
    let curves_dir = common.out.join("curves");
    emit_curves(&reports, &curves_dir, cfg.curve_format(CurveFormat::Image)?)?;
    write_echo(&common.out, "plot", &cfg, "")?;
    for report in &reports {
        println!(
            "{}: PR {:.3}, SR {:.3}",
            report.tracker, report.overall_pr, report.overall_sr
        );
    }
    println!("curves: {}", curves_dir.display());
    Ok(())
}

/// Outcome of an ablation run: the summation baseline next to the attention
/// aggregation, tracked on the same data with the same seed.
#[derive(Debug)]
pub struct AblationOutcome {
    pub baseline: EvalReport,
    pub proposed: EvalReport,
    /// Scalar parameter counts of the two checkpoints, baseline then proposed.
    pub baseline_scalars: usize,
    pub proposed_scalars: usize,
    /// Side-by-side PR/SR table, baseline column first.
    pub table: String,
}

fn ablation_table(baseline: &EvalReport, proposed: &EvalReport) -> String {
    let mut text = String::new();
    text.push_str(&format!(
        "{:<8}{:>12}{:>17}\n",
        "metric", baseline.tracker, proposed.tracker
    ));
    text.push_str(&format!(
        "{:<8}{:>12.3}{:>17.3}\n",
        "PR", baseline.overall_pr, proposed.overall_pr
    ));
    text.push_str(&format!(
        "{:<8}{:>12.3}{:>17.3}\n",
        "SR", baseline.overall_sr, proposed.overall_sr
    ));
    text
}

/// Run track + eval for the summation baseline ("Var-AggESK") and the
/// attention aggregation ("Proposed Method") over the same sequences and
/// seed, then write the comparison table and both report CSVs.
pub fn run_ablation(
    cfg: &RunConfig,
    out: &Path,
    checkpoint_sum: Option<&Path>,
    checkpoint_esk: Option<&Path>,
) -> Result<AblationOutcome, CliError> {
    let data = load_data(cfg)?;
    let tracker_cfg = cfg.tracker_config()?;
    let runs = [
        ("Var-AggESK", cfg.sum_variant()?, checkpoint_sum),
        ("Proposed Method", AggregationVariant::EskSelect, checkpoint_esk),
    ];
    let mut reports = Vec::new();
    let mut scalars = Vec::new();
    for (label, variant, ckpt_path) in runs {
        let ckpt = tracking_checkpoint(cfg, variant, ckpt_path)?;
        scalars.push(ckpt.scalar_count());
        let results_dir = out.join("results").join(safe_stem(label));
        fs::create_dir_all(&results_dir)?;
        println!("ablation run: {label} ({})", variant.name());
        track_all(&ckpt, &data, &tracker_cfg, &results_dir)?;
        let report = evaluate(&results_dir, &data, label)?;
        write_report(out, &report)?;
        reports.push(report);
    }
    let proposed = reports.pop().expect("two runs");
    let baseline = reports.pop().expect("two runs");
    let table = ablation_table(&baseline, &proposed);
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    fs::write(
        reports_dir.join("ablation.csv"),
        format!(
            "metric,{},{}\nPR,{:.3},{:.3}\nSR,{:.3},{:.3}\n",
            baseline.tracker,
            proposed.tracker,
            baseline.overall_pr,
            proposed.overall_pr,
            baseline.overall_sr,
            proposed.overall_sr
        ),
    )?;
    emit_curves(
        &[baseline.clone(), proposed.clone()],
        &out.join("curves"),
        cfg.curve_format(CurveFormat::Csv)?,
    )?;
    Ok(AblationOutcome {
        baseline,
        proposed,
        baseline_scalars: scalars[0],
        proposed_scalars: scalars[1],
        table,
    })
}

pub fn cmd_ablate(
    common: &CommonArgs,
    checkpoint_sum: Option<&Path>,
    checkpoint_esk: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::from_common(common)?;
    fs::create_dir_all(&common.out)?;
    let outcome = run_ablation(&cfg, &common.out, checkpoint_sum, checkpoint_esk)?;
    let tracker_cfg = cfg.tracker_config()?;
    write_echo(&common.out, "ablate", &cfg, &tracker_echo(&tracker_cfg))?;
    println!("{}", outcome.table);
    println!(
        "parameters: {} ({}) vs {} ({})",
        outcome.baseline_scalars,
        outcome.baseline.tracker,
        outcome.proposed_scalars,
        outcome.proposed.tracker
    );
    println!("table: {}", common.out.join("reports").join("ablation.csv").display());
    Ok(())
}
