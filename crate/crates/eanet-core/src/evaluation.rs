//! One-pass-evaluation metrics: precision rate over center error, success
//! rate over overlap, attribute-wise report rows, and curve emission.
//!
//! Scores are frame-pooled: every valid frame of every sequence contributes
//! one sample, so the overall number does not depend on how frames are split
//! into sequences. Frames whose ground truth is absent (all-zero annotation)
//! are skipped. Published scores that average per-sequence instead will
//! differ slightly; comparisons must note the pooling convention.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::{filter_by_attribute, EvalAttributeId, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BoundingBox};
use crate::plot::{render_line_plot, PlotSeries, PlotSpec};

/// Precision is reported at this center-error threshold (pixels).
pub const PR_REFERENCE_PX: f64 = 20.0;

/// Center-error grid: 0..=50 px, 1 px steps.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

/// Overlap grid: 0..=1 in steps of 0.05 (21 points).
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// A sampled metric curve: ascending thresholds and the rate at each.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub thresholds: Vec<f64>,
    pub rates: Vec<f64>,
}

impl EvalCurve {
    /// Rate at the grid point closest to `threshold`.
    pub fn rate_at(&self, threshold: f64) -> f64 {
        let mut best = 0;
        for (i, t) in self.thresholds.iter().enumerate() {
            if (t - threshold).abs() < (self.thresholds[best] - threshold).abs() {
                best = i;
            }
        }
        self.rates[best]
    }

    /// `threshold,rate` lines with a header. `f64` display round-trips, so
    /// parsing the output reproduces the curve exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,rate\n");
        for (t, r) in self.thresholds.iter().zip(&self.rates) {
            out.push_str(&format!("{t},{r}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalCurve> {
        let mut thresholds = Vec::new();
        let mut rates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::CheckpointFormat(format!("curve csv line {}: {line:?}", i + 1));
            let (t, r) = line.split_once(',').ok_or_else(bad)?;
            thresholds.push(t.trim().parse::<f64>().map_err(|_| bad())?);
            rates.push(r.trim().parse::<f64>().map_err(|_| bad())?);
        }
        Ok(EvalCurve { thresholds, rates })
    }
}

fn check_lengths(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::EvalLengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EvalLengthMismatch { pred: 0, gt: 0 });
    }
    Ok(())
}

/// Fraction of frames whose center error is at most each threshold on the
/// 0..=50 px grid. Nondecreasing in the threshold.
pub fn precision_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<EvalCurve> {
    check_lengths(pred, gt)?;
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_distance(p, g))
        .collect();
    let thresholds = precision_thresholds();
    let rates = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect();
    Ok(EvalCurve { thresholds, rates })
}

/// Fraction of frames whose overlap strictly exceeds each threshold on the
/// 21-point grid, plus the discrete area under that curve (the SR score).
/// Nonincreasing in the threshold.
pub fn success_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<(EvalCurve, f64)> {
    check_lengths(pred, gt)?;
    let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let thresholds = success_thresholds();
    let rates: Vec<f64> = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64)
        .collect();
    let sr = rates.iter().sum::<f64>() / rates.len() as f64;
    Ok((EvalCurve { thresholds, rates }, sr))
}

/// Scores for one sequence (PR at 20 px, SR as AUC, valid-frame count).
#[derive(Debug, Clone)]
pub struct SequenceScore {
    pub name: String,
    pub pr: f64,
    pub sr: f64,
    pub frames: usize,
}

/// One report row: the ALL row or one challenge attribute. `None` scores
/// mean no frames carried the attribute.
#[derive(Debug, Clone)]
pub struct AttributeRow {
    pub label: String,
    pub pr: Option<f64>,
    pub sr: Option<f64>,
    pub n_sequences: usize,
    pub n_frames: usize,
}

/// Full evaluation of one tracker over one dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tracker: String,
    pub per_sequence: Vec<SequenceScore>,
    /// ALL row first, then the twelve attributes in code order.
    pub rows: Vec<AttributeRow>,
    pub overall_pr: f64,
    pub overall_sr: f64,
    pub pr_curve: EvalCurve,
    pub sr_curve: EvalCurve,
}

fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.3}"),
        None => "n/a".to_string(),
    }
}

impl EvalReport {
    /// Plain-text table, one row per attribute plus the ALL row.
    pub fn to_table(&self) -> String {
        let mut out = format!("tracker: {}\n", self.tracker);
        out.push_str(&format!(
            "{:<10} {:>7} {:>7} {:>10} {:>8}\n",
            "attribute", "PR@20", "SR", "sequences", "frames"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>7} {:>7} {:>10} {:>8}\n",
                row.label,
                fmt_score(row.pr),
                fmt_score(row.sr),
                row.n_sequences,
                row.n_frames
            ));
        }
        out
    }

    /// Machine-readable rows: `attribute,pr,sr,n_sequences,n_frames`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attribute,pr,sr,n_sequences,n_frames\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.label,
                fmt_score(row.pr),
                fmt_score(row.sr),
                row.n_sequences,
                row.n_frames
            ));
        }
        out
    }
}

/// Read one tracker result file: one `x,y,w,h` line per frame, frame order.
pub fn read_result_file(path: &Path, expected: usize, sequence: &str) -> Result<Vec<BoundingBox>> {
    let fail = |problem: String| Error::ResultFile {
        sequence: sequence.to_string(),
        problem,
    };
    if !path.is_file() {
        return Err(fail(format!("missing result file {}", path.display())));
    }
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fail(format!("line {}: cannot parse {line:?}", i + 1)))?;
        if values.len() != 4 {
            return Err(fail(format!("line {}: expected 4 values", i + 1)));
        }
        boxes.push(
            BoundingBox::new(values[0], values[1], values[2], values[3])
                .map_err(|_| fail(format!("line {}: degenerate box {line:?}", i + 1)))?,
        );
    }
    if boxes.len() != expected {
        return Err(fail(format!(
            "has {} boxes but the sequence has {} frames",
            boxes.len(),
            expected
        )));
    }
    Ok(boxes)
}

/// Prediction/ground-truth pairs for the frames with present ground truth.
fn paired_frames(
    results_dir: &Path,
    sequences: &[&Sequence],
) -> Result<Vec<(Vec<BoundingBox>, Vec<BoundingBox>)>> {
    sequences
        .iter()
        .map(|seq| {
            let path = results_dir.join(format!("{}.txt", seq.name));
            let pred = read_result_file(&path, seq.len(), &seq.name)?;
            let mut p = Vec::new();
            let mut g = Vec::new();
            for (b, gt) in pred.into_iter().zip(seq.ground_truth()) {
                if let Some(gt) = gt {
                    p.push(b);
                    g.push(*gt);
                }
            }
            Ok((p, g))
        })
        .collect()
}

fn pooled_scores(
    pairs: &[(Vec<BoundingBox>, Vec<BoundingBox>)],
) -> Result<Option<(EvalCurve, EvalCurve, f64, f64, usize)>> {
    let pred: Vec<BoundingBox> = pairs.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let gt: Vec<BoundingBox> = pairs.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    if pred.is_empty() {
        return Ok(None);
    }
    let pr_curve = precision_curve(&pred, &gt)?;
    let (sr_curve, sr) = success_curve(&pred, &gt)?;
    let pr = pr_curve.rate_at(PR_REFERENCE_PX);
    Ok(Some((pr_curve, sr_curve, pr, sr, pred.len())))
}

/// Evaluate `tracker`'s result files over `sequences`: frame-pooled PR@20
/// and SR-AUC overall, per sequence, and per attribute. Every sequence must
/// have a complete result file under `results_dir`.
pub fn evaluate(results_dir: &Path, sequences: &[Sequence], tracker: &str) -> Result<EvalReport> {
    let refs: Vec<&Sequence> = sequences.iter().collect();
    let all_pairs = paired_frames(results_dir, &refs)?;
    let (pr_curve, sr_curve, overall_pr, overall_sr, n_frames) = pooled_scores(&all_pairs)?
        .ok_or(Error::EvalLengthMismatch { pred: 0, gt: 0 })?;

    let mut per_sequence = Vec::new();
    for (seq, pair) in sequences.iter().zip(&all_pairs) {
        if let Some((_, _, pr, sr, frames)) = pooled_scores(std::slice::from_ref(pair))? {
            per_sequence.push(SequenceScore {
                name: seq.name.clone(),
                pr,
                sr,
                frames,
            });
        }
    }

    let mut rows = vec![AttributeRow {
        label: "ALL".to_string(),
        pr: Some(overall_pr),
        sr: Some(overall_sr),
        n_sequences: sequences.len(),
        n_frames,
    }];
    for attr in EvalAttributeId::ALL {
        let subset = filter_by_attribute(sequences, attr);
        let pairs = paired_frames(results_dir, &subset)?;
        let scored = pooled_scores(&pairs)?;
        rows.push(match scored {
            Some((_, _, pr, sr, frames)) => AttributeRow {
                label: attr.code().to_string(),
                pr: Some(pr),
                sr: Some(sr),
                n_sequences: subset.len(),
                n_frames: frames,
            },
            None => AttributeRow {
                label: attr.code().to_string(),
                pr: None,
                sr: None,
                n_sequences: subset.len(),
                n_frames: 0,
            },
        });
    }

    Ok(EvalReport {
        tracker: tracker.to_string(),
        per_sequence,
        rows,
        overall_pr,
        overall_sr,
        pr_curve,
        sr_curve,
    })
}

/// Output format for [`emit_curves`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Image,
}

/// Tracker name reduced to a filesystem-safe stem: every character outside
/// `[A-Za-z0-9]` becomes an underscore.
pub fn safe_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Write the overall PR and SR curves for each report. `Csv` writes one
/// curve file per tracker per metric; `Image` draws one PR plot and one SR
/// plot with a labeled series per tracker, scores in the legend.
pub fn emit_curves(
    reports: &[EvalReport],
    out_dir: &Path,
    format: CurveFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    match format {
        CurveFormat::Csv => {
            for report in reports {
                let stem = safe_stem(&report.tracker);
                let pr = out_dir.join(format!("pr_curve_{stem}.csv"));
                fs::write(&pr, report.pr_curve.to_csv())?;
                files.push(pr);
                let sr = out_dir.join(format!("sr_curve_{stem}.csv"));
                fs::write(&sr, report.sr_curve.to_csv())?;
                files.push(sr);
            }
        }
        CurveFormat::Image => {
            let pr_series: Vec<PlotSeries> = reports
                .iter()
                .map(|r| PlotSeries {
                    label: format!("{} (PR@20={:.3})", r.tracker, r.overall_pr),
                    xs: r.pr_curve.thresholds.clone(),
                    ys: r.pr_curve.rates.clone(),
                })
                .collect();
            let pr = out_dir.join("pr_curves.png");
            render_line_plot(
                &PlotSpec {
                    title: "Precision rate".to_string(),
                    x_label: "center error (px)".to_string(),
                    y_label: "precision".to_string(),
                },
                &pr_series,
                &pr,
            )?;
            files.push(pr);
            let sr_series: Vec<PlotSeries> = reports
                .iter()
                .map(|r| PlotSeries {
                    label: format!("{} (SR={:.3})", r.tracker, r.overall_sr),
                    xs: r.sr_curve.thresholds.clone(),
                    ys: r.sr_curve.rates.clone(),
                })
                .collect();
            let sr = out_dir.join("sr_curves.png");
            render_line_plot(
                &PlotSpec {
                    title: "Success rate".to_string(),
                    x_label: "overlap threshold".to_string(),
                    y_label: "success".to_string(),
                },
                &sr_series,
                &sr,
            )?;
            files.push(sr);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_sequence, write_rgbt234_layout, SynthSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BoundingBox> {
        (0..n)
            .map(|_| {
                BoundingBox::new(
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..150.0),
                    rng.random_range(5.0..80.0),
                    rng.random_range(5.0..80.0),
                )
                .unwrap()
            })
            .collect()
    }

    fn write_results(dir: &Path, seq: &Sequence, boxes: &[BoundingBox]) {
        let lines: Vec<String> = boxes
            .iter()
            .map(|b| {
                format!(
                    "{},{},{},{}",
                    b.x.round() as i64,
                    b.y.round() as i64,
                    b.w.round() as i64,
                    b.h.round() as i64
                )
            })
            .collect();
        fs::write(dir.join(format!("{}.txt", seq.name)), lines.join("\n") + "\n").unwrap();
    }

    fn gt_boxes(seq: &Sequence) -> Vec<BoundingBox> {
        seq.ground_truth().iter().map(|b| b.unwrap()).collect()
    }

    #[test]
    fn perfect_predictions_saturate_both_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_boxes(40, &mut rng);
        let pr = precision_curve(&gt, &gt).unwrap();
        assert!(pr.rates.iter().all(|&r| r == 1.0));
        let (sr_curve, sr) = success_curve(&gt, &gt).unwrap();
        for (t, r) in sr_curve.thresholds.iter().zip(&sr_curve.rates) {
            assert_eq!(*r, if *t < 1.0 { 1.0 } else { 0.0 });
        }
        assert!((sr - 1.0).abs() <= 1.0 / 21.0 + 1e-12);
    }

    #[test]
    fn displaced_predictions_miss_every_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_boxes(25, &mut rng);
        let pred: Vec<BoundingBox> = gt
            .iter()
            .map(|b| BoundingBox::new(b.x + 100.0, b.y + 100.0, b.w, b.h).unwrap())
            .collect();
        let pr = precision_curve(&pred, &gt).unwrap();
        assert!(pr.rates.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn disjoint_predictions_give_zero_success() {
        let gt = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(); 5];
        let pred = vec![BoundingBox::new(50.0, 50.0, 10.0, 10.0).unwrap(); 5];
        let (curve, sr) = success_curve(&pred, &gt).unwrap();
        assert!(curve.rates.iter().all(|&r| r == 0.0));
        assert_eq!(sr, 0.0);
    }

    #[test]
    fn curves_match_brute_force_oracle_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1000;
        let gt = random_boxes(n, &mut rng);
        let pred = random_boxes(n, &mut rng);
        let pr = precision_curve(&pred, &gt).unwrap();
        let (sr_curve, sr) = success_curve(&pred, &gt).unwrap();

        // Independent oracle: naive double loop, integer hit counting.
        for (i, &t) in pr.thresholds.iter().enumerate() {
            let mut hits = 0usize;
            for (p, g) in pred.iter().zip(&gt) {
                if center_distance(p, g) <= t {
                    hits += 1;
                }
            }
            assert!((pr.rates[i] - hits as f64 / n as f64).abs() < 1e-12);
        }
        let mut sr_sum = 0.0;
        for (i, &t) in sr_curve.thresholds.iter().enumerate() {
            let mut hits = 0usize;
            for (p, g) in pred.iter().zip(&gt) {
                if iou(p, g) > t {
                    hits += 1;
                }
            }
            let rate = hits as f64 / n as f64;
            assert!((sr_curve.rates[i] - rate).abs() < 1e-12);
            sr_sum += rate;
        }
        assert!((sr - sr_sum / 21.0).abs() < 1e-12);

        for w in pr.rates.windows(2) {
            assert!(w[1] >= w[0], "precision curve must be nondecreasing");
        }
        for w in sr_curve.rates.windows(2) {
            assert!(w[1] <= w[0], "success curve must be nonincreasing");
        }
    }

    #[test]
    fn length_mismatch_and_empty_input_are_rejected() {
        let gt = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(); 3];
        let pred = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(); 2];
        assert!(matches!(
            precision_curve(&pred, &gt),
            Err(Error::EvalLengthMismatch { pred: 2, gt: 3 })
        ));
        assert!(success_curve(&[], &[]).is_err());
    }

    #[test]
    fn curve_csv_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_boxes(17, &mut rng);
        let pred = random_boxes(17, &mut rng);
        let (curve, _) = success_curve(&pred, &gt).unwrap();
        let back = EvalCurve::from_csv(&curve.to_csv()).unwrap();
        assert_eq!(curve, back);
    }

    fn two_sequence_fixture(tmp: &TempDir) -> (PathBuf, Vec<Sequence>) {
        let data = tmp.path().join("data");
        let results = tmp.path().join("results");
        fs::create_dir_all(&results).unwrap();
        let mut seqs = Vec::new();
        for (i, flags) in [vec![EvalAttributeId::Tc], vec![]].into_iter().enumerate() {
            let mut spec = SynthSpec::new(&format!("seq{i}"));
            spec.frames = 4;
            spec.attributes = flags.into_iter().collect();
            let seq = synth_sequence(&spec, i as u64);
            write_rgbt234_layout(&seq, &data).unwrap();
            seqs.push(seq);
        }
        for seq in &seqs {
            write_results(&results, seq, &gt_boxes(seq));
        }
        (results, seqs)
    }

    #[test]
    fn perfect_tracker_scores_one_and_empty_attributes_render_na() {
        let tmp = TempDir::new().unwrap();
        let (results, seqs) = two_sequence_fixture(&tmp);
        let report = evaluate(&results, &seqs, "perfect").unwrap();
        assert_eq!(report.overall_pr, 1.0);
        assert!((report.overall_sr - 20.0 / 21.0).abs() < 1e-12);
        assert_eq!(report.rows.len(), 13);
        assert_eq!(report.rows[0].label, "ALL");
        assert_eq!(report.rows[0].n_frames, 8);
        let tc = report.rows.iter().find(|r| r.label == "TC").unwrap();
        assert_eq!(tc.n_sequences, 1);
        assert_eq!(tc.pr, Some(1.0));
        let bc = report.rows.iter().find(|r| r.label == "BC").unwrap();
        assert_eq!(bc.pr, None);
        assert!(report.to_table().contains("n/a"));
        let csv = report.to_csv();
        assert!(csv.starts_with("attribute,pr,sr,n_sequences,n_frames\n"));
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.contains("BC,n/a,n/a,0,0"));
    }

    #[test]
    fn missing_and_short_result_files_name_the_sequence() {
        let tmp = TempDir::new().unwrap();
        let (results, seqs) = two_sequence_fixture(&tmp);
        fs::remove_file(results.join("seq1.txt")).unwrap();
        match evaluate(&results, &seqs, "t").unwrap_err() {
            Error::ResultFile { sequence, problem } => {
                assert_eq!(sequence, "seq1");
                assert!(problem.contains("missing"));
            }
            other => panic!("unexpected error {other:?}"),
        }
        fs::write(results.join("seq1.txt"), "1,1,4,4\n").unwrap();
        match evaluate(&results, &seqs, "t").unwrap_err() {
            Error::ResultFile { sequence, problem } => {
                assert_eq!(sequence, "seq1");
                assert!(problem.contains("1 boxes"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn absent_ground_truth_frames_are_skipped() {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        let results = tmp.path().join("results");
        fs::create_dir_all(&results).unwrap();
        let mut spec = SynthSpec::new("gap");
        spec.frames = 3;
        let seq = synth_sequence(&spec, 5);
        let dir = write_rgbt234_layout(&seq, &data).unwrap();
        // Mark frame 2's target absent, then reload through the ordinary path.
        let gt_file = dir.join("visible.txt");
        let mut lines: Vec<String> = fs::read_to_string(&gt_file)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[1] = "0,0,0,0".to_string();
        fs::write(&gt_file, lines.join("\n") + "\n").unwrap();
        let reloaded = crate::datasets::load_sequence(&data, crate::datasets::DatasetKind::Rgbt234, "gap").unwrap();
        assert!(reloaded.ground_truth()[1].is_none());

        // Result still has 3 lines; the skipped frame's box is far off.
        let mut boxes = gt_boxes(&seq);
        boxes[1] = BoundingBox::new(900.0, 900.0, 5.0, 5.0).unwrap();
        write_results(&results, &reloaded, &boxes);
        let report = evaluate(&results, &[reloaded], "skip").unwrap();
        assert_eq!(report.rows[0].n_frames, 2);
        assert_eq!(report.overall_pr, 1.0);
    }

    #[test]
    fn pooled_scores_are_invariant_to_sequence_grouping() {
        let tmp = TempDir::new().unwrap();
        let results = tmp.path().join("results");
        fs::create_dir_all(&results).unwrap();
        let data = tmp.path().join("data");

        // One 8-frame sequence vs the same frames as two 4-frame sequences.
        let mut whole_spec = SynthSpec::new("whole");
        whole_spec.frames = 8;
        let whole = synth_sequence(&whole_spec, 11);
        write_rgbt234_layout(&whole, &data).unwrap();
        let mut noisy: Vec<BoundingBox> = gt_boxes(&whole);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for b in noisy.iter_mut() {
            *b = BoundingBox::new(
                b.x + rng.random_range(-12.0f64..12.0).round(),
                b.y + rng.random_range(-12.0f64..12.0).round(),
                b.w,
                b.h,
            )
            .unwrap();
        }
        write_results(&results, &whole, &noisy);
        let pooled = evaluate(&results, &[whole.clone()], "t").unwrap();

        let mut parts = Vec::new();
        for (i, range) in [(0, 0..4), (1, 4..8)] {
            let mut spec = SynthSpec::new(&format!("part{i}"));
            spec.frames = 4;
            spec.start = whole.ground_truth()[range.start].unwrap();
            let part = synth_sequence(&spec, 20 + i as u64);
            // Overwrite the part's annotation with the whole sequence's slice.
            let dir = write_rgbt234_layout(&part, &data).unwrap();
            let seg: Vec<Option<BoundingBox>> =
                whole.ground_truth()[range.clone()].to_vec();
            let lines: Vec<String> = seg
                .iter()
                .map(|b| {
                    let b = b.unwrap();
                    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
                })
                .collect();
            fs::write(dir.join("visible.txt"), lines.join("\n") + "\n").unwrap();
            let part = crate::datasets::load_sequence(
                &data,
                crate::datasets::DatasetKind::Rgbt234,
                &format!("part{i}"),
            )
            .unwrap();
            write_results(&results, &part, &noisy[range]);
            parts.push(part);
        }
        let split = evaluate(&results, &parts, "t").unwrap();
        assert_eq!(pooled.overall_pr, split.overall_pr);
        assert_eq!(pooled.overall_sr, split.overall_sr);
    }

    #[test]
    fn emit_curves_writes_csv_and_images() {
        let tmp = TempDir::new().unwrap();
        let (results, seqs) = two_sequence_fixture(&tmp);
        let report = evaluate(&results, &seqs, "perfect").unwrap();
        let mut second = report.clone();
        second.tracker = "shifted".to_string();

        let csvs = emit_curves(
            &[report.clone(), second.clone()],
            &tmp.path().join("csv"),
            CurveFormat::Csv,
        )
        .unwrap();
        assert_eq!(csvs.len(), 4);
        let text = fs::read_to_string(&csvs[0]).unwrap();
        let parsed = EvalCurve::from_csv(&text).unwrap();
        assert_eq!(parsed, report.pr_curve);

        let images = emit_curves(
            &[report, second],
            &tmp.path().join("img"),
            CurveFormat::Image,
        )
        .unwrap();
        assert_eq!(images.len(), 2);
        for path in &images {
            let img = image::open(path).unwrap().to_rgb8();
            assert!(img.width() >= 300 && img.height() >= 200);
            // The plot must actually contain drawn (non-background) pixels.
            let non_white = img.pixels().filter(|p| p.0 != [255, 255, 255]).count();
            assert!(non_white > 1000);
        }
    }
}
