use eanet_core::datasets::{synth_sequence, SynthSpec};
use eanet_core::geometry::iou;
use eanet_core::model::{AggregationVariant, ModelParams, NetConfig};
use eanet_core::tracker::{track_sequence, TrackerConfig};

fn main() {
    let mut spec = SynthSpec::new("accept6");
    spec.frames = 20;
    spec.scale_rate = 1.0;
    let seq = synth_sequence(&spec, 606);
    let ckpt = ModelParams::seeded(
        NetConfig::preset("micro").unwrap(),
        AggregationVariant::EskSelect,
        1,
        7,
    )
    .to_checkpoint(false);
    let config = TrackerConfig {
        n_neg_init: 2000,
        pos_per_frame: 25,
        neg_per_frame: 100,
        seed: 9,
        ..TrackerConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (boxes, reports) = track_sequence(&ckpt, &seq, &config).unwrap();
    let gts = seq.ground_truth();
    let mut ious = Vec::new();
    for (b, g) in boxes.iter().zip(gts.iter()).skip(1) {
        ious.push(iou(b, &g.unwrap()));
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let min = ious.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "frames={} min_iou={min:.3} mean_iou={mean:.3} elapsed={:.0?}",
        boxes.len(),
        t0.elapsed()
    );
    println!(
        "per-frame: {:?}",
        ious.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    println!(
        "successes: {}/{}",
        reports.iter().filter(|r| r.success).count(),
        reports.len()
    );
}
