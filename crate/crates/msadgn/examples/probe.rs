//! Scratch probe: ERM vs full model on the fast-profile benchmark.

use msadgn::data::make_benchmark;
use msadgn::eval::evaluate;
use msadgn::trainer::{train, Ablation, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant: Ablation = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(Ablation::M1);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let n_per_class: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(50);

    let conv_channels: Vec<usize> = args
        .get(5)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![8, 16, 32, 64]);
    let cfg = TrainConfig {
        signal_len: 64,
        epochs,
        seed,
        ablation: variant,
        conv_channels,
        ..TrainConfig::fast_profile()
    };
    let (sources, target) = make_benchmark(7, cfg.k_domains, 4, n_per_class, cfg.signal_len).unwrap();
    let t0 = Instant::now();
    let (model, log) = train(&cfg, &sources).unwrap();
    let train_time = t0.elapsed();
    let dir = tempfile::tempdir().unwrap();
    let report = evaluate(&model, &cfg, &target, &dir.path().join("pred.jsonl")).unwrap();
    let source_report =
        evaluate(&model, &cfg, &sources[0], &dir.path().join("pred_src.jsonl")).unwrap();
    println!("source-domain acc={:.4}", source_report.overall_accuracy);
    let last = log.steps.last().unwrap();
    let audit_last: Vec<_> = log
        .audits
        .iter()
        .filter(|a| a.epoch == cfg.epochs)
        .map(|a| format!("d{}:{}/{}", a.domain_id, a.correct, a.selected))
        .collect();
    println!(
        "{variant} seed={seed} acc={:.4} time={:.1?} last_loss={:.4} (inv {:.4} cls {:.4} w {:.4}) audits=[{}]",
        report.overall_accuracy,
        train_time,
        last.loss,
        last.l_inv,
        last.l_cls,
        last.l_w,
        audit_last.join(" ")
    );
    println!("confusion={:?} per_class={:?}", report.confusion, report.per_class_accuracy);
}
