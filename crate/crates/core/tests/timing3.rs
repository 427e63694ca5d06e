use std::time::Instant;

use cascadet_core::config::Config;
use cascadet_core::data::gen::generate_shapes;
use cascadet_core::model::{train, TrainSet};

#[test]
#[ignore]
fn probe_training() {
    let mut cfg = Config::default();
    cfg.epochs = 12;
    cfg.val_count = 30;
    cfg.val_limit = 30;
    cfg.seed = 1;
    let samples = generate_shapes(7, 150, 256, 2);
    let data = TrainSet::split(samples, cfg.val_count);
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = train(&cfg, &data, dir.path()).unwrap();
    println!("train 120 imgs x12 epochs: {:?}", t.elapsed());
    for r in &out.rows {
        println!(
            "epoch {:2} lr {:.4} total {:.3} heat {:.3} off {:.3} scale {:.3} brh {:.3} bro {:.3} cls {:.3} ap {:.3} ap50 {:.3}",
            r.epoch, r.lr, r.report.total, r.report.tl_heatmap, r.report.tl_offset,
            r.report.scale, r.report.br_heatmap, r.report.br_offset, r.report.classification,
            r.ap.unwrap_or(-1.0), r.ap50.unwrap_or(-1.0)
        );
    }
    let fe = out.final_eval.unwrap();
    println!("final ap {:.4} ap50 {:.4}", fe.ap, fe.ap_at(0.5).unwrap());
}
