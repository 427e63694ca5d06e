use cascadet_core::config::Config;
use cascadet_core::data::gen::generate_shapes;
use cascadet_core::model::{train, TrainSet};

#[test]
#[ignore]
fn grad_norm_probe() {
    // short run, prints come from train internals below if enabled
    let mut cfg = Config::default();
    cfg.epochs = 30;
    cfg.val_count = 20;
    cfg.val_limit = 20;
    cfg.lr = 0.01;
    cfg.grad_clip = 10.0;
    cfg.warmup_steps = 60;
    cfg.lr_decay_at = vec![20, 27];
    cfg.seed = 1;
    let samples = generate_shapes(7, 80, 256, 2);
    let data = TrainSet::split(samples, cfg.val_count);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, dir.path()).unwrap();
    for r in &out.rows {
        println!(
            "epoch {:2} lr {:.4} total {:.3} heat {:.3} off {:.3} scale {:.3} brh {:.3} bro {:.3} cls {:.3} ap {:.3} ap50 {:.3}",
            r.epoch, r.lr, r.report.total, r.report.tl_heatmap, r.report.tl_offset,
            r.report.scale, r.report.br_heatmap, r.report.br_offset, r.report.classification,
            r.ap.unwrap_or(-1.0), r.ap50.unwrap_or(-1.0)
        );
    }
}
