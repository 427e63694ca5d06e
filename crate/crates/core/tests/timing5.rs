use cascadet_core::config::Config;
use cascadet_core::data::gen::generate_shapes;
use cascadet_core::model::{train, TrainSet};

#[test]
#[ignore]
fn overfit_probe() {
    let mut cfg = Config::default();
    cfg.epochs = 150;
    cfg.batch_size = 4;
    cfg.val_count = 0;
    cfg.val_limit = 0;
    cfg.lr = 0.01;
    cfg.grad_clip = 10.0;
    cfg.warmup_steps = 30;
    cfg.lr_decay_at = vec![120, 140];
    cfg.seed = 1;
    let samples = generate_shapes(7, 4, 256, 2);
    let data = TrainSet {
        train: samples.clone(),
        val: samples,
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, dir.path()).unwrap();
    for r in out.rows.iter().step_by(10) {
        println!(
            "epoch {:3} total {:.3} heat {:.3} off {:.3} scale {:.3} brh {:.3} bro {:.3} cls {:.3}",
            r.epoch, r.report.total, r.report.tl_heatmap, r.report.tl_offset,
            r.report.scale, r.report.br_heatmap, r.report.br_offset, r.report.classification
        );
    }
    let fe = out.final_eval.unwrap();
    println!("overfit final ap {:.4} ap50 {:.4}", fe.ap, fe.ap_at(0.5).unwrap());
}
