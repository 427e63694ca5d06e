//! Manual timing probe; run with --ignored to print wall times.

use std::time::Instant;

use cascadet_core::config::Config;
use cascadet_core::data::gen::generate_shapes;
use cascadet_core::model::{detect, train, TrainSet};

#[test]
#[ignore]
fn timing_probe() {
    let cfg = Config::default();
    let samples = generate_shapes(7, 16, 256, 2);
    let t0 = Instant::now();
    let data = TrainSet::split(samples.clone(), 4);
    let mut cfg_t = cfg.clone();
    cfg_t.epochs = 2;
    cfg_t.val_limit = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg_t, &data, dir.path()).unwrap();
    println!("2 epochs over 12 images: {:?} ({} rows)", t0.elapsed(), out.rows.len());

    let (_, det, store) = cascadet_core::model::load_checkpoint(&out.checkpoint_dir).unwrap();
    let t1 = Instant::now();
    for s in samples.iter().take(4) {
        let _ = detect(&det, &store, &s.image, &cfg).unwrap();
    }
    println!("detect x4 images: {:?}", t1.elapsed());
}
