use std::time::Instant;

use cascadet_core::config::Config;
use cascadet_core::corner::Rect;
use cascadet_core::data::gen::generate_shapes;
use cascadet_core::model::{Detector, ParamStore};
use cascadet_core::rng::stream;
use cascadet_core::tape::Tape;

#[test]
#[ignore]
fn component_timing() {
    let cfg = Config::default();
    let mut store = ParamStore::new();
    let mut rng = stream(1, "init");
    let det = Detector::new(&cfg, &mut store, &mut rng);
    let sample = &generate_shapes(7, 1, 256, 2)[0];

    // forward only
    let t = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::inference();
        let bind = store.attach(&mut tape, false);
        let img = tape.constant(sample.image.clone());
        let feats = det.backbone_fpn(&mut tape, &bind, img).unwrap();
        let _ = det.stage1(&mut tape, &bind, &feats).unwrap();
    }
    println!("backbone+stage1 fwd: {:?}/iter", t.elapsed() / 5);

    // forward + backward of a simple scalar
    let t = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let bind = store.attach(&mut tape, true);
        let img = tape.constant(sample.image.clone());
        let feats = det.backbone_fpn(&mut tape, &bind, img).unwrap();
        let outs = det.stage1(&mut tape, &bind, &feats).unwrap();
        let mut acc = tape.sum(outs[0].heat).unwrap();
        for o in &outs[1..] {
            let s = tape.sum(o.heat).unwrap();
            acc = tape.add(acc, s).unwrap();
        }
        tape.backward(acc).unwrap();
    }
    println!("backbone+stage1 fwd+bwd: {:?}/iter", t.elapsed() / 5);

    // stage2 branches per roi
    let mut tape = Tape::inference();
    let bind = store.attach(&mut tape, false);
    let img = tape.constant(sample.image.clone());
    let feats = det.backbone_fpn(&mut tape, &bind, img).unwrap();
    let t = Instant::now();
    for i in 0..32 {
        let r = Rect::new(10.0 + i as f64, 10.0, 90.0 + i as f64, 90.0);
        let _ = det.stage2_loc(&mut tape, &bind, feats[0], 8, r).unwrap();
        let _ = det.stage2_cls(&mut tape, &bind, feats[0], 8, r).unwrap();
    }
    println!("stage2 loc+cls fwd: {:?}/roi", t.elapsed() / 32);
}
