use actdet::config::RunConfig;
use actdet::data::make_synthetic_dataset;
use actdet::evaluation::{frame_map, EvalOptions};
use actdet::model::Model;
use actdet::postprocess::{decode_predictions, nms};
use actdet::train::train_toy;
use std::time::Instant;

fn run(lr: f64, seed: u64) {
    let t0 = Instant::now();
    let mut cfg = RunConfig::toy();
    cfg.train.learning_rate = lr;
    cfg.seed = seed;
    let clips = make_synthetic_dataset(
        cfg.seed, cfg.data.num_clips, &cfg.data.synth, cfg.model.clip_len,
        cfg.data.frame_size, cfg.data.frame_size).unwrap();
    let mut model = Model::new(&cfg.model, cfg.seed).unwrap();
    let log = match train_toy(&mut model, &clips, &cfg.train, &cfg.assign, cfg.lambda) {
        Ok(l) => l,
        Err(e) => { println!("lr {lr} seed {seed}: DIVERGED {e}"); return; }
    };
    let head = log.mean_total(0, 10);
    let tail = log.mean_total(log.rows.len() - 10, log.rows.len());
    let fs = cfg.data.frame_size as f64;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for clip in &clips {
        let (tape, preds) = model.forward(&clip.clip).unwrap();
        let set = preds.extract(&tape).unwrap();
        let raw = decode_predictions(&set, &cfg.postprocess, (fs, fs), &clip.video, clip.key_frame_index()).unwrap();
        dets.extend(nms(&raw, cfg.postprocess.nms_iou).unwrap());
        gts.extend(clip.key_frame_gts().to_vec());
    }
    let report = frame_map(&dets, &gts, 0.5, &EvalOptions::default());
    let last = log.rows.last().unwrap();
    println!("lr {lr:.0e} seed {seed}: ratio {:.3} reg_end {:.3} mAP {:?} ({:?})",
        tail / head, last.reg, report.mean_ap, t0.elapsed());
}

fn main() {
    for lr in [2e-3, 5e-3, 1e-2, 2e-2] { run(lr, 0); }
}
