use hoipart::eval::{interactiveness_ap, run_interactiveness_eval, shuffled_baseline_ap};
use hoipart::model::IntScheme;
use hoipart::scene::{generate_dataset, DifficultyProfile};
use hoipart::train::{train_stage1, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let scenes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let profile = DifficultyProfile::default();
    let train_set = generate_dataset(1001, scenes, &profile).unwrap();
    let held_out = generate_dataset(2002, 100, &profile).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.stage1_epochs = epochs;
    cfg.lr = lr;
    cfg.seed = 5;
    eprintln!("config: d={} grid_factor={} image={} nq={} lr={}",
        cfg.model.d_model, cfg.model.grid_factor, cfg.model.image_size, cfg.model.n_queries, cfg.lr);

    let t0 = Instant::now();
    let out = train_stage1(&train_set, &cfg).unwrap();
    let train_time = t0.elapsed();
    for log in &out.history {
        eprintln!(
            "epoch {:>2}: l_det={:.4} l_b={:.4} l_u={:.4} l_c={:.4} l_int={:.4} fallbacks={}",
            log.epoch, log.losses.l_det, log.losses.l_b, log.losses.l_u, log.losses.l_c, log.losses.l_int, log.fallback_events
        );
    }
    let t1 = Instant::now();
    let (dets, gts) = run_interactiveness_eval(
        &out.checkpoint.params, &cfg.model, IntScheme::Merged, &held_out, cfg.nms_iou,
    ).unwrap();
    let ap = interactiveness_ap(&dets, &gts);
    let baseline = shuffled_baseline_ap(&dets, &gts, 7);
    eprintln!(
        "train: {:.1}s  eval: {:.1}s  interactiveness AP: {:?}  shuffled baseline: {:?}",
        train_time.as_secs_f64(), t1.elapsed().as_secs_f64(), ap, baseline
    );
}
