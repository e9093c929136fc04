//! Quick probe: dataset generation speed, step time, teacher convergence.
use promptseg::dataset::{build_dataset, SceneConfig, SplitCounts};
use promptseg::harness::{pretrain_teacher, Logger, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let dir = std::path::PathBuf::from("/tmp/speed_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    build_dataset(
        &dir,
        7,
        SplitCounts { train: train_n, val: 40, test: 8 },
        &SceneConfig::default(),
    )
    .unwrap();
    println!("dataset gen ({train_n} train): {:?}", t0.elapsed());

    let mut cfg = TrainConfig::default();
    cfg.seed = 7;
    cfg.teacher_epochs = 4;
    cfg.teacher_miou_target = 0.90;
    cfg.teacher_miou_floor = 0.0; // probe only
    let t1 = Instant::now();
    let mut log = Logger::new(None, true).unwrap();
    let teacher = pretrain_teacher(&dir, &cfg, &mut log).unwrap();
    println!("teacher: {:?}, val_miou {:.4}", t1.elapsed(), teacher.val_miou);
}
