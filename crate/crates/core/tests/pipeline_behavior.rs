//! Pipeline-level behavior: freeze contracts, zero-budget identity, full
//! determinism, and planner-synthesized fine-tuning segments.

use wam_core::config::Config;
use wam_core::dataset::generate_offline_dataset;
use wam_core::envs::{EnvSpec, Task};
use wam_core::pipeline::{TrainLog, Trainer};

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.train.tokenizer_steps = 6;
    cfg.train.m1_steps = 6;
    cfg.train.m2_steps = 10;
    cfg.train.batch_size = 3;
    cfg.train.tokenizer_batch = 6;
    cfg.data.transitions_per_task = 600;
    cfg
}

fn tiny_data(cfg: &Config, seed: u64) -> wam_core::dataset::Dataset {
    let specs: Vec<EnvSpec> = Task::TRAIN.iter().map(|&t| EnvSpec::new(t)).collect();
    generate_offline_dataset(
        &specs,
        &cfg.data.mix,
        cfg.data.transitions_per_task,
        cfg.train.gamma,
        seed,
    )
    .unwrap()
}

#[test]
fn zero_budget_stage1_leaves_parameters_at_init() {
    let mut cfg = tiny_config();
    cfg.train.tokenizer_steps = 0;
    cfg.train.m1_steps = 0;
    let data = tiny_data(&cfg, 3);
    let fresh = Trainer::new(cfg.clone()).unwrap();
    let mut trained = Trainer::new(cfg).unwrap();
    let mut log = TrainLog::new(None).unwrap();
    trained.run_stage1(&data, &mut log).unwrap();
    assert!(trained.model.params.values_equal(&fresh.model.params));
    assert!(trained.tokenizer.params.values_equal(&fresh.tokenizer.params));
}

#[test]
fn stage2_freezes_tokenizer() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 5);
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut log = TrainLog::new(None).unwrap();
    trainer.run_stage1(&data, &mut log).unwrap();
    let frozen = trainer.tokenizer.params.clone();
    trainer.run_stage2(&data, &mut log).unwrap();
    assert!(trainer.tokenizer.params.values_equal(&frozen));
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 7);
    let run = |tag: &str| {
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let mut log = TrainLog::new(None).unwrap();
        trainer.run_stage1(&data, &mut log).unwrap();
        trainer.run_stage2(&data, &mut log).unwrap();
        let path = std::env::temp_dir().join(format!(
            "wam_det_{}_{}.ckpt",
            tag,
            std::process::id()
        ));
        trainer.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        (bytes, log.rows)
    };
    let (a_bytes, a_rows) = run("a");
    let (b_bytes, b_rows) = run("b");
    assert_eq!(a_rows, b_rows, "telemetry differs between identical runs");
    assert_eq!(a_bytes, b_bytes, "checkpoints differ between identical runs");
}

#[test]
fn telemetry_has_one_row_per_step() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg, 9);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let path = std::env::temp_dir().join(format!("wam_log_{}.csv", std::process::id()));
    let mut log = TrainLog::new(Some(path.clone())).unwrap();
    trainer.run_stage1(&data, &mut log).unwrap();
    trainer.run_stage2(&data, &mut log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,stage,world,cql,kl,total,grad_norm");
    let expected = (cfg.train.tokenizer_steps + cfg.train.m1_steps + cfg.train.m2_steps) as usize;
    assert_eq!(lines.len(), 1 + expected);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 7, "bad row: {}", line);
    }
    std::fs::remove_file(&path).ok();
}

#[test]
fn finetune_synthesizes_two_imagined_timesteps() {
    // Pretrain a little so imagination is stable, then inspect the pool.
    let mut cfg = tiny_config();
    cfg.train.finetune.pool_size = 12;
    cfg.train.finetune.steps = 4;
    cfg.train.finetune.refresh_every = 100;
    let data = tiny_data(&cfg, 11);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut log = TrainLog::new(None).unwrap();
    trainer.run_stage1(&data, &mut log).unwrap();
    trainer.run_stage2(&data, &mut log).unwrap();

    let holdout = EnvSpec::new(Task::HOLDOUT);
    let expert =
        generate_offline_dataset(&[holdout], &[0.01], 800, cfg.train.gamma, 13).unwrap();
    let row = trainer.run_finetune(&expert, true, &mut log).unwrap();
    assert_eq!(row, 3, "fresh task row appended after the training tasks");

    let ft = trainer.cfg.train.finetune.clone();
    let pool = trainer.synthesize_pool(&expert, row, &ft).unwrap();
    assert_eq!(pool.len(), ft.pool_size);
    for seg in &pool {
        let imagined = seg.imagined.iter().filter(|&&i| i).count();
        assert_eq!(imagined, 2, "exactly two imagined timesteps per segment");
        // imagined steps are the trailing ones and are valid
        let l = seg.valid.len();
        assert!(seg.imagined[l - 1] && seg.imagined[l - 2]);
        assert!(seg.valid[l - 1] && seg.valid[l - 2]);
        // real prefix is never longer than the configured prefix
        let real = seg
            .valid
            .iter()
            .zip(&seg.imagined)
            .filter(|(&v, &i)| v && !i)
            .count();
        assert!(real <= ft.real_prefix);
        assert_eq!(seg.task, row);
    }
}

#[test]
fn finetune_registers_mean_initialized_row_and_counts_steps() {
    let mut cfg = tiny_config();
    cfg.train.finetune.steps = 5;
    cfg.train.finetune.pool_size = 8;
    let data = tiny_data(&cfg, 15);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut log = TrainLog::new(None).unwrap();
    trainer.run_stage1(&data, &mut log).unwrap();
    trainer.run_stage2(&data, &mut log).unwrap();
    let n_before = trainer.cfg.model.num_tasks;
    let expert = generate_offline_dataset(
        &[EnvSpec::new(Task::HOLDOUT)],
        &[0.01],
        500,
        cfg.train.gamma,
        17,
    )
    .unwrap();
    trainer.run_finetune(&expert, true, &mut log).unwrap();
    assert_eq!(trainer.cfg.model.num_tasks, n_before + 1);
    assert_eq!(trainer.counters.finetune_steps, 5);
    let ft_rows = log.rows.iter().filter(|r| r.contains(",finetune,")).count();
    assert_eq!(ft_rows, 5);
}

#[test]
fn f32_precision_mode_trains_and_roundtrips() {
    let mut cfg = tiny_config();
    cfg.train.precision = "f32".into();
    cfg.train.tokenizer_steps = 4;
    cfg.train.m1_steps = 4;
    cfg.train.m2_steps = 6;
    let data = tiny_data(&cfg, 21);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut log = TrainLog::new(None).unwrap();
    trainer.run_stage1(&data, &mut log).unwrap();
    trainer.run_stage2(&data, &mut log).unwrap();
    for row in &log.rows[1..] {
        let total: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
        assert!(total.is_finite());
    }
    let path = std::env::temp_dir().join(format!("wam_f32_{}.ckpt", std::process::id()));
    trainer.save(&path).unwrap();
    let loaded = Trainer::load(&path, Some(&cfg)).unwrap();
    assert!(loaded.model.params.values_equal(&trainer.model.params));
    std::fs::remove_file(&path).ok();
}
