use std::time::Instant;
use wam_core::backbone::Mode;
use wam_core::config::Config;
use wam_core::dataset::{generate_offline_dataset, sample_segment_batch};
use wam_core::envs::{EnvSpec, Task};
use wam_core::losses::{atom_support, joint_loss_batch};
use wam_core::numerics::optim::{adamw_update, clip_global_norm, OptimizerState};
use wam_core::numerics::tape::Tape;
use wam_core::pipeline::Trainer;
use wam_core::rng::Rng64;

fn main() {
    let cfg = Config::default();
    let specs: Vec<EnvSpec> = Task::TRAIN.iter().map(|&t| EnvSpec::new(t)).collect();
    let data = generate_offline_dataset(&specs, &[1.0, 0.1], 3000, 0.99, 1).unwrap();
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let model = &trainer.model;
    let target = model.snapshot_q_head(0);
    let support = atom_support(-10.0, 30.0, 51).unwrap();
    let masks: Vec<Vec<bool>> = (0..3).map(|i| Task::TRAIN[i].valid_mask().to_vec()).collect();
    let mut rng = Rng64::new(5);
    let mut drng = Rng64::new(6);
    let raws = sample_segment_batch(&data, 8, 8, &mut rng).unwrap();
    let segs: Vec<_> = raws
        .iter()
        .map(|r| {
            let frames = r
                .obs
                .iter()
                .zip(&r.valid)
                .map(|(o, &v)| {
                    if v {
                        trainer
                            .tokenizer
                            .encode_observation(&wam_core::dataset::obs_to_f64(o))
                            .unwrap()
                    } else {
                        vec![0u16; 4]
                    }
                })
                .collect();
            wam_core::backbone::TokenSegment {
                task: r.task_index,
                frames,
                actions: r.actions.clone(),
                ternary: r.ternary.clone(),
                done: r.done.clone(),
                truncated: r.truncated.clone(),
                valid: r.valid.clone(),
                imagined: r.imagined.clone(),
                tokens_per_frame: 4,
            }
        })
        .collect();
    let mut params = trainer.model.params.clone();
    let mut opt = OptimizerState::new(5e-5, 0.01);
    // warmup + timed loop
    let mut t_fwd = 0.0;
    let mut t_bwd = 0.0;
    let mut t_opt = 0.0;
    let reps = 20;
    for i in 0..reps + 2 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (loss, _) = joint_loss_batch(
            &mut tape, model, &segs, &target, &support, &cfg.train, &masks,
            Mode::Train, Some(&mut drng),
        )
        .unwrap();
        let t1 = Instant::now();
        let mut grads = tape.backward(loss).unwrap();
        let t2 = Instant::now();
        clip_global_norm(&mut grads, 1.0).unwrap();
        adamw_update(&mut params, &grads, &mut opt).unwrap();
        let t3 = Instant::now();
        if i >= 2 {
            t_fwd += (t1 - t0).as_secs_f64();
            t_bwd += (t2 - t1).as_secs_f64();
            t_opt += (t3 - t2).as_secs_f64();
        }
    }
    println!(
        "fwd {:.1} ms, bwd {:.1} ms, opt {:.1} ms",
        t_fwd / reps as f64 * 1e3,
        t_bwd / reps as f64 * 1e3,
        t_opt / reps as f64 * 1e3
    );
}
