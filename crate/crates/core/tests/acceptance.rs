//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities. The end-to-end criteria (A8-A10) share one
//! pretrained artifact built on first use.

use std::sync::OnceLock;
use std::time::Instant;
use wam_core::backbone::build_interleaved_sequence;
use wam_core::config::{Config, ModelConfig};
use wam_core::dataset::{
    generate_offline_dataset, load_dataset, obs_to_f64, save_dataset, subsample,
};
use wam_core::envs::mdp::{
    env_to_mdp, exhaustive_plan_oracle, greedy_from_row, random_mdp, value_iteration,
    ExactModelAdapter, TabularMdp,
};
use wam_core::envs::{EnvSpec, Task};
use wam_core::error::WamError;
use wam_core::evaluation::{iqm, measure_reference_scores, normalized_score, rollout_policy, EvalPolicy};
use wam_core::losses::{atom_support, project_categorical};
use wam_core::numerics::check::max_rel_error_fd;
use wam_core::numerics::optim::OptimizerState;
use wam_core::numerics::tape::Tape;
use wam_core::pipeline::{TrainLog, Trainer};
use wam_core::planner::{
    beam_search_plan, bound_condition_holds, greedy_policy, run_bound_trials, PlanConfig,
    WorldModel,
};
use wam_core::rng::Rng64;

// ── Shared end-to-end artifact (A8, A9, A10) ────────────────────────────

struct Artifacts {
    train_secs: f64,
    checkpoint: std::path::PathBuf,
    world_log: Vec<f64>,
}

static ARTIFACTS: OnceLock<Artifacts> = OnceLock::new();

fn desk_specs() -> Vec<EnvSpec> {
    Task::TRAIN.iter().map(|&t| EnvSpec::new(t)).collect()
}

fn artifacts() -> &'static Artifacts {
    ARTIFACTS.get_or_init(|| {
        let cfg = Config::default();
        let started = Instant::now();
        let data = generate_offline_dataset(
            &desk_specs(),
            &cfg.data.mix,
            cfg.data.transitions_per_task,
            cfg.train.gamma,
            cfg.data.seed,
        )
        .expect("dataset generation");
        let mut trainer = Trainer::new(cfg).expect("trainer");
        let mut log = TrainLog::new(None).expect("log");
        trainer.run_stage1(&data, &mut log).expect("stage 1");
        trainer.run_stage2(&data, &mut log).expect("stage 2");
        let train_secs = started.elapsed().as_secs_f64();
        let world_log: Vec<f64> = log
            .rows
            .iter()
            .filter(|r| r.contains(",world,"))
            .map(|r| r.split(',').nth(5).unwrap().parse::<f64>().unwrap())
            .collect();
        let checkpoint = std::env::temp_dir().join(format!("wam_acc_{}.ckpt", std::process::id()));
        trainer.save(&checkpoint).expect("save checkpoint");
        drop(data);
        Artifacts {
            train_secs,
            checkpoint,
            world_log,
        }
    })
}

fn load_trained() -> Trainer {
    Trainer::load(&artifacts().checkpoint, None).expect("load shared checkpoint")
}

// ── A1: categorical projection vs hand-rule oracle ──────────────────────

fn projection_oracle(probs: &[f64], shifted: &[f64], support: &[f64]) -> Vec<f64> {
    let n = support.len();
    let (v_min, v_max) = (support[0], support[n - 1]);
    let dz = (v_max - v_min) / (n - 1) as f64;
    let mut out = vec![0.0; n];
    for (&p, &z) in probs.iter().zip(shifted) {
        let g = z.max(v_min).min(v_max);
        let b = ((g - v_min) / dz).min((n - 1) as f64).max(0.0);
        let (l, u) = (b.floor() as usize, b.ceil() as usize);
        if l == u {
            out[l] += p;
        } else {
            out[l] += p * (u as f64 - b);
            out[u] += p * (b - l as f64);
        }
    }
    out
}

#[test]
fn a1_projection_fuzz() {
    let started = Instant::now();
    let mut rng = Rng64::new(101);
    for case in 0..1000 {
        let n = 3 + rng.below(49);
        let v_min = rng.range(-15.0, 0.0);
        let v_max = v_min + rng.range(0.5, 45.0);
        let support = atom_support(v_min, v_max, n).unwrap();
        let mut probs: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-9).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let r = rng.range(-8.0, 8.0);
        let gamma = rng.range(0.0, 1.0);
        let shifted: Vec<f64> = support.iter().map(|z| r + gamma * z).collect();
        let got = project_categorical(&probs, &shifted, &support);
        let want = projection_oracle(&probs, &shifted, &support);
        let mass: f64 = got.iter().sum();
        assert!((mass - 1.0).abs() < 1e-6, "case {}: mass {}", case, mass);
        for (i, (a, b)) in got.iter().zip(&want).enumerate() {
            assert!((a - b).abs() < 1e-9, "case {} atom {}: {} vs {}", case, i, a, b);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "A1 took {:.2} s", secs);
    println!("A1 PASS: 1000 projections match the hand rule ({:.2} s)", secs);
}

// ── A2: gradient checks for every loss ──────────────────────────────────

#[test]
fn a2_gradient_checks() {
    use wam_core::backbone::{Backbone, Mode};
    use wam_core::config::TrainConfig;
    use wam_core::losses::{joint_loss_batch, world_loss_batch};
    use wam_core::tokenizer::Tokenizer;

    let started = Instant::now();
    let tiny = ModelConfig {
        obs_h: 8,
        obs_w: 8,
        vocab_size: 10,
        tokens_per_frame: 4,
        code_dim: 6,
        enc_channels: 3,
        layers: 1,
        hidden: 16,
        heads: 2,
        dropout: 0.0,
        qhead_layers: 3,
        qhead_hidden: 10,
        qhead_dropout: 0.0,
        seq_timesteps: 3,
        a_max: 3,
        num_tasks: 2,
        v_min: -2.0,
        v_max: 2.0,
        atoms: 5,
    };
    let support = atom_support(tiny.v_min, tiny.v_max, tiny.atoms).unwrap();
    let mut worst_overall = 0.0f64;

    for seed in 0..100u64 {
        let mut rng = Rng64::new(1000 + seed);

        // tokenizer loss
        {
            let mut tok = Tokenizer::new(&tiny, &mut rng).unwrap();
            let batch: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..64).map(|_| rng.uniform()).collect())
                .collect();
            let mut tape = Tape::new();
            let (loss, _) = tok.loss(&mut tape, &batch, 0).unwrap();
            let grads = tape.backward(loss).unwrap();
            let b2 = batch.clone();
            // Codebook indices may flip under perturbation; quantization is
            // piecewise constant, so probing remains valid almost surely.
            let params = &mut tok.params;
            let cfg_probe = tiny.clone();
            let worst = max_rel_error_fd(params, &grads, 4, &mut rng, |ps| {
                let mut t = Tokenizer::new(&cfg_probe, &mut Rng64::new(0)).unwrap();
                t.params = ps.clone();
                let mut tape = Tape::new();
                let (l, _) = t.loss(&mut tape, &b2, 0).unwrap();
                tape.scalar_value(l)
            });
            worst_overall = worst_overall.max(worst);
            assert!(worst < 1e-3, "tokenizer loss grad err {} at seed {}", worst, seed);
        }

        // world / action (kl, cql) / joint losses on the backbone
        {
            let model = Backbone::new(&tiny, &mut rng).unwrap();
            let frames: Vec<Vec<u16>> = (0..3)
                .map(|_| (0..4).map(|_| rng.below(10) as u16).collect())
                .collect();
            let actions: Vec<u8> = (0..3).map(|_| rng.below(3) as u8).collect();
            let mut seg =
                build_interleaved_sequence(rng.below(2), frames, actions, 4, 3).unwrap();
            seg.ternary = vec![(rng.below(3) as i8) - 1, 0, 1];
            seg.done = vec![false, false, rng.chance(0.5)];
            let target = model.snapshot_q_head(0);
            let masks = vec![vec![true; 3]; 2];

            // pick one of the loss variants per seed to stay inside budget
            let variant = seed % 4;
            let mut tc = TrainConfig::default();
            tc.gamma = 0.9;
            match variant {
                0 => {} // joint: alpha 0.1, beta 0.1
                1 => tc.ablation.no_world_loss = true, // action = alpha*cql + kl
                2 => {
                    // kl only
                    tc.ablation.no_world_loss = true;
                    tc.alpha = 0.0;
                }
                _ => {
                    // cql-dominated: kl still present but tiny target weight;
                    // keep full action loss with larger alpha
                    tc.ablation.no_world_loss = true;
                    tc.alpha = 1.0;
                }
            }
            let seg2 = seg.clone();
            let tc2 = tc.clone();
            let masks2 = masks.clone();
            let support2 = support.clone();
            let target2 = target.clone();

            let mut tape = Tape::new();
            let (loss, _) = joint_loss_batch(
                &mut tape,
                &model,
                std::slice::from_ref(&seg),
                &target,
                &support,
                &tc,
                &masks,
                Mode::Eval,
                None,
            )
            .unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut params = model.params.clone();
            let cfg_probe = tiny.clone();
            let worst = max_rel_error_fd(&mut params, &grads, 4, &mut rng, move |ps| {
                let mut m = Backbone::new(&cfg_probe, &mut Rng64::new(0)).unwrap();
                m.params = ps.clone();
                let mut tape = Tape::new();
                let (l, _) = joint_loss_batch(
                    &mut tape,
                    &m,
                    std::slice::from_ref(&seg2),
                    &target2,
                    &support2,
                    &tc2,
                    &masks2,
                    Mode::Eval,
                    None,
                )
                .unwrap();
                tape.scalar_value(l)
            });
            worst_overall = worst_overall.max(worst);
            assert!(
                worst < 1e-3,
                "loss variant {} grad err {} at seed {}",
                variant,
                worst,
                seed
            );

            // world loss alone, every fourth seed
            if seed % 4 == 0 {
                let seg3 = seg.clone();
                let mut tape = Tape::new();
                let (loss, _, _) =
                    world_loss_batch(&mut tape, &model, std::slice::from_ref(&seg), Mode::Eval, None)
                        .unwrap();
                let grads = tape.backward(loss).unwrap();
                let mut params = model.params.clone();
                let cfg_probe = tiny.clone();
                let worst = max_rel_error_fd(&mut params, &grads, 4, &mut rng, move |ps| {
                    let mut m = Backbone::new(&cfg_probe, &mut Rng64::new(0)).unwrap();
                    m.params = ps.clone();
                    let mut tape = Tape::new();
                    let (l, _, _) = world_loss_batch(
                        &mut tape,
                        &m,
                        std::slice::from_ref(&seg3),
                        Mode::Eval,
                        None,
                    )
                    .unwrap();
                    tape.scalar_value(l)
                });
                worst_overall = worst_overall.max(worst);
                assert!(worst < 1e-3, "world loss grad err {} at seed {}", worst, seed);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "A2 took {:.1} s", secs);
    println!(
        "A2 PASS: 100 seeds, max relative error {:.2e} ({:.1} s)",
        worst_overall, secs
    );
}

// ── A3 & A4: planner call counts and degeneracies ───────────────────────

struct SyntheticModel {
    q: Vec<Vec<f64>>,
    n_actions: usize,
}

impl WorldModel for SyntheticModel {
    type State = usize;
    fn q_values(&mut self, s: &usize) -> Vec<f64> {
        self.q[*s % self.q.len()].clone()
    }
    fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
        ((s * self.n_actions + action + 1) % 9973, 0.05, false)
    }
}

#[test]
fn a3_call_count_grid() {
    let mut rng = Rng64::new(7);
    let q: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    for k in 1..=4usize {
        for h in 1..=4usize {
            let mut model = SyntheticModel { q: q.clone(), n_actions: 4 };
            let cfg = PlanConfig::new(h, k, 0.99, vec![true; 4]).unwrap();
            let (_, diag) = beam_search_plan(&0usize, &cfg, &mut model).unwrap();
            assert_eq!(diag.model_calls, k * k * (h - 1) + k, "K={} H={}", k, h);
        }
    }
    println!("A3 PASS: imagine-step count equals K^2(H-1)+K for K,H in 1..4");
}

#[test]
fn a4_degeneracy_matches_greedy() {
    let mut rng = Rng64::new(11);
    let q: Vec<Vec<f64>> = (0..1000)
        .map(|_| (0..5).map(|_| rng.normal()).collect())
        .collect();
    let valid = vec![true; 5];
    for s in 0..1000usize {
        let greedy = greedy_policy(&q[s], &valid).unwrap();
        let mut model = SyntheticModel { q: q.clone(), n_actions: 5 };
        let cfg_h0 = PlanConfig::new(0, 3, 0.99, valid.clone()).unwrap();
        let (a, _) = beam_search_plan(&s, &cfg_h0, &mut model).unwrap();
        assert_eq!(a, greedy, "H=0 state {}", s);
        let cfg_k1 = PlanConfig::new(3, 1, 0.99, valid.clone()).unwrap();
        let (a, _) = beam_search_plan(&s, &cfg_k1, &mut model).unwrap();
        assert_eq!(a, greedy, "K=1 state {}", s);
    }
    println!("A4 PASS: H=0 and K=1 planner actions equal the greedy policy on 1000 states");
}

// ── A5: exact-model beam search equals oracles ──────────────────────────

struct TabularModel<'a> {
    adapter: ExactModelAdapter<'a>,
}

impl WorldModel for TabularModel<'_> {
    type State = usize;
    fn q_values(&mut self, s: &usize) -> Vec<f64> {
        self.adapter.q_table[*s].clone()
    }
    fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
        self.adapter.sample_step(*s, action)
    }
}

#[test]
fn a5_exact_model_optimality() {
    let gamma = 0.95;
    let mut cases: Vec<(String, TabularMdp)> = Vec::new();
    // chain MDPs
    let mut chain = TabularMdp::deterministic(6, 2, |s, a| {
        if s >= 5 {
            (5, 0.0, true)
        } else if a == 0 {
            (s + 1, if s + 1 == 5 { 1.0 } else { 0.0 }, s + 1 == 5)
        } else {
            (s.saturating_sub(1), 0.0, false)
        }
    });
    chain.terminal[5] = true;
    cases.push(("chain".into(), chain));
    // deterministic random MDPs
    let mut rng = Rng64::new(13);
    for i in 0..5 {
        cases.push((format!("random-{}", i), random_mdp(&mut rng, 9, 3, 1.0, false)));
    }
    // deterministic grid tasks as enumerable MDPs
    for task in [Task::GridCollect, Task::KeyDoor] {
        let env_mdp = env_to_mdp(&EnvSpec::new(task));
        cases.push((task.name().to_string(), env_mdp.mdp));
    }

    let mut states_checked = 0usize;
    for (name, mdp) in &cases {
        assert!(mdp.is_deterministic());
        let q = value_iteration(mdp, gamma, 1e-12).unwrap();
        let k = mdp.n_actions;
        for h in 1..=4usize {
            for s in 0..mdp.n_states {
                if mdp.terminal[s] {
                    continue;
                }
                let mut model = TabularModel {
                    adapter: ExactModelAdapter::exact(mdp, &q, 1),
                };
                let cfg = PlanConfig::new(h, k, gamma, vec![true; k]).unwrap();
                let (beam_action, _) = beam_search_plan(&s, &cfg, &mut model).unwrap();
                let (oracle_action, _) = exhaustive_plan_oracle(mdp, &q, s, h, gamma).unwrap();
                let vi_action = greedy_from_row(&q[s]);
                assert_eq!(beam_action, oracle_action, "{} s={} h={}", name, s, h);
                assert_eq!(beam_action, vi_action, "{} s={} h={}", name, s, h);
                states_checked += 1;
            }
        }
    }
    println!(
        "A5 PASS: beam (K=|A|) matches exhaustive search and value iteration on {} state-horizon pairs",
        states_checked
    );
}

// ── A6: error bound trials + condition algebra ──────────────────────────

#[test]
fn a6_bound_trials_and_condition_algebra() {
    let trials = run_bound_trials(500, 20260808).unwrap();
    assert_eq!(trials.len(), 500);
    for t in &trials {
        assert!(
            t.measured_gap <= t.bound + 1e-9,
            "trial {}: gap {} > bound {}",
            t.trial,
            t.measured_gap,
            t.bound
        );
    }
    // Eq-14 evaluator vs the rearranged inequality on 10^4 draws
    let mut rng = Rng64::new(404);
    for _ in 0..10_000 {
        let gamma = rng.range(0.05, 0.99);
        let h = 1 + rng.below(6);
        let (es, er, eq) = (rng.range(0.0, 1.0), rng.range(0.0, 1.0), rng.range(0.0, 2.0));
        let (lr, lq) = (rng.range(0.0, 2.0), rng.range(0.0, 2.0));
        let got = bound_condition_holds(es, er, eq, lr, lq, gamma, h).unwrap();
        let gh = gamma.powi(h as i32);
        let rhs = (1.0 - gh) / (1.0 - gamma) * er
            + ((gamma - gh) / (1.0 - gamma) * lr + gh * lq) * es
            + gh * eq;
        assert_eq!(got, rhs <= eq + 1e-12);
    }
    let max_gap_ratio = trials
        .iter()
        .filter(|t| t.bound > 0.0)
        .map(|t| t.measured_gap / t.bound)
        .fold(0.0f64, f64::max);
    println!(
        "A6 PASS: 0/500 bound violations (max gap/bound {:.3}); condition evaluator agrees with the rearrangement on 10^4 draws",
        max_gap_ratio
    );
}

// ── A7: paper-scale sequence budget ─────────────────────────────────────

#[test]
fn a7_paper_sequence_budget() {
    let paper = ModelConfig::paper();
    assert_eq!(paper.seq_timesteps, 8);
    assert_eq!(paper.tokens_per_frame, 36);
    assert_eq!(paper.max_tokens(), 296);
    let seg =
        build_interleaved_sequence(0, vec![vec![0u16; 36]; 8], vec![0u8; 8], 36, 8).unwrap();
    assert_eq!(seg.n_positions(), 296);
    println!("A7 PASS: L=8, K=36 yields exactly 296 positions");
}

// ── A8: end-to-end desk pretraining ─────────────────────────────────────

#[test]
fn a8_end_to_end_pretraining() {
    let art = artifacts();
    let trainer = load_trained();
    let eval_started = Instant::now();

    let mut specs = Vec::new();
    for (row, spec) in desk_specs().into_iter().enumerate() {
        let mut spec = spec;
        let (r, o) = measure_reference_scores(&spec, 64, 0.99, 9090).unwrap();
        spec.ref_random = Some(r);
        spec.ref_oracle = Some(o);
        specs.push((spec, row));
    }
    let greedy = trainer
        .evaluate(&specs, 16, 0.001, None, 2026)
        .unwrap();
    let planned = trainer
        .evaluate(&specs, 16, 0.001, Some((2, 2)), 2026)
        .unwrap();
    let eval_secs = eval_started.elapsed().as_secs_f64();
    let total_secs = art.train_secs + eval_secs;

    let greedy_ons: Vec<f64> = greedy.iter().map(|r| r.normalized).collect();
    let plan_ons: Vec<f64> = planned.iter().map(|r| r.normalized).collect();
    for (row, ons) in greedy.iter().zip(&greedy_ons) {
        println!(
            "  A8 {}: greedy ONS {:.3} (raw {:.3}, random {:.3}, oracle {:.3})",
            row.task, ons, row.raw_mean, row.ref_random, row.ref_oracle
        );
    }
    for (row, ons) in planned.iter().zip(&plan_ons) {
        println!("  A8 {}: planned ONS {:.3} (raw {:.3})", row.task, ons, row.raw_mean);
    }

    // stage-1 world loss decreases under 100-step smoothing (soft check)
    let w = &art.world_log;
    let smooth = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(
        smooth(&w[..100]) > smooth(&w[w.len() - 100..]),
        "world loss did not decrease"
    );

    let hits = greedy_ons.iter().filter(|&&o| o >= 0.8).count();
    assert!(
        hits >= 2,
        "only {}/3 tasks reached 80% ONS: {:?}",
        hits,
        greedy_ons
    );
    let iqm_greedy = iqm(&greedy_ons).unwrap();
    let iqm_plan = iqm(&plan_ons).unwrap();
    assert!(
        iqm_plan - iqm_greedy >= -0.05,
        "planning dropped IQM ONS too far: {:.3} -> {:.3}",
        iqm_greedy,
        iqm_plan
    );
    let improved = greedy_ons
        .iter()
        .zip(&plan_ons)
        .filter(|(g, p)| p > g)
        .count();
    assert!(improved >= 1, "planning improved no task");
    assert!(
        total_secs < 1800.0,
        "pipeline took {:.0} s (budget 1800)",
        total_secs
    );
    println!(
        "A8 PASS: greedy ONS {:?} (IQM {:.3}), planned IQM {:.3}, {} task(s) improved, {:.0} s total",
        greedy_ons.iter().map(|o| (o * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        iqm_greedy,
        iqm_plan,
        improved,
        total_secs
    );
}

// ── A9: transfer to the held-out task ───────────────────────────────────

#[test]
fn a9_transfer_beats_scratch() {
    let _ = artifacts();
    let started = Instant::now();
    let holdout = EnvSpec::new(Task::HOLDOUT);
    let expert = generate_offline_dataset(
        &[holdout.clone()],
        &[0.01],
        5000,
        0.99,
        31,
    )
    .unwrap();

    // fine-tune the pretrained checkpoint
    let mut tuned = load_trained();
    let mut log = TrainLog::new(None).unwrap();
    let row = tuned.run_finetune(&expert, true, &mut log).unwrap();

    // from-scratch baseline: same procedure, fresh parameters
    let mut scratch_cfg = Config::default();
    scratch_cfg.model.num_tasks = 1;
    scratch_cfg.train.seed = 77;
    let mut scratch = Trainer::new(scratch_cfg).unwrap();
    let mut slog = TrainLog::new(None).unwrap();
    let srow = scratch.run_finetune(&expert, false, &mut slog).unwrap();

    let (r_ref, o_ref) = measure_reference_scores(&holdout, 64, 0.99, 606).unwrap();
    let mut spec = holdout.clone();
    spec.ref_random = Some(r_ref);
    spec.ref_oracle = Some(o_ref);
    let tuned_rows = tuned
        .evaluate(&[(spec.clone(), row)], 16, 0.001, None, 4242)
        .unwrap();
    let scratch_rows = scratch
        .evaluate(&[(spec, srow)], 16, 0.001, None, 4242)
        .unwrap();
    let tuned_return = tuned_rows[0].raw_mean;
    let scratch_return = scratch_rows[0].raw_mean;
    let secs = started.elapsed().as_secs_f64();
    assert!(
        tuned_return >= 2.0 * scratch_return,
        "fine-tuned {:.3} < 2 x scratch {:.3}",
        tuned_return,
        scratch_return
    );
    assert!(secs < 600.0, "A9 took {:.0} s (budget 600)", secs);
    println!(
        "A9 PASS: fine-tuned return {:.3} vs scratch {:.3} (oracle {:.3}, random {:.3}), {:.0} s",
        tuned_return, scratch_return, o_ref, r_ref, secs
    );
}

// ── A10: tokenizer quality after stage 1 ────────────────────────────────

#[test]
fn a10_tokenizer_quality() {
    let _ = artifacts();
    let trainer = load_trained();
    // held-out frames: same envs, different behavior seed
    let held_out = generate_offline_dataset(&desk_specs(), &[1.0, 0.1], 2000, 0.99, 1234).unwrap();
    let mut frames = Vec::new();
    for task in &held_out.tasks {
        for t in task.transitions.iter().step_by(7) {
            frames.push(obs_to_f64(&t.obs));
        }
    }
    let tok = &trainer.tokenizer;
    let mut l1_sum = 0.0;
    let mut idempotent = 0usize;
    for f in &frames {
        let tokens = tok.encode_observation(f).unwrap();
        let recon = tok.decode_tokens(&tokens).unwrap();
        l1_sum += f
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / f.len() as f64;
        if tok.encode_observation(&recon).unwrap() == tokens {
            idempotent += 1;
        }
    }
    let l1 = l1_sum / frames.len() as f64;
    let usage = tok.codebook_usage(&frames).unwrap();
    let idem_frac = idempotent as f64 / frames.len() as f64;
    assert!(l1 < 0.05, "held-out per-pixel L1 {:.4}", l1);
    assert!(usage >= 0.5, "codebook usage {:.2}", usage);
    assert!(idem_frac >= 0.9, "re-encode idempotence {:.2}", idem_frac);
    println!(
        "A10 PASS: held-out L1 {:.4}, codebook usage {:.0}%, idempotence {:.0}% over {} frames",
        l1,
        usage * 100.0,
        idem_frac * 100.0,
        frames.len()
    );
}

// ── A11: determinism & persistence ──────────────────────────────────────

#[test]
fn a11_determinism_and_persistence() {
    // interrupt/resume reproduces telemetry bit-exactly
    let mut cfg = Config::default();
    cfg.train.tokenizer_steps = 8;
    cfg.train.m1_steps = 8;
    cfg.train.m2_steps = 110;
    cfg.data.transitions_per_task = 1500;
    let data = generate_offline_dataset(
        &desk_specs(),
        &cfg.data.mix,
        cfg.data.transitions_per_task,
        cfg.train.gamma,
        5,
    )
    .unwrap();

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut log_a = TrainLog::new(None).unwrap();
    straight.run_stage1(&data, &mut log_a).unwrap();
    straight.run_stage2(&data, &mut log_a).unwrap();

    let mut interrupted = Trainer::new(cfg.clone()).unwrap();
    let mut log_b = TrainLog::new(None).unwrap();
    interrupted.run_stage1(&data, &mut log_b).unwrap();
    interrupted.run_stage2_partial(&data, &mut log_b, 100).unwrap();
    let ckpt = std::env::temp_dir().join(format!("wam_a11_{}.ckpt", std::process::id()));
    interrupted.save(&ckpt).unwrap();
    let mut resumed = Trainer::load(&ckpt, Some(&cfg)).unwrap();
    let mut log_c = TrainLog::new(None).unwrap();
    resumed.run_stage2_partial(&data, &mut log_c, 10).unwrap();

    let joint_rows = |rows: &[String]| -> Vec<String> {
        rows.iter().filter(|r| r.contains(",joint,")).cloned().collect()
    };
    let a_rows = joint_rows(&log_a.rows);
    let c_rows = joint_rows(&log_c.rows);
    assert_eq!(a_rows.len(), 110);
    assert_eq!(c_rows.len(), 10);
    assert_eq!(&a_rows[100..110], &c_rows[..], "resumed telemetry differs");

    // config-hash mismatch refusal
    let mut altered = cfg.clone();
    altered.train.seed += 1;
    match Trainer::load(&ckpt, Some(&altered)) {
        Err(WamError::Config(_)) => {}
        other => panic!("expected refusal, got {:?}", other.map(|_| ())),
    }
    std::fs::remove_file(&ckpt).ok();

    // shard roundtrip field-exactness and corruption detection
    let dir = std::env::temp_dir().join(format!("wam_a11_data_{}", std::process::id()));
    save_dataset(&data, &dir).unwrap();
    let loaded = load_dataset(&dir).unwrap();
    for (a, b) in data.tasks.iter().zip(&loaded.tasks) {
        assert_eq!(a.transitions, b.transitions);
    }
    let shard = dir.join("grid-collect.shard");
    let mut bytes = std::fs::read(&shard).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x42;
    std::fs::write(&shard, &bytes).unwrap();
    assert!(matches!(load_dataset(&dir), Err(WamError::Integrity(_))));
    std::fs::remove_dir_all(&dir).ok();

    // subsampled views stay structurally sound
    let sub = subsample(&data, 0.5, 9).unwrap();
    assert_eq!(sub.tasks[0].kept_count(), data.tasks[0].transitions.len() / 2);

    println!("A11 PASS: resume telemetry bit-exact, hash refusal, shard integrity enforced");
}

// ── A12: metrics ────────────────────────────────────────────────────────

#[test]
fn a12_metrics() {
    assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
    let assault = normalized_score(2302.0, 222.4, 742.0).unwrap();
    assert!((assault - 4.00).abs() <= 0.01, "{}", assault);
    println!("A12 PASS: iqm([1,2,3,4]) = 2.5, normalized score {:.3}", assault);
}

// ── Supporting checks used by the suite ─────────────────────────────────

#[test]
fn planner_reference_scores_sane() {
    // Oracle policies must clearly dominate random ones for every task the
    // acceptance run normalizes against.
    for task in Task::ALL {
        let spec = EnvSpec::new(task);
        let (random, oracle) = measure_reference_scores(&spec, 32, 0.99, 3).unwrap();
        assert!(oracle > random, "{:?}", task);
        let returns = rollout_policy(&spec, &EvalPolicy::Random, 8, 0.0, 0.99, 4).unwrap();
        assert_eq!(returns.len(), 8);
    }
    let _ = OptimizerState::new(1e-3, 0.0);
}
