use wam_core::backbone::{q_values_at_context, TokenContext};
use wam_core::envs::mdp::{env_to_mdp, value_iteration};
use wam_core::envs::{env_step, initial_state, render_observation, EnvSpec, Task};
use wam_core::pipeline::Trainer;
use wam_core::rng::Rng64;

fn main() {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let trainer = Trainer::load(std::path::Path::new(&path), None).unwrap();
    let spec = EnvSpec::new(Task::GridDodge);
    let env_mdp = env_to_mdp(&spec);
    let q_star = value_iteration(&env_mdp.mdp, 0.99, 1e-8).unwrap();
    let valid = spec.task.valid_actions();
    let mut rng = Rng64::new(1);
    let mut state = initial_state(&spec);
    let mut ctx = TokenContext::new(1, 8, 4);
    ctx.push_frame(
        trainer
            .tokenizer
            .encode_observation(&render_observation(&spec, &state))
            .unwrap(),
    )
    .unwrap();
    for step in 0..12 {
        let q = q_values_at_context(&trainer.model, &ctx, &trainer.support).unwrap();
        let si = env_mdp.state_index(&state).unwrap();
        let q_local: Vec<f64> = valid.iter().map(|&a| q[a]).collect();
        let model_act = valid[(0..valid.len())
            .max_by(|&a, &b| q_local[a].partial_cmp(&q_local[b]).unwrap())
            .unwrap()];
        let oracle_act = valid[(0..valid.len())
            .max_by(|&a, &b| q_star[si][a].partial_cmp(&q_star[si][b]).unwrap())
            .unwrap()];
        println!(
            "step {}: agent c={} hazard=({},{})  Qmodel {:?} -> {}   Q* {:?} -> {}",
            step,
            state.agent_c,
            state.aux_a,
            state.aux_b,
            q_local.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            model_act,
            q_star[si].iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            oracle_act
        );
        let (next, r, done) = env_step(&spec, &state, oracle_act, &mut rng).unwrap();
        println!("   took oracle action {} -> r {}, done {}", oracle_act, r, done);
        if done {
            break;
        }
        ctx.push_action(oracle_act as u8).unwrap();
        ctx.push_frame(
            trainer
                .tokenizer
                .encode_observation(&render_observation(&spec, &next))
                .unwrap(),
        )
        .unwrap();
        state = next;
    }
}
