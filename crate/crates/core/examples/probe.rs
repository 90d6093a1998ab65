//! Scratch harness for tuning the full-environment training setup: trains a
//! small policy, then prints its action distribution and eval stats next to
//! the uniform-random baseline.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pension_sim::environment::{
    assemble_observation, ActionChoice, EnvConfig, Environment, MarketState,
};
use pension_sim::population::{AgentState, BehaviouralTriple};
use pension_sim::policy::{greedy_action, sample_action, Checkpoint, HiddenState};
use pension_sim::population::{load_tables, CalibrationTables, PopulationSpec};
use pension_sim::socialgraph::GraphSpec;
use pension_sim::training::{Trainer, TrainerConfig};

fn setup() -> (Arc<CalibrationTables>, PopulationSpec, GraphSpec, MarketState, EnvConfig) {
    let tables = Arc::new(load_tables(std::path::Path::new("crates/core/data")).unwrap());
    let pop = PopulationSpec { count: 100, ..Default::default() };
    let graph = GraphSpec { p_intra: 0.05, p_inter: 0.01, ..Default::default() };
    (tables, pop, graph, MarketState::default(), EnvConfig {
        episode_length_ticks: 600,
        ..Default::default()
    })
}

fn evaluate(
    checkpoint: Option<&Checkpoint>,
    argmax: bool,
    ticks: u32,
    seed: u64,
) -> (f64, f64, f64, [f64; 5], [f64; 5]) {
    let (tables, pop, graph, market, env_config) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Environment::new(tables, &pop, &graph, market, env_config, &mut rng).unwrap();
    let mut scaler = checkpoint.map(|c| c.scaler.clone());
    let mut hidden: Vec<HiddenState> = checkpoint
        .map(|c| (0..env.agents().len()).map(|_| c.params.hidden_state()).collect())
        .unwrap_or_default();
    let agents0 = env.agents().len() as f64;
    let mut total_reward = 0.0;
    let mut crises = 0u64;
    let mut n = 0u64;
    let mut lbin_counts = [0f64; 5];
    let mut cbin_counts = [0f64; 5];
    let mut lbin_n = 0f64;
    for _ in 0..ticks {
        let observations = env.observations().unwrap();
        let mut actions: Vec<Option<ActionChoice>> = vec![None; env.agents().len()];
        for (idx, obs) in observations.iter().enumerate() {
            let Some(raw) = obs else { continue };
            let a = match checkpoint {
                Some(c) => {
                    let scaled = scaler.as_mut().unwrap().update_transform(raw).unwrap();
                    let (tape, next) = c.params.forward(&scaled, &hidden[idx]).unwrap();
                    hidden[idx] = next;
                    if argmax {
                        greedy_action(&tape.probs).unwrap()
                    } else {
                        sample_action(&tape.probs, 0.0, &mut rng).unwrap()
                    }
                }
                None => ActionChoice {
                    consumption_bin: rng.gen_range(0..5),
                    liquidity_bin: rng.gen_range(0..5),
                },
            };
            lbin_counts[a.liquidity_bin as usize] += 1.0;
            cbin_counts[a.consumption_bin as usize] += 1.0;
            lbin_n += 1.0;
            actions[idx] = Some(a);
        }
        for out in &env.step(&actions, &mut rng).unwrap() {
            total_reward += out.reward;
            n += 1;
            crises += u64::from(out.crisis);
        }
        if env.episode_done() {
            break;
        }
    }
    let mean_liquid = env.agents().iter().filter(|a| a.alive).map(|a| a.liquid_asset).sum::<f64>()
        / env.agents().iter().filter(|a| a.alive).count() as f64;
    for c in lbin_counts.iter_mut() {
        *c /= lbin_n;
    }
    for c in cbin_counts.iter_mut() {
        *c /= lbin_n;
    }
    (total_reward / agents0, crises as f64 / n as f64, mean_liquid, lbin_counts, cbin_counts)
}


// Argmax action for a synthetic employed agent at several income levels and
// liquid balances, to show whether the policy conditions on income/liquidity.
fn inspect(ck: &Checkpoint, tables: &CalibrationTables, market: &MarketState) {
    let occ_count = tables.occupations.len();
    for &(income, liquid) in
        &[(1000.0, 0.0), (1500.0, 0.0), (2500.0, 0.0), (5000.0, 0.0), (2500.0, 50_000.0)]
    {
        let agent = AgentState {
            id: 0,
            occupation: 0,
            age_months: 480,
            employed: true,
            remaining_unemployment: 0,
            monthly_income: income,
            liquid_asset: liquid,
            non_liquid_asset: 0.0,
            retired: false,
            alive: true,
            last_salary: income,
            behaviour: BehaviouralTriple {
                consumption_utility_factor: 1.0,
                shock_sensitivity_factor: 0.0,
                individuality_factor: 0.5,
            },
            accumulated_consumption: 0.0,
            accumulated_penalty: 0.0,
        };
        let raw = assemble_observation(&agent, market, 0.0, occ_count);
        let scaled = ck.scaler.transform(&raw).unwrap();
        let mut hidden = ck.params.hidden_state();
        // run a few repeats so the recurrent state settles
        let mut act = ActionChoice { consumption_bin: 0, liquidity_bin: 0 };
        for _ in 0..6 {
            let (tape, next) = ck.params.forward(&scaled, &hidden).unwrap();
            hidden = next;
            act = greedy_action(&tape.probs).unwrap();
        }
        eprintln!(
            "inspect income {income:>6.0} liquid {liquid:>6.0} -> consume {}% liquidity {}%",
            act.consumption_bin as u32 * 25,
            act.liquidity_bin as u32 * 25
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let updates: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.99);
    let entropy: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let n_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(708);
    let value_w: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let entropy_end: Option<f64> = args.get(7).map(|s| s.parse().unwrap());
    let (tables, pop, graph, market, env_config) = setup();
    let config = TrainerConfig {
        updates,
        n_envs: 4,
        n_steps,
        gamma,
        entropy_weight: entropy,
        value_loss_weight: value_w,
        entropy_weight_end: entropy_end,
        learning_rate: 1e-3,
        encoder_widths: vec![32],
        lstm_width: 32,
        ..Default::default()
    };
    let mut trainer =
        Trainer::new(tables, pop, graph, market, env_config, config, seed).unwrap();
    let metrics = trainer.run(None).unwrap();
    for m in metrics.iter().rev().take(1) {
        eprintln!(
            "final update {}: mean_reward {:.1} entropy {:.3} crisis {:.4}",
            m.update, m.mean_reward, m.entropy, m.crisis_rate
        );
    }
    let ck = trainer.checkpoint();
    {
        let (tables, _, _, market, _) = setup();
        inspect(&ck, &tables, &market);
    }
    for ticks in [120u32, 600] {
        let (rr, rc, rl, rb, _) = evaluate(None, true, ticks, 7001);
        for argmax in [true, false] {
            let label = if argmax { "argmax" } else { "sample" };
            let (tr, tc, tl, tb, tcb) = evaluate(Some(&ck), argmax, ticks, 7001);
            eprintln!("[{ticks} ticks] {label}: reward {tr:.1} crisis {tc:.4} mean_liquid {tl:.0} lbins {tb:.3?} cbins {tcb:.3?}");
            eprintln!("[{ticks} ticks] {label} improvement {:.3}", (tr - rr) / rr.abs());
        }
        eprintln!("[{ticks} ticks] random: reward {rr:.1} crisis {rc:.4} mean_liquid {rl:.0} lbins {rb:.3?}");
    }
}
