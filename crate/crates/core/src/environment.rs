//! The monthly agent-environment cycle.
//!
//! A tick runs, in order: asset growth, aging and death, retirement, layoff,
//! re-hiring, salary credit, action application, and the reward engine
//! (consumption utility, savings utility, utility delta, shock modifier, and
//! the two piecewise penalties).
//!
//! Money flows per agent per tick conserve exactly: earnings plus asset
//! returns equal consumption financed from income plus asset deltas plus
//! consumption financed from the pots.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::population::{
    bootstrap_population, sample_death, sample_income, AgentState, CalibrationTables,
    PopulationSpec,
};
use crate::socialgraph::{build_three_community_graph, network_observation, GraphSpec, SocialGraph};

/// Fraction bins shared by the consumption and liquidity choices.
pub const ACTION_BINS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Number of joint (consumption, liquidity) actions.
pub const ACTION_COUNT: usize = ACTION_BINS.len() * ACTION_BINS.len();

/// Floor for CRRA evaluation at zero consumption.
pub const CRRA_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionChoice {
    pub consumption_bin: u8,
    pub liquidity_bin: u8,
}

impl ActionChoice {
    pub fn from_id(id: usize) -> SimResult<Self> {
        if id >= ACTION_COUNT {
            return Err(SimError::Protocol(format!("action id {id} out of range")));
        }
        Ok(ActionChoice {
            consumption_bin: (id / ACTION_BINS.len()) as u8,
            liquidity_bin: (id % ACTION_BINS.len()) as u8,
        })
    }

    pub fn joint_id(&self) -> usize {
        self.consumption_bin as usize * ACTION_BINS.len() + self.liquidity_bin as usize
    }

    /// Fraction of earnings consumed.
    pub fn consumption_fraction(&self) -> f64 {
        ACTION_BINS[self.consumption_bin as usize]
    }

    /// Fraction of the saved amount allocated to the liquid asset.
    pub fn liquidity_fraction(&self) -> f64 {
        ACTION_BINS[self.liquidity_bin as usize]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarketState {
    pub monthly_market_interest_rate: f64,
    pub cpi: f64,
    pub monthly_non_liquid_return: f64,
    pub monthly_liquid_return: f64,
    pub monthly_minimum_consumption: f64,
    pub monthly_minimum_wage: f64,
}

impl Default for MarketState {
    fn default() -> Self {
        MarketState {
            monthly_market_interest_rate: 0.0,
            cpi: 0.0,
            monthly_non_liquid_return: 0.0125,
            monthly_liquid_return: 0.0025,
            monthly_minimum_consumption: 1073.0,
            monthly_minimum_wage: 1160.0,
        }
    }
}

impl MarketState {
    pub fn validate(&self) -> SimResult<()> {
        if self.monthly_non_liquid_return <= -1.0 || self.monthly_liquid_return <= -1.0 {
            return Err(SimError::Config("asset returns must exceed -1".into()));
        }
        if self.monthly_minimum_consumption < 0.0 {
            return Err(SimError::Config("minimum consumption must be >= 0".into()));
        }
        Ok(())
    }

    /// Flat market observation vector.
    pub fn as_vector(&self) -> Vec<f64> {
        vec![
            self.monthly_market_interest_rate,
            self.cpi,
            self.monthly_non_liquid_return,
            self.monthly_liquid_return,
            self.monthly_minimum_consumption,
            self.monthly_minimum_wage,
        ]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvConfig {
    pub retirement_age_years: u32,
    pub retirement_salary_multiplier: f64,
    pub consumption_crisis_penalty: f64,
    pub invalid_action_penalty_modifier: f64,
    pub discount: f64,
    pub episode_length_ticks: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            retirement_age_years: 65,
            retirement_salary_multiplier: 0.8,
            consumption_crisis_penalty: 100_000.0,
            invalid_action_penalty_modifier: 1000.0,
            discount: 0.99,
            episode_length_ticks: 600,
        }
    }
}

impl EnvConfig {
    pub fn retirement_age_months(&self) -> u32 {
        self.retirement_age_years * 12
    }

    pub fn validate(&self) -> SimResult<()> {
        if !(0.0..=1.0).contains(&self.retirement_salary_multiplier)
            || self.retirement_salary_multiplier == 0.0
        {
            return Err(SimError::Config("retirement salary multiplier must be in (0,1]".into()));
        }
        if self.consumption_crisis_penalty < 0.0 || self.invalid_action_penalty_modifier < 0.0 {
            return Err(SimError::Config("penalties must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) || self.discount == 0.0 {
            return Err(SimError::Config("discount must be in (0,1]".into()));
        }
        Ok(())
    }
}

// --- reward engine ------------------------------------------------------

/// Constant relative risk aversion utility; natural log at eta = 1.
/// Arguments at or below zero are clamped to a small epsilon.
pub fn crra(l: f64, eta: f64) -> f64 {
    let l = l.max(CRRA_EPSILON);
    if (eta - 1.0).abs() < 1e-12 {
        l.ln()
    } else {
        (l.powf(1.0 - eta) - 1.0) / (1.0 - eta)
    }
}

/// Consumption utility with the agent's factor q as the curvature argument.
pub fn consumption_utility(consumption: f64, q: f64) -> f64 {
    crra(consumption, q)
}

/// Savings utility is the monetary value of total savings.
pub fn savings_utility(total_savings: f64) -> f64 {
    total_savings
}

/// Shock perception modifier: negative utility changes are amplified by e^kappa.
pub fn shock_modifier(delta: f64, kappa: f64) -> f64 {
    if delta >= 0.0 {
        1.0
    } else {
        kappa.exp()
    }
}

/// Consumption crisis penalty: psi when the liquid pot cannot finance the
/// decided consumption. Only evaluated when consumption is financed from
/// liquid funds.
pub fn crisis_penalty(consumption: f64, liquid: f64, psi: f64) -> f64 {
    if consumption > liquid {
        psi
    } else {
        0.0
    }
}

/// Invalid action penalty: consuming below the minimum despite earnings that
/// exceed the decided consumption.
pub fn invalid_action_penalty(consumption: f64, earnings: f64, minimum: f64, zeta: f64) -> f64 {
    if minimum > consumption && earnings > consumption {
        (minimum - consumption) * zeta
    } else {
        0.0
    }
}

// --- per-tick outcome ---------------------------------------------------

/// Everything that happened to one agent during one tick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepOutcome {
    pub agent_id: u32,
    pub tick: u32,
    pub action: Option<ActionChoice>,
    /// Salary or pension entitlement this tick.
    pub earnings: f64,
    pub consumption: f64,
    pub consumption_from_income: f64,
    pub consumption_from_liquid: f64,
    pub consumption_from_non_liquid: f64,
    pub saved_liquid: f64,
    pub saved_non_liquid: f64,
    pub liquid_return: f64,
    pub non_liquid_return: f64,
    pub penalty: f64,
    pub invalid_penalty: f64,
    pub utility: f64,
    pub utility_delta: f64,
    pub reward: f64,
    pub crisis: bool,
    pub died: bool,
    pub newly_retired: bool,
    pub retired: bool,
    pub employed: bool,
    pub laid_off: bool,
    pub rehired: bool,
}

/// One simulation cohort: agents, their social graph, and the market.
pub struct Environment {
    pub tables: Arc<CalibrationTables>,
    pub market: MarketState,
    pub config: EnvConfig,
    agents: Vec<AgentState>,
    graph: SocialGraph,
    /// graph node id per agent index (nodes ordered by income tercile)
    node_of_agent: Vec<u32>,
    tick: u32,
    prev_utility: Vec<f64>,
    acc_consumption_utility: Vec<f64>,
}

impl Environment {
    /// Bootstrap a cohort and its income-tercile community graph.
    pub fn new<R: Rng + ?Sized>(
        tables: Arc<CalibrationTables>,
        pop_spec: &PopulationSpec,
        graph_spec: &GraphSpec,
        market: MarketState,
        config: EnvConfig,
        rng: &mut R,
    ) -> SimResult<Self> {
        market.validate()?;
        config.validate()?;
        let agents = bootstrap_population(&tables, pop_spec, rng)?;
        Self::from_parts(tables, agents, graph_spec, market, config, rng)
    }

    /// Assemble an environment around an existing population. Agents are
    /// placed into the community matching their income tercile.
    pub fn from_parts<R: Rng + ?Sized>(
        tables: Arc<CalibrationTables>,
        agents: Vec<AgentState>,
        graph_spec: &GraphSpec,
        market: MarketState,
        config: EnvConfig,
        rng: &mut R,
    ) -> SimResult<Self> {
        let n = agents.len();
        if n == 0 {
            return Err(SimError::Config("environment needs at least one agent".into()));
        }
        // income terciles -> community sizes and node order low..high
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            agents[a]
                .last_salary
                .partial_cmp(&agents[b].last_salary)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let low = n.div_ceil(3);
        let mid = ((n - low) + 1) / 2;
        let high = n - low - mid;
        let mut spec = *graph_spec;
        spec.sizes = [low as u32, mid.max(1) as u32, high.max(1) as u32];
        // tiny cohorts: collapse into whatever sizes remain positive
        if n < 3 {
            spec.sizes = [n as u32, 1, 1];
        }
        let graph = if n < 3 {
            // degenerate graph: everyone connected to everyone with intra weight
            let mut neighbours = vec![Vec::new(); n];
            for a in 0..n as u32 {
                for b in (a + 1)..n as u32 {
                    neighbours[a as usize].push((b, graph_spec.w_intra));
                    neighbours[b as usize].push((a, graph_spec.w_intra));
                }
            }
            crate::socialgraph::SocialGraph::from_adjacency(
                neighbours,
                vec![crate::socialgraph::Community::Low; n],
            )
        } else {
            build_three_community_graph(&spec, rng)?
        };

        let mut node_of_agent = vec![0u32; n];
        for (node, &agent_idx) in order.iter().enumerate() {
            node_of_agent[agent_idx] = node as u32;
        }

        let prev_utility: Vec<f64> = agents.iter().map(|a| a.total_assets()).collect();
        Ok(Environment {
            tables,
            market,
            config,
            agents,
            graph,
            node_of_agent,
            tick: 0,
            prev_utility,
            acc_consumption_utility: vec![0.0; n],
        })
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn graph(&self) -> &SocialGraph {
        &self.graph
    }

    pub fn tick(&self) -> u32 {
        self.tick
    }

    pub fn episode_done(&self) -> bool {
        self.tick >= self.config.episode_length_ticks || self.agents.iter().all(|a| !a.alive)
    }

    /// Rewards at t = 0: the initial savings utility of each agent.
    pub fn initial_rewards(&self) -> Vec<f64> {
        self.agents.iter().map(|a| savings_utility(a.total_assets())).collect()
    }

    /// Employment indicator in graph-node order; dead and retired agents do
    /// not emit an unemployment signal.
    fn employment_by_node(&self) -> Vec<bool> {
        let mut z = vec![true; self.agents.len()];
        for (idx, agent) in self.agents.iter().enumerate() {
            let unemployed_worker = agent.alive && !agent.retired && !agent.employed;
            z[self.node_of_agent[idx] as usize] = !unemployed_worker;
        }
        z
    }

    /// Raw peer signal per agent index.
    pub fn network_signals(&self) -> SimResult<Vec<f64>> {
        let by_node = network_observation(&self.graph, &self.employment_by_node())?;
        Ok((0..self.agents.len())
            .map(|idx| by_node[self.node_of_agent[idx] as usize])
            .collect())
    }

    /// Raw (unscaled) observation vectors for living, non-retired agents.
    pub fn observations(&self) -> SimResult<Vec<Option<Vec<f64>>>> {
        let signals = self.network_signals()?;
        Ok(self
            .agents
            .iter()
            .zip(&signals)
            .map(|(agent, &signal)| {
                if agent.alive && !agent.retired {
                    Some(assemble_observation(
                        agent,
                        &self.market,
                        signal,
                        self.tables.occupations.len(),
                    ))
                } else {
                    None
                }
            })
            .collect())
    }

    /// Advance the cohort one month. Actions must be supplied for living,
    /// non-retired agents and must be absent for dead agents.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        actions: &[Option<ActionChoice>],
        rng: &mut R,
    ) -> SimResult<Vec<StepOutcome>> {
        if actions.len() != self.agents.len() {
            return Err(SimError::Dimension { expected: self.agents.len(), got: actions.len() });
        }
        self.tick += 1;
        let tick = self.tick;
        let psi = self.config.consumption_crisis_penalty;
        let zeta = self.config.invalid_action_penalty_modifier;
        let minimum = self.market.monthly_minimum_consumption;
        let retirement_age = self.config.retirement_age_months();

        let mut outcomes = Vec::with_capacity(self.agents.len());
        for idx in 0..self.agents.len() {
            let action = actions[idx];
            let agent = &mut self.agents[idx];
            if !agent.alive {
                if action.is_some() {
                    return Err(SimError::Protocol(format!(
                        "action supplied for dead agent {}",
                        agent.id
                    )));
                }
                continue;
            }

            let mut out = StepOutcome {
                agent_id: agent.id,
                tick,
                action,
                earnings: 0.0,
                consumption: 0.0,
                consumption_from_income: 0.0,
                consumption_from_liquid: 0.0,
                consumption_from_non_liquid: 0.0,
                saved_liquid: 0.0,
                saved_non_liquid: 0.0,
                liquid_return: 0.0,
                non_liquid_return: 0.0,
                penalty: 0.0,
                invalid_penalty: 0.0,
                utility: 0.0,
                utility_delta: 0.0,
                reward: 0.0,
                crisis: false,
                died: false,
                newly_retired: false,
                retired: agent.retired,
                employed: agent.employed,
                laid_off: false,
                rehired: false,
            };

            // (1) asset growth
            out.liquid_return = agent.liquid_asset * self.market.monthly_liquid_return;
            out.non_liquid_return = agent.non_liquid_asset * self.market.monthly_non_liquid_return;
            agent.liquid_asset += out.liquid_return;
            agent.non_liquid_asset += out.non_liquid_return;

            // (2) aging and death
            agent.age_months += 1;
            if sample_death(&self.tables.mortality, agent.age_months, rng) {
                agent.alive = false;
                out.died = true;
                out.retired = agent.retired;
                out.employed = false;
                outcomes.push(out);
                continue;
            }

            // (3) retirement trigger
            if !agent.retired && agent.age_months >= retirement_age {
                agent.retired = true;
                agent.employed = false;
                agent.monthly_income =
                    self.config.retirement_salary_multiplier * agent.last_salary;
                out.newly_retired = true;
            }

            let mut just_laid_off = false;
            if !agent.retired {
                // (4) layoff sampling / duration countdown
                if agent.employed {
                    if action.is_none() {
                        return Err(SimError::Protocol(format!(
                            "missing action for living agent {}",
                            agent.id
                        )));
                    }
                    let p = self.tables.unemployment.layoff_prob(agent.occupation, agent.age_months)?;
                    if rng.gen::<f64>() < p {
                        agent.employed = false;
                        agent.last_salary = agent.monthly_income;
                        agent.monthly_income = 0.0;
                        agent.remaining_unemployment = self
                            .tables
                            .unemployment
                            .sample_duration(agent.occupation, agent.age_months, rng)?
                            .max(1);
                        just_laid_off = true;
                        out.laid_off = true;
                    }
                } else {
                    if action.is_none() {
                        return Err(SimError::Protocol(format!(
                            "missing action for living agent {}",
                            agent.id
                        )));
                    }
                    // (5) countdown and re-hiring
                    if agent.remaining_unemployment > 0 {
                        agent.remaining_unemployment -= 1;
                    }
                    if agent.remaining_unemployment == 0 {
                        agent.monthly_income =
                            sample_income(&self.tables, agent.occupation, agent.age_months, rng)?;
                        agent.employed = true;
                        agent.last_salary = agent.monthly_income;
                        out.rehired = true;
                    }
                }
            }

            // (6) salary / pension entitlement
            let earnings = if agent.retired || (agent.employed && !just_laid_off) {
                agent.monthly_income
            } else {
                0.0
            };
            out.earnings = earnings;
            out.retired = agent.retired;
            out.employed = agent.employed && !just_laid_off;

            // (7) action application
            if agent.retired {
                // pension drawn from the non-liquid pot, falling back to liquid
                let need = earnings;
                let from_non_liquid = need.min(agent.non_liquid_asset);
                agent.non_liquid_asset -= from_non_liquid;
                let shortfall = need - from_non_liquid;
                let liquid_before = agent.liquid_asset;
                let from_liquid = shortfall.min(agent.liquid_asset);
                agent.liquid_asset -= from_liquid;
                out.consumption_from_non_liquid = from_non_liquid;
                out.consumption_from_liquid = from_liquid;
                out.consumption = from_non_liquid + from_liquid;
                if shortfall > 0.0 {
                    out.penalty = crisis_penalty(shortfall, liquid_before, psi);
                    out.crisis = out.penalty > 0.0;
                }
            } else if out.employed {
                let act = action.unwrap();
                let decided = act.consumption_fraction() * earnings;
                let saved = earnings - decided;
                out.consumption_from_income = decided;
                out.consumption = decided;
                out.saved_liquid = saved * act.liquidity_fraction();
                out.saved_non_liquid = saved - out.saved_liquid;
                agent.liquid_asset += out.saved_liquid;
                agent.non_liquid_asset += out.saved_non_liquid;
                out.invalid_penalty = invalid_action_penalty(decided, earnings, minimum, zeta);
            } else {
                // unemployed (or laid off this tick): the minimum consumption is
                // financed from the liquid pot; a shortfall is a crisis and actual
                // consumption is truncated to the available funds
                let liquid_before = agent.liquid_asset;
                let consumed = minimum.min(agent.liquid_asset);
                agent.liquid_asset -= consumed;
                out.consumption_from_liquid = consumed;
                out.consumption = consumed;
                out.penalty = crisis_penalty(minimum, liquid_before, psi);
                out.crisis = out.penalty > 0.0;
            }

            // (8) utilities and reward
            let q = agent.behaviour.consumption_utility_factor;
            let kappa = agent.behaviour.shock_sensitivity_factor;
            self.acc_consumption_utility[idx] += consumption_utility(out.consumption, q);
            let utility =
                self.acc_consumption_utility[idx] + savings_utility(agent.total_assets());
            let delta = utility - self.prev_utility[idx];
            out.utility = utility;
            out.utility_delta = delta;
            out.reward =
                delta * shock_modifier(delta, kappa) - out.penalty - out.invalid_penalty;
            self.prev_utility[idx] = utility;

            agent.accumulated_consumption += out.consumption;
            agent.accumulated_penalty += out.penalty + out.invalid_penalty;

            debug_assert!(agent.liquid_asset >= -1e-9 && agent.non_liquid_asset >= -1e-9);
            agent.liquid_asset = agent.liquid_asset.max(0.0);
            agent.non_liquid_asset = agent.non_liquid_asset.max(0.0);
            outcomes.push(out);
        }
        Ok(outcomes)
    }
}

/// Observation parts: one-hot occupation plus per-agent scalars, the flat
/// market vector, and the individuality-discounted peer signal.
pub fn assemble_observation(
    agent: &AgentState,
    market: &MarketState,
    network_signal: f64,
    occupation_count: usize,
) -> Vec<f64> {
    let mut obs = Vec::with_capacity(occupation_count + 7 + 6 + 1);
    for occ in 0..occupation_count {
        obs.push(if agent.occupation as usize == occ { 1.0 } else { 0.0 });
    }
    obs.push(agent.age_months as f64);
    obs.push(agent.monthly_income);
    obs.push(agent.behaviour.consumption_utility_factor);
    obs.push(agent.behaviour.shock_sensitivity_factor);
    obs.push(agent.behaviour.individuality_factor);
    obs.push(agent.non_liquid_asset);
    obs.push(agent.liquid_asset);
    obs.extend(market.as_vector());
    obs.push((1.0 - agent.behaviour.individuality_factor) * network_signal);
    obs
}

/// Observation width for a given occupation count.
pub fn observation_width(occupation_count: usize) -> usize {
    occupation_count + 7 + 6 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::BehaviouralTriple;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worker(id: u32, income: f64, employed: bool) -> AgentState {
        AgentState {
            id,
            occupation: 0,
            age_months: 30 * 12,
            employed,
            remaining_unemployment: if employed { 0 } else { 9999 },
            monthly_income: if employed { income } else { 0.0 },
            liquid_asset: 0.0,
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
        }
    }

    fn quiet_env(agents: Vec<AgentState>) -> Environment {
        // no layoffs, no deaths before terminal age
        let tables = Arc::new(CalibrationTables::synthetic_flat(1, 2000.0, 0.0, 3.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Environment::from_parts(
            tables,
            agents,
            &GraphSpec { p_intra: 1.0, p_inter: 1.0, ..Default::default() },
            MarketState::default(),
            EnvConfig::default(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn crra_closed_forms() {
        assert_eq!(crra(1.0, 0.5), 0.0);
        assert_eq!(crra(1.0, 1.0), 0.0);
        assert_eq!(crra(1.0, 3.0), 0.0);
        assert_relative_eq!(crra(std::f64::consts::E, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(crra(4.0, 0.5), 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            consumption_utility(100.0, 0.9),
            (100f64.powf(0.1) - 1.0) / 0.1,
            epsilon = 1e-9
        );
    }

    #[test]
    fn savings_utility_is_identity() {
        assert_eq!(savings_utility(0.0), 0.0);
        assert_eq!(savings_utility(1234.5), 1234.5);
        assert_eq!(savings_utility(100.0 + 300.0), 400.0);
    }

    #[test]
    fn shock_modifier_piecewise() {
        assert_eq!(shock_modifier(5.0, 3.0), 1.0);
        assert_eq!(shock_modifier(-1.0, 0.0), 1.0);
        assert_relative_eq!(shock_modifier(-1.0, 2f64.ln()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn crisis_penalty_piecewise() {
        assert_eq!(crisis_penalty(1200.0, 1000.0, 100_000.0), 100_000.0);
        assert_eq!(crisis_penalty(1000.0, 1000.0, 100_000.0), 0.0);
        assert_eq!(crisis_penalty(0.0, 0.0, 100_000.0), 0.0);
    }

    #[test]
    fn invalid_action_penalty_piecewise() {
        assert_eq!(invalid_action_penalty(800.0, 2000.0, 1073.0, 1000.0), 273_000.0);
        assert_eq!(invalid_action_penalty(1073.0, 2000.0, 1073.0, 1000.0), 0.0);
        assert_eq!(invalid_action_penalty(800.0, 700.0, 1073.0, 1000.0), 0.0);
    }

    #[test]
    fn action_id_round_trip() {
        let a = ActionChoice::from_id(8).unwrap();
        assert_eq!(a.consumption_bin, 1);
        assert_eq!(a.liquidity_bin, 3);
        assert_eq!(a.consumption_fraction(), 0.25);
        assert_eq!(a.liquidity_fraction(), 0.75);
        for id in 0..ACTION_COUNT {
            assert_eq!(ActionChoice::from_id(id).unwrap().joint_id(), id);
        }
        assert!(ActionChoice::from_id(25).is_err());
    }

    #[test]
    fn employed_c50_l50_trace() {
        let mut env = quiet_env(vec![worker(0, 2000.0, true)]);
        let action = ActionChoice { consumption_bin: 2, liquidity_bin: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = env.step(&[Some(action)], &mut rng).unwrap();
        let o = &out[0];
        assert_eq!(o.consumption, 1000.0);
        assert_eq!(o.saved_liquid, 500.0);
        assert_eq!(o.saved_non_liquid, 500.0);
        assert_eq!(o.penalty, 0.0);
        assert_eq!(o.invalid_penalty, (1073.0 - 1000.0) * 1000.0);
        let agent = &env.agents()[0];
        assert_relative_eq!(agent.liquid_asset, 500.0, epsilon = 1e-9);
        assert_relative_eq!(agent.non_liquid_asset, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn unemployed_with_no_liquid_hits_crisis() {
        let mut env = quiet_env(vec![worker(0, 2000.0, false)]);
        let action = ActionChoice { consumption_bin: 2, liquidity_bin: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = env.step(&[Some(action)], &mut rng).unwrap();
        assert!(out[0].crisis);
        assert_eq!(out[0].penalty, 100_000.0);
        assert_eq!(out[0].consumption, 0.0);
    }

    #[test]
    fn unemployed_with_liquid_consumes_minimum() {
        let mut a = worker(0, 2000.0, false);
        a.liquid_asset = 5000.0;
        let mut env = quiet_env(vec![a]);
        let action = ActionChoice { consumption_bin: 0, liquidity_bin: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = env.step(&[Some(action)], &mut rng).unwrap();
        assert!(!out[0].crisis);
        assert_eq!(out[0].consumption, 1073.0);
        assert_eq!(out[0].consumption_from_liquid, 1073.0);
    }

    #[test]
    fn retirement_pension_is_multiplier_of_last_salary() {
        let mut a = worker(0, 3000.0, true);
        a.age_months = 65 * 12 - 1;
        a.non_liquid_asset = 100_000.0;
        let mut env = quiet_env(vec![a]);
        let action = ActionChoice { consumption_bin: 2, liquidity_bin: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = env.step(&[Some(action)], &mut rng).unwrap();
        assert!(out[0].newly_retired);
        assert_eq!(out[0].earnings, 2400.0);
        assert_eq!(out[0].consumption_from_non_liquid, 2400.0);
        // retired agents no longer need actions
        let out2 = env.step(&[None], &mut rng).unwrap();
        assert_eq!(out2[0].consumption, 2400.0);
    }

    #[test]
    fn retired_pension_falls_back_to_liquid_then_crisis() {
        let mut a = worker(0, 3000.0, true);
        a.age_months = 66 * 12;
        a.retired = true;
        a.employed = false;
        a.monthly_income = 2400.0;
        a.non_liquid_asset = 1000.0;
        a.liquid_asset = 500.0;
        let mut env = quiet_env(vec![a]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = env.step(&[None], &mut rng).unwrap();
        // growth first: nl = 1012.5, lq = 501.25; draw 2400 -> 1012.5 + 501.25
        assert_relative_eq!(out[0].consumption_from_non_liquid, 1012.5, epsilon = 1e-9);
        assert_relative_eq!(out[0].consumption_from_liquid, 501.25, epsilon = 1e-9);
        assert!(out[0].crisis);
    }

    #[test]
    fn dead_agents_reject_actions() {
        let mut a = worker(0, 2000.0, true);
        a.alive = false;
        let mut env = quiet_env(vec![a]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = env
            .step(&[Some(ActionChoice { consumption_bin: 0, liquidity_bin: 0 })], &mut rng)
            .unwrap_err();
        assert!(matches!(err, SimError::Protocol(_)));
    }

    #[test]
    fn missing_action_for_living_agent_is_protocol_error() {
        let mut env = quiet_env(vec![worker(0, 2000.0, true)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(env.step(&[None], &mut rng), Err(SimError::Protocol(_))));
    }

    #[test]
    fn reward_telescopes_without_penalties() {
        // psi = zeta = 0, permanent employment: sum of rewards telescopes to
        // u_T - u_0 + u_0^savings
        let tables = Arc::new(CalibrationTables::synthetic_flat(1, 2000.0, 0.0, 3.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = worker(0, 2000.0, true);
        a.liquid_asset = 1000.0;
        let mut env = Environment::from_parts(
            tables,
            vec![a],
            &GraphSpec { p_intra: 1.0, p_inter: 1.0, ..Default::default() },
            MarketState {
                monthly_minimum_consumption: 0.0,
                ..MarketState::default()
            },
            EnvConfig {
                consumption_crisis_penalty: 0.0,
                invalid_action_penalty_modifier: 0.0,
                ..EnvConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let u0 = env.agents()[0].total_assets();
        let r0 = env.initial_rewards()[0];
        assert_eq!(r0, u0);
        let mut total = 0.0;
        let mut last_u = 0.0;
        // kappa = 0 so the shock modifier never rescales negative deltas
        for i in 0..24 {
            let action = ActionChoice { consumption_bin: (i % 5) as u8, liquidity_bin: 1 };
            let out = env.step(&[Some(action)], &mut rng).unwrap();
            total += out[0].reward;
            last_u = out[0].utility;
        }
        assert_relative_eq!(total + r0, last_u - u0 + u0, epsilon = 1e-6);
    }

    #[test]
    fn budget_conservation_random_actions() {
        let tables = Arc::new(CalibrationTables::synthetic_flat(2, 2500.0, 0.02, 3.0, 0.01));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = PopulationSpec { count: 60, ..Default::default() };
        let mut env = Environment::new(
            tables,
            &spec,
            &GraphSpec { p_intra: 0.2, p_inter: 0.05, ..Default::default() },
            MarketState::default(),
            EnvConfig::default(),
            &mut rng,
        )
        .unwrap();
        for _ in 0..120 {
            let pre: Vec<(f64, f64)> = env
                .agents()
                .iter()
                .map(|a| (a.liquid_asset, a.non_liquid_asset))
                .collect();
            let actions: Vec<Option<ActionChoice>> = env
                .agents()
                .iter()
                .map(|a| {
                    if a.alive && !a.retired {
                        Some(ActionChoice {
                            consumption_bin: rng.gen_range(0..5),
                            liquidity_bin: rng.gen_range(0..5),
                        })
                    } else {
                        None
                    }
                })
                .collect();
            let outcomes = env.step(&actions, &mut rng).unwrap();
            for out in &outcomes {
                if out.died {
                    continue;
                }
                let idx = env.agents().iter().position(|a| a.id == out.agent_id).unwrap();
                let (lq0, nl0) = pre[idx];
                let agent = &env.agents()[idx];
                // pension entitlements are withdrawals from the agent's own
                // pots, not external income
                let external_income = if out.retired { 0.0 } else { out.earnings };
                let inflow = external_income + out.liquid_return + out.non_liquid_return;
                let outflow = out.consumption_from_income
                    + (agent.liquid_asset - lq0)
                    + (agent.non_liquid_asset - nl0)
                    + out.consumption_from_liquid
                    + out.consumption_from_non_liquid;
                let scale = inflow.abs().max(1.0);
                assert!(
                    ((inflow - outflow) / scale).abs() < 1e-9,
                    "budget violated: in {inflow} out {outflow}"
                );
                assert!(agent.liquid_asset >= 0.0 && agent.non_liquid_asset >= 0.0);
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_outcomes() {
        let run = |seed: u64| {
            let tables = Arc::new(CalibrationTables::synthetic_flat(3, 2500.0, 0.03, 4.0, 0.02));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = PopulationSpec { count: 40, ..Default::default() };
            let mut env = Environment::new(
                tables,
                &spec,
                &GraphSpec { p_intra: 0.3, p_inter: 0.1, ..Default::default() },
                MarketState::default(),
                EnvConfig::default(),
                &mut rng,
            )
            .unwrap();
            let mut rewards = Vec::new();
            for _ in 0..60 {
                let actions: Vec<Option<ActionChoice>> = env
                    .agents()
                    .iter()
                    .map(|a| {
                        (a.alive && !a.retired).then(|| ActionChoice {
                            consumption_bin: rng.gen_range(0..5),
                            liquidity_bin: rng.gen_range(0..5),
                        })
                    })
                    .collect();
                for out in env.step(&actions, &mut rng).unwrap() {
                    rewards.push(out.reward.to_bits());
                }
            }
            rewards
        };
        assert_eq!(run(99), run(99));
    }

    #[test]
    fn observation_layout() {
        let a = worker(0, 2000.0, true);
        let obs = assemble_observation(&a, &MarketState::default(), 3.0, 22);
        assert_eq!(obs.len(), observation_width(22));
        assert_eq!(obs.len(), 22 + 7 + 6 + 1);
        // individuality 0.5 halves the raw signal
        assert_relative_eq!(obs[obs.len() - 1], 1.5, epsilon = 1e-12);
        // employed network -> zero signal
        let obs0 = assemble_observation(&a, &MarketState::default(), 0.0, 22);
        assert_eq!(obs0[obs0.len() - 1], 0.0);
        // individuality 1 blanks the signal entirely
        let mut b = a.clone();
        b.behaviour.individuality_factor = 1.0;
        let obs1 = assemble_observation(&b, &MarketState::default(), 42.0, 22);
        assert_eq!(obs1[obs1.len() - 1], 0.0);
    }
}
