//! Shared recurrent policy: observation scaling, the actor-critic network,
//! action sampling with epsilon exploration, and checkpoint persistence.

mod net;
mod scaler;

pub use net::{HiddenState, Linear, LstmCell, PolicyGradients, PolicyParameters, StepTape};
pub use scaler::OnlineScaler;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::environment::ActionChoice;
use crate::error::{SimError, SimResult};

/// Epsilon-greedy over the categorical action distribution: with probability
/// epsilon a uniform random joint action, otherwise a sample from `probs`.
pub fn sample_action<R: Rng + ?Sized>(
    probs: &Array1<f64>,
    epsilon: f64,
    rng: &mut R,
) -> SimResult<ActionChoice> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(SimError::Config(format!("epsilon {epsilon} out of [0,1]")));
    }
    let n = probs.len();
    let id = if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..n)
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = n - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u <= acc {
                chosen = i;
                break;
            }
        }
        chosen
    };
    ActionChoice::from_id(id)
}

/// Greedy selection: the highest-probability joint action.
pub fn greedy_action(probs: &Array1<f64>) -> SimResult<ActionChoice> {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    ActionChoice::from_id(best)
}

/// Linear decay from `start` to `end` over the first half of `total` updates.
pub fn epsilon_schedule(update: u64, total: u64, start: f64, end: f64) -> f64 {
    let half = (total / 2).max(1);
    if update >= half {
        end
    } else {
        start + (end - start) * update as f64 / half as f64
    }
}

/// Versioned checkpoint: network tensors, scaler state, and step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train_updates: u64,
    pub env_steps: u64,
    pub params: PolicyParameters,
    pub scaler: OnlineScaler,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> SimResult<()> {
        let file = std::fs::File::create(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| SimError::Checkpoint(format!("serialize failed: {e}")))
    }

    pub fn load(path: &Path) -> SimResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| SimError::Checkpoint(format!("parse failed: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(SimError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn epsilon_one_is_uniform_over_joint_actions() {
        let probs = {
            let mut p = Array1::zeros(25);
            p[7] = 1.0;
            p
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0u32; 25];
        for _ in 0..n {
            counts[sample_action(&probs, 1.0, &mut rng).unwrap().joint_id()] += 1;
        }
        let expected = n as f64 / 25.0;
        let sd = (n as f64 * (1.0 / 25.0) * (24.0 / 25.0)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn epsilon_zero_follows_distribution() {
        let mut probs = Array1::zeros(25);
        probs[7] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert_eq!(sample_action(&probs, 0.0, &mut rng).unwrap().joint_id(), 7);
        }
    }

    #[test]
    fn action_decode_example() {
        let a = ActionChoice::from_id(8).unwrap();
        assert_eq!((a.consumption_bin, a.liquidity_bin), (1, 3));
    }

    #[test]
    fn epsilon_schedule_decays_then_floors() {
        assert_eq!(epsilon_schedule(0, 100, 0.3, 0.02), 0.3);
        assert_eq!(epsilon_schedule(50, 100, 0.3, 0.02), 0.02);
        assert_eq!(epsilon_schedule(99, 100, 0.3, 0.02), 0.02);
        let mid = epsilon_schedule(25, 100, 0.3, 0.02);
        assert!((mid - 0.16).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PolicyParameters::new(6, &[4], 3, 25, &mut rng);
        let mut scaler = OnlineScaler::new(6);
        scaler.update_transform(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            train_updates: 42,
            env_steps: 1000,
            params,
            scaler,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.train_updates, 42);
        assert_eq!(loaded.params.flatten(), ck.params.flatten());
    }
}
