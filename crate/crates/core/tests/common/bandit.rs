//! Two-slot bandit: reward 1 for one action sequence, 0 for every other.

use aod_core::controller::{intrinsic_reward, Controller, ControllerConfig};
use aod_core::search::{Baseline, ReplayBuffer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SLOTS: [usize; 2] = [4, 4];
pub const OPTIMUM: [usize; 2] = [2, 1];
pub const CHILDREN: usize = 5;

pub fn reward(actions: &[usize]) -> f64 {
    if actions == OPTIMUM {
        1.0
    } else {
        0.0
    }
}

/// Runs `steps` controller steps and returns the first step after which greedy
/// decoding stayed on the optimum, if it did by the end.
pub fn converged_at(seed: u64, steps: usize) -> Option<usize> {
    train(seed, steps).1
}

pub fn train(seed: u64, steps: usize) -> (Controller, Option<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Controller::new(&SLOTS, ControllerConfig::default(), &mut rng).unwrap();
    let mut baseline = Baseline::new(0.95).unwrap();
    let mut buffer = ReplayBuffer::new(10).unwrap();
    let mut since = None;
    for step in 1..=steps {
        let policies: Vec<_> = (0..CHILDREN).map(|_| c.sample_policy(&mut rng).unwrap()).collect();
        let raw: Vec<f64> = policies.iter().map(|p| reward(&p.actions)).collect();
        let shaped: Vec<f64> = policies
            .iter()
            .zip(&raw)
            .map(|(p, r)| intrinsic_reward(*r, p.kl_sharpen, 0.01))
            .collect();
        c.reinforce_update(&policies, &shaped, baseline.value, CHILDREN as f64).unwrap();
        baseline.update(&shaped).unwrap();
        for (p, r) in policies.iter().zip(&raw) {
            buffer.insert(&p.actions, *r).unwrap();
        }
        c.imitation_update(&buffer.pairs(), baseline.value).unwrap();
        if c.greedy().unwrap() == OPTIMUM {
            since.get_or_insert(step);
        } else {
            since = None;
        }
    }
    (c, since)
}
