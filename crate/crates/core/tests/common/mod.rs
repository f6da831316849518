#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recsim_core::{RecurrentDataset, Subject};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random recurrent-event dataset. With `grid` set, times are rounded
/// to multiples of it so that ties occur.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, max_events: usize, grid: Option<f64>) -> RecurrentDataset {
    let snap = |t: f64| match grid {
        Some(g) => ((t / g).ceil() * g).max(g),
        None => t,
    };
    let subjects = (0..n)
        .map(|id| {
            let follow_up = snap(rng.random_range(0.5..2.0));
            let k = rng.random_range(0..=max_events);
            let mut times: Vec<f64> = (0..k).map(|_| snap(rng.random_range(0.0..follow_up))).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            times.retain(|&t| t > 0.0 && t <= follow_up);
            let covariates = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            Subject::new(id, times, follow_up, covariates).unwrap()
        })
        .collect();
    let mask = (0..p).map(|j| j % 2 == 0).collect();
    RecurrentDataset::new(subjects, p, Some(mask)).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}
