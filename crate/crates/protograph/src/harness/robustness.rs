//! Repeated-evaluation robustness experiment: the accuracy distribution of
//! a model over many independent test runs, with and without prototype
//! anchor nodes.

use crate::data::DatasetView;
use crate::error::Error;
use crate::model::Model;
use crate::seed;

use super::evaluate;

#[derive(Debug, Clone)]
pub struct RobustnessArm {
    pub label: String,
    /// Accuracy of each independent run.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

/// Evaluate one model over `runs` independent blocks of `episodes_per_run`
/// test episodes each; run r draws its episodes from `run_seed(seed, r)`.
pub fn accuracy_distribution(
    model: &Model,
    view: &DatasetView,
    runs: usize,
    episodes_per_run: usize,
    base_seed: u64,
    jobs: usize,
    label: &str,
) -> Result<RobustnessArm, Error> {
    let mut accuracies = Vec::with_capacity(runs);
    for r in 0..runs {
        let rep = evaluate(model, view, episodes_per_run, seed::run_seed(base_seed, r as u64), jobs)?;
        accuracies.push(rep.mean_accuracy);
    }
    let (mean, std) = mean_and_std(&accuracies);
    Ok(RobustnessArm { label: label.to_string(), accuracies, mean, std })
}

/// Accuracy distributions for a prototype-anchored model and its
/// counterpart without prototypes, over the same test runs.
pub fn robustness_histogram(
    with_proto: &Model,
    without_proto: &Model,
    view: &DatasetView,
    runs: usize,
    episodes_per_run: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<(RobustnessArm, RobustnessArm), Error> {
    let a = accuracy_distribution(
        with_proto,
        view,
        runs,
        episodes_per_run,
        base_seed,
        jobs,
        "with pro-point",
    )?;
    let b = accuracy_distribution(
        without_proto,
        view,
        runs,
        episodes_per_run,
        base_seed,
        jobs,
        "without pro-point",
    )?;
    Ok((a, b))
}

/// Mean and population standard deviation.
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::{tiny_dataset, tiny_model};

    #[test]
    fn arm_has_one_accuracy_per_run() {
        let ds = tiny_dataset(30);
        let view = ds.view_all();
        let model = tiny_model(3, 1, 1);
        let arm = accuracy_distribution(&model, &view, 5, 8, 4, 1, "x").unwrap();
        assert_eq!(arm.accuracies.len(), 5);
        assert!(arm.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn std_matches_independent_two_pass_computation() {
        let xs = [0.81, 0.86, 0.79, 0.9, 0.84, 0.88];
        let (_, got) = mean_and_std(&xs);
        // Deliberately separate two-pass oracle.
        let n = xs.len() as f64;
        let mut mean = 0.0;
        for x in &xs {
            mean += x;
        }
        mean /= n;
        let mut acc = 0.0;
        for x in &xs {
            acc += (x - mean) * (x - mean);
        }
        let want = (acc / n).sqrt();
        assert!((got - want).abs() < 1e-12);
    }
}
