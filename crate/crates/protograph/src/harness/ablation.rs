//! The ablation matrix: five model variants trained and evaluated under
//! identical seeds and data.

use crate::data::DatasetView;
use crate::distribution::ProtoMode;
use crate::error::Error;
use crate::model::{Model, ModelConfig};

use super::report::{RunReport, SummaryRow};
use super::{evaluate, train, TrainOptions};

/// (label, dense, prototype mode) per variant. The prototypes-only variant
/// runs densely connected, which is what makes it coincide with the plain
/// dense graph at K = 1.
pub const VARIANTS: [(&str, bool, ProtoMode); 5] = [
    ("GCN", false, ProtoMode::None),
    ("GCN(dense)", true, ProtoMode::None),
    ("pro-point(only)", true, ProtoMode::Only),
    ("GCN(dense)+pro_infor", true, ProtoMode::Info),
    ("GCN(dense)+pro-point", true, ProtoMode::Nodes),
];

pub struct AblationOutcome {
    pub variant: &'static str,
    /// Evaluation report, or the failure that interrupted this variant
    /// (a diverging variant is recorded, not fatal).
    pub result: Result<RunReport, String>,
    pub model: Option<Model>,
    pub train_report: Option<RunReport>,
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub steps: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub jobs: usize,
    pub log_every: Option<usize>,
}

/// Train and evaluate every variant of [`VARIANTS`] from the same base
/// configuration, seed, and data.
pub fn ablation_run(
    base: &ModelConfig,
    train_view: &DatasetView,
    test_view: &DatasetView,
    opts: &AblationOptions,
) -> Vec<AblationOutcome> {
    VARIANTS
        .iter()
        .map(|&(label, dense, proto)| {
            let mut config = base.clone();
            config.graph.dense = dense;
            config.graph.proto_mode = proto;
            config.seed = opts.seed;
            match run_variant(config, train_view, test_view, opts) {
                Ok((model, train_report, report)) => AblationOutcome {
                    variant: label,
                    result: Ok(report),
                    model: Some(model),
                    train_report: Some(train_report),
                },
                Err(e) => AblationOutcome {
                    variant: label,
                    result: Err(e.to_string()),
                    model: None,
                    train_report: None,
                },
            }
        })
        .collect()
}

fn run_variant(
    config: ModelConfig,
    train_view: &DatasetView,
    test_view: &DatasetView,
    opts: &AblationOptions,
) -> Result<(Model, RunReport, RunReport), Error> {
    let mut model = Model::new(config)?;
    let mut topts = TrainOptions::new(opts.steps, opts.seed);
    topts.log_every = opts.log_every;
    let train_report = train(&mut model, train_view, &topts)?;
    let report = evaluate(&model, test_view, opts.eval_episodes, opts.seed, opts.jobs)?;
    Ok((model, train_report, report))
}

/// Summary rows for an ablation run, one per variant, in table order.
/// Failed variants get NaN accuracy and zero episodes so the failure is
/// visible in the artifact.
pub fn summary_rows(outcomes: &[AblationOutcome], base: &ModelConfig, seed: u64) -> Vec<SummaryRow> {
    outcomes
        .iter()
        .map(|o| match &o.result {
            Ok(r) => SummaryRow {
                variant: o.variant.to_string(),
                n_way: base.graph.n_way,
                k_shot: base.graph.k_shot,
                mean_acc: r.mean_accuracy,
                std: 0.0,
                episodes: r.records.len(),
                seed,
            },
            Err(_) => SummaryRow {
                variant: o.variant.to_string(),
                n_way: base.graph.n_way,
                k_shot: base.graph.k_shot,
                mean_acc: f64::NAN,
                std: 0.0,
                episodes: 0,
                seed,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::{tiny_dataset, tiny_model};

    #[test]
    fn five_variants_with_table_labels() {
        let ds = tiny_dataset(20);
        let view = ds.view_all();
        let base = tiny_model(3, 1, 0).config;
        let opts = AblationOptions {
            steps: 4,
            eval_episodes: 6,
            seed: 3,
            jobs: 1,
            log_every: None,
        };
        let outcomes = ablation_run(&base, &view, &view, &opts);
        assert_eq!(outcomes.len(), 5);
        let labels: Vec<&str> = outcomes.iter().map(|o| o.variant).collect();
        assert_eq!(
            labels,
            vec![
                "GCN",
                "GCN(dense)",
                "pro-point(only)",
                "GCN(dense)+pro_infor",
                "GCN(dense)+pro-point"
            ]
        );
        for o in &outcomes {
            assert!(o.result.is_ok(), "{}: {:?}", o.variant, o.result.as_ref().err());
        }
        let rows = summary_rows(&outcomes, &base, 3);
        assert_eq!(rows.len(), 5);
    }

    #[test]
    fn one_shot_dense_and_proto_only_coincide_under_shared_seed() {
        let ds = tiny_dataset(21);
        let view = ds.view_all();
        let base = tiny_model(3, 1, 0).config;
        let opts = AblationOptions {
            steps: 6,
            eval_episodes: 10,
            seed: 9,
            jobs: 1,
            log_every: None,
        };
        let outcomes = ablation_run(&base, &view, &view, &opts);
        let find = |label: &str| {
            outcomes
                .iter()
                .find(|o| o.variant == label)
                .unwrap()
                .result
                .as_ref()
                .unwrap()
        };
        let dense = find("GCN(dense)");
        let proto_only = find("pro-point(only)");
        assert_eq!(dense.to_jsonl(), proto_only.to_jsonl());
    }
}
