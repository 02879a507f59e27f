//! Feature snapshots for external plotting: raw node vectors before the
//! graph iterations or final post-iteration features, one CSV row per
//! node. Dimensionality reduction is deliberately left to external tools.

use std::path::Path;

use crate::data::Dataset;
use crate::error::Error;
use crate::model::Model;

use super::{episode_input, Episode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportStage {
    /// Assembled node features before any graph iteration
    /// (embedding + label coding, prototype handling applied).
    Embedding,
    /// Node features after the last graph iteration.
    Final,
}

impl ExportStage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedding" => Some(ExportStage::Embedding),
            "final" => Some(ExportStage::Final),
            _ => None,
        }
    }
}

/// Render the export as CSV text: node id, role, class, angle, then the
/// feature components.
pub fn export_embeddings_csv(
    model: &Model,
    dataset: &Dataset,
    episode: &Episode,
    stage: ExportStage,
) -> Result<String, Error> {
    let input = episode_input(dataset, episode);
    let fwd = model.forward_episode(&input, false)?;
    let features = match stage {
        ExportStage::Embedding => fwd.initial_features,
        ExportStage::Final => *fwd
            .per_iteration
            .last()
            .unwrap_or(&fwd.initial_features),
    };
    let values = fwd.graph.value(features);
    let (n, d) = (values.shape()[0], values.shape()[1]);
    debug_assert_eq!(n, fwd.node_meta.len());

    let mut out = String::from("node,role,class,angle");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, meta) in fwd.node_meta.iter().enumerate() {
        out.push_str(&format!("{i},{}", meta.role.as_str()));
        match meta.class_id {
            Some(c) => out.push_str(&format!(",{c}")),
            None => out.push(','),
        }
        match meta.angle_id {
            Some(a) => out.push_str(&format!(",{a}")),
            None => out.push(','),
        }
        for j in 0..d {
            out.push_str(&format!(",{}", values.data()[i * d + j]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(
    model: &Model,
    dataset: &Dataset,
    episode: &Episode,
    stage: ExportStage,
    path: &Path,
) -> Result<(), Error> {
    let csv = export_embeddings_csv(model, dataset, episode, stage)?;
    std::fs::write(path, csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sample_task;
    use crate::harness::tests::tiny_model;
    use crate::data::synth::{generate_in_memory, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn row_counts_and_widths_follow_node_laws() {
        // 3-way 10-shot with prototype nodes: 30 + 3 + 1 = 34 rows.
        let ds = generate_in_memory(&SynthSpec {
            n_classes: 4,
            samples_per_class_angle: 12,
            side: 12,
            seed: 40,
            ..Default::default()
        });
        let view = ds.view_all();
        let model = tiny_model(3, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ep = sample_task(&view, 3, 10, &mut rng, 0).unwrap();

        let csv = export_embeddings_csv(&model, &ds, &ep, ExportStage::Final).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 34);

        let emb = export_embeddings_csv(&model, &ds, &ep, ExportStage::Embedding).unwrap();
        let header = emb.lines().next().unwrap();
        // 4 metadata columns + embedding width (output_dim + n_way).
        let want = 4 + model.config.embedding.output_dim() + 3;
        assert_eq!(header.split(',').count(), want);
        // roles appear in node order with the query last
        let last = emb.lines().last().unwrap();
        assert!(last.split(',').nth(1) == Some("query"));
    }

    #[test]
    fn exports_are_deterministic() {
        let ds = generate_in_memory(&SynthSpec {
            n_classes: 4,
            samples_per_class_angle: 4,
            side: 12,
            seed: 42,
            ..Default::default()
        });
        let view = ds.view_all();
        let model = tiny_model(3, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ep = sample_task(&view, 3, 1, &mut rng, 0).unwrap();
        let a = export_embeddings_csv(&model, &ds, &ep, ExportStage::Final).unwrap();
        let b = export_embeddings_csv(&model, &ds, &ep, ExportStage::Final).unwrap();
        assert_eq!(a, b);
    }
}
