//! The full few-shot classifier: embedding network + distribution network
//! over one episode's images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distribution::{
    self, run_distribution, AssembledNodes, DistributionOutput, GraphConfig, ProtoMode,
};
use crate::embedding::{self, embed_batch, label_coding, EmbeddingConfig, NodeMeta, NodeRole};
use crate::error::TensorError;
use crate::graph::{softmax, Graph, NodeId};
use crate::optim::{Bound, Gradients, ParameterStore};
use crate::seed;
use crate::tensor::Tensor;

/// Architecture, task shape, and training switches for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub graph: GraphConfig,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Learning rates used when none is given explicitly: 0.001 for 3-way
/// tasks, 0.01 for 5-way.
pub fn default_learning_rate(n_way: usize) -> f64 {
    if n_way >= 5 {
        0.01
    } else {
        0.001
    }
}

impl ModelConfig {
    pub fn desk(n_way: usize, k_shot: usize, seed: u64) -> Self {
        ModelConfig {
            embedding: EmbeddingConfig::desk(),
            graph: GraphConfig::preset(n_way, k_shot),
            learning_rate: default_learning_rate(n_way),
            seed,
        }
    }

    pub fn paper(n_way: usize, k_shot: usize, seed: u64) -> Self {
        ModelConfig {
            embedding: EmbeddingConfig::paper(),
            graph: GraphConfig::preset(n_way, k_shot),
            learning_rate: default_learning_rate(n_way),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.embedding.validate()?;
        self.graph.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TensorError::Invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One episode's raw inputs in node order (supports first, query last).
pub struct EpisodeInput<'a> {
    pub side: usize,
    /// (pixels, local class id, angle id) per support sample.
    pub support: Vec<(&'a [f64], usize, u32)>,
    pub query: &'a [f64],
    pub query_label: usize,
    pub query_angle: u32,
}

/// Everything produced by one forward pass. The graph is kept alive so
/// callers can run backward and read gradients or intermediate features.
pub struct EpisodeForward {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: NodeId,
    pub logits: NodeId,
    pub posterior: Vec<f64>,
    pub predicted: usize,
    pub node_meta: Vec<NodeMeta>,
    /// Assembled node features before any graph iteration.
    pub initial_features: NodeId,
    /// Node features after each iteration.
    pub per_iteration: Vec<NodeId>,
    pub adjacencies: Vec<NodeId>,
}

impl EpisodeForward {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
}

impl Model {
    /// Build a model with seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self, TensorError> {
        config.validate()?;
        let mut store = ParameterStore::new(config.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::init_seed(config.seed));
        embedding::init_embedding_params(&config.embedding, &mut store, &mut rng)?;
        distribution::init_distribution_params(
            &config.graph,
            config.embedding.output_dim(),
            &mut store,
            &mut rng,
        )?;
        Ok(Model { config, store })
    }

    fn validate_episode(&self, input: &EpisodeInput) -> Result<(), TensorError> {
        let g = &self.config.graph;
        let nk = g.n_way * g.k_shot;
        if input.support.len() != nk {
            return Err(TensorError::Invalid(format!(
                "episode has {} support samples, config wants {nk}",
                input.support.len()
            )));
        }
        let mut counts = vec![0usize; g.n_way];
        for (_, c, _) in &input.support {
            if *c >= g.n_way {
                return Err(TensorError::Invalid(format!(
                    "support class {c} out of range for {}-way",
                    g.n_way
                )));
            }
            counts[*c] += 1;
        }
        if counts.iter().any(|&k| k != g.k_shot) {
            return Err(TensorError::Invalid(format!(
                "support class counts {counts:?} != k_shot {}",
                g.k_shot
            )));
        }
        if input.query_label >= g.n_way {
            return Err(TensorError::Invalid(format!(
                "query label {} out of range",
                input.query_label
            )));
        }
        let pixels = input.side * input.side;
        if input.query.len() != pixels
            || input.support.iter().any(|(p, _, _)| p.len() != pixels)
        {
            return Err(TensorError::BadShape(format!(
                "episode images must be {0}x{0}",
                input.side
            )));
        }
        Ok(())
    }

    /// Embed all episode images, attach label coding, assemble the task
    /// graph, iterate it, and compute the classification loss.
    pub fn forward_episode(
        &self,
        input: &EpisodeInput,
        train: bool,
    ) -> Result<EpisodeForward, TensorError> {
        self.validate_episode(input)?;
        let gcfg = &self.config.graph;
        let (n_way, k_shot) = (gcfg.n_way, gcfg.k_shot);
        let nk = n_way * k_shot;
        let batch = nk + 1;
        let side = input.side;

        let mut images = Vec::with_capacity(batch * side * side);
        for (pixels, _, _) in &input.support {
            images.extend_from_slice(pixels);
        }
        images.extend_from_slice(input.query);

        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, train);
        let image_node = g.constant(Tensor::new(vec![batch, side, side, 1], images)?);
        let embedded = embed_batch(&mut g, &bound, &self.config.embedding, image_node)?;

        // Label coding appended to every embedding: one-hot for supports,
        // uniform fill for the query.
        let mut label_rows = Vec::with_capacity(batch * n_way);
        for (_, c, _) in &input.support {
            label_rows.extend(label_coding(Some(*c), n_way)?);
        }
        label_rows.extend(label_coding(None, n_way)?);
        let labels = g.constant(Tensor::new(vec![batch, n_way], label_rows)?);
        let labeled = g.concat(embedded, labels)?;

        let mut supports: Vec<(NodeId, usize)> = Vec::with_capacity(nk);
        let mut support_meta: Vec<NodeMeta> = Vec::with_capacity(nk);
        for (i, (_, c, angle)) in input.support.iter().enumerate() {
            supports.push((g.take_row(labeled, i)?, *c));
            support_meta.push(NodeMeta {
                role: NodeRole::Support,
                class_id: Some(*c),
                angle_id: Some(*angle),
            });
        }
        let query = g.take_row(labeled, nk)?;
        let query_meta = NodeMeta {
            role: NodeRole::Query,
            class_id: Some(input.query_label),
            angle_id: Some(input.query_angle),
        };

        let prototypes = if gcfg.proto_mode == ProtoMode::None {
            Vec::new()
        } else {
            distribution::compute_prototypes(&mut g, &supports, n_way)?
        };
        let assembled: AssembledNodes = distribution::assemble_nodes(
            &mut g,
            &supports,
            &support_meta,
            &prototypes,
            query,
            query_meta,
            gcfg.proto_mode,
        )?;
        let out: DistributionOutput = run_distribution(&mut g, &assembled, &bound, gcfg)?;
        let loss = g.softmax_cross_entropy(out.logits, input.query_label)?;
        if !g.value(loss).all_finite() {
            return Err(TensorError::NonFinite("episode loss is not finite".into()));
        }
        let posterior = softmax(g.value(out.logits).data());
        let predicted = argmax(&posterior);
        Ok(EpisodeForward {
            graph: g,
            bound,
            loss,
            logits: out.logits,
            posterior,
            predicted,
            node_meta: assembled.meta,
            initial_features: out.initial,
            per_iteration: out.per_iteration,
            adjacencies: out.adjacencies,
        })
    }

    /// Forward, backward, Adam update, and running-statistics update.
    /// Returns the step's loss and whether the query was classified
    /// correctly.
    pub fn train_step(&mut self, input: &EpisodeInput) -> Result<(f64, bool), TensorError> {
        let mut fwd = self.forward_episode(input, true)?;
        let loss = fwd.loss_value();
        fwd.graph.backward(fwd.loss)?;
        let grads = Gradients::from_graph(&fwd.graph, &fwd.bound, &self.store);
        self.store.adam_step(&grads)?;
        Ok((loss, fwd.predicted == input.query_label))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(n_way: usize, k_shot: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            embedding: EmbeddingConfig {
                input_size: 12,
                stem_filters: 3,
                block_widths: vec![3, 4, 5],
                basic_blocks_per_stage: 1,
                residual: true,
            },
            graph: GraphConfig {
                adjacency_widths: vec![8],
                hidden_width: 6,
                iterations: 2,
                ..GraphConfig::preset(n_way, k_shot)
            },
            learning_rate: default_learning_rate(n_way),
            seed,
        }
    }

    fn random_episode(side: usize, n_way: usize, k_shot: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut classes = Vec::new();
        for c in 0..n_way {
            for _ in 0..k_shot {
                images.push((0..side * side).map(|_| rng.random_range(0.0..1.0)).collect());
                classes.push(c);
            }
        }
        images.push((0..side * side).map(|_| rng.random_range(0.0..1.0)).collect());
        (images, classes)
    }

    fn episode_input<'a>(
        images: &'a [Vec<f64>],
        classes: &[usize],
        side: usize,
        query_label: usize,
    ) -> EpisodeInput<'a> {
        EpisodeInput {
            side,
            support: images[..images.len() - 1]
                .iter()
                .zip(classes)
                .map(|(p, &c)| (p.as_slice(), c, 0u32))
                .collect(),
            query: images.last().unwrap(),
            query_label,
            query_angle: 1,
        }
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = Model::new(tiny_config(3, 2, 5)).unwrap();
        let (images, classes) = random_episode(12, 3, 2, 6);
        let input = episode_input(&images, &classes, 12, 1);
        let fwd = model.forward_episode(&input, false).unwrap();
        assert_eq!(fwd.posterior.len(), 3);
        assert!((fwd.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(fwd.node_meta.len(), model.config.graph.node_count());
        assert!(fwd.loss_value().is_finite());
    }

    #[test]
    fn one_shot_proto_only_equals_plain_graph() {
        // With K = 1 the prototype of each class is its single support, so
        // the prototypes-only node set coincides with the supports+query
        // set; identical parameters must give identical posteriors.
        let mut cfg_none = tiny_config(3, 1, 9);
        cfg_none.graph.proto_mode = ProtoMode::None;
        cfg_none.graph.dense = true;
        let mut cfg_only = cfg_none.clone();
        cfg_only.graph.proto_mode = ProtoMode::Only;

        let m_none = Model::new(cfg_none).unwrap();
        let m_only = Model::new(cfg_only).unwrap();
        let (images, classes) = random_episode(12, 3, 1, 10);
        let input = episode_input(&images, &classes, 12, 2);
        let a = m_none.forward_episode(&input, false).unwrap();
        let b = m_only.forward_episode(&input, false).unwrap();
        for (x, y) in a.posterior.iter().zip(&b.posterior) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        assert!((a.loss_value() - b.loss_value()).abs() <= 1e-12);
    }

    #[test]
    fn episode_shape_validation() {
        let model = Model::new(tiny_config(3, 2, 5)).unwrap();
        let (images, mut classes) = random_episode(12, 3, 2, 6);
        classes[0] = 1; // class counts now 1,3,2
        let input = episode_input(&images, &classes, 12, 0);
        assert!(model.forward_episode(&input, false).is_err());
    }

    #[test]
    fn train_step_reduces_loss_on_repeated_episode() {
        let mut cfg = tiny_config(2, 1, 11);
        cfg.learning_rate = 0.01;
        let mut model = Model::new(cfg).unwrap();
        let (images, classes) = random_episode(12, 2, 1, 12);
        let input = episode_input(&images, &classes, 12, 0);
        let (first, _) = model.train_step(&input).unwrap();
        let mut last = first;
        for _ in 0..120 {
            let (l, _) = model.train_step(&input).unwrap();
            last = l;
        }
        assert!(last < first * 0.25, "loss {first} -> {last}");
        assert_eq!(model.store.step_count(), 121);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Tiny but complete model (attention, normalization, prototypes,
        // dense graph iterations, row head): full coordinate sweep.
        let mut model = Model::new(tiny_config(2, 1, 13)).unwrap();
        let (images, classes) = random_episode(12, 2, 1, 14);
        let input = episode_input(&images, &classes, 12, 1);

        let mut fwd = model.forward_episode(&input, true).unwrap();
        fwd.graph.backward(fwd.loss).unwrap();
        let analytic = Gradients::from_graph(&fwd.graph, &fwd.bound, &model.store);

        let cfg = model.config.clone();
        let f = |s: &ParameterStore| -> Result<f64, TensorError> {
            let m = Model { config: cfg.clone(), store: clone_store(s) };
            // Train-mode normalization statistics are part of the loss
            // being differentiated, so the probe must rebuild them.
            Ok(m.forward_episode(&input, true)?.loss_value())
        };
        let report =
            crate::gradcheck::finite_diff_check(&mut model.store, f, &analytic, Some(4), 99)
                .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.coords_checked > 50);
    }

    fn clone_store(s: &ParameterStore) -> ParameterStore {
        let mut out = ParameterStore::new(s.learning_rate);
        for (name, tensor, trainable) in s.iter() {
            if trainable {
                out.add_parameter(name, tensor.clone()).unwrap();
            } else {
                out.add_buffer(name, tensor.clone()).unwrap();
            }
        }
        out
    }
}
