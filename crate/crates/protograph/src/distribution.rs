//! Prototype-anchored, densely connected graph convolutional classifier.
//!
//! Node features for one task enter a fully connected graph. Each
//! iteration learns the adjacency from pairwise feature differences, mixes
//! node features through it, and (when densely connected) concatenates the
//! result onto the running feature vector. A final linear head reads either
//! the query's adjacency row or its feature vector and outputs class
//! logits.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{NodeMeta, NodeRole};
use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::optim::{Bound, ParameterStore};
use crate::tensor::Tensor;

pub const MAX_ITERATIONS: usize = 5;

/// How class prototypes participate in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoMode {
    /// Supports and query only.
    None,
    /// Prototypes join as additional anchor nodes.
    Nodes,
    /// Only prototypes and the query enter the graph.
    Only,
    /// Each support is concatenated with its class prototype; the query is
    /// doubled with itself so all node lengths match.
    Info,
}

impl ProtoMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtoMode::None => "none",
            ProtoMode::Nodes => "nodes",
            ProtoMode::Only => "only",
            ProtoMode::Info => "info",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ProtoMode::None),
            "nodes" => Some(ProtoMode::Nodes),
            "only" => Some(ProtoMode::Only),
            "info" => Some(ProtoMode::Info),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Elementwise |x_i - x_j|.
    Abs,
    /// Elementwise (x_i - x_j)².
    Squared,
}

impl DistanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Abs => "abs",
            DistanceKind::Squared => "squared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abs" => Some(DistanceKind::Abs),
            "squared" => Some(DistanceKind::Squared),
            _ => None,
        }
    }
}

/// What the classification head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// The query's row of a final adjacency computed from the last
    /// features.
    AdjacencyRow,
    /// The query's final feature vector.
    QueryFeature,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::AdjacencyRow => "row",
            Head::QueryFeature => "feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "row" => Some(Head::AdjacencyRow),
            "feature" => Some(Head::QueryFeature),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Graph convolution iterations R.
    pub iterations: usize,
    pub dense: bool,
    pub proto_mode: ProtoMode,
    pub distance_kind: DistanceKind,
    /// Hidden widths of the adjacency scorer; a final width-1 layer and
    /// sigmoid are implied.
    pub adjacency_widths: Vec<usize>,
    /// Output width of each graph convolution.
    pub hidden_width: usize,
    pub head: Head,
    /// Row-normalize (A + I) before propagation; raw A when false.
    pub normalize_adjacency: bool,
}

impl GraphConfig {
    /// Task preset: 3-way tasks use the lighter adjacency scorer, 5-way the
    /// deeper one.
    pub fn preset(n_way: usize, k_shot: usize) -> Self {
        GraphConfig {
            n_way,
            k_shot,
            iterations: 3,
            dense: true,
            proto_mode: ProtoMode::Nodes,
            distance_kind: DistanceKind::Abs,
            adjacency_widths: if n_way >= 5 {
                vec![64, 64, 32, 32]
            } else {
                vec![64, 32]
            },
            hidden_width: 48,
            head: Head::AdjacencyRow,
            normalize_adjacency: true,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.n_way < 2 {
            return Err(TensorError::Invalid(format!(
                "n_way must be >= 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 {
            return Err(TensorError::Invalid("k_shot must be >= 1".into()));
        }
        if self.iterations == 0 || self.iterations > MAX_ITERATIONS {
            return Err(TensorError::Invalid(format!(
                "iterations must be in 1..={MAX_ITERATIONS}, got {}",
                self.iterations
            )));
        }
        if self.adjacency_widths.is_empty() {
            return Err(TensorError::Invalid("adjacency_widths must not be empty".into()));
        }
        if self.hidden_width == 0 {
            return Err(TensorError::Invalid("hidden_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of graph nodes for this mode.
    pub fn node_count(&self) -> usize {
        let nk = self.n_way * self.k_shot;
        match self.proto_mode {
            ProtoMode::None | ProtoMode::Info => nk + 1,
            ProtoMode::Nodes => nk + self.n_way + 1,
            ProtoMode::Only => self.n_way + 1,
        }
    }

    /// Node feature length entering the graph, given the embedding length.
    pub fn initial_dim(&self, embed_dim: usize) -> usize {
        let d = embed_dim + self.n_way;
        match self.proto_mode {
            ProtoMode::Info => 2 * d,
            _ => d,
        }
    }

    /// Node feature length after all iterations.
    pub fn final_dim(&self, embed_dim: usize) -> usize {
        if self.dense {
            self.initial_dim(embed_dim) + self.iterations * self.hidden_width
        } else {
            self.hidden_width
        }
    }

    pub fn head_input_dim(&self, embed_dim: usize) -> usize {
        match self.head {
            Head::AdjacencyRow => self.node_count(),
            Head::QueryFeature => self.final_dim(embed_dim),
        }
    }

    /// Feature length seen by the adjacency scorer of iteration `r`
    /// (`r == iterations` is the final scorer used by the row head).
    pub fn dim_at(&self, embed_dim: usize, r: usize) -> usize {
        if self.dense || r == 0 {
            self.initial_dim(embed_dim) + r * self.hidden_width
        } else {
            self.hidden_width
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Register all distribution-network parameters under `dist.*`.
pub fn init_distribution_params(
    cfg: &GraphConfig,
    embed_dim: usize,
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
) -> Result<(), TensorError> {
    cfg.validate()?;
    let scorer_count = match cfg.head {
        Head::AdjacencyRow => cfg.iterations + 1,
        Head::QueryFeature => cfg.iterations,
    };
    for r in 0..scorer_count {
        let mut d = cfg.dim_at(embed_dim, r);
        for (i, &w) in cfg.adjacency_widths.iter().enumerate() {
            store.add_parameter(&format!("dist.adj{r}.l{i}.w"), uniform_init(rng, vec![d, w], d))?;
            // Identical node pairs feed an all-zero difference vector to the
            // scorer; a small positive bias keeps those inputs off the relu
            // kink so the layer stays differentiable there.
            store.add_parameter(
                &format!("dist.adj{r}.l{i}.b"),
                Tensor::filled(vec![w], 0.1),
            )?;
            d = w;
        }
        store.add_parameter(&format!("dist.adj{r}.out.w"), uniform_init(rng, vec![d, 1], d))?;
        store.add_parameter(&format!("dist.adj{r}.out.b"), Tensor::zeros(vec![1]))?;
    }
    for r in 0..cfg.iterations {
        let d = cfg.dim_at(embed_dim, r);
        store.add_parameter(
            &format!("dist.gcn{r}.w"),
            uniform_init(rng, vec![d, cfg.hidden_width], d),
        )?;
        store.add_parameter(&format!("dist.gcn{r}.b"), Tensor::zeros(vec![cfg.hidden_width]))?;
    }
    let head_in = cfg.head_input_dim(embed_dim);
    store.add_parameter(
        "dist.head.w",
        uniform_init(rng, vec![head_in, cfg.n_way], head_in),
    )?;
    store.add_parameter("dist.head.b", Tensor::zeros(vec![cfg.n_way]))?;
    Ok(())
}

/// Mean feature vector per class over the support nodes, label slots
/// included (the mean of identical one-hot suffixes is that suffix).
/// Every class in `0..n_way` must own at least one support node.
pub fn compute_prototypes(
    g: &mut Graph,
    supports: &[(NodeId, usize)],
    n_way: usize,
) -> Result<Vec<NodeId>, TensorError> {
    let mut protos = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let members: Vec<NodeId> = supports
            .iter()
            .filter(|(_, cls)| *cls == c)
            .map(|(id, _)| *id)
            .collect();
        if members.is_empty() {
            return Err(TensorError::Invalid(format!(
                "prototype: class {c} has no support nodes"
            )));
        }
        let stacked = g.concat_rows(&members)?;
        protos.push(g.mean_rows(stacked)?);
    }
    Ok(protos)
}

/// Assembled task-graph inputs: stacked node features plus metadata, query
/// node last.
pub struct AssembledNodes {
    pub features: NodeId,
    pub meta: Vec<NodeMeta>,
}

/// Build the ordered node list for the configured prototype mode:
/// supports (episode order), then prototypes (class order), then the query.
pub fn assemble_nodes(
    g: &mut Graph,
    supports: &[(NodeId, usize)],
    support_meta: &[NodeMeta],
    prototypes: &[NodeId],
    query: NodeId,
    query_meta: NodeMeta,
    mode: ProtoMode,
) -> Result<AssembledNodes, TensorError> {
    debug_assert_eq!(supports.len(), support_meta.len());
    let mut ids: Vec<NodeId> = Vec::new();
    let mut meta: Vec<NodeMeta> = Vec::new();
    match mode {
        ProtoMode::None => {
            ids.extend(supports.iter().map(|(id, _)| *id));
            meta.extend(support_meta.iter().cloned());
            ids.push(query);
            meta.push(query_meta);
        }
        ProtoMode::Nodes => {
            ids.extend(supports.iter().map(|(id, _)| *id));
            meta.extend(support_meta.iter().cloned());
            for (c, &p) in prototypes.iter().enumerate() {
                ids.push(p);
                meta.push(NodeMeta { role: NodeRole::Prototype, class_id: Some(c), angle_id: None });
            }
            ids.push(query);
            meta.push(query_meta);
        }
        ProtoMode::Only => {
            for (c, &p) in prototypes.iter().enumerate() {
                ids.push(p);
                meta.push(NodeMeta { role: NodeRole::Prototype, class_id: Some(c), angle_id: None });
            }
            ids.push(query);
            meta.push(query_meta);
        }
        ProtoMode::Info => {
            for ((id, cls), m) in supports.iter().zip(support_meta) {
                if *cls >= prototypes.len() {
                    return Err(TensorError::Invalid(format!(
                        "support class {cls} has no prototype"
                    )));
                }
                ids.push(g.concat(*id, prototypes[*cls])?);
                meta.push(m.clone());
            }
            ids.push(g.concat(query, query)?);
            meta.push(query_meta);
        }
    }
    let features = g.concat_rows(&ids)?;
    Ok(AssembledNodes { features, meta })
}

/// Learned pairwise similarity matrix in (0,1): a per-pair scorer applied
/// to elementwise feature differences, followed by sigmoid. Symmetric by
/// construction since the difference enters through |·| or (·)².
pub fn adjacency(
    g: &mut Graph,
    x: NodeId,
    bound: &Bound,
    scorer: usize,
    cfg: &GraphConfig,
) -> Result<NodeId, TensorError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::BadShape(format!(
            "adjacency: need [n,d], got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let diff = g.pairwise_diff(x)?;
    let t = match cfg.distance_kind {
        DistanceKind::Abs => g.abs_val(diff),
        DistanceKind::Squared => g.mul(diff, diff)?,
    };
    let mut h = g.reshape(t, vec![n * n, d])?;
    for i in 0..cfg.adjacency_widths.len() {
        let w = bound.id(&format!("dist.adj{scorer}.l{i}.w"));
        let b = bound.id(&format!("dist.adj{scorer}.l{i}.b"));
        h = g.linear(h, w, Some(b))?;
        h = g.relu(h);
    }
    let w = bound.id(&format!("dist.adj{scorer}.out.w"));
    let b = bound.id(&format!("dist.adj{scorer}.out.b"));
    h = g.linear(h, w, Some(b))?;
    let s = g.sigmoid(h);
    g.reshape(s, vec![n, n])
}

/// Row-normalized propagation operator (A + I) / rowsum.
pub fn normalize_adjacency(g: &mut Graph, a: NodeId) -> Result<NodeId, TensorError> {
    let n = g.value(a).shape()[0];
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let eye = g.constant(Tensor::new(vec![n, n], eye)?);
    let a1 = g.add(a, eye)?;
    let rs = g.row_sums(a1)?;
    let inv = g.recip(rs);
    g.scale_rows(a1, inv)
}

/// One graph convolution: X* = relu(linear(Â·X)) with Â the normalized
/// (or raw, per config) adjacency.
pub fn gcn_layer(
    g: &mut Graph,
    x: NodeId,
    a: NodeId,
    bound: &Bound,
    layer: usize,
    cfg: &GraphConfig,
) -> Result<NodeId, TensorError> {
    let (xs, as_) = (g.value(x).shape().to_vec(), g.value(a).shape().to_vec());
    if as_.len() != 2 || as_[0] != as_[1] || xs.len() != 2 || as_[0] != xs[0] {
        return Err(TensorError::BadShape(format!(
            "gcn_layer: adjacency {as_:?} vs features {xs:?}"
        )));
    }
    let a_hat = if cfg.normalize_adjacency {
        normalize_adjacency(g, a)?
    } else {
        a
    };
    let mixed = g.matmul(a_hat, x)?;
    let w = bound.id(&format!("dist.gcn{layer}.w"));
    let b = bound.id(&format!("dist.gcn{layer}.b"));
    let h = g.linear(mixed, w, Some(b))?;
    Ok(g.relu(h))
}

/// Dense update keeps the running features and appends the new ones;
/// non-dense replaces them.
pub fn dense_update(
    g: &mut Graph,
    x: NodeId,
    x_star: NodeId,
    dense: bool,
) -> Result<NodeId, TensorError> {
    if dense {
        g.concat(x, x_star)
    } else {
        Ok(x_star)
    }
}

/// Full distribution-network pass over assembled nodes.
pub struct DistributionOutput {
    /// Node features before any iteration.
    pub initial: NodeId,
    /// Features after each iteration.
    pub per_iteration: Vec<NodeId>,
    /// Adjacency of each iteration (plus the final head adjacency when the
    /// row head is active).
    pub adjacencies: Vec<NodeId>,
    pub logits: NodeId,
}

pub fn run_distribution(
    g: &mut Graph,
    assembled: &AssembledNodes,
    bound: &Bound,
    cfg: &GraphConfig,
) -> Result<DistributionOutput, TensorError> {
    let mut x = assembled.features;
    let n = g.value(x).shape()[0];
    let mut adjacencies = Vec::new();
    let mut per_iteration = Vec::new();
    for r in 0..cfg.iterations {
        let a = adjacency(g, x, bound, r, cfg)?;
        adjacencies.push(a);
        let x_star = gcn_layer(g, x, a, bound, r, cfg)?;
        x = dense_update(g, x, x_star, cfg.dense)?;
        per_iteration.push(x);
    }
    let head_in = match cfg.head {
        Head::AdjacencyRow => {
            let a_fin = adjacency(g, x, bound, cfg.iterations, cfg)?;
            adjacencies.push(a_fin);
            g.take_row(a_fin, n - 1)?
        }
        Head::QueryFeature => g.take_row(x, n - 1)?,
    };
    let logits = g.linear(head_in, bound.id("dist.head.w"), Some(bound.id("dist.head.b")))?;
    Ok(DistributionOutput { initial: assembled.features, per_iteration, adjacencies, logits })
}
