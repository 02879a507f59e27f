//! Channel-attention convolutional embedding.
//!
//! A single-channel image passes through a stem convolution and three
//! stages of basic blocks. Each basic block is conv-norm-relu, conv-norm,
//! a channel attention gate, an optional residual add, and a final relu.
//! Stages two and three open with stride-2 downsampling; global average
//! pooling turns the last feature map into the embedding vector, so the
//! output length always equals the last stage width.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::optim::{Bound, ParameterStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Attention gate bias at init; keeps the relu inside the gate live.
const ATTN_BIAS_INIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingConfig {
    /// Pixels per side of the (square) input.
    pub input_size: usize,
    pub stem_filters: usize,
    /// Channel width of each of the three stages.
    pub block_widths: Vec<usize>,
    pub basic_blocks_per_stage: usize,
    /// Residual adds inside basic blocks (skipped where shapes change).
    pub residual: bool,
}

impl EmbeddingConfig {
    /// Full-scale preset: 100×100 inputs, widths (16, 32, 64), six basic
    /// blocks per stage.
    pub fn paper() -> Self {
        EmbeddingConfig {
            input_size: 100,
            stem_filters: 16,
            block_widths: vec![16, 32, 64],
            basic_blocks_per_stage: 6,
            residual: true,
        }
    }

    /// Small preset sized so the full test suite runs in minutes on one
    /// core: 32×32 inputs, two basic blocks per stage.
    pub fn desk() -> Self {
        EmbeddingConfig {
            input_size: 32,
            stem_filters: 4,
            block_widths: vec![4, 8, 64],
            basic_blocks_per_stage: 2,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_size < 8 {
            return Err(TensorError::Invalid(format!(
                "embedding input_size must be >= 8, got {}",
                self.input_size
            )));
        }
        if self.block_widths.len() != 3 {
            return Err(TensorError::Invalid(format!(
                "embedding wants exactly three stages, got widths {:?}",
                self.block_widths
            )));
        }
        if self.basic_blocks_per_stage == 0 || self.stem_filters == 0 {
            return Err(TensorError::Invalid(
                "embedding needs at least one block and one stem filter".into(),
            ));
        }
        Ok(())
    }

    /// Embedding vector length (the last stage width).
    pub fn output_dim(&self) -> usize {
        *self.block_widths.last().unwrap()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

fn add_bn(store: &mut ParameterStore, prefix: &str, c: usize) -> Result<(), TensorError> {
    store.add_parameter(&format!("{prefix}.gamma"), Tensor::filled(vec![c], 1.0))?;
    store.add_parameter(&format!("{prefix}.beta"), Tensor::zeros(vec![c]))?;
    Ok(())
}

/// Register all embedding parameters under `embed.*`.
pub fn init_embedding_params(
    cfg: &EmbeddingConfig,
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
) -> Result<(), TensorError> {
    cfg.validate()?;
    store.add_parameter(
        "embed.stem.conv.k",
        uniform_init(rng, vec![3, 3, 1, cfg.stem_filters], 9),
    )?;
    add_bn(store, "embed.stem.bn", cfg.stem_filters)?;
    let mut in_c = cfg.stem_filters;
    for (si, &w) in cfg.block_widths.iter().enumerate() {
        for bi in 0..cfg.basic_blocks_per_stage {
            let p = format!("embed.s{si}.b{bi}");
            let c_in = if bi == 0 { in_c } else { w };
            store.add_parameter(
                &format!("{p}.conv1.k"),
                uniform_init(rng, vec![3, 3, c_in, w], 9 * c_in),
            )?;
            add_bn(store, &format!("{p}.bn1"), w)?;
            store.add_parameter(
                &format!("{p}.conv2.k"),
                uniform_init(rng, vec![3, 3, w, w], 9 * w),
            )?;
            add_bn(store, &format!("{p}.bn2"), w)?;
            store.add_parameter(&format!("{p}.attn.w"), uniform_init(rng, vec![w, w], w))?;
            store.add_parameter(
                &format!("{p}.attn.b"),
                Tensor::filled(vec![w], ATTN_BIAS_INIT),
            )?;
        }
        in_c = w;
    }
    Ok(())
}

/// Per-example spatial normalization: each image is normalized by its own
/// per-channel statistics in both train and eval mode, so the embedding is
/// the same deterministic function everywhere.
fn bn_apply(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let gamma = bound.id(&format!("{prefix}.gamma"));
    let beta = bound.id(&format!("{prefix}.beta"));
    let (out, _) = g.batch_norm(x, gamma, beta, None, BN_EPS)?;
    Ok(out)
}

/// Gate a feature map by per-channel attention scores:
/// pool → linear → relu → sigmoid → scale. Works on `[H,W,C]` or
/// `[B,H,W,C]`; the gate lies in [0,1] per channel.
pub fn channel_attention(
    g: &mut Graph,
    map: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId, TensorError> {
    let shape = g.value(map).shape().to_vec();
    let c = *shape.last().unwrap();
    let ws = g.value(weight).shape();
    if ws != [c, c] {
        return Err(TensorError::BadShape(format!(
            "channel_attention: map has {c} channels but weights are {ws:?}"
        )));
    }
    let (batched, was_rank3) = match shape.len() {
        3 => {
            let v = g.reshape(map, vec![1, shape[0], shape[1], c])?;
            (v, true)
        }
        4 => (map, false),
        _ => {
            return Err(TensorError::BadShape(format!(
                "channel_attention: need [H,W,C] or [B,H,W,C], got {shape:?}"
            )))
        }
    };
    let z = g.mean_inner(batched)?;
    let pre = g.linear(z, weight, Some(bias))?;
    let r = g.relu(pre);
    let s = g.sigmoid(r);
    let out = g.mul_inner(batched, s)?;
    if was_rank3 {
        g.reshape(out, shape)
    } else {
        Ok(out)
    }
}

/// Embed a batch of images: `[B,S,S,1] -> [B, output_dim]`.
pub fn embed_batch(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EmbeddingConfig,
    images: NodeId,
) -> Result<NodeId, TensorError> {
    let shape = g.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != shape[2] || shape[3] != 1 {
        return Err(TensorError::BadShape(format!(
            "embed: need square single-channel batch [B,S,S,1], got {shape:?}"
        )));
    }
    if shape[1] != cfg.input_size {
        return Err(TensorError::BadShape(format!(
            "embed: image side {} does not match configured {}",
            shape[1], cfg.input_size
        )));
    }
    let mut x = g.conv2d(images, bound.id("embed.stem.conv.k"), 1, 1)?;
    x = bn_apply(g, bound, "embed.stem.bn", x)?;
    x = g.relu(x);

    for si in 0..cfg.block_widths.len() {
        for bi in 0..cfg.basic_blocks_per_stage {
            let p = format!("embed.s{si}.b{bi}");
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let mut y = g.conv2d(x, bound.id(&format!("{p}.conv1.k")), stride, 1)?;
            y = bn_apply(g, bound, &format!("{p}.bn1"), y)?;
            y = g.relu(y);
            y = g.conv2d(y, bound.id(&format!("{p}.conv2.k")), 1, 1)?;
            y = bn_apply(g, bound, &format!("{p}.bn2"), y)?;
            y = channel_attention(
                g,
                y,
                bound.id(&format!("{p}.attn.w")),
                bound.id(&format!("{p}.attn.b")),
            )?;
            if cfg.residual && g.value(y).shape() == g.value(x).shape() {
                y = g.add(y, x)?;
            }
            x = g.relu(y);
        }
    }
    g.mean_inner(x)
}

/// Embed one image: `[S,S,1] -> [output_dim]`.
pub fn embed_single(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EmbeddingConfig,
    image: NodeId,
) -> Result<NodeId, TensorError> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::BadShape(format!(
            "embed: need [S,S,1], got {shape:?}"
        )));
    }
    let batched = g.reshape(image, vec![1, shape[0], shape[1], shape[2]])?;
    let pooled = embed_batch(g, bound, cfg, batched)?;
    g.take_row(pooled, 0)
}

/// Role of a node in the task graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Support,
    Prototype,
    Query,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Support => "support",
            NodeRole::Prototype => "prototype",
            NodeRole::Query => "query",
        }
    }
}

/// Metadata carried alongside node features; never read by the model.
#[derive(Debug, Clone)]
pub struct NodeMeta {
    pub role: NodeRole,
    pub class_id: Option<usize>,
    pub angle_id: Option<u32>,
}

/// Append label coding to an embedding vector: one-hot for a labeled node,
/// a uniform 1/N fill for the unlabeled query. Output length is
/// `len(v) + n_way`.
pub fn attach_label(
    g: &mut Graph,
    v: NodeId,
    class_id: Option<usize>,
    n_way: usize,
) -> Result<NodeId, TensorError> {
    if g.value(v).rank() != 1 {
        return Err(TensorError::BadShape(format!(
            "attach_label: need a vector, got {:?}",
            g.value(v).shape()
        )));
    }
    let coding = label_coding(class_id, n_way)?;
    let l = g.constant(Tensor::vector(coding));
    g.concat(v, l)
}

/// The label slot contents for one node.
pub fn label_coding(class_id: Option<usize>, n_way: usize) -> Result<Vec<f64>, TensorError> {
    match class_id {
        Some(c) if c >= n_way => Err(TensorError::Invalid(format!(
            "label {c} out of range for {n_way}-way task"
        ))),
        Some(c) => {
            let mut v = vec![0.0; n_way];
            v[c] = 1.0;
            Ok(v)
        }
        None => Ok(vec![1.0 / n_way as f64; n_way]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;

    fn tiny_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            input_size: 12,
            stem_filters: 3,
            block_widths: vec![3, 4, 5],
            basic_blocks_per_stage: 1,
            residual: true,
        }
    }

    fn init_store(cfg: &EmbeddingConfig, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new(0.001);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_embedding_params(cfg, &mut store, &mut rng).unwrap();
        store
    }

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![side, side, 1], data).unwrap()
    }

    #[test]
    fn attention_saturated_gate_passes_map_through() {
        let mut g = Graph::new();
        let c = 3;
        let map = g.constant(Tensor::new(vec![2, 2, c], vec![
            0.5, -1.0, 2.0, 0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
        ]).unwrap());
        let w = g.constant(Tensor::zeros(vec![c, c]));
        let b = g.constant(Tensor::filled(vec![c], 50.0));
        let out = channel_attention(&mut g, map, w, b).unwrap();
        let diff = max_abs_diff(g.value(out).data(), g.value(map).data());
        assert!(diff < 1e-12, "gate not saturated: {diff}");
    }

    #[test]
    fn attention_matches_hand_composed_oracle() {
        // 4x4x3 map with small fixed weights, against an explicit
        // pool -> linear -> relu -> sigmoid -> scale computation.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w_, c) = (4, 4, 3);
        let map_data: Vec<f64> = (0..h * w_ * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..c * c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..c).map(|_| rng.random_range(-0.2..0.2)).collect();

        let mut g = Graph::new();
        let map = g.constant(Tensor::new(vec![h, w_, c], map_data.clone()).unwrap());
        let wn = g.constant(Tensor::new(vec![c, c], wt.clone()).unwrap());
        let bn = g.constant(Tensor::vector(bias.clone()));
        let out = channel_attention(&mut g, map, wn, bn).unwrap();

        let mut z = vec![0.0; c];
        for r in 0..h * w_ {
            for j in 0..c {
                z[j] += map_data[r * c + j];
            }
        }
        for j in 0..c {
            z[j] /= (h * w_) as f64;
        }
        let mut s = vec![0.0; c];
        for j in 0..c {
            let mut pre = bias[j];
            for i in 0..c {
                pre += z[i] * wt[i * c + j];
            }
            let r = pre.max(0.0);
            s[j] = 1.0 / (1.0 + (-r).exp());
            assert!((0.0..=1.0).contains(&s[j]));
        }
        let want: Vec<f64> = map_data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i % c])
            .collect();
        assert!(max_abs_diff(g.value(out).data(), &want) < 1e-12);
    }

    #[test]
    fn attention_never_increases_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..10 {
            let c = 4;
            let map_data: Vec<f64> = (0..5 * 5 * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let map = g.constant(Tensor::new(vec![5, 5, c], map_data.clone()).unwrap());
            let w = g.constant(uniform_init(&mut rng, vec![c, c], c));
            let b = g.constant(Tensor::vector(
                (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ));
            let out = channel_attention(&mut g, map, w, b).unwrap();
            for (o, m) in g.value(out).data().iter().zip(&map_data) {
                assert!(o.abs() <= m.abs() + 1e-15, "trial {trial}: |{o}| > |{m}|");
            }
        }
    }

    #[test]
    fn desk_preset_outputs_sixty_four() {
        let cfg = EmbeddingConfig::desk();
        let store = init_store(&cfg, 1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let img = g.constant(random_image(32, 5));
        let v = embed_single(&mut g, &bound, &cfg, img).unwrap();
        assert_eq!(g.value(v).shape(), &[64]);
        assert!(g.value(v).all_finite());
    }

    #[test]
    fn paper_preset_outputs_sixty_four() {
        let cfg = EmbeddingConfig::paper();
        let store = init_store(&cfg, 2);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let img = g.constant(random_image(100, 6));
        let v = embed_single(&mut g, &bound, &cfg, img).unwrap();
        assert_eq!(g.value(v).shape(), &[64]);
        assert!(g.value(v).all_finite());
    }

    #[test]
    fn embedding_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 3);
        let img = random_image(12, 9);
        let run = |store: &ParameterStore| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let i = g.constant(img.clone());
            let v = embed_single(&mut g, &bound, &cfg, i).unwrap();
            g.value(v).data().to_vec()
        };
        assert_eq!(run(&store), run(&store));
        let other = init_store(&cfg, 4);
        assert_ne!(run(&store), run(&other));
    }

    #[test]
    fn mismatched_input_rejected() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 3);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(vec![12, 10, 1]));
        assert!(embed_single(&mut g, &bound, &cfg, img).is_err());
        let img3 = g.constant(Tensor::zeros(vec![12, 12, 3]));
        assert!(embed_single(&mut g, &bound, &cfg, img3).is_err());
    }

    #[test]
    fn attach_label_codings() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(vec![64]));
        let n = attach_label(&mut g, v, Some(1), 3).unwrap();
        assert_eq!(&g.value(n).data()[64..], &[0.0, 1.0, 0.0]);

        let q = attach_label(&mut g, v, None, 3).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(&g.value(q).data()[64..], &[third, third, third]);

        let five = attach_label(&mut g, v, Some(0), 5).unwrap();
        assert_eq!(g.value(five).shape(), &[69]);

        assert!(attach_label(&mut g, v, Some(3), 3).is_err());
    }

    #[test]
    fn gradients_reach_every_attention_layer() {
        // After one backward pass on a random input, no attention weight or
        // bias has an all-zero gradient; checked across 20 seeds.
        let cfg = tiny_cfg();
        for seed in 0..20u64 {
            let store = init_store(&cfg, 100 + seed);
            let mut g = Graph::new();
            let bound = store.bind(&mut g, true);
            let img = random_image(12, 200 + seed);
            let batched = g.constant(img.clone().reshaped(vec![1, 12, 12, 1]).unwrap());
            let v = embed_batch(&mut g, &bound, &cfg, batched).unwrap();
            let s = g.sum(v);
            g.backward(s).unwrap();
            for (name, _, trainable) in store.iter() {
                if !trainable || !name.contains(".attn.") {
                    continue;
                }
                let grad = g.grad(bound.id(name)).unwrap();
                assert!(
                    grad.iter().any(|&x| x != 0.0),
                    "seed {seed}: {name} has an all-zero gradient"
                );
            }
        }
    }
}
