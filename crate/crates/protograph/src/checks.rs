//! Gradient verification suites: every graph primitive against central
//! finite differences, plus the full model end to end. Used by the
//! `gradcheck` CLI subcommand and the acceptance tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::model::{EpisodeInput, Model, ModelConfig};
use crate::optim::{Bound, Gradients, ParameterStore};
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Check one operation: `build` records a computation of the named
/// parameters on a fresh graph and returns its (any-shape) output, which is
/// folded to a scalar against fixed random weights so every output
/// coordinate influences the loss.
fn check_op<B>(
    name: &str,
    params: &[(&str, Vec<usize>, f64, f64)],
    seed: u64,
    build: B,
) -> Result<(String, GradCheckReport), TensorError>
where
    B: Fn(&mut Graph, &Bound) -> Result<NodeId, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new(0.0);
    for (pname, shape, lo, hi) in params {
        store.add_parameter(pname, rand_tensor(&mut rng, shape.clone(), *lo, *hi))?;
    }
    let mut fold: Option<Vec<f64>> = None;
    let mut run = |s: &ParameterStore, train: bool, fold: &mut Option<Vec<f64>>| -> Result<(f64, Option<(Graph, Bound, NodeId)>), TensorError> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g, train);
        let out = build(&mut g, &bound)?;
        let w = match fold {
            Some(w) => w.clone(),
            None => {
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                let w: Vec<f64> = (0..g.value(out).len())
                    .map(|_| wr.random_range(-1.0..1.0))
                    .collect();
                *fold = Some(w.clone());
                w
            }
        };
        let flat = g.reshape(out, vec![w.len()])?;
        let wn = g.constant(Tensor::vector(w));
        let prod = g.mul(flat, wn)?;
        let loss = g.sum(prod);
        let lv = g.value(loss).item();
        Ok((lv, if train { Some((g, bound, loss)) } else { None }))
    };
    let (_, built) = run(&store, true, &mut fold)?;
    let (mut g, bound, loss) = built.unwrap();
    g.backward(loss)?;
    let analytic = Gradients::from_graph(&g, &bound, &store);
    let report = finite_diff_check(
        &mut store,
        |s| run(s, false, &mut fold.clone()).map(|(v, _)| v),
        &analytic,
        None,
        seed ^ 0x5555,
    )?;
    Ok((name.to_string(), report))
}

/// Run the finite-difference suite over every primitive with random shapes
/// up to 6×6×4. Returns (op name, report) pairs.
pub fn primitive_gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>, TensorError> {
    let mut out = Vec::new();
    let s = seed;

    out.push(check_op("conv2d", &[("x", vec![5, 6, 2], -1.0, 1.0), ("k", vec![3, 3, 2, 4], -0.6, 0.6)], s, |g, b| {
        g.conv2d(b.id("x"), b.id("k"), 1, 1)
    })?);
    out.push(check_op("conv2d_strided", &[("x", vec![2, 6, 6, 3], -1.0, 1.0), ("k", vec![3, 3, 3, 2], -0.6, 0.6)], s, |g, b| {
        g.conv2d(b.id("x"), b.id("k"), 2, 0)
    })?);
    out.push(check_op("linear", &[("x", vec![4], -1.0, 1.0), ("w", vec![4, 3], -0.7, 0.7), ("b", vec![3], -0.5, 0.5)], s, |g, b| {
        g.linear(b.id("x"), b.id("w"), Some(b.id("b")))
    })?);
    out.push(check_op("matmul", &[("a", vec![4, 5], -1.0, 1.0), ("b", vec![5, 3], -1.0, 1.0)], s, |g, b| {
        g.matmul(b.id("a"), b.id("b"))
    })?);
    out.push(check_op("relu", &[("x", vec![6, 4], -1.0, 1.0)], s, |g, b| Ok(g.relu(b.id("x"))))?);
    out.push(check_op("sigmoid", &[("x", vec![5, 3], -3.0, 3.0)], s, |g, b| Ok(g.sigmoid(b.id("x"))))?);
    out.push(check_op("abs", &[("x", vec![6, 4], -1.0, 1.0)], s, |g, b| Ok(g.abs_val(b.id("x"))))?);
    out.push(check_op("rsqrt", &[("x", vec![5], 0.5, 3.0)], s, |g, b| Ok(g.rsqrt(b.id("x"))))?);
    out.push(check_op("recip", &[("x", vec![5], 0.5, 3.0)], s, |g, b| Ok(g.recip(b.id("x"))))?);
    out.push(check_op("add_sub_mul", &[("a", vec![4, 4], -1.0, 1.0), ("b", vec![4, 4], -1.0, 1.0)], s, |g, bd| {
        let x = g.add(bd.id("a"), bd.id("b"))?;
        let y = g.sub(x, bd.id("b"))?;
        g.mul(y, bd.id("a"))
    })?);
    out.push(check_op("scale_add_scalar", &[("x", vec![3, 3], -1.0, 1.0)], s, |g, b| {
        let y = g.scale(b.id("x"), -1.7);
        Ok(g.add_scalar(y, 0.3))
    })?);
    out.push(check_op("mean_rows", &[("x", vec![6, 4], -1.0, 1.0)], s, |g, b| g.mean_rows(b.id("x")))?);
    out.push(check_op("global_avg_pool", &[("x", vec![6, 5, 4], -1.0, 1.0)], s, |g, b| {
        g.global_avg_pool(b.id("x"))
    })?);
    out.push(check_op("broadcast_rows", &[("v", vec![4], -1.0, 1.0)], s, |g, b| {
        g.broadcast_rows(b.id("v"), &[3, 2])
    })?);
    out.push(check_op("mean_inner", &[("x", vec![3, 4, 2], -1.0, 1.0)], s, |g, b| g.mean_inner(b.id("x")))?);
    out.push(check_op("broadcast_inner", &[("m", vec![3, 2], -1.0, 1.0)], s, |g, b| {
        g.broadcast_inner(b.id("m"), &[4])
    })?);
    out.push(check_op("sub_inner", &[("x", vec![3, 4, 2], -1.0, 1.0), ("m", vec![3, 2], -1.0, 1.0)], s, |g, b| {
        g.sub_inner(b.id("x"), b.id("m"))
    })?);
    out.push(check_op("mul_inner", &[("x", vec![3, 4, 2], -1.0, 1.0), ("m", vec![3, 2], -1.0, 1.0)], s, |g, b| {
        g.mul_inner(b.id("x"), b.id("m"))
    })?);
    out.push(check_op("mean_inner_sq", &[("x", vec![3, 4, 2], -1.0, 1.0)], s, |g, b| {
        g.mean_inner_sq(b.id("x"))
    })?);
    out.push(check_op("mul_channels", &[("x", vec![5, 3], -1.0, 1.0), ("v", vec![3], -1.0, 1.0)], s, |g, b| {
        g.mul_channels(b.id("x"), b.id("v"))
    })?);
    out.push(check_op("add_sub_channels", &[("x", vec![5, 3], -1.0, 1.0), ("v", vec![3], -1.0, 1.0)], s, |g, b| {
        let y = g.add_channels(b.id("x"), b.id("v"))?;
        g.sub_channels(y, b.id("v"))
    })?);
    out.push(check_op("row_sums", &[("x", vec![5, 4], -1.0, 1.0)], s, |g, b| g.row_sums(b.id("x")))?);
    out.push(check_op("scale_rows", &[("x", vec![4, 5], -1.0, 1.0), ("s", vec![4], 0.3, 2.0)], s, |g, b| {
        g.scale_rows(b.id("x"), b.id("s"))
    })?);
    out.push(check_op("concat", &[("a", vec![3, 2], -1.0, 1.0), ("b", vec![3, 4], -1.0, 1.0)], s, |g, bd| {
        g.concat(bd.id("a"), bd.id("b"))
    })?);
    out.push(check_op("concat_rows", &[("a", vec![2, 3], -1.0, 1.0), ("b", vec![3], -1.0, 1.0)], s, |g, bd| {
        g.concat_rows(&[bd.id("a"), bd.id("b")])
    })?);
    out.push(check_op("take_row_take_rows", &[("x", vec![5, 4], -1.0, 1.0)], s, |g, b| {
        let rows = g.take_rows(b.id("x"), &[0, 2, 2, 4])?;
        let one = g.take_row(b.id("x"), 1)?;
        let onem = g.reshape(one, vec![1, 4])?;
        g.concat_rows(&[rows, onem])
    })?);
    out.push(check_op("reshape_sum", &[("x", vec![4, 3], -1.0, 1.0)], s, |g, b| {
        let r = g.reshape(b.id("x"), vec![2, 6])?;
        Ok(g.sum(r))
    })?);
    out.push(check_op("pairwise_diff", &[("x", vec![4, 3], -1.0, 1.0)], s, |g, b| {
        g.pairwise_diff(b.id("x"))
    })?);
    out.push(check_op("softmax_cross_entropy", &[("z", vec![5], -2.0, 2.0)], s, |g, b| {
        g.softmax_cross_entropy(b.id("z"), 2)
    })?);
    out.push(check_op("batch_norm_train", &[("x", vec![2, 4, 3], -1.0, 1.0), ("gamma", vec![3], 0.5, 1.5), ("beta", vec![3], -0.5, 0.5)], s, |g, b| {
        let (y, _) = g.batch_norm(b.id("x"), b.id("gamma"), b.id("beta"), None, 1e-5)?;
        Ok(y)
    })?);
    out.push(check_op("batch_norm_eval", &[("x", vec![2, 4, 3], -1.0, 1.0), ("gamma", vec![3], 0.5, 1.5), ("beta", vec![3], -0.5, 0.5)], s, |g, b| {
        let mu = [0.1, -0.2, 0.05];
        let var = [1.1, 0.9, 1.3];
        let (y, _) = g.batch_norm(b.id("x"), b.id("gamma"), b.id("beta"), Some((&mu, &var)), 1e-5)?;
        Ok(y)
    })?);
    Ok(out)
}

/// A complete-but-tiny model configuration that exercises every component
/// (attention, normalization, prototypes, dense iterations, row head) while
/// staying cheap enough for a full-coordinate sweep.
pub fn tiny_full_config(seed: u64) -> ModelConfig {
    use crate::distribution::GraphConfig;
    use crate::embedding::EmbeddingConfig;
    ModelConfig {
        embedding: EmbeddingConfig {
            input_size: 12,
            stem_filters: 3,
            block_widths: vec![3, 4, 5],
            basic_blocks_per_stage: 1,
            residual: true,
        },
        graph: GraphConfig {
            adjacency_widths: vec![6],
            hidden_width: 5,
            iterations: 2,
            ..GraphConfig::preset(3, 1)
        },
        learning_rate: 0.001,
        seed,
    }
}

/// Finite-difference check of the full episode loss for an arbitrary model
/// configuration. Random images; `coords_per_param` limits the sweep
/// (None sweeps everything).
pub fn model_gradient_check(
    config: ModelConfig,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TensorError> {
    let mut model = Model::new(config)?;
    let side = model.config.embedding.input_size;
    let (n_way, k_shot) = (model.config.graph.n_way, model.config.graph.k_shot);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut classes = Vec::new();
    for c in 0..n_way {
        for _ in 0..k_shot {
            images.push((0..side * side).map(|_| rng.random_range(0.0..1.0)).collect());
            classes.push(c);
        }
    }
    let query: Vec<f64> = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
    let input = EpisodeInput {
        side,
        support: images.iter().zip(&classes).map(|(p, &c)| (p.as_slice(), c, 0u32)).collect(),
        query: &query,
        query_label: n_way - 1,
        query_angle: 1,
    };

    let mut fwd = model.forward_episode(&input, true)?;
    fwd.graph.backward(fwd.loss)?;
    let analytic = Gradients::from_graph(&fwd.graph, &fwd.bound, &model.store);

    let config = model.config.clone();
    let f = |s: &ParameterStore| -> Result<f64, TensorError> {
        let mut probe_store = ParameterStore::new(s.learning_rate);
        for (name, tensor, trainable) in s.iter() {
            if trainable {
                probe_store.add_parameter(name, tensor.clone())?;
            } else {
                probe_store.add_buffer(name, tensor.clone())?;
            }
        }
        let m = Model { config: config.clone(), store: probe_store };
        Ok(m.forward_episode(&input, true)?.loss_value())
    };
    finite_diff_check(&mut model.store, f, &analytic, coords_per_param, seed ^ 0x77)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_passes() {
        let results = primitive_gradient_suite(1).unwrap();
        assert!(results.len() >= 25);
        for (name, report) in &results {
            assert!(
                report.max_rel_err < 1e-4,
                "{name}: {report:?}"
            );
        }
    }

    #[test]
    fn tiny_model_full_sweep_passes() {
        let report = model_gradient_check(tiny_full_config(5), Some(6), 2).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
