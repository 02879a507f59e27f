//! Central finite-difference verification of reverse-mode gradients.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::optim::{Gradients, ParameterStore};
use crate::tensor::Tensor;

/// Step scale: h = H_SCALE · max(1, |θᵢ|).
pub const H_SCALE: f64 = 1e-5;

/// Relative error floor; differences below this magnitude are compared
/// against it instead of the tiny gradients themselves.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients against central differences of `f` at the
/// store's current values.
///
/// `f` must be a deterministic scalar function of the store. When
/// `coords_per_param` is set, that many coordinates are sampled per
/// parameter (seeded); otherwise every coordinate is swept. Non-finite
/// evaluations are reported as errors, never skipped.
pub fn finite_diff_check<F>(
    store: &mut ParameterStore,
    mut f: F,
    analytic: &Gradients,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParameterStore) -> Result<f64, TensorError>,
{
    let names: Vec<String> = store
        .iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(n, _, _)| n.to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    for name in &names {
        let len = store.get(name).unwrap().len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < len => rand::seq::index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let ag = analytic
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("no analytic gradient for {name}")))?;
        for &i in &coords {
            let theta = store.get(name).unwrap().data()[i];
            let h = H_SCALE * theta.abs().max(1.0);
            store.nudge(name, i, h)?;
            let fp = f(store)?;
            store.nudge(name, i, -2.0 * h)?;
            let fm = f(store)?;
            store.nudge(name, i, h)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "f(θ±h) non-finite at {name}[{i}]: {fp}, {fm}"
                )));
            }
            let fd = (fp - fm) / (2.0 * h);
            let err = rel_err(ag[i], fd);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Finite-difference check for a function of a single tensor, used to
/// exercise each graph primitive in isolation. `build` must record the
/// scalar output of the operation under test on a fresh graph.
pub fn check_tensor_fn<B>(x: &Tensor, mut build: B) -> Result<GradCheckReport, TensorError>
where
    B: FnMut(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    let mut g = Graph::new();
    let xid = g.parameter(x.clone());
    let out = build(&mut g, xid)?;
    if !g.value(out).is_scalar() {
        return Err(TensorError::BadShape(
            "check_tensor_fn: build must produce a scalar".into(),
        ));
    }
    g.backward(out)?;
    let analytic = g.grad(xid).unwrap().to_vec();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: "x".into(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let h = H_SCALE * data[i].abs().max(1.0);
        let eval = |data: &[f64], build: &mut B| -> Result<f64, TensorError> {
            let mut g = Graph::new();
            let xid = g.parameter(Tensor::new(x.shape().to_vec(), data.to_vec())?);
            let out = build(&mut g, xid)?;
            Ok(g.value(out).item())
        };
        let orig = data[i];
        data[i] = orig + h;
        let fp = eval(&data, &mut build)?;
        data[i] = orig - h;
        let fm = eval(&data, &mut build)?;
        data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "f(x±h) non-finite at coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = rel_err(analytic[i], fd);
        report.coords_checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_square_is_two() {
        // f(x) = x² at x = 1: derivative estimate within 1e-6 at h = 1e-5.
        let f = |x: f64| x * x;
        let h = 1e-5;
        let est = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!((est - 2.0).abs() < 1e-6);
    }

    #[test]
    fn affine_function_agrees_to_rounding() {
        let mut store = ParameterStore::new(0.0);
        store
            .add_parameter("w", Tensor::vector(vec![0.2, -1.4, 3.0]))
            .unwrap();
        let coeff = [2.0, -0.5, 1.25];
        let f = |s: &ParameterStore| -> Result<f64, TensorError> {
            let w = s.get("w").unwrap();
            Ok(w.data().iter().zip(&coeff).map(|(x, c)| x * c).sum::<f64>() + 7.0)
        };
        let mut analytic = Gradients::new();
        analytic.insert("w", coeff.to_vec());
        let report = finite_diff_check(&mut store, f, &analytic, None, 0).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParameterStore::new(0.0);
        store.add_parameter("w", Tensor::scalar(2.0)).unwrap();
        let f = |s: &ParameterStore| -> Result<f64, TensorError> {
            let w = s.get("w").unwrap().item();
            Ok(w * w)
        };
        let mut wrong = Gradients::new();
        wrong.insert("w", vec![1.0]); // true gradient is 4
        let report = finite_diff_check(&mut store, f, &wrong, None, 0).unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let mut store = ParameterStore::new(0.0);
        store.add_parameter("w", Tensor::scalar(0.0)).unwrap();
        let f = |s: &ParameterStore| -> Result<f64, TensorError> {
            // ln is NaN just left of zero, so the θ−h probe trips it.
            Ok(s.get("w").unwrap().item().ln())
        };
        let mut analytic = Gradients::new();
        analytic.insert("w", vec![0.0]);
        assert!(finite_diff_check(&mut store, f, &analytic, None, 0).is_err());
    }
}
