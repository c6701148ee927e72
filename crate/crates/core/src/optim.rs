//! Adam optimizer and the finite-difference gradient checker.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are indexed by [`ParamId`] and
/// shape-match their parameters.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for id in store.ids() {
            let n = if store.is_trainable(id) {
                store.get(id).numel()
            } else {
                0
            };
            first.push(vec![0.0; n]);
            second.push(vec![0.0; n]);
        }
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    /// One Adam update over the supplied gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (pid, g) in grads {
            let theta = store.get_mut(*pid);
            if g.len() != theta.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: theta.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            let m = &mut self.first_moment[pid.0];
            let v = &mut self.second_moment[pid.0];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tol)
    }
}

/// Compare analytic gradients against central finite differences
/// `(f(t + h) - f(t - h)) / 2h` for every trainable parameter.
///
/// `build_loss` must be deterministic. Tensors larger than
/// `samples_per_tensor` are probed at a seeded random subset of elements;
/// smaller ones are probed exhaustively.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    mut build_loss: F,
    h: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new();
    let loss = build_loss(store, &mut graph)?;
    graph.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> =
        graph.param_grads().into_iter().collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.get(id).numel();
        let indices: Vec<usize> = if numel <= samples_per_tensor {
            (0..numel).collect()
        } else {
            (0..samples_per_tensor)
                .map(|_| rng.gen_range(0..numel))
                .collect()
        };
        let mut max_rel = 0.0f64;
        for &ei in &indices {
            let orig = store.get(id).data[ei];
            store.get_mut(id).data[ei] = orig + h;
            let mut g = Graph::new();
            let lp = build_loss(store, &mut g)?;
            let fp = g.scalar_value(lp);
            store.get_mut(id).data[ei] = orig - h;
            let mut g = Graph::new();
            let lm = build_loss(store, &mut g)?;
            let fm = g.scalar_value(lm);
            store.get_mut(id).data[ei] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(&id).map(|v| v[ei]).unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            max_rel_err: max_rel,
            checked: indices.len(),
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::zeros(vec![1]), true);
        let mut adam = AdamState::new(&store, 0.001);
        adam.step(&mut store, &[(id, vec![0.5])]).unwrap();
        let got = store.get(id).data[0];
        assert!((got + 0.001).abs() <= 1e-8, "got {got}");
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![2], vec![1.5, -2.5]).unwrap(), true);
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store, &[(id, vec![0.0, 0.0])]).unwrap();
        assert_eq!(store.get(id).data, vec![1.5, -2.5]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(theta) = (theta - 3)^2 from theta = 0, lr = 0.1
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::zeros(vec![1]), true);
        let mut adam = AdamState::new(&store, 0.1);
        let mut dists = Vec::with_capacity(100);
        for _ in 0..100 {
            let theta = store.get(id).data[0];
            let g = 2.0 * (theta - 3.0);
            adam.step(&mut store, &[(id, vec![g])]).unwrap();
            dists.push((store.get(id).data[0] - 3.0).abs());
        }
        // monotone approach until convergence, then bounded oscillation
        let converged_at = dists
            .iter()
            .position(|&d| d < 0.05)
            .expect("never reached the optimum");
        for w in dists[..converged_at].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "approach not monotone: {w:?}");
        }
        assert!(dists[converged_at..].iter().all(|&d| d < 0.25));
        assert!(*dists.last().unwrap() < 0.05);
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::zeros(vec![2]), true);
        let mut adam = AdamState::new(&store, 0.1);
        assert!(adam.step(&mut store, &[(id, vec![0.0; 3])]).is_err());
    }

    #[test]
    fn gradcheck_quadratic_loss_is_exact_to_h_squared() {
        let mut store = ParamStore::new();
        store.add(
            "theta",
            Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap(),
            true,
        );
        let report = check_gradients(
            &mut store,
            |s, g| {
                let t = g.param(s, s.lookup("theta").unwrap());
                let sq = g.mul(t, t)?;
                Ok(g.sum_all(sq))
            },
            1e-5,
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn gradcheck_zero_gradient_at_minimum() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::zeros(vec![4]), true);
        let report = check_gradients(
            &mut store,
            |s, g| {
                let t = g.param(s, s.lookup("theta").unwrap());
                let sq = g.mul(t, t)?;
                Ok(g.sum_all(sq))
            },
            1e-5,
            1e-4,
            16,
            0,
        )
        .unwrap();
        assert!(report.passed());
    }
}
