//! Minimal differentiable-programming toolkit: tensors, an eager autodiff
//! tape with the 3D convolution and attention primitives the models need,
//! parameter storage, Adam and checkpoints.

mod checkpoint;
mod conv;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use params::{init_uniform, Adam, Bound, Conv3d, Linear, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::seq::index::sample;
use rand::Rng;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `(parameter, element, analytic, numeric)` for each probed scalar.
    pub probes: Vec<(String, usize, f64, f64)>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-7);
    (a - b).abs() / denom
}

/// Probes `count` scalars drawn uniformly over all parameters. `loss`
/// must be deterministic and return `(value, per-parameter gradients)`
/// when asked for gradients.
pub fn gradcheck<R: Rng + ?Sized>(
    store: &mut ParamStore,
    count: usize,
    step: f64,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore, bool) -> (f64, Option<Vec<Vec<f64>>>),
) -> GradCheck {
    let (_, grads) = loss(store, true);
    let grads = grads.expect("loss returned no gradients");
    let total = store.num_scalars();
    let offsets: Vec<(ParamId, usize)> = {
        let mut v = Vec::with_capacity(total);
        for (id, _, t) in store.iter() {
            v.extend((0..t.numel()).map(|i| (id, i)));
        }
        v
    };
    let mut probes = Vec::new();
    let mut max_rel: f64 = 0.0;
    for k in sample(rng, total, count.min(total)).into_iter() {
        let (id, i) = offsets[k];
        let orig = store.get(id).data[i];
        store.get_mut(id).data[i] = orig + step;
        let (up, _) = loss(store, false);
        store.get_mut(id).data[i] = orig - step;
        let (down, _) = loss(store, false);
        store.get_mut(id).data[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[id.0][i];
        max_rel = max_rel.max(relative_error(analytic, numeric));
        probes.push((store.name(id).to_owned(), i, analytic, numeric));
    }
    GradCheck {
        probes,
        max_rel_error: max_rel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exercises every tape operation in one scalar loss.
    fn kitchen_sink(store: &ParamStore, want_grad: bool) -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, want_grad);
        let v = |name: &str| p.var(store.find(name).unwrap());
        let x = g.constant(Tensor::new(vec![2, 4, 4, 4], (0..128).map(|i| ((i * 37 % 17) as f64) / 17.0 - 0.5).collect()));
        let h = g.conv3d(x, v("c1.w"), v("c1.b"), 1, 1);
        let h = g.silu(h);
        let d = g.conv3d(h, v("c2.w"), v("c2.b"), 2, 1);
        let u = g.upsample(d, 2);
        let cat = g.concat(&[u, h]);
        let h = g.conv3d(cat, v("c3.w"), v("c3.b"), 1, 1);
        let tb = g.matmul(v("t"), v("lin"));
        let h = g.add_channel(h, tb);
        let flat = g.reshape(h, &[3, 64]);
        let tokens = g.transpose(flat);
        let q = g.matmul(tokens, v("wq"));
        let ctx = g.constant(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7]));
        let k = g.matmul(ctx, v("wk"));
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let mask = g.constant(Tensor::new(vec![64], (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect()));
        let bias = g.outer(mask, v("mb"));
        let logits = g.add(logits, bias);
        let att = g.softmax_rows(logits);
        let vv = g.matmul(ctx, v("wv"));
        let o = g.matmul(att, vv);
        let o = g.scale(o, 0.7);
        let sq = g.mul(o, o);
        let pooled = g.weighted_pool(h, &(0..64).map(|i| (i % 5) as f64).collect::<Vec<_>>());
        let unit = g.l2_normalize(pooled);
        let rows = g.gather_rows(v("cb"), &[1, 0, 1]);
        let s1 = g.mean(sq);
        let s2 = g.sum(unit);
        let s3 = g.sum(rows);
        let capped = g.clamp_max(s3, 100.0);
        let total = g.add(s1, s2);
        let total = g.sub(total, capped);
        let val = g.value(total).item();
        if !want_grad {
            return (val, None);
        }
        let grads = g.backward(total);
        (val, Some(p.grads(store, &grads)))
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        for (name, shape) in [
            ("c1.w", vec![3, 2, 3, 3, 3]),
            ("c1.b", vec![3]),
            ("c2.w", vec![3, 3, 3, 3, 3]),
            ("c2.b", vec![3]),
            ("c3.w", vec![3, 6, 3, 3, 3]),
            ("c3.b", vec![3]),
            ("t", vec![1, 4]),
            ("lin", vec![4, 3]),
            ("wq", vec![3, 5]),
            ("wk", vec![3, 5]),
            ("wv", vec![3, 5]),
            ("mb", vec![2]),
            ("cb", vec![2, 3]),
        ] {
            let fan: usize = shape[1..].iter().product::<usize>().max(1);
            store.add(name, init_uniform(&mut rng, &shape, fan, 1.0));
        }
        let check = gradcheck(&mut store, 200, 1e-5, &mut rng, kitchen_sink);
        assert!(check.max_rel_error < 1e-5, "{:?}", check.probes.iter().max_by(|a, b| relative_error(a.2, a.3).total_cmp(&relative_error(b.2, b.3))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = &store.get(id).data;
            let grads = vec![vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]];
            opt.update(&mut store, &grads);
        }
        let x = &store.get(id).data;
        assert!((x[0] - 1.0).abs() < 1e-2 && (x[1] + 0.5).abs() < 1e-2, "{x:?}");
    }
}
