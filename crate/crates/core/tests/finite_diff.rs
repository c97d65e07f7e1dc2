//! Central finite-difference checks of the autodiff engine, per op and
//! for the full model loss.

use seven_core::graph::{Graph, NodeId};
use seven_core::model::{forward_loss, init_model, Batch, TransformerConfig};
use seven_core::rng::SeedStream;
use seven_core::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

/// Autodiff vs central differences for a scalar loss built from `n`
/// parameter tensors.
fn check_grads<F>(shapes: &[Vec<usize>], seed: u64, build: F, label: &str)
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut rng = SeedStream::new(seed);
    let data: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.uniform_sym(1.0)).collect()
        })
        .collect();

    let eval = |data: &[Vec<f64>]| -> (f64, Option<(Graph, Vec<NodeId>)>) {
        let mut g = Graph::new();
        let params: Vec<NodeId> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| g.param(Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        let loss = build(&mut g, &params);
        let v = g.value(loss).data()[0];
        g.backward(loss).unwrap();
        (v, Some((g, params)))
    };

    let (_, built) = eval(&data);
    let (graph, params) = built.unwrap();

    for (pi, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let ad = graph.grad(params[pi]).expect("param reached by backward");
        for i in 0..n {
            let mut plus = data.clone();
            plus[pi][i] += FD_STEP;
            let mut minus = data.clone();
            minus[pi][i] -= FD_STEP;
            let (lp, _) = eval(&plus);
            let (lm, _) = eval(&minus);
            let fd = (lp - lm) / (2.0 * FD_STEP);
            assert!(
                rel_err(ad[i], fd) < TOL,
                "{label}: param {pi} element {i}: autodiff {} vs fd {}",
                ad[i],
                fd
            );
        }
    }
}

#[test]
fn fd_matmul() {
    check_grads(
        &[vec![3, 4], vec![4, 2]],
        1,
        |g, p| {
            let c = g.matmul(p[0], p[1]).unwrap();
            let sq = g.mul(c, c).unwrap();
            g.sum_all(sq).unwrap()
        },
        "matmul",
    );
}

#[test]
fn fd_add_same_shape_and_bias() {
    check_grads(
        &[vec![3, 4], vec![3, 4]],
        2,
        |g, p| {
            let s = g.add(p[0], p[1]).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.sum_all(sq).unwrap()
        },
        "add",
    );
    check_grads(
        &[vec![3, 4], vec![4]],
        3,
        |g, p| {
            let s = g.add(p[0], p[1]).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.sum_all(sq).unwrap()
        },
        "bias add",
    );
}

#[test]
fn fd_mul() {
    check_grads(
        &[vec![2, 5], vec![2, 5]],
        4,
        |g, p| {
            let m = g.mul(p[0], p[1]).unwrap();
            let mm = g.mul(m, m).unwrap();
            g.sum_all(mm).unwrap()
        },
        "mul",
    );
}

#[test]
fn fd_softmax_rows() {
    check_grads(
        &[vec![3, 5]],
        5,
        |g, p| {
            let s = g.softmax_rows(p[0]).unwrap();
            // weight the entries so the upstream gradient is not uniform
            let w = g.constant(Tensor::new(
                vec![3, 5],
                (0..15).map(|i| (i as f64 * 0.37).sin() + 1.5).collect(),
            ).unwrap());
            let ws = g.mul(s, w).unwrap();
            g.sum_all(ws).unwrap()
        },
        "softmax_rows",
    );
}

#[test]
fn fd_gelu() {
    check_grads(
        &[vec![2, 6]],
        6,
        |g, p| {
            let a = g.gelu(p[0]).unwrap();
            let sq = g.mul(a, a).unwrap();
            g.sum_all(sq).unwrap()
        },
        "gelu",
    );
}

#[test]
fn fd_layer_norm() {
    check_grads(
        &[vec![3, 6], vec![6], vec![6]],
        7,
        |g, p| {
            let ln = g.layer_norm(p[0], p[1], p[2], 1e-5).unwrap();
            let w = g.constant(Tensor::new(
                vec![3, 6],
                (0..18).map(|i| (i as f64 * 0.61).cos() + 1.2).collect(),
            ).unwrap());
            let wl = g.mul(ln, w).unwrap();
            g.sum_all(wl).unwrap()
        },
        "layer_norm",
    );
}

#[test]
fn fd_cross_entropy() {
    check_grads(
        &[vec![4, 3]],
        8,
        |g, p| g.cross_entropy(p[0], &[0, 2, 1, 2]).unwrap(),
        "cross_entropy",
    );
}

#[test]
fn fd_reshape_transpose_concat() {
    check_grads(
        &[vec![2, 6]],
        9,
        |g, p| {
            let r = g.reshape(p[0], vec![3, 4]).unwrap();
            let t = g.transpose(r).unwrap();
            let sq = g.mul(t, t).unwrap();
            g.sum_all(sq).unwrap()
        },
        "reshape+transpose",
    );
    check_grads(
        &[vec![3, 2], vec![3, 4]],
        10,
        |g, p| {
            let c = g.concat(&[p[0], p[1]]).unwrap();
            let sq = g.mul(c, c).unwrap();
            g.sum_all(sq).unwrap()
        },
        "concat",
    );
}

/// The acceptance-sized check: full transformer loss on a 1-layer,
/// 2-head, d = 16, n = 8 model, every parameter element.
#[test]
fn fd_full_transformer_loss() {
    let cfg = TransformerConfig {
        layers: 1,
        d_model: 16,
        heads: 2,
        ffn_hidden: 32,
        seq_len: 8,
        vocab: 4,
        classes: 3,
    };
    let store = init_model(&cfg, 12).unwrap();
    let mut rng = SeedStream::new(13);
    let batch = Batch {
        inputs: (0..2)
            .map(|_| (0..cfg.seq_len).map(|_| rng.index(cfg.vocab)).collect())
            .collect(),
        labels: (0..2).map(|_| rng.index(cfg.classes)).collect(),
    };

    let mut fp = forward_loss(&store, &cfg, &batch).unwrap();
    fp.backward().unwrap();
    let ad = fp.flat_grad(&store);

    let base = store.flat_all();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = store.clone();
        let mut vals = base.clone();
        vals[i] += FD_STEP;
        plus.set_flat_all(&vals).unwrap();
        let lp = forward_loss(&plus, &cfg, &batch).unwrap().loss_value();

        let mut minus = store.clone();
        vals[i] = base[i] - FD_STEP;
        minus.set_flat_all(&vals).unwrap();
        let lm = forward_loss(&minus, &cfg, &batch).unwrap().loss_value();

        let fd = (lp - lm) / (2.0 * FD_STEP);
        let e = rel_err(ad[i], fd);
        worst = worst.max(e);
        assert!(
            e < TOL,
            "full model: flat coordinate {i}: autodiff {} vs fd {} (rel {e})",
            ad[i],
            fd
        );
    }
    println!("full-model fd check: {} coordinates, worst rel err {worst:.3e}", base.len());
}
