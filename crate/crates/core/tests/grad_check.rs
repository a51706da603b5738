//! Central finite-difference verification of every differentiable op and
//! of the full training objective on a small decomposed model.

use fedseit_core::model::{ForeignAdapter, Mode};
use fedseit_core::rng::rng_from;
use fedseit_core::{
    ClientState, Example, FilterBanks, Graph, ModelConfig, NodeId, Tensor, TrainConfig,
};
use rand::Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let abs = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    assert!(
        abs <= ABS_TOL || abs / denom < REL_TOL,
        "{what}: analytic {analytic} vs central difference {numeric} (abs err {abs})"
    );
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product::<usize>().max(1);
    let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor with entries bounded away from zero, for ops with a kink
/// at the origin (relu, l1).
fn random_tensor_off_origin(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let t = random_tensor(shape, rng);
    Tensor::new(
        t.shape().to_vec(),
        t.data()
            .iter()
            .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect(),
    )
    .unwrap()
}

/// Checks the analytic gradient of a scalar-valued graph against central
/// differences, entry by entry for every input tensor.
fn check_grads(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids);
    let grads = g.backward(root).unwrap();

    let eval = |which: usize, entry: usize, delta: f64| {
        let mut shifted: Vec<Tensor> = inputs.to_vec();
        shifted[which].data_mut()[entry] += delta;
        let mut g2 = Graph::new();
        let ids2: Vec<NodeId> = shifted.into_iter().map(|t| g2.constant(t)).collect();
        let r = build(&mut g2, &ids2);
        g2.value(r).item()
    };

    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(&g, ids[which]);
        for entry in 0..t.len() {
            let numeric = (eval(which, entry, H) - eval(which, entry, -H)) / (2.0 * H);
            assert_close(
                analytic.data()[entry],
                numeric,
                &format!("{name}, input {which}, entry {entry}"),
            );
        }
    }
}

#[test]
fn elementwise_ops_match_central_differences() {
    let mut rng = rng_from(101, &[1]);
    let a = random_tensor(&[2, 3], &mut rng);
    let b = random_tensor(&[2, 3], &mut rng);

    check_grads("add", &[a.clone(), b.clone()], |g, ids| {
        let s = g.add(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });
    check_grads("sub", &[a.clone(), b.clone()], |g, ids| {
        let s = g.sub(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });
    check_grads("mul", &[a.clone(), b.clone()], |g, ids| {
        let s = g.mul(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });
    check_grads("scale_const", &[a.clone()], |g, ids| {
        let s = g.scale_const(ids[0], 1.7);
        g.sum_squares(s)
    });
    check_grads("sigmoid", &[a.clone()], |g, ids| {
        let s = g.sigmoid(ids[0]);
        g.sum_squares(s)
    });
    check_grads("sum_squares", &[a], |g, ids| g.sum_squares(ids[0]));
}

#[test]
fn scaling_and_broadcast_ops_match_central_differences() {
    let mut rng = rng_from(101, &[2]);
    let scalar = Tensor::scalar(rng.gen_range(-1.0..1.0));
    let t = random_tensor(&[3, 2], &mut rng);
    check_grads("scale_by_scalar", &[scalar, t], |g, ids| {
        let s = g.scale_by_scalar(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });

    let t3 = random_tensor(&[2, 3, 4], &mut rng);
    let last = random_tensor(&[4], &mut rng);
    check_grads("broadcast_mul_last", &[t3, last], |g, ids| {
        let s = g.broadcast_mul_last(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });
}

#[test]
fn kinked_ops_match_central_differences_off_origin() {
    let mut rng = rng_from(101, &[3]);
    let a = random_tensor_off_origin(&[3, 3], &mut rng);
    check_grads("relu", &[a.clone()], |g, ids| {
        let s = g.relu(ids[0]);
        g.sum_squares(s)
    });
    check_grads("l1", &[a], |g, ids| g.l1(ids[0]));
}

#[test]
fn concat_and_affine_match_central_differences() {
    let mut rng = rng_from(101, &[4]);
    let a = random_tensor(&[3], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    check_grads("concat", &[a, b], |g, ids| {
        let s = g.concat(&[ids[0], ids[1]]).unwrap();
        g.sum_squares(s)
    });

    let v = random_tensor(&[4], &mut rng);
    let w = random_tensor(&[4, 3], &mut rng);
    check_grads("affine", &[v, w], |g, ids| {
        let s = g.affine(ids[0], ids[1]).unwrap();
        g.sum_squares(s)
    });
}

#[test]
fn conv_maxpool_matches_central_differences() {
    let mut rng = rng_from(101, &[5]);
    for _ in 0..5 {
        let input = random_tensor(&[6, 3], &mut rng);
        let filters = random_tensor(&[2, 3, 4], &mut rng);
        check_grads("conv1d_maxpool", &[input, filters], |g, ids| {
            let s = g.conv1d_maxpool(ids[0], ids[1]).unwrap();
            g.sum_squares(s)
        });
    }
}

#[test]
fn softmax_cross_entropy_matches_central_differences_tightly() {
    let mut rng = rng_from(101, &[6]);
    for label in 0..4 {
        let logits = random_tensor(&[4], &mut rng);
        let mut g = Graph::new();
        let id = g.param(logits.clone());
        let loss = g.softmax_cross_entropy(id, label).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(id).unwrap();

        for entry in 0..4 {
            let eval = |delta: f64| {
                let mut shifted = logits.clone();
                shifted.data_mut()[entry] += delta;
                let mut g2 = Graph::new();
                let id2 = g2.constant(shifted);
                let l = g2.softmax_cross_entropy(id2, label).unwrap();
                g2.value(l).item()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let abs = (analytic.data()[entry] - numeric).abs();
            let denom = analytic.data()[entry].abs().max(numeric.abs());
            assert!(
                abs <= 1e-9 || abs / denom < 1e-6,
                "softmax gradient entry {entry}: {} vs {numeric}",
                analytic.data()[entry]
            );
        }
    }
}

/// Builds a two-task client (one completed past task, two foreign
/// adapters on the current task) so that all three objective terms are
/// active, then verifies every parameter gradient against central
/// differences of the scalar objective.
#[test]
fn full_objective_gradients_match_central_differences() {
    let model_cfg = ModelConfig {
        embed_dim: 8,
        filter_sizes: vec![2, 3],
        filters_per_size: 4,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        lambda1: 1e-3,
        lambda2: 1.0,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = rng_from(2024, &[9]);
    let embeddings = random_tensor(&[12, 8], &mut rng);
    let docs = vec![
        Example {
            tokens: vec![0, 3, 7, 2, 5],
            label: 0,
        },
        Example {
            tokens: vec![9, 1, 4],
            label: 1,
        },
        Example {
            tokens: vec![6, 6, 10, 11],
            label: 2,
        },
    ];

    let mut client = ClientState::new(0, &model_cfg, 77);
    client.start_task(&model_cfg, Mode::FedSeit, 3, Vec::new(), 77);
    client.snapshot_boundaries();
    // drift the base so the quadratic penalty is non-zero
    for bank in &mut client.base.0 {
        for v in bank.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let foreign = vec![
        ForeignAdapter {
            source_client: 1,
            source_task: 0,
            filters: FilterBanks::random(&model_cfg, &mut rng),
        },
        ForeignAdapter {
            source_client: 2,
            source_task: 0,
            filters: FilterBanks::random(&model_cfg, &mut rng),
        },
    ];
    client.start_task(&model_cfg, Mode::FedSeit, 3, foreign, 77);

    let analytic = client
        .objective_gradients(&docs, &model_cfg, &cfg, &embeddings)
        .unwrap();
    let value_at = |c: &ClientState| c.objective(&docs, &model_cfg, &cfg, &embeddings).unwrap();

    let check_tensor = |name: &str, grad: &Tensor, write: &dyn Fn(&mut ClientState, usize, f64)| {
        for entry in 0..grad.len() {
            let mut plus = client.clone();
            write(&mut plus, entry, H);
            let mut minus = client.clone();
            write(&mut minus, entry, -H);
            let numeric = (value_at(&plus) - value_at(&minus)) / (2.0 * H);
            assert_close(
                grad.data()[entry],
                numeric,
                &format!("{name}, entry {entry}"),
            );
        }
    };

    let n_banks = model_cfg.filter_sizes.len();
    for bank in 0..n_banks {
        check_tensor(
            &format!("base[{bank}]"),
            &analytic.base[bank],
            &|c, i, d| c.base.0[bank].data_mut()[i] += d,
        );
        check_tensor(
            &format!("adaptive[{bank}]"),
            &analytic.adaptive[bank],
            &|c, i, d| c.tasks[1].params.adaptive.0[bank].data_mut()[i] += d,
        );
        check_tensor(
            &format!("mask_logits[{bank}]"),
            &analytic.mask_logits[bank],
            &|c, i, d| c.tasks[1].params.mask_logits[bank].data_mut()[i] += d,
        );
        check_tensor(
            &format!("past adaptive[{bank}]"),
            &analytic.past_adaptive[0][bank],
            &|c, i, d| c.tasks[0].params.adaptive.0[bank].data_mut()[i] += d,
        );
    }
    for (k, &grad) in analytic.alphas.iter().enumerate() {
        check_tensor(
            &format!("alpha[{k}]"),
            &Tensor::scalar(grad),
            &|c, _, d| c.tasks[1].params.alphas[k] += d,
        );
    }
    check_tensor("w_f", analytic.w_f.as_ref().unwrap(), &|c, i, d| {
        c.tasks[1].params.w_f.as_mut().unwrap().data_mut()[i] += d;
    });
    check_tensor("w_c", analytic.w_c.as_ref().unwrap(), &|c, i, d| {
        c.tasks[1].params.w_c.as_mut().unwrap().data_mut()[i] += d;
    });
    check_tensor("head", &analytic.head, &|c, i, d| {
        c.tasks[1].params.head.data_mut()[i] += d;
    });
}
