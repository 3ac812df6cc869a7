//! Analytic gradients of every graph op against central finite differences.

use popt::engine::{Graph, Params, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Builds a scalar loss from the registered parameters; `weights` gives every
/// op output a random upstream gradient.
type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = g.value(x).numel();
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = g.mul_const(x, w);
    g.sum(y)
}

fn loss_value(params: &Params<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(id, _, t)| g.param(id, t)).collect();
    let l = build(&mut g, &vars);
    g.value(l).item()
}

fn max_rel_error(params: &Params<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(id, _, t)| g.param(id, t)).collect();
    let l = build(&mut g, &vars);
    let grads = g.backward(l).unwrap();
    let mut worst = 0.0f64;
    for id in 0..params.len() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        for i in 0..params.get(id).numel() {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[i] -= H;
            let numeric = (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * H);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn check_op(name: &str, shapes: &[&[usize]], build: &Build) {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (i, s) in shapes.iter().enumerate() {
            params.add(format!("p{i}"), random_tensor(&mut rng, s));
        }
        let err = max_rel_error(&params, build);
        assert!(err < TOL, "{name}: seed {seed} max relative error {err:e}");
    }
}

#[test]
fn matmul_and_bias() {
    check_op("matmul", &[&[3, 4], &[4, 5]], &|g, v| {
        let y = g.matmul(v[0], v[1]);
        project(g, y, 1)
    });
    check_op("add_bias", &[&[3, 4], &[4]], &|g, v| {
        let y = g.add_bias(v[0], v[1]);
        project(g, y, 2)
    });
    check_op("linear", &[&[2, 3], &[3, 3], &[3]], &|g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        project(g, y, 3)
    });
}

#[test]
fn elementwise_ops() {
    check_op("add", &[&[2, 3], &[2, 3]], &|g, v| {
        let y = g.add(v[0], v[1]);
        project(g, y, 4)
    });
    check_op("scale", &[&[5]], &|g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 5)
    });
    check_op("gelu", &[&[4, 3]], &|g, v| {
        let s = g.scale(v[0], 3.0);
        let y = g.gelu(s);
        project(g, y, 6)
    });
    check_op("dropout", &[&[4, 6]], &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = g.dropout(v[0], 0.3, &mut rng);
        project(g, y, 7)
    });
    check_op("sum_squares", &[&[3, 2]], &|g, v| g.sum_squares(v[0]));
}

#[test]
fn normalisation_ops() {
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        project(g, y, 8)
    });
    check_op("softmax_rows", &[&[3, 4]], &|g, v| {
        let s = g.scale(v[0], 2.0);
        let y = g.softmax_rows(s);
        project(g, y, 9)
    });
}

#[test]
fn attention_op() {
    let segments = [0..3, 3..4, 4..7];
    check_op("segment_attention", &[&[7, 4], &[7, 4], &[7, 4]], &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = g.segment_attention(v[0], v[1], v[2], 2, &segments, 0.0, &mut rng);
        project(g, y, 10)
    });
    check_op("segment_attention+dropout", &[&[7, 4], &[7, 4], &[7, 4]], &|g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = g.segment_attention(v[0], v[1], v[2], 2, &segments, 0.25, &mut rng);
        project(g, y, 11)
    });
}

#[test]
fn row_ops_and_losses() {
    check_op("concat_rows", &[&[1, 3], &[2, 3]], &|g, v| {
        let y = g.concat_rows(v[0], v[1]);
        project(g, y, 12)
    });
    check_op("gather_rows", &[&[4, 3]], &|g, v| {
        let y = g.gather_rows(v[0], vec![2, 0, 2, 3]);
        project(g, y, 13)
    });
    check_op("bce_with_logits", &[&[5]], &|g, v| {
        let s = g.scale(v[0], 4.0);
        g.bce_with_logits(s, vec![1.0, 0.0, 0.0, 1.0, 1.0], vec![0.2, 0.2, 0.1, 0.3, 0.2])
    });
    check_op("l1_rows", &[&[3, 4]], &|g, v| {
        // targets offset by 5 keep every difference away from the kink at 0
        let target = Tensor::full(&[2, 4], 5.0);
        g.l1_rows(v[0], vec![0, 2], target)
    });
}

#[test]
fn sum_of_half_squares_has_gradient_w() {
    let w = Tensor::<f64>::from_f64(&[3], &[0.5, -2.0, 3.0]);
    let mut g = Graph::new();
    let v = g.param(0, &w);
    let s = g.sum_squares(v);
    let l = g.scale(s, 0.5);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(0).unwrap(), &w);
}

#[test]
fn constant_branch_has_zero_gradient() {
    let w = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]);
    let mut g = Graph::new();
    let p = g.param(0, &w);
    let c = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]));
    let zero = g.scale(p, 0.0);
    let y = g.add(c, zero);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(0).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn backward_rejects_non_scalar_and_reports_nan_origin() {
    let w = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]);
    let mut g = Graph::new();
    let p = g.param(0, &w);
    assert!(matches!(
        g.backward(p),
        Err(popt::engine::EngineError::NonScalarLoss { .. })
    ));

    let mut g = Graph::new();
    let p = g.param(0, &w);
    let y = g.mul_const(p, vec![f64::NAN, 1.0]);
    let l = g.sum(y);
    match g.backward(l) {
        Err(popt::engine::EngineError::NonFiniteGradient { op, .. }) => assert_eq!(op, "mul_const"),
        other => panic!("expected NaN diagnostic, got {other:?}"),
    }
}
