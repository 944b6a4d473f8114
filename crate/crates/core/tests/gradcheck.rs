//! Every autograd op against central finite differences in f64.

use acros_core::numerics::{gradients, Graph, RngState, Tensor, Var};
use acros_core::Result;

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = RngState::new(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    g.weighted_sum(out, &w)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build<'_>) {
    let forward = |vals: &[Tensor<f64>]| -> (Graph<f64>, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
        let out = build(&mut g, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
        let loss = project(&mut g, out, 99).unwrap();
        (g, loss, vars)
    };
    let (g, loss, vars) = forward(&inputs);
    let analytic = gradients(&g, loss, &vars).unwrap();
    let h = 1e-5;
    for (pi, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut vals = inputs.clone();
                vals[pi].data_mut()[i] += delta;
                let (g, loss, _) = forward(&vals);
                g.value(loss).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic[pi].data()[i];
            let err = (an - fd).abs() / (an.abs().max(fd.abs()).max(1e-3));
            assert!(err <= 1e-3 || (an - fd).abs() < 1e-7, "{name}: input {pi} coord {i}: analytic {an} vs fd {fd}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut RngState::new(seed))
}

#[test]
fn matmul_both_layouts() {
    check("matmul", vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], &|g, v| g.matmul(v[0], v[1], false));
    check("matmul_bt", vec![rand(&[3, 4], 3), rand(&[5, 4], 4)], &|g, v| g.matmul(v[0], v[1], true));
}

#[test]
fn elementwise_ops() {
    check("add_bias", vec![rand(&[3, 4], 5), rand(&[4], 6)], &|g, v| g.add_bias(v[0], v[1]));
    check("add", vec![rand(&[2, 3], 7), rand(&[2, 3], 8)], &|g, v| g.add(v[0], v[1]));
    check("scale", vec![rand(&[2, 3], 9), rand(&[1], 10)], &|g, v| g.scale(v[0], v[1]));
    check("mul_const", vec![rand(&[2, 3], 11)], &|g, v| Ok(g.mul_const(v[0], -1.7)));
    check("gelu", vec![rand(&[3, 3], 12)], &|g, v| Ok(g.gelu(v[0])));
    check("softmax", vec![rand(&[3, 5], 13)], &|g, v| g.softmax(v[0]));
}

#[test]
fn layer_norm_and_gather() {
    check("layer_norm", vec![rand(&[3, 6], 14), rand(&[6], 15), rand(&[6], 16)], &|g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    check("gather", vec![rand(&[5, 3], 17)], &|g, v| g.gather(v[0], &[4, 0, 4, 2]));
}

#[test]
fn attention_ops() {
    // batch 2, seq 3, d 4, heads 2
    check("causal_attention", vec![rand(&[6, 12], 18)], &|g, v| g.causal_attention(v[0], 2, 3, 2));
    check("sense_context", vec![rand(&[6, 8], 19)], &|g, v| g.sense_context(v[0], 2, 3, 2));
    check("slot_contrib", vec![rand(&[6, 8], 20), rand(&[6, 6], 21)], &|g, v| {
        let c = g.sense_context(v[0], 2, 3, 2)?;
        g.slot_contrib(c, v[1], 2, 3, 2)
    });
    check("sum_slots", vec![rand(&[4, 6], 22)], &|g, v| g.sum_slots(v[0], 3));
    check("convex_mix", vec![rand(&[4, 3], 23), rand(&[4, 6], 24)], &|g, v| {
        let a = g.softmax(v[0])?;
        g.convex_mix(a, v[1], 3)
    });
    check("slot_pool", vec![rand(&[3, 8], 25)], &|g, v| g.slot_pool(v[0], 4, 0.7));
    check("masked_mean", vec![rand(&[5, 3], 26)], &|g, v| g.masked_mean(v[0], vec![vec![0, 1], vec![2, 3, 4], vec![4]]));
}

#[test]
fn loss_ops() {
    let mask = [true, false, true, true];
    check("cross_entropy", vec![rand(&[4, 6], 27)], &|g, v| g.cross_entropy(v[0], &[1, 2, 0, 5], &mask, 0.0));
    check("cross_entropy_smoothed", vec![rand(&[4, 6], 28)], &|g, v| {
        g.cross_entropy(v[0], &[1, 2, 0, 5], &mask, 0.05)
    });
    let teacher = rand(&[4, 6], 29);
    check("kl_distill", vec![rand(&[4, 6], 30)], &|g, v| g.kl_distill(&teacher, v[0], 2.0, &mask));
    check("diversity", vec![rand(&[4, 9], 31)], &|g, v| g.diversity(v[0], 3, &mask));
    check("info_nce", vec![rand(&[4, 5], 32), rand(&[4, 5], 33)], &|g, v| g.info_nce(v[0], v[1], 0.1));
}

#[test]
fn quadratic_and_constant_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap().with_requires_grad(true));
    let loss = g.matmul(p, p, true).unwrap();
    let grads = gradients(&g, loss, &[p]).unwrap();
    assert_eq!(grads[0].data(), &[2.0, 4.0]);

    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let c = g.constant(Tensor::scalar(3.0));
    let grads = gradients(&g, c, &[p]).unwrap();
    assert_eq!(grads[0].data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_and_foreign_param_rejected() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    let y = g.mul_const(p, 2.0);
    assert!(gradients(&g, y, &[p]).is_err());
    let c = g.constant(Tensor::vector(vec![1.0]));
    let s = g.constant(Tensor::scalar(0.0));
    assert!(gradients(&g, s, &[c]).is_err());
}
