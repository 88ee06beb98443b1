//! Central finite-difference oracles for the autodiff kernel, run in f64.
//! Step 1e-3, max relative error 1e-4 against max(|fd|, |analytic|, 1).

use rand::Rng;
use sstt_core::model::{init_params, Model, ModelConfig};
use sstt_core::rng::derive_rng;
use sstt_core::tensor::Tensor;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

/// Check every coordinate of every listed parameter against the
/// central-difference quotient of `loss_fn`.
fn grad_check(params: &[(&str, Tensor<f64>)], loss_fn: &dyn Fn() -> Tensor<f64>) {
    for (_, p) in params {
        p.zero_grad();
    }
    loss_fn().backward();
    for (name, p) in params {
        let analytic = p.grad();
        let base = p.data();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += STEP;
            p.set_data(plus);
            let f_plus = loss_fn().item();
            let mut minus = base.clone();
            minus[i] -= STEP;
            p.set_data(minus);
            let f_minus = loss_fn().item();
            p.set_data(base.clone());
            let fd = (f_plus - f_minus) / (2.0 * STEP);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1.0);
            assert!(
                rel <= TOL,
                "{name}[{i}]: analytic {} vs finite-diff {fd} (rel {rel:.3e})",
                analytic[i]
            );
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = derive_rng(seed, "gradcheck", &[]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::param(shape, data)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let a = randn(&[2, 3], 1);
    let b = randn(&[2, 3], 2);
    let bias = randn(&[3], 3);
    grad_check(&[("a", a.clone()), ("b", b.clone()), ("bias", bias.clone())], &|| {
        a.mul(&b).add(&bias).sub(&a.scale(0.5)).sum_all()
    });
}

#[test]
fn matmul_both_orientations() {
    let a = randn(&[3, 4], 4);
    let b = randn(&[4, 2], 5);
    grad_check(&[("a", a.clone()), ("b", b.clone())], &|| a.matmul(&b).sum_all());
    let c = randn(&[3, 4], 6);
    let d = randn(&[5, 4], 7);
    // weight the output so gradients are not uniform
    let w = randn(&[3, 5], 8);
    grad_check(&[("c", c.clone()), ("d", d.clone())], &|| c.matmul_nt(&d).mul(&w).sum_all());
}

#[test]
fn batched_matmul() {
    let a = randn(&[2, 3, 4], 9);
    let b = randn(&[2, 4, 2], 10);
    let w = randn(&[2, 3, 2], 11);
    grad_check(&[("a", a.clone()), ("b", b.clone())], &|| a.matmul(&b).mul(&w).sum_all());
}

#[test]
fn softmax_layer_norm_gelu() {
    let x = randn(&[2, 5], 12);
    let w = randn(&[2, 5], 13);
    grad_check(&[("x", x.clone())], &|| x.softmax(1).mul(&w).sum_all());

    let gamma = randn(&[5], 14);
    let beta = randn(&[5], 15);
    grad_check(
        &[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
        &|| x.layer_norm(&gamma, &beta, 1e-5).mul(&w).sum_all(),
    );

    grad_check(&[("x", x.clone())], &|| x.gelu().mul(&w).sum_all());
}

#[test]
fn toeplitz_and_cross_entropy() {
    let offsets = randn(&[2, 5], 16);
    let w = randn(&[2, 4, 4], 17);
    grad_check(&[("offsets", offsets.clone())], &|| offsets.toeplitz(4).mul(&w).sum_all());

    let logits = randn(&[3, 4], 18);
    let labels = [2usize, 0, 3];
    grad_check(&[("logits", logits.clone())], &|| logits.cross_entropy(&labels, 0.0));
    grad_check(&[("logits", logits.clone())], &|| logits.cross_entropy(&labels, 0.1));
}

#[test]
fn reshape_permute_narrow_concat_mean() {
    let x = randn(&[2, 3, 4], 19);
    let w = randn(&[4, 3, 2], 20);
    grad_check(&[("x", x.clone())], &|| x.permute(&[2, 1, 0]).mul(&w).sum_all());
    let w2 = randn(&[2, 4], 21);
    grad_check(&[("x", x.clone())], &|| x.mean_axis(1).mul(&w2).sum_all());
    let w3 = randn(&[2, 2, 4], 22);
    let y = randn(&[2, 1, 4], 23);
    grad_check(&[("x", x.clone()), ("y", y.clone())], &|| {
        x.narrow(1, 1, 2).mul(&w3).sum_all().add(&x.narrow(1, 0, 1).concat(&y, 1).sum_all())
    });
}

#[test]
fn end_to_end_tiny_model() {
    let cfg = ModelConfig {
        t_len: 3,
        joints: 4,
        in_channels: 2,
        c_emb: 8,
        heads: 2,
        blocks: 2,
        ffn_ratio: 2,
        rpe_clip: 2,
        scale_attention: true,
        dropout: 0.0,
        num_classes: 3,
    };
    let model = Model::<f64> { cfg: cfg.clone(), params: init_params(&cfg, 42) };
    let frames = {
        let mut rng = derive_rng(43, "gradcheck-frames", &[]);
        let data: Vec<f64> = (0..2 * 3 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[2, 3, 4, 2], data)
    };
    let labels = [1usize, 2];
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .named()
        .into_iter()
        .map(|p| (p.name, p.tensor))
        .collect();
    let refs: Vec<(&str, Tensor<f64>)> =
        params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    // the class token must receive gradient: it feeds the readout directly
    let cls = refs.iter().find(|(n, _)| *n == "class_token").unwrap().1.clone();
    grad_check(&refs, &|| model.forward(&frames).cross_entropy(&labels, 0.0));
    model.params.named().iter().for_each(|p| p.tensor.zero_grad());
    model.forward(&frames).cross_entropy(&labels, 0.0).backward();
    assert!(cls.grad().iter().any(|g| g.abs() > 1e-8), "class token got no gradient");
}
