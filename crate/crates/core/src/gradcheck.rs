//! Finite-difference verification of every layer and estimator.
//!
//! Each check differentiates a scalar `sum(c * output)` with a fixed random
//! projection `c`, so the upstream gradient is `c`.

use rand::Rng as _;

use crate::error::Result;
use crate::graph::Topology;
use crate::models::{GraphContext, ModelConfig, UtilityModel};
use crate::nn::{
    attention, attention_backward, attention_forward, dense_backward, dense_forward, grad_check, layer_norm,
    layer_norm_backward, masked_softmax, relu, relu_backward, GradCheckReport, Mask, Tensor2,
};
use crate::rng;

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole estimators.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn weighted(out: &Tensor2, c: &Tensor2) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn reshape(rows: usize, cols: usize, flat: &[f64]) -> Tensor2 {
    Tensor2::from_vec(rows, cols, flat.to_vec()).expect("sized")
}

fn check(name: &str, f: impl Fn(&[f64]) -> f64, at: &Tensor2, analytic: &Tensor2, tol: f64) -> Result<NamedCheck> {
    Ok(NamedCheck { name: name.into(), report: grad_check(f, at.data(), analytic.data(), tol, None)? })
}

/// Dense, ReLU, masked softmax, attention and layer norm against central
/// differences at [`LAYER_TOLERANCE`].
pub fn layer_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    let mut r = rng::rng_from(seed);
    let mut out = Vec::new();
    let tol = LAYER_TOLERANCE;

    let (x, w, b, c) = (random(4, 3, &mut r), random(3, 5, &mut r), random(1, 5, &mut r), random(4, 5, &mut r));
    let pre = dense_forward(&x, &w, &b)?;
    let (dx, dw, db) = dense_backward(&x, &w, &c)?;
    let dense = |x: &Tensor2, w: &Tensor2, b: &Tensor2| weighted(&dense_forward(x, w, b).unwrap(), &c);
    out.push(check("dense.x", |t| dense(&reshape(4, 3, t), &w, &b), &x, &dx, tol)?);
    out.push(check("dense.w", |t| dense(&x, &reshape(3, 5, t), &b), &w, &dw, tol)?);
    out.push(check("dense.b", |t| dense(&x, &w, &reshape(1, 5, t)), &b, &db, tol)?);
    out.push(check("relu", |t| weighted(&relu(&reshape(4, 5, t)), &c), &pre, &relu_backward(&pre, &c), tol)?);

    let scores = random(3, 4, &mut r);
    let mut mask = Mask::new(3, 4, true);
    mask.set(0, 2, false);
    mask.set(2, 0, false);
    let cs = random(3, 4, &mut r);
    let p = masked_softmax(&scores, &mask);
    let mut dscores = Tensor2::zeros(3, 4);
    for i in 0..3 {
        let inner: f64 = p.row(i).iter().zip(cs.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..4 {
            dscores.set(i, j, p.get(i, j) * (cs.get(i, j) - inner));
        }
    }
    out.push(check("masked_softmax", |t| weighted(&masked_softmax(&reshape(3, 4, t), &mask), &cs), &scores, &dscores, tol)?);

    let (q, k, v) = (random(4, 3, &mut r), random(5, 3, &mut r), random(5, 2, &mut r));
    let ca = random(4, 2, &mut r);
    let mut amask = Mask::new(4, 5, true);
    amask.set(0, 1, false);
    amask.set(1, 4, false);
    for j in 0..5 {
        amask.set(3, j, false);
    }
    let (_, cache) = attention_forward(&q, &k, &v, &amask)?;
    let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &ca)?;
    let att = |q: &Tensor2, k: &Tensor2, v: &Tensor2| weighted(&attention(q, k, v, &amask).unwrap(), &ca);
    out.push(check("attention.q", |t| att(&reshape(4, 3, t), &k, &v), &q, &dq, tol)?);
    out.push(check("attention.k", |t| att(&q, &reshape(5, 3, t), &v), &k, &dk, tol)?);
    out.push(check("attention.v", |t| att(&q, &k, &reshape(5, 2, t)), &v, &dv, tol)?);

    let (x, gamma, beta, cl) = (random(3, 6, &mut r), random(1, 6, &mut r), random(1, 6, &mut r), random(3, 6, &mut r));
    let (_, cache) = layer_norm(&x, &gamma, &beta)?;
    let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &cl);
    let ln = |x: &Tensor2, g: &Tensor2, b: &Tensor2| weighted(&layer_norm(x, g, b).unwrap().0, &cl);
    out.push(check("layer_norm.x", |t| ln(&reshape(3, 6, t), &gamma, &beta), &x, &dx, tol)?);
    out.push(check("layer_norm.gamma", |t| ln(&x, &reshape(1, 6, t), &beta), &gamma, &dg, tol)?);
    out.push(check("layer_norm.beta", |t| ln(&x, &gamma, &reshape(1, 6, t)), &beta, &db, tol)?);
    Ok(out)
}

/// Every estimator variant with all parameters randomized, gradient of the
/// mean utility against central differences at [`END_TO_END_TOLERANCE`].
pub fn estimator_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    let t = ModelConfig::transgnn();
    let configs = [
        ModelConfig::gcn(),
        t,
        t.without_attention_sampling(),
        t.without_positional_encoding(),
        t.without_attention_sampling().without_positional_encoding(),
    ];
    let mut out = Vec::new();
    for (i, config) in configs.into_iter().enumerate() {
        let s = rng::derive(seed, i as u64);
        let mut r = rng::rng_from(s);
        let n = 7;
        let g = Topology::ErdosRenyi { n, p: 0.4 }.generate(s)?;
        let mut model = UtilityModel::init(config, s)?;
        let flat: Vec<f64> = model.params.flatten().iter().map(|x| x + r.random_range(-0.5..0.5)).collect();
        model.params.unflatten(&flat)?;
        let q: Vec<f64> = (0..n).map(|_| r.random_range(0.0..20.0)).collect();
        let rates: Vec<f64> = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
        let x = GraphContext::new(&g, &config).features(&q, &rates, 20.0)?;
        let upstream = vec![1.0 / n as f64; n];
        let (_, grad) = model.scores_and_grad(&g, &x, &upstream)?;
        let loss = |theta: &[f64]| {
            let mut m = model.clone();
            m.params.unflatten(theta).expect("same layout");
            m.scores(&g, &x).expect("valid features").iter().sum::<f64>() / n as f64
        };
        let report = grad_check(loss, &flat, &grad.flatten(), END_TO_END_TOLERANCE, None)?;
        out.push(NamedCheck { name: format!("estimator.{}", config.label()), report });
    }
    Ok(out)
}
