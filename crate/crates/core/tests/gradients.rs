mod common;

use rgbt_prompt::foundation::Foundation;
use rgbt_prompt::graph::{Graph, Tensor};
use rgbt_prompt::pipeline::{forward, CallTrace, TrackerConfig};
use rgbt_prompt::training::{generate_synthetic, loss_graph, sample_gradients, LossWeights};

#[test]
fn every_prompter_gradient_matches_finite_differences() {
    let (err, name) = common::worst_gradient_error(&TrackerConfig::toy(), 3);
    assert!(err < common::GRAD_TOL, "worst relative error {err:e} in {name}");
}

#[test]
fn gradients_reach_every_tensor() {
    let cfg = TrackerConfig::toy();
    let foundation = Foundation::random(cfg.foundation.clone(), 4).unwrap();
    let bank = common::perturbed_bank(&cfg, 4, 0.1);
    let sample = generate_synthetic(4, 1, &cfg.foundation).remove(0).sample;
    let (_, grads) = sample_gradients(&foundation, &bank, &cfg, &sample, &LossWeights::default()).unwrap();
    let mut names = Vec::new();
    bank.visit("", &mut |n, _| names.push(n.to_string()));
    for (name, g) in names.iter().zip(&grads) {
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn foundation_receives_no_gradient() {
    let cfg = TrackerConfig::toy();
    let foundation = Foundation::random(cfg.foundation.clone(), 5).unwrap();
    let bank = common::perturbed_bank(&cfg, 5, 0.1);
    let sample = generate_synthetic(5, 1, &cfg.foundation).remove(0).sample;
    let mut g = Graph::new();
    let fw = foundation.bind(&mut g);
    let b = bank.bind(&mut g);
    let out = forward(&mut g, &fw, &b, &cfg, &sample.template, &sample.search, &mut CallTrace::default()).unwrap();
    let (loss, _) =
        loss_graph(&mut g, out.pred, out.score, &sample.gt, &cfg.foundation, &LossWeights::default()).unwrap();
    let grads = g.backward(loss).unwrap();
    fw.visit("", &mut |name, v| {
        assert!(!g.requires_grad(*v), "{name} is trainable");
        assert!(grads.get(*v).is_none_or(|t: &Tensor| t.iter().all(|&x| x == 0.0)), "{name} has a gradient");
    });
    let mut with_grad = 0;
    b.visit("", &mut |_, v| with_grad += usize::from(grads.get(*v).is_some()));
    assert!(with_grad > 0);
}
