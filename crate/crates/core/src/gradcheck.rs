//! Central finite-difference checks of analytic gradients, in `f64`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::build_discriminator_with;
use crate::graph::{Graph, NodeId};
use crate::network::{ForwardOptions, Network, NetworkBuilder, NetworkError, Role};
use crate::objectives::{graph as og, ObjectiveError, Penalty};
use crate::ops::Activation;
use crate::tensor::Tensor;

/// Builds a scalar loss from a network output and the parameter nodes of
/// that forward pass (so penalties can be included).
pub type LossBuilder<'a> =
    dyn Fn(&mut Graph<f64>, NodeId, &BTreeMap<String, NodeId>) -> Result<NodeId, ObjectiveError> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates with a kink within `h`: perturbing them flips the sign of
    /// some intermediate value (ReLU input, `|w|` argument) or the one-sided
    /// slopes disagree outright (max-pool switches).
    pub skipped: usize,
}

/// Scale below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

fn signs(g: &Graph<f64>) -> Vec<bool> {
    g.values().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect()
}

fn loss_value(net: &Network<f64>, x: &Tensor<f64>, loss: &LossBuilder<'_>) -> Result<(f64, Vec<bool>), NetworkError> {
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let fwd = net.forward(&mut g, input, &mut ForwardOptions::train())?;
    let l = loss(&mut g, fwd.output, &fwd.params).map_err(|e| NetworkError::Invalid(e.to_string()))?;
    Ok((g.value(l).item(), signs(&g)))
}

/// Compares reverse-mode gradients of every parameter entry against central
/// differences with step `h`.
pub fn check_network(net: &Network<f64>, x: &Tensor<f64>, loss: &LossBuilder<'_>, h: f64) -> Result<GradCheck, NetworkError> {
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let fwd = net.forward(&mut g, input, &mut ForwardOptions::train())?;
    let l = loss(&mut g, fwd.output, &fwd.params).map_err(|e| NetworkError::Invalid(e.to_string()))?;
    let f0 = g.value(l).item();
    let s0 = signs(&g);
    g.backward(l)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = net.clone();
    for (name, &id) in &fwd.params {
        let analytic = g.grad(id).expect("parameter gradient").clone();
        for i in 0..analytic.numel() {
            let orig = probe.param(name).expect("param").data()[i];
            probe.param_mut(name).expect("param").data_mut()[i] = orig + h;
            let (fp, sp) = loss_value(&probe, x, loss)?;
            probe.param_mut(name).expect("param").data_mut()[i] = orig - h;
            let (fm, sm) = loss_value(&probe, x, loss)?;
            probe.param_mut(name).expect("param").data_mut()[i] = orig;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            // smooth functions keep the one-sided slopes within O(h) of each other
            let crossed = sp != s0 || sm != s0;
            if crossed || (forward - backward).abs() > 1e-2 * (forward.abs() + backward.abs()).max(1e-3) {
                report.skipped += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// One `(network, loss)` result of [`standard_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub seed: u64,
    pub instance: &'static str,
    pub loss: &'static str,
    pub result: GradCheck,
}

/// A network and an input batch to check it on.
pub struct Instance {
    pub name: &'static str,
    pub net: Network<f64>,
    pub x: Tensor<f64>,
    /// Output already lies in (0, 1).
    pub probabilities: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Dense 5-4-3, conv on a 1x6x6 map with two 2x2 filters, and the
/// discriminator 4-8-8-1, each with a random input batch.
pub fn standard_instances(seed: u64) -> Result<Vec<Instance>, NetworkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = NetworkBuilder::new(Role::Classifier, [5])
        .dense(4, Activation::Relu)
        .dense(3, Activation::Identity)
        .build::<f64>("toy", seed)?;
    let conv = NetworkBuilder::new(Role::Classifier, [1, 6, 6])
        .conv(2, 2, 1, 0, Activation::Relu)
        .flatten()
        .dense(2, Activation::Identity)
        .build::<f64>("toy", seed)?;
    let disc = build_discriminator_with::<f64>(4, 8, 0.0, seed)?;
    Ok(vec![
        Instance {
            name: "dense 5-4-3",
            net: dense,
            x: uniform(&mut rng, &[4, 5], -1.0, 1.0),
            probabilities: false,
        },
        Instance {
            name: "conv 1x1x6x6",
            net: conv,
            x: uniform(&mut rng, &[1, 1, 6, 6], 0.0, 1.0),
            probabilities: false,
        },
        Instance {
            name: "disc 4-8-8-1",
            net: disc,
            x: uniform(&mut rng, &[4, 4], -2.0, 2.0),
            probabilities: true,
        },
    ])
}

fn as_probabilities(g: &mut Graph<f64>, out: NodeId, already: bool) -> Result<NodeId, ObjectiveError> {
    let p = if already { out } else { g.activation(out, Activation::Sigmoid) };
    let n = g.value(p).numel();
    Ok(g.reshape(p, [n, 1])?)
}

fn one_hot_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let k = shape[1];
    let mut t = Tensor::zeros(shape.to_vec());
    for r in 0..shape[0] {
        let c = rng.gen_range(0..k);
        t.data_mut()[r * k + c] = 1.0;
    }
    t
}

fn weight_nodes(params: &BTreeMap<String, NodeId>) -> Vec<NodeId> {
    params
        .iter()
        .filter(|(n, _)| n.ends_with(".weight"))
        .map(|(_, &id)| id)
        .collect()
}

/// Checks every loss on `inst`: reconstruction, classification,
/// discriminator (outputs split into real and fake halves), generator
/// adversarial, and reconstruction plus an L1 or L2 penalty at 0.1.
/// Non-probability outputs go through a sigmoid for the adversarial losses.
pub fn check_losses(inst: &Instance, seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheck)>, NetworkError> {
    let out_shape: Vec<usize> = std::iter::once(inst.x.shape()[0]).chain(inst.net.output_shape()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let target = uniform(&mut rng, &out_shape, 0.0, 1.0);
    let y = one_hot_rows(&out_shape, &mut rng);
    let pr = inst.probabilities;

    let recon = |g: &mut Graph<f64>, out: NodeId, _: &BTreeMap<String, NodeId>| {
        let t = g.constant(target.clone());
        og::reconstruction(g, t, out)
    };
    let cls = |g: &mut Graph<f64>, out: NodeId, _: &BTreeMap<String, NodeId>| {
        let t = g.constant(y.clone());
        og::classification(g, t, out)
    };
    let disc = |g: &mut Graph<f64>, out: NodeId, _: &BTreeMap<String, NodeId>| {
        let p = as_probabilities(g, out, pr)?;
        let n = g.value(p).numel();
        og::discriminator_stacked(g, p, n / 2)
    };
    let gen = |g: &mut Graph<f64>, out: NodeId, _: &BTreeMap<String, NodeId>| {
        let p = as_probabilities(g, out, pr)?;
        og::generator_adv(g, p)
    };
    let penalized = |kind: Penalty| {
        let target = &target;
        move |g: &mut Graph<f64>, out: NodeId, params: &BTreeMap<String, NodeId>| {
            let t = g.constant(target.clone());
            let data = og::reconstruction(g, t, out)?;
            let p = og::penalty(g, kind, &weight_nodes(params))?;
            og::combined(g, data, p, 0.1)
        }
    };
    let l1 = penalized(Penalty::L1);
    let l2 = penalized(Penalty::L2);

    let odd = out_shape.iter().product::<usize>() % 2 == 1;
    let losses: Vec<(&'static str, &LossBuilder<'_>)> = vec![
        ("reconstruction", &recon),
        ("classification", &cls),
        ("discriminator", &disc),
        ("generator_adv", &gen),
        ("combined_l1", &l1),
        ("combined_l2", &l2),
    ];
    losses
        .into_iter()
        .filter(|(name, _)| !(odd && *name == "discriminator"))
        .map(|(name, f)| Ok((name, check_network(&inst.net, &inst.x, f, h)?)))
        .collect()
}

/// [`check_losses`] over [`standard_instances`] for every seed.
pub fn standard_suite(seeds: std::ops::Range<u64>, h: f64) -> Result<Vec<SuiteEntry>, NetworkError> {
    let mut out = Vec::new();
    for seed in seeds {
        for inst in standard_instances(seed)? {
            for (loss, result) in check_losses(&inst, seed, h)? {
                out.push(SuiteEntry {
                    seed,
                    instance: inst.name,
                    loss,
                    result,
                });
            }
        }
    }
    Ok(out)
}
