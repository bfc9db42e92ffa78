//! Stuck-at-0 fault masks, faulty evaluation views and degradation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics::accuracy_from_logits;
use crate::network::{LayerKind, Network, NetworkError};
use crate::seed::Seeds;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("fault fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("filter faults need convolutional layers; `{0}` has none")]
    NoConvLayers(String),
    #[error("mask was generated for a different network")]
    DescriptorMismatch,
    #[error("fractions must be a non-empty ascending list in [0, 1]")]
    Fractions,
    #[error("trials must be at least 1")]
    Trials,
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    Weight,
    Node,
    Filter,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::Weight, FaultKind::Node, FaultKind::Filter];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Weight => "weight",
            FaultKind::Node => "node",
            FaultKind::Filter => "filter",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| format!("unknown fault kind `{s}` (expected weight, node or filter)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskOptions {
    /// Let node faults hit the output layer too.
    pub include_output: bool,
}

/// Binary keep/stuck masks for one network.
///
/// Keys are parameter names for weight faults and layer names for node and
/// filter faults. Values are `1.0` (keep) or `0.0` (stuck at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FaultMask {
    pub kind: FaultKind,
    pub fraction: f64,
    pub seed: u64,
    pub options: MaskOptions,
    descriptor: String,
    masks: BTreeMap<String, Tensor<f32>>,
}

impl FaultMask {
    pub fn masks(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.masks
    }

    pub fn zeros(&self, key: &str) -> Option<usize> {
        self.masks.get(key).map(|m| m.data().iter().filter(|&&v| v == 0.0).count())
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }
}

/// Exactly `floor(p * n)` zeros, positions drawn uniformly without replacement.
fn stuck_positions(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let zeros = ((p * n as f64).floor() as usize).min(n);
    let mut keep = vec![1.0f32; n];
    for i in rand::seq::index::sample(rng, n, zeros) {
        keep[i] = 0.0;
    }
    Tensor::new(vec![n], keep).expect("length matches")
}

fn check_fraction(p: f64) -> Result<(), FaultError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(FaultError::Fraction(p));
    }
    Ok(())
}

/// Draws a mask for `net`. Targets are visited in layer order from one seeded
/// stream, so the same `(kind, p, seed, network layout)` always reproduces it.
pub fn gen_mask(net: &Network<f32>, kind: FaultKind, p: f64, seed: u64, options: MaskOptions) -> Result<FaultMask, FaultError> {
    check_fraction(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = BTreeMap::new();
    match kind {
        FaultKind::Weight => {
            for name in net.weight_names() {
                let w = net.param(&name).expect("validated network");
                let m = stuck_positions(w.numel(), p, &mut rng).reshape(w.shape().to_vec()).expect("same size");
                masks.insert(name, m);
            }
        }
        FaultKind::Node => {
            let shapes = net.layer_shapes()?;
            let last = net.layers().iter().rposition(|l| l.kind.has_params());
            for (i, (layer, shape)) in net.layers().iter().zip(&shapes).enumerate() {
                if !layer.kind.has_params() || (Some(i) == last && !options.include_output) {
                    continue;
                }
                let n = shape.iter().product();
                let m = stuck_positions(n, p, &mut rng).reshape(shape.clone()).expect("same size");
                masks.insert(layer.name.clone(), m);
            }
        }
        FaultKind::Filter => {
            for layer in net.layers() {
                if let LayerKind::Conv { filters, .. } = layer.kind {
                    masks.insert(layer.name.clone(), stuck_positions(filters, p, &mut rng));
                }
            }
            if masks.is_empty() {
                return Err(FaultError::NoConvLayers(net.arch().to_string()));
            }
        }
    }
    Ok(FaultMask {
        kind,
        fraction: p,
        seed,
        options,
        descriptor: net.descriptor(),
        masks,
    })
}

/// Evaluation view of a network with a mask baked in. The base network is
/// cloned, never touched.
#[derive(Debug, Clone)]
pub struct FaultyNetwork {
    net: Network<f32>,
    node_masks: BTreeMap<String, Tensor<f32>>,
}

impl FaultyNetwork {
    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn node_masks(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.node_masks
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, NetworkError> {
        if self.node_masks.is_empty() {
            self.net.predict(x)
        } else {
            self.net.predict_masked(x, Some(&self.node_masks))
        }
    }
}

pub fn apply_mask(net: &Network<f32>, mask: &FaultMask) -> Result<FaultyNetwork, FaultError> {
    if mask.descriptor != net.descriptor() {
        return Err(FaultError::DescriptorMismatch);
    }
    let mut faulty = net.clone();
    let mut node_masks = BTreeMap::new();
    match mask.kind {
        FaultKind::Weight => {
            for (name, m) in &mask.masks {
                let w = faulty.param_mut(name).ok_or(FaultError::DescriptorMismatch)?;
                for (v, &k) in w.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
        }
        FaultKind::Node => node_masks = mask.masks.clone(),
        FaultKind::Filter => {
            for (layer, m) in &mask.masks {
                let w = faulty
                    .param_mut(&format!("{layer}.weight"))
                    .ok_or(FaultError::DescriptorMismatch)?;
                let per = w.numel() / m.numel();
                for (chunk, &k) in w.data_mut().chunks_mut(per).zip(m.data()) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                let b = faulty.param_mut(&format!("{layer}.bias")).ok_or(FaultError::DescriptorMismatch)?;
                for (v, &k) in b.data_mut().iter_mut().zip(m.data()) {
                    *v *= k;
                }
            }
        }
    }
    Ok(FaultyNetwork { net: faulty, node_masks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultToleranceReport {
    /// Largest per-input L2 distance between clean and faulty outputs.
    pub epsilon: f64,
    pub mean_deviation: f64,
    pub faulty_accuracy: f64,
    pub fraction: f64,
    pub trials: usize,
}

/// Per-row L2 distances between two output batches.
pub fn row_deviations(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    (0..a.batch())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn report_from(clean: &Tensor<f32>, faulty_out: &Tensor<f32>, labels: &[usize], fraction: f64) -> FaultToleranceReport {
    let dev = row_deviations(clean, faulty_out);
    FaultToleranceReport {
        epsilon: dev.iter().copied().fold(0.0, f64::max),
        mean_deviation: dev.iter().sum::<f64>() / dev.len() as f64,
        faulty_accuracy: accuracy_from_logits(faulty_out, labels),
        fraction,
        trials: 1,
    }
}

pub fn epsilon_ft(net: &Network<f32>, faulty: &FaultyNetwork, eval: &Dataset) -> Result<FaultToleranceReport, FaultError> {
    if eval.is_empty() {
        return Err(FaultError::EmptyEval);
    }
    let clean = net.predict(&eval.images)?;
    let out = faulty.predict(&eval.images)?;
    Ok(report_from(&clean, &out, &eval.labels, f64::NAN))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub fraction: f64,
    pub trials: Vec<TrialResult>,
    pub mean_accuracy: f64,
    /// Population standard deviation over trials.
    pub std_accuracy: f64,
    pub epsilon_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationCurve {
    pub kind: FaultKind,
    pub points: Vec<CurvePoint>,
}

impl DegradationCurve {
    pub fn at(&self, fraction: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| (p.fraction - fraction).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub trials: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    pub mask: MaskOptions,
}

/// Seed of one `(kind, fraction, trial)` cell, independent of the other cells
/// in the sweep.
pub fn trial_seed(seed: u64, kind: FaultKind, fraction: f64, trial: usize) -> u64 {
    Seeds::new(seed).derive_indexed(&format!("fault.{kind}"), &[fraction.to_bits(), trial as u64])
}

/// Accuracy under `trials` independent masks at each fraction.
pub fn degradation_sweep(
    net: &Network<f32>,
    kind: FaultKind,
    fractions: &[f64],
    eval: &Dataset,
    opts: SweepOptions,
) -> Result<DegradationCurve, FaultError> {
    if fractions.is_empty()
        || fractions.iter().any(|p| !(0.0..=1.0).contains(p))
        || fractions.windows(2).any(|w| w[0] > w[1])
    {
        return Err(FaultError::Fractions);
    }
    if opts.trials == 0 {
        return Err(FaultError::Trials);
    }
    if eval.is_empty() {
        return Err(FaultError::EmptyEval);
    }
    // surfaces a kind/architecture mismatch before any work is spread out
    gen_mask(net, kind, 0.0, 0, opts.mask)?;
    let clean = net.predict(&eval.images)?;

    let cells: Vec<(usize, usize)> = (0..fractions.len())
        .flat_map(|f| (0..opts.trials).map(move |t| (f, t)))
        .collect();
    let run = |&(f, t): &(usize, usize)| -> Result<TrialResult, FaultError> {
        let p = fractions[f];
        let seed = trial_seed(opts.seed, kind, p, t);
        let mask = gen_mask(net, kind, p, seed, opts.mask)?;
        let faulty = apply_mask(net, &mask)?;
        let out = faulty.predict(&eval.images)?;
        let r = report_from(&clean, &out, &eval.labels, p);
        Ok(TrialResult {
            trial: t,
            seed,
            accuracy: r.faulty_accuracy,
            epsilon: r.epsilon,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| FaultError::Pool(e.to_string()))?;
    let results: Vec<TrialResult> = pool.install(|| cells.par_iter().map(run).collect::<Result<_, _>>())?;

    let points = results
        .chunks(opts.trials)
        .zip(fractions)
        .map(|(trials, &fraction)| {
            let n = trials.len() as f64;
            let mean = trials.iter().map(|t| t.accuracy).sum::<f64>() / n;
            let var = trials.iter().map(|t| (t.accuracy - mean).powi(2)).sum::<f64>() / n;
            CurvePoint {
                fraction,
                trials: trials.to_vec(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                epsilon_max: trials.iter().map(|t| t.epsilon).fold(0.0, f64::max),
            }
        })
        .collect();
    Ok(DegradationCurve { kind, points })
}

/// Inclusive `start:stop:step` range, e.g. `0:0.9:0.1` gives ten points.
/// Also accepts a comma-separated list.
pub fn parse_fractions(spec: &str) -> Result<Vec<f64>, String> {
    let spec = spec.trim();
    let out: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("fractions `{spec}`: {e}")))
            .collect::<Result<_, _>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(format!("fractions `{spec}`: expected start:stop:step"));
        };
        if step <= 0.0 || stop < start {
            return Err(format!("fractions `{spec}`: need step > 0 and stop >= start"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // round to 12 decimals so 0.1 * 3 prints as 0.3
        (0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("fractions `{spec}`: {e}")))
            .collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.iter().any(|p| !(0.0..=1.0).contains(p)) || out.windows(2).any(|w| w[0] > w[1]) {
        return Err(format!("fractions `{spec}` must be ascending values in [0, 1]"));
    }
    Ok(out)
}
