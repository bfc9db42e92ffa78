//! Two-phase adversarial training and the supervised baselines.
//!
//! Phase 1 alternates, on every minibatch, a reconstruction step for the
//! feature extractor and generator, `k` discriminator steps that separate
//! prior samples from extracted features, and one feature-extractor step
//! that tries to fool the discriminator. Phase 2 attaches a classifier head
//! and trains the composite on the classification loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::arch::{self, ArchitectureId};
use crate::data::{minibatches, DataError, Dataset};
use crate::graph::{Graph, NodeId};
use crate::metrics::{accuracy, MetricsRecord};
use crate::network::{compose, ForwardOptions, Network, NetworkError};
use crate::objectives::{self, ObjectiveError, Penalty};
use crate::seed::Seeds;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("network emits {outputs} classes but the labels use {classes}")]
    Classes { outputs: usize, classes: usize },
    #[error("non-finite {0} loss")]
    Diverged(&'static str),
}

impl From<crate::graph::GraphError> for TrainError {
    fn from(e: crate::graph::GraphError) -> Self {
        TrainError::Network(e.into())
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Network(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    None,
    Lasso,
    Tikhonov,
    Adversarial,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Lasso, Method::Tikhonov, Method::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Lasso => "lasso",
            Method::Tikhonov => "tikhonov",
            Method::Adversarial => "adversarial",
        }
    }

    pub fn penalty(self) -> Option<Penalty> {
        match self {
            Method::Lasso => Some(Penalty::L1),
            Method::Tikhonov => Some(Penalty::L2),
            Method::None | Method::Adversarial => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| format!("unknown method `{s}` (expected none, lasso, tikhonov or adversarial)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    /// Supervised epochs: phase 2 of the adversarial method, the whole run otherwise.
    pub epochs_phase2: usize,
    /// Discriminator steps per minibatch.
    pub disc_steps: usize,
    pub lr_fe: f64,
    pub lr_gen: f64,
    pub lr_cls: f64,
    pub lr_disc: f64,
    pub lambda: f64,
    pub latent_dim: usize,
    /// Prior mean; one entry is broadcast to every latent coordinate.
    pub prior_mean: Vec<f64>,
    /// Prior diagonal variance; one entry is broadcast.
    pub prior_var: Vec<f64>,
    pub head_hidden: usize,
    pub disc_hidden: usize,
    pub dropout: f64,
    /// Keep feature-extractor parameters fixed during phase 2.
    pub freeze_fe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Adversarial,
            batch_size: 32,
            epochs_phase1: 5,
            epochs_phase2: 10,
            disc_steps: 1,
            lr_fe: 0.003,
            lr_gen: 0.003,
            lr_cls: 0.003,
            lr_disc: 5e-5,
            lambda: 0.0,
            latent_dim: 64,
            prior_mean: vec![0.0],
            prior_var: vec![1.0],
            head_hidden: 128,
            disc_hidden: arch::DISCRIMINATOR_HIDDEN,
            dropout: arch::DEFAULT_DROPOUT,
            freeze_fe: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the architecture's latent and head widths.
    pub fn for_arch(arch: ArchitectureId) -> Self {
        let base = Self {
            latent_dim: arch.default_latent_dim(),
            head_hidden: arch.default_head_hidden(),
            ..Self::default()
        };
        if !arch.is_cifar() {
            return base;
        }
        // reconstruction sums over 3072 pixels; 0.003 blows up the conv extractor
        Self {
            lr_fe: 0.001,
            lr_gen: 0.001,
            lr_cls: 0.01,
            ..base
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.disc_steps == 0 {
            return bad("disc_steps must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_fe", self.lr_fe),
            ("lr_gen", self.lr_gen),
            ("lr_cls", self.lr_cls),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {lr}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.latent_dim == 0 || self.head_hidden == 0 || self.disc_hidden == 0 {
            return bad("latent_dim, head_hidden and disc_hidden must be positive".into());
        }
        for (name, v) in [("prior_mean", &self.prior_mean), ("prior_var", &self.prior_var)] {
            if v.len() != 1 && v.len() != self.latent_dim {
                return bad(format!("{name} needs 1 or {} entries, got {}", self.latent_dim, v.len()));
            }
        }
        if self.prior_var.iter().any(|&s| s.is_nan() || s < 0.0) {
            return bad("prior_var entries must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    fn prior_at(v: &[f64], i: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[i]
        }
    }
}

/// Draws `m` rows from `N(mu, diag(var))`.
pub fn sample_prior(cfg: &TrainConfig, m: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let d = cfg.latent_dim;
    Tensor::from_fn([m, d], |i| {
        let j = i % d;
        let z: f64 = StandardNormal.sample(rng);
        let mu = TrainConfig::prior_at(&cfg.prior_mean, j);
        let sd = TrainConfig::prior_at(&cfg.prior_var, j).sqrt();
        (mu + sd * z) as f32
    })
}

/// One row of the training log. Absent values are phases that did not run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub gen_adv_loss: Option<f64>,
    pub cls_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// The three phase-1 networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialNets {
    pub fe: Network<f32>,
    pub gen: Network<f32>,
    pub disc: Network<f32>,
}

impl AdversarialNets {
    pub fn build(arch: ArchitectureId, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let seeds = Seeds::new(cfg.seed);
        let nets = Self {
            fe: arch::build_feature_extractor(arch, cfg.latent_dim, seeds.derive("init.fe"))?,
            gen: arch::build_generator(arch, cfg.latent_dim, seeds.derive("init.gen"))?,
            disc: arch::build_discriminator_with(cfg.latent_dim, cfg.disc_hidden, cfg.dropout, seeds.derive("init.disc"))?,
        };
        nets.check()?;
        Ok(nets)
    }

    fn check(&self) -> Result<(), TrainError> {
        let z: usize = self.fe.output_shape().iter().product();
        let g: usize = self.gen.input_shape().iter().product();
        let d: usize = self.disc.input_shape().iter().product();
        if z != g || z != d {
            return Err(TrainError::Dimension(format!(
                "feature extractor emits {z} features, generator takes {g}, discriminator takes {d}"
            )));
        }
        let img: usize = self.fe.input_shape().iter().product();
        let rec: usize = self.gen.output_shape().iter().product();
        if img != rec {
            return Err(TrainError::Dimension(format!(
                "generator emits {rec} values for {img}-value images"
            )));
        }
        Ok(())
    }
}

/// Which update just ran inside a phase-1 minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase1Step {
    Reconstruction,
    Discriminator(usize),
    FeatureAdversarial,
}

/// Hook called after every phase-1 parameter update.
pub trait Phase1Observer {
    fn after_step(&mut self, batch: usize, step: Phase1Step, nets: &AdversarialNets);
}

impl Phase1Observer for () {
    fn after_step(&mut self, _: usize, _: Phase1Step, _: &AdversarialNets) {}
}

/// Random streams that persist across epochs of one run.
pub struct TrainRngs {
    pub prior: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let s = Seeds::new(seed);
        Self {
            prior: s.rng("prior"),
            dropout: s.rng("dropout"),
        }
    }
}

fn take_grads(g: &mut Graph<f32>, params: &BTreeMap<String, NodeId>) -> BTreeMap<String, Tensor<f32>> {
    params
        .iter()
        .filter_map(|(name, &id)| g.take_grad(id).map(|t| (name.clone(), t)))
        .collect()
}

fn finite(v: f64, what: &'static str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Diverged(what))
    }
}

/// One descent step of the discriminator loss on the stacked batch
/// `[z_real; z_fake]` with dropout active. Returns the loss before the update.
pub fn discriminator_step(
    disc: &mut Network<f32>,
    z_real: &Tensor<f32>,
    z_fake: &Tensor<f32>,
    lr: f64,
    dropout: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let m = z_real.shape()[0];
    if z_fake.shape()[0] != m {
        return Err(TrainError::Dimension(format!(
            "{m} real rows but {} fake rows",
            z_fake.shape()[0]
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(Tensor::concat_rows(&[z_real, z_fake])?);
    let mut opts = ForwardOptions {
        dropout: Some(dropout),
        ..ForwardOptions::train()
    };
    let d = disc.forward(&mut g, z, &mut opts)?;
    let loss = objectives::graph::discriminator_stacked(&mut g, d.output, m)?;
    let value = finite(f64::from(g.value(loss).item()), "discriminator")?;
    g.backward(loss)?;
    disc.apply_gradients(&take_grads(&mut g, &d.params), lr as f32)?;
    Ok(value)
}

/// One pass of phase 1 over `data`. `epoch` is zero-based and selects the
/// shuffle; the returned record is numbered `epoch + 1`.
pub fn phase1_epoch(
    nets: &mut AdversarialNets,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    rngs: &mut TrainRngs,
    observer: &mut dyn Phase1Observer,
) -> Result<EpochRecord, TrainError> {
    cfg.validate()?;
    nets.check()?;
    let m = cfg.batch_size;
    let seeds = Seeds::new(cfg.seed);
    let lr = |v: f64| v as f32;
    let rec_shape: Vec<usize> = std::iter::once(m).chain(nets.gen.output_shape()).collect();
    let (mut recon_sum, mut disc_sum, mut adv_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);

    for (b, batch) in minibatches(data, m, seeds.derive_indexed("shuffle.phase1", &[epoch as u64]))?.enumerate() {
        // (a) reconstruction: fe and gen descend jointly
        {
            let mut g = Graph::new();
            let x = g.constant(batch.x.clone());
            let fe = nets.fe.forward(&mut g, x, &mut ForwardOptions::train())?;
            let gen = nets.gen.forward(&mut g, fe.output, &mut ForwardOptions::train())?;
            let target = g.constant(batch.x.clone().reshape(rec_shape.clone())?);
            let loss = objectives::graph::reconstruction(&mut g, target, gen.output)?;
            recon_sum += finite(f64::from(g.value(loss).item()), "reconstruction")?;
            g.backward(loss)?;
            nets.fe.apply_gradients(&take_grads(&mut g, &fe.params), lr(cfg.lr_fe))?;
            nets.gen.apply_gradients(&take_grads(&mut g, &gen.params), lr(cfg.lr_gen))?;
        }
        observer.after_step(b, Phase1Step::Reconstruction, nets);

        // (b) discriminator steps on [prior; features] with fe held fixed
        let z_fake = nets.fe.predict(&batch.x)?;
        for step in 0..cfg.disc_steps {
            let z_real = sample_prior(cfg, m, &mut rngs.prior);
            let loss = discriminator_step(&mut nets.disc, &z_real, &z_fake, cfg.lr_disc, &mut rngs.dropout)?;
            disc_sum += loss / cfg.disc_steps as f64;
            observer.after_step(b, Phase1Step::Discriminator(step), nets);
        }

        // (c) fe moves its features toward what the frozen discriminator calls real
        {
            let mut g = Graph::new();
            let x = g.constant(batch.x.clone());
            let fe = nets.fe.forward(&mut g, x, &mut ForwardOptions::train())?;
            let d = nets.disc.forward(&mut g, fe.output, &mut ForwardOptions::eval())?;
            let loss = objectives::graph::generator_adv(&mut g, d.output)?;
            adv_sum += finite(f64::from(g.value(loss).item()), "generator-adversarial")?;
            g.backward(loss)?;
            nets.fe.apply_gradients(&take_grads(&mut g, &fe.params), lr(cfg.lr_fe))?;
        }
        observer.after_step(b, Phase1Step::FeatureAdversarial, nets);
        batches += 1;
    }

    let n = batches as f64;
    Ok(EpochRecord {
        epoch: epoch + 1,
        recon_loss: Some(recon_sum / n),
        disc_loss: Some(disc_sum / n),
        gen_adv_loss: Some(adv_sum / n),
        ..EpochRecord::default()
    })
}

/// Runs `cfg.epochs_phase1` epochs of phase 1.
pub fn phase1(
    nets: &mut AdversarialNets,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn Phase1Observer,
) -> Result<TrainLog, TrainError> {
    let mut rngs = TrainRngs::new(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs_phase1 {
        log.records.push(phase1_epoch(nets, data, cfg, epoch, &mut rngs, observer)?);
    }
    Ok(log)
}

/// Supervised training settings shared by phase 2 and the baselines.
#[derive(Debug, Clone, Copy)]
struct Supervised<'a> {
    penalty: Option<(Penalty, f64)>,
    frozen_prefix: Option<&'a str>,
    epoch_offset: usize,
    shuffle_label: &'a str,
}

fn check_classes(net: &Network<f32>, data: &Dataset) -> Result<(), TrainError> {
    let outputs: usize = net.output_shape().iter().product();
    if outputs != data.classes {
        return Err(TrainError::Classes {
            outputs,
            classes: data.classes,
        });
    }
    Ok(())
}

fn supervised_epochs(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sup: Supervised<'_>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    check_classes(net, train)?;
    let seeds = Seeds::new(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs_phase2 {
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let shuffle = seeds.derive_indexed(sup.shuffle_label, &[epoch as u64]);
        for batch in minibatches(train, cfg.batch_size, shuffle)? {
            let mut g = Graph::new();
            let x = g.constant(batch.x);
            let y = g.constant(batch.y);
            let mut opts = ForwardOptions {
                frozen_prefix: sup.frozen_prefix,
                ..ForwardOptions::train()
            };
            let fwd = net.forward(&mut g, x, &mut opts)?;
            let data_loss = objectives::graph::classification(&mut g, y, fwd.output)?;
            let loss = match sup.penalty {
                Some((kind, lambda)) if lambda > 0.0 => {
                    let weights: Vec<NodeId> = fwd
                        .params
                        .iter()
                        .filter(|(name, &id)| name.ends_with(".weight") && g.is_param(id))
                        .map(|(_, &id)| id)
                        .collect();
                    let p = objectives::graph::penalty(&mut g, kind, &weights)?;
                    objectives::graph::combined(&mut g, data_loss, p, lambda)?
                }
                _ => data_loss,
            };
            loss_sum += finite(f64::from(g.value(data_loss).item()), "classification")?;
            g.backward(loss)?;
            net.apply_gradients(&take_grads(&mut g, &fwd.params), cfg.lr_cls as f32)?;
            batches += 1;
        }
        log.records.push(EpochRecord {
            epoch: sup.epoch_offset + epoch + 1,
            cls_loss: Some(loss_sum / batches as f64),
            train_acc: Some(accuracy(net, train)?),
            test_acc: test.map(|t| accuracy(net, t)).transpose()?,
            ..EpochRecord::default()
        });
    }
    Ok(log)
}

/// Attaches `head` to `fe` and trains the composite on the classification
/// loss. With `cfg.freeze_fe` only the head moves.
pub fn phase2_finetune(
    fe: &Network<f32>,
    head: &Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    epoch_offset: usize,
) -> Result<(Network<f32>, TrainLog), TrainError> {
    let mut net = compose(fe, head)?;
    let frozen = format!("{}.", fe.role().prefix());
    let log = supervised_epochs(
        &mut net,
        train,
        test,
        cfg,
        Supervised {
            penalty: None,
            frozen_prefix: cfg.freeze_fe.then_some(frozen.as_str()),
            epoch_offset,
            shuffle_label: "shuffle.supervised",
        },
    )?;
    Ok((net, log))
}

/// Single-phase supervised training with an optional weight penalty.
pub fn train_baseline(
    arch: ArchitectureId,
    method: Method,
    lambda: f64,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network<f32>, TrainLog), TrainError> {
    if method == Method::Adversarial {
        return Err(TrainError::Config("baselines are none, lasso or tikhonov".into()));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(ObjectiveError::NegativeLambda(lambda).into());
    }
    let mut net = build_classifier(arch, cfg, train.classes)?;
    let log = supervised_epochs(
        &mut net,
        train,
        test,
        cfg,
        Supervised {
            penalty: method.penalty().map(|p| (p, lambda)),
            frozen_prefix: None,
            epoch_offset: 0,
            shuffle_label: "shuffle.supervised",
        },
    )?;
    Ok((net, log))
}

fn build_head(cfg: &TrainConfig, classes: usize) -> Result<Network<f32>, TrainError> {
    let seeds = Seeds::new(cfg.seed);
    Ok(arch::build_classifier_head(cfg.latent_dim, cfg.head_hidden, classes, seeds.derive("init.cls"))?)
}

/// Feature extractor plus head with the run's initial weights. Every method
/// starts from these same values for a given seed.
pub fn build_classifier(arch: ArchitectureId, cfg: &TrainConfig, classes: usize) -> Result<Network<f32>, TrainError> {
    let seeds = Seeds::new(cfg.seed);
    let fe = arch::build_feature_extractor(arch, cfg.latent_dim, seeds.derive("init.fe"))?;
    Ok(compose(&fe, &build_head(cfg, classes)?)?)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub network: Network<f32>,
    pub log: TrainLog,
    pub metrics: MetricsRecord,
    pub phase1: Option<AdversarialNets>,
}

/// Full training run for `cfg.method`, ending in a metrics record.
pub fn run_pipeline(
    cfg: &TrainConfig,
    arch: ArchitectureId,
    train: &Dataset,
    test: &Dataset,
) -> Result<PipelineOutput, TrainError> {
    cfg.validate()?;
    let (network, log, phase1_nets) = match cfg.method {
        Method::Adversarial => {
            let mut nets = AdversarialNets::build(arch, cfg)?;
            let mut log = phase1(&mut nets, train, cfg, &mut ())?;
            let head = build_head(cfg, train.classes)?;
            let (net, log2) = phase2_finetune(&nets.fe, &head, train, Some(test), cfg, cfg.epochs_phase1)?;
            log.records.extend(log2.records);
            (net, log, Some(nets))
        }
        m => {
            let (net, log) = train_baseline(arch, m, cfg.lambda, train, Some(test), cfg)?;
            (net, log, None)
        }
    };
    let metrics = MetricsRecord::evaluate(&network, cfg.method.name(), cfg.seed, train, test)?;
    Ok(PipelineOutput {
        network,
        log,
        metrics,
        phase1: phase1_nets,
    })
}
