//! Benchmark architectures and their paired generator, discriminator and head.

use std::fmt;
use std::str::FromStr;

use crate::network::{compose, Network, NetworkBuilder, NetworkError, Role};
use crate::ops::Activation;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArchitectureId {
    A1,
    A2,
    A3,
    A4,
    A1Mini,
    A4Mini,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 6] = [
        ArchitectureId::A1,
        ArchitectureId::A2,
        ArchitectureId::A3,
        ArchitectureId::A4,
        ArchitectureId::A1Mini,
        ArchitectureId::A4Mini,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureId::A1 => "a1",
            ArchitectureId::A2 => "a2",
            ArchitectureId::A3 => "a3",
            ArchitectureId::A4 => "a4",
            ArchitectureId::A1Mini => "a1_mini",
            ArchitectureId::A4Mini => "a4_mini",
        }
    }

    /// Per-sample image shape `[C, H, W]` of the paired dataset.
    pub fn input_shape(self) -> [usize; 3] {
        if self.is_cifar() {
            [3, 32, 32]
        } else {
            [1, 28, 28]
        }
    }

    pub fn is_cifar(self) -> bool {
        matches!(self, ArchitectureId::A3 | ArchitectureId::A4 | ArchitectureId::A4Mini)
    }

    pub fn default_latent_dim(self) -> usize {
        if self.is_cifar() {
            128
        } else {
            64
        }
    }

    pub fn default_head_hidden(self) -> usize {
        match self {
            ArchitectureId::A1 | ArchitectureId::A2 => 512,
            ArchitectureId::A3 | ArchitectureId::A4 => 1024,
            ArchitectureId::A1Mini | ArchitectureId::A4Mini => 128,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureId {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| NetworkError::UnknownArchitecture(s.to_string()))
    }
}

fn check_latent(latent_dim: usize) -> Result<(), NetworkError> {
    if latent_dim == 0 {
        return Err(NetworkError::Invalid("latent_dim must be at least 1".into()));
    }
    Ok(())
}

/// Image-to-feature network. The final dense layer is linear so features can
/// match a zero-mean prior.
pub fn build_feature_extractor<T: Scalar>(
    arch: ArchitectureId,
    latent_dim: usize,
    seed: u64,
) -> Result<Network<T>, NetworkError> {
    check_latent(latent_dim)?;
    let b = NetworkBuilder::new(Role::FeatureExtractor, arch.input_shape());
    let relu = Activation::Relu;
    let leaky = Activation::LeakyRelu;
    let b = match arch {
        ArchitectureId::A1 => b.flatten().dense(512, relu).dense(1024, relu).dense(512, relu),
        ArchitectureId::A1Mini => b.flatten().dense(64, relu).dense(128, relu).dense(64, relu),
        ArchitectureId::A2 => b
            .conv(20, 5, 1, 0, relu)
            .maxpool(2, 2)
            .conv(50, 5, 1, 0, relu)
            .maxpool(2, 2)
            .flatten(),
        ArchitectureId::A3 => {
            let ladder = [64, 128, 256, 512, 256, 128, 128];
            let strides = [1, 2, 1, 2, 1, 2, 1];
            ladder
                .iter()
                .zip(strides)
                .fold(b, |b, (&f, s)| b.conv(f, 3, s, 1, leaky))
                .flatten()
        }
        ArchitectureId::A4 => b.conv(64, 3, 2, 0, leaky).conv(128, 3, 2, 0, leaky).conv(128, 3, 2, 0, leaky).flatten(),
        ArchitectureId::A4Mini => b.conv(16, 3, 2, 0, leaky).conv(32, 3, 2, 0, leaky).conv(32, 3, 2, 0, leaky).flatten(),
    };
    b.dense(latent_dim, Activation::Identity).build(arch.name(), seed)
}

/// Feature-to-image decoder ending in a sigmoid. Dense decoders emit a flat
/// 784-vector; convolutional decoders emit `[3, 32, 32]`.
pub fn build_generator<T: Scalar>(arch: ArchitectureId, latent_dim: usize, seed: u64) -> Result<Network<T>, NetworkError> {
    check_latent(latent_dim)?;
    let b = NetworkBuilder::new(Role::Generator, [latent_dim]);
    let relu = Activation::Relu;
    let b = match arch {
        ArchitectureId::A1 | ArchitectureId::A2 => b.dense(512, relu).dense(512, relu).dense(784, Activation::Sigmoid),
        ArchitectureId::A1Mini => b.dense(128, relu).dense(128, relu).dense(784, Activation::Sigmoid),
        ArchitectureId::A3 | ArchitectureId::A4 | ArchitectureId::A4Mini => {
            let ch: [usize; 4] = if arch == ArchitectureId::A4Mini {
                [32, 16, 8, 3]
            } else {
                [128, 64, 32, 3]
            };
            let seed_ch = ch[0];
            let leaky = Activation::LeakyRelu;
            let mut b = b.dense(seed_ch * 4, leaky).reshape([seed_ch, 2, 2]);
            for (i, &c) in ch.iter().enumerate() {
                let act = if i + 1 == ch.len() { Activation::Sigmoid } else { leaky };
                b = b.conv(c, 3, 1, 1, act).upsample2x();
            }
            b
        }
    };
    b.build(arch.name(), seed)
}

pub const DISCRIMINATOR_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// Feature-space discriminator: two ReLU layers with dropout, sigmoid output.
pub fn build_discriminator<T: Scalar>(latent_dim: usize, dropout_rate: f64, seed: u64) -> Result<Network<T>, NetworkError> {
    build_discriminator_with(latent_dim, DISCRIMINATOR_HIDDEN, dropout_rate, seed)
}

pub fn build_discriminator_with<T: Scalar>(
    latent_dim: usize,
    hidden: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Network<T>, NetworkError> {
    check_latent(latent_dim)?;
    NetworkBuilder::new(Role::Discriminator, [latent_dim])
        .dense(hidden, Activation::Relu)
        .dropout(dropout_rate)
        .dense(hidden, Activation::Relu)
        .dropout(dropout_rate)
        .dense(1, Activation::Sigmoid)
        .build("disc", seed)
}

pub fn build_classifier_head<T: Scalar>(
    latent_dim: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<Network<T>, NetworkError> {
    check_latent(latent_dim)?;
    if classes < 2 {
        return Err(NetworkError::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    NetworkBuilder::new(Role::Classifier, [latent_dim])
        .dense(hidden, Activation::Relu)
        .dense(classes, Activation::Identity)
        .build("cls", seed)
}

/// Feature extractor followed by a classifier head, as one network.
pub fn build_composite<T: Scalar>(
    arch: ArchitectureId,
    latent_dim: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<Network<T>, NetworkError> {
    let seeds = crate::seed::Seeds::new(seed);
    let fe = build_feature_extractor(arch, latent_dim, seeds.derive("init.fe"))?;
    let head = build_classifier_head(latent_dim, hidden, classes, seeds.derive("init.cls"))?;
    compose(&fe, &head)
}
