//! Losses and penalties.
//!
//! Each objective exists twice: a plain evaluator over tensors, returning a
//! [`LossValue`], and a builder that records the same quantity into a
//! [`Graph`] for training. Tests hold the two routes to the same numbers.

use std::fmt;

use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped into `[P_MIN, 1 - P_MIN]` before any log.
pub const P_MIN: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{op}: shapes {left:?} and {right:?} differ")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty batch")]
    Empty(&'static str),
    #[error("label row {0} is not one-hot")]
    NotOneHot(usize),
    #[error("penalty weight must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("optimal discriminator undefined for p = q = 0")]
    ZeroDensity,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Reconstruction,
    Discriminator,
    GeneratorAdv,
    Classification,
    L1,
    L2,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub kind: LossKind,
    pub value: f64,
}

impl fmt::Display for LossValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}={}", self.kind, self.value)
    }
}

/// Parameter penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Penalty {
    L1,
    L2,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.numel() == 0 || a.batch() == 0 {
        return Err(ObjectiveError::Empty(op));
    }
    Ok(())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

/// Batch mean of per-sample squared L2 distance.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<LossValue, ObjectiveError> {
    same_shape("reconstruction_loss", x, x_rec)?;
    let total: f64 = x
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(LossValue {
        kind: LossKind::Reconstruction,
        value: total / x.batch() as f64,
    })
}

/// `-(1/m) * sum(log d_real + log(1 - d_fake))`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<LossValue, ObjectiveError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(ObjectiveError::Empty("discriminator_loss"));
    }
    if d_real.len() != d_fake.len() {
        return Err(ObjectiveError::Shape {
            op: "discriminator_loss",
            left: vec![d_real.len()],
            right: vec![d_fake.len()],
        });
    }
    let s: f64 = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| clamp_p(r).ln() + (1.0 - clamp_p(f)).ln())
        .sum();
    Ok(LossValue {
        kind: LossKind::Discriminator,
        value: -s / d_real.len() as f64,
    })
}

/// `-(1/m) * sum(log d_fake)`.
pub fn generator_adv_loss(d_fake: &[f64]) -> Result<LossValue, ObjectiveError> {
    if d_fake.is_empty() {
        return Err(ObjectiveError::Empty("generator_adv_loss"));
    }
    let s: f64 = d_fake.iter().map(|&f| clamp_p(f).ln()).sum();
    Ok(LossValue {
        kind: LossKind::GeneratorAdv,
        value: -s / d_fake.len() as f64,
    })
}

/// Rejects label rows that are not exactly one 1 among 0s.
pub fn check_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<(), ObjectiveError> {
    for i in 0..y.batch() {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(ObjectiveError::NotOneHot(i));
        }
    }
    Ok(())
}

/// Batch mean of squared L2 between logits and one-hot labels.
pub fn classification_loss<T: Scalar>(y: &Tensor<T>, logits: &Tensor<T>) -> Result<LossValue, ObjectiveError> {
    same_shape("classification_loss", y, logits)?;
    check_one_hot(y)?;
    let v = reconstruction_loss(y, logits)?.value;
    Ok(LossValue {
        kind: LossKind::Classification,
        value: v,
    })
}

pub fn l1_penalty<'a, T: Scalar>(weights: impl IntoIterator<Item = &'a Tensor<T>>) -> LossValue {
    let value = weights
        .into_iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.to_f64_lossy().abs())
        .sum();
    LossValue {
        kind: LossKind::L1,
        value,
    }
}

pub fn l2_penalty<'a, T: Scalar>(weights: impl IntoIterator<Item = &'a Tensor<T>>) -> LossValue {
    let value = weights
        .into_iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    LossValue {
        kind: LossKind::L2,
        value,
    }
}

pub fn penalty<'a, T: Scalar>(kind: Penalty, weights: impl IntoIterator<Item = &'a Tensor<T>>) -> LossValue {
    match kind {
        Penalty::L1 => l1_penalty(weights),
        Penalty::L2 => l2_penalty(weights),
    }
}

/// `data + lambda * penalty`; exactly `data` when `lambda == 0`.
pub fn combined_objective(data: LossValue, penalty: LossValue, lambda: f64) -> Result<LossValue, ObjectiveError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    let value = if lambda == 0.0 {
        data.value
    } else {
        data.value + lambda * penalty.value
    };
    Ok(LossValue {
        kind: LossKind::Combined,
        value,
    })
}

/// `p / (p + q)`: the discriminator output that minimizes the discriminator
/// loss when real samples have density `p` and fake samples density `q`.
pub fn optimal_discriminator(p: f64, q: f64) -> Result<f64, ObjectiveError> {
    if p + q <= 0.0 {
        return Err(ObjectiveError::ZeroDensity);
    }
    Ok(p / (p + q))
}

/// Graph builders for the same objectives.
pub mod graph {
    use super::*;

    fn check_same<T: Scalar>(g: &Graph<T>, op: &'static str, a: NodeId, b: NodeId) -> Result<usize, ObjectiveError> {
        let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
        if sa != sb {
            return Err(ObjectiveError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let m = g.value(a).batch();
        if m == 0 || g.value(a).numel() == 0 {
            return Err(ObjectiveError::Empty(op));
        }
        Ok(m)
    }

    fn inv<T: Scalar>(m: usize) -> T {
        T::from_f64_lossy(1.0 / m as f64)
    }

    pub fn reconstruction<T: Scalar>(g: &mut Graph<T>, x: NodeId, x_rec: NodeId) -> Result<NodeId, ObjectiveError> {
        let m = check_same(g, "reconstruction_loss", x, x_rec)?;
        let d = g.sub(x, x_rec)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        Ok(g.scale(s, inv(m)))
    }

    /// `y` must be a constant one-hot tensor.
    pub fn classification<T: Scalar>(g: &mut Graph<T>, y: NodeId, logits: NodeId) -> Result<NodeId, ObjectiveError> {
        check_same(g, "classification_loss", y, logits)?;
        check_one_hot(g.value(y))?;
        reconstruction(g, y, logits)
    }

    fn clamped_log<T: Scalar>(g: &mut Graph<T>, p: NodeId) -> NodeId {
        let lo = T::from_f64_lossy(P_MIN);
        let hi = T::from_f64_lossy(1.0 - P_MIN);
        let c = g.clamp(p, lo, hi);
        g.log(c)
    }

    fn one_minus<T: Scalar>(g: &mut Graph<T>, p: NodeId) -> NodeId {
        let neg = g.scale(p, -T::one());
        g.add_scalar(neg, T::one())
    }

    pub fn discriminator<T: Scalar>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId, ObjectiveError> {
        let m = check_same(g, "discriminator_loss", d_real, d_fake)?;
        let lr = clamped_log(g, d_real);
        // clamp before 1 - p so both branches see the same clamped value
        let lo = T::from_f64_lossy(P_MIN);
        let hi = T::from_f64_lossy(1.0 - P_MIN);
        let cf = g.clamp(d_fake, lo, hi);
        let om = one_minus(g, cf);
        let lf = g.log(om);
        let sr = g.sum(lr);
        let sf = g.sum(lf);
        let total = g.add(sr, sf)?;
        Ok(g.scale(total, -inv::<T>(m)))
    }

    /// [`discriminator`] for one output column holding `m` real rows followed
    /// by `m` fake rows, so a single forward pass covers both halves.
    pub fn discriminator_stacked<T: Scalar>(g: &mut Graph<T>, d_all: NodeId, m: usize) -> Result<NodeId, ObjectiveError> {
        let shape = g.value(d_all).shape().to_vec();
        if m == 0 {
            return Err(ObjectiveError::Empty("discriminator_loss"));
        }
        if shape.first() != Some(&(2 * m)) || g.value(d_all).numel() != 2 * m {
            return Err(ObjectiveError::Shape {
                op: "discriminator_loss",
                left: shape,
                right: vec![2 * m, 1],
            });
        }
        let real = Tensor::from_fn(shape.clone(), |i| if i < m { T::one() } else { T::zero() });
        let fake = Tensor::from_fn(shape, |i| if i < m { T::zero() } else { T::one() });
        let lo = T::from_f64_lossy(P_MIN);
        let hi = T::from_f64_lossy(1.0 - P_MIN);
        let c = g.clamp(d_all, lo, hi);
        let lr = g.log(c);
        let lr = g.mul_const(lr, real)?;
        let om = one_minus(g, c);
        let lf = g.log(om);
        let lf = g.mul_const(lf, fake)?;
        let sr = g.sum(lr);
        let sf = g.sum(lf);
        let total = g.add(sr, sf)?;
        Ok(g.scale(total, -inv::<T>(m)))
    }

    pub fn generator_adv<T: Scalar>(g: &mut Graph<T>, d_fake: NodeId) -> Result<NodeId, ObjectiveError> {
        let m = g.value(d_fake).batch();
        if m == 0 {
            return Err(ObjectiveError::Empty("generator_adv_loss"));
        }
        let l = clamped_log(g, d_fake);
        let s = g.sum(l);
        Ok(g.scale(s, -inv::<T>(m)))
    }

    pub fn penalty<T: Scalar>(g: &mut Graph<T>, kind: Penalty, weights: &[NodeId]) -> Result<NodeId, ObjectiveError> {
        let mut acc: Option<NodeId> = None;
        for &w in weights {
            let t = match kind {
                Penalty::L1 => g.abs(w),
                Penalty::L2 => g.square(w),
            };
            let s = g.sum(t);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => g.constant(Tensor::scalar(T::zero())),
        })
    }

    /// `data + lambda * penalty`; returns `data` itself when `lambda == 0`.
    pub fn combined<T: Scalar>(g: &mut Graph<T>, data: NodeId, penalty: NodeId, lambda: f64) -> Result<NodeId, ObjectiveError> {
        if lambda < 0.0 || lambda.is_nan() {
            return Err(ObjectiveError::NegativeLambda(lambda));
        }
        if lambda == 0.0 {
            return Ok(data);
        }
        let p = g.scale(penalty, T::from_f64_lossy(lambda));
        Ok(g.add(data, p)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn reconstruction_batch_mean() {
        // per-sample losses 2 and 4
        let x = t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]);
        let r = t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(reconstruction_loss(&x, &r).unwrap().value, 3.0);
        assert_eq!(reconstruction_loss(&x, &x).unwrap().value, 0.0);
        let one = t(&[1, 3], &[1.0, 0.0, 0.0]);
        assert_eq!(reconstruction_loss(&one, &Tensor::zeros([1, 3])).unwrap().value, 1.0);
        assert!(matches!(
            reconstruction_loss(&x, &one),
            Err(ObjectiveError::Shape { .. })
        ));
    }

    #[test]
    fn discriminator_hand_value() {
        // -(ln .9 + ln .8 + ln .8 + ln .9) / 2
        let v = discriminator_loss(&[0.9, 0.8], &[0.2, 0.1]).unwrap().value;
        let want = -((0.9f64).ln() + 0.8f64.ln() + 0.8f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.32850).abs() < 5e-6);
        assert!((discriminator_loss(&[0.5; 3], &[0.5; 3]).unwrap().value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(discriminator_loss(&[1.0], &[0.0]).unwrap().value < 1e-6);
        assert!(discriminator_loss(&[], &[]).is_err());
    }

    #[test]
    fn generator_hand_value() {
        let v = generator_adv_loss(&[0.2, 0.1]).unwrap().value;
        assert!((v - 1.95601).abs() < 5e-6);
        assert!((generator_adv_loss(&[0.5]).unwrap().value - 2f64.ln()).abs() < 1e-12);
        assert!(generator_adv_loss(&[1.0]).unwrap().value < 1e-6);
    }

    #[test]
    fn classification_values() {
        let y = t(&[1, 3], &[0.0, 0.0, 1.0]);
        let f = t(&[1, 3], &[1.0 / 3.0; 3]);
        assert!((classification_loss(&y, &f).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(classification_loss(&y, &y).unwrap().value, 0.0);
        assert_eq!(classification_loss(&y, &Tensor::zeros([1, 3])).unwrap().value, 1.0);
        let bad = t(&[1, 3], &[0.5, 0.5, 0.0]);
        assert_eq!(classification_loss(&bad, &f), Err(ObjectiveError::NotOneHot(0)));
    }

    #[test]
    fn penalties_and_combination() {
        let th = t(&[3], &[1.0, -2.0, 0.0]);
        let l1 = l1_penalty([&th]);
        let l2 = l2_penalty([&th]);
        assert_eq!((l1.value, l2.value), (3.0, 5.0));
        let zero = LossValue {
            kind: LossKind::Classification,
            value: 0.0,
        };
        assert_eq!(combined_objective(zero, l1, 0.5).unwrap().value, 1.5);
        assert_eq!(combined_objective(zero, l2, 0.5).unwrap().value, 2.5);
        let one = LossValue { value: 1.0, ..zero };
        let three = LossValue { value: 3.0, ..l1 };
        assert!((combined_objective(one, three, 0.001).unwrap().value - 1.003).abs() < 1e-12);
        assert_eq!(combined_objective(one, three, 0.0).unwrap().value, 1.0);
        assert!(combined_objective(one, three, -1.0).is_err());
    }

    #[test]
    fn optimal_discriminator_values() {
        assert_eq!(optimal_discriminator(0.2, 0.2).unwrap(), 0.5);
        assert_eq!(optimal_discriminator(0.4, 0.0).unwrap(), 1.0);
        assert!((optimal_discriminator(0.3, 0.1).unwrap() - 0.75).abs() < 1e-12);
        assert!(optimal_discriminator(0.0, 0.0).is_err());
    }

    #[test]
    fn graph_route_matches_values() {
        let mut g = Graph::<f64>::new();
        let dr = g.constant(t(&[2, 1], &[0.9, 0.8]));
        let df = g.constant(t(&[2, 1], &[0.2, 0.1]));
        let l = graph::discriminator(&mut g, dr, df).unwrap();
        let want = discriminator_loss(&[0.9, 0.8], &[0.2, 0.1]).unwrap().value;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        let ga = graph::generator_adv(&mut g, df).unwrap();
        assert!((g.value(ga).item() - 1.95601).abs() < 5e-6);
        let all = g.constant(t(&[4, 1], &[0.9, 0.8, 0.2, 0.1]));
        let st = graph::discriminator_stacked(&mut g, all, 2).unwrap();
        assert!((g.value(st).item() - want).abs() < 1e-12);
    }
}
