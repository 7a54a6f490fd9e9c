//! Supervised segmentation losses, feature distillation and mutual learning.
//!
//! Every supervised loss returns its value together with the gradient with
//! respect to the predicted probabilities, so it can be attached to a graph
//! as a single custom node.

mod distill;

pub use distill::{distillation_loss, DistillConfig, DistillHead};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const SMOOTH: f64 = 1.0;

/// Ground truth `y` and predicted probabilities `p`, flattened over the batch.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a, T> {
    pub y: &'a [T],
    pub p: &'a [T],
}

impl<'a, T: Scalar> MaskPair<'a, T> {
    pub fn new(y: &'a [T], p: &'a [T]) -> Result<Self> {
        if y.len() != p.len() {
            return Err(Error::Shape(format!("ground truth has {} values, prediction {}", y.len(), p.len())));
        }
        if y.is_empty() {
            return Err(Error::Shape("empty mask pair".into()));
        }
        Ok(MaskPair { y, p })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// A loss value and its gradient with respect to `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    fn plus(mut self, other: LossValue<T>) -> Self {
        self.value += other.value;
        for (a, b) in self.grad.iter_mut().zip(other.grad) {
            *a += b;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Bce,
    BceDice,
    BceJaccard,
    FocalDice,
    FocalJaccard,
    Jaccard,
    Dice,
    Focal,
    Total,
}

impl LossName {
    pub const ALL: [LossName; 9] = [
        LossName::Bce,
        LossName::BceDice,
        LossName::BceJaccard,
        LossName::FocalDice,
        LossName::FocalJaccard,
        LossName::Jaccard,
        LossName::Dice,
        LossName::Focal,
        LossName::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossName::Bce => "bce",
            LossName::BceDice => "bce_dice",
            LossName::BceJaccard => "bce_jaccard",
            LossName::FocalDice => "focal_dice",
            LossName::FocalJaccard => "focal_jaccard",
            LossName::Jaccard => "jaccard",
            LossName::Dice => "dice",
            LossName::Focal => "focal",
            LossName::Total => "total",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            LossName::Bce => "BCE",
            LossName::BceDice => "BCE Dice",
            LossName::BceJaccard => "BCE Jaccard",
            LossName::FocalDice => "Binary Focal Dice",
            LossName::FocalJaccard => "Binary Focal Jaccard",
            LossName::Jaccard => "Jaccard",
            LossName::Dice => "Dice",
            LossName::Focal => "Binary Focal",
            LossName::Total => "Total Loss",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_lowercase().replace([' ', '-'], "_");
        let k = match k.as_str() {
            "binary_focal" => "focal",
            "total_loss" => "total",
            "binary_focal_dice" => "focal_dice",
            "binary_focal_jaccard" => "focal_jaccard",
            other => other,
        }
        .to_string();
        LossName::ALL.into_iter().find(|n| n.name() == k).ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub name: LossName,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { name: LossName::Dice, focal_gamma: 2.0, focal_alpha: 0.25, smooth: SMOOTH }
    }
}

impl LossConfig {
    pub fn named(name: LossName) -> Self {
        LossConfig { name, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal gamma {} / alpha {} out of range", self.focal_gamma, self.focal_alpha)));
        }
        if self.smooth != SMOOTH {
            return Err(Error::Config(format!("smooth is fixed at 1, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// `1 - (2 sum(yp) + 1) / (sum(y) + sum(p) + 1)` over every pixel of the batch.
pub fn dice_loss<T: Scalar>(pair: MaskPair<'_, T>) -> LossValue<T> {
    let s = T::c(SMOOTH);
    let (mut i, mut sy, mut sp) = (T::zero(), T::zero(), T::zero());
    for (&y, &p) in pair.y.iter().zip(pair.p) {
        i += y * p;
        sy += y;
        sp += p;
    }
    let num = T::c(2.0) * i + s;
    let den = sy + sp + s;
    let value = T::one() - num / den;
    let den2 = den * den;
    let grad = pair.y.iter().map(|&y| -(T::c(2.0) * y * den - num) / den2).collect();
    LossValue { value, grad }
}

/// `1 - (sum(yp) + 1) / (sum(y) + sum(p) - sum(yp) + 1)`.
pub fn jaccard_loss<T: Scalar>(pair: MaskPair<'_, T>) -> LossValue<T> {
    let s = T::c(SMOOTH);
    let (mut i, mut sy, mut sp) = (T::zero(), T::zero(), T::zero());
    for (&y, &p) in pair.y.iter().zip(pair.p) {
        i += y * p;
        sy += y;
        sp += p;
    }
    let num = i + s;
    let den = sy + sp - i + s;
    let value = T::one() - num / den;
    let den2 = den * den;
    let grad = pair.y.iter().map(|&y| -(y * den - num * (T::one() - y)) / den2).collect();
    LossValue { value, grad }
}

fn clamp_p<T: Scalar>(p: T) -> T {
    let eps = T::c(BCE_EPS);
    p.max(eps).min(T::one() - eps)
}

/// Mean binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Scalar>(pair: MaskPair<'_, T>) -> LossValue<T> {
    let m = T::c(pair.len() as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pair.len());
    for (&y, &p) in pair.y.iter().zip(pair.p) {
        let p = clamp_p(p);
        let q = T::one() - p;
        value += -(y * p.ln() + (T::one() - y) * q.ln());
        grad.push((-(y / p) + (T::one() - y) / q) / m);
    }
    LossValue { value: value / m, grad }
}

/// Mean of `-[a y (1-p)^g ln p + (1-a)(1-y) p^g ln(1-p)]`.
pub fn binary_focal_loss<T: Scalar>(pair: MaskPair<'_, T>, gamma: f64, alpha: f64) -> LossValue<T> {
    let m = T::c(pair.len() as f64);
    let (g, a) = (T::c(gamma), T::c(alpha));
    let one = T::one();
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pair.len());
    for (&y, &p) in pair.y.iter().zip(pair.p) {
        let p = clamp_p(p);
        let q = one - p;
        let (lp, lq) = (p.ln(), q.ln());
        let qg = q.powf(g);
        let pg = p.powf(g);
        value += -(a * y * qg * lp + (one - a) * (one - y) * pg * lq);
        // d/dp of each term; the g * x^(g - 1) factors vanish with g
        let dq = if gamma == 0.0 { T::zero() } else { g * q.powf(g - one) };
        let dp = if gamma == 0.0 { T::zero() } else { g * p.powf(g - one) };
        let d_pos = a * y * (-dq * lp + qg / p);
        let d_neg = (one - a) * (one - y) * (dp * lq - pg / q);
        grad.push(-(d_pos + d_neg) / m);
    }
    LossValue { value: value / m, grad }
}

/// Any of the nine named losses; composites are unweighted sums.
pub fn combined_loss<T: Scalar>(cfg: &LossConfig, pair: MaskPair<'_, T>) -> LossValue<T> {
    let focal = || binary_focal_loss(pair, cfg.focal_gamma, cfg.focal_alpha);
    match cfg.name {
        LossName::Bce => bce_loss(pair),
        LossName::Dice => dice_loss(pair),
        LossName::Jaccard => jaccard_loss(pair),
        LossName::Focal => focal(),
        LossName::BceDice => bce_loss(pair).plus(dice_loss(pair)),
        LossName::BceJaccard => bce_loss(pair).plus(jaccard_loss(pair)),
        LossName::FocalDice => focal().plus(dice_loss(pair)),
        LossName::FocalJaccard => focal().plus(jaccard_loss(pair)),
        LossName::Total => dice_loss(pair).plus(focal()),
    }
}

/// Supervised loss of probability node `probs` against `target`, as a graph node.
pub fn supervised_node<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    if g.shape(probs) != target.shape() {
        return Err(Error::Shape(format!("prediction {} vs target {}", g.shape(probs), target.shape())));
    }
    let lv = combined_loss(cfg, MaskPair::new(target.data(), g.value(probs).data())?);
    let grad = Tensor::from_vec(target.shape(), lv.grad);
    Ok(g.custom_scalar(probs, lv.value, grad))
}

/// Symmetric Bernoulli divergence `0.5 * (KL(a||b) + KL(b||a))` per pixel,
/// averaged over pixels, with both maps clamped to `[eps, 1 - eps]`.
pub fn mutual_loss<T: Scalar>(a: &[T], b: &[T]) -> Result<LossValue<T>> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mutual loss operands have {} and {} values", a.len(), b.len())));
    }
    let m = T::c(a.len() as f64);
    let half = T::c(0.5);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(a.len());
    for (&pa, &pb) in a.iter().zip(b) {
        let (pa, pb) = (clamp_p(pa), clamp_p(pb));
        let la = (pa / (T::one() - pa)).ln();
        let lb = (pb / (T::one() - pb)).ln();
        value += half * (pa - pb) * (la - lb);
        grad.push(half * ((la - lb) + (pa - pb) / (pa * (T::one() - pa))) / m);
    }
    Ok(LossValue { value: value / m, grad })
}

/// Mutual loss of `own` against a fixed peer map, as a graph node; no gradient
/// reaches the peer.
pub fn mutual_node<T: Scalar>(g: &mut Graph<T>, own: Var, peer: &Tensor<T>) -> Result<Var> {
    if g.shape(own) != peer.shape() {
        return Err(Error::Shape(format!("prediction {} vs peer {}", g.shape(own), peer.shape())));
    }
    let lv = mutual_loss(g.value(own).data(), peer.data())?;
    let grad = Tensor::from_vec(peer.shape(), lv.grad);
    Ok(g.custom_scalar(own, lv.value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair<'a>(y: &'a [f64], p: &'a [f64]) -> MaskPair<'a, f64> {
        MaskPair::new(y, p).unwrap()
    }

    #[test]
    fn dice_closed_forms() {
        let ones = [1.0; 16];
        assert_eq!(dice_loss(pair(&ones, &ones)).value, 0.0);
        let zeros = [0.0; 16];
        assert_eq!(dice_loss(pair(&zeros, &zeros)).value, 0.0);
        let v = dice_loss(pair(&[1.0; 4], &[0.0; 4])).value;
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn jaccard_closed_forms() {
        assert_eq!(jaccard_loss(pair(&[1.0; 9], &[1.0; 9])).value, 0.0);
        let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let p = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!((jaccard_loss(pair(&y, &p)).value - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_and_focal_values() {
        assert!((bce_loss(pair(&[1.0, 0.0], &[0.5, 0.5])).value - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(pair(&[1.0, 0.0], &[1.0, 0.0])).value <= -(1.0 - BCE_EPS).ln() + 1e-12);
        let f1 = binary_focal_loss(pair(&[1.0], &[0.5]), 2.0, 0.25).value;
        assert!((f1 - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let f0 = binary_focal_loss(pair(&[0.0], &[0.5]), 2.0, 0.25).value;
        assert!((f0 - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let y = [1.0, 0.0, 1.0];
        let p = [0.2, 0.7, 0.9];
        let half_bce = 0.5 * bce_loss(pair(&y, &p)).value;
        assert!((binary_focal_loss(pair(&y, &p), 0.0, 0.5).value - half_bce).abs() < 1e-12);
    }

    #[test]
    fn composites_are_sums() {
        let y = [1.0, 0.0, 1.0, 1.0];
        let p = [0.3, 0.6, 0.8, 0.99];
        let cfg = LossConfig::named(LossName::BceDice);
        assert_eq!(combined_loss(&cfg, pair(&y, &p)).value, bce_loss(pair(&y, &p)).value + dice_loss(pair(&y, &p)).value);
        let t = combined_loss(&LossConfig::named(LossName::Total), pair(&[1.0; 4], &[1.0; 4])).value;
        assert!(t.abs() < 1e-12);
    }

    #[test]
    fn mutual_closed_form_and_symmetry() {
        let v = mutual_loss(&[0.9], &[0.1]).unwrap().value;
        assert!((v - 0.8 * 9f64.ln()).abs() < 1e-12);
        let a = [0.2, 0.7, 0.55];
        let b = [0.9, 0.1, 0.5];
        assert_eq!(mutual_loss(&a, &b).unwrap().value, mutual_loss(&b, &a).unwrap().value);
        assert_eq!(mutual_loss(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(MaskPair::new(&[1.0f64, 0.0], &[0.5]).is_err());
        assert!(mutual_loss(&[0.5f64], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_names_parse() {
        for n in LossName::ALL {
            assert_eq!(n.name().parse::<LossName>().unwrap(), n);
            assert_eq!(n.label().parse::<LossName>().unwrap(), n);
        }
        assert!("hinge".parse::<LossName>().is_err());
    }
}
