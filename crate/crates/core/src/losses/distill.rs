use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Ctx, Init};
use crate::tensor::{Scalar, Shape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the supervised dice term; `1 - alpha` goes to distillation.
    pub alpha: f64,
    pub level_weights: [f64; 5],
    /// Scale every projected feature map to unit RMS per sample before comparing.
    pub normalize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { alpha: 0.5, level_weights: [0.2; 5], normalize: true }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("distillation alpha {} outside [0, 1]", self.alpha)));
        }
        let s: f64 = self.level_weights.iter().sum();
        if self.level_weights.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("level weights must be non-negative and sum to 1, got {s}")));
        }
        Ok(())
    }
}

/// Learned bias-free 1x1 projections from student to teacher channels, one per
/// positively weighted level.
#[derive(Clone, Debug)]
pub struct DistillHead {
    pub projections: Vec<Option<Conv2d>>,
}

impl DistillHead {
    /// Projections start as the identity when channel counts agree.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, student: &[usize], teacher: &[usize], cfg: &DistillConfig) -> Result<Self> {
        if student.len() != cfg.level_weights.len() || teacher.len() != cfg.level_weights.len() {
            return Err(Error::Shape(format!(
                "distillation needs {} levels, got student {} / teacher {}",
                cfg.level_weights.len(),
                student.len(),
                teacher.len()
            )));
        }
        let projections = init.scoped("distill", |init| {
            (0..student.len())
                .map(|i| {
                    if cfg.level_weights[i] <= 0.0 {
                        return None;
                    }
                    let (cs, ct) = (student[i], teacher[i]);
                    Some(init.scoped(format!("level{i}"), |init| {
                        if cs == ct {
                            let mut w = Tensor::zeros(Shape::new(ct, cs, 1, 1));
                            for c in 0..cs {
                                w.data_mut()[c * cs + c] = T::one();
                            }
                            let weight = init.tensor("weight", w);
                            Conv2d { weight, bias: None, cin: cs, cout: ct, k: 1, stride: 1, depthwise: false }
                        } else {
                            Conv2d::new(init, cs, ct, 1, 1, false)
                        }
                    }))
                })
                .collect()
        });
        Ok(DistillHead { projections })
    }

    pub fn param_count(&self) -> usize {
        self.projections.iter().flatten().map(|c| c.param_count()).sum()
    }
}

/// Weighted sum over levels of the mean squared difference between projected
/// student features and teacher features.
pub fn distillation_loss<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    head: &DistillHead,
    student: &[Var],
    teacher: &[Var],
    cfg: &DistillConfig,
) -> Result<Var> {
    let levels = cfg.level_weights.len();
    if student.len() != levels || teacher.len() != levels || head.projections.len() != levels {
        return Err(Error::Shape(format!(
            "level count mismatch: student {}, teacher {}, expected {levels}",
            student.len(),
            teacher.len()
        )));
    }
    let eps = T::c(1e-12);
    let mut terms = Vec::new();
    for i in 0..levels {
        let w = cfg.level_weights[i];
        if w <= 0.0 {
            continue;
        }
        let proj = head.projections[i].as_ref().ok_or_else(|| Error::Config(format!("no projection for weighted level {i}")))?;
        let s = proj.forward(cx, student[i]);
        let t = teacher[i];
        let (ss, ts) = (cx.graph.shape(s), cx.graph.shape(t));
        if ss != ts {
            return Err(Error::Shape(format!("level {i}: projected student {ss} vs teacher {ts}")));
        }
        let (s, t) = if cfg.normalize { (cx.graph.rms_normalize(s, eps), cx.graph.rms_normalize(t, eps)) } else { (s, t) };
        terms.push((cx.graph.mse(s, t), T::c(w)));
    }
    Ok(cx.graph.lincomb(&terms))
}
