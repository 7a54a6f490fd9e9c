use std::path::Path;

use serde::{Deserialize, Serialize};

use super::session::{epoch_seed, Session};
use super::{param_reduction, RunRecord, TrainConfig, TrainData};
use crate::losses::{distillation_loss, mutual_node, DistillConfig, DistillHead};
use crate::models::{count_params, load_checkpoint, Model, ModelSpec};
use crate::nn::{Ctx, Init};
use crate::tensor::{Scalar, Tensor, Var};
use crate::{Error, Result};

const HEAD_SEED: u64 = 0xd157_111e;

/// Fine-tunes every layer of a source-trained model on the target data.
pub fn sda_adapt<T: Scalar>(
    pretrained: &Model<T>,
    expect: &ModelSpec,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, RunRecord)> {
    cfg.validate()?;
    if pretrained.spec != *expect {
        return Err(Error::SpecMismatch(format!(
            "pretrained model is {} but {} is being adapted",
            pretrained.spec.label(),
            expect.label()
        )));
    }
    let mut model = pretrained.clone();
    model.store.set_all_trainable();
    let source = pretrained.store.digest();
    let mut s = Session::begin(&mut model, data, cfg, "sda")?;
    for epoch in 1..=cfg.epochs {
        s.start_epoch();
        for idx in data.train().batches(cfg.batch_size, Some(epoch_seed(cfg.seed, epoch))) {
            s.step(&idx, |_, _| Ok(Vec::new()))?;
        }
        s.end_epoch()?;
    }
    let mut record = s.finish();
    record.source_checkpoint = Some(source);
    Ok((model, record))
}

/// [`sda_adapt`] starting from a checkpoint file.
pub fn sda_adapt_checkpoint<T: Scalar>(
    path: &Path,
    expect: &ModelSpec,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, RunRecord)> {
    let (pretrained, meta) = load_checkpoint::<T>(path, Some(expect))?;
    let (model, mut record) = sda_adapt(&pretrained, expect, data, cfg)?;
    record.source_checkpoint = Some(meta.weights_digest);
    record.extra = serde_json::json!({ "source_path": path.display().to_string(), "source_config_hash": meta.config_hash });
    Ok((model, record))
}

fn teacher_vars<T: Scalar>(cx: &mut Ctx<'_, T>, pyramid: &[Tensor<T>]) -> Vec<Var> {
    pyramid.iter().map(|t| cx.graph.constant(t.clone())).collect()
}

fn attach_head<T: Scalar>(student: &mut Model<T>, teacher: &Model<T>, dcfg: &DistillConfig) -> Result<DistillHead> {
    let (sc, tc) = (student.pyramid_channels(), teacher.pyramid_channels());
    if student.spec.input_size != teacher.spec.input_size {
        return Err(Error::Shape(format!(
            "student takes {} px tiles, teacher {} px",
            student.spec.input_size, teacher.spec.input_size
        )));
    }
    let seed = student.seed ^ HEAD_SEED;
    DistillHead::new(&mut Init::new(&mut student.store, seed), &sc, &tc, dcfg)
}

/// Trains `student` under a frozen teacher with
/// `alpha * supervised + (1 - alpha) * distillation`.
pub fn kd_distill<T: Scalar>(
    teacher: &Model<T>,
    mut student: Model<T>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
) -> Result<(Model<T>, RunRecord)> {
    cfg.validate()?;
    dcfg.validate()?;
    let mut frozen = teacher.clone();
    let model_len = student.store.len();
    let alpha = dcfg.alpha;
    let mut s = Session::begin(&mut student, data, cfg, "kd")?;
    let head = attach_head(s.model, &frozen, dcfg)?;
    for epoch in 1..=cfg.epochs {
        s.start_epoch();
        for idx in data.train().batches(cfg.batch_size, Some(epoch_seed(cfg.seed, epoch))) {
            let pending = s.forward(&idx)?;
            if alpha == 1.0 {
                s.complete(pending, 1.0, |_, _| Ok(Vec::new()))?;
                continue;
            }
            let (x, _) = data.train().batch::<T>(&idx);
            let tp = frozen.pyramid(&x)?;
            s.complete(pending, alpha, |cx, out| {
                let tv = teacher_vars(cx, &tp);
                let d = distillation_loss(cx, &head, &out.pyramid, &tv, dcfg)?;
                Ok(vec![(d, 1.0 - alpha)])
            })?;
        }
        s.end_epoch()?;
    }
    let mut record = s.finish();
    student.store.truncate(model_len);
    let tp = count_params(teacher);
    record.teacher = Some(format!("{}@{}", teacher.spec.label(), teacher.store.digest()));
    record.teacher_params = Some(tp);
    record.par_red_pct = Some(param_reduction(record.params, tp));
    record.extra = serde_json::to_value(dcfg)?;
    Ok((student, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmlWeights {
    pub sup: f64,
    pub mutual: f64,
    pub kd: f64,
}

impl Default for DmlWeights {
    fn default() -> Self {
        DmlWeights { sup: 1.0, mutual: 0.5, kd: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmlUpdate {
    /// Both students step on the same batch from each other's pre-update predictions.
    #[default]
    Simultaneous,
    /// Student A steps first; student B then sees A's updated predictions.
    Alternating,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmlConfig {
    pub weights: DmlWeights,
    pub update: DmlUpdate,
    pub distill: DistillConfig,
}

/// Mutual learning of exactly two students, optionally also distilling from a teacher.
pub fn dml_train<T: Scalar>(
    students: Vec<Model<T>>,
    teacher: Option<&Model<T>>,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    dml: &DmlConfig,
) -> Result<Vec<(Model<T>, RunRecord)>> {
    cfg.validate()?;
    let n = students.len();
    let [mut a, mut b]: [Model<T>; 2] =
        students.try_into().map_err(|_| Error::Config(format!("mutual learning takes exactly two students, got {n}")))?;
    let w = dml.weights;
    let w_kd = if teacher.is_some() { w.kd } else { 0.0 };
    if w_kd > 0.0 {
        dml.distill.validate()?;
    }
    let mut frozen = teacher.cloned();
    let lens = (a.store.len(), b.store.len());
    let labels = (a.spec.label(), b.spec.label());
    let mut sa = Session::begin(&mut a, data, cfg, "dml")?;
    let mut sb = Session::begin(&mut b, data, cfg, "dml")?;
    let heads = match (&frozen, w_kd > 0.0) {
        (Some(t), true) => Some((attach_head(sa.model, t, &dml.distill)?, attach_head(sb.model, t, &dml.distill)?)),
        _ => None,
    };
    for epoch in 1..=cfg.epochs {
        sa.start_epoch();
        sb.start_epoch();
        for idx in data.train().batches(cfg.batch_size, Some(epoch_seed(cfg.seed, epoch))) {
            let tp = match (&mut frozen, &heads) {
                (Some(t), Some(_)) => Some(t.pyramid(&data.train().batch::<T>(&idx).0)?),
                _ => None,
            };
            let terms = |cx: &mut Ctx<'_, T>, own: Var, pyr: &[Var], peer: &Tensor<T>, head: Option<&DistillHead>| -> Result<Vec<(Var, f64)>> {
                let mut out = Vec::new();
                if w.mutual != 0.0 {
                    out.push((mutual_node(&mut cx.graph, own, peer)?, w.mutual));
                }
                if let (Some(h), Some(tp)) = (head, &tp) {
                    let tv = teacher_vars(cx, tp);
                    out.push((distillation_loss(cx, h, pyr, &tv, &dml.distill)?, w_kd));
                }
                Ok(out)
            };
            let pa = sa.forward(&idx)?;
            let pb = sb.forward(&idx)?;
            let b_probs = pb.graph.value(pb.out.probs).clone();
            match dml.update {
                DmlUpdate::Simultaneous => {
                    let a_probs = pa.graph.value(pa.out.probs).clone();
                    sa.complete(pa, w.sup, |cx, out| terms(cx, out.probs, &out.pyramid, &b_probs, heads.as_ref().map(|h| &h.0)))?;
                    sb.complete(pb, w.sup, |cx, out| terms(cx, out.probs, &out.pyramid, &a_probs, heads.as_ref().map(|h| &h.1)))?;
                }
                DmlUpdate::Alternating => {
                    sa.complete(pa, w.sup, |cx, out| terms(cx, out.probs, &out.pyramid, &b_probs, heads.as_ref().map(|h| &h.0)))?;
                    let a_probs = sa.model.predict_batch_stats(&data.train().batch::<T>(&idx).0)?;
                    sb.complete(pb, w.sup, |cx, out| terms(cx, out.probs, &out.pyramid, &a_probs, heads.as_ref().map(|h| &h.1)))?;
                }
            }
        }
        sa.end_epoch()?;
        sb.end_epoch()?;
    }
    let mut ra = sa.finish();
    let mut rb = sb.finish();
    a.store.truncate(lens.0);
    b.store.truncate(lens.1);
    for (r, peer) in [(&mut ra, &labels.1), (&mut rb, &labels.0)] {
        r.extra = serde_json::json!({ "peer": peer, "weights": w, "update": dml.update, "distill": dml.distill });
        if let Some(t) = teacher {
            let tp = count_params(t);
            r.teacher = Some(format!("{}@{}", t.spec.label(), t.store.digest()));
            r.teacher_params = Some(tp);
            r.par_red_pct = Some(param_reduction(r.params, tp));
        }
    }
    Ok(vec![(a, ra), (b, rb)])
}
