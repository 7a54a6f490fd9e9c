use std::time::Instant;

use super::{evaluate, median, plateau_step, EpochRecord, PlateauState, RunRecord, TrainConfig, TrainData, TIMING_WARMUP};
use crate::losses::supervised_node;
use crate::models::{count_params, Forward, Model};
use crate::nn::Ctx;
use crate::optim::Optimizer;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// A forward pass whose loss has not been built yet.
pub(crate) struct Pending<T: Scalar> {
    pub graph: Graph<T>,
    pub out: Forward,
    pub y: Tensor<T>,
    started: Instant,
}

/// Shared epoch loop state: optimiser, plateau rule, best-epoch weights and timing.
pub(crate) struct Session<'m, 'd, T: Scalar> {
    pub model: &'m mut Model<T>,
    data: TrainData<'d>,
    cfg: TrainConfig,
    pub opt: Optimizer<T>,
    plateau: PlateauState,
    pub record: RunRecord,
    /// Entries belonging to the model proper; later ones are auxiliary heads.
    model_len: usize,
    best_iou: f64,
    best_values: Vec<Tensor<T>>,
    times: Vec<f64>,
    epoch: usize,
    epoch_losses: Vec<f64>,
    epoch_times: Vec<f64>,
}

impl<'m, 'd, T: Scalar> Session<'m, 'd, T> {
    /// Scores the untrained weights as epoch 0.
    pub fn begin(model: &'m mut Model<T>, data: TrainData<'d>, cfg: &TrainConfig, method: &str) -> Result<Self> {
        if data.train().size != model.spec.input_size {
            return Err(Error::Shape(format!(
                "tiles are {} px but the model expects {} px",
                data.train().size,
                model.spec.input_size
            )));
        }
        let model_len = model.store.len();
        let ev = evaluate(model, data.val(), &cfg.loss)?;
        let digest = model.store.digest_first(model_len);
        let first = EpochRecord {
            epoch: 0,
            lr: cfg.lr,
            train_loss: None,
            val: ev.scores,
            val_macro: ev.macro_scores,
            val_loss: ev.loss,
            ms_per_iter: None,
            weights_digest: digest.clone(),
        };
        let record = RunRecord {
            method: method.to_string(),
            model_spec: model.spec.clone(),
            model_seed: model.seed,
            params: count_params(model),
            config: cfg.clone(),
            optimizer_hparams: crate::optim::OptimizerHparams::defaults(cfg.optimizer),
            train_set: data.train().name.clone(),
            val_set: data.val().name.clone(),
            epochs: vec![first],
            best_epoch: 0,
            ms_per_iter: None,
            weights_digest: digest,
            checkpoint: None,
            source_checkpoint: None,
            teacher: None,
            teacher_params: None,
            par_red_pct: None,
            extra: serde_json::Value::Null,
        };
        let plateau = PlateauState::new(cfg.lr, cfg.plateau);
        log::info!("{} {}: epoch 0 val IoU {:.4}", method, model.spec.label(), ev.scores.iou);
        Ok(Session {
            best_values: model.store.snapshot(),
            model,
            data,
            cfg: cfg.clone(),
            opt: Optimizer::new(cfg.optimizer, cfg.lr),
            plateau,
            record,
            model_len,
            best_iou: ev.scores.iou,
            times: Vec::new(),
            epoch: 0,
            epoch_losses: Vec::new(),
            epoch_times: Vec::new(),
        })
    }

    pub fn start_epoch(&mut self) {
        self.epoch += 1;
        self.epoch_losses.clear();
        self.epoch_times.clear();
    }

    /// Train-mode forward pass on the given training tiles.
    pub fn forward(&mut self, idx: &[usize]) -> Result<Pending<T>> {
        let started = Instant::now();
        let (x, y) = self.data.train().batch::<T>(idx);
        let (cx, out) = self.model.forward(&x, true)?;
        Ok(Pending { graph: cx.into_graph(), out, y, started })
    }

    /// Builds `sup_weight * supervised + sum(extra)`, back-propagates and updates weights.
    pub fn complete(
        &mut self,
        p: Pending<T>,
        sup_weight: f64,
        extra: impl FnOnce(&mut Ctx<'_, T>, &Forward) -> Result<Vec<(Var, f64)>>,
    ) -> Result<f64> {
        self.model.store.zero_grads();
        let mut cx = Ctx::resume(&mut self.model.store, p.graph, true);
        let sup = supervised_node(&mut cx.graph, p.out.probs, &p.y, &self.cfg.loss)?;
        let extra = extra(&mut cx, &p.out)?;
        let loss = if extra.is_empty() && sup_weight == 1.0 {
            sup
        } else {
            let mut terms = Vec::with_capacity(extra.len() + 1);
            if sup_weight != 0.0 {
                terms.push((sup, T::c(sup_weight)));
            }
            terms.extend(extra.into_iter().map(|(v, w)| (v, T::c(w))));
            cx.graph.lincomb(&terms)
        };
        let value = cx.graph.value(loss).item().f64();
        if !value.is_finite() {
            let mut record = self.record.clone();
            record.best_epoch = self.best_epoch();
            return Err(Error::Diverged { epoch: self.epoch, record: Box::new(record) });
        }
        cx.backward(loss);
        drop(cx);
        self.opt.step(&mut self.model.store);
        let ms = p.started.elapsed().as_secs_f64() * 1000.0;
        self.times.push(ms);
        self.epoch_times.push(ms);
        self.epoch_losses.push(value);
        Ok(value)
    }

    /// Forward, loss and update in one go.
    pub fn step(
        &mut self,
        idx: &[usize],
        extra: impl FnOnce(&mut Ctx<'_, T>, &Forward) -> Result<Vec<(Var, f64)>>,
    ) -> Result<f64> {
        let p = self.forward(idx)?;
        self.complete(p, 1.0, extra)
    }

    fn best_epoch(&self) -> usize {
        self.record.best_epoch
    }

    /// Validation, plateau rule and best-weight bookkeeping for the finished epoch.
    pub fn end_epoch(&mut self) -> Result<()> {
        let ev = evaluate(self.model, self.data.val(), &self.cfg.loss)?;
        let n = self.epoch_losses.len();
        let train_loss = (n > 0).then(|| self.epoch_losses.iter().sum::<f64>() / n as f64);
        self.record.epochs.push(EpochRecord {
            epoch: self.epoch,
            lr: self.opt.lr,
            train_loss,
            val: ev.scores,
            val_macro: ev.macro_scores,
            val_loss: ev.loss,
            ms_per_iter: median(&self.epoch_times),
            weights_digest: self.model.store.digest_first(self.model_len),
        });
        if ev.scores.iou > self.best_iou {
            self.best_iou = ev.scores.iou;
            self.best_values = self.model.store.snapshot();
            self.record.best_epoch = self.epoch;
        }
        let lr = plateau_step(&mut self.plateau, ev.scores.iou);
        if lr != self.opt.lr {
            log::info!("epoch {}: val IoU plateaued, lr {} -> {}", self.epoch, self.opt.lr, lr);
        }
        self.opt.lr = lr;
        log::info!(
            "{} epoch {}: loss {:.4} val IoU {:.4} F1 {:.4}",
            self.record.model_spec.label(),
            self.epoch,
            train_loss.unwrap_or(f64::NAN),
            ev.scores.iou,
            ev.scores.f1
        );
        Ok(())
    }

    /// Restores the best-epoch weights and closes the record.
    pub fn finish(self) -> RunRecord {
        let mut record = self.record;
        self.model.store.restore(&self.best_values[..self.model_len]);
        record.weights_digest = self.model.store.digest_first(self.model_len);
        record.ms_per_iter = if self.times.len() > TIMING_WARMUP { median(&self.times[TIMING_WARMUP..]) } else { None };
        record
    }
}
