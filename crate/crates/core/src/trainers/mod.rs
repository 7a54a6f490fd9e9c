//! Supervised training, supervised domain adaptation, feature distillation and
//! mutual learning.

mod evaluate;
mod session;
mod transfer;

pub use evaluate::{evaluate, Evaluation};
pub use transfer::{
    dml_train, kd_distill, sda_adapt, sda_adapt_checkpoint, DmlConfig, DmlUpdate, DmlWeights,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TileSet;
use crate::losses::LossConfig;
use crate::metrics::Scores;
use crate::models::{Model, ModelSpec};
use crate::nn::hex;
use crate::optim::{OptimizerHparams, OptimizerKind};
use crate::tensor::Scalar;
use crate::{Error, Result};

use session::Session;

/// Iterations excluded from the ms/it statistic.
pub const TIMING_WARMUP: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMetric {
    /// Pooled IoU on the validation split.
    #[default]
    ValIou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub metric: PlateauMetric,
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { metric: PlateauMetric::ValIou, factor: 0.1, patience: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub batch_size: usize,
    /// Drives batch order; weight initialisation uses the model's own seed.
    pub seed: u64,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            loss: LossConfig::default(),
            batch_size: 8,
            seed: 0,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Teacher-scale schedule (50 epochs).
    pub fn teacher() -> Self {
        TrainConfig { epochs: 50, ..Default::default() }
    }

    /// Student schedule (200 epochs).
    pub fn student() -> Self {
        TrainConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {} outside (0, 1)", self.plateau.factor)));
        }
        if self.plateau.patience == 0 {
            return Err(Error::Config("plateau patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state for a maximised metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub base_lr: f64,
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: u32,
}

impl PlateauState {
    pub fn new(lr: f64, settings: PlateauConfig) -> Self {
        PlateauState { base_lr: lr, lr, factor: settings.factor, patience: settings.patience, best: None, bad_epochs: 0, reductions: 0 }
    }
}

/// Feeds one validation IoU and returns the learning rate for the next epoch.
///
/// After `patience` consecutive epochs without a strict improvement the rate
/// becomes `base_lr * factor^k` for the k-th reduction and the counter resets.
pub fn plateau_step(state: &mut PlateauState, val_iou: f64) -> f64 {
    if state.best.is_none_or(|b| val_iou > b) {
        state.best = Some(val_iou);
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if state.bad_epochs >= state.patience {
            state.reductions += 1;
            state.lr = state.base_lr / (1.0 / state.factor).powi(state.reductions as i32);
            state.bad_epochs = 0;
        }
    }
    state.lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Mean batch loss; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    pub val: Scores,
    pub val_macro: Scores,
    pub val_loss: f64,
    pub ms_per_iter: Option<f64>,
    pub weights_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `baseline`, `sda`, `kd` or `dml`.
    pub method: String,
    pub model_spec: ModelSpec,
    pub model_seed: u64,
    pub params: usize,
    pub config: TrainConfig,
    pub optimizer_hparams: OptimizerHparams,
    pub train_set: String,
    pub val_set: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation IoU (earliest on ties); its weights are kept.
    pub best_epoch: usize,
    /// Median wall time of a training iteration after the warmup.
    pub ms_per_iter: Option<f64>,
    pub weights_digest: String,
    pub checkpoint: Option<String>,
    /// Weights digest of the checkpoint an SDA run started from.
    pub source_checkpoint: Option<String>,
    pub teacher: Option<String>,
    pub teacher_params: Option<usize>,
    pub par_red_pct: Option<f64>,
    /// Free-form settings of the transfer method.
    pub extra: serde_json::Value,
}

impl RunRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.epochs.iter().position(|e| e.epoch == self.best_epoch).unwrap_or(0)]
    }

    /// SHA-256 of the record's JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("record serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use crate::error::IoContext;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &std::path::Path) -> Result<RunRecord> {
        use crate::error::IoContext;
        let bytes = std::fs::read(path).at(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Training and validation splits for one run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    train: &'a TileSet,
    val: &'a TileSet,
}

impl<'a> TrainData<'a> {
    /// Refuses Ev tiles as training data.
    pub fn new(train: &'a TileSet, val: &'a TileSet) -> Result<Self> {
        if train.role == "Ev" {
            return Err(Error::Settings(format!("{} cannot be used for training", train.name)));
        }
        if train.size != val.size {
            return Err(Error::Shape(format!("train tiles are {} px, val tiles {} px", train.size, val.size)));
        }
        Ok(TrainData { train, val })
    }

    pub fn train(&self) -> &'a TileSet {
        self.train
    }

    pub fn val(&self) -> &'a TileSet {
        self.val
    }
}

pub(crate) fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Baseline supervised training. The returned model holds the best-epoch weights.
pub fn train<T: Scalar>(model: &mut Model<T>, data: TrainData<'_>, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mut s = Session::begin(model, data, cfg, "baseline")?;
    for epoch in 1..=cfg.epochs {
        s.start_epoch();
        for idx in data.train().batches(cfg.batch_size, Some(session::epoch_seed(cfg.seed, epoch))) {
            s.step(&idx, |_, _| Ok(Vec::new()))?;
        }
        s.end_epoch()?;
    }
    Ok(s.finish())
}

/// `Par. Red.(%)`: share of the teacher's parameters the student does without.
pub fn param_reduction(student: usize, teacher: usize) -> f64 {
    100.0 * (1.0 - student as f64 / teacher as f64)
}

