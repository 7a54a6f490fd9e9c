//! Typed job configs and the work behind each subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use offnadir_core::data::TileSet;
use offnadir_core::datagen::{build_dataset, DatasetConfig};
use offnadir_core::harness::{
    emit_report, run_hparam_search, run_model_bench, run_transfer_comparison, stratified_eval, Artifacts, DataSource, Datasets,
    EvalReport, ExperimentPlan, ReportFormat, Role, RosterEntry, Setting,
};
use offnadir_core::losses::{DistillConfig, LossConfig};
use offnadir_core::metrics::write_confusion_csv;
use offnadir_core::models::{load_checkpoint, save_checkpoint, Family, Model, ModelSpec, DEFAULT_INPUT};
use offnadir_core::trainers::{dml_train, evaluate, kd_distill, sda_adapt, train, DmlConfig, RunRecord, TrainConfig, TrainData};

/// A shipped family name or a full spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Spec(ModelSpec),
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice::Preset(Family::Mbconv.name().into())
    }
}

impl ModelChoice {
    fn resolve(&mut self, input_size: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelChoice::Preset(name) => RosterEntry::preset(name.parse::<Family>()?, input_size).spec,
            ModelChoice::Spec(s) => s.clone(),
        };
        spec.validate()?;
        *self = ModelChoice::Spec(spec.clone());
        Ok(spec)
    }
}

fn default_input() -> usize {
    DEFAULT_INPUT
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainJob {
    pub data: DataSource,
    /// Only the training side matters; checkpoints are selected on that role's val split.
    pub setting: Setting,
    pub model: ModelChoice,
    #[serde(default = "default_input")]
    pub input_size: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            data: DataSource::default(),
            setting: Setting::TT,
            model: ModelChoice::default(),
            input_size: DEFAULT_INPUT,
            model_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptJob {
    pub data: DataSource,
    /// Checkpoint pretrained on the source role.
    pub from: PathBuf,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillJob {
    pub data: DataSource,
    pub teacher: PathBuf,
    pub model: ModelChoice,
    #[serde(default = "default_input")]
    pub input_size: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for DistillJob {
    fn default() -> Self {
        DistillJob {
            data: DataSource::default(),
            teacher: PathBuf::new(),
            model: ModelChoice::default(),
            input_size: DEFAULT_INPUT,
            model_seed: 0,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlJob {
    pub data: DataSource,
    pub students: Vec<ModelChoice>,
    pub teacher: Option<PathBuf>,
    #[serde(default = "default_input")]
    pub input_size: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub dml: DmlConfig,
}

impl Default for DmlJob {
    fn default() -> Self {
        DmlJob {
            data: DataSource::default(),
            students: vec![ModelChoice::Preset("mbconv".into()), ModelChoice::Preset("inverted_residual".into())],
            teacher: None,
            input_size: DEFAULT_INPUT,
            model_seed: 0,
            train: TrainConfig::default(),
            dml: DmlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalJob {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    /// Role whose val split is scored.
    pub role: Role,
    pub loss: LossConfig,
}

impl Default for EvalJob {
    fn default() -> Self {
        EvalJob { data: DataSource::default(), checkpoint: PathBuf::new(), role: Role::Ev, loss: LossConfig::default() }
    }
}

/// Refuses to clobber a previous run unless forced.
pub fn guard_output(out: &Path, marker: &str, force: bool) -> Result<()> {
    let p = out.join(marker);
    if p.exists() && !force {
        anyhow::bail!("{} already exists (use --force)", p.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn save_run(out: &Path, name: &str, model: &Model<f32>, record: &mut RunRecord, cfg_hash: &str) -> Result<()> {
    let ckpt = out.join(format!("{name}.safetensors"));
    save_checkpoint(model, cfg_hash, &ckpt)?;
    record.checkpoint = Some(ckpt.display().to_string());
    record.save(&out.join(format!("{name}.json")))?;
    info!("{name}: best epoch {} val F1 {:.4}", record.best_epoch, record.best().val.f1);
    Ok(())
}

pub fn datagen(cfg: &DatasetConfig, out: &Path, force: bool) -> Result<()> {
    let triple = build_dataset(cfg, out, force)?;
    info!("wrote {} T, {} S and {} Ev tiles to {}", triple.t.tiles.len(), triple.s.tiles.len(), triple.ev.tiles.len(), out.display());
    Ok(())
}

pub fn train_cmd(job: &mut TrainJob, out: &Path, cfg_hash: &str) -> Result<()> {
    let spec = job.model.resolve(job.input_size)?;
    let sets = Datasets::from_source(&job.data)?;
    let role = job.setting.train_role();
    let data = TrainData::new(sets.train_split(role)?, sets.val_split(role))?;
    let mut model = Model::<f32>::build(&spec, job.model_seed)?;
    let mut record = train(&mut model, data, &job.train)?;
    save_run(out, "model", &model, &mut record, cfg_hash)
}

pub fn adapt_cmd(job: &AdaptJob, out: &Path, cfg_hash: &str) -> Result<()> {
    let sets = Datasets::from_source(&job.data)?;
    let (pre, meta) = load_checkpoint::<f32>(&job.from, None)?;
    let data = TrainData::new(&sets.s_train, &sets.s_val)?;
    let (model, mut record) = sda_adapt(&pre, &meta.model_spec, data, &job.train)?;
    record.source_checkpoint = Some(meta.weights_digest);
    save_run(out, "model", &model, &mut record, cfg_hash)
}

pub fn distill_cmd(job: &mut DistillJob, out: &Path, cfg_hash: &str) -> Result<()> {
    let spec = job.model.resolve(job.input_size)?;
    let sets = Datasets::from_source(&job.data)?;
    let (teacher, _) = load_checkpoint::<f32>(&job.teacher, None)?;
    let student = Model::<f32>::build(&spec, job.model_seed)?;
    let data = TrainData::new(&sets.s_train, &sets.s_val)?;
    let (model, mut record) = kd_distill(&teacher, student, data, &job.train, &job.distill)?;
    save_run(out, "model", &model, &mut record, cfg_hash)
}

pub fn dml_cmd(job: &mut DmlJob, out: &Path, cfg_hash: &str) -> Result<()> {
    let input = job.input_size;
    let specs = job.students.iter_mut().map(|m| m.resolve(input)).collect::<Result<Vec<_>>>()?;
    let sets = Datasets::from_source(&job.data)?;
    let teacher = match &job.teacher {
        Some(p) => Some(load_checkpoint::<f32>(p, None)?.0),
        None => None,
    };
    let students = specs.iter().map(|s| Model::<f32>::build(s, job.model_seed)).collect::<offnadir_core::Result<Vec<_>>>()?;
    let data = TrainData::new(&sets.s_train, &sets.s_val)?;
    let runs = dml_train(students, teacher.as_ref(), data, &job.train, &job.dml)?;
    for (i, (model, mut record)) in runs.into_iter().enumerate() {
        save_run(out, &format!("student{i}"), &model, &mut record, cfg_hash)?;
    }
    Ok(())
}

fn eval_split(sets: &Datasets, role: Role) -> &TileSet {
    sets.val_split(role)
}

pub fn eval_cmd(job: &EvalJob, out: &Path) -> Result<()> {
    let sets = Datasets::from_source(&job.data)?;
    let set = eval_split(&sets, job.role);
    let (mut model, meta) = load_checkpoint::<f32>(&job.checkpoint, None)?;
    let ev = evaluate(&mut model, set, &job.loss)?;
    std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&ev)?)?;
    let f = std::fs::File::create(out.join("confusion.csv"))?;
    write_confusion_csv(&ev.tiles, f)?;
    if set.tiles.iter().all(|t| t.stratum.is_some()) {
        let rep = stratified_eval(&mut model, set, &job.loss, &meta.weights_digest)?;
        emit_report(&rep, ReportFormat::Json, &out.join("stratified.json"))?;
        emit_report(&rep, ReportFormat::Markdown, &out.join("stratified.md"))?;
    }
    info!("{}: F1 {:.4} IoU {:.4}", set.name, ev.scores.f1, ev.scores.iou);
    Ok(())
}

fn write_report(rep: &EvalReport, out: &Path, stem: &str) -> Result<()> {
    emit_report(rep, ReportFormat::Json, &out.join(format!("{stem}.json")))?;
    emit_report(rep, ReportFormat::Markdown, &out.join(format!("{stem}.md")))?;
    emit_report(rep, ReportFormat::Csv, &out.join(format!("{stem}.csv")))?;
    Ok(())
}

pub fn bench_cmd(plan: &ExperimentPlan, hparam: bool, out: &Path) -> Result<()> {
    let sets = Datasets::from_source(&plan.data)?;
    let art = Artifacts::at(out);
    let rep = if hparam { run_hparam_search(plan, &sets, &art)? } else { run_model_bench(plan, &sets, &art)? };
    write_report(&rep, out, "report")
}

pub fn compare_cmd(plan: &ExperimentPlan, out: &Path) -> Result<()> {
    let sets = Datasets::from_source(&plan.data)?;
    let res = run_transfer_comparison(plan, &sets, &Artifacts::at(out))?;
    write_report(&res.report, out, "report")?;
    write_report(&res.stratified, out, "stratified")
}

/// Re-renders every stored report in `dir`.
pub fn report_cmd(dir: &Path, format: ReportFormat, out: &Path) -> Result<()> {
    let mut found = 0;
    for stem in ["report", "stratified"] {
        let p = dir.join(format!("{stem}.json"));
        if !p.exists() {
            continue;
        }
        let rep = EvalReport::load(&p)?;
        emit_report(&rep, format, &out.join(format!("{stem}.{}", format.extension())))?;
        found += 1;
    }
    if found == 0 {
        anyhow::bail!("no report.json in {}", dir.display());
    }
    Ok(())
}
