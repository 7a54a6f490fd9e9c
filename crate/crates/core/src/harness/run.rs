use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::{mark_top, Datasets, EvalReport, EvalRow, ExperimentPlan, Method, ReportKind, RosterEntry, Setting};
use crate::data::TileSet;
use crate::datagen::{Stratum, GSD_CM};
use crate::error::IoContext;
use crate::losses::{LossConfig, LossName};
use crate::metrics::score;
use crate::models::{save_checkpoint, Model};
use crate::nn::hex;
use crate::optim::OptimizerKind;
use crate::tensor::Scalar;
use crate::trainers::{dml_train, evaluate, kd_distill, sda_adapt, train, Evaluation, RunRecord, TrainConfig, TrainData};
use crate::{Error, Result};

/// Optional output directory for run records and checkpoints.
///
/// Records go to `<dir>/runs/<id>.json`, weights to `<dir>/ckpt/<id>.safetensors`.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub dir: Option<PathBuf>,
}

impl Artifacts {
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: Some(dir.into()) }
    }

    /// Stores the run and returns the record hash.
    fn keep<T: Scalar>(&self, id: &str, model: &Model<T>, record: &mut RunRecord) -> Result<String> {
        if let Some(dir) = &self.dir {
            let ckpt = dir.join("ckpt").join(format!("{id}.safetensors"));
            let cfg_hash = hex(&Sha256::digest(serde_json::to_vec(&record.config)?));
            save_checkpoint(model, &cfg_hash, &ckpt)?;
            record.checkpoint = Some(ckpt.display().to_string());
            let runs = dir.join("runs");
            std::fs::create_dir_all(&runs).at(&runs)?;
            record.save(&runs.join(format!("{id}.json")))?;
        }
        Ok(record.hash())
    }
}

fn row(record: &RunRecord, hash: &str, ev: &Evaluation, network: &str, setting: Setting, method: Method, seed: u64) -> EvalRow {
    EvalRow {
        network: network.to_string(),
        label: network.to_string(),
        setting: Some(setting),
        method: Some(method),
        seed: Some(seed),
        params_m: record.params as f64 / 1e6,
        loss: ev.loss,
        precision: ev.scores.precision,
        recall: ev.scores.recall,
        iou: ev.scores.iou,
        f1: ev.scores.f1,
        ms_per_iter: record.ms_per_iter,
        best_epoch: Some(record.best_epoch),
        par_red_pct: record.par_red_pct,
        tiles: Some(ev.tiles.len()),
        counts: Some(ev.pooled),
        record_hash: hash.to_string(),
        ..Default::default()
    }
}

fn train_fresh(entry: &RosterEntry, seed: u64, data: TrainData<'_>, cfg: &TrainConfig) -> Result<(Model<f32>, RunRecord)> {
    let mut model = Model::<f32>::build(&entry.spec, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let record = train(&mut model, data, &cfg)?;
    Ok((model, record))
}

fn data_for(sets: &Datasets, setting: Setting) -> Result<TrainData<'_>> {
    let role = setting.train_role();
    TrainData::new(sets.train_split(role)?, sets.val_split(role))
}

/// Five optimisers under the total loss, then nine losses under the winner.
///
/// Uses the first roster entry, the first setting and the first seed. The
/// winning optimiser's total-loss run is reused as the total-loss row.
pub fn run_hparam_search(plan: &ExperimentPlan, sets: &Datasets, art: &Artifacts) -> Result<EvalReport> {
    plan.validate()?;
    let entry = &plan.roster[0];
    let setting = plan.settings[0];
    let seed = plan.seeds[0];
    let data = data_for(sets, setting)?;
    let val = sets.val_split(setting.val_role());
    let mut report = EvalReport::new(&format!("Hyperparameter search with {}", entry.name), ReportKind::Hparam);

    let run = |opt: OptimizerKind, loss: LossName, id: String| -> Result<EvalRow> {
        let cfg = TrainConfig { optimizer: opt, loss: LossConfig { name: loss, ..plan.train.loss }, ..plan.train.clone() };
        let (mut model, mut record) = train_fresh(entry, seed, data, &cfg)?;
        let hash = art.keep(&id, &model, &mut record)?;
        let ev = evaluate(&mut model, val, &cfg.loss)?;
        log::info!("{id}: F1 {:.4}", ev.scores.f1);
        Ok(row(&record, &hash, &ev, &entry.name, setting, Method::Baseline, seed))
    };

    let mut opt_rows = Vec::new();
    for opt in OptimizerKind::ALL {
        let mut r = run(opt, LossName::Total, format!("hparam-{}-total", opt.name()))?;
        r.group = "optimizer".into();
        r.label = opt.label().into();
        opt_rows.push((opt, r));
    }
    let (winner, winner_row) = opt_rows
        .iter()
        .reduce(|a, b| {
            let (x, y) = (&a.1, &b.1);
            let better = y.f1 > x.f1
                || (y.f1 == x.f1 && (y.loss < x.loss || (y.loss == x.loss && y.best_epoch < x.best_epoch)));
            if better {
                b
            } else {
                a
            }
        })
        .map(|(k, r)| (*k, r.clone()))
        .expect("five optimiser rows");
    report.rows.extend(opt_rows.into_iter().map(|(_, r)| r));

    for loss in LossName::ALL {
        let mut r = if loss == LossName::Total {
            winner_row.clone()
        } else {
            run(winner, loss, format!("hparam-{}-{}", winner.name(), loss.name()))?
        };
        r.group = "loss".into();
        r.label = loss.label().into();
        r.marks.clear();
        report.rows.push(r);
    }
    report.provenance.insert("winner_optimizer".into(), winner.label().into());
    report.provenance.insert("winner_row".into(), winner_row.record_hash.clone());
    report.provenance.insert("network".into(), entry.name.clone());
    report.provenance.insert("setting".into(), setting.to_string());
    report.provenance.insert("seed".into(), seed.to_string());
    Ok(report)
}

/// One row per roster network with the top ranks marked per column.
pub fn run_model_bench(plan: &ExperimentPlan, sets: &Datasets, art: &Artifacts) -> Result<EvalReport> {
    plan.validate()?;
    let setting = plan.settings[0];
    let seed = plan.seeds[0];
    let data = data_for(sets, setting)?;
    let val = sets.val_split(setting.val_role());
    let mut report = EvalReport::new(&format!("Model benchmark ({setting})"), ReportKind::Bench);
    for entry in &plan.roster {
        let (mut model, mut record) = train_fresh(entry, seed, data, &plan.train)?;
        let hash = art.keep(&format!("bench-{}", entry.name), &model, &mut record)?;
        let ev = evaluate(&mut model, val, &plan.train.loss)?;
        log::info!("{}: F1 {:.4}", entry.name, ev.scores.f1);
        report.rows.push(row(&record, &hash, &ev, &entry.name, setting, Method::Baseline, seed));
    }
    mark_top(&mut report.rows, super::TOP_MARKS);
    report.provenance.insert("setting".into(), setting.to_string());
    report.provenance.insert("seed".into(), seed.to_string());
    Ok(report)
}

/// Transfer comparison plus per-model stratified results on Ev.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub report: EvalReport,
    pub stratified: EvalReport,
}

/// Pretrains on T where needed, then runs each requested method on S and
/// evaluates on S (S-S) and Ev (S-Ev). Pretrained models also get T-T, T-S and
/// T-Ev rows. Checkpoints are selected on the training role's val split.
pub fn run_transfer_comparison(plan: &ExperimentPlan, sets: &Datasets, art: &Artifacts) -> Result<Comparison> {
    plan.validate()?;
    if plan.methods.contains(&Method::Kd) && plan.teacher.is_none() {
        return Err(Error::Config("kd needs a teacher".into()));
    }
    let mut report = EvalReport::new("Comparison of knowledge transfer methods", ReportKind::Transfer);
    let mut strat = EvalReport::new("Stratified evaluation on Ev", ReportKind::Stratified);
    let methods = &plan.methods;
    let dml_teacher = methods.contains(&Method::Dml) && !plan.dml_pairs.is_empty() && plan.dml.weights.kd != 0.0;
    let teacher_name = plan.teacher.as_deref().filter(|_| methods.contains(&Method::Kd) || dml_teacher);
    let s_data = data_for(sets, Setting::SS)?;
    let t_data = data_for(sets, Setting::TT)?;

    let mut evaluate_into = |model: &mut Model<f32>, record: &RunRecord, hash: &str, net: &str, group: &str, method: Method, seed: u64, settings: &[Setting]| -> Result<()> {
        for &s in settings {
            let ev = evaluate(model, sets.val_split(s.val_role()), &record.config.loss)?;
            let mut r = row(record, hash, &ev, net, s, method, seed);
            r.group = group.to_string();
            report.rows.push(r);
        }
        let setting = if record.train_set.starts_with("T/") { Setting::TEv } else { Setting::SEv };
        let st = stratified_eval(model, &sets.ev, &record.config.loss, hash)?;
        for mut r in st.rows {
            r.network = net.to_string();
            r.label = format!("{} {net} seed {seed}", if setting == Setting::TEv { "pretrain" } else { method.name() });
            r.group = group.to_string();
            r.setting = Some(setting);
            r.method = Some(method);
            r.seed = Some(seed);
            r.params_m = record.params as f64 / 1e6;
            strat.rows.push(r);
        }
        Ok(())
    };

    let pre_settings = [Setting::TT, Setting::TS, Setting::TEv];
    let s_settings = [Setting::SS, Setting::SEv];
    for &seed in &plan.seeds {
        let mut pretrained: BTreeMap<String, Model<f32>> = BTreeMap::new();
        for entry in &plan.roster {
            let needed = methods.contains(&Method::Sda) || teacher_name == Some(entry.name.as_str());
            if !needed {
                continue;
            }
            let (mut model, mut record) = train_fresh(entry, seed, t_data, &plan.pretrain)?;
            let hash = art.keep(&format!("{seed}-pretrain-{}", entry.name), &model, &mut record)?;
            evaluate_into(&mut model, &record, &hash, &entry.name, "pretrain", Method::Baseline, seed, &pre_settings)?;
            log::info!("seed {seed}: pretrained {} on T", entry.name);
            pretrained.insert(entry.name.clone(), model);
        }
        let cfg = TrainConfig { seed, ..plan.train.clone() };
        if methods.contains(&Method::Baseline) {
            for entry in &plan.roster {
                let (mut model, mut record) = train_fresh(entry, seed, s_data, &plan.train)?;
                let hash = art.keep(&format!("{seed}-baseline-{}", entry.name), &model, &mut record)?;
                evaluate_into(&mut model, &record, &hash, &entry.name, "", Method::Baseline, seed, &s_settings)?;
            }
        }
        if methods.contains(&Method::Sda) {
            for entry in &plan.roster {
                let (mut model, mut record) = sda_adapt(&pretrained[&entry.name], &entry.spec, s_data, &cfg)?;
                let hash = art.keep(&format!("{seed}-sda-{}", entry.name), &model, &mut record)?;
                evaluate_into(&mut model, &record, &hash, &entry.name, "", Method::Sda, seed, &s_settings)?;
            }
        }
        let teacher = teacher_name.map(|t| &pretrained[t]);
        if methods.contains(&Method::Kd) {
            let t = teacher.expect("validated plan has a teacher for kd");
            for entry in &plan.roster {
                let student = Model::<f32>::build(&entry.spec, seed)?;
                let (mut model, mut record) = kd_distill(t, student, s_data, &cfg, &plan.distill)?;
                let hash = art.keep(&format!("{seed}-kd-{}", entry.name), &model, &mut record)?;
                evaluate_into(&mut model, &record, &hash, &entry.name, "", Method::Kd, seed, &s_settings)?;
            }
        }
        if methods.contains(&Method::Dml) {
            for (a, b) in &plan.dml_pairs {
                let students = vec![Model::<f32>::build(&plan.entry(a)?.spec, seed)?, Model::<f32>::build(&plan.entry(b)?.spec, seed)?];
                let group = format!("{a}+{b}");
                let out = dml_train(students, if dml_teacher { teacher } else { None }, s_data, &cfg, &plan.dml)?;
                for ((mut model, mut record), net) in out.into_iter().zip([a, b]) {
                    let hash = art.keep(&format!("{seed}-dml-{group}-{net}"), &model, &mut record)?;
                    evaluate_into(&mut model, &record, &hash, net, &group, Method::Dml, seed, &s_settings)?;
                }
            }
        }
    }
    report.provenance.insert("seeds".into(), plan.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    report.provenance.insert("aggregate".into(), "median F1 row over seeds".into());
    if let Some(t) = teacher_name {
        report.provenance.insert("teacher".into(), t.to_string());
    }
    Ok(Comparison { report, stratified: strat })
}

/// Scores per (stratum, gsd) cell plus per-stratum, per-gsd and pooled marginals.
///
/// Strata or resolutions without tiles are skipped with a warning.
pub fn stratified_eval<T: Scalar>(model: &mut Model<T>, set: &TileSet, loss: &LossConfig, record_hash: &str) -> Result<EvalReport> {
    if let Some(t) = set.tiles.iter().find(|t| t.stratum.is_none()) {
        return Err(Error::Config(format!("tile {} carries no stratum", t.id)));
    }
    let mut report = EvalReport::new(&format!("Stratified evaluation on {}", set.name), ReportKind::Stratified);
    let pick = |f: &dyn Fn(usize) -> bool| (0..set.len()).filter(|&i| f(i)).collect::<Vec<usize>>();
    let mut push = |idx: Vec<usize>, stratum: Option<Stratum>, gsd: Option<u32>, report: &mut EvalReport| -> Result<()> {
        let ev = evaluate(model, &set.subset(&idx), loss)?;
        let s = score(&ev.pooled);
        report.rows.push(EvalRow {
            network: model.spec.label(),
            label: model.spec.label(),
            stratum: stratum.map(|s| s.name().to_string()),
            gsd_cm: gsd,
            params_m: crate::models::count_params(model) as f64 / 1e6,
            loss: ev.loss,
            precision: s.precision,
            recall: s.recall,
            iou: s.iou,
            f1: s.f1,
            tiles: Some(idx.len()),
            counts: Some(ev.pooled),
            record_hash: record_hash.to_string(),
            ..Default::default()
        });
        Ok(())
    };
    let mut gsds: Vec<u32> = set.tiles.iter().map(|t| t.gsd_cm).collect();
    gsds.sort_unstable();
    gsds.dedup();
    for g in GSD_CM {
        if !gsds.contains(&g) {
            log::warn!("{}: no tiles at {g} cm", set.name);
        }
    }
    for st in Stratum::ALL {
        let members = pick(&|i| set.tiles[i].stratum == Some(st));
        if members.is_empty() {
            log::warn!("{}: no {st} tiles, stratum omitted", set.name);
            continue;
        }
        for &g in &gsds {
            let idx: Vec<usize> = members.iter().copied().filter(|&i| set.tiles[i].gsd_cm == g).collect();
            if !idx.is_empty() {
                push(idx, Some(st), Some(g), &mut report)?;
            }
        }
        push(members, Some(st), None, &mut report)?;
    }
    for &g in &gsds {
        push(pick(&|i| set.tiles[i].gsd_cm == g), None, Some(g), &mut report)?;
    }
    push((0..set.len()).collect(), None, None, &mut report)?;
    Ok(report)
}
