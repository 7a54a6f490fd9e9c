use offnadir_core::datagen::DatasetConfig;
use offnadir_core::harness::*;
use offnadir_core::metrics::ConfusionCounts;
use offnadir_core::models::{count_params, Family, Model, ModelSpec};
use offnadir_core::trainers::{evaluate, RunRecord, TrainConfig};
use offnadir_core::Error;

fn tiny_spec(family: Family) -> ModelSpec {
    let mut s = ModelSpec::new(family).with_input(32);
    s.encoder.stage_channels = vec![4, 8, 8, 12, 12];
    s.decoder_channels = vec![8, 8, 8, 4, 4];
    s
}

fn tiny_data() -> DatasetConfig {
    let mut cfg = DatasetConfig { tile_size: 32, seed: 9, ..Default::default() };
    cfg.view.off_nadir_tan = 0.0625;
    cfg.t.train = 8;
    cfg.t.val = 4;
    cfg.s.train = 8;
    cfg.s.val = 4;
    cfg.ev.val = 16;
    cfg
}

fn tiny_plan(roster: &[Family]) -> ExperimentPlan {
    let train = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, ..Default::default() };
    ExperimentPlan {
        name: "tiny".into(),
        input_size: 32,
        roster: roster.iter().map(|&f| RosterEntry { name: f.name().into(), spec: tiny_spec(f) }).collect(),
        teacher: Some("vgg_like".into()).filter(|_| roster.contains(&Family::VggLike)),
        seeds: vec![1],
        train: train.clone(),
        pretrain: train,
        ..Default::default()
    }
}

fn row(label: &str, f1: f64, iou: f64, params: f64) -> EvalRow {
    EvalRow { network: label.into(), label: label.into(), f1, iou, params_m: params, record_hash: format!("h-{label}"), ..Default::default() }
}

#[test]
fn settings_never_train_on_ev() {
    assert_eq!("S-Ev".parse::<Setting>().unwrap(), Setting::SEv);
    assert_eq!(Setting::TEv.train_role(), Role::T);
    assert!(matches!("Ev-S".parse::<Setting>(), Err(Error::Settings(_))));
    assert!(matches!("Ev-Ev".parse::<Setting>(), Err(Error::Settings(_))));
    assert!("S-T".parse::<Setting>().is_err());
    let json = r#"{"settings": ["S-S", "Ev-S"], "roster": ["mbconv"]}"#;
    assert!(serde_json::from_str::<ExperimentPlan>(json).is_err());
    let sets = Datasets::synthesize(&tiny_data()).unwrap();
    assert!(matches!(sets.train_split(Role::Ev), Err(Error::Settings(_))));
}

#[test]
fn plan_json_accepts_presets_and_round_trips() {
    let json = r#"{"name": "p", "input_size": 64, "roster": ["mbconv", "vgg_like"], "teacher": "vgg_like", "seeds": [1, 2]}"#;
    let plan: ExperimentPlan = serde_json::from_str(json).unwrap();
    assert_eq!(plan.roster.len(), 2);
    assert_eq!(plan.roster[0].spec, ModelSpec::new(Family::Mbconv).with_input(64));
    let back: ExperimentPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
    assert_eq!(back, plan);
    assert!(serde_json::from_str::<ExperimentPlan>(r#"{"roster": ["mbconv"], "teacher": "nope"}"#).is_err());
    assert!(serde_json::from_str::<ExperimentPlan>(r#"{"roster": ["mbconv"], "bogus": 1}"#).is_err());
}

#[test]
fn gain_formatting() {
    assert_eq!(format_gain(0.827, 0.785), "0.827 (+4.2%)");
    assert_eq!(format_gain(0.803, 0.805), "0.803 (-0.2%)");
    assert_eq!(format_gain(0.779, 0.779), "0.779 (+0.0%)");
    assert_eq!(format_gain(0.752, 0.708), "0.752 (+4.4%)");
}

#[test]
fn best_and_median_rows() {
    let rows = vec![row("a", 0.8, 0.6, 2.0), row("b", 0.8, 0.7, 3.0), row("c", 0.8, 0.7, 1.0), row("d", 0.5, 0.9, 0.1)];
    assert_eq!(best_row(&rows).unwrap().label, "c");
    assert_eq!(median_row(&rows[..3]).unwrap().label, "b");
    assert_eq!(median_row(&[rows[0].clone(), rows[3].clone()]).unwrap().label, "d");
    assert!(median_row(&[]).is_none());
}

#[test]
fn top_marks_are_dense_ranks() {
    let mut rows = vec![row("a", 0.9, 0.8, 1.0), row("b", 0.9, 0.7, 2.0), row("c", 0.85, 0.6, 3.0), row("d", 0.8, 0.5, 4.0), row("e", 0.7, 0.4, 5.0)];
    mark_top(&mut rows, TOP_MARKS);
    let f1: Vec<Option<u8>> = rows.iter().map(|r| r.marks.get("f1").copied()).collect();
    assert_eq!(f1, vec![Some(1), Some(1), Some(2), Some(3), None]);
    assert_eq!(rows[0].marks.get("params_m"), Some(&1));
    assert_eq!(rows[4].marks.get("params_m"), None);
    let mut rep = EvalReport::new("bench", ReportKind::Bench);
    rep.rows = rows;
    let md = render(&rep, ReportFormat::Markdown).unwrap();
    assert!(md.contains("<u>0.900</u><sup>1</sup>"));
}

#[test]
fn csv_markdown_and_json_outputs() {
    let mut rep = EvalReport::new("search", ReportKind::Hparam);
    let mut a = row("Adam, default", 0.91, 0.83, 1.0);
    a.group = "optimizer".into();
    a.loss = 0.2;
    let mut b = row("SGD", 0.95, 0.9, 1.0);
    b.group = "optimizer".into();
    b.loss = 0.1;
    b.counts = Some(ConfusionCounts { tp: 1, fp: 2, fn_: 3, tn: 4 });
    rep.rows = vec![a, b];
    let csv = render(&rep, ReportFormat::Csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("network,label,group,setting,method"));
    assert!(lines[1].starts_with("\"Adam, default\",\"Adam, default\",optimizer"));
    let md = render(&rep, ReportFormat::Markdown).unwrap();
    assert!(md.contains("| SGD | **0.100** | **0.000** | **0.000** | **0.900** | **0.950** | - | - |"), "{md}");
    assert!(md.contains("| Adam, default | 0.200 |"));
    let json = render(&rep, ReportFormat::Json).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), rep);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out/report.md");
    emit_report(&rep, ReportFormat::Markdown, &p).unwrap();
    let first = std::fs::read(&p).unwrap();
    emit_report(&rep, ReportFormat::Markdown, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
    assert!("xml".parse::<ReportFormat>().is_err());
}

#[test]
fn bench_of_one_model() {
    let sets = Datasets::synthesize(&tiny_data()).unwrap();
    let plan = ExperimentPlan { settings: vec![Setting::SS], ..tiny_plan(&[Family::Mbconv]) };
    let rep = run_model_bench(&plan, &sets, &Artifacts::default()).unwrap();
    assert_eq!(rep.rows.len(), 1);
    let m = Model::<f32>::build(&plan.roster[0].spec, 1).unwrap();
    assert_eq!(format!("{:.3}", rep.rows[0].params_m), format!("{:.3}", count_params(&m) as f64 / 1e6));
    assert_eq!(rep.rows[0].marks.get("f1"), Some(&1));
}

#[test]
fn hparam_search_has_fourteen_rows() {
    let sets = Datasets::synthesize(&tiny_data()).unwrap();
    let plan = ExperimentPlan { settings: vec![Setting::SS], ..tiny_plan(&[Family::InvertedResidual]) };
    let rep = run_hparam_search(&plan, &sets, &Artifacts::default()).unwrap();
    assert_eq!(rep.rows.len(), 14);
    assert_eq!(rep.rows.iter().filter(|r| r.group == "optimizer").count(), 5);
    let winner = &rep.provenance["winner_optimizer"];
    let opt_row = rep.rows.iter().find(|r| r.group == "optimizer" && &r.label == winner).unwrap();
    let best = rep.rows[..5]
        .iter()
        .reduce(|a, b| if b.f1 > a.f1 || (b.f1 == a.f1 && b.loss < a.loss) { b } else { a })
        .unwrap();
    assert_eq!(best.label, *winner);
    let total = rep.rows.iter().find(|r| r.group == "loss" && r.label == "Total Loss").unwrap();
    assert_eq!(total.record_hash, opt_row.record_hash);
    assert_eq!(rep.provenance["winner_row"], opt_row.record_hash);
    let md = render(&rep, ReportFormat::Markdown).unwrap();
    assert!(md.contains(&format!("### Loss function ({winner})")));
}

#[test]
fn stratified_counts_add_up() {
    let mut dcfg = tiny_data();
    dcfg.ev.strata_weights = [0.5, 0.0, 0.0, 0.5];
    let sets = Datasets::synthesize(&dcfg).unwrap();
    let mut m = Model::<f32>::build(&tiny_spec(Family::Mbconv), 3).unwrap();
    let loss = Default::default();
    let rep = stratified_eval(&mut m, &sets.ev, &loss, "h").unwrap();
    let strata: Vec<&str> = rep.rows.iter().filter_map(|r| r.stratum.as_deref()).collect();
    assert!(!strata.contains(&"mid") && !strata.contains(&"high"));
    let pooled = rep.rows.iter().find(|r| r.stratum.is_none() && r.gsd_cm.is_none()).unwrap();
    let cells: ConfusionCounts = rep.rows.iter().filter(|r| r.stratum.is_some() && r.gsd_cm.is_some()).filter_map(|r| r.counts).sum();
    let by_stratum: ConfusionCounts = rep.rows.iter().filter(|r| r.stratum.is_some() && r.gsd_cm.is_none()).filter_map(|r| r.counts).sum();
    let by_gsd: ConfusionCounts = rep.rows.iter().filter(|r| r.stratum.is_none() && r.gsd_cm.is_some()).filter_map(|r| r.counts).sum();
    assert_eq!(pooled.counts.unwrap(), cells);
    assert_eq!(cells, by_stratum);
    assert_eq!(cells, by_gsd);
    assert_eq!(pooled.tiles, Some(16));
    let full = evaluate(&mut m, &sets.ev, &loss).unwrap();
    assert_eq!(pooled.counts.unwrap(), full.pooled);
    assert_eq!(pooled.f1, full.scores.f1);
}

#[test]
fn comparison_rows_trace_to_records() {
    let sets = Datasets::synthesize(&tiny_data()).unwrap();
    let mut plan = tiny_plan(&[Family::VggLike, Family::Mbconv]);
    plan.dml_pairs = vec![("vgg_like".into(), "mbconv".into())];
    let dir = tempfile::tempdir().unwrap();
    let out = run_transfer_comparison(&plan, &sets, &Artifacts::at(dir.path())).unwrap();
    let rep = &out.report;
    for m in Method::ALL {
        for s in [Setting::SS, Setting::SEv] {
            assert!(rep.select(Some(m), Some(s)).count() >= 2, "{m} {s}");
        }
    }
    assert_eq!(rep.rows.iter().filter(|r| r.setting == Some(Setting::TEv)).count(), 2);
    assert!(rep.rows.iter().filter(|r| r.method == Some(Method::Baseline)).all(|r| r.par_red_pct.is_none()));
    assert!(rep.rows.iter().filter(|r| r.method == Some(Method::Kd)).all(|r| r.par_red_pct.is_some()));
    let kd_vgg = rep.rows.iter().find(|r| r.method == Some(Method::Kd) && r.network == "vgg_like").unwrap();
    assert!(kd_vgg.par_red_pct.unwrap().abs() < 1e-9);

    let mut records = Vec::new();
    for e in std::fs::read_dir(dir.path().join("runs")).unwrap() {
        records.push(RunRecord::load(&e.unwrap().path()).unwrap());
    }
    for r in &rep.rows {
        let rec = records.iter().find(|x| x.hash() == r.record_hash).expect("row traces to a stored record");
        if r.setting == Some(Setting::SEv) {
            let path = rec.checkpoint.as_ref().unwrap();
            let (mut m, _) = offnadir_core::models::load_checkpoint::<f32>(path.as_ref(), Some(&rec.model_spec)).unwrap();
            let ev = evaluate(&mut m, &sets.ev, &rec.config.loss).unwrap();
            assert_eq!(ev.scores.f1, r.f1);
        }
    }
    let per_model = out.stratified.rows.iter().filter(|r| r.stratum.is_none() && r.gsd_cm.is_none()).count();
    assert_eq!(per_model, 2 + 2 + 2 + 2 + 2);
    let md = render(rep, ReportFormat::Markdown).unwrap();
    assert!(md.contains("Improvements with SDA vs. without SDA"));
    assert!(md.contains("*Deep mutual learning (DML)*"));
}
