use offnadir_core::data::TileSet;
use offnadir_core::datagen::DatasetConfig;
use offnadir_core::losses::{distillation_loss, DistillConfig, DistillHead};
use offnadir_core::models::{count_params, load_checkpoint, save_checkpoint, Family, Model, ModelSpec};
use offnadir_core::nn::{Ctx, Init};
use offnadir_core::trainers::*;
use offnadir_core::Error;

fn tiny_spec(family: Family) -> ModelSpec {
    let mut s = ModelSpec::new(family).with_input(32);
    s.encoder.stage_channels = vec![4, 8, 8, 12, 12];
    s.decoder_channels = vec![8, 8, 8, 4, 4];
    s
}

fn tiny_sets() -> (TileSet, TileSet, TileSet) {
    let mut cfg = DatasetConfig { tile_size: 32, seed: 5, ..Default::default() };
    cfg.view.off_nadir_tan = 0.0625;
    cfg.s.train = 8;
    cfg.s.val = 4;
    cfg.ev.val = 4;
    (
        TileSet::synthesize(&cfg, "S", "train").unwrap(),
        TileSet::synthesize(&cfg, "S", "val").unwrap(),
        TileSet::synthesize(&cfg, "Ev", "val").unwrap(),
    )
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, seed: 3, lr: 1e-3, ..Default::default() }
}

fn digests(r: &RunRecord) -> Vec<String> {
    r.epochs.iter().map(|e| e.weights_digest.clone()).collect()
}

fn losses(r: &RunRecord) -> Vec<Option<f64>> {
    r.epochs.iter().map(|e| e.train_loss).collect()
}

#[test]
fn plateau_schedule_drops_by_ten() {
    let mut st = PlateauState::new(1e-4, PlateauConfig::default());
    let mut lrs = vec![plateau_step(&mut st, 0.5)];
    for _ in 0..10 {
        lrs.push(plateau_step(&mut st, 0.4));
    }
    assert_eq!(lrs[9], 1e-4);
    assert_eq!(lrs[10], 1e-5);
    for _ in 0..10 {
        lrs.push(plateau_step(&mut st, 0.4));
    }
    assert_eq!(*lrs.last().unwrap(), 1e-6);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));

    let mut st = PlateauState::new(1e-4, PlateauConfig::default());
    plateau_step(&mut st, 0.5);
    for _ in 0..8 {
        plateau_step(&mut st, 0.5);
    }
    assert_eq!(plateau_step(&mut st, 0.6), 1e-4);
    assert_eq!(st.bad_epochs, 0);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = cfg(1);
    c.plateau.factor = 1.0;
    assert!(c.validate().is_err());
    let mut c = cfg(1);
    c.plateau.patience = 0;
    assert!(c.validate().is_err());
    let mut c = cfg(1);
    c.batch_size = 0;
    assert!(c.validate().is_err());
}

#[test]
fn ev_cannot_train() {
    let (_, val, ev) = tiny_sets();
    assert!(matches!(TrainData::new(&ev, &val), Err(Error::Settings(_))));
}

#[test]
fn zero_epochs_keeps_weights() {
    let (tr, val, _) = tiny_sets();
    let mut m = Model::<f32>::build(&tiny_spec(Family::Mbconv), 1).unwrap();
    let before = m.store.digest();
    let r = train(&mut m, TrainData::new(&tr, &val).unwrap(), &cfg(0)).unwrap();
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(r.best_epoch, 0);
    assert_eq!(m.store.digest(), before);
    assert!(r.ms_per_iter.is_none());
}

#[test]
fn training_is_deterministic_and_restores_best() {
    let (tr, val, _) = tiny_sets();
    let data = TrainData::new(&tr, &val).unwrap();
    let run = || {
        let mut m = Model::<f32>::build(&tiny_spec(Family::InvertedResidual), 2).unwrap();
        let r = train(&mut m, data, &cfg(4)).unwrap();
        (m, r)
    };
    let (mut m1, r1) = run();
    let (_, r2) = run();
    assert_eq!(losses(&r1), losses(&r2));
    assert_eq!(digests(&r1), digests(&r2));
    assert_eq!(r1.epochs.len(), 5);
    assert!(r1.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    let best = r1.epochs.iter().map(|e| e.val.iou).fold(f64::MIN, f64::max);
    assert_eq!(r1.best().val.iou, best);
    assert_eq!(r1.weights_digest, r1.best().weights_digest);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.safetensors");
    save_checkpoint(&m1, "cfg", &path).unwrap();
    let (mut back, _) = load_checkpoint::<f32>(&path, Some(&m1.spec)).unwrap();
    let again = evaluate(&mut back, &val, &r1.config.loss).unwrap();
    assert_eq!(again.scores.iou, r1.best().val.iou);
    assert_eq!(evaluate(&mut m1, &val, &r1.config.loss).unwrap().scores, r1.best().val);

    let json = serde_json::to_string(&r1).unwrap();
    let parsed: RunRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, r1);
    assert_eq!(parsed.hash(), r1.hash());
}

#[test]
fn divergence_is_reported() {
    let (tr, val, _) = tiny_sets();
    let mut m = Model::<f32>::build(&tiny_spec(Family::VggLike), 2).unwrap();
    let mut tr = tr;
    for img in &mut tr.images {
        img[0] = f32::NAN;
    }
    let c = cfg(3);
    match train(&mut m, TrainData::new(&tr, &val).unwrap(), &c) {
        Err(Error::Diverged { epoch, record }) => {
            assert!(epoch >= 1);
            assert!(!record.epochs.is_empty());
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.epochs.len())),
    }
}

#[test]
fn kd_with_alpha_one_is_plain_training() {
    let (tr, val, _) = tiny_sets();
    let data = TrainData::new(&tr, &val).unwrap();
    let teacher = Model::<f32>::build(&tiny_spec(Family::VggLike), 7).unwrap();
    let student = Model::<f32>::build(&tiny_spec(Family::Mbconv), 8).unwrap();
    let mut plain = student.clone();
    let r_train = train(&mut plain, data, &cfg(3)).unwrap();
    let dcfg = DistillConfig { alpha: 1.0, ..Default::default() };
    let (kd, r_kd) = kd_distill(&teacher, student, data, &cfg(3), &dcfg).unwrap();
    assert_eq!(digests(&r_kd), digests(&r_train));
    assert_eq!(kd.store.digest(), plain.store.digest());
    assert_eq!(kd.store.len(), plain.store.len());
    let pr = r_kd.par_red_pct.unwrap();
    let expect = 100.0 * (1.0 - count_params(&kd) as f64 / count_params(&teacher) as f64);
    assert!((pr - expect).abs() < 1e-9);

    let (_, r_half) = kd_distill(&teacher, kd.clone(), data, &cfg(1), &DistillConfig::default()).unwrap();
    assert_ne!(digests(&r_half)[1], digests(&r_train)[1]);
}

#[test]
fn distillation_from_itself_starts_at_zero() {
    let (tr, ..) = tiny_sets();
    let mut t = Model::<f64>::build(&tiny_spec(Family::Mbconv), 1).unwrap();
    let (x, _) = tr.batch::<f64>(&[0, 1]);
    let pyr = t.pyramid(&x).unwrap();
    let ch = t.pyramid_channels();
    let mut s = t.clone();
    let cfg = DistillConfig::default();
    let head = DistillHead::new(&mut Init::new(&mut s.store, 0), &ch, &ch, &cfg).unwrap();
    let mut cx = Ctx::new(&mut s.store, false);
    let xv = cx.graph.constant(x);
    let levels = t.net.encode(&mut cx, xv).unwrap();
    let tv: Vec<_> = pyr.into_iter().map(|p| cx.graph.constant(p)).collect();
    let l = distillation_loss(&mut cx, &head, &levels, &tv, &cfg).unwrap();
    assert_eq!(cx.graph.value(l).item(), 0.0);
}

#[test]
fn dml_without_coupling_is_two_trainings() {
    let (tr, val, _) = tiny_sets();
    let data = TrainData::new(&tr, &val).unwrap();
    let a = Model::<f32>::build(&tiny_spec(Family::Mbconv), 11).unwrap();
    let b = Model::<f32>::build(&tiny_spec(Family::MobilevitLike), 12).unwrap();
    let teacher = Model::<f32>::build(&tiny_spec(Family::VggLike), 13).unwrap();
    let (mut ia, mut ib) = (a.clone(), b.clone());
    let ra = train(&mut ia, data, &cfg(2)).unwrap();
    let rb = train(&mut ib, data, &cfg(2)).unwrap();
    let dml = DmlConfig { weights: DmlWeights { sup: 1.0, mutual: 0.0, kd: 0.0 }, ..Default::default() };
    let out = dml_train(vec![a, b], Some(&teacher), data, &cfg(2), &dml).unwrap();
    assert_eq!(digests(&out[0].1), digests(&ra));
    assert_eq!(digests(&out[1].1), digests(&rb));
    assert_eq!(out[0].0.store.digest(), ia.store.digest());
}

#[test]
fn dml_symmetry_and_arity() {
    let (tr, val, _) = tiny_sets();
    let data = TrainData::new(&tr, &val).unwrap();
    let a = Model::<f32>::build(&tiny_spec(Family::InvertedResidual), 4).unwrap();
    let out = dml_train(vec![a.clone(), a.clone()], None, data, &cfg(2), &DmlConfig::default()).unwrap();
    assert_eq!(losses(&out[0].1), losses(&out[1].1));
    assert!(out[0].1.par_red_pct.is_none());
    let teacher = Model::<f32>::build(&tiny_spec(Family::VggLike), 13).unwrap();
    let alt = DmlConfig { update: DmlUpdate::Alternating, ..Default::default() };
    let out = dml_train(vec![a.clone(), a.clone()], Some(&teacher), data, &cfg(1), &alt).unwrap();
    assert!(out[1].1.par_red_pct.is_some());
    assert_eq!(out[0].0.store.len(), a.store.len());
    let three = vec![a.clone(), a.clone(), a];
    assert!(matches!(dml_train(three, None, data, &cfg(1), &DmlConfig::default()), Err(Error::Config(_))));
}

#[test]
fn sda_contracts() {
    let (tr, val, _) = tiny_sets();
    let data = TrainData::new(&tr, &val).unwrap();
    let spec = tiny_spec(Family::VggLike);
    let mut pre = Model::<f32>::build(&spec, 21).unwrap();
    pre.set_trainable("encoder.", false);
    let (adapted, r) = sda_adapt(&pre, &spec, data, &cfg(0)).unwrap();
    assert_eq!(adapted.store.digest(), pre.store.digest());
    assert_eq!(count_params(&adapted), count_params(&Model::<f32>::build(&spec, 0).unwrap()));
    let ev = evaluate(&mut pre.clone(), &val, &r.config.loss).unwrap();
    assert_eq!(r.epochs[0].val, ev.scores);
    assert_eq!(r.source_checkpoint.as_deref(), Some(pre.store.digest().as_str()));
    assert!(matches!(sda_adapt(&pre, &tiny_spec(Family::Mbconv), data, &cfg(0)), Err(Error::SpecMismatch(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.safetensors");
    save_checkpoint(&pre, "h", &path).unwrap();
    let (_, r2) = sda_adapt_checkpoint::<f32>(&path, &spec, data, &cfg(1)).unwrap();
    assert_eq!(r2.method, "sda");
    assert_eq!(r2.epochs.len(), 2);
    assert!(sda_adapt_checkpoint::<f32>(&path, &tiny_spec(Family::Mbconv), data, &cfg(1)).is_err());
}
