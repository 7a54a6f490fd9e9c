use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use offnadir_core::data::TileSet;
use offnadir_core::datagen::{build_dataset, mask_path, DatasetConfig, LabelKind, Manifest, RoleConfig, ViewGeometry};

fn small_config(seed: u64) -> DatasetConfig {
    let mixed = [0.4, 0.3, 0.2, 0.1];
    DatasetConfig {
        seed,
        tile_size: 32,
        view: ViewGeometry { off_nadir_tan: 0.0625, ..Default::default() },
        t: RoleConfig { train: 6, val: 2, label_kind: LabelKind::Noisy, strata_weights: mixed },
        s: RoleConfig { train: 4, val: 2, label_kind: LabelKind::Clean, strata_weights: mixed },
        ev: RoleConfig { train: 0, val: 4, label_kind: LabelKind::Clean, strata_weights: [0.25; 4] },
        ..Default::default()
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&small_config(5), a.path(), false).unwrap();
    build_dataset(&small_config(5), b.path(), false).unwrap();
    let fa = files(a.path());
    assert!(fa.len() > 30);
    assert_eq!(fa, files(b.path()));

    let c = tempfile::tempdir().unwrap();
    build_dataset(&small_config(6), c.path(), false).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn layout_and_manifest_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let triple = build_dataset(&small_config(9), dir.path(), false).unwrap();
    for (role, m) in [("T", &triple.t), ("S", &triple.s), ("Ev", &triple.ev)] {
        let root = dir.path().join(role);
        let on_disk = Manifest::load(&root).unwrap();
        assert_eq!(&on_disk, m);
        on_disk.verify(&root).unwrap();
        assert_eq!(m.generator.config_hash, small_config(9).hash());
        for t in &m.tiles {
            assert!(m.gsd_cm.contains(&t.gsd_cm));
            assert!([30, 60, 120].contains(&t.gsd_cm));
            let img = image::open(root.join(&t.split).join("images").join(format!("{}.png", t.id))).unwrap();
            let mask = image::open(mask_path(&root, t, None)).unwrap().to_luma8();
            assert_eq!((img.width(), img.height()), (32, 32));
            assert_eq!(mask.dimensions(), (32, 32));
            assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255), "{} mask is not 0/255", t.id);
        }
    }
    assert!(triple.ev.split("train").next().is_none(), "Ev has no training tiles");
    assert!(triple.t.tiles.iter().all(|t| t.label_kind == LabelKind::Noisy));
    assert!(triple.s.tiles.iter().all(|t| t.label_kind == LabelKind::Clean));
}

#[test]
fn existing_root_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_config(1), dir.path(), false).unwrap();
    assert!(build_dataset(&small_config(1), dir.path(), false).is_err());
    build_dataset(&small_config(1), dir.path(), true).unwrap();
}

#[test]
fn loaded_tiles_match_synthesized_ones() {
    let cfg = small_config(3);
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&cfg, dir.path(), false).unwrap();
    let loaded = TileSet::load(&dir.path().join("S"), "train", None).unwrap();
    let direct = TileSet::synthesize(&cfg, "S", "train").unwrap();
    assert_eq!(loaded.tiles, direct.tiles);
    assert_eq!(loaded.masks, direct.masks);
    assert_eq!(loaded.images, direct.images);

    // The counterpart of clean S labels is the noisy footprint mask.
    let noisy = TileSet::load(&dir.path().join("S"), "train", Some(LabelKind::Noisy)).unwrap();
    assert!(noisy.masks.iter().zip(&loaded.masks).any(|(a, b)| a != b));
}
