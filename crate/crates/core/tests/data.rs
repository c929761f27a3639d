use cdga::data::{
    generate_synthetic, ingest_folder, render_sample, Dataset, DatasetManifest, DomainShift, FolderLayout, Split,
    SyntheticSpec,
};
use cdga::imageio::{write_indexed, write_rgb};
use cdga::seg_model::Domain;
use cdga::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_size: [32, 32],
        n_source: 4,
        n_target: 3,
        n_val: 2,
        ..Default::default()
    }
}

#[test]
fn manifest_counts_follow_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_source: 200,
        n_target: 200,
        n_val: 2,
        ..Default::default()
    };
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let train: Vec<_> = m.items.iter().filter(|i| i.split == Split::Train).collect();
    assert_eq!(train.len(), 400);
    assert_eq!(m.image_size, [64, 64]);
    assert_eq!(m.classes, 5);
    for item in &m.items {
        match (item.split, item.domain) {
            (Split::Train, Domain::Target) => assert!(item.label.is_none()),
            _ => assert!(item.label.is_some()),
        }
    }
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn ingest_reproduces_a_generated_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small_spec(), dir.path()).unwrap();
    let layout = FolderLayout {
        classes: 5,
        resize: None,
        class_names: m.class_names.clone(),
    };
    let again = ingest_folder(dir.path(), &layout).unwrap();
    assert_eq!(again, m);
}

#[test]
fn loaded_dataset_matches_in_memory_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let disk = Dataset::load(dir.path(), &m).unwrap();
    let mem = Dataset::synthetic(&spec).unwrap();
    assert_eq!(disk.source_train.len(), 4);
    assert_eq!(disk.target_train.len(), 3);
    for (a, b) in disk.source_train.iter().zip(&mem.source_train).chain(disk.target_val.iter().zip(&mem.target_val)) {
        assert_eq!(a.image.pixels(), b.image.pixels());
        assert_eq!(a.label, b.label);
    }
    assert!(disk.target_train.iter().all(|s| s.label.is_none()));
}

fn write_pair(root: &std::path::Path, domain: &str, name: &str, size: (usize, usize), labels: &[u8]) {
    let (w, h) = size;
    let img = root.join(domain).join("images");
    let lab = root.join(domain).join("labels");
    std::fs::create_dir_all(&img).unwrap();
    std::fs::create_dir_all(&lab).unwrap();
    write_rgb(&img.join(name), w, h, &vec![90; w * h * 3]).unwrap();
    write_indexed(&lab.join(name), labels.len() / h, h, labels, &cdga::data::label_palette(5)).unwrap();
}

fn external_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_pair(dir.path(), "source", &format!("{i:05}.png"), (32, 32), &[1; 1024]);
    }
    let img = dir.path().join("target/images");
    std::fs::create_dir_all(&img).unwrap();
    write_rgb(&img.join("00000.png"), 32, 32, &[10; 3072]).unwrap();
    dir
}

#[test]
fn ingest_counts_and_ignore_sentinel() {
    let dir = external_root();
    let mut labels = [2u8; 1024];
    labels[5] = 255;
    write_pair(dir.path(), "source", "00003.png", (32, 32), &labels);
    let m = ingest_folder(dir.path(), &FolderLayout::default()).unwrap();
    assert_eq!(m.count(Split::Train, Domain::Source), 4);
    assert_eq!(m.count(Split::Train, Domain::Target), 1);
    let data = Dataset::load(dir.path(), &m).unwrap();
    assert_eq!(data.source_train[3].label.as_ref().unwrap().labels()[5], 255);
}

#[test]
fn out_of_range_label_names_the_file() {
    let dir = external_root();
    write_pair(dir.path(), "source", "00007.png", (32, 32), &[7; 1024]);
    match ingest_folder(dir.path(), &FolderLayout::default()) {
        Err(Error::Data { path, .. }) => assert!(path.ends_with("00007.png"), "{}", path.display()),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn size_mismatch_and_missing_pair_are_errors() {
    let dir = external_root();
    let img = dir.path().join("source/images");
    write_rgb(&img.join("00009.png"), 32, 32, &[0; 3072]).unwrap();
    assert!(matches!(ingest_folder(dir.path(), &FolderLayout::default()), Err(Error::Data { .. })));

    let dir = external_root();
    write_rgb(&dir.path().join("source/images/00004.png"), 64, 32, &[0; 6144]).unwrap();
    write_indexed(&dir.path().join("source/labels/00004.png"), 32, 32, &[0; 1024], &cdga::data::label_palette(5)).unwrap();
    assert!(matches!(ingest_folder(dir.path(), &FolderLayout::default()), Err(Error::Data { .. })));
}

#[test]
fn resize_hook_rescales_images_and_labels() {
    let dir = external_root();
    let layout = FolderLayout {
        resize: Some([64, 32]),
        ..Default::default()
    };
    let m = ingest_folder(dir.path(), &layout).unwrap();
    assert_eq!(m.image_size, [64, 32]);
    let data = Dataset::load(dir.path(), &m).unwrap();
    let s = &data.source_train[0];
    assert_eq!((s.image.height(), s.image.width()), (64, 32));
    assert!(s.label.as_ref().unwrap().labels().iter().all(|&l| l == 1));
}

#[test]
fn class_frequencies_agree_across_domains() {
    let spec = SyntheticSpec::default();
    let mut counts = [[0u64; 5]; 2];
    for (d, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        for i in 0..spec.n_source {
            for &l in &render_sample(&spec, domain, Split::Train, i).labels {
                counts[d][l as usize] += 1;
            }
        }
    }
    let share = |c: &[u64; 5]| -> Vec<f64> {
        let t: u64 = c.iter().sum();
        c.iter().map(|&v| v as f64 / t as f64).collect()
    };
    let (s, t) = (share(&counts[0]), share(&counts[1]));
    for u in 0..5 {
        assert!((s[u] - t[u]).abs() < 0.01, "class {u}: {} vs {}", s[u], t[u]);
    }
    // the rare class is rare but present
    assert!(s[4] > 0.0 && s[4] < 0.02);
}

#[test]
fn every_class_appears_in_both_validation_sets() {
    let spec = SyntheticSpec::default();
    for domain in [Domain::Source, Domain::Target] {
        let mut seen = [false; 5];
        for i in 0..spec.n_val {
            for &l in &render_sample(&spec, domain, Split::Val, i).labels {
                seen[l as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "{domain:?}: {seen:?}");
    }
}

#[test]
fn shift_changes_appearance_only() {
    let spec = SyntheticSpec::default();
    let s = render_sample(&spec, Domain::Source, Split::Val, 3);
    let t = render_sample(&spec, Domain::Target, Split::Val, 3);
    assert_ne!(s.rgb, t.rgb);

    let null = SyntheticSpec {
        shift: DomainShift::none(),
        ..spec
    };
    let shares = |domain| {
        let mut c = [0u64; 5];
        for i in 0..null.n_val {
            let r = render_sample(&null, domain, Split::Val, i);
            for &l in &r.labels {
                c[l as usize] += 1;
            }
        }
        c
    };
    // without a shift the two domains draw from one distribution
    let (a, b) = (shares(Domain::Source), shares(Domain::Target));
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    for u in 0..5 {
        assert!((a[u] as f64 / ta - b[u] as f64 / tb).abs() < 0.02);
    }
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(generate_synthetic(&small_spec(), &blocker.join("sub")).is_err());
}
