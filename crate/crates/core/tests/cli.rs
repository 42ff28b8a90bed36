use std::path::Path;
use std::process::{Command, Output};

use siimil::data::{read_embeddings, write_embeddings, EmbeddingMatrix, KeyMatrix};

fn siimil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siimil"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = siimil(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out-dir",
        "data",
        "--bags-per-class",
        "6",
        "--instances",
        "100-160",
        "--positive-rates",
        "0.05,0.2",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn usage_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    ok(
        dir.path(),
        &[
            "learn-keys",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "keys.siib",
        ],
    );
    let o = siimil(
        dir.path(),
        &[
            "make-bags",
            "--manifest",
            "data/manifest.csv",
            "--keys",
            "keys.siib",
            "--keep-ratio",
            "1.5",
            "--out-dir",
            "out",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
    assert_eq!(
        siimil(dir.path(), &["train", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        siimil(
            dir.path(),
            &[
                "ablate",
                "--manifest",
                "data/manifest.csv",
                "--out",
                "a.csv"
            ]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn data_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = siimil(
        dir.path(),
        &["learn-keys", "--manifest", "missing.csv", "--out", "k.siib"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.csv"));
}

#[test]
fn learn_keys_takes_t_per_bag_from_each_negative() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("bag_id,label,path\n");
    for (i, seed) in [3u64, 4].iter().enumerate() {
        let cfg = siimil::synth::SynthConfig {
            bags_per_class: 1,
            instances: siimil::synth::InstanceCount::Fixed(150),
            positive_rates: vec![0.2],
            seed: *seed,
            ..Default::default()
        };
        let bag = &siimil::synth::generate_dataset(&cfg).unwrap()[0];
        write_embeddings(&bag.instances, dir.path().join(format!("n{i}.siib"))).unwrap();
        manifest.push_str(&format!("n{i},0,n{i}.siib\n"));
    }
    std::fs::write(dir.path().join("m.csv"), &manifest).unwrap();
    let o = ok(
        dir.path(),
        &["learn-keys", "--manifest", "m.csv", "--out", "k.siib"],
    );
    assert!(stderr(&o).contains("tau=200"));
    assert_eq!(
        KeyMatrix::read(dir.path().join("k.siib")).unwrap().count(),
        200
    );

    let positives = manifest.replace(",0,", ",1,");
    std::fs::write(dir.path().join("p.csv"), positives).unwrap();
    let o = siimil(
        dir.path(),
        &["learn-keys", "--manifest", "p.csv", "--out", "p.siib"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("p.siib").exists());
}

#[test]
fn dimension_mismatch_names_both_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--dim", "16"]);
    let keys = EmbeddingMatrix::new(8, 3, vec![1.0; 24]).unwrap();
    write_embeddings(&keys, dir.path().join("k8.siib")).unwrap();
    let o = siimil(
        dir.path(),
        &[
            "make-bags",
            "--manifest",
            "data/manifest.csv",
            "--keys",
            "k8.siib",
            "--out-dir",
            "out",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains('8') && err.contains("16"), "{err}");
}

#[test]
fn make_bags_then_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--seed", "2"]);
    ok(
        d,
        &[
            "learn-keys",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "keys.siib",
        ],
    );
    let o = ok(
        d,
        &[
            "make-bags",
            "--manifest",
            "data/manifest.csv",
            "--keys",
            "keys.siib",
            "--out-dir",
            "out",
        ],
    );
    assert!(stderr(&o).contains("mean_retained_fraction="));

    let source = read_embeddings(d.join("data/bags/pos_0000.siib")).unwrap();
    let salient = read_embeddings(d.join("out/bags/pos_0000.siib")).unwrap();
    assert_eq!(
        salient.count(),
        siimil::sii::retained_count(source.count(), 0.3)
    );
    let sidecar = std::fs::read_to_string(d.join("out/bags/pos_0000.saliency.csv")).unwrap();
    assert_eq!(sidecar.lines().next(), Some("selected_index,saliency"));
    assert_eq!(sidecar.lines().count(), salient.count() + 1);

    ok(
        d,
        &[
            "train",
            "--manifest",
            "out/manifest.csv",
            "--no-sii",
            "--folds",
            "2",
            "--max-epochs",
            "4",
            "--out",
            "model.siim",
        ],
    );
    assert!(d.join("model.siim.log.csv").is_file());
    ok(
        d,
        &[
            "eval",
            "--manifest",
            "out/manifest.csv",
            "--model",
            "model.siim",
            "--bootstrap",
            "100",
            "--out",
            "metrics.csv",
            "--groups-out",
            "groups.csv",
            "--scores-out",
            "scores.csv",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7, "{metrics}");
    let groups = std::fs::read_to_string(d.join("groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 5);
    let scores = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 13);
}

#[test]
fn heatmap_brightest_pixel_is_most_attended_instance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--seed", "5"]);
    ok(
        d,
        &[
            "train",
            "--manifest",
            "data/manifest.csv",
            "--no-sii",
            "--folds",
            "1",
            "--max-epochs",
            "3",
            "--out",
            "model.siim",
        ],
    );
    ok(
        d,
        &[
            "heatmap",
            "--bag",
            "data/bags/pos_0001.siib",
            "--model",
            "model.siim",
            "--out-csv",
            "h.csv",
            "--out-pgm",
            "h.pgm",
        ],
    );
    let csv = std::fs::read_to_string(d.join("h.csv")).unwrap();
    let mut best = (0i64, 0i64, f64::NEG_INFINITY);
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let w: f64 = f[2].parse().unwrap();
        rows += 1;
        if w > best.2 {
            best = (f[0].parse().unwrap(), f[1].parse().unwrap(), w);
        }
    }
    let bag = read_embeddings(d.join("data/bags/pos_0001.siib")).unwrap();
    assert_eq!(rows, bag.count());
    let pgm = std::fs::read(d.join("h.pgm")).unwrap();
    let header_end = pgm.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    let header = String::from_utf8_lossy(&pgm[..header_end]).into_owned();
    let dims: Vec<usize> = header
        .split_whitespace()
        .skip(1)
        .take(2)
        .map(|x| x.parse().unwrap())
        .collect();
    let (width, pixels) = (dims[0], &pgm[header_end..]);
    let max = *pixels.iter().max().unwrap();
    assert_eq!(max, 255);
    let coords = bag.coords().unwrap();
    let (min_r, min_c) = (
        coords.iter().map(|c| c[0]).min().unwrap() as i64,
        coords.iter().map(|c| c[1]).min().unwrap() as i64,
    );
    let at = ((best.0 - min_r) as usize) * width + (best.1 - min_c) as usize;
    assert_eq!(pixels[at], 255);
}

#[test]
fn ablate_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--seed", "6"]);
    ok(
        d,
        &[
            "ablate",
            "--manifest",
            "data/manifest.csv",
            "--folds",
            "1",
            "--max-epochs",
            "2",
            "--attention-dim",
            "8",
            "--grid-k",
            "5,10,20",
            "--grid-r",
            "0.2,0.5,1.0",
            "--out",
            "ablation.csv",
        ],
    );
    let csv = std::fs::read_to_string(d.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t_per_bag,top_k,keep_ratio,mean_val_auc");
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("100,5,0.2,"));
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        synth(d, &["--seed", "9"]);
        ok(
            d,
            &[
                "train",
                "--manifest",
                "data/manifest.csv",
                "--folds",
                "2",
                "--max-epochs",
                "3",
                "--t-per-bag",
                "20",
                "--out",
                "model.siim",
            ],
        );
    }
    for f in [
        "model.siim",
        "model.siim.keys.siib",
        "model.siim.log.csv",
        "data/manifest.csv",
        "data/bags/neg_0003.siib",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
