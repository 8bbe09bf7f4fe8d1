use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hiertax::volprep::Volume;

const SMALL: &str = "\
seed = 3
synthetic.feature_dim = 4
synthetic.scale = 0.01
synthetic.level_scales = 3, 2, 1
synthetic.noise_sigma = 0.5
backbone.widths = 8
head.hidden = 4
train.epochs = 3
";

fn hiertax(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiertax"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "small.cfg", SMALL);

    let out = hiertax(d, &["gen", "--config", &cfg, "--out", "gen"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("gen/dataset.csv")).unwrap();
    assert!(csv.starts_with("id,leaf,split,f0,f1,f2,f3\n"));
    let first = fs::read(d.join("gen/dataset.csv")).unwrap();
    assert!(hiertax(d, &["gen", "--config", &cfg, "--out", "gen"]).status.success());
    assert_eq!(fs::read(d.join("gen/dataset.csv")).unwrap(), first);

    let split_cfg = config(d, "split.cfg", "seed = 3\ndataset = gen/dataset.csv\nbackbone.widths = 8\nhead.hidden = 4\ntrain.epochs = 3\n");
    assert!(hiertax(d, &["split", "--config", &split_cfg, "--out", "split"]).status.success());
    let split = fs::read_to_string(d.join("split/dataset.csv")).unwrap();
    assert!(split.lines().skip(1).all(|l| l.split(',').nth(2).is_some_and(|s| !s.is_empty())));

    let out = hiertax(d, &["train", "--config", &cfg, "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for kind in ["leaf-node", "flattened", "leaky-flattened", "dense", "leaky-dense"] {
        assert!(d.join(format!("run/model_{kind}.bin")).exists());
        let history = fs::read_to_string(d.join(format!("run/history_{kind}.csv"))).unwrap();
        assert_eq!(history.lines().count(), 4);
    }

    let out = hiertax(d, &["eval", "--config", &cfg, "--out", "run", "--auc-population", "applicable"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(d.join("run/report_leaky-dense.csv")).unwrap();
    assert!(report.starts_with("node,auc,n_pos,n_total\n"));
    assert!(report.lines().last().unwrap().starts_with("mAUC@L,"));
    assert!(d.join("run/roc_leaky-dense_H4a.csv").exists());
    assert_eq!(fs::read_to_string(d.join("run/table2.txt")).unwrap().lines().count(), 7);
    let manifest = fs::read_to_string(d.join("run/manifest.txt")).unwrap();
    assert!(manifest.contains("eval.population = applicable"));

    let one = config(d, "one.cfg", &format!("{SMALL}strategy = dense\n"));
    let out = hiertax(d, &["compare", "--config", &one, "--out", "cmp", "--parallel"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("cmp/table2.txt")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(d.join("cmp/table3.txt")).unwrap().lines().count(), 3);

    let out = hiertax(d, &["gradcheck", "--config", &cfg, "--out", "gc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gc = fs::read_to_string(d.join("gc/gradcheck.csv")).unwrap();
    assert_eq!(gc.lines().count(), 6);
    assert!(gc.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn compare_is_reproducible_and_parallel_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "c.cfg", SMALL);
    assert!(hiertax(d, &["compare", "--config", &cfg, "--out", "a"]).status.success());
    assert!(hiertax(d, &["compare", "--config", &cfg, "--out", "b", "--parallel"]).status.success());
    for name in ["table2.txt", "table3.txt", "report_leaf-node.csv", "model_leaky-dense.bin", "history_dense.csv"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = config(d, "bad.cfg", "seed = 1\nwhatever = 2\n");
    let out = hiertax(d, &["gen", "--config", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config line 2"));

    let zero = config(d, "zero.cfg", "synthetic.count.H4a = 0\n");
    assert_eq!(hiertax(d, &["gen", "--config", &zero]).status.code(), Some(1));

    let missing = config(d, "missing.cfg", &format!("{SMALL}dataset = nowhere.csv\n").replace("synthetic.", "#"));
    assert_eq!(hiertax(d, &["train", "--config", &missing]).status.code(), Some(2));

    assert_eq!(hiertax(d, &["fit", "--config", &bad]).status.code(), Some(1));
}

fn sphere(n: usize, spacing: [f64; 3]) -> Volume {
    let mut v = Volume::filled([n, n, n], spacing, -900.0, false).unwrap();
    let c = n as f64 / 2.0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                if r2 < 36.0 {
                    v.set(x, y, z, 60.0);
                }
            }
        }
    }
    v
}

#[test]
fn prep_from_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("vols")).unwrap();
    sphere(40, [1.0, 1.0, 1.5]).write(&d.join("vols/a.vol")).unwrap();
    Volume::filled([60, 60, 60], [1.0; 3], 100.0, false).unwrap().write(&d.join("vols/b.vol")).unwrap();
    fs::write(d.join("centroids.csv"), "id,x_mm,y_mm,z_mm,leaf\na,20,20,30,H4a\nb,30,30,30,H3a\n").unwrap();
    let cfg = config(d, "prep.cfg", "volumes = vols\ncentroids = centroids.csv\nprep.pool_block = 16\n");

    let out = hiertax(d, &["prep", "--config", &cfg, "--out", "p1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(hiertax(d, &["prep", "--config", &cfg, "--out", "p2"]).status.success());
    let a = fs::read_to_string(d.join("p1/dataset.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("p2/dataset.csv")).unwrap());
    let rows: Vec<&str> = a.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].split(',').count(), 3 + 27);
    // The constant volume fills the whole crop, so every pooled cell is equal.
    let b: Vec<&str> = rows[2].split(',').skip(3).collect();
    assert!(b.iter().all(|v| *v == b[0]));

    fs::write(d.join("centroids.csv"), "id,x_mm,y_mm,z_mm,leaf\na,20,20,30,H4a\nc,1,1,1,H3a\n").unwrap();
    let out = hiertax(d, &["prep", "--config", &cfg, "--out", "p3"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("b.vol: no centroid") && err.contains("c: no volume file"), "{err}");
}
