use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--data",
    "synthetic",
    "--set",
    "synthetic_per_class=10",
    "--set",
    "image_size=8",
    "--set",
    "depth=1",
    "--set",
    "model_dim=16",
    "--set",
    "heads=2",
];

fn mma(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mma"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mma")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: &[String], dir: &Path) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mma(&refs, dir)
}

fn total_params(out: &Output) -> i64 {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix("params.total"))
        .expect("params.total line")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b"] {
        let o = mma(
            &["gen-data", "--seed", "7", "--per-class", "5", "--out", out],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.bin", "test.bin"] {
        let a = fs::read(p.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(p.join("b").join(f)).unwrap());
    }
    // 20 images of 16x16x3 plus a label byte, split 16 / 4
    assert_eq!(fs::read(p.join("a/train.bin")).unwrap().len(), 16 * 769);
    let o = mma(
        &["gen-data", "--seed", "8", "--per-class", "5", "--out", "c"],
        p,
    );
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(p.join("a/train.bin")).unwrap(),
        fs::read(p.join("c/train.bin")).unwrap()
    );
}

#[test]
fn report_param_delta_is_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    for (depth, heads, dim) in [(6usize, 4usize, 256usize), (2, 3, 24), (7, 1, 8)] {
        let common = [
            format!("depth={depth}"),
            format!("heads={heads}"),
            format!("model_dim={dim}"),
        ];
        let mut args = vec!["report".to_string()];
        for c in &common {
            args.push("--set".into());
            args.push(c.clone());
        }
        let early = run(
            &with(&[], &[])
                .into_iter()
                .chain(args.clone())
                .collect::<Vec<_>>(),
            dir.path(),
        );
        let mut base = args.clone();
        base.extend(["--manifolds".into(), "e".into()]);
        let euclid = run(&base, dir.path());
        assert_eq!(code(&early), 0);
        assert_eq!(code(&euclid), 0);
        let delta = total_params(&early) - total_params(&euclid);
        let h = heads as i64;
        assert_eq!(delta, depth as i64 * (3 * h * h + h));
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&mma(&["bogus"], p)), 1);
    assert_eq!(code(&mma(&["report", "--frobnicate"], p)), 1);
    assert_eq!(code(&mma(&["report", "--manifolds", "x"], p)), 1);
    assert_eq!(code(&mma(&["report", "--set", "colour=red"], p)), 1);
    assert_eq!(code(&mma(&["report", "--set", "depth=many"], p)), 1);
    fs::write(p.join("bad.cfg"), "depth 3\n").unwrap();
    assert_eq!(code(&mma(&["report", "--config", "bad.cfg"], p)), 1);
    assert_eq!(code(&mma(&["report", "--config", "missing.cfg"], p)), 1);
    assert_eq!(code(&mma(&["--help"], p)), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&mma(&["train", "--data", "cifar10:nowhere"], p)), 2);
    fs::write(p.join("junk.mmac"), b"not a checkpoint").unwrap();
    let o = mma(
        &["eval", "--checkpoint", "junk.mmac", "--data", "synthetic"],
        p,
    );
    assert_eq!(code(&o), 2);
    assert_eq!(
        code(&mma(
            &["eval", "--checkpoint", "absent.mmac", "--data", "synthetic"],
            p
        )),
        2
    );
}

#[test]
fn verification_commands_report_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = mma(&["gradcheck"], p);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("GRAD mma_block PASS"));
    assert_eq!(code(&mma(&["gradcheck", "--inject-fault"], p)), 3);
    let ok = mma(&["verify", "--seed", "3"], p);
    assert_eq!(code(&ok), 0);
    assert!(
        stdout(&ok)
            .lines()
            .filter(|l| l.starts_with("PROP"))
            .count()
            >= 10
    );
    assert_eq!(code(&mma(&["verify", "--inject-fault"], p)), 3);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(
        &with(&["train"], TINY)
            .into_iter()
            .chain(["--epochs".into(), "2".into(), "--quiet".into()])
            .collect::<Vec<_>>(),
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(p.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss,eval_loss,eval_acc,lr,seconds\n"));

    let o = run(
        &with(
            &[
                "eval",
                "--checkpoint",
                "model.mmac",
                "--export-features",
                "f.csv",
            ],
            TINY,
        ),
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("samples=8"));
    let feats = fs::read_to_string(p.join("f.csv")).unwrap();
    let lines: Vec<&str> = feats.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[1].split(',').count(), 17);

    let o = mma(
        &[
            "eval",
            "--checkpoint",
            "model.mmac",
            "--data",
            "synthetic",
            "--set",
            "depth=3",
        ],
        p,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn double_precision_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for tag in ["a", "b"] {
        let extra = [
            "--precision".to_string(),
            "64".into(),
            "--epochs".into(),
            "2".into(),
            "--seed".into(),
            "5".into(),
            "--quiet".into(),
            "--out".into(),
            format!("{tag}.mmac"),
            "--log".into(),
            format!("{tag}.csv"),
        ];
        let args: Vec<String> = with(&["train"], TINY).into_iter().chain(extra).collect();
        assert_eq!(code(&run(&args, p)), 0);
    }
    assert_eq!(
        fs::read(p.join("a.mmac")).unwrap(),
        fs::read(p.join("b.mmac")).unwrap()
    );
    let strip = |f: &str| -> Vec<String> {
        fs::read_to_string(p.join(f))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip("a.csv"), strip("b.csv"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("run.cfg"),
        "# tiny run\ndata=synthetic\nsynthetic_per_class=10\nimage_size=8\ndepth=1\nmodel_dim=16\nheads=2\nepochs=3\n",
    )
    .unwrap();
    let rows = |log: &str| fs::read_to_string(p.join(log)).unwrap().lines().count() - 1;
    let o = mma(
        &[
            "train", "--config", "run.cfg", "--quiet", "--log", "file.csv",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows("file.csv"), 3);
    let o = mma(
        &[
            "train", "--config", "run.cfg", "--epochs", "1", "--quiet", "--log", "flag.csv",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(rows("flag.csv"), 1);
}

#[test]
fn records_written_by_gen_data_train() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = mma(
        &[
            "gen-data",
            "--per-class",
            "10",
            "--size",
            "8",
            "--out",
            "recs",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let o = mma(
        &[
            "train",
            "--data",
            "records:recs",
            "--set",
            "image_size=8",
            "--set",
            "num_classes=4",
            "--set",
            "depth=1",
            "--set",
            "model_dim=16",
            "--set",
            "heads=2",
            "--epochs",
            "1",
            "--quiet",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("32 train / 8 test"));
}

fn read_csv(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn inspect_csv_and_pgm_agree() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(
        &with(&["inspect", "--out", "maps", "--index", "3"], TINY),
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let maps = p.join("maps");
    let mut stems: Vec<String> = fs::read_dir(&maps)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.strip_suffix(".csv").map(str::to_string)
        })
        .collect();
    stems.sort();
    // 1 block x 2 heads x (3 distance maps + fused)
    assert_eq!(stems.len(), 8);
    assert!(stems.contains(&"block0_head1_dist_spd".to_string()));
    assert!(stems.contains(&"block0_head0_fused".to_string()));
    for stem in &stems {
        let values = read_csv(&maps.join(format!("{stem}.csv")));
        let pgm = fs::read(maps.join(format!("{stem}.pgm"))).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (v, &q) in values.iter().zip(&pgm[header.len()..]) {
            let expect = if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            };
            assert_eq!(q, expect, "{stem}");
        }
        if stem.ends_with("fused") {
            for row in values.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        if stem.contains("dist_spd") || stem.contains("dist_g") {
            assert!(values.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn inspect_late_fusion_names_each_tower() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args: Vec<String> = with(&["inspect", "--out", "late", "--fusion", "late"], TINY);
    let o = run(&args, p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["e", "spd", "g"] {
        assert!(p.join(format!("late/block0_head0_attn_{m}.pgm")).exists());
        assert!(p.join(format!("late/block0_head1_dist_{m}.csv")).exists());
    }
}
