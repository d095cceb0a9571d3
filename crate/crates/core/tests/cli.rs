use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn roifcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roifcn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = roifcn(
        &[
            "gen-data", "--out", "data", "--train", "6", "--test", "3", "--size", "32x32",
            "--seed", "4",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(d.join("data/test.manifest")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    let (img, mask) = manifest.lines().next().unwrap().split_once('\t').unwrap();
    assert!(d.join("data").join(img).exists() && d.join("data").join(mask).exists());

    fs::write(
        d.join("run.cfg"),
        "# short run\nheight = 32\nwidth = 32\niterations = 12\n",
    )
    .unwrap();
    for (name, extra) in [("det", None), ("abl", Some("--no-detection"))] {
        let ckpt = format!("{name}.ckpt");
        let mut args = vec![
            "train", "--data", "data", "--config", "run.cfg", "--out", &ckpt, "--seed", "9",
        ];
        args.extend(extra);
        let o = roifcn(&args, d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let resolved = fs::read_to_string(d.join(format!("{name}.config"))).unwrap();
        assert!(resolved.contains("seed = 9"));
        assert!(resolved.contains(&format!("detection = {}", extra.is_none())));
        let log = fs::read_to_string(d.join(format!("{name}.loss.csv"))).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines[0], "iter,l_reg,l_cls,l_seg,total,lr");
        assert_eq!(lines.len(), 13);
        if extra.is_some() {
            assert!(lines[1].starts_with("0,,,"), "{}", lines[1]);
        }

        let o = roifcn(
            &[
                "eval",
                "--data",
                "data",
                "--model",
                &ckpt,
                "--report",
                "report.csv",
                "--curve",
                "curve.csv",
            ],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report = fs::read_to_string(d.join("report.csv")).unwrap();
        let rows: Vec<_> = report.lines().filter(|l| !l.starts_with("# ")).collect();
        assert_eq!(rows[0], "slice_id,precision,recall,dice");
        assert_eq!(rows.len(), 5);
        assert!(rows[4].starts_with("#mean,"));
        let curve = fs::read_to_string(d.join("curve.csv")).unwrap();
        assert!(curve.starts_with("rank,slice_id,dice\n"));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&roifcn(&["--help"], d)), 0);
    assert_eq!(code(&roifcn(&["frobnicate"], d)), 1);
    assert_eq!(code(&roifcn(&["gen-data", "--out", "x"], d)), 1);
    assert_eq!(
        code(&roifcn(
            &["gen-data", "--out", "x", "--train", "1", "--test", "1", "--size", "big"],
            d
        )),
        1
    );

    roifcn(
        &[
            "gen-data", "--out", "data", "--train", "3", "--test", "1", "--size", "32x32",
        ],
        d,
    );
    fs::write(d.join("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    let o = roifcn(
        &[
            "train", "--data", "data", "--config", "bad.cfg", "--out", "m.ckpt",
        ],
        d,
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `learning_rate`"));

    // A wildly large step blows the activations up.
    fs::write(
        d.join("boom.cfg"),
        "height = 32\nwidth = 32\niterations = 50\nlr = 1e6\n",
    )
    .unwrap();
    let o = roifcn(
        &[
            "train", "--data", "data", "--config", "boom.cfg", "--out", "m.ckpt",
        ],
        d,
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));

    let o = roifcn(
        &[
            "eval",
            "--data",
            "data",
            "--model",
            "missing.ckpt",
            "--report",
            "r",
            "--curve",
            "c",
        ],
        d,
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_and_bench_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = roifcn(&["gradcheck"], d);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 18);
    assert!(out.lines().all(|l| l.ends_with(" ok")));

    let o = roifcn(
        &[
            "bench",
            "--sizes",
            "16,24",
            "--rois",
            "1,2",
            "--reps",
            "2",
            "--out",
            "bench.csv",
        ],
        d,
    );
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(d.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
