use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmldf::dataset::{parse_libsvm, split, synth_blobs, to_libsvm};
use mmldf::eval::score_projected;
use mmldf::model_file::ModelFile;
use mmldf::solver::transform;
use mmldf::{LabeledDataset, SynthSpec};
use tempfile::TempDir;

fn mmldf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmldf"))
        .args(args)
        .current_dir(dir)
        .env("MMLDF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_dataset(dir: &Path, name: &str, ds: &LabeledDataset) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, to_libsvm(ds)).unwrap();
    path
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        classes: 3,
        samples_per_class: 20,
        informative_dims: 3,
        noise_dims: 5,
        redundant_dims: 0,
        class_separation: 8.0,
        ..SynthSpec::default()
    }
}

fn parse_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

fn train_small(dir: &Path) -> PathBuf {
    let ds = synth_blobs(&small_spec(), 1).unwrap();
    write_dataset(dir, "train.libsvm", &ds);
    ok(&mmldf(
        &[
            "train",
            "--data",
            "train.libsvm",
            "--dim",
            "2",
            "--out",
            "m.json",
        ],
        dir,
    ));
    dir.join("m.json")
}

#[test]
fn train_writes_model_and_report_with_requested_shape() {
    let tmp = TempDir::new().unwrap();
    let out = mmldf(
        &[
            "train", "--synth", "", "--dim", "5", "--seed", "4", "--out", "m.json",
        ],
        tmp.path(),
    );
    ok(&out);
    let model = ModelFile::read(&tmp.path().join("m.json")).unwrap();
    let p = model.projection().unwrap();
    assert_eq!((p.d(), p.r()), (50, 5));
    assert_eq!(model.shapes.k, 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("m.report.json")).unwrap())
            .unwrap();
    assert!(report["objective_trace"].as_array().unwrap().len() >= 2);
}

#[test]
fn dim_not_below_d_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = mmldf(
        &[
            "train",
            "--synth",
            "noise=0,informative=4",
            "--dim",
            "4",
            "--out",
            "m.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("r must be < d"), "{}", stderr(&out));
    assert!(!tmp.path().join("m.json").exists());
}

#[test]
fn parse_error_reports_line_and_exits_2() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("bad.libsvm"), "1 1:0.5\n-1 2:abc\n").unwrap();
    let out = mmldf(
        &[
            "train",
            "--data",
            "bad.libsvm",
            "--dim",
            "1",
            "--out",
            "m.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn training_twice_gives_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    for name in ["a.json", "b.json"] {
        ok(&mmldf(
            &[
                "train",
                "--synth",
                "classes=3",
                "--dim",
                "3",
                "--seed",
                "9",
                "--standardize",
                "--out",
                name,
            ],
            tmp.path(),
        ));
    }
    let a = std::fs::read(tmp.path().join("a.json")).unwrap();
    let b = std::fs::read(tmp.path().join("b.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn selection_model_copies_columns_and_keeps_zero_rows() {
    let tmp = TempDir::new().unwrap();
    let model_path = train_small(tmp.path());
    // Swap in P = [e0 e2] (d = 8, r = 2) and identity statistics.
    let mut json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    let mut p = vec![vec![0.0; 2]; 8];
    p[0][0] = 1.0;
    p[2][1] = 1.0;
    json["p"] = serde_json::json!(p);
    json["stats"]["mean"] = serde_json::json!(vec![0.0; 8]);
    json["stats"]["stddev"] = serde_json::json!(vec![1.0; 8]);
    std::fs::write(tmp.path().join("sel.json"), json.to_string()).unwrap();

    let data = "1 1:0.25 2:-3 3:7.5 8:1\n2\n3 3:-1e-3 5:4\n";
    std::fs::write(tmp.path().join("x.libsvm"), data).unwrap();
    ok(&mmldf(
        &[
            "transform",
            "--model",
            "sel.json",
            "--data",
            "x.libsvm",
            "--out",
            "z.csv",
        ],
        tmp.path(),
    ));
    let rows = parse_rows(&std::fs::read_to_string(tmp.path().join("z.csv")).unwrap());
    assert_eq!(
        rows,
        vec![vec![0.25, 7.5], vec![0.0, 0.0], vec![0.0, -1e-3]]
    );
}

#[test]
fn transform_matches_in_process_projection() {
    let tmp = TempDir::new().unwrap();
    let model_path = train_small(tmp.path());
    let test = synth_blobs(&small_spec(), 2).unwrap();
    write_dataset(tmp.path(), "test.libsvm", &test);
    ok(&mmldf(
        &[
            "transform",
            "--model",
            "m.json",
            "--data",
            "test.libsvm",
            "--out",
            "z.csv",
        ],
        tmp.path(),
    ));
    let rows = parse_rows(&std::fs::read_to_string(tmp.path().join("z.csv")).unwrap());

    let model = ModelFile::read(&model_path).unwrap();
    let reread = parse_libsvm(&to_libsvm(&test), Some(8)).unwrap();
    let x = model.stats().apply_matrix(reread.features()).unwrap();
    let z = transform(&model.projection().unwrap(), x.view()).unwrap();
    assert_eq!(rows.len(), z.nrows());
    for (row, expect) in rows.iter().zip(z.outer_iter()) {
        assert_eq!(row.as_slice(), expect.as_slice().unwrap());
    }
}

#[test]
fn transform_rejects_mismatched_dims() {
    let tmp = TempDir::new().unwrap();
    train_small(tmp.path());
    std::fs::write(tmp.path().join("wide.libsvm"), "1 9:1\n2 1:1\n").unwrap();
    let out = mmldf(
        &[
            "transform",
            "--model",
            "m.json",
            "--data",
            "wide.libsvm",
            "--out",
            "z.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn evaluate_matches_in_process_accuracy() {
    let tmp = TempDir::new().unwrap();
    let ds = synth_blobs(
        &SynthSpec {
            class_separation: 3.0,
            ..small_spec()
        },
        5,
    )
    .unwrap();
    let parts = split(&ds, 30, 1).unwrap();
    write_dataset(tmp.path(), "tr.libsvm", &parts.train);
    write_dataset(tmp.path(), "te.libsvm", &parts.test);
    ok(&mmldf(
        &[
            "train",
            "--data",
            "tr.libsvm",
            "--dim",
            "2",
            "--standardize",
            "--out",
            "m.json",
        ],
        tmp.path(),
    ));
    ok(&mmldf(
        &[
            "evaluate",
            "--model",
            "m.json",
            "--train",
            "tr.libsvm",
            "--test",
            "te.libsvm",
            "--report",
            "eval.json",
        ],
        tmp.path(),
    ));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(rep["train_digest_matches"], true);

    let model = ModelFile::read(&tmp.path().join("m.json")).unwrap();
    let load = |name: &str| {
        let ds = parse_libsvm(
            &std::fs::read_to_string(tmp.path().join(name)).unwrap(),
            Some(8),
        )
        .unwrap();
        let tokens: Vec<String> = ds
            .labels()
            .iter()
            .map(|&l| ds.label_map()[l].clone())
            .collect();
        LabeledDataset::with_label_map(ds.features().clone(), &tokens, model.label_map.clone())
            .unwrap()
    };
    let project = |ds: &LabeledDataset| {
        let x = model.stats().apply_matrix(ds.features()).unwrap();
        transform(&model.projection().unwrap(), x.view()).unwrap()
    };
    let (tr, te) = (load("tr.libsvm"), load("te.libsvm"));
    let acc = score_projected(
        project(&tr),
        tr.labels(),
        project(&te),
        te.labels(),
        1.0,
        true,
    )
    .unwrap();
    assert_eq!(rep["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn evaluate_on_well_separated_split_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let ds = synth_blobs(&small_spec(), 3).unwrap();
    let parts = split(&ds, 30, 2).unwrap();
    write_dataset(tmp.path(), "tr.libsvm", &parts.train);
    write_dataset(tmp.path(), "te.libsvm", &parts.test);
    ok(&mmldf(
        &[
            "train",
            "--data",
            "tr.libsvm",
            "--dim",
            "2",
            "--out",
            "m.json",
        ],
        tmp.path(),
    ));
    let out = mmldf(
        &[
            "evaluate",
            "--model",
            "m.json",
            "--train",
            "tr.libsvm",
            "--test",
            "te.libsvm",
        ],
        tmp.path(),
    );
    ok(&out);
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("accuracy 100.0000%"),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn evaluate_rejects_mismatched_dims() {
    let tmp = TempDir::new().unwrap();
    train_small(tmp.path());
    std::fs::write(tmp.path().join("wide.libsvm"), "1 12:1\n2 1:1\n3 2:1\n").unwrap();
    let out = mmldf(
        &[
            "evaluate",
            "--model",
            "m.json",
            "--train",
            "train.libsvm",
            "--test",
            "wide.libsvm",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn benchmark_rows_config_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "benchmark",
        "--synth",
        "per_class=40",
        "--dims",
        "10:30:10",
        "--trials",
        "2",
        "--train-count",
        "40",
        "--variant",
        "full,mmpp",
        "--max-iters",
        "5",
    ];
    let mut first = args.to_vec();
    first.extend(["--out", "a.csv", "--json", "a.json"]);
    let mut second = args.to_vec();
    second.extend(["--out", "b.csv"]);
    ok(&mmldf(&first, tmp.path()));
    ok(&mmldf(&second, tmp.path()));

    let a = std::fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    let b = std::fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(
        lines[0],
        "variant,dim,param_value,mean_acc,std_acc,trials,seed"
    );
    let dims: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let mut cells = l.split(',');
            (cells.next().unwrap(), cells.next().unwrap())
        })
        .collect();
    assert_eq!(
        dims,
        [
            ("full", "10"),
            ("full", "20"),
            ("full", "30"),
            ("mmpp", "10"),
            ("mmpp", "20"),
            ("mmpp", "30")
        ]
    );

    let tables: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.json")).unwrap()).unwrap();
    let mmpp = &tables[1]["hyperparams"];
    for key in ["eta", "lambda", "rho"] {
        assert_eq!(mmpp[key].as_f64(), Some(0.0), "{key}");
    }
    assert_eq!(tables[0]["hyperparams"]["eta"].as_f64(), Some(0.01));
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    ok(&mmldf(&["gradcheck"], tmp.path()));
    ok(&mmldf(&["gradcheck", "--eps-smooth", "1"], tmp.path()));
    let out = mmldf(&["gradcheck", "--d", "6", "--r", "6"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("r must be < d"));
}
