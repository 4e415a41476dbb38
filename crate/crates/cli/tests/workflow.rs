use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

fn pathloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathloss"))
        .args(args)
        .env_remove("PATHLOSS_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pathloss(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SCENE: [&str; 8] = [
    "--set",
    "scene.extent_m=600",
    "--set",
    "scenario.max_length_m=250",
    "--set",
    "generation.margin_m=40",
    "--set",
    "generation.oracle_samples=64",
];

fn gen(out: &Path, regions: &str, links: usize, seed: u64) {
    let regions = format!("regions={regions}");
    let links = format!("scenario.links_per_region={links}");
    let seed = format!("seed={seed}");
    let mut args = vec![
        "gen",
        "--out",
        s(out),
        "--set",
        &regions,
        "--set",
        &links,
        "--set",
        &seed,
    ];
    args.extend(SMALL_SCENE);
    ok(&args);
}

fn link_files(data: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(data.join("links"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

fn extract(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = [
        "extract",
        "--rasters",
        s(&data.join("rasters")),
        "--out",
        s(out),
        "--set",
        "profile.length_samples=32",
        "--set",
        "profile.transverse_samples=8",
        "--links",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(link_files(data).iter().map(|l| s(l).to_string()));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    pathloss(&refs)
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_rasters_links_and_manifest_reproducibly() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, r#"["r0"]"#, 20, 5);
    gen(&b, r#"["r0"]"#, 20, 5);
    assert_eq!(fs::read_dir(a.join("rasters")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(a.join("links")).unwrap().count(), 1);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["regions"][0]["scene_seed"].is_u64());
    assert!(manifest["link_seed"].is_u64());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn six_regions_give_twelve_rasters_and_six_tables() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), r#"["a","b","c","d","e","f"]"#, 5, 1);
    assert_eq!(fs::read_dir(t.path().join("rasters")).unwrap().count(), 12);
    assert_eq!(fs::read_dir(t.path().join("links")).unwrap().count(), 6);
}

#[test]
fn unknown_config_key_suggests_a_fix() {
    let t = tempfile::tempdir().unwrap();
    let out = pathloss(&["gen", "--out", s(t.path()), "--set", "scenario.links_per_regon=3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("did you mean `links_per_region`"), "{err}");
}

#[test]
fn help_documents_config_keys() {
    for (cmd, key) in [
        ("gen", "scenario.links_per_region"),
        ("extract", "profile.length_samples"),
        ("augment", "n_per_region"),
        ("train", "experiment.training.epochs"),
        ("sweep", "experiment.augmentation_n"),
    ] {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains(key), "{cmd} --help lacks {key}");
    }
}

#[test]
fn extract_is_idempotent_and_reports_bad_links() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, r#"["r0"]"#, 10, 2);
    // append one link that leaves the raster
    let csv = data.join("links/r0.csv");
    let mut text = fs::read_to_string(&csv).unwrap();
    let last = text.lines().last().unwrap().to_string();
    let mut fields: Vec<String> = last.split(',').map(String::from).collect();
    fields[0] = "99999".into();
    text.push_str(&fields.join(","));
    text.push('\n');
    fs::write(&csv, text).unwrap();

    let (p1, p2) = (t.path().join("p1"), t.path().join("p2"));
    let out = extract(&data, &p1, &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    assert!(extract(&data, &p2, &[]).status.success());
    let files = tree_bytes(&p1);
    assert_eq!(
        files
            .iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "rppl"))
            .count(),
        10
    );
    assert_eq!(files, tree_bytes(&p2));
    let failures: serde_json::Value = serde_json::from_slice(&fs::read(p1.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);

    let strict = extract(&data, &t.path().join("p3"), &["--strict"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn augment_writes_reflected_copies() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, r#"["r0","r1"]"#, 8, 3);
    let profiles = t.path().join("profiles");
    assert!(extract(&data, &profiles, &[]).status.success());
    let out = t.path().join("aug");
    ok(&[
        "augment",
        "--profiles",
        s(&profiles),
        "--out",
        s(&out),
        "--set",
        "n_per_region=3",
        "--set",
        "selection_seed=4",
    ]);
    let files = tree_bytes(&out);
    assert_eq!(files.len(), 6);
    assert!(files
        .iter()
        .all(|(p, _)| p.to_str().unwrap().ends_with(".reflected.rppl")));
}

fn sweep_config(dir: &Path, profiles: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "data": { "downlink": profiles },
        "experiment": {
            "regions": ["r0", "r1"],
            "holdouts": ["r0"],
            "augmentation_n": [0, 4],
            "repeats": 1,
            "base_seed": 9,
            "training": { "epochs": 2, "batch_size": 16, "learning_rate": 0.003, "patience": 5 },
            "profile": { "length_samples": 32, "transverse_samples": 8 },
            "model": {
                "input_shape": [4, 32, 8],
                "conv_blocks": [
                    { "out_channels": 4, "kernel": [3, 3], "stride": 1, "padding": 1 },
                    { "out_channels": 8, "kernel": [3, 3], "stride": 1, "padding": 1 }
                ],
                "dense": [8]
            }
        }
    });
    let p = dir.join("sweep.json");
    fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

fn mtimes(dir: &Path) -> Vec<(PathBuf, SystemTime)> {
    let mut v: Vec<_> = tree_bytes(dir)
        .into_iter()
        .map(|(p, _)| {
            let m = fs::metadata(dir.join(&p)).unwrap().modified().unwrap();
            (p, m)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_sweep_resume_and_report() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, r#"["r0","r1"]"#, 50, 7);
    let profiles = t.path().join("profiles");
    assert!(extract(&data, &profiles, &[]).status.success());
    let cfg = sweep_config(t.path(), &profiles);
    let run = t.path().join("run");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&run), "--jobs", "2"]);
    for f in [
        "summary_identity.csv",
        "summary_reflected.csv",
        "report.json",
        "kde_identity_n0.csv",
    ] {
        assert!(run.join("report").join(f).exists(), "missing {f}");
    }
    let kde = fs::read_to_string(run.join("report/kde_identity_n0.csv")).unwrap();
    assert_eq!(kde.lines().count(), 513);

    // Mean row equals the column means of the holdout rows
    let summary = fs::read_to_string(run.join("report/summary_identity.csv")).unwrap();
    let rows: Vec<Vec<String>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let (mean_row, holdouts) = rows.split_last().unwrap();
    assert_eq!(mean_row[0], "Mean");
    for col in 1..mean_row.len() {
        let m: f64 = holdouts.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / holdouts.len() as f64;
        assert!((m - mean_row[col].parse::<f64>().unwrap()).abs() < 1e-9);
    }

    let runs_dir = run.join("runs");
    let before = mtimes(&runs_dir);
    let manifest_before = fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    ok(&["sweep", "--config", s(&cfg), "--out", s(&run), "--resume"]);
    assert_eq!(mtimes(&runs_dir), before);
    assert_eq!(fs::read_to_string(run.join("manifest.jsonl")).unwrap(), manifest_before);

    let report2 = t.path().join("report2");
    ok(&["report", "--run", s(&run), "--out", s(&report2)]);
    assert_eq!(
        fs::read(report2.join("summary_identity.csv")).unwrap(),
        fs::read(run.join("report/summary_identity.csv")).unwrap()
    );

    let model = run.join("runs/r0/0/0/model.rpnn");
    let eval_out = t.path().join("eval");
    let out = ok(&[
        "eval",
        "--model",
        s(&model),
        "--profiles",
        s(&profiles.join("r0")),
        "--reciprocity",
        "--out",
        s(&eval_out),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("reflected"));
    assert!(eval_out.join("eval.json").exists());
}

#[test]
fn train_runs_one_cell() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, r#"["r0","r1"]"#, 30, 8);
    let profiles = t.path().join("profiles");
    assert!(extract(&data, &profiles, &[]).status.success());
    let cfg = sweep_config(t.path(), &profiles);
    let out = t.path().join("train");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--holdout",
        "r1",
        "--n",
        "4",
    ]);
    for f in ["model.rpnn", "history.json", "result.json"] {
        assert!(out.join("runs/r1/4/0").join(f).exists(), "missing {f}");
    }
    let bad = pathloss(&["train", "--config", s(&cfg), "--out", s(&out), "--holdout", "nowhere"]);
    assert!(!bad.status.success());
}
