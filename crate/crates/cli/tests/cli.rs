use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn small_synth(years: (i32, i32)) -> String {
    format!(
        r#"{{"first_year": {}, "last_year": {}, "per_year": 40, "dim": 6,
            "senses": [{{"seed": 1, "weights": 0.5}}, {{"seed": 2, "weights": 0.5}}],
            "drifts": [{{"year": {}, "magnitude": 5.0, "seed": 3}}], "seed": 11}}"#,
        years.0,
        years.1,
        years.1
    )
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "report.json",
        &format!(
            r#"{{"synth": {}, "kmeans": {{"k": 2}},
                "affinity_propagation": {{"sampling": {{"min_per_year": 20}}}},
                "metrics": ["prt", "jsd", "entropy", {{"metric": "aid", "aid_mode": "pair_mean"}}],
                "permutation": {{"r_max": 200}}}}"#,
            small_synth((1950, 1957))
        ),
    );
    let config = config.to_str().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, threads) in [(&out_a, "1"), (&out_b, "3")] {
        let res = scd(&["report", "--config", config, "--seed", "7", "--out", out.to_str().unwrap(), "--threads", threads]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let files = list_files(&out_a);
    assert_eq!(files, list_files(&out_b));
    for f in &files {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{}", f.display());
    }
    for expected in [
        "manifest.json",
        "series/prt_prototype.csv",
        "series/jsd_kmeans.csv",
        "series/jsd_ap.csv",
        "series/entropy_ap_rolling3.json",
        "series/aid_pair_mean.csv",
        "permutation/prt.csv",
        "models/kmeans.labels.bin",
        "models/ap.centers.vec",
        "store/synthetic.vec",
        "store/ground_truth.json",
        "report/plot_data.json",
        "report/correlations.json",
    ] {
        assert!(files.contains(&PathBuf::from(expected)), "missing {expected}");
    }
    let manifest = fs::read_to_string(out_a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\""));
    assert!(manifest.contains("\"root_seed\": 7"));
    // Every artifact except the manifest is listed.
    for f in files.iter().filter(|f| f.as_path() != Path::new("manifest.json")) {
        assert!(manifest.contains(&format!("\"path\": \"{}\"", f.display())), "{} unlisted", f.display());
    }
}

#[test]
fn prt_only_on_two_years_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "prt.json",
        &format!(r#"{{"synth": {}, "metrics": ["prt"], "out_dir": "prt-out"}}"#, small_synth((2000, 2001))),
    );
    let res = scd(&["metrics", "--config", config.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(dir.path().join("prt-out/series/prt_prototype.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert_eq!(lines[0], "year_pair,value,metric,variant");
    assert!(lines[1].starts_with("2000-2001,"));
}

#[test]
fn missing_store_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", r#"{"store": "nowhere/corpus", "metrics": ["prt"]}"#);
    let out = dir.path().join("out");
    let res = scd(&["report", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("[load]"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn config_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &format!(r#"{{"synth": {}, "metrics": []}}"#, small_synth((2000, 2002))));
    let res = scd(&["metrics", "--config", config.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("[config] at least one metric"));
    let res = scd(&["metrics", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("[config]"));
    assert!(!scd(&["frobnicate"]).status.success());
}

#[test]
fn synth_then_ingest_with_filters() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = write_config(dir.path(), "synth.json", &format!(r#"{{"synth": {}}}"#, small_synth((1990, 1994))));
    let synth_out = dir.path().join("synth-out");
    let res = scd(&["synth", "--config", synth_cfg.to_str().unwrap(), "--out", synth_out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::metadata(synth_out.join("store/synthetic.vec")).unwrap().len(), 16 + 5 * 40 * 6 * 4);

    let ingest_cfg = write_config(
        dir.path(),
        "ingest.json",
        r#"{"store": "synth-out/store/synthetic", "year_range": [1991, 1992], "journals": ["SYN"]}"#,
    );
    let ingest_out = dir.path().join("ingest-out");
    let res = scd(&["ingest", "--config", ingest_cfg.to_str().unwrap(), "--out", ingest_out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = fs::read_to_string(ingest_out.join("store/summary.json")).unwrap();
    assert!(summary.contains("\"count\": 80"), "{summary}");
    assert!(summary.contains("\"1991\": 40"));
    assert_eq!(fs::metadata(ingest_out.join("store/corpus.vec")).unwrap().len(), 16 + 80 * 6 * 4);
}

#[test]
fn deps_subcommand_tabulates_by_decade() {
    let dir = tempfile::tempdir().unwrap();
    let records = [
        ("photon", 1951),
        ("photon", 1952),
        ("state", 1953),
        ("level", 1961),
    ]
    .iter()
    .map(|(h, y)| format!(r#"{{"adj_lemma":"virtual","head_lemma":"{h}","year":{y},"journal":"PR","doc_id":"d"}}"#))
    .collect::<Vec<_>>()
    .join("\n");
    fs::write(dir.path().join("deps.jsonl"), records).unwrap();
    let config = write_config(dir.path(), "deps.json", r#"{"dependencies": {"input": "deps.jsonl", "k": 1}}"#);
    let out = dir.path().join("out");
    let res = scd(&["deps", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("deps/top_dependencies.csv")).unwrap();
    assert_eq!(
        csv,
        "group,rank,head_lemma,count,share\n1950,1,photon,2,0.6666666666666666\n1960,1,level,1,1\n"
    );
}

#[test]
fn failing_stage_leaves_a_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // Affinity propagation cannot converge in one iteration.
    let config = write_config(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"synth": {}, "affinity_propagation": {{"max_iter": 1}}, "metrics": ["jsd"]}}"#,
            small_synth((2000, 2003))
        ),
    );
    let out = dir.path().join("out");
    let res = scd(&["metrics", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("[cluster]"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"partial\""));
    assert!(manifest.contains("\"failed_stage\": \"cluster\""));
    assert!(manifest.contains("store/synthetic.vec"));
}

#[test]
fn per_year_clustering_gives_entropy_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"synth": {}, "kmeans": {{"k": 2}}, "clustering_scope": "per_year", "metrics": ["entropy"]}}"#,
            small_synth((1980, 1982))
        ),
    );
    let out = dir.path().join("out");
    let res = scd(&["metrics", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("series/entropy_kmeans_per_year.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    for year in 1980..=1982 {
        assert!(out.join(format!("models/kmeans_per_year/{year}.labels.bin")).is_file());
    }
    assert!(!out.join("models/kmeans.json").exists());

    let jsd = write_config(
        dir.path(),
        "jsd.json",
        &format!(
            r#"{{"synth": {}, "kmeans": {{"k": 2}}, "clustering_scope": "per_year", "metrics": ["jsd"]}}"#,
            small_synth((1980, 1982))
        ),
    );
    let res = scd(&["metrics", "--config", jsd.to_str().unwrap(), "--out", dir.path().join("jsd-out").to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("[config] jsd compares years"));
}
