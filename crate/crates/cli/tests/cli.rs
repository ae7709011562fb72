use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("clar-cli-{name}-{}", std::process::id()));
        fs::remove_dir_all(&dir).ok();
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn write(&self, name: &str, text: &str) {
        fs::write(self.0.join(name), text).unwrap();
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.0.join(name)).unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_clar")).args(args).current_dir(&self.0).output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "clar {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        fs::remove_dir_all(&self.0).ok();
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const CONLL: &str = "\
1\tdogs\tdogs\tdogs\tNN\tNN\t_\t_\t0\t0\tROOT\tROOT\t_\t_\tA0
2\tchase\tchase\tchase\tVB\tVB\t_\t_\t0\t0\tROOT\tROOT\tY\tchase.01\t_
3\tcats\tcats\tcats\tNN\tNN\t_\t_\t0\t0\tROOT\tROOT\t_\t_\tA1

1\tcats\tcats\tcats\tNN\tNN\t_\t_\t0\t0\tROOT\tROOT\t_\t_\tA0
2\tsleep\tsleep\tsleep\tVB\tVB\t_\t_\t0\t0\tROOT\tROOT\tY\tsleep.01\t_
3\tnow\tnow\tnow\tRB\tRB\t_\t_\t0\t0\tROOT\tROOT\t_\t_\tAM-TMP
";

#[test]
fn freq_counts_arguments_and_records_a_manifest() {
    let s = Scratch::new("freq");
    s.write("in.conll", CONLL);
    s.ok(&["--output-dir", "out", "freq", "--input", "in.conll", "--language", "en"]);
    assert_eq!(s.read("out/freq.tsv"), "en\tA0\t2\nen\tA1\t1\nen\tAM-TMP\t1\nTOTAL\t4\n");
    let m = manifest(&s.0.join("out"));
    assert_eq!(m["command"], "freq");
    let digest = m["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "freq.tsv"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let s = Scratch::new("exit");
    s.write("bad.conll", "1\tonly\tthree\n");
    let missing = s.run(&["freq", "--input", "nope.conll", "--language", "en"]);
    assert_eq!(missing.status.code(), Some(6));
    let malformed = s.run(&["freq", "--input", "bad.conll", "--language", "en"]);
    assert_eq!(malformed.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&malformed.stderr).contains("error (format)"));
    let usage = s.run(&["freq", "--language", "en"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let s = Scratch::new("keys");
    s.write("synth.conf", "num_labels = 4\ncolour = blue\n");
    let out = s.run(&["synth", "--config", "synth.conf"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn self_match_pairs_every_label_at_zero_distance() {
    let s = Scratch::new("match");
    let weights = "en\tA0\t1\t0\nen\tA1\t0\t1\nen\tA2\t1\t1\n";
    s.write("w.tsv", weights);
    s.write("f.tsv", "en\tA0\t5\nen\tA1\t5\nen\tA2\t5\nTOTAL\t15\n");
    s.ok(&[
        "--output-dir", "m", "match", "--source-weights", "w.tsv", "--target-weights", "w.tsv",
        "--source-freq", "f.tsv", "--target-freq", "f.tsv", "--cardinality", "all",
    ]);
    let pairing = s.read("m/pairing.tsv");
    assert_eq!(pairing.lines().count(), 3);
    for line in pairing.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1], cols[3]);
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(manifest(&s.0.join("m"))["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn analyze_reports_perfect_correlation_for_scaled_copies() {
    let s = Scratch::new("analyze");
    s.write("src.tsv", "en\tA\t0\t0\nen\tB\t3\t0\nen\tC\t0\t4\n");
    s.write("tgt.tsv", "de\tX\t0\t0\nde\tY\t6\t0\nde\tZ\t0\t8\n");
    s.write("pairs.tsv", "en\tA\tde\tX\t0\nen\tB\tde\tY\t9\nen\tC\tde\tZ\t16\n");
    s.ok(&[
        "--output-dir", "a", "analyze", "--source-weights", "src.tsv", "--target-weights", "tgt.tsv",
        "--pairing", "pairs.tsv",
    ]);
    let report = s.read("a/manifold.tsv");
    let pearson: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("pearson\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((pearson - 1.0).abs() < 1e-12);
    assert_eq!(s.read("a/projection.tsv").lines().count(), 6);
    assert_eq!(s.read("a/segments.tsv").lines().count(), 3);
}

#[test]
fn seed_flag_overrides_the_config_and_reaches_the_manifest() {
    let s = Scratch::new("seed");
    s.write("synth.conf", "num_labels = 4\nsource_sentences = 30\ntarget_sentences = 10\nseed = 1\n");
    s.ok(&["--output-dir", "a", "synth", "--config", "synth.conf"]);
    s.ok(&["--seed", "1", "--output-dir", "b", "synth", "--config", "synth.conf"]);
    s.ok(&["--seed", "2", "--output-dir", "c", "synth", "--config", "synth.conf"]);
    assert_eq!(s.read("a/source.conll"), s.read("b/source.conll"));
    assert_ne!(s.read("a/source.conll"), s.read("c/source.conll"));
    assert_eq!(manifest(&s.0.join("c"))["seed"], 2);

    // the synthesized tally is what `freq` recounts from the written corpus
    s.ok(&["--output-dir", "f", "freq", "--input", "a/source.conll", "--language", "src"]);
    assert_eq!(s.read("f/freq.tsv"), s.read("a/source_freq.tsv"));
}

#[test]
fn train_then_evaluate_writes_manifests() {
    let s = Scratch::new("train");
    s.write("synth.conf", "num_labels = 4\nsource_sentences = 60\ntarget_sentences = 20\n");
    s.ok(&["--seed", "3", "--output-dir", "data", "synth", "--config", "synth.conf"]);
    s.write(
        "train.conf",
        "source = data/source.conll\ntarget = data/target.conll\nepochs = 2\nwarmup_epochs = 1\nhidden_dim = 6\nembed_dim = 4\n",
    );
    s.ok(&["--output-dir", "run", "train", "--config", "train.conf"]);
    for f in ["model.txt", "history.tsv", "pairing.tsv", "transform.tsv", "config.txt"] {
        assert!(s.0.join("run").join(f).exists(), "{f}");
    }
    let m = manifest(&s.0.join("run"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    s.ok(&["--output-dir", "ev", "evaluate", "--model", "run/model.txt", "--corpus", "data/target_test.conll", "--language", "tgt"]);
    assert!(s.read("ev/metrics.tsv").contains("f1"));
    assert_eq!(manifest(&s.0.join("ev"))["command"], "evaluate");
}
