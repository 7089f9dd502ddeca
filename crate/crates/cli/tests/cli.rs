use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speechfcn::dsp::{write_wav_pcm16, AudioSignal};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_speechfcn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(path: &Path, secs: f64, freq: f64) {
    let sr = 22050;
    let n = (secs * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| 0.3 * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin())
        .collect();
    write_wav_pcm16(path, &AudioSignal::new(samples, sr).unwrap()).unwrap();
}

/// Short clips and a two-epoch schedule so the CLI tests stay quick.
const SMALL_CONFIG: &str = r#"{
  "synth": {"duration_secs": [1.6, 2.0], "pause_secs": [0.3, 0.5], "pauses_per_clip": [1, 1]},
  "train": {"max_epochs": 2, "converge_epoch": 0, "optimizer": {"learning_rate": 0.001}}
}"#;

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Corpus {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        let data = root.join("data");
        let o = run(&["synth", "--out", s(&data), "--n", &n.to_string(), "--seed", "4", "--config", s(&config)]);
        assert!(o.status.success(), "{}", stderr(&o));
        Corpus {
            _dir: dir,
            root,
            config,
        }
    }

    fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.csv")
    }

    fn train(&self, strategy: &str, out: &Path) -> Output {
        run(&[
            "train",
            "--manifest",
            s(&self.manifest()),
            "--strategy",
            strategy,
            "--seed",
            "7",
            "--out",
            s(out),
            "--config",
            s(&self.config),
        ])
    }
}

fn prediction_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
}

#[test]
fn extract_directory_of_three() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    for (i, f) in [220.0, 330.0, 440.0].iter().enumerate() {
        tone(&wavs.join(format!("clip{i}.wav")), 1.0, *f);
    }
    let out = dir.path().join("maps");
    let o = run(&["extract", "--in", s(&wavs), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    assert_eq!(printed.lines().count(), 3);
    assert!(printed.contains("clip0\t64\t44"));
    for i in 0..3 {
        assert!(out.join(format!("clip{i}.mfcm")).exists());
    }
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert_eq!(manifest.lines().next(), Some("id,path,label,fold"));
}

#[test]
fn extract_with_labels_feeds_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    tone(&wavs.join("a.wav"), 1.0, 200.0);
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "id,label\na,1\n").unwrap();
    let out = dir.path().join("maps");
    let o = run(&["extract", "--in", s(&wavs), "--out", s(&out), "--labels", s(&labels)]);
    assert!(o.status.success());
    let m = speechfcn::trainer::DatasetManifest::load(out.join("manifest.csv")).unwrap();
    assert_eq!(m.entries()[0].label, 1);
}

#[test]
fn extract_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["extract", "--in", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no input files"));
}

#[test]
fn extract_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();
    tone(&wavs.join("good1.wav"), 1.0, 200.0);
    std::fs::write(wavs.join("bad.wav"), b"RIFF....not a wave file").unwrap();
    tone(&wavs.join("good2.wav"), 1.0, 300.0);
    let out = dir.path().join("maps");
    let o = run(&["extract", "--in", s(&wavs), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.wav"));
    assert!(out.join("good1.mfcm").exists() && out.join("good2.mfcm").exists());
    assert!(!out.join("bad.mfcm").exists());
}

#[test]
fn train_predict_evaluate_round_trip() {
    let c = Corpus::new(8);
    let runs = c.root.join("runs");
    for k in ["m1", "m2", "m3"] {
        let o = c.train(k, &runs);
        assert!(o.status.success(), "{k}: {}", stderr(&o));
        assert!(runs.join(format!("{k}_best.fcnw")).exists());
        assert!(runs.join(format!("{k}_best.json")).exists());
    }
    let h3 = std::fs::read_to_string(runs.join("m3_history.csv")).unwrap();
    assert_eq!(h3.lines().next(), Some("epoch,train_loss,train_acc,val_acc"));
    assert!(h3.lines().skip(1).all(|l| l.ends_with(',')), "{h3}");
    let h1 = std::fs::read_to_string(runs.join("m1_history.csv")).unwrap();
    assert!(h1.lines().skip(1).all(|l| !l.ends_with(',')));

    // Same seed again: byte-identical artifacts.
    let again = c.root.join("again");
    assert!(c.train("m1", &again).status.success());
    for f in ["m1_best.fcnw", "m1_history.csv"] {
        assert_eq!(std::fs::read(runs.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let m1 = runs.join("m1_best.fcnw");
    let m2 = runs.join("m2_best.fcnw");
    let m3 = runs.join("m3_best.fcnw");
    let map = c.root.join("data/syn001.mfcm");
    let wav = c.root.join("data/syn001.wav");

    let single = run(&["predict", "--model", s(&m1), "--in", s(&map)]);
    assert!(single.status.success(), "{}", stderr(&single));
    let single = prediction_lines(&stdout(&single));
    assert_eq!(single.len(), 1);
    assert_eq!(single[0]["id"], "syn001");
    let p: Vec<f64> = serde_json::from_value(single[0]["probs"].clone()).unwrap();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-9);

    // Two copies of one model average to that model.
    let twice = format!("{},{}", s(&m1), s(&m1));
    let pair = prediction_lines(&stdout(&run(&["predict", "--model", &twice, "--in", s(&map)])));
    assert_eq!(pair[0]["probs"], single[0]["probs"]);

    // A WAV goes through the same extraction as `extract`.
    let from_wav = prediction_lines(&stdout(&run(&["predict", "--model", s(&m1), "--in", s(&wav)])));
    assert_eq!(from_wav[0]["probs"], single[0]["probs"]);

    // Three models: label is the argmax of the summed probabilities.
    let three = format!("{},{},{}", s(&m1), s(&m2), s(&m3));
    let mut sum = [0.0; 2];
    for m in [&m1, &m2, &m3] {
        let l = prediction_lines(&stdout(&run(&["predict", "--model", s(m), "--in", s(&map)])));
        let p: Vec<f64> = serde_json::from_value(l[0]["probs"].clone()).unwrap();
        sum[0] += p[0];
        sum[1] += p[1];
    }
    let l3 = prediction_lines(&stdout(&run(&["predict", "--model", &three, "--in", s(&map)])));
    assert_eq!(l3[0]["label"], if sum[1] > sum[0] { 1 } else { 0 });

    // Whole directory with heatmaps, then evaluation.
    let preds = c.root.join("preds.jsonl");
    let heat = c.root.join("heat");
    let o = run(&[
        "predict", "--model", s(&m1), "--in", s(&c.root.join("data")), "--heatmap", s(&heat), "--out", s(&preds),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 8);
    let ppm = std::fs::read(heat.join("syn001.ppm")).unwrap();
    let t = speechfcn::dsp::read_feature_map(&map).unwrap().t();
    assert!(ppm.starts_with(format!("P6\n{t} 80\n255\n").as_bytes()));
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(heat.join("syn001.json")).unwrap()).unwrap();
    let covered: u64 = sidecar["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["end_frame"].as_u64().unwrap() - r["start_frame"].as_u64().unwrap())
        .sum();
    assert_eq!(covered as usize, t);

    let table = c.root.join("table.csv");
    let o = run(&["evaluate", "--pred", s(&preds), "--manifest", s(&c.manifest()), "--out", s(&table)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("class,precision,recall,f1,accuracy\nnon-AD,"));
    assert_eq!(text, stdout(&o));
}

#[test]
fn evaluate_perfect_and_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "id,path,label,fold\na,a.mfcm,0,\nb,b.mfcm,1,\nc,c.mfcm,1,\nd,d.mfcm,0,\n").unwrap();
    let preds = dir.path().join("p.jsonl");
    let line = |id: &str, label: u8| {
        let p1 = if label == 1 { 0.9 } else { 0.1 };
        format!("{{\"id\":\"{id}\",\"probs\":[{},{p1}],\"label\":{label}}}\n", 1.0 - p1)
    };
    let body: String = [("a", 0), ("b", 1), ("c", 1), ("d", 0)].iter().map(|(i, l)| line(i, *l)).collect();
    std::fs::write(&preds, body).unwrap();
    let o = run(&["evaluate", "--pred", s(&preds), "--manifest", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "class,precision,recall,f1,accuracy\nnon-AD,1.000,1.000,1.000,1.000\nAD,1.000,1.000,1.000,1.000\n"
    );

    std::fs::write(&preds, "").unwrap();
    let o = run(&["evaluate", "--pred", s(&preds), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no predictions"));

    std::fs::write(&preds, line("zz", 1) + &line("a", 0) + &line("yy", 0)).unwrap();
    let o = run(&["evaluate", "--pred", s(&preds), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zz, yy"), "{}", stderr(&o));
}

#[test]
fn weight_config_mismatch_names_the_tensor() {
    let c = Corpus::new(4);
    let runs = c.root.join("runs");
    assert!(c.train("m3", &runs).status.success());
    let w = runs.join("m3_best.fcnw");
    let sidecar = runs.join("m3_best.json");
    let text = std::fs::read_to_string(&sidecar).unwrap();
    std::fs::write(&sidecar, text.replace("\"width_multiplier\": 0.25", "\"width_multiplier\": 0.5")).unwrap();
    let o = run(&["predict", "--model", s(&w), "--in", s(&c.root.join("data/syn000.mfcm"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conv1/kernel"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three() {
    let c = Corpus::new(4);
    std::fs::write(
        &c.config,
        r#"{"train": {"max_epochs": 3, "optimizer": {"learning_rate": 1e300}}}"#,
    )
    .unwrap();
    let o = c.train("m3", &c.root.join("runs"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn unknown_strategy_and_model_count_are_usage_errors() {
    let c = Corpus::new(4);
    let o = c.train("m4", &c.root.join("runs"));
    assert_eq!(o.status.code(), Some(1));
    let m = c.root.join("x.fcnw");
    let four = [s(&m); 4].join(",");
    let o = run(&["predict", "--model", &four, "--in", s(&c.root.join("data"))]);
    assert_eq!(o.status.code(), Some(1));
}
