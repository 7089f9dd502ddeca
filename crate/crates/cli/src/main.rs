//! `speechfcn`: extract MFCC maps, train, predict, evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training diverged.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use speechfcn::dsp::{extract_mfcc, load_wav_at, read_feature_map, write_feature_map, FeatureMap, MfccConfig};
use speechfcn::model::{BackboneConfig, FcnModel, ModelConfig, Prediction};
use speechfcn::synth::{generate_corpus, write_corpus, SynthConfig};
use speechfcn::trainer::{
    confusion, ensemble, metrics, split_two_fold, write_history, DatasetManifest, Metrics, Strategy,
    TrainConfig,
};
use speechfcn::viz::{heatmap, render};

#[derive(Parser)]
#[command(name = "speechfcn", version, about = "Speech screening with MFCC maps and a fully convolutional network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert WAV files to `.mfcm` feature maps and write a manifest.
    Extract {
        /// A WAV file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV with `id,label` columns used to fill the manifest's labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train one of the runs m1, m2 or m3.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// Random zero-masking of feature-map spans.
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Classify feature maps or WAV files with 1 to 3 models.
    Predict {
        /// Comma-separated weight files; two are averaged, three summed.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        model: Vec<PathBuf>,
        /// A `.mfcm` or `.wav` file, or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory for heatmap images, drawn from the first model.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Head row to threshold for heatmaps (1 = AD).
        #[arg(long, default_value_t = 1)]
        class_index: usize,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against manifest labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic two-class corpus.
    #[command(hide = true)]
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Bad invocation discovered after parsing; exits with 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Config file layout: one section per library config struct.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    mfcc: MfccConfig,
    backbone: BackboneConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: FileConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cfg.mfcc.validate()?;
    cfg.backbone.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// `path` itself, or the files in it with one of `exts`, sorted.
fn list_inputs(path: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        if !path.exists() {
            bail!("{}: no such file or directory", path.display());
        }
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && exts.iter().any(|e| has_ext(&p, e)) {
            files.push(p);
        }
    }
    files.sort();
    // A map extracted next to its recording stands for it.
    let maps: Vec<String> = files.iter().filter(|p| has_ext(p, "mfcm")).map(|p| stem(p)).collect();
    files.retain(|p| has_ext(p, "mfcm") || !maps.contains(&stem(p)));
    if files.is_empty() {
        bail!("no input files in {}", path.display());
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_labels(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            bail!("{}: rows need id,label", path.display());
        };
        out.insert(id.to_string(), label.trim().to_string());
    }
    Ok(out)
}

fn cmd_extract(input: &Path, out: &Path, config: Option<&Path>, labels: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let files = list_inputs(input, &["wav"])?;
    let labels = labels.map(read_labels).transpose()?.unwrap_or_default();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = csv::Writer::from_path(out.join("manifest.csv"))?;
    manifest.write_record(["id", "path", "label", "fold"])?;
    let mut failed = 0;
    for file in &files {
        let id = stem(file);
        let result = load_wav_at(file, cfg.mfcc.sample_rate_hz)
            .and_then(|sig| extract_mfcc(&sig, &cfg.mfcc))
            .and_then(|map| {
                write_feature_map(out.join(format!("{id}.mfcm")), &map)?;
                Ok(map)
            });
        match result {
            Ok(map) => {
                println!("{id}\t{}\t{}", map.p(), map.t());
                let label = labels.get(&id).map(String::as_str).unwrap_or("");
                manifest.write_record([id.as_str(), &format!("{id}.mfcm"), label, ""])?;
            }
            Err(e) => {
                eprintln!("{}: {e}", file.display());
                failed += 1;
            }
        }
    }
    manifest.flush()?;
    if failed > 0 {
        bail!("{failed} of {} files failed", files.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest_path: &Path,
    strategy: &str,
    seed: Option<u64>,
    out: &Path,
    alpha: Option<f64>,
    augment: bool,
    config: Option<&Path>,
    max_epochs: Option<usize>,
) -> Result<()> {
    let strategy: Strategy = strategy.parse().map_err(|e: speechfcn::Error| usage(e.to_string()))?;
    let cfg = load_config(config)?;
    let mut train_cfg = cfg.train;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    if let Some(e) = max_epochs {
        train_cfg.max_epochs = e;
    }
    train_cfg.augment_mask |= augment;
    let mut backbone = cfg.backbone;
    if let Some(a) = alpha {
        backbone.width_multiplier = a;
    }
    let model_cfg = ModelConfig {
        backbone,
        mfcc: cfg.mfcc,
    };
    model_cfg.validate()?;
    train_cfg.validate()?;

    let manifest = DatasetManifest::load(manifest_path)?;
    let folds = match manifest.stored_folds() {
        Some(f) => f,
        None => {
            let labels: Vec<usize> = manifest.entries().iter().map(|e| e.label).collect();
            let f = split_two_fold(&labels, train_cfg.seed)?;
            if !f.stratified {
                eprintln!("warning: manifest has a single class; folds are not stratified");
            }
            f
        }
    };
    let (train_idx, val_idx, selection) = strategy.plan(&folds);
    train_cfg.selection = selection;
    let train_set = manifest.load_samples(&train_idx)?;
    let val_set = val_idx.map(|v| manifest.load_samples(&v)).transpose()?;
    eprintln!(
        "{}: {} training samples, {} validation samples",
        strategy.name(),
        train_set.len(),
        val_set.as_ref().map_or(0, Vec::len)
    );

    let model = FcnModel::new(model_cfg, train_cfg.seed)?;
    let outcome = speechfcn::trainer::train(model, &train_set, val_set.as_deref(), &train_cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = strategy.name();
    outcome.model.save(out.join(format!("{name}_best.fcnw")))?;
    write_history(out.join(format!("{name}_history.csv")), &outcome.history)?;
    let best = &outcome.history[outcome.best_epoch];
    eprintln!(
        "{name}: kept epoch {} (train loss {:.4}, val acc {})",
        best.epoch,
        best.train_loss,
        best.val_accuracy.map_or("-".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    probs: [f64; 2],
    label: usize,
}

fn load_input(path: &Path, mfcc: &MfccConfig) -> Result<FeatureMap> {
    if has_ext(path, "wav") {
        Ok(extract_mfcc(&load_wav_at(path, mfcc.sample_rate_hz)?, mfcc)?)
    } else {
        Ok(read_feature_map(path)?)
    }
}

fn cmd_predict(
    model_paths: &[PathBuf],
    input: &Path,
    heatmap_dir: Option<&Path>,
    class_index: usize,
    out: Option<&Path>,
) -> Result<()> {
    if model_paths.is_empty() || model_paths.len() > 3 {
        return Err(usage(format!("--model takes 1 to 3 files, got {}", model_paths.len())));
    }
    if class_index > 1 {
        return Err(usage("--class-index must be 0 or 1"));
    }
    let models = model_paths
        .iter()
        .map(|p| FcnModel::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let files = list_inputs(input, &["mfcm", "wav"])?;
    if let Some(dir) = heatmap_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mfcc = &models[0].config.mfcc;
    for file in &files {
        let id = stem(file);
        let map = load_input(file, mfcc).with_context(|| file.display().to_string())?;
        let per_model = models
            .iter()
            .map(|m| Ok(vec![m.predict(&map)?]))
            .collect::<Result<Vec<Vec<Prediction>>>>()?;
        let refs: Vec<&[Prediction]> = per_model.iter().map(Vec::as_slice).collect();
        let pred = ensemble(&refs)?.remove(0);
        let line = PredictionLine {
            id: id.clone(),
            probs: pred.probs,
            label: pred.label,
        };
        writeln!(sink, "{}", serde_json::to_string(&line)?)?;
        if let Some(dir) = heatmap_dir {
            let hm = heatmap(&pred.time_activations, class_index)?;
            render(&map, &hm, mfcc, dir.join(format!("{id}.ppm")))?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn format_table(m: &Metrics) -> String {
    let mut s = String::from("class,precision,recall,f1,accuracy\n");
    for (name, c) in ["non-AD", "AD"].iter().zip(&m.classes) {
        s.push_str(&format!(
            "{name},{:.3},{:.3},{:.3},{:.3}\n",
            c.precision, c.recall, c.f1, m.accuracy
        ));
    }
    s
}

fn cmd_evaluate(pred: &Path, manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let file = fs::File::open(pred).with_context(|| format!("reading {}", pred.display()))?;
    let mut lines = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", pred.display(), i + 1))?;
        lines.push(p);
    }
    if lines.is_empty() {
        bail!("{} contains no predictions", pred.display());
    }
    let missing: Vec<&str> = lines
        .iter()
        .filter(|l| manifest.get(&l.id).is_none())
        .map(|l| l.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!("ids not in the manifest: {}", missing.join(", "));
    }
    let predicted: Vec<usize> = lines.iter().map(|l| l.label).collect();
    let truth: Vec<usize> = lines.iter().map(|l| manifest.get(&l.id).map_or(0, |e| e.label)).collect();
    let m = metrics(&confusion(&predicted, &truth)?);
    let table = format_table(&m);
    print!("{table}");
    for (name, c) in ["non-AD", "AD"].iter().zip(&m.classes) {
        if c.degenerate {
            eprintln!("note: {name} row has a zero denominator; affected metrics are reported as 0");
        }
    }
    if let Some(path) = out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let synth = SynthConfig {
        n_samples: n,
        seed,
        ..cfg.synth
    };
    let clips = generate_corpus(&synth)?;
    let (manifest, _) = write_corpus(out, &clips, &cfg.mfcc)?;
    eprintln!("wrote {} clips to {}", manifest.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract {
            input,
            out,
            config,
            labels,
        } => cmd_extract(&input, &out, config.as_deref(), labels.as_deref()),
        Command::Train {
            manifest,
            strategy,
            seed,
            out,
            alpha,
            augment,
            config,
            max_epochs,
        } => cmd_train(
            &manifest,
            &strategy,
            seed,
            &out,
            alpha,
            augment,
            config.as_deref(),
            max_epochs,
        ),
        Command::Predict {
            model,
            input,
            heatmap,
            class_index,
            out,
        } => cmd_predict(&model, &input, heatmap.as_deref(), class_index, out.as_deref()),
        Command::Evaluate {
            pred,
            manifest,
            out,
        } => cmd_evaluate(&pred, &manifest, out.as_deref()),
        Command::Synth {
            out,
            n,
            seed,
            config,
        } => cmd_synth(&out, n, seed, config.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<speechfcn::Error>() {
        Some(speechfcn::Error::Diverged { .. }) => 3,
        Some(speechfcn::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
