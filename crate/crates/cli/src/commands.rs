use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _};
use gfcn::data::{
    load_and_preprocess, load_dataset, write_synth_dataset, Charset, Dataset, DatasetManifest, LineSample, ResizeMode,
    SynthSpec,
};
use gfcn::model::{calibrate_channels, reference_totals, ArchitectureAudit, ArchitectureConfig, CandidateSpace, Model};
use gfcn::tensor::NormKind;
use gfcn::train::{config_hash, evaluate, transcribe, Checkpoint, EpochRecord, TrainConfig, Trainer};

use crate::run_config::{DataSection, RunConfigFile};
use crate::{usage, AnalyzeArgs, CompareArgs, EvalArgs, OrUsage, PredictArgs, SynthArgs, TrainArgs};

struct Prepared {
    charset: Charset,
    train: Dataset,
    valid: Dataset,
}

fn prepare(arch: &mut ArchitectureConfig, data: &DataSection) -> anyhow::Result<Prepared> {
    let charset = Charset::load(&data.charset).or_usage()?;
    arch.charset_size = charset.len();
    arch.validate().or_usage()?;
    gfcn::model::build_layer_specs(arch).or_usage()?;
    let train = load_dataset(&data.train, &charset, arch.input_height, data.resize).or_usage()?;
    let valid = load_dataset(&data.valid, &charset, arch.input_height, data.resize).or_usage()?;
    if train.is_empty() || valid.is_empty() {
        return Err(usage("training and validation manifests must both list at least one line"));
    }
    Ok(Prepared { charset, train, valid })
}

fn progress_line(r: &EpochRecord) {
    eprintln!(
        "epoch {:>4}  train loss {:>9.4}  valid loss {:>9.4}  CER {:>6.2}%  WER {:>6.2}%{}",
        r.epoch,
        r.train_loss,
        r.valid_loss,
        r.valid_cer,
        r.valid_wer,
        if r.improved { "  *" } else { "" }
    );
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfigFile::load(&args.config).or_usage()?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let data = cfg.data().or_usage()?.clone();
    let prepared = prepare(&mut cfg.architecture, &data)?;
    let hash = config_hash(&cfg.architecture, &cfg.training);

    let (run_dir, mut trainer) = if args.resume {
        let dir = args.out.clone().ok_or_else(|| usage("--resume needs --out pointing at the run directory"))?;
        let last = dir.join("last.ckpt");
        if !last.exists() {
            return Err(usage(format!("nothing to resume in {}", dir.display())));
        }
        let ckpt = Checkpoint::load(&last).or_usage()?;
        if ckpt.header.config_hash != hash {
            return Err(usage(format!(
                "checkpoint {} was written under config {} but the current config hashes to {hash}",
                last.display(),
                ckpt.header.config_hash
            )));
        }
        let mut trainer = Trainer::<f32>::from_checkpoint(&ckpt).or_usage()?;
        if trainer.finished() {
            return Err(usage(format!(
                "run in {} is complete after {} epochs; completed runs are never modified, start a new one",
                dir.display(),
                trainer.progress.epoch
            )));
        }
        trainer.config.max_epochs = cfg.training.max_epochs;
        (dir, trainer)
    } else {
        let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{hash}-{}", unix_time())));
        if dir.exists() && dir.read_dir().map_or(true, |mut d| d.next().is_some()) {
            return Err(usage(format!("run directory {} already exists; runs are never overwritten", dir.display())));
        }
        let model = Model::<f32>::build(&cfg.architecture, cfg.training.seed).or_usage()?;
        (dir, Trainer::new(model, cfg.training.clone(), Some(prepared.charset.clone())).or_usage()?)
    };

    std::fs::create_dir_all(&run_dir).with_context(|| format!("cannot create {}", run_dir.display()))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    eprintln!("run directory {}", run_dir.display());
    let outcome = trainer.fit(&prepared.train, &prepared.valid, Some(&run_dir), &mut progress_line)?;
    let p = &trainer.progress;
    println!(
        "finished after {} epochs{}; best validation {:?} = {} at epoch {}",
        p.epoch,
        if outcome.stopped_early { " (patience exhausted)" } else { "" },
        trainer.config.eval_metric,
        p.best_metric.map_or("-".into(), |m| format!("{m:.4}")),
        p.best_epoch.map_or("-".into(), |e| e.to_string()),
    );
    println!("best checkpoint {}", run_dir.join("best.ckpt").display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Trainer<f32>, Charset)> {
    let ckpt = Checkpoint::load(path).or_usage()?;
    let trainer = Trainer::<f32>::from_checkpoint(&ckpt).or_usage()?;
    let charset = trainer.charset.clone().ok_or_else(|| usage(format!("{} carries no charset", path.display())))?;
    Ok((trainer, charset))
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (trainer, charset) = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest).or_usage()?;
    let manifest_charset = Charset::load(&manifest.charset_path(&args.manifest)).or_usage()?;
    if manifest_charset.digest() != charset.digest() {
        return Err(usage(format!(
            "manifest charset {} (digest {}) differs from the checkpoint's (digest {})",
            manifest.charset_path(&args.manifest).display(),
            manifest_charset.digest(),
            charset.digest()
        )));
    }
    let height = trainer.model.config().input_height;
    let data = load_dataset(&args.manifest, &charset, height, resize_mode(args.preserve_aspect)).or_usage()?;
    let result = evaluate(&trainer.model, &data, &charset, trainer.config.batch_size)?;
    let mut report = result.report.to_text();
    let _ = writeln!(report, "mean CTC loss {:.6}", result.mean_loss);
    let _ = writeln!(report, "# id\treference\thypothesis");
    for ((s, r), h) in data.samples.iter().zip(&result.references).zip(&result.hypotheses) {
        let _ = writeln!(report, "{}\t{r}\t{h}", s.id);
    }
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report).with_context(|| format!("cannot write {}", out.display()))?;
        let tsv = out.with_extension("tsv");
        std::fs::write(&tsv, result.report.to_tsv()).with_context(|| format!("cannot write {}", tsv.display()))?;
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let (trainer, charset) = load_checkpoint(&args.checkpoint)?;
    let height = trainer.model.config().input_height;
    let image = load_and_preprocess(&args.image, height, resize_mode(args.preserve_aspect)).or_usage()?;
    let sample = LineSample::new(args.image.display().to_string(), image, "", &charset).or_usage()?;
    let text = transcribe(&trainer.model, &[&sample], &charset)?;
    println!("{}", text[0]);
    Ok(())
}

pub fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let arch = match &args.config {
        Some(p) => RunConfigFile::load(p).or_usage()?.architecture,
        None => ArchitectureConfig::default(),
    };
    let audit = ArchitectureAudit::new(&arch).or_usage()?;
    let mut text = audit.to_text();
    let mut tsv = audit.to_tsv();
    if args.calibrate {
        let space = CandidateSpace { ending_channels: vec![arch.ending_channels], ..Default::default() };
        match calibrate_channels(&arch, &reference_totals(), &space) {
            Ok(c) => {
                text.push('\n');
                text.push_str(&c.to_text());
                tsv.push_str(&c.to_tsv().lines().skip(1).map(|l| format!("calibration\t{l}\n")).collect::<String>());
            }
            Err(e) => {
                let _ = writeln!(text, "\ncalibration rejected: {e}");
                let _ = writeln!(tsv, "calibration\trejected\t{e}");
            }
        }
    }
    print!("{}", if args.tsv { &tsv } else { &text });
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("analyze.txt"), &text)?;
        std::fs::write(dir.join("analyze.tsv"), &tsv)?;
    }
    Ok(())
}

const NORM_KINDS: [NormKind; 4] = [NormKind::Batch, NormKind::Layer, NormKind::Instance, NormKind::Group(32)];

pub fn compare_norms(args: CompareArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfigFile::load(&args.config).or_usage()?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let mut horizons = args.checkpoints.clone();
    horizons.sort_unstable();
    horizons.dedup();
    if horizons.first() == Some(&0) || horizons.is_empty() {
        return Err(usage("--checkpoints must list positive epoch counts"));
    }
    let data = cfg.data().or_usage()?.clone();
    let prepared = prepare(&mut cfg.architecture, &data)?;
    let epochs = *horizons.last().unwrap();
    let training = TrainConfig { max_epochs: epochs, patience: epochs + 1, ..cfg.training.clone() };
    let mut archs = Vec::new();
    for kind in NORM_KINDS {
        let arch = ArchitectureConfig { norm_kind: kind, group_norm_fallback: true, ..cfg.architecture.clone() };
        Model::<f32>::build(&arch, training.seed).or_usage()?;
        archs.push(arch);
    }

    let mut rows = Vec::new();
    for arch in &archs {
        eprintln!("training with {} normalization", arch.norm_kind.label());
        let model = Model::<f32>::build(arch, training.seed)?;
        let mut trainer = Trainer::new(model, training.clone(), Some(prepared.charset.clone()))?;
        trainer.fit(&prepared.train, &prepared.valid, None, &mut progress_line)?;
        let hist = &trainer.progress.history;
        let best: Vec<f64> = horizons
            .iter()
            .map(|&h| hist.iter().take(h).map(|r| r.valid_cer).fold(f64::INFINITY, f64::min))
            .collect();
        let secs = hist.iter().map(|r| r.wall_seconds).sum::<f64>() / hist.len().max(1) as f64;
        rows.push((arch.norm_kind.label(), best, secs));
    }

    let mut text = String::from("# best validation CER (%) within the first N epochs\n");
    let _ = write!(text, "{:<12}", "norm");
    let mut tsv = String::from("norm");
    for h in &horizons {
        let _ = write!(text, "{:>10}", format!("N={h}"));
        let _ = write!(tsv, "\tcer_{h}");
    }
    let _ = writeln!(text, "{:>12}", "s/epoch");
    tsv.push_str("\tseconds_per_epoch\n");
    for (label, best, secs) in &rows {
        let _ = write!(text, "{label:<12}");
        let _ = write!(tsv, "{label}");
        for b in best {
            let _ = write!(text, "{b:>10.2}");
            let _ = write!(tsv, "\t{b}");
        }
        let _ = writeln!(text, "{secs:>12.2}");
        let _ = writeln!(tsv, "\t{secs}");
    }
    let last = |r: &(String, Vec<f64>, f64)| *r.1.last().unwrap();
    let worst = rows.iter().max_by(|a, b| last(a).total_cmp(&last(b))).map(|r| r.0.clone()).unwrap_or_default();
    let _ = writeln!(
        text,
        "batch normalization {} the worst final CER here (worst: {worst}); reported, not asserted",
        if worst == "batch" { "has" } else { "does not have" }
    );
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("compare_norms.txt"), &text)?;
        std::fs::write(dir.join("compare_norms.tsv"), &tsv)?;
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let charset = match (&args.symbols, &args.charset) {
        (Some(s), None) => Charset::new(s.chars()).or_usage()?,
        (None, Some(p)) => Charset::load(p).or_usage()?,
        _ => bail!(usage("give exactly one of --symbols or --charset")),
    };
    let spec = SynthSpec { count: args.count, seed: args.seed, min_len: args.min_len, max_len: args.max_len };
    // validate coverage and lengths before touching the filesystem
    gfcn::data::synth_generate(&charset, &args.split, &SynthSpec { count: 0, ..spec.clone() }).or_usage()?;
    if args.split.is_empty() || args.split.contains(|c: char| c.is_whitespace() || c == '/') {
        return Err(usage(format!("invalid split name {:?}", args.split)));
    }
    let manifest = write_synth_dataset(&args.out, &args.split, &charset, &spec)?;
    println!("{}", manifest.display());
    Ok(())
}

fn resize_mode(preserve_aspect: bool) -> ResizeMode {
    if preserve_aspect {
        ResizeMode::PreserveAspect
    } else {
        ResizeMode::HeightOnly
    }
}
