use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::config::{load_config, LoadedConfig, RunConfig};
use super::{Cli, Command, CurateArgs, EvaluateArgs, GenerateArgs, InspectArgs, SynthArgs, TrainArgs};
use crate::curation::synth::{white_noise, write_labelled_corpus};
use crate::curation::{read_wav, run_pipeline, write_manifest, write_wav_pcm16, ClipRecord, Manifest, ManifestEntry, MonoAudio, Verdict, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::flow::{load_resume, sample, train_loop, CfgMask, RunDir, TrainOutcome};
use crate::metrics::{evaluate_dirs, MetricReport, StubProvider, STUB_PROVIDER_ID};
use crate::model::FoleyModel;
use crate::stubs::{bytes_to_signal, latent_frames, FeatureBundle, StubSuite, LATENT_RATE, SAMPLES_PER_LATENT, SAMPLE_RATE};
use crate::tensor::read_container;

/// Learning rate used by `train --overfit` unless one is configured.
pub const OVERFIT_LR: f32 = 2e-3;
pub const REPORT_FILE: &str = "report.jsonl";

pub fn execute(cli: Cli) -> Result<()> {
    let loaded = load_config(cli.config.as_deref())?;
    let mut run = loaded.config.clone();
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    match cli.command {
        Command::Curate(a) => cmd_curate(run, &a).map(|_| ()),
        Command::Train(a) => cmd_train(run, &loaded, &a).map(|_| ()),
        Command::Generate(a) => cmd_generate(run, &a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(run, &a).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::SynthCorpus(a) => cmd_synth(run, &a),
    }
}

pub fn cmd_curate(mut run: RunConfig, a: &CurateArgs) -> Result<Manifest> {
    let c = &mut run.curate;
    if let Some(v) = a.min_effective_sr {
        c.min_effective_sr_hz = v;
    }
    if let Some(v) = a.min_snr_db {
        c.min_snr_db = v;
    }
    if let Some(v) = a.silence_threshold {
        c.silence_threshold_ratio = v;
    }
    if let Some(v) = a.chunk_seconds {
        c.chunk_seconds = v;
    }
    if a.no_snr_gate {
        c.snr_gate = false;
    }
    let run = run.finalize()?;
    let manifest = run_pipeline(&a.root, &run.curate, &[])?;
    let out = a.out.clone().unwrap_or_else(|| a.root.clone());
    write_manifest(&manifest, &out)?;
    run.echo(&out)?;
    print!("{}", manifest.summary.render());
    if a.strict && manifest.summary.errors > 0 {
        return Err(Error::InvalidArgument(format!("{} unreadable input file(s)", manifest.summary.errors)));
    }
    Ok(manifest)
}

fn sidecar(root: &Path, source: &str, ext: &str) -> PathBuf {
    root.join(source).with_extension(ext)
}

fn caption_for(root: &Path, source: &str) -> Result<String> {
    let p = sidecar(root, source, "txt");
    if p.is_file() {
        return Ok(fs::read_to_string(p)?);
    }
    let stem = Path::new(source).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(stem.replace(['_', '-'], " "))
}

/// One training bundle per kept chunk, cropped to `data.clip_seconds` from the chunk start.
///
/// A `<name>.video` file beside a WAV supplies the video signal (the matching
/// span of its bytes); otherwise the cropped audio doubles as the video signal.
/// A `<name>.txt` file supplies the caption; otherwise the file stem does.
pub fn load_training_set(manifest: &Path, root: &Path, run: &RunConfig) -> Result<Vec<FeatureBundle>> {
    let entries = Manifest::from_jsonl(&fs::read_to_string(manifest)?)?;
    let mut kept: Vec<&ClipRecord> = entries
        .iter()
        .filter_map(|e| match e {
            ManifestEntry::Clip(c) if c.verdict == Verdict::Keep => Some(c),
            _ => None,
        })
        .collect();
    if run.data.max_clips > 0 {
        kept.truncate(run.data.max_clips);
    }
    let suite = StubSuite::new(&run.model, run.model.seed)?;
    let mut audio: HashMap<&str, MonoAudio> = HashMap::new();
    let mut out = Vec::with_capacity(kept.len());
    for c in kept {
        if !audio.contains_key(c.source_path.as_str()) {
            audio.insert(&c.source_path, read_wav(root.join(&c.source_path))?);
        }
        let a = &audio[c.source_path.as_str()];
        if a.sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidArgument(format!("{}: {} Hz, training needs {SAMPLE_RATE} Hz", c.source_path, a.sample_rate)));
        }
        let seconds = run.data.clip_seconds.min(c.end_s - c.start_s);
        let la = (seconds * LATENT_RATE as f64 + 1e-9).floor() as usize;
        if la == 0 {
            return Err(Error::InvalidArgument(format!("{}: chunk at {} s is shorter than one latent frame", c.source_path, c.start_s)));
        }
        let lo = (c.start_s * SAMPLE_RATE as f64).round() as usize;
        let hi = lo + la * SAMPLES_PER_LATENT;
        if hi > a.samples.len() {
            return Err(Error::InvalidArgument(format!("{}: manifest span exceeds the audio", c.source_path)));
        }
        let wave = &a.samples[lo..hi];
        let vpath = sidecar(root, &c.source_path, "video");
        let video = if vpath.is_file() {
            let sig = bytes_to_signal(&fs::read(&vpath)?);
            let frac = |s: usize| s * sig.len() / a.samples.len().max(1);
            let (vl, vh) = (frac(lo), frac(hi).max(frac(lo) + 1).min(sig.len()));
            if vl >= vh {
                return Err(Error::Empty("video sidecar"));
            }
            sig[vl..vh].to_vec()
        } else {
            wave.to_vec()
        };
        let caption = caption_for(root, &c.source_path)?;
        out.push(suite.bundle(&video, &caption, la as f64 / LATENT_RATE as f64, Some(wave))?);
    }
    Ok(out)
}

/// Newest checkpoint step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<usize>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for e in fs::read_dir(dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".hvfw")).and_then(|s| s.parse::<usize>().ok()) {
            best = best.max(Some(step));
        }
    }
    Ok(best)
}

pub fn cmd_train(mut run: RunConfig, loaded: &LoadedConfig, a: &TrainArgs) -> Result<TrainOutcome> {
    let t = &mut run.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.repa_weight {
        t.repa_weight = v;
    }
    if let Some(v) = a.cfg_dropout {
        t.cfg_dropout = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.hidden_dim {
        run.model.hidden_dim = v;
    }
    if let Some(v) = a.clip_seconds {
        run.data.clip_seconds = v;
    }
    if let Some(n) = a.overfit {
        if n == 0 {
            return Err(Error::Usage("--overfit needs at least one clip".into()));
        }
        run.data.max_clips = n;
        if a.lr.is_none() && !loaded.file_sets("train.lr") {
            run.train.lr = OVERFIT_LR;
        }
    }
    let run = run.finalize()?;
    let root = match &a.data_root {
        Some(r) => r.clone(),
        None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dataset = load_training_set(&a.manifest, &root, &run)?;
    if dataset.is_empty() {
        return Err(Error::Empty("manifest has no kept clips"));
    }

    let mut model = FoleyModel::new(run.model.clone())?;
    let resume = if a.resume {
        let previous = RunConfig::read_echo(&a.out)?;
        if previous.model != run.model || previous.data != run.data {
            return Err(Error::Config("resumed run must keep the model and data settings".into()));
        }
        match latest_checkpoint(&a.out)? {
            Some(step) => Some(load_resume(&mut model, &run.train, &a.out, step)?),
            None => return Err(Error::InvalidArgument(format!("no checkpoint in {}", a.out.display()))),
        }
    } else {
        None
    };
    run.echo(&a.out)?;
    let outcome = train_loop(&mut model, &dataset, &run.train, &RunDir(Some(a.out.clone())), resume)?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!(
            "{} clips, steps {}..{}: flow loss {:.5} -> {:.5}",
            dataset.len(),
            first.step,
            last.step + 1,
            first.report.flow_loss,
            last.report.flow_loss
        );
    }
    if let Some(p) = outcome.checkpoints.last() {
        println!("checkpoint {}", p.display());
    }
    Ok(outcome)
}

/// Loads a checkpoint written by `train`, reading the model layout from the echoed config beside it.
pub fn load_model(checkpoint: &Path) -> Result<FoleyModel> {
    if !checkpoint.is_file() {
        return Err(Error::InvalidArgument(format!("checkpoint {} not found", checkpoint.display())));
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let trained = RunConfig::read_echo(dir)?;
    let mut model = FoleyModel::new(trained.model)?;
    model.store.load(BufReader::new(fs::File::open(checkpoint)?))?;
    Ok(model)
}

pub fn cmd_generate(mut run: RunConfig, a: &GenerateArgs) -> Result<PathBuf> {
    let g = &mut run.generate;
    if let Some(v) = a.duration_s {
        g.duration_s = v;
    }
    if let Some(v) = a.steps {
        g.steps = v;
    }
    if let Some(v) = a.guidance {
        g.guidance = v;
    }
    let mut run = run.finalize()?;
    let model = load_model(&a.checkpoint)?;
    run.model = model.config.clone();
    let suite = StubSuite::new(&model.config, model.config.seed)?;

    let d = run.generate.duration_s;
    let la = latent_frames(d);
    if la == 0 {
        return Err(Error::InvalidArgument(format!("duration {d} s is shorter than one latent frame")));
    }
    let samples = (d * SAMPLE_RATE as f64).round() as usize;
    let mut mask = CfgMask::default();
    let caption = match &a.text {
        Some(t) if !t.trim().is_empty() => t.clone(),
        _ if a.allow_null => {
            mask.drop_text = true;
            "null".to_string()
        }
        _ => return Err(Error::Usage("no --text given; pass --allow-null to generate without it".into())),
    };
    let video = if let Some(p) = &a.video {
        let bytes = fs::read(p)?;
        if bytes.is_empty() {
            return Err(Error::Empty("video file"));
        }
        bytes_to_signal(&bytes)
    } else if a.video_stub {
        white_noise(0.3, d, SAMPLE_RATE, run.seed ^ 0x5649_4445)
    } else if a.allow_null {
        mask.drop_video = true;
        mask.drop_sync = true;
        vec![0.0; samples.max(1)]
    } else {
        return Err(Error::Usage("no --video or --video-stub given; pass --allow-null to generate without it".into()));
    };
    let mut bundle = suite.bundle(&video, &caption, la as f64 / LATENT_RATE as f64, None)?;
    bundle.drop = vec![mask];

    let latent = sample(&model, &bundle, run.generate.steps, run.generate.guidance, run.seed)?;
    let mut wave = suite.codec.decode(&latent.reshape(&[la, model.config.latent_dim])?)?;
    if !wave.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("generated waveform".into()));
    }
    wave.resize(samples, 0.0);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_wav_pcm16(&a.out, &wave, SAMPLE_RATE)?;
    fs::write(a.out.with_extension("config.toml"), run.to_toml()?)?;
    println!("wrote {} ({samples} samples at {SAMPLE_RATE} Hz)", a.out.display());
    Ok(a.out.clone())
}

pub fn cmd_evaluate(mut run: RunConfig, a: &EvaluateArgs) -> Result<MetricReport> {
    if let Some(p) = &a.provider {
        run.evaluate.provider = p.clone();
    }
    let run = run.finalize()?;
    if run.evaluate.provider != STUB_PROVIDER_ID {
        return Err(Error::Config(format!("unknown embedding provider {}", run.evaluate.provider)));
    }
    let provider = StubProvider::new(run.evaluate.embedding_dim, run.evaluate.classes, run.seed);
    let report = evaluate_dirs(&a.generated, &a.reference, &provider, &[])?;
    print!("{}", report.render_table());
    if let Some(out) = &a.out {
        run.echo(out)?;
        fs::write(out.join(REPORT_FILE), report.to_jsonl())?;
    }
    Ok(report)
}

fn stats(v: &[f32]) -> (f64, f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|x| *x as f64).sum::<f64>() / n;
    let rms = (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / n).sqrt();
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs() as f64));
    (mean, rms, peak)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ext = a.path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "hvfw" => {
            let entries = read_container(BufReader::new(fs::File::open(&a.path)?))?;
            let total: usize = entries.iter().map(|e| e.data.len()).sum();
            println!("{} entries, {total} values", entries.len());
            for e in entries {
                let (mean, rms, peak) = stats(&e.data);
                println!("{:<40} {:>16} mean {mean:+.4e} rms {rms:.4e} peak {peak:.4e}", e.name, format!("{:?}", e.shape));
            }
        }
        "jsonl" => {
            let entries = Manifest::from_jsonl(&fs::read_to_string(&a.path)?)?;
            let clips: Vec<&ClipRecord> = entries
                .iter()
                .filter_map(|e| match e {
                    ManifestEntry::Clip(c) => Some(c),
                    _ => None,
                })
                .collect();
            let kept = clips.iter().filter(|c| c.verdict == Verdict::Keep).count();
            let seconds: f64 = clips.iter().filter(|c| c.verdict == Verdict::Keep).map(|c| c.end_s - c.start_s).sum();
            println!("{} clips, {kept} kept ({seconds:.1} s), {} errors", clips.len(), entries.len() - clips.len());
        }
        "wav" => {
            let audio = read_wav(&a.path)?;
            let (_, rms, peak) = stats(&audio.samples);
            println!(
                "{} Hz, {} samples, {:.3} s, rms {rms:.4}, peak {peak:.4}",
                audio.sample_rate,
                audio.samples.len(),
                audio.duration_s()
            );
        }
        _ => return Err(Error::InvalidArgument(format!("cannot inspect {}", a.path.display()))),
    }
    Ok(())
}

pub fn cmd_synth(run: RunConfig, a: &SynthArgs) -> Result<()> {
    for p in write_labelled_corpus(&a.dir, run.seed)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Name of the manifest written by `curate` inside its output directory.
pub fn manifest_in(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
