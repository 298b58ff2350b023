//! Audio dataset curation: chunking, silence filtering, bandwidth detection,
//! an SNR gate, quality tagging and manifest emission.
//!
//! Each chunk passes through the filters in a fixed order and stops at the
//! first one it fails, which becomes its discard reason.

pub mod analysis;
pub mod synth;
pub mod wav;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use walkdir::WalkDir;

use crate::error::{Error, Result};
pub use analysis::{bandwidth_tag, effective_sample_rate, estimate_snr, silence_ratio, HQ_TAG};
pub use wav::{read_wav, write_wav_f32, write_wav_pcm16, MonoAudio};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_seconds: f64,
    /// A trailing partial chunk is kept only if at least this long.
    pub min_remainder_seconds: f64,
    pub silence_threshold_ratio: f64,
    pub silence_frame_ms: f64,
    pub silence_dbfs: f64,
    pub bandwidth_rel_db: f64,
    pub min_effective_sr_hz: f64,
    pub hq_tag_sr_hz: f64,
    pub snr_gate: bool,
    pub min_snr_db: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 8.0,
            min_remainder_seconds: 4.0,
            silence_threshold_ratio: 0.8,
            silence_frame_ms: 20.0,
            silence_dbfs: -50.0,
            bandwidth_rel_db: -60.0,
            min_effective_sr_hz: 32_000.0,
            hq_tag_sr_hz: 16_000.0,
            snr_gate: true,
            min_snr_db: 5.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chunk_seconds > 0.0) || self.min_remainder_seconds < 0.0 {
            return Err(Error::Config("chunk lengths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.silence_threshold_ratio) {
            return Err(Error::Config(format!("silence_threshold_ratio {} outside [0, 1]", self.silence_threshold_ratio)));
        }
        if !(self.silence_frame_ms > 0.0) {
            return Err(Error::Config("silence_frame_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    NoAudio,
    Silent,
    LowBandwidth,
    LowSnr,
}

impl DiscardReason {
    pub const ALL: [DiscardReason; 4] = [Self::NoAudio, Self::Silent, Self::LowBandwidth, Self::LowSnr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoAudio => "no_audio",
            Self::Silent => "silent",
            Self::LowBandwidth => "low_bandwidth",
            Self::LowSnr => "low_snr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Discard(DiscardReason),
}

fn ser_opt_db<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        Some(x) if *x > 0.0 => s.serialize_str("inf"),
        Some(_) => s.serialize_str("-inf"),
        None => s.serialize_none(),
    }
}

fn de_opt_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    Ok(match Option::<Db>::deserialize(d)? {
        None => None,
        Some(Db::Num(x)) => Some(x),
        Some(Db::Text(t)) if t == "inf" => Some(f64::INFINITY),
        Some(Db::Text(t)) if t == "-inf" => Some(f64::NEG_INFINITY),
        Some(Db::Text(t)) => return Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    })
}

/// One curated chunk. Measurements from stages the chunk never reached are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub source_path: String,
    pub start_s: f64,
    pub end_s: f64,
    pub silence_ratio: Option<f64>,
    pub effective_sr_hz: Option<f64>,
    #[serde(serialize_with = "ser_opt_db", deserialize_with = "de_opt_db")]
    pub snr_db: Option<f64>,
    pub tags: Vec<String>,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestEntry {
    Clip(ClipRecord),
    Error { source_path: String, error: String },
}

impl ManifestEntry {
    fn sort_key(&self) -> (&str, f64) {
        match self {
            Self::Clip(c) => (&c.source_path, c.start_s),
            Self::Error { source_path, .. } => (source_path, 0.0),
        }
    }
}

/// Hook for filters backed by external models: record in, record out.
pub trait ExternalFilter: Sync {
    fn name(&self) -> &str;
    fn apply(&self, record: ClipRecord, audio: &[f32], sample_rate: u32) -> ClipRecord;
}

/// Consecutive non-overlapping spans; a trailing remainder survives if long enough.
pub fn chunk(duration_s: f64, cfg: &PipelineConfig) -> Vec<(f64, f64)> {
    let mut spans = Vec::new();
    if !(duration_s > 0.0) {
        return spans;
    }
    let len = cfg.chunk_seconds;
    let full = (duration_s / len + 1e-9).floor() as usize;
    for i in 0..full {
        spans.push((i as f64 * len, (i + 1) as f64 * len));
    }
    let start = full as f64 * len;
    let rest = duration_s - start;
    if rest > 1e-9 && rest + 1e-9 >= cfg.min_remainder_seconds {
        spans.push((start, duration_s));
    }
    spans
}

/// Runs the filter chain on one chunk.
pub fn evaluate_chunk(source: &str, span: (f64, f64), wave: &[f32], sample_rate: u32, cfg: &PipelineConfig) -> Result<ClipRecord> {
    let mut rec = ClipRecord {
        source_path: source.to_string(),
        start_s: span.0,
        end_s: span.1,
        silence_ratio: None,
        effective_sr_hz: None,
        snr_db: None,
        tags: Vec::new(),
        verdict: Verdict::Keep,
    };
    let sr = silence_ratio(wave, sample_rate, cfg)?;
    rec.silence_ratio = Some(sr);
    if sr > cfg.silence_threshold_ratio {
        rec.verdict = Verdict::Discard(DiscardReason::Silent);
        return Ok(rec);
    }
    let eff = effective_sample_rate(wave, sample_rate, cfg)?;
    rec.effective_sr_hz = Some(eff);
    bandwidth_tag(&mut rec.tags, eff, cfg);
    if eff <= cfg.min_effective_sr_hz {
        rec.verdict = Verdict::Discard(DiscardReason::LowBandwidth);
        return Ok(rec);
    }
    if cfg.snr_gate {
        let snr = estimate_snr(wave, sample_rate, cfg)?;
        rec.snr_db = Some(snr);
        if !(snr >= cfg.min_snr_db) {
            rec.verdict = Verdict::Discard(DiscardReason::LowSnr);
        }
    }
    Ok(rec)
}

/// All chunk records for one decoded file.
pub fn process_audio(source: &str, audio: &MonoAudio, cfg: &PipelineConfig) -> Result<Vec<ClipRecord>> {
    if audio.samples.is_empty() {
        return Ok(vec![ClipRecord {
            source_path: source.to_string(),
            start_s: 0.0,
            end_s: 0.0,
            silence_ratio: None,
            effective_sr_hz: None,
            snr_db: None,
            tags: Vec::new(),
            verdict: Verdict::Discard(DiscardReason::NoAudio),
        }]);
    }
    let sr = audio.sample_rate as f64;
    chunk(audio.duration_s(), cfg)
        .into_iter()
        .map(|span| {
            let lo = (span.0 * sr).round() as usize;
            let hi = ((span.1 * sr).round() as usize).min(audio.samples.len());
            evaluate_chunk(source, span, &audio.samples[lo..hi], audio.sample_rate, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub files: usize,
    pub clips: usize,
    pub kept: usize,
    pub discarded: Vec<(DiscardReason, usize)>,
    pub errors: usize,
}

impl Summary {
    pub fn discards(&self, reason: DiscardReason) -> usize {
        self.discarded.iter().find(|(r, _)| *r == reason).map_or(0, |(_, n)| *n)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "files      {}", self.files).unwrap();
        writeln!(s, "clips      {}", self.clips).unwrap();
        writeln!(s, "kept       {}", self.kept).unwrap();
        for (r, n) in &self.discarded {
            writeln!(s, "discard    {:<14} {n}", r.as_str()).unwrap();
        }
        writeln!(s, "errors     {}", self.errors).unwrap();
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub summary: Summary,
}

impl Manifest {
    pub fn clips(&self) -> impl Iterator<Item = &ClipRecord> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Clip(c) => Some(c),
            ManifestEntry::Error { .. } => None,
        })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<ManifestEntry>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line: {e}"))))
            .collect()
    }
}

fn is_wav(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn relative_name(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Every `.wav` file under `root`, sorted.
pub fn find_audio(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        if entry.file_type().is_file() && is_wav(entry.path()) {
            files.push(entry.path().to_path_buf());
        }
    }
    files.sort();
    Ok(files)
}

/// Curates every WAV file under `root` in parallel, merging results in
/// `(path, start)` order. Unreadable files become error entries.
pub fn run_pipeline(root: &Path, cfg: &PipelineConfig, filters: &[&dyn ExternalFilter]) -> Result<Manifest> {
    cfg.validate()?;
    let files = find_audio(root)?;
    let per_file: Vec<Vec<ManifestEntry>> = files
        .par_iter()
        .map(|p| {
            let name = relative_name(root, p);
            let result = read_wav(p).and_then(|audio| {
                let recs = process_audio(&name, &audio, cfg)?;
                Ok(recs
                    .into_iter()
                    .map(|r| {
                        let sr = audio.sample_rate as f64;
                        let lo = (r.start_s * sr).round() as usize;
                        let hi = ((r.end_s * sr).round() as usize).min(audio.samples.len());
                        filters.iter().fold(r, |r, f| f.apply(r, &audio.samples[lo..hi], audio.sample_rate))
                    })
                    .collect::<Vec<_>>())
            });
            match result {
                Ok(recs) => recs.into_iter().map(ManifestEntry::Clip).collect(),
                Err(e) => vec![ManifestEntry::Error { source_path: name, error: e.to_string() }],
            }
        })
        .collect();
    let mut entries: Vec<ManifestEntry> = per_file.into_iter().flatten().collect();
    entries.sort_by(|a, b| {
        let (pa, sa) = a.sort_key();
        let (pb, sb) = b.sort_key();
        pa.cmp(pb).then(sa.total_cmp(&sb))
    });

    let mut summary = Summary { files: files.len(), ..Default::default() };
    let mut counts = [0usize; 4];
    for e in &entries {
        match e {
            ManifestEntry::Clip(c) => {
                summary.clips += 1;
                match c.verdict {
                    Verdict::Keep => summary.kept += 1,
                    Verdict::Discard(r) => counts[DiscardReason::ALL.iter().position(|x| *x == r).unwrap()] += 1,
                }
            }
            ManifestEntry::Error { .. } => summary.errors += 1,
        }
    }
    summary.discarded = DiscardReason::ALL.iter().copied().zip(counts).collect();
    Ok(Manifest { entries, summary })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes `manifest.jsonl` and `summary.txt` into `out_dir`.
pub fn write_manifest(manifest: &Manifest, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_jsonl()?)?;
    fs::write(out_dir.join(SUMMARY_FILE), manifest.summary.render())?;
    Ok(())
}
