//! Embedding sets, providers and the metric report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{cosine_alignment, frechet_distance, inception_score, kl_divergence};
use crate::curation::read_wav;
use crate::error::{Error, Result};
use crate::stubs::{bytes_to_signal, stub_encode, stub_encode_text, Modality, StubEncoderSpec};
use crate::tensor::{read_container, write_container, ContainerEntry};

/// Rows of embeddings (and optionally class logits) keyed by source id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub provider: String,
    pub sources: Vec<String>,
    /// `[N, D_e]`
    pub embeddings: DMatrix<f64>,
    /// `[N, C]`
    pub logits: Option<DMatrix<f64>>,
}

const PROVIDER_PREFIX: &str = "provider/";
const EMB_PREFIX: &str = "embedding/";
const LOGIT_PREFIX: &str = "logits/";

fn stack(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("rows differ in width".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

impl EmbeddingSet {
    pub fn new(provider: &str, sources: Vec<String>, embeddings: DMatrix<f64>, logits: Option<DMatrix<f64>>) -> Result<Self> {
        let set = Self { provider: provider.to_string(), sources, embeddings, logits };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sources.len();
        if self.embeddings.nrows() != n || self.logits.as_ref().is_some_and(|l| l.nrows() != n) {
            return Err(Error::InvalidArgument(format!("{n} source ids but matrix rows disagree")));
        }
        let mut seen = self.sources.clone();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate source id".into()));
        }
        if self.sources.iter().any(|s| s.is_empty() || s.contains('/')) {
            return Err(Error::InvalidArgument("source ids must be non-empty and contain no '/'".into()));
        }
        if !self.embeddings.iter().chain(self.logits.iter().flat_map(|l| l.iter())).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding set".into()));
        }
        Ok(())
    }

    pub fn logits(&self) -> Result<&DMatrix<f64>> {
        self.logits.as_ref().ok_or_else(|| Error::InvalidArgument(format!("provider {} supplied no logits", self.provider)))
    }

    /// Row indices into `self` and `other` matched by source id.
    pub fn pair_with(&self, other: &EmbeddingSet) -> Result<Vec<(usize, usize)>> {
        let theirs: BTreeMap<&str, usize> = other.sources.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if theirs.len() != self.len() {
            return Err(Error::InvalidArgument(format!("unpaired sets: {} vs {} rows", self.len(), other.len())));
        }
        self.sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                theirs
                    .get(s.as_str())
                    .map(|j| (i, *j))
                    .ok_or_else(|| Error::InvalidArgument(format!("source {s} has no partner")))
            })
            .collect()
    }

    pub fn to_entries(&self) -> Vec<ContainerEntry> {
        let mut out = vec![ContainerEntry { name: format!("{PROVIDER_PREFIX}{}", self.provider), shape: vec![0], data: vec![] }];
        for (i, s) in self.sources.iter().enumerate() {
            let row = |m: &DMatrix<f64>| m.row(i).iter().map(|v| *v as f32).collect::<Vec<f32>>();
            out.push(ContainerEntry { name: format!("{EMB_PREFIX}{s}"), shape: vec![self.embeddings.ncols()], data: row(&self.embeddings) });
            if let Some(l) = &self.logits {
                out.push(ContainerEntry { name: format!("{LOGIT_PREFIX}{s}"), shape: vec![l.ncols()], data: row(l) });
            }
        }
        out
    }

    /// Rows come back ordered by source id.
    pub fn from_entries(entries: Vec<ContainerEntry>) -> Result<Self> {
        let mut provider = None;
        let mut emb = BTreeMap::new();
        let mut logits = BTreeMap::new();
        for e in entries {
            let to64 = |d: &[f32]| d.iter().map(|v| *v as f64).collect::<Vec<f64>>();
            if let Some(p) = e.name.strip_prefix(PROVIDER_PREFIX) {
                provider = Some(p.to_string());
            } else if let Some(s) = e.name.strip_prefix(EMB_PREFIX) {
                emb.insert(s.to_string(), to64(&e.data));
            } else if let Some(s) = e.name.strip_prefix(LOGIT_PREFIX) {
                logits.insert(s.to_string(), to64(&e.data));
            } else {
                return Err(Error::Format(format!("unexpected entry {}", e.name)));
            }
        }
        let provider = provider.ok_or_else(|| Error::Format("embedding file names no provider".into()))?;
        let sources: Vec<String> = emb.keys().cloned().collect();
        let embeddings = stack(&emb.into_values().collect::<Vec<_>>())?;
        let logits = if logits.is_empty() {
            None
        } else {
            if !logits.keys().eq(sources.iter()) {
                return Err(Error::Format("logit and embedding rows name different sources".into()));
            }
            Some(stack(&logits.into_values().collect::<Vec<_>>())?)
        };
        Self::new(&provider, sources, embeddings, logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(fs::File::create(path)?, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(read_container(std::io::BufReader::new(fs::File::open(path)?))?)
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        (pick(&self.embeddings), self.logits.as_ref().map(pick))
    }
}

/// Maps audio, video and text into one embedding space and audio embeddings to class logits.
pub trait EmbeddingProvider {
    fn id(&self) -> &str;
    fn embed_audio(&self, wave: &[f32], sample_rate: u32) -> Result<Vec<f64>>;
    fn embed_video(&self, signal: &[f32], duration_s: f64) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn class_logits(&self, embedding: &[f64]) -> Vec<f64>;
}

/// Score from a model this crate does not ship; `None` renders as unavailable.
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, generated_dir: &Path, reference_dir: &Path) -> Option<f64>;
}

/// Deterministic stand-in provider built on the stub encoders.
#[derive(Debug, Clone)]
pub struct StubProvider {
    spec: StubEncoderSpec,
    classes: usize,
    /// `[dim, classes]`
    head: Vec<f64>,
}

pub const STUB_PROVIDER_ID: &str = "stub";

impl StubProvider {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4556_414c);
        let head = (0..dim * classes)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                3.0 * z / (dim as f64).sqrt()
            })
            .collect();
        Self { spec: StubEncoderSpec::new(Modality::Repa, dim, 8.0, seed), classes, head }
    }

    fn pool(t: crate::tensor::Tensor) -> Vec<f64> {
        let (n, d) = (t.dim(0), t.dim(1));
        let data = t.data();
        (0..d).map(|j| (0..n).map(|i| data[i * d + j] as f64).sum::<f64>() / n as f64).collect()
    }
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new(32, 16, 0)
    }
}

impl EmbeddingProvider for StubProvider {
    fn id(&self) -> &str {
        STUB_PROVIDER_ID
    }

    fn embed_audio(&self, wave: &[f32], sample_rate: u32) -> Result<Vec<f64>> {
        Ok(Self::pool(stub_encode(wave, wave.len() as f64 / sample_rate as f64, &self.spec)?))
    }

    fn embed_video(&self, signal: &[f32], duration_s: f64) -> Result<Vec<f64>> {
        Ok(Self::pool(stub_encode(signal, duration_s, &self.spec)?))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(Self::pool(stub_encode_text(text, &self.spec)?))
    }

    fn class_logits(&self, e: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|c| e.iter().enumerate().map(|(i, v)| v * self.head[i * self.classes + c]).sum()).collect()
    }
}

/// WAV files directly inside `dir`, sorted by file name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Embeds every WAV in `dir`; source ids are file stems.
pub fn embed_dir(dir: &Path, provider: &dyn EmbeddingProvider) -> Result<EmbeddingSet> {
    let files = list_wavs(dir)?;
    let mut sources = Vec::new();
    let mut emb = Vec::new();
    let mut logits = Vec::new();
    for f in &files {
        let audio = read_wav(f)?;
        let e = provider.embed_audio(&audio.samples, audio.sample_rate)?;
        logits.push(provider.class_logits(&e));
        emb.push(e);
        sources.push(stem(f));
    }
    EmbeddingSet::new(provider.id(), sources, stack(&emb)?, Some(stack(&logits)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub rows: usize,
    pub dim: usize,
    pub mean_row_norm: f64,
    pub std_row_norm: f64,
}

impl SetStats {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let norms: Vec<f64> = m.row_iter().map(|r| r.norm()).collect();
        let n = norms.len().max(1) as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { rows: m.nrows(), dim: m.ncols(), mean_row_norm: mean, std_row_norm: var.sqrt() }
    }
}

pub const KL_DIRECTION: &str = "KL(P || Q) with P = generated, Q = reference";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub provider: String,
    pub kl_direction: String,
    pub fd: f64,
    pub kl: f64,
    pub is_score: f64,
    /// Audio against paired video features.
    pub ib_cosine: f64,
    /// Audio against paired captions.
    pub clap_cosine: f64,
    pub zero_norm_pairs: usize,
    pub desync: Option<f64>,
    pub aesthetics: Option<f64>,
    pub generated: SetStats,
    pub reference: SetStats,
}

impl MetricReport {
    /// Header record followed by one record per metric, in a fixed order.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![json!({
            "record": "header",
            "provider": self.provider,
            "kl_direction": self.kl_direction,
            "generated": self.generated,
            "reference": self.reference,
        })];
        let metrics: [(&str, Option<f64>); 7] = [
            ("fd", Some(self.fd)),
            ("kl", Some(self.kl)),
            ("is", Some(self.is_score)),
            ("ib_cosine", Some(self.ib_cosine)),
            ("clap_cosine", Some(self.clap_cosine)),
            ("desync", self.desync),
            ("aesthetics", self.aesthetics),
        ];
        for (name, v) in metrics {
            lines.push(match v {
                Some(x) => json!({"record": "metric", "metric": name, "value": x, "status": "ok"}),
                None => json!({"record": "metric", "metric": name, "value": null, "status": "unavailable"}),
            });
        }
        let mut out = String::new();
        for l in lines {
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "unavailable".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("FD", fmt(Some(self.fd))),
            ("KL", fmt(Some(self.kl))),
            ("IS", fmt(Some(self.is_score))),
            ("IB cosine", fmt(Some(self.ib_cosine))),
            ("CLAP cosine", fmt(Some(self.clap_cosine))),
            ("DeSync", fmt(self.desync)),
            ("Aesthetics", fmt(self.aesthetics)),
        ];
        let mut s = format!(
            "provider: {}\n{}\ngenerated: {} rows, reference: {} rows\n",
            self.provider, self.kl_direction, self.generated.rows, self.reference.rows
        );
        s.push_str(&format!("{:<12} {:>14}\n", "metric", "value"));
        for (k, v) in rows {
            s.push_str(&format!("{k:<12} {v:>14}\n"));
        }
        if self.zero_norm_pairs > 0 {
            s.push_str(&format!("{} zero-norm pairs counted as 0 in cosine means\n", self.zero_norm_pairs));
        }
        s
    }
}

/// Compares generated and reference WAV directories.
///
/// Paired metrics match files by stem. For each stem the reference side may
/// hold `<stem>.txt` (caption) and `<stem>.video` (raw conditioning bytes);
/// without them the caption is the stem and the video signal is the reference audio.
pub fn evaluate_dirs(
    generated_dir: &Path,
    reference_dir: &Path,
    provider: &dyn EmbeddingProvider,
    scorers: &[&dyn ExternalScorer],
) -> Result<MetricReport> {
    let gen = embed_dir(generated_dir, provider)?;
    let reference = embed_dir(reference_dir, provider)?;
    for (set, side) in [(&gen, "generated"), (&reference, "reference")] {
        if set.len() < 2 {
            return Err(Error::InvalidArgument(format!("{side} directory holds {} WAV files, at least 2 needed", set.len())));
        }
    }
    let pairs = gen.pair_with(&reference)?;
    let (gi, ri): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let (_, gen_logits) = gen.select(&gi);
    let (_, ref_logits) = reference.select(&ri);

    let mut video_rows = Vec::new();
    let mut text_rows = Vec::new();
    for &r in &ri {
        let s = &reference.sources[r];
        let video_path = reference_dir.join(format!("{s}.video"));
        let wav = read_wav(reference_dir.join(format!("{s}.wav")))?;
        let duration = wav.duration_s();
        let signal = if video_path.is_file() { bytes_to_signal(&fs::read(&video_path)?) } else { wav.samples };
        video_rows.push(provider.embed_video(&signal, duration)?);
        let caption_path = reference_dir.join(format!("{s}.txt"));
        let caption = if caption_path.is_file() { fs::read_to_string(caption_path)? } else { s.replace(['_', '-'], " ") };
        text_rows.push(provider.embed_text(&caption)?);
    }
    let (gen_paired, _) = gen.select(&gi);
    let ib = cosine_alignment(&gen_paired, &stack(&video_rows)?)?;
    let clap = cosine_alignment(&gen_paired, &stack(&text_rows)?)?;

    let score = |name: &str| scorers.iter().find(|s| s.name() == name).and_then(|s| s.score(generated_dir, reference_dir));
    Ok(MetricReport {
        provider: provider.id().to_string(),
        kl_direction: KL_DIRECTION.to_string(),
        fd: frechet_distance(&gen.embeddings, &reference.embeddings)?,
        kl: kl_divergence(gen_logits.as_ref().unwrap(), ref_logits.as_ref().unwrap())?,
        is_score: inception_score(gen.logits()?)?,
        ib_cosine: ib.mean,
        clap_cosine: clap.mean,
        zero_norm_pairs: ib.zero_rows.len() + clap.zero_rows.len(),
        desync: score("desync"),
        aesthetics: score("aesthetics"),
        generated: SetStats::of(&gen.embeddings),
        reference: SetStats::of(&reference.embeddings),
    })
}
