//! Deterministic stand-ins for the pretrained encoders and the audio codec.
//!
//! Every encoder is a fixed seeded random projection of per-window signal
//! statistics, so identical inputs always give identical features and the
//! output shapes follow the real encoders' frame rates.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::CfgMask;
use crate::model::ModelConfig;
use crate::tensor::{read_container, write_container, ContainerEntry, Tensor};

pub const SAMPLE_RATE: u32 = 48_000;
pub const LATENT_RATE: u32 = 50;
pub const SAMPLES_PER_LATENT: usize = (SAMPLE_RATE / LATENT_RATE) as usize;
pub const VIDEO_FPS: f64 = 8.0;
pub const SYNC_FPS: f64 = 24.0;
pub const REPA_FPS: f64 = 25.0;

/// Number of summary points taken from each window; the statistic vector is twice this.
const STAT_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Sync,
    Text,
    Repa,
}

impl Modality {
    fn salt(self) -> u64 {
        match self {
            Modality::Video => 0x5649_4445,
            Modality::Sync => 0x5359_4e43,
            Modality::Text => 0x5445_5854,
            Modality::Repa => 0x5245_5041,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubEncoderSpec {
    pub modality: Modality,
    pub dim: usize,
    /// Output frames per second; ignored for text, which emits one frame per token.
    pub fps: f64,
    pub seed: u64,
    projection: Vec<f32>,
}

impl StubEncoderSpec {
    pub fn new(modality: Modality, dim: usize, fps: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ modality.salt().rotate_left(17));
        let n = 2 * STAT_POINTS;
        let scale = 1.0 / (n as f32).sqrt();
        let projection = (0..dim * n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { modality, dim, fps, seed, projection }
    }

    pub fn video(dim: usize, seed: u64) -> Self {
        Self::new(Modality::Video, dim, VIDEO_FPS, seed)
    }

    pub fn sync(dim: usize, seed: u64) -> Self {
        Self::new(Modality::Sync, dim, SYNC_FPS, seed)
    }

    pub fn text(dim: usize, seed: u64) -> Self {
        Self::new(Modality::Text, dim, 0.0, seed)
    }

    pub fn repa(dim: usize, seed: u64) -> Self {
        Self::new(Modality::Repa, dim, REPA_FPS, seed)
    }

    /// Frame count for a clip of `duration_s` seconds, at least one.
    pub fn frames(&self, duration_s: f64) -> usize {
        ((duration_s * self.fps).round() as usize).max(1)
    }

    fn project(&self, stats: &[f32]) -> Vec<f32> {
        let n = stats.len();
        (0..self.dim)
            .map(|r| {
                let row = &self.projection[r * n..(r + 1) * n];
                let s: f32 = row.iter().zip(stats).map(|(w, x)| w * x).sum();
                s.tanh()
            })
            .collect()
    }
}

/// Segment means then segment RMS deviations, scaled to unit RMS (zero stays zero).
fn window_stats(window: &[f32]) -> Vec<f32> {
    let n = window.len();
    let mut means = Vec::with_capacity(STAT_POINTS);
    let mut rms = Vec::with_capacity(STAT_POINTS);
    for j in 0..STAT_POINTS {
        let lo = (j * n / STAT_POINTS).min(n - 1);
        let hi = ((j + 1) * n / STAT_POINTS).clamp(lo + 1, n);
        let seg = &window[lo..hi];
        let m = seg.iter().map(|v| *v as f64).sum::<f64>() / seg.len() as f64;
        let r = (seg.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / seg.len() as f64).sqrt();
        means.push(m);
        rms.push(r);
    }
    let rms_mean = rms.iter().sum::<f64>() / STAT_POINTS as f64;
    let mut stats: Vec<f64> = means;
    stats.extend(rms.iter().map(|r| r - rms_mean));
    let norm = (stats.iter().map(|v| v * v).sum::<f64>() / stats.len() as f64).sqrt();
    if norm < 1e-12 {
        return vec![0.0; stats.len()];
    }
    stats.iter().map(|v| (v / norm) as f32).collect()
}

/// Encodes a signal spanning `duration_s` seconds into `[frames, dim]` features.
///
/// Each frame summarizes a window two frames wide centred on it, so
/// neighbouring frames share half their input.
pub fn stub_encode(signal: &[f32], duration_s: f64, spec: &StubEncoderSpec) -> Result<Tensor> {
    if signal.is_empty() {
        return Err(Error::Empty("stub encoder input"));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} s must be positive")));
    }
    if spec.modality == Modality::Text {
        return Err(Error::InvalidArgument("text features come from stub_encode_text".into()));
    }
    let frames = spec.frames(duration_s);
    let n = signal.len();
    let per = n as f64 / frames as f64;
    let mut data = Vec::with_capacity(frames * spec.dim);
    for i in 0..frames {
        let lo = ((i as f64 - 0.5) * per).floor().max(0.0) as usize;
        let hi = (((i as f64 + 1.5) * per).ceil() as usize).min(n);
        let lo = lo.min(n - 1);
        let hi = hi.max(lo + 1);
        data.extend(spec.project(&window_stats(&signal[lo..hi])));
    }
    Tensor::new(data, &[frames, spec.dim])
}

/// One feature row per whitespace-separated token.
pub fn stub_encode_text(text: &str, spec: &StubEncoderSpec) -> Result<Tensor> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Empty("text prompt"));
    }
    let mut data = Vec::with_capacity(tokens.len() * spec.dim);
    for tok in &tokens {
        data.extend(spec.project(&window_stats(&bytes_to_signal(tok.as_bytes()))));
    }
    Tensor::new(data, &[tokens.len(), spec.dim])
}

/// Maps raw bytes onto `[-1, 1]`.
pub fn bytes_to_signal(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|b| *b as f32 / 127.5 - 1.0).collect()
}

/// Frame-level alignment targets: one row per 40 ms frame of a 48 kHz waveform.
pub fn stub_repa_features(wave: &[f32], spec: &StubEncoderSpec) -> Result<Tensor> {
    if wave.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let hop = (SAMPLE_RATE as f64 / spec.fps).round() as usize;
    let frames = spec.frames(wave.len() as f64 / SAMPLE_RATE as f64);
    let mut data = Vec::with_capacity(frames * spec.dim);
    for i in 0..frames {
        let lo = (i * hop).min(wave.len() - 1);
        let hi = ((i + 1) * hop).clamp(lo + 1, wave.len());
        data.extend(spec.project(&window_stats(&wave[lo..hi])));
    }
    Tensor::new(data, &[frames, spec.dim])
}

/// Frame-wise orthonormal projection of 960-sample frames onto 128 fixed directions.
#[derive(Debug, Clone)]
pub struct ToyCodec {
    /// `[latent_dim, 960]`, orthonormal rows.
    basis: Vec<f64>,
    pub latent_dim: usize,
}

impl ToyCodec {
    pub fn new(latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > SAMPLES_PER_LATENT {
            return Err(Error::InvalidArgument(format!("latent width {latent_dim} outside 1..={SAMPLES_PER_LATENT}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_C0DE);
        let g = DMatrix::<f64>::from_fn(SAMPLES_PER_LATENT, latent_dim, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mut basis = Vec::with_capacity(latent_dim * SAMPLES_PER_LATENT);
        for r in 0..latent_dim {
            basis.extend(q.column(r).iter().copied());
        }
        Ok(Self { basis, latent_dim })
    }

    /// `wave` at 48 kHz, a whole number of frames long, to `[L_a, latent_dim]`.
    pub fn encode(&self, wave: &[f32], sample_rate: u32) -> Result<Tensor> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidArgument(format!("codec expects {SAMPLE_RATE} Hz, got {sample_rate}")));
        }
        if wave.is_empty() || wave.len() % SAMPLES_PER_LATENT != 0 {
            return Err(Error::InvalidArgument(format!(
                "waveform length {} is not a positive multiple of {SAMPLES_PER_LATENT}",
                wave.len()
            )));
        }
        let frames = wave.len() / SAMPLES_PER_LATENT;
        let mut out = Vec::with_capacity(frames * self.latent_dim);
        for f in wave.chunks_exact(SAMPLES_PER_LATENT) {
            for r in 0..self.latent_dim {
                let row = &self.basis[r * SAMPLES_PER_LATENT..(r + 1) * SAMPLES_PER_LATENT];
                out.push(row.iter().zip(f).map(|(b, x)| b * *x as f64).sum::<f64>() as f32);
            }
        }
        Tensor::new(out, &[frames, self.latent_dim])
    }

    /// Transpose reconstruction of `[L_a, latent_dim]` back to samples.
    pub fn decode(&self, latent: &Tensor) -> Result<Vec<f32>> {
        if latent.rank() != 2 || latent.dim(1) != self.latent_dim {
            return Err(Error::shape("decode", latent.shape(), &[latent.dim(0), self.latent_dim]));
        }
        let mut out = Vec::with_capacity(latent.dim(0) * SAMPLES_PER_LATENT);
        for z in latent.data().chunks_exact(self.latent_dim) {
            let mut frame = vec![0.0f64; SAMPLES_PER_LATENT];
            for (r, c) in z.iter().enumerate() {
                let row = &self.basis[r * SAMPLES_PER_LATENT..(r + 1) * SAMPLES_PER_LATENT];
                for (o, b) in frame.iter_mut().zip(row) {
                    *o += b * *c as f64;
                }
            }
            out.extend(frame.iter().map(|v| *v as f32));
        }
        Ok(out)
    }
}

/// Latent frame count for a duration: `round(duration * 50)`.
pub fn latent_frames(duration_s: f64) -> usize {
    (duration_s * LATENT_RATE as f64).round() as usize
}

/// The four stub encoders and the codec configured for one model.
#[derive(Debug, Clone)]
pub struct StubSuite {
    pub video: StubEncoderSpec,
    pub sync: StubEncoderSpec,
    pub text: StubEncoderSpec,
    pub repa: StubEncoderSpec,
    pub codec: ToyCodec,
}

impl StubSuite {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            video: StubEncoderSpec::video(config.video_dim, seed),
            sync: StubEncoderSpec::sync(config.sync_dim, seed),
            text: StubEncoderSpec::text(config.text_dim, seed),
            repa: StubEncoderSpec::repa(config.repa_dim, seed),
            codec: ToyCodec::new(config.latent_dim, seed)?,
        })
    }

    /// Conditioning for one clip. `wave` is the target audio when training and
    /// `None` when generating, in which case the latent is zeros.
    pub fn bundle(&self, video: &[f32], caption: &str, duration_s: f64, wave: Option<&[f32]>) -> Result<FeatureBundle> {
        let la = latent_frames(duration_s);
        if la == 0 {
            return Err(Error::InvalidArgument(format!("duration {duration_s} s is shorter than one latent frame")));
        }
        let add_batch = |t: Tensor| -> Result<Tensor> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        };
        let (latent, repa_target) = match wave {
            Some(w) => {
                let lat = self.codec.encode(w, SAMPLE_RATE)?;
                if lat.dim(0) != la {
                    return Err(Error::InvalidArgument(format!(
                        "waveform holds {} latent frames, duration implies {la}",
                        lat.dim(0)
                    )));
                }
                (lat, Some(add_batch(stub_repa_features(w, &self.repa)?)?))
            }
            None => (Tensor::zeros(&[la, self.codec.latent_dim]), None),
        };
        Ok(FeatureBundle {
            video: add_batch(stub_encode(video, duration_s, &self.video)?)?,
            text: add_batch(stub_encode_text(caption, &self.text)?)?,
            sync: add_batch(stub_encode(video, duration_s, &self.sync)?)?,
            latent: add_batch(latent)?,
            repa_target,
            durations: vec![duration_s],
            drop: vec![CfgMask::default()],
        })
    }
}

/// Conditioning sequences and target latent for a batch.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// `[B, L_v, video_dim]`
    pub video: Tensor,
    /// `[B, L_t, text_dim]`
    pub text: Tensor,
    /// `[B, L_s, sync_dim]`
    pub sync: Tensor,
    /// `[B, L_a, latent_dim]`
    pub latent: Tensor,
    /// `[B, L_r, repa_dim]`, present when the ground-truth audio is known.
    pub repa_target: Option<Tensor>,
    pub durations: Vec<f64>,
    pub drop: Vec<CfgMask>,
}

impl FeatureBundle {
    pub fn batch(&self) -> usize {
        self.latent.dim(0)
    }

    pub fn check_batch(&self, b: usize) -> Result<()> {
        let mut tensors = vec![("video", &self.video), ("text", &self.text), ("sync", &self.sync), ("latent", &self.latent)];
        if let Some(r) = &self.repa_target {
            tensors.push(("repa_target", r));
        }
        for (name, t) in tensors {
            if t.rank() != 3 || t.dim(0) != b {
                return Err(Error::InvalidArgument(format!("{name} has shape {:?}, expected batch {b}", t.shape())));
            }
            if t.dim(1) == 0 {
                return Err(Error::Empty("feature sequence"));
            }
        }
        if self.drop.len() != b || self.durations.len() != b {
            return Err(Error::InvalidArgument(format!("metadata for {} samples, expected {b}", self.drop.len())));
        }
        Ok(())
    }

    /// Stacks single-clip bundles of identical shapes along the batch axis.
    pub fn stack(items: &[FeatureBundle]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("bundle list"))?;
        let cat = |f: fn(&FeatureBundle) -> &Tensor| Tensor::concat(&items.iter().map(|b| f(b).clone()).collect::<Vec<_>>(), 0);
        let repa_target = if first.repa_target.is_some() {
            let parts = items
                .iter()
                .map(|b| b.repa_target.clone().ok_or_else(|| Error::InvalidArgument("mixed alignment targets".into())))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::concat(&parts, 0)?)
        } else {
            None
        };
        Ok(Self {
            video: cat(|b| &b.video)?,
            text: cat(|b| &b.text)?,
            sync: cat(|b| &b.sync)?,
            latent: cat(|b| &b.latent)?,
            repa_target,
            durations: items.iter().flat_map(|b| b.durations.clone()).collect(),
            drop: items.iter().flat_map(|b| b.drop.clone()).collect(),
        })
    }

    /// `n` copies of this bundle along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        Self::stack(&vec![self.clone(); n])
    }

    /// Same bundle with every modality marked dropped.
    pub fn unconditional(&self) -> Self {
        let mut out = self.clone();
        out.drop = vec![CfgMask { drop_video: true, drop_text: true, drop_sync: true }; self.batch()];
        out
    }

    /// Same bundle with nothing dropped.
    pub fn conditional(&self) -> Self {
        let mut out = self.clone();
        out.drop = vec![CfgMask::default(); self.batch()];
        out
    }

    /// Gaussian features of the given lengths, for tests and benchmarks.
    pub fn random<R: rand::Rng + ?Sized>(
        config: &ModelConfig,
        b: usize,
        la: usize,
        lv: usize,
        lt: usize,
        ls: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            video: Tensor::randn(&[b, lv, config.video_dim], 1.0, rng),
            text: Tensor::randn(&[b, lt, config.text_dim], 1.0, rng),
            sync: Tensor::randn(&[b, ls, config.sync_dim], 1.0, rng),
            latent: Tensor::randn(&[b, la, config.latent_dim], 1.0, rng),
            repa_target: Some(Tensor::randn(&[b, (la / 2).max(1), config.repa_dim], 1.0, rng)),
            durations: vec![la as f64 / LATENT_RATE as f64; b],
            drop: vec![CfgMask::default(); b],
        }
    }
}

/// Hex SHA-256 of the concatenated parts, each length-prefixed.
pub fn content_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Directory of feature tensors stored in the checkpoint container, one file per content key.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self { dir: dir.as_ref().to_path_buf() })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.hvfw"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Tensor>> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        let entries = read_container(fs::File::open(p)?)?;
        let e = entries
            .into_iter()
            .find(|e| e.name == "features")
            .ok_or_else(|| Error::Format(format!("cache entry {key} has no features")))?;
        Ok(Some(Tensor::new(e.data, &e.shape)?))
    }

    pub fn put(&self, key: &str, t: &Tensor) -> Result<()> {
        let tmp = self.dir.join(format!("{key}.tmp"));
        let entry = ContainerEntry { name: "features".into(), shape: t.shape().to_vec(), data: t.to_vec() };
        write_container(std::io::BufWriter::new(fs::File::create(&tmp)?), &[entry])?;
        fs::rename(tmp, self.path(key))?;
        Ok(())
    }

    pub fn get_or_compute(&self, key: &str, compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        if let Some(t) = self.get(key)? {
            return Ok(t);
        }
        let t = compute()?;
        self.put(key, &t)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|v: f32| 0.3 * v).collect()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn pooled(t: &Tensor) -> Vec<f32> {
        t.mean_axis(0, false).unwrap().to_vec()
    }

    #[test]
    fn encoders_are_deterministic() {
        let s = noise(96_000, 1);
        let spec = StubEncoderSpec::video(16, 3);
        assert_eq!(stub_encode(&s, 2.0, &spec).unwrap().data(), stub_encode(&s, 2.0, &StubEncoderSpec::video(16, 3)).unwrap().data());
        let r = StubEncoderSpec::repa(8, 3);
        assert_eq!(stub_repa_features(&s, &r).unwrap().data(), stub_repa_features(&s, &r).unwrap().data());
    }

    #[test]
    fn frame_rates() {
        let s = noise(96_000, 2);
        assert_eq!(stub_encode(&s, 2.0, &StubEncoderSpec::sync(8, 0)).unwrap().shape(), &[48, 8]);
        assert_eq!(stub_encode(&s, 2.0, &StubEncoderSpec::video(8, 0)).unwrap().shape(), &[16, 8]);
        assert_eq!(stub_repa_features(&s, &StubEncoderSpec::repa(8, 0)).unwrap().shape(), &[50, 8]);
        assert_eq!(stub_encode_text("a dog barks twice", &StubEncoderSpec::text(8, 0)).unwrap().shape(), &[4, 8]);
    }

    #[test]
    fn repa_frames_align_to_latents_by_duplication() {
        let f = stub_repa_features(&noise(96_000, 3), &StubEncoderSpec::repa(4, 0)).unwrap();
        let aligned = f.interp_nearest(100, 0).unwrap();
        for i in 0..100 {
            assert_eq!(&aligned.data()[i * 4..(i + 1) * 4], &f.data()[(i / 2) * 4..(i / 2 + 1) * 4]);
        }
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(stub_encode(&[], 1.0, &StubEncoderSpec::video(4, 0)).is_err());
        assert!(stub_encode_text("   ", &StubEncoderSpec::text(4, 0)).is_err());
        assert!(stub_repa_features(&[], &StubEncoderSpec::repa(4, 0)).is_err());
    }

    #[test]
    fn different_inputs_give_distinct_pooled_features() {
        let spec = StubEncoderSpec::video(32, 0);
        let feats: Vec<Vec<f32>> = (0..12).map(|i| pooled(&stub_encode(&noise(48_000, 100 + i), 1.0, &spec).unwrap())).collect();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                assert!(cosine(&feats[i], &feats[j]) < 0.99);
            }
        }
        let text = StubEncoderSpec::text(32, 0);
        let a = pooled(&stub_encode_text("glass shatters", &text).unwrap());
        let b = pooled(&stub_encode_text("thunder rumbles", &text).unwrap());
        assert!(cosine(&a, &b) < 0.99);
    }

    #[test]
    fn video_features_are_temporally_smooth() {
        // a slowly drifting signal: neighbours should correlate more than distant frames
        let s: Vec<f32> = (0..96_000).map(|i| ((i as f32) * 2e-4).sin() + 0.3 * ((i as f32) * 3e-3).sin()).collect();
        let f = stub_encode(&s, 2.0, &StubEncoderSpec::sync(32, 0)).unwrap();
        let row = |i: usize| &f.data()[i * 32..(i + 1) * 32];
        let near: f64 = (0..47).map(|i| cosine(row(i), row(i + 1))).sum::<f64>() / 47.0;
        let far: f64 = (0..24).map(|i| cosine(row(i), row(i + 24))).sum::<f64>() / 24.0;
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn outputs_are_bounded() {
        let spec = StubEncoderSpec::sync(16, 0);
        for seed in 0..5 {
            let s: Vec<f32> = noise(48_000, seed).iter().map(|v| v * 30.0).collect();
            assert!(stub_encode(&s, 1.0, &spec).unwrap().data().iter().all(|v| v.abs() <= 10.0));
        }
    }

    #[test]
    fn codec_shapes_and_errors() {
        let c = ToyCodec::new(128, 0).unwrap();
        assert_eq!(c.encode(&noise(48_000, 4), 48_000).unwrap().shape(), &[50, 128]);
        assert!(c.encode(&noise(48_000, 4), 44_100).is_err());
        assert!(c.encode(&noise(1000, 4), 48_000).is_err());
        assert_eq!(latent_frames(2.0), 100);
    }

    #[test]
    fn codec_round_trip_in_subspace() {
        let c = ToyCodec::new(128, 0).unwrap();
        let z = Tensor::randn(&[5, 128], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let w = c.decode(&z).unwrap();
        let w2 = c.decode(&c.encode(&w, 48_000).unwrap()).unwrap();
        let err = w.iter().zip(&w2).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn codec_loss_is_energy_outside_subspace() {
        let c = ToyCodec::new(128, 0).unwrap();
        let w = noise(9600, 6);
        let z = c.encode(&w, 48_000).unwrap();
        let rec = c.decode(&z).unwrap();
        let e_in: f64 = w.iter().map(|v| (*v as f64).powi(2)).sum();
        let e_z: f64 = z.data().iter().map(|v| (*v as f64).powi(2)).sum();
        let e_res: f64 = w.iter().zip(&rec).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        assert!(e_z <= e_in);
        assert!((e_in - e_z - e_res).abs() < 1e-3 * e_in);
    }

    #[test]
    fn bundle_shapes() {
        let cfg = ModelConfig::default();
        let suite = StubSuite::new(&cfg, 0).unwrap();
        let w = noise(96_000, 7);
        let b = suite.bundle(&w, "footsteps on gravel", 2.0, Some(&w)).unwrap();
        assert_eq!(b.latent.shape(), &[1, 100, 128]);
        assert_eq!(b.video.shape(), &[1, 16, 32]);
        assert_eq!(b.sync.shape(), &[1, 48, 32]);
        assert_eq!(b.text.shape(), &[1, 3, 32]);
        assert_eq!(b.repa_target.as_ref().unwrap().shape(), &[1, 50, 32]);
        let r = b.repeat(3).unwrap();
        assert!(r.check_batch(3).is_ok());
        assert!(suite.bundle(&w, "x", 1.0, Some(&w)).is_err());
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path()).unwrap();
        let key = content_key(&[b"abc", b"video"]);
        assert_ne!(key, content_key(&[b"ab", b"cvideo"]));
        let t = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let got = cache.get_or_compute(&key, || Ok(t.clone())).unwrap();
        assert_eq!(got.data(), t.data());
        let again = cache.get_or_compute(&key, || panic!("should hit the cache")).unwrap();
        assert_eq!(again.data(), t.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shapes_hold_for_any_duration(duration in 0.02f64..30.0) {
            let n = ((duration * 1000.0).ceil() as usize).max(1);
            let s = vec![0.1f32; n];
            let v = stub_encode(&s, duration, &StubEncoderSpec::video(4, 0)).unwrap();
            prop_assert_eq!(v.shape(), &[((duration * 8.0).round() as usize).max(1), 4]);
            let sy = stub_encode(&s, duration, &StubEncoderSpec::sync(4, 0)).unwrap();
            prop_assert_eq!(sy.shape(), &[((duration * 24.0).round() as usize).max(1), 4]);
            prop_assert!(v.all_finite() && sy.all_finite());
        }
    }
}
