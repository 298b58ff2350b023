//! Python bindings for the core crate: the model, the codec, curation and metrics.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use foley_core::curation::{self, PipelineConfig};
use foley_core::error::Error;
use foley_core::flow::{self, RunDir, TrainConfig};
use foley_core::metrics;
use foley_core::model::{FoleyModel, ModelConfig};
use foley_core::stubs::{self, StubSuite, ToyCodec, LATENT_RATE, SAMPLE_RATE};
use foley_core::tensor::Tensor;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Wav(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn from_toml<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Flow-matching transformer with its stub encoders and codec.
#[pyclass(name = "FoleyModel")]
pub struct PyFoleyModel {
    model: FoleyModel,
    suite: StubSuite,
}

#[pymethods]
impl PyFoleyModel {
    /// `config` is the body of a `[model]` TOML section.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = from_toml(config)?;
        let suite = StubSuite::new(&cfg, cfg.seed).map_err(py_err)?;
        Ok(Self { model: FoleyModel::new(cfg).map_err(py_err)?, suite })
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.model.config.hidden_dim
    }

    fn num_parameters(&self) -> usize {
        self.model.store.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Trains on one clip (48 kHz samples, whole latent frames) and returns the per-step total loss.
    #[pyo3(signature = (wave, caption, steps=100, lr=2e-3, batch_size=4, seed=0))]
    fn fit_clip(&mut self, wave: Vec<f32>, caption: &str, steps: usize, lr: f32, batch_size: usize, seed: u64) -> PyResult<Vec<f32>> {
        let duration = wave.len() as f64 / SAMPLE_RATE as f64;
        let bundle = self.suite.bundle(&wave, caption, duration, Some(&wave)).map_err(py_err)?;
        let cfg = TrainConfig { steps, lr, batch_size, seed, ..Default::default() };
        let out = flow::train_loop(&mut self.model, &[bundle], &cfg, &RunDir(None), None).map_err(py_err)?;
        Ok(out.curve.iter().map(|r| r.report.total).collect())
    }

    /// Samples a waveform; `video` is raw bytes used as the video signal, `None` drops it.
    #[pyo3(signature = (caption, duration_s=1.0, steps=32, guidance=1.0, seed=0, video=None))]
    fn generate(&self, caption: &str, duration_s: f64, steps: usize, guidance: f32, seed: u64, video: Option<Vec<u8>>) -> PyResult<Vec<f32>> {
        let la = stubs::latent_frames(duration_s);
        if la == 0 {
            return Err(PyValueError::new_err("duration shorter than one latent frame"));
        }
        let samples = (duration_s * SAMPLE_RATE as f64).round() as usize;
        let (signal, drop_video) = match video {
            Some(v) if !v.is_empty() => (stubs::bytes_to_signal(&v), false),
            _ => (vec![0.0; samples], true),
        };
        let mut bundle = self.suite.bundle(&signal, caption, la as f64 / LATENT_RATE as f64, None).map_err(py_err)?;
        bundle.drop[0].drop_video = drop_video;
        bundle.drop[0].drop_sync = drop_video;
        let latent = flow::sample(&self.model, &bundle, steps, guidance, seed).map_err(py_err)?;
        let flat = latent.reshape(&[la, self.model.config.latent_dim]).map_err(py_err)?;
        let mut wave = self.suite.codec.decode(&flat).map_err(py_err)?;
        wave.resize(samples, 0.0);
        Ok(wave)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(path)?;
        self.model.store.save(std::io::BufWriter::new(f)).map_err(py_err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::open(path)?;
        self.model.store.load(std::io::BufReader::new(f)).map_err(py_err)
    }
}

/// Frame-wise orthonormal audio codec: 960 samples at 48 kHz per latent frame.
#[pyclass(name = "ToyCodec")]
pub struct PyToyCodec {
    codec: ToyCodec,
}

#[pymethods]
impl PyToyCodec {
    #[new]
    #[pyo3(signature = (latent_dim=128, seed=0))]
    fn new(latent_dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { codec: ToyCodec::new(latent_dim, seed).map_err(py_err)? })
    }

    fn encode(&self, wave: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let t = self.codec.encode(&wave, SAMPLE_RATE).map_err(py_err)?;
        Ok(t.data().chunks(t.dim(1)).map(<[f32]>::to_vec).collect())
    }

    fn decode(&self, latent: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let rows = latent.len();
        let flat: Vec<f32> = latent.into_iter().flatten().collect();
        let t = Tensor::new(flat, &[rows, self.codec.latent_dim]).map_err(py_err)?;
        self.codec.decode(&t).map_err(py_err)
    }
}

/// Curates every WAV under `root`; returns the manifest as JSON lines.
#[pyfunction]
#[pyo3(signature = (root, config=None))]
fn curate(root: PathBuf, config: Option<&str>) -> PyResult<String> {
    let cfg: PipelineConfig = from_toml(config)?;
    let m = curation::run_pipeline(&root, &cfg, &[]).map_err(py_err)?;
    m.to_jsonl().map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (wave, sample_rate=48000))]
fn effective_sample_rate(wave: Vec<f32>, sample_rate: u32) -> PyResult<f64> {
    curation::effective_sample_rate(&wave, sample_rate, &PipelineConfig::default()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (wave, sample_rate=48000))]
fn silence_ratio(wave: Vec<f32>, sample_rate: u32) -> PyResult<f64> {
    curation::silence_ratio(&wave, sample_rate, &PipelineConfig::default()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (wave, sample_rate=48000))]
fn estimate_snr(wave: Vec<f32>, sample_rate: u32) -> PyResult<f64> {
    curation::estimate_snr(&wave, sample_rate, &PipelineConfig::default()).map_err(py_err)
}

#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&matrix(a)?, &matrix(b)?).map_err(py_err)
}

#[pyfunction]
fn kl_divergence(p_logits: Vec<Vec<f64>>, q_logits: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::kl_divergence(&matrix(p_logits)?, &matrix(q_logits)?).map_err(py_err)
}

#[pyfunction]
fn inception_score(logits: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::inception_score(&matrix(logits)?).map_err(py_err)
}

/// Mean paired cosine and the indices of zero-norm pairs.
#[pyfunction]
fn cosine_alignment(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<(f64, Vec<usize>)> {
    let r = metrics::cosine_alignment(&matrix(a)?, &matrix(b)?).map_err(py_err)?;
    Ok((r.mean, r.zero_rows))
}

/// Alignment loss between hidden states and targets, both `[frames][dim]`.
#[pyfunction]
fn repa_loss(hidden: Vec<Vec<f32>>, target: Vec<Vec<f32>>) -> PyResult<f32> {
    let to3 = |rows: Vec<Vec<f32>>| -> PyResult<Tensor> {
        let (n, d) = (rows.len(), rows.first().map_or(0, Vec::len));
        Tensor::new(rows.into_iter().flatten().collect(), &[1, n, d]).map_err(py_err)
    };
    let (loss, _) = flow::repa_loss(&to3(hidden)?, &to3(target)?).map_err(py_err)?;
    loss.item().map_err(py_err)
}

#[pyfunction]
fn write_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    curation::write_wav_pcm16(path, &samples, sample_rate).map_err(py_err)
}

/// `(samples, sample_rate)` with channels averaged.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let a = curation::read_wav(path).map_err(py_err)?;
    Ok((a.samples, a.sample_rate))
}

#[pymodule]
fn foley_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add("LATENT_RATE", LATENT_RATE)?;
    m.add_class::<PyFoleyModel>()?;
    m.add_class::<PyToyCodec>()?;
    m.add_function(wrap_pyfunction!(curate, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_rate, m)?)?;
    m.add_function(wrap_pyfunction!(silence_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_snr, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(repa_loss, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    Ok(())
}
