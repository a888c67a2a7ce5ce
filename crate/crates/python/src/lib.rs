//! Python bindings: signal utilities, front-ends, the two-branch encoder and
//! the staged pipeline. Audio crosses the boundary as lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fatlab::asr::{self, EvalReport, Vocab};
use fatlab::audio::{self, Waveform};
use fatlab::encoder::{EncoderConfig, FusionConfig, FusionVariant, Placement};
use fatlab::frontends::{self, Family, FrontendSpec};
use fatlab::pipeline::{self, RunConfig, Stage, System};
use fatlab::targets::{self, FeatureSequence, KMeansConfig, MfccConfig};
use fatlab::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn wave(samples: Vec<f64>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(py_err)
}

fn rows(f: &FeatureSequence) -> Vec<Vec<f64>> {
    f.data.chunks_exact(f.dim.max(1)).map(<[f64]>::to_vec).collect()
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must be non-empty and of equal length"));
    }
    Ok((rows.concat(), dim))
}

fn parse_fusion(variant: &str, placement: &str) -> PyResult<FusionConfig> {
    let v = match variant.to_ascii_uppercase().as_str() {
        "OA" => FusionVariant::Oa,
        "SF" => FusionVariant::Sf,
        "DA" => FusionVariant::Da,
        _ => return Err(PyValueError::new_err(format!("unknown fusion variant {variant:?}"))),
    };
    let p = match placement.to_ascii_lowercase().as_str() {
        "first" => Placement::First,
        "last" => Placement::Last,
        "all" => Placement::All,
        _ => return Err(PyValueError::new_err(format!("unknown placement {placement:?}"))),
    };
    Ok(FusionConfig::new(v, p))
}

/// Mixes `noise` into `clean` at `snr_db`; returns (mixture, noise gain).
#[pyfunction]
#[pyo3(signature = (clean, noise, snr_db, sample_rate = 16000))]
fn mix_at_snr(clean: Vec<f64>, noise: Vec<f64>, snr_db: f64, sample_rate: u32) -> PyResult<(Vec<f64>, f64)> {
    let (m, gain) = audio::mix_at_snr(&wave(clean, sample_rate)?, &wave(noise, sample_rate)?, snr_db).map_err(py_err)?;
    Ok((m.into_samples(), gain))
}

#[pyfunction]
fn si_snr(estimate: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    frontends::si_snr(&estimate, &reference).map_err(py_err)
}

/// Word error counts of `hypothesis` against `reference` (token lists).
#[pyfunction]
fn wer<'py>(py: Python<'py>, reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let c = asr::wer(&reference, &hypothesis);
    let d = PyDict::new(py);
    d.set_item("wer", c.wer())?;
    d.set_item("sub", c.sub)?;
    d.set_item("del", c.del)?;
    d.set_item("ins", c.ins)?;
    d.set_item("ref_words", c.ref_words)?;
    Ok(d)
}

/// Mean- and variance-normalised MFCCs, one row per frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000))]
fn mfcc(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let cfg = MfccConfig {
        sample_rate,
        ..MfccConfig::default()
    };
    let f = targets::mfcc(&wave(samples, sample_rate)?, &cfg).map_err(py_err)?;
    Ok(rows(&f))
}

/// Parameters a fusion configuration adds to an encoder.
#[pyfunction]
fn fusion_params(variant: &str, placement: &str, num_blocks: usize, dim: usize) -> PyResult<usize> {
    Ok(parse_fusion(variant, placement)?.expected_params(num_blocks, dim))
}

#[pyclass(frozen, module = "pyfatlab")]
struct Codebook {
    inner: targets::Codebook,
}

#[pymethods]
impl Codebook {
    #[staticmethod]
    #[pyo3(signature = (rows, k, seed = 0, max_iters = 100))]
    fn fit(rows: Vec<Vec<f64>>, k: usize, seed: u64, max_iters: usize) -> PyResult<Self> {
        let (data, dim) = flatten(&rows)?;
        let inner = targets::kmeans_fit(&data, dim, &KMeansConfig { k, max_iters, seed }, "python").map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn inertia_history(&self) -> Vec<f64> {
        self.inner.inertia_history.clone()
    }

    #[getter]
    fn centroids(&self) -> Vec<Vec<f64>> {
        self.inner
            .centroids
            .data()
            .chunks_exact(self.inner.dim())
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn assign(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
        let (data, dim) = flatten(&rows)?;
        let f = FeatureSequence::new(rows.len(), dim, data, 0.0).map_err(py_err)?;
        targets::assign(&f, &self.inner).map_err(py_err)
    }
}

/// Seeded bank of synthetic noise clips.
#[pyclass(frozen, module = "pyfatlab")]
struct NoiseBank {
    inner: audio::NoiseBank,
}

#[pymethods]
impl NoiseBank {
    #[new]
    #[pyo3(signature = (count = 4, seconds = 2.0, seed = 0, sample_rate = 16000))]
    fn new(count: usize, seconds: f64, seed: u64, sample_rate: u32) -> PyResult<Self> {
        let inner = audio::NoiseBank::synthetic(count, seconds, sample_rate, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Mixes a random clip at an SNR drawn from `[snr_low, snr_high]`.
    /// Returns the mixture and the clip id, offset and SNR used.
    #[pyo3(signature = (clean, snr_low, snr_high, seed = 0, sample_rate = 16000))]
    fn mix<'py>(
        &self,
        py: Python<'py>,
        clean: Vec<f64>,
        snr_low: f64,
        snr_high: f64,
        seed: u64,
        sample_rate: u32,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
        let mut rng = fatlab::rng::stream(seed, &[]);
        let (m, rec) = self
            .inner
            .mix(&wave(clean, sample_rate)?, [snr_low, snr_high], &mut rng)
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("noise_id", rec.noise_id)?;
        d.set_item("noise_offset", rec.noise_offset)?;
        d.set_item("snr_db", rec.snr_db)?;
        d.set_item("gain", rec.gain)?;
        d.set_item("clip_scale", rec.clip_scale)?;
        Ok((m.into_samples(), d))
    }
}

/// A speech enhancement front-end, freshly initialised or loaded.
#[pyclass(frozen, module = "pyfatlab")]
struct Frontend {
    inner: frontends::Frontend,
}

#[pymethods]
impl Frontend {
    /// `family` is `time_domain`, `tf_domain` or `identity`.
    #[new]
    #[pyo3(signature = (id, family, seed = 0))]
    fn new(id: String, family: &str, seed: u64) -> PyResult<Self> {
        let family = match family {
            "time_domain" => Family::TimeDomain,
            "tf_domain" => Family::TfDomain,
            "identity" => {
                return Ok(Self {
                    inner: frontends::Frontend::identity(),
                })
            }
            _ => return Err(PyValueError::new_err(format!("unknown family {family:?}"))),
        };
        let inner = frontends::Frontend::new(FrontendSpec::new(id, family, seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf, id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: frontends::Frontend::load(&dir, id).map_err(py_err)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[pyo3(signature = (noisy, sample_rate = 16000))]
    fn enhance(&self, py: Python<'_>, noisy: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
        let w = wave(noisy, sample_rate)?;
        let out = py.detach(|| self.inner.enhance(&w)).map_err(py_err)?;
        Ok(out.into_samples())
    }
}

/// Two-branch masked-prediction encoder.
#[pyclass(frozen, module = "pyfatlab")]
struct SslModel {
    inner: fatlab::encoder::SslModel,
    vocab: Option<Vocab>,
}

#[pymethods]
impl SslModel {
    /// `system` is `baseline`, `imst` or a fusion label such as `OA_first`.
    /// The encoder uses its default desk-scale shape.
    #[new]
    #[pyo3(signature = (system = "baseline", seed = 0))]
    fn new(system: &str, seed: u64) -> PyResult<Self> {
        let fusion = System::parse(system).map_err(py_err)?.fusion();
        let inner = fatlab::encoder::SslModel::new(EncoderConfig::default(), fusion, seed).map_err(py_err)?;
        Ok(Self { inner, vocab: None })
    }

    /// Loads a checkpoint from its path stem (without extension).
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        let (inner, side) = fatlab::encoder::SslModel::load(&stem).map_err(py_err)?;
        let vocab = side.ctc_vocab.map(Vocab::new).transpose().map_err(py_err)?;
        Ok(Self { inner, vocab })
    }

    #[getter]
    fn fusion(&self) -> Option<String> {
        self.inner.fusion.map(|f| f.label())
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store.num_scalars()
    }

    #[getter]
    fn fusion_param_count(&self) -> usize {
        self.inner.fusion_param_count()
    }

    /// Encoder frames produced for `samples` input samples.
    fn frames(&self, samples: usize) -> PyResult<usize> {
        self.inner.frames(samples).map_err(py_err)
    }

    /// Hidden states after block `layer`, one row per frame.
    fn extract_layer(&self, py: Python<'_>, samples: Vec<f64>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let f = py.detach(|| self.inner.extract_layer(&samples, layer)).map_err(py_err)?;
        Ok(rows(&f))
    }

    /// Greedy CTC transcript. `aux` defaults to `main`; pass the unenhanced
    /// audio there to use the second branch.
    #[pyo3(signature = (main, aux = None))]
    fn transcribe(&self, py: Python<'_>, main: Vec<f64>, aux: Option<Vec<f64>>) -> PyResult<Vec<String>> {
        let vocab = self
            .vocab
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no CTC head; load a fine-tuned checkpoint"))?;
        let aux = aux.unwrap_or_else(|| main.clone());
        py.detach(|| asr::transcribe(&self.inner, vocab, &main, &aux)).map_err(py_err)
    }
}

/// A staged, resumable experiment run.
#[pyclass(frozen, module = "pyfatlab")]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config, force = false))]
    fn new(config: PathBuf, force: bool) -> PyResult<Self> {
        let cfg = RunConfig::load(&config).map_err(py_err)?;
        Ok(Self {
            inner: pipeline::Pipeline::new(cfg).force(force),
        })
    }

    #[getter]
    fn dir(&self) -> PathBuf {
        self.inner.dir().to_path_buf()
    }

    fn resolved_config(&self) -> PyResult<String> {
        self.inner.config().to_toml().map_err(py_err)
    }

    /// `(unit, status)` pairs for `stage`, without running anything.
    fn plan(&self, stage: &str) -> PyResult<Vec<(String, String)>> {
        let stage = parse_stage(stage)?;
        let plan = self.inner.plan(&[stage]).map_err(py_err)?;
        Ok(plan
            .into_iter()
            .flat_map(|(_, lines)| lines)
            .map(|l| {
                let status = match l.status {
                    pipeline::UnitStatus::Current => "current".to_string(),
                    pipeline::UnitStatus::Pending => "pending".to_string(),
                    pipeline::UnitStatus::Blocked { needs } => format!("blocked:{needs}"),
                };
                (l.unit, status)
            })
            .collect())
    }

    /// Runs one stage; returns the names of the units that ran.
    fn run_stage(&self, py: Python<'_>, stage: &str) -> PyResult<Vec<String>> {
        let stage = parse_stage(stage)?;
        let s = py.detach(|| self.inner.run_stage(stage)).map_err(py_err)?;
        Ok(s.ran)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        let all = py.detach(|| self.inner.run_all()).map_err(py_err)?;
        Ok(all.into_iter().flat_map(|s| s.ran).collect())
    }

    /// Rows of the evaluation report as dicts; absent cells have `wer=None`.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let path = self.inner.dir().join("report/eval.csv");
        let text = std::fs::read_to_string(&path).map_err(|source| py_err(Error::Io { path, source }))?;
        let report = EvalReport::from_csv(&text).map_err(py_err)?;
        report
            .cells
            .iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("system", &c.system)?;
                d.set_item("frontend", &c.frontend)?;
                d.set_item("seen", c.frontend_seen)?;
                d.set_item("band", c.band.label())?;
                d.set_item("utts", c.utts)?;
                d.set_item("wer", c.wer())?;
                Ok(d)
            })
            .collect()
    }
}

fn parse_stage(s: &str) -> PyResult<Stage> {
    Stage::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown stage {s:?}")))
}

#[pymodule]
fn pyfatlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_params, m)?)?;
    m.add_class::<Codebook>()?;
    m.add_class::<NoiseBank>()?;
    m.add_class::<Frontend>()?;
    m.add_class::<SslModel>()?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
