//! Python bindings: configuration, training, checkpoints, generation and
//! the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lvgan_core::cp_factor::{fit, CpFitConfig};
use lvgan_core::lvm::LatentSampler;
use lvgan_core::metrics::{perturbation_sweep, SweepConfig};
use lvgan_core::moments::MomentAccumulator;
use lvgan_core::nets::model::ImageGenerator;
use lvgan_core::runconfig::{parse_assignment, parse_entries, RunConfig};
use lvgan_core::tensor::Matrix;
use lvgan_core::trainer::{self, Trainer as CoreTrainer, TrainerState};
use lvgan_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::TrainingAborted { .. } | Error::NonFinite(_) | Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn run_config(text: &str, overrides: &[String]) -> PyResult<RunConfig> {
    let mut entries = parse_entries(text, "config").map_err(to_py)?;
    for (i, o) in overrides.iter().enumerate() {
        entries.push(parse_assignment(o, &format!("override #{}", i + 1)).map_err(to_py)?);
    }
    RunConfig::from_entries(&entries).map_err(to_py)
}

/// Resolved training configuration as JSON, from `key = value` text.
#[pyfunction]
#[pyo3(signature = (text, overrides = Vec::new()))]
fn resolve_config(text: &str, overrides: Vec<String>) -> PyResult<String> {
    let rc = run_config(text, &overrides)?;
    serde_json::to_string_pretty(&rc.train).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A generator snapshot loaded from a checkpoint.
#[pyclass(module = "lvgan")]
struct Generator {
    state: TrainerState,
}


#[pymethods]
impl Generator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: trainer::read_state(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.state.model.arch.latent_dim
    }

    #[getter]
    fn partitions(&self) -> Vec<(usize, usize)> {
        self.state.model.arch.partitions()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.state.model.arch.image;
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.state.iteration
    }

    /// Flattened CHW image in [-1, 1] for one code.
    fn generate(&self, latent: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.state.model.generate(&latent).map_err(to_py)?.data)
    }

    /// Binary PGM/PPM bytes for one code.
    fn generate_pnm<'py>(&self, py: Python<'py>, latent: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
        let img = self.state.model.generate(&latent).map_err(to_py)?;
        Ok(PyBytes::new(py, &img.to_pnm().map_err(to_py)?))
    }

    fn generate_batch(&self, codes: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.state.model.generate_batch(&matrix(codes)?).map_err(to_py)?))
    }

    /// Codes from the trained code distribution.
    fn sample_codes(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows(&self.state.sampler().sample_codes(n, &mut rng))
    }

    /// Per-element perturbation MAE and perceptual distances.
    #[pyo3(signature = (per_element = 10, seed = 0))]
    fn perturbation_sweep<'py>(&self, py: Python<'py>, per_element: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let probe = lvgan_core::metrics::PerceptualProbe::new(self.state.model.arch.image, 8, self.state.config.eval.probe_seed).map_err(to_py)?;
        let cfg = SweepConfig {
            per_element,
            range: 1.0,
            seed,
        };
        let r = perturbation_sweep(&self.state.model, &self.state.sampler(), &probe, &cfg).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("pairs", r.pairs)?;
        d.set_item("mean_mae", r.mean_mae)?;
        d.set_item("mean_perceptual", r.mean_perceptual)?;
        d.set_item("per_element_mae", r.per_element_mae)?;
        d.set_item("per_element_perceptual", r.per_element_perceptual)?;
        Ok(d)
    }
}

/// Training session over the configured dataset.
#[pyclass(module = "lvgan")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config_text, overrides = Vec::new()))]
    fn new(config_text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let rc = run_config(config_text, &overrides)?;
        Ok(Self {
            inner: CoreTrainer::new(rc.train).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTrainer::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    #[getter]
    fn tag(&self) -> String {
        self.inner.state.config.tag.clone()
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    /// One D-step and G-step; returns the logged losses.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.step().map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("iter", r.iteration)?;
        d.set_item("loss_gan_d", r.loss_gan_d)?;
        d.set_item("loss_gan_g", r.loss_gan_g)?;
        d.set_item("loss_l", r.loss_l)?;
        d.set_item("loss_c", r.loss_c)?;
        d.set_item("loss_s", r.loss_s)?;
        d.set_item("loss_m", r.loss_m)?;
        d.set_item("kappa", r.kappa)?;
        d.set_item("gamma_m", r.gamma_m)?;
        Ok(d)
    }

    /// Trains to the end of the schedule, writing logs and checkpoints.
    fn run(&mut self, out_dir: PathBuf) -> PyResult<()> {
        let fresh = self.inner.iteration() == 0;
        trainer::run(&mut self.inner, &out_dir, fresh).map(|_| ()).map_err(to_py)
    }

    fn evaluate_fid(&self, samples: usize) -> PyResult<f64> {
        self.inner.evaluate_fid(samples).map_err(to_py)
    }

    fn checkpoint_bytes<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.checkpoint_bytes().map_err(to_py)?))
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py)
    }

    fn generator(&self) -> Generator {
        Generator {
            state: self.inner.state.clone(),
        }
    }

    /// Latent mixing matrix of the current ICA fit, if any.
    fn mixing(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.state.lvm.as_ref().map(|l| rows(l.mixing()))
    }
}

/// Symmetric CP fit of the feature moments of `rows`.
#[pyfunction]
#[pyo3(signature = (data, rank, gamma_o = 0.1, steps = 2000, seed = 0))]
fn fit_cp<'py>(py: Python<'py>, data: Vec<Vec<f64>>, rank: usize, gamma_o: f64, steps: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix(data)?;
    let mut acc = MomentAccumulator::new(m.cols());
    acc.accumulate_rows(&m).map_err(to_py)?;
    let moments = acc.finalize().map_err(to_py)?;
    let cfg = CpFitConfig {
        rank,
        gamma_o,
        steps,
        seed,
        ..Default::default()
    };
    let rep = fit(&moments, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("lambda", rep.model.lambda.clone())?;
    d.set_item("factors", rep.model.factors.clone())?;
    d.set_item("loss", rep.final_loss)?;
    d.set_item("steps", rep.steps_taken)?;
    Ok(d)
}

/// Fréchet distance between Gaussian fits of two row sets.
#[pyfunction]
fn frechet_proxy(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    lvgan_core::metrics::frechet_proxy(&matrix(a)?, &matrix(b)?).map_err(to_py)
}

#[pymodule]
fn lvgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trainer>()?;
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cp, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_proxy, m)?)?;
    m.add("METRICS_HEADER", trainer::METRICS_HEADER)?;
    Ok(())
}
