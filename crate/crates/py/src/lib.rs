//! Python bindings. Tensors cross the boundary as flat `list[float]` plus a
//! shape, so the module has no numpy dependency.

use std::path::PathBuf;

use convllava_core::analysis::{self, EncoderKind, FlopsModel};
use convllava_core::checkpoint;
use convllava_core::cli::resolve_encoder;
use convllava_core::encoder::{self, EncoderConfig, EncoderState};
use convllava_core::pipeline::ENCODER_PREFIX;
use convllava_core::preprocess::{self as pre, PreprocessConfig, ResizeMode};
use convllava_core::trainer;
use convllava_core::verify::{self, GradcheckConfig};
use convllava_core::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape { .. }
        | Error::InvalidArgument(_)
        | Error::InputTooSmall { .. }
        | Error::NotMultiple { .. }
        | Error::Config(_)
        | Error::UnknownParameter(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for convllava_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Visual tokens for an `height x width` input of the given encoder kind.
#[pyfunction]
fn token_count(kind: &str, height: usize, width: usize) -> PyResult<u64> {
    let kind: EncoderKind = kind.parse().py()?;
    analysis::token_count(kind, height, width).py()
}

/// Encoder, LLM-prefill and total FLOPs at `height x width`.
#[pyfunction]
fn flops<'py>(py: Python<'py>, kind: &str, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let kind: EncoderKind = kind.parse().py()?;
    let b = analysis::lmm_total_flops(&FlopsModel::new(kind), height, width).py()?;
    let d = PyDict::new(py);
    d.set_item("tokens", b.tokens)?;
    d.set_item("encoder", b.encoder)?;
    d.set_item("llm_prefill", b.llm_prefill)?;
    d.set_item("total", b.total)?;
    Ok(d)
}

/// The analysis CSV for square resolutions.
#[pyfunction]
fn curves_csv(kinds: Vec<String>, resolutions: Vec<usize>) -> PyResult<String> {
    let kinds = kinds.iter().map(|k| k.parse()).collect::<convllava_core::Result<Vec<EncoderKind>>>().py()?;
    analysis::emit_curves(&kinds, &resolutions).py()
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, peak_lr, warmup_ratio=0.03))]
fn cosine_lr(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> f64 {
    trainer::cosine_lr(step, total_steps, peak_lr, warmup_ratio)
}

/// Load a P6 image and preprocess it; returns `(shape, data)`.
#[pyfunction]
#[pyo3(signature = (path, res, mode="square", factor=64))]
fn preprocess(path: PathBuf, res: usize, mode: &str, factor: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let mode: ResizeMode = mode.parse().py()?;
    let img = pre::load_ppm(&path).py()?;
    let t = pre::preprocess(&img, &PreprocessConfig::new(mode, res, factor)).py()?;
    Ok((t.shape().to_vec(), t.data().to_vec()))
}

/// Checkpoint entries as `(name, dtype, shape)` in name order.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<Vec<(String, String, Vec<usize>)>> {
    let ck = checkpoint::load(&path).py()?;
    Ok(ck
        .iter()
        .map(|(k, v)| (k.clone(), format!("{:?}", v.dtype()).to_lowercase(), v.shape().to_vec()))
        .collect())
}

/// Worst relative error of the f64 pipeline gradient check.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradcheck(seed: u64) -> PyResult<f64> {
    Ok(verify::gradcheck_pipeline(&GradcheckConfig::tiny(), seed).py()?.max_rel_err)
}

/// Largest interior difference after shifting the crop by `shift` pixels.
#[pyfunction]
#[pyo3(signature = (config="toy5", seed=0, shift=64))]
fn equivariance(config: &str, seed: u64, shift: usize) -> PyResult<f64> {
    let cfg = resolve_encoder(config).py()?;
    let d = cfg.downsampling_factor();
    let width = d * (2 * cfg.border_margin() + shift / d + 4);
    Ok(verify::equivariance_check(&cfg, seed, shift, d, width).py()?.max_abs_diff)
}

/// A randomly initialized (or checkpoint-loaded) ConvNeXt encoder.
#[pyclass(module = "convllava")]
struct Encoder {
    state: EncoderState<f32>,
}

#[pymethods]
impl Encoder {
    #[new]
    #[pyo3(signature = (config="toy5", seed=0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg: EncoderConfig = resolve_encoder(config).py()?;
        Ok(Encoder {
            state: encoder::build_encoder(&cfg, seed).py()?,
        })
    }

    #[getter]
    fn factor(&self) -> usize {
        self.state.config.downsampling_factor()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.state.config.out_channels()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.state.params.numel()
    }

    /// Replace the weights from a checkpoint with bare or `encoder.` names.
    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        let ck = checkpoint::load(&path).py()?;
        let prefixed = ck.keys().any(|k| k.starts_with(ENCODER_PREFIX));
        let weights = ck
            .iter()
            .filter_map(|(k, v)| {
                let name = if prefixed { k.strip_prefix(ENCODER_PREFIX)? } else { k };
                Some((name.to_string(), v.to::<f32>()))
            })
            .collect();
        self.state.params.assign_all(&weights).py()
    }

    /// Encode a `[1, 3, H, W]` image given flat; returns
    /// `(tokens, grid_h, grid_w)` with tokens flat `[grid_h * grid_w * C]`.
    fn encode(&self, py: Python<'_>, data: Vec<f32>, height: usize, width: usize) -> PyResult<(Vec<f32>, usize, usize)> {
        let x = Tensor::new(vec![1, 3, height, width], data).py()?;
        let t = py.detach(|| encoder::encode(&self.state, &x)).py()?;
        Ok((t.tokens.data().to_vec(), t.grid_h, t.grid_w))
    }

    fn __repr__(&self) -> String {
        let c = &self.state.config;
        format!(
            "Encoder(stages={}, factor={}, channels={}, params={})",
            c.num_stages(),
            c.downsampling_factor(),
            c.out_channels(),
            self.state.params.numel()
        )
    }
}

#[pymodule]
fn convllava(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(token_count, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(curves_csv, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(equivariance, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_become_value_errors() {
        Python::initialize();
        Python::attach(|py| {
            let e = token_count("vit", 100, 100).unwrap_err();
            assert!(e.is_instance_of::<PyValueError>(py));
            let e = py_err(Error::NanGradient("w".into()));
            assert!(e.is_instance_of::<PyRuntimeError>(py));
        });
    }

    #[test]
    fn encoder_class_round_trip() {
        Python::initialize();
        let enc = Encoder::new("toy4", 0).unwrap();
        let (tokens, gh, gw) = Python::attach(|py| enc.encode(py, vec![0.0; 3 * 64 * 96], 64, 96)).unwrap();
        assert_eq!((gh, gw), (2, 3));
        assert_eq!(tokens.len(), 6 * enc.channels());
    }
}
