//! Property checks shared by the tests, the CLI and the Python bindings:
//! finite-difference gradient check of the full pipeline, and translation
//! equivariance of the encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::encoder::{build_encoder, encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::normal;
use crate::pipeline::{Model, ModelConfig, MultimodalBatch, ToyLMConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub text_len: usize,
    /// Coordinates probed per parameter tensor.
    pub coords_per_tensor: usize,
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl GradcheckConfig {
    /// Toy five-stage encoder with live residual branches (layer scale 0.5),
    /// a 1x2 token grid, and a two-head LM of width 8.
    pub fn tiny() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    layer_scale_init: 0.5,
                    ..EncoderConfig::toy5()
                },
                lm: ToyLMConfig {
                    vocab_size: 16,
                    embed_dim: 8,
                    num_layers: 1,
                    heads: 2,
                    max_seq: 8,
                },
            },
            height: 64,
            width: 128,
            batch: 2,
            text_len: 4,
            coords_per_tensor: 3,
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_batch(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<MultimodalBatch<f64>> {
    let images = normal(rng, &[cfg.batch, 3, cfg.height, cfg.width], 1.0);
    let v = cfg.model.lm.vocab_size;
    let text: Vec<Vec<usize>> = (0..cfg.batch)
        .map(|_| (0..cfg.text_len).map(|_| rng.random_range(0..v)).collect())
        .collect();
    let mask = (0..cfg.batch)
        .map(|_| (0..cfg.text_len).map(|i| i > 0).collect())
        .collect();
    let (gh, gw) = cfg.model.encoder.grid(cfg.height, cfg.width);
    MultimodalBatch::new(images, text, mask, gh * gw)
}

fn store_mut<'a, T: Scalar>(model: &'a mut Model<T>, prefix: &str) -> &'a mut crate::params::ParamStore<T> {
    model
        .components_mut()
        .into_iter()
        .find(|(p, _)| *p == prefix)
        .map(|(_, s)| s)
        .expect("prefix comes from components()")
}

/// Central differences against the tape gradient of the masked LM loss, in
/// f64, over randomly chosen coordinates of every parameter tensor.
pub fn gradcheck_pipeline(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(&cfg.model, seed)?;
    for (_, store) in model.components_mut() {
        store.set_all_trainable(true);
    }
    let batch = random_batch(cfg, &mut rng)?;

    let mut g = Graph::new();
    let out = model.loss_on(&mut g, &batch)?;
    let grads = g.backward(out.loss)?;

    let mut probes = Vec::new();
    for (prefix, store) in model.components() {
        for (name, p) in store.iter() {
            let full = format!("{prefix}{name}");
            let analytic = grads
                .param(&full)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            for _ in 0..cfg.coords_per_tensor.min(p.value.numel()) {
                let i = rng.random_range(0..p.value.numel());
                probes.push((prefix, name.to_string(), i, analytic.data()[i]));
            }
        }
    }

    let mut report = GradcheckReport {
        seed,
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: probes.len(),
    };
    for (prefix, name, i, analytic) in probes {
        let mut eval = |delta: f64| -> Result<f64> {
            let orig = {
                let cell = &mut store_mut(&mut model, prefix).get_mut(&name)?.value.data_mut()[i];
                let orig = *cell;
                *cell = orig + delta;
                orig
            };
            let loss = model.lm_loss(&batch);
            store_mut(&mut model, prefix).get_mut(&name)?.value.data_mut()[i] = orig;
            loss
        };
        let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
        let err = relative_error(analytic, numeric, cfg.floor);
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = err;
            report.worst = format!("{prefix}{name}[{i}]");
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub max_abs_diff: f64,
    /// `(row, col)` in the shifted crop's grid.
    pub worst_cell: (usize, usize),
    pub margin: usize,
    pub shift_cells: usize,
    pub compared_cells: usize,
    pub grid: (usize, usize),
}

/// Encode two crops of one random canvas offset horizontally by `shift`
/// pixels (a multiple of the downsampling factor). Away from the left and
/// right edges, the shifted crop's cell `j` must equal the original crop's
/// cell `j + shift / D`.
pub fn equivariance_check(config: &EncoderConfig, seed: u64, shift: usize, height: usize, width: usize) -> Result<EquivarianceReport> {
    let d = config.downsampling_factor();
    if shift == 0 || !shift.is_multiple_of(d) {
        return Err(Error::NotMultiple { value: shift, factor: d });
    }
    let state = build_encoder::<f32>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let canvas: Tensor<f32> = normal(&mut rng, &[1, 3, height, width + shift], 1.0);
    let a = encode(&state, &canvas.crop_width(0, width)?)?;
    let b = encode(&state, &canvas.crop_width(shift, width)?)?;
    let (gh, gw) = (a.grid_h, a.grid_w);
    let s = shift / d;
    let m = config.border_margin();
    if gw < 2 * m + s + 1 {
        return Err(Error::InvalidArgument(format!(
            "grid width {gw} leaves no interior cells beyond a {m}-cell margin and a {s}-cell shift"
        )));
    }
    let c = a.channels();
    let mut report = EquivarianceReport {
        max_abs_diff: 0.0,
        worst_cell: (0, m),
        margin: m,
        shift_cells: s,
        compared_cells: 0,
        grid: (gh, gw),
    };
    for r in 0..gh {
        for j in m..gw - m - s {
            let ta = &a.tokens.data()[(r * gw + j + s) * c..][..c];
            let tb = &b.tokens.data()[(r * gw + j) * c..][..c];
            let diff = ta
                .iter()
                .zip(tb)
                .map(|(&x, &y)| (x.f64() - y.f64()).abs())
                .fold(0.0, f64::max);
            if diff > report.max_abs_diff {
                report.max_abs_diff = diff;
                report.worst_cell = (r, j);
            }
            report.compared_cells += 1;
        }
    }
    Ok(report)
}
