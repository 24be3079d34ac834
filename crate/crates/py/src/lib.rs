//! Python bindings: attention masks, bound suites, retrieval data and the
//! small decoder with its trainer.

use std::path::PathBuf;

use gape_lab::attention::{attend, kv_cache_shapes as kv_shapes, AttentionInputs, GapeSetup, GateSource, MaskPath};
use gape_lab::gape::GateParams;
use gape_lab::model::{checkpoint, Capture, Metadata, ModelConfig, Network, ParamStore};
use gape_lab::niah::{generate, Regime};
use gape_lab::numerics::{Matrix, Rng};
use gape_lab::posenc::EncodingKind;
use gape_lab::theory::suites::{run_suite, Suite};
use gape_lab::theory::{effective_context_length as eff_len, TheoremConfig};
use gape_lab::train::{evaluate_extrapolation, metrics_csv, train as run_training, TrainConfig};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: gape_lab::Error) -> PyErr {
    match e {
        gape_lab::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = gape_lab::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn mask_path(s: &str) -> PyResult<MaskPath> {
    match s {
        "m" | "explicit" => Ok(MaskPath::ExplicitM),
        "mhat" | "distance" => Ok(MaskPath::ExplicitMHat),
        "fused" | "augmented" => Ok(MaskPath::FusedAugmented),
        _ => Err(PyValueError::new_err(format!("unknown mask path `{s}` (m|mhat|fused)"))),
    }
}

/// Causal attention weights of one head. `gate` is
/// `(w_l, b_l, w_g, b_g, gamma_raw)`; with it, `q` and `k` carry the
/// semantic coordinates only.
#[pyfunction]
#[pyo3(signature = (q, k, positions, pe="nope", head=0, gate=None, t=1024.0, path="m"))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn attention_weights(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    positions: Vec<usize>,
    pe: &str,
    head: usize,
    gate: Option<(Vec<f64>, f64, Vec<f64>, f64, f64)>,
    t: f64,
    path: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let q = matrix(q)?;
    let k = matrix(k)?;
    let len = q.rows();
    let mut kind: EncodingKind = parse(pe)?;
    if let EncodingKind::ALiBi { slopes } = &kind {
        if slopes.is_empty() {
            kind = EncodingKind::alibi(head + 1);
        }
    }
    let gape = gate.map(|(w_l, b_l, w_g, b_g, gamma_raw)| GapeSetup {
        params: GateParams { w_l, b_l, w_g, b_g, gamma_raw },
        t,
        source: GateSource::PreRotation,
    });
    let inputs = AttentionInputs { q, k, v: Matrix::zeros(len, 1), positions, kind, head, gape };
    let out = attend(&inputs, mask_path(path)?).map_err(to_py)?;
    Ok(out.weights.to_rows())
}

/// Runs a bound suite; returns `(name, trials, violations, worst_slack)`.
#[pyfunction]
#[pyo3(signature = (suite="all", trials=100, seed=0))]
fn verify(py: Python<'_>, suite: &str, trials: usize, seed: u64) -> PyResult<Vec<(String, usize, usize, f64)>> {
    let suite: Suite = parse(suite)?;
    let reports = py.detach(|| run_suite(suite, trials, seed)).map_err(to_py)?;
    Ok(reports.into_iter().map(|r| (r.name, r.trials, r.violations, r.worst_slack)).collect())
}

/// One retrieval sample: `(tokens, needle_positions, needle_digits, target)`.
#[pyfunction]
#[pyo3(signature = (length, regime="first", seed=0, index=0))]
#[allow(clippy::type_complexity)]
fn niah_sample(length: usize, regime: &str, seed: u64, index: u64) -> PyResult<(Vec<u32>, Vec<usize>, Vec<u8>, u8)> {
    let regime: Regime = parse(regime)?;
    let mut rng = Rng::new(seed).derive(index);
    let s = generate(length, regime, &mut rng, None).map_err(to_py)?;
    Ok((s.tokens, s.needle_positions, s.needle_digits, s.target))
}

#[pyfunction]
#[pyo3(signature = (s_max, gamma, g, t, p, unprotected=1))]
fn effective_context_length(s_max: f64, gamma: f64, g: f64, t: f64, p: f64, unprotected: usize) -> PyResult<f64> {
    let cfg = TheoremConfig { s_max, gamma, g, t, p, u_size: unprotected, ..TheoremConfig::default() };
    eff_len(&cfg).map_err(to_py)
}

/// `(k_shape, v_shape)`, each `[batch, heads, ctx_len, head_dim]`.
#[pyfunction]
#[pyo3(signature = (pe, gape, batch, ctx_len, heads, head_dim))]
fn kv_cache_shapes(
    pe: &str,
    gape: bool,
    batch: usize,
    ctx_len: usize,
    heads: usize,
    head_dim: usize,
) -> PyResult<([usize; 4], [usize; 4])> {
    let kind: EncodingKind = parse(pe)?;
    let s = kv_shapes(&kind, gape, batch, ctx_len, heads, head_dim).map_err(to_py)?;
    Ok((s.k, s.v))
}

#[pyclass(name = "Model", module = "gape_py")]
struct PyModel {
    cfg: ModelConfig,
    params: ParamStore,
    meta: Metadata,
}

impl PyModel {
    fn net(&self) -> PyResult<Network<f64>> {
        Network::new(&self.cfg, &self.params).map_err(to_py)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (pe="nope", gape=true, n_layer=2, n_head=2, d_model=64, t_train=256, seed=0))]
    fn new(pe: &str, gape: bool, n_layer: usize, n_head: usize, d_model: usize, t_train: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(n_layer, n_head, d_model, parse(pe)?, gape, t_train);
        cfg.validate().map_err(to_py)?;
        let params = ParamStore::init(&cfg, &mut Rng::new(seed)).map_err(to_py)?;
        Ok(PyModel { cfg, params, meta: Metadata::new() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params, meta) = checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel { cfg, params, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.cfg, &self.params, &self.meta).map_err(to_py)
    }

    #[getter]
    fn label(&self) -> String {
        self.cfg.label()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.n_elements()
    }

    #[getter]
    fn metadata(&self) -> Vec<(String, String)> {
        self.meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Logits over the ten digits at the last position.
    fn predict(&self, tokens: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(self.net()?.predict(&tokens).map_err(to_py)?.to_vec())
    }

    /// Full `[len, vocab]` logits.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.net()?.forward(&tokens, None).map_err(to_py)?.0.to_rows())
    }

    /// Attention entropy per layer, head and query row.
    fn entropy(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let (_, trace) = self.net()?.forward(&tokens, Some(Capture::NONE)).map_err(to_py)?;
        let trace = trace.expect("trace requested");
        Ok(trace.layers.into_iter().map(|l| l.into_iter().map(|h| h.entropy).collect()).collect())
    }

    /// `(l, g, gamma)` per layer and head; empty without the gate.
    #[allow(clippy::type_complexity)]
    fn gates(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<(Vec<f64>, Vec<f64>, f64)>>> {
        let (_, trace) = self.net()?.forward(&tokens, Some(Capture::NONE)).map_err(to_py)?;
        let trace = trace.expect("trace requested");
        Ok(trace
            .layers
            .into_iter()
            .map(|l| l.into_iter().filter_map(|h| h.gates.map(|g| (g.l, g.g, g.gamma))).collect())
            .collect())
    }

    /// `(length, multiplier, accuracy)` on fresh samples.
    #[pyo3(signature = (multipliers=vec![1, 2, 4], n_eval=500, regime=None, l_train=None, seed=0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        multipliers: Vec<usize>,
        n_eval: usize,
        regime: Option<&str>,
        l_train: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<(usize, usize, f64)>> {
        let regime: Regime = parse(regime.or(self.meta.get("regime").map(String::as_str)).unwrap_or("first"))?;
        let l_train = l_train.unwrap_or(self.cfg.t_train);
        let res = py
            .detach(|| evaluate_extrapolation(&self.cfg, &self.params, l_train, regime, &multipliers, n_eval, seed, false))
            .map_err(to_py)?;
        Ok(res.into_iter().map(|r| (r.length, r.multiplier, r.accuracy)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, layers={}, heads={}, d_model={}, params={})",
            self.cfg.label(),
            self.cfg.n_layer,
            self.cfg.n_head,
            self.cfg.d_model,
            self.params.n_elements()
        )
    }
}

/// Trains a model on the retrieval task; returns `(model, metrics_csv)`.
#[pyfunction]
#[pyo3(signature = (pe="nope", gape=true, regime="first", l_train=256, steps=1000, batch=32, lr=1e-3, lr_min=1e-4, warmup=50, val_every=100, val_size=256, d_model=64, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    pe: &str,
    gape: bool,
    regime: &str,
    l_train: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    lr_min: f64,
    warmup: usize,
    val_every: usize,
    val_size: usize,
    d_model: usize,
    seed: u64,
) -> PyResult<(PyModel, String)> {
    let model = ModelConfig::new(2, 2, d_model, parse(pe)?, gape, l_train);
    let cfg = TrainConfig {
        steps_max: steps,
        batch,
        lr,
        lr_min,
        warmup,
        val_every,
        val_size,
        seed,
        l_train,
        regime: parse(regime)?,
        ..TrainConfig::default()
    };
    let outcome = py.detach(|| run_training(&model, &cfg, |_| {})).map_err(to_py)?;
    let csv = metrics_csv(&outcome.metrics, model.n_layer, &cfg);
    let mut meta = Metadata::new();
    meta.insert("regime".into(), cfg.regime.to_string());
    meta.insert("l_train".into(), l_train.to_string());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("steps_run".into(), outcome.steps_run.to_string());
    Ok((PyModel { cfg: model, params: outcome.params, meta }, csv))
}

#[pymodule]
pub fn gape_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(niah_sample, m)?)?;
    m.add_function(wrap_pyfunction!(effective_context_length, m)?)?;
    m.add_function(wrap_pyfunction!(kv_cache_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
