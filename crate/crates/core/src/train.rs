//! AdamW training on synthetic retrieval data and length-extrapolation
//! evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::model::{gate_means, ModelConfig, Network, ParamStore, Scalar};
use crate::niah::{decode_target, generate_batch, Regime};
use crate::numerics::Rng;
use crate::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;
pub const EARLY_STOP_PATIENCE: usize = 3;
/// Samples of the validation set used for the gate columns of the log.
pub const GATE_PROBE_SAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps_max: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub warmup: usize,
    pub val_every: usize,
    pub val_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub l_train: usize,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_max: 5000,
            batch: 64,
            lr: 3e-4,
            lr_min: 3e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: ADAM_EPS,
            grad_clip: 1.0,
            warmup: 100,
            val_every: 100,
            val_size: 1000,
            early_stop_patience: EARLY_STOP_PATIENCE,
            seed: 0,
            l_train: 256,
            regime: Regime::First,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min > 0.0 && self.lr >= self.lr_min) {
            return bad(format!("need lr ≥ lr_min > 0 (got {}, {})", self.lr, self.lr_min));
        }
        if self.batch == 0 || self.steps_max == 0 || self.val_every == 0 || self.val_size == 0 {
            return bad("steps, batch, val_every and val_size must be positive".into());
        }
        if self.warmup > self.steps_max {
            return bad(format!("warmup {} exceeds steps_max {}", self.warmup, self.steps_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay non-negative".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive".into());
        }
        Ok(())
    }

    /// Linear warmup from 0 to `lr`, then cosine decay to `lr_min` at `steps_max`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        let span = (self.steps_max - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Matrices are decayed; biases, norms and all gate parameters are not.
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.params.iter().map(|p| p.shape.len() >= 2 && !p.is_gape()).collect(),
            t: 0,
        }
    }

    pub fn decays(&self, index: usize) -> bool {
        self.decay[index]
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                if self.decay[i] {
                    *x -= lr * self.weight_decay * *x;
                }
                *x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous validation.
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    /// Per layer `(ḡ, l̄, Γ̄)` on the probe batch; empty without the gate.
    pub gates: Vec<(f64, f64, f64)>,
}

pub fn metrics_header(n_layer: usize, cfg: &TrainConfig) -> String {
    let mut s = format!("# adamw_eps={}\n# early_stop_patience={}\n", cfg.eps, cfg.early_stop_patience);
    s.push_str("step,lr,train_loss,val_acc,val_loss");
    for l in 0..n_layer {
        let _ = write!(s, ",g_mean_l{l},l_mean_l{l},gamma_l{l}");
    }
    s.push('\n');
    s
}

pub fn metrics_row(row: &MetricsRow, n_layer: usize) -> String {
    let mut s = format!("{},{:.6e},{:.6},{:.4},{:.6}", row.step, row.lr, row.train_loss, row.val_acc, row.val_loss);
    for l in 0..n_layer {
        match row.gates.get(l) {
            Some((g, lm, gamma)) => {
                let _ = write!(s, ",{g:.6},{lm:.6},{gamma:.6}");
            }
            None => s.push_str(",,,"),
        }
    }
    s.push('\n');
    s
}

pub fn metrics_csv(rows: &[MetricsRow], n_layer: usize, cfg: &TrainConfig) -> String {
    let mut s = metrics_header(n_layer, cfg);
    for r in rows {
        s.push_str(&metrics_row(r, n_layer));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub metrics: Vec<MetricsRow>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Seeds for initialisation, the training stream and the validation set.
pub fn stream_seeds(seed: u64) -> (u64, u64, u64) {
    (Rng::child_seed(seed, 0), Rng::child_seed(seed, 1), Rng::child_seed(seed, 2))
}

/// Accuracy and mean loss of `net` on `samples`.
pub fn accuracy<F: Scalar>(net: &Network<F>, samples: &[crate::niah::NiahSample]) -> Result<(usize, f64)> {
    let per: Vec<(bool, f64)> = samples
        .par_iter()
        .map(|s| {
            let logits = net.predict(&s.tokens)?;
            let (_, ok) = decode_target(s, &logits)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            Ok((ok, lse - logits[s.target as usize]))
        })
        .collect::<Result<_>>()?;
    let correct = per.iter().filter(|(ok, _)| *ok).count();
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / per.len().max(1) as f64;
    Ok((correct, loss))
}

/// Trains from a fresh initialisation. `on_validation` sees every log row as
/// it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_validation: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let (init_seed, data_seed, val_seed) = stream_seeds(cfg.seed);
    let mut params = ParamStore::init(model_cfg, &mut Rng::new(init_seed))?;
    let val = generate_batch(cfg.l_train, cfg.regime, val_seed, 0, cfg.val_size)?;
    let probe = &val[..GATE_PROBE_SAMPLES.min(val.len())];
    let mut opt = AdamW::new(&params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut streak = 0usize;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut steps_run = 0;
    let mut stopped_early = false;
    for step in 0..cfg.steps_max {
        let batch = generate_batch(cfg.l_train, cfg.regime, data_seed, (step * cfg.batch) as u64, cfg.batch)?;
        let net = Network::<f32>::new(model_cfg, &params)?;
        let (loss, mut grads, _) = net.batch_loss_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("training loss {loss}") });
        }
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("gradient norm {norm}") });
        }
        let lr = cfg.lr_at(step + 1);
        opt.step(&mut params, &grads, lr);
        loss_sum += loss;
        loss_n += 1;
        steps_run = step + 1;

        if steps_run % cfg.val_every == 0 || steps_run == cfg.steps_max {
            let net = Network::<f32>::new(model_cfg, &params)?;
            let (correct, val_loss) = accuracy(&net, &val)?;
            let row = MetricsRow {
                step: steps_run,
                lr,
                train_loss: loss_sum / loss_n as f64,
                val_acc: correct as f64 / val.len() as f64,
                val_loss,
                gates: gate_means(&net, probe)?,
            };
            on_validation(&row);
            loss_sum = 0.0;
            loss_n = 0;
            streak = if correct == val.len() { streak + 1 } else { 0 };
            metrics.push(row);
            if streak >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { params, metrics, steps_run, stopped_early })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub length: usize,
    pub multiplier: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub n_eval: usize,
    /// Mean attention entropy per layer, if requested.
    pub mean_entropy_per_layer: Vec<f64>,
}

/// Seed of the held-out set at a given multiplier.
pub fn eval_seed(seed: u64, multiplier: usize) -> u64 {
    Rng::child_seed(Rng::child_seed(seed, 3), multiplier as u64)
}

/// Accuracy on fresh samples at `multiplier × l_train` for each multiplier,
/// with the needle count recomputed from the length.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_extrapolation(
    model_cfg: &ModelConfig,
    params: &ParamStore,
    l_train: usize,
    regime: Regime,
    multipliers: &[usize],
    n_eval: usize,
    seed: u64,
    with_entropy: bool,
) -> Result<Vec<EvalResult>> {
    let net = Network::<f32>::new(model_cfg, params)?;
    let mut out = Vec::with_capacity(multipliers.len());
    for &mult in multipliers {
        if mult == 0 || n_eval == 0 {
            return Err(Error::InvalidArgument("multipliers and n_eval must be positive".into()));
        }
        let length = l_train * mult;
        let samples = generate_batch(length, regime, eval_seed(seed, mult), 0, n_eval)?;
        let (correct, _) = accuracy(&net, &samples)?;
        let mean_entropy_per_layer = if with_entropy {
            crate::analysis::layer_entropy_means(&net, &samples)?
        } else {
            Vec::new()
        };
        out.push(EvalResult {
            length,
            multiplier: mult,
            accuracy: correct as f64 / n_eval as f64,
            correct,
            n_eval,
            mean_entropy_per_layer,
        });
    }
    Ok(out)
}

pub fn eval_csv(results: &[EvalResult]) -> String {
    let layers = results.iter().map(|r| r.mean_entropy_per_layer.len()).max().unwrap_or(0);
    let mut s = String::from("length,multiplier,n_eval,correct,accuracy");
    for l in 0..layers {
        let _ = write!(s, ",entropy_l{l}");
    }
    s.push('\n');
    for r in results {
        let _ = write!(s, "{},{},{},{},{:.4}", r.length, r.multiplier, r.n_eval, r.correct, r.accuracy);
        for l in 0..layers {
            match r.mean_entropy_per_layer.get(l) {
                Some(h) => {
                    let _ = write!(s, ",{h:.6}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}
