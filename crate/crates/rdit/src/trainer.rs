//! Deterministic training loop: adaptive-moment optimizer with decoupled
//! weight decay, EMA shadow weights, CSV metrics, and checkpointing.
//!
//! All randomness (batch selection, timesteps, noise, label dropout) flows
//! from one ChaCha stream stored in [`TrainState`], so a (seed, config,
//! data) triple fixes the whole parameter trajectory and a restored
//! checkpoint continues it bit-exactly.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Capture, Model};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::datakit::Dataset;
use crate::error::{RditError, Result};
use crate::flow::{forward_process, sample_time, TimeDist};
use crate::numerics::tensor::Tensor;
use crate::numerics::Tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[batch, channels, edge, edge]` in [-1, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct TrainState {
    pub exp: ExperimentConfig,
    pub model: Model<f32>,
    pub ema: Vec<Tensor<f32>>,
    pub opt_m: Vec<Tensor<f32>>,
    pub opt_v: Vec<Tensor<f32>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("params", &self.model.params.len())
            .finish_non_exhaustive()
    }
}

impl TrainState {
    pub fn new(exp: &ExperimentConfig) -> Result<Self> {
        exp.validate()?;
        Self::new_unchecked(exp)
    }

    /// Build a state without full config validation, so tests can probe
    /// degenerate hyperparameters (e.g. lr = 0).
    pub fn new_unchecked(exp: &ExperimentConfig) -> Result<Self> {
        let model = Model::<f32>::init(&exp.model, exp.train.seed)?;
        let ema = model.params.iter().map(|p| p.tensor.clone()).collect();
        let zeros = |m: &Model<f32>| {
            m.params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        let opt_m = zeros(&model);
        let opt_v = zeros(&model);
        let rng = ChaCha8Rng::seed_from_u64(exp.train.seed.wrapping_add(0x7261_6E64));
        Ok(TrainState { exp: exp.clone(), model, ema, opt_m, opt_v, step: 0, rng })
    }

    /// Uniformly draw the next training batch (with replacement).
    pub fn next_batch(&mut self, ds: &Dataset) -> Batch {
        let b = self.exp.train.batch;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..ds.len())).collect();
        let (images, labels) = ds.gather(&idx);
        Batch { images, labels }
    }

    /// Clone of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Model<f32> {
        let mut m = Model::<f32>::init(&self.exp.model, 0).expect("config validated");
        m.set_params(&self.ema).expect("shape-congruent EMA");
        m
    }

    /// One optimization step over `batch`. Deterministic given (state, batch).
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let cfg = self.exp.train.clone();
        let b = batch.labels.len();
        if b == 0 {
            return Err(RditError::Dataset("empty batch".into()));
        }
        if !batch.images.all_finite() {
            return Err(RditError::NonFinite("batch images".into()));
        }
        if batch.images.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(RditError::Dataset("batch images outside [-1, 1]".into()));
        }

        // Per-item draws, in a fixed order: t, dropout coin, noise.
        let dist = TimeDist::from_config(&cfg);
        let null = self.model.cfg.null_label();
        let item = batch.images.numel() / b;
        let mut ts = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let mut x_t_data = Vec::with_capacity(batch.images.numel());
        for i in 0..b {
            let t = sample_time(dist, &mut self.rng)?;
            let dropped = cfg.label_dropout > 0.0 && self.rng.gen::<f64>() < cfg.label_dropout;
            labels.push(if dropped { null } else { batch.labels[i] });
            let x = Tensor::new(
                batch.images.shape()[1..].to_vec(),
                batch.images.data()[i * item..(i + 1) * item].to_vec(),
            );
            let eps = Tensor::<f32>::randn(x.shape().to_vec(), 1.0, &mut self.rng);
            let x_t = forward_process(&x, &eps, t)?;
            x_t_data.extend_from_slice(x_t.data());
            ts.push(t);
        }
        let x_t = Tensor::new(batch.images.shape().to_vec(), x_t_data);

        // Forward/backward over grad_accum micro-batches.
        let accum = cfg.grad_accum.min(b);
        let chunk = b.div_ceil(accum);
        let mut grads: Vec<Tensor<f32>> = self
            .model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
            .collect();
        let mut loss_sum = 0.0f64;
        let mut start = 0usize;
        while start < b {
            let end = (start + chunk).min(b);
            let n = end - start;
            let slice_imgs = Tensor::new(
                {
                    let mut s = batch.images.shape().to_vec();
                    s[0] = n;
                    s
                },
                x_t.data()[start * item..end * item].to_vec(),
            );
            let target = Tensor::new(
                slice_imgs.shape().to_vec(),
                batch.images.data()[start * item..end * item].to_vec(),
            );
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape);
            let mut trace = None;
            let pred = self.model.forward_on(
                &mut tape,
                &vars,
                &slice_imgs,
                &ts[start..end],
                &labels[start..end],
                Capture::none(),
                &mut trace,
            )?;
            let loss = tape.mse(pred, &target);
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(RditError::NonFinite(format!(
                    "loss at step {} (micro-batch {start}..{end})",
                    self.step
                )));
            }
            loss_sum += lv * n as f64;
            let g = tape.backward(loss);
            let w = n as f32 / b as f32;
            for (i, v) in vars.iter().enumerate() {
                if let Some(gi) = g.get(*v) {
                    grads[i].axpy(w, gi);
                }
            }
            start = end;
        }
        let loss = loss_sum / b as f64;

        let mut sq = 0.0f64;
        for g in &grads {
            if !g.all_finite() {
                return Err(RditError::NonFinite(format!("gradient at step {}", self.step)));
            }
            sq += g.sum_sq() as f64;
        }
        let grad_norm = sq.sqrt();

        // Decoupled-weight-decay adaptive-moment update with linear warmup.
        self.step += 1;
        let lr = lr_at(&cfg, self.step);
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..grads.len() {
            let g = grads[i].data();
            let m = self.opt_m[i].data_mut();
            let v = self.opt_v[i].data_mut();
            let decay = self.model.params[i].decay;
            let p = self.model.params[i].tensor.data_mut();
            for j in 0..g.len() {
                let gj = g[j] as f64;
                let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
                let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bias1;
                let vhat = vj / bias2;
                let mut pj = p[j] as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS);
                if decay {
                    pj -= lr * cfg.weight_decay * pj;
                }
                p[j] = pj as f32;
            }
        }
        ema_update_params(&mut self.ema, &self.model, cfg.ema_decay)?;

        Ok(StepMetrics { step: self.step, loss, grad_norm, lr })
    }
}

/// Learning rate with linear warmup.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup == 0 {
        return cfg.lr;
    }
    cfg.lr * ((step as f64 / cfg.warmup as f64).min(1.0))
}

/// ema' = decay * ema + (1 - decay) * params, elementwise.
pub fn ema_update(ema: &mut [Tensor<f32>], params: &[Tensor<f32>], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(RditError::ConfigInvalid {
            field: "ema_decay".into(),
            message: "must be in [0, 1)".into(),
        });
    }
    if ema.len() != params.len() {
        return Err(RditError::shape("ema_update", format!("{}", ema.len()), format!("{}", params.len())));
    }
    let d = decay as f32;
    for (e, p) in ema.iter_mut().zip(params) {
        if e.shape() != p.shape() {
            return Err(RditError::shape(
                "ema_update",
                format!("{:?}", e.shape()),
                format!("{:?}", p.shape()),
            ));
        }
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = d * *ev + (1.0 - d) * pv;
        }
    }
    Ok(())
}

fn ema_update_params(ema: &mut [Tensor<f32>], model: &Model<f32>, decay: f64) -> Result<()> {
    let params: Vec<Tensor<f32>> = model.params.iter().map(|p| p.tensor.clone()).collect();
    ema_update(ema, &params, decay)
}

/// Append-mode CSV metrics writer with columns (step, loss, grad_norm, lr,
/// wall_ms).
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(file, "step,loss,grad_norm,lr,wall_ms")?;
        }
        Ok(MetricsWriter { file })
    }

    pub fn log(&mut self, m: &StepMetrics, wall_ms: f64) -> Result<()> {
        writeln!(
            self.file,
            "{},{:.6},{:.6},{:.8},{:.1}",
            m.step, m.loss, m.grad_norm, m.lr, wall_ms
        )?;
        Ok(())
    }
}

/// Run (or resume) the training loop for `exp.train.steps` total steps,
/// writing metrics and periodic checkpoints under `out_dir`.
pub fn run_training(
    state: &mut TrainState,
    ds: &Dataset,
    out_dir: &Path,
    quiet: bool,
) -> Result<Vec<StepMetrics>> {
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = MetricsWriter::open(&out_dir.join("metrics.csv"))?;
    let mut history = Vec::new();
    let total = state.exp.train.steps as u64;
    let every = state.exp.train.ckpt_every as u64;
    while state.step < total {
        let t0 = std::time::Instant::now();
        let batch = state.next_batch(ds);
        let m = state.train_step(&batch)?;
        metrics.log(&m, t0.elapsed().as_secs_f64() * 1e3)?;
        if !quiet && (m.step % 50 == 0 || m.step == 1) {
            eprintln!("step {:>6}  loss {:.5}  grad {:.4}  lr {:.2e}", m.step, m.loss, m.grad_norm, m.lr);
        }
        if m.step % every == 0 || m.step == total {
            crate::checkpoint::save_checkpoint(state, &out_dir.join(format!("ckpt_{:06}.rdit", m.step)))?;
            crate::checkpoint::save_checkpoint(state, &out_dir.join("last.rdit"))?;
        }
        history.push(m);
    }
    Ok(history)
}
