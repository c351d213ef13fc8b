//! Flow matching with x-prediction: linear interpolant x_t = t*x + (1-t)*eps
//! (t = 1 is clean data), MSE loss on the predicted clean image, velocity
//! conversion, and a deterministic Euler ODE sampler with classifier-free
//! guidance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Capture, Model};
use crate::error::{RditError, Result};
use crate::numerics::tensor::{cast, Element, Tensor};

/// Clamp floor for (1 - t) in the velocity conversion.
pub const T_CLAMP: f64 = 1e-3;

/// One training example of the forward process.
#[derive(Clone, Debug)]
pub struct FlowSample<E: Element> {
    pub x: Tensor<E>,
    pub eps: Tensor<E>,
    pub t: f64,
    pub x_t: Tensor<E>,
}

/// Training-time distribution of t.
#[derive(Clone, Copy, Debug)]
pub enum TimeDist {
    Uniform,
    /// sigmoid(z) with z ~ Normal(mu, sigma).
    LogitNormal { mu: f64, sigma: f64 },
}

impl TimeDist {
    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        match cfg.time_dist {
            crate::config::TimeDist::Uniform => TimeDist::Uniform,
            crate::config::TimeDist::LogitNormal => TimeDist::LogitNormal {
                mu: cfg.logit_mu,
                sigma: cfg.logit_sigma,
            },
        }
    }
}

/// Draw one timestep in the open interval (0, 1).
pub fn sample_time<R: Rng>(dist: TimeDist, rng: &mut R) -> Result<f64> {
    match dist {
        TimeDist::Uniform => Ok(rng.gen_range(f64::EPSILON..1.0)),
        TimeDist::LogitNormal { mu, sigma } => {
            if sigma <= 0.0 {
                return Err(RditError::ConfigInvalid {
                    field: "logit_sigma".into(),
                    message: "must be positive".into(),
                });
            }
            let z: f64 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
            Ok(1.0 / (1.0 + (-z).exp()))
        }
    }
}

/// x_t = t*x + (1-t)*eps, exactly.
pub fn forward_process<E: Element>(x: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<Tensor<E>> {
    if x.shape() != eps.shape() {
        return Err(RditError::shape(
            "forward_process",
            format!("{:?}", x.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let te = cast::<E>(t);
    let one_minus = cast::<E>(1.0 - t);
    Ok(x.zip_map(eps, |xv, ev| te * xv + one_minus * ev))
}

pub fn make_flow_sample<E: Element>(x: &Tensor<E>, eps: &Tensor<E>, t: f64) -> Result<FlowSample<E>> {
    Ok(FlowSample { x: x.clone(), eps: eps.clone(), t, x_t: forward_process(x, eps, t)? })
}

/// Mean squared error over all pixels of the predicted clean image.
/// Auxiliary tokens never reach the head, so they cannot enter this loss.
pub fn xpred_loss<E: Element>(x_pred: &Tensor<E>, x: &Tensor<E>) -> Result<E> {
    if x_pred.shape() != x.shape() {
        return Err(RditError::shape(
            "xpred_loss",
            format!("{:?}", x.shape()),
            format!("{:?}", x_pred.shape()),
        ));
    }
    let n = cast::<E>(x.numel() as f64);
    let mut acc = E::zero();
    for (&p, &c) in x_pred.data().iter().zip(x.data()) {
        let d = p - c;
        acc = acc + d * d;
    }
    let loss = acc / n;
    if !loss.is_finite() {
        return Err(RditError::NonFinite("xpred_loss".into()));
    }
    Ok(loss)
}

/// v = (x_pred - x_t) / max(1 - t, T_CLAMP): the straight-line velocity
/// implied by the interpolant derivative dx_t/dt = x - eps.
pub fn velocity_from_xpred<E: Element>(x_pred: &Tensor<E>, x_t: &Tensor<E>, t: f64) -> Tensor<E> {
    let denom = cast::<E>((1.0 - t).max(T_CLAMP));
    x_pred.zip_map(x_t, |p, c| (p - c) / denom)
}

/// Anything that maps (x_t, t, labels) to a clean-image prediction.
pub trait Denoiser<E: Element> {
    fn predict_clean(&self, x_t: &Tensor<E>, t: f64, labels: &[usize]) -> Result<Tensor<E>>;
    /// (channels, image edge).
    fn image_shape(&self) -> (usize, usize);
    fn null_label(&self) -> usize;
}

impl<E: Element> Denoiser<E> for Model<E> {
    fn predict_clean(&self, x_t: &Tensor<E>, t: f64, labels: &[usize]) -> Result<Tensor<E>> {
        let ts = vec![t; labels.len()];
        let (pred, _) = self.predict(x_t, &ts, labels, Capture::none())?;
        Ok(pred)
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.cfg.channels, self.cfg.image)
    }

    fn null_label(&self) -> usize {
        self.cfg.null_label()
    }
}

/// Euler ODE sampler. Starts from Gaussian noise at t = 0 and integrates the
/// x-prediction velocity field to t = 1 in `steps` uniform steps.
///
/// With `guidance > 0` each step blends conditional and null predictions:
/// x_pred = x_pred(null) + guidance * (x_pred(label) - x_pred(null)).
/// The final sample is clipped to [-1, 1]; intermediate states are not.
pub fn euler_sample<E: Element, D: Denoiser<E>, R: Rng>(
    model: &D,
    labels: &[usize],
    steps: usize,
    guidance: f64,
    rng: &mut R,
) -> Result<Tensor<E>> {
    if steps == 0 {
        return Err(RditError::ConfigInvalid {
            field: "steps".into(),
            message: "must be >= 1".into(),
        });
    }
    if guidance < 0.0 {
        return Err(RditError::ConfigInvalid {
            field: "guidance".into(),
            message: "must be >= 0".into(),
        });
    }
    let (c, edge) = model.image_shape();
    let batch = labels.len();
    let mut x = Tensor::<E>::randn(vec![batch, c, edge, edge], 1.0, rng);
    let dt = cast::<E>(1.0 / steps as f64);
    let null_labels = vec![model.null_label(); batch];
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let x_pred = if guidance > 0.0 {
            let cond = model.predict_clean(&x, t, labels)?;
            let null = model.predict_clean(&x, t, &null_labels)?;
            let g = cast::<E>(guidance);
            null.zip_map(&cond, |n, cd| n + g * (cd - n))
        } else {
            model.predict_clean(&x, t, labels)?
        };
        let v = velocity_from_xpred(&x_pred, &x, t);
        x.axpy(dt, &v);
        if !x.all_finite() {
            return Err(RditError::NonFinite(format!("sampler state at step {k}")));
        }
    }
    Ok(x.map(|v| v.min(E::one()).max(-E::one())))
}
