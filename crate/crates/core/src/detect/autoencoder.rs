//! Single-bottleneck feedforward autoencoder over residual windows.
//!
//! `W -> B (tanh) -> W (linear)`, trained by full-batch gradient descent on
//! mean squared reconstruction error. The step size is halved whenever a
//! step would raise the loss, so the accepted loss sequence never increases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeArch {
    pub window: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for AeArch {
    fn default() -> Self {
        AeArch {
            window: 28,
            bottleneck: 4,
            epochs: 500,
            step_size: 0.05,
            seed: 0,
        }
    }
}

/// Quantile of stable reconstruction errors used as the vote threshold.
pub const THRESHOLD_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub window: usize,
    pub bottleneck: usize,
    /// Encoder weights, row-major `[bottleneck][window]`.
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// Decoder weights, row-major `[window][bottleneck]`.
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub theta_a: f64,
    /// Accepted training loss per epoch.
    pub loss_history: Vec<f64>,
}

impl AutoencoderModel {
    fn n_params(&self) -> usize {
        self.enc_w.len() + self.enc_b.len() + self.dec_w.len() + self.dec_b.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.enc_w);
        p.extend_from_slice(&self.enc_b);
        p.extend_from_slice(&self.dec_w);
        p.extend_from_slice(&self.dec_b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (w, b) = (self.window, self.bottleneck);
        let mut at = 0;
        let mut take = |dst: &mut Vec<f64>, n: usize| {
            dst.copy_from_slice(&p[at..at + n]);
            at += n;
        };
        take(&mut self.enc_w, b * w);
        take(&mut self.enc_b, b);
        take(&mut self.dec_w, w * b);
        take(&mut self.dec_b, w);
    }

    pub fn normalize(&self, window: &[f64]) -> Vec<f64> {
        window
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Reconstruction of an already-normalized input; also returns the hidden layer.
    fn forward(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w, b) = (self.window, self.bottleneck);
        let h: Vec<f64> = (0..b)
            .map(|j| {
                let row = &self.enc_w[j * w..(j + 1) * w];
                (row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + self.enc_b[j]).tanh()
            })
            .collect();
        let out: Vec<f64> = (0..w)
            .map(|i| {
                let row = &self.dec_w[i * b..(i + 1) * b];
                row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + self.dec_b[i]
            })
            .collect();
        (out, h)
    }

    /// Squared L2 distance between the normalized window and its reconstruction.
    pub fn reconstruction_error(&self, window: &[f64]) -> Result<f64> {
        if window.len() != self.window {
            return Err(Error::validation(format!(
                "window has {} values, autoencoder expects {}",
                window.len(),
                self.window
            )));
        }
        let z = self.normalize(window);
        let (out, _) = self.forward(&z);
        Ok(out.iter().zip(&z).map(|(o, x)| (o - x) * (o - x)).sum())
    }

    /// Mean squared reconstruction loss over normalized inputs and its
    /// gradient with respect to `params()`.
    pub fn loss_and_grad(&self, data: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let (w, b) = (self.window, self.bottleneck);
        let n = data.len() as f64;
        let mut g_enc_w = vec![0.0; b * w];
        let mut g_enc_b = vec![0.0; b];
        let mut g_dec_w = vec![0.0; w * b];
        let mut g_dec_b = vec![0.0; w];
        let mut loss = 0.0;
        let mut d_h = vec![0.0; b];
        for z in data {
            let (out, h) = self.forward(z);
            d_h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..w {
                let diff = out[i] - z[i];
                loss += diff * diff;
                let d_out = 2.0 * diff / n;
                g_dec_b[i] += d_out;
                for j in 0..b {
                    g_dec_w[i * b + j] += d_out * h[j];
                    d_h[j] += d_out * self.dec_w[i * b + j];
                }
            }
            for j in 0..b {
                let d_pre = d_h[j] * (1.0 - h[j] * h[j]);
                g_enc_b[j] += d_pre;
                for i in 0..w {
                    g_enc_w[j * w + i] += d_pre * z[i];
                }
            }
        }
        let mut grad = g_enc_w;
        grad.extend(g_enc_b);
        grad.extend(g_dec_w);
        grad.extend(g_dec_b);
        (loss / n, grad)
    }

    pub fn loss(&self, data: &[Vec<f64>]) -> f64 {
        data.iter()
            .map(|z| {
                let (out, _) = self.forward(z);
                out.iter().zip(z).map(|(o, x)| (o - x) * (o - x)).sum::<f64>()
            })
            .sum::<f64>()
            / data.len() as f64
    }
}

/// Untrained model with Glorot-uniform weights and zero biases.
pub fn init_autoencoder(window: usize, bottleneck: usize, seed: u64) -> AutoencoderModel {
    let mut r = rng::seeded(seed);
    let limit = (6.0 / (window + bottleneck) as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-limit..limit)).collect() };
    AutoencoderModel {
        window,
        bottleneck,
        enc_w: draw(bottleneck * window),
        enc_b: vec![0.0; bottleneck],
        dec_w: draw(window * bottleneck),
        dec_b: vec![0.0; window],
        input_mean: vec![0.0; window],
        input_std: vec![1.0; window],
        theta_a: f64::INFINITY,
        loss_history: vec![],
    }
}

/// Nearest-rank quantile of an unsorted sample.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn train_autoencoder(windows: &[Vec<f64>], arch: &AeArch) -> Result<AutoencoderModel> {
    let (w, b) = (arch.window, arch.bottleneck);
    if b == 0 || b >= w {
        return Err(Error::validation("bottleneck must satisfy 0 < B < W"));
    }
    if windows.len() < 10 * b {
        return Err(Error::InsufficientData(format!(
            "{} residual windows, need at least {}",
            windows.len(),
            10 * b
        )));
    }
    if windows.iter().any(|x| x.len() != w) {
        return Err(Error::validation(format!("every window must have {w} values")));
    }
    if !(arch.step_size > 0.0) {
        return Err(Error::validation("step_size must be positive"));
    }

    let mut model = init_autoencoder(w, b, arch.seed);
    let n = windows.len() as f64;
    for i in 0..w {
        let m = windows.iter().map(|x| x[i]).sum::<f64>() / n;
        let v = windows.iter().map(|x| (x[i] - m) * (x[i] - m)).sum::<f64>() / n;
        model.input_mean[i] = m;
        model.input_std[i] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let data: Vec<Vec<f64>> = windows.iter().map(|x| model.normalize(x)).collect();

    if data.iter().flatten().all(|v| *v == 0.0) {
        // constant input: a zero decoder reconstructs it exactly
        model.dec_w.iter_mut().for_each(|v| *v = 0.0);
        model.loss_history = vec![0.0; arch.epochs.max(1)];
        model.theta_a = 0.0;
        return Ok(model);
    }

    let mut step = arch.step_size;
    let (mut loss, mut grad) = model.loss_and_grad(&data);
    for _ in 0..arch.epochs {
        let params = model.params();
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            model.set_params(&trial);
            let (trial_loss, trial_grad) = model.loss_and_grad(&data);
            if trial_loss <= loss {
                loss = trial_loss;
                grad = trial_grad;
                accepted = true;
                step *= 1.05;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            model.set_params(&params);
        }
        model.loss_history.push(loss);
    }

    let errors: Vec<f64> = windows
        .iter()
        .map(|x| model.reconstruction_error(x))
        .collect::<Result<_>>()?;
    model.theta_a = quantile(&errors, THRESHOLD_QUANTILE);
    Ok(model)
}
