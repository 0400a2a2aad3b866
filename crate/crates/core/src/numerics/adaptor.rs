use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::sdm_nll_and_grad;
use crate::error::{Result, SdmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative(self, activated: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => 1.0 - activated * activated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptorConfig {
    /// Number of filters (width of the hidden representation).
    pub filters: usize,
    /// Width of the averaging window over the input; `None` spans the whole
    /// input so that each filter sees a single position.
    pub kernel_span: Option<usize>,
    pub nonlinearity: Nonlinearity,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            filters: 1000,
            kernel_span: None,
            nonlinearity: Nonlinearity::Identity,
        }
    }
}

/// Per-dimension standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Column means and population standard deviations. Degenerate columns
    /// (std at or below `k_eps`) get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize, k_eps: f64) -> Result<Self> {
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows {
            if row.len() != dim {
                return Err(SdmError::Shape(format!("row of length {} for dimension {dim}", row.len())));
            }
            n += 1;
            for (i, v) in row.iter().enumerate() {
                mean[i] += v;
                sq[i] += v * v;
            }
        }
        if n == 0 {
            return Err(SdmError::Empty("normalization needs at least one row".into()));
        }
        let n = n as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                let sd = var.sqrt();
                if sd <= k_eps {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Trainable parameters of the exemplar adaptor. Matrices are row-major:
/// `g[j * span + i]` and `w[j * classes + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorWeights {
    pub input_dim: usize,
    pub kernel_span: usize,
    pub filters: usize,
    pub classes: usize,
    pub nonlinearity: Nonlinearity,
    pub g: Vec<f64>,
    pub g_bias: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradients with the same layout as [`AdaptorWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorGrads {
    pub g: Vec<f64>,
    pub g_bias: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdaptorGrads {
    fn zeros(weights: &AdaptorWeights) -> Self {
        Self {
            g: vec![0.0; weights.g.len()],
            g_bias: vec![0.0; weights.g_bias.len()],
            w: vec![0.0; weights.w.len()],
            b: vec![0.0; weights.b.len()],
        }
    }
}

impl AdaptorWeights {
    /// Uniform initialization in `±1/sqrt(fan_in)` for every tensor.
    pub fn init(input_dim: usize, classes: usize, config: &AdaptorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let span = config.kernel_span.unwrap_or(input_dim);
        if input_dim == 0 || classes < 2 || config.filters == 0 {
            return Err(SdmError::InvalidArgument(format!(
                "adaptor needs positive dimensions (input {input_dim}, filters {}, classes {classes})",
                config.filters
            )));
        }
        if span == 0 || span > input_dim {
            return Err(SdmError::InvalidArgument(format!(
                "kernel span {span} must lie in 1..={input_dim}"
            )));
        }
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let m = config.filters;
        Ok(Self {
            input_dim,
            kernel_span: span,
            filters: m,
            classes,
            nonlinearity: config.nonlinearity,
            g: uniform(m * span, span),
            g_bias: uniform(m, span),
            w: uniform(m * classes, m),
            b: uniform(classes, m),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.filters
    }

    pub fn parameter_count(&self) -> usize {
        self.g.len() + self.g_bias.len() + self.w.len() + self.b.len()
    }

    /// Window-averaged features: position `i` is the mean of
    /// `D - span + 1` consecutive normalized inputs starting at `i`.
    pub fn pooled(&self, normalized: &[f64]) -> Vec<f64> {
        let span = self.kernel_span;
        let width = self.input_dim - span + 1;
        if width == 1 {
            return normalized.to_vec();
        }
        let mut running: f64 = normalized[..width].iter().sum();
        let mut out = Vec::with_capacity(span);
        out.push(running / width as f64);
        for i in 1..span {
            running += normalized[i + width - 1] - normalized[i - 1];
            out.push(running / width as f64);
        }
        out
    }

    /// Hidden representation from already-normalized input.
    pub fn hidden(&self, normalized: &[f64]) -> Vec<f64> {
        let s = self.pooled(normalized);
        let span = self.kernel_span;
        (0..self.filters)
            .map(|j| {
                let row = &self.g[j * span..(j + 1) * span];
                let pre = row.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() + self.g_bias[j];
                self.nonlinearity.apply(pre)
            })
            .collect()
    }

    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut z = self.b.clone();
        for (j, h) in hidden.iter().enumerate() {
            let row = &self.w[j * c..(j + 1) * c];
            for (zc, wc) in z.iter_mut().zip(row) {
                *zc += wc * h;
            }
        }
        z
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(SdmError::Shape(format!(
                "input of length {}, adaptor expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Runs the adaptor on a raw embedding, returning `(hidden, logits)`.
pub fn adaptor_forward(
    weights: &AdaptorWeights,
    embedding: &[f64],
    norm: &Normalization,
) -> Result<(Vec<f64>, Vec<f64>)> {
    weights.check_input(embedding)?;
    let h = weights.hidden(&norm.apply(embedding));
    let z = weights.logits(&h);
    Ok((h, z))
}

/// One training row: normalized input, target and the fixed similarity and
/// depth used in its activation.
#[derive(Debug, Clone, Copy)]
pub struct LossInstance<'a> {
    pub normalized: &'a [f64],
    pub label: usize,
    pub q: f64,
    pub d: f64,
}

/// Mean negative log-likelihood of the log-form activation over a batch and
/// its gradient with respect to every adaptor tensor.
pub fn sdm_loss_and_grad(
    weights: &AdaptorWeights,
    batch: &[LossInstance<'_>],
    k_eps: f64,
) -> Result<(f64, AdaptorGrads)> {
    if batch.is_empty() {
        return Err(SdmError::Empty("loss over an empty batch".into()));
    }
    let mut grads = AdaptorGrads::zeros(weights);
    let mut total = 0.0;
    let (span, c) = (weights.kernel_span, weights.classes);
    let scale = 1.0 / batch.len() as f64;
    for inst in batch {
        weights.check_input(inst.normalized)?;
        if inst.label >= c {
            return Err(SdmError::InvalidArgument(format!("label {} for {c} classes", inst.label)));
        }
        let s = weights.pooled(inst.normalized);
        let h = weights.hidden(inst.normalized);
        let z = weights.logits(&h);
        let (loss, dz) = sdm_nll_and_grad(&z, inst.label, inst.q, inst.d, k_eps);
        total += loss;
        for (gb, dzc) in grads.b.iter_mut().zip(&dz) {
            *gb += scale * dzc;
        }
        for (j, hj) in h.iter().enumerate() {
            let wrow = &weights.w[j * c..(j + 1) * c];
            let gw = &mut grads.w[j * c..(j + 1) * c];
            let mut dh = 0.0;
            for k in 0..c {
                gw[k] += scale * hj * dz[k];
                dh += wrow[k] * dz[k];
            }
            let dpre = scale * dh * weights.nonlinearity.derivative(*hj);
            if dpre != 0.0 {
                grads.g_bias[j] += dpre;
                let gg = &mut grads.g[j * span..(j + 1) * span];
                for (gi, si) in gg.iter_mut().zip(&s) {
                    *gi += dpre * si;
                }
            }
        }
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(SdmError::NonFiniteLoss {
            loss: mean,
            epoch: 0,
            context: "adaptor batch loss".into(),
        });
    }
    Ok((mean, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{SOFTMAX_Q, DEFAULT_KEPS};
    use rand::SeedableRng;

    fn small(span: Option<usize>, nl: Nonlinearity) -> AdaptorWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = AdaptorConfig {
            filters: 4,
            kernel_span: span,
            nonlinearity: nl,
        };
        AdaptorWeights::init(5, 3, &config, &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut w = small(None, Nonlinearity::Identity);
        w.g.iter_mut().chain(&mut w.g_bias).chain(&mut w.w).chain(&mut w.b).for_each(|v| *v = 0.0);
        let (h, z) = adaptor_forward(&w, &[1.0, -2.0, 3.0, 0.5, 9.0], &Normalization::identity(5)).unwrap();
        assert!(h.iter().chain(&z).all(|v| *v == 0.0));
    }

    #[test]
    fn single_filter_squared_norm() {
        // one filter equal to the input, full span, one-hot output weights
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = AdaptorConfig {
            filters: 1,
            kernel_span: None,
            nonlinearity: Nonlinearity::Identity,
        };
        let mut w = AdaptorWeights::init(3, 2, &config, &mut rng).unwrap();
        let x = [1.0, 2.0, 2.0];
        w.g = x.to_vec();
        w.g_bias = vec![0.0];
        w.w = vec![1.0, 0.0];
        w.b = vec![0.0, 0.0];
        let (h, z) = adaptor_forward(&w, &x, &Normalization::identity(3)).unwrap();
        assert_eq!(h, vec![9.0]);
        assert_eq!(z, vec![9.0, 0.0]);
    }

    #[test]
    fn pooling_averages_windows() {
        let w = small(Some(3), Nonlinearity::Identity);
        // width = 5 - 3 + 1 = 3
        assert_eq!(w.pooled(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![2.0, 3.0, 4.0]);
        let full = small(None, Nonlinearity::Identity);
        assert_eq!(full.pooled(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn normalization_guards_constant_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = Normalization::fit(rows.iter().map(Vec::as_slice), 2, DEFAULT_KEPS).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 7.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn uniform_output_loss_is_log_of_classes() {
        let w = small(None, Nonlinearity::Identity);
        let x = [0.3, -0.1, 0.2, 0.0, 1.0];
        let q = 5.0;
        let inst = LossInstance {
            normalized: &x,
            label: 1,
            q,
            d: 0.0,
        };
        let (loss, grads) = sdm_loss_and_grad(&w, &[inst], DEFAULT_KEPS).unwrap();
        assert!((loss - 3f64.ln() / (2.0 + q).ln()).abs() < 1e-6);
        assert!(grads.w.iter().all(|g| g.abs() < 1e-12));
    }

    fn flat(w: &AdaptorWeights) -> Vec<f64> {
        [w.g.as_slice(), &w.g_bias, &w.w, &w.b].concat()
    }

    fn unflat(w: &mut AdaptorWeights, v: &[f64]) {
        let (a, rest) = v.split_at(w.g.len());
        let (b, rest) = rest.split_at(w.g_bias.len());
        let (c, d) = rest.split_at(w.w.len());
        w.g = a.to_vec();
        w.g_bias = b.to_vec();
        w.w = c.to_vec();
        w.b = d.to_vec();
    }

    fn check_gradient(nl: Nonlinearity, span: Option<usize>, q: f64, d: f64) {
        let w = small(span, nl);
        let xs = [[0.5, -1.0, 0.2, 0.9, -0.3], [1.5, 0.1, -0.7, 0.0, 0.4]];
        let batch: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| LossInstance {
                normalized: x,
                label: i,
                q,
                d,
            })
            .collect();
        let (_, g) = sdm_loss_and_grad(&w, &batch, 0.0).unwrap();
        let analytic = [g.g, g.g_bias, g.w, g.b].concat();
        let base = flat(&w);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut plus = w.clone();
                let mut v = base.clone();
                v[i] += h;
                unflat(&mut plus, &v);
                let mut minus = w.clone();
                v[i] -= 2.0 * h;
                unflat(&mut minus, &v);
                let lp = sdm_loss_and_grad(&plus, &batch, 0.0).unwrap().0;
                let lm = sdm_loss_and_grad(&minus, &batch, 0.0).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / na.max(nn) < 1e-4, "relative error {}", diff / na.max(nn));
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradient(Nonlinearity::Identity, None, SOFTMAX_Q, 1.0);
        check_gradient(Nonlinearity::Identity, Some(3), 4.0, 0.6);
        check_gradient(Nonlinearity::Tanh, None, 1.5, 0.8);
    }
}
