//! Small models with hand-derived gradients.
//!
//! All parameters live in one flat vector; each model documents its layout.
//! Losses are mean-reduced over the examples passed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, TaskKind};
use crate::error::{check_len, Error, Result};
use crate::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Sigmoid output with binary cross-entropy.
    Logistic,
    /// Linear output with squared error `(ŷ − y)²`.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Layout `[w (dim), b]`.
    LogisticRegression { dim: usize },
    /// `tanh` hidden layer. Layout `[W1 (hidden×dim, row-major), b1, w2, b2]`.
    Mlp2 { dim: usize, hidden: usize, head: Head },
    /// Fixed-window next-symbol model: embeddings, one `tanh` layer, softmax.
    /// Layout `[E (vocab×embed), W1 (hidden×window·embed), b1, W2 (vocab×hidden), b2]`.
    CharMlpLm { vocab: usize, window: usize, embed: usize, hidden: usize },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) − y·z`, the logistic loss on logit `z`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

fn vector_sample(s: &Sample, dim: usize) -> Result<(&[f64], f64)> {
    match s {
        Sample::Vector { x, y } if x.len() == dim => Ok((x, *y)),
        Sample::Vector { x, .. } => Err(Error::DimensionMismatch { expected: dim, actual: x.len() }),
        Sample::Tokens { .. } => Err(Error::arg("vector model given a token sample")),
    }
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::LogisticRegression { dim } => dim + 1,
            ModelSpec::Mlp2 { dim, hidden, .. } => hidden * dim + 2 * hidden + 1,
            ModelSpec::CharMlpLm { vocab, window, embed, hidden } => {
                vocab * embed + hidden * window * embed + hidden + vocab * hidden + vocab
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelSpec::LogisticRegression { dim } => dim > 0,
            ModelSpec::Mlp2 { dim, hidden, .. } => dim > 0 && hidden > 0,
            ModelSpec::CharMlpLm { vocab, window, embed, hidden } => {
                (2..=64).contains(&vocab) && window > 0 && embed > 0 && hidden > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid model dimensions {self:?}")))
        }
    }

    /// Checks that the model can consume this dataset.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let fits = match *self {
            ModelSpec::LogisticRegression { dim } => {
                ds.kind == TaskKind::BinaryClassification && ds.dim == dim
            }
            ModelSpec::Mlp2 { dim, head, .. } => {
                ds.dim == dim
                    && matches!(
                        (head, ds.kind),
                        (Head::Logistic, TaskKind::BinaryClassification) | (Head::Squared, TaskKind::Regression)
                    )
            }
            ModelSpec::CharMlpLm { vocab, window, .. } => {
                ds.kind == TaskKind::CharSequence && ds.dim == window && ds.vocab <= vocab
            }
        };
        if fits {
            Ok(())
        } else {
            Err(Error::config(format!(
                "model {self:?} cannot consume a {} dataset with dim={} vocab={}",
                ds.kind.as_str(),
                ds.dim,
                ds.vocab
            )))
        }
    }

    /// Initial parameters: zeros for logistic regression, scaled Gaussian
    /// weights and zero biases otherwise.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
        let mut theta = Vec::with_capacity(self.param_count());
        match *self {
            ModelSpec::LogisticRegression { dim } => theta.resize(dim + 1, 0.0),
            ModelSpec::Mlp2 { dim, hidden, .. } => {
                let s1 = (1.0 / dim as f64).sqrt();
                let s2 = (1.0 / hidden as f64).sqrt();
                theta.extend((0..hidden * dim).map(|_| normal(s1)));
                theta.extend(std::iter::repeat_n(0.0, hidden));
                theta.extend((0..hidden).map(|_| normal(s2)));
                theta.push(0.0);
            }
            ModelSpec::CharMlpLm { vocab, window, embed, hidden } => {
                let s1 = (1.0 / (window * embed) as f64).sqrt();
                let s2 = (1.0 / hidden as f64).sqrt();
                theta.extend((0..vocab * embed).map(|_| normal(0.5)));
                theta.extend((0..hidden * window * embed).map(|_| normal(s1)));
                theta.extend(std::iter::repeat_n(0.0, hidden));
                theta.extend((0..vocab * hidden).map(|_| normal(s2)));
                theta.extend(std::iter::repeat_n(0.0, vocab));
            }
        }
        theta.into()
    }

    /// Mean loss over `batch`; writes the mean gradient into `grad`.
    pub fn loss_and_grad(&self, theta: &[f64], batch: &[&Sample], grad: &mut [f64]) -> Result<f64> {
        self.eval(theta, batch, Some(grad))
    }

    /// Mean loss only.
    pub fn loss(&self, theta: &[f64], batch: &[&Sample]) -> Result<f64> {
        self.eval(theta, batch, None)
    }

    fn eval(&self, theta: &[f64], batch: &[&Sample], mut grad: Option<&mut [f64]>) -> Result<f64> {
        check_len(self.param_count(), theta.len())?;
        if batch.is_empty() {
            return Err(Error::arg("loss over an empty batch"));
        }
        if let Some(g) = grad.as_deref_mut() {
            check_len(theta.len(), g.len())?;
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = 0.0;
        for sample in batch {
            total += match *self {
                ModelSpec::LogisticRegression { dim } => logistic(theta, dim, sample, grad.as_deref_mut())?,
                ModelSpec::Mlp2 { dim, hidden, head } => {
                    mlp(theta, dim, hidden, head, sample, grad.as_deref_mut())?
                }
                ModelSpec::CharMlpLm { vocab, window, embed, hidden } => {
                    char_lm(theta, [vocab, window, embed, hidden], sample, grad.as_deref_mut())?
                }
            };
        }
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v /= n);
        }
        Ok(loss)
    }
}

/// Gradient of the *summed* microbatch loss (mean gradient × size), in the
/// `(loss, size)` callback shape used by [`crate::dp::aggregate_microbatches`].
pub fn microbatch_sum_grad(
    model: &ModelSpec,
    theta: &[f64],
    batch: &[&Sample],
    grad: &mut [f64],
) -> Result<(f64, usize)> {
    let loss = model.loss_and_grad(theta, batch, grad)?;
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= m);
    Ok((loss, batch.len()))
}

fn logistic(theta: &[f64], dim: usize, sample: &Sample, grad: Option<&mut [f64]>) -> Result<f64> {
    let (x, y) = vector_sample(sample, dim)?;
    let (w, b) = theta.split_at(dim);
    let z = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0];
    if let Some(g) = grad {
        let d = sigmoid(z) - y;
        for (gi, xi) in g[..dim].iter_mut().zip(x) {
            *gi += d * xi;
        }
        g[dim] += d;
    }
    Ok(bce_with_logit(z, y))
}

fn mlp(
    theta: &[f64],
    dim: usize,
    hidden: usize,
    head: Head,
    sample: &Sample,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let (x, y) = vector_sample(sample, dim)?;
    let (w1, rest) = theta.split_at(hidden * dim);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let h: Vec<f64> = w1
        .chunks_exact(dim)
        .zip(b1)
        .map(|(row, b)| (row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b).tanh())
        .collect();
    let out = w2.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b2[0];
    let (loss, d_out) = match head {
        Head::Logistic => (bce_with_logit(out, y), sigmoid(out) - y),
        Head::Squared => ((out - y) * (out - y), 2.0 * (out - y)),
    };
    if let Some(g) = grad {
        let (gw1, rest) = g.split_at_mut(hidden * dim);
        let (gb1, rest) = rest.split_at_mut(hidden);
        let (gw2, gb2) = rest.split_at_mut(hidden);
        gb2[0] += d_out;
        for k in 0..hidden {
            gw2[k] += d_out * h[k];
            let da = d_out * w2[k] * (1.0 - h[k] * h[k]);
            gb1[k] += da;
            for (gi, xi) in gw1[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *gi += da * xi;
            }
        }
    }
    Ok(loss)
}

fn char_lm(theta: &[f64], dims: [usize; 4], sample: &Sample, grad: Option<&mut [f64]>) -> Result<f64> {
    let [vocab, window, embed, hidden] = dims;
    let Sample::Tokens { context, next } = sample else {
        return Err(Error::arg("sequence model given a vector sample"));
    };
    check_len(window, context.len())?;
    let next = usize::from(*next);
    if next >= vocab || context.iter().any(|&t| usize::from(t) >= vocab) {
        return Err(Error::arg(format!("symbol outside vocabulary of {vocab}")));
    }
    let z_len = window * embed;
    let (emb, rest) = theta.split_at(vocab * embed);
    let (w1, rest) = rest.split_at(hidden * z_len);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(vocab * hidden);

    let z: Vec<f64> = context
        .iter()
        .flat_map(|&t| emb[usize::from(t) * embed..(usize::from(t) + 1) * embed].iter().copied())
        .collect();
    let h: Vec<f64> = w1
        .chunks_exact(z_len)
        .zip(b1)
        .map(|(row, b)| (row.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>() + b).tanh())
        .collect();
    let logits: Vec<f64> = w2
        .chunks_exact(hidden)
        .zip(b2)
        .map(|(row, b)| row.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_norm = max + sum_exp.ln();
    let loss = log_norm - logits[next];

    if let Some(g) = grad {
        let (g_emb, rest) = g.split_at_mut(vocab * embed);
        let (gw1, rest) = rest.split_at_mut(hidden * z_len);
        let (gb1, rest) = rest.split_at_mut(hidden);
        let (gw2, gb2) = rest.split_at_mut(vocab * hidden);

        let mut dh = vec![0.0; hidden];
        for v in 0..vocab {
            let mut d = (logits[v] - log_norm).exp();
            if v == next {
                d -= 1.0;
            }
            gb2[v] += d;
            let row = &w2[v * hidden..(v + 1) * hidden];
            for k in 0..hidden {
                gw2[v * hidden + k] += d * h[k];
                dh[k] += d * row[k];
            }
        }
        let mut dz = vec![0.0; z_len];
        for k in 0..hidden {
            let da = dh[k] * (1.0 - h[k] * h[k]);
            gb1[k] += da;
            let row = &w1[k * z_len..(k + 1) * z_len];
            for j in 0..z_len {
                gw1[k * z_len + j] += da * z[j];
                dz[j] += da * row[j];
            }
        }
        for (pos, &t) in context.iter().enumerate() {
            let t = usize::from(t);
            for e in 0..embed {
                g_emb[t * embed + e] += dz[pos * embed + e];
            }
        }
    }
    Ok(loss)
}
