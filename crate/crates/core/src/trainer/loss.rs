use crate::chansim::ChannelMatrix;
use crate::diffcore::{CustomOp, Graph, Tensor, Var};

use super::TrainError;

/// `|| H/||H|| - Ĥ/||Ĥ|| ||_F^2 = 2 - 2 Re<H, Ĥ> / (||H|| ||Ĥ||)`.
pub fn reconstruction_loss(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64, TrainError> {
    if h.n_tx() != h_hat.n_tx() || h.n_sc() != h_hat.n_sc() {
        return Err(TrainError::Mismatch(format!(
            "{}x{} vs {}x{}",
            h.n_tx(),
            h.n_sc(),
            h_hat.n_tx(),
            h_hat.n_sc()
        )));
    }
    let (a, b) = (h.frobenius_norm(), h_hat.frobenius_norm());
    if a == 0.0 || b == 0.0 {
        return Err(TrainError::ZeroNorm);
    }
    let inner: f64 = h.data().iter().zip(h_hat.data()).map(|(x, y)| (x.conj() * y).re).sum();
    Ok((2.0 - 2.0 * inner / (a * b)).max(0.0))
}

/// Per-rate weights `γ^B / Σ γ^B`.
pub fn rate_weights(rates: &[usize], gamma: f64) -> Result<Vec<f64>, TrainError> {
    if rates.is_empty() {
        return Err(TrainError::Mismatch("no rates".into()));
    }
    let top = *rates.iter().max().unwrap() as f64;
    let ln = gamma.ln();
    let raw: Vec<f64> = rates.iter().map(|&b| ((b as f64 - top) * ln).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn weighted_rate_loss(losses: &[f64], rates: &[usize], gamma: f64) -> Result<f64, TrainError> {
    if losses.len() != rates.len() {
        return Err(TrainError::Mismatch(format!(
            "{} losses for {} rates",
            losses.len(),
            rates.len()
        )));
    }
    let w = rate_weights(rates, gamma)?;
    Ok(w.iter().zip(losses).map(|(w, l)| w * l).sum())
}

struct Cosine {
    /// unit-norm targets, `[B, D]`
    targets: Vec<f64>,
    d: usize,
}

impl Cosine {
    fn stats(&self, p: &[f64], b: usize) -> (f64, f64) {
        let t = &self.targets[b * self.d..(b + 1) * self.d];
        let p = &p[b * self.d..(b + 1) * self.d];
        let dot: f64 = t.iter().zip(p).map(|(x, y)| x * y).sum();
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot, norm)
    }
}

impl CustomOp for Cosine {
    fn name(&self) -> &'static str {
        "normalized_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0].data();
        let batch = p.len() / self.d;
        let u = upstream.data()[0] / batch as f64;
        let mut grad = vec![0.0; p.len()];
        for b in 0..batch {
            let (dot, norm) = self.stats(p, b);
            if norm == 0.0 {
                continue;
            }
            let t = &self.targets[b * self.d..(b + 1) * self.d];
            let at = b * self.d;
            for j in 0..self.d {
                let pj = p[at + j];
                grad[at + j] = -2.0 * u * (t[j] / norm - dot * pj / (norm * norm * norm));
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), grad).expect("shape"))]
    }
}

/// Batch mean of the normalized reconstruction loss for predictions
/// `[B, D]` against constant targets of the same shape. A zero prediction
/// scores 2.
pub fn normalized_loss_op(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var, TrainError> {
    if g.shape(pred) != target.shape() || target.shape().len() != 2 {
        return Err(TrainError::Mismatch(format!(
            "{:?} vs {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    let d = target.last_dim();
    let mut targets = target.data().to_vec();
    for row in targets.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(TrainError::ZeroNorm);
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    let op = Cosine { targets, d };
    let p = g.value(pred).data();
    let batch = p.len() / d;
    let total: f64 = (0..batch)
        .map(|b| {
            let (dot, norm) = op.stats(p, b);
            if norm == 0.0 {
                2.0
            } else {
                2.0 - 2.0 * dot / norm
            }
        })
        .sum();
    Ok(g.custom(&[pred], Tensor::scalar(total / batch as f64), Box::new(op)))
}

/// Per-sample losses of the forward value computed by
/// [`normalized_loss_op`], without recording anything.
pub fn normalized_losses(pred: &[f64], target: &[f64], d: usize) -> Vec<f64> {
    pred.chunks(d)
        .zip(target.chunks(d))
        .map(|(p, t)| {
            let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if np == 0.0 || nt == 0.0 {
                return 2.0;
            }
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            2.0 - 2.0 * dot / (np * nt)
        })
        .collect()
}
