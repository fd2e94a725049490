//! Training losses as pure differentiable functions.
//!
//! Every loss returns its scalar value together with analytic gradients
//! with respect to its raw inputs; `finite_diff_check` verifies any of
//! them against central differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters shared by the loss family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub tau_c: f64,
    pub lambda_en: f64,
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            temperature: 1.0,
            m_in: -6.0,
            m_out: -3.0,
            tau_c: 0.10,
            lambda_en: 1.0,
            lambda_c: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1)"));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be >= 0"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.tau_c <= 0.0 {
            return Err(Error::invalid("tau_c must be > 0"));
        }
        if self.m_out < self.m_in {
            return Err(Error::invalid("m_out must be >= m_in"));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const PT_CLAMP: f64 = 1e-12;

/// Binary focal loss over sigmoid logits. Returns the mean loss and its
/// gradient with respect to each logit.
pub fn focal_loss(
    logits: &[f64],
    labels: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "focal loss: {} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let p = sigmoid(z);
        let (p_t, alpha_t, dpt_dz) = if y {
            (p, alpha, p * (1.0 - p))
        } else {
            (1.0 - p, 1.0 - alpha, -p * (1.0 - p))
        };
        let p_t = p_t.max(PT_CLAMP);
        let one_minus = 1.0 - p_t;
        total += -alpha_t * one_minus.powf(gamma) * p_t.ln();
        // d/dp_t of -alpha_t (1-p_t)^gamma ln(p_t)
        let mut dl_dpt = -alpha_t * one_minus.powf(gamma) / p_t;
        if gamma != 0.0 {
            dl_dpt += alpha_t * gamma * one_minus.powf(gamma - 1.0) * p_t.ln();
        }
        grad.push(dl_dpt * dpt_dz / n);
    }
    Ok((total / n, grad))
}

/// One-vs-rest focal loss over a class-indexed logit matrix. Row `i` holds
/// the logits of sample `i` for every class; `labels[i]` is its class
/// index. Flattens to a single binary focal problem.
pub fn onevsrest_focal_loss(
    logits: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() {
        return Err(Error::invalid("one-vs-rest focal: row/label count mismatch"));
    }
    let mut flat = Vec::with_capacity(logits.len() * num_classes);
    let mut flat_labels = Vec::with_capacity(logits.len() * num_classes);
    for (row, &y) in logits.iter().zip(labels) {
        if row.len() != num_classes {
            return Err(Error::invalid(format!(
                "one-vs-rest focal: row has {} logits, expected {}",
                row.len(),
                num_classes
            )));
        }
        if y >= num_classes {
            return Err(Error::invalid(format!("label {} out of range", y)));
        }
        for (c, &z) in row.iter().enumerate() {
            flat.push(z);
            flat_labels.push(c == y);
        }
    }
    let (loss, flat_grad) = focal_loss(&flat, &flat_labels, alpha, gamma)?;
    let grads = flat_grad
        .chunks(num_classes)
        .map(|c| c.to_vec())
        .collect();
    Ok((loss, grads))
}

/// Free energy E(x) = -T log sum_j e^{f_j / T}, max-shifted. Lower energy
/// means more in-distribution; note the opposite orientation of the
/// `ood` scoring module, which negates this.
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    debug_assert!(temperature > 0.0);
    if logits.is_empty() {
        return f64::INFINITY;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&f| ((f - m) / temperature).exp()).sum();
    -temperature * sum.ln() - m
}

/// Softmax of `logits / temperature`, max-shifted.
fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&f| ((f - m) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Logit rows for the energy regularizer: in-distribution rows are pushed
/// below `m_in`, outlier rows above `m_out`.
#[derive(Debug, Clone, Default)]
pub struct LogitBatch {
    pub id_logits: Vec<Vec<f64>>,
    pub ood_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EnergyRegGrads {
    pub id: Vec<Vec<f64>>,
    pub ood: Vec<Vec<f64>>,
}

/// Squared hinge regularizer on free energy. Each side is averaged over
/// its own rows so the value is batch-size independent; an empty side
/// contributes zero.
pub fn energy_reg_loss(batch: &LogitBatch, cfg: &LossConfig) -> (f64, EnergyRegGrads) {
    let t = cfg.temperature;
    let mut loss = 0.0;
    let mut grads = EnergyRegGrads {
        id: Vec::with_capacity(batch.id_logits.len()),
        ood: Vec::with_capacity(batch.ood_logits.len()),
    };

    let n_id = batch.id_logits.len() as f64;
    for row in &batch.id_logits {
        let e = energy(row, t);
        let hinge = (e - cfg.m_in).max(0.0);
        loss += hinge * hinge / n_id;
        if hinge > 0.0 {
            // dE/df_j = -softmax_j(f/T)
            let sm = tempered_softmax(row, t);
            grads
                .id
                .push(sm.iter().map(|&s| -2.0 * hinge * s / n_id).collect());
        } else {
            grads.id.push(vec![0.0; row.len()]);
        }
    }

    let n_ood = batch.ood_logits.len() as f64;
    for row in &batch.ood_logits {
        let e = energy(row, t);
        let hinge = (cfg.m_out - e).max(0.0);
        loss += hinge * hinge / n_ood;
        if hinge > 0.0 {
            let sm = tempered_softmax(row, t);
            grads
                .ood
                .push(sm.iter().map(|&s| 2.0 * hinge * s / n_ood).collect());
        } else {
            grads.ood.push(vec![0.0; row.len()]);
        }
    }

    (loss, grads)
}

/// Batch element label for the outlier-aware contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveLabel {
    /// In-distribution element with a class id.
    In(u32),
    /// Outlier element: never an anchor or positive, but always in the
    /// denominator.
    Out,
}

/// Raw (un-normalized) embeddings plus their labels.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<ContrastiveLabel>,
}

/// Outlier-aware supervised contrastive loss. Embeddings are L2-normalized
/// internally and the normalization Jacobian is folded into the returned
/// gradients, so they are gradients with respect to the raw embeddings.
///
/// Anchors run over in-distribution elements only; positives are the
/// anchor's same-class in-distribution peers; the denominator runs over
/// every other element, outliers included. Anchors whose class appears
/// once contribute exactly zero.
pub fn supcon_ood_loss(batch: &ContrastiveBatch, tau_c: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.embeddings.len();
    if n == 0 {
        return Err(Error::invalid("contrastive batch is empty"));
    }
    if batch.labels.len() != n {
        return Err(Error::invalid("contrastive batch: label count mismatch"));
    }
    if tau_c <= 0.0 {
        return Err(Error::invalid("tau_c must be > 0"));
    }
    let dim = batch.embeddings[0].len();
    if batch.embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::invalid("contrastive batch: mixed dimensions"));
    }

    let mut norms = Vec::with_capacity(n);
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(n);
    for e in &batch.embeddings {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("zero-norm or non-finite embedding"));
        }
        z.push(e.iter().map(|v| v / norm).collect());
        norms.push(norm);
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut loss = 0.0;
    // Gradient with respect to the normalized embeddings.
    let mut gz = vec![vec![0.0; dim]; n];

    for i in 0..n {
        let yi = match batch.labels[i] {
            ContrastiveLabel::In(c) => c,
            ContrastiveLabel::Out => continue,
        };
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && batch.labels[p] == ContrastiveLabel::In(yi))
            .collect();
        if positives.is_empty() {
            continue; // singleton class: contributes exactly 0
        }
        let npos = positives.len() as f64;

        // Stable log-sum-exp over k != i.
        let sims: Vec<(usize, f64)> = (0..n)
            .filter(|&k| k != i)
            .map(|k| (k, dot(&z[i], &z[k]) / tau_c))
            .collect();
        let m = sims
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = sims.iter().map(|&(_, s)| (s - m).exp()).sum();
        let log_denom = m + sum_exp.ln();

        for &p in &positives {
            loss += -(dot(&z[i], &z[p]) / tau_c - log_denom) / npos;
        }

        // d(loss_i)/dz: numerator pulls positives, denominator pushes all.
        let inv_tau = 1.0 / tau_c;
        for &p in &positives {
            for d in 0..dim {
                gz[i][d] -= z[p][d] * inv_tau / npos;
                gz[p][d] -= z[i][d] * inv_tau / npos;
            }
        }
        for &(k, s) in &sims {
            let q = (s - log_denom).exp(); // softmax weight of k in the denominator
            for d in 0..dim {
                gz[i][d] += q * z[k][d] * inv_tau;
                gz[k][d] += q * z[i][d] * inv_tau;
            }
        }
    }

    // Chain through z = f / ||f||: grad_f = (grad_z - (grad_z . z) z) / ||f||.
    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let gdotz = dot(&gz[i], &z[i]);
        for d in 0..dim {
            grads[i][d] = (gz[i][d] - gdotz * z[i][d]) / norms[i];
        }
    }

    Ok((loss, grads))
}

/// Smooth-L1 on 7-dim box residuals, summed over components.
pub fn smooth_l1_box_loss(pred: &[f64; 7], target: &[f64; 7]) -> (f64, [f64; 7]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 7];
    for i in 0..7 {
        let d = pred[i] - target[i];
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad[i] = d;
        } else {
            loss += d.abs() - 0.5;
            grad[i] = d.signum();
        }
    }
    (loss, grad)
}

/// Named loss components entering the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_en: f64,
    pub l_c: f64,
}

/// Weighted total: L_cls + L_reg + L_obj + lambda_en * L_en + lambda_c * L_c.
pub fn total_loss(components: &LossComponents, cfg: &LossConfig) -> f64 {
    components.l_cls
        + components.l_reg
        + components.l_obj
        + cfg.lambda_en * components.l_en
        + cfg.lambda_c * components.l_c
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &[f64], analytic: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0_f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let up = f(&probe);
        probe[i] = x[i] - epsilon;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
