//! Loss terms and their analytic gradients: supervised cross-entropy,
//! debias-thresholded self-training, prediction-consistency via
//! Jensen-Shannon divergence, the hand-crafted-prompt anchor, the attribute
//! diversity regularizer, and the per-mode totals.
//!
//! All logarithms are natural; probabilities are clamped at 1e-12 inside
//! logs and zero terms follow the 0 * log 0 = 0 convention.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{self, ln_clamped, Mat};
use crate::prompt::{ClassProbabilities, ClassTextEmbeddings, EmbeddingKind, Provenance};
use crate::Result;

/// Running marginal estimate for pseudo-label debiasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasState {
    pub q: Vec<f64>,
    pub momentum: f64,
    pub debias_factor: f64,
}

impl DebiasState {
    /// Uniform marginal over `classes`, as used before training starts.
    pub fn uniform(classes: usize, momentum: f64, debias_factor: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("debias state needs at least one class"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "debias momentum must be in (0, 1), got {momentum}"
            )));
        }
        if debias_factor <= 0.0 {
            return Err(Error::config(format!(
                "debias factor must be positive, got {debias_factor}"
            )));
        }
        Ok(DebiasState {
            q: alloc::vec![1.0 / classes as f64; classes],
            momentum,
            debias_factor,
        })
    }

    /// Debiased score vector `p - tau_d * log q` for one example.
    /// Not a probability vector; entries can exceed 1.
    pub fn debiased(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.q)
            .map(|(&pi, &qi)| pi - self.debias_factor * ln_clamped(qi))
            .collect()
    }

    /// Confidence masks and pseudo-labels for a batch under the current
    /// marginal. Read-only; pair with [`DebiasState::update`].
    pub fn masks_and_pseudolabels(
        &self,
        batch: &[ClassProbabilities],
        gamma: f64,
    ) -> Result<(Vec<bool>, Vec<usize>)> {
        if gamma <= 0.0 {
            return Err(Error::config(format!("gamma must be positive, got {gamma}")));
        }
        let c = self.q.len();
        let mut masks = Vec::with_capacity(batch.len());
        let mut pseudos = Vec::with_capacity(batch.len());
        for p in batch {
            if p.probs.len() != c {
                return Err(Error::contract(format!(
                    "probability vector has {} classes, debias state has {}",
                    p.probs.len(),
                    c
                )));
            }
            let hat = self.debiased(&p.probs);
            let best = math::argmax(&hat);
            masks.push(hat[best] >= gamma);
            pseudos.push(best);
        }
        Ok((masks, pseudos))
    }

    /// Fold the batch mean of the raw probabilities into the marginal.
    pub fn update(&mut self, batch: &[ClassProbabilities]) {
        if batch.is_empty() {
            return;
        }
        let inv_b = 1.0 / batch.len() as f64;
        let m = self.momentum;
        for (k, qk) in self.q.iter_mut().enumerate() {
            let mean_k: f64 = batch.iter().map(|p| p.probs[k]).sum::<f64>() * inv_b;
            *qk = m * *qk + (1.0 - m) * mean_k;
        }
    }

    /// Masks and pseudo-labels with the pre-update marginal, then the
    /// marginal update, in that order.
    pub fn debias_and_pseudolabel(
        &mut self,
        batch: &[ClassProbabilities],
        gamma: f64,
    ) -> Result<(Vec<bool>, Vec<usize>)> {
        let out = self.masks_and_pseudolabels(batch, gamma)?;
        self.update(batch);
        Ok(out)
    }
}

/// Mean cross-entropy against ground-truth labels.
pub fn loss_sup_source(probs: &[ClassProbabilities], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::contract("batch/label length mismatch"));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.probs.len() {
            return Err(Error::Data(format!(
                "label {y} out of range for {} classes",
                p.probs.len()
            )));
        }
        total -= ln_clamped(p.probs[y]);
    }
    Ok(total / probs.len() as f64)
}

/// Mean self-training cross-entropy over the confident subset; zero when the
/// mask selects nothing.
pub fn loss_sup_target(
    probs: &[ClassProbabilities],
    mask: &[bool],
    pseudo: &[usize],
) -> Result<f64> {
    if probs.len() != mask.len() || probs.len() != pseudo.len() {
        return Err(Error::contract("batch/mask/pseudo length mismatch"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, &m), &y) in probs.iter().zip(mask).zip(pseudo) {
        if m {
            total -= ln_clamped(p.probs[y]);
            count += 1;
        }
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(total / count as f64)
    }
}

/// `dL/dlogits` for one example of mean cross-entropy: `(p - onehot) * scale`.
pub fn ce_logit_grad(p: &[f64], label: usize, scale: f64) -> Vec<f64> {
    let mut g: Vec<f64> = p.iter().map(|&pi| pi * scale).collect();
    g[label] -= scale;
    g
}

/// Jensen-Shannon divergence with natural log; symmetric, in [0, ln 2].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (ln_clamped(pi) - ln_clamped(mi));
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (ln_clamped(qi) - ln_clamped(mi));
        }
    }
    Ok(acc.max(0.0))
}

/// `d JS(p, q) / d p_i = 0.5 * ln(p_i / m_i)`.
pub fn js_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| 0.5 * (ln_clamped(pi) - ln_clamped(0.5 * (pi + qi))))
        .collect()
}

fn expect_provenance(p: &ClassProbabilities, want: Provenance) -> Result<()> {
    if p.provenance != want {
        return Err(Error::contract(format!(
            "expected {:?} probabilities, got {:?}",
            want, p.provenance
        )));
    }
    Ok(())
}

/// Prediction-consistency loss: per-batch mean of `JS(p_ss, p_st)` plus the
/// per-batch mean of `JS(p_tt, p_ts)`. Either side may be empty (the
/// source-free deployment stage passes no source pairs).
pub fn loss_con(
    p_ss: &[ClassProbabilities],
    p_st: &[ClassProbabilities],
    p_tt: &[ClassProbabilities],
    p_ts: &[ClassProbabilities],
) -> Result<f64> {
    if p_ss.len() != p_st.len() || p_tt.len() != p_ts.len() {
        return Err(Error::contract("consistency pairs are not batch-aligned"));
    }
    let mut total = 0.0;
    if !p_ss.is_empty() {
        let mut acc = 0.0;
        for (a, b) in p_ss.iter().zip(p_st) {
            expect_provenance(a, Provenance::SourceOwn)?;
            expect_provenance(b, Provenance::SourceCross)?;
            acc += js_divergence(&a.probs, &b.probs)?;
        }
        total += acc / p_ss.len() as f64;
    }
    if !p_tt.is_empty() {
        let mut acc = 0.0;
        for (a, b) in p_tt.iter().zip(p_ts) {
            expect_provenance(a, Provenance::TargetOwn)?;
            expect_provenance(b, Provenance::TargetCross)?;
            acc += js_divergence(&a.probs, &b.probs)?;
        }
        total += acc / p_tt.len() as f64;
    }
    Ok(total)
}

/// Summed elementwise absolute distance between learned class embeddings and
/// the hand-crafted anchors.
pub fn loss_hp(e_s: &ClassTextEmbeddings, w: &ClassTextEmbeddings) -> Result<f64> {
    if e_s.kind != EmbeddingKind::Learned || w.kind != EmbeddingKind::Handcrafted {
        return Err(Error::contract(
            "loss_hp expects (learned, handcrafted) embeddings",
        ));
    }
    if e_s.rows.rows != w.rows.rows || e_s.rows.cols != w.rows.cols {
        return Err(Error::contract(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            e_s.rows.rows, e_s.rows.cols, w.rows.rows, w.rows.cols
        )));
    }
    let mut acc = 0.0;
    for (a, b) in e_s.rows.data.iter().zip(&w.rows.data) {
        acc += math::abs(a - b);
    }
    Ok(acc)
}

/// `dL_hp / d e_s`: elementwise sign of the difference.
pub fn hp_grad(e_s: &Mat, w: &Mat) -> Mat {
    let mut g = Mat::zeros(e_s.rows, e_s.cols);
    for (out, (a, b)) in g.data.iter_mut().zip(e_s.data.iter().zip(&w.data)) {
        *out = if a > b {
            1.0
        } else if a < b {
            -1.0
        } else {
            0.0
        };
    }
    g
}

/// Diversity regularizer over the bare attribute embeddings (one unit row
/// per attribute): mean absolute pairwise cosine with the literal
/// `1 / (N (N-1))` normalizer, so the all-identical worst case is 0.5.
pub fn loss_div(embeddings: &Mat) -> f64 {
    let n = embeddings.rows;
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for m in 0..n {
        for k in (m + 1)..n {
            acc += math::abs(math::cosine(embeddings.row(m), embeddings.row(k)));
        }
    }
    acc / (n * (n - 1)) as f64
}

/// `dL_div / d row_m`, treating each row as a free (not yet normalized)
/// variable; the text-encoder VJP downstream projects out radial components.
pub fn div_grad(embeddings: &Mat) -> Mat {
    let n = embeddings.rows;
    let mut g = Mat::zeros(n, embeddings.cols);
    if n < 2 {
        return g;
    }
    let scale = 1.0 / (n * (n - 1)) as f64;
    for m in 0..n {
        let ym = embeddings.row(m).to_vec();
        let nm = math::norm(&ym);
        for k in 0..n {
            if k == m {
                continue;
            }
            let yk = embeddings.row(k);
            let c = math::cosine(&ym, yk);
            let s = if c > 0.0 {
                1.0
            } else if c < 0.0 {
                -1.0
            } else {
                0.0
            };
            let nk = math::norm(yk);
            // d cos / d ym = yk / (|ym| |yk|) - cos * ym / |ym|^2
            let row = g.row_mut(m);
            for i in 0..row.len() {
                row[i] += s * scale * (yk[i] / (nm * nk) - c * ym[i] / (nm * nm));
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Joint,
    SourcePretrain,
    TargetDeploy,
}

/// Raw per-term values before weighting. `None` marks a term the current
/// mode must not use.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub sup_s: Option<f64>,
    pub sup_t: Option<f64>,
    pub con: Option<f64>,
    pub hp: Option<f64>,
    pub div: Option<f64>,
}

/// Weighted loss record as streamed to the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup_s: f64,
    pub sup_t: f64,
    pub con: f64,
    pub hp: f64,
    pub div: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mode: TrainingMode,
}

/// Combine per-term values into the mode's objective.
pub fn total_loss(
    parts: &LossParts,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    mode: TrainingMode,
) -> Result<LossBreakdown> {
    if lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0 {
        return Err(Error::config("loss weights must be nonnegative"));
    }
    let need = |part: Option<f64>, name: &str| -> Result<f64> {
        part.ok_or_else(|| Error::contract(format!("mode {mode:?} requires loss part '{name}'")))
    };
    let (sup_s, sup_t, con, hp, div) = match mode {
        TrainingMode::Joint => (
            need(parts.sup_s, "sup_s")?,
            need(parts.sup_t, "sup_t")?,
            need(parts.con, "con")?,
            need(parts.hp, "hp")?,
            need(parts.div, "div")?,
        ),
        TrainingMode::SourcePretrain => (
            need(parts.sup_s, "sup_s")?,
            0.0,
            0.0,
            need(parts.hp, "hp")?,
            need(parts.div, "div")?,
        ),
        TrainingMode::TargetDeploy => (
            0.0,
            need(parts.sup_t, "sup_t")?,
            need(parts.con, "con")?,
            0.0,
            need(parts.div, "div")?,
        ),
    };
    let total = match mode {
        TrainingMode::Joint => sup_s + sup_t + lambda1 * con + lambda2 * hp + lambda3 * div,
        TrainingMode::SourcePretrain => sup_s + lambda2 * hp + lambda3 * div,
        TrainingMode::TargetDeploy => sup_t + lambda1 * con + lambda3 * div,
    };
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss: sup_s={sup_s} sup_t={sup_t} con={con} hp={hp} div={div}"
        )));
    }
    Ok(LossBreakdown {
        sup_s,
        sup_t,
        con,
        hp,
        div,
        total,
        lambda1,
        lambda2,
        lambda3,
        mode,
    })
}
