//! Prompt assembly, class probabilities, and per-attribute CAM scores.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dictionary::{AttributeDictionary, SelectionResult};
use crate::encoder::{SoftPrompt, TapActivations, TextImageEncoder, VisualFeature};
use crate::error::Error;
use crate::math::{self, Mat};
use crate::Result;

/// Which image domain and which dictionary produced a probability vector.
/// First letter: image domain; second: prompt dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SourceOwn,
    SourceCross,
    TargetOwn,
    TargetCross,
}

/// Probability vector over all C classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub probs: Vec<f64>,
    pub provenance: Provenance,
}

impl ClassProbabilities {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Numerical(format!(
                "invalid probability vector ({:?})",
                self.provenance
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if math::abs(sum - 1.0) > 1e-6 {
            return Err(Error::Numerical(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        math::argmax(&self.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Learned,
    Handcrafted,
}

/// One unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextEmbeddings {
    pub rows: Mat,
    pub kind: EmbeddingKind,
}

impl ClassTextEmbeddings {
    pub fn class_count(&self) -> usize {
        self.rows.rows
    }
}

/// Concatenate the selected attribute values (in selection order) and append
/// the frozen class tokens.
pub fn assemble_prompt(
    selected_values: &[&Mat],
    class_tokens: &Mat,
    context_limit: usize,
) -> Result<SoftPrompt> {
    if selected_values.is_empty() {
        return Err(Error::contract("prompt needs at least one attribute value"));
    }
    let token_dim = selected_values[0].cols;
    let mut rows = 0;
    for v in selected_values {
        if v.cols != token_dim {
            return Err(Error::contract("attribute token dims disagree"));
        }
        rows += v.rows;
    }
    let total = rows + class_tokens.rows;
    if total > context_limit {
        return Err(Error::config(format!(
            "assembled prompt has {total} tokens, context limit is {context_limit}"
        )));
    }
    let mut context = Mat::zeros(rows, token_dim);
    let mut at = 0;
    for v in selected_values {
        for r in 0..v.rows {
            context.row_mut(at).copy_from_slice(v.row(r));
            at += 1;
        }
    }
    Ok(SoftPrompt {
        context_tokens: context,
        class_tokens: class_tokens.clone(),
    })
}

/// Cosine logits `cos<row_k, z> / tau` for each class row.
pub fn class_logits(z: &VisualFeature, embeddings: &ClassTextEmbeddings, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if embeddings.rows.rows == 0 {
        return Err(Error::config("no class embeddings"));
    }
    if embeddings.rows.cols != z.dim() {
        return Err(Error::contract("embedding/feature dim mismatch"));
    }
    Ok((0..embeddings.rows.rows)
        .map(|k| math::dot(embeddings.rows.row(k), &z.vector) / tau)
        .collect())
}

/// Softmax over cosine similarities between the feature and each class row.
pub fn class_probabilities(
    z: &VisualFeature,
    embeddings: &ClassTextEmbeddings,
    tau: f64,
    provenance: Provenance,
) -> Result<ClassProbabilities> {
    let logits = class_logits(z, embeddings, tau)?;
    Ok(ClassProbabilities {
        probs: math::softmax(&logits),
        provenance,
    })
}

/// CAM scores for the selected attributes, normalized over the whole
/// dictionary, each carrying its gradient with respect to the tap tokens.
#[derive(Debug, Clone)]
pub struct CamScores {
    pub scores: Vec<f64>,
    pub attribute_indices: Vec<usize>,
    /// Softmax over all N attributes the scores were drawn from.
    pub full_softmax: Vec<f64>,
    /// `d score / d tap tokens` per selected attribute.
    pub tap_grads: Vec<Mat>,
}

/// Unit embeddings of every attribute value encoded bare (no class tokens).
pub fn bare_value_embeddings<E: TextImageEncoder>(
    enc: &E,
    dictionary: &AttributeDictionary,
) -> Result<Mat> {
    let d = enc.spec().feature_dim;
    let mut rows = Mat::zeros(dictionary.len(), d);
    for (i, attr) in dictionary.attributes.iter().enumerate() {
        let e = enc.encode_text(&SoftPrompt::bare(&attr.value))?;
        rows.row_mut(i).copy_from_slice(&e);
    }
    Ok(rows)
}

/// CAM scores from precomputed bare embeddings (one row per attribute).
pub fn cam_scores_from_embeddings<E: TextImageEncoder>(
    enc: &E,
    embeddings: &Mat,
    z: &VisualFeature,
    tap: &TapActivations,
    selection: &SelectionResult,
    tau: f64,
) -> Result<CamScores> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let n = embeddings.rows;
    if selection.indices.iter().any(|&i| i >= n) {
        return Err(Error::contract("selection index out of dictionary range"));
    }
    let logits: Vec<f64> = (0..n)
        .map(|i| math::dot(embeddings.row(i), &z.vector) / tau)
        .collect();
    let full = math::softmax(&logits);

    let mut mean_dir = alloc::vec![0.0; z.dim()];
    for (i, &s) in full.iter().enumerate() {
        math::axpy(&mut mean_dir, s, embeddings.row(i));
    }

    let mut scores = Vec::with_capacity(selection.len());
    let mut grads = Vec::with_capacity(selection.len());
    for &m in &selection.indices {
        let s_m = full[m];
        scores.push(s_m);
        // dS_m/dz = (S_m / tau) (y_m - sum_n S_n y_n), pulled back to the tap.
        let mut upstream = embeddings.row(m).to_vec();
        for (u, md) in upstream.iter_mut().zip(&mean_dir) {
            *u = (s_m / tau) * (*u - md);
        }
        grads.push(enc.feature_vjp(tap, &upstream)?);
    }
    Ok(CamScores {
        scores,
        attribute_indices: selection.indices.clone(),
        full_softmax: full,
        tap_grads: grads,
    })
}

/// CAM scores for a selection out of a dictionary (encodes the bare values
/// first; the trainer precomputes embeddings and uses the sibling above).
pub fn cam_scores<E: TextImageEncoder>(
    enc: &E,
    z: &VisualFeature,
    tap: &TapActivations,
    dictionary: &AttributeDictionary,
    selection: &SelectionResult,
    tau: f64,
) -> Result<CamScores> {
    let embeds = bare_value_embeddings(enc, dictionary)?;
    cam_scores_from_embeddings(enc, &embeds, z, tap, selection, tau)
}

/// Selection covering the whole dictionary in index order, used for
/// cross-domain candidate scoring.
pub fn full_selection(dictionary: &AttributeDictionary) -> SelectionResult {
    SelectionResult {
        indices: (0..dictionary.len()).collect(),
        scores: alloc::vec![0.0; dictionary.len()],
    }
}

/// Frozen per-class prompt ingredients: tokenized class names and the
/// hand-crafted anchor embeddings. Built once per run.
#[derive(Debug, Clone)]
pub struct ClassContext {
    pub class_names: Vec<alloc::string::String>,
    pub class_tokens: Vec<Mat>,
    pub handcrafted: ClassTextEmbeddings,
    pub template: alloc::string::String,
}

impl ClassContext {
    pub fn build<E: TextImageEncoder>(
        enc: &E,
        class_names: &[alloc::string::String],
        template: &str,
    ) -> Result<Self> {
        let handcrafted = ClassTextEmbeddings {
            rows: enc.embed_handcrafted(class_names, template)?,
            kind: EmbeddingKind::Handcrafted,
        };
        let class_tokens = class_names.iter().map(|n| enc.class_tokens(n)).collect();
        Ok(ClassContext {
            class_names: class_names.to_vec(),
            class_tokens,
            handcrafted,
            template: alloc::string::String::from(template),
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

/// Encode one prompt per class under a shared selected-value context.
pub fn encode_class_prompts<E: TextImageEncoder>(
    enc: &E,
    selected_values: &[&Mat],
    ctx: &ClassContext,
) -> Result<ClassTextEmbeddings> {
    let d = enc.spec().feature_dim;
    let mut rows = Mat::zeros(ctx.class_count(), d);
    for (k, tokens) in ctx.class_tokens.iter().enumerate() {
        let p = assemble_prompt(selected_values, tokens, enc.spec().context_limit)?;
        let e = enc.encode_text(&p)?;
        rows.row_mut(k).copy_from_slice(&e);
    }
    Ok(ClassTextEmbeddings {
        rows,
        kind: EmbeddingKind::Learned,
    })
}
