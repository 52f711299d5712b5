//! Per-step training: dictionary lifecycle, paired source/target batches,
//! cross-domain attribute selection, the full objective with analytic
//! gradients onto attribute values, and SGD with a per-step cosine schedule.
//!
//! Only attribute values receive gradient updates. Keys change exclusively
//! through the step-start moving average, and the encoder is never touched;
//! both facts are checksum-audited by the callers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{self, AttributeDictionary, Domain, SelectionResult};
use crate::encoder::{SoftPrompt, TapActivations, TextImageEncoder, VisualFeature};
use crate::error::Error;
use crate::losses::{self, DebiasState, LossBreakdown, LossParts, TrainingMode};
use crate::math::{self, Mat};
use crate::prompt::{self, ClassContext, ClassProbabilities, ClassTextEmbeddings, Provenance};
use crate::schedule::Benchmark;
use crate::vac;
use crate::Result;

/// Training hyperparameters. Benchmark presets follow the published recipe;
/// the synthetic preset is scaled for desk runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    /// Confidence threshold for pseudo-labels.
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Token rows per attribute value (M).
    pub value_rows: usize,
    /// Attributes per dictionary (N).
    pub dict_size: usize,
    /// Attributes selected per image (L).
    pub select: usize,
    pub batch_size: usize,
    pub epochs_per_step: usize,
    pub lr0: f64,
    pub sgd_momentum: f64,
    /// Moving-average coefficient for target keys.
    pub key_ema_mu: f64,
    pub debias_momentum: f64,
    pub debias_factor: f64,
    /// Overrides the backend temperature when set.
    pub tau: Option<f64>,
    pub seed: u64,
}

impl TrainHyper {
    pub fn for_benchmark(benchmark: Benchmark) -> Self {
        let base = TrainHyper {
            gamma: 0.7,
            lambda1: 25.0,
            lambda2: 20.0,
            lambda3: 1.0,
            value_rows: 10,
            dict_size: 8,
            select: 5,
            batch_size: 32,
            epochs_per_step: 10,
            lr0: 3e-3,
            sgd_momentum: 0.9,
            key_ema_mu: 0.9,
            debias_momentum: 0.999,
            debias_factor: 0.4,
            tau: None,
            seed: 0,
        };
        match benchmark {
            Benchmark::Office31 => TrainHyper {
                gamma: 0.7,
                lambda1: 3.0,
                lambda2: 6.0,
                value_rows: 5,
                dict_size: 13,
                select: 13,
                ..base
            },
            Benchmark::OfficeHome => TrainHyper {
                gamma: 0.6,
                select: 5,
                ..base
            },
            Benchmark::MiniDomainNet => TrainHyper {
                gamma: 0.7,
                select: 6,
                ..base
            },
        }
    }

    pub fn synthetic() -> Self {
        TrainHyper {
            gamma: 0.7,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            value_rows: 4,
            dict_size: 8,
            select: 3,
            batch_size: 32,
            epochs_per_step: 10,
            lr0: 3e-3,
            sgd_momentum: 0.9,
            key_ema_mu: 0.9,
            debias_momentum: 0.999,
            debias_factor: 0.4,
            tau: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.select == 0 || self.select > self.dict_size {
            return Err(Error::config(format!(
                "select {} out of range for dictionary size {}",
                self.select, self.dict_size
            )));
        }
        if self.lr0 <= 0.0 || self.batch_size == 0 || self.epochs_per_step == 0 {
            return Err(Error::config("rates, batch size and epochs must be positive"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.key_ema_mu) && self.key_ema_mu != 1.0 {
            return Err(Error::config("key_ema_mu must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn resolve_tau<E: TextImageEncoder>(&self, enc: &E) -> f64 {
        self.tau.unwrap_or(enc.spec().temperature)
    }
}

/// Labeled source example after encoding.
#[derive(Debug, Clone)]
pub struct SourceItem {
    pub feature: VisualFeature,
    pub tap: TapActivations,
    pub label: usize,
}

/// Unlabeled target example after encoding. Ground truth never enters this
/// type; evaluation keeps labels on its own side.
#[derive(Debug, Clone)]
pub struct TargetItem {
    pub feature: VisualFeature,
    pub tap: TapActivations,
}

/// Cosine decay from `lr0` down to zero across a step.
pub fn cosine_lr(lr0: f64, iteration: usize, total_iterations: usize) -> f64 {
    if total_iterations <= 1 {
        return lr0;
    }
    let t = iteration as f64 / (total_iterations - 1) as f64;
    lr0 * 0.5 * (1.0 + math::cos(core::f64::consts::PI * t))
}

/// One row in the per-iteration loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub step: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

mod rng_snapshot {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Snapshot {
        seed: [u8; 32],
        word_pos: u128,
        stream: u64,
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha12Rng, s: S) -> core::result::Result<S::Ok, S::Error> {
        Snapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> core::result::Result<ChaCha12Rng, D::Error> {
        let snap = Snapshot::deserialize(d)?;
        let mut rng = ChaCha12Rng::from_seed(snap.seed);
        rng.set_stream(snap.stream);
        rng.set_word_pos(snap.word_pos);
        Ok(rng)
    }
}

/// Everything that persists across steps (and into checkpoints).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub source_dict: AttributeDictionary,
    pub target_dict: Option<AttributeDictionary>,
    pub debias: DebiasState,
    pub next_step: usize,
    #[serde(with = "rng_snapshot")]
    pub rng: ChaCha12Rng,
    pub vel_source: Vec<Mat>,
    pub vel_target: Vec<Mat>,
    pub encoder_checksum: u64,
}

impl RunState {
    /// Initialize for a run: source keys from k-means++ over all source
    /// features (frozen afterwards), seeded random values, uniform debias
    /// marginal. The target dictionary is created when the first target step
    /// arrives.
    pub fn new<E: TextImageEncoder>(
        enc: &E,
        class_count: usize,
        hyper: &TrainHyper,
        source_features: &[VisualFeature],
    ) -> Result<Self> {
        hyper.validate()?;
        let keys = dictionary::init_keys_kmeanspp(source_features, hyper.dict_size, hyper.seed)?;
        let source_dict = AttributeDictionary::new(
            Domain::Source,
            keys,
            hyper.value_rows,
            enc.spec().prompt_token_dim,
            0,
            hyper.seed ^ 0x5f5f,
        )?;
        let vel_source = (0..hyper.dict_size)
            .map(|_| Mat::zeros(hyper.value_rows, enc.spec().prompt_token_dim))
            .collect();
        Ok(RunState {
            source_dict,
            target_dict: None,
            debias: DebiasState::uniform(class_count, hyper.debias_momentum, hyper.debias_factor)?,
            next_step: 0,
            rng: ChaCha12Rng::seed_from_u64(hyper.seed),
            vel_source,
            vel_target: Vec::new(),
            encoder_checksum: enc.weights_checksum(),
        })
    }

    fn ensure_target_dict<E: TextImageEncoder>(
        &mut self,
        enc: &E,
        hyper: &TrainHyper,
        step_index: usize,
        step_features: &[VisualFeature],
    ) -> Result<()> {
        if self.target_dict.is_some() {
            if step_index > 0 {
                let dict = self.target_dict.as_mut().expect("just checked");
                dict.update_target_keys_ema(step_features, hyper.key_ema_mu)?;
            }
            return Ok(());
        }
        let keys = dictionary::init_keys_kmeanspp(
            step_features,
            hyper.dict_size,
            hyper.seed ^ 0x7467,
        )?;
        self.target_dict = Some(AttributeDictionary::new(
            Domain::Target,
            keys,
            hyper.value_rows,
            enc.spec().prompt_token_dim,
            step_index,
            hyper.seed ^ 0x7474,
        )?);
        self.vel_target = (0..hyper.dict_size)
            .map(|_| Mat::zeros(hyper.value_rows, enc.spec().prompt_token_dim))
            .collect();
        Ok(())
    }
}

/// Forward pass caches for one image.
struct ImageForward {
    sel_own: SelectionResult,
    sel_cross: Option<SelectionResult>,
    e_own: ClassTextEmbeddings,
    p_own: ClassProbabilities,
    p_cross: Option<ClassProbabilities>,
}

#[allow(clippy::too_many_arguments)]
fn forward_image<E: TextImageEncoder>(
    enc: &E,
    ctx: &ClassContext,
    dict_own: &AttributeDictionary,
    dict_other: Option<&AttributeDictionary>,
    own_bare: &Mat,
    other_bare: Option<&Mat>,
    z: &VisualFeature,
    tap: &TapActivations,
    select: usize,
    tau: f64,
    provenance: (Provenance, Provenance),
) -> Result<ImageForward> {
    let sel_own = dict_own.select_top_l(z, select)?;
    let own_values: Vec<&Mat> = sel_own
        .indices
        .iter()
        .map(|&i| &dict_own.attributes[i].value)
        .collect();
    let e_own = prompt::encode_class_prompts(enc, &own_values, ctx)?;
    let p_own = prompt::class_probabilities(z, &e_own, tau, provenance.0)?;

    let (sel_cross, p_cross) = match (dict_other, other_bare) {
        (Some(other), Some(other_embeds)) => {
            let (sel, _) = vac::select_for_image_with_embeddings(
                enc,
                own_bare,
                other_embeds,
                z,
                tap,
                other.len(),
                &sel_own,
                tau,
            )?;
            let cross_values: Vec<&Mat> = sel
                .indices
                .iter()
                .map(|&i| &other.attributes[i].value)
                .collect();
            let e = prompt::encode_class_prompts(enc, &cross_values, ctx)?;
            let p = prompt::class_probabilities(z, &e, tau, provenance.1)?;
            (Some(sel), Some(p))
        }
        _ => (None, None),
    };

    Ok(ImageForward {
        sel_own,
        sel_cross,
        e_own,
        p_own,
        p_cross,
    })
}

/// Pull per-class embedding cotangents back through the prompts onto the
/// selected attribute values.
fn apply_prompt_grads<E: TextImageEncoder>(
    enc: &E,
    ctx: &ClassContext,
    dict: &AttributeDictionary,
    selection: &SelectionResult,
    upstream_per_class: &Mat,
    grads: &mut [Mat],
) -> Result<()> {
    let values: Vec<&Mat> = selection
        .indices
        .iter()
        .map(|&i| &dict.attributes[i].value)
        .collect();
    let value_rows = values[0].rows;
    for (k, tokens) in ctx.class_tokens.iter().enumerate() {
        let upstream = upstream_per_class.row(k);
        if upstream.iter().all(|g| *g == 0.0) {
            continue;
        }
        let p = prompt::assemble_prompt(&values, tokens, enc.spec().context_limit)?;
        let g_ctx = enc.encode_text_vjp(&p, upstream)?;
        for (slot, &attr_idx) in selection.indices.iter().enumerate() {
            let g = &mut grads[attr_idx];
            for r in 0..value_rows {
                let src = g_ctx.row(slot * value_rows + r);
                math::axpy(g.row_mut(r), 1.0, src);
            }
        }
    }
    Ok(())
}

/// Pull bare-embedding cotangents (diversity term) back onto every value.
fn apply_bare_grads<E: TextImageEncoder>(
    enc: &E,
    dict: &AttributeDictionary,
    upstream_rows: &Mat,
    grads: &mut [Mat],
) -> Result<()> {
    for (n, attr) in dict.attributes.iter().enumerate() {
        let upstream = upstream_rows.row(n);
        if upstream.iter().all(|g| *g == 0.0) {
            continue;
        }
        let p = SoftPrompt::bare(&attr.value);
        let g = enc.encode_text_vjp(&p, upstream)?;
        grads[n].add_assign(&g);
    }
    Ok(())
}

fn sgd_update(dict: &mut AttributeDictionary, vel: &mut [Mat], grads: &[Mat], lr: f64, momentum: f64) {
    for ((attr, v), g) in dict.attributes.iter_mut().zip(vel).zip(grads) {
        for ((w, vi), gi) in attr.value.data.iter_mut().zip(&mut v.data).zip(&g.data) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
}

/// Per-class logit cotangent -> per-class embedding cotangent
/// (`d logit_k / d e_k = z / tau`).
fn logit_grads_to_embedding(upstream_logits: &[f64], z: &VisualFeature, tau: f64) -> Mat {
    let mut out = Mat::zeros(upstream_logits.len(), z.dim());
    for (k, &g) in upstream_logits.iter().enumerate() {
        if g != 0.0 {
            let row = out.row_mut(k);
            for (o, zi) in row.iter_mut().zip(&z.vector) {
                *o = g * zi / tau;
            }
        }
    }
    out
}

struct IterationSetup<'a, E: TextImageEncoder> {
    enc: &'a E,
    ctx: &'a ClassContext,
    hyper: &'a TrainHyper,
    mode: TrainingMode,
}

/// Loss and gradients for one paired batch, with no state mutation.
/// The finite-difference checks in the acceptance suite drive this directly.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub grad_source: Vec<Mat>,
    pub grad_target: Vec<Mat>,
    pub mask: Vec<bool>,
    pub pseudo: Vec<usize>,
    pub p_tt: Vec<ClassProbabilities>,
}

/// Forward the batch under the given dictionaries and debias marginal,
/// compute the mode's objective, and accumulate its analytic gradients onto
/// the attribute values of both dictionaries.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_batch<E: TextImageEncoder>(
    enc: &E,
    ctx: &ClassContext,
    hyper: &TrainHyper,
    mode: TrainingMode,
    source_dict: &AttributeDictionary,
    target_dict: Option<&AttributeDictionary>,
    debias: &DebiasState,
    source_batch: &[&SourceItem],
    source_labels: &[usize],
    target_batch: &[&TargetItem],
) -> Result<BatchEvaluation> {
    let tau = hyper.resolve_tau(enc);
    let (lambda1, lambda2, lambda3) = (hyper.lambda1, hyper.lambda2, hyper.lambda3);

    let source_bare = prompt::bare_value_embeddings(enc, source_dict)?;
    let target_bare = match target_dict {
        Some(d) => Some(prompt::bare_value_embeddings(enc, d)?),
        None => None,
    };

    // Forward passes.
    let mut source_fwd: Vec<ImageForward> = Vec::with_capacity(source_batch.len());
    for item in source_batch {
        source_fwd.push(forward_image(
            enc,
            ctx,
            source_dict,
            if mode == TrainingMode::Joint { target_dict } else { None },
            &source_bare,
            if mode == TrainingMode::Joint { target_bare.as_ref() } else { None },
            &item.feature,
            &item.tap,
            hyper.select,
            tau,
            (Provenance::SourceOwn, Provenance::SourceCross),
        )?);
    }
    let mut target_fwd: Vec<ImageForward> = Vec::with_capacity(target_batch.len());
    if !target_batch.is_empty() {
        let tdict = target_dict.ok_or_else(|| Error::contract("target dictionary missing"))?;
        let tbare = target_bare.as_ref().expect("bare embeddings exist with dict");
        for item in target_batch {
            target_fwd.push(forward_image(
                enc,
                ctx,
                tdict,
                Some(source_dict),
                tbare,
                Some(&source_bare),
                &item.feature,
                &item.tap,
                hyper.select,
                tau,
                (Provenance::TargetOwn, Provenance::TargetCross),
            )?);
        }
    }

    // Pseudo-labels against the pre-update marginal.
    let p_tt: Vec<ClassProbabilities> = target_fwd.iter().map(|f| f.p_own.clone()).collect();
    let (mask, pseudo) = if target_batch.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        debias.masks_and_pseudolabels(&p_tt, hyper.gamma)?
    };

    // Loss values.
    let p_ss: Vec<ClassProbabilities> = source_fwd.iter().map(|f| f.p_own.clone()).collect();
    let p_st: Vec<ClassProbabilities> = source_fwd
        .iter()
        .filter_map(|f| f.p_cross.clone())
        .collect();
    let p_ts: Vec<ClassProbabilities> = target_fwd
        .iter()
        .filter_map(|f| f.p_cross.clone())
        .collect();

    let sup_s = if mode == TrainingMode::TargetDeploy {
        None
    } else {
        Some(losses::loss_sup_source(&p_ss, source_labels)?)
    };
    let sup_t = if mode == TrainingMode::SourcePretrain {
        None
    } else {
        Some(losses::loss_sup_target(&p_tt, &mask, &pseudo)?)
    };
    let con = if mode == TrainingMode::SourcePretrain {
        None
    } else if mode == TrainingMode::TargetDeploy {
        Some(losses::loss_con(&[], &[], &p_tt, &p_ts)?)
    } else {
        Some(losses::loss_con(&p_ss, &p_st, &p_tt, &p_ts)?)
    };
    let hp = if mode == TrainingMode::TargetDeploy {
        None
    } else {
        let mut acc = 0.0;
        for f in &source_fwd {
            acc += losses::loss_hp(&f.e_own, &ctx.handcrafted)?;
        }
        Some(if source_fwd.is_empty() { 0.0 } else { acc / source_fwd.len() as f64 })
    };
    let div = {
        let mut d = 0.0;
        if mode != TrainingMode::TargetDeploy {
            d += losses::loss_div(&source_bare);
        }
        if mode != TrainingMode::SourcePretrain {
            if let Some(tb) = target_bare.as_ref() {
                d += losses::loss_div(tb);
            }
        }
        Some(d)
    };

    let parts = LossParts {
        sup_s,
        sup_t,
        con,
        hp,
        div,
    };
    let breakdown = losses::total_loss(&parts, lambda1, lambda2, lambda3, mode)?;
    if !breakdown.total.is_finite() {
        return Err(batch_diagnostic(source_batch, target_batch));
    }

    // Gradient accumulation.
    let (vr, td) = (hyper.value_rows, enc.spec().prompt_token_dim);
    let mut grad_source: Vec<Mat> = (0..source_dict.len()).map(|_| Mat::zeros(vr, td)).collect();
    let mut grad_target: Vec<Mat> = (0..target_dict.map_or(0, |d| d.len()))
        .map(|_| Mat::zeros(vr, td))
        .collect();

    let b_s = source_batch.len().max(1) as f64;
    let b_t = target_batch.len().max(1) as f64;

    for (i, f) in source_fwd.iter().enumerate() {
        // Own-prompt upstream: cross-entropy + consistency + anchor terms.
        let mut logit_up = losses::ce_logit_grad(&f.p_own.probs, source_labels[i], 1.0 / b_s);
        if let Some(p_cross) = &f.p_cross {
            let js_up = losses::js_grad(&f.p_own.probs, &p_cross.probs);
            let through = math::softmax_vjp(&f.p_own.probs, &js_up);
            math::axpy(&mut logit_up, lambda1 / b_s, &through);
        }
        let mut e_up = logit_grads_to_embedding(&logit_up, &source_batch[i].feature, tau);
        if mode != TrainingMode::TargetDeploy {
            let hp_g = losses::hp_grad(&f.e_own.rows, &ctx.handcrafted.rows);
            let scale = lambda2 / b_s;
            for (o, g) in e_up.data.iter_mut().zip(&hp_g.data) {
                *o += scale * g;
            }
        }
        apply_prompt_grads(enc, ctx, source_dict, &f.sel_own, &e_up, &mut grad_source)?;

        // Cross-prompt upstream (target values) from the consistency term.
        if let (Some(p_cross), Some(sel_cross), Some(tdict)) =
            (&f.p_cross, &f.sel_cross, target_dict)
        {
            let js_up = losses::js_grad(&p_cross.probs, &f.p_own.probs);
            let mut logit_up = math::softmax_vjp(&p_cross.probs, &js_up);
            for g in &mut logit_up {
                *g *= lambda1 / b_s;
            }
            let e_up = logit_grads_to_embedding(&logit_up, &source_batch[i].feature, tau);
            apply_prompt_grads(enc, ctx, tdict, sel_cross, &e_up, &mut grad_target)?;
        }
    }

    let confident = mask.iter().filter(|m| **m).count().max(1) as f64;
    for (j, f) in target_fwd.iter().enumerate() {
        let tdict = target_dict.expect("target forward implies dictionary");
        let mut logit_up = alloc::vec![0.0; f.p_own.probs.len()];
        if mask[j] {
            let ce = losses::ce_logit_grad(&f.p_own.probs, pseudo[j], 1.0 / confident);
            math::axpy(&mut logit_up, 1.0, &ce);
        }
        if let Some(p_cross) = &f.p_cross {
            let js_up = losses::js_grad(&f.p_own.probs, &p_cross.probs);
            let through = math::softmax_vjp(&f.p_own.probs, &js_up);
            math::axpy(&mut logit_up, lambda1 / b_t, &through);
        }
        let e_up = logit_grads_to_embedding(&logit_up, &target_batch[j].feature, tau);
        apply_prompt_grads(enc, ctx, tdict, &f.sel_own, &e_up, &mut grad_target)?;

        // Cross prompts come from the source dictionary; its values train in
        // joint mode only (deployment keeps the source side frozen).
        if mode == TrainingMode::Joint {
            if let (Some(p_cross), Some(sel_cross)) = (&f.p_cross, &f.sel_cross) {
                let js_up = losses::js_grad(&p_cross.probs, &f.p_own.probs);
                let mut logit_up = math::softmax_vjp(&p_cross.probs, &js_up);
                for g in &mut logit_up {
                    *g *= lambda1 / b_t;
                }
                let e_up = logit_grads_to_embedding(&logit_up, &target_batch[j].feature, tau);
                apply_prompt_grads(enc, ctx, source_dict, sel_cross, &e_up, &mut grad_source)?;
            }
        }
    }

    // Diversity gradients.
    if mode != TrainingMode::TargetDeploy && lambda3 > 0.0 {
        let mut up = losses::div_grad(&source_bare);
        up.scale(lambda3);
        apply_bare_grads(enc, source_dict, &up, &mut grad_source)?;
    }
    if mode != TrainingMode::SourcePretrain && lambda3 > 0.0 {
        if let (Some(tb), Some(tdict)) = (target_bare.as_ref(), target_dict) {
            let mut up = losses::div_grad(tb);
            up.scale(lambda3);
            apply_bare_grads(enc, tdict, &up, &mut grad_target)?;
        }
    }

    Ok(BatchEvaluation {
        loss: breakdown,
        grad_source,
        grad_target,
        mask,
        pseudo,
        p_tt,
    })
}

/// One optimization step over a paired batch. Returns the loss record.
fn train_iteration<E: TextImageEncoder>(
    setup: &IterationSetup<'_, E>,
    state: &mut RunState,
    source_batch: &[&SourceItem],
    source_labels: &[usize],
    target_batch: &[&TargetItem],
    lr: f64,
) -> Result<LossBreakdown> {
    let hyper = setup.hyper;
    let mode = setup.mode;
    let eval = evaluate_batch(
        setup.enc,
        setup.ctx,
        hyper,
        mode,
        &state.source_dict,
        state.target_dict.as_ref(),
        &state.debias,
        source_batch,
        source_labels,
        target_batch,
    )?;
    if !target_batch.is_empty() {
        state.debias.update(&eval.p_tt);
    }

    // Updates. Source values freeze during target deployment.
    if mode != TrainingMode::TargetDeploy {
        sgd_update(
            &mut state.source_dict,
            &mut state.vel_source,
            &eval.grad_source,
            lr,
            hyper.sgd_momentum,
        );
    }
    if mode != TrainingMode::SourcePretrain {
        if let Some(tdict) = state.target_dict.as_mut() {
            sgd_update(tdict, &mut state.vel_target, &eval.grad_target, lr, hyper.sgd_momentum);
        }
    }

    // Post-update sanity: a blown-up step is a numerical failure.
    if !state.source_dict.attributes.iter().all(|a| a.value.is_finite())
        || !state
            .target_dict
            .as_ref()
            .map_or(true, |d| d.attributes.iter().all(|a| a.value.is_finite()))
    {
        return Err(batch_diagnostic(source_batch, target_batch));
    }

    Ok(eval.loss)
}

fn batch_diagnostic(source: &[&SourceItem], target: &[&TargetItem]) -> Error {
    let src_ids: Vec<&str> = source
        .iter()
        .take(8)
        .map(|s| s.feature.source_id.as_str())
        .collect();
    let tgt_ids: Vec<&str> = target
        .iter()
        .take(8)
        .map(|t| t.feature.source_id.as_str())
        .collect();
    Error::Numerical(format!(
        "non-finite loss or values; source batch {src_ids:?}, target batch {tgt_ids:?}"
    ))
}

fn shuffled_indices(rng: &mut ChaCha12Rng, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}

/// Train one incremental step (joint mode) or one deployment step
/// (source-free stage two). Runs the target-key moving average once at step
/// start, then `epochs_per_step` epochs of paired batches; an epoch is one
/// pass over the step's target data with the source loader cycling.
#[allow(clippy::too_many_arguments)]
pub fn run_step<E: TextImageEncoder>(
    state: &mut RunState,
    enc: &E,
    ctx: &ClassContext,
    hyper: &TrainHyper,
    mode: TrainingMode,
    step_index: usize,
    source: &[SourceItem],
    target: &[TargetItem],
    log: &mut dyn FnMut(IterationLog),
) -> Result<()> {
    if mode == TrainingMode::SourcePretrain {
        return Err(Error::contract("run_step drives joint or deployment steps"));
    }
    if step_index != state.next_step {
        return Err(Error::contract(format!(
            "expected step {}, got {}",
            state.next_step, step_index
        )));
    }
    if mode == TrainingMode::Joint && source.is_empty() {
        return Err(Error::contract("joint training needs source data"));
    }
    if enc.weights_checksum() != state.encoder_checksum {
        return Err(Error::contract("encoder weights changed since initialization"));
    }
    if target.is_empty() {
        log::warn!("target step {step_index} is empty; skipping");
        state.next_step += 1;
        return Ok(());
    }

    let step_features: Vec<VisualFeature> = target.iter().map(|t| t.feature.clone()).collect();
    state.ensure_target_dict(enc, hyper, step_index, &step_features)?;

    let setup = IterationSetup {
        enc,
        ctx,
        hyper,
        mode,
    };

    let b = hyper.batch_size;
    let iters_per_epoch = target.len().div_ceil(b);
    let total_iters = iters_per_epoch * hyper.epochs_per_step;
    let mut source_order = shuffled_indices(&mut state.rng, source.len().max(1));
    let mut source_cursor = 0usize;
    let mut iteration = 0usize;

    for epoch in 0..hyper.epochs_per_step {
        let target_order = shuffled_indices(&mut state.rng, target.len());
        for chunk in target_order.chunks(b) {
            let target_batch: Vec<&TargetItem> = chunk.iter().map(|&i| &target[i]).collect();
            let mut source_batch: Vec<&SourceItem> = Vec::new();
            let mut source_labels: Vec<usize> = Vec::new();
            if mode == TrainingMode::Joint {
                for _ in 0..b.min(source.len()) {
                    if source_cursor >= source_order.len() {
                        source_order = shuffled_indices(&mut state.rng, source.len());
                        source_cursor = 0;
                    }
                    let item = &source[source_order[source_cursor]];
                    source_cursor += 1;
                    source_batch.push(item);
                    source_labels.push(item.label);
                }
            }

            let lr = cosine_lr(hyper.lr0, iteration, total_iters);
            let loss = train_iteration(
                &setup,
                state,
                &source_batch,
                &source_labels,
                &target_batch,
                lr,
            )?;
            log(IterationLog {
                step: step_index,
                epoch,
                iteration,
                lr,
                loss,
            });
            iteration += 1;
        }
    }

    state.next_step += 1;
    Ok(())
}

/// Source-free stage one: optimize the source values on labeled source data
/// only (supervised + anchor + source diversity).
pub fn run_source_pretrain<E: TextImageEncoder>(
    state: &mut RunState,
    enc: &E,
    ctx: &ClassContext,
    hyper: &TrainHyper,
    source: &[SourceItem],
    log: &mut dyn FnMut(IterationLog),
) -> Result<()> {
    if source.is_empty() {
        return Err(Error::contract("source pretraining needs source data"));
    }
    let setup = IterationSetup {
        enc,
        ctx,
        hyper,
        mode: TrainingMode::SourcePretrain,
    };
    let b = hyper.batch_size;
    let iters_per_epoch = source.len().div_ceil(b);
    let total_iters = iters_per_epoch * hyper.epochs_per_step;
    let mut iteration = 0usize;
    for epoch in 0..hyper.epochs_per_step {
        let order = shuffled_indices(&mut state.rng, source.len());
        for chunk in order.chunks(b) {
            let batch: Vec<&SourceItem> = chunk.iter().map(|&i| &source[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let lr = cosine_lr(hyper.lr0, iteration, total_iters);
            let loss = train_iteration(&setup, state, &batch, &labels, &[], lr)?;
            log(IterationLog {
                step: 0,
                epoch,
                iteration,
                lr,
                loss,
            });
            iteration += 1;
        }
    }
    Ok(())
}

/// Encode raw examples into trainer items with the frozen encoder.
pub fn encode_source_items<E: TextImageEncoder>(
    enc: &E,
    examples: impl IntoIterator<Item = (crate::encoder::ImageInput, String, usize)>,
) -> Result<Vec<SourceItem>> {
    examples
        .into_iter()
        .map(|(input, id, label)| {
            let (feature, tap) = enc.encode_image(&input, &id)?;
            Ok(SourceItem { feature, tap, label })
        })
        .collect()
}

pub fn encode_target_items<E: TextImageEncoder>(
    enc: &E,
    examples: impl IntoIterator<Item = (crate::encoder::ImageInput, String)>,
) -> Result<Vec<TargetItem>> {
    examples
        .into_iter()
        .map(|(input, id)| {
            let (feature, tap) = enc.encode_image(&input, &id)?;
            Ok(TargetItem { feature, tap })
        })
        .collect()
}
