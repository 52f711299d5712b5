//! Gateway types for the frozen image/text encoder pair.
//!
//! Backends implement [`TextImageEncoder`]: the deterministic toy backend in
//! [`crate::toy`] and the checkpoint-export backend in the companion crate.
//! Both are read-only after construction; differentiation is exposed as
//! explicit vector-Jacobian products so the losses can pull gradients back
//! onto prompt tokens and tap activations without a tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{self, Mat};
use crate::Result;

/// Structural description of a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backbone_id: String,
    /// Output feature dimension D.
    pub feature_dim: usize,
    /// Dimension of one prompt token.
    pub prompt_token_dim: usize,
    /// Patch grid (h, w) of the activation tap.
    pub patch_grid: (usize, usize),
    /// Whether the tap carries a global token in addition to the patch grid.
    pub has_global_token: bool,
    /// Softmax temperature used for class probabilities and CAM scores.
    pub temperature: f64,
    /// Maximum number of prompt tokens the text side accepts.
    pub context_limit: usize,
    /// Free-form preprocessing description; part of the cache key.
    pub preprocessing: String,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        let (h, w) = self.patch_grid;
        if h * w == 0 {
            return Err(Error::config("patch grid must be non-empty"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn tap_token_count(&self) -> usize {
        let (h, w) = self.patch_grid;
        h * w + usize::from(self.has_global_token)
    }
}

/// Unit-normalized image feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFeature {
    pub vector: Vec<f64>,
    pub source_id: String,
}

impl VisualFeature {
    /// Normalizes `vector`; rejects zero or non-finite inputs.
    pub fn new(mut vector: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite feature for {}", source_id.into())));
        }
        let n = math::normalize_mut(&mut vector);
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "zero feature vector for {}",
                source_id.into()
            )));
        }
        Ok(VisualFeature {
            vector,
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Activations captured at the designated tap layer: one row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapActivations {
    /// `tokens` is (h*w + global?) x d_tap, row-major, patch tokens first.
    pub tokens: Mat,
    pub grid: (usize, usize),
    pub global_token_present: bool,
}

impl TapActivations {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.patch_count() + usize::from(self.global_token_present);
        if self.tokens.rows != expect {
            return Err(Error::contract(format!(
                "tap has {} tokens, grid implies {}",
                self.tokens.rows, expect
            )));
        }
        Ok(())
    }
}

/// Continuous prompt: trainable context rows followed by frozen class rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    pub context_tokens: Mat,
    pub class_tokens: Mat,
}

impl SoftPrompt {
    pub fn token_count(&self) -> usize {
        self.context_tokens.rows + self.class_tokens.rows
    }

    /// Bare prompt around a single attribute value, used for CAM scores and
    /// the diversity regularizer.
    pub fn bare(value: &Mat) -> Self {
        SoftPrompt {
            context_tokens: value.clone(),
            class_tokens: Mat::zeros(0, value.cols),
        }
    }
}

/// Input accepted by `encode_image`.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// Raw vector in the backend's input space (the toy backend's "pixels").
    Vector(Vec<f64>),
    /// Identifier resolved by backends that serve precomputed encodings.
    Reference(String),
}

impl ImageInput {
    pub fn id(&self) -> String {
        match self {
            ImageInput::Vector(_) => String::from("<vector>"),
            ImageInput::Reference(id) => id.clone(),
        }
    }
}

/// Frozen encoder pair with explicit gradient hooks.
///
/// Implementations must be deterministic for fixed construction parameters,
/// and `weights_checksum` must cover every tensor that influences outputs so
/// the frozen-encoder contract can be audited around a training run.
pub trait TextImageEncoder {
    fn spec(&self) -> &EncoderSpec;

    /// Encode an image into a unit feature plus the tap activations the
    /// feature was computed from.
    fn encode_image(&self, image: &ImageInput, id: &str) -> Result<(VisualFeature, TapActivations)>;

    /// Encode a soft prompt into a unit vector.
    fn encode_text(&self, prompt: &SoftPrompt) -> Result<Vec<f64>>;

    /// Pull `dL/d(embedding)` back to `dL/d(context_tokens)`.
    /// Frozen class rows are not reported.
    fn encode_text_vjp(&self, prompt: &SoftPrompt, upstream: &[f64]) -> Result<Mat>;

    /// Pull `dL/d(feature)` back to `dL/d(tap tokens)` for the image whose
    /// tap is given. The feature must be the one produced by `encode_image`.
    fn feature_vjp(&self, tap: &TapActivations, upstream: &[f64]) -> Result<Mat>;

    /// Frozen token embedding of a class name (one or more rows).
    fn class_tokens(&self, class_name: &str) -> Mat;

    /// Embed "template applied to class name" prompts, one unit row per class.
    fn embed_handcrafted(&self, class_names: &[String], template: &str) -> Result<Mat> {
        if class_names.is_empty() {
            return Err(Error::config("class list is empty"));
        }
        let mut rows = Mat::zeros(class_names.len(), self.spec().feature_dim);
        for (k, name) in class_names.iter().enumerate() {
            let prompt = self.handcrafted_prompt(name, template)?;
            let e = self.encode_text(&prompt)?;
            rows.row_mut(k).copy_from_slice(&e);
        }
        Ok(rows)
    }

    /// Build the frozen prompt for one class under `template`
    /// (e.g. "a photo of a {}").
    fn handcrafted_prompt(&self, class_name: &str, template: &str) -> Result<SoftPrompt>;

    /// Checksum over all frozen weights.
    fn weights_checksum(&self) -> u64;
}
