//! Synthetic benchmark generator: Gaussian class blobs in the toy encoder's
//! input space, with the target domain shifted by a fixed rotation plus bias.
//!
//! Class blob centers are taken from the toy encoder's own text anchors, so
//! hand-crafted prompts classify the clean source domain the way a
//! pretrained checkpoint would on a familiar dataset. Class names are chosen
//! by deterministic rejection so the anchors stay well separated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TextImageEncoder;
use crate::error::Error;
use crate::math::{self, Mat};
use crate::schedule::StepSchedule;
use crate::toy::ToyEncoder;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub classes_per_step: usize,
    pub examples_per_class: usize,
    pub noise_sigma: f64,
    /// Rotation angle (radians) applied uniformly to every target vector.
    pub shift_angle: f64,
    /// Magnitude of the fixed bias added to target vectors.
    pub shift_bias: f64,
    pub seed: u64,
    /// Anchors of distinct classes must stay below this |cosine|.
    pub max_anchor_cosine: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 12,
            classes_per_step: 4,
            examples_per_class: 200,
            noise_sigma: 0.18,
            shift_angle: 0.60,
            shift_bias: 0.20,
            seed: 1,
            max_anchor_cosine: 0.35,
        }
    }
}

/// One generated example: a raw input-space vector plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthExample {
    pub input: Vec<f64>,
    pub class: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBenchmark {
    pub class_names: Vec<String>,
    pub schedule: StepSchedule,
    pub source: Vec<SynthExample>,
    pub target: Vec<SynthExample>,
}

/// Uniform-angle rotation: every vector rotates by exactly `angle`.
fn rotation(rng: &mut ChaCha12Rng, dim: usize, angle: f64) -> Mat {
    let basis = math::random_orthonormal(rng, dim);
    // R = Q^T G Q with G block-diagonal 2x2 rotations in the Q frame.
    let c = math::cos(angle);
    let s = libm::sin(angle);
    let mut rot = Mat::zeros(dim, dim);
    let pairs = dim / 2;
    for p in 0..pairs {
        let (a, b) = (2 * p, 2 * p + 1);
        rot.set(a, a, c);
        rot.set(a, b, -s);
        rot.set(b, a, s);
        rot.set(b, b, c);
    }
    if dim % 2 == 1 {
        rot.set(dim - 1, dim - 1, 1.0);
    }
    // out = Q^T * rot * Q
    let mut tmp = Mat::zeros(dim, dim);
    for col in 0..dim {
        let qcol: Vec<f64> = (0..dim).map(|r| basis.get(r, col)).collect();
        let gq = rot.matvec(&qcol);
        for r in 0..dim {
            tmp.set(r, col, gq[r]);
        }
    }
    let mut out = Mat::zeros(dim, dim);
    for col in 0..dim {
        let tcol: Vec<f64> = (0..dim).map(|r| tmp.get(r, col)).collect();
        let qt = basis.matvec_t(&tcol);
        for r in 0..dim {
            out.set(r, col, qt[r]);
        }
    }
    out
}

/// Pick class names whose toy-encoder anchors are mutually well separated.
fn pick_class_names(enc: &ToyEncoder, config: &SynthConfig) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut names = Vec::with_capacity(config.classes);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(config.classes);
    for k in 0..config.classes {
        let mut accepted = false;
        for variant in 0..200 {
            let name = if variant == 0 {
                format!("class_{k:02}")
            } else {
                format!("class_{k:02}_v{variant}")
            };
            let anchor = math::normalized(&enc.class_anchor_input(&name));
            let ok = anchors
                .iter()
                .all(|a| math::abs(math::dot(a, &anchor)) < config.max_anchor_cosine);
            if ok {
                names.push(name);
                anchors.push(anchor);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::DegenerateInput(format!(
                "could not place {} separated class anchors in {} dims",
                config.classes,
                enc.spec().feature_dim
            )));
        }
    }
    Ok((names, anchors))
}

pub fn generate(enc: &ToyEncoder, config: &SynthConfig) -> Result<SynthBenchmark> {
    if config.classes == 0 || config.examples_per_class == 0 {
        return Err(Error::config("synthetic benchmark needs classes and examples"));
    }
    let dim = enc.spec().feature_dim;
    let (class_names, anchors) = pick_class_names(enc, config)?;
    let schedule = StepSchedule::chunked(class_names.clone(), config.classes_per_step)?;

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x73796e7468);
    let shift_rot = rotation(&mut rng, dim, config.shift_angle);
    let mut shift_dir = math::gaussian_vec(&mut rng, dim, 1.0);
    math::normalize_mut(&mut shift_dir);

    let mut source = Vec::with_capacity(config.classes * config.examples_per_class);
    let mut target = Vec::with_capacity(config.classes * config.examples_per_class);
    for (k, anchor) in anchors.iter().enumerate() {
        for i in 0..config.examples_per_class {
            let mut x = anchor.clone();
            let noise = math::gaussian_vec(&mut rng, dim, config.noise_sigma);
            math::axpy(&mut x, 1.0, &noise);
            source.push(SynthExample {
                input: x,
                class: k,
                id: format!("src/{}/{i:04}", class_names[k]),
            });

            let mut y = anchor.clone();
            let noise = math::gaussian_vec(&mut rng, dim, config.noise_sigma);
            math::axpy(&mut y, 1.0, &noise);
            let mut shifted = shift_rot.matvec(&y);
            math::axpy(&mut shifted, config.shift_bias, &shift_dir);
            target.push(SynthExample {
                input: shifted,
                class: k,
                id: format!("tgt/{}/{i:04}", class_names[k]),
            });
        }
    }

    Ok(SynthBenchmark {
        class_names,
        schedule,
        source,
        target,
    })
}
