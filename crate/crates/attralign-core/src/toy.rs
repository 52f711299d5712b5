//! Deterministic toy backend.
//!
//! The image side is a fixed orthonormal projection with L2 normalization,
//! plus a linear "penultimate" token tap over a 4x4 synthetic grid whose
//! token maps average back to the identity, so the feature is an exact
//! function of the tap. The text side is the mean of token embeddings
//! followed by a fixed linear map and normalization. Everything is seeded,
//! so runs are reproducible bit-for-bit and every gradient in the crate can
//! be checked against finite differences without model downloads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    EncoderSpec, ImageInput, SoftPrompt, TapActivations, TextImageEncoder, VisualFeature,
};
use crate::error::Error;
use crate::math::{self, Mat};
use crate::Result;

pub const TOY_GRID: (usize, usize) = (4, 4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub temperature: f64,
    pub context_limit: usize,
    /// Replace the random projection and text map with identities
    /// (requires `token_dim == feature_dim`). Used by closed-form tests.
    pub identity_maps: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 7,
            feature_dim: 32,
            token_dim: 32,
            temperature: 0.07,
            context_limit: 77,
            identity_maps: false,
        }
    }
}

/// Frozen toy encoder pair. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    /// Image projection, feature_dim x feature_dim, orthonormal rows.
    proj: Mat,
    /// Per-token tap maps; their mean is the identity, so the mean tap token
    /// recovers the raw input exactly.
    tap_maps: Vec<Mat>,
    /// Text map, feature_dim x token_dim, orthonormal rows.
    text_map: Mat,
    token_seed: u64,
}

impl ToyEncoder {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let d = config.feature_dim;
        if d == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if config.token_dim < d {
            return Err(Error::config(format!(
                "token_dim {} must be >= feature_dim {}",
                config.token_dim, d
            )));
        }
        if config.identity_maps && config.token_dim != d {
            return Err(Error::config(
                "identity_maps requires token_dim == feature_dim",
            ));
        }
        if config.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }

        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let proj = if config.identity_maps {
            Mat::identity(d)
        } else {
            math::random_orthonormal(&mut rng, d)
        };

        let n_tokens = TOY_GRID.0 * TOY_GRID.1;
        let mut raw: Vec<Mat> = (0..n_tokens)
            .map(|_| math::gaussian_mat(&mut rng, d, d, 0.5))
            .collect();
        let mut mean = Mat::zeros(d, d);
        for m in &raw {
            mean.add_assign(m);
        }
        mean.scale(1.0 / n_tokens as f64);
        for m in &mut raw {
            for (x, c) in m.data.iter_mut().zip(&mean.data) {
                *x -= c;
            }
        }
        for (idx, m) in raw.iter_mut().enumerate() {
            let _ = idx;
            for i in 0..d {
                m.data[i * d + i] += 1.0;
            }
        }

        let text_map = if config.identity_maps {
            Mat::identity(d)
        } else {
            // Orthonormal rows in token space: W * W^T = I, so class tokens
            // constructed as W^T f map back to f exactly.
            let full = math::random_orthonormal(&mut rng, config.token_dim);
            let mut w = Mat::zeros(d, config.token_dim);
            for i in 0..d {
                w.row_mut(i).copy_from_slice(full.row(i));
            }
            w
        };

        let spec = EncoderSpec {
            backbone_id: format!("toy-d{}-t{}-s{}", d, config.token_dim, config.seed),
            feature_dim: d,
            prompt_token_dim: config.token_dim,
            patch_grid: TOY_GRID,
            has_global_token: false,
            temperature: config.temperature,
            context_limit: config.context_limit,
            preprocessing: String::from("identity-vector"),
        };
        spec.validate()?;

        Ok(ToyEncoder {
            spec,
            proj,
            tap_maps: raw,
            text_map,
            token_seed: config.seed ^ 0x746f6b656e,
        })
    }

    pub fn with_defaults(seed: u64) -> Result<Self> {
        ToyEncoder::new(ToyConfig {
            seed,
            ..ToyConfig::default()
        })
    }

    /// Deterministic unit token embedding for a word.
    pub fn token_embedding(&self, word: &str) -> Vec<f64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.token_seed ^ h);
        let mut v = math::gaussian_vec(&mut rng, self.spec.prompt_token_dim, 1.0);
        math::normalize_mut(&mut v);
        v
    }

    /// Input-space direction whose encoded feature equals the text direction
    /// of the class token. The synthetic benchmark uses this to emulate the
    /// image/text alignment a pretrained checkpoint would provide.
    pub fn class_anchor_input(&self, class_name: &str) -> Vec<f64> {
        let token = self.class_tokens(class_name);
        let text_dir = math::normalized(&self.text_map.matvec(token.row(0)));
        self.proj.matvec_t(&text_dir)
    }

    fn check_prompt(&self, prompt: &SoftPrompt) -> Result<()> {
        let d = self.spec.prompt_token_dim;
        if prompt.context_tokens.cols != d || (prompt.class_tokens.rows > 0 && prompt.class_tokens.cols != d)
        {
            return Err(Error::contract(format!(
                "prompt token dim mismatch: expected {}",
                d
            )));
        }
        let total = prompt.token_count();
        if total == 0 {
            return Err(Error::contract("empty prompt"));
        }
        if total > self.spec.context_limit {
            return Err(Error::config(format!(
                "prompt length {} exceeds context limit {} (context {} + class {})",
                total,
                self.spec.context_limit,
                prompt.context_tokens.rows,
                prompt.class_tokens.rows
            )));
        }
        Ok(())
    }

    fn prompt_mean(&self, prompt: &SoftPrompt) -> Vec<f64> {
        let stacked = prompt.context_tokens.vstack(&prompt.class_tokens);
        stacked.row_mean()
    }
}

impl TextImageEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_image(&self, image: &ImageInput, id: &str) -> Result<(VisualFeature, TapActivations)> {
        let x = match image {
            ImageInput::Vector(v) => v,
            ImageInput::Reference(r) => {
                return Err(Error::Data(format!(
                    "toy backend cannot resolve reference input '{r}'"
                )))
            }
        };
        let d = self.spec.feature_dim;
        if x.len() != d {
            return Err(Error::config(format!(
                "input dim {} does not match backend dim {}",
                x.len(),
                d
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite input for {id}")));
        }

        let n_tokens = self.tap_maps.len();
        let mut tokens = Mat::zeros(n_tokens, d);
        for (j, map) in self.tap_maps.iter().enumerate() {
            tokens.row_mut(j).copy_from_slice(&map.matvec(x));
        }
        let tap = TapActivations {
            tokens,
            grid: TOY_GRID,
            global_token_present: false,
        };

        let mean = tap.tokens.row_mean();
        let feature = VisualFeature::new(self.proj.matvec(&mean), id)?;
        Ok((feature, tap))
    }

    fn encode_text(&self, prompt: &SoftPrompt) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        let mean = self.prompt_mean(prompt);
        let u = self.text_map.matvec(&mean);
        let n = math::norm(&u);
        if n == 0.0 {
            return Err(Error::Numerical(String::from(
                "prompt encodes to the zero vector",
            )));
        }
        Ok(math::normalized(&u))
    }

    fn encode_text_vjp(&self, prompt: &SoftPrompt, upstream: &[f64]) -> Result<Mat> {
        self.check_prompt(prompt)?;
        if upstream.len() != self.spec.feature_dim {
            return Err(Error::contract("upstream dim mismatch in encode_text_vjp"));
        }
        let mean = self.prompt_mean(prompt);
        let u = self.text_map.matvec(&mean);
        let g_u = math::normalize_vjp(&u, upstream);
        let mut g_token = self.text_map.matvec_t(&g_u);
        let total = prompt.token_count() as f64;
        for g in &mut g_token {
            *g /= total;
        }
        let mut out = Mat::zeros(prompt.context_tokens.rows, prompt.context_tokens.cols);
        for i in 0..out.rows {
            out.row_mut(i).copy_from_slice(&g_token);
        }
        Ok(out)
    }

    fn feature_vjp(&self, tap: &TapActivations, upstream: &[f64]) -> Result<Mat> {
        tap.validate()?;
        if upstream.len() != self.spec.feature_dim {
            return Err(Error::contract("upstream dim mismatch in feature_vjp"));
        }
        let mean = tap.tokens.row_mean();
        let u = self.proj.matvec(&mean);
        let g_u = math::normalize_vjp(&u, upstream);
        let mut g_mean = self.proj.matvec_t(&g_u);
        let n = tap.tokens.rows as f64;
        for g in &mut g_mean {
            *g /= n;
        }
        let mut out = Mat::zeros(tap.tokens.rows, tap.tokens.cols);
        for i in 0..out.rows {
            out.row_mut(i).copy_from_slice(&g_mean);
        }
        Ok(out)
    }

    fn class_tokens(&self, class_name: &str) -> Mat {
        Mat::from_rows(&[self.token_embedding(class_name)])
    }

    fn handcrafted_prompt(&self, class_name: &str, template: &str) -> Result<SoftPrompt> {
        let mut context_rows: Vec<Vec<f64>> = Vec::new();
        let mut saw_placeholder = false;
        for word in template.split_whitespace() {
            if word == "{}" {
                saw_placeholder = true;
            } else if !saw_placeholder {
                context_rows.push(self.token_embedding(word));
            } else {
                // Words after the class slot still count as context here; the
                // toy text encoder is order-insensitive so position is moot.
                context_rows.push(self.token_embedding(word));
            }
        }
        let context = if context_rows.is_empty() {
            Mat::zeros(0, self.spec.prompt_token_dim)
        } else {
            Mat::from_rows(&context_rows)
        };
        Ok(SoftPrompt {
            context_tokens: context,
            class_tokens: self.class_tokens(class_name),
        })
    }

    fn weights_checksum(&self) -> u64 {
        let seed_bits = [f64::from_bits(self.token_seed)];
        let chunks = core::iter::once(self.proj.data.as_slice())
            .chain(self.tap_maps.iter().map(|m| m.data.as_slice()))
            .chain(core::iter::once(self.text_map.data.as_slice()))
            .chain(core::iter::once(seed_bits.as_slice()));
        math::checksum_f64s(chunks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn identity_toy() -> ToyEncoder {
        ToyEncoder::new(ToyConfig {
            seed: 5,
            feature_dim: 8,
            token_dim: 8,
            identity_maps: true,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_projection_maps_basis_vector_to_itself() {
        let enc = identity_toy();
        let mut x = vec![0.0; 8];
        x[1] = 1.0;
        let (feat, tap) = enc.encode_image(&ImageInput::Vector(x.clone()), "u1").unwrap();
        for (i, v) in feat.vector.iter().enumerate() {
            assert_relative_eq!(*v, x[i], epsilon = 1e-10);
        }
        assert_eq!(tap.tokens.rows, 16);
        assert_relative_eq!(math::norm(&feat.vector), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn encoding_is_scale_invariant() {
        let enc = ToyEncoder::with_defaults(9).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let doubled: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let (f1, _) = enc.encode_image(&ImageInput::Vector(x), "a").unwrap();
        let (f2, _) = enc.encode_image(&ImageInput::Vector(doubled), "b").unwrap();
        for (a, b) in f1.vector.iter().zip(&f2.vector) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn encoding_twice_is_bitwise_identical() {
        let enc = ToyEncoder::with_defaults(3).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let (f1, t1) = enc.encode_image(&ImageInput::Vector(x.clone()), "a").unwrap();
        let (f2, t2) = enc.encode_image(&ImageInput::Vector(x), "a").unwrap();
        assert_eq!(f1.vector, f2.vector);
        assert_eq!(t1.tokens.data, t2.tokens.data);
    }

    #[test]
    fn all_context_tokens_equal_to_class_token_encode_to_that_token() {
        let enc = identity_toy();
        let c = enc.token_embedding("bicycle");
        let prompt = SoftPrompt {
            context_tokens: Mat::from_rows(&[c.clone(), c.clone(), c.clone()]),
            class_tokens: Mat::from_rows(&[c.clone()]),
        };
        let e = enc.encode_text(&prompt).unwrap();
        let expect = math::normalized(&c);
        for (a, b) in e.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn different_class_tokens_give_different_embeddings() {
        let enc = ToyEncoder::with_defaults(4).unwrap();
        let ctx = Mat::from_rows(&[enc.token_embedding("shared")]);
        let p1 = SoftPrompt {
            context_tokens: ctx.clone(),
            class_tokens: enc.class_tokens("zebra"),
        };
        let p2 = SoftPrompt {
            context_tokens: ctx,
            class_tokens: enc.class_tokens("panda"),
        };
        let e1 = enc.encode_text(&p1).unwrap();
        let e2 = enc.encode_text(&p2).unwrap();
        assert!(math::cosine(&e1, &e2) < 1.0 - 1e-6);
    }

    #[test]
    fn context_overflow_reports_lengths() {
        let enc = ToyEncoder::with_defaults(4).unwrap();
        let ctx = Mat::zeros(80, 32);
        let p = SoftPrompt {
            context_tokens: ctx,
            class_tokens: enc.class_tokens("x"),
        };
        let err = enc.encode_text(&p).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("81"), "unexpected message: {msg}");
        assert!(msg.contains("77"), "unexpected message: {msg}");
    }

    #[test]
    fn text_vjp_matches_finite_differences() {
        let enc = ToyEncoder::with_defaults(21).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let ctx = math::gaussian_mat(&mut rng, 3, 32, 0.3);
        let prompt = SoftPrompt {
            context_tokens: ctx,
            class_tokens: enc.class_tokens("anchor"),
        };
        let target = math::gaussian_vec(&mut rng, 32, 1.0);
        // scalar = cos<E_T(prompt), target>
        let e = enc.encode_text(&prompt).unwrap();
        let t_hat = math::normalized(&target);
        let upstream = math::normalize_vjp(
            &e.iter().map(|x| *x).collect::<Vec<_>>(),
            &t_hat,
        );
        // E_T output is already unit, so d cos/d e = t_hat projected; use the
        // plain chain: scalar = e . t_hat with e unit from the encoder.
        let grads = enc.encode_text_vjp(&prompt, &t_hat).unwrap();
        let _ = upstream;
        let h = 1e-6;
        for r in 0..prompt.context_tokens.rows {
            for c in 0..4 {
                let mut pp = prompt.clone();
                pp.context_tokens.set(r, c, pp.context_tokens.get(r, c) + h);
                let mut pm = prompt.clone();
                pm.context_tokens.set(r, c, pm.context_tokens.get(r, c) - h);
                let fp = math::dot(&enc.encode_text(&pp).unwrap(), &t_hat);
                let fm = math::dot(&enc.encode_text(&pm).unwrap(), &t_hat);
                let fd = (fp - fm) / (2.0 * h);
                assert_relative_eq!(grads.get(r, c), fd, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn feature_vjp_matches_finite_differences() {
        let enc = ToyEncoder::with_defaults(23).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(78);
        let x = math::gaussian_vec(&mut rng, 32, 1.0);
        let (_, tap) = enc.encode_image(&ImageInput::Vector(x), "img").unwrap();
        let target = math::normalized(&math::gaussian_vec(&mut rng, 32, 1.0));
        let grads = enc.feature_vjp(&tap, &target).unwrap();

        let score = |tap: &TapActivations| -> f64 {
            let mean = tap.tokens.row_mean();
            let z = math::normalized(&enc.proj.matvec(&mean));
            math::dot(&z, &target)
        };
        let h = 1e-6;
        for r in [0usize, 7, 15] {
            for c in [0usize, 5, 31] {
                let mut tp = tap.clone();
                tp.tokens.set(r, c, tp.tokens.get(r, c) + h);
                let mut tm = tap.clone();
                tm.tokens.set(r, c, tm.tokens.get(r, c) - h);
                let fd = (score(&tp) - score(&tm)) / (2.0 * h);
                assert_relative_eq!(grads.get(r, c), fd, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn handcrafted_embedding_is_permutation_equivariant() {
        let enc = ToyEncoder::with_defaults(6).unwrap();
        let names = vec![
            String::from("bike"),
            String::from("mug"),
            String::from("lamp"),
        ];
        let m1 = enc.embed_handcrafted(&names, "a photo of a {}").unwrap();
        let permuted = vec![names[2].clone(), names[0].clone(), names[1].clone()];
        let m2 = enc.embed_handcrafted(&permuted, "a photo of a {}").unwrap();
        assert_eq!(m1.row(2), m2.row(0));
        assert_eq!(m1.row(0), m2.row(1));
        assert_eq!(m1.row(1), m2.row(2));
    }

    #[test]
    fn empty_class_list_is_a_configuration_error() {
        let enc = ToyEncoder::with_defaults(6).unwrap();
        assert!(matches!(
            enc.embed_handcrafted(&[], "a photo of a {}"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_class_gives_single_unit_row() {
        let enc = ToyEncoder::with_defaults(6).unwrap();
        let m = enc
            .embed_handcrafted(&[String::from("monitor")], "a photo of a {}")
            .unwrap();
        assert_eq!(m.rows, 1);
        assert_relative_eq!(math::norm(m.row(0)), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn checksum_is_stable_and_seed_sensitive() {
        let a = ToyEncoder::with_defaults(1).unwrap();
        let b = ToyEncoder::with_defaults(1).unwrap();
        let c = ToyEncoder::with_defaults(2).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        assert_ne!(a.weights_checksum(), c.weights_checksum());
    }

    #[test]
    fn class_anchor_round_trips_through_the_encoder() {
        let enc = ToyEncoder::with_defaults(11).unwrap();
        let anchor = enc.class_anchor_input("calculator");
        let (feat, _) = enc
            .encode_image(&ImageInput::Vector(anchor), "anchor")
            .unwrap();
        let token = enc.class_tokens("calculator");
        let text_dir = math::normalized(&enc.text_map.matvec(token.row(0)));
        assert_relative_eq!(math::dot(&feat.vector, &text_dir), 1.0, epsilon = 1e-8);
    }
}
