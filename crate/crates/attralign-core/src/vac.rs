//! Visual attention consistency: Grad-CAM heatmaps from CAM scores, Pearson
//! correlation between same-image heatmaps under the two dictionaries, and
//! the cross-domain attribute selection built on top.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dictionary::{AttributeDictionary, SelectionResult};
use crate::encoder::{TapActivations, TextImageEncoder, VisualFeature};
use crate::error::Error;
use crate::math::{self, Mat};
use crate::prompt::{self, CamScores};
use crate::Result;

/// Flattened nonnegative attention map over the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub grid: (usize, usize),
    pub attribute_index: usize,
}

/// Cross-domain matching output: the chosen candidate indices plus the full
/// correlation matrix for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub selected_indices: Vec<usize>,
    pub selected_scores: Vec<f64>,
    pub rho_matrix: Mat,
    pub per_index_best_rho: Vec<f64>,
}

/// Grad-CAM over the tap: channel weights are the gradient mean-pooled over
/// patch positions; each patch activation is reweighted and rectified.
/// The global token, when present, is excluded from both pooling and output.
pub fn gradcam_heatmap(
    score_grad: &Mat,
    tap: &TapActivations,
    attribute_index: usize,
) -> Result<Heatmap> {
    tap.validate()?;
    if score_grad.rows != tap.tokens.rows || score_grad.cols != tap.tokens.cols {
        return Err(Error::contract(format!(
            "gradient shape {}x{} does not match tap {}x{}",
            score_grad.rows, score_grad.cols, tap.tokens.rows, tap.tokens.cols
        )));
    }
    let patches = tap.patch_count();
    let channels = tap.tokens.cols;

    let mut alpha = alloc::vec![0.0; channels];
    for j in 0..patches {
        for (a, g) in alpha.iter_mut().zip(score_grad.row(j)) {
            *a += g;
        }
    }
    let inv = 1.0 / patches as f64;
    for a in &mut alpha {
        *a *= inv;
    }

    let values: Vec<f64> = (0..patches)
        .map(|j| math::dot(&alpha, tap.tokens.row(j)).max(0.0))
        .collect();
    Ok(Heatmap {
        values,
        grid: tap.grid,
        attribute_index,
    })
}

/// Pearson correlation between two flattened heatmaps. Zero variance on
/// either side yields 0: a constant map carries no spatial information.
pub fn pearson(h_a: &Heatmap, h_b: &Heatmap) -> Result<f64> {
    if h_a.values.len() != h_b.values.len() {
        return Err(Error::contract(format!(
            "heatmap lengths differ: {} vs {}",
            h_a.values.len(),
            h_b.values.len()
        )));
    }
    let n = h_a.values.len() as f64;
    let mean_a: f64 = h_a.values.iter().sum::<f64>() / n;
    let mean_b: f64 = h_b.values.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (a, b) in h_a.values.iter().zip(&h_b.values) {
        let da = a - mean_a;
        let db = b - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Ok(0.0);
    }
    let rho = cov / (math::sqrt(var_a) * math::sqrt(var_b));
    Ok(rho.clamp(-1.0, 1.0))
}

/// Score every candidate by its best correlation against the image's own
/// heatmaps, then keep the L distinct candidates with the highest scores
/// (ties to the lower index).
pub fn match_cross_domain(
    own_heatmaps: &[Heatmap],
    candidate_heatmaps: &[Heatmap],
) -> Result<MatchResult> {
    let l = own_heatmaps.len();
    let n = candidate_heatmaps.len();
    if l == 0 {
        return Err(Error::sizing("no own heatmaps to match"));
    }
    if l > n {
        return Err(Error::sizing(format!(
            "cannot select {l} attributes from {n} candidates"
        )));
    }
    let mut rho = Mat::zeros(l, n);
    for (i, own) in own_heatmaps.iter().enumerate() {
        for (j, cand) in candidate_heatmaps.iter().enumerate() {
            rho.set(i, j, pearson(own, cand)?);
        }
    }
    let best: Vec<f64> = (0..n)
        .map(|j| {
            (0..l)
                .map(|i| rho.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    let selected: Vec<usize> = order.into_iter().take(l).collect();
    let scores: Vec<f64> = selected.iter().map(|&j| best[j]).collect();
    let per_row_best: Vec<f64> = (0..l)
        .map(|i| {
            (0..n)
                .map(|j| rho.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(MatchResult {
        selected_indices: selected,
        selected_scores: scores,
        rho_matrix: rho,
        per_index_best_rho: per_row_best,
    })
}

pub fn heatmaps_from_cam(scores: &CamScores, tap: &TapActivations) -> Result<Vec<Heatmap>> {
    scores
        .attribute_indices
        .iter()
        .zip(&scores.tap_grads)
        .map(|(&idx, grad)| gradcam_heatmap(grad, tap, idx))
        .collect()
}

/// Full cross-domain selection for one image: heatmaps for the image's own
/// selected attributes, candidate heatmaps for every attribute of the other
/// dictionary (CAM scores normalized over that dictionary), then correlation
/// matching. Returns a selection into the other dictionary, ordered by
/// descending match score.
pub fn select_for_image<E: TextImageEncoder>(
    enc: &E,
    z: &VisualFeature,
    tap: &TapActivations,
    own_dictionary: &AttributeDictionary,
    other_dictionary: &AttributeDictionary,
    selection_own: &SelectionResult,
    tau: f64,
) -> Result<SelectionResult> {
    let own_embeds = prompt::bare_value_embeddings(enc, own_dictionary)?;
    let other_embeds = prompt::bare_value_embeddings(enc, other_dictionary)?;
    select_for_image_with_embeddings(
        enc,
        &own_embeds,
        &other_embeds,
        z,
        tap,
        other_dictionary.len(),
        selection_own,
        tau,
    )
    .map(|(sel, _)| sel)
}

/// Same as [`select_for_image`] but with precomputed bare embeddings; also
/// returns the match diagnostics. This is the variant the training loop uses.
#[allow(clippy::too_many_arguments)]
pub fn select_for_image_with_embeddings<E: TextImageEncoder>(
    enc: &E,
    own_embeds: &Mat,
    other_embeds: &Mat,
    z: &VisualFeature,
    tap: &TapActivations,
    other_len: usize,
    selection_own: &SelectionResult,
    tau: f64,
) -> Result<(SelectionResult, MatchResult)> {
    let own_cam =
        prompt::cam_scores_from_embeddings(enc, own_embeds, z, tap, selection_own, tau)?;
    let own_maps = heatmaps_from_cam(&own_cam, tap)?;

    let all = SelectionResult {
        indices: (0..other_len).collect(),
        scores: alloc::vec![0.0; other_len],
    };
    let cand_cam = prompt::cam_scores_from_embeddings(enc, other_embeds, z, tap, &all, tau)?;
    let cand_maps = heatmaps_from_cam(&cand_cam, tap)?;

    let matched = match_cross_domain(&own_maps, &cand_maps)?;
    Ok((
        SelectionResult {
            indices: matched.selected_indices.clone(),
            scores: matched.selected_scores.clone(),
        },
        matched,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Domain;
    use crate::encoder::ImageInput;
    use crate::toy::{ToyConfig, ToyEncoder};
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn map(values: Vec<f64>, idx: usize) -> Heatmap {
        Heatmap {
            grid: (1, values.len()),
            values,
            attribute_index: idx,
        }
    }

    #[test]
    fn pearson_of_a_map_with_itself_is_one() {
        let h = map(vec![0.1, 0.7, 0.3, 0.0], 0);
        assert_relative_eq!(pearson(&h, &h).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_of_affine_reversal_is_minus_one() {
        let h = map(vec![0.1, 0.7, 0.3, 0.0], 0);
        let max = 0.7;
        let rev = map(h.values.iter().map(|v| max - v).collect(), 1);
        assert_relative_eq!(pearson(&h, &rev).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn pearson_with_constant_map_is_zero() {
        let h = map(vec![0.5, 0.5, 0.5], 0);
        let other = map(vec![0.1, 0.9, 0.4], 1);
        assert_eq!(pearson(&h, &other).unwrap(), 0.0);
        assert_eq!(pearson(&other, &h).unwrap(), 0.0);
    }

    #[test]
    fn pearson_is_invariant_to_positive_affine_rescale() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let scaled: Vec<f64> = a.iter().map(|v| 3.5 * v + 0.2).collect();
            let r1 = pearson(&map(a.clone(), 0), &map(b.clone(), 1)).unwrap();
            let r2 = pearson(&map(scaled, 0), &map(b, 1)).unwrap();
            assert_relative_eq!(r1, r2, epsilon = 1e-10);
            assert!((-1.0..=1.0).contains(&r1));
        }
    }

    #[test]
    fn pearson_length_mismatch_is_a_contract_violation() {
        let a = map(vec![1.0, 2.0], 0);
        let b = map(vec![1.0, 2.0, 3.0], 1);
        assert!(matches!(pearson(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn gradcam_linear_case_by_hand() {
        // cam_score = sum_j tokens[j, 0]  =>  G[j, c] = delta_{c,0},
        // alpha = (1, 0, ...), heat_j = relu(tokens[j, 0]).
        let mut tokens = Mat::zeros(4, 3);
        for j in 0..4 {
            tokens.set(j, 0, j as f64 - 1.5); // -1.5 -0.5 0.5 1.5
            tokens.set(j, 1, 9.0);
        }
        let tap = TapActivations {
            tokens,
            grid: (2, 2),
            global_token_present: false,
        };
        let mut grad = Mat::zeros(4, 3);
        for j in 0..4 {
            grad.set(j, 0, 1.0);
        }
        let h = gradcam_heatmap(&grad, &tap, 3).unwrap();
        assert_eq!(h.values, vec![0.0, 0.0, 0.5, 1.5]);
        assert_eq!(h.attribute_index, 3);
    }

    #[test]
    fn gradcam_of_zero_tokens_is_zero() {
        let tap = TapActivations {
            tokens: Mat::zeros(4, 3),
            grid: (2, 2),
            global_token_present: false,
        };
        let grad = Mat::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
        ]);
        let h = gradcam_heatmap(&grad, &tap, 0).unwrap();
        assert!(h.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradcam_excludes_global_token_from_grid() {
        let mut tokens = Mat::zeros(5, 2);
        for j in 0..5 {
            tokens.set(j, 0, 1.0);
        }
        let tap = TapActivations {
            tokens: tokens.clone(),
            grid: (2, 2),
            global_token_present: true,
        };
        let grad = tokens;
        let h = gradcam_heatmap(&grad, &tap, 0).unwrap();
        assert_eq!(h.values.len(), 4);
    }

    #[test]
    fn gradcam_shape_mismatch_is_a_contract_violation() {
        let tap = TapActivations {
            tokens: Mat::zeros(4, 3),
            grid: (2, 2),
            global_token_present: false,
        };
        let grad = Mat::zeros(3, 3);
        assert!(matches!(
            gradcam_heatmap(&grad, &tap, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_row_matching_reduces_to_argmax() {
        let own = vec![map(vec![1.0, 0.0, 0.0, 2.0], 0)];
        let cands = vec![
            map(vec![0.0, 1.0, 2.0, 0.0], 0),
            map(vec![2.0, 0.0, 0.0, 4.0], 1),
            map(vec![1.0, 1.0, 1.0, 0.9], 2),
        ];
        let m = match_cross_domain(&own, &cands).unwrap();
        assert_eq!(m.selected_indices, vec![1]);
    }

    #[test]
    fn matching_matrix_example_selects_first_two_candidates() {
        // Construct heatmaps whose correlation matrix is approximately
        // [[0.9, 0.1, 0.2], [0.1, 0.8, 0.3]] and brute-force the 2-subsets.
        let own = vec![
            map(vec![1.0, 0.0, 0.0, 0.3], 0),
            map(vec![0.0, 1.0, 0.2, 0.0], 1),
        ];
        let cands = vec![
            map(vec![0.9, 0.1, 0.0, 0.3], 0),
            map(vec![0.1, 0.9, 0.2, 0.1], 1),
            map(vec![0.4, 0.5, 0.3, 0.2], 2),
        ];
        let m = match_cross_domain(&own, &cands).unwrap();

        // Brute force over all 2-subsets with the decided candidate score.
        let best = |j: usize| -> f64 {
            (0..2)
                .map(|i| m.rho_matrix.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let mut top: Option<(f64, Vec<usize>)> = None;
        for a in 0..3 {
            for b in (a + 1)..3 {
                let s = best(a) + best(b);
                if top.as_ref().map_or(true, |(ts, _)| s > *ts) {
                    top = Some((s, vec![a, b]));
                }
            }
        }
        let mut got = m.selected_indices.clone();
        got.sort_unstable();
        assert_eq!(got, top.unwrap().1);
    }

    #[test]
    fn identical_candidates_select_by_index_tie_break() {
        let own = vec![map(vec![1.0, 0.0, 0.5, 0.2], 0), map(vec![0.0, 1.0, 0.1, 0.4], 1)];
        let same = map(vec![0.3, 0.3, 0.9, 0.1], 0);
        let cands = vec![same.clone(), same.clone(), same.clone(), same];
        let m = match_cross_domain(&own, &cands).unwrap();
        assert_eq!(m.selected_indices, vec![0, 1]);
    }

    #[test]
    fn matching_is_permutation_equivariant_up_to_ties() {
        let own = vec![map(vec![1.0, 0.2, 0.0, 0.4], 0)];
        let cands = vec![
            map(vec![0.9, 0.3, 0.1, 0.5], 0),
            map(vec![0.0, 1.0, 0.8, 0.1], 1),
            map(vec![0.2, 0.1, 0.9, 0.7], 2),
        ];
        let m1 = match_cross_domain(&own, &cands).unwrap();
        let perm = vec![cands[2].clone(), cands[0].clone(), cands[1].clone()];
        let m2 = match_cross_domain(&own, &perm).unwrap();
        // index j in original corresponds to (j + 1) % 3 in permuted
        let remap = |j: usize| (j + 1) % 3;
        assert_eq!(m2.selected_indices[0], remap(m1.selected_indices[0]));
    }

    #[test]
    fn oversized_selection_is_a_sizing_error() {
        let own = vec![map(vec![1.0, 0.0], 0), map(vec![0.0, 1.0], 1)];
        let cands = vec![map(vec![1.0, 0.0], 0)];
        assert!(matches!(
            match_cross_domain(&own, &cands),
            Err(Error::Sizing(_))
        ));
    }

    fn toy_setup(
        seed: u64,
        n: usize,
    ) -> (
        ToyEncoder,
        AttributeDictionary,
        AttributeDictionary,
        VisualFeature,
        TapActivations,
    ) {
        let enc = ToyEncoder::new(ToyConfig {
            seed,
            feature_dim: 8,
            token_dim: 8,
            ..ToyConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabc);
        let keys = Mat::from_rows(
            &(0..n)
                .map(|_| math::normalized(&math::gaussian_vec(&mut rng, 8, 1.0)))
                .collect::<Vec<_>>(),
        );
        let own = AttributeDictionary::new(Domain::Target, keys.clone(), 2, 8, 0, seed ^ 1).unwrap();
        let other = AttributeDictionary::new(Domain::Source, keys, 2, 8, 0, seed ^ 2).unwrap();
        let x = math::gaussian_vec(&mut rng, 8, 1.0);
        let (z, tap) = enc.encode_image(&ImageInput::Vector(x), "img").unwrap();
        (enc, own, other, z, tap)
    }

    #[test]
    fn identical_dictionaries_select_the_own_attributes() {
        let (enc, own, mut other, z, tap) = toy_setup(61, 6);
        for (a, b) in other.attributes.iter_mut().zip(&own.attributes) {
            a.value = b.value.clone();
        }
        let sel_own = own.select_top_l(&z, 3).unwrap();
        let cross = select_for_image(&enc, &z, &tap, &own, &other, &sel_own, 0.07).unwrap();
        let mut got = cross.indices.clone();
        got.sort_unstable();
        let mut expect = sel_own.indices.clone();
        expect.sort_unstable();
        assert_eq!(got, expect);
    }

    #[test]
    fn selecting_l_from_l_candidates_takes_all() {
        let (enc, own, other, z, tap) = toy_setup(62, 3);
        let sel_own = own.select_top_l(&z, 3).unwrap();
        let cross = select_for_image(&enc, &z, &tap, &own, &other, &sel_own, 0.07).unwrap();
        let mut got = cross.indices.clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn randomized_selection_equals_composing_the_pieces_by_hand() {
        let (enc, own, other, z, tap) = toy_setup(63, 5);
        let tau = 0.2;
        let sel_own = own.select_top_l(&z, 2).unwrap();
        let cross = select_for_image(&enc, &z, &tap, &own, &other, &sel_own, tau).unwrap();

        // Hand composition through the public constituent operations.
        let own_cam = prompt::cam_scores(&enc, &z, &tap, &own, &sel_own, tau).unwrap();
        let own_maps = heatmaps_from_cam(&own_cam, &tap).unwrap();
        let all = prompt::full_selection(&other);
        let cand_cam = prompt::cam_scores(&enc, &z, &tap, &other, &all, tau).unwrap();
        let cand_maps = heatmaps_from_cam(&cand_cam, &tap).unwrap();
        let matched = match_cross_domain(&own_maps, &cand_maps).unwrap();
        assert_eq!(cross.indices, matched.selected_indices);
    }

    #[test]
    fn heatmap_generation_leaves_values_untouched() {
        let (enc, own, other, z, tap) = toy_setup(64, 4);
        let before_own = own.values_checksum();
        let before_other = other.values_checksum();
        let sel = own.select_top_l(&z, 2).unwrap();
        let _ = select_for_image(&enc, &z, &tap, &own, &other, &sel, 0.07).unwrap();
        assert_eq!(own.values_checksum(), before_own);
        assert_eq!(other.values_checksum(), before_other);
    }
}
