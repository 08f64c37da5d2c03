//! The training objectives: cross-entropy classification loss, the
//! squared-masked-saliency explanation loss, the feedback-to-penalty-mask
//! transformation, and their weighted combination with L2 regularization.
//!
//! Each loss exists twice: as a plain function over arrays (the reference
//! the tests check against) and as a graph attachment the trainer
//! differentiates. Both compute the same quantity.

use ndarray::{Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::decoy::AnnotatedImage;
use crate::model::ParamVars;
use crate::saliency::{SaliencyMap, SaliencyVars};
use crate::Scalar;

/// Floor under predicted probabilities before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label {got} out of range for {num_classes} classes (row {row})")]
    BadLabel { row: usize, got: u8, num_classes: usize },
    #[error("batch size mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("shape mismatch at row {row}: saliency {sal:?} vs mask {mask:?}")]
    ShapeMismatch { row: usize, sal: (usize, usize), mask: (usize, usize) },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// The three training regimes.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackType {
    None,
    MissingRegion,
    SpuriousRegion,
}

impl FeedbackType {
    pub const ALL: [FeedbackType; 3] =
        [FeedbackType::None, FeedbackType::MissingRegion, FeedbackType::SpuriousRegion];
}

impl std::fmt::Display for FeedbackType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeedbackType::None => "none",
            FeedbackType::MissingRegion => "missing_region",
            FeedbackType::SpuriousRegion => "spurious_region",
        })
    }
}

impl std::str::FromStr for FeedbackType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FeedbackType::None),
            "missing" | "missing_region" => Ok(FeedbackType::MissingRegion),
            "spurious" | "spurious_region" => Ok(FeedbackType::SpuriousRegion),
            other => Err(format!("unknown feedback type {other:?}")),
        }
    }
}

/// The binary mask fed to the explanation loss: saliency inside it is
/// penalized.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PenaltyMask {
    pub values: Array2<u8>,
    pub feedback_type: FeedbackType,
}

/// Derives the penalty mask for one feedback type:
/// spurious-region feedback penalizes saliency on the confounder patch,
/// missing-region feedback penalizes saliency anywhere outside the
/// annotated object (driving attention onto it).
///
/// Returns `None` exactly for [`FeedbackType::None`], which has no mask and
/// whose training path never touches saliency.
pub fn feedback_to_penalty_mask(
    image: &AnnotatedImage,
    feedback_type: FeedbackType,
) -> Option<PenaltyMask> {
    let values = match feedback_type {
        FeedbackType::None => return None,
        FeedbackType::SpuriousRegion => image.spurious_mask.clone(),
        FeedbackType::MissingRegion => image.object_mask.mapv(|m| 1 - m),
    };
    Some(PenaltyMask { values, feedback_type })
}

/// Mean over the batch of `-log(probability of the true class)`, with the
/// probability floored at [`PROBABILITY_FLOOR`].
pub fn classification_loss<T: Scalar>(
    probabilities: &Array2<T>,
    labels: &[u8],
) -> Result<T, ObjectiveError> {
    let (b, k) = probabilities.dim();
    if b != labels.len() {
        return Err(ObjectiveError::BatchMismatch { left: b, right: labels.len() });
    }
    let floor = T::from_f64_lossy(PROBABILITY_FLOOR);
    let mut total = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        if label as usize >= k {
            return Err(ObjectiveError::BadLabel { row, got: label, num_classes: k });
        }
        let p = probabilities[(row, label as usize)].max(floor);
        total = total - p.ln();
    }
    Ok(total / T::from_f64_lossy(b as f64))
}

/// Mean over the batch of the per-image sum over pixels of the squared
/// masked saliency, `sum((M * s)^2)`.
pub fn explanation_loss<T: Scalar>(
    saliency: &[SaliencyMap<T>],
    masks: &[PenaltyMask],
) -> Result<T, ObjectiveError> {
    if saliency.len() != masks.len() {
        return Err(ObjectiveError::BatchMismatch { left: saliency.len(), right: masks.len() });
    }
    let mut total = T::zero();
    for (row, (s, m)) in saliency.iter().zip(masks).enumerate() {
        if s.values.dim() != m.values.dim() {
            return Err(ObjectiveError::ShapeMismatch {
                row,
                sal: s.values.dim(),
                mask: m.values.dim(),
            });
        }
        for (&sv, &mv) in s.values.iter().zip(m.values.iter()) {
            if mv != 0 {
                total = total + sv * sv;
            }
        }
    }
    Ok(total / T::from_f64_lossy(saliency.len() as f64))
}

/// Per-step record of every loss component. The invariant
/// `total = classification + explanation_weight * explanation + lambda * l2`
/// holds exactly in `f64`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct LossBreakdown {
    pub classification: f64,
    pub explanation: f64,
    pub l2: f64,
    pub total: f64,
    pub lambda: f64,
    pub explanation_weight: f64,
}

/// Combines the component losses. For [`FeedbackType::None`] the
/// explanation term is exactly zero regardless of the argument.
pub fn total_loss(
    classification: f64,
    explanation: f64,
    l2: f64,
    lambda: f64,
    explanation_weight: f64,
    feedback: FeedbackType,
) -> Result<LossBreakdown, ObjectiveError> {
    if lambda < 0.0 {
        return Err(ObjectiveError::InvalidConfig(format!("negative lambda {lambda}")));
    }
    if explanation_weight < 0.0 {
        return Err(ObjectiveError::InvalidConfig(format!(
            "negative explanation_weight {explanation_weight}"
        )));
    }
    let explanation = if feedback == FeedbackType::None { 0.0 } else { explanation };
    Ok(LossBreakdown {
        classification,
        explanation,
        l2,
        total: classification + explanation_weight * explanation + lambda * l2,
        lambda,
        explanation_weight,
    })
}

/// Cross-entropy from logits on the graph, as
/// `mean(logsumexp(logits) - logit_true)` with a detached row-max shift:
/// equal to the floored-probability form everywhere the floor is inactive,
/// and finite even where a probability would underflow.
pub fn attach_classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u32],
) -> Var {
    let rows = g.value(logits).shape()[0];
    assert_eq!(rows, labels.len());
    let shift = {
        let v = g.value(logits);
        let mut m = ArrayD::zeros(IxDyn(&[rows, 1]));
        for i in 0..rows {
            let mut best = T::neg_infinity();
            for j in 0..v.shape()[1] {
                best = best.max(v[[i, j]]);
            }
            m[[i, 0]] = best;
        }
        g.constant(m)
    };
    let z = g.sub_col(logits, shift);
    let e = g.exp(z);
    let denom = g.sum_axis1(e);
    let lse0 = g.ln(denom);
    let lse = g.add(lse0, shift);
    let picked = g.gather_cols(logits, labels);
    let nll = g.sub(lse, picked);
    g.mean_all(nll)
}

/// Explanation loss on the graph over flattened `[B, P]` saliency maps and
/// a constant `[B, P]` mask batch.
pub fn attach_explanation_loss<T: Scalar>(
    g: &mut Graph<T>,
    saliency: &SaliencyVars,
    masks: Var,
) -> Var {
    let masked = g.mul(saliency.maps, masks);
    let sq = g.mul(masked, masked);
    let per_image = g.sum_axis1(sq);
    g.mean_all(per_image)
}

/// `sum_i theta_i^2` over every parameter array.
pub fn attach_l2<T: Scalar>(g: &mut Graph<T>, params: &ParamVars) -> Var {
    let terms: Vec<Var> = params
        .0
        .iter()
        .map(|&p| {
            let sq = g.mul(p, p);
            g.sum_all(sq)
        })
        .collect();
    g.add_n(&terms)
}

/// Uploads penalty masks as one constant `[B, side*side]` node.
pub fn masks_to_node<T: Scalar>(g: &mut Graph<T>, masks: &[PenaltyMask]) -> Var {
    let b = masks.len();
    let p = masks[0].values.len();
    let mut flat = Vec::with_capacity(b * p);
    for m in masks {
        flat.extend(m.values.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    g.constant(ArrayD::from_shape_vec(IxDyn(&[b, p]), flat).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::decoy::{generate_decoy, CleanSet, Corner, DecoySpec, Split, IMAGE_SIDE};
    use crate::model::{attach_forward, insert_params, ModelParameters, NetworkConfig};
    use crate::saliency::{attach_gradcam, Normalization};
    use ndarray::{arr2, Array4};

    fn map_of(values: Array2<f64>) -> SaliencyMap<f64> {
        SaliencyMap {
            values,
            target_class: 0,
            normalization: Normalization::MinMax,
            degenerate: false,
        }
    }

    fn mask_of(values: Array2<u8>) -> PenaltyMask {
        PenaltyMask { values, feedback_type: FeedbackType::SpuriousRegion }
    }

    #[test]
    fn classification_loss_examples() {
        // probability 1.0 on the true class
        let p = arr2(&[[0.0, 1.0, 0.0]]);
        assert_eq!(classification_loss(&p, &[1]).unwrap(), 0.0);

        // uniform over 10 classes -> ln 10
        let p = Array2::from_elem((2, 10), 0.1);
        let got = classification_loss(&p, &[3, 7]).unwrap();
        assert!((got - 10f64.ln()).abs() < 1e-12);
        assert!((got - 2.302585).abs() < 1e-6);

        // direct scalar evaluation
        let p: Array2<f64> = arr2(&[[0.7, 0.2, 0.1]]);
        let got = classification_loss(&p, &[1]).unwrap();
        assert!((got - 1.609438).abs() < 1e-6);

        // floored at 1e-12
        let p = arr2(&[[1.0, 0.0]]);
        let got = classification_loss(&p, &[1]).unwrap();
        assert!((got + PROBABILITY_FLOOR.ln()).abs() < 1e-9);

        assert!(matches!(
            classification_loss(&p, &[2]),
            Err(ObjectiveError::BadLabel { row: 0, got: 2, .. })
        ));
    }

    #[test]
    fn classification_loss_is_mean_of_per_sample_losses() {
        let p: Array2<f64> = arr2(&[[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]]);
        let labels = [0u8, 1, 2];
        let batch = classification_loss(&p, &labels).unwrap();
        let mut per_sample_sum = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = p.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            per_sample_sum += classification_loss(&row, &[l]).unwrap();
        }
        assert!((batch - per_sample_sum / 3.0).abs() < 1e-12);
    }

    fn cross_clean(n: usize) -> CleanSet {
        let images = (0..n)
            .map(|_| {
                Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(i, j)| {
                    if (8..20).contains(&i) && (8..20).contains(&j) {
                        150
                    } else {
                        0
                    }
                })
            })
            .collect();
        CleanSet::new(images, (0..n).map(|i| (i % 10) as u8).collect())
    }

    #[test]
    fn penalty_mask_examples() {
        let clean = cross_clean(4);
        let spec = DecoySpec::classwise(0);
        let bundle = generate_decoy(&clean, &spec, Split::Train).unwrap();
        // label 1 -> TR; spurious mask has 16 ones exactly at TR
        let img = &bundle.images[1];
        assert_eq!(img.corner, Corner::TopRight);
        let spurious = feedback_to_penalty_mask(img, FeedbackType::SpuriousRegion).unwrap();
        assert_eq!(spurious.values, img.spurious_mask);
        assert_eq!(spurious.values.iter().filter(|&&m| m == 1).count(), 16);

        // missing-region mask is the object complement
        let missing = feedback_to_penalty_mask(img, FeedbackType::MissingRegion).unwrap();
        for ((i, j), &m) in missing.values.indexed_iter() {
            assert_eq!(m, 1 - img.object_mask[(i, j)]);
        }

        // spurious mask is always a subset of the missing mask
        for img in &bundle.images {
            let s = feedback_to_penalty_mask(img, FeedbackType::SpuriousRegion).unwrap();
            let m = feedback_to_penalty_mask(img, FeedbackType::MissingRegion).unwrap();
            for (sv, mv) in s.values.iter().zip(m.values.iter()) {
                assert!(sv <= mv);
            }
        }

        assert!(feedback_to_penalty_mask(&bundle.images[0], FeedbackType::None).is_none());
    }

    #[test]
    fn missing_mask_of_fully_covered_image_is_the_patch() {
        // object covers everything except the patch, so the complement is
        // exactly the 16 patch pixels
        let full = CleanSet::new(
            vec![Array2::from_elem((IMAGE_SIDE, IMAGE_SIDE), 200u8)],
            vec![0],
        );
        let bundle = generate_decoy(&full, &DecoySpec::classwise(0), Split::Train).unwrap();
        let img = &bundle.images[0];
        let missing = feedback_to_penalty_mask(img, FeedbackType::MissingRegion).unwrap();
        assert_eq!(missing.values, img.spurious_mask);
    }

    #[test]
    fn explanation_loss_examples() {
        let side = IMAGE_SIDE;
        // saliency zero on every masked pixel -> 0
        let mut sal = Array2::zeros((side, side));
        sal[(10, 10)] = 0.9; // nonzero only outside the mask
        let mut mask = Array2::zeros((side, side));
        mask[(0, 0)] = 1;
        let loss = explanation_loss(&[map_of(sal)], &[mask_of(mask)]).unwrap();
        assert_eq!(loss, 0.0);

        // all-ones mask and saliency -> one per pixel
        let loss = explanation_loss(
            &[map_of(Array2::from_elem((side, side), 1.0))],
            &[mask_of(Array2::from_elem((side, side), 1u8))],
        )
        .unwrap();
        assert_eq!(loss, (side * side) as f64);

        // two masked pixels at 0.5 and 1.0 -> 0.25 + 1.0
        let mut sal = Array2::zeros((side, side));
        sal[(3, 4)] = 0.5;
        sal[(20, 21)] = 1.0;
        let mut mask = Array2::zeros((side, side));
        mask[(3, 4)] = 1;
        mask[(20, 21)] = 1;
        let loss = explanation_loss(&[map_of(sal)], &[mask_of(mask)]).unwrap();
        assert!((loss - 1.25).abs() < 1e-12);

        // shape mismatch
        let err = explanation_loss(
            &[map_of(Array2::zeros((4, 4)))],
            &[mask_of(Array2::zeros((5, 5)))],
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::ShapeMismatch { .. }));
    }

    #[test]
    fn explanation_loss_monotone_in_masked_saliency() {
        let mut sal = Array2::from_elem((6, 6), 0.2);
        let mut mask = Array2::zeros((6, 6));
        mask[(2, 2)] = 1;
        mask[(4, 1)] = 1;
        let base = explanation_loss(&[map_of(sal.clone())], &[mask_of(mask.clone())]).unwrap();
        sal[(2, 2)] = 0.7;
        let bumped = explanation_loss(&[map_of(sal.clone())], &[mask_of(mask.clone())]).unwrap();
        assert!(bumped > base);
        // bumping an unmasked pixel changes nothing
        sal[(0, 0)] = 0.99;
        let same = explanation_loss(&[map_of(sal)], &[mask_of(mask)]).unwrap();
        assert_eq!(same, bumped);
    }

    #[test]
    fn total_loss_examples() {
        // feedback none zeroes the explanation term
        let b = total_loss(2.0, 123.0, 10.0, 1e-4, 1.0, FeedbackType::None).unwrap();
        assert_eq!(b.explanation, 0.0);
        assert!((b.total - (2.0 + 1e-4 * 10.0)).abs() < 1e-15);

        // lambda = 0, weight = 1
        let b = total_loss(1.5, 0.25, 99.0, 0.0, 1.0, FeedbackType::SpuriousRegion).unwrap();
        assert_eq!(b.total, 1.75);

        // direct arithmetic
        let b = total_loss(1.0, 0.5, 2.0, 0.1, 1.0, FeedbackType::MissingRegion).unwrap();
        assert!((b.total - 1.7).abs() < 1e-15);
        assert_eq!(b.total, b.classification + b.explanation_weight * b.explanation + b.lambda * b.l2);

        assert!(total_loss(1.0, 0.0, 0.0, -0.1, 1.0, FeedbackType::None).is_err());
        assert!(total_loss(1.0, 0.0, 0.0, 0.1, -1.0, FeedbackType::None).is_err());
    }

    #[test]
    fn graph_losses_match_reference_implementations() {
        let config = NetworkConfig::downsized();
        let params = ModelParameters::<f64>::init(&config, 13).unwrap();
        let batch = Array4::from_shape_fn((3, 1, 8, 8), |(n, _, i, j)| {
            ((n * 17 + i * 5 + j * 11) % 13) as f64 / 13.0
        });
        let labels = [2u8, 9, 4];
        let labels32: Vec<u32> = labels.iter().map(|&l| u32::from(l)).collect();

        let mut g = Graph::new();
        let x = g.constant(batch.into_dyn());
        let pv = insert_params(&mut g, &params);
        let f = attach_forward(&mut g, &config, &pv, x);
        let ce = attach_classification_loss(&mut g, f.logits, &labels32);
        let probs: Array2<f64> = g.value(f.probabilities).clone().into_dimensionality().unwrap();
        let reference = classification_loss(&probs, &labels).unwrap();
        assert!((g.scalar_value(ce) - reference).abs() < 1e-12);

        // l2 attachment equals the direct sum of squares
        let l2 = attach_l2(&mut g, &pv);
        let direct: f64 = params.entries().iter().map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>()).sum();
        assert!((g.scalar_value(l2) - direct).abs() < 1e-9);
    }

    /// Central finite differences of the combined objective against the
    /// analytic gradients, over every parameter element.
    ///
    /// The test point must sit away from the map-degeneracy boundary: for
    /// narrow networks the rectified channel-weighted sum flips between
    /// all-zero and nonzero when a channel weight crosses zero, and the
    /// loss is genuinely discontinuous there. The configurations below were
    /// screened for comfortable margin.
    fn fd_check_total_loss(
        config: &NetworkConfig,
        params: &ModelParameters<f64>,
        labels: &[u32],
        tol: f64,
    ) {
        let side = config.input_side;
        let batch = Array4::from_shape_fn((2, 1, side, side), |(n, _, i, j)| {
            ((n * 29 + i * 13 + j * 7) % 19) as f64 / 19.0
        });
        let mask_batch = Array2::from_shape_fn((2, side * side), |(_, p)| {
            f64::from(u8::from(p % 3 == 0))
        });
        let lambda = 1e-3;
        let weight = 0.7;

        let build = |g: &mut Graph<f64>, pv: &ParamVars| -> Var {
            let x = g.constant(batch.clone().into_dyn());
            let f = attach_forward(g, config, pv, x);
            let ce = attach_classification_loss(g, f.logits, labels);
            let sal = attach_gradcam(g, &f, labels, side);
            assert!(sal.degenerate.iter().all(|&d| !d), "test point must be non-degenerate");
            let masks = g.constant(mask_batch.clone().into_dyn());
            let expl = attach_explanation_loss(g, &sal, masks);
            let l2 = attach_l2(g, pv);
            let expl_w = g.scalar_mul(expl, weight);
            let l2_w = g.scalar_mul(l2, lambda);
            g.add_n(&[ce, expl_w, l2_w])
        };

        let eval = |p: &ModelParameters<f64>| -> f64 {
            let mut g = Graph::new();
            let pv = insert_params(&mut g, p);
            let total = build(&mut g, &pv);
            g.scalar_value(total)
        };

        let mut g = Graph::new();
        let pv = insert_params(&mut g, params);
        let total = build(&mut g, &pv);
        let grads = g.backward(total, &pv.0);

        let h = 1e-5;
        for (pi, (name, arr)) in params.entries().iter().enumerate() {
            let grad = grads[pi].map(|v| g.value(v).clone());
            for idx in 0..arr.len() {
                let mut plus = params.clone();
                plus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] += h;
                let mut minus = params.clone();
                minus.entries_mut()[pi].1.as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grad.as_ref().map_or(0.0, |a| a.as_slice().unwrap()[idx]);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "{name}[{idx}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    /// One channel per layer, 8x8 input, batch of 2: the combined loss
    /// gradient, including the double-backprop path through the saliency
    /// construction, matches finite differences everywhere.
    ///
    /// Targets are class 8 for both rows: that choice gives the GradCAM
    /// channel weight a comfortable positive margin, keeping the finite
    /// differences off the degenerate-map discontinuity.
    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let config = NetworkConfig::downsized();
        let params = ModelParameters::<f64>::init(&config, 0).unwrap();
        fd_check_total_loss(&config, &params, &[8, 8], 1e-3);
    }

    /// With several conv-3 channels the saliency map depends on the
    /// relative channel weights, so this variant drives real gradient
    /// through the inner-backward subgraph rather than a cancelling one.
    #[test]
    fn multichannel_total_loss_gradient_matches_finite_differences() {
        let config = NetworkConfig {
            conv_channels: (1, 2, 3),
            kernel_size: 3,
            fc_hidden: 4,
            num_classes: 10,
            input_side: 8,
            pool_stages: (true, true),
        };
        let params = ModelParameters::<f64>::init(&config, 10).unwrap();
        fd_check_total_loss(&config, &params, &[1, 6], 1e-3);
    }
}
