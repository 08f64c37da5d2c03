//! Classification accuracy and dice-score explanation-localization
//! accuracy against the object and spurious-region annotations.
//!
//! Saliency for the dice scores always targets the image's true class and
//! is binarized at a configurable threshold before comparison with the
//! binary ground-truth masks.

use ndarray::{Array2, Array4};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::decoy::{DatasetBundle, NUM_CLASSES};
use crate::model::{attach_forward, insert_params, ModelParameters};
use crate::saliency::{attach_gradcam, SaliencyMap};
use crate::Scalar;

/// Binarization threshold on min-max-normalized maps: the midpoint.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const EVAL_BATCH: usize = 200;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shape mismatch: {left:?} vs {right:?}")]
    MaskShape { left: (usize, usize), right: (usize, usize) },
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("bundle image side {got} does not match network input side {want}")]
    SideMismatch { got: usize, want: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Dice overlap `2|a n b| / (|a| + |b|)` between binary masks; 1 when both
/// masks are empty, 0 when exactly one is.
pub fn dice(a: &Array2<u8>, b: &Array2<u8>) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::MaskShape { left: a.dim(), right: b.dim() });
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Thresholds a normalized map into a binary mask (`values >= threshold`).
/// Degenerate maps produce the empty mask.
pub fn binarize_saliency<T: Scalar>(map: &SaliencyMap<T>, threshold: f64) -> Array2<u8> {
    if map.degenerate {
        return Array2::zeros(map.values.dim());
    }
    let t = T::from_f64_lossy(threshold);
    map.values.mapv(|v| u8::from(v >= t))
}

/// Per-run metrics over a test bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    /// Fraction of argmax-correct predictions.
    pub accuracy: f64,
    /// Mean dice between the binarized true-class map and the object mask.
    pub dice_vs_object: f64,
    /// Mean dice between the binarized true-class map and the spurious mask.
    pub dice_vs_spurious: f64,
    /// Per-class (dice vs object, dice vs spurious) means.
    pub per_class_dice: [(f64, f64); NUM_CLASSES],
    pub per_class_counts: [usize; NUM_CLASSES],
    pub degenerate_map_count: usize,
}

/// One evaluated image, for the long-format CSV and the plots.
#[derive(Clone, Debug)]
pub struct PerImageDice {
    pub index: usize,
    pub label: u8,
    pub dice_object: f64,
    pub dice_spurious: f64,
    pub degenerate: bool,
}

/// Runs the classifier over the whole bundle, scoring accuracy and the two
/// dice metrics from true-class GradCAM maps binarized at `threshold`.
pub fn evaluate<T: Scalar>(
    params: &ModelParameters<T>,
    bundle: &DatasetBundle,
    threshold: f64,
) -> Result<(ExperimentResult, Vec<PerImageDice>), MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let side = params.config.input_side;
    if bundle.images.first().map_or(false, |i| i.pixels.dim().0 != side) {
        return Err(MetricsError::SideMismatch {
            got: bundle.images[0].pixels.dim().0,
            want: side,
        });
    }

    let mut correct = 0usize;
    let mut degenerate_map_count = 0usize;
    let mut per_image = Vec::with_capacity(bundle.len());
    let mut class_sums = [(0.0f64, 0.0f64); NUM_CLASSES];
    let mut per_class_counts = [0usize; NUM_CLASSES];

    let scale = T::from_f64_lossy(1.0 / 255.0);
    for (start, chunk) in bundle.images.chunks(EVAL_BATCH).enumerate().map(|(ci, c)| (ci * EVAL_BATCH, c)) {
        let b = chunk.len();
        let mut batch = Array4::<T>::zeros((b, 1, side, side));
        let mut labels = Vec::with_capacity(b);
        for (bi, img) in chunk.iter().enumerate() {
            for ((i, j), &p) in img.pixels.indexed_iter() {
                batch[(bi, 0, i, j)] = T::from_f64_lossy(f64::from(p)) * scale;
            }
            labels.push(u32::from(img.label));
        }
        let mut g: Graph<T> = Graph::new();
        let x = g.constant(batch.into_dyn());
        let pv = insert_params(&mut g, params);
        let f = attach_forward(&mut g, &params.config, &pv, x);

        // accuracy from argmax over logits
        {
            let logits = g.value(f.logits);
            for bi in 0..b {
                let mut best = T::neg_infinity();
                let mut arg = 0usize;
                for k in 0..params.config.num_classes {
                    let v = logits[[bi, k]];
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                if arg == labels[bi] as usize {
                    correct += 1;
                }
            }
        }

        let sal = attach_gradcam(&mut g, &f, &labels, side);
        let maps = g.value(sal.maps);
        let t = T::from_f64_lossy(threshold);
        for (bi, img) in chunk.iter().enumerate() {
            let degenerate = sal.degenerate[bi];
            let mut mask = Array2::<u8>::zeros((side, side));
            if !degenerate {
                for i in 0..side {
                    for j in 0..side {
                        mask[(i, j)] = u8::from(maps[[bi, i * side + j]] >= t);
                    }
                }
            } else {
                degenerate_map_count += 1;
            }
            let d_obj = dice(&mask, &img.object_mask)?;
            let d_spu = dice(&mask, &img.spurious_mask)?;
            let class = img.label as usize;
            class_sums[class].0 += d_obj;
            class_sums[class].1 += d_spu;
            per_class_counts[class] += 1;
            per_image.push(PerImageDice {
                index: start + bi,
                label: img.label,
                dice_object: d_obj,
                dice_spurious: d_spu,
                degenerate,
            });
        }
    }

    let n = bundle.len() as f64;
    let dice_vs_object = per_image.iter().map(|r| r.dice_object).sum::<f64>() / n;
    let dice_vs_spurious = per_image.iter().map(|r| r.dice_spurious).sum::<f64>() / n;
    let mut per_class_dice = [(0.0, 0.0); NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if per_class_counts[c] > 0 {
            let k = per_class_counts[c] as f64;
            per_class_dice[c] = (class_sums[c].0 / k, class_sums[c].1 / k);
        }
    }
    Ok((
        ExperimentResult {
            accuracy: correct as f64 / n,
            dice_vs_object,
            dice_vs_spurious,
            per_class_dice,
            per_class_counts,
            degenerate_map_count,
        },
        per_image,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoy::{generate_decoy, CleanSet, DecoySpec, Split, IMAGE_SIDE};
    use crate::model::NetworkConfig;
    use crate::saliency::{gradcam, Normalization};
    use ndarray::arr2;

    #[test]
    fn dice_examples() {
        let a = arr2(&[[1u8, 1], [0, 0]]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);

        let b = arr2(&[[0u8, 0], [1, 1]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);

        // |a| = 4, |b| = 4, overlap 2 -> 0.5
        let a = arr2(&[[1u8, 1, 1, 1], [0, 0, 0, 0]]);
        let b = arr2(&[[0u8, 0, 1, 1], [1, 1, 0, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);

        let narrow = arr2(&[[1u8], [0]]);
        assert!(matches!(dice(&a, &narrow), Err(MetricsError::MaskShape { .. })));
    }

    /// All 256 ordered pairs of 2x2 binary masks: symmetry, bounds, and
    /// the identity / disjoint / both-empty boundary cases.
    #[test]
    fn dice_exhaustive_over_two_by_two_masks() {
        let mask_of = |bits: usize| {
            Array2::from_shape_fn((2, 2), |(i, j)| ((bits >> (2 * i + j)) & 1) as u8)
        };
        for xa in 0..16usize {
            for xb in 0..16usize {
                let (a, b) = (mask_of(xa), mask_of(xb));
                let d = dice(&a, &b).unwrap();
                let dt = dice(&b, &a).unwrap();
                assert_eq!(d, dt, "symmetry for ({xa},{xb})");
                assert!((0.0..=1.0).contains(&d));
                if xa == 0 && xb == 0 {
                    assert_eq!(d, 1.0);
                } else if xa == 0 || xb == 0 {
                    assert_eq!(d, 0.0);
                } else if xa == xb {
                    assert_eq!(d, 1.0);
                } else if xa & xb == 0 {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn binarize_examples() {
        // thresholding a rescaled map keeps exactly the pixels >= 0.5
        let values = arr2(&[[0.0, 0.49], [0.5, 1.0]]);
        let map = SaliencyMap {
            values,
            target_class: 0,
            normalization: Normalization::MinMax,
            degenerate: false,
        };
        assert_eq!(binarize_saliency(&map, 0.5), arr2(&[[0u8, 0], [1, 1]]));

        // a non-degenerate map attains 1, so even a near-one threshold
        // keeps at least the argmax pixel
        let high = binarize_saliency(&map, 1.0 - 1e-9);
        assert_eq!(high.iter().filter(|&&m| m == 1).count(), 1);

        let degenerate = SaliencyMap {
            values: Array2::<f64>::zeros((2, 2)),
            target_class: 0,
            normalization: Normalization::MinMax,
            degenerate: true,
        };
        assert!(binarize_saliency(&degenerate, 0.5).iter().all(|&m| m == 0));
    }

    fn garment(seed: usize) -> Array2<u8> {
        Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(i, j)| {
            let inside = (6..22).contains(&i) && (6..22).contains(&j);
            if inside && (i + 2 * j + seed) % 5 != 0 {
                (60 + ((i * j + seed * 13) % 170)) as u8
            } else {
                0
            }
        })
    }

    fn small_bundle(n: usize) -> DatasetBundle {
        let clean = CleanSet::new(
            (0..n).map(garment).collect(),
            (0..n).map(|i| (i % NUM_CLASSES) as u8).collect(),
        );
        generate_decoy(&clean, &DecoySpec::random(3), Split::Test).unwrap()
    }

    fn small_params() -> ModelParameters<f64> {
        let config = NetworkConfig {
            conv_channels: (2, 2, 3),
            kernel_size: 3,
            fc_hidden: 8,
            num_classes: NUM_CLASSES,
            input_side: IMAGE_SIDE,
            pool_stages: (true, true),
        };
        ModelParameters::init(&config, 17).unwrap()
    }

    /// The batched evaluation path agrees with a per-image scalar loop
    /// built from the single-image saliency entry point.
    #[test]
    fn batched_evaluation_matches_per_image_oracle() {
        let bundle = small_bundle(50);
        let params = small_params();
        let (result, per_image) = evaluate(&params, &bundle, 0.5).unwrap();

        let mut sum_obj = 0.0;
        let mut sum_spu = 0.0;
        let scale = 1.0 / 255.0;
        for img in &bundle.images {
            let image = img.pixels.mapv(|p| f64::from(p) * scale);
            let map = gradcam(&params, &image, img.label as usize).unwrap();
            let mask = binarize_saliency(&map, 0.5);
            sum_obj += dice(&mask, &img.object_mask).unwrap();
            sum_spu += dice(&mask, &img.spurious_mask).unwrap();
        }
        let n = bundle.len() as f64;
        assert!(
            (result.dice_vs_object - sum_obj / n).abs() < 1e-9,
            "batched {} vs loop {}",
            result.dice_vs_object,
            sum_obj / n
        );
        assert!((result.dice_vs_spurious - sum_spu / n).abs() < 1e-9);
        assert_eq!(per_image.len(), bundle.len());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let bundle = small_bundle(30);
        let params = small_params();
        let (a, _) = evaluate(&params, &bundle, 0.5).unwrap();
        let (b, _) = evaluate(&params, &bundle, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_class_means_aggregate_to_global_means() {
        let bundle = small_bundle(40);
        let params = small_params();
        let (r, _) = evaluate(&params, &bundle, 0.5).unwrap();
        let n: usize = r.per_class_counts.iter().sum();
        assert_eq!(n, bundle.len());
        let weighted_obj: f64 = r
            .per_class_dice
            .iter()
            .zip(&r.per_class_counts)
            .map(|((o, _), &k)| o * k as f64)
            .sum::<f64>()
            / n as f64;
        let weighted_spu: f64 = r
            .per_class_dice
            .iter()
            .zip(&r.per_class_counts)
            .map(|((_, s), &k)| s * k as f64)
            .sum::<f64>()
            / n as f64;
        assert!((weighted_obj - r.dice_vs_object).abs() < 1e-12);
        assert!((weighted_spu - r.dice_vs_spurious).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!((0.0..=1.0).contains(&r.dice_vs_object));
        assert!((0.0..=1.0).contains(&r.dice_vs_spurious));
    }

    #[test]
    fn bad_threshold_is_rejected() {
        let bundle = small_bundle(2);
        let params = small_params();
        assert!(matches!(evaluate(&params, &bundle, 0.0), Err(MetricsError::BadThreshold(_))));
        assert!(matches!(evaluate(&params, &bundle, 1.0), Err(MetricsError::BadThreshold(_))));
    }
}
