//! GradCAM attribution maps at input resolution.
//!
//! The channel weights are the spatial means of the target-class logit's
//! gradient with respect to the retained conv-3 activations; the weighted,
//! rectified channel sum is upsampled bilinearly to the input resolution
//! and min-max normalized per map. The whole construction stays on the
//! autodiff graph, so the resulting map is differentiable with respect to
//! the model parameters - the property the explanation loss relies on.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::autodiff::{BilinearMap, Graph, Var};
use crate::model::{attach_forward, insert_params, ForwardVars, ModelParameters};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("target class {got} out of range (num_classes = {num_classes})")]
    BadTargetClass { got: usize, num_classes: usize },
    #[error("image has shape {got_h}x{got_w}, expected {side}x{side}")]
    BadImageShape { got_h: usize, got_w: usize, side: usize },
    #[error("normalize_map input contains NaN")]
    NanInput,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How a raw attribution map was squashed into `[0,1]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Normalization {
    MinMax,
}

/// A normalized per-pixel attribution map at input resolution.
#[derive(Clone, Debug)]
pub struct SaliencyMap<T: Scalar> {
    /// `side x side`, values in `[0,1]` (all zero when degenerate).
    pub values: Array2<T>,
    pub target_class: usize,
    pub normalization: Normalization,
    /// Set when the raw map had zero range (e.g. every channel dead), in
    /// which case `values` is all zeros rather than a division by zero.
    pub degenerate: bool,
}

/// Graph handles for a batch of saliency maps.
pub struct SaliencyVars {
    /// `[B, side*side]` normalized maps (degenerate rows forced to zero).
    pub maps: Var,
    /// Per-row degenerate-normalization flags, decided eagerly.
    pub degenerate: Vec<bool>,
}

/// Min-max normalization of a batch of flattened maps already on the graph.
/// Degenerate rows (zero range) come out as all zeros and are flagged.
pub fn attach_normalize<T: Scalar>(g: &mut Graph<T>, flat: Var) -> SaliencyVars {
    let rows = g.value(flat).shape()[0];
    let mn = g.min_axis1(flat);
    let mx = g.max_axis1(flat);
    let range = g.sub(mx, mn);
    let mut degenerate = Vec::with_capacity(rows);
    let mut guard = ArrayD::zeros(IxDyn(&[rows, 1]));
    let mut keep = ArrayD::zeros(IxDyn(&[rows, 1]));
    {
        let rv = g.value(range);
        for i in 0..rows {
            let deg = rv[[i, 0]] <= T::zero();
            degenerate.push(deg);
            guard[[i, 0]] = if deg { T::one() } else { T::zero() };
            keep[[i, 0]] = if deg { T::zero() } else { T::one() };
        }
    }
    // guard keeps the denominator nonzero on degenerate rows; keep then
    // zeroes those rows out entirely
    let guard = g.constant(guard);
    let keep = g.constant(keep);
    let denom = g.add(range, guard);
    let centred = g.sub_col(flat, mn);
    let scaled = g.div_col(centred, denom);
    let maps = g.mul_col(scaled, keep);
    SaliencyVars { maps, degenerate }
}

/// Builds GradCAM maps for every row of a forward pass, one target class
/// per row. Returns `[B, side*side]` maps that remain differentiable with
/// respect to the parameters behind `forward`.
pub fn attach_gradcam<T: Scalar>(
    g: &mut Graph<T>,
    forward: &ForwardVars,
    targets: &[u32],
    out_side: usize,
) -> SaliencyVars {
    let act_shape = g.value(forward.activations).shape().to_vec();
    let (batch, in_h, in_w) = (act_shape[0], act_shape[2], act_shape[3]);
    assert_eq!(batch, targets.len(), "one target class per batch row");

    let picked = g.gather_cols(forward.logits, targets);
    let score = g.sum_all(picked);
    let grad_acts = g
        .backward(score, &[forward.activations])[0]
        .expect("class score depends on the activations");
    let alpha = g.mean_spatial(grad_acts);
    let weighted = g.mul_chan(forward.activations, alpha);
    let summed = g.sum_channels(weighted);
    let raw = g.relu(summed);
    let up = g.bilinear(raw, Rc::new(BilinearMap::new(in_h, in_w, out_side, out_side)));
    let flat = g.reshape(up, &[batch, out_side * out_side]);
    attach_normalize(g, flat)
}

/// GradCAM map of a single image for `target_class`.
pub fn gradcam<T: Scalar>(
    params: &ModelParameters<T>,
    image: &Array2<T>,
    target_class: usize,
) -> Result<SaliencyMap<T>, SaliencyError> {
    let config = &params.config;
    let side = config.input_side;
    if target_class >= config.num_classes {
        return Err(SaliencyError::BadTargetClass {
            got: target_class,
            num_classes: config.num_classes,
        });
    }
    let (h, w) = image.dim();
    if h != side || w != side {
        return Err(SaliencyError::BadImageShape { got_h: h, got_w: w, side });
    }
    let mut g: Graph<T> = Graph::new();
    let x = g.constant(image.clone().into_shape(IxDyn(&[1, 1, side, side])).unwrap());
    let pv = insert_params(&mut g, params);
    let f = attach_forward(&mut g, config, &pv, x);
    let sal = attach_gradcam(&mut g, &f, &[target_class as u32], side);
    let values =
        g.value(sal.maps).clone().into_shape(IxDyn(&[side, side])).unwrap().into_dimensionality().unwrap();
    Ok(SaliencyMap {
        values,
        target_class,
        normalization: Normalization::MinMax,
        degenerate: sal.degenerate[0],
    })
}

/// Min-max normalization of a raw nonnegative map: `(raw - min) / (max -
/// min)` when the range is positive, otherwise all zeros with the
/// degenerate flag set.
pub fn normalize_map<T: Scalar>(raw: &Array2<T>) -> Result<(Array2<T>, bool), SaliencyError> {
    if raw.iter().any(|x| x.is_nan()) {
        return Err(SaliencyError::NanInput);
    }
    let mn = raw.iter().copied().fold(T::infinity(), T::min);
    let mx = raw.iter().copied().fold(T::neg_infinity(), T::max);
    if mx > mn {
        Ok((raw.mapv(|x| (x - mn) / (mx - mn)), false))
    } else {
        Ok((Array2::zeros(raw.dim()), true))
    }
}

/// Writes a map as an 8-bit grayscale PNG for inspection.
pub fn save_png<T: Scalar>(map: &SaliencyMap<T>, path: &Path) -> Result<(), SaliencyError> {
    let (h, w) = map.values.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((i, j), &v) in map.values.indexed_iter() {
        let byte = (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(j as u32, i as u32, image::Luma([byte]));
    }
    img.save(path).map_err(|e| SaliencyError::Io {
        path: path.display().to_string(),        source: std::io::Error::new(std::io::ErrorKind::Other, e),
    })
}
