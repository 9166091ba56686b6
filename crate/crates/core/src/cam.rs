//! Class activation maps for binary classifiers with a GAP + linear head.
//!
//! A raw CAM for class `c` is the channel-weighted sum of the final feature
//! grid, `cam_c(y, x) = sum_j W[c, j] * F[j, y, x]`. Because the head is a
//! global average pool followed by a linear layer, the spatial mean of `cam_c`
//! equals `logit_c - bias_c`.
//!
//! The Difference Salience map is the unit-normalized difference of the raw
//! true-class and false-class CAMs.

use crate::error::{invalid, Result};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis, Zip};

/// A 2D salience grid, either a raw activation map or a unit-normalized heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMap {
    values: Array2<f64>,
    normalized: bool,
}

impl SalienceMap {
    /// Wraps an unnormalized activation grid.
    pub fn raw(values: Array2<f64>) -> Result<Self> {
        check_finite(values.view())?;
        check_nonempty(values.view())?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps a grid that is already in `[0, 1]`.
    ///
    /// The min 0 / max 1 property is not required here; ingested heatmaps
    /// (all-zero masks, all-255 images) legitimately violate it.
    pub fn normalized(values: Array2<f64>) -> Result<Self> {
        check_finite(values.view())?;
        check_nonempty(values.view())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("normalized map value {v} outside [0, 1]"));
        }
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `(height, width)`
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.sum() / self.values.len() as f64
    }

    /// Row-major position of the first maximal cell.
    pub fn argmax(&self) -> (usize, usize) {
        let (_, w) = self.dim();
        let idx = arg_extreme(self.values.view(), |a, b| a > b);
        (idx / w, idx % w)
    }

    /// Row-major position of the first minimal cell.
    pub fn argmin(&self) -> (usize, usize) {
        let (_, w) = self.dim();
        let idx = arg_extreme(self.values.view(), |a, b| a < b);
        (idx / w, idx % w)
    }
}

fn check_finite(values: ArrayView2<'_, f64>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("salience map contains non-finite values"));
    }
    Ok(())
}

fn check_nonempty(values: ArrayView2<'_, f64>) -> Result<()> {
    if values.is_empty() {
        return Err(invalid!("salience map has zero cells"));
    }
    Ok(())
}

/// Index (row-major) of the first element that wins `better` against all others.
fn arg_extreme(values: ArrayView2<'_, f64>, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    let mut best_val = f64::NAN;
    for (i, &v) in values.iter().enumerate() {
        if i == 0 || better(v, best_val) {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Classifier outputs plus everything needed to form CAMs.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
    /// channels x height x width
    pub features: Array3<f64>,
    /// classes x channels
    pub class_weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl ModelOutput {
    /// Builds an output from logits, computing probabilities with a stable softmax.
    pub fn new(
        logits: Array1<f64>,
        features: Array3<f64>,
        class_weights: Array2<f64>,
        biases: Array1<f64>,
    ) -> Result<Self> {
        if logits.len() != 2 {
            return Err(invalid!("expected 2 logits, got {}", logits.len()));
        }
        if class_weights.nrows() != 2 || biases.len() != 2 {
            return Err(invalid!(
                "expected a 2-class head, got {} weight rows and {} biases",
                class_weights.nrows(),
                biases.len()
            ));
        }
        if class_weights.ncols() != features.dim().0 {
            return Err(invalid!(
                "classifier expects {} channels but feature grid has {}",
                class_weights.ncols(),
                features.dim().0
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite logits"));
        }
        let probabilities = softmax(logits.view());
        Ok(Self {
            logits,
            probabilities,
            features,
            class_weights,
            biases,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    /// Spatial size of the feature grid, `(height, width)`.
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.features.dim();
        (h, w)
    }
}

pub fn softmax(logits: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// `log softmax(logits)[index]`, computed without forming probabilities.
pub fn log_softmax_at(logits: ndarray::ArrayView1<'_, f64>, index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// Min-max remap to `[0, 1]`. A constant map becomes the constant 0.5 map.
pub fn normalize_unit(m: &SalienceMap) -> Result<SalienceMap> {
    check_finite(m.values())?;
    let (lo, hi) = (m.min(), m.max());
    let range = hi - lo;
    let values = if range > 0.0 {
        m.values.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
    } else {
        Array2::from_elem(m.dim(), 0.5)
    };
    Ok(SalienceMap {
        values,
        normalized: true,
    })
}

/// Vector-Jacobian product of [`normalize_unit`].
///
/// Given the raw input `m` and the upstream gradient with respect to the
/// normalized output, returns the gradient with respect to `m`. The min and max
/// are differentiated through, routed to the first arg-min / arg-max cell. A
/// constant input has zero gradient.
pub fn normalize_unit_backward(
    m: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let (_, w) = m.dim();
    let imin = arg_extreme(m, |a, b| a < b);
    let imax = arg_extreme(m, |a, b| a > b);
    let lo = m[(imin / w, imin % w)];
    let hi = m[(imax / w, imax % w)];
    let range = hi - lo;
    if range <= 0.0 {
        return Array2::zeros(m.dim());
    }
    // out_i = (m_i - lo) / r.  d out_i / d lo = (out_i - 1) / r, d out_i / d hi = -out_i / r
    let mut grad = upstream.mapv(|g| g / range);
    let mut to_lo = 0.0;
    let mut to_hi = 0.0;
    Zip::from(&m).and(&upstream).for_each(|&v, &g| {
        let out = (v - lo) / range;
        to_lo += g * (out - 1.0) / range;
        to_hi -= g * out / range;
    });
    grad[(imin / w, imin % w)] += to_lo;
    grad[(imax / w, imax % w)] += to_hi;
    grad
}

/// Raw CAM for one class: the channel-weighted sum of the feature grid.
pub fn compute_class_cam(output: &ModelOutput, class_index: usize) -> Result<SalienceMap> {
    if class_index >= output.num_classes() {
        return Err(invalid!(
            "class index {class_index} outside 0..{}",
            output.num_classes()
        ));
    }
    let (channels, _, _) = output.features.dim();
    if output.class_weights.ncols() != channels {
        return Err(invalid!(
            "weight row has {} entries but features have {channels} channels",
            output.class_weights.ncols()
        ));
    }
    let weights = output.class_weights.row(class_index);
    let mut cam = Array2::zeros(output.grid());
    for (w, channel) in weights.iter().zip(output.features.axis_iter(Axis(0))) {
        cam.scaled_add(*w, &channel);
    }
    SalienceMap::raw(cam)
}

/// `(t, f)`: the raw CAMs of the true and the false class.
pub fn compute_cam_pair(
    output: &ModelOutput,
    true_label: usize,
) -> Result<(SalienceMap, SalienceMap)> {
    if true_label > 1 {
        return Err(invalid!("label {true_label} is not binary"));
    }
    let t = compute_class_cam(output, true_label)?;
    let f = compute_class_cam(output, 1 - true_label)?;
    Ok((t, f))
}

/// Difference Salience: `normalize_unit(t - f)` over raw CAMs.
pub fn difference_salience(t: &SalienceMap, f: &SalienceMap) -> Result<SalienceMap> {
    if t.is_normalized() || f.is_normalized() {
        return Err(invalid!(
            "difference salience subtracts raw CAMs; got a normalized input"
        ));
    }
    if t.dim() != f.dim() {
        return Err(invalid!(
            "CAM dimensions differ: {:?} vs {:?}",
            t.dim(),
            f.dim()
        ));
    }
    let diff = SalienceMap::raw(&t.values - &f.values)?;
    normalize_unit(&diff)
}

/// Pulls a gradient on one class CAM back onto the features and that class's weight row.
pub(crate) fn class_cam_backward(
    output: &ModelOutput,
    class_index: usize,
    d_cam: ArrayView2<'_, f64>,
    d_features: &mut Array3<f64>,
    d_class_weights: &mut Array2<f64>,
) {
    let weights = output.class_weights.row(class_index);
    for (j, (channel, mut d_channel)) in output
        .features
        .axis_iter(Axis(0))
        .zip(d_features.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        d_class_weights[(class_index, j)] += (&channel * &d_cam).sum();
        d_channel.scaled_add(weights[j], &d_cam);
    }
}
