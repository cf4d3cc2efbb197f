//! Encoder, classifier, classification losses, and the fair-classification
//! regularizer.
//!
//! The encoder is a small leaky-rectifier feed-forward map from feature
//! space to a transferable representation. The classifier is a linear map
//! whose row norms drive the fairness term: the mean squared weight norm of
//! the few-shot classes is pulled toward `alpha`, the normal-class average.
//! `alpha` is recomputed from the current weights at every step but receives
//! no gradient.

use crate::error::{Error, Result};
use crate::gan::leaky;
use crate::numerics::{Matrix, RngState};
use crate::scalar::Scalar;

/// One dense layer: output = leaky(x W^T + b).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<F> {
    /// `out x in`.
    pub w: Matrix<F>,
    /// `1 x out`.
    pub b: Matrix<F>,
}

/// Feed-forward encoder; every layer applies the leaky rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F> {
    pub layers: Vec<DenseLayer<F>>,
    pub slope: F,
}

impl<F: Scalar> EncoderParams<F> {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.cols()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.rows()).unwrap_or(0)
    }
}

/// Linear classifier; row `k` of `w_c` is the weight vector of class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<F> {
    /// `c x d_h`.
    pub w_c: Matrix<F>,
    /// Optional `1 x c` bias. The fairness term regularizes row norms only,
    /// so the default classifier has no bias.
    pub bias: Option<Matrix<F>>,
}

impl<F: Scalar> ClassifierParams<F> {
    pub fn class_count(&self) -> usize {
        self.w_c.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_c.cols()
    }
}

/// He-style random initialization of an encoder with the given layer widths
/// (`dims[0]` is the input dimension).
pub fn init_encoder<F: Scalar>(dims: &[usize], slope: F, rng: &mut RngState) -> Result<EncoderParams<F>> {
    if dims.len() < 2 {
        return Err(Error::parameter("encoder needs at least one layer".to_string()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::parameter("encoder layer widths must be positive".to_string()));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = Matrix::from_fn(fan_out, fan_in, |_, _| F::from_f64_lossy(scale * rng.normal()));
        layers.push(DenseLayer { w, b: Matrix::zeros(1, fan_out) });
    }
    Ok(EncoderParams { layers, slope })
}

/// Small random classifier weights.
pub fn init_classifier<F: Scalar>(
    class_count: usize,
    hidden_dim: usize,
    with_bias: bool,
    rng: &mut RngState,
) -> Result<ClassifierParams<F>> {
    if class_count == 0 || hidden_dim == 0 {
        return Err(Error::parameter("classifier dims must be positive".to_string()));
    }
    let scale = (1.0 / hidden_dim as f64).sqrt();
    let w_c =
        Matrix::from_fn(class_count, hidden_dim, |_, _| F::from_f64_lossy(scale * rng.normal()));
    let bias = with_bias.then(|| Matrix::zeros(1, class_count));
    Ok(ClassifierParams { w_c, bias })
}

/// Encode a batch (`n x d_x` to `n x d_h`).
pub fn encoder_forward<F: Scalar>(e: &EncoderParams<F>, x: &Matrix<F>) -> Result<Matrix<F>> {
    if x.cols() != e.input_dim() {
        return Err(Error::parameter(format!(
            "encoder input dim {} != {}",
            x.cols(),
            e.input_dim()
        )));
    }
    let mut h = x.clone();
    for layer in &e.layers {
        let mut z = h.matmul_opt(&layer.w, false, true);
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(layer.b.row(0)) {
                *v = leaky(*v + *b, e.slope);
            }
        }
        h = z;
    }
    Ok(h)
}

/// Class logits for a batch of representations.
pub fn logits<F: Scalar>(cl: &ClassifierParams<F>, h: &Matrix<F>) -> Result<Matrix<F>> {
    if h.cols() != cl.hidden_dim() {
        return Err(Error::parameter(format!(
            "classifier input dim {} != {}",
            h.cols(),
            cl.hidden_dim()
        )));
    }
    let mut out = h.matmul_opt(&cl.w_c, false, true);
    if let Some(ref b) = cl.bias {
        for i in 0..out.rows() {
            for (v, bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += *bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax probabilities; each row sums to one.
pub fn classify<F: Scalar>(cl: &ClassifierParams<F>, h: &Matrix<F>) -> Result<Matrix<F>> {
    let lg = logits(cl, h)?;
    Ok(softmax_rows(&lg))
}

pub fn softmax_rows<F: Scalar>(lg: &Matrix<F>) -> Matrix<F> {
    let mut out = lg.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Argmax class per row.
pub fn predict<F: Scalar>(cl: &ClassifierParams<F>, h: &Matrix<F>) -> Result<Vec<usize>> {
    let lg = logits(cl, h)?;
    Ok((0..lg.rows())
        .map(|i| {
            let row = lg.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Mean cross-entropy of a batch, computed from logits in log-sum-exp form so
/// large magnitudes stay finite.
pub fn cross_entropy<F: Scalar>(lg: &Matrix<F>, labels: &[usize]) -> Result<F> {
    if labels.len() != lg.rows() {
        return Err(Error::parameter(format!(
            "{} labels for {} logit rows",
            labels.len(),
            lg.rows()
        )));
    }
    if lg.rows() == 0 {
        return Err(Error::parameter("cross entropy of an empty batch".to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= lg.cols()) {
        return Err(Error::parameter(format!("label {bad} out of range [0, {})", lg.cols())));
    }
    let mut total = F::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = lg.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        total += lse - row[label];
    }
    Ok(total / F::from_usize(labels.len()).unwrap())
}

/// Normal-class average of squared classifier row norms. Treated as a
/// constant by every gradient: no gradient flows through `alpha`.
pub fn fc_alpha<F: Scalar>(cl: &ClassifierParams<F>, normal_classes: &[usize]) -> Result<F> {
    if normal_classes.is_empty() {
        return Err(Error::parameter("alpha needs a nonempty normal set".to_string()));
    }
    Ok(mean_sq_row_norm(cl, normal_classes))
}

/// Mean squared row norm over a class subset, accumulated in ascending class
/// order so the value does not depend on the caller's ordering.
pub fn mean_sq_row_norm<F: Scalar>(cl: &ClassifierParams<F>, classes: &[usize]) -> F {
    let mut sorted: Vec<usize> = classes.to_vec();
    sorted.sort_unstable();
    let mut total = F::zero();
    for &k in &sorted {
        let r = cl.w_c.row(k);
        total += r.iter().map(|&v| v * v).sum::<F>();
    }
    total / F::from_usize(sorted.len()).unwrap()
}

/// Fair-classification term: squared gap between the few-shot mean squared
/// row norm and `alpha`.
pub fn fc_loss<F: Scalar>(cl: &ClassifierParams<F>, few_shot_classes: &[usize], alpha: F) -> Result<F> {
    if few_shot_classes.is_empty() {
        return Err(Error::parameter("fc loss needs a nonempty few-shot set".to_string()));
    }
    let gap = mean_sq_row_norm(cl, few_shot_classes) - alpha;
    Ok(gap * gap)
}

/// Combined objective `l_c + lambda * l_e + gamma * l_fc`.
pub fn total_loss_ec<F: Scalar>(l_c: F, l_e: F, l_fc: F, lambda: F, gamma: F) -> Result<F> {
    for (name, v) in [("l_c", l_c), ("l_e", l_e), ("l_fc", l_fc), ("lambda", lambda), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.to_string(), value: v.to_f64_lossy() });
        }
    }
    Ok(l_c + lambda * l_e + gamma * l_fc)
}
