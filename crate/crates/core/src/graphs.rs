//! Tape assemblies for the training losses.
//!
//! Each builder inserts the trainable parameters as leaves, the data as
//! constants, and returns handles to both, so the trainer and the gradient
//! checker share one definition of every loss.

use crate::adapt::{fc_alpha, ClassifierParams, EncoderParams};
use crate::autograd::{Tape, Var};
use crate::datasets::one_hot;
use crate::error::{Error, Result};
use crate::gan::{DiscriminatorParams, GeneratorParams};
use crate::mkmmd::KernelBank;
use crate::Mat;

/// Which adversarial loss shape to use. `AsPrinted` works directly on the
/// squashed scores; `Logistic` applies logarithms for robustness experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLossKind {
    AsPrinted,
    Logistic,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub w_z: Var,
    pub w_y: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub w_d: Var,
    pub b_d: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// (weights, bias) per layer.
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w_c: Var,
    pub bias: Option<Var>,
}

/// Insert generator weights as trainable leaves.
pub fn insert_generator(tape: &mut Tape, g: &GeneratorParams<f64>) -> GeneratorVars {
    GeneratorVars { w_z: tape.leaf(g.w_z.clone()), w_y: tape.leaf(g.w_y.clone()) }
}

/// Insert discriminator weights; trainable iff `trainable`.
pub fn insert_discriminator(
    tape: &mut Tape,
    d: &DiscriminatorParams<f64>,
    trainable: bool,
) -> DiscriminatorVars {
    if trainable {
        DiscriminatorVars { w_d: tape.leaf(d.w_d.clone()), b_d: tape.leaf(d.b_d.clone()) }
    } else {
        DiscriminatorVars { w_d: tape.constant(d.w_d.clone()), b_d: tape.constant(d.b_d.clone()) }
    }
}

pub fn insert_encoder(tape: &mut Tape, e: &EncoderParams<f64>) -> EncoderVars {
    EncoderVars {
        layers: e
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect(),
    }
}

pub fn insert_classifier(tape: &mut Tape, c: &ClassifierParams<f64>) -> ClassifierVars {
    ClassifierVars {
        w_c: tape.leaf(c.w_c.clone()),
        bias: c.bias.as_ref().map(|b| tape.leaf(b.clone())),
    }
}

/// Generated batch on the tape: `row_normalize(leaky(Z W_z^T + Y W_y^T))`.
pub fn fake_features(
    tape: &mut Tape,
    gv: &GeneratorVars,
    slope: f64,
    z: &Mat,
    labels: &[usize],
    class_count: usize,
    beta: f64,
) -> Result<Var> {
    let mut y = Mat::zeros(labels.len(), class_count);
    for (i, &l) in labels.iter().enumerate() {
        let row = one_hot::<f64>(l, class_count)?;
        y.row_mut(i).copy_from_slice(&row);
    }
    let zv = tape.constant(z.clone());
    let yv = tape.constant(y);
    let from_noise = tape.matmul(zv, gv.w_z, false, true);
    let from_label = tape.matmul(yv, gv.w_y, false, true);
    let pre = tape.add(from_noise, from_label);
    let act = tape.leaky_relu(pre, slope);
    Ok(tape.row_norm_scale(act, beta))
}

/// Discriminator scores for a batch already on the tape.
pub fn discriminator_scores(tape: &mut Tape, dv: &DiscriminatorVars, x: Var) -> Var {
    let t = tape.matmul(x, dv.w_d, false, true);
    let t = tape.add_row_broadcast(t, dv.b_d);
    tape.logistic(t)
}

/// Encoder forward pass on the tape.
pub fn encode(tape: &mut Tape, ev: &EncoderVars, slope: f64, x: Var) -> Var {
    let mut h = x;
    for &(w, b) in &ev.layers {
        let z = tape.matmul(h, w, false, true);
        let z = tape.add_row_broadcast(z, b);
        h = tape.leaky_relu(z, slope);
    }
    h
}

/// Class logits on the tape.
pub fn class_logits(tape: &mut Tape, cv: &ClassifierVars, h: Var) -> Var {
    let lg = tape.matmul(h, cv.w_c, false, true);
    match cv.bias {
        Some(b) => tape.add_row_broadcast(lg, b),
        None => lg,
    }
}

/// Generator objective: adversarial loss plus `eta` times the anchor penalty
/// that holds the normal-class columns of `w_y` near initialization.
pub struct GeneratorLossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub loss_g: Var,
    pub anchor: Var,
    pub vars: GeneratorVars,
}

#[allow(clippy::too_many_arguments)]
pub fn build_generator_loss(
    g: &GeneratorParams<f64>,
    d: &DiscriminatorParams<f64>,
    z: &Mat,
    labels: &[usize],
    beta: f64,
    eta: f64,
    normal_classes: &[usize],
    kind: GanLossKind,
) -> Result<GeneratorLossGraph> {
    let mut tape = Tape::new();
    let vars = insert_generator(&mut tape, g);
    let dv = insert_discriminator(&mut tape, d, false);
    let fake = fake_features(&mut tape, &vars, g.slope, z, labels, g.class_count(), beta)?;
    let scores = discriminator_scores(&mut tape, &dv, fake);
    let loss_g = match kind {
        GanLossKind::AsPrinted => {
            let mean = tape.mean_all(scores);
            tape.affine(mean, -1.0, 0.0)
        }
        GanLossKind::Logistic => {
            let ln = tape.ln(scores);
            let mean = tape.mean_all(ln);
            tape.affine(mean, -1.0, 0.0)
        }
    };
    let anchor = anchor_penalty(&mut tape, &vars, g, normal_classes);
    let loss = tape.add_weighted(vec![(loss_g, 1.0), (anchor, eta)]);
    Ok(GeneratorLossGraph { tape, loss, loss_g, anchor, vars })
}

/// Squared deviation of the normal-class columns of `w_y` from the frozen
/// initialization, on the tape.
pub fn anchor_penalty(
    tape: &mut Tape,
    gv: &GeneratorVars,
    g: &GeneratorParams<f64>,
    normal_classes: &[usize],
) -> Var {
    let mut sorted = normal_classes.to_vec();
    sorted.sort_unstable();
    let current = tape.select_cols(gv.w_y, sorted.clone());
    let frozen = tape.constant(g.w_y_init().select_cols(&sorted));
    let diff = tape.sub(current, frozen);
    tape.sum_squares(diff)
}

/// Discriminator objective on fixed real and fake batches.
pub struct DiscriminatorLossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub vars: DiscriminatorVars,
}

pub fn build_discriminator_loss(
    d: &DiscriminatorParams<f64>,
    real: &Mat,
    fake: &Mat,
    kind: GanLossKind,
) -> Result<DiscriminatorLossGraph> {
    if real.cols() != d.feature_dim() || fake.cols() != d.feature_dim() {
        return Err(Error::parameter("discriminator batch dims disagree".to_string()));
    }
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::parameter("discriminator loss of an empty batch".to_string()));
    }
    let mut tape = Tape::new();
    let vars = insert_discriminator(&mut tape, d, true);
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake.clone());
    let scores_r = discriminator_scores(&mut tape, &vars, rv);
    let scores_f = discriminator_scores(&mut tape, &vars, fv);
    let loss = match kind {
        GanLossKind::AsPrinted => {
            // -mean(real) - mean(1 - fake)
            let mean_r = tape.mean_all(scores_r);
            let one_minus_f = tape.affine(scores_f, -1.0, 1.0);
            let mean_omf = tape.mean_all(one_minus_f);
            tape.add_weighted(vec![(mean_r, -1.0), (mean_omf, -1.0)])
        }
        GanLossKind::Logistic => {
            let ln_r = tape.ln(scores_r);
            let mean_lr = tape.mean_all(ln_r);
            let one_minus_f = tape.affine(scores_f, -1.0, 1.0);
            let ln_omf = tape.ln(one_minus_f);
            let mean_lf = tape.mean_all(ln_omf);
            tape.add_weighted(vec![(mean_lr, -1.0), (mean_lf, -1.0)])
        }
    };
    Ok(DiscriminatorLossGraph { tape, loss, vars })
}

/// Where the fake batch of the encoder/classifier step comes from.
pub enum FakeSource<'a> {
    /// No fake batch.
    None,
    /// Pre-generated features, treated as constants (the default schedule).
    Constant(&'a Mat, &'a [usize]),
    /// Built on the tape through the generator, so classification gradients
    /// reach the generator weights.
    Generated { g: &'a GeneratorParams<f64>, z: &'a Mat, labels: &'a [usize], beta: f64 },
}

/// Inputs of the combined encoder/classifier objective.
pub struct EcLossSpec<'a> {
    pub source_x: &'a Mat,
    /// Labels for the real batch; omit to skip the real classification term.
    pub source_y: Option<&'a [usize]>,
    pub fake: FakeSource<'a>,
    pub target_x: Option<&'a Mat>,
    pub bank: Option<&'a KernelBank<f64>>,
    pub lambda: f64,
    pub gamma: f64,
    /// Weight of the real-batch classification term.
    pub weight_real_ce: f64,
    /// Weight of the fake-batch classification term.
    pub weight_fake_ce: f64,
    pub normal_classes: &'a [usize],
    pub few_shot_classes: &'a [usize],
    /// Include fake embeddings on the source side of the alignment loss.
    pub mmd_include_fake: bool,
}

pub struct EcLossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub l_c: Option<Var>,
    pub l_e: Option<Var>,
    pub l_fc: Option<Var>,
    pub enc_vars: EncoderVars,
    pub cls_vars: ClassifierVars,
    pub gen_vars: Option<GeneratorVars>,
    /// The stop-gradient fairness constant captured at build time.
    pub alpha: Option<f64>,
}

/// Assemble `l_c + lambda * l_e + gamma * l_fc` on one tape.
pub fn build_ec_loss(
    enc: &EncoderParams<f64>,
    cl: &ClassifierParams<f64>,
    spec: &EcLossSpec<'_>,
) -> Result<EcLossGraph> {
    let mut tape = Tape::new();
    let enc_vars = insert_encoder(&mut tape, enc);
    let cls_vars = insert_classifier(&mut tape, cl);
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut ce_terms: Vec<(Var, f64)> = Vec::new();

    let source = tape.constant(spec.source_x.clone());
    let h_source = if spec.source_y.is_some() || spec.target_x.is_some() {
        Some(encode(&mut tape, &enc_vars, enc.slope, source))
    } else {
        None
    };
    if let Some(y) = spec.source_y {
        let h = h_source.expect("source encoding present");
        let lg = class_logits(&mut tape, &cls_vars, h);
        let l_sr = tape.softmax_cross_entropy(lg, y.to_vec());
        ce_terms.push((l_sr, spec.weight_real_ce));
    }

    let mut gen_vars = None;
    let h_fake = match spec.fake {
        FakeSource::None => None,
        FakeSource::Constant(features, labels) => {
            let fv = tape.constant(features.clone());
            let h = encode(&mut tape, &enc_vars, enc.slope, fv);
            let lg = class_logits(&mut tape, &cls_vars, h);
            let l_sf = tape.softmax_cross_entropy(lg, labels.to_vec());
            ce_terms.push((l_sf, spec.weight_fake_ce));
            Some(h)
        }
        FakeSource::Generated { g, z, labels, beta } => {
            let gv = insert_generator(&mut tape, g);
            let fv = fake_features(&mut tape, &gv, g.slope, z, labels, g.class_count(), beta)?;
            gen_vars = Some(gv);
            let h = encode(&mut tape, &enc_vars, enc.slope, fv);
            let lg = class_logits(&mut tape, &cls_vars, h);
            let l_sf = tape.softmax_cross_entropy(lg, labels.to_vec());
            ce_terms.push((l_sf, spec.weight_fake_ce));
            Some(h)
        }
    };

    let l_c = match ce_terms.len() {
        0 => None,
        _ => Some(tape.add_weighted(ce_terms)),
    };
    if let Some(l_c) = l_c {
        terms.push((l_c, 1.0));
    }

    let l_e = match (spec.target_x, spec.lambda != 0.0) {
        (Some(target), true) => {
            let bank = spec
                .bank
                .ok_or_else(|| Error::parameter("alignment loss needs a kernel bank".to_string()))?;
            let tv = tape.constant(target.clone());
            let h_t = encode(&mut tape, &enc_vars, enc.slope, tv);
            let h_s = h_source
                .ok_or_else(|| Error::parameter("alignment loss needs a source batch".to_string()))?;
            let h_s = if spec.mmd_include_fake {
                match h_fake {
                    Some(h_f) => tape.concat_rows(h_s, h_f),
                    None => h_s,
                }
            } else {
                h_s
            };
            let l_e = tape.mmd_biased(h_s, h_t, bank.clone());
            terms.push((l_e, spec.lambda));
            Some(l_e)
        }
        _ => None,
    };

    let (l_fc, alpha) = if spec.gamma != 0.0 {
        let alpha = fc_alpha(cl, spec.normal_classes)?;
        if spec.few_shot_classes.is_empty() {
            return Err(Error::parameter("fc loss needs a nonempty few-shot set".to_string()));
        }
        let mut few = spec.few_shot_classes.to_vec();
        few.sort_unstable();
        let count = few.len() as f64;
        let rows = tape.select_rows(cls_vars.w_c, few);
        let ss = tape.sum_squares(rows);
        let mean = tape.affine(ss, 1.0 / count, 0.0);
        let gap = tape.affine(mean, 1.0, -alpha);
        let l_fc = tape.sum_squares(gap);
        terms.push((l_fc, spec.gamma));
        (Some(l_fc), Some(alpha))
    } else {
        (None, None)
    };

    if terms.is_empty() {
        return Err(Error::parameter(
            "encoder/classifier loss has no active terms".to_string(),
        ));
    }
    let loss = tape.add_weighted(terms);
    Ok(EcLossGraph { tape, loss, l_c, l_e, l_fc, enc_vars, cls_vars, gen_vars, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{cross_entropy, encoder_forward, init_classifier, init_encoder, logits};
    use crate::autograd::grad;
    use crate::gan::{
        discriminator_forward_batch, generator_forward, init_discriminator, init_generator,
        loss_d, loss_g, wy_anchor_penalty,
    };
    use crate::mkmmd::mmd_sq_biased;
    use crate::numerics::RngState;
    use crate::{datasets::DomainDataset, Mat};

    fn toy_setup() -> (GeneratorParams<f64>, DiscriminatorParams<f64>, DomainDataset) {
        let mut rng = RngState::new(5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for _ in 0..6 {
                rows.push(
                    (0..4)
                        .map(|d| 2.0 * ((class + d) as f64) + 0.5 * rng.normal() + 1.0)
                        .collect::<Vec<_>>(),
                );
                labels.push(class);
            }
        }
        let ds =
            DomainDataset::new(Mat::from_rows(&rows).unwrap(), Some(labels), "src", 3).unwrap();
        let g = init_generator(&ds, 2, 0.2).unwrap();
        let d = init_discriminator(4, &mut rng);
        (g, d, ds)
    }

    #[test]
    fn generator_graph_value_matches_module_ops() {
        let (g, d, _) = toy_setup();
        let mut rng = RngState::new(6);
        let z = Mat::from_fn(5, 2, |_, _| rng.uniform_symmetric());
        let labels = vec![0, 1, 2, 0, 1];
        let beta = 1.9;
        let graph =
            build_generator_loss(&g, &d, &z, &labels, beta, 0.01, &[0, 1], GanLossKind::AsPrinted)
                .unwrap();
        // oracle: module-level forward ops
        let mut scores = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            let y = one_hot::<f64>(l, 3).unwrap();
            let x = generator_forward(&g, z.row(i), &y, beta).unwrap();
            scores.push(crate::gan::discriminator_forward(&d, &x).unwrap());
        }
        let expected = loss_g(&scores).unwrap() + 0.01 * wy_anchor_penalty(&g, &[0, 1]);
        assert!((graph.tape.scalar(graph.loss) - expected).abs() < 1e-12);
        assert!((graph.tape.scalar(graph.anchor)).abs() < 1e-15);
    }

    #[test]
    fn discriminator_graph_value_matches_module_ops() {
        let (g, d, ds) = toy_setup();
        let mut rng = RngState::new(7);
        let (fake, _) = crate::gan::sample_fake_batch(
            &g,
            &mut rng,
            1.4,
            6,
            crate::gan::FakeLabelPolicy::Uniform,
        )
        .unwrap();
        let graph =
            build_discriminator_loss(&d, &ds.features, &fake, GanLossKind::AsPrinted).unwrap();
        let sr = discriminator_forward_batch(&d, &ds.features).unwrap();
        let sf = discriminator_forward_batch(&d, &fake).unwrap();
        let expected = loss_d(&sr, &sf).unwrap();
        assert!((graph.tape.scalar(graph.loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn ec_graph_values_match_module_ops() {
        let (g, _, ds) = toy_setup();
        let mut rng = RngState::new(8);
        let enc = init_encoder::<f64>(&[4, 5, 5], 0.2, &mut rng).unwrap();
        let cl = init_classifier::<f64>(3, 5, false, &mut rng).unwrap();
        let (fake, fake_labels) = crate::gan::sample_fake_batch(
            &g,
            &mut rng,
            1.4,
            5,
            crate::gan::FakeLabelPolicy::Uniform,
        )
        .unwrap();
        let target = Mat::from_fn(7, 4, |_, _| rng.normal() + 1.0);
        let bank = crate::mkmmd::median_heuristic_bank(&ds.features, &target, 3, 2.0).unwrap();
        let spec = EcLossSpec {
            source_x: &ds.features,
            source_y: Some(ds.labels().unwrap()),
            fake: FakeSource::Constant(&fake, &fake_labels),
            target_x: Some(&target),
            bank: Some(&bank),
            lambda: 0.8,
            gamma: 1.3,
            weight_real_ce: 1.0,
            weight_fake_ce: 1.0,
            normal_classes: &[0, 1],
            few_shot_classes: &[2],
            mmd_include_fake: false,
        };
        let graph = build_ec_loss(&enc, &cl, &spec).unwrap();

        let h_r = encoder_forward(&enc, &ds.features).unwrap();
        let h_f = encoder_forward(&enc, &fake).unwrap();
        let h_t = encoder_forward(&enc, &target).unwrap();
        let l_sr = cross_entropy(&logits(&cl, &h_r).unwrap(), ds.labels().unwrap()).unwrap();
        let l_sf = cross_entropy(&logits(&cl, &h_f).unwrap(), &fake_labels).unwrap();
        let l_e = mmd_sq_biased(&h_r, &h_t, &bank).unwrap();
        let alpha = fc_alpha(&cl, &[0, 1]).unwrap();
        let l_fc = crate::adapt::fc_loss(&cl, &[2], alpha).unwrap();
        let expected = (l_sr + l_sf) + 0.8 * l_e + 1.3 * l_fc;
        assert!((graph.tape.scalar(graph.loss) - expected).abs() < 1e-10);
        assert!((graph.tape.scalar(graph.l_c.unwrap()) - (l_sr + l_sf)).abs() < 1e-12);
        assert!((graph.tape.scalar(graph.l_e.unwrap()) - l_e).abs() < 1e-12);
        assert!((graph.tape.scalar(graph.l_fc.unwrap()) - l_fc).abs() < 1e-12);
    }

    #[test]
    fn ec_graph_fake_source_gradients_reach_generator_only_when_asked() {
        let (g, _, ds) = toy_setup();
        let mut rng = RngState::new(9);
        let enc = init_encoder::<f64>(&[4, 5, 5], 0.2, &mut rng).unwrap();
        let cl = init_classifier::<f64>(3, 5, false, &mut rng).unwrap();
        let z = Mat::from_fn(5, 2, |_, _| rng.uniform_symmetric());
        let labels = vec![0, 1, 2, 0, 1];
        let spec = EcLossSpec {
            source_x: &ds.features,
            source_y: Some(ds.labels().unwrap()),
            fake: FakeSource::Generated { g: &g, z: &z, labels: &labels, beta: 1.4 },
            target_x: None,
            bank: None,
            lambda: 0.0,
            gamma: 0.0,
            weight_real_ce: 1.0,
            weight_fake_ce: 1.0,
            normal_classes: &[0, 1],
            few_shot_classes: &[2],
            mmd_include_fake: false,
        };
        let graph = build_ec_loss(&enc, &cl, &spec).unwrap();
        let gv = graph.gen_vars.unwrap();
        let grads = grad(&graph.tape, graph.loss, &[gv.w_z, gv.w_y]).unwrap();
        // classification of generated samples depends on the generator
        assert!(grads[0].frobenius_sq() > 0.0 || grads[1].frobenius_sq() > 0.0);
    }

    #[test]
    fn ec_graph_rejects_empty_objective() {
        let mut rng = RngState::new(10);
        let enc = init_encoder::<f64>(&[4, 5, 5], 0.2, &mut rng).unwrap();
        let cl = init_classifier::<f64>(3, 5, false, &mut rng).unwrap();
        let x = Mat::zeros(3, 4);
        let spec = EcLossSpec {
            source_x: &x,
            source_y: None,
            fake: FakeSource::None,
            target_x: None,
            bank: None,
            lambda: 0.0,
            gamma: 0.0,
            weight_real_ce: 1.0,
            weight_fake_ce: 1.0,
            normal_classes: &[0, 1],
            few_shot_classes: &[2],
            mmd_include_fake: false,
        };
        assert!(build_ec_loss(&enc, &cl, &spec).is_err());
    }
}
