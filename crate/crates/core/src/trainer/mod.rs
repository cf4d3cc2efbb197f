//! GAN pretraining, the alternating main loop, ablation modes, and the full
//! experiment pipeline.

pub mod config;

pub use config::{ExperimentConfig, TrainConfig, TrainMode};

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::adapt::{
    encoder_forward, fc_alpha, init_classifier, init_encoder, mean_sq_row_norm, predict,
    ClassifierParams, EncoderParams,
};
use crate::autograd::{grad, AdamConfig, AdamState};
use crate::checkpoint::{save_checkpoint, section};
use crate::datasets::{
    load_features, make_few_shot_split, oversample_balanced, synthesize_domain_pair,
    DomainDataset, FeatureFormat, FewShotProtocol,
};
use crate::error::{Error, Result};
use crate::eval::{
    centroid_similarity_report, export_embeddings, per_class_accuracy, silhouette_cosine,
    subset_accuracy, weight_norm_report, MetricsReport, SourceKind,
};
use crate::gan::{
    init_discriminator, init_generator, sample_fake_batch, DiscriminatorParams, FakeLabelPolicy,
    GeneratorParams,
};
use crate::graphs::{
    build_discriminator_loss, build_ec_loss, build_generator_loss, EcLossSpec, FakeSource,
};
use crate::mkmmd::{median_heuristic_bank, KernelBank};
use crate::numerics::{mean_row_norm, RngState};
use crate::Mat;

/// RNG stream labels fanned out from the training seed. Keeping the phases
/// on separate streams makes each one reproducible in isolation (evaluation
/// redraws the same diagnostics regardless of how many draws training used).
pub mod streams {
    pub const INIT: u64 = 1;
    pub const OVERSAMPLE: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const MAIN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const AUGMENT: u64 = 6;
}

const HISTORY_CAP: usize = 1024;

/// Loss breakdown of one step, also the schema of the JSONL training log.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_c: Option<f64>,
    pub l_e: Option<f64>,
    pub l_fc: Option<f64>,
    pub l_g: Option<f64>,
    pub l_d: Option<f64>,
    pub alpha: Option<f64>,
    pub mean_few_shot_sq_norm: Option<f64>,
}

/// All trainable parameters, their optimizer states, and the frozen feature
/// scale `beta`. Three parameter groups exist: "encoder_classifier",
/// "generator", and "discriminator"; each owns one Adam state and they are
/// only ever updated by their own sub-step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Option<GeneratorParams<f64>>,
    pub discriminator: Option<DiscriminatorParams<f64>>,
    pub encoder: EncoderParams<f64>,
    pub classifier: ClassifierParams<f64>,
    pub adam_ec: AdamState,
    pub adam_g: Option<AdamState>,
    pub adam_d: Option<AdamState>,
    /// Average real source feature norm; fixed at initialization.
    pub beta: f64,
    pub bank: Option<KernelBank<f64>>,
    /// Total optimizer iterations (pretraining plus main loop).
    pub step: u64,
    main_steps_done: u64,
    pub history: VecDeque<LossRecord>,
}

impl TrainState {
    fn push_history(&mut self, record: LossRecord) {
        if self.history.len() == HISTORY_CAP {
            self.history.pop_front();
        }
        self.history.push_back(record);
    }

    /// Named parameter sections for checkpointing, in a fixed order.
    pub fn checkpoint_sections(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = vec![("beta".into(), Mat::scalar(self.beta))];
        if let Some(ref g) = self.generator {
            out.push(("w_z".into(), g.w_z.clone()));
            out.push(("w_y".into(), g.w_y.clone()));
            out.push(("w_y_init".into(), g.w_y_init().clone()));
        }
        if let Some(ref d) = self.discriminator {
            out.push(("w_d".into(), d.w_d.clone()));
            out.push(("b_d".into(), d.b_d.clone()));
        }
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            out.push((format!("enc{i}_w"), layer.w.clone()));
            out.push((format!("enc{i}_b"), layer.b.clone()));
        }
        out.push(("w_c".into(), self.classifier.w_c.clone()));
        if let Some(ref b) = self.classifier.bias {
            out.push(("c_bias".into(), b.clone()));
        }
        out
    }

    /// Rebuild parameters from checkpoint sections; optimizer states start
    /// fresh (checkpoints carry parameters, not momenta).
    pub fn from_checkpoint(
        sections: &[(String, Mat)],
        resolved: &ExperimentConfig,
    ) -> Result<TrainState> {
        let t = &resolved.train;
        let beta = section(sections, "beta")?.get(0, 0);
        let generator = if t.mode.uses_gan() {
            Some(GeneratorParams::from_parts(
                section(sections, "w_z")?.clone(),
                section(sections, "w_y")?.clone(),
                section(sections, "w_y_init")?.clone(),
                t.slope,
            )?)
        } else {
            None
        };
        let discriminator = if t.mode.uses_gan() {
            Some(DiscriminatorParams {
                w_d: section(sections, "w_d")?.clone(),
                b_d: section(sections, "b_d")?.clone(),
            })
        } else {
            None
        };
        let mut layers = Vec::new();
        let mut i = 0;
        while let Ok(w) = section(sections, &format!("enc{i}_w")) {
            let b = section(sections, &format!("enc{i}_b"))?;
            layers.push(crate::adapt::DenseLayer { w: w.clone(), b: b.clone() });
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::Format("checkpoint holds no encoder layers".into()));
        }
        let encoder = EncoderParams { layers, slope: t.slope };
        let classifier = ClassifierParams {
            w_c: section(sections, "w_c")?.clone(),
            bias: section(sections, "c_bias").ok().cloned(),
        };
        Ok(build_state(generator, discriminator, encoder, classifier, beta, t))
    }
}

fn build_state(
    generator: Option<GeneratorParams<f64>>,
    discriminator: Option<DiscriminatorParams<f64>>,
    encoder: EncoderParams<f64>,
    classifier: ClassifierParams<f64>,
    beta: f64,
    t: &TrainConfig,
) -> TrainState {
    let mut ec_shapes: Vec<(usize, usize)> = Vec::new();
    for l in &encoder.layers {
        ec_shapes.push(l.w.shape());
        ec_shapes.push(l.b.shape());
    }
    ec_shapes.push(classifier.w_c.shape());
    if let Some(ref b) = classifier.bias {
        ec_shapes.push(b.shape());
    }
    let adam_ec = AdamState::new(AdamConfig::with_lr(t.lr_encoder_classifier), &ec_shapes);
    let adam_g = generator.as_ref().map(|g| {
        AdamState::new(AdamConfig::with_lr(t.lr_generator), &[g.w_z.shape(), g.w_y.shape()])
    });
    let adam_d = discriminator.as_ref().map(|d| {
        AdamState::new(AdamConfig::with_lr(t.lr_discriminator), &[d.w_d.shape(), d.b_d.shape()])
    });
    TrainState {
        generator,
        discriminator,
        encoder,
        classifier,
        adam_ec,
        adam_g,
        adam_d,
        beta,
        bank: None,
        step: 0,
        main_steps_done: 0,
        history: VecDeque::new(),
    }
}

/// Initialize every parameter group from the post-split, pre-oversampling
/// training set. The generator starts at class centroids and eigenvalue-
/// scaled principal components; `beta` is the mean real feature norm.
/// Random draws come from the `INIT` stream of the training seed, in the
/// order encoder, classifier, discriminator.
pub fn init_train_state(
    train_pre_oversample: &DomainDataset,
    resolved: &ExperimentConfig,
) -> Result<TrainState> {
    let t = &resolved.train;
    let d_x = train_pre_oversample.dim();
    let d_z = t.d_z.ok_or_else(|| Error::config("train.d_z", "config not resolved"))?;
    let beta = mean_row_norm(&train_pre_oversample.features)?;
    let mut rng = RngState::stream(t.seed, streams::INIT);
    let mut dims = vec![d_x];
    dims.extend(std::iter::repeat(t.d_h).take(t.encoder_layers));
    let encoder = init_encoder::<f64>(&dims, t.slope, &mut rng)?;
    let classifier = init_classifier::<f64>(
        train_pre_oversample.class_count,
        t.d_h,
        t.classifier_bias,
        &mut rng,
    )?;
    let (generator, discriminator) = if t.mode.uses_gan() {
        let g = init_generator(train_pre_oversample, d_z, t.slope)?;
        let d = init_discriminator(d_x, &mut rng);
        (Some(g), Some(d))
    } else {
        (None, None)
    };
    Ok(build_state(generator, discriminator, encoder, classifier, beta, t))
}

fn check_finite(name: &str, value: f64, step: u64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite { term: format!("{name} at step {step}"), value });
    }
    Ok(value)
}

fn update_ec(
    state: &mut TrainState,
    graph: &crate::graphs::EcLossGraph,
    fake_grad_to_generator: bool,
) -> Result<()> {
    let mut vars = Vec::new();
    for &(w, b) in &graph.enc_vars.layers {
        vars.push(w);
        vars.push(b);
    }
    vars.push(graph.cls_vars.w_c);
    if let Some(b) = graph.cls_vars.bias {
        vars.push(b);
    }
    let grads = grad(&graph.tape, graph.loss, &vars)?;
    {
        let mut params: Vec<&mut Mat> = Vec::new();
        for l in &mut state.encoder.layers {
            params.push(&mut l.w);
            params.push(&mut l.b);
        }
        params.push(&mut state.classifier.w_c);
        if let Some(ref mut b) = state.classifier.bias {
            params.push(b);
        }
        let grad_refs: Vec<&Mat> = grads.iter().collect();
        state.adam_ec.step(&mut params, &grad_refs)?;
    }
    if fake_grad_to_generator {
        if let (Some(gv), Some(g), Some(adam_g)) =
            (graph.gen_vars, state.generator.as_mut(), state.adam_g.as_mut())
        {
            let ggrads = grad(&graph.tape, graph.loss, &[gv.w_z, gv.w_y])?;
            let grad_refs: Vec<&Mat> = ggrads.iter().collect();
            adam_g.step(&mut [&mut g.w_z, &mut g.w_y], &grad_refs)?;
        }
    }
    Ok(())
}

fn update_generator(state: &mut TrainState, graph: &crate::graphs::GeneratorLossGraph) -> Result<()> {
    let grads = grad(&graph.tape, graph.loss, &[graph.vars.w_z, graph.vars.w_y])?;
    let g = state.generator.as_mut().expect("generator present");
    let adam = state.adam_g.as_mut().expect("generator optimizer present");
    let grad_refs: Vec<&Mat> = grads.iter().collect();
    adam.step(&mut [&mut g.w_z, &mut g.w_y], &grad_refs)
}

fn update_discriminator(
    state: &mut TrainState,
    graph: &crate::graphs::DiscriminatorLossGraph,
) -> Result<()> {
    let grads = grad(&graph.tape, graph.loss, &[graph.vars.w_d, graph.vars.b_d])?;
    let d = state.discriminator.as_mut().expect("discriminator present");
    let adam = state.adam_d.as_mut().expect("discriminator optimizer present");
    let grad_refs: Vec<&Mat> = grads.iter().collect();
    adam.step(&mut [&mut d.w_d, &mut d.b_d], &grad_refs)
}

/// Noise and labels for a generated batch, drawn in the same order as
/// [`sample_fake_batch`]: all labels first, then noise row by row.
fn draw_fake_inputs(
    rng: &mut RngState,
    batch: usize,
    policy: FakeLabelPolicy,
    class_count: usize,
    d_z: usize,
) -> Result<(Mat, Vec<usize>)> {
    let labels: Vec<usize> = match policy {
        FakeLabelPolicy::Uniform => (0..batch).map(|_| rng.index(class_count)).collect(),
        FakeLabelPolicy::Balanced => (0..batch).map(|i| i % class_count).collect(),
        FakeLabelPolicy::Single(k) => {
            if k >= class_count {
                return Err(Error::parameter(format!("fake label {k} out of range")));
            }
            vec![k; batch]
        }
    };
    let z = Mat::from_fn(batch, d_z, |_, _| rng.uniform_symmetric());
    Ok((z, labels))
}

/// One iteration of the alternating schedule over the training pool.
///
/// Sub-steps, in order: (1) sample a real labeled batch and, when the
/// alignment term is active, an unlabeled target batch; (2) synthesize a
/// fake labeled batch (interleaved modes only); (3) one Adam step on the
/// encoder and classifier with fake features treated as constants; (4) one
/// Adam step on the generator with the discriminator fixed; (5) one Adam
/// step on the discriminator with the generator fixed. RNG consumption
/// order: real indices, target indices, then the fake draws of sub-steps
/// (2), (4), (5), each as labels followed by noise.
pub fn train_step(
    state: &mut TrainState,
    pool: &DomainDataset,
    target: &DomainDataset,
    resolved: &ExperimentConfig,
    protocol: &FewShotProtocol,
    rng: &mut RngState,
) -> Result<LossRecord> {
    let t = &resolved.train;
    let step = state.step;
    let interleave = t.mode.interleaves_gan();
    let align = t.lambda > 0.0;

    let real_idx = rng.sample_with_replacement(pool.len(), t.batch_real);
    let real_x = pool.features.select_rows(&real_idx);
    let pool_labels = pool.labels()?;
    let real_y: Vec<usize> = real_idx.iter().map(|&i| pool_labels[i]).collect();

    let target_x = if align {
        let idx = rng.sample_with_replacement(target.len(), t.batch_target);
        Some(target.features.select_rows(&idx))
    } else {
        None
    };

    let d_z = t.d_z.ok_or_else(|| Error::config("train.d_z", "config not resolved"))?;
    let fake_for_ec = if interleave {
        if t.fake_grad_to_generator {
            Some(FakeBatch::Raw(draw_fake_inputs(
                rng,
                t.batch_fake,
                t.fake_label_policy,
                pool.class_count,
                d_z,
            )?))
        } else {
            let g = state.generator.as_ref().expect("generator present");
            let (features, labels) =
                sample_fake_batch(g, rng, state.beta, t.batch_fake, t.fake_label_policy)?;
            Some(FakeBatch::Features(features, labels))
        }
    } else {
        None
    };

    // the kernel bank follows the embeddings as training moves them, but
    // only once per epoch, not per step
    if align
        && (state.bank.is_none() || state.main_steps_done % t.bank_refresh_every as u64 == 0)
    {
        let h_s = encoder_forward(&state.encoder, &real_x)?;
        let h_t = encoder_forward(&state.encoder, target_x.as_ref().expect("target batch"))?;
        state.bank = Some(median_heuristic_bank(&h_s, &h_t, t.kernel_count, t.kernel_factor)?);
    }

    // (3) encoder/classifier update
    let fake_ref = match &fake_for_ec {
        Some(FakeBatch::Features(f, l)) => FakeSource::Constant(f, l),
        Some(FakeBatch::Raw((z, labels))) => FakeSource::Generated {
            g: state.generator.as_ref().expect("generator present"),
            z,
            labels,
            beta: state.beta,
        },
        None => FakeSource::None,
    };
    let spec = EcLossSpec {
        source_x: &real_x,
        source_y: Some(&real_y),
        fake: fake_ref,
        target_x: target_x.as_ref(),
        bank: state.bank.as_ref(),
        lambda: t.lambda,
        gamma: t.gamma,
        weight_real_ce: t.weight_real_ce,
        weight_fake_ce: t.weight_fake_ce,
        normal_classes: &protocol.normal_classes,
        few_shot_classes: &protocol.few_shot_classes,
        mmd_include_fake: t.mmd_include_fake,
    };
    let ec_graph = build_ec_loss(&state.encoder, &state.classifier, &spec)?;
    let mut record = LossRecord { step, ..LossRecord::default() };
    record.l_c = ec_graph.l_c.map(|v| ec_graph.tape.scalar(v));
    record.l_e = ec_graph.l_e.map(|v| ec_graph.tape.scalar(v));
    record.l_fc = ec_graph.l_fc.map(|v| ec_graph.tape.scalar(v));
    check_finite("l_ec", ec_graph.tape.scalar(ec_graph.loss), step)?;
    update_ec(state, &ec_graph, t.fake_grad_to_generator)?;
    drop(ec_graph);

    if interleave {
        // (4) generator update, discriminator fixed
        let (z, labels) =
            draw_fake_inputs(rng, t.batch_fake, t.fake_label_policy, pool.class_count, d_z)?;
        let graph = build_generator_loss(
            state.generator.as_ref().expect("generator present"),
            state.discriminator.as_ref().expect("discriminator present"),
            &z,
            &labels,
            state.beta,
            t.eta,
            &protocol.normal_classes,
            t.gan_loss,
        )?;
        record.l_g = Some(check_finite("l_g", graph.tape.scalar(graph.loss_g), step)?);
        update_generator(state, &graph)?;

        // (5) discriminator update, generator fixed
        let g = state.generator.as_ref().expect("generator present");
        let (fake, _) = sample_fake_batch(g, rng, state.beta, t.batch_fake, t.fake_label_policy)?;
        let graph = build_discriminator_loss(
            state.discriminator.as_ref().expect("discriminator present"),
            &real_x,
            &fake,
            t.gan_loss,
        )?;
        record.l_d = Some(check_finite("l_d", graph.tape.scalar(graph.loss), step)?);
        update_discriminator(state, &graph)?;
    }

    record.alpha = fc_alpha(&state.classifier, &protocol.normal_classes).ok();
    record.mean_few_shot_sq_norm =
        Some(mean_sq_row_norm(&state.classifier, &protocol.few_shot_classes));
    state.step += 1;
    state.main_steps_done += 1;
    state.push_history(record.clone());
    Ok(record)
}

enum FakeBatch {
    Features(Mat, Vec<usize>),
    Raw((Mat, Vec<usize>)),
}

/// Alternating discriminator/generator pretraining over real-vs-fake source
/// features; the encoder and classifier are untouched. Each iteration draws
/// a real batch, updates the discriminator on it against a fresh fake batch,
/// then updates the generator (with the anchor penalty) on fresh noise.
pub fn pretrain_gan(
    state: &mut TrainState,
    pool: &DomainDataset,
    steps: usize,
    resolved: &ExperimentConfig,
    protocol: &FewShotProtocol,
    rng: &mut RngState,
) -> Result<()> {
    let t = &resolved.train;
    let d_z = t.d_z.ok_or_else(|| Error::config("train.d_z", "config not resolved"))?;
    for _ in 0..steps {
        let step = state.step;
        let real_idx = rng.sample_with_replacement(pool.len(), t.batch_real);
        let real_x = pool.features.select_rows(&real_idx);

        let g = state.generator.as_ref().expect("generator present");
        let (fake, _) = sample_fake_batch(g, rng, state.beta, t.batch_fake, t.fake_label_policy)?;
        let d_graph = build_discriminator_loss(
            state.discriminator.as_ref().expect("discriminator present"),
            &real_x,
            &fake,
            t.gan_loss,
        )?;
        let l_d = check_finite("l_d", d_graph.tape.scalar(d_graph.loss), step)?;
        update_discriminator(state, &d_graph)?;

        let (z, labels) =
            draw_fake_inputs(rng, t.batch_fake, t.fake_label_policy, pool.class_count, d_z)?;
        let g_graph = build_generator_loss(
            state.generator.as_ref().expect("generator present"),
            state.discriminator.as_ref().expect("discriminator present"),
            &z,
            &labels,
            state.beta,
            t.eta,
            &protocol.normal_classes,
            t.gan_loss,
        )?;
        let l_g = check_finite("l_g", g_graph.tape.scalar(g_graph.loss_g), step)?;
        update_generator(state, &g_graph)?;

        state.step += 1;
        state.push_history(LossRecord {
            step,
            l_g: Some(l_g),
            l_d: Some(l_d),
            ..LossRecord::default()
        });
    }
    Ok(())
}

/// Synthesize the one-time balanced augmentation set of the two-stage mode
/// and append it to the pool.
fn augment_pool_for_two_stage(
    state: &TrainState,
    pool: &DomainDataset,
    per_class: usize,
    seed: u64,
) -> Result<DomainDataset> {
    let g = state.generator.as_ref().expect("generator present");
    let mut rng = RngState::stream(seed, streams::AUGMENT);
    let batch = per_class * pool.class_count;
    let (fake, fake_labels) =
        sample_fake_batch(g, &mut rng, state.beta, batch, FakeLabelPolicy::Balanced)?;
    let features = pool.features.vstack(&fake)?;
    let mut labels = pool.labels()?.to_vec();
    labels.extend_from_slice(&fake_labels);
    DomainDataset::new(
        features,
        Some(labels),
        format!("{}-augmented", pool.domain_tag),
        pool.class_count,
    )
}

/// Build the full metrics report from a trained state. Evaluation draws from
/// its own RNG stream, so regenerating a report from a checkpoint reproduces
/// it bit for bit.
pub fn evaluate(
    state: &TrainState,
    resolved: &ExperimentConfig,
    protocol: &FewShotProtocol,
    train_pre_oversample: &DomainDataset,
    heldout: &DomainDataset,
    target: &DomainDataset,
) -> Result<MetricsReport> {
    let t = &resolved.train;
    let (per_class, few_acc, normal_acc, overall_acc) = match target.labels {
        Some(ref truth) => {
            let h = encoder_forward(&state.encoder, &target.features)?;
            let predictions = predict(&state.classifier, &h)?;
            let all: Vec<usize> = (0..target.class_count).collect();
            (
                Some(per_class_accuracy(&predictions, truth, target.class_count)?),
                Some(subset_accuracy(&predictions, truth, &protocol.few_shot_classes)?),
                Some(subset_accuracy(&predictions, truth, &protocol.normal_classes)?),
                Some(subset_accuracy(&predictions, truth, &all)?),
            )
        }
        None => (None, None, None, None),
    };

    let synth = match (&state.generator, t.eval_synth_per_class) {
        (Some(g), per_class) if per_class > 0 => {
            let mut rng = RngState::stream(t.seed, streams::EVAL);
            let batch = per_class * train_pre_oversample.class_count;
            Some(sample_fake_batch(g, &mut rng, state.beta, batch, FakeLabelPolicy::Balanced)?)
        }
        _ => None,
    };

    let features = &train_pre_oversample.features;
    let labels = train_pre_oversample.labels()?;
    let aug = synth.as_ref().map(|(f, l)| (f, l.as_slice()));
    let silhouette_all = Some(silhouette_cosine(features, labels, None, None)?);
    let silhouette_all_augmented = match aug {
        Some((f, l)) => Some(silhouette_cosine(features, labels, Some((f, l)), None)?),
        None => None,
    };
    let few = &protocol.few_shot_classes;
    let (silhouette_few_shot, silhouette_few_shot_augmented) = if few.len() >= 2 {
        let plain = Some(silhouette_cosine(features, labels, None, Some(few))?);
        let auged = match aug {
            Some((f, l)) => Some(silhouette_cosine(features, labels, Some((f, l)), Some(few))?),
            None => None,
        };
        (plain, auged)
    } else {
        (None, None)
    };

    let centroid_similarity = match (&synth, heldout.len()) {
        (Some((sf, sl)), n) if n > 0 => {
            let heldout_counts = heldout.class_counts()?;
            if few.iter().all(|&k| heldout_counts[k] > 0) {
                Some(centroid_similarity_report(
                    (features, labels),
                    (&heldout.features, heldout.labels()?),
                    (sf, sl),
                    few,
                )?)
            } else {
                None
            }
        }
        _ => None,
    };

    let norms = weight_norm_report(&state.classifier, protocol)?;
    let alpha = fc_alpha(&state.classifier, &protocol.normal_classes)?;
    let mean_few_sq = mean_sq_row_norm(&state.classifier, &protocol.few_shot_classes);

    Ok(MetricsReport {
        mode: t.mode.to_string(),
        task: resolved.task.clone(),
        seed: t.seed,
        class_count: train_pre_oversample.class_count,
        few_shot_classes: protocol.few_shot_classes.clone(),
        shots_per_class: protocol.shots_per_class,
        per_class_accuracy: per_class,
        few_shot_accuracy: few_acc,
        normal_accuracy: normal_acc,
        overall_accuracy: overall_acc,
        silhouette_all,
        silhouette_all_augmented,
        silhouette_few_shot,
        silhouette_few_shot_augmented,
        centroid_similarity,
        mean_normal_weight_norm: norms.mean_normal_norm,
        mean_few_shot_weight_norm: norms.mean_few_shot_norm,
        fc_alpha: alpha,
        mean_few_shot_sq_norm: mean_few_sq,
        few_shot_norm_ratio: mean_few_sq / alpha,
        config: resolved.clone(),
    })
}

/// Load (or synthesize) the source and target datasets named by a config.
/// An unlabeled target inherits the source class count.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(DomainDataset, DomainDataset)> {
    if let Some(ref synth) = config.data.synthetic {
        let pair = synthesize_domain_pair(synth)?;
        return Ok((pair.source, pair.target));
    }
    let files = config
        .data
        .files
        .as_ref()
        .ok_or_else(|| Error::config("data", "one of data.files or data.synthetic required"))?;
    let pick_format = |path: &Path| -> Result<FeatureFormat> {
        match files.format.as_deref() {
            Some(s) => s.parse(),
            None => Ok(FeatureFormat::infer(path)),
        }
    };
    let mut source = load_features(&files.source, pick_format(&files.source)?)?;
    let mut target = load_features(&files.target, pick_format(&files.target)?)?;
    if let Some(c) = files.class_count {
        source = source.with_class_count(c)?;
    }
    if !source.is_labeled() {
        return Err(Error::config("data.files.source", "source dataset must be labeled"));
    }
    let c = source.class_count.max(target.class_count);
    source = source.with_class_count(c)?;
    target = target.with_class_count(c)?;
    if source.dim() != target.dim() {
        return Err(Error::data(format!(
            "source dim {} != target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    Ok((source, target))
}

struct RunWriter {
    dir: std::path::PathBuf,
    log: std::io::BufWriter<std::fs::File>,
}

impl RunWriter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let log = std::io::BufWriter::new(std::fs::File::create(dir.join("training_log.jsonl"))?);
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn log_record(&mut self, record: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    fn write_checkpoint(&self, name: &str, state: &TrainState) -> Result<()> {
        let sections = state.checkpoint_sections();
        let refs: Vec<(String, &Mat)> =
            sections.iter().map(|(n, m)| (n.clone(), m)).collect();
        save_checkpoint(&self.dir.join(name), &refs)
    }

    fn finish(
        mut self,
        resolved: &ExperimentConfig,
        report: &MetricsReport,
        state: &TrainState,
        split_train: &DomainDataset,
        heldout: &DomainDataset,
        target: &DomainDataset,
    ) -> Result<()> {
        self.log.flush()?;
        let toml_text = toml::to_string_pretty(resolved)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        std::fs::write(self.dir.join("resolved_config.toml"), toml_text)?;
        std::fs::write(self.dir.join("metrics.json"), report.to_json())?;
        std::fs::write(self.dir.join("metrics.csv"), report.to_csv())?;
        self.write_checkpoint("final.ckpt", state)?;
        if resolved.output.export_embeddings {
            let synth = match (&state.generator, resolved.train.eval_synth_per_class) {
                (Some(g), per_class) if per_class > 0 => {
                    let mut rng = RngState::stream(resolved.train.seed, streams::EVAL);
                    let batch = per_class * split_train.class_count;
                    Some(sample_fake_batch(
                        g,
                        &mut rng,
                        state.beta,
                        batch,
                        FakeLabelPolicy::Balanced,
                    )?)
                }
                _ => None,
            };
            let mut sets: Vec<(SourceKind, &Mat, Option<&[usize]>)> = vec![(
                SourceKind::RealTrain,
                &split_train.features,
                Some(split_train.labels()?),
            )];
            if heldout.len() > 0 {
                sets.push((SourceKind::RealHeldout, &heldout.features, Some(heldout.labels()?)));
            }
            if let Some((ref f, ref l)) = synth {
                sets.push((SourceKind::Synthetic, f, Some(l.as_slice())));
            }
            sets.push((SourceKind::Target, &target.features, target.labels.as_deref()));
            export_embeddings(&state.encoder, &sets, &self.dir.join("embeddings.csv"))?;
        }
        Ok(())
    }
}

/// Run the full pipeline: split, oversample, initialize, pretrain, main
/// loop, and evaluation. Target labels, when present, are used only by the
/// final evaluation. With a run directory, the resolved config, metrics
/// (JSON and CSV), training log, and final checkpoint are written there.
pub fn run_experiment(
    config: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    run_dir: Option<&Path>,
) -> Result<(MetricsReport, TrainState)> {
    config.validate()?;
    if !source.is_labeled() {
        return Err(Error::config("data", "source dataset must be labeled"));
    }
    if source.dim() != target.dim() {
        return Err(Error::data(format!(
            "source dim {} != target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    let protocol = FewShotProtocol::new(
        source.class_count,
        config.protocol.few_shot_classes.clone(),
        config.protocol.shots,
        config.protocol.seed.unwrap_or(config.train.seed),
    )?;
    let split = make_few_shot_split(source, &protocol)?;
    let max_count = *split.train.class_counts()?.iter().max().unwrap();
    let pool_len = max_count * source.class_count;
    let resolved = config.resolve(source.dim(), split.train.len(), pool_len)?;
    let t = &resolved.train;

    let mut oversample_rng = RngState::stream(t.seed, streams::OVERSAMPLE);
    let pool = oversample_balanced(&split.train, &mut oversample_rng)?;

    let mut state = init_train_state(&split.train, &resolved)?;
    let mut writer = match run_dir {
        Some(dir) => Some(RunWriter::new(dir)?),
        None => None,
    };

    if t.mode.uses_gan() && t.pretrain_steps > 0 {
        let mut rng = RngState::stream(t.seed, streams::PRETRAIN);
        pretrain_gan(&mut state, &pool, t.pretrain_steps, &resolved, &protocol, &mut rng)?;
    }

    let pool = if t.mode == TrainMode::Gfca2Stage {
        augment_pool_for_two_stage(&state, &pool, t.two_stage_aug_per_class, t.seed)?
    } else {
        pool
    };

    let mut rng = RngState::stream(t.seed, streams::MAIN);
    for i in 0..t.main_steps {
        let record = train_step(&mut state, &pool, target, &resolved, &protocol, &mut rng)
            .map_err(|e| {
                if let Some(w) = writer.as_mut() {
                    // best-effort diagnostic dump alongside the log
                    let dump: Vec<&LossRecord> = state.history.iter().collect();
                    let _ = serde_json::to_string_pretty(&dump)
                        .map(|s| std::fs::write(w.dir.join("abort_dump.json"), s));
                }
                e
            })?;
        if let Some(w) = writer.as_mut() {
            if t.log_every > 0 && i % t.log_every == 0 {
                w.log_record(&record)?;
            }
            if t.checkpoint_every > 0 && (i + 1) % t.checkpoint_every == 0 {
                w.write_checkpoint(&format!("step_{:06}.ckpt", i + 1), &state)?;
            }
        }
    }

    let report = evaluate(&state, &resolved, &protocol, &split.train, &split.heldout, target)?;
    if let Some(w) = writer.take() {
        w.finish(&resolved, &report, &state, &split.train, &split.heldout, target)?;
    }
    Ok((report, state))
}
