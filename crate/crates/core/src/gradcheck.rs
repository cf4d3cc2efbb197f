//! Finite-difference verification of every loss in the system, on small
//! random instances. Used by the `gradcheck` CLI command and the acceptance
//! suite.

use crate::adapt::{init_classifier, init_encoder, ClassifierParams, EncoderParams};
use crate::autograd::{finite_difference_check, grad, FdReport, Tape, Var};
use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::gan::{init_discriminator, init_generator, DiscriminatorParams, GeneratorParams};
use crate::graphs::{
    anchor_penalty, build_discriminator_loss, build_ec_loss, build_generator_loss,
    insert_generator, EcLossSpec, FakeSource, GanLossKind,
};
use crate::mkmmd::median_heuristic_bank;
use crate::numerics::{mean_row_norm, RngState};
use crate::Mat;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Instances whose smallest rectifier pre-activation is below this are
/// redrawn before checking (the finite-difference probe would step across
/// the kink).
const RESAMPLE_MIN_PREACT: f64 = 1e-3;
const MAX_INSTANCE_ATTEMPTS: usize = 50;

const GRADCHECK_STREAM_BASE: u64 = 0x6700;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckScope {
    All,
    /// Generator and discriminator losses plus the anchor penalty.
    Gan,
    /// Classification, fairness, and combined objectives.
    Adapt,
    /// The alignment loss through a two-layer encoder.
    Mkmmd,
}

impl std::str::FromStr for GradcheckScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GradcheckScope::All),
            "gan" | "feature-gan" => Ok(GradcheckScope::Gan),
            "adapt" | "adapt-net" => Ok(GradcheckScope::Adapt),
            "mkmmd" => Ok(GradcheckScope::Mkmmd),
            other => Err(Error::parameter(format!("unknown gradcheck scope '{other}'"))),
        }
    }
}

/// Aggregated result for one loss across all repetitions.
#[derive(Clone, Debug)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub excluded_kinks: usize,
    pub checked_coordinates: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub tolerance: f64,
    pub repetitions: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// One random small instance of the whole model.
struct Instance {
    source: DomainDataset,
    generator: GeneratorParams<f64>,
    discriminator: DiscriminatorParams<f64>,
    encoder: EncoderParams<f64>,
    classifier: ClassifierParams<f64>,
    beta: f64,
    z: Mat,
    fake_labels: Vec<usize>,
    fake_features: Mat,
    target: Mat,
    normal: Vec<usize>,
    few_shot: Vec<usize>,
}

const D_X: usize = 6;
const D_Z: usize = 4;
const D_H: usize = 5;
const CLASSES: usize = 5;
const BATCH: usize = 6;
const TARGET_BATCH: usize = 7;

fn make_instance(rng: &mut RngState) -> Result<Instance> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for class in 0..CLASSES {
        for _ in 0..4 {
            rows.push(
                (0..D_X)
                    .map(|d| 1.0 + 0.8 * ((class * 2 + d) as f64).sin() + 0.4 * rng.normal())
                    .collect::<Vec<f64>>(),
            );
            labels.push(class);
        }
    }
    let source =
        DomainDataset::new(Mat::from_rows(&rows)?, Some(labels), "gradcheck", CLASSES)?;
    let mut generator = init_generator(&source, D_Z, 0.2)?;
    // jitter the structured initialization so nothing sits at a stationary point
    generator.w_z = generator.w_z.map(|v| v + 0.0);
    for i in 0..generator.w_y.rows() {
        for j in 0..generator.w_y.cols() {
            let v = generator.w_y.get(i, j) + 0.05 * rng.normal();
            generator.w_y.set(i, j, v);
        }
    }
    let discriminator = init_discriminator(D_X, rng);
    let encoder = init_encoder::<f64>(&[D_X, D_H, D_H], 0.2, rng)?;
    let classifier = init_classifier::<f64>(CLASSES, D_H, false, rng)?;
    let beta = mean_row_norm(&source.features)?;
    let z = Mat::from_fn(BATCH, D_Z, |_, _| rng.uniform_symmetric());
    let fake_labels: Vec<usize> = (0..BATCH).map(|i| i % CLASSES).collect();
    let fake_features =
        crate::gan::sample_fake_batch(&generator, rng, beta, BATCH, crate::gan::FakeLabelPolicy::Balanced)?.0;
    let target = Mat::from_fn(TARGET_BATCH, D_X, |_, d| {
        0.5 + 0.7 * (d as f64).cos() + 0.4 * rng.normal()
    });
    Ok(Instance {
        source,
        generator,
        discriminator,
        encoder,
        classifier,
        beta,
        z,
        fake_labels,
        fake_features,
        target,
        normal: vec![0, 1, 2],
        few_shot: vec![3, 4],
    })
}

struct Probe {
    tape: Tape,
    loss: Var,
    params: Vec<Var>,
}

fn probe_for(name: &str, inst: &Instance) -> Result<Probe> {
    match name {
        "l_g" => {
            let graph = build_generator_loss(
                &inst.generator,
                &inst.discriminator,
                &inst.z,
                &inst.fake_labels,
                inst.beta,
                0.0,
                &inst.normal,
                GanLossKind::AsPrinted,
            )?;
            Ok(Probe {
                loss: graph.loss_g,
                params: vec![graph.vars.w_z, graph.vars.w_y],
                tape: graph.tape,
            })
        }
        "anchor" => {
            let mut tape = Tape::new();
            let vars = insert_generator(&mut tape, &inst.generator);
            let loss = anchor_penalty(&mut tape, &vars, &inst.generator, &inst.normal);
            Ok(Probe { tape, loss, params: vec![vars.w_y] })
        }
        "l_d" => {
            let graph = build_discriminator_loss(
                &inst.discriminator,
                &inst.source.features,
                &inst.fake_features,
                GanLossKind::AsPrinted,
            )?;
            Ok(Probe {
                loss: graph.loss,
                params: vec![graph.vars.w_d, graph.vars.b_d],
                tape: graph.tape,
            })
        }
        "l_c" | "l_e" | "l_fc" | "l_ec" => {
            let bank = median_heuristic_bank(&inst.source.features, &inst.target, 3, 2.0)?;
            let labels = inst.source.labels()?;
            let spec = match name {
                "l_c" => EcLossSpec {
                    source_x: &inst.source.features,
                    source_y: Some(labels),
                    fake: FakeSource::Constant(&inst.fake_features, &inst.fake_labels),
                    target_x: None,
                    bank: None,
                    lambda: 0.0,
                    gamma: 0.0,
                    weight_real_ce: 1.0,
                    weight_fake_ce: 1.0,
                    normal_classes: &inst.normal,
                    few_shot_classes: &inst.few_shot,
                    mmd_include_fake: false,
                },
                "l_e" => EcLossSpec {
                    source_x: &inst.source.features,
                    source_y: None,
                    fake: FakeSource::None,
                    target_x: Some(&inst.target),
                    bank: Some(&bank),
                    lambda: 1.0,
                    gamma: 0.0,
                    weight_real_ce: 1.0,
                    weight_fake_ce: 1.0,
                    normal_classes: &inst.normal,
                    few_shot_classes: &inst.few_shot,
                    mmd_include_fake: false,
                },
                "l_fc" => EcLossSpec {
                    source_x: &inst.source.features,
                    source_y: None,
                    fake: FakeSource::None,
                    target_x: None,
                    bank: None,
                    lambda: 0.0,
                    gamma: 1.0,
                    weight_real_ce: 1.0,
                    weight_fake_ce: 1.0,
                    normal_classes: &inst.normal,
                    few_shot_classes: &inst.few_shot,
                    mmd_include_fake: false,
                },
                _ => EcLossSpec {
                    source_x: &inst.source.features,
                    source_y: Some(labels),
                    fake: FakeSource::Constant(&inst.fake_features, &inst.fake_labels),
                    target_x: Some(&inst.target),
                    bank: Some(&bank),
                    lambda: 1.0,
                    gamma: 1.0,
                    weight_real_ce: 1.0,
                    weight_fake_ce: 1.0,
                    normal_classes: &inst.normal,
                    few_shot_classes: &inst.few_shot,
                    mmd_include_fake: false,
                },
            };
            let graph = build_ec_loss(&inst.encoder, &inst.classifier, &spec)?;
            let mut params = Vec::new();
            match name {
                "l_fc" => params.push(graph.cls_vars.w_c),
                "l_e" => {
                    for &(w, b) in &graph.enc_vars.layers {
                        params.push(w);
                        params.push(b);
                    }
                }
                _ => {
                    for &(w, b) in &graph.enc_vars.layers {
                        params.push(w);
                        params.push(b);
                    }
                    params.push(graph.cls_vars.w_c);
                }
            }
            Ok(Probe { tape: graph.tape, loss: graph.loss, params })
        }
        other => Err(Error::parameter(format!("unknown loss '{other}'"))),
    }
}

fn check_loss(
    name: &'static str,
    base_seed: u64,
    rep: u64,
    inject_fault: bool,
) -> Result<FdReport> {
    for attempt in 0..MAX_INSTANCE_ATTEMPTS {
        let mut rng =
            RngState::stream(base_seed, GRADCHECK_STREAM_BASE + rep * 64 + attempt as u64);
        let inst = make_instance(&mut rng)?;
        let mut probe = probe_for(name, &inst)?;
        if probe.tape.min_abs_preactivation() < RESAMPLE_MIN_PREACT {
            continue;
        }
        let mut analytic = grad(&probe.tape, probe.loss, &probe.params)?;
        if inject_fault {
            let v = analytic[0].get(0, 0);
            let bumped = if v == 0.0 { 1e-3 } else { v * 1.1 };
            analytic[0].set(0, 0, bumped);
        }
        return finite_difference_check(
            &mut probe.tape,
            probe.loss,
            &probe.params,
            &analytic,
            FD_STEP,
            FD_TOLERANCE,
        );
    }
    Err(Error::DegenerateData(format!(
        "could not draw a kink-free instance for {name} in {MAX_INSTANCE_ATTEMPTS} attempts"
    )))
}

fn losses_in_scope(scope: GradcheckScope) -> Vec<&'static str> {
    match scope {
        GradcheckScope::All => vec!["l_g", "l_d", "l_c", "l_e", "l_fc", "anchor", "l_ec"],
        GradcheckScope::Gan => vec!["l_g", "l_d", "anchor"],
        GradcheckScope::Adapt => vec!["l_c", "l_fc", "l_ec"],
        GradcheckScope::Mkmmd => vec!["l_e"],
    }
}

/// Check every loss in scope on `repetitions` random instances each.
/// `inject_fault` corrupts one analytic entry (for exercising the failure
/// path) and must make the report fail.
pub fn run_gradcheck(
    scope: GradcheckScope,
    base_seed: u64,
    repetitions: usize,
    inject_fault: bool,
) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for name in losses_in_scope(scope) {
        let mut worst = 0.0f64;
        let mut kinks = 0usize;
        let mut coords = 0usize;
        for rep in 0..repetitions {
            let fault_here = inject_fault && rep == 0;
            let report = check_loss(name, base_seed, rep as u64, fault_here)?;
            worst = worst.max(report.max_rel_error);
            kinks += report.excluded_kinks;
            coords += report.checked;
        }
        checks.push(LossCheck {
            name,
            max_rel_error: worst,
            excluded_kinks: kinks,
            checked_coordinates: coords,
            passed: worst <= FD_TOLERANCE,
        });
    }
    Ok(GradcheckReport { checks, tolerance: FD_TOLERANCE, repetitions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass_on_a_few_seeds() {
        let report = run_gradcheck(GradcheckScope::All, 7, 3, false).unwrap();
        assert!(report.passed(), "{:#?}", report.checks);
        assert_eq!(report.checks.len(), 7);
        for check in &report.checks {
            assert!(check.checked_coordinates > 0, "{} checked nothing", check.name);
        }
    }

    #[test]
    fn scopes_restrict_the_loss_set() {
        let report = run_gradcheck(GradcheckScope::Mkmmd, 3, 1, false).unwrap();
        assert_eq!(report.checks.len(), 1);
        assert_eq!(report.checks[0].name, "l_e");
        let report = run_gradcheck(GradcheckScope::Gan, 3, 1, false).unwrap();
        let names: Vec<_> = report.checks.iter().map(|c| c.name).collect();
        assert_eq!(names, vec!["l_g", "l_d", "anchor"]);
    }

    #[test]
    fn injected_fault_is_detected() {
        let report = run_gradcheck(GradcheckScope::Adapt, 5, 1, true).unwrap();
        assert!(!report.passed());
    }
}
