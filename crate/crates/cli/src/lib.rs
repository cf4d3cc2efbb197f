//! Command implementations behind the `gfca` binary.
//!
//! Exit-code contract: 0 success, 1 runtime failure, 2 configuration error.

pub mod report_table;

use std::path::{Path, PathBuf};

use gfca_core::checkpoint::load_checkpoint;
use gfca_core::datasets::{make_few_shot_split, save_features, FeatureFormat, FewShotProtocol};
use gfca_core::eval::{export_embeddings, MetricsReport, SourceKind};
use gfca_core::gan::{sample_fake_batch, FakeLabelPolicy};
use gfca_core::gradcheck::{run_gradcheck, GradcheckScope};
use gfca_core::trainer::{self, build_datasets, run_experiment, ExperimentConfig, TrainState};
use gfca_core::{Mat, RngState};

/// Environment variable holding extra `key=value` overrides, separated by
/// semicolons; applied before any `--set` flag.
pub const ENV_OVERRIDES: &str = "GFCA_SET";

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; exits with code 2.
    Config(String),
    /// Everything else; exits with code 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<gfca_core::Error> for CliError {
    fn from(e: gfca_core::Error) -> Self {
        match e {
            gfca_core::Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parse one `key=value` override. Keys without a dot refer to the `[train]`
/// table, except the top-level `task`.
fn parse_override(raw: &str) -> CliResult<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{raw}' is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!("override '{raw}' has an empty key")));
    }
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else if key == "task" {
        vec!["task".to_string()]
    } else {
        vec!["train".to_string(), key.to_string()]
    };
    // try a TOML literal first (numbers, booleans, arrays), else a string
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
    Ok((path, parsed))
}

fn apply_override(doc: &mut toml::Value, path: &[String], value: toml::Value) -> CliResult<()> {
    let mut node = doc;
    for key in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{key}' does not address a table")))?;
        node = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("'{}' does not address a table", path.join("."))))?;
    table.insert(path.last().unwrap().clone(), value);
    Ok(())
}

/// Load a config file and apply overrides: first `GFCA_SET` from the
/// environment, then `--set` flags in order.
pub fn load_config(path: &Path, sets: &[String]) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: toml::Value = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut overrides: Vec<String> = Vec::new();
    if let Ok(env) = std::env::var(ENV_OVERRIDES) {
        overrides.extend(env.split(';').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string));
    }
    overrides.extend_from_slice(sets);
    for raw in &overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut doc, &path, value)?;
    }
    let config: ExperimentConfig =
        doc.try_into().map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn dataset_error(field: &str, e: gfca_core::Error) -> CliError {
    match e {
        gfca_core::Error::Io(_) | gfca_core::Error::Load { .. } | gfca_core::Error::Config { .. } => {
            CliError::Config(format!("{field}: {e}"))
        }
        other => CliError::Runtime(other.to_string()),
    }
}

/// Run a full experiment and write every artifact into the output directory.
pub fn cmd_train(config_path: &Path, sets: &[String]) -> CliResult<()> {
    let config = load_config(config_path, sets)?;
    let out_dir = config
        .output
        .dir
        .clone()
        .ok_or_else(|| CliError::Config("output.dir: required for train".to_string()))?;
    let (source, target) = build_datasets(&config).map_err(|e| {
        let field = if config.data.synthetic.is_some() { "data.synthetic" } else { "data.files" };
        dataset_error(field, e)
    })?;
    let (report, _) = run_experiment(&config, &source, &target, Some(&out_dir))?;
    // echo the resolved configuration, defaults materialized
    let resolved_text = std::fs::read_to_string(out_dir.join("resolved_config.toml"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("# resolved configuration\n{resolved_text}");
    println!("run directory: {}", out_dir.display());
    match (report.few_shot_accuracy, report.normal_accuracy, report.overall_accuracy) {
        (Some(f), Some(n), Some(o)) => {
            println!("few-shot accuracy: {f:.2}%  normal: {n:.2}%  overall: {o:.2}%")
        }
        _ => println!("target unlabeled: no accuracy metrics"),
    }
    Ok(())
}

/// Write the configured synthetic domain pair in both feature formats plus a
/// ground-truth sidecar.
pub fn cmd_synth(config_path: &Path, out_dir: &Path, sets: &[String]) -> CliResult<()> {
    let config = load_config(config_path, sets)?;
    let synth = config
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Config("data.synthetic: required for synth".to_string()))?;
    let pair = gfca_core::datasets::synthesize_domain_pair(synth)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (ds, stem) in [(&pair.source, "source"), (&pair.target, "target")] {
        save_features(ds, &out_dir.join(format!("{stem}.csv")), FeatureFormat::Csv)?;
        save_features(ds, &out_dir.join(format!("{stem}.bin")), FeatureFormat::PackedBinary)?;
    }
    let truth = serde_json::to_string_pretty(&pair.truth)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("ground_truth.json"), truth)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} samples per domain ({} classes, dim {}) to {}",
        pair.source.len(),
        pair.source.class_count,
        pair.source.dim(),
        out_dir.display()
    );
    Ok(())
}

/// Finite-difference check over every loss in scope; nonzero exit on any
/// failure.
pub fn cmd_gradcheck(scope: &str, seed: u64, reps: usize, inject_fault: bool) -> CliResult<()> {
    let scope: GradcheckScope = scope.parse()?;
    let report = run_gradcheck(scope, seed, reps, inject_fault)?;
    for check in &report.checks {
        println!(
            "{}: worst relative error {:.3e} over {} coordinates ({} kink exclusions) .. {}",
            check.name,
            check.max_rel_error,
            check.checked_coordinates,
            check.excluded_kinks,
            if check.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradcheck passed at tolerance {:.0e}", report.tolerance);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed at tolerance {:.0e}",
            report.tolerance
        )))
    }
}

/// Aggregate run directories into a per-mode, per-task table.
pub fn cmd_report(dirs: &[PathBuf], format: &str, out: Option<&Path>) -> CliResult<()> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".to_string()));
    }
    let mut reports = Vec::new();
    for dir in dirs {
        collect_reports(dir, &mut reports)?;
    }
    if reports.is_empty() {
        return Err(CliError::Runtime("no metrics.json found under the given paths".to_string()));
    }
    let table = report_table::aggregate(&reports)?;
    let rendered = match format {
        "markdown" | "md" => table.to_markdown(),
        "csv" => table.to_csv(),
        other => return Err(CliError::Config(format!("unknown report format '{other}'"))),
    };
    match out {
        Some(path) => {
            std::fs::write(path, rendered).map_err(|e| CliError::Runtime(e.to_string()))?
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn collect_reports(dir: &Path, into: &mut Vec<MetricsReport>) -> CliResult<()> {
    let metrics = dir.join("metrics.json");
    if metrics.is_file() {
        let text =
            std::fs::read_to_string(&metrics).map_err(|e| CliError::Runtime(e.to_string()))?;
        into.push(MetricsReport::from_json(&text)?);
        return Ok(());
    }
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for sub in entries {
            collect_reports(&sub, into)?;
        }
        return Ok(());
    }
    Err(CliError::Runtime(format!("{} is not a run directory", dir.display())))
}

/// Re-export encoder embeddings from a finished run directory.
pub fn cmd_export_embeddings(run_dir: &Path, out: &Path) -> CliResult<()> {
    let resolved: ExperimentConfig = toml::from_str(
        &std::fs::read_to_string(run_dir.join("resolved_config.toml"))
            .map_err(|e| CliError::Config(format!("{}: {e}", run_dir.display())))?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let sections = load_checkpoint(&run_dir.join("final.ckpt"))?;
    let state = TrainState::from_checkpoint(&sections, &resolved)?;
    let (source, target) = build_datasets(&resolved)?;
    let protocol = FewShotProtocol::new(
        source.class_count,
        resolved.protocol.few_shot_classes.clone(),
        resolved.protocol.shots,
        resolved.protocol.seed.unwrap_or(resolved.train.seed),
    )?;
    let split = make_few_shot_split(&source, &protocol)?;
    let synth = match (&state.generator, resolved.train.eval_synth_per_class) {
        (Some(g), per_class) if per_class > 0 => {
            let mut rng = RngState::stream(resolved.train.seed, trainer::streams::EVAL);
            let batch = per_class * source.class_count;
            Some(sample_fake_batch(g, &mut rng, state.beta, batch, FakeLabelPolicy::Balanced)?)
        }
        _ => None,
    };
    let mut sets: Vec<(SourceKind, &Mat, Option<&[usize]>)> = vec![(
        SourceKind::RealTrain,
        &split.train.features,
        Some(split.train.labels()?),
    )];
    if split.heldout.len() > 0 {
        sets.push((
            SourceKind::RealHeldout,
            &split.heldout.features,
            Some(split.heldout.labels()?),
        ));
    }
    if let Some((ref f, ref l)) = synth {
        sets.push((SourceKind::Synthetic, f, Some(l.as_slice())));
    }
    sets.push((SourceKind::Target, &target.features, target.labels.as_deref()));
    let rows = export_embeddings(&state.encoder, &sets, out)?;
    println!("wrote {rows} embedding rows to {}", out.display());
    Ok(())
}
