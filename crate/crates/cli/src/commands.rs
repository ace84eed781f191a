use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ivio::bias_net::{
    load_checkpoint, resume, rollout_loss, save_checkpoint, segment_trajectory, train as train_net,
    BiasNet, BiasPredictor, TrainConfig, TrainSegment, ZeroBias,
};
use ivio::dataio::{
    load_dataset, load_euroc, read_trajectory, synthesize, write_euroc, write_tracks,
    write_trajectory, write_true_bias, Dataset, TrajectorySpec, TRACKS_FILE, TRUE_BIAS_CSV,
};
use ivio::eval::{blackout_harness, Alignment, HarnessConfig, MetricReport};
use ivio::msckf::{format_diagnostics, run_vio};
use ivio::NoiseParams;
use log::info;

use crate::config::{RunConfig, CAMERA_FILE};
use crate::CliError;

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| ivio::Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| ivio::Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

pub fn simulate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| ivio::Error::Io {
        path: spec_path.into(),
        source: e,
    })?;
    let spec: TrajectorySpec = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    spec.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let synth = synthesize(&spec)?;
    let d = &synth.dataset;
    write_euroc(out, d)?;
    write_tracks(&out.join(TRACKS_FILE), &d.frames)?;
    write_true_bias(&out.join(TRUE_BIAS_CSV), &d.imu, &synth.true_bias)?;
    let camera = toml::to_string(&spec.camera).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join(CAMERA_FILE), &camera)?;
    // the spec, seed included, travels with the data
    let spec_copy = toml::to_string(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("spec.toml"), &spec_copy)?;
    info!(
        "wrote {} IMU samples, {} frames, {} landmarks to {}",
        d.imu.len(),
        d.frames.len(),
        synth.landmarks.len(),
        out.display()
    );
    Ok(())
}

fn segments(dirs: &[PathBuf], window: usize) -> Result<Vec<TrainSegment>, CliError> {
    let mut out = Vec::new();
    for dir in dirs {
        let d = load_euroc(dir)?.trimmed_to_ground_truth()?;
        let (states, samples) = d.aligned_states()?;
        let segs = segment_trajectory(&states, &samples, window)?;
        info!("{}: {} segments", dir.display(), segs.len());
        out.extend(segs);
    }
    Ok(out)
}

/// Mean loss of a network that predicts zero bias (the untrained head is zero).
fn zero_bias_loss(
    segs: &[TrainSegment],
    cfg: &RunConfig,
    noise: &NoiseParams,
) -> Result<f64, CliError> {
    let net = BiasNet::new(cfg.architecture.clone(), cfg.seed)?;
    let mut total = 0.0;
    for s in segs {
        total += rollout_loss(&net, s, &cfg.train, noise)?.value();
    }
    Ok(total / segs.len().max(1) as f64)
}

pub fn train(
    train_dirs: &[PathBuf],
    validation_dirs: &[PathBuf],
    config: Option<&Path>,
    resume_from: Option<&Path>,
    out: &Path,
    loss_log: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let tc: &TrainConfig = &cfg.train;
    let train_set = segments(train_dirs, tc.window)?;
    let validation = segments(validation_dirs, tc.window)?;
    if train_set.is_empty() {
        return Err(ivio::Error::InsufficientData(format!(
            "no training segment of {} samples",
            tc.window
        ))
        .into());
    }
    let (outcome, resumed_at) = match resume_from {
        Some(path) => {
            let net = load_checkpoint(path)?;
            if net.arch != cfg.architecture {
                return Err(CliError::Config(format!(
                    "{} was trained with a different architecture than the configuration",
                    path.display()
                )));
            }
            let at = net.epochs as usize;
            (
                resume(net, &train_set, &validation, tc, &cfg.noise)?,
                Some(at),
            )
        }
        None => (
            train_net(
                &train_set,
                &validation,
                cfg.architecture.clone(),
                tc,
                &cfg.noise,
            )?,
            None,
        ),
    };
    save_checkpoint(&outcome.net, out)?;

    let baseline = zero_bias_loss(
        if validation.is_empty() {
            &train_set
        } else {
            &validation
        },
        &cfg,
        &cfg.noise,
    )?;
    let log_path = loss_log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("loss.tsv"));
    let mut log = String::new();
    match resumed_at.filter(|_| log_path.exists()) {
        // keep the lineage of the resumed checkpoint: epochs after it were
        // discarded when the best parameters were selected
        Some(at) => {
            let old = std::fs::read_to_string(&log_path).map_err(|e| ivio::Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            for line in old.lines() {
                let epoch = line
                    .split('\t')
                    .next()
                    .and_then(|c| c.parse::<usize>().ok());
                if epoch.is_none_or(|e| e <= at) {
                    let _ = writeln!(log, "{line}");
                }
            }
        }
        None => {
            let _ = writeln!(log, "# seed={} zero_bias_loss={baseline}", cfg.seed);
            let _ = writeln!(log, "epoch\ttrain_loss\tvalidation_loss");
        }
    }
    for e in &outcome.trace {
        let _ = writeln!(log, "{}\t{}\t{}", e.epoch, e.train_loss, e.validation_loss);
    }
    write_file(&log_path, &log)?;
    println!(
        "best_epoch={} validation_loss={} zero_bias_loss={baseline} checkpoint={}",
        outcome.best_epoch,
        outcome
            .trace
            .iter()
            .find(|e| e.epoch == outcome.best_epoch)
            .map_or(f64::NAN, |e| e.validation_loss),
        out.display()
    );
    Ok(())
}

fn predictor(checkpoint: Option<&Path>) -> Result<Box<dyn BiasPredictor>, CliError> {
    Ok(match checkpoint {
        Some(path) => Box::new(load_checkpoint(path)?),
        None => Box::new(ZeroBias),
    })
}

fn dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let camera = cfg.camera_for(dir)?;
    Ok(load_dataset(dir, camera)?.trimmed_to_ground_truth()?)
}

pub fn run(
    dir: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    diagnostics: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let data = dataset(dir, &cfg)?;
    let predictor = predictor(checkpoint)?;
    let initial = data.initial_state()?;
    let result = run_vio(
        &data.imu,
        &data.frames,
        predictor.as_ref(),
        &data.camera,
        &cfg.noise,
        &cfg.filter,
        &initial,
    )?;
    write_trajectory(out, &result.trajectory)?;
    let diag_path = diagnostics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("diag.txt"));
    write_file(&diag_path, &format_diagnostics(&result.diagnostics))?;
    let report =
        MetricReport::compute(&result.trajectory, &data.ground_truth, cfg.alignment, None)?;
    print!("{report}");
    Ok(())
}

pub fn eval(
    est_path: &Path,
    gt_path: &Path,
    alignment: Alignment,
    reference_length: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let est = read_trajectory(est_path)?;
    let gt = if gt_path.is_dir() {
        load_euroc(gt_path)?.ground_truth
    } else {
        read_trajectory(gt_path)?
    };
    let report = MetricReport::compute(&est, &gt, alignment, reference_length)?;
    print!("{report}");
    if let Some(out) = out {
        write_file(out, &report.records())?;
    }
    Ok(())
}

pub fn blackout(
    dir: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    start: f64,
    durations: &[f64],
    out: &Path,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let data = dataset(dir, &cfg)?;
    let predictor = predictor(checkpoint)?;
    let harness = HarnessConfig {
        filter: cfg.filter.clone(),
        noise: cfg.noise,
        alignment: cfg.alignment,
    };
    let mut table = String::from("duration_s\tbaseline_ate_m\tblackout_ate_m\tupdates_in_window\n");
    for &d in durations {
        let o = blackout_harness(&data, predictor.as_ref(), &harness, start, d)?;
        let _ = writeln!(
            table,
            "{d}\t{}\t{}\t{}",
            o.baseline.ate_translation, o.blackout.ate_translation, o.updates_in_window
        );
        println!(
            "duration={d} baseline_ate_m={:.6} blackout_ate_m={:.6}",
            o.baseline.ate_translation, o.blackout.ate_translation
        );
    }
    write_file(out, &table)
}
