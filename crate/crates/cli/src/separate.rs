use std::path::{Path, PathBuf};

use dequmx::dsp::{istft, mwf, read_wav, sdr, stft, write_wav, SampleFormat, Wave};
use dequmx::separator::{Checkpoint, SeparatorModel};
use dequmx::Tensor;

use crate::config::RunConfig;
use crate::{echo, flag_pairs, CmdResult, Failure, SeparateArgs};

const KEYS: [&str; 7] = ["checkpoints", "input", "out", "mask_only", "mwf", "identity_mask", "reference"];

/// Name of the extra MWF source holding whatever the targets leave over.
pub const RESIDUAL: &str = "residual";

fn write(dir: &Path, name: &str, sample_rate: u32, channels: Vec<Vec<f64>>) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let wave = Wave { sample_rate, channels };
    write_wav(dir.join(format!("{name}.wav")), &wave, SampleFormat::Float32)?;
    Ok(())
}

fn report(reference: Option<&Path>, target: &str, mode: &str, estimate: &[Vec<f64>]) -> CmdResult {
    let Some(dir) = reference else {
        return Ok(());
    };
    let path = dir.join(format!("{target}.wav"));
    if !path.exists() {
        return Ok(());
    }
    let reference = read_wav(&path)?;
    let value = sdr(&reference.channels, estimate).map_err(|e| Failure::mismatch(format!("{}: {e}", path.display())))?;
    println!("{target}\t{mode}\t{value:.3}");
    Ok(())
}

pub fn run(a: SeparateArgs) -> CmdResult {
    let checkpoints = (!a.checkpoints.is_empty()).then(|| {
        a.checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    });
    let flags = flag_pairs!(a.common;
        "checkpoints" => checkpoints,
        "input" => a.input.as_ref().map(|p| p.display().to_string()),
        "out" => a.out.as_ref().map(|p| p.display().to_string()),
        "mask_only" => a.mask_only.then_some(true),
        "mwf" => a.mwf.then_some(true),
        "identity_mask" => a.identity_mask.then_some(true),
        "reference" => a.reference.as_ref().map(|p| p.display().to_string()),
    );
    let defaults = [
        ("out", "separated".to_string()),
        ("mask_only", "false".to_string()),
        ("mwf", "false".to_string()),
        ("identity_mask", "false".to_string()),
    ];
    let cfg = RunConfig::build(&KEYS, &defaults, a.common.config.as_deref(), flags)?;
    echo("separate", &cfg);
    let paths: Vec<PathBuf> = cfg
        .get("checkpoints")
        .ok_or_else(|| Failure::usage("at least one --checkpoint is required"))?
        .split(',')
        .map(PathBuf::from)
        .collect();
    let input = cfg.get("input").ok_or_else(|| Failure::usage("--input is required"))?;
    let out = PathBuf::from(cfg.get("out").unwrap_or("separated"));
    let use_mwf = cfg.flag("mwf")?;
    let mask_only = cfg.flag("mask_only")? || !use_mwf;
    let reference = cfg.get("reference").map(PathBuf::from);

    let mut models: Vec<SeparatorModel> = Vec::new();
    for p in &paths {
        if !p.exists() {
            return Err(Failure::usage(format!("checkpoint {} does not exist", p.display())));
        }
        let mut model = Checkpoint::load(p)?.model()?;
        if cfg.flag("identity_mask")? {
            model.make_identity_mask()?;
        }
        if let Some(first) = models.first() {
            if first.spec.stft != model.spec.stft || first.spec.channels != model.spec.channels {
                return Err(Failure::mismatch(format!(
                    "{} uses a different framing or channel count than the first checkpoint",
                    p.display()
                )));
            }
        }
        if models.iter().any(|m| m.target == model.target) {
            return Err(Failure::usage(format!("two checkpoints for target `{}`", model.target)));
        }
        models.push(model);
    }
    let spec = models[0].spec.clone();
    if !Path::new(input).exists() {
        return Err(Failure::usage(format!("input {input} does not exist")));
    }
    let wave = read_wav(input)?;
    if wave.sample_rate != spec.stft.sample_rate || wave.channels.len() != spec.channels {
        return Err(Failure::mismatch(format!(
            "input is {} Hz with {} channel(s); the model expects {} Hz with {}",
            wave.sample_rate,
            wave.channels.len(),
            spec.stft.sample_rate,
            spec.channels
        )));
    }
    let mixture = stft(&wave.channels, &spec.stft)?;
    let mix_mag = mixture.magnitude();
    let mut estimates: Vec<Tensor> = Vec::new();
    for model in &models {
        estimates.push(model.separate(&mix_mag)?.0);
    }
    let len = wave.channels[0].len();
    let trim = |mut w: Vec<Vec<f64>>| {
        for c in &mut w {
            c.truncate(len);
        }
        w
    };

    println!("target\tmode\tsdr_db");
    if mask_only {
        for (model, est) in models.iter().zip(&estimates) {
            let signal = trim(istft(&mixture.with_magnitude(est)?)?);
            report(reference.as_deref(), &model.target, "mask", &signal)?;
            write(&out.join("mask"), &model.target, wave.sample_rate, signal)?;
        }
    }
    if use_mwf {
        let total = estimates
            .iter()
            .skip(1)
            .try_fold(estimates[0].clone(), |acc, e| acc.add(e))?;
        let residual = mix_mag.zip_map(&total, "residual", |m, s| (m - s).max(0.0))?;
        let mut mags = estimates.clone();
        mags.push(residual);
        let refined = mwf(&mags, &mixture)?;
        let names = models.iter().map(|m| m.target.as_str()).chain([RESIDUAL]);
        for (name, spec) in names.zip(refined) {
            let signal = trim(istft(&spec)?);
            report(reference.as_deref(), name, "mwf", &signal)?;
            write(&out.join("mwf"), name, wave.sample_rate, signal)?;
        }
    }
    Ok(())
}
