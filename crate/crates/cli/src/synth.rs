use std::path::Path;

use dequmx::dsp::{generate_scene, write_wav, SampleFormat, SceneSpec, Wave};
use dequmx::separator::{toy_scene_spec_with, TOY_SECONDS, TOY_TARGETS};

use crate::config::RunConfig;
use crate::{echo, flag_pairs, CmdResult, Failure, SynthArgs};

const KEYS: [&str; 5] = ["out", "scenes", "seed", "seconds", "scene"];

/// Write the mixture and each source of `spec` into `dir`.
pub fn write_scene(dir: &Path, spec: &SceneSpec, names: &[String]) -> CmdResult {
    let scene = generate_scene(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    let wave = |channels: &Vec<Vec<f64>>| Wave {
        sample_rate: spec.sample_rate,
        channels: channels.clone(),
    };
    write_wav(dir.join("mixture.wav"), &wave(&scene.mixture), SampleFormat::Float32)?;
    for (name, src) in names.iter().zip(&scene.sources) {
        write_wav(dir.join(format!("{name}.wav")), &wave(src), SampleFormat::Float32)?;
    }
    std::fs::write(dir.join("scene.txt"), spec.to_text()).map_err(dequmx::Error::from)?;
    Ok(())
}

pub fn run(a: SynthArgs) -> CmdResult {
    let flags = flag_pairs!(a.common;
        "out" => a.out.as_ref().map(|p| p.display().to_string()),
        "scenes" => a.scenes,
        "seed" => a.seed,
        "seconds" => a.seconds,
        "scene" => a.scene.as_ref().map(|p| p.display().to_string()),
    );
    let defaults = [
        ("scenes", "1".to_string()),
        ("seed", "0".to_string()),
        ("seconds", TOY_SECONDS.to_string()),
    ];
    let cfg = RunConfig::build(&KEYS, &defaults, a.common.config.as_deref(), flags)?;
    echo("synth", &cfg);
    let out = cfg.get("out").ok_or_else(|| Failure::usage("--out is required"))?.to_string();
    let scenes: usize = cfg.parse("scenes")?;
    let seed: u64 = cfg.parse("seed")?;
    let seconds: f64 = cfg.parse("seconds")?;
    let template = match cfg.get("scene") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {path}: {e}")))?;
            Some(SceneSpec::parse(&text)?)
        }
        None => None,
    };
    for i in 0..scenes as u64 {
        let (spec, names) = match &template {
            Some(t) => {
                let spec = SceneSpec { seed: t.seed + i, ..t.clone() };
                let names = (0..spec.sources.len()).map(|j| format!("source{j}")).collect();
                (spec, names)
            }
            None => (
                toy_scene_spec_with(seed.wrapping_mul(1_000_000) + i, seconds),
                TOY_TARGETS.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            ),
        };
        let dir = if scenes == 1 {
            Path::new(&out).to_path_buf()
        } else {
            Path::new(&out).join(format!("scene{i:04}"))
        };
        write_scene(&dir, &spec, &names)?;
        println!("{}", dir.display());
    }
    Ok(())
}
