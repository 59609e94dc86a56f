use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use dequmx::separator::{
    load_dataset_dir, mean_over, toy_dataset_with, Checkpoint, Dataset, EpochLog, ModelSpec, SeparatorModel,
    TrainConfig, Trainer, Variant, TOY_SECONDS, TOY_TARGETS,
};
use dequmx::dsp::StftConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::{echo, flag_pairs, CmdResult, Failure, SweepArgs, TrainArgs};

const SPEC_KEYS: [&str; 15] = [
    "variant", "sample_rate", "frame_len", "hop", "bins_total", "bins_cropped", "channels", "hidden", "targets",
    "lstm_layers", "unroll_l", "alpha", "epsilon", "l_max", "backward",
];
const TRAIN_KEYS: [&str; 11] = [
    "segment_seconds",
    "lr",
    "weight_decay",
    "lr_decay_factor",
    "plateau_patience_epochs",
    "early_stop_patience_epochs",
    "pretrain_unroll_l",
    "pretrain_epochs",
    "epochs",
    "batch_size",
    "seed",
];
const RUN_KEYS: [&str; 9] = [
    "scale", "target", "data", "synthetic", "train_scenes", "valid_scenes", "scene_seconds", "out", "resume",
];

fn base_spec(variant: Variant, scale: &str) -> Result<ModelSpec, Failure> {
    match scale {
        "toy" => Ok(ModelSpec::toy(variant)),
        "full" => Ok(ModelSpec::full_scale(variant)),
        other => Err(Failure::usage(format!("scale must be `toy` or `full`, got `{other}`"))),
    }
}

fn train_defaults(scale: &str) -> TrainConfig {
    if scale == "toy" {
        TrainConfig::toy()
    } else {
        TrainConfig::default()
    }
}

fn train_kv(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("segment_seconds", c.segment_seconds.to_string()),
        ("lr", c.lr.to_string()),
        ("weight_decay", c.weight_decay.to_string()),
        ("lr_decay_factor", c.lr_decay_factor.to_string()),
        ("plateau_patience_epochs", c.plateau_patience_epochs.to_string()),
        ("early_stop_patience_epochs", c.early_stop_patience_epochs.to_string()),
        ("pretrain_unroll_l", c.pretrain_unroll_l.to_string()),
        ("pretrain_epochs", c.pretrain_epochs.to_string()),
        ("epochs", c.epochs.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("seed", c.seed.to_string()),
    ]
}

fn parse_train(cfg: &RunConfig, l_max: usize) -> Result<TrainConfig, Failure> {
    let c = TrainConfig {
        segment_seconds: cfg.parse("segment_seconds")?,
        lr: cfg.parse("lr")?,
        weight_decay: cfg.parse("weight_decay")?,
        lr_decay_factor: cfg.parse("lr_decay_factor")?,
        plateau_patience_epochs: cfg.parse("plateau_patience_epochs")?,
        early_stop_patience_epochs: cfg.parse("early_stop_patience_epochs")?,
        pretrain_unroll_l: cfg.parse_opt("pretrain_unroll_l")?.unwrap_or(TrainConfig::default().pretrain_unroll_l),
        pretrain_epochs: cfg.parse_opt("pretrain_epochs")?.unwrap_or(0),
        l_max_after_pretrain: l_max,
        epochs: cfg.parse("epochs")?,
        batch_size: cfg.parse("batch_size")?,
        seed: cfg.parse("seed")?,
    };
    c.validate()?;
    Ok(c)
}

fn parse_spec(cfg: &RunConfig) -> Result<ModelSpec, Failure> {
    let pairs: Vec<(&str, &str)> = cfg.iter().filter(|(k, v)| SPEC_KEYS.contains(k) && !v.is_empty()).collect();
    ModelSpec::from_kv(pairs).map_err(|e| Failure::usage(e.to_string()))
}

fn load_data(cfg: &RunConfig, spec: &ModelSpec, target: &str, segment_seconds: f64) -> Result<Dataset, Failure> {
    let data = cfg.get("data");
    let synthetic = cfg.flag("synthetic")?;
    match (data, synthetic) {
        (Some(_), true) => Err(Failure::usage("give either --data or --synthetic, not both")),
        (None, false) => Err(Failure::usage("no dataset: give --data DIR or --synthetic")),
        (Some(dir), false) => {
            let dir = Path::new(dir);
            if !dir.join("train").is_dir() {
                return Err(Failure::usage(format!("dataset directory {} has no train/ folder", dir.display())));
            }
            Ok(load_dataset_dir(dir, target, &spec.stft, segment_seconds)?)
        }
        (None, true) => {
            if spec.stft != StftConfig::toy() || spec.channels != 1 {
                return Err(Failure::usage("synthetic scenes require the toy framing and one channel"));
            }
            let index = TOY_TARGETS
                .iter()
                .position(|t| *t == target)
                .ok_or_else(|| Failure::usage(format!("synthetic targets are {}, got `{target}`", TOY_TARGETS.join(", "))))?;
            Ok(toy_dataset_with(
                cfg.parse("train_scenes")?,
                cfg.parse("valid_scenes")?,
                cfg.parse("seed")?,
                cfg.parse("scene_seconds")?,
                index,
            )?)
        }
    }
}

/// Effective configuration of `train`: defaults for the chosen variant and
/// scale, then the config file, then flags.
fn train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let flags = flag_pairs!(a.common;
        "variant" => a.variant.as_ref(),
        "scale" => a.scale.as_ref(),
        "backward" => a.backward.as_ref(),
        "pretrain_unroll_l" => a.pretrain_l,
        "pretrain_epochs" => a.pretrain_epochs,
        "l_max" => a.lmax,
        "unroll_l" => a.unroll,
        "epochs" => a.epochs,
        "batch_size" => a.batch_size,
        "lr" => a.lr,
        "seed" => a.seed,
        "hidden" => a.hidden,
        "target" => a.target.as_ref(),
        "data" => a.data.as_ref().map(|p| p.display().to_string()),
        "synthetic" => a.synthetic.then_some(true),
        "train_scenes" => a.train_scenes,
        "valid_scenes" => a.valid_scenes,
        "out" => a.out.as_ref().map(|p| p.display().to_string()),
        "resume" => a.resume.as_ref().map(|p| p.display().to_string()),
    );
    let allowed: Vec<&str> = SPEC_KEYS.iter().chain(&TRAIN_KEYS).chain(&RUN_KEYS).copied().collect();
    // First pass: find variant, scale and resume to choose the defaults.
    let user = RunConfig::build(&allowed, &[], a.common.config.as_deref(), flags.clone())?;
    let mut defaults: Vec<(&str, String)> = Vec::new();
    if let Some(path) = user.get("resume") {
        let ckpt = Checkpoint::load(path)?;
        for (k, v) in ckpt.spec.to_kv() {
            let key = SPEC_KEYS.iter().find(|s| **s == k).copied().expect("spec keys are known");
            defaults.push((key, v));
        }
        defaults.extend(train_kv(&ckpt.config));
        defaults.push(("target", ckpt.target.clone()));
        defaults.push(("scale", "toy".into()));
    } else {
        let variant: Variant = user
            .get("variant")
            .unwrap_or("deq_umx")
            .parse()
            .map_err(|e: dequmx::Error| Failure::usage(e.to_string()))?;
        let scale = user.get("scale").unwrap_or("toy").to_string();
        let spec = base_spec(variant, &scale)?;
        for (k, v) in spec.to_kv() {
            let key = SPEC_KEYS.iter().find(|s| **s == k).copied().expect("spec keys are known");
            defaults.push((key, v));
        }
        defaults.extend(train_kv(&train_defaults(&scale)));
        defaults.push(("target", spec.targets[0].clone()));
        defaults.push(("scale", scale));
    }
    defaults.extend([
        ("synthetic", "false".to_string()),
        ("train_scenes", "64".to_string()),
        ("valid_scenes", "8".to_string()),
        ("scene_seconds", TOY_SECONDS.to_string()),
        ("out", "run".to_string()),
    ]);
    let mut cfg = RunConfig::build(&allowed, &defaults, a.common.config.as_deref(), flags)?;
    // Keys tied to a variant are dropped when they do not apply.
    let variant: Variant = cfg.parse("variant")?;
    for (key, applies) in [
        ("lstm_layers", variant.is_recurrent()),
        ("unroll_l", variant == Variant::WtUmx),
        ("alpha", variant == Variant::DeqUmx),
        ("epsilon", variant == Variant::DeqUmx),
        ("l_max", variant == Variant::DeqUmx),
        ("backward", variant == Variant::DeqUmx),
    ] {
        if !applies {
            if user.contains(key) {
                return Err(Failure::usage(format!("`{key}` does not apply to {variant}")));
            }
            cfg.remove(key);
        }
    }
    if variant != Variant::DeqUmx {
        for key in ["pretrain_unroll_l", "pretrain_epochs"] {
            if user.contains(key) {
                return Err(Failure::usage(format!("`{key}` does not apply to {variant}")));
            }
            cfg.remove(key);
        }
    }
    Ok(cfg)
}

pub fn run(a: TrainArgs) -> CmdResult {
    let cfg = train_config(&a)?;
    echo("train", &cfg);
    let spec = parse_spec(&cfg)?;
    let l_max = spec.solver_config.map_or(TrainConfig::default().l_max_after_pretrain, |c| c.l_max);
    let train_cfg = parse_train(&cfg, l_max)?;
    let target = cfg.get("target").ok_or_else(|| Failure::usage("missing target"))?.to_string();
    if !spec.targets.contains(&target) {
        return Err(Failure::usage(format!("target `{target}` is not among the spec targets {:?}", spec.targets)));
    }
    let data = load_data(&cfg, &spec, &target, train_cfg.segment_seconds)?;
    let out = PathBuf::from(cfg.get("out").unwrap_or("run"));

    let mut trainer = match cfg.get("resume") {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.spec != spec || ckpt.target != target {
                return Err(Failure::mismatch("configuration differs from the resumed checkpoint's model"));
            }
            Trainer::from_checkpoint(&ckpt, train_cfg)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
            let mut model = SeparatorModel::new(&spec, &target, &mut rng)?;
            let mixes: Vec<_> = data.train.iter().map(|e| e.mixture_magnitude()).collect();
            model.fit_normalization(&mixes)?;
            Trainer::new(model, train_cfg)?
        }
    };

    std::fs::create_dir_all(&out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(out.join("config.txt"), cfg.echo()).map_err(dequmx::Error::from)?;
    let log_path = out.join("train.log");
    let fresh = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(dequmx::Error::from)?;
    if fresh {
        writeln!(log, "{}", EpochLog::HEADER).map_err(dequmx::Error::from)?;
    }
    println!("{}", EpochLog::HEADER);
    let result = trainer.train(&data, |line, t| {
        println!("{line}");
        writeln!(log, "{line}")?;
        let ckpt = t.checkpoint();
        ckpt.save(out.join("last.ckpt"))?;
        if t.state.since_best == 0 {
            ckpt.save(out.join("best.ckpt"))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        let failure = Failure::from(e);
        if failure.code == 2 {
            let path = out.join("nan.ckpt");
            trainer.checkpoint().save(&path)?;
            eprintln!("diagnostic checkpoint written to {}", path.display());
        }
        return Err(failure);
    }
    if !data.valid.is_empty() {
        let model = &trainer.model;
        let sdr = mean_over(&data.valid, |e| e.model_sdr(model))?;
        println!("# valid_sdr_db = {sdr:.3}");
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let flags = flag_pairs!(a.common;
        "l_values" => a.l_values.as_ref(),
        "epochs" => a.epochs,
        "seed" => a.seed,
        "train_scenes" => a.train_scenes,
        "valid_scenes" => a.valid_scenes,
    );
    let mut defaults = train_kv(&TrainConfig {
        epochs: 30,
        ..TrainConfig::toy()
    });
    defaults.extend([
        ("l_values", "1,2,3,4,5,6,7,8".to_string()),
        ("train_scenes", "64".to_string()),
        ("valid_scenes", "8".to_string()),
        ("hidden", ModelSpec::toy(Variant::WtUmx).hidden.to_string()),
    ]);
    defaults.retain(|(k, _)| *k != "pretrain_unroll_l" && *k != "pretrain_epochs");
    let allowed: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
    let cfg = RunConfig::build(&allowed, &defaults, a.common.config.as_deref(), flags)?;
    echo("sweep", &cfg);
    let l_values: Vec<usize> = cfg
        .get("l_values")
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Failure::usage(format!("bad L value `{s}`"))))
        .collect::<Result<_, _>>()?;
    if l_values.is_empty() {
        return Err(Failure::usage("the list of L values is empty"));
    }
    let mut tc = TrainConfig::toy();
    tc.segment_seconds = cfg.parse("segment_seconds")?;
    tc.lr = cfg.parse("lr")?;
    tc.weight_decay = cfg.parse("weight_decay")?;
    tc.lr_decay_factor = cfg.parse("lr_decay_factor")?;
    tc.plateau_patience_epochs = cfg.parse("plateau_patience_epochs")?;
    tc.early_stop_patience_epochs = cfg.parse("early_stop_patience_epochs")?;
    tc.epochs = cfg.parse("epochs")?;
    tc.batch_size = cfg.parse("batch_size")?;
    tc.seed = cfg.parse("seed")?;
    tc.pretrain_epochs = 0;
    tc.validate()?;
    let data = toy_dataset_with(cfg.parse("train_scenes")?, cfg.parse("valid_scenes")?, tc.seed, TOY_SECONDS, 0)?;
    if data.valid.is_empty() {
        return Err(Failure::usage("valid_scenes must be positive"));
    }
    println!("L\tval_loss\tsdr_db\tepochs");
    for l in l_values {
        let mut spec = ModelSpec::toy(Variant::WtUmx);
        spec.unroll_l = Some(l);
        spec.hidden = cfg.parse("hidden")?;
        spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
        let mut model = SeparatorModel::new(&spec, "tone", &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
        let mixes: Vec<_> = data.train.iter().map(|e| e.mixture_magnitude()).collect();
        model.fit_normalization(&mixes)?;
        let mut trainer = Trainer::new(model, tc.clone())?;
        let history = trainer.train(&data, |_, _| Ok(()))?;
        let model = &trainer.model;
        let val = trainer.validation_loss(&data.valid)?;
        let sdr = mean_over(&data.valid, |e| e.model_sdr(model))?;
        println!("{l}\t{val:.6e}\t{sdr:.3}\t{}", history.len());
    }
    println!("# toy data: no trend of SDR over L is asserted or expected to match the published curve");
    Ok(())
}
