use dequmx::deq::Fault;
use dequmx::gradcheck::{
    broyden_affine_suite, dense_oracle_suite, equilibrium_suite, implicit_fd_suite, jfb_descent_suite, scalar_closed_form,
    FdSettings, SuiteReport,
};

use crate::config::RunConfig;
use crate::{echo, flag_pairs, CmdResult, Failure, GradcheckArgs};

const KEYS: [&str; 5] = ["mode", "dim", "instances", "seed", "inject_sign_flip"];
const MODES: [&str; 5] = ["all", "equilibrium", "implicit", "jfb", "broyden"];

pub fn run(a: GradcheckArgs) -> CmdResult {
    let flags = flag_pairs!(a.common;
        "mode" => a.mode.as_ref(),
        "dim" => a.dim,
        "instances" => a.instances,
        "seed" => a.seed,
        "inject_sign_flip" => a.inject_sign_flip.then_some(true),
    );
    let defaults = [("mode", "all".to_string()), ("seed", "0".to_string()), ("inject_sign_flip", "false".to_string())];
    let cfg = RunConfig::build(&KEYS, &defaults, a.common.config.as_deref(), flags)?;
    echo("gradcheck", &cfg);
    let mode = cfg.get("mode").unwrap_or("all");
    if !MODES.contains(&mode) {
        return Err(Failure::usage(format!("mode must be one of {}, got `{mode}`", MODES.join(", "))));
    }
    let seed: u64 = cfg.parse("seed")?;
    let instances: Option<usize> = cfg.parse_opt("instances")?;
    if instances == Some(0) {
        return Err(Failure::usage("instances must be positive"));
    }
    let dim: Option<usize> = cfg.parse_opt("dim")?;
    if let Some(d) = dim {
        if mode != "implicit" {
            return Err(Failure::usage("--dim applies to --mode implicit only"));
        }
        if d < 4 {
            return Err(Failure::usage("dim must be at least 4"));
        }
    }
    let fault = if cfg.flag("inject_sign_flip")? {
        Fault::FlipRhsSign
    } else {
        Fault::None
    };
    let n = |default: usize| instances.unwrap_or(default);
    let wants = |m: &str| mode == "all" || mode == m;

    let mut reports: Vec<SuiteReport> = Vec::new();
    if wants("equilibrium") {
        reports.push(equilibrium_suite(n(100), seed)?);
    }
    if wants("implicit") {
        match dim {
            Some(d) => reports.push(dense_oracle_suite(n(20), seed, d, fault)?),
            None => {
                reports.push(implicit_fd_suite(n(50), seed, &FdSettings::default(), fault)?);
                if fault == Fault::None {
                    reports.push(scalar_closed_form(0.7, 0.3)?);
                }
            }
        }
    }
    if wants("jfb") {
        reports.push(jfb_descent_suite(n(200), seed, 0.95)?);
    }
    if wants("broyden") {
        reports.push(broyden_affine_suite(n(100), seed, 0.99)?);
    }
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&SuiteReport> = reports.iter().filter(|r| !r.ok()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::property(format!(
            "{} suite(s) failed; replay: {}",
            failed.len(),
            failed.iter().map(|r| format!("{} [{}]", r.name, r.worst_instance)).collect::<Vec<_>>().join("; ")
        )))
    }
}
