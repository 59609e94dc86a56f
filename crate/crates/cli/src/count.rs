use dequmx::separator::{ModelSpec, Variant};

use crate::config::RunConfig;
use crate::{echo, flag_pairs, CmdResult, CountArgs, Failure};

/// Published figures: parameters (M, all targets) and GMACs per 6 s.
const TABLE1: [(Variant, f64, f64); 6] = [
    (Variant::Umx, 35.55, 9.08),
    (Variant::UmxLarge4, 41.85, 10.69),
    (Variant::UmxLarge5, 48.16, 12.30),
    (Variant::UmxSmall, 25.15, 6.42),
    (Variant::WtUmx, 25.06, 12.29),
    (Variant::DeqUmx, 25.06, 18.74),
];

const KEYS: [&str; 5] = ["variant", "seconds", "unroll", "scale", "table1"];

pub fn spec_for(variant: Variant, scale: &str, unroll: Option<usize>) -> Result<ModelSpec, Failure> {
    let mut spec = match scale {
        "full" => ModelSpec::full_scale(variant),
        "toy" => ModelSpec::toy(variant),
        other => return Err(Failure::usage(format!("scale must be `full` or `toy`, got `{other}`"))),
    };
    if let Some(l) = unroll {
        match variant {
            Variant::WtUmx => spec.unroll_l = Some(l),
            Variant::DeqUmx => {
                if l == 0 {
                    return Err(Failure::usage("deq_umx needs at least one solver evaluation"));
                }
                if let Some(c) = spec.solver_config.as_mut() {
                    c.l_max = l;
                }
            }
            _ => return Err(Failure::usage(format!("--unroll does not apply to {variant}"))),
        }
    }
    Ok(spec)
}

pub fn run(a: CountArgs) -> CmdResult {
    let flags = flag_pairs!(a.common;
        "variant" => a.variant.as_ref(),
        "seconds" => a.seconds,
        "unroll" => a.unroll,
        "scale" => a.scale.as_ref(),
        "table1" => a.table1.then_some(true),
    );
    let defaults = [("seconds", "6".to_string()), ("scale", "full".to_string()), ("table1", "false".to_string())];
    let cfg = RunConfig::build(&KEYS, &defaults, a.common.config.as_deref(), flags)?;
    echo("count", &cfg);
    let seconds: f64 = cfg.parse("seconds")?;
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Failure::usage("seconds must be positive"));
    }
    let scale = cfg.get("scale").unwrap_or("full").to_string();
    let unroll: Option<usize> = cfg.parse_opt("unroll")?;
    let variants: Vec<Variant> = match cfg.get("variant") {
        Some(v) => vec![v.parse().map_err(|e: dequmx::Error| Failure::usage(e.to_string()))?],
        None if cfg.flag("table1")? => Variant::ALL.to_vec(),
        None => return Err(Failure::usage("give --variant or --table1")),
    };
    let table1 = cfg.flag("table1")?;
    let umx_total = spec_for(Variant::Umx, &scale, None)?.count_macs(seconds).total as f64;
    let umx_params = spec_for(Variant::Umx, &scale, None)?.count_params().total as f64;

    let mut header = vec![
        "variant",
        "targets",
        "params_per_target",
        "params_total_m",
        "frames",
        "macs_total_g",
        "core_macs_per_iteration",
        "macs_at_zero_iterations",
        "macs_ratio_to_umx",
        "param_reduction_vs_umx",
    ];
    if table1 {
        header.extend(["published_params_m", "param_rel_err", "published_macs_g"]);
    }
    println!("{}", header.join("\t"));
    for v in variants {
        let spec = spec_for(v, &scale, if v == Variant::WtUmx || v == Variant::DeqUmx { unroll } else { None })?;
        let params = spec.count_params();
        let macs = spec.count_macs(seconds);
        let intercept = spec.count_macs_with(seconds, 0);
        let mut row = vec![
            v.to_string(),
            spec.targets.len().to_string(),
            params.per_target.to_string(),
            format!("{:.2}", params.total as f64 / 1e6),
            macs.frames.to_string(),
            format!("{:.2}", macs.total as f64 / 1e9),
            macs.core_per_iteration.to_string(),
            intercept.total.to_string(),
            format!("{:.3}", macs.total as f64 / umx_total),
            format!("{:.3}", 1.0 - params.total as f64 / umx_params),
        ];
        if table1 {
            let (_, pp, pm) = TABLE1.iter().find(|(tv, _, _)| *tv == v).copied().expect("every variant is listed");
            row.extend([
                format!("{pp:.2}"),
                format!("{:+.3}", params.total as f64 / 1e6 / pp - 1.0),
                format!("{pm:.2}"),
            ]);
        }
        println!("{}", row.join("\t"));
    }
    Ok(())
}
