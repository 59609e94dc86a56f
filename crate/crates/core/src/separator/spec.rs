use std::fmt;
use std::str::FromStr;

use crate::deq::BackwardMode;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::solvers::SolverConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Umx,
    UmxLarge4,
    UmxLarge5,
    UmxSmall,
    WtUmx,
    DeqUmx,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Umx,
        Variant::UmxLarge4,
        Variant::UmxLarge5,
        Variant::UmxSmall,
        Variant::WtUmx,
        Variant::DeqUmx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Umx => "umx",
            Variant::UmxLarge4 => "umx_large4",
            Variant::UmxLarge5 => "umx_large5",
            Variant::UmxSmall => "umx_small",
            Variant::WtUmx => "wt_umx",
            Variant::DeqUmx => "deq_umx",
        }
    }

    /// Whether the sequence model is the BLSTM stack.
    pub fn is_recurrent(self) -> bool {
        !matches!(self, Variant::WtUmx | Variant::DeqUmx)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for BackwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardMode::Implicit => "implicit",
            BackwardMode::Jfb => "jfb",
        })
    }
}

impl FromStr for BackwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(BackwardMode::Implicit),
            "jfb" => Ok(BackwardMode::Jfb),
            _ => Err(Error::Config(format!("unknown backward mode `{s}` (implicit or jfb)"))),
        }
    }
}

/// Declarative description of a separator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub stft: StftConfig,
    pub bins_total: usize,
    pub bins_cropped: usize,
    pub channels: usize,
    /// Sequence-model width `p`.
    pub hidden: usize,
    /// BLSTM layers; recurrent variants only.
    pub lstm_layers: Option<usize>,
    /// Unroll count; weight-tied variant only.
    pub unroll_l: Option<usize>,
    /// Forward solver settings; equilibrium variant only.
    pub solver_config: Option<SolverConfig>,
    /// Backward mode; equilibrium variant only.
    pub backward_mode: Option<BackwardMode>,
    pub targets: Vec<String>,
}

/// Parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_target: usize,
    pub total: usize,
}

/// Multiply–accumulate totals for a stretch of audio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub frames: usize,
    pub per_target: u64,
    pub total: u64,
    /// Cost of one core evaluation over all targets (zero for recurrent
    /// variants).
    pub core_per_iteration: u64,
}

pub const FULL_SCALE_TARGETS: [&str; 4] = ["bass", "drums", "other", "vocals"];

impl ModelSpec {
    /// Table-1 scale: 44.1 kHz stereo, 4096 / 1024 framing, 16 kHz crop,
    /// width 512 (410 for the small variant), four targets.
    pub fn full_scale(variant: Variant) -> Self {
        let stft = StftConfig::full_scale();
        let hidden = if variant == Variant::UmxSmall { 410 } else { 512 };
        Self::build(variant, stft, stft.bins_below(16_000.0), 2, hidden, FULL_SCALE_TARGETS.iter().map(|s| s.to_string()).collect())
    }

    /// Desk scale: 8 kHz mono, 128 / 32 framing, 3 kHz crop, width 32, one
    /// target.
    pub fn toy(variant: Variant) -> Self {
        let stft = StftConfig::toy();
        Self::build(variant, stft, stft.bins_below(3_000.0), 1, 32, vec!["tone".to_string()])
    }

    fn build(variant: Variant, stft: StftConfig, bins_cropped: usize, channels: usize, hidden: usize, targets: Vec<String>) -> Self {
        let lstm_layers = match variant {
            Variant::Umx | Variant::UmxSmall => Some(3),
            Variant::UmxLarge4 => Some(4),
            Variant::UmxLarge5 => Some(5),
            _ => None,
        };
        Self {
            variant,
            stft,
            bins_total: stft.bins(),
            bins_cropped,
            channels,
            hidden,
            lstm_layers,
            unroll_l: (variant == Variant::WtUmx).then_some(4),
            solver_config: (variant == Variant::DeqUmx).then(SolverConfig::default),
            backward_mode: (variant == Variant::DeqUmx).then_some(BackwardMode::Jfb),
            targets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.stft.validate()?;
        if self.bins_total != self.stft.bins() {
            return bad(format!("bins_total {} does not match frame length {}", self.bins_total, self.stft.frame_len));
        }
        if self.bins_cropped == 0 || self.bins_cropped > self.bins_total {
            return bad(format!("bins_cropped must be in 1..={}, got {}", self.bins_total, self.bins_cropped));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.hidden < 4 || !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden must be even and at least 4, got {}", self.hidden));
        }
        if self.targets.is_empty() {
            return bad("at least one target is required".into());
        }
        let recurrent = self.variant.is_recurrent();
        if recurrent != self.lstm_layers.is_some() {
            return bad(format!("lstm_layers applies to recurrent variants only ({})", self.variant));
        }
        if self.lstm_layers == Some(0) {
            return bad("lstm_layers must be positive".into());
        }
        if (self.variant == Variant::WtUmx) != self.unroll_l.is_some() {
            return bad(format!("unroll_l applies to wt_umx only ({})", self.variant));
        }
        let deq = self.variant == Variant::DeqUmx;
        if deq != self.solver_config.is_some() || deq != self.backward_mode.is_some() {
            return bad(format!("solver_config and backward_mode apply to deq_umx only ({})", self.variant));
        }
        if let Some(c) = &self.solver_config {
            c.validate()?;
        }
        Ok(())
    }

    fn fc(input: usize, output: usize, bias: bool) -> usize {
        input * output + if bias { output } else { 0 }
    }

    fn lstm_direction(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 8 * hidden
    }

    /// Closed-form parameter count of one target network and of all targets.
    pub fn count_params(&self) -> ParamCount {
        let (p, c) = (self.hidden, self.channels);
        let mut n = 2 * self.bins_cropped; // input mean and scale
        n += Self::fc(c * self.bins_cropped, p, false) + 2 * p;
        n += match self.variant {
            v if v.is_recurrent() => self.lstm_layers.unwrap_or(0) * 2 * Self::lstm_direction(p, p / 2),
            // equilibrium core: FC 2p → p, one-group norm, BLSTM p → p
            _ => Self::fc(2 * p, p, true) + 2 * p + 2 * Self::lstm_direction(p, p / 2),
        };
        n += Self::fc(2 * p, p, false) + 2 * p; // skip FC and norm
        n += Self::fc(p, c * self.bins_total, false) + 2 * c * self.bins_total;
        n += 2 * self.bins_total; // output scale and mean
        ParamCount {
            per_target: n,
            total: n * self.targets.len(),
        }
    }

    /// Core evaluations the sequence model performs per forward pass.
    pub fn iterations(&self) -> usize {
        match self.variant {
            Variant::WtUmx => self.unroll_l.unwrap_or(0),
            Variant::DeqUmx => self.solver_config.map_or(0, |c| c.l_max),
            _ => 0,
        }
    }

    /// Matmul multiply–accumulates in `seconds` of audio (FC layers and
    /// LSTM gates; normalization, masking, framing and Wiener filtering
    /// excluded). Equilibrium variants are charged `l_max` core
    /// evaluations.
    pub fn count_macs(&self, seconds: f64) -> MacCount {
        self.count_macs_with(seconds, self.iterations())
    }

    /// As [`ModelSpec::count_macs`] with an explicit number of core
    /// evaluations.
    pub fn count_macs_with(&self, seconds: f64, iterations: usize) -> MacCount {
        let (p, c) = (self.hidden, self.channels);
        let frames = self.stft.frames_in(seconds);
        let lstm = |layers: usize| (layers * 2 * 4 * (p / 2) * (p + p / 2)) as u64;
        let mut per_frame = (c * self.bins_cropped * p) as u64 + (2 * p * p) as u64 + (p * c * self.bins_total) as u64;
        let core = (2 * p * p) as u64 + lstm(1);
        if self.variant.is_recurrent() {
            per_frame += lstm(self.lstm_layers.unwrap_or(0));
        } else {
            per_frame += core * iterations as u64;
        }
        let per_target = per_frame * frames as u64;
        let targets = self.targets.len() as u64;
        MacCount {
            frames,
            per_target,
            total: per_target * targets,
            core_per_iteration: if self.variant.is_recurrent() { 0 } else { core * frames as u64 * targets },
        }
    }

    /// `key = value` lines describing this spec.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("variant".to_string(), self.variant.to_string()),
            ("sample_rate".into(), self.stft.sample_rate.to_string()),
            ("frame_len".into(), self.stft.frame_len.to_string()),
            ("hop".into(), self.stft.hop.to_string()),
            ("bins_total".into(), self.bins_total.to_string()),
            ("bins_cropped".into(), self.bins_cropped.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("targets".into(), self.targets.join(",")),
        ];
        if let Some(l) = self.lstm_layers {
            kv.push(("lstm_layers".into(), l.to_string()));
        }
        if let Some(l) = self.unroll_l {
            kv.push(("unroll_l".into(), l.to_string()));
        }
        if let Some(c) = self.solver_config {
            kv.push(("alpha".into(), format!("{:?}", c.alpha)));
            kv.push(("epsilon".into(), format!("{:?}", c.epsilon)));
            kv.push(("l_max".into(), c.l_max.to_string()));
        }
        if let Some(b) = self.backward_mode {
            kv.push(("backward".into(), b.to_string()));
        }
        kv
    }

    /// Inverse of [`ModelSpec::to_kv`]. Unknown keys are rejected.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (k, v) in pairs {
            map.insert(k, v);
        }
        fn parse<T: FromStr>(map: &std::collections::BTreeMap<&str, &str>, k: &str) -> Result<Option<T>> {
            map.get(k)
                .map(|v| v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`"))))
                .transpose()
        }
        let req = |k: &str| Error::Config(format!("missing `{k}`"));
        const KEYS: [&str; 15] = [
            "variant", "sample_rate", "frame_len", "hop", "bins_total", "bins_cropped", "channels", "hidden",
            "targets", "lstm_layers", "unroll_l", "alpha", "epsilon", "l_max", "backward",
        ];
        if let Some(k) = map.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown spec key `{k}`")));
        }
        let variant: Variant = map.get("variant").ok_or_else(|| req("variant"))?.parse()?;
        let stft = StftConfig {
            sample_rate: parse(&map, "sample_rate")?.ok_or_else(|| req("sample_rate"))?,
            frame_len: parse(&map, "frame_len")?.ok_or_else(|| req("frame_len"))?,
            hop: parse(&map, "hop")?.ok_or_else(|| req("hop"))?,
        };
        let solver_config = match (parse(&map, "alpha")?, parse(&map, "epsilon")?, parse(&map, "l_max")?) {
            (Some(alpha), Some(epsilon), Some(l_max)) => Some(SolverConfig { alpha, epsilon, l_max }),
            (None, None, None) => None,
            _ => return Err(Error::Config("alpha, epsilon and l_max must appear together".into())),
        };
        let spec = ModelSpec {
            variant,
            stft,
            bins_total: parse(&map, "bins_total")?.ok_or_else(|| req("bins_total"))?,
            bins_cropped: parse(&map, "bins_cropped")?.ok_or_else(|| req("bins_cropped"))?,
            channels: parse(&map, "channels")?.ok_or_else(|| req("channels"))?,
            hidden: parse(&map, "hidden")?.ok_or_else(|| req("hidden"))?,
            lstm_layers: parse(&map, "lstm_layers")?,
            unroll_l: parse(&map, "unroll_l")?,
            solver_config,
            backward_mode: parse(&map, "backward")?,
            targets: map
                .get("targets")
                .ok_or_else(|| req("targets"))?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_counts() {
        let umx = ModelSpec::full_scale(Variant::Umx);
        assert_eq!(umx.bins_cropped, 1487);
        assert_eq!(umx.count_params().per_target, 8_893_348);
        let deq = ModelSpec::full_scale(Variant::DeqUmx);
        assert_eq!(deq.count_params().per_target, 6_265_252);
        assert_eq!(umx.count_macs(6.0).frames, 259);
        assert_eq!(umx.count_macs(6.0).per_target, 8_863_744 * 259);
    }

    #[test]
    fn all_specs_validate_and_round_trip() {
        for v in Variant::ALL {
            for spec in [ModelSpec::full_scale(v), ModelSpec::toy(v)] {
                spec.validate().unwrap();
                let kv = spec.to_kv();
                let back = ModelSpec::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
                assert_eq!(back, spec);
            }
        }
    }

    #[test]
    fn variant_fields_must_match() {
        let mut s = ModelSpec::toy(Variant::Umx);
        s.unroll_l = Some(3);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::toy(Variant::DeqUmx);
        s.solver_config = None;
        assert!(s.validate().is_err());
        assert!(ModelSpec::from_kv([("variant", "umx"), ("bogus", "1")]).is_err());
    }

    #[test]
    fn macs_affine_in_unroll() {
        let mut s = ModelSpec::full_scale(Variant::WtUmx);
        let per_iter = s.count_macs(6.0).core_per_iteration;
        s.unroll_l = Some(6);
        let hi = s.count_macs(6.0).total;
        s.unroll_l = Some(4);
        let lo = s.count_macs(6.0).total;
        assert_eq!(hi - lo, 2 * per_iter);
    }
}
