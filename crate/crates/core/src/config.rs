//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Every key has a default, so an empty
//! file is a valid configuration (the 100x100 / 10x10 setup with a point source).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::cem::KappaTilde;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    None,
    Constant,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialKind {
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub coarse: usize,
    pub layers: usize,
    pub aux_modes: usize,
    pub v2_modes: usize,
    pub kappa_tilde: KappaTilde,
    pub kappa_file: Option<PathBuf>,
    pub kappa_background: f64,
    pub kappa_streak: f64,
    pub streak_seed: u64,
    pub streak_density: f64,
    pub source: SourceKind,
    pub source_value: f64,
    pub source_x: f64,
    pub source_y: f64,
    pub source_strength: f64,
    pub initial: InitialKind,
    pub initial_seed: u64,
    pub omega: f64,
    pub tau: f64,
    pub steps: usize,
    pub final_time: f64,
    pub second_global: bool,
    pub contrasts: Vec<f64>,
    pub h_sweep: Vec<usize>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            coarse: 10,
            layers: 5,
            aux_modes: 3,
            v2_modes: 3,
            kappa_tilde: KappaTilde::CoarseScale,
            kappa_file: None,
            kappa_background: 1.0,
            kappa_streak: 1e6,
            streak_seed: 2,
            streak_density: 0.05,
            source: SourceKind::Point,
            source_value: 1.0,
            source_x: 0.5,
            source_y: 0.5,
            source_strength: 1.0,
            initial: InitialKind::Zero,
            initial_seed: 1,
            omega: 1.0,
            tau: 1e-4,
            steps: 500,
            final_time: 0.05,
            second_global: true,
            contrasts: vec![1e5, 1e6, 1e7, 1e8, 1e9],
            h_sweep: vec![5, 10, 20],
            output: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "n",
    "coarse",
    "layers",
    "aux_modes",
    "v2_modes",
    "kappa_tilde",
    "kappa_file",
    "kappa_background",
    "kappa_streak",
    "streak_seed",
    "streak_density",
    "source",
    "source_value",
    "source_x",
    "source_y",
    "source_strength",
    "initial",
    "initial_seed",
    "omega",
    "tau",
    "steps",
    "final_time",
    "second_localization",
    "contrasts",
    "h_sweep",
    "output",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// Builder that remembers which time keys were given explicitly.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    cfg: ExperimentConfig,
    explicit: BTreeSet<&'static str>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<&mut Self> {
        let value = value.trim();
        let canon = KEYS
            .iter()
            .copied()
            .find(|k| *k == key.trim())
            .ok_or_else(|| Error::Config(format!("unknown key `{}`", key.trim())))?;
        let c = &mut self.cfg;
        match canon {
            "n" => c.n = parse_num(canon, value)?,
            "coarse" => c.coarse = parse_num(canon, value)?,
            "layers" => c.layers = parse_num(canon, value)?,
            "aux_modes" => c.aux_modes = parse_num(canon, value)?,
            "v2_modes" => c.v2_modes = parse_num(canon, value)?,
            "kappa_tilde" => {
                c.kappa_tilde = match value {
                    "coarse" => KappaTilde::CoarseScale,
                    "pou" => KappaTilde::PartitionOfUnity,
                    _ => {
                        return Err(Error::Config(format!(
                            "kappa_tilde must be `coarse` or `pou`, got `{value}`"
                        )))
                    }
                }
            }
            "kappa_file" => c.kappa_file = (!value.is_empty()).then(|| PathBuf::from(value)),
            "kappa_background" => c.kappa_background = parse_num(canon, value)?,
            "kappa_streak" => c.kappa_streak = parse_num(canon, value)?,
            "streak_seed" => c.streak_seed = parse_num(canon, value)?,
            "streak_density" => c.streak_density = parse_num(canon, value)?,
            "source" => {
                c.source = match value {
                    "none" => SourceKind::None,
                    "constant" => SourceKind::Constant,
                    "point" => SourceKind::Point,
                    _ => return Err(Error::Config(format!("unknown source `{value}`"))),
                }
            }
            "source_value" => c.source_value = parse_num(canon, value)?,
            "source_x" => c.source_x = parse_num(canon, value)?,
            "source_y" => c.source_y = parse_num(canon, value)?,
            "source_strength" => c.source_strength = parse_num(canon, value)?,
            "initial" => {
                c.initial = match value {
                    "zero" => InitialKind::Zero,
                    "random" => InitialKind::Random,
                    _ => {
                        return Err(Error::Config(format!(
                            "initial must be `zero` or `random`, got `{value}`"
                        )))
                    }
                }
            }
            "initial_seed" => c.initial_seed = parse_num(canon, value)?,
            "omega" => c.omega = parse_num(canon, value)?,
            "tau" => c.tau = parse_num(canon, value)?,
            "steps" => c.steps = parse_num(canon, value)?,
            "final_time" => c.final_time = parse_num(canon, value)?,
            "second_localization" => {
                c.second_global = match value {
                    "global" => true,
                    "oversampled" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "second_localization must be `global` or `oversampled`, got `{value}`"
                        )))
                    }
                }
            }
            "contrasts" => c.contrasts = parse_list(canon, value)?,
            "h_sweep" => c.h_sweep = parse_list(canon, value)?,
            "output" => c.output = PathBuf::from(value),
            _ => unreachable!("key list and match arms agree"),
        }
        self.explicit.insert(canon);
        Ok(self)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<&mut Self> {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{pair}` is not of the form key=value"))
        })?;
        self.set(k, v)
    }

    pub fn parse_text(&mut self, text: &str) -> Result<&mut Self> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(self)
    }

    pub fn load(&mut self, path: &Path) -> Result<&mut Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.parse_text(&text)
    }

    /// Resolves the time grid and validates.
    ///
    /// Whichever of `tau`, `steps`, `final_time` was not given is derived from
    /// the others (`steps` first); the three must satisfy `tau * steps = final_time`.
    pub fn build(&self) -> Result<ExperimentConfig> {
        let mut c = self.cfg.clone();
        let has = |k: &str| self.explicit.contains(k);
        if has("steps") && has("final_time") && !has("tau") {
            if c.steps == 0 {
                return Err(Error::Config("steps must be positive".into()));
            }
            c.tau = c.final_time / c.steps as f64;
        } else if has("steps") && !has("final_time") {
            c.final_time = c.tau * c.steps as f64;
        } else if !has("steps") {
            c.steps = (c.final_time / c.tau).round() as usize;
        }
        c.validate()?;
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        ConfigBuilder::new().parse_text(text)?.build()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 2 {
            return bad(format!("n = {} is below 2", self.n));
        }
        if self.coarse == 0 || !self.n.is_multiple_of(self.coarse) {
            return bad(format!(
                "coarse = {} does not divide n = {}",
                self.coarse, self.n
            ));
        }
        if self.layers == 0 || self.aux_modes == 0 || self.v2_modes == 0 {
            return bad("layers, aux_modes and v2_modes must be positive".into());
        }
        if !(self.kappa_background > 0.0 && self.kappa_streak > 0.0) {
            return bad("kappa values must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.streak_density) {
            return bad(format!(
                "streak_density = {} is outside [0, 1]",
                self.streak_density
            ));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("omega = {} is outside [0, 1]", self.omega));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || self.steps == 0 {
            return bad("tau and steps must be positive".into());
        }
        let t = self.tau * self.steps as f64;
        if (t - self.final_time).abs() > 1e-12 * self.final_time.abs().max(1.0) {
            return bad(format!(
                "tau * steps = {t} does not match final_time = {}",
                self.final_time
            ));
        }
        if !(0.0..=1.0).contains(&self.source_x) || !(0.0..=1.0).contains(&self.source_y) {
            return bad("source position must lie in the unit square".into());
        }
        if self.contrasts.iter().any(|c| !(*c > 0.0)) {
            return bad("contrasts must be positive".into());
        }
        if let Some(bad_n) = self
            .h_sweep
            .iter()
            .find(|&&nc| nc == 0 || !self.n.is_multiple_of(nc))
        {
            return bad(format!(
                "h_sweep entry {bad_n} does not divide n = {}",
                self.n
            ));
        }
        Ok(())
    }

    /// Text form accepted by [`ExperimentConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("n", self.n.to_string());
        kv("coarse", self.coarse.to_string());
        kv("layers", self.layers.to_string());
        kv("aux_modes", self.aux_modes.to_string());
        kv("v2_modes", self.v2_modes.to_string());
        kv(
            "kappa_tilde",
            match self.kappa_tilde {
                KappaTilde::CoarseScale => "coarse",
                KappaTilde::PartitionOfUnity => "pou",
            }
            .into(),
        );
        if let Some(p) = &self.kappa_file {
            kv("kappa_file", p.display().to_string());
        }
        kv("kappa_background", format!("{:e}", self.kappa_background));
        kv("kappa_streak", format!("{:e}", self.kappa_streak));
        kv("streak_seed", self.streak_seed.to_string());
        kv("streak_density", self.streak_density.to_string());
        kv(
            "source",
            match self.source {
                SourceKind::None => "none",
                SourceKind::Constant => "constant",
                SourceKind::Point => "point",
            }
            .into(),
        );
        kv("source_value", format!("{:e}", self.source_value));
        kv("source_x", self.source_x.to_string());
        kv("source_y", self.source_y.to_string());
        kv("source_strength", format!("{:e}", self.source_strength));
        kv(
            "initial",
            match self.initial {
                InitialKind::Zero => "zero",
                InitialKind::Random => "random",
            }
            .into(),
        );
        kv("initial_seed", self.initial_seed.to_string());
        kv("omega", self.omega.to_string());
        kv("tau", format!("{:e}", self.tau));
        kv("steps", self.steps.to_string());
        kv("final_time", format!("{:e}", self.final_time));
        kv(
            "second_localization",
            if self.second_global {
                "global"
            } else {
                "oversampled"
            }
            .into(),
        );
        kv("contrasts", list(&self.contrasts));
        kv(
            "h_sweep",
            self.h_sweep
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("output", self.output.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = ExperimentConfig::from_text("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_text("tua = 1e-4").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("tua"));
    }

    #[test]
    fn time_grid_resolution() {
        let c = ExperimentConfig::from_text("tau = 1e-3").unwrap();
        assert_eq!(c.steps, 50);
        let c = ExperimentConfig::from_text("steps = 10").unwrap();
        assert!((c.final_time - 1e-3).abs() < 1e-15);
        let c = ExperimentConfig::from_text("steps = 10\nfinal_time = 1").unwrap();
        assert!((c.tau - 0.1).abs() < 1e-15);
        assert!(ExperimentConfig::from_text("tau = 1e-4\nsteps = 10\nfinal_time = 1").is_err());
        assert!(ExperimentConfig::from_text("tau = 3e-4\nfinal_time = 0.001").is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let mut b = ConfigBuilder::new();
        b.parse_text("# paper scale\nn = 40 # fine\ncoarse = 4\n")
            .unwrap();
        b.set_pair("contrasts=1,10").unwrap();
        let c = b.build().unwrap();
        assert_eq!((c.n, c.coarse), (40, 4));
        assert_eq!(c.contrasts, vec![1.0, 10.0]);
        assert!(b.set_pair("novalue").is_err());
        assert!(ExperimentConfig::from_text("n = 40\ncoarse = 7").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.kappa_tilde = KappaTilde::PartitionOfUnity;
        c.second_global = false;
        c.kappa_file = Some(PathBuf::from("k.txt"));
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}
