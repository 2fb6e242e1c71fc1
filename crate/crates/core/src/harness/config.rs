use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    DepthWidth,
    Svd,
    CompressFactorization,
    CompressCompletion,
    NarrowAblation,
    ReluSpectrum,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::DepthWidth,
        Experiment::Svd,
        Experiment::CompressFactorization,
        Experiment::CompressCompletion,
        Experiment::NarrowAblation,
        Experiment::ReluSpectrum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DepthWidth => "fig2-depth-width",
            Experiment::Svd => "fig3-svd",
            Experiment::CompressFactorization => "fig4-compress-mf",
            Experiment::CompressCompletion => "fig5-compress-mc",
            Experiment::NarrowAblation => "fig7-narrow-ablation",
            Experiment::ReluSpectrum => "fig8-relu-spectrum",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                Error::Config(format!("unknown experiment {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Keys accepted in config files; the same names as the CLI flags.
pub const KEYS: [&str; 17] = [
    "experiment",
    "d",
    "L",
    "r",
    "r-star",
    "eps",
    "eta",
    "lambda",
    "gamma",
    "observed",
    "iters",
    "tol",
    "trials",
    "seed",
    "stride",
    "out",
    "ci-scale",
];

/// Partially specified settings, as read from a config file or flags.
///
/// `L` and `r` take comma-separated lists; experiments that sweep them use
/// every value, the others require exactly one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub d: Option<usize>,
    pub depths: Option<Vec<usize>>,
    pub ranks: Option<Vec<usize>>,
    pub r_star: Option<usize>,
    pub eps: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub observed_fraction: Option<f64>,
    pub max_iters: Option<usize>,
    pub loss_tol: Option<f64>,
    pub trials: Option<usize>,
    pub base_seed: Option<u64>,
    pub snapshot_stride: Option<usize>,
    pub output_path: Option<PathBuf>,
    pub ci_scale: Option<bool>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items = value
        .split(',')
        .map(|v| parse(key, v))
        .collect::<Result<Vec<usize>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key} needs at least one value")));
    }
    Ok(items)
}

impl Overrides {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "experiment" => self.experiment = Some(value.parse()?),
            "d" => self.d = Some(parse(key, value)?),
            "L" => self.depths = Some(parse_list(key, value)?),
            "r" => self.ranks = Some(parse_list(key, value)?),
            "r-star" => self.r_star = Some(parse(key, value)?),
            "eps" => self.eps = Some(parse(key, value)?),
            "eta" => self.eta = Some(parse(key, value)?),
            "lambda" => self.lambda = Some(parse(key, value)?),
            "gamma" => self.gamma = Some(parse(key, value)?),
            "observed" => self.observed_fraction = Some(parse(key, value)?),
            "iters" => self.max_iters = Some(parse(key, value)?),
            "tol" => self.loss_tol = Some(parse(key, value)?),
            "trials" => self.trials = Some(parse(key, value)?),
            "seed" => self.base_seed = Some(parse(key, value)?),
            "stride" => self.snapshot_stride = Some(parse(key, value)?),
            "out" => self.output_path = Some(PathBuf::from(value)),
            "ci-scale" => self.ci_scale = Some(parse(key, value)?),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; accepted keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse_file_contents(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            out.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_file_contents(&std::fs::read_to_string(path)?)
    }

    /// Fields set in `other` win.
    pub fn merged_with(mut self, other: Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            experiment,
            d,
            depths,
            ranks,
            r_star,
            eps,
            eta,
            lambda,
            gamma,
            observed_fraction,
            max_iters,
            loss_tol,
            trials,
            base_seed,
            snapshot_stride,
            output_path,
            ci_scale
        );
        self
    }
}

/// Dimension used for the large experiments at full scale, and what the
/// desk-scale profile shrinks it to.
pub const FULL_SCALE_D: usize = 1000;
pub const CI_SCALE_D: usize = 200;

/// Fully resolved settings for one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub depths: Vec<usize>,
    pub ranks: Vec<usize>,
    pub r_star: usize,
    pub eps: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub observed_fraction: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub trials: usize,
    pub base_seed: u64,
    pub snapshot_stride: usize,
    pub output_path: Option<PathBuf>,
    pub ci_scale: bool,
}

impl ExperimentConfig {
    /// Built-in settings for `experiment` at full scale.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            d: FULL_SCALE_D,
            depths: vec![3],
            ranks: vec![5],
            r_star: 5,
            eps: 1e-3,
            eta: 4.0,
            lambda: 0.0,
            gamma: 0.01,
            observed_fraction: 0.2,
            max_iters: 100_000,
            loss_tol: 1e-10,
            trials: 3,
            base_seed: 0,
            snapshot_stride: 10,
            output_path: None,
            ci_scale: false,
        };
        match experiment {
            Experiment::DepthWidth => ExperimentConfig {
                d: 100,
                depths: vec![2, 3],
                ranks: vec![5, 10, 20, 40],
                eta: 2.0,
                observed_fraction: 0.3,
                max_iters: 100_000,
                trials: 5,
                snapshot_stride: 100,
                ..base
            },
            Experiment::Svd => ExperimentConfig {
                d: 30,
                ranks: vec![3],
                r_star: 3,
                eps: 1.0,
                eta: 0.01,
                observed_fraction: 1.0,
                max_iters: 2000,
                loss_tol: 0.0,
                trials: 1,
                ..base
            },
            Experiment::CompressFactorization => ExperimentConfig {
                eta: 1.0,
                observed_fraction: 1.0,
                trials: 1,
                ..base
            },
            Experiment::CompressCompletion => ExperimentConfig {
                snapshot_stride: 100,
                ..base
            },
            Experiment::NarrowAblation => ExperimentConfig {
                ranks: vec![5, 10, 15, 20],
                // at 0.01 the outer-subspace correction dominates the iteration count
                gamma: 0.3,
                snapshot_stride: 100,
                ..base
            },
            Experiment::ReluSpectrum => ExperimentConfig {
                observed_fraction: 1.0,
                max_iters: 0,
                ..base
            },
        }
    }

    /// Defaults for the chosen experiment, then `overrides`. The desk-scale
    /// profile replaces the full-scale `d` unless `d` was given explicitly.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let experiment = overrides
            .experiment
            .ok_or_else(|| Error::Config("no experiment given".into()))?;
        let mut cfg = Self::defaults(experiment);
        let o = overrides.clone();
        cfg.ci_scale = o.ci_scale.unwrap_or(false);
        if cfg.ci_scale && cfg.d == FULL_SCALE_D {
            cfg.d = CI_SCALE_D;
        }
        macro_rules! apply {
            ($($src:ident => $dst:ident),*) => { $( if let Some(v) = o.$src { cfg.$dst = v; } )* };
        }
        apply!(
            d => d,
            depths => depths,
            ranks => ranks,
            r_star => r_star,
            eps => eps,
            eta => eta,
            lambda => lambda,
            gamma => gamma,
            observed_fraction => observed_fraction,
            max_iters => max_iters,
            loss_tol => loss_tol,
            trials => trials,
            base_seed => base_seed,
            snapshot_stride => snapshot_stride
        );
        cfg.output_path = o.output_path;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.depths.is_empty() || self.depths.iter().any(|&l| l < 2) {
            return bad(format!("every L must be >= 2, got {:?}", self.depths));
        }
        if self.ranks.is_empty() || self.ranks.iter().any(|&r| r == 0 || r > self.d) {
            return bad(format!("every r must be in 1..={}, got {:?}", self.d, self.ranks));
        }
        if self.r_star == 0 || self.r_star > self.d {
            return bad(format!("r-star must be in 1..={}, got {}", self.d, self.r_star));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return bad(format!("observed must be in (0, 1], got {}", self.observed_fraction));
        }
        if !(self.loss_tol >= 0.0) {
            return bad(format!("tol must be >= 0, got {}", self.loss_tol));
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.snapshot_stride == 0 {
            return bad("stride must be >= 1".into());
        }
        let single = |name: &str, v: &[usize]| {
            if v.len() == 1 {
                Ok(())
            } else {
                bad(format!("{} takes a single {name}, got {v:?}", self.experiment))
            }
        };
        match self.experiment {
            Experiment::DepthWidth => {}
            Experiment::NarrowAblation => single("L", &self.depths)?,
            _ => {
                single("L", &self.depths)?;
                single("r", &self.ranks)?;
            }
        }
        let compresses = matches!(
            self.experiment,
            Experiment::Svd
                | Experiment::CompressFactorization
                | Experiment::CompressCompletion
                | Experiment::NarrowAblation
        );
        if compresses && self.ranks.iter().any(|&r| 2 * r >= self.d) {
            return bad(format!("compression needs 2r < d, got r = {:?}, d = {}", self.ranks, self.d));
        }
        if self.experiment == Experiment::ReluSpectrum && self.depths != [3] {
            return bad(format!("{} requires L = 3", self.experiment));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.depths[0]
    }

    pub fn rank(&self) -> usize {
        self.ranks[0]
    }

    /// `key = value` lines describing every resolved setting, in [`KEYS`]
    /// order. Feeding them back through [`Overrides::parse_file_contents`]
    /// reproduces this config.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("experiment", self.experiment.to_string()),
            ("d", self.d.to_string()),
            ("L", list(&self.depths)),
            ("r", list(&self.ranks)),
            ("r-star", self.r_star.to_string()),
            ("eps", self.eps.to_string()),
            ("eta", self.eta.to_string()),
            ("lambda", self.lambda.to_string()),
            ("gamma", self.gamma.to_string()),
            ("observed", self.observed_fraction.to_string()),
            ("iters", self.max_iters.to_string()),
            ("tol", self.loss_tol.to_string()),
            ("trials", self.trials.to_string()),
            ("seed", self.base_seed.to_string()),
            ("stride", self.snapshot_stride.to_string()),
        ];
        if let Some(p) = &self.output_path {
            out.push(("out", p.display().to_string()));
        }
        out.push(("ci-scale", self.ci_scale.to_string()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(pairs: &[(&str, &str)]) -> Result<ExperimentConfig> {
        let mut o = Overrides::default();
        for (k, v) in pairs {
            o.set(k, v)?;
        }
        ExperimentConfig::resolve(&o)
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("fig9".parse::<Experiment>().is_err());
    }

    #[test]
    fn figure_defaults() {
        let c = with(&[("experiment", "fig2-depth-width")]).unwrap();
        assert_eq!((c.d, c.r_star, c.eps, c.observed_fraction), (100, 5, 1e-3, 0.3));
        assert_eq!(c.depths, [2, 3]);
        assert_eq!(c.loss_tol, 1e-10);

        let c = with(&[("experiment", "fig7-narrow-ablation")]).unwrap();
        assert_eq!((c.gamma, c.ranks.as_slice()), (0.3, &[5, 10, 15, 20][..]));
        assert_eq!(with(&[("experiment", "fig5-compress-mc")]).unwrap().gamma, 0.01);

        let c = with(&[("experiment", "fig3-svd")]).unwrap();
        assert_eq!((c.d, c.r_star, c.depth(), c.eps, c.eta, c.lambda), (30, 3, 3, 1.0, 0.01, 0.0));

        let c = with(&[("experiment", "fig5-compress-mc")]).unwrap();
        assert_eq!((c.d, c.gamma, c.observed_fraction), (1000, 0.01, 0.2));
        let c = with(&[("experiment", "fig5-compress-mc"), ("ci-scale", "true")]).unwrap();
        assert_eq!(c.d, 200);
        let c = with(&[("experiment", "fig5-compress-mc"), ("ci-scale", "true"), ("d", "300")]).unwrap();
        assert_eq!(c.d, 300);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut o = Overrides::default();
        assert!(matches!(o.set("depth", "3"), Err(Error::Config(_))));
        assert!(o.set("eta", "fast").is_err());
        assert!(with(&[("experiment", "fig5-compress-mc"), ("observed", "0")]).is_err());
        assert!(with(&[("experiment", "fig5-compress-mc"), ("observed", "1.5")]).is_err());
        assert!(with(&[("experiment", "fig5-compress-mc"), ("eps", "-1")]).is_err());
        assert!(with(&[("experiment", "fig5-compress-mc"), ("d", "20"), ("r", "10")]).is_err());
        assert!(with(&[("experiment", "fig8-relu-spectrum"), ("L", "4")]).is_err());
        assert!(with(&[("experiment", "fig4-compress-mf"), ("L", "2,3")]).is_err());
        assert!(with(&[("d", "10")]).is_err());
    }

    #[test]
    fn file_parsing_and_precedence() {
        let text = "# comment\nexperiment = fig2-depth-width\n\nd=50\nL = 3\nr = 5, 10\n";
        let file = Overrides::parse_file_contents(text).unwrap();
        let mut flags = Overrides::default();
        flags.set("d", "60").unwrap();
        let c = ExperimentConfig::resolve(&file.merged_with(flags)).unwrap();
        assert_eq!(c.d, 60);
        assert_eq!(c.depths, [3]);
        assert_eq!(c.ranks, [5, 10]);

        let err = Overrides::parse_file_contents("d = 5\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(Overrides::parse_file_contents("just words").is_err());
    }

    #[test]
    fn key_values_reparse_to_the_same_config() {
        let c = with(&[("experiment", "fig7-narrow-ablation"), ("eta", "0.3"), ("out", "x.csv")]).unwrap();
        let text: String = c
            .to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let again = ExperimentConfig::resolve(&Overrides::parse_file_contents(&text).unwrap()).unwrap();
        assert_eq!(again, c);
        let keys: Vec<_> = c.to_key_values().into_iter().map(|(k, _)| k).collect();
        assert!(keys.iter().all(|k| KEYS.contains(k)));
    }
}
