//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! model.kind = mlp
//! model.layers = 2, 32, 32, 2
//! opt.variant = bsam
//! train.seeds = 0, 1, 2
//! ```
//!
//! Keys are dotted, values end at an optional `#`. Every key below may appear
//! at most once; unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use bsam_core::models::{DoubleWellSpec, MlpSpec, QuadraticSpec};
use bsam_core::optim::{
    LrSchedule, RhoMinSchedule, DEFAULT_MOMENTUM, DEFAULT_RHO, DEFAULT_WEIGHT_DECAY,
    DEFAULT_ZERO_GRAD_EPS,
};
use bsam_core::{ModelSpec, OptimizerConfig, Variant};

use crate::error::{LabError, Result};

const KEYS: &[&str] = &[
    "model.kind",
    "model.layers",
    "model.diag",
    "model.matrix",
    "model.center",
    "model.init",
    "model.sharp_at",
    "model.flat_at",
    "model.kappa_sharp",
    "model.kappa_flat",
    "data.source",
    "data.n",
    "data.dim",
    "data.classes",
    "data.separation",
    "data.seed",
    "data.noise_rate",
    "data.test_fraction",
    "data.shift_std",
    "data.path",
    "data.images",
    "data.labels",
    "opt.variant",
    "opt.lr_max",
    "opt.lr_min",
    "opt.momentum",
    "opt.weight_decay",
    "opt.rho_max",
    "opt.rho_min_hat",
    "opt.rho_min_check",
    "opt.p_norm",
    "opt.zero_grad_eps",
    "train.epochs",
    "train.batch_size",
    "train.seeds",
    "train.run_id",
    "probe.k",
    "probe.iters",
    "probe.tol",
    "probe.rho",
    "probe.max_samples",
    "probe.slice_grid",
    "probe.slice_extent",
    "convergence.c",
    "convergence.horizons",
    "output.dir",
];

pub const DEFAULT_LR_MAX: f64 = 0.05;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Mlp { layers: Vec<usize> },
    Quadratic { spec: QuadraticSpec, init: Vec<f64> },
    DoubleWell { spec: DoubleWellSpec, init: f64 },
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        Ok(match self {
            ModelConfig::Mlp { layers } => {
                ModelSpec::Mlp(MlpSpec::new(layers.clone(), *layers.last().unwrap_or(&0))?)
            }
            ModelConfig::Quadratic { spec, .. } => ModelSpec::Quadratic(spec.clone()),
            ModelConfig::DoubleWell { spec, .. } => ModelSpec::DoubleWell(*spec),
        })
    }

    pub fn is_landscape(&self) -> bool {
        !matches!(self, ModelConfig::Mlp { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs { separation: f64 },
    Shifts { std: f64 },
    Csv { path: PathBuf },
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise_rate: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub variant: Variant,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho_max: f64,
    pub rho_min_hat: f64,
    pub rho_min_check: f64,
    pub p_norm: f64,
    pub zero_grad_eps: f64,
}

impl OptConfig {
    /// Optimizer configuration for a run of `total_steps` steps.
    pub fn build(&self, total_steps: usize) -> Result<OptimizerConfig> {
        let cfg = OptimizerConfig {
            variant: self.variant,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            rho_max: self.rho_max,
            rho_min: RhoMinSchedule::new(self.rho_min_hat, self.rho_min_check)?,
            lr: LrSchedule::new(self.lr_max, self.lr_min, total_steps)?,
            p_norm: self.p_norm,
            zero_grad_eps: self.zero_grad_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub k: usize,
    pub iters: usize,
    pub tol: f64,
    /// Defaults to `opt.rho_max`.
    pub rho: f64,
    pub max_samples: usize,
    pub slice_grid: usize,
    pub slice_extent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSettings {
    pub c: f64,
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub opt: OptConfig,
    pub train: TrainSettings,
    pub probe: ProbeSettings,
    pub convergence: ConvergenceSettings,
    pub output_dir: Option<PathBuf>,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(_, l)| *l)
    }

    fn invalid(&self, key: &str, msg: impl Into<String>) -> LabError {
        LabError::Invalid {
            key: key.to_string(),
            line: self.line(key),
            msg: msg.into(),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.invalid(key, format!("cannot parse `{v}`"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| LabError::MissingKey { key: key.to_string() })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| self.invalid(key, format!("cannot parse list item `{}`", s.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finite(&self, key: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(key, "must be finite"))
        }
    }

    fn non_negative(&self, key: &str, v: f64) -> Result<f64> {
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(key, format!("must be >= 0, got {v}")))
        }
    }

    fn positive(&self, key: &str, v: f64) -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid(key, format!("must be > 0, got {v}")))
        }
    }
}

fn tokenize(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(LabError::Syntax { line, text: raw.trim().to_string() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(LabError::Syntax { line, text: raw.trim().to_string() });
        }
        if !KEYS.contains(&k) {
            return Err(LabError::UnknownKey { key: k.to_string(), line });
        }
        if map.insert(k.to_string(), (v.to_string(), line)).is_some() {
            return Err(LabError::DuplicateKey { key: k.to_string(), line });
        }
    }
    Ok(Entries { map })
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &[])
}

/// Parses `text`, then applies `key=value` overrides on top. Overrides may
/// replace keys present in the text.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut e = tokenize(text)?;
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(LabError::Syntax { line: 0, text: o.clone() });
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(LabError::UnknownKey { key: k.to_string(), line: 0 });
        }
        e.map.insert(k.to_string(), (v.trim().to_string(), 0));
    }
    build(&e)
}

fn build(e: &Entries) -> Result<ExperimentConfig> {
    let model = model_config(e)?;
    let spec = model.spec()?;
    let data = data_config(e, &model, &spec)?;
    let opt = opt_config(e)?;
    let train = train_settings(e, &data)?;
    let probe = probe_settings(e, &opt)?;
    let convergence = ConvergenceSettings {
        c: {
            let c = e.or("convergence.c", 0.5)?;
            e.positive("convergence.c", c)?
        },
        horizons: e
            .list("convergence.horizons")?
            .unwrap_or_else(|| vec![100, 316, 1000, 3162, 10000]),
    };
    if convergence.horizons.len() < 2 || convergence.horizons.contains(&0) {
        return Err(e.invalid("convergence.horizons", "needs at least two positive horizons"));
    }
    Ok(ExperimentConfig {
        model,
        data,
        opt,
        train,
        probe,
        convergence,
        output_dir: e.get::<String>("output.dir")?.map(PathBuf::from),
    })
}

fn wrap<T>(e: &Entries, key: &str, r: bsam_core::Result<T>) -> Result<T> {
    r.map_err(|err| e.invalid(key, err.to_string()))
}

fn model_config(e: &Entries) -> Result<ModelConfig> {
    let kind: String = e.required("model.kind")?;
    match kind.as_str() {
        "mlp" => {
            let layers: Vec<usize> = e
                .list("model.layers")?
                .ok_or_else(|| LabError::MissingKey { key: "model.layers".into() })?;
            let classes = *layers.last().unwrap_or(&0);
            wrap(e, "model.layers", MlpSpec::new(layers.clone(), classes))?;
            Ok(ModelConfig::Mlp { layers })
        }
        "quadratic" => {
            let (n, hessian) = match (e.list::<f64>("model.diag")?, e.list::<f64>("model.matrix")?) {
                (Some(d), None) => {
                    let n = d.len();
                    let mut h = vec![0.0; n * n];
                    for (i, v) in d.iter().enumerate() {
                        h[i * n + i] = *v;
                    }
                    (n, h)
                }
                (None, Some(m)) => {
                    let n = (m.len() as f64).sqrt().round() as usize;
                    if n * n != m.len() {
                        return Err(e.invalid("model.matrix", "needs a square number of entries"));
                    }
                    (n, m)
                }
                (Some(_), Some(_)) => {
                    return Err(e.invalid("model.matrix", "give either model.diag or model.matrix"))
                }
                (None, None) => return Err(LabError::MissingKey { key: "model.diag".into() }),
            };
            let center = e.list("model.center")?.unwrap_or_else(|| vec![0.0; n]);
            let init: Vec<f64> = e.list("model.init")?.unwrap_or_else(|| vec![1.0; n]);
            if init.len() != n {
                return Err(e.invalid("model.init", format!("needs {n} values")));
            }
            let key = if e.raw("model.matrix").is_some() { "model.matrix" } else { "model.diag" };
            if center.len() != n {
                return Err(e.invalid("model.center", format!("needs {n} values")));
            }
            let spec = wrap(e, key, QuadraticSpec::new(n, hessian, center))?;
            Ok(ModelConfig::Quadratic { spec, init })
        }
        "double_well" => {
            let spec = wrap(
                e,
                "model.kappa_sharp",
                DoubleWellSpec::new(
                    e.required("model.sharp_at")?,
                    e.required("model.flat_at")?,
                    e.required("model.kappa_sharp")?,
                    e.required("model.kappa_flat")?,
                ),
            )?;
            let init = e.required("model.init")?;
            e.finite("model.init", init)?;
            Ok(ModelConfig::DoubleWell { spec, init })
        }
        other => Err(e.invalid(
            "model.kind",
            format!("unknown model `{other}` (mlp, quadratic, double_well)"),
        )),
    }
}

fn data_config(e: &Entries, model: &ModelConfig, spec: &ModelSpec) -> Result<DataConfig> {
    let default_source = if model.is_landscape() { "shifts" } else { "blobs" };
    let source_name: String = e.or("data.source", default_source.to_string())?;
    let source = match source_name.as_str() {
        "blobs" => {
            let s = e.or("data.separation", 3.0)?;
            DataSource::Blobs { separation: e.non_negative("data.separation", s)? }
        }
        "shifts" => {
            let s = e.or("data.shift_std", 0.0)?;
            DataSource::Shifts { std: e.non_negative("data.shift_std", s)? }
        }
        "csv" => DataSource::Csv {
            path: PathBuf::from(e.required::<String>("data.path")?),
        },
        "idx" => DataSource::Idx {
            images: PathBuf::from(e.required::<String>("data.images")?),
            labels: PathBuf::from(e.required::<String>("data.labels")?),
        },
        other => {
            return Err(e.invalid("data.source", format!("unknown source `{other}` (blobs, shifts, csv, idx)")))
        }
    };
    if model.is_landscape() != matches!(source, DataSource::Shifts { .. }) {
        return Err(e.invalid(
            "data.source",
            "analytic landscapes take `shifts`; MLPs take blobs, csv or idx",
        ));
    }
    let n = e.or("data.n", 512usize)?;
    if n < 2 {
        return Err(e.invalid("data.n", "needs at least 2 samples"));
    }
    let dim = e.or("data.dim", spec.input_dim())?;
    if dim != spec.input_dim() {
        return Err(e.invalid("data.dim", format!("model expects {} inputs", spec.input_dim())));
    }
    let classes = e.or("data.classes", spec.classes())?;
    if classes != spec.classes() {
        return Err(e.invalid("data.classes", format!("model has {} classes", spec.classes())));
    }
    let noise_rate = e.or("data.noise_rate", 0.0)?;
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(e.invalid("data.noise_rate", "must be in [0, 1]"));
    }
    let test_fraction = e.or("data.test_fraction", 0.2)?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(e.invalid("data.test_fraction", "must be in (0, 1)"));
    }
    Ok(DataConfig {
        source,
        n,
        dim,
        classes,
        seed: e.or("data.seed", 0)?,
        noise_rate,
        test_fraction,
    })
}

fn opt_config(e: &Entries) -> Result<OptConfig> {
    let variant: String = e.or("opt.variant", "bsam".to_string())?;
    let variant = variant
        .parse::<Variant>()
        .map_err(|err| e.invalid("opt.variant", err.to_string()))?;
    let lr_max = e.or("opt.lr_max", DEFAULT_LR_MAX)?;
    let lr_min = e.or("opt.lr_min", 0.0)?;
    e.positive("opt.lr_max", lr_max)?;
    e.non_negative("opt.lr_min", lr_min)?;
    if lr_max < lr_min {
        return Err(e.invalid("opt.lr_min", "lr_max must be >= lr_min"));
    }
    let momentum = e.or("opt.momentum", DEFAULT_MOMENTUM)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(e.invalid("opt.momentum", "must be in [0, 1)"));
    }
    let rho_min_hat = e.or("opt.rho_min_hat", DEFAULT_RHO)?;
    let rho_min_check = e.or("opt.rho_min_check", 0.0)?;
    e.non_negative("opt.rho_min_hat", rho_min_hat)?;
    e.non_negative("opt.rho_min_check", rho_min_check)?;
    if rho_min_hat < rho_min_check {
        return Err(e.invalid("opt.rho_min_check", "rho_min_hat must be >= rho_min_check"));
    }
    let p_norm: f64 = e.or("opt.p_norm", 2.0)?;
    if !(p_norm > 1.0 && p_norm.is_finite()) {
        return Err(e.invalid("opt.p_norm", "must be finite and > 1"));
    }
    let weight_decay = e.or("opt.weight_decay", DEFAULT_WEIGHT_DECAY)?;
    let rho_max = e.or("opt.rho_max", DEFAULT_RHO)?;
    let zero_grad_eps = e.or("opt.zero_grad_eps", DEFAULT_ZERO_GRAD_EPS)?;
    Ok(OptConfig {
        variant,
        lr_max,
        lr_min,
        momentum,
        weight_decay: e.non_negative("opt.weight_decay", weight_decay)?,
        rho_max: e.non_negative("opt.rho_max", rho_max)?,
        rho_min_hat,
        rho_min_check,
        p_norm,
        zero_grad_eps: e.non_negative("opt.zero_grad_eps", zero_grad_eps)?,
    })
}

fn train_settings(e: &Entries, data: &DataConfig) -> Result<TrainSettings> {
    let epochs = e.or("train.epochs", 10usize)?;
    if epochs < 1 {
        return Err(e.invalid("train.epochs", "must be >= 1"));
    }
    let batch_size = e.or("train.batch_size", DEFAULT_BATCH_SIZE)?;
    if batch_size < 1 {
        return Err(e.invalid("train.batch_size", "must be >= 1"));
    }
    if !matches!(data.source, DataSource::Csv { .. } | DataSource::Idx { .. }) {
        let train_n = data.n - (data.n as f64 * data.test_fraction).round() as usize;
        if batch_size > train_n {
            return Err(e.invalid("train.batch_size", format!("exceeds the {train_n} training samples")));
        }
    }
    let seeds: Vec<u64> = e.list("train.seeds")?.unwrap_or_else(|| vec![0]);
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(e.invalid("train.seeds", "seeds must be distinct"));
    }
    let run_id: String = e.or("train.run_id", "run".to_string())?;
    if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
        return Err(e.invalid("train.run_id", "use letters, digits, `-`, `_` or `.`"));
    }
    Ok(TrainSettings {
        epochs,
        batch_size,
        seeds,
        run_id,
    })
}

fn probe_settings(e: &Entries, opt: &OptConfig) -> Result<ProbeSettings> {
    let slice_grid = e.or("probe.slice_grid", 21usize)?;
    if slice_grid < 3 || slice_grid % 2 == 0 {
        return Err(e.invalid("probe.slice_grid", "must be odd and >= 3"));
    }
    let max_samples = e.or("probe.max_samples", 2048usize)?;
    if max_samples < 1 {
        return Err(e.invalid("probe.max_samples", "must be >= 1"));
    }
    let iters = e.or("probe.iters", 1000usize)?;
    if iters < 1 {
        return Err(e.invalid("probe.iters", "must be >= 1"));
    }
    let tol = e.or("probe.tol", 1e-6)?;
    let rho = e.or("probe.rho", opt.rho_max)?;
    let extent = e.or("probe.slice_extent", 1.0)?;
    Ok(ProbeSettings {
        k: e.or("probe.k", 1)?,
        iters,
        tol: e.positive("probe.tol", tol)?,
        rho: e.non_negative("probe.rho", rho)?,
        max_samples,
        slice_grid,
        slice_extent: e.positive("probe.slice_extent", extent)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "model.kind = mlp\nmodel.layers = 2, 8, 2\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.opt.momentum, 0.9);
        assert_eq!(c.opt.weight_decay, 0.001);
        assert_eq!(c.opt.lr_max, 0.05);
        assert_eq!(c.opt.lr_min, 0.0);
        assert_eq!(c.opt.rho_max, 0.05);
        assert_eq!(c.opt.rho_min_hat, 0.05);
        assert_eq!(c.opt.rho_min_check, 0.0);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.seeds, vec![0]);
        assert_eq!(c.probe.max_samples, 2048);
        assert_eq!(c.data.source, DataSource::Blobs { separation: 3.0 });
    }

    #[test]
    fn negative_rho_names_key_and_line() {
        let err = parse_config(&format!("{MINIMAL}opt.rho_max = -1\n")).unwrap_err();
        match err {
            LabError::Invalid { key, line, .. } => {
                assert_eq!(key, "opt.rho_max");
                assert_eq!(line, 3);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config(&format!("# header\n{MINIMAL}unknown.key = 3\n")).unwrap_err();
        assert!(matches!(err, LabError::UnknownKey { ref key, line: 4 } if key == "unknown.key"));
    }

    #[test]
    fn missing_and_inconsistent_keys() {
        assert!(matches!(parse_config("model.kind = mlp\n"), Err(LabError::MissingKey { .. })));
        let bad = format!("{MINIMAL}opt.lr_max = 0.01\nopt.lr_min = 0.1\n");
        assert!(matches!(parse_config(&bad), Err(LabError::Invalid { .. })));
        let bad = format!("{MINIMAL}opt.rho_min_hat = 0.01\nopt.rho_min_check = 0.1\n");
        assert!(matches!(parse_config(&bad), Err(LabError::Invalid { .. })));
        let dup = format!("{MINIMAL}train.epochs = 2\ntrain.epochs = 3\n");
        assert!(matches!(parse_config(&dup), Err(LabError::DuplicateKey { line: 4, .. })));
        assert!(matches!(parse_config("model.kind mlp\n"), Err(LabError::Syntax { line: 1, .. })));
    }

    #[test]
    fn overrides_replace_values() {
        let c = parse_config_with(MINIMAL, &["opt.variant = sgd".into(), "train.seeds=1,2".into()]).unwrap();
        assert_eq!(c.opt.variant, Variant::Sgd);
        assert_eq!(c.train.seeds, vec![1, 2]);
    }

    #[test]
    fn landscape_configs() {
        let q = parse_config("model.kind = quadratic\nmodel.diag = 1, 2, 3\n").unwrap();
        assert!(matches!(q.model, ModelConfig::Quadratic { ref init, .. } if init.len() == 3));
        assert!(matches!(q.data.source, DataSource::Shifts { .. }));
        let dw = "model.kind = double_well\nmodel.sharp_at = -1\nmodel.flat_at = 2\n\
                  model.kappa_sharp = 100\nmodel.kappa_flat = 1\nmodel.init = 0.5\n";
        assert!(parse_config(dw).is_ok());
        let weak = dw.replace("kappa_sharp = 100", "kappa_sharp = 5");
        assert!(matches!(parse_config(&weak), Err(LabError::Invalid { .. })));
        assert!(parse_config("model.kind = quadratic\nmodel.diag = 1\ndata.source = blobs\n").is_err());
    }
}
