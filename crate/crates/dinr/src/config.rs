//! Experiment configuration: a small sectioned key=value format with
//! line-accurate error reporting.
//!
//! ```text
//! # comment
//! [phantom]
//! image_size = 64
//! aggregate_radius = 0.06, 0.14
//!
//! [experiment]
//! views = 8, 16, 32
//! methods = fbp, inr, dinr
//!
//! [recon]          # defaults for every method
//! t_steps = 25
//! [recon.dinr]     # per-method overrides
//! omega = 0.02
//! ```
//!
//! Unknown keys inside known sections are rejected so typos cannot silently
//! fall back to defaults.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::solver::{Method, ReconConfig};

#[derive(Debug, Clone)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

/// Parsed configuration document; sections keep declaration order.
#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    pub path: String,
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Config { path: self.path.clone(), line, msg: msg.into() }
    }

    /// Typed lookup with the entry's line number attached to parse errors.
    pub fn parse_field<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let Some(sec) = self.section(section) else {
            return Ok(None);
        };
        let Some(entry) = sec.get(key) else {
            return Ok(None);
        };
        entry.value.parse::<T>().map(Some).map_err(|_| {
            self.err(entry.line, format!("invalid value {:?} for {section}.{key}", entry.value))
        })
    }

    /// Comma-separated list lookup.
    pub fn parse_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some(sec) = self.section(section) else {
            return Ok(None);
        };
        let Some(entry) = sec.get(key) else {
            return Ok(None);
        };
        let mut out = Vec::new();
        for part in entry.value.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(self.err(entry.line, format!("empty element in {section}.{key}")));
            }
            out.push(part.parse::<T>().map_err(|_| {
                self.err(entry.line, format!("invalid element {part:?} in {section}.{key}"))
            })?);
        }
        Ok(Some(out))
    }

    fn check_known_keys(&self, section: &str, known: &[&str]) -> Result<()> {
        if let Some(sec) = self.section(section) {
            for e in &sec.entries {
                if !known.contains(&e.key.as_str()) {
                    return Err(self.err(e.line, format!("unknown key {:?} in [{section}]", e.key)));
                }
            }
        }
        Ok(())
    }
}

/// Parse configuration text. `path` only labels error messages.
pub fn parse_config_str(text: &str, path: &str) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc { path: path.to_string(), sections: Vec::new() };
    let err = |line: usize, msg: String| Error::Config { path: path.to_string(), line, msg };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        // strip trailing comments (entire-line or after content)
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(stripped) = line.strip_prefix('[') {
            let Some(name) = stripped.strip_suffix(']') else {
                return Err(err(lineno, "unterminated section header".to_string()));
            };
            let name = name.trim();
            if name.is_empty() {
                return Err(err(lineno, "empty section name".to_string()));
            }
            if doc.section(name).is_some() {
                return Err(err(lineno, format!("duplicate section [{name}]")));
            }
            doc.sections.push(Section { name: name.to_string(), line: lineno, entries: Vec::new() });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(lineno, format!("expected `key = value`, got {line:?}")));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(err(lineno, "empty key".to_string()));
        }
        let Some(section) = doc.sections.last_mut() else {
            return Err(err(lineno, "key before any [section] header".to_string()));
        };
        if section.entries.iter().any(|e| e.key == key) {
            return Err(err(lineno, format!("duplicate key {key:?} in [{}]", section.name)));
        }
        section.entries.push(Entry { key, value, line: lineno });
    }
    Ok(doc)
}

pub fn parse_config_file(path: &std::path::Path) -> Result<ConfigDoc> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Denoiser pretraining settings.
#[derive(Debug, Clone)]
pub struct PretrainSpec {
    pub images: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_steps: usize,
    pub schedule: crate::diffusion::ScheduleKind,
    pub seed: u64,
    pub channels: Vec<usize>,
    /// When set, the generated training images and their manifest are
    /// written here.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            images: 200,
            image_size: 64,
            epochs: 8,
            batch_size: 8,
            lr: 2e-4,
            train_steps: 1000,
            schedule: crate::diffusion::ScheduleKind::LinearBeta,
            seed: 3,
            channels: vec![16, 32, 32, 16],
            dataset_dir: None,
        }
    }
}

/// Whole-experiment description: phantom, geometry, the (views x methods)
/// grid, per-method reconstruction settings, output location and seeding.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub phantom: PhantomConfig,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    pub views: Vec<usize>,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub weights_path: Option<PathBuf>,
    pub sinogram_data: Option<PathBuf>,
    pub sinogram_geometry: Option<PathBuf>,
    pub truth_volume: Option<PathBuf>,
    /// Explicit ROI anchor `(row, col)`; when absent the anchor-proposal
    /// helper picks one from the ground truth.
    pub roi_anchor: Option<(usize, usize)>,
    pub pretrain: PretrainSpec,
    pub doc: ConfigDoc,
}

const PHANTOM_KEYS: &[&str] = &[
    "image_size",
    "n_slices",
    "seed",
    "ellipses",
    "ellipse_intensity",
    "aggregates",
    "aggregate_radius",
    "pores",
    "pore_radius",
];

const EXPERIMENT_KEYS: &[&str] = &[
    "views",
    "methods",
    "master_seed",
    "out_dir",
    "weights",
    "n_detectors",
    "detector_spacing",
    "sinogram_data",
    "sinogram_geometry",
    "truth_volume",
    "roi_anchor",
];

const PRETRAIN_KEYS: &[&str] = &[
    "images",
    "image_size",
    "epochs",
    "batch_size",
    "lr",
    "train_steps",
    "schedule",
    "seed",
    "channels",
    "weights",
    "dataset_dir",
];

const RECON_KEYS: &[&str] = &[
    "omega",
    "omega_applies",
    "rho_ratio",
    "eta",
    "t_steps",
    "adapt_steps",
    "adapt_lr",
    "inr_hidden",
    "inr_w0",
    "inr_steps_init",
    "inr_steps_per_t",
    "inr_lr",
    "cg_iters",
    "mu",
    "slerp_lambda",
    "apodization",
];

fn pair_from<T: Copy>(v: &[T], doc: &ConfigDoc, line: usize, what: &str) -> Result<(T, T)> {
    match v {
        [lo, hi] => Ok((*lo, *hi)),
        [single] => Ok((*single, *single)),
        _ => Err(Error::Config {
            path: doc.path.clone(),
            line,
            msg: format!("{what} expects one or two comma-separated values"),
        }),
    }
}

impl ExperimentSpec {
    pub fn from_doc(doc: ConfigDoc) -> Result<Self> {
        doc.check_known_keys("phantom", PHANTOM_KEYS)?;
        doc.check_known_keys("experiment", EXPERIMENT_KEYS)?;
        doc.check_known_keys("pretrain", PRETRAIN_KEYS)?;
        doc.check_known_keys("recon", RECON_KEYS)?;
        for m in ["fbp", "inr", "dd3ip", "dinr"] {
            doc.check_known_keys(&format!("recon.{m}"), RECON_KEYS)?;
        }
        // Reject stray sections.
        let known: BTreeSet<String> = ["phantom", "experiment", "pretrain", "recon"]
            .into_iter()
            .map(String::from)
            .chain(["fbp", "inr", "dd3ip", "dinr"].into_iter().map(|m| format!("recon.{m}")))
            .collect();
        for s in &doc.sections {
            if !known.contains(&s.name) {
                return Err(Error::Config {
                    path: doc.path.clone(),
                    line: s.line,
                    msg: format!("unknown section [{}]", s.name),
                });
            }
        }

        let mut phantom = PhantomConfig::default();
        if let Some(v) = doc.parse_field("phantom", "image_size")? {
            phantom.image_size = v;
        }
        if let Some(v) = doc.parse_field("phantom", "n_slices")? {
            phantom.n_slices = v;
        }
        if let Some(v) = doc.parse_field("phantom", "seed")? {
            phantom.seed = v;
        }
        if let Some(sec) = doc.section("phantom") {
            if let Some(e) = sec.get("ellipses") {
                let v: Vec<usize> = doc.parse_list("phantom", "ellipses")?.unwrap();
                phantom.ellipse_count = pair_from(&v, &doc, e.line, "phantom.ellipses")?;
            }
            if let Some(e) = sec.get("ellipse_intensity") {
                let v: Vec<f64> = doc.parse_list("phantom", "ellipse_intensity")?.unwrap();
                phantom.ellipse_intensity = pair_from(&v, &doc, e.line, "phantom.ellipse_intensity")?;
            }
            if let Some(e) = sec.get("aggregate_radius") {
                let v: Vec<f64> = doc.parse_list("phantom", "aggregate_radius")?.unwrap();
                phantom.aggregate_radius = pair_from(&v, &doc, e.line, "phantom.aggregate_radius")?;
            }
            if let Some(e) = sec.get("pore_radius") {
                let v: Vec<f64> = doc.parse_list("phantom", "pore_radius")?.unwrap();
                phantom.pore_radius = pair_from(&v, &doc, e.line, "phantom.pore_radius")?;
            }
        }
        if let Some(v) = doc.parse_field("phantom", "aggregates")? {
            phantom.aggregate_count = v;
        }
        if let Some(v) = doc.parse_field("phantom", "pores")? {
            phantom.pore_count = v;
        }
        phantom.validate().map_err(|e| Error::Config {
            path: doc.path.clone(),
            line: doc.section("phantom").map(|s| s.line).unwrap_or(0),
            msg: e.to_string(),
        })?;

        let views: Vec<usize> = doc
            .parse_list("experiment", "views")?
            .ok_or_else(|| doc_missing(&doc, "experiment", "views"))?;
        if views.is_empty() || views.contains(&0) {
            return Err(doc_missing(&doc, "experiment", "views (nonempty, nonzero)"));
        }
        let method_names: Vec<String> = doc
            .parse_list("experiment", "methods")?
            .ok_or_else(|| doc_missing(&doc, "experiment", "methods"))?;
        if method_names.is_empty() {
            return Err(doc_missing(&doc, "experiment", "methods (nonempty)"));
        }
        let mut methods = Vec::with_capacity(method_names.len());
        for name in &method_names {
            let line = doc
                .section("experiment")
                .and_then(|s| s.get("methods"))
                .map(|e| e.line)
                .unwrap_or(0);
            methods.push(name.parse::<Method>().map_err(|e| Error::Config {
                path: doc.path.clone(),
                line,
                msg: e.to_string(),
            })?);
        }

        let master_seed = doc.parse_field("experiment", "master_seed")?.unwrap_or(0);
        let out_dir: PathBuf =
            doc.parse_field::<String>("experiment", "out_dir")?.unwrap_or_else(|| "out".into()).into();
        // The pretrain section's output path doubles as the default input.
        let weights_path = match doc.parse_field::<String>("experiment", "weights")? {
            Some(p) => Some(PathBuf::from(p)),
            None => doc.parse_field::<String>("pretrain", "weights")?.map(PathBuf::from),
        };
        let n_detectors = match doc.parse_field("experiment", "n_detectors")? {
            Some(v) => v,
            None => crate::tomo::Geometry::covering_detector_count(phantom.image_size),
        };
        let detector_spacing = doc.parse_field("experiment", "detector_spacing")?.unwrap_or(1.0);
        let sinogram_data =
            doc.parse_field::<String>("experiment", "sinogram_data")?.map(PathBuf::from);
        let sinogram_geometry =
            doc.parse_field::<String>("experiment", "sinogram_geometry")?.map(PathBuf::from);
        let truth_volume =
            doc.parse_field::<String>("experiment", "truth_volume")?.map(PathBuf::from);
        let roi_anchor = match doc.parse_list::<usize>("experiment", "roi_anchor")? {
            Some(v) => {
                let line = doc
                    .section("experiment")
                    .and_then(|s| s.get("roi_anchor"))
                    .map(|e| e.line)
                    .unwrap_or(0);
                let (row, col) = pair_from(&v, &doc, line, "experiment.roi_anchor")?;
                Some((row, col))
            }
            None => None,
        };
        if sinogram_data.is_some() != sinogram_geometry.is_some() {
            return Err(doc_missing(
                &doc,
                "experiment",
                "both sinogram_data and sinogram_geometry (or neither)",
            ));
        }

        let mut pretrain = PretrainSpec::default();
        if let Some(v) = doc.parse_field("pretrain", "images")? {
            pretrain.images = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "image_size")? {
            pretrain.image_size = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "epochs")? {
            pretrain.epochs = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "batch_size")? {
            pretrain.batch_size = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "lr")? {
            pretrain.lr = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "train_steps")? {
            pretrain.train_steps = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "schedule")? {
            pretrain.schedule = v;
        }
        if let Some(v) = doc.parse_field("pretrain", "seed")? {
            pretrain.seed = v;
        }
        if let Some(v) = doc.parse_list("pretrain", "channels")? {
            if v.is_empty() || v.contains(&0) {
                return Err(doc_missing(&doc, "pretrain", "channels (nonempty, nonzero)"));
            }
            pretrain.channels = v;
        }
        pretrain.dataset_dir =
            doc.parse_field::<String>("pretrain", "dataset_dir")?.map(PathBuf::from);

        Ok(ExperimentSpec {
            phantom,
            n_detectors,
            detector_spacing,
            views,
            methods,
            master_seed,
            out_dir,
            weights_path,
            sinogram_data,
            sinogram_geometry,
            truth_volume,
            roi_anchor,
            pretrain,
            doc,
        })
    }

    /// Effective reconstruction config for a method: defaults, overlaid with
    /// `[recon]`, overlaid with `[recon.<method>]`.
    pub fn recon_config(&self, method: Method) -> Result<ReconConfig> {
        let mut cfg = ReconConfig { method, ..Default::default() };
        for section in ["recon".to_string(), format!("recon.{}", method.name())] {
            apply_recon_section(&self.doc, &section, &mut cfg)?;
        }
        cfg.validate().map_err(|e| Error::Config {
            path: self.doc.path.clone(),
            line: 0,
            msg: format!("invalid reconstruction settings for {}: {e}", method.name()),
        })?;
        Ok(cfg)
    }
}

fn doc_missing(doc: &ConfigDoc, section: &str, what: &str) -> Error {
    Error::Config {
        path: doc.path.clone(),
        line: doc.section(section).map(|s| s.line).unwrap_or(0),
        msg: format!("missing or invalid {section}.{what}"),
    }
}

fn apply_recon_section(doc: &ConfigDoc, section: &str, cfg: &mut ReconConfig) -> Result<()> {
    if let Some(v) = doc.parse_field(section, "omega")? {
        cfg.omega = v;
    }
    if let Some(v) = doc.parse_field(section, "omega_applies")? {
        cfg.omega_applies = v;
    }
    if let Some(v) = doc.parse_field(section, "rho_ratio")? {
        cfg.rho_ratio = v;
    }
    if let Some(v) = doc.parse_field(section, "eta")? {
        cfg.eta = v;
    }
    if let Some(v) = doc.parse_field(section, "t_steps")? {
        cfg.t_steps = v;
    }
    if let Some(v) = doc.parse_field(section, "adapt_steps")? {
        cfg.adapt_steps = v;
    }
    if let Some(v) = doc.parse_field(section, "adapt_lr")? {
        cfg.adapt_lr = v;
    }
    if let Some(v) = doc.parse_list(section, "inr_hidden")? {
        cfg.inr_hidden = v;
    }
    if let Some(v) = doc.parse_field(section, "inr_w0")? {
        cfg.inr_w0 = v;
    }
    if let Some(v) = doc.parse_field(section, "inr_steps_init")? {
        cfg.inr_steps_init = v;
    }
    if let Some(v) = doc.parse_field(section, "inr_steps_per_t")? {
        cfg.inr_steps_per_t = v;
    }
    if let Some(v) = doc.parse_field(section, "inr_lr")? {
        cfg.inr_lr = v;
    }
    if let Some(v) = doc.parse_field(section, "cg_iters")? {
        cfg.cg_iters = v;
    }
    if let Some(v) = doc.parse_field(section, "mu")? {
        cfg.mu = v;
    }
    if let Some(v) = doc.parse_field(section, "slerp_lambda")? {
        cfg.slerp_lambda = v;
    }
    if let Some(v) = doc.parse_field(section, "apodization")? {
        cfg.apodization = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# experiment grid
[phantom]
image_size = 32
n_slices = 1
seed = 11

[experiment]
views = 8, 16
methods = fbp, dinr
master_seed = 7
out_dir = runs/demo
weights = w.dinrw

[recon]
t_steps = 5
inr_hidden = 16, 16

[recon.dinr]
omega = 0.2
";

    #[test]
    fn parses_sections_and_values() {
        let doc = parse_config_str(SAMPLE, "test.ini").unwrap();
        let spec = ExperimentSpec::from_doc(doc).unwrap();
        assert_eq!(spec.phantom.image_size, 32);
        assert_eq!(spec.views, vec![8, 16]);
        assert_eq!(spec.methods, vec![Method::Fbp, Method::Dinr]);
        assert_eq!(spec.master_seed, 7);
        assert_eq!(spec.out_dir, PathBuf::from("runs/demo"));
        assert_eq!(spec.weights_path, Some(PathBuf::from("w.dinrw")));
        let dinr = spec.recon_config(Method::Dinr).unwrap();
        assert_eq!(dinr.t_steps, 5);
        assert_eq!(dinr.omega, 0.2);
        assert_eq!(dinr.inr_hidden, vec![16, 16]);
        // base section applies to other methods too, without the override
        let fbp = spec.recon_config(Method::Fbp).unwrap();
        assert_eq!(fbp.t_steps, 5);
        assert_eq!(fbp.omega, ReconConfig::default().omega);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "[phantom]\nimage_size = not_a_number\n";
        match parse_config_str(bad, "c.ini").and_then(ExperimentSpec::from_doc) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        let bad = "[phantom]\nimage_sz = 64\n[experiment]\nviews = 4\nmethods = fbp\n";
        assert!(parse_config_str(bad, "c.ini").and_then(ExperimentSpec::from_doc).is_err());
        let bad = "[phantoms]\nimage_size = 64\n";
        assert!(parse_config_str(bad, "c.ini").and_then(ExperimentSpec::from_doc).is_err());
    }

    #[test]
    fn empty_methods_list_is_schema_error() {
        let bad = "[experiment]\nviews = 4\nmethods = \n";
        assert!(parse_config_str(bad, "c.ini").and_then(ExperimentSpec::from_doc).is_err());
    }

    #[test]
    fn parser_rejects_malformed_lines() {
        assert!(parse_config_str("[unterminated\n", "c").is_err());
        assert!(parse_config_str("key_without_section = 1\n", "c").is_err());
        assert!(parse_config_str("[s]\nnot a kv pair\n", "c").is_err());
        assert!(parse_config_str("[s]\n= value\n", "c").is_err());
        assert!(parse_config_str("[s]\nk = 1\nk = 2\n", "c").is_err());
        assert!(parse_config_str("[s]\n[s]\n", "c").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "\n# top\n[experiment]\nviews = 4 # inline\nmethods = fbp\n\n";
        let spec = parse_config_str(text, "c").and_then(ExperimentSpec::from_doc).unwrap();
        assert_eq!(spec.views, vec![4]);
    }

    #[test]
    fn mismatched_sinogram_keys_rejected() {
        let bad = "[experiment]\nviews = 4\nmethods = fbp\nsinogram_data = a.vol\n";
        assert!(parse_config_str(bad, "c").and_then(ExperimentSpec::from_doc).is_err());
    }
}
