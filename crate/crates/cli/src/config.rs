//! Flat key=value run configuration.
//!
//! The format is line-oriented: `key=value`, `#` comments, blank lines
//! ignored, dotted namespaces for module settings, comma-separated lists.
//! Every key has a default (the desk-scale run below); a key the schema
//! does not know is an error, so typos cannot silently fall back. The same
//! schema renders a resolved config back to text, and feeding that snapshot
//! in again reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iosda_core::datahub::SynthSpec;
use iosda_core::timeline::{DomainSource, TimelineConfig};
use iosda_core::{Error, Result};

/// Parsed but not yet interpreted key=value pairs; later inserts win.
#[derive(Debug, Default)]
pub struct ConfigBag {
    entries: BTreeMap<String, String>,
}

impl ConfigBag {
    pub fn from_file(path: &Path) -> Result<ConfigBag> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut bag = ConfigBag::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{} line {}: expected key=value, got {line:?}", path.display(), i + 1))
            })?;
            bag.set(key.trim(), value.trim());
        }
        Ok(bag)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies one `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(key.trim(), value.trim());
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse {raw:?}"))),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(raw) => Err(Error::Config(format!("key {key}: expected true or false, got {raw:?}"))),
        }
    }

    fn take_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        Error::Config(format!("key {key}: bad list element {part:?} in {raw:?}"))
                    })
                })
                .collect(),
        }
    }

    /// Interprets every known key against the desk-scale defaults and
    /// rejects whatever remains.
    pub fn into_timeline_config(mut self) -> Result<TimelineConfig> {
        let mut cfg = TimelineConfig::desk_scale();

        cfg.seed = self.take_parsed("seed", cfg.seed)?;
        cfg.known_classes = self.take_parsed("known_classes", cfg.known_classes)?;
        cfg.pseudo_threshold = self.take_parsed("pseudo_threshold", cfg.pseudo_threshold)?;
        cfg.replay_per_class = self.take_parsed("replay_per_class", cfg.replay_per_class)?;
        cfg.replay_open_class = self.take_bool("replay_open_class", cfg.replay_open_class)?;
        cfg.holdout_fraction = self.take_parsed("holdout_fraction", cfg.holdout_fraction)?;

        let files = self.take("source.files").unwrap_or_default();
        let (mut spec, mut num_domains) = match cfg.source {
            DomainSource::Synthetic { spec, num_domains } => (spec, num_domains),
            DomainSource::Files(_) => (SynthSpec::default(), 3),
        };
        num_domains = self.take_parsed("source.domains", num_domains)?;
        spec.feat_dim = self.take_parsed("source.feat_dim", spec.feat_dim)?;
        spec.open_per_domain = self.take_parsed("source.open_per_domain", spec.open_per_domain)?;
        spec.samples_per_class = self.take_parsed("source.samples_per_class", spec.samples_per_class)?;
        spec.shift_mag = self.take_parsed("source.shift_mag", spec.shift_mag)?;
        spec.cluster_std = self.take_parsed("source.cluster_std", spec.cluster_std)?;
        spec.seed = self.take_parsed("source.seed", spec.seed)?;
        spec.known_classes = cfg.known_classes;
        cfg.source = if files.is_empty() {
            DomainSource::Synthetic { spec, num_domains }
        } else {
            DomainSource::Files(files.split(',').map(|p| PathBuf::from(p.trim())).collect())
        };

        cfg.gan.z_dim = self.take_parsed("gan.z_dim", cfg.gan.z_dim)?;
        cfg.gan.d_dim = self.take_parsed("gan.d_dim", cfg.gan.d_dim)?;
        cfg.gan.gen_hidden = self.take_list("gan.gen_hidden", &cfg.gan.gen_hidden)?;
        cfg.gan.trunk_hidden = self.take_list("gan.trunk_hidden", &cfg.gan.trunk_hidden)?;
        cfg.gan.batch_norm = self.take_bool("gan.batch_norm", cfg.gan.batch_norm)?;
        cfg.gan.epochs = self.take_parsed("gan.epochs", cfg.gan.epochs)?;
        cfg.gan.batch_size = self.take_parsed("gan.batch_size", cfg.gan.batch_size)?;
        cfg.gan.adam.lr = self.take_parsed("gan.lr", cfg.gan.adam.lr)?;
        cfg.gan.adam.beta1 = self.take_parsed("gan.beta1", cfg.gan.adam.beta1)?;
        cfg.gan.adam.beta2 = self.take_parsed("gan.beta2", cfg.gan.adam.beta2)?;

        cfg.osda.extractor_hidden =
            self.take_list("osda.extractor_hidden", &cfg.osda.extractor_hidden)?;
        cfg.osda.head_hidden = self.take_list("osda.head_hidden", &cfg.osda.head_hidden)?;
        cfg.osda.t_boundary = self.take_parsed("osda.t_boundary", cfg.osda.t_boundary)?;
        cfg.osda.adv_weight = self.take_parsed("osda.adv_weight", cfg.osda.adv_weight)?;
        cfg.osda.epochs = self.take_parsed("osda.epochs", cfg.osda.epochs)?;
        cfg.osda.batch_size = self.take_parsed("osda.batch_size", cfg.osda.batch_size)?;
        cfg.osda.adam.lr = self.take_parsed("osda.lr", cfg.osda.adam.lr)?;
        cfg.osda.adam.beta1 = self.take_parsed("osda.beta1", cfg.osda.adam.beta1)?;
        cfg.osda.adam.beta2 = self.take_parsed("osda.beta2", cfg.osda.adam.beta2)?;

        if !self.entries.is_empty() {
            let unknown: Vec<&String> = self.entries.keys().collect();
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders a resolved config as the snapshot written into each run
/// directory. Every key appears, so the file doubles as the reference of
/// defaults; parsing it back yields the identical config.
pub fn render(cfg: &TimelineConfig) -> String {
    let mut out = String::from("# resolved run configuration\n");
    let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
    kv("seed", cfg.seed.to_string());
    kv("known_classes", cfg.known_classes.to_string());
    kv("pseudo_threshold", cfg.pseudo_threshold.to_string());
    kv("replay_per_class", cfg.replay_per_class.to_string());
    kv("replay_open_class", cfg.replay_open_class.to_string());
    kv("holdout_fraction", cfg.holdout_fraction.to_string());
    match &cfg.source {
        DomainSource::Files(paths) => {
            let joined =
                paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
            kv("source.files", joined);
        }
        DomainSource::Synthetic { spec, num_domains } => {
            kv("source.domains", num_domains.to_string());
            kv("source.feat_dim", spec.feat_dim.to_string());
            kv("source.open_per_domain", spec.open_per_domain.to_string());
            kv("source.samples_per_class", spec.samples_per_class.to_string());
            kv("source.shift_mag", spec.shift_mag.to_string());
            kv("source.cluster_std", spec.cluster_std.to_string());
            kv("source.seed", spec.seed.to_string());
        }
    }
    kv("gan.z_dim", cfg.gan.z_dim.to_string());
    kv("gan.d_dim", cfg.gan.d_dim.to_string());
    kv("gan.gen_hidden", list(&cfg.gan.gen_hidden));
    kv("gan.trunk_hidden", list(&cfg.gan.trunk_hidden));
    kv("gan.batch_norm", cfg.gan.batch_norm.to_string());
    kv("gan.epochs", cfg.gan.epochs.to_string());
    kv("gan.batch_size", cfg.gan.batch_size.to_string());
    kv("gan.lr", cfg.gan.adam.lr.to_string());
    kv("gan.beta1", cfg.gan.adam.beta1.to_string());
    kv("gan.beta2", cfg.gan.adam.beta2.to_string());
    kv("osda.extractor_hidden", list(&cfg.osda.extractor_hidden));
    kv("osda.head_hidden", list(&cfg.osda.head_hidden));
    kv("osda.t_boundary", cfg.osda.t_boundary.to_string());
    kv("osda.adv_weight", cfg.osda.adv_weight.to_string());
    kv("osda.epochs", cfg.osda.epochs.to_string());
    kv("osda.batch_size", cfg.osda.batch_size.to_string());
    kv("osda.lr", cfg.osda.adam.lr.to_string());
    kv("osda.beta1", cfg.osda.adam.beta1.to_string());
    kv("osda.beta2", cfg.osda.adam.beta2.to_string());
    out
}
