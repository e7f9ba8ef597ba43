//! Feature samples, domain datasets, label-visibility views, synthetic stream
//! generation, and the two feature file formats (CSV and binary).
//!
//! Ground truth always travels with a sample; whether a consumer may see it is
//! a property of the view it reads through. Training code reads
//! [`DomainDataset::training_labels`], which hides truth on unlabeled domains;
//! evaluation reads [`DomainDataset::truth_labels`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const FEAT_MAGIC: &[u8; 8] = b"IOSDFEAT";
pub const FEAT_VERSION: u32 = 1;

/// Class of a sample as seen through some view. Stored truth is always
/// `Known` or `Open`; `Hidden` exists only in training views of unlabeled
/// domains and never reaches evaluation or disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Known(usize),
    Open,
    Hidden,
}

impl ClassLabel {
    /// Serialized code: Known(k) -> k, Open -> -1.
    pub fn to_code(self) -> i32 {
        match self {
            ClassLabel::Known(k) => k as i32,
            ClassLabel::Open => -1,
            ClassLabel::Hidden => panic!("Hidden labels are never serialized"),
        }
    }

    pub fn from_code(code: i32) -> Result<ClassLabel> {
        match code {
            -1 => Ok(ClassLabel::Open),
            k if k >= 0 => Ok(ClassLabel::Known(k as usize)),
            other => Err(Error::Format(format!("unknown label code {other}"))),
        }
    }

    /// Index in the K+1 class-slot space: Known(k) -> k, Open -> K.
    pub fn slot(self, known_classes: usize) -> Result<usize> {
        match self {
            ClassLabel::Known(k) if k < known_classes => Ok(k),
            ClassLabel::Known(k) => Err(Error::contract(
                "ClassLabel::slot",
                format!("known class {k} outside 0..{known_classes}"),
            )),
            ClassLabel::Open => Ok(known_classes),
            ClassLabel::Hidden => {
                Err(Error::contract("ClassLabel::slot", "hidden label has no class slot"))
            }
        }
    }

    pub fn is_hidden(self) -> bool {
        matches!(self, ClassLabel::Hidden)
    }
}

/// One feature vector with its domain of origin and ground-truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    vector: Vec<f64>,
    domain_id: u16,
    truth: ClassLabel,
}

impl FeatureSample {
    pub fn new(vector: Vec<f64>, domain_id: u16, truth: ClassLabel) -> Result<FeatureSample> {
        if truth.is_hidden() {
            return Err(Error::contract("FeatureSample::new", "truth cannot be Hidden"));
        }
        if domain_id == 0 {
            return Err(Error::contract("FeatureSample::new", "domain ids start at 1"));
        }
        Ok(FeatureSample { vector, domain_id, truth })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn domain_id(&self) -> u16 {
        self.domain_id
    }

    pub fn truth(&self) -> ClassLabel {
        self.truth
    }
}

/// All samples of one domain plus the label-visibility policy for training.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain_id: u16,
    samples: Vec<FeatureSample>,
    labels_visible: bool,
}

impl DomainDataset {
    pub fn new(
        domain_id: u16,
        samples: Vec<FeatureSample>,
        labels_visible: bool,
    ) -> Result<DomainDataset> {
        if domain_id == 0 {
            return Err(Error::contract("DomainDataset::new", "domain ids start at 1"));
        }
        if let Some(d) = samples.first().map(|s| s.vector.len()) {
            for (i, s) in samples.iter().enumerate() {
                if s.vector.len() != d {
                    return Err(Error::contract(
                        "DomainDataset::new",
                        format!("sample 0 has {} features, sample {} has {}", d, i, s.vector.len()),
                    ));
                }
                if s.domain_id != domain_id {
                    return Err(Error::contract(
                        "DomainDataset::new",
                        format!("sample {} belongs to domain {}, dataset is domain {}", i, s.domain_id, domain_id),
                    ));
                }
            }
        }
        Ok(DomainDataset { domain_id, samples, labels_visible })
    }

    pub fn domain_id(&self) -> u16 {
        self.domain_id
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible
    }

    pub fn with_visibility(mut self, visible: bool) -> DomainDataset {
        self.labels_visible = visible;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    pub fn feat_dim(&self) -> usize {
        self.samples.first().map(|s| s.vector.len()).unwrap_or(0)
    }

    /// Feature rows as a matrix, in sample order.
    pub fn features(&self) -> Matrix {
        let mut m = Matrix::zeros(self.samples.len(), self.feat_dim());
        for (i, s) in self.samples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&s.vector);
        }
        m
    }

    /// Training-facing labels: ground truth when this domain is labeled,
    /// `Hidden` for every sample otherwise.
    pub fn training_labels(&self) -> Vec<ClassLabel> {
        if self.labels_visible {
            self.samples.iter().map(|s| s.truth).collect()
        } else {
            vec![ClassLabel::Hidden; self.samples.len()]
        }
    }

    /// Evaluation-facing labels: always ground truth, never `Hidden`.
    pub fn truth_labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.truth).collect()
    }

    /// Splits off an evaluation holdout: every ceil(1/fraction)-th sample in a
    /// seeded shuffled order. Returns (train, holdout); the holdout keeps
    /// truth visible to evaluation regardless of training visibility.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
            return Err(Error::Config(format!("holdout fraction {fraction} not in (0, 1)")));
        }
        if self.samples.len() < 2 {
            return Err(Error::contract("split_holdout", "need at least two samples"));
        }
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates via rand's shuffle keeps this reproducible per seed.
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let n_hold = ((self.samples.len() as f64) * fraction).round().max(1.0) as usize;
        let n_hold = n_hold.min(self.samples.len() - 1);
        let hold: Vec<FeatureSample> =
            idx[..n_hold].iter().map(|&i| self.samples[i].clone()).collect();
        let train: Vec<FeatureSample> =
            idx[n_hold..].iter().map(|&i| self.samples[i].clone()).collect();
        Ok((
            DomainDataset::new(self.domain_id, train, self.labels_visible)?,
            DomainDataset::new(self.domain_id, hold, self.labels_visible)?,
        ))
    }
}

// ---- synthetic stream generation ----

/// Controls for the synthetic feature stream. Every known class has one base
/// mean shared by all domains; each domain adds its own shift vector of length
/// `shift_mag` (domain 1 is unshifted). Domains after the first also carry
/// `open_per_domain` open clusters whose means are unique to that domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub feat_dim: usize,
    pub known_classes: usize,
    pub open_per_domain: usize,
    pub samples_per_class: usize,
    pub shift_mag: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            feat_dim: 16,
            known_classes: 4,
            open_per_domain: 2,
            samples_per_class: 200,
            shift_mag: 1.0,
            cluster_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0
            || self.known_classes == 0
            || self.open_per_domain == 0
            || self.samples_per_class == 0
        {
            return Err(Error::Config("synthetic spec counts must all be at least 1".into()));
        }
        if !(self.cluster_std > 0.0) || !self.cluster_std.is_finite() {
            return Err(Error::Config(format!("cluster std {} must be positive", self.cluster_std)));
        }
        if !self.shift_mag.is_finite() || self.shift_mag < 0.0 {
            return Err(Error::Config(format!("shift magnitude {} must be >= 0", self.shift_mag)));
        }
        Ok(())
    }
}

/// Cluster geometry of one synthetic stream (introspection for validation).
#[derive(Clone, Debug)]
pub struct SynthLayout {
    pub known_means: Vec<Vec<f64>>,
    pub domains: Vec<DomainLayout>,
}

#[derive(Clone, Debug)]
pub struct DomainLayout {
    pub domain_id: u16,
    pub shift: Vec<f64>,
    /// Globally unique ids of this domain's open clusters; empty for domain 1.
    pub open_cluster_ids: Vec<usize>,
    pub open_means: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws the cluster geometry: known means ~ N(0, I), per-domain unit shift
/// directions scaled to `shift_mag`, and per-domain open means rejected until
/// they clear every known mean by at least four cluster standard deviations
/// (best candidate after 200 tries if that fails).
pub fn synth_layout(spec: &SynthSpec, num_domains: usize) -> Result<SynthLayout> {
    spec.validate()?;
    if num_domains == 0 {
        return Err(Error::Config("need at least one domain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let known_means: Vec<Vec<f64>> =
        (0..spec.known_classes).map(|_| normal_vec(&mut rng, spec.feat_dim)).collect();
    let margin = 4.0 * spec.cluster_std;
    let mut domains = Vec::with_capacity(num_domains);
    let mut next_open_id = spec.known_classes;
    for d in 1..=num_domains {
        let shift = if d == 1 {
            vec![0.0; spec.feat_dim]
        } else {
            let v = normal_vec(&mut rng, spec.feat_dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * spec.shift_mag).collect()
        };
        let (ids, means) = if d == 1 {
            (Vec::new(), Vec::new())
        } else {
            let mut ids = Vec::with_capacity(spec.open_per_domain);
            let mut means = Vec::with_capacity(spec.open_per_domain);
            for _ in 0..spec.open_per_domain {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for _ in 0..200 {
                    let cand = normal_vec(&mut rng, spec.feat_dim);
                    let min_d = known_means
                        .iter()
                        .map(|m| dist(&cand, m))
                        .fold(f64::INFINITY, f64::min);
                    if best.as_ref().map(|(b, _)| min_d > *b).unwrap_or(true) {
                        best = Some((min_d, cand));
                    }
                    if min_d >= margin {
                        break;
                    }
                }
                ids.push(next_open_id);
                next_open_id += 1;
                means.push(best.unwrap().1);
            }
            (ids, means)
        };
        domains.push(DomainLayout {
            domain_id: d as u16,
            shift,
            open_cluster_ids: ids,
            open_means: means,
        });
    }
    Ok(SynthLayout { known_means, domains })
}

/// Generates the full stream. Domain 1 holds known classes only and is the
/// labeled source (`labels_visible = true`); every later domain holds known
/// plus open clusters and arrives unlabeled. Samples are drawn per cluster as
/// mean + shift + std * N(0, I), in cluster order, deterministically per seed.
pub fn gen_synthetic(spec: &SynthSpec, num_domains: usize) -> Result<Vec<DomainDataset>> {
    let layout = synth_layout(spec, num_domains)?;
    let mut out = Vec::with_capacity(num_domains);
    for dl in &layout.domains {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1000 + dl.domain_id as u64);
        let mut samples = Vec::new();
        let mut push_cluster = |mean: &[f64], truth: ClassLabel, rng: &mut ChaCha8Rng| -> Result<()> {
            for _ in 0..spec.samples_per_class {
                let v: Vec<f64> = mean
                    .iter()
                    .zip(&dl.shift)
                    .map(|(m, s)| m + s + spec.cluster_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(FeatureSample::new(v, dl.domain_id, truth)?);
            }
            Ok(())
        };
        for (k, mean) in layout.known_means.iter().enumerate() {
            push_cluster(mean, ClassLabel::Known(k), &mut rng)?;
        }
        for mean in &dl.open_means {
            push_cluster(mean, ClassLabel::Open, &mut rng)?;
        }
        out.push(DomainDataset::new(dl.domain_id, samples, dl.domain_id == 1)?);
    }
    Ok(out)
}

// ---- feature files ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

/// Writes a dataset. CSV carries f64 text that parses back bit-exactly; the
/// binary format narrows features to f32 (its payload type), so use it for
/// data that originated as f32.
pub fn save_features(path: &Path, dataset: &DomainDataset, format: FeatureFormat) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract("save_features", "refusing to write an empty dataset"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = match format {
        FeatureFormat::Csv => write_csv(&mut w, dataset),
        FeatureFormat::Binary => write_binary(&mut w, dataset),
    };
    res.map_err(|e| Error::io(path, e))
}

fn write_csv(w: &mut impl Write, dataset: &DomainDataset) -> std::io::Result<()> {
    let d = dataset.feat_dim();
    for i in 0..d {
        write!(w, "f{i},")?;
    }
    writeln!(w, "label,domain")?;
    for s in dataset.samples() {
        for v in s.vector() {
            write!(w, "{v},")?;
        }
        writeln!(w, "{},{}", s.truth().to_code(), s.domain_id())?;
    }
    Ok(())
}

fn write_binary(w: &mut impl Write, dataset: &DomainDataset) -> std::io::Result<()> {
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&FEAT_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.feat_dim() as u32).to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    for s in dataset.samples() {
        for v in s.vector() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.write_all(&s.truth().to_code().to_le_bytes())?;
        w.write_all(&s.domain_id().to_le_bytes())?;
    }
    Ok(())
}

/// Loads a feature file, sniffing the binary magic and falling back to CSV.
/// The loaded dataset has labels visible; the pipeline decides visibility by
/// stream position when it ingests the domain.
pub fn load_features(path: &Path) -> Result<DomainDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::data(path, "empty file"));
    }
    if bytes.len() >= 8 && &bytes[..8] == FEAT_MAGIC {
        read_binary(path, &bytes)
    } else {
        read_csv(path, &bytes)
    }
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<DomainDataset> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::data(path, "file is not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::data(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 {
        return Err(Error::data(path, "header needs f0..f{d-1},label,domain"));
    }
    let d = cols.len() - 2;
    for (i, c) in cols.iter().take(d).enumerate() {
        let expected = format!("f{i}");
        if c.trim() != expected {
            return Err(Error::data(
                path,
                format!("header column {} should be '{}', found '{}'", i, expected, c.trim()),
            ));
        }
    }
    if cols[d].trim() != "label" || cols[d + 1].trim() != "domain" {
        return Err(Error::data(path, "header must end with 'label,domain'"));
    }

    let mut samples = Vec::new();
    let mut domain: Option<u16> = None;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::data(
                path,
                format!("row {} has {} fields, expected {}", lineno + 1, fields.len(), d + 2),
            ));
        }
        let mut vector = Vec::with_capacity(d);
        for (i, f) in fields.iter().take(d).enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::data(path, format!("row {} field {} is not a number: '{}'", lineno + 1, i, f))
            })?;
            vector.push(v);
        }
        let code: i32 = fields[d].trim().parse().map_err(|_| {
            Error::data(path, format!("row {} has a bad label: '{}'", lineno + 1, fields[d]))
        })?;
        let truth = ClassLabel::from_code(code)
            .map_err(|_| Error::data(path, format!("row {} has unknown label code {}", lineno + 1, code)))?;
        let dom: u16 = fields[d + 1].trim().parse().map_err(|_| {
            Error::data(path, format!("row {} has a bad domain id: '{}'", lineno + 1, fields[d + 1]))
        })?;
        match domain {
            None => domain = Some(dom),
            Some(prev) if prev != dom => {
                return Err(Error::data(
                    path,
                    format!("row {} has domain {}, earlier rows have {}", lineno + 1, dom, prev),
                ))
            }
            _ => {}
        }
        samples.push(
            FeatureSample::new(vector, dom, truth)
                .map_err(|e| Error::data(path, format!("row {}: {}", lineno + 1, e)))?,
        );
    }
    if samples.is_empty() {
        return Err(Error::data(path, "no data rows"));
    }
    DomainDataset::new(domain.unwrap(), samples, true)
}

fn read_binary(path: &Path, bytes: &[u8]) -> Result<DomainDataset> {
    let mut at = 8usize; // past magic
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::data(
                path,
                format!("truncated: wanted {} bytes at offset {}, file has {}", n, at, bytes.len()),
            ));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != FEAT_VERSION {
        return Err(Error::data(path, format!("unsupported feature file version {version}")));
    }
    let d = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    if d == 0 || count == 0 {
        return Err(Error::data(path, "feature file declares no data"));
    }
    let mut samples = Vec::with_capacity(count);
    let mut domain: Option<u16> = None;
    for r in 0..count {
        let feats = take(&mut at, d * 4)?;
        let vector: Vec<f64> = feats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let code = i32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        let truth = ClassLabel::from_code(code)
            .map_err(|_| Error::data(path, format!("record {} has unknown label code {}", r, code)))?;
        let dom = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap());
        match domain {
            None => domain = Some(dom),
            Some(prev) if prev != dom => {
                return Err(Error::data(
                    path,
                    format!("record {} has domain {}, earlier records have {}", r, dom, prev),
                ))
            }
            _ => {}
        }
        samples.push(
            FeatureSample::new(vector, dom, truth)
                .map_err(|e| Error::data(path, format!("record {}: {}", r, e)))?,
        );
    }
    if at != bytes.len() {
        return Err(Error::data(path, format!("{} trailing bytes after {} records", bytes.len() - at, count)));
    }
    DomainDataset::new(domain.unwrap(), samples, true)
}
