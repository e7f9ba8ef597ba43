//! Incremental stream orchestration.
//!
//! Domains arrive one per timestamp. The first trains the replay generator
//! directly from its labels. Every later arrival is treated as an unlabeled
//! target: the current generator resynthesizes each past domain, a fresh
//! multi-head adapter trains with those replays as sources, the target gets
//! pseudo-labeled at a confidence threshold, and a new generator trains on
//! replays plus accepted pseudo-labels. Raw samples of absorbed domains are
//! then dropped; only the generator, the adapter, and sequestered evaluation
//! holdouts survive into the next timestamp.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datahub::{gen_synthetic, load_features, ClassLabel, DomainDataset, FeatureSample, SynthSpec};
use crate::ensemble::{self, EnsembleDecision};
use crate::error::{Error, Result};
use crate::evalkit::{self, os_scores, MetricRecord};
use crate::mdcgan::{train_replay_gan, MdcganConfig, MdcganState};
use crate::meosda::{self, MeosdaConfig, MeosdaState, Predictor};

/// Where the domain stream comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainSource {
    /// One feature file per domain, in arrival order; ids must run 1..=N.
    Files(Vec<PathBuf>),
    /// Generated clusters, domains 1..=num_domains.
    Synthetic { spec: SynthSpec, num_domains: usize },
}

impl DomainSource {
    pub fn domain_count(&self) -> usize {
        match self {
            DomainSource::Files(paths) => paths.len(),
            DomainSource::Synthetic { num_domains, .. } => *num_domains,
        }
    }
}

/// Full description of one incremental run.
#[derive(Clone, Debug, PartialEq)]
pub struct TimelineConfig {
    pub source: DomainSource,
    pub known_classes: usize,
    /// Pseudo-label acceptance threshold.
    pub pseudo_threshold: f64,
    /// Replay samples generated per class per past domain.
    pub replay_per_class: usize,
    /// Replay the open class alongside the known ones.
    pub replay_open_class: bool,
    /// Fraction of each target domain sequestered for evaluation at arrival.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub gan: MdcganConfig,
    pub osda: MeosdaConfig,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig {
            source: DomainSource::Synthetic { spec: SynthSpec::default(), num_domains: 3 },
            known_classes: 4,
            pseudo_threshold: 0.95,
            replay_per_class: 100,
            replay_open_class: true,
            holdout_fraction: 0.2,
            seed: 0,
            gan: MdcganConfig::default(),
            osda: MeosdaConfig::default(),
        }
    }
}

impl TimelineConfig {
    /// Small nets and synthetic data sized for minutes-scale runs.
    ///
    /// The adapter is widened and trained longer than its bare module
    /// profile, and the pseudo-label threshold is lowered: the boundary
    /// term drives target confidence toward its 0.5 equilibrium, so at
    /// this scale a 0.95 cut accepts almost nothing while 0.7 still sits
    /// above the ceiling open samples can reach.
    pub fn desk_scale() -> Self {
        TimelineConfig {
            pseudo_threshold: 0.7,
            gan: MdcganConfig::desk_scale(),
            osda: MeosdaConfig {
                extractor_hidden: vec![128, 64],
                head_hidden: vec![64],
                epochs: 60,
                ..MeosdaConfig::desk_scale()
            },
            ..TimelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.source.domain_count();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 domains, got {n}")));
        }
        if n > self.gan.max_domains() {
            return Err(Error::Config(format!(
                "{n} domains exceed the {} encodable under {} domain bits",
                self.gan.max_domains(),
                self.gan.d_dim
            )));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Config(format!(
                "pseudo-label threshold {} not in (0, 1)",
                self.pseudo_threshold
            )));
        }
        if self.replay_per_class == 0 {
            return Err(Error::Config("replay_per_class must be at least 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction {} not in (0, 1)",
                self.holdout_fraction
            )));
        }
        if self.known_classes == 0 {
            return Err(Error::Config("known_classes must be at least 1".into()));
        }
        if let DomainSource::Synthetic { spec, .. } = &self.source {
            spec.validate()?;
            if spec.known_classes != self.known_classes {
                return Err(Error::Config(format!(
                    "synthetic spec has {} known classes, run expects {}",
                    spec.known_classes, self.known_classes
                )));
            }
        }
        self.gan.validate()?;
        self.osda.validate()
    }

    /// Loads or generates the full domain stream in arrival order.
    pub fn load_stream(&self) -> Result<Vec<DomainDataset>> {
        let stream = match &self.source {
            DomainSource::Synthetic { spec, num_domains } => gen_synthetic(spec, *num_domains)?,
            DomainSource::Files(paths) => {
                paths.iter().map(|p| load_features(p)).collect::<Result<Vec<_>>>()?
            }
        };
        for (i, ds) in stream.iter().enumerate() {
            let want = (i + 1) as u16;
            if ds.domain_id() != want {
                return Err(Error::Config(format!(
                    "stream position {} holds domain {}, expected {}",
                    i + 1,
                    ds.domain_id(),
                    want
                )));
            }
            if ds.is_empty() {
                return Err(Error::Config(format!("domain {} is empty", ds.domain_id())));
            }
        }
        Ok(stream)
    }
}

// Seed-stream layout: one master seed, disjoint stream ids per stage and
// timestamp so no two stages ever share a random sequence.
const STREAM_GAN: u64 = 1;
const STREAM_REPLAY: u64 = 2;
const STREAM_OSDA: u64 = 3;

fn stage_rng(master: u64, stage: u64, timestamp: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stage * 1_000_000 + timestamp as u64);
    rng
}

/// Holdout split seed for one domain; plain seeds (not streams) because the
/// split happens before any state exists. Public so external harnesses can
/// rebuild the exact train/holdout partition of a run.
pub fn split_seed(master: u64, domain_id: u16) -> u64 {
    master ^ (0x484F_4C44u64 << 16) ^ domain_id as u64
}

/// Resynthesizes one past domain from the generator: `per_class` samples per
/// known class, plus the open class when `include_open` AND the generator
/// was actually trained on open rows of this domain (an unfit conditional
/// would only produce noise labeled open). Labels are the conditioning
/// labels.
pub fn generate_replay(
    gan: &MdcganState,
    domain_id: u16,
    known_classes: usize,
    per_class: usize,
    include_open: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DomainDataset> {
    let mut labels: Vec<ClassLabel> = (0..known_classes).map(ClassLabel::Known).collect();
    if include_open && gan.open_trained(domain_id) {
        labels.push(ClassLabel::Open);
    }
    let mut samples = Vec::with_capacity(labels.len() * per_class);
    for label in labels {
        let feats = gan.generate(label, domain_id, per_class, rng)?;
        for r in 0..feats.rows() {
            samples.push(FeatureSample::new(feats.row(r).to_vec(), domain_id, label)?);
        }
    }
    DomainDataset::new(domain_id, samples, true)
}

/// What one timestamp did, for logs and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub timestamp: usize,
    /// Adapter heads after this step (0 while only the first domain is in).
    pub head_count: usize,
    pub pseudo_accepted: usize,
    pub pseudo_rejected: usize,
}

/// Rolling state across timestamps. Holds models only: the single current
/// generator and the latest adapter. `working_sets` is the one field typed
/// to carry feature samples; steps stage their replays and targets there and
/// must drain it before returning, which is what the retention audit checks.
#[derive(Debug)]
pub struct TimelineState {
    pub timestamp: usize,
    pub known_classes: usize,
    pub gan: Option<MdcganState>,
    pub osda: Option<MeosdaState>,
    pub working_sets: Vec<DomainDataset>,
}

impl TimelineState {
    pub fn new(known_classes: usize) -> TimelineState {
        TimelineState {
            timestamp: 0,
            known_classes,
            gan: None,
            osda: None,
            working_sets: Vec::new(),
        }
    }

    /// Absorbs the next domain. The first domain must arrive labeled and
    /// trains the generator alone; later domains are treated as unlabeled
    /// targets per the module description. Raw samples never outlive the
    /// call.
    pub fn step(&mut self, cfg: &TimelineConfig, incoming: DomainDataset) -> Result<StepSummary> {
        let tau = self.timestamp + 1;
        if incoming.domain_id() as usize != tau {
            return Err(Error::contract(
                "TimelineState::step",
                format!("incoming domain {} at timestamp {tau}", incoming.domain_id()),
            ));
        }
        if incoming.is_empty() {
            return Err(Error::contract("TimelineState::step", "empty incoming domain"));
        }
        if let Some(gan) = &self.gan {
            if incoming.feat_dim() != gan.cond.feat_dim {
                return Err(Error::contract(
                    "TimelineState::step",
                    format!(
                        "domain {tau} has {} features, stream started with {}",
                        incoming.feat_dim(),
                        gan.cond.feat_dim
                    ),
                ));
            }
        }

        let summary = if tau == 1 {
            if !incoming.labels_visible() {
                return Err(Error::contract(
                    "TimelineState::step",
                    "the first domain must arrive with visible labels",
                ));
            }
            self.working_sets.push(incoming);
            let mut rng = stage_rng(cfg.seed, STREAM_GAN, tau);
            let (gan, _) =
                train_replay_gan(&self.working_sets, self.known_classes, 1, &cfg.gan, &mut rng)?;
            self.gan = Some(gan);
            StepSummary { timestamp: tau, head_count: 0, pseudo_accepted: 0, pseudo_rejected: 0 }
        } else {
            // Slot 0 stages the raw target, slots 1.. the replays; the raw
            // target is replaced by its pseudo-labeled subset the moment the
            // labels are assigned.
            self.working_sets.push(incoming.with_visibility(false));
            let gan = self.gan.as_ref().expect("generator exists from timestamp 1");
            let mut replay_rng = stage_rng(cfg.seed, STREAM_REPLAY, tau);
            for past in 1..tau {
                self.working_sets.push(generate_replay(
                    gan,
                    past as u16,
                    self.known_classes,
                    cfg.replay_per_class,
                    cfg.replay_open_class,
                    &mut replay_rng,
                )?);
            }

            let mut osda_rng = stage_rng(cfg.seed, STREAM_OSDA, tau);
            let (osda, _) = meosda::fit(
                &self.working_sets[1..],
                &self.working_sets[0],
                self.known_classes,
                &cfg.osda,
                &mut osda_rng,
            )?;
            let predictor =
                if osda.heads.len() >= 2 { Predictor::Ensemble } else { Predictor::Head(0) };
            let labeled =
                osda.pseudo_label(&self.working_sets[0], cfg.pseudo_threshold, predictor)?;
            let accepted = labeled.accepted.len();
            let rejected = labeled.rejected_count;
            let pseudo_ds = DomainDataset::new(
                tau as u16,
                labeled.accepted.into_iter().map(|(s, _, _)| s).collect(),
                true,
            )?;
            self.working_sets[0] = pseudo_ds;

            let mut gan_rng = stage_rng(cfg.seed, STREAM_GAN, tau);
            let (gan, _) =
                train_replay_gan(&self.working_sets, self.known_classes, tau, &cfg.gan, &mut gan_rng)?;
            self.gan = Some(gan);
            let head_count = osda.heads.len();
            self.osda = Some(osda);
            StepSummary {
                timestamp: tau,
                head_count,
                pseudo_accepted: accepted,
                pseudo_rejected: rejected,
            }
        };
        self.working_sets.clear();
        self.timestamp = tau;
        Ok(summary)
    }
}

/// Lists every raw feature sample still reachable from the state. Models,
/// optimizers, and metric logs cannot carry samples by type; `working_sets`
/// is the only sample-bearing field, so scanning it covers the whole state.
/// Must come back empty between steps.
pub fn retention_audit(state: &TimelineState) -> Vec<String> {
    let mut violations = Vec::new();
    for ds in &state.working_sets {
        if !ds.is_empty() {
            violations.push(format!(
                "{} raw samples of domain {} reachable after timestamp {}",
                ds.len(),
                ds.domain_id(),
                state.timestamp
            ));
        }
    }
    violations
}

/// Everything a finished run leaves behind in memory.
#[derive(Debug)]
pub struct RunOutput {
    pub state: TimelineState,
    pub records: Vec<MetricRecord>,
    pub summaries: Vec<StepSummary>,
    /// Retention audit taken after every timestamp, in stream order. A run
    /// only returns when every entry is empty; kept as evidence.
    pub audits: Vec<(usize, Vec<String>)>,
}

/// Evaluation decisions for one holdout domain at one timestamp.
struct DomainEval {
    domain_id: u16,
    truth: Vec<ClassLabel>,
    decisions: Vec<EnsembleDecision>,
}

/// Drives the full stream: per arrival, split off the evaluation holdout
/// (targets only; the labeled first domain is never evaluated), absorb the
/// rest, audit retention, then score the current adapter on every holdout
/// gathered so far without revealing domain identity. With `out_dir` set,
/// checkpoints, per-timestamp prediction and embedding files, and the final
/// metric tables are written there.
pub fn run(cfg: &TimelineConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let stream = cfg.load_stream()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut state = TimelineState::new(cfg.known_classes);
    let mut vault: Vec<DomainDataset> = Vec::new();
    let mut records: Vec<MetricRecord> = Vec::new();
    let mut summaries = Vec::new();
    let mut audits = Vec::new();

    for ds in stream {
        let domain_id = ds.domain_id();
        let incoming = if domain_id == 1 {
            ds
        } else {
            let (train, holdout) =
                ds.split_holdout(cfg.holdout_fraction, split_seed(cfg.seed, domain_id))?;
            vault.push(holdout);
            train
        };
        summaries.push(state.step(cfg, incoming)?);

        let audit = retention_audit(&state);
        if !audit.is_empty() {
            return Err(Error::contract("timeline::run", audit.join("; ")));
        }
        audits.push((state.timestamp, audit));

        if let Some(osda) = &state.osda {
            let mut evals = Vec::with_capacity(vault.len());
            for holdout in &vault {
                let decisions = ensemble::batch_predict(osda, &holdout.features())?;
                let predicted: Vec<ClassLabel> = decisions.iter().map(|d| d.label).collect();
                let truth = holdout.truth_labels();
                let scores = os_scores(&truth, &predicted, cfg.known_classes)?;
                records.push(MetricRecord {
                    timestamp: state.timestamp,
                    domain_id: holdout.domain_id(),
                    os: scores.os,
                    os_star: scores.os_star,
                    per_class: scores.per_class,
                });
                evals.push(DomainEval { domain_id: holdout.domain_id(), truth, decisions });
            }
            if let Some(dir) = out_dir {
                write_predictions(
                    &dir.join(format!("predictions_t{}.csv", state.timestamp)),
                    cfg.known_classes,
                    &evals,
                )?;
                write_embeddings(
                    &dir.join(format!("embeddings_t{}.csv", state.timestamp)),
                    osda,
                    &vault,
                )?;
            }
        }
        if let Some(dir) = out_dir {
            write_checkpoint(&dir.join("checkpoints").join(format!("t{}", state.timestamp)), &state)?;
        }
    }

    if let Some(dir) = out_dir {
        evalkit::write_metrics(&dir.join("metrics.csv"), &records)?;
        evalkit::write_forgetting(&dir.join("forgetting.csv"), &evalkit::summarize(&records)?)?;
    }
    Ok(RunOutput { state, records, summaries, audits })
}

/// `sample_idx,domain,truth,predicted,chosen_head,agreement_flag,p0..pK`;
/// labels use the signed class codes (open = -1). Indices restart per domain.
fn write_predictions(path: &Path, known_classes: usize, evals: &[DomainEval]) -> Result<()> {
    let mut out = String::from("sample_idx,domain,truth,predicted,chosen_head,agreement_flag");
    for c in 0..=known_classes {
        write!(out, ",p{c}").unwrap();
    }
    out.push('\n');
    for eval in evals {
        for (i, (truth, d)) in eval.truth.iter().zip(&eval.decisions).enumerate() {
            write!(
                out,
                "{i},{},{},{},{},{}",
                eval.domain_id,
                truth.to_code(),
                d.label.to_code(),
                d.chosen_head,
                d.agreement as u8
            )
            .unwrap();
            for p in &d.probs {
                write!(out, ",{p}").unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `domain,truth,e0..` rows of extractor outputs over every holdout, for
/// external projection tools.
fn write_embeddings(path: &Path, osda: &MeosdaState, vault: &[DomainDataset]) -> Result<()> {
    let width = osda.extractor.spec.out_dim();
    let mut out = String::from("domain,truth");
    for c in 0..width {
        write!(out, ",e{c}").unwrap();
    }
    out.push('\n');
    for holdout in vault {
        let emb = osda.extractor.forward_eval(&holdout.features())?;
        for (r, truth) in holdout.truth_labels().iter().enumerate() {
            write!(out, "{},{}", holdout.domain_id(), truth.to_code()).unwrap();
            for v in emb.row(r) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `gan.tensors` + `osda.tensors` (once an adapter exists) + `manifest.txt`
/// naming them.
fn write_checkpoint(dir: &Path, state: &TimelineState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "timestamp={}\nknown_classes={}\n",
        state.timestamp, state.known_classes
    );
    if let Some(gan) = &state.gan {
        gan.save(&dir.join("gan.tensors"))?;
        writeln!(manifest, "gan=gan.tensors").unwrap();
        writeln!(manifest, "gan_domains={}", gan.n_domains).unwrap();
    }
    if let Some(osda) = &state.osda {
        osda.save(&dir.join("osda.tensors"))?;
        writeln!(manifest, "osda=osda.tensors").unwrap();
        writeln!(manifest, "osda_heads={}", osda.heads.len()).unwrap();
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}
