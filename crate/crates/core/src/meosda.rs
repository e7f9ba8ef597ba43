//! Multi-head open-set adaptation.
//!
//! One shared feature extractor feeds an ordered list of K+1-way classifier
//! heads, one per source domain. Heads learn cross-entropy on their own
//! labeled source batches plus an open-boundary loss on the shared unlabeled
//! target batch; the extractor receives the summed cross-entropy gradients
//! but the boundary gradients reversed, so each step moves heads toward the
//! known/unknown decision boundary while the extractor moves target features
//! away from it. After adaptation, high-confidence predictions become pseudo
//! labels for downstream training.

use rand_chacha::ChaCha8Rng;

use crate::datahub::{ClassLabel, DomainDataset, FeatureSample};
use crate::diffcore::checkpoint::{read_tensor_file, tensor_map, write_tensor_file};
use crate::diffcore::{
    grad_reverse, ln_clamped, nll_sum_with_grad, softmax_rows, Activation, AdamConfig, AdamState,
    Matrix, Mlp, MlpSpec, ParamGrads, ParamSet, LOG_FLOOR,
};
use crate::ensemble;
use crate::error::{Error, Result};

/// Architecture and training knobs. `extractor_hidden` lists every extractor
/// layer width (batch-normalized, leaky-ReLU activated, output included);
/// `head_hidden` lists head layers between the extractor output and the K+1
/// logits (hidden layers normalized and activated, logits linear).
#[derive(Clone, Debug, PartialEq)]
pub struct MeosdaConfig {
    pub extractor_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Open-boundary target probability; the boundary loss is minimal when
    /// the open-class probability equals this value.
    pub t_boundary: f64,
    /// Multiplier on the boundary loss; 0 disables the adversarial path.
    pub adv_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MeosdaConfig {
    fn default() -> Self {
        MeosdaConfig {
            extractor_hidden: vec![1024, 512],
            head_hidden: vec![256],
            t_boundary: 0.5,
            adv_weight: 1.0,
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

impl MeosdaConfig {
    /// Small shape for fast experiments on low-dimensional features.
    pub fn desk_scale() -> Self {
        MeosdaConfig {
            extractor_hidden: vec![64, 32],
            head_hidden: vec![32],
            epochs: 30,
            ..MeosdaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractor_hidden.is_empty() || self.head_hidden.is_empty() {
            return Err(Error::Config("extractor and heads need at least one layer".into()));
        }
        if !(self.t_boundary > 0.0 && self.t_boundary < 1.0) {
            return Err(Error::Config(format!("boundary target {} not in (0, 1)", self.t_boundary)));
        }
        if !self.adv_weight.is_finite() || self.adv_weight < 0.0 {
            return Err(Error::Config(format!("adversarial weight {} must be >= 0", self.adv_weight)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        self.adam.validate()
    }
}

/// Per-head loss values of one step (cross-entropy on that head's source
/// batch; boundary loss on the shared target batch, 0 when skipped).
#[derive(Clone, Debug, PartialEq)]
pub struct OsdaLossReport {
    pub ce_per_head: Vec<f64>,
    pub adv_per_head: Vec<f64>,
}

impl OsdaLossReport {
    pub fn total_ce(&self) -> f64 {
        self.ce_per_head.iter().sum()
    }

    pub fn total_adv(&self) -> f64 {
        self.adv_per_head.iter().sum()
    }

    pub fn mean_of(reports: &[OsdaLossReport]) -> OsdaLossReport {
        let heads = reports.first().map(|r| r.ce_per_head.len()).unwrap_or(0);
        let n = reports.len().max(1) as f64;
        let mut ce = vec![0.0; heads];
        let mut adv = vec![0.0; heads];
        for r in reports {
            for m in 0..heads {
                ce[m] += r.ce_per_head[m] / n;
                adv[m] += r.adv_per_head[m] / n;
            }
        }
        OsdaLossReport { ce_per_head: ce, adv_per_head: adv }
    }
}

/// Gradients of one step, before any update is applied.
pub struct OsdaStepGrads {
    pub extractor: ParamGrads,
    pub heads: Vec<ParamGrads>,
}

/// Which distribution pseudo-labels a target sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Head(usize),
    /// Multi-head routing; requires at least two heads to be meaningful but
    /// degrades to the single head when only one exists.
    Ensemble,
}

/// Outcome of thresholded self-labeling over one target dataset.
#[derive(Clone, Debug)]
pub struct PseudoLabeledSet {
    /// (sample rebuilt with the assigned label as its truth, assigned label,
    /// confidence). Confidence is the accepted distribution's maximum.
    pub accepted: Vec<(FeatureSample, ClassLabel, f64)>,
    pub rejected_count: usize,
}

/// Boundary loss summed over rows plus its logit gradient: per row, with p =
/// P(last class), the loss is −t·ln p − (1−t)·ln(1−p). Logs are floor-clamped;
/// inside the clamp region the gradient is exactly zero, matching the flat
/// clamped loss.
pub fn open_boundary_sum_with_grad(logits: &Matrix, t: f64) -> Result<(f64, Matrix)> {
    if logits.cols() < 2 {
        return Err(Error::contract("open_boundary_sum_with_grad", "need at least two classes"));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::contract("open_boundary_sum_with_grad", format!("t={t} not in (0, 1)")));
    }
    let probs = softmax_rows(logits);
    let k = logits.cols() - 1;
    let mut sum = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let p = probs.get(r, k);
        sum += -t * ln_clamped(p) - (1.0 - t) * ln_clamped(1.0 - p);
        if p > LOG_FLOOR && 1.0 - p > LOG_FLOOR {
            let c = -t / p + (1.0 - t) / (1.0 - p);
            for j in 0..logits.cols() {
                let kron = if j == k { 1.0 } else { 0.0 };
                grad.set(r, j, c * p * (kron - probs.get(r, j)));
            }
        }
    }
    Ok((sum, grad))
}

#[derive(Clone, Debug)]
pub struct MeosdaState {
    pub known_classes: usize,
    pub t_boundary: f64,
    pub adv_weight: f64,
    pub extractor: Mlp,
    /// One K+1-way head per source domain, in source order.
    pub heads: Vec<Mlp>,
    /// Source domain id behind each head.
    pub source_domains: Vec<u16>,
    pub opt_extractor: AdamState,
    pub opt_heads: Vec<AdamState>,
}

impl MeosdaState {
    /// Fresh state with one head per source domain. Draw order: extractor,
    /// then heads in source order.
    pub fn init(
        feat_dim: usize,
        known_classes: usize,
        source_domains: &[u16],
        cfg: &MeosdaConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MeosdaState> {
        cfg.validate()?;
        if feat_dim == 0 || known_classes == 0 {
            return Err(Error::Config("feature width and class count must be at least 1".into()));
        }
        if source_domains.is_empty() {
            return Err(Error::contract("MeosdaState::init", "need at least one source domain"));
        }
        let mut ex_dims = vec![feat_dim];
        ex_dims.extend_from_slice(&cfg.extractor_hidden);
        let ex_spec = MlpSpec::new(ex_dims, Activation::LeakyRelu(0.01))
            .with_batch_norm_all()
            .with_activated_output();

        let ex_out = *cfg.extractor_hidden.last().unwrap();
        let mut head_dims = vec![ex_out];
        head_dims.extend_from_slice(&cfg.head_hidden);
        head_dims.push(known_classes + 1);
        let head_spec =
            MlpSpec::new(head_dims, Activation::LeakyRelu(0.01)).with_batch_norm_hidden();

        let extractor = Mlp::init(ex_spec, rng)?;
        let heads: Vec<Mlp> = source_domains
            .iter()
            .map(|_| Mlp::init(head_spec.clone(), rng))
            .collect::<Result<_>>()?;
        let opt_extractor = AdamState::new(&extractor.params, cfg.adam);
        let opt_heads = heads.iter().map(|h| AdamState::new(&h.params, cfg.adam)).collect();
        Ok(MeosdaState {
            known_classes,
            t_boundary: cfg.t_boundary,
            adv_weight: cfg.adv_weight,
            extractor,
            heads,
            source_domains: source_domains.to_vec(),
            opt_extractor,
            opt_heads,
        })
    }

    pub fn class_count(&self) -> usize {
        self.known_classes + 1
    }

    pub fn feat_dim(&self) -> usize {
        self.extractor.spec.in_dim()
    }

    /// Eval-mode class distribution of one head, one row per sample.
    pub fn predict_head(&self, head_index: usize, batch: &Matrix) -> Result<Matrix> {
        let head = self
            .heads
            .get(head_index)
            .ok_or_else(|| Error::contract("predict_head", format!("head {head_index} of {}", self.heads.len())))?;
        let f = self.extractor.forward_eval(batch)?;
        Ok(softmax_rows(&head.forward_eval(&f)?))
    }

    /// Mean cross-entropy of one head on a labeled batch, eval mode.
    pub fn source_ce_loss(&self, head_index: usize, batch: &Matrix, labels: &[ClassLabel]) -> Result<f64> {
        if batch.rows() == 0 || batch.rows() != labels.len() {
            return Err(Error::contract("source_ce_loss", "empty batch or label count mismatch"));
        }
        let slots: Vec<usize> =
            labels.iter().map(|l| l.slot(self.known_classes)).collect::<Result<_>>()?;
        let probs = self.predict_head(head_index, batch)?;
        let mut sum = 0.0;
        for (r, &s) in slots.iter().enumerate() {
            sum += -ln_clamped(probs.get(r, s));
        }
        Ok(sum / batch.rows() as f64)
    }

    /// Mean boundary loss of one head on an unlabeled batch, eval mode.
    /// Empty batches cost zero.
    pub fn open_adv_loss(&self, head_index: usize, batch: &Matrix) -> Result<f64> {
        if batch.rows() == 0 {
            return Ok(0.0);
        }
        let head = self
            .heads
            .get(head_index)
            .ok_or_else(|| Error::contract("open_adv_loss", format!("head {head_index} of {}", self.heads.len())))?;
        let f = self.extractor.forward_eval(batch)?;
        let logits = head.forward_eval(&f)?;
        let (sum, _) = open_boundary_sum_with_grad(&logits, self.t_boundary)?;
        Ok(sum / batch.rows() as f64)
    }

    /// Train-mode losses and gradients of one step, without applying updates.
    ///
    /// Heads descend their own CE plus the weighted boundary loss; the
    /// extractor descends the summed CE minus the weighted boundary loss, the
    /// sign realized by reversing the boundary-path gradient at the extractor
    /// output. The boundary path is skipped entirely when the target batch is
    /// empty or the weight is zero (its gradient contribution is exactly
    /// zero), leaving a plain multi-head supervised step.
    pub fn train_step_grads(
        &mut self,
        source_batches: &[(Matrix, Vec<usize>)],
        target: &Matrix,
    ) -> Result<(OsdaLossReport, OsdaStepGrads)> {
        if source_batches.len() != self.heads.len() {
            return Err(Error::contract(
                "train_step_grads",
                format!("{} source batches for {} heads", source_batches.len(), self.heads.len()),
            ));
        }
        let mut ce_per_head = Vec::with_capacity(self.heads.len());
        let mut adv_per_head = vec![0.0; self.heads.len()];
        let mut ex_grads = ParamGrads::zeros_like(&self.extractor.params);
        let mut head_grads = Vec::with_capacity(self.heads.len());

        for (m, (x, slots)) in source_batches.iter().enumerate() {
            let n = x.rows();
            if n == 0 || slots.len() != n {
                return Err(Error::contract(
                    "train_step_grads",
                    format!("source batch {m} empty or label count mismatch"),
                ));
            }
            for &s in slots {
                if s > self.known_classes {
                    return Err(Error::contract(
                        "train_step_grads",
                        format!("class slot {s} outside 0..={}", self.known_classes),
                    ));
                }
            }
            let (f, e_tape) = self.extractor.forward_train(x)?;
            let (logits, h_tape) = self.heads[m].forward_train(&f)?;
            let (ce_sum, d_logits) = nll_sum_with_grad(&logits, slots)?;
            ce_per_head.push(ce_sum / n as f64);
            let (hg, df) = self.heads[m].backward(&h_tape, &d_logits.scale(1.0 / n as f64))?;
            let (eg, _) = self.extractor.backward(&e_tape, &df)?;
            ex_grads.add_assign(&eg);
            head_grads.push(hg);
        }

        if target.rows() > 0 && self.adv_weight > 0.0 {
            if target.cols() != self.feat_dim() {
                return Err(Error::contract("train_step_grads", "target feature width mismatch"));
            }
            let nt = target.rows() as f64;
            let (ft, t_tape) = self.extractor.forward_train(target)?;
            let mut d_ft_sum = Matrix::zeros(ft.rows(), ft.cols());
            for m in 0..self.heads.len() {
                let (logits, h_tape) = self.heads[m].forward_train(&ft)?;
                let (adv_sum, d_logits) = open_boundary_sum_with_grad(&logits, self.t_boundary)?;
                adv_per_head[m] = adv_sum / nt;
                let (hg, d_ft) =
                    self.heads[m].backward(&h_tape, &d_logits.scale(self.adv_weight / nt))?;
                head_grads[m].add_assign(&hg);
                d_ft_sum = d_ft_sum.add(&d_ft);
            }
            let (eg, _) = self.extractor.backward(&t_tape, &grad_reverse(&d_ft_sum, 1.0))?;
            ex_grads.add_assign(&eg);
        }

        let report = OsdaLossReport { ce_per_head, adv_per_head };
        for (name, v) in [("ce", report.total_ce()), ("adv", report.total_adv())] {
            if !v.is_finite() {
                return Err(Error::numeric("train_step_grads", format!("{name} loss is {v}")));
            }
        }
        ex_grads.check_finite("train_step_grads")?;
        Ok((report, OsdaStepGrads { extractor: ex_grads, heads: head_grads }))
    }

    /// One optimization step: gradients as in `train_step_grads`, then one
    /// Adam step for the extractor and one per head.
    pub fn train_step(
        &mut self,
        source_batches: &[(Matrix, Vec<usize>)],
        target: &Matrix,
    ) -> Result<OsdaLossReport> {
        let (report, grads) = self.train_step_grads(source_batches, target)?;
        self.opt_extractor.step(&mut self.extractor.params, &grads.extractor)?;
        for (head, (opt, g)) in
            self.heads.iter_mut().zip(self.opt_heads.iter_mut().zip(&grads.heads))
        {
            opt.step(&mut head.params, g)?;
        }
        Ok(report)
    }

    /// Self-labels a target dataset: a sample is accepted when the predicting
    /// distribution's maximum reaches `th`, and is assigned that argmax class
    /// (last slot means Open).
    pub fn pseudo_label(
        &self,
        target: &DomainDataset,
        th: f64,
        predictor: Predictor,
    ) -> Result<PseudoLabeledSet> {
        if !(th > 0.0 && th < 1.0) {
            return Err(Error::Config(format!("pseudo-label threshold {th} not in (0, 1)")));
        }
        let features = target.features();
        let probs: Vec<Vec<f64>> = match predictor {
            Predictor::Head(i) => {
                let p = self.predict_head(i, &features)?;
                (0..p.rows()).map(|r| p.row(r).to_vec()).collect()
            }
            Predictor::Ensemble => ensemble::batch_predict(self, &features)?
                .into_iter()
                .map(|d| d.probs)
                .collect(),
        };
        let decisions = pseudo_label_rows(&probs, th)?;
        let mut accepted = Vec::new();
        let mut rejected = 0usize;
        for (row, decision) in decisions.iter().enumerate() {
            match decision {
                Some((slot, conf)) => {
                    let label = if *slot == self.known_classes {
                        ClassLabel::Open
                    } else {
                        ClassLabel::Known(*slot)
                    };
                    let sample = FeatureSample::new(
                        target.samples()[row].vector().to_vec(),
                        target.domain_id(),
                        label,
                    )?;
                    accepted.push((sample, label, *conf));
                }
                None => rejected += 1,
            }
        }
        Ok(PseudoLabeledSet { accepted, rejected_count: rejected })
    }
}

/// Threshold rule over bare probability rows: `Some((argmax slot, max))` when
/// the maximum reaches `th`, `None` otherwise. Argmax ties resolve to the
/// lowest slot.
pub fn pseudo_label_rows(probs: &[Vec<f64>], th: f64) -> Result<Vec<Option<(usize, f64)>>> {
    if !(th > 0.0 && th < 1.0) {
        return Err(Error::Config(format!("pseudo-label threshold {th} not in (0, 1)")));
    }
    let mut out = Vec::with_capacity(probs.len());
    for row in probs {
        if row.is_empty() {
            return Err(Error::contract("pseudo_label_rows", "empty probability row"));
        }
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        out.push(if row[best] >= th { Some((best, row[best])) } else { None });
    }
    Ok(out)
}

/// Adapts a fresh state: one head per labeled source, trained against the
/// unlabeled target for the configured epochs. Per epoch, the shuffled target
/// is walked in batches; each head draws equally sized source batches by
/// cycling its own shuffled source. Returns the state and one mean loss
/// report per epoch.
pub fn fit(
    sources: &[DomainDataset],
    target: &DomainDataset,
    known_classes: usize,
    cfg: &MeosdaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MeosdaState, Vec<OsdaLossReport>)> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::contract("fit", "need at least one source"));
    }
    if target.is_empty() {
        return Err(Error::contract("fit", "empty target"));
    }
    if target.labels_visible() {
        return Err(Error::contract("fit", "target labels must be hidden during adaptation"));
    }
    let feat_dim = target.feat_dim();
    let mut source_feats = Vec::with_capacity(sources.len());
    let mut source_slots: Vec<Vec<usize>> = Vec::with_capacity(sources.len());
    let mut domains = Vec::with_capacity(sources.len());
    for ds in sources {
        if ds.is_empty() {
            return Err(Error::contract("fit", format!("source domain {} is empty", ds.domain_id())));
        }
        if !ds.labels_visible() {
            return Err(Error::contract(
                "fit",
                format!("source domain {} has hidden labels", ds.domain_id()),
            ));
        }
        if ds.feat_dim() != feat_dim {
            return Err(Error::contract(
                "fit",
                format!("source domain {} width {} vs target {}", ds.domain_id(), ds.feat_dim(), feat_dim),
            ));
        }
        source_feats.push(ds.features());
        source_slots.push(
            ds.training_labels().iter().map(|l| l.slot(known_classes)).collect::<Result<_>>()?,
        );
        domains.push(ds.domain_id());
    }

    let mut state = MeosdaState::init(feat_dim, known_classes, &domains, cfg, rng)?;
    let target_feats = target.features();
    let nt = target_feats.rows();
    let mut target_order: Vec<usize> = (0..nt).collect();
    let mut source_orders: Vec<Vec<usize>> =
        source_feats.iter().map(|f| (0..f.rows()).collect()).collect();

    use rand::seq::SliceRandom;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        target_order.shuffle(rng);
        for order in &mut source_orders {
            order.shuffle(rng);
        }
        let mut reports = Vec::new();
        for (step, t_chunk) in target_order.chunks(cfg.batch_size).enumerate() {
            let batches: Vec<(Matrix, Vec<usize>)> = source_orders
                .iter()
                .enumerate()
                .map(|(m, order)| {
                    // Fixed-size source batches cycle their shuffled order so
                    // small replay sets keep pace with the target.
                    let idx: Vec<usize> = (0..cfg.batch_size)
                        .map(|i| order[(step * cfg.batch_size + i) % order.len()])
                        .collect();
                    let slots = idx.iter().map(|&i| source_slots[m][i]).collect();
                    (source_feats[m].take_rows(&idx), slots)
                })
                .collect();
            let t_batch = target_feats.take_rows(t_chunk);
            reports.push(state.train_step(&batches, &t_batch)?);
        }
        history.push(OsdaLossReport::mean_of(&reports));
    }
    Ok((state, history))
}

// ---- checkpointing ----

impl MeosdaState {
    pub fn tensor_entries(&self) -> Vec<(String, Matrix)> {
        let mut meta = vec![
            self.known_classes as f64,
            self.t_boundary,
            self.adv_weight,
            self.heads.len() as f64,
        ];
        meta.extend(self.source_domains.iter().map(|&d| d as f64));
        let mut out =
            vec![("osda.meta".to_string(), Matrix::new(1, meta.len(), meta).unwrap())];
        out.extend(self.extractor.spec.tensor_entries("extractor."));
        out.extend(
            self.extractor.params.tensor_entries("extractor.").into_iter().map(|(n, m)| (n, m.clone())),
        );
        out.extend(self.opt_extractor.tensor_entries("opt.extractor."));
        for (i, (head, opt)) in self.heads.iter().zip(&self.opt_heads).enumerate() {
            let prefix = format!("head{i}.");
            out.extend(head.spec.tensor_entries(&prefix));
            out.extend(head.params.tensor_entries(&prefix).into_iter().map(|(n, m)| (n, m.clone())));
            out.extend(opt.tensor_entries(&format!("opt.{prefix}")));
        }
        out
    }

    pub fn from_tensor_map(map: &std::collections::BTreeMap<String, Matrix>) -> Result<MeosdaState> {
        let meta = map.get("osda.meta").ok_or_else(|| Error::Format("missing tensor osda.meta".into()))?;
        let d = meta.data();
        if meta.rows() != 1 || d.len() < 4 {
            return Err(Error::Format("osda.meta must be 1x(4 + head count)".into()));
        }
        let known_classes = d[0] as usize;
        let head_count = d[3] as usize;
        if d.len() != 4 + head_count {
            return Err(Error::Format(format!(
                "osda.meta lists {} domains for {} heads",
                d.len() - 4,
                head_count
            )));
        }
        let source_domains: Vec<u16> = d[4..].iter().map(|&v| v as u16).collect();
        let net = |prefix: &str| -> Result<Mlp> {
            let spec = MlpSpec::from_tensor_map(map, prefix)?;
            let params = ParamSet::from_tensor_map(&spec, map, prefix)?;
            Mlp::from_parts(spec, params)
        };
        let extractor = net("extractor.")?;
        let opt_extractor = AdamState::from_tensor_map(&extractor.params, map, "opt.extractor.")?;
        let mut heads = Vec::with_capacity(head_count);
        let mut opt_heads = Vec::with_capacity(head_count);
        for i in 0..head_count {
            let head = net(&format!("head{i}."))?;
            opt_heads.push(AdamState::from_tensor_map(&head.params, map, &format!("opt.head{i}."))?);
            heads.push(head);
        }
        Ok(MeosdaState {
            known_classes,
            t_boundary: d[1],
            adv_weight: d[2],
            extractor,
            heads,
            source_domains,
            opt_extractor,
            opt_heads,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let owned = self.tensor_entries();
        let refs: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
        write_tensor_file(path, &refs)
    }

    pub fn load(path: &std::path::Path) -> Result<MeosdaState> {
        MeosdaState::from_tensor_map(&tensor_map(read_tensor_file(path)?))
    }
}
