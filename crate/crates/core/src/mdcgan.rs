//! Conditional feature GAN used for domain replay.
//!
//! A generator maps [noise, class one-hot, domain bit code] to a feature
//! vector. A shared discriminator trunk reads [features, class one-hot,
//! domain bit code] and feeds three linear heads: realness (2 logits), class,
//! and domain. One `train_step` runs two phases: the trunk and heads descend
//! the summed NLL of all three heads on a real batch plus a fresh fake batch;
//! the generator then descends class NLL + domain NLL − realness NLL + a
//! paired distance penalty, with the realness sign realized by gradient
//! reversal at the trunk input so a single descent step plays the min-max
//! game. Replay later draws samples per (class, domain) condition from the
//! trained generator; past-domain data itself is never kept.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datahub::{ClassLabel, DomainDataset};
use crate::diffcore::checkpoint::{read_tensor_file, tensor_map, write_tensor_file};
use crate::diffcore::{
    grad_reverse, nll_sum_with_grad, Activation, AdamConfig, AdamState, Matrix, Mlp, MlpSpec,
    ParamGrads, ParamSet,
};
use crate::error::{Error, Result};

/// Widths of the generator's conditioning interface.
///
/// `y_dim` is the one-hot width for class conditioning: K known classes plus
/// one trailing open slot. `d_dim` is the bit width of the binary domain code
/// (domain ids are 1-based; the code is `domain_id - 1`, least-significant
/// bit first), so at most `2^d_dim` domains are encodable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GanConditioning {
    pub z_dim: usize,
    pub y_dim: usize,
    pub d_dim: usize,
    pub feat_dim: usize,
}

impl GanConditioning {
    pub fn new(z_dim: usize, y_dim: usize, d_dim: usize, feat_dim: usize) -> Result<GanConditioning> {
        if z_dim == 0 || y_dim < 2 || d_dim == 0 || feat_dim == 0 {
            return Err(Error::Config(format!(
                "conditioning widths z={z_dim} y={y_dim} d={d_dim} feat={feat_dim} invalid: \
                 need z,d,feat >= 1 and y >= 2"
            )));
        }
        if d_dim > 16 {
            return Err(Error::Config(format!("domain code width {d_dim} exceeds 16 bits")));
        }
        Ok(GanConditioning { z_dim, y_dim, d_dim, feat_dim })
    }

    /// The published full-scale shape: 2000-d noise, 3-bit domain code,
    /// 2048-d features.
    pub fn full_scale(y_dim: usize) -> Result<GanConditioning> {
        GanConditioning::new(2000, y_dim, 3, 2048)
    }

    pub fn known_classes(&self) -> usize {
        self.y_dim - 1
    }

    pub fn gen_in_dim(&self) -> usize {
        self.z_dim + self.y_dim + self.d_dim
    }

    pub fn disc_in_dim(&self) -> usize {
        self.feat_dim + self.y_dim + self.d_dim
    }

    pub fn max_domains(&self) -> usize {
        1usize << self.d_dim
    }

    /// One-hot class part followed by the domain bit code.
    pub fn encode_condition(&self, label: ClassLabel, domain_id: u16) -> Result<Vec<f64>> {
        let slot = label.slot(self.known_classes()).map_err(|_| {
            Error::contract(
                "encode_condition",
                format!("label {label:?} not encodable with {} known classes + open", self.known_classes()),
            )
        })?;
        if domain_id == 0 || (domain_id as usize - 1) >= self.max_domains() {
            return Err(Error::contract(
                "encode_condition",
                format!("domain {} not encodable in {} bits", domain_id, self.d_dim),
            ));
        }
        let mut v = vec![0.0; self.y_dim + self.d_dim];
        v[slot] = 1.0;
        let code = domain_id as usize - 1;
        for b in 0..self.d_dim {
            v[self.y_dim + b] = ((code >> b) & 1) as f64;
        }
        Ok(v)
    }

    fn condition_rows(&self, labels: &[ClassLabel], domains: &[u16]) -> Result<Matrix> {
        if labels.len() != domains.len() {
            return Err(Error::dim(
                "condition_rows",
                format!("{} labels vs {} domains", labels.len(), domains.len()),
            ));
        }
        let mut m = Matrix::zeros(labels.len(), self.y_dim + self.d_dim);
        for (i, (&l, &d)) in labels.iter().zip(domains).enumerate() {
            m.row_mut(i).copy_from_slice(&self.encode_condition(l, d)?);
        }
        Ok(m)
    }
}

/// Architecture and training knobs for one GAN instance. Hidden widths are
/// free choices; the layer counts (three linear layers in the generator and
/// in the trunk, one per head) follow the published setup.
#[derive(Clone, Debug, PartialEq)]
pub struct MdcganConfig {
    pub z_dim: usize,
    pub d_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub batch_norm: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MdcganConfig {
    fn default() -> Self {
        MdcganConfig {
            z_dim: 2000,
            d_dim: 3,
            gen_hidden: vec![1024, 1024],
            trunk_hidden: vec![1024, 512, 256],
            batch_norm: false,
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

impl MdcganConfig {
    /// Small shape for fast experiments on low-dimensional features.
    pub fn desk_scale() -> Self {
        MdcganConfig {
            z_dim: 64,
            gen_hidden: vec![64, 64],
            trunk_hidden: vec![64, 32],
            ..MdcganConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_hidden.is_empty() || self.trunk_hidden.is_empty() {
            return Err(Error::Config("generator and trunk need at least one hidden layer".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        self.adam.validate()
    }

    /// Highest domain id encodable under `d_dim` condition bits.
    pub fn max_domains(&self) -> usize {
        1usize << self.d_dim
    }
}

/// Post-update loss values of one training step, computed in eval mode on a
/// fresh fake batch. `realness_nll` is ln 2 when the realness head is at
/// chance; `pair_penalty` is the mean squared distance between each fake and
/// the real sample sharing its condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLossReport {
    pub realness_nll: f64,
    pub class_nll: f64,
    pub domain_nll: f64,
    pub pair_penalty: f64,
}

impl GanLossReport {
    pub fn total(&self) -> f64 {
        self.realness_nll + self.class_nll + self.domain_nll + self.pair_penalty
    }

    pub fn mean_of(reports: &[GanLossReport]) -> GanLossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = GanLossReport { realness_nll: 0.0, class_nll: 0.0, domain_nll: 0.0, pair_penalty: 0.0 };
        for r in reports {
            acc.realness_nll += r.realness_nll / n;
            acc.class_nll += r.class_nll / n;
            acc.domain_nll += r.domain_nll / n;
            acc.pair_penalty += r.pair_penalty / n;
        }
        acc
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        for (name, v) in [
            ("realness_nll", self.realness_nll),
            ("class_nll", self.class_nll),
            ("domain_nll", self.domain_nll),
            ("pair_penalty", self.pair_penalty),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric(op, format!("{name} is {v}")));
            }
        }
        Ok(())
    }
}

/// Trunk-and-heads gradients of one discriminator phase, before any update.
pub struct DiscStepGrads {
    pub loss: f64,
    pub trunk: ParamGrads,
    pub realness: ParamGrads,
    pub class: ParamGrads,
    pub domain: ParamGrads,
}

// Realness head logit indices: class 1 = real, class 0 = fake.
const REAL_TARGET: usize = 1;
const FAKE_TARGET: usize = 0;

#[derive(Clone, Debug)]
pub struct MdcganState {
    pub cond: GanConditioning,
    /// Width of the domain head; equals the number of domains seen so far.
    pub n_domains: usize,
    /// Domains whose training pool held open-labeled rows. Sampling the open
    /// condition of any other domain would draw from an unfit conditional.
    pub open_domains: Vec<u16>,
    pub generator: Mlp,
    pub trunk: Mlp,
    pub head_realness: Mlp,
    pub head_class: Mlp,
    pub head_domain: Mlp,
    pub opt_gen: AdamState,
    pub opt_trunk: AdamState,
    pub opt_realness: AdamState,
    pub opt_class: AdamState,
    pub opt_domain: AdamState,
}

fn noise(rng: &mut ChaCha8Rng, n: usize, z_dim: usize) -> Matrix {
    let mut z = Matrix::zeros(n, z_dim);
    for r in 0..n {
        for v in z.row_mut(r) {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
    }
    z
}

impl MdcganState {
    /// Fresh state with Xavier-initialized nets. Draw order: generator,
    /// trunk, realness head, class head, domain head.
    pub fn init(
        cond: GanConditioning,
        n_domains: usize,
        cfg: &MdcganConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MdcganState> {
        cfg.validate()?;
        if n_domains == 0 || n_domains > cond.max_domains() {
            return Err(Error::Config(format!(
                "{} domains do not fit a {}-bit domain code",
                n_domains, cond.d_dim
            )));
        }
        let act = Activation::LeakyRelu(0.01);

        let mut gen_dims = vec![cond.gen_in_dim()];
        gen_dims.extend_from_slice(&cfg.gen_hidden);
        gen_dims.push(cond.feat_dim);
        let mut gen_spec = MlpSpec::new(gen_dims, act);
        if cfg.batch_norm {
            gen_spec = gen_spec.with_batch_norm_hidden();
        }

        let mut trunk_dims = vec![cond.disc_in_dim()];
        trunk_dims.extend_from_slice(&cfg.trunk_hidden);
        let mut trunk_spec = MlpSpec::new(trunk_dims, act).with_activated_output();
        if cfg.batch_norm {
            trunk_spec = trunk_spec.with_batch_norm_all();
        }

        let trunk_out = *cfg.trunk_hidden.last().unwrap();
        let head = |width: usize| MlpSpec::new(vec![trunk_out, width], act);

        let generator = Mlp::init(gen_spec, rng)?;
        let trunk = Mlp::init(trunk_spec, rng)?;
        let head_realness = Mlp::init(head(2), rng)?;
        let head_class = Mlp::init(head(cond.y_dim), rng)?;
        let head_domain = Mlp::init(head(n_domains), rng)?;

        let adam = |p: &ParamSet| AdamState::new(p, cfg.adam);
        Ok(MdcganState {
            opt_gen: adam(&generator.params),
            opt_trunk: adam(&trunk.params),
            opt_realness: adam(&head_realness.params),
            opt_class: adam(&head_class.params),
            opt_domain: adam(&head_domain.params),
            cond,
            n_domains,
            open_domains: Vec::new(),
            generator,
            trunk,
            head_realness,
            head_class,
            head_domain,
        })
    }

    /// True when this generator's training pool held open-labeled rows of
    /// the domain, i.e. its open conditional was actually fit to data.
    pub fn open_trained(&self, domain_id: u16) -> bool {
        self.open_domains.contains(&domain_id)
    }

    fn domain_target(&self, domain_id: u16) -> Result<usize> {
        let t = domain_id as usize;
        if t == 0 || t > self.n_domains {
            return Err(Error::contract(
                "domain_target",
                format!("domain {} outside the {} domains this state was built for", domain_id, self.n_domains),
            ));
        }
        Ok(t - 1)
    }

    fn class_slots(&self, labels: &[ClassLabel]) -> Result<Vec<usize>> {
        labels.iter().map(|l| l.slot(self.cond.known_classes())).collect()
    }

    fn domain_targets(&self, domains: &[u16]) -> Result<Vec<usize>> {
        domains.iter().map(|&d| self.domain_target(d)).collect()
    }

    /// Eval-mode generation for a mixed batch of conditions; row i follows
    /// (labels[i], domains[i]).
    fn synthesize(&self, labels: &[ClassLabel], domains: &[u16], rng: &mut ChaCha8Rng) -> Result<Matrix> {
        self.domain_targets(domains)?;
        let cond = self.cond.condition_rows(labels, domains)?;
        let z = noise(rng, labels.len(), self.cond.z_dim);
        let out = self.generator.forward_eval(&Matrix::hcat(&[&z, &cond])?)?;
        out.check_finite("synthesize")?;
        Ok(out)
    }

    /// Draws n samples of one (class, domain) condition. The condition is the
    /// replay label of every generated row.
    pub fn generate(
        &self,
        label: ClassLabel,
        domain_id: u16,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Matrix> {
        if n == 0 {
            self.cond.encode_condition(label, domain_id)?;
            return Ok(Matrix::zeros(0, self.cond.feat_dim));
        }
        self.synthesize(&vec![label; n], &vec![domain_id; n], rng)
    }

    /// Eval-mode loss values on a condition-matched (real, fake) pair of
    /// batches: fake row i was generated under real row i's condition. NLL
    /// means run over the combined 2n rows; the pair penalty averages the
    /// squared distance of each (real, fake) pair.
    pub fn gan_losses(
        &self,
        real: &Matrix,
        labels: &[ClassLabel],
        domains: &[u16],
        fake: &Matrix,
    ) -> Result<GanLossReport> {
        let n = real.rows();
        if n == 0 {
            return Err(Error::contract("gan_losses", "empty batch"));
        }
        if fake.shape() != real.shape() || labels.len() != n || domains.len() != n {
            return Err(Error::dim(
                "gan_losses",
                format!(
                    "real {}x{}, fake {}x{}, {} labels, {} domains",
                    real.rows(), real.cols(), fake.rows(), fake.cols(), labels.len(), domains.len()
                ),
            ));
        }
        let slots = self.class_slots(labels)?;
        let dtargets = self.domain_targets(domains)?;
        let cond = self.cond.condition_rows(labels, domains)?;
        let disc_in = Matrix::hcat(&[&Matrix::vcat(&[real, fake])?, &Matrix::vcat(&[&cond, &cond])?])?;
        let h = self.trunk.forward_eval(&disc_in)?;

        let real_logits = self.head_realness.forward_eval(&h)?;
        let mut real_targets = vec![REAL_TARGET; n];
        real_targets.extend(std::iter::repeat(FAKE_TARGET).take(n));
        let (real_sum, _) = nll_sum_with_grad(&real_logits, &real_targets)?;

        let class_logits = self.head_class.forward_eval(&h)?;
        let mut class_targets = slots.clone();
        class_targets.extend_from_slice(&slots);
        let (class_sum, _) = nll_sum_with_grad(&class_logits, &class_targets)?;

        let domain_logits = self.head_domain.forward_eval(&h)?;
        let mut domain_targets = dtargets.clone();
        domain_targets.extend_from_slice(&dtargets);
        let (domain_sum, _) = nll_sum_with_grad(&domain_logits, &domain_targets)?;

        let mut pair = 0.0;
        for i in 0..n {
            pair += real
                .row(i)
                .iter()
                .zip(fake.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }

        let scale = 1.0 / (2.0 * n as f64);
        let report = GanLossReport {
            realness_nll: real_sum * scale,
            class_nll: class_sum * scale,
            domain_nll: domain_sum * scale,
            pair_penalty: pair / n as f64,
        };
        report.check_finite("gan_losses")?;
        Ok(report)
    }

    /// Discriminator phase: loss and gradients for trunk plus all heads on
    /// the combined (real, fake) batch, without applying updates.
    pub fn discriminator_step_grads(
        &mut self,
        real: &Matrix,
        labels: &[ClassLabel],
        domains: &[u16],
        fake: &Matrix,
    ) -> Result<DiscStepGrads> {
        let n = real.rows();
        if n == 0 || fake.shape() != real.shape() || labels.len() != n || domains.len() != n {
            return Err(Error::contract("discriminator_step_grads", "batch shape mismatch or empty"));
        }
        let slots = self.class_slots(labels)?;
        let dtargets = self.domain_targets(domains)?;
        let cond = self.cond.condition_rows(labels, domains)?;
        let disc_in = Matrix::hcat(&[&Matrix::vcat(&[real, fake])?, &Matrix::vcat(&[&cond, &cond])?])?;
        let (h, trunk_tape) = self.trunk.forward_train(&disc_in)?;
        let scale = 1.0 / (2.0 * n as f64);

        let (rl, rt) = self.head_realness.forward_train(&h)?;
        let mut real_targets = vec![REAL_TARGET; n];
        real_targets.extend(std::iter::repeat(FAKE_TARGET).take(n));
        let (real_sum, d_rl) = nll_sum_with_grad(&rl, &real_targets)?;
        let (g_real, dh_r) = self.head_realness.backward(&rt, &d_rl.scale(scale))?;

        let (cl, ct) = self.head_class.forward_train(&h)?;
        let mut class_targets = slots.clone();
        class_targets.extend_from_slice(&slots);
        let (class_sum, d_cl) = nll_sum_with_grad(&cl, &class_targets)?;
        let (g_class, dh_c) = self.head_class.backward(&ct, &d_cl.scale(scale))?;

        let (dl, dt) = self.head_domain.forward_train(&h)?;
        let mut domain_targets = dtargets.clone();
        domain_targets.extend_from_slice(&dtargets);
        let (domain_sum, d_dl) = nll_sum_with_grad(&dl, &domain_targets)?;
        let (g_domain, dh_d) = self.head_domain.backward(&dt, &d_dl.scale(scale))?;

        let dh = dh_r.add(&dh_c).add(&dh_d);
        let (g_trunk, _) = self.trunk.backward(&trunk_tape, &dh)?;

        let loss = (real_sum + class_sum + domain_sum) * scale;
        if !loss.is_finite() {
            return Err(Error::numeric("discriminator_step_grads", format!("loss is {loss}")));
        }
        Ok(DiscStepGrads { loss, trunk: g_trunk, realness: g_real, class: g_class, domain: g_domain })
    }

    /// Generator phase: loss and generator gradients for descending
    /// class NLL + domain NLL − realness NLL + pair penalty on a fake batch
    /// built from `z` under the batch conditions, without applying updates.
    /// The realness sign is realized by reversing that head's gradient at the
    /// trunk input before it reaches the generator; trunk and head gradients
    /// from this phase are discarded. The returned loss covers exactly the
    /// generator-dependent terms (fake-side NLL shares plus the penalty).
    pub fn generator_step_grads(
        &mut self,
        z: &Matrix,
        labels: &[ClassLabel],
        domains: &[u16],
        real: &Matrix,
    ) -> Result<(f64, ParamGrads)> {
        let n = z.rows();
        if n == 0
            || z.cols() != self.cond.z_dim
            || real.rows() != n
            || real.cols() != self.cond.feat_dim
            || labels.len() != n
            || domains.len() != n
        {
            return Err(Error::contract("generator_step_grads", "batch shape mismatch or empty"));
        }
        let slots = self.class_slots(labels)?;
        let dtargets = self.domain_targets(domains)?;
        let cond = self.cond.condition_rows(labels, domains)?;

        let (fake, gen_tape) = self.generator.forward_train(&Matrix::hcat(&[z, &cond])?)?;
        let disc_in = Matrix::hcat(&[&fake, &cond])?;
        let (h, trunk_tape) = self.trunk.forward_train(&disc_in)?;
        // Same normalization as the discriminator phase: the real-side terms
        // of the combined 2n-row losses are constants here, so scaling the
        // fake-side gradients by 1/(2n) reproduces the full derivative.
        let scale = 1.0 / (2.0 * n as f64);

        let (cl, ct) = self.head_class.forward_train(&h)?;
        let (class_sum, d_cl) = nll_sum_with_grad(&cl, &slots)?;
        let (_, dh_c) = self.head_class.backward(&ct, &d_cl.scale(scale))?;

        let (dl, dtape) = self.head_domain.forward_train(&h)?;
        let (domain_sum, d_dl) = nll_sum_with_grad(&dl, &dtargets)?;
        let (_, dh_d) = self.head_domain.backward(&dtape, &d_dl.scale(scale))?;

        let (rl, rtape) = self.head_realness.forward_train(&h)?;
        let (real_sum, d_rl) = nll_sum_with_grad(&rl, &vec![FAKE_TARGET; n])?;
        let (_, dh_r) = self.head_realness.backward(&rtape, &d_rl.scale(scale))?;

        let dh = dh_c.add(&dh_d).add(&grad_reverse(&dh_r, 1.0));
        let (_, d_disc_in) = self.trunk.backward(&trunk_tape, &dh)?;
        let d_fake_adv = d_disc_in.slice_cols(0, self.cond.feat_dim);

        let mut pair = 0.0;
        for i in 0..n {
            pair += real
                .row(i)
                .iter()
                .zip(fake.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let d_fake_pair = fake.sub(real).scale(2.0 / n as f64);

        let (g_gen, _) = self.generator.backward(&gen_tape, &d_fake_adv.add(&d_fake_pair))?;
        let loss = (class_sum + domain_sum - real_sum) * scale + pair / n as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("generator_step_grads", format!("loss is {loss}")));
        }
        g_gen.check_finite("generator_step_grads")?;
        Ok((loss, g_gen))
    }

    /// One adversarial round on a labeled real batch: discriminator phase on
    /// a fresh fake batch, generator phase on a second fresh fake batch, one
    /// Adam step per updated parameter group, then post-update losses on a
    /// third fresh fake batch in eval mode.
    pub fn train_step(
        &mut self,
        real: &Matrix,
        labels: &[ClassLabel],
        domains: &[u16],
        rng: &mut ChaCha8Rng,
    ) -> Result<GanLossReport> {
        if real.rows() == 0 {
            return Err(Error::contract("train_step", "empty real batch"));
        }
        real.check_finite("train_step real batch")?;

        let fake = self.synthesize(labels, domains, rng)?;
        let d = self.discriminator_step_grads(real, labels, domains, &fake)?;
        self.opt_trunk.step(&mut self.trunk.params, &d.trunk)?;
        self.opt_realness.step(&mut self.head_realness.params, &d.realness)?;
        self.opt_class.step(&mut self.head_class.params, &d.class)?;
        self.opt_domain.step(&mut self.head_domain.params, &d.domain)?;

        let z = noise(rng, real.rows(), self.cond.z_dim);
        let (_, g_gen) = self.generator_step_grads(&z, labels, domains, real)?;
        self.opt_gen.step(&mut self.generator.params, &g_gen)?;

        let fresh = self.synthesize(labels, domains, rng)?;
        self.gan_losses(real, labels, domains, &fresh)
    }

    // ---- checkpointing ----

    pub fn tensor_entries(&self) -> Vec<(String, Matrix)> {
        let mut meta_row = vec![
            self.cond.z_dim as f64,
            self.cond.y_dim as f64,
            self.cond.d_dim as f64,
            self.cond.feat_dim as f64,
            self.n_domains as f64,
        ];
        meta_row.extend(self.open_domains.iter().map(|&d| d as f64));
        let meta = Matrix::new(1, meta_row.len(), meta_row).unwrap();
        let mut out = vec![("gan.meta".to_string(), meta)];
        for (prefix, net, opt) in [
            ("gen.", &self.generator, &self.opt_gen),
            ("trunk.", &self.trunk, &self.opt_trunk),
            ("head_realness.", &self.head_realness, &self.opt_realness),
            ("head_class.", &self.head_class, &self.opt_class),
            ("head_domain.", &self.head_domain, &self.opt_domain),
        ] {
            out.extend(net.spec.tensor_entries(prefix));
            out.extend(net.params.tensor_entries(prefix).into_iter().map(|(n, m)| (n, m.clone())));
            out.extend(opt.tensor_entries(&format!("opt.{prefix}")));
        }
        out
    }

    pub fn from_tensor_map(map: &std::collections::BTreeMap<String, Matrix>) -> Result<MdcganState> {
        let meta = map.get("gan.meta").ok_or_else(|| Error::Format("missing tensor gan.meta".into()))?;
        if meta.rows() != 1 || meta.cols() < 5 {
            return Err(Error::Format("gan.meta must be a row of at least 5 values".into()));
        }
        let d = meta.data();
        let cond = GanConditioning::new(d[0] as usize, d[1] as usize, d[2] as usize, d[3] as usize)?;
        let n_domains = d[4] as usize;
        let open_domains: Vec<u16> = d[5..].iter().map(|&v| v as u16).collect();
        let net = |prefix: &str| -> Result<Mlp> {
            let spec = MlpSpec::from_tensor_map(map, prefix)?;
            let params = ParamSet::from_tensor_map(&spec, map, prefix)?;
            Mlp::from_parts(spec, params)
        };
        let generator = net("gen.")?;
        let trunk = net("trunk.")?;
        let head_realness = net("head_realness.")?;
        let head_class = net("head_class.")?;
        let head_domain = net("head_domain.")?;
        let opt = |prefix: &str, p: &ParamSet| AdamState::from_tensor_map(p, map, prefix);
        Ok(MdcganState {
            opt_gen: opt("opt.gen.", &generator.params)?,
            opt_trunk: opt("opt.trunk.", &trunk.params)?,
            opt_realness: opt("opt.head_realness.", &head_realness.params)?,
            opt_class: opt("opt.head_class.", &head_class.params)?,
            opt_domain: opt("opt.head_domain.", &head_domain.params)?,
            cond,
            n_domains,
            open_domains,
            generator,
            trunk,
            head_realness,
            head_class,
            head_domain,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let owned = self.tensor_entries();
        let refs: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
        write_tensor_file(path, &refs)
    }

    pub fn load(path: &Path) -> Result<MdcganState> {
        MdcganState::from_tensor_map(&tensor_map(read_tensor_file(path)?))
    }
}

/// Rows flattened out of a labeled pool, ready for shuffled minibatching.
struct FlatPool {
    features: Matrix,
    labels: Vec<ClassLabel>,
    domains: Vec<u16>,
}

fn flatten_pool(pool: &[DomainDataset], known_classes: usize) -> Result<FlatPool> {
    let total: usize = pool.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(Error::contract("train_replay_gan", "empty training pool"));
    }
    let feat_dim = pool.iter().find(|d| !d.is_empty()).unwrap().feat_dim();
    let mut features = Matrix::zeros(total, feat_dim);
    let mut labels = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    let mut at = 0;
    for ds in pool {
        if ds.is_empty() {
            continue;
        }
        if ds.feat_dim() != feat_dim {
            return Err(Error::contract(
                "train_replay_gan",
                format!("feature width {} vs {} across the pool", ds.feat_dim(), feat_dim),
            ));
        }
        if !ds.labels_visible() {
            return Err(Error::contract(
                "train_replay_gan",
                format!("domain {} has hidden labels; the replay trainer needs labeled data", ds.domain_id()),
            ));
        }
        for (s, l) in ds.samples().iter().zip(ds.training_labels()) {
            l.slot(known_classes)?;
            features.row_mut(at).copy_from_slice(s.vector());
            labels.push(l);
            domains.push(s.domain_id());
            at += 1;
        }
    }
    Ok(FlatPool { features, labels, domains })
}

/// Trains a fresh GAN on a labeled pool (real data, replayed sets, or
/// pseudo-labeled samples alike): shuffled minibatches for the configured
/// epochs, one `train_step` per batch. Returns the state plus one mean loss
/// report per epoch.
pub fn train_replay_gan(
    pool: &[DomainDataset],
    known_classes: usize,
    n_domains: usize,
    cfg: &MdcganConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MdcganState, Vec<GanLossReport>)> {
    cfg.validate()?;
    let flat = flatten_pool(pool, known_classes)?;
    let feat_dim = flat.features.cols();
    let cond = GanConditioning::new(cfg.z_dim, known_classes + 1, cfg.d_dim, feat_dim)?;
    for &d in &flat.domains {
        if d as usize > n_domains {
            return Err(Error::contract(
                "train_replay_gan",
                format!("pool contains domain {} but the state covers {} domains", d, n_domains),
            ));
        }
    }
    let mut state = MdcganState::init(cond, n_domains, cfg, rng)?;
    let mut open_domains: Vec<u16> = flat
        .labels
        .iter()
        .zip(&flat.domains)
        .filter(|(l, _)| **l == ClassLabel::Open)
        .map(|(_, &d)| d)
        .collect();
    open_domains.sort_unstable();
    open_domains.dedup();
    state.open_domains = open_domains;
    let n = flat.features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    use rand::seq::SliceRandom;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let feats = flat.features.take_rows(chunk);
            let labels: Vec<ClassLabel> = chunk.iter().map(|&i| flat.labels[i]).collect();
            let domains: Vec<u16> = chunk.iter().map(|&i| flat.domains[i]).collect();
            epoch_reports.push(state.train_step(&feats, &labels, &domains, rng)?);
        }
        history.push(GanLossReport::mean_of(&epoch_reports));
    }
    Ok((state, history))
}
