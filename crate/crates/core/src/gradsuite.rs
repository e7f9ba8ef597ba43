//! Named finite-difference audits of every loss form the project trains
//! with, each wired through a deliberately tiny network so a full sweep
//! stays under a second. The CLI's grad-check command and the acceptance
//! tests both run this list; a new loss form belongs here the day it gains
//! a backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datahub::ClassLabel;
use crate::diffcore::gradcheck::{central_diff_grads, compare_grads, DEFAULT_FD_STEP};
use crate::diffcore::{Activation, Matrix, Mlp, MlpSpec, ParamSet};
use crate::error::Result;
use crate::mdcgan::{GanConditioning, MdcganConfig, MdcganState};
use crate::meosda::{MeosdaConfig, MeosdaState};

/// Acceptance bar for the whole suite.
pub const SUITE_REL_TOL: f64 = 1e-3;
pub const SUITE_ABS_FLOOR: f64 = 1e-6;
/// Every audited net must stay at or below this many trainable scalars.
pub const SUITE_MAX_PARAMS: usize = 200;

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: &'static str,
    /// Trainable scalars in the parameter group the differences sweep.
    pub param_count: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Worst element, for diagnosing a failure.
    pub detail: String,
}

fn param_count(p: &ParamSet) -> usize {
    (0..p.trainable_len()).map(|t| p.trainable_at(t).data().len()).sum()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    m
}

fn tiny_gan(seed: u64) -> Result<MdcganState> {
    let cond = GanConditioning::new(2, 3, 1, 3)?;
    let cfg = MdcganConfig {
        z_dim: 2,
        d_dim: 1,
        gen_hidden: vec![4],
        trunk_hidden: vec![4],
        ..MdcganConfig::desk_scale()
    };
    MdcganState::init(cond, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gan_batch(seed: u64) -> (Matrix, Vec<ClassLabel>, Vec<u16>, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real = random_matrix(4, 3, &mut rng);
    let fake = random_matrix(4, 3, &mut rng);
    let z = random_matrix(4, 2, &mut rng);
    let labels = vec![
        ClassLabel::Known(0),
        ClassLabel::Known(1),
        ClassLabel::Open,
        ClassLabel::Known(1),
    ];
    let domains = vec![1, 2, 1, 2];
    (real, labels, domains, fake, z)
}

fn tiny_osda(seed: u64, adv_weight: f64) -> Result<MeosdaState> {
    let cfg = MeosdaConfig {
        extractor_hidden: vec![5, 4],
        head_hidden: vec![4],
        adv_weight,
        ..MeosdaConfig::desk_scale()
    };
    MeosdaState::init(3, 2, &[1, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn osda_batches(seed: u64) -> (Vec<(Matrix, Vec<usize>)>, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = (0..2)
        .map(|_| (random_matrix(4, 3, &mut rng), vec![0, 1, 2, 1]))
        .collect();
    let target = random_matrix(5, 3, &mut rng);
    (sources, target)
}

fn outcome(
    name: &'static str,
    params: usize,
    analytic: &crate::diffcore::ParamGrads,
    numeric: &crate::diffcore::ParamGrads,
) -> SuiteCheck {
    let cmp = compare_grads(analytic, numeric, SUITE_REL_TOL, SUITE_ABS_FLOOR);
    SuiteCheck {
        name,
        param_count: params,
        max_rel_err: cmp.max_rel_err,
        passed: cmp.passed() && params <= SUITE_MAX_PARAMS,
        detail: cmp.worst,
    }
}

/// Combined discriminator objective (realness + class + domain NLL means),
/// differenced over the shared trunk so every head's backward contributes.
fn check_discriminator(seed: u64) -> Result<SuiteCheck> {
    let mut state = tiny_gan(seed)?;
    let (real, labels, domains, fake, _) = gan_batch(seed ^ 1);
    let grads = state.discriminator_step_grads(&real, &labels, &domains, &fake)?;

    let mut probe = state.trunk.params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut s = tiny_gan(seed)?;
        s.trunk.params = p.clone();
        Ok(s.discriminator_step_grads(&real, &labels, &domains, &fake)?.loss)
    })?;
    Ok(outcome("discriminator combined nll", n, &grads.trunk, &numeric))
}

/// Full generator objective (class + domain − realness NLL + pair penalty),
/// differenced over the generator, exercising the reversal and the penalty.
fn check_generator(seed: u64) -> Result<SuiteCheck> {
    let mut state = tiny_gan(seed)?;
    let (real, labels, domains, _, z) = gan_batch(seed ^ 2);
    let (_, grads) = state.generator_step_grads(&z, &labels, &domains, &real)?;

    let mut probe = state.generator.params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut s = tiny_gan(seed)?;
        s.generator.params = p.clone();
        Ok(s.generator_step_grads(&z, &labels, &domains, &real)?.0)
    })?;
    Ok(outcome("generator adversarial objective", n, &grads, &numeric))
}

/// Mean squared fake-to-real distance alone, through a small generator.
fn check_pair_penalty(seed: u64) -> Result<SuiteCheck> {
    let spec = MlpSpec::new(vec![3, 4, 3], Activation::LeakyRelu(0.01));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::init(spec.clone(), &mut rng)?;
    let x = random_matrix(5, 3, &mut rng);
    let real = random_matrix(5, 3, &mut rng);
    let n_rows = x.rows() as f64;

    let mut work = net.clone();
    let (fake, tape) = work.forward_train(&x)?;
    let upstream = fake.add(&real.scale(-1.0)).scale(2.0 / n_rows);
    let (analytic, _) = work.backward(&tape, &upstream)?;

    let mut probe = net.params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut net = Mlp::from_parts(spec.clone(), p.clone())?;
        let (fake, _) = net.forward_train(&x)?;
        let d = fake.add(&real.scale(-1.0));
        Ok(d.data().iter().map(|v| v * v).sum::<f64>() / n_rows)
    })?;
    Ok(outcome("pair matching penalty", n, &analytic, &numeric))
}

/// Plain multi-head cross-entropy (boundary weight zero), differenced over
/// the shared extractor.
fn check_cross_entropy(seed: u64) -> Result<SuiteCheck> {
    let mut state = tiny_osda(seed, 0.0)?;
    let (sources, target) = osda_batches(seed ^ 3);
    let (_, grads) = state.train_step_grads(&sources, &target)?;

    let mut probe = state.extractor.params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut s = tiny_osda(seed, 0.0)?;
        s.extractor.params = p.clone();
        let (r, _) = s.train_step_grads(&sources, &target)?;
        Ok(r.total_ce())
    })?;
    Ok(outcome("classifier cross entropy", n, &grads.extractor, &numeric))
}

/// Open-boundary loss against the extractor: the reversed path must realize
/// summed CE minus the weighted boundary loss.
fn check_boundary_extractor(seed: u64) -> Result<SuiteCheck> {
    let w = 0.7;
    let mut state = tiny_osda(seed, w)?;
    let (sources, target) = osda_batches(seed ^ 4);
    let (_, grads) = state.train_step_grads(&sources, &target)?;

    let mut probe = state.extractor.params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut s = tiny_osda(seed, w)?;
        s.extractor.params = p.clone();
        let (r, _) = s.train_step_grads(&sources, &target)?;
        Ok(r.total_ce() - w * r.total_adv())
    })?;
    Ok(outcome("open boundary vs extractor", n, &grads.extractor, &numeric))
}

/// Open-boundary loss on the head side: descends its CE plus the weighted
/// boundary term.
fn check_boundary_head(seed: u64) -> Result<SuiteCheck> {
    let w = 0.7;
    let mut state = tiny_osda(seed, w)?;
    let (sources, target) = osda_batches(seed ^ 5);
    let (_, grads) = state.train_step_grads(&sources, &target)?;

    let mut probe = state.heads[0].params.clone();
    let n = param_count(&probe);
    let numeric = central_diff_grads(&mut probe, DEFAULT_FD_STEP, |p| {
        let mut s = tiny_osda(seed, w)?;
        s.heads[0].params = p.clone();
        let (r, _) = s.train_step_grads(&sources, &target)?;
        Ok(r.ce_per_head[0] + w * r.adv_per_head[0])
    })?;
    Ok(outcome("open boundary vs head", n, &grads.heads[0], &numeric))
}

/// Runs every check. The seed varies the sampled nets and batches; any seed
/// must pass.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    Ok(vec![
        check_discriminator(seed)?,
        check_generator(seed)?,
        check_pair_penalty(seed)?,
        check_cross_entropy(seed)?,
        check_boundary_extractor(seed)?,
        check_boundary_head(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in [0, 1, 42] {
            for check in run_gradient_suite(seed).unwrap() {
                assert!(
                    check.passed,
                    "{} (seed {seed}): rel err {} at {}",
                    check.name, check.max_rel_err, check.detail
                );
                assert!(check.param_count <= SUITE_MAX_PARAMS, "{} too big", check.name);
                assert!(check.param_count > 0);
            }
        }
    }

    #[test]
    fn suite_names_are_stable_and_distinct() {
        let checks = run_gradient_suite(7).unwrap();
        assert_eq!(checks.len(), 6);
        let mut names: Vec<&str> = checks.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 6);
    }
}
