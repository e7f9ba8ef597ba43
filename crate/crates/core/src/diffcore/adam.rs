use super::matrix::Matrix;
use super::mlp::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

/// Adam hyperparameters. The defaults are the training settings used across
/// this project: lr 0.001, beta1 0.5, beta2 0.9, eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad adam config {self:?}")))
        }
    }
}

/// Bias-corrected Adam over one parameter group. First and second moments
/// mirror the trainable tensors of the group's [`ParamSet`]; the step counter
/// makes updates deterministic and serializable.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step_count: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
}

impl AdamState {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            step_count: 0,
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
        }
    }

    /// One update: m/v moment decay, bias correction by step count, then
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`. Tensors are visited in the
    /// fixed layer order, so two equal states given equal grads stay equal.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} grad layers vs {} param layers", grads.layers.len(), params.layers.len()),
            ));
        }
        grads.check_finite("adam_step")?;
        self.step_count += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step_count as i32);
        for l in 0..params.layers.len() {
            let lp = &mut params.layers[l];
            let lg = &grads.layers[l];
            let lm = &mut self.m.layers[l];
            let lv = &mut self.v.layers[l];
            update_tensor(&mut lp.weight, &lg.weight, &mut lm.weight, &mut lv.weight, self.cfg, c1, c2)?;
            update_tensor(&mut lp.bias, &lg.bias, &mut lm.bias, &mut lv.bias, self.cfg, c1, c2)?;
            if let Some(bn) = &mut lp.bn {
                let (gg, gb) = match (&lg.gamma, &lg.beta) {
                    (Some(g), Some(b)) => (g, b),
                    _ => {
                        return Err(Error::dim("adam_step", format!("layer {l} missing batch-norm grads")))
                    }
                };
                update_tensor(
                    &mut bn.gamma,
                    gg,
                    lm.gamma.as_mut().unwrap(),
                    lv.gamma.as_mut().unwrap(),
                    self.cfg,
                    c1,
                    c2,
                )?;
                update_tensor(
                    &mut bn.beta,
                    gb,
                    lm.beta.as_mut().unwrap(),
                    lv.beta.as_mut().unwrap(),
                    self.cfg,
                    c1,
                    c2,
                )?;
            }
        }
        Ok(())
    }
}

fn update_tensor(
    p: &mut Matrix,
    g: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    cfg: AdamConfig,
    c1: f64,
    c2: f64,
) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::dim(
            "adam_step",
            format!("param {}x{} vs grad {}x{}", p.rows(), p.cols(), g.rows(), g.cols()),
        ));
    }
    let pd = p.data_mut();
    let gd = g.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..pd.len() {
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
        let m_hat = md[i] / c1;
        let v_hat = vd[i] / c2;
        pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
