use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

/// Architecture of a sequential MLP. `layer_dims` lists the input width
/// followed by every layer's output width. Each layer is linear -> optional
/// batch-norm -> optional activation; the activation is skipped on the final
/// layer unless `activate_output` is set, so logits and generated features
/// come out linear by default.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: Vec<bool>,
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> MlpSpec {
        let n = layer_dims.len().saturating_sub(1);
        MlpSpec { layer_dims, activation, batch_norm: vec![false; n], activate_output: false }
    }

    /// Batch-norm after every hidden layer's linear map, none on the output.
    pub fn with_batch_norm_hidden(mut self) -> MlpSpec {
        let n = self.batch_norm.len();
        for (i, f) in self.batch_norm.iter_mut().enumerate() {
            *f = i + 1 < n;
        }
        self
    }

    /// Batch-norm after every layer, output included.
    pub fn with_batch_norm_all(mut self) -> MlpSpec {
        for f in self.batch_norm.iter_mut() {
            *f = true;
        }
        self
    }

    /// Apply the activation to the final layer as well (trunk/extractor style).
    pub fn with_activated_output(mut self) -> MlpSpec {
        self.activate_output = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::contract("MlpSpec", "need at least input and one layer"));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("MlpSpec", "zero-width layer"));
        }
        if self.batch_norm.len() != self.num_layers() {
            return Err(Error::contract(
                "MlpSpec",
                format!(
                    "batch_norm has {} flags for {} layers",
                    self.batch_norm.len(),
                    self.num_layers()
                ),
            ));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::contract("MlpSpec", format!("bad leaky slope {s}")));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layer_activated(&self, layer: usize) -> bool {
        match self.activation {
            Activation::Linear => false,
            Activation::LeakyRelu(_) => layer + 1 < self.num_layers() || self.activate_output,
        }
    }
}

/// Scale/shift plus running statistics for one batch-normalized layer. The
/// running stats are updated during train-mode forwards and are not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// in_dim x out_dim; a batch row vector maps through `x * weight + bias`.
    pub weight: Matrix,
    pub bias: Matrix,
    pub bn: Option<BnParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    /// Xavier-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases,
    /// unit-scale batch-norm. Entries are drawn in layer and row-major order,
    /// so a fixed seed fixes every value.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<ParamSet> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let fan_in = spec.layer_dims[l];
            let fan_out = spec.layer_dims[l + 1];
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = Matrix::zeros(fan_in, fan_out);
            for v in weight.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
            let bn = if spec.batch_norm[l] {
                Some(BnParams {
                    gamma: Matrix::filled(1, fan_out, 1.0),
                    beta: Matrix::zeros(1, fan_out),
                    running_mean: Matrix::zeros(1, fan_out),
                    running_var: Matrix::filled(1, fan_out, 1.0),
                })
            } else {
                None
            };
            layers.push(LayerParams { weight, bias: Matrix::zeros(1, fan_out), bn });
        }
        Ok(ParamSet { layers })
    }

    pub fn matches_spec(&self, spec: &MlpSpec) -> bool {
        if self.layers.len() != spec.num_layers() {
            return false;
        }
        for (l, lp) in self.layers.iter().enumerate() {
            if lp.weight.shape() != (spec.layer_dims[l], spec.layer_dims[l + 1]) {
                return false;
            }
            if lp.bias.shape() != (1, spec.layer_dims[l + 1]) {
                return false;
            }
            if lp.bn.is_some() != spec.batch_norm[l] {
                return false;
            }
        }
        true
    }

    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let mut n = l.weight.data().len() + l.bias.data().len();
                if let Some(bn) = &l.bn {
                    n += bn.gamma.data().len() + bn.beta.data().len();
                }
                n
            })
            .sum()
    }

    /// Trainable tensors in a fixed order, for perturbation and inspection.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Number of trainable tensors, matching [`ParamSet::trainable_mut`] order.
    pub fn trainable_len(&self) -> usize {
        self.layers.iter().map(|l| if l.bn.is_some() { 4 } else { 2 }).sum()
    }

    pub fn trainable_at(&self, idx: usize) -> &Matrix {
        let mut i = idx;
        for l in &self.layers {
            let slots: &[Option<&Matrix>] = &[
                Some(&l.weight),
                Some(&l.bias),
                l.bn.as_ref().map(|bn| &bn.gamma),
                l.bn.as_ref().map(|bn| &bn.beta),
            ];
            for s in slots.iter().flatten() {
                if i == 0 {
                    return s;
                }
                i -= 1;
            }
        }
        panic!("trainable tensor index {idx} out of range");
    }

    pub fn trainable_at_mut(&mut self, idx: usize) -> &mut Matrix {
        let mut i = idx;
        for l in &mut self.layers {
            for s in [Some(&mut l.weight), Some(&mut l.bias)]
                .into_iter()
                .chain(match &mut l.bn {
                    Some(bn) => [Some(&mut bn.gamma), Some(&mut bn.beta)].into_iter(),
                    None => [None, None].into_iter(),
                })
                .flatten()
            {
                if i == 0 {
                    return s;
                }
                i -= 1;
            }
        }
        panic!("trainable tensor index {idx} out of range");
    }
}

/// Gradients mirroring the trainable part of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub gamma: Option<Matrix>,
    pub beta: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> ParamGrads {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: Matrix::zeros(1, l.bias.cols()),
                gamma: l.bn.as_ref().map(|bn| Matrix::zeros(1, bn.gamma.cols())),
                beta: l.bn.as_ref().map(|bn| Matrix::zeros(1, bn.beta.cols())),
            })
            .collect();
        ParamGrads { layers }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        assert_eq!(self.layers.len(), other.layers.len(), "grad layer count mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
            match (&mut a.gamma, &b.gamma) {
                (Some(x), Some(y)) => x.add_assign(y),
                (None, None) => {}
                _ => panic!("grad batch-norm layout mismatch"),
            }
            match (&mut a.beta, &b.beta) {
                (Some(x), Some(y)) => x.add_assign(y),
                (None, None) => {}
                _ => panic!("grad batch-norm layout mismatch"),
            }
        }
    }

    pub fn scale(&self, s: f64) -> ParamGrads {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: l.weight.scale(s),
                bias: l.bias.scale(s),
                gamma: l.gamma.as_ref().map(|g| g.scale(s)),
                beta: l.beta.as_ref().map(|b| b.scale(s)),
            })
            .collect();
        ParamGrads { layers }
    }

    /// Tensors in the same fixed order as [`ParamSet::trainable_mut`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(g) = &l.gamma {
                out.push(g);
            }
            if let Some(b) = &l.beta {
                out.push(b);
            }
        }
        out
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Matrix {
        let mut i = idx;
        for l in &mut self.layers {
            for s in [Some(&mut l.weight), Some(&mut l.bias)]
                .into_iter()
                .chain([l.gamma.as_mut(), l.beta.as_mut()])
                .flatten()
            {
                if i == 0 {
                    return s;
                }
                i -= 1;
            }
        }
        panic!("grad tensor index {idx} out of range");
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for t in self.tensors() {
            t.check_finite(op)?;
        }
        Ok(())
    }
}

struct BnTape {
    centered: Matrix,
    inv_std: Matrix,
    x_hat: Matrix,
}

struct LayerTape {
    input: Matrix,
    bn: Option<BnTape>,
    /// Value entering the activation; present only on activated layers.
    act_in: Option<Matrix>,
}

/// Per-layer intermediates recorded by a train-mode forward pass. Only
/// [`Mlp::forward_train`] can build one, so a tape always carries batch
/// statistics consistent with its forward.
pub struct Tape {
    layers: Vec<LayerTape>,
    batch: usize,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// A sequential MLP: architecture plus parameters. Forward/backward are
/// hand-rolled reverse mode; no graph beyond the fixed layer chain exists.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Mlp> {
        let params = ParamSet::init(&spec, rng)?;
        Ok(Mlp { spec, params })
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Mlp> {
        spec.validate()?;
        if !params.matches_spec(&spec) {
            return Err(Error::contract("Mlp::from_parts", "params do not match spec"));
        }
        Ok(Mlp { spec, params })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.spec.in_dim() {
            return Err(Error::dim(
                op,
                format!("input {}x{} vs expected width {}", x.rows(), x.cols(), self.spec.in_dim()),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::contract(op, "empty batch"));
        }
        Ok(())
    }

    /// Train-mode forward: batch-norm layers normalize with batch statistics
    /// and fold them into the running stats. Returns the output and the tape
    /// needed by [`Mlp::backward`].
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x, "forward_train")?;
        let n = x.rows();
        let act = self.spec.activation;
        let mut cur = x.clone();
        let mut tapes = Vec::with_capacity(self.spec.num_layers());
        for l in 0..self.spec.num_layers() {
            let activated = self.spec.layer_activated(l);
            let lp = &mut self.params.layers[l];
            let input = cur;
            let z = input.matmul(&lp.weight)?.add_row_vec(&lp.bias);
            let (bn_tape, u) = match &mut lp.bn {
                Some(bn) => {
                    let mu = z.col_mean();
                    let centered = z.sub_row_vec(&mu);
                    let var = centered.hadamard(&centered).col_mean();
                    let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
                    let x_hat = centered.mul_row_vec(&inv_std);
                    let u = x_hat.mul_row_vec(&bn.gamma).add_row_vec(&bn.beta);
                    bn.running_mean =
                        bn.running_mean.scale(BN_MOMENTUM).add(&mu.scale(1.0 - BN_MOMENTUM));
                    bn.running_var =
                        bn.running_var.scale(BN_MOMENTUM).add(&var.scale(1.0 - BN_MOMENTUM));
                    (Some(BnTape { centered, inv_std, x_hat }), u)
                }
                None => (None, z),
            };
            let (act_in, out) = if activated {
                let a = u.map(|v| act.apply(v));
                (Some(u), a)
            } else {
                (None, u)
            };
            tapes.push(LayerTape { input, bn: bn_tape, act_in });
            cur = out;
        }
        cur.check_finite("forward_train")?;
        Ok((cur, Tape { layers: tapes, batch: n }))
    }

    /// Eval-mode forward: batch-norm layers use running statistics, nothing is
    /// recorded or mutated.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "forward_eval")?;
        let mut cur = x.clone();
        for l in 0..self.spec.num_layers() {
            let lp = &self.params.layers[l];
            let mut u = cur.matmul(&lp.weight)?.add_row_vec(&lp.bias);
            if let Some(bn) = &lp.bn {
                let inv_std = bn.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt());
                u = u
                    .sub_row_vec(&bn.running_mean)
                    .mul_row_vec(&inv_std)
                    .mul_row_vec(&bn.gamma)
                    .add_row_vec(&bn.beta);
            }
            if self.spec.layer_activated(l) {
                u = u.map(|v| self.spec.activation.apply(v));
            }
            cur = u;
        }
        cur.check_finite("forward_eval")?;
        Ok(cur)
    }

    /// Reverse pass over a train-mode tape. `upstream` is dLoss/dOutput with
    /// the same shape as the forward output. Returns parameter gradients and
    /// dLoss/dInput.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<(ParamGrads, Matrix)> {
        if tape.layers.len() != self.spec.num_layers() {
            return Err(Error::contract("backward", "tape does not match spec"));
        }
        if upstream.shape() != (tape.batch, self.spec.out_dim()) {
            return Err(Error::dim(
                "backward",
                format!(
                    "upstream {}x{} vs expected {}x{}",
                    upstream.rows(),
                    upstream.cols(),
                    tape.batch,
                    self.spec.out_dim()
                ),
            ));
        }
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut g = upstream.clone();
        for l in (0..self.spec.num_layers()).rev() {
            let lt = &tape.layers[l];
            let lp = &self.params.layers[l];
            if let Some(act_in) = &lt.act_in {
                let deriv = act_in.map(|v| self.spec.activation.derivative(v));
                g = g.hadamard(&deriv);
            }
            if let Some(bn_tape) = &lt.bn {
                let bn = lp.bn.as_ref().expect("tape/param batch-norm mismatch");
                let n = tape.batch as f64;
                let d_beta = g.col_sum();
                let d_gamma = g.hadamard(&bn_tape.x_hat).col_sum();
                let d_xhat = g.mul_row_vec(&bn.gamma);
                // dVar_j = sum_i dXhat_ij * centered_ij * (-1/2) * inv_std_j^3
                let inv_std3 = bn_tape.inv_std.map(|v| v * v * v);
                let d_var = d_xhat
                    .hadamard(&bn_tape.centered)
                    .col_sum()
                    .mul_row_vec(&inv_std3)
                    .scale(-0.5);
                // dMu_j = -inv_std_j * sum_i dXhat_ij - dVar_j * (2/n) * sum_i centered_ij
                let d_mu = d_xhat
                    .col_sum()
                    .mul_row_vec(&bn_tape.inv_std)
                    .scale(-1.0)
                    .add(&d_var.hadamard(&bn_tape.centered.col_sum()).scale(-2.0 / n));
                // dZ = dXhat * inv_std + centered * dVar * 2/n + dMu / n
                let mut dz = d_xhat.mul_row_vec(&bn_tape.inv_std);
                dz.add_assign(&bn_tape.centered.mul_row_vec(&d_var).scale(2.0 / n));
                dz = dz.add_row_vec(&d_mu.scale(1.0 / n));
                grads.layers[l].gamma = Some(d_gamma);
                grads.layers[l].beta = Some(d_beta);
                g = dz;
            }
            grads.layers[l].weight = lt.input.transpose().matmul(&g)?;
            grads.layers[l].bias = g.col_sum();
            g = g.matmul(&lp.weight.transpose())?;
        }
        grads.check_finite("backward")?;
        g.check_finite("backward")?;
        Ok((grads, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Linear);
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.layers[0].weight = Matrix::eye(3);
        let mlp = Mlp::from_parts(spec, params).unwrap();
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
        let y = mlp.forward_eval(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn xavier_init_is_bounded_and_seeded() {
        let spec = MlpSpec::new(vec![10, 6], Activation::Linear);
        let a = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0 / 16.0_f64).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() < limit));
        assert!(a.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    /// Two-layer forward checked against an independent straight-line
    /// recomputation of the same arithmetic with scalar loops.
    #[test]
    fn forward_matches_straight_line_recomputation() {
        let spec =
            MlpSpec::new(vec![4, 3, 2], Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE));
        let mlp = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Matrix::filled(1, 4, 1.0);
        let y = mlp.forward_eval(&x).unwrap();

        // Layer 1: h_j = lrelu(sum_i x_i * w1[i][j] + b1[j])
        let w1 = &mlp.params.layers[0].weight;
        let b1 = &mlp.params.layers[0].bias;
        let mut h = [0.0f64; 3];
        for j in 0..3 {
            let mut s = b1.get(0, j);
            for i in 0..4 {
                s += 1.0 * w1.get(i, j);
            }
            h[j] = if s > 0.0 { s } else { DEFAULT_LEAKY_SLOPE * s };
        }
        // Layer 2 is linear output.
        let w2 = &mlp.params.layers[1].weight;
        let b2 = &mlp.params.layers[1].bias;
        for j in 0..2 {
            let mut s = b2.get(0, j);
            for i in 0..3 {
                s += h[i] * w2.get(i, j);
            }
            assert_close(y.get(0, j), s, 1e-15);
        }
    }

    /// Single linear layer, loss = sum of outputs. Hand chain rule:
    /// dW = x^T * ones, db = ones, dx = ones * W^T.
    #[test]
    fn linear_backward_hand_chain_rule() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Linear);
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.layers[0].weight = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        params.layers[0].bias = Matrix::new(1, 2, vec![0.5, -0.5]).unwrap();
        let mut mlp = Mlp::from_parts(spec, params).unwrap();
        let x = Matrix::new(1, 2, vec![5.0, 7.0]).unwrap();
        let (y, tape) = mlp.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[5.0 + 21.0 + 0.5, 10.0 + 28.0 - 0.5]);

        let upstream = Matrix::filled(1, 2, 1.0);
        let (grads, dx) = mlp.backward(&tape, &upstream).unwrap();
        assert_eq!(grads.layers[0].weight.data(), &[5.0, 5.0, 7.0, 7.0]);
        assert_eq!(grads.layers[0].bias.data(), &[1.0, 1.0]);
        // dx = upstream * W^T = [1*1 + 1*2, 1*3 + 1*4]
        assert_eq!(dx.data(), &[3.0, 7.0]);
    }

    #[test]
    fn leaky_relu_backward_uses_slope_on_negative_side() {
        let spec = MlpSpec::new(vec![1, 2], Activation::LeakyRelu(0.1)).with_activated_output();
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.layers[0].weight = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        params.layers[0].bias = Matrix::new(1, 2, vec![1.0, -3.0]).unwrap();
        let mut mlp = Mlp::from_parts(spec, params).unwrap();
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let (y, tape) = mlp.forward_train(&x).unwrap();
        // Pre-activations 2 and -2: output [2, -0.2].
        assert_eq!(y.data(), &[2.0, -0.2]);
        let (grads, dx) = mlp.backward(&tape, &Matrix::filled(1, 2, 1.0)).unwrap();
        // dW = x^T * [1, 0.1]; dx = 1*1 + 0.1*1.
        assert_eq!(grads.layers[0].weight.data(), &[1.0, 0.1]);
        assert_close(dx.get(0, 0), 1.1, 1e-15);
    }

    #[test]
    fn batch_norm_train_normalizes_batch_statistics() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Linear).with_batch_norm_all();
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.layers[0].weight = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut mlp = Mlp::from_parts(spec, params).unwrap();
        let x = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = mlp.forward_train(&x).unwrap();
        // mu = 2.5, biased var = 1.25.
        let inv = 1.0 / (1.25f64 + BN_EPS).sqrt();
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert_close(y.get(i, 0), (v - 2.5) * inv, 1e-12);
        }
        // Running stats folded with momentum 0.9 from (0, 1) defaults.
        let bn = mlp.params.layers[0].bn.as_ref().unwrap();
        assert_close(bn.running_mean.get(0, 0), 0.1 * 2.5, 1e-12);
        assert_close(bn.running_var.get(0, 0), 0.9 + 0.1 * 1.25, 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Linear).with_batch_norm_all();
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        params.layers[0].weight = Matrix::new(1, 1, vec![1.0]).unwrap();
        let bn = params.layers[0].bn.as_mut().unwrap();
        bn.running_mean = Matrix::new(1, 1, vec![2.0]).unwrap();
        bn.running_var = Matrix::new(1, 1, vec![4.0]).unwrap();
        let mlp = Mlp::from_parts(spec, params).unwrap();
        let y = mlp.forward_eval(&Matrix::new(1, 1, vec![6.0]).unwrap()).unwrap();
        assert_close(y.get(0, 0), (6.0 - 2.0) / (4.0f64 + BN_EPS).sqrt(), 1e-12);
    }

    #[test]
    fn batch_norm_single_row_batch_normalizes_to_shift() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Linear).with_batch_norm_all();
        let mut params = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let bn = params.layers[0].bn.as_mut().unwrap();
        bn.beta = Matrix::new(1, 2, vec![0.25, -0.75]).unwrap();
        let mut mlp = Mlp::from_parts(spec, params).unwrap();
        // Variance of a single row is zero, so x_hat is zero and out = beta.
        let (y, _) = mlp.forward_train(&Matrix::new(1, 2, vec![3.0, -9.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.25, -0.75]);
    }

    #[test]
    fn forward_rejects_wrong_width_and_empty_batch() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Linear);
        let mlp = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(mlp.forward_eval(&Matrix::zeros(1, 4)).is_err());
        assert!(mlp.forward_eval(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Linear);
        let mut mlp = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, tape) = mlp.forward_train(&Matrix::zeros(3, 2)).unwrap();
        assert!(mlp.backward(&tape, &Matrix::zeros(2, 2)).is_err());
    }
}
