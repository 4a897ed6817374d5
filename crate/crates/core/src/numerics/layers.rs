use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};

use super::{Moments, NodeId, ParamId, ParamRole, ParamStore, Scalar, Tape, Tensor2};

/// Train mode normalizes with batch statistics; infer mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Uniform Glorot initialization.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

/// Gaussian initialization with the given standard deviation.
pub fn normal_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor2<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sized")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(input, output, rng), ParamRole::Trainable);
        let bias = store.add(format!("{name}.bias"), Tensor2::zeros(1, output), ParamRole::Trainable);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }

    /// Sets weight and bias to zero, e.g. for a zero-output head.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).data_mut().fill(T::zero());
        store.value_mut(self.bias).data_mut().fill(T::zero());
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T> {
    pub dim: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(dim: usize, momentum: T, eps: T) -> Self {
        Self {
            dim,
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum,
            eps,
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn absorb(&mut self, m: &Moments<T>) {
        let keep = self.momentum;
        let take = T::one() - keep;
        for (r, &b) in self.running_mean.iter_mut().zip(&m.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&m.var) {
            *r = keep * *r + take * b;
        }
    }
}

/// Batch normalization with learnable affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, dim: usize, momentum: T, eps: T) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor2::filled(1, dim, T::one()), ParamRole::Trainable);
        let beta = store.add(format!("{name}.beta"), Tensor2::zeros(1, dim), ParamRole::Trainable);
        Self {
            gamma,
            beta,
            state: BatchNormState::new(dim, momentum, eps),
        }
    }

    /// Records the normalization on the tape. In train mode the batch moments
    /// are returned and the running statistics are left to the caller.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        mode: Mode,
    ) -> (NodeId, Option<Moments<T>>) {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, m) = tape.batch_norm_train(x, g, b, self.state.eps);
                (y, Some(m))
            }
            Mode::Infer => {
                let y = tape.batch_norm_infer(x, g, b, &self.state.running_mean, &self.state.running_var, self.state.eps);
                (y, None)
            }
        }
    }
}

/// Normalizes `x` and, in train mode, folds the batch moments into `bn`'s
/// running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor2<T>,
    bn: &mut BatchNorm<T>,
    store: &ParamStore<T>,
    mode: Mode,
) -> Result<Tensor2<T>> {
    if x.cols() != bn.state.dim {
        return Err(DigError::shape("batchnorm_forward", bn.state.dim, x.cols()));
    }
    if mode == Mode::Train && x.rows() < 2 {
        return Err(DigError::InvalidInput("batch norm in train mode needs at least two rows".into()));
    }
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let (y, m) = bn.forward(&mut tape, store, xn, mode);
    if let Some(m) = m {
        bn.state.absorb(&m);
    }
    Ok(tape.value(y).clone())
}
