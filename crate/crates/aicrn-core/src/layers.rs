//! Network layers: 1-D convolution, batch normalization, activations,
//! pooling, dropout, and parameter initialization.
//!
//! Persistent parameters live in [`Param`] buffers owned by layer structs;
//! every forward pass binds them onto the tape as fresh leaves and records
//! the resulting ids in a [`BoundParams`] list so the optimizer can read the
//! gradients back in a stable order.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ActKind, NodeId, ReduceKind, Tape};

/// Train/eval switch for batch norm statistics and dropout.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// A named persistent parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> Self {
        let p = Param {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(p.data.len(), p.shape.iter().product::<usize>());
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Tape leaves bound from parameters during one forward pass, in the same
/// order as `visit_params` walks the model.
#[derive(Debug, Default)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn new() -> Self {
        BoundParams { ids: Vec::new() }
    }

    pub fn bind<S: Scalar>(&mut self, tape: &mut Tape<S>, param: &Param<S>) -> NodeId {
        let id = tape
            .leaf(param.data.clone(), &param.shape, true)
            .expect("parameter shapes are validated at construction");
        self.ids.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn node(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }

    /// Copy the gradient of every bound parameter out of the tape. A
    /// parameter the loss never touched yields zeros.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Vec<S>> {
        self.ids
            .iter()
            .map(|&id| match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![S::ZERO; tape.data(id).len()],
            })
            .collect()
    }
}

// ---- initialization --------------------------------------------------------

/// He-style weight init: zero-mean normal with std sqrt(2 / fan_in).
pub fn init_he<S: Scalar>(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<S> {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| S::from_f64(rng.normal() * std)).collect()
}

pub fn init_zeros<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::ZERO; n]
}

pub fn init_ones<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::ONE; n]
}

// ---- convolution -------------------------------------------------------------

/// 1-D convolution (cross-correlation) with 'same' zero padding and stride 1.
#[derive(Clone, Debug)]
pub struct Conv1d<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Config(format!(
                "{}: kernel width must be odd for 'same' padding, got {}",
                prefix, kernel
            )));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!(
                "{}: channel counts must be >= 1",
                prefix
            )));
        }
        let fan_in = in_ch * kernel;
        Ok(Conv1d {
            weight: Param::new(
                format!("{}.weight", prefix),
                vec![out_ch, in_ch, kernel],
                init_he(rng, out_ch * in_ch * kernel, fan_in),
            ),
            bias: Param::new(format!("{}.bias", prefix), vec![out_ch], init_zeros(out_ch)),
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let w = bound.bind(tape, &self.weight);
        let b = bound.bind(tape, &self.bias);
        tape.conv1d(x, w, b)
    }
}

// ---- batch normalization ------------------------------------------------------

/// Per-channel batch normalization over (batch, time).
///
/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running estimates as `running = (1 - momentum) * running + momentum *
/// batch`; eval mode normalizes with the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm1d<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub epsilon: f64,
    pub channels: usize,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(
                format!("{}.gamma", prefix),
                vec![channels],
                init_ones(channels),
            ),
            beta: Param::new(
                format!("{}.beta", prefix),
                vec![channels],
                init_zeros(channels),
            ),
            running_mean: vec![S::ZERO; channels],
            running_var: vec![S::ONE; channels],
            momentum: 0.1,
            epsilon: 1e-5,
            channels,
        }
    }

    fn check_input(&self, tape: &Tape<S>, x: NodeId) -> Result<(usize, usize)> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::Dim(format!(
                "batchnorm {} expects (B, {}, L) input, got {:?}",
                self.gamma.name, self.channels, shape
            )));
        }
        Ok((shape[0], shape[2]))
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape<S>,
        x: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let (b, l) = self.check_input(tape, x)?;
        if b * l < 2 {
            return Err(Error::Dim(
                "batchnorm train mode has degenerate statistics: batch x time must be >= 2".into(),
            ));
        }
        // Batch statistics per channel, differentiably on the tape.
        let mean_b = tape.reduce(x, 0, ReduceKind::Mean)?; // (1,C,L)
        let mean = tape.reduce(mean_b, 2, ReduceKind::Mean)?; // (1,C,1)
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var_b = tape.reduce(sq, 0, ReduceKind::Mean)?;
        let var = tape.reduce(var_b, 2, ReduceKind::Mean)?; // biased
        let inv_std = tape.rsqrt_shift(var, S::from_f64(self.epsilon));
        let normed = tape.mul(centered, inv_std)?;

        let gamma = bound.bind(tape, &self.gamma);
        let beta = bound.bind(tape, &self.beta);
        let gamma3 = tape.reshape(gamma, &[1, self.channels, 1])?;
        let beta3 = tape.reshape(beta, &[1, self.channels, 1])?;
        let scaled = tape.mul(normed, gamma3)?;
        let out = tape.add(scaled, beta3)?;

        // Running stats update, detached from the tape.
        let m = S::from_f64(self.momentum);
        let keep = S::from_f64(1.0 - self.momentum);
        let batch_mean = tape.data(mean).to_vec();
        let batch_var = tape.data(var).to_vec();
        for c in 0..self.channels {
            self.running_mean[c] = keep * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * batch_var[c];
        }
        Ok(out)
    }

    pub fn forward_eval(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        self.check_input(tape, x)?;
        let c = self.channels;
        let mean = tape.leaf(self.running_mean.clone(), &[1, c, 1], false)?;
        let inv: Vec<S> = self
            .running_var
            .iter()
            .map(|&v| S::ONE / (v + S::from_f64(self.epsilon)).sqrt())
            .collect();
        let inv_std = tape.leaf(inv, &[1, c, 1], false)?;
        let centered = tape.sub(x, mean)?;
        let normed = tape.mul(centered, inv_std)?;
        let gamma = bound.bind(tape, &self.gamma);
        let beta = bound.bind(tape, &self.beta);
        let gamma3 = tape.reshape(gamma, &[1, c, 1])?;
        let beta3 = tape.reshape(beta, &[1, c, 1])?;
        let scaled = tape.mul(normed, gamma3)?;
        tape.add(scaled, beta3)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        x: NodeId,
        mode: Mode,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        match mode {
            Mode::Train => self.forward_train(tape, x, bound),
            Mode::Eval => self.forward_eval(tape, x, bound),
        }
    }
}

// ---- stateless layers ---------------------------------------------------------

pub fn leaky_relu<S: Scalar>(tape: &mut Tape<S>, x: NodeId, slope: f64) -> NodeId {
    tape.activation(x, ActKind::LeakyRelu, S::from_f64(slope))
}

pub fn relu<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    tape.activation(x, ActKind::Relu, S::ZERO)
}

pub fn sigmoid<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    tape.activation(x, ActKind::Sigmoid, S::ZERO)
}

/// Mean over the time axis: (B,C,L) -> (B,C,1).
pub fn global_avg_pool<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    if tape.shape(x).len() != 3 {
        return Err(Error::Dim(format!(
            "global_avg_pool needs rank-3 input, got {:?}",
            tape.shape(x)
        )));
    }
    tape.reduce(x, 2, ReduceKind::Mean)
}

/// Inverted dropout: train mode zeroes each element with probability `p` and
/// scales survivors by 1/(1-p); eval mode is the identity.
pub fn dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {}",
            p
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let scale = S::from_f64(1.0 / (1.0 - p));
    let n = tape.data(x).len();
    let mask: Vec<S> = (0..n)
        .map(|_| if rng.uniform() < p { S::ZERO } else { scale })
        .collect();
    let shape = tape.shape(x).to_vec();
    let mask_id = tape.leaf(mask, &shape, false)?;
    tape.mul(x, mask_id)
}
