//! Convolutional block attention: a channel gate deciding *what* to keep and
//! a spatial gate deciding *where*, applied in that order.
//!
//! Channel attention pools the feature map over time with both mean and max,
//! pushes the two descriptors through one shared two-layer MLP (ReLU hidden),
//! sums, and squashes with a sigmoid. Spatial attention pools over channels,
//! concatenates the mean and max maps, and runs a width-7 'same' convolution
//! followed by a sigmoid. Both gates only attenuate: outputs are strictly
//! inside (0, 1).

use crate::error::{Error, Result};
use crate::layers::{relu, sigmoid, BoundParams, Conv1d, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, ReduceKind, Tape};

/// Shared-MLP channel gate parameters.
#[derive(Clone, Debug)]
pub struct ChannelAttention<S: Scalar> {
    pub w1: Param<S>,
    pub b1: Param<S>,
    pub w2: Param<S>,
    pub b2: Param<S>,
    pub channels: usize,
    pub hidden: usize,
}

impl<S: Scalar> ChannelAttention<S> {
    pub fn new(prefix: &str, channels: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        if ratio == 0 || channels == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!(
                "{}: channels ({}) must be divisible by the reduction ratio ({})",
                prefix, channels, ratio
            )));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            w1: Param::new(
                format!("{}.w1", prefix),
                vec![channels, hidden],
                crate::layers::init_he(rng, channels * hidden, channels),
            ),
            b1: Param::new(
                format!("{}.b1", prefix),
                vec![hidden],
                crate::layers::init_zeros(hidden),
            ),
            w2: Param::new(
                format!("{}.w2", prefix),
                vec![hidden, channels],
                crate::layers::init_he(rng, hidden * channels, hidden),
            ),
            b2: Param::new(
                format!("{}.b2", prefix),
                vec![channels],
                crate::layers::init_zeros(channels),
            ),
            channels,
            hidden,
        })
    }

    fn mlp(
        &self,
        tape: &mut Tape<S>,
        x: NodeId, // (B, C)
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> Result<NodeId> {
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = relu(tape, h);
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }

    /// (B,C,L) -> channel gate (B,C,1) in (0,1).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        f: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let shape = tape.shape(f).to_vec();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(Error::Dim(format!(
                "channel attention expects (B, {}, L), got {:?}",
                self.channels, shape
            )));
        }
        let b = shape[0];
        let avg = tape.reduce(f, 2, ReduceKind::Mean)?;
        let mx = tape.reduce(f, 2, ReduceKind::Max)?;
        let avg2 = tape.reshape(avg, &[b, self.channels])?;
        let mx2 = tape.reshape(mx, &[b, self.channels])?;

        let w1 = bound.bind(tape, &self.w1);
        let b1 = bound.bind(tape, &self.b1);
        let w2 = bound.bind(tape, &self.w2);
        let b2 = bound.bind(tape, &self.b2);
        let b1r = tape.reshape(b1, &[1, self.hidden])?;
        let b2r = tape.reshape(b2, &[1, self.channels])?;

        let o_avg = self.mlp(tape, avg2, w1, b1r, w2, b2r)?;
        let o_max = self.mlp(tape, mx2, w1, b1r, w2, b2r)?;
        let sum = tape.add(o_avg, o_max)?;
        let gate = sigmoid(tape, sum);
        tape.reshape(gate, &[b, self.channels, 1])
    }
}

/// Channel-squeeze + width-k convolution spatial gate.
#[derive(Clone, Debug)]
pub struct SpatialAttention<S: Scalar> {
    pub conv: Conv1d<S>,
}

impl<S: Scalar> SpatialAttention<S> {
    pub fn new(prefix: &str, kernel: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SpatialAttention {
            conv: Conv1d::new(&format!("{}.conv", prefix), 2, 1, kernel, rng)?,
        })
    }

    /// (B,C,L) -> spatial gate (B,1,L) in (0,1).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        f: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        if tape.shape(f).len() != 3 {
            return Err(Error::Dim(format!(
                "spatial attention expects rank-3 input, got {:?}",
                tape.shape(f)
            )));
        }
        let avg = tape.reduce(f, 1, ReduceKind::Mean)?; // (B,1,L)
        let mx = tape.reduce(f, 1, ReduceKind::Max)?;
        let stacked = tape.concat_channels(avg, mx)?; // (B,2,L)
        let conv = self.conv.forward(tape, stacked, bound)?;
        Ok(sigmoid(tape, conv))
    }
}

/// Full attention block: channel gate first, spatial gate second.
#[derive(Clone, Debug)]
pub struct Cbam<S: Scalar> {
    pub channel: ChannelAttention<S>,
    pub spatial: SpatialAttention<S>,
}

impl<S: Scalar> Cbam<S> {
    pub fn new(
        prefix: &str,
        channels: usize,
        ratio: usize,
        spatial_kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(&format!("{}.ca", prefix), channels, ratio, rng)?,
            spatial: SpatialAttention::new(&format!("{}.sa", prefix), spatial_kernel, rng)?,
        })
    }

    /// F'' = M_s(F') * F' where F' = M_c(F) * F.
    pub fn apply(&self, tape: &mut Tape<S>, f: NodeId, bound: &mut BoundParams) -> Result<NodeId> {
        let mc = self.channel.forward(tape, f, bound)?;
        let f1 = tape.mul(f, mc)?;
        let ms = self.spatial.forward(tape, f1, bound)?;
        tape.mul(f1, ms)
    }
}
