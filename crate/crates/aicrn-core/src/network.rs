//! The AICRN model: a two-stage convolutional stem, average pooling, a stack
//! of attention-integrated residual modules, dropout, global average pooling,
//! and a linear regression head emitting one scalar per example.
//!
//! The attention flag swaps the residual modules between the full
//! attention-integrated form and the plain convolutional residual form used
//! for ablation, without changing any other shape.

use serde::{Deserialize, Serialize};

use crate::cbam::Cbam;
use crate::error::{Error, Result};
use crate::layers::{
    dropout, global_avg_pool, leaky_relu, BatchNorm1d, BoundParams, Conv1d, Mode, Param,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape};

/// Architecture hyperparameters. Defaults are the full-scale configuration;
/// desk-scale runs override width, depth, and input length downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AicrnConfig {
    pub in_channels: usize,
    pub input_len: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub num_blocks: usize,
    pub attention: bool,
    pub cbam_ratio: usize,
    pub spatial_kernel: usize,
    pub dropout_p: f64,
    pub out_size: usize,
    pub leaky_slope: f64,
}

impl Default for AicrnConfig {
    fn default() -> Self {
        AicrnConfig {
            in_channels: 8,
            input_len: 1000,
            stem_width: 64,
            stem_kernel: 15,
            block_kernel: 7,
            num_blocks: 8,
            attention: true,
            cbam_ratio: 8,
            spatial_kernel: 7,
            dropout_p: 0.5,
            out_size: 1,
            leaky_slope: 0.1,
        }
    }
}

impl AicrnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| {
            Err(Error::Config(format!(
                "invalid config field `{}`: {}",
                field, why
            )))
        };
        if self.in_channels == 0 {
            return fail("in_channels", "must be >= 1".into());
        }
        if self.input_len < 2 {
            return fail(
                "input_len",
                "must be >= 2 for the stem pooling stage".into(),
            );
        }
        if self.stem_width == 0 {
            return fail("stem_width", "must be >= 1".into());
        }
        if self.stem_kernel % 2 == 0 || self.stem_kernel == 0 {
            return fail(
                "stem_kernel",
                format!("must be odd, got {}", self.stem_kernel),
            );
        }
        if self.block_kernel % 2 == 0 || self.block_kernel == 0 {
            return fail(
                "block_kernel",
                format!("must be odd, got {}", self.block_kernel),
            );
        }
        if self.num_blocks == 0 {
            return fail("num_blocks", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(
                "dropout_p",
                format!("must be in [0, 1), got {}", self.dropout_p),
            );
        }
        if self.out_size != 1 {
            return fail("out_size", format!("must be 1, got {}", self.out_size));
        }
        if !self.leaky_slope.is_finite() {
            return fail("leaky_slope", "must be finite".into());
        }
        if self.attention {
            if self.cbam_ratio == 0 || self.stem_width % self.cbam_ratio != 0 {
                return fail(
                    "cbam_ratio",
                    format!(
                        "stem_width {} must be divisible by cbam_ratio {}",
                        self.stem_width, self.cbam_ratio
                    ),
                );
            }
            if self.spatial_kernel % 2 == 0 || self.spatial_kernel == 0 {
                return fail(
                    "spatial_kernel",
                    format!("must be odd, got {}", self.spatial_kernel),
                );
            }
        }
        Ok(())
    }
}

/// One residual module: two conv+BN stages with a LeakyReLU between them,
/// optional CBAM on the branch, identity shortcut, LeakyReLU after the add.
#[derive(Clone, Debug)]
pub struct ResidualAttentionModule<S: Scalar> {
    pub conv_a: Conv1d<S>,
    pub bn_a: BatchNorm1d<S>,
    pub conv_b: Conv1d<S>,
    pub bn_b: BatchNorm1d<S>,
    pub cbam: Option<Cbam<S>>,
    pub slope: f64,
}

impl<S: Scalar> ResidualAttentionModule<S> {
    pub fn new(
        prefix: &str,
        width: usize,
        kernel: usize,
        attention: Option<(usize, usize)>, // (ratio, spatial kernel)
        slope: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cbam = match attention {
            Some((ratio, sk)) => Some(Cbam::new(
                &format!("{}.cbam", prefix),
                width,
                ratio,
                sk,
                rng,
            )?),
            None => None,
        };
        Ok(ResidualAttentionModule {
            conv_a: Conv1d::new(&format!("{}.conv_a", prefix), width, width, kernel, rng)?,
            bn_a: BatchNorm1d::new(&format!("{}.bn_a", prefix), width),
            conv_b: Conv1d::new(&format!("{}.conv_b", prefix), width, width, kernel, rng)?,
            bn_b: BatchNorm1d::new(&format!("{}.bn_b", prefix), width),
            cbam,
            slope,
        })
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape<S>,
        x: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let h = self.conv_a.forward(tape, x, bound)?;
        let h = self.bn_a.forward_train(tape, h, bound)?;
        let h = leaky_relu(tape, h, self.slope);
        let h = self.conv_b.forward(tape, h, bound)?;
        let mut branch = self.bn_b.forward_train(tape, h, bound)?;
        if let Some(cbam) = &self.cbam {
            branch = cbam.apply(tape, branch, bound)?;
        }
        let sum = tape.add(x, branch)?;
        Ok(leaky_relu(tape, sum, self.slope))
    }

    pub fn forward_eval(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let h = self.conv_a.forward(tape, x, bound)?;
        let h = self.bn_a.forward_eval(tape, h, bound)?;
        let h = leaky_relu(tape, h, self.slope);
        let h = self.conv_b.forward(tape, h, bound)?;
        let mut branch = self.bn_b.forward_eval(tape, h, bound)?;
        if let Some(cbam) = &self.cbam {
            branch = cbam.apply(tape, branch, bound)?;
        }
        let sum = tape.add(x, branch)?;
        Ok(leaky_relu(tape, sum, self.slope))
    }

    /// Zero the branch so the module reduces to leaky_relu(x); used by the
    /// identity-regime tests.
    pub fn zero_branch(&mut self) {
        for p in [
            &mut self.conv_a.weight,
            &mut self.conv_a.bias,
            &mut self.conv_b.weight,
            &mut self.conv_b.bias,
            &mut self.bn_a.beta,
            &mut self.bn_b.beta,
        ] {
            p.data.iter_mut().for_each(|v| *v = S::ZERO);
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.conv_a.weight);
        f(&self.conv_a.bias);
        f(&self.bn_a.gamma);
        f(&self.bn_a.beta);
        f(&self.conv_b.weight);
        f(&self.conv_b.bias);
        f(&self.bn_b.gamma);
        f(&self.bn_b.beta);
        if let Some(cbam) = &self.cbam {
            f(&cbam.channel.w1);
            f(&cbam.channel.b1);
            f(&cbam.channel.w2);
            f(&cbam.channel.b2);
            f(&cbam.spatial.conv.weight);
            f(&cbam.spatial.conv.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.conv_a.weight);
        f(&mut self.conv_a.bias);
        f(&mut self.bn_a.gamma);
        f(&mut self.bn_a.beta);
        f(&mut self.conv_b.weight);
        f(&mut self.conv_b.bias);
        f(&mut self.bn_b.gamma);
        f(&mut self.bn_b.beta);
        if let Some(cbam) = &mut self.cbam {
            f(&mut cbam.channel.w1);
            f(&mut cbam.channel.b1);
            f(&mut cbam.channel.w2);
            f(&mut cbam.channel.b2);
            f(&mut cbam.spatial.conv.weight);
            f(&mut cbam.spatial.conv.bias);
        }
    }
}

/// The assembled regression network for one target parameter.
#[derive(Clone, Debug)]
pub struct AicrnModel<S: Scalar> {
    pub config: AicrnConfig,
    pub stem_conv1: Conv1d<S>,
    pub stem_bn1: BatchNorm1d<S>,
    pub stem_conv2: Conv1d<S>,
    pub stem_bn2: BatchNorm1d<S>,
    pub blocks: Vec<ResidualAttentionModule<S>>,
    pub head_weight: Param<S>,
    pub head_bias: Param<S>,
}

impl<S: Scalar> AicrnModel<S> {
    pub fn build(config: AicrnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.stem_width;
        let attention = if config.attention {
            Some((config.cbam_ratio, config.spatial_kernel))
        } else {
            None
        };
        let blocks = (0..config.num_blocks)
            .map(|i| {
                ResidualAttentionModule::new(
                    &format!("block{}", i),
                    w,
                    config.block_kernel,
                    attention,
                    config.leaky_slope,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AicrnModel {
            stem_conv1: Conv1d::new("stem.conv1", config.in_channels, w, config.stem_kernel, rng)?,
            stem_bn1: BatchNorm1d::new("stem.bn1", w),
            stem_conv2: Conv1d::new("stem.conv2", w, w, config.stem_kernel, rng)?,
            stem_bn2: BatchNorm1d::new("stem.bn2", w),
            blocks,
            head_weight: Param::new("head.weight", vec![w, 1], crate::layers::init_he(rng, w, w)),
            head_bias: Param::new("head.bias", vec![1], crate::layers::init_zeros(1)),
            config,
        })
    }

    fn check_input(&self, tape: &Tape<S>, x: NodeId) -> Result<usize> {
        let shape = tape.shape(x);
        if shape.len() != 3
            || shape[1] != self.config.in_channels
            || shape[2] != self.config.input_len
        {
            return Err(Error::Dim(format!(
                "model expects input (B x {} x {}), got {:?}",
                self.config.in_channels, self.config.input_len, shape
            )));
        }
        Ok(shape[0])
    }

    fn head(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        batch: usize,
        bound: &mut BoundParams,
    ) -> Result<NodeId> {
        let pooled = global_avg_pool(tape, x)?;
        let flat = tape.reshape(pooled, &[batch, self.config.stem_width])?;
        let w = bound.bind(tape, &self.head_weight);
        let b = bound.bind(tape, &self.head_bias);
        let proj = tape.matmul(flat, w)?;
        let b2 = tape.reshape(b, &[1, 1])?;
        tape.add(proj, b2)
    }

    /// Training forward pass: batch-norm batch statistics and live dropout.
    /// Returns the (B x 1) prediction node and the bound parameter leaves in
    /// visit order.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<S>,
        x: NodeId,
        rng: &mut Rng,
    ) -> Result<(NodeId, BoundParams)> {
        let batch = self.check_input(tape, x)?;
        let mut bound = BoundParams::new();
        let slope = self.config.leaky_slope;

        let h = self.stem_conv1.forward(tape, x, &mut bound)?;
        let h = self.stem_bn1.forward_train(tape, h, &mut bound)?;
        let h = leaky_relu(tape, h, slope);
        let h = self.stem_conv2.forward(tape, h, &mut bound)?;
        let h = self.stem_bn2.forward_train(tape, h, &mut bound)?;
        let h = leaky_relu(tape, h, slope);
        let mut h = tape.avg_pool1d(h, 2)?;

        for block in &mut self.blocks {
            h = block.forward_train(tape, h, &mut bound)?;
        }
        let h = dropout(tape, h, self.config.dropout_p, Mode::Train, rng)?;
        let out = self.head(tape, h, batch, &mut bound)?;
        Ok((out, bound))
    }

    /// Inference forward pass: running statistics, dropout off. Does not
    /// mutate the model, so a built model can be shared read-only.
    pub fn forward_eval(&self, tape: &mut Tape<S>, x: NodeId) -> Result<(NodeId, BoundParams)> {
        let batch = self.check_input(tape, x)?;
        let mut bound = BoundParams::new();
        let slope = self.config.leaky_slope;

        let h = self.stem_conv1.forward(tape, x, &mut bound)?;
        let h = self.stem_bn1.forward_eval(tape, h, &mut bound)?;
        let h = leaky_relu(tape, h, slope);
        let h = self.stem_conv2.forward(tape, h, &mut bound)?;
        let h = self.stem_bn2.forward_eval(tape, h, &mut bound)?;
        let h = leaky_relu(tape, h, slope);
        let mut h = tape.avg_pool1d(h, 2)?;

        for block in &self.blocks {
            h = block.forward_eval(tape, h, &mut bound)?;
        }
        let out = self.head(tape, h, batch, &mut bound)?;
        Ok((out, bound))
    }

    /// Eval-mode predictions for a flat (B x in_channels x input_len) buffer.
    pub fn predict(&self, x_data: &[S], batch: usize) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let x = tape.leaf(
            x_data.to_vec(),
            &[batch, self.config.in_channels, self.config.input_len],
            false,
        )?;
        let (out, _) = self.forward_eval(&mut tape, x)?;
        Ok(tape.data(out).to_vec())
    }

    // ---- parameter traversal (canonical order == bind order) ---------------

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.stem_conv1.weight);
        f(&self.stem_conv1.bias);
        f(&self.stem_bn1.gamma);
        f(&self.stem_bn1.beta);
        f(&self.stem_conv2.weight);
        f(&self.stem_conv2.bias);
        f(&self.stem_bn2.gamma);
        f(&self.stem_bn2.beta);
        for block in &self.blocks {
            block.visit_params(f);
        }
        f(&self.head_weight);
        f(&self.head_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.stem_conv1.weight);
        f(&mut self.stem_conv1.bias);
        f(&mut self.stem_bn1.gamma);
        f(&mut self.stem_bn1.beta);
        f(&mut self.stem_conv2.weight);
        f(&mut self.stem_conv2.bias);
        f(&mut self.stem_bn2.gamma);
        f(&mut self.stem_bn2.beta);
        for block in &mut self.blocks {
            block.visit_params_mut(f);
        }
        f(&mut self.head_weight);
        f(&mut self.head_bias);
    }

    /// Names of trainable parameters in visit order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    /// Number of trainable parameter tensors.
    pub fn param_tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    pub fn param_tensor_len(&self, idx: usize) -> usize {
        let mut len = 0;
        let mut i = 0;
        self.visit_params(&mut |p| {
            if i == idx {
                len = p.numel();
            }
            i += 1;
        });
        len
    }

    pub fn param_elem(&self, idx: usize, j: usize) -> S {
        let mut value = S::ZERO;
        let mut i = 0;
        self.visit_params(&mut |p| {
            if i == idx {
                value = p.data[j];
            }
            i += 1;
        });
        value
    }

    pub fn set_param_elem(&mut self, idx: usize, j: usize, v: S) {
        let mut i = 0;
        self.visit_params_mut(&mut |p| {
            if i == idx {
                p.data[j] = v;
            }
            i += 1;
        });
    }

    /// Every persisted tensor: trainable parameters plus batch-norm running
    /// statistics, in a stable order.
    pub fn for_each_state(&self, f: &mut dyn FnMut(&str, &[usize], &[S])) {
        self.visit_params(&mut |p| f(&p.name, &p.shape, &p.data));
        let mut bns: Vec<&BatchNorm1d<S>> = vec![&self.stem_bn1, &self.stem_bn2];
        for block in &self.blocks {
            bns.push(&block.bn_a);
            bns.push(&block.bn_b);
        }
        for bn in bns {
            let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
            f(
                &format!("{}.running_mean", base),
                &[bn.channels],
                &bn.running_mean,
            );
            f(
                &format!("{}.running_var", base),
                &[bn.channels],
                &bn.running_var,
            );
        }
    }

    /// Mutable view over the same state set, for checkpoint loading.
    pub fn for_each_state_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [S])) {
        self.visit_params_mut(&mut |p| {
            let name = p.name.clone();
            let shape = p.shape.clone();
            f(&name, &shape, &mut p.data);
        });
        let mut bns: Vec<&mut BatchNorm1d<S>> = vec![&mut self.stem_bn1, &mut self.stem_bn2];
        for block in &mut self.blocks {
            bns.push(&mut block.bn_a);
            bns.push(&mut block.bn_b);
        }
        for bn in bns {
            let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
            let c = bn.channels;
            f(
                &format!("{}.running_mean", base),
                &[c],
                &mut bn.running_mean,
            );
            f(&format!("{}.running_var", base), &[c], &mut bn.running_var);
        }
    }

    /// Zero every residual branch; with non-negative inputs the block stack
    /// then acts as the identity.
    pub fn zero_residual_branches(&mut self) {
        for block in &mut self.blocks {
            block.zero_branch();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ReduceKind;

    fn tiny_config() -> AicrnConfig {
        AicrnConfig {
            in_channels: 8,
            input_len: 64,
            stem_width: 8,
            stem_kernel: 7,
            block_kernel: 5,
            num_blocks: 2,
            cbam_ratio: 8,
            dropout_p: 0.5,
            ..AicrnConfig::default()
        }
    }

    #[test]
    fn default_config_shapes() {
        let mut rng = Rng::new(1);
        let config = AicrnConfig::default();
        let model = AicrnModel::<f32>::build(config, &mut rng).unwrap();
        let x = vec![0.1f32; 2 * 8 * 1000];
        let out = model.predict(&x, 2).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = AicrnConfig::default();
        c.stem_kernel = 4;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("stem_kernel"), "{}", err);

        let mut c2 = AicrnConfig::default();
        c2.dropout_p = 1.0;
        assert!(c2.validate().unwrap_err().to_string().contains("dropout_p"));

        let mut c3 = AicrnConfig::default();
        c3.stem_width = 12; // not divisible by ratio 8
        assert!(c3
            .validate()
            .unwrap_err()
            .to_string()
            .contains("cbam_ratio"));
    }

    #[test]
    fn ablation_removes_attention_parameters_only() {
        let mut rng = Rng::new(2);
        let with = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        let mut cfg = tiny_config();
        cfg.attention = false;
        let mut rng2 = Rng::new(2);
        let without = AicrnModel::<f32>::build(cfg, &mut rng2).unwrap();

        assert!(without.param_count() < with.param_count());
        let with_names: std::collections::BTreeSet<String> =
            with.param_names().into_iter().collect();
        let without_names: std::collections::BTreeSet<String> =
            without.param_names().into_iter().collect();
        assert!(without_names.is_subset(&with_names));
        assert!(without_names.len() < with_names.len());
    }

    #[test]
    fn same_seed_bitwise_identical_parameters() {
        let a = AicrnModel::<f32>::build(tiny_config(), &mut Rng::new(9)).unwrap();
        let b = AicrnModel::<f32>::build(tiny_config(), &mut Rng::new(9)).unwrap();
        let mut data_a = Vec::new();
        a.visit_params(&mut |p| data_a.extend_from_slice(&p.data));
        let mut data_b = Vec::new();
        b.visit_params(&mut |p| data_b.extend_from_slice(&p.data));
        assert_eq!(data_a, data_b);
    }

    #[test]
    fn zero_branch_module_is_leaky_identity() {
        let mut rng = Rng::new(3);
        let mut module =
            ResidualAttentionModule::<f64>::new("m", 4, 5, Some((2, 7)), 0.1, &mut rng).unwrap();
        module.zero_branch();

        // Non-negative input passes through exactly.
        let data: Vec<f64> = (0..2 * 4 * 10).map(|i| (i % 7) as f64 * 0.5).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(data.clone(), &[2, 4, 10], false).unwrap();
        let mut bound = BoundParams::new();
        let out = module.forward_train(&mut tape, x, &mut bound).unwrap();
        assert_eq!(tape.data(out), data.as_slice());

        // Zero input with zero branch stays zero.
        let mut tape2: Tape<f64> = Tape::new();
        let zero = tape2
            .leaf(vec![0.0; 2 * 4 * 10], &[2, 4, 10], false)
            .unwrap();
        let mut bound2 = BoundParams::new();
        let out2 = module.forward_train(&mut tape2, zero, &mut bound2).unwrap();
        assert!(tape2.data(out2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_module_matches_straight_line_recomputation() {
        // Recompute the stated composition with explicit tape ops and compare.
        let mut rng = Rng::new(17);
        let mut module =
            ResidualAttentionModule::<f64>::new("m", 4, 5, Some((2, 7)), 0.1, &mut rng).unwrap();
        let mut data_rng = Rng::new(18);
        let data: Vec<f64> = (0..2 * 4 * 16).map(|_| data_rng.normal()).collect();
        let mut module2 = module.clone();

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(data.clone(), &[2, 4, 16], false).unwrap();
        let mut bound = BoundParams::new();
        let got = {
            let out = module.forward_train(&mut tape, x, &mut bound).unwrap();
            tape.data(out).to_vec()
        };

        // Independent composition out of the same pieces, in a fresh tape.
        let mut t2: Tape<f64> = Tape::new();
        let x2 = t2.leaf(data.clone(), &[2, 4, 16], false).unwrap();
        let mut b2 = BoundParams::new();
        let h = module2.conv_a.forward(&mut t2, x2, &mut b2).unwrap();
        let h = module2.bn_a.forward_train(&mut t2, h, &mut b2).unwrap();
        let h = leaky_relu(&mut t2, h, 0.1);
        let h = module2.conv_b.forward(&mut t2, h, &mut b2).unwrap();
        let h = module2.bn_b.forward_train(&mut t2, h, &mut b2).unwrap();
        let h = module2
            .cbam
            .as_ref()
            .unwrap()
            .apply(&mut t2, h, &mut b2)
            .unwrap();
        let s = t2.add(x2, h).unwrap();
        let out2 = leaky_relu(&mut t2, s, 0.1);
        for (a, b) in got.iter().zip(t2.data(out2)) {
            assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_symmetric() {
        let mut rng = Rng::new(5);
        let model = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        let mut xrng = Rng::new(6);
        let one: Vec<f32> = (0..8 * 64).map(|_| xrng.normal() as f32).collect();

        let p1 = model.predict(&one, 1).unwrap();
        let p2 = model.predict(&one, 1).unwrap();
        assert_eq!(p1, p2);

        // Two identical records in one batch give two identical predictions.
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let p = model.predict(&two, 2).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn train_step_produces_finite_grads_everywhere() {
        let mut rng = Rng::new(7);
        let mut model = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        let mut xrng = Rng::new(8);
        let x_data: Vec<f32> = (0..4 * 8 * 64).map(|_| xrng.normal() as f32).collect();
        let y_data: Vec<f32> = (0..4).map(|_| xrng.normal() as f32).collect();

        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(x_data, &[4, 8, 64], false).unwrap();
        let (pred, bound) = model.forward_train(&mut tape, x, &mut Rng::new(1)).unwrap();
        assert_eq!(tape.shape(pred), &[4, 1]);
        let y = tape.leaf(y_data, &[4, 1], false).unwrap();
        let diff = tape.sub(pred, y).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape);
        assert_eq!(grads.len(), model.param_tensor_count());
        for g in &grads {
            assert!(g.iter().all(|v| v.is_finite()));
        }
        assert!(tape.data(loss)[0].is_finite());
    }

    #[test]
    fn zeroed_model_with_head_bias_predicts_a_constant() {
        // The mean-predictor baseline: zero body, constant head.
        let mut rng = Rng::new(13);
        let mut model = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        model.visit_params_mut(&mut |p| p.data.iter_mut().for_each(|v| *v = 0.0));
        model.head_bias.data[0] = 42.5;
        let mut xrng = Rng::new(14);
        let x: Vec<f32> = (0..3 * 8 * 64).map(|_| xrng.normal() as f32).collect();
        let preds = model.predict(&x, 3).unwrap();
        assert!(preds.iter().all(|&p| p == 42.5), "{:?}", preds);
    }

    #[test]
    fn wrong_input_shape_names_expected_extents() {
        let mut rng = Rng::new(10);
        let model = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(vec![0.0f32; 7 * 64], &[1, 7, 64], false).unwrap();
        let err = model.forward_eval(&mut tape, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("8 x 64"), "{}", msg);
    }

    #[test]
    fn stem_pool_halves_time_extent_and_blocks_preserve_it() {
        let mut rng = Rng::new(11);
        let mut model = AicrnModel::<f32>::build(tiny_config(), &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let x = tape
            .leaf(vec![0.25f32; 2 * 8 * 64], &[2, 8, 64], false)
            .unwrap();
        // Run the stem by hand to observe the pooled extent.
        let mut bound = BoundParams::new();
        let h = model.stem_conv1.forward(&mut tape, x, &mut bound).unwrap();
        let h = model
            .stem_bn1
            .forward_train(&mut tape, h, &mut bound)
            .unwrap();
        let h = leaky_relu(&mut tape, h, 0.1);
        let h = model.stem_conv2.forward(&mut tape, h, &mut bound).unwrap();
        let h = model
            .stem_bn2
            .forward_train(&mut tape, h, &mut bound)
            .unwrap();
        let h = leaky_relu(&mut tape, h, 0.1);
        let pooled = tape.avg_pool1d(h, 2).unwrap();
        assert_eq!(tape.shape(pooled), &[2, 8, 32]);
        let after = model.blocks[0]
            .forward_train(&mut tape, pooled, &mut bound)
            .unwrap();
        assert_eq!(tape.shape(after), &[2, 8, 32]);
    }

    #[test]
    fn whole_zeroed_stack_is_identity_on_nonnegative_input() {
        let mut rng = Rng::new(12);
        let mut model = AicrnModel::<f64>::build(tiny_config(), &mut rng).unwrap();
        model.zero_residual_branches();
        let data: Vec<f64> = (0..3 * 8 * 16).map(|i| (i % 5) as f64).collect();
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(data.clone(), &[3, 8, 16], false).unwrap();
        let mut bound = BoundParams::new();
        let mut h = x;
        for block in &mut model.blocks {
            h = block.forward_train(&mut tape, h, &mut bound).unwrap();
        }
        assert_eq!(tape.data(h), data.as_slice());
        // Sanity: a mean over the result is the mean of the input.
        let m = tape.reduce(h, 2, ReduceKind::Mean).unwrap();
        assert!(tape.data(m).iter().all(|v| v.is_finite()));
    }
}
