//! UNet-3D and Dilated UNet-3D as op graphs.
//!
//! Contracting stage `s` applies two padded 3³ conv + ReLU blocks with
//! `base · 2^s` channels and then halves the extent (2³ max pool or 2³
//! stride-2 conv). The bottleneck doubles the channels once more. Each
//! expanding stage upsamples with a 2³ stride-2 transposed conv, concatenates
//! the matching contracting feature map (skip first), and applies two conv +
//! ReLU blocks. A 1³ conv maps to the class channels, followed by softmax.
//!
//! The dilated variant replaces the bottleneck's second conv with a chain of
//! 3³ convs at increasing dilation whose ReLU outputs are summed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TensorError};
use crate::field::SoftmaxField;
use crate::graph::{NodeId, Op, OpGraph, ParamId, ParamStore};
use crate::ops::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    MaxPool,
    StridedConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub downsample: DownsampleMode,
    pub dilated_bottleneck: bool,
    pub bottleneck_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            out_classes: 2,
            downsample: DownsampleMode::StridedConv,
            dilated_bottleneck: false,
            bottleneck_dilations: vec![1, 2, 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.depth < 1 {
            return fail("depth must be at least 1");
        }
        if self.base_channels < 1 {
            return fail("base_channels must be at least 1");
        }
        if self.in_channels < 1 {
            return fail("in_channels must be at least 1");
        }
        if self.out_classes < 2 {
            return fail("out_classes must be at least 2");
        }
        if self.dilated_bottleneck {
            if self.bottleneck_dilations.is_empty() {
                return fail("bottleneck_dilations must be non-empty for a dilated bottleneck");
            }
            if self.bottleneck_dilations.contains(&0) {
                return fail("dilation rates must be at least 1");
            }
        }
        Ok(())
    }

    /// Channels of contracting stage `stage`; `stage == depth` is the bottleneck.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial divisor every input extent must satisfy.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// Receptive field of the dilated chain along one axis: `1 + Σ 2·d`.
    pub fn bottleneck_receptive_field(&self) -> usize {
        1 + self.bottleneck_dilations.iter().map(|d| 2 * d).sum::<usize>()
    }

    /// Checks an input spatial extent against the divisibility and
    /// receptive-field preconditions.
    pub fn check_input(&self, spatial: [usize; 3]) -> Result<(), ModelError> {
        let div = self.divisor();
        for (axis, e) in ["D", "H", "W"].into_iter().zip(spatial) {
            if e % div != 0 {
                return Err(ModelError::Indivisible {
                    axis,
                    extent: e,
                    divisor: div,
                    suggested: e.div_ceil(div) * div,
                });
            }
            if self.dilated_bottleneck {
                let rf = self.bottleneck_receptive_field();
                if e / div < rf {
                    return Err(ModelError::ReceptiveField {
                        axis,
                        extent: e / div,
                        receptive_field: rf,
                        min_input: rf * div,
                    });
                }
            }
        }
        Ok(())
    }
}

/// A UNet op graph with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    graph: OpGraph<T>,
    params: ParamStore<T>,
    skips: Vec<NodeId>,
}

struct Builder<T> {
    graph: OpGraph<T>,
    params: ParamStore<T>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        self.graph.push(op, inputs).expect("builder emits well-formed nodes")
    }

    fn conv_params(&mut self, name: &str, shape: [usize; 5], bias: usize) -> (ParamId, ParamId) {
        let w = self.params.push(format!("{name}.weight"), Tensor::zeros(shape.to_vec()));
        let b = self.params.push(format!("{name}.bias"), Tensor::zeros(vec![bias]));
        (w, b)
    }

    fn conv(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> NodeId {
        let (weight, bias) = self.conv_params(name, [cout, cin, k, k, k], cout);
        self.add(Op::Conv3d { weight, bias, geom }, &[x])
    }

    fn conv_relu(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, dilation: usize) -> NodeId {
        let c = self.conv(name, x, cin, cout, 3, ConvGeom::same3(dilation));
        self.add(Op::Relu, &[c])
    }

    fn up(&mut self, name: &str, x: NodeId, cin: usize, cout: usize) -> NodeId {
        let (weight, bias) = self.conv_params(name, [cin, cout, 2, 2, 2], cout);
        self.add(Op::ConvTranspose3d { weight, bias, stride: 2 }, &[x])
    }
}

impl<T: Scalar> Model<T> {
    /// Builds the graph with all-zero parameters; see [`Model::init_params`].
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            graph: OpGraph::new(),
            params: ParamStore::new(),
        };
        let mut h = b.add(Op::Input, &[]);
        let mut cin = config.in_channels;
        let mut skips = Vec::with_capacity(config.depth);

        for s in 0..config.depth {
            let c = config.stage_channels(s);
            h = b.conv_relu(&format!("enc{s}.conv1"), h, cin, c, 1);
            h = b.conv_relu(&format!("enc{s}.conv2"), h, c, c, 1);
            skips.push(h);
            h = match config.downsample {
                DownsampleMode::MaxPool => b.add(Op::MaxPool3d { window: 2 }, &[h]),
                DownsampleMode::StridedConv => b.conv(&format!("enc{s}.down"), h, c, c, 2, ConvGeom::new(2, 0, 1)),
            };
            cin = c;
        }

        let cb = config.stage_channels(config.depth);
        h = b.conv_relu("bottleneck.conv1", h, cin, cb, 1);
        if config.dilated_bottleneck {
            let mut sum: Option<NodeId> = None;
            for (j, &d) in config.bottleneck_dilations.iter().enumerate() {
                h = b.conv_relu(&format!("bottleneck.conv{}", j + 2), h, cb, cb, d);
                sum = Some(match sum {
                    None => h,
                    Some(acc) => b.add(Op::Add, &[acc, h]),
                });
            }
            h = sum.expect("non-empty dilation list");
        } else {
            h = b.conv_relu("bottleneck.conv2", h, cb, cb, 1);
        }

        let mut c_up = cb;
        for s in (0..config.depth).rev() {
            let c = config.stage_channels(s);
            let u = b.up(&format!("dec{s}.up"), h, c_up, c);
            let cat = b.add(Op::Concat, &[skips[s], u]);
            h = b.conv_relu(&format!("dec{s}.conv1"), cat, 2 * c, c, 1);
            h = b.conv_relu(&format!("dec{s}.conv2"), h, c, c, 1);
            c_up = c;
        }

        let logits = b.conv("head", h, c_up, config.out_classes, 1, ConvGeom::new(1, 0, 1));
        b.add(Op::SoftmaxChannels, &[logits]);

        Ok(Self {
            config,
            graph: b.graph,
            params: b.params,
            skips,
        })
    }

    /// [`Model::build`] with the dilated bottleneck enabled.
    pub fn build_dilated(mut config: ModelConfig) -> Result<Self, ModelError> {
        config.dilated_bottleneck = true;
        Self::build(config)
    }

    /// He-normal weights (variance `2 / fan_in`) and zero biases, fully
    /// determined by `seed`.
    ///
    /// For transposed convs `fan_in` counts the taps that reach one output
    /// voxel, `Cin · (k / stride)³`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_ins: Vec<(ParamId, usize)> = self
            .graph
            .nodes()
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv3d { weight, .. } => {
                    let s = self.params.get(weight).shape();
                    Some((weight, s[1] * s[2] * s[3] * s[4]))
                }
                Op::ConvTranspose3d { weight, stride, .. } => {
                    let s = self.params.get(weight).shape();
                    let per_axis = s[2].div_ceil(stride);
                    Some((weight, s[0] * per_axis.pow(3)))
                }
                _ => None,
            })
            .collect();
        for (id, value) in self.params.values_mut().iter_mut().enumerate() {
            match fan_ins.iter().find(|(w, _)| *w == id) {
                Some(&(_, fan_in)) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in value.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = T::from_f64_lossy(z * std);
                    }
                }
                None => value.data_mut().fill(T::zero()),
            }
        }
        self.graph.clear_cache();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &OpGraph<T> {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.graph.clear_cache();
        &mut self.params
    }

    /// Contracting-path feature maps that feed skip connections, shallowest first.
    pub fn skip_nodes(&self) -> &[NodeId] {
        &self.skips
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), ModelError> {
        let [_, c, d, h, w] = batch.dims5("forward")?;
        if c != self.config.in_channels {
            return Err(TensorError::AxisMismatch {
                op: "forward",
                axis: "C",
                expected: self.config.in_channels,
                actual: c,
            }
            .into());
        }
        self.config.check_input([d, h, w])
    }

    /// Forward pass that caches activations for [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<SoftmaxField<T>, ModelError> {
        self.check_batch(batch)?;
        let out = self.graph.forward(&self.params, batch)?;
        Ok(SoftmaxField::new(out.clone())?)
    }

    /// Inference without caching.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<SoftmaxField<T>, ModelError> {
        self.check_batch(batch)?;
        Ok(SoftmaxField::new(self.graph.evaluate(&self.params, batch)?)?)
    }

    /// Inference with the output of `node` replaced by zeros.
    pub fn predict_ablated(&self, batch: &Tensor<T>, node: NodeId) -> Result<SoftmaxField<T>, ModelError> {
        self.check_batch(batch)?;
        let out = self.graph.evaluate_with(&self.params, batch, |id, t| {
            if id == node {
                t.data_mut().fill(T::zero());
            }
        })?;
        Ok(SoftmaxField::new(out)?)
    }

    /// Parameter gradients given the loss gradient w.r.t. the softmax output.
    pub fn backward(&self, loss_grad: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        Ok(self.graph.backward(&self.params, loss_grad)?)
    }

    /// Signature of the non-smooth op states in the last cached forward pass.
    pub fn activation_signature(&self) -> Option<u64> {
        self.graph.activation_signature()
    }

    /// The same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut m = Model::<U>::build(self.config.clone()).expect("config already validated");
        m.params = self.params.cast();
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, base: usize) -> ModelConfig {
        ModelConfig {
            depth,
            base_channels: base,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn channel_doubling() {
        let m = Model::<f32>::build(cfg(2, 8)).unwrap();
        let p = m.params();
        assert_eq!(p.by_name("enc0.conv2.weight").unwrap().shape()[0], 8);
        assert_eq!(p.by_name("enc1.conv2.weight").unwrap().shape()[0], 16);
        assert_eq!(p.by_name("bottleneck.conv2.weight").unwrap().shape()[0], 32);
        assert_eq!(p.by_name("dec0.conv1.weight").unwrap().shape(), &[8, 16, 3, 3, 3]);
        assert_eq!(p.by_name("head.weight").unwrap().shape(), &[2, 8, 1, 1, 1]);
    }

    #[test]
    fn conv_layer_parameter_count() {
        let m = Model::<f32>::build(cfg(2, 8)).unwrap();
        let p = m.params();
        let (cout, cin) = (16, 8);
        let n = p.by_name("enc1.conv1.weight").unwrap().len() + p.by_name("enc1.conv1.bias").unwrap().len();
        assert_eq!(n, cout * cin * 27 + cout);
    }

    #[test]
    fn strided_conv_replaces_pooling() {
        let strided = Model::<f32>::build(cfg(2, 4)).unwrap();
        assert!(strided.params().by_name("enc0.down.weight").is_some());
        assert!(!strided.graph().nodes().iter().any(|n| matches!(n.op, Op::MaxPool3d { .. })));
        let pooled = Model::<f32>::build(ModelConfig {
            downsample: DownsampleMode::MaxPool,
            ..cfg(2, 4)
        })
        .unwrap();
        assert!(pooled.params().by_name("enc0.down.weight").is_none());
        assert_eq!(
            pooled.graph().nodes().iter().filter(|n| matches!(n.op, Op::MaxPool3d { .. })).count(),
            2
        );
    }

    #[test]
    fn single_unit_dilation_equals_plain_bottleneck() {
        let plain = Model::<f32>::build(cfg(2, 4)).unwrap();
        let dilated = Model::<f32>::build_dilated(ModelConfig {
            bottleneck_dilations: vec![1],
            ..cfg(2, 4)
        })
        .unwrap();
        assert_eq!(plain.graph().nodes(), dilated.graph().nodes());
        assert_eq!(plain.params().names(), dilated.params().names());
        for (a, b) in plain.params().values().iter().zip(dilated.params().values()) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn receptive_field_recurrence() {
        let c = ModelConfig {
            dilated_bottleneck: true,
            ..cfg(2, 4)
        };
        assert_eq!(c.bottleneck_receptive_field(), 15);
        let err = c.check_input([32, 32, 32]).unwrap_err();
        assert!(matches!(err, ModelError::ReceptiveField { min_input: 60, .. }), "{err}");
        let shallow = ModelConfig { depth: 1, ..c };
        assert!(shallow.check_input([32, 32, 32]).is_ok());
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let mut m = Model::<f32>::build(cfg(2, 2)).unwrap();
        let err = m.forward(&Tensor::zeros(vec![1, 1, 30, 30, 30])).unwrap_err();
        assert!(matches!(err, ModelError::Indivisible { divisor: 4, suggested: 32, .. }), "{err}");
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let m = Model::<f32>::build(cfg(2, 2)).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 8, 8, 8], |i| (i % 7) as f32);
        let p = m.predict(&x).unwrap();
        assert!(p.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let mut a = Model::<f32>::build(cfg(2, 4)).unwrap();
        let mut b = a.clone();
        a.init_params(11);
        b.init_params(11);
        assert_eq!(a.params(), b.params());
        for (name, t) in a.params().iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        b.init_params(12);
        assert_ne!(a.params(), b.params());
    }
}
