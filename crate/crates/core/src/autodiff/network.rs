use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Graph, Real, Tensor, Var};

/// One entry of a network's layer manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool2 => "avg_pool2",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// CNN whose last two layers are global-average-pool and a single linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    input_channels: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Param<T>>,
    /// For every layer, the index of its first parameter (if any).
    param_offsets: Vec<Option<usize>>,
}

/// Variables produced by running a network inside a caller-owned graph.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub params: Vec<Var>,
    /// Input to the global-average-pool layer.
    pub features: Var,
    pub logits: Var,
}

/// A recorded forward pass that can be back-propagated.
#[derive(Debug)]
pub struct Pass<T> {
    pub graph: Graph<T>,
    pub input: Var,
    pub vars: NetVars,
}

impl<T: Real> Pass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.vars.logits)
    }

    pub fn features(&self) -> &Tensor<T> {
        self.graph.value(self.vars.features)
    }

    pub fn loss(
        &mut self,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var, AutodiffError> {
        self.graph
            .softmax_cross_entropy(self.vars.logits, labels, class_weights)
    }
}

fn validate_layers(input_channels: usize, layers: &[LayerSpec]) -> Result<usize, AutodiffError> {
    let n = layers.len();
    if n < 2
        || layers[n - 2] != LayerSpec::GlobalAvgPool
        || !matches!(layers[n - 1], LayerSpec::Linear { .. })
    {
        return Err(AutodiffError::InvalidNetwork(
            "the last two layers must be global_avg_pool then linear".into(),
        ));
    }
    let mut channels = input_channels;
    let mut flat = false;
    for (i, layer) in layers.iter().enumerate() {
        let bad = |detail: String| AutodiffError::LayerShape {
            index: i,
            layer: layer.name().into(),
            detail,
        };
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if flat || in_channels != channels {
                    return Err(bad(format!(
                        "expects {in_channels} channels, receives {channels}"
                    )));
                }
                if kernel % 2 == 0 || out_channels == 0 {
                    return Err(bad("kernel must be odd and out_channels positive".into()));
                }
                channels = out_channels;
            }
            LayerSpec::Relu | LayerSpec::AvgPool2 => {
                if flat {
                    return Err(bad("spatial layer after global pooling".into()));
                }
            }
            LayerSpec::GlobalAvgPool => {
                if i != n - 2 {
                    return Err(bad("global pooling must directly precede the head".into()));
                }
                flat = true;
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if i != n - 1 {
                    return Err(bad("only one linear layer is allowed, as the head".into()));
                }
                if in_features != channels || out_features == 0 {
                    return Err(bad(format!(
                        "expects {in_features} features, receives {channels}"
                    )));
                }
            }
        }
    }
    Ok(channels)
}

/// Subtracts each column's mean from a row-major `rows x cols` matrix.
fn center_rows(data: &mut [f64], rows: usize, cols: usize) {
    if rows < 2 {
        return;
    }
    for c in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            data[r * cols + c] -= mean;
        }
    }
}

impl<T: Real> Network<T> {
    /// Builds a network with seeded uniform fan-in initialization
    /// (`U(-sqrt(6/fan_in), sqrt(6/fan_in))` for convolutions,
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))` for the head, zero biases).
    /// Head columns are centered across classes, so the logits start with
    /// zero sum. With two classes the cross-entropy gradients of the two head
    /// rows are exact negatives, Adam preserves that, and the logits of a
    /// trained pair classifier stay antisymmetric. Their raw values then
    /// measure the margin instead of an arbitrary per-network offset.
    pub fn new(
        input_channels: usize,
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self, AutodiffError> {
        validate_layers(input_channels, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut param_offsets = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                param_offsets.push(None);
                continue;
            }
            param_offsets.push(Some(params.len()));
            let (fan_in, gain) = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => (in_channels * kernel * kernel, 6.0),
                LayerSpec::Linear { in_features, .. } => (in_features, 1.0),
                _ => unreachable!(),
            };
            let bound = (gain / fan_in as f64).sqrt();
            let weight_shape = shapes[0].clone();
            let count: usize = weight_shape.iter().product();
            let mut data: Vec<f64> = (0..count)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            if let LayerSpec::Linear {
                in_features,
                out_features,
            } = *layer
            {
                center_rows(&mut data, out_features, in_features);
            }
            let data = data.into_iter().map(T::of).collect();
            params.push(Param {
                name: format!("{}{}.weight", layer.name(), i),
                tensor: Tensor::new(weight_shape, data)?,
            });
            params.push(Param {
                name: format!("{}{}.bias", layer.name(), i),
                tensor: Tensor::zeros(shapes[1].clone()),
            });
        }
        Ok(Self {
            input_channels,
            layers,
            params,
            param_offsets,
        })
    }

    /// Conv blocks (3x3 conv, relu, 2x2 average pool) of the given widths,
    /// then global-average-pool and a linear head.
    pub fn small_cnn(
        input_channels: usize,
        widths: &[usize],
        classes: usize,
        seed: u64,
    ) -> Result<Self, AutodiffError> {
        let mut layers = Vec::new();
        let mut c = input_channels;
        for &w in widths {
            layers.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: w,
                kernel: 3,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool2);
            c = w;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear {
            in_features: c,
            out_features: classes,
        });
        Self::new(input_channels, layers, seed)
    }

    /// Reassembles a network from a manifest and parameter tensors.
    pub fn from_parts(
        input_channels: usize,
        layers: Vec<LayerSpec>,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self, AutodiffError> {
        let mut net = Self::new(input_channels, layers, 0)?;
        if tensors.len() != net.params.len() {
            return Err(AutodiffError::InvalidNetwork(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in net.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(AutodiffError::InvalidNetwork(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(net)
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn head_class_count(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Head weight matrix `[classes, feature_channels]`.
    pub fn head_weight(&self) -> &Tensor<T> {
        &self.params[self.params.len() - 2].tensor
    }

    pub fn head_bias(&self) -> &Tensor<T> {
        &self.params[self.params.len() - 1].tensor
    }

    pub fn head_bias_mut(&mut self) -> &mut Tensor<T> {
        let n = self.params.len();
        &mut self.params[n - 1].tensor
    }

    pub fn head_weight_mut(&mut self) -> &mut Tensor<T> {
        let n = self.params.len();
        &mut self.params[n - 2].tensor
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input_channels: self.input_channels,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            param_offsets: self.param_offsets.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Records the network on `graph` starting from `input`.
    pub fn forward_on(
        &self,
        graph: &mut Graph<T>,
        input: Var,
        param_grads: bool,
    ) -> Result<NetVars, AutodiffError> {
        let shape = graph.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.input_channels {
            return Err(AutodiffError::LayerShape {
                index: 0,
                layer: "input".into(),
                detail: format!("expected [N,{},H,W], got {:?}", self.input_channels, shape),
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.tensor.clone(), param_grads))
            .collect();
        let mut x = input;
        let mut features = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: AutodiffError| match e {
                AutodiffError::Shape(detail) => AutodiffError::LayerShape {
                    index: i,
                    layer: layer.name().into(),
                    detail,
                },
                other => other,
            };
            x = match layer {
                LayerSpec::Conv2d { .. } => {
                    let o = self.param_offsets[i].expect("conv has params");
                    graph.conv2d(x, params[o], params[o + 1]).map_err(wrap)?
                }
                LayerSpec::Relu => graph.relu(x),
                LayerSpec::AvgPool2 => graph.avg_pool2(x).map_err(wrap)?,
                LayerSpec::GlobalAvgPool => {
                    features = Some(x);
                    graph.global_avg_pool(x).map_err(wrap)?
                }
                LayerSpec::Linear { .. } => {
                    let o = self.param_offsets[i].expect("linear has params");
                    graph.linear(x, params[o], params[o + 1]).map_err(wrap)?
                }
            };
        }
        Ok(NetVars {
            params,
            features: features.expect("validated head"),
            logits: x,
        })
    }

    /// Forward pass over a `[N,C,H,W]` batch, retaining every activation.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Pass<T>, AutodiffError> {
        self.forward_with(batch, false)
    }

    /// Like [`Network::forward`], optionally tracking the input gradient.
    pub fn forward_with(
        &self,
        batch: &Tensor<T>,
        input_grad: bool,
    ) -> Result<Pass<T>, AutodiffError> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone(), input_grad);
        let vars = self.forward_on(&mut graph, input, true)?;
        Ok(Pass { graph, input, vars })
    }

    /// Logits only, without parameter gradient tracking.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone(), false);
        let vars = self.forward_on(&mut graph, input, false)?;
        Ok(graph.value(vars.logits).clone())
    }

    /// Back-propagates `loss` through `pass` and stores every parameter gradient
    /// in the corresponding tensor's `grad` field.
    pub fn backward(&mut self, pass: &mut Pass<T>, loss: Var) -> Result<(), AutodiffError> {
        if pass.vars.params.len() != self.params.len() {
            return Err(AutodiffError::InvalidNetwork(
                "pass was recorded by a different network".into(),
            ));
        }
        pass.graph.backward(loss)?;
        for (p, &v) in self.params.iter_mut().zip(&pass.vars.params) {
            let g = pass
                .graph
                .grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.tensor.len()]);
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// Global-average-pool plus head applied to pre-pool feature maps.
    pub fn head_logits(&self, features: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        let mut graph = Graph::new();
        let f = graph.leaf(features.clone(), false);
        let w = graph.leaf(self.head_weight().clone(), false);
        let b = graph.leaf(self.head_bias().clone(), false);
        let pooled = graph.global_avg_pool(f)?;
        let logits = graph.linear(pooled, w, b)?;
        Ok(graph.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_constraint_enforced() {
        let bad = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
            },
            LayerSpec::Linear {
                in_features: 2,
                out_features: 2,
            },
        ];
        assert!(matches!(
            Network::<f32>::new(1, bad, 0),
            Err(AutodiffError::InvalidNetwork(_))
        ));
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let layers = vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
            },
            LayerSpec::Conv2d {
                in_channels: 5,
                out_channels: 4,
                kernel: 3,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
            },
        ];
        match Network::<f32>::new(3, layers, 0) {
            Err(AutodiffError::LayerShape { index, layer, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(layer, "conv2d");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn forward_rejects_wrong_input_and_odd_pooling() {
        let net = Network::<f32>::small_cnn(3, &[4, 4], 2, 1).unwrap();
        let wrong_c = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(matches!(
            net.forward(&wrong_c),
            Err(AutodiffError::LayerShape { index: 0, .. })
        ));
        let odd = Tensor::zeros(vec![1, 3, 6, 6]);
        match net.forward(&odd) {
            Err(AutodiffError::LayerShape { layer, .. }) => assert_eq!(layer, "avg_pool2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f32>::small_cnn(3, &[4, 8], 2, 9).unwrap();
        let b = Network::<f32>::small_cnn(3, &[4, 8], 2, 9).unwrap();
        let c = Network::<f32>::small_cnn(3, &[4, 8], 2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn backward_populates_all_param_grads() {
        let mut net = Network::<f64>::small_cnn(1, &[2], 3, 4).unwrap();
        let x = Tensor::filled(vec![2, 1, 4, 4], 0.5);
        let mut pass = net.forward(&x).unwrap();
        let loss = pass.loss(&[0, 2], None).unwrap();
        net.backward(&mut pass, loss).unwrap();
        assert!(net.params().iter().all(|p| p.tensor.grad.is_some()));
    }
}
