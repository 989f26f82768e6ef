use super::{AutodiffError, Network, Real};

/// Adam moment accumulators for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step_count: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamState<T> {
    /// Zeroed accumulators with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(net: &Network<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = net
            .params()
            .iter()
            .map(|p| vec![T::zero(); p.tensor.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step_count: 0,
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one bias-corrected Adam update using the gradients stored on
    /// the network's parameters.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<(), AutodiffError> {
        if net.params().len() != self.first.len() {
            return Err(AutodiffError::InvalidNetwork(
                "optimizer state belongs to a different network".into(),
            ));
        }
        if let Some(p) = net.params().iter().find(|p| p.tensor.grad.is_none()) {
            return Err(AutodiffError::MissingGradient(p.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let grad = p.tensor.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, value) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *value -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{LayerSpec, Tensor};

    fn scalar_net(weight: f64) -> Network<f64> {
        let layers = vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 1,
                out_features: 1,
            },
        ];
        let mut net = Network::from_parts(
            1,
            layers,
            vec![
                Tensor::new(vec![1, 1], vec![weight]).unwrap(),
                Tensor::zeros(vec![1]),
            ],
        )
        .unwrap();
        net.zero_grad();
        net
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut net = scalar_net(1.0);
        let mut adam = AdamState::new(&net, 1e-4);
        assert!(matches!(
            adam.step(&mut net),
            Err(AutodiffError::MissingGradient(_))
        ));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(0.7);
        let before = net.clone();
        let mut adam = AdamState::new(&net, 1e-4);
        for p in net.params_mut() {
            let n = p.tensor.len();
            p.tensor.set_grad(vec![0.0; n]).unwrap();
        }
        adam.step(&mut net).unwrap();
        assert_eq!(adam.step_count(), 1);
        for (a, b) in net.params().iter().zip(before.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // g = 1, t = 1: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        // update = lr * 1 / (1 + 1e-8).
        let mut net = scalar_net(0.5);
        let mut adam = AdamState::new(&net, 1e-4);
        net.params_mut()[0].tensor.set_grad(vec![1.0]).unwrap();
        net.params_mut()[1].tensor.set_grad(vec![0.0]).unwrap();
        adam.step(&mut net).unwrap();
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((net.params()[0].tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn descends_convex_quadratic() {
        // loss(w) = sum (w - 3)^2 on a 4-element linear head
        let layers = vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 4,
                out_features: 1,
            },
        ];
        let mut net = Network::<f64>::new(4, layers, 3).unwrap();
        let loss = |n: &Network<f64>| {
            n.head_weight()
                .data()
                .iter()
                .map(|w| (w - 3.0).powi(2))
                .sum::<f64>()
        };
        let start = loss(&net);
        let mut adam = AdamState::new(&net, 1e-2);
        for _ in 0..100 {
            let g: Vec<f64> = net
                .head_weight()
                .data()
                .iter()
                .map(|w| 2.0 * (w - 3.0))
                .collect();
            net.params_mut()[0].tensor.set_grad(g).unwrap();
            net.params_mut()[1].tensor.set_grad(vec![0.0]).unwrap();
            adam.step(&mut net).unwrap();
        }
        assert!(loss(&net) < start);
    }
}
