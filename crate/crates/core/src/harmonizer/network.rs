use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HarmonizerError, Result};

/// Fully connected rectifier network on single-channel H x W inputs.
/// `weights[l]` has shape (out, in); the last layer emits class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetwork {
    pub input_shape: (usize, usize),
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations cached by the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    /// a[0] = flattened input, a[l+1] = relu(z[l]) for hidden layers
    pub a: Vec<Array1<f64>>,
    /// pre-activations for every layer, the last one being the logits
    pub z: Vec<Array1<f64>>,
}

impl Forward {
    pub fn logits(&self) -> &Array1<f64> {
        self.z.last().expect("at least one layer")
    }

    /// Rectifier derivative of hidden layer `l`.
    pub fn mask(&self, l: usize) -> Array1<f64> {
        self.z[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }
}

impl ToyNetwork {
    /// Assemble a network from explicit parameters. A network without hidden
    /// layers is accepted here (it reduces to a linear map).
    pub fn from_params(
        input_shape: (usize, usize),
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let net = Self {
            input_shape,
            weights,
            biases,
        };
        net.validate()?;
        Ok(net)
    }

    /// He-initialized network with at least one hidden layer; biases start at 0.
    pub fn random<R: Rng + ?Sized>(
        input_shape: (usize, usize),
        hidden: &[usize],
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(HarmonizerError::Invalid(
                "need at least one hidden layer".into(),
            ));
        }
        let mut sizes = vec![input_shape.0 * input_shape.1];
        sizes.extend_from_slice(hidden);
        sizes.push(n_classes);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let scale = (2.0 / pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((pair[1], pair[0]), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            }));
            biases.push(Array1::zeros(pair[1]));
        }
        Self::from_params(input_shape, weights, biases)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(HarmonizerError::Invalid(
                "weights and biases must be non-empty and paired".into(),
            ));
        }
        let mut fan_in = self.input_shape.0 * self.input_shape.1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.ncols() != fan_in || w.nrows() != b.len() {
                return Err(HarmonizerError::Shape(format!(
                    "layer {l}: weight {:?} and bias {} do not chain from {fan_in} inputs",
                    w.dim(),
                    b.len()
                )));
            }
            fan_in = w.nrows();
        }
        if fan_in < 2 {
            return Err(HarmonizerError::Invalid("need at least two classes".into()));
        }
        let finite = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(HarmonizerError::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.weights.last().map_or(0, |w| w.nrows())
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Weights of every layer followed by its bias, row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(HarmonizerError::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Sum of squared parameters, biases included.
    pub fn weight_decay(&self) -> f64 {
        self.params_flat().iter().map(|v| v * v).sum()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.dim() != self.input_shape {
            return Err(HarmonizerError::Shape(format!(
                "input {:?} does not match network input {:?}",
                x.dim(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        self.check_input(x)?;
        let mut a = vec![Array1::from_iter(x.iter().copied())];
        let mut z = Vec::with_capacity(self.n_layers());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let zl = w.dot(&a[l]) + b;
            if l + 1 < self.n_layers() {
                a.push(zl.mapv(|v| v.max(0.0)));
            }
            z.push(zl);
        }
        Ok(Forward { a, z })
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.logits().clone())
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax(&logits))
    }

    /// Back-propagated signals for the logit of `class_id`:
    /// `r[l]` is the gradient with respect to `z[l]`, and the returned input
    /// gradient is `W_0^T r[0]`.
    pub(crate) fn logit_backward(
        &self,
        fwd: &Forward,
        class_id: usize,
    ) -> (Vec<Array1<f64>>, Array1<f64>) {
        let n = self.n_layers();
        let mut r = vec![Array1::zeros(0); n];
        let mut top = Array1::zeros(self.n_classes());
        top[class_id] = 1.0;
        r[n - 1] = top;
        for l in (1..n).rev() {
            let q = self.weights[l].t().dot(&r[l]);
            r[l - 1] = q * fwd.mask(l - 1);
        }
        let g = self.weights[0].t().dot(&r[0]);
        (r, g)
    }

    /// Gradient of the `class_id` logit with respect to the input, as an H x W map.
    pub fn input_gradient(&self, x: ArrayView2<'_, f64>, class_id: usize) -> Result<Array2<f64>> {
        if class_id >= self.n_classes() {
            return Err(HarmonizerError::Invalid(format!(
                "class {class_id} out of range for {} classes",
                self.n_classes()
            )));
        }
        let fwd = self.forward(x)?;
        let (_, g) = self.logit_backward(&fwd, class_id);
        Ok(g.into_shape_with_order(self.input_shape)
            .expect("input size"))
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    pub inputs: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl ToyBatch {
    pub fn new(inputs: Vec<Array2<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(HarmonizerError::Shape(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate_for(&self, net: &ToyNetwork) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= net.n_classes()) {
            return Err(HarmonizerError::Invalid(format!(
                "label {bad} out of range for {} classes",
                net.n_classes()
            )));
        }
        if let Some(x) = self.inputs.iter().find(|x| x.dim() != net.input_shape) {
            return Err(HarmonizerError::Shape(format!(
                "input {:?} does not match network input {:?}",
                x.dim(),
                net.input_shape
            )));
        }
        Ok(())
    }
}

/// Fraction of correctly classified items.
pub fn accuracy(net: &ToyNetwork, batch: &ToyBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(HarmonizerError::Invalid("empty batch".into()));
    }
    let mut correct = 0usize;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        if net.predict(x.view())? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn linear_gradient_is_weight_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randn(&mut rng, 3, 6);
        let net = ToyNetwork::from_params((2, 3), vec![w.clone()], vec![Array1::zeros(3)]).unwrap();
        let g = net.input_gradient(randn(&mut rng, 2, 3).view(), 1).unwrap();
        assert_eq!(g.iter().copied().collect::<Vec<_>>(), w.row(1).to_vec());
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ToyNetwork::random((3, 3), &[4], 2, &mut rng).unwrap();
        let zeros = vec![0.0; net.n_params()];
        net.set_params_flat(&zeros).unwrap();
        let g = net.input_gradient(randn(&mut rng, 3, 3).view(), 0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 20 {
            let net = ToyNetwork::random((3, 4), &[6], 3, &mut rng).unwrap();
            let x = randn(&mut rng, 3, 4);
            let fwd = net.forward(x.view()).unwrap();
            if fwd.z[0].iter().any(|v| v.abs() < 1e-2) {
                continue;
            }
            let class = rng.random_range(0..3);
            let g = net.input_gradient(x.view(), class).unwrap();
            let h = 1e-4;
            let mut num = Array2::zeros((3, 4));
            for idx in ndarray::indices((3, 4)) {
                let mut p = x.clone();
                p[idx] += h;
                let mut m = x.clone();
                m[idx] -= h;
                num[idx] = (net.logits(p.view()).unwrap()[class]
                    - net.logits(m.view()).unwrap()[class])
                    / (2.0 * h);
            }
            let diff = (&g - &num).mapv(|v| v * v).sum().sqrt();
            let scale = g
                .mapv(|v| v * v)
                .sum()
                .sqrt()
                .max(num.mapv(|v| v * v).sum().sqrt())
                .max(1e-12);
            assert!(diff / scale <= 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ToyNetwork::random((2, 2), &[3, 3], 2, &mut rng).unwrap();
        let flat = net.params_flat();
        assert_eq!(flat.len(), 4 * 3 + 3 + 3 * 3 + 3 + 3 * 2 + 2);
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        net.set_params_flat(&doubled).unwrap();
        assert_eq!(net.params_flat(), doubled);
        assert!(net.set_params_flat(&[1.0]).is_err());
    }

    #[test]
    fn shape_and_label_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ToyNetwork::random((2, 2), &[3], 2, &mut rng).unwrap();
        assert!(net.input_gradient(Array2::zeros((3, 2)).view(), 0).is_err());
        assert!(net.input_gradient(Array2::zeros((2, 2)).view(), 2).is_err());
        let batch = ToyBatch::new(vec![Array2::zeros((2, 2))], vec![5]).unwrap();
        assert!(batch.validate_for(&net).is_err());
        assert!(ToyNetwork::random((2, 2), &[], 2, &mut rng).is_err());
    }
}
