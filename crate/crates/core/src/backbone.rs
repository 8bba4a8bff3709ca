//! Bias-free MLP backbone with an explicit forward trace, a hand-written
//! backward pass and projected weight updates.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{AlphaSchedule, ProjectorState};

const MAGIC: &[u8; 4] = b"CLDN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Identity => x.clone(),
        }
    }

    /// Multiplies `grad` in place by the derivative at `pre`.
    fn backprop(self, pre: &Array2<f64>, grad: &mut Array2<f64>) {
        if let Activation::Relu = self {
            grad.zip_mut_with(pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
        }
    }
}

/// Where per-layer HSIC gradients flow during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicRouting {
    /// Through every upstream layer by the chain rule.
    #[default]
    EndToEnd,
    /// Only into the weights of the layer that produced the representation.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_in × d_out` (one extra input row when the bias is augmented).
    pub weights: Array2<f64>,
    pub activation: Activation,
    pub projector: ProjectorState,
}

impl Layer {
    pub fn new(weights: Array2<f64>, activation: Activation, alpha0: f64, schedule: AlphaSchedule) -> Result<Self> {
        let projector = ProjectorState::new(weights.nrows(), alpha0, schedule)?;
        Ok(Layer { weights, activation, projector })
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        alpha0: f64,
        schedule: AlphaSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit));
        Self::new(weights, activation, alpha0, schedule)
    }
}

/// Per-layer pre-activations and representations of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `Z_0 .. Z_L`; `Z_0` is the input batch.
    pub activations: Vec<Array2<f64>>,
    /// `Z_{l-1} θ_l` for each layer.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &Array2<f64> {
        self.activations.last().expect("trace always holds the input")
    }
}

/// Loss gradients injected into the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LossGradients {
    /// `∂L/∂Z_L` from the classifier.
    pub head: Option<Array2<f64>>,
    /// `∂(HSIC terms)/∂Z_l` for `l = 1..L` (index `l - 1`).
    pub hsic: Vec<Option<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub raw: Vec<Array2<f64>>,
    pub projected: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    layers: Vec<Layer>,
    augment_bias: bool,
    projection: bool,
}

impl MlpBackbone {
    /// `dims = [d_0, d_1, .., d_L]`; ReLU on hidden layers, linear output.
    pub fn new(
        dims: &[usize],
        augment_bias: bool,
        alpha0: f64,
        schedule: AlphaSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer dimensions {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last { Activation::Identity } else { Activation::Relu };
                let fan_in = w[0] + augment_bias as usize;
                Layer::init_uniform(fan_in, w[1], act, alpha0, schedule, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpBackbone { layers, augment_bias, projection: true })
    }

    pub fn from_layers(layers: Vec<Layer>, augment_bias: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("backbone needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].weights.ncols() + augment_bias as usize != pair[1].weights.nrows() {
                return Err(Error::Parameter(format!("layer {} output does not chain into layer {}", l + 1, l + 2)));
            }
        }
        Ok(MlpBackbone { layers, augment_bias, projection: true })
    }

    /// Disables gradient projection entirely (plain SGD).
    pub fn with_projection(mut self, enabled: bool) -> Self {
        self.projection = enabled;
        self
    }

    pub fn projection_enabled(&self) -> bool {
        self.projection
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn augment_bias(&self) -> bool {
        self.augment_bias
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows() - self.augment_bias as usize
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    /// `[d_0, .., d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.weights.ncols())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    fn layer_input(&self, z: &Array2<f64>) -> Array2<f64> {
        if self.augment_bias {
            concatenate![Axis(1), *z, Array2::ones((z.nrows(), 1))]
        } else {
            z.clone()
        }
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Parameter(format!(
                "batch has {} features, backbone expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(batch.to_owned());
        for layer in &self.layers {
            let input = self.layer_input(activations.last().unwrap());
            let pre = input.dot(&layer.weights);
            activations.push(layer.activation.apply(&pre));
            pre_activations.push(pre);
        }
        Ok(ForwardTrace { activations, pre_activations })
    }

    /// Embeddings `Z_L` only, computed in chunks of `chunk` rows.
    pub fn embed(&self, inputs: ArrayView2<f64>, chunk: usize) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Parameter(format!(
                "inputs have {} features, backbone expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let mut parts = Vec::new();
        for rows in inputs.axis_chunks_iter(Axis(0), chunk.max(1)) {
            let mut z = rows.to_owned();
            for layer in &self.layers {
                z = layer.activation.apply(&self.layer_input(&z).dot(&layer.weights));
            }
            parts.push(z);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.output_dim())));
        }
        concatenate(Axis(0), &views).map_err(|e| Error::Parameter(e.to_string()))
    }

    /// Chain rule from the injected loss gradients to every weight matrix,
    /// followed by projection (when enabled).
    pub fn backward(&self, trace: &ForwardTrace, grads: &LossGradients, routing: HsicRouting) -> Result<GradientSet> {
        let depth = self.layers.len();
        if trace.pre_activations.len() != depth || trace.activations.len() != depth + 1 {
            return Err(Error::Parameter("trace does not match backbone depth".into()));
        }
        if !grads.hsic.is_empty() && grads.hsic.len() != depth {
            return Err(Error::Parameter(format!("expected {depth} HSIC gradient slots, got {}", grads.hsic.len())));
        }
        let n = trace.activations[0].nrows();
        let check = |g: &Array2<f64>, l: usize| -> Result<()> {
            if g.dim() != (n, self.layers[l].weights.ncols()) {
                return Err(Error::Parameter(format!("gradient for layer {} has shape {:?}", l + 1, g.dim())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(Some(l + 1), "non-finite injected gradient"));
            }
            Ok(())
        };

        let mut upstream = match &grads.head {
            Some(g) => {
                check(g, depth - 1)?;
                g.clone()
            }
            None => Array2::zeros((n, self.output_dim())),
        };
        let mut raw = vec![Array2::zeros((0, 0)); depth];
        let mut projected = vec![Array2::zeros((0, 0)); depth];
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let injected = grads.hsic.get(l).and_then(Option::as_ref);
            if let Some(g) = injected {
                check(g, l)?;
            }
            let (mut propagated, mut local) = match (routing, injected) {
                (HsicRouting::EndToEnd, Some(g)) => (&upstream + g, None),
                (HsicRouting::Local, Some(g)) => (upstream.clone(), Some(&upstream + g)),
                (_, None) => (upstream.clone(), None),
            };
            layer.activation.backprop(&trace.pre_activations[l], &mut propagated);
            if let Some(loc) = local.as_mut() {
                layer.activation.backprop(&trace.pre_activations[l], loc);
            }
            let input = self.layer_input(&trace.activations[l]);
            let signal = local.as_ref().unwrap_or(&propagated);
            let delta = input.t().dot(signal);
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(Some(l + 1), "non-finite weight gradient"));
            }
            if self.projection {
                let p = layer.projector.matrix();
                let (d_in, d_out) = layer.weights.dim();
                // (P Zᵀ) dA costs d_in·n·(d_in + d_out); P (Zᵀ dA) costs d_in²·d_out
                projected[l] = if n * (d_in + d_out) < d_in * d_out {
                    p.dot(&input.t()).dot(signal)
                } else {
                    p.dot(&delta)
                };
            }
            raw[l] = delta;
            if l > 0 {
                let back = propagated.dot(&layer.weights.t());
                let width = self.layers[l - 1].weights.ncols();
                upstream = back.slice(s![.., ..width]).to_owned();
            }
        }
        if !self.projection {
            projected = raw.clone();
        }
        Ok(GradientSet { raw, projected })
    }

    /// `θ_l ← θ_l − λ P_l Δθ_l`; all-or-nothing.
    pub fn apply_update(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.projected.len() != self.layers.len() {
            return Err(Error::Parameter("gradient set does not match backbone depth".into()));
        }
        let mut updated = Vec::with_capacity(self.layers.len());
        for (l, (layer, g)) in self.layers.iter().zip(&grads.projected).enumerate() {
            if g.dim() != layer.weights.dim() {
                return Err(Error::Parameter(format!("gradient for layer {} has shape {:?}", l + 1, g.dim())));
            }
            let mut w = layer.weights.clone();
            w.scaled_add(-lr, g);
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(Some(l + 1), "update produced non-finite weights"));
            }
            updated.push(w);
        }
        for (layer, w) in self.layers.iter_mut().zip(updated) {
            layer.weights = w;
        }
        Ok(())
    }

    /// Feeds each layer's projector the batch-mean of that layer's input.
    pub fn update_projectors(&mut self, trace: &ForwardTrace) -> Result<()> {
        let inputs: Vec<Array1<f64>> = (0..self.layers.len())
            .map(|l| self.layer_input(&trace.activations[l]).mean_axis(Axis(0)).expect("non-empty batch"))
            .collect();
        for (l, (layer, z)) in self.layers.iter_mut().zip(inputs).enumerate() {
            layer.projector.update(z.view()).map_err(|e| match e {
                Error::Numerical { message, .. } => Error::numerical(Some(l + 1), message),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Feeds each layer's projector every row of that layer's input.
    pub fn update_projectors_per_sample(&mut self, trace: &ForwardTrace) -> Result<()> {
        for l in 0..self.layers.len() {
            let input = self.layer_input(&trace.activations[l]);
            for row in input.outer_iter() {
                self.layers[l].projector.update(row)?;
            }
        }
        Ok(())
    }

    pub fn set_task_progress(&mut self, fraction: f64) {
        for layer in &mut self.layers {
            layer.projector.set_task_progress(fraction);
        }
    }

    pub fn begin_task(&mut self) {
        for layer in &mut self.layers {
            layer.projector.begin_task();
        }
    }

    /// Header `CLDN`, `L`, `d_0..d_L` (u64 LE), then weights and projector
    /// matrices as row-major little-endian f64.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.layers.len() as u64).to_le_bytes())?;
        for d in self.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for m in self.layers.iter().map(|l| &l.weights).chain(self.layers.iter().map(|l| l.projector.matrix())) {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path, alpha0: f64, schedule: AlphaSchedule) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&bytes, alpha0, schedule)
            .map_err(|message| Error::Format { path: path.to_owned(), message })
    }

    /// Parses a checkpoint. Whether inputs carry an augmented bias
    /// coordinate is recovered from the payload length.
    pub fn read_checkpoint(mut bytes: &[u8], alpha0: f64, schedule: AlphaSchedule) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut word = [0u8; 8];
        let mut next = |b: &mut &[u8]| -> std::result::Result<u64, String> {
            b.read_exact(&mut word).map_err(|_| "truncated header".to_string())?;
            Ok(u64::from_le_bytes(word))
        };
        let depth = next(&mut bytes)? as usize;
        if depth == 0 || depth > 1024 {
            return Err(format!("implausible layer count {depth}"));
        }
        let dims = (0..=depth).map(|_| next(&mut bytes).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let payload = |aug: usize| -> usize {
            dims.windows(2).map(|w| (w[0] + aug) * w[1] + (w[0] + aug) * (w[0] + aug)).sum::<usize>() * 8
        };
        let augment = if bytes.len() == payload(0) {
            false
        } else if bytes.len() == payload(1) {
            true
        } else {
            return Err(format!("payload of {} bytes matches neither layout for dims {dims:?}", bytes.len()));
        };
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |rows: usize, cols: usize| -> Array2<f64> {
            Array2::from_shape_vec((rows, cols), values.by_ref().take(rows * cols).collect()).unwrap()
        };
        let weights: Vec<Array2<f64>> = dims.windows(2).map(|w| take(w[0] + augment as usize, w[1])).collect();
        let mut layers = Vec::with_capacity(depth);
        for (l, w) in weights.into_iter().enumerate() {
            let act = if l + 1 == depth { Activation::Identity } else { Activation::Relu };
            let rows = w.nrows();
            let mut layer = Layer::new(w, act, alpha0, schedule).map_err(|e| e.to_string())?;
            layer.projector.set_matrix(take(rows, rows)).map_err(|e| e.to_string())?;
            layers.push(layer);
        }
        MlpBackbone::from_layers(layers, augment).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer::new(Array2::eye(3), Activation::Identity, 0.01, AlphaSchedule::Constant).unwrap();
        let net = MlpBackbone::from_layers(vec![layer], false).unwrap();
        let x = random(4, 3, 1);
        let t = net.forward(x.view()).unwrap();
        assert_eq!(t.activations[1], x);
        assert_eq!(t.activations[0], x);
    }

    #[test]
    fn zero_weights_give_zero_hidden_activations() {
        let mut net = MlpBackbone::new(&[5, 4, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(0)).unwrap();
        for l in net.layers_mut() {
            l.weights.fill(0.0);
        }
        let t = net.forward(random(6, 5, 2).view()).unwrap();
        assert!(t.activations[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let net = MlpBackbone::new(&[5, 7, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(3)).unwrap();
        let x = random(4, 5, 4);
        let t = net.forward(x.view()).unwrap();
        let (w1, w2) = (&net.layers()[0].weights, &net.layers()[1].weights);
        for i in 0..4 {
            let mut h = [0.0; 7];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..5 {
                    s += x[[i, k]] * w1[[k, j]];
                }
                *hj = s.max(0.0);
            }
            for j in 0..3 {
                let mut s = 0.0;
                for (k, hk) in h.iter().enumerate() {
                    s += hk * w2[[k, j]];
                }
                assert!((t.activations[2][[i, j]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = MlpBackbone::new(&[5, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(0)).unwrap();
        assert!(matches!(net.forward(Array2::zeros((2, 4)).view()), Err(Error::Parameter(_))));
    }

    #[test]
    fn no_bias_means_shift_changes_output() {
        let net = MlpBackbone::new(&[3, 2], false, 0.01, AlphaSchedule::Constant, &mut rng(5)).unwrap();
        let x = random(2, 3, 6);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward((&x + 1.0).view()).unwrap();
        assert_ne!(a.activations[1], b.activations[1]);
        // no constant offset exists: a zero input maps to zero
        let z = net.forward(Array2::zeros((1, 3)).view()).unwrap();
        assert!(z.activations[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augmented_bias_adds_a_row() {
        let net = MlpBackbone::new(&[3, 4, 2], true, 0.01, AlphaSchedule::Constant, &mut rng(5)).unwrap();
        assert_eq!(net.layers()[0].weights.dim(), (4, 4));
        assert_eq!(net.layers()[1].weights.dim(), (5, 2));
        assert_eq!(net.layers()[1].projector.dim(), 5);
        assert_eq!(net.dims(), vec![3, 4, 2]);
        let z = net.forward(Array2::zeros((1, 3)).view()).unwrap();
        assert!(z.activations[2].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_gradients_give_zero_updates() {
        let net = MlpBackbone::new(&[4, 3, 2], false, 0.01, AlphaSchedule::Constant, &mut rng(7)).unwrap();
        let t = net.forward(random(5, 4, 8).view()).unwrap();
        let g = net.backward(&t, &LossGradients::default(), HsicRouting::EndToEnd).unwrap();
        assert!(g.raw.iter().chain(&g.projected).all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let net = MlpBackbone::new(&[4, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(9)).unwrap();
        let x = random(5, 4, 10);
        let t = net.forward(x.view()).unwrap();
        let target = random(5, 3, 11);
        // L = ½|Z₁ − T|², ∂L/∂Z₁ = Z₁ − T
        let dz = &t.activations[1] - &target;
        let g = net
            .backward(&t, &LossGradients { head: Some(dz.clone()), hsic: vec![] }, HsicRouting::EndToEnd)
            .unwrap();
        let expected = x.t().dot(&dz);
        for (a, b) in g.raw[0].iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_routing_stops_hsic_gradients() {
        let net = MlpBackbone::new(&[4, 6, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(12)).unwrap();
        let t = net.forward(random(5, 4, 13).view()).unwrap();
        let inj = LossGradients { head: None, hsic: vec![None, Some(random(5, 3, 14))] };
        let local = net.backward(&t, &inj, HsicRouting::Local).unwrap();
        let e2e = net.backward(&t, &inj, HsicRouting::EndToEnd).unwrap();
        assert!(local.raw[0].iter().all(|&v| v == 0.0));
        assert!(e2e.raw[0].iter().any(|&v| v != 0.0));
        assert_eq!(local.raw[1], e2e.raw[1]);
    }

    #[test]
    fn non_finite_injection_names_the_layer() {
        let net = MlpBackbone::new(&[4, 6, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(12)).unwrap();
        let t = net.forward(random(5, 4, 13).view()).unwrap();
        let mut bad = random(5, 6, 1);
        bad[[0, 0]] = f64::NAN;
        let inj = LossGradients { head: None, hsic: vec![Some(bad), None] };
        match net.backward(&t, &inj, HsicRouting::EndToEnd) {
            Err(Error::Numerical { layer: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn update_rules() {
        let mut net = MlpBackbone::new(&[4, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(15)).unwrap();
        let before = net.clone();
        let t = net.forward(random(5, 4, 16).view()).unwrap();
        let g = net
            .backward(&t, &LossGradients { head: Some(random(5, 3, 17)), hsic: vec![] }, HsicRouting::EndToEnd)
            .unwrap();
        net.apply_update(&g, 0.0).unwrap();
        assert_eq!(net, before);
        // identity projector: plain gradient step
        assert_eq!(g.raw, g.projected);
        net.apply_update(&g, 0.1).unwrap();
        let expected = &before.layers()[0].weights - &(0.1 * &g.raw[0]);
        assert_eq!(net.layers()[0].weights, expected);
    }

    #[test]
    fn non_finite_update_is_rolled_back() {
        let mut net = MlpBackbone::new(&[2, 2, 2], false, 0.01, AlphaSchedule::Constant, &mut rng(18)).unwrap();
        let before = net.clone();
        let g = GradientSet {
            raw: vec![Array2::zeros((2, 2)); 2],
            projected: vec![Array2::zeros((2, 2)), array![[f64::INFINITY, 0.0], [0.0, 0.0]]],
        };
        assert!(matches!(net.apply_update(&g, 0.1), Err(Error::Numerical { layer: Some(2), .. })));
        assert_eq!(net, before);
    }

    #[test]
    fn projector_update_uses_layer_inputs() {
        let mut net = MlpBackbone::new(&[3, 2], false, 1e-8, AlphaSchedule::Constant, &mut rng(19)).unwrap();
        let x = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let t = net.forward(x.view()).unwrap();
        net.update_projectors(&t).unwrap();
        let p = net.layers()[0].projector.matrix();
        assert!(p[[0, 0]] < 1e-7);
        assert_eq!(p[[1, 1]], 1.0);
    }

    #[test]
    fn projected_gradient_equals_projector_apply() {
        let mut net = MlpBackbone::new(&[6, 9, 4], false, 0.05, AlphaSchedule::Constant, &mut rng(24)).unwrap();
        for seed in 0..5 {
            let t = net.forward(random(3, 6, 30 + seed).view()).unwrap();
            net.update_projectors_per_sample(&t).unwrap();
        }
        // n = 2 takes the reordered product on both layers, n = 40 the direct one
        for n in [2, 40] {
            let t = net.forward(random(n, 6, 25).view()).unwrap();
            let inj = LossGradients { head: Some(random(n, 4, 26)), hsic: vec![Some(random(n, 9, 27)), None] };
            let g = net.backward(&t, &inj, HsicRouting::EndToEnd).unwrap();
            for (l, layer) in net.layers().iter().enumerate() {
                let direct = layer.projector.apply(g.raw[l].view()).unwrap();
                for (a, b) in direct.iter().zip(g.projected[l].iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for augment in [false, true] {
            let mut net = MlpBackbone::new(&[4, 5, 3], augment, 0.01, AlphaSchedule::Constant, &mut rng(20)).unwrap();
            let t = net.forward(random(6, 4, 21).view()).unwrap();
            net.update_projectors(&t).unwrap();
            let mut buf = vec![];
            net.write_checkpoint(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"CLDN");
            assert_eq!(u64::from_le_bytes(buf[4..12].try_into().unwrap()), 2);
            let back = MlpBackbone::read_checkpoint(&buf, 0.01, AlphaSchedule::Constant).unwrap();
            assert_eq!(back.augment_bias(), augment);
            for (a, b) in back.layers().iter().zip(net.layers()) {
                assert_eq!(a.weights, b.weights);
                assert_eq!(a.projector.matrix(), b.projector.matrix());
            }
            assert!(MlpBackbone::read_checkpoint(&buf[..buf.len() - 8], 0.01, AlphaSchedule::Constant).is_err());
        }
    }

    #[test]
    fn embed_matches_forward() {
        let net = MlpBackbone::new(&[4, 5, 3], false, 0.01, AlphaSchedule::Constant, &mut rng(22)).unwrap();
        let x = random(10, 4, 23);
        let t = net.forward(x.view()).unwrap();
        let e = net.embed(x.view(), 3).unwrap();
        for (a, b) in e.iter().zip(t.embedding().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
