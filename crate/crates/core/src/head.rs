//! Classifier heads on top of the backbone embedding: fixed equiangular
//! basis vectors or a trainable linear layer (optionally projected).

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::config::SoftmaxScope;
use crate::ebv::{self, BasisVectorSet, ClassRegistry};
use crate::error::{Error, Result};
use crate::projector::{AlphaSchedule, ProjectorState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub scope: SoftmaxScope,
    pub scale: f64,
    pub cosine: bool,
}

/// Loss value and gradients of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub loss: f64,
    /// `∂L/∂Z_L`.
    pub embedding: Array2<f64>,
    /// `∂L/∂W` for trainable heads (`d × outputs`).
    pub weights: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub enum Head {
    Basis {
        basis: Arc<BasisVectorSet>,
        registry: ClassRegistry,
    },
    Linear {
        weights: Array2<f64>,
        registry: ClassRegistry,
        projector: Option<ProjectorState>,
    },
}

impl Head {
    pub fn basis(basis: Arc<BasisVectorSet>) -> Self {
        let registry = ClassRegistry::new(basis.capacity());
        Head::Basis { basis, registry }
    }

    /// Linear head with `outputs` units, uniform init; `projector` gives it
    /// projected updates.
    pub fn linear(
        dim: usize,
        outputs: usize,
        projector: Option<(f64, AlphaSchedule)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let limit = (6.0 / (dim + outputs) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((dim, outputs), || rng.gen_range(-limit..limit));
        let projector = projector.map(|(a, s)| ProjectorState::new(dim, a, s)).transpose()?;
        Ok(Head::Linear { weights, registry: ClassRegistry::new(outputs), projector })
    }

    pub fn registry(&self) -> &ClassRegistry {
        match self {
            Head::Basis { registry, .. } | Head::Linear { registry, .. } => registry,
        }
    }

    pub fn bind_classes(&mut self, classes: &[u32]) -> Result<()> {
        match self {
            Head::Basis { registry, .. } | Head::Linear { registry, .. } => registry.bind_classes(classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.outputs_matrix().nrows()
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Head::Basis { .. } => 0,
            Head::Linear { weights, .. } => weights.len(),
        }
    }

    pub fn projector(&self) -> Option<&ProjectorState> {
        match self {
            Head::Linear { projector, .. } => projector.as_ref(),
            Head::Basis { .. } => None,
        }
    }

    fn outputs_matrix(&self) -> &Array2<f64> {
        match self {
            Head::Basis { basis, .. } => basis.vectors(),
            Head::Linear { weights, .. } => weights,
        }
    }

    fn scope_columns(&self, scope: SoftmaxScope, task_classes: &[u32]) -> Result<Vec<usize>> {
        let reg = self.registry();
        let column = |c: &u32| reg.column_of(*c).ok_or(Error::Unbound(*c));
        match scope {
            SoftmaxScope::Task => task_classes.iter().map(column).collect(),
            SoftmaxScope::Seen => reg.classes().iter().map(column).collect(),
            SoftmaxScope::All => Ok((0..reg.capacity()).collect()),
        }
    }

    /// Softmax negative log-likelihood averaged over the batch.
    pub fn loss_and_grad(
        &self,
        embedding: ArrayView2<f64>,
        labels: &[u32],
        task_classes: &[u32],
        opts: ScoreOptions,
    ) -> Result<HeadGradients> {
        let n = embedding.nrows();
        if labels.len() != n || n == 0 {
            return Err(Error::Parameter(format!("{} labels for {n} embeddings", labels.len())));
        }
        let cols = self.scope_columns(opts.scope, task_classes)?;
        let targets = labels
            .iter()
            .map(|l| {
                let c = self.registry().column_of(*l).ok_or(Error::Unbound(*l))?;
                cols.iter()
                    .position(|&k| k == c)
                    .ok_or_else(|| Error::InvalidInput(format!("label {l} is outside the softmax scope")))
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = self.outputs_matrix().select(Axis(1), &cols);

        let (features, norms) = if opts.cosine { normalized_rows(embedding) } else { (embedding.to_owned(), None) };
        let mut probs = features.dot(&outputs) * opts.scale;
        let mut loss = 0.0;
        for (mut row, &t) in probs.outer_iter_mut().zip(&targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        // probs becomes ∂L/∂logits scaled into feature space
        for (mut row, &t) in probs.outer_iter_mut().zip(&targets) {
            row[t] -= 1.0;
        }
        probs *= opts.scale / n as f64;

        let mut grad = probs.dot(&outputs.t());
        if let Some(norms) = &norms {
            for ((mut g, u), &r) in grad.outer_iter_mut().zip(features.outer_iter()).zip(norms) {
                let along = g.dot(&u);
                g.scaled_add(-along, &u);
                g /= r;
            }
        }
        let weights = match self {
            Head::Basis { .. } => None,
            Head::Linear { weights, .. } => {
                let mut full = Array2::zeros(weights.dim());
                let partial = features.t().dot(&probs);
                for (k, &c) in cols.iter().enumerate() {
                    full.column_mut(c).assign(&partial.column(k));
                }
                Some(full)
            }
        };
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(None, "classification loss is not finite"));
        }
        Ok(HeadGradients { loss, embedding: grad, weights })
    }

    /// Scores against every bound class, in binding order.
    pub fn scores(&self, embedding: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Head::Basis { basis, registry } => ebv::logits(embedding, basis, registry),
            Head::Linear { weights, registry, .. } => {
                let cols: Vec<usize> = (0..registry.len()).collect();
                Ok(embedding.dot(&weights.select(Axis(1), &cols)))
            }
        }
    }

    /// Class-incremental prediction over all bound classes.
    pub fn predict(&self, embedding: ArrayView2<f64>) -> Result<Vec<u32>> {
        let classes = self.registry().classes();
        if classes.is_empty() {
            return Err(Error::State("no classes bound".into()));
        }
        let scores = self.scores(embedding)?;
        Ok(ebv::argmax_rows(scores.view()).into_iter().map(|k| classes[k]).collect())
    }

    /// `W ← W − λ·(P) ∂L/∂W`; no-op for the fixed head.
    pub fn apply_update(&mut self, grad: Option<&Array2<f64>>, lr: f64) -> Result<()> {
        if let (Head::Linear { weights, projector, .. }, Some(g)) = (self, grad) {
            let step = match projector {
                Some(p) => p.apply(g.view())?,
                None => g.clone(),
            };
            let updated = &*weights - &(lr * &step);
            if updated.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(None, "head update produced non-finite weights"));
            }
            *weights = updated;
        }
        Ok(())
    }

    pub fn update_projector(&mut self, embedding_mean: ArrayView1<f64>) -> Result<()> {
        if let Head::Linear { projector: Some(p), .. } = self {
            p.update(embedding_mean)?;
        }
        Ok(())
    }

    pub fn begin_task(&mut self) {
        if let Head::Linear { projector: Some(p), .. } = self {
            p.begin_task();
        }
    }

    pub fn set_task_progress(&mut self, fraction: f64) {
        if let Head::Linear { projector: Some(p), .. } = self {
            p.set_task_progress(fraction);
        }
    }
}

fn normalized_rows(z: ArrayView2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let mut out = z.to_owned();
    for (mut row, &r) in out.outer_iter_mut().zip(&norms) {
        row /= r;
    }
    (out, Some(norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebv::generate_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0))
    }

    fn heads() -> Vec<Head> {
        let basis = Arc::new(generate_basis(6, 5, 0.5, 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut out = vec![
            Head::basis(basis),
            Head::linear(6, 5, None, &mut rng).unwrap(),
            Head::linear(6, 5, Some((0.1, AlphaSchedule::Constant)), &mut rng).unwrap(),
        ];
        for h in &mut out {
            h.bind_classes(&[7, 3]).unwrap();
            h.bind_classes(&[1, 9]).unwrap();
        }
        out
    }

    fn numeric_embedding_grad(h: &Head, z: &Array2<f64>, labels: &[u32], task: &[u32], opts: ScoreOptions) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(z.dim());
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                let mut p = z.clone();
                p[[i, j]] += eps;
                let mut m = z.clone();
                m[[i, j]] -= eps;
                let lp = h.loss_and_grad(p.view(), labels, task, opts).unwrap().loss;
                let lm = h.loss_and_grad(m.view(), labels, task, opts).unwrap().loss;
                g[[i, j]] = (lp - lm) / (2.0 * eps);
            }
        }
        g
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let z = random(4, 6, 3);
        let labels = [1, 9, 9, 1];
        for h in heads() {
            for scope in [SoftmaxScope::Task, SoftmaxScope::Seen, SoftmaxScope::All] {
                for cosine in [false, true] {
                    let opts = ScoreOptions { scope, scale: 2.5, cosine };
                    let g = h.loss_and_grad(z.view(), &labels, &[1, 9], opts).unwrap();
                    let num = numeric_embedding_grad(&h, &z, &labels, &[1, 9], opts);
                    for (a, b) in g.embedding.iter().zip(num.iter()) {
                        assert!((a - b).abs() < 1e-7, "{scope:?} {cosine}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let z = random(5, 6, 4);
        let labels = [7, 3, 1, 9, 1];
        let opts = ScoreOptions { scope: SoftmaxScope::Seen, scale: 1.0, cosine: false };
        let h = heads().remove(1);
        let g = h.loss_and_grad(z.view(), &labels, &[1, 9], opts).unwrap().weights.unwrap();
        let Head::Linear { weights, registry, .. } = &h else { unreachable!() };
        let eps = 1e-6;
        for i in 0..weights.nrows() {
            for j in 0..weights.ncols() {
                let shifted = |d: f64| {
                    let mut w = weights.clone();
                    w[[i, j]] += d;
                    let h2 = Head::Linear { weights: w, registry: registry.clone(), projector: None };
                    h2.loss_and_grad(z.view(), &labels, &[1, 9], opts).unwrap().loss
                };
                let num = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                assert!((g[[i, j]] - num).abs() < 1e-7);
            }
        }
        // the unbound fifth output is outside the seen scope
        assert!(g.column(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_outside_scope_or_unbound_are_rejected() {
        let h = heads().remove(0);
        let z = random(1, 6, 5);
        let opts = ScoreOptions { scope: SoftmaxScope::Task, scale: 1.0, cosine: false };
        assert!(matches!(h.loss_and_grad(z.view(), &[7], &[1, 9], opts), Err(Error::InvalidInput(_))));
        assert!(matches!(h.loss_and_grad(z.view(), &[4], &[1, 9], opts), Err(Error::Unbound(4))));
    }

    #[test]
    fn basis_prediction_matches_ebv_predict() {
        let h = heads().remove(0);
        let z = random(20, 6, 6);
        let Head::Basis { basis, registry } = &h else { unreachable!() };
        assert_eq!(h.predict(z.view()).unwrap(), ebv::predict(z.view(), basis, registry).unwrap());
        assert_eq!(h.parameter_count(), 0);
    }

    #[test]
    fn embedding_on_a_basis_vector_is_classified_as_its_class() {
        let h = heads().remove(0);
        let Head::Basis { basis, registry } = &h else { unreachable!() };
        let rows: Vec<_> = registry.classes().iter().map(|c| basis.vectors().column(registry.column_of(*c).unwrap()).to_owned()).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        let z = ndarray::concatenate(Axis(0), &views).unwrap();
        assert_eq!(h.predict(z.view()).unwrap(), registry.classes().to_vec());
    }

    #[test]
    fn projected_head_update_is_annihilated_along_seen_inputs() {
        let mut h = heads().remove(2);
        let mut u = Array1::zeros(6);
        u[0] = 1.0;
        let Head::Linear { projector: Some(p), .. } = &mut h else { unreachable!() };
        *p = ProjectorState::new(6, 1e-9, AlphaSchedule::Constant).unwrap();
        h.update_projector(u.view()).unwrap();
        let before = match &h {
            Head::Linear { weights, .. } => weights.clone(),
            _ => unreachable!(),
        };
        let mut g = Array2::zeros((6, 5));
        g.row_mut(0).fill(1.0);
        h.apply_update(Some(&g), 1.0).unwrap();
        let Head::Linear { weights, .. } = &h else { unreachable!() };
        assert!((weights - &before).iter().all(|v| v.abs() < 1e-8));
    }
}
