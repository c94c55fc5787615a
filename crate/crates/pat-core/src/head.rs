//! Per-leaf linear classifiers and the marginal softmax loss.
//!
//! Every leaf node owns a linear logit map over the shared class set. The
//! final distribution is the membership-mass-weighted sum of the per-leaf
//! softmax distributions, and the loss is the negative log of the marginal
//! probability of the true class. The backward here is the exact analytic
//! gradient, including the path through the membership masses.

use crate::error::{PatError, Result};
use crate::kernels::{affine_preact, softmax, Matrix};
use crate::tree::{MembershipTrace, PatTree};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floor applied to the marginal before the log, guarding rounding-induced
/// exact zeros.
pub const MARGINAL_FLOOR: f64 = 1e-30;

pub(crate) fn floored_neg_log(marginal: f64) -> f64 {
    if marginal.is_finite() {
        -marginal.max(MARGINAL_FLOOR).ln()
    } else {
        f64::NAN
    }
}

/// One linear logit map per leaf node.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafClassifiers {
    maps: Vec<(Matrix, Vec<f64>)>,
    n_classes: usize,
}

/// Per-sample gradients of the marginal softmax loss.
///
/// `weight_grads`/`bias_grads` are with respect to the classifier
/// parameters, `leaf_feature_errors` with respect to each leaf's features
/// (through that leaf's softmax), and `leaf_mass_grads` with respect to each
/// leaf's membership mass. The mass gradients chain through the posterior
/// softmax of every ancestor via [`PatTree::backward_pass`].
#[derive(Debug, Clone)]
pub struct HeadBackward {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    pub leaf_feature_errors: Vec<Vec<f64>>,
    pub leaf_mass_grads: Vec<f64>,
    pub loss: f64,
    pub marginal: f64,
}

impl LeafClassifiers {
    pub fn new(leaf_count: usize, leaf_width: usize, n_classes: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new_with_rng(leaf_count, leaf_width, n_classes, &mut rng)
    }

    pub(crate) fn new_with_rng(
        leaf_count: usize,
        leaf_width: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(leaf_count > 0 && leaf_width > 0 && n_classes > 0);
        let s = (6.0 / (leaf_width + n_classes) as f64).sqrt();
        let maps = (0..leaf_count)
            .map(|_| {
                let mut w = Matrix::zeros(n_classes, leaf_width);
                for v in w.data_mut() {
                    *v = rng.gen_range(-s..s);
                }
                let b: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(-s..s)).collect();
                (w, b)
            })
            .collect();
        LeafClassifiers { maps, n_classes }
    }

    pub fn from_parts(maps: Vec<(Matrix, Vec<f64>)>, n_classes: usize) -> Result<Self> {
        for (w, b) in &maps {
            if w.rows() != n_classes || b.len() != n_classes {
                return Err(PatError::ShapeMismatch {
                    context: "classifier rows",
                    expected: n_classes,
                    got: w.rows(),
                });
            }
        }
        if maps.is_empty() {
            return Err(PatError::InvalidConfig("no leaf classifiers".into()));
        }
        Ok(LeafClassifiers { maps, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn leaf_count(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, leaf: usize) -> &(Matrix, Vec<f64>) {
        &self.maps[leaf]
    }

    pub fn map_mut(&mut self, leaf: usize) -> &mut (Matrix, Vec<f64>) {
        &mut self.maps[leaf]
    }

    fn check_tree(&self, tree: &PatTree) -> Result<()> {
        if tree.leaf_ids().len() != self.maps.len() {
            return Err(PatError::ShapeMismatch {
                context: "leaf classifier count",
                expected: tree.leaf_ids().len(),
                got: self.maps.len(),
            });
        }
        Ok(())
    }

    /// Per-leaf class distributions (softmax of each leaf's logits).
    pub fn leaf_predict(&self, tree: &PatTree, trace: &MembershipTrace) -> Result<Vec<Vec<f64>>> {
        self.check_tree(tree)?;
        tree.leaf_ids()
            .zip(&self.maps)
            .map(|(id, (w, b))| Ok(softmax(&affine_preact(w, b, &trace.features[id])?)))
            .collect()
    }

    /// Final class distribution: the membership-mass-weighted sum of the
    /// per-leaf distributions. Sums to one because the leaf masses do.
    pub fn predict(&self, tree: &PatTree, trace: &MembershipTrace) -> Result<Vec<f64>> {
        let dists = self.leaf_predict(tree, trace)?;
        let mut out = vec![0.0; self.n_classes];
        for (offset, id) in tree.leaf_ids().enumerate() {
            crate::kernels::axpy(&mut out, trace.mass[id], &dists[offset]);
        }
        Ok(out)
    }

    /// Marginal probability of `label` under the trace.
    pub fn marginal(&self, tree: &PatTree, trace: &MembershipTrace, label: usize) -> Result<f64> {
        if label >= self.n_classes {
            return Err(PatError::InvalidLabel {
                label,
                bound: self.n_classes,
            });
        }
        let dists = self.leaf_predict(tree, trace)?;
        let mut m = 0.0;
        for (offset, id) in tree.leaf_ids().enumerate() {
            m += trace.mass[id] * dists[offset][label];
        }
        Ok(m)
    }

    /// Sum over the batch of `-log` marginal true-class probability.
    /// A non-finite marginal yields a non-finite loss rather than being
    /// swallowed by the floor, so the trainer can abort loudly.
    pub fn marginal_softmax_loss(
        &self,
        tree: &PatTree,
        batch: &[(&MembershipTrace, usize)],
    ) -> Result<f64> {
        let mut total = 0.0;
        for (trace, label) in batch {
            total += floored_neg_log(self.marginal(tree, trace, *label)?);
        }
        Ok(total)
    }

    /// Exact per-sample gradient of the marginal softmax loss, scaled by
    /// `scale` (gradients only; the returned loss stays unscaled).
    pub fn marginal_softmax_backward(
        &self,
        tree: &PatTree,
        trace: &MembershipTrace,
        label: usize,
        scale: f64,
    ) -> Result<HeadBackward> {
        self.check_tree(tree)?;
        if label >= self.n_classes {
            return Err(PatError::InvalidLabel {
                label,
                bound: self.n_classes,
            });
        }

        let leaf_ids: Vec<usize> = tree.leaf_ids().collect();
        let dists = self.leaf_predict(tree, trace)?;
        let mut marginal = 0.0;
        for (offset, id) in leaf_ids.iter().enumerate() {
            marginal += trace.mass[*id] * dists[offset][label];
        }
        let loss = floored_neg_log(marginal);
        let d_marginal = if marginal > MARGINAL_FLOOR {
            -1.0 / marginal
        } else {
            0.0
        };

        let mut weight_grads = Vec::with_capacity(self.maps.len());
        let mut bias_grads = Vec::with_capacity(self.maps.len());
        let mut leaf_feature_errors = Vec::with_capacity(self.maps.len());
        let mut leaf_mass_grads = Vec::with_capacity(self.maps.len());
        for (offset, id) in leaf_ids.iter().enumerate() {
            let (w, _) = &self.maps[offset];
            let x = &trace.features[*id];
            let pd = &dists[offset];
            let q = trace.mass[*id];
            leaf_mass_grads.push(scale * (d_marginal * pd[label]));

            // logit gradient of -log marginal through this leaf's softmax
            let base = d_marginal * q * pd[label];
            let coef = scale * base;
            let mut d_logits = vec![0.0; self.n_classes];
            for e in 0..self.n_classes {
                let delta = if e == label { 1.0 } else { 0.0 };
                d_logits[e] = coef * (delta - pd[e]);
            }
            let mut gw = Matrix::zeros(self.n_classes, x.len());
            gw.add_outer(1.0, &d_logits, x);
            let gx = w.matvec_t(&d_logits);
            weight_grads.push(gw);
            bias_grads.push(d_logits);
            leaf_feature_errors.push(gx);
        }

        Ok(HeadBackward {
            weight_grads,
            bias_grads,
            leaf_feature_errors,
            leaf_mass_grads,
            loss,
            marginal,
        })
    }

    pub fn param_count(&self) -> usize {
        self.maps.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn param_get(&self, mut i: usize) -> f64 {
        for (w, b) in &self.maps {
            if i < w.len() {
                return w.data()[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_set(&mut self, mut i: usize, value: f64) {
        for (w, b) in &mut self.maps {
            if i < w.len() {
                w.data_mut()[i] = value;
                return;
            }
            i -= w.len();
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_name(&self, mut i: usize) -> String {
        for (leaf, (w, b)) in self.maps.iter().enumerate() {
            if i < w.len() {
                return format!("head({leaf}).weight[{},{}]", i / w.cols(), i % w.cols());
            }
            i -= w.len();
            if i < b.len() {
                return format!("head({leaf}).bias[{i}]");
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }
}
