//! The probabilistic attribute tree: topology, soft membership propagation,
//! the attribute clustering loss, its prescribed backward, and the cluster
//! center update rule.
//!
//! Nodes are stored flat in level order. The child reached from node
//! `(level, k)` through cluster `m` is `(level + 1, k * branching + m)`, so
//! cluster `m` of a node and its `m`-th child are the same thing, and the
//! cluster index is identified with the attribute state index.

use crate::error::{PatError, Result};
use crate::kernels::{
    affine_backward, affine_preact, cosine_sim, cosine_sim_grad_c, cosine_sim_grad_x, norm, relu,
    softmax, Matrix, NORM_EPS,
};
use crate::schema::{AttributePath, AttributeSchema};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Soft routing assigns samples to all children with softmax probabilities;
/// hard routing is the ablation that routes the full mass to the argmax
/// cluster (ties broken toward the lowest index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    Soft,
    Hard,
}

/// One tree node: a rectified affine transform and, at non-leaf nodes, one
/// cluster center per attribute state.
#[derive(Debug, Clone, PartialEq)]
pub struct PatNode {
    pub level: usize,
    pub index: usize,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// `branching x feature_width` center matrix; `None` at leaves.
    pub centers: Option<Matrix>,
}

/// Attribute tree with a flat, level-ordered node store.
#[derive(Debug, Clone, PartialEq)]
pub struct PatTree {
    schema: AttributeSchema,
    widths: Vec<usize>,
    nodes: Vec<PatNode>,
    level_offsets: Vec<usize>,
}

/// Per-sample record of everything the forward pass produced: per-node
/// pre-activations and features, membership mass `q`, cosine similarities to
/// the node's centers, their softmax, and the mass-scaled posteriors.
#[derive(Debug, Clone)]
pub struct MembershipTrace {
    pub input: Vec<f64>,
    pub preact: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub sims: Vec<Vec<f64>>,
    pub soft: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

/// Gradients produced by the reverse sweep over one trace.
#[derive(Debug, Clone)]
pub struct TreeBackward {
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
    /// Gradient with respect to each node's centers through the membership
    /// chain; `None` at leaves or when the chain is not requested.
    pub center_grads: Vec<Option<Matrix>>,
    /// Gradient with respect to each node's membership mass.
    pub mass_grads: Vec<f64>,
    pub input_grad: Vec<f64>,
}

/// Builds a tree with seeded initialization: affine parameters uniform in
/// `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`, centers random unit
/// vectors. Deterministic given the seed.
pub fn build_tree(schema: &AttributeSchema, widths: &[usize], seed: u64) -> Result<PatTree> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_tree_with_rng(schema, widths, &mut rng)
}

pub(crate) fn build_tree_with_rng(
    schema: &AttributeSchema,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<PatTree> {
    let n_levels = schema.n_levels();
    if widths.len() != n_levels + 1 {
        return Err(PatError::InvalidSchema(format!(
            "need {} widths (input plus one per level), got {}",
            n_levels + 1,
            widths.len()
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(PatError::InvalidSchema("widths must be positive".into()));
    }

    let mut nodes = Vec::with_capacity(schema.total_nodes());
    let mut level_offsets = Vec::with_capacity(n_levels + 1);
    for level in 0..n_levels {
        level_offsets.push(nodes.len());
        let fan_in = widths[level];
        let fan_out = widths[level + 1];
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for index in 0..schema.level_node_count(level) {
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = rng.gen_range(-s..s);
            }
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-s..s)).collect();
            let centers = if level + 1 < n_levels {
                let branching = schema.branching(level);
                let mut c = Matrix::zeros(branching, fan_out);
                for m in 0..branching {
                    random_unit_vector(rng, c.row_mut(m));
                }
                Some(c)
            } else {
                None
            };
            nodes.push(PatNode {
                level,
                index,
                weight,
                bias,
                centers,
            });
        }
    }
    level_offsets.push(nodes.len());

    Ok(PatTree {
        schema: schema.clone(),
        widths: widths.to_vec(),
        nodes,
        level_offsets,
    })
}

fn random_unit_vector(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let n = norm(out);
        if n > 1e-6 {
            for v in out.iter_mut() {
                *v /= n;
            }
            return;
        }
    }
}

impl PatTree {
    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_levels(&self) -> usize {
        self.schema.n_levels()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn leaf_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn node_id(&self, level: usize, index: usize) -> usize {
        debug_assert!(index < self.schema.level_node_count(level));
        self.level_offsets[level] + index
    }

    pub fn node(&self, id: usize) -> &PatNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut PatNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[PatNode] {
        &self.nodes
    }

    /// Flat node ids at `level`.
    pub fn level_ids(&self, level: usize) -> std::ops::Range<usize> {
        self.level_offsets[level]..self.level_offsets[level + 1]
    }

    pub fn leaf_ids(&self) -> std::ops::Range<usize> {
        self.level_ids(self.n_levels() - 1)
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].level + 1 == self.n_levels()
    }

    pub fn child_id(&self, id: usize, cluster: usize) -> usize {
        let node = &self.nodes[id];
        let branching = self.schema.branching(node.level);
        debug_assert!(cluster < branching);
        self.node_id(node.level + 1, node.index * branching + cluster)
    }

    pub fn parent_id(&self, id: usize) -> Option<usize> {
        let node = &self.nodes[id];
        if node.level == 0 {
            return None;
        }
        let branching = self.schema.branching(node.level - 1);
        Some(self.node_id(node.level - 1, node.index / branching))
    }

    /// Soft forward pass; see [`PatTree::propagate_routed`].
    pub fn propagate(&self, input: &[f64]) -> Result<MembershipTrace> {
        self.propagate_routed(input, Routing::Soft)
    }

    /// Runs the forward pass: per-node rectified affine features along the
    /// tree, and membership propagated from the root (mass 1) by scaling
    /// each node's softmax over center similarities by the node's own mass.
    pub fn propagate_routed(&self, input: &[f64], routing: Routing) -> Result<MembershipTrace> {
        if input.len() != self.input_width() {
            return Err(PatError::ShapeMismatch {
                context: "propagate input",
                expected: self.input_width(),
                got: input.len(),
            });
        }
        let n_in = norm(input);
        if n_in <= NORM_EPS {
            return Err(PatError::DegenerateVector {
                context: "propagate input",
                norm: n_in,
                floor: NORM_EPS,
            });
        }

        let n = self.nodes.len();
        let mut trace = MembershipTrace {
            input: input.to_vec(),
            preact: vec![Vec::new(); n],
            features: vec![Vec::new(); n],
            mass: vec![0.0; n],
            sims: vec![Vec::new(); n],
            soft: vec![Vec::new(); n],
            post: vec![Vec::new(); n],
        };

        for id in 0..n {
            let node = &self.nodes[id];
            let parent_features = match self.parent_id(id) {
                None => input,
                Some(p) => &trace.features[p],
            };
            let z = affine_preact(&node.weight, &node.bias, parent_features)?;
            let f = relu(&z);
            let nf = norm(&f);
            if nf <= NORM_EPS {
                return Err(PatError::DegenerateVector {
                    context: "propagate features",
                    norm: nf,
                    floor: NORM_EPS,
                });
            }
            trace.preact[id] = z;
            trace.features[id] = f;
        }

        trace.mass[0] = 1.0;
        for level in 0..self.n_levels() - 1 {
            for id in self.level_ids(level) {
                let node = &self.nodes[id];
                let centers = node.centers.as_ref().expect("non-leaf node has centers");
                let x = &trace.features[id];
                let mut sims = Vec::with_capacity(centers.rows());
                for m in 0..centers.rows() {
                    sims.push(cosine_sim(x, centers.row(m))?);
                }
                let soft = match routing {
                    Routing::Soft => softmax(&sims),
                    Routing::Hard => {
                        let mut best = 0;
                        for (m, &s) in sims.iter().enumerate() {
                            if s > sims[best] {
                                best = m;
                            }
                        }
                        let mut one_hot = vec![0.0; sims.len()];
                        one_hot[best] = 1.0;
                        one_hot
                    }
                };
                let q = trace.mass[id];
                let post: Vec<f64> = soft.iter().map(|&s| q * s).collect();
                for (m, &p) in post.iter().enumerate() {
                    trace.mass[self.child_id(id, m)] = p;
                }
                trace.sims[id] = sims;
                trace.soft[id] = soft;
                trace.post[id] = post;
            }
        }
        Ok(trace)
    }

    /// Node index per level of the unique root-to-leaf path selected by the
    /// ground-truth attribute labels. Requires a fully labeled path.
    pub fn gt_path_nodes(&self, path: &AttributePath) -> Result<Vec<usize>> {
        self.schema.check_path(path)?;
        let mut indices = Vec::with_capacity(self.n_levels());
        indices.push(0);
        let mut k = 0;
        for level in 0..self.schema.n_attr_levels() {
            let y = path
                .label(level)
                .ok_or(PatError::MissingLabel { level })?;
            k = k * self.schema.branching(level) + y;
            indices.push(k);
        }
        Ok(indices)
    }

    /// Node index per level for the labeled prefix of the path (always
    /// includes the root).
    pub fn labeled_path_prefix(&self, path: &AttributePath) -> Vec<usize> {
        let mut indices = vec![0];
        let mut k = 0;
        for level in 0..path.labeled_prefix_len() {
            let y = path.label(level).unwrap();
            k = k * self.schema.branching(level) + y;
            indices.push(k);
        }
        indices
    }

    /// Attribute loss contribution of one node for one sample.
    ///
    /// With the ground-truth center `g` present in the node, posteriors pull
    /// the sample toward `g` via `p_g (1 - D_g)` and push it away from every
    /// other center via `p_m (1 + D_m)`; without it, all centers push.
    pub fn node_loss(&self, id: usize, trace: &MembershipTrace, gt: Option<usize>) -> f64 {
        debug_assert!(!self.is_leaf(id));
        let p = &trace.post[id];
        let sims = &trace.sims[id];
        let mut loss = 0.0;
        for m in 0..p.len() {
            match gt {
                Some(g) if g == m => loss += p[m] * (1.0 - sims[m]),
                _ => loss += p[m] * (1.0 + sims[m]),
            }
        }
        loss
    }

    /// Per-level attribute loss sums and contributing sample counts.
    ///
    /// A sample contributes to a level only when its labels are present all
    /// the way down to that level; deeper levels lose it as well because the
    /// ground-truth node is undefined without the full prefix.
    pub fn level_losses(
        &self,
        batch: &[(&MembershipTrace, &AttributePath)],
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let n_attr = self.schema.n_attr_levels();
        let mut sums = vec![0.0; n_attr];
        let mut counts = vec![0usize; n_attr];
        for (trace, path) in batch {
            self.schema.check_path(path)?;
            let prefix = self.labeled_path_prefix(path);
            let labeled_levels = prefix.len() - 1;
            for level in 0..labeled_levels {
                let gt_node = self.node_id(level, prefix[level]);
                let gt_center = path.label(level).unwrap();
                counts[level] += 1;
                for id in self.level_ids(level) {
                    let gt = if id == gt_node { Some(gt_center) } else { None };
                    sums[level] += self.node_loss(id, trace, gt);
                }
            }
        }
        Ok((sums, counts))
    }

    /// Total attribute clustering loss: the sum over all non-leaf levels and
    /// nodes of the per-node pull/push loss, over the labeled samples.
    pub fn pat_loss(&self, batch: &[(&MembershipTrace, &AttributePath)]) -> Result<f64> {
        let (sums, _) = self.level_losses(batch)?;
        Ok(sums.iter().sum())
    }

    /// The prescribed descent direction of the attribute loss with respect
    /// to a node's features, taken literally: posteriors are treated as
    /// constants, the push sum is normalized by `centers - 1` when the
    /// ground-truth center is present (by `centers` otherwise), and the pull
    /// term enters with a minus sign and no normalizer.
    ///
    /// This is not the analytic gradient of [`PatTree::node_loss`]; see
    /// `verify::backward_rule_divergence` for the difference.
    pub fn pat_backward_features(
        &self,
        id: usize,
        trace: &MembershipTrace,
        gt: Option<usize>,
    ) -> Result<Vec<f64>> {
        debug_assert!(!self.is_leaf(id));
        let node = &self.nodes[id];
        let centers = node.centers.as_ref().unwrap();
        let width = centers.cols();
        let p = &trace.post[id];
        if trace.mass[id] == 0.0 {
            return Ok(vec![0.0; width]);
        }
        let x = &trace.features[id];
        let mut out = vec![0.0; width];
        match gt {
            Some(g) => {
                let scale = 1.0 / (centers.rows() as f64 - 1.0);
                for m in 0..centers.rows() {
                    let grad = cosine_sim_grad_x(x, centers.row(m))?;
                    let coef = if m == g { -p[m] } else { scale * p[m] };
                    crate::kernels::axpy(&mut out, coef, &grad);
                }
            }
            None => {
                let scale = 1.0 / centers.rows() as f64;
                for m in 0..centers.rows() {
                    let grad = cosine_sim_grad_x(x, centers.row(m))?;
                    crate::kernels::axpy(&mut out, scale * p[m], &grad);
                }
            }
        }
        Ok(out)
    }

    /// Mini-batch center update direction for one node, one row per center.
    ///
    /// Samples whose attribute state at this level equals the center index
    /// pull it (negative sign, normalized by one plus their count); all
    /// other labeled samples push it (positive sign, likewise normalized).
    /// Samples without a label at this level contribute to neither term, so
    /// an empty batch yields the zero matrix.
    pub fn center_delta(
        &self,
        id: usize,
        batch: &[(&MembershipTrace, Option<usize>)],
    ) -> Result<Matrix> {
        debug_assert!(!self.is_leaf(id));
        let node = &self.nodes[id];
        let centers = node.centers.as_ref().unwrap();
        let mut delta = Matrix::zeros(centers.rows(), centers.cols());
        for m in 0..centers.rows() {
            let mut pull = vec![0.0; centers.cols()];
            let mut push = vec![0.0; centers.cols()];
            let mut n_pull = 0usize;
            let mut n_push = 0usize;
            for (trace, label) in batch {
                let Some(y) = label else { continue };
                let p = trace.post[id][m];
                let grad = if trace.mass[id] == 0.0 {
                    vec![0.0; centers.cols()]
                } else {
                    cosine_sim_grad_c(&trace.features[id], centers.row(m))?
                };
                if *y == m {
                    n_pull += 1;
                    crate::kernels::axpy(&mut pull, p, &grad);
                } else {
                    n_push += 1;
                    crate::kernels::axpy(&mut push, p, &grad);
                }
            }
            let row = delta.row_mut(m);
            for i in 0..row.len() {
                row[i] = -pull[i] / (1.0 + n_pull as f64) + push[i] / (1.0 + n_push as f64);
            }
        }
        Ok(delta)
    }

    /// Applies `c <- c - alpha * delta` row by row and re-checks center norms.
    pub fn apply_center_update(&mut self, id: usize, delta: &Matrix, alpha: f64) -> Result<()> {
        debug_assert!(alpha >= 0.0);
        let node = &mut self.nodes[id];
        let centers = node.centers.as_mut().unwrap();
        if delta.rows() != centers.rows() || delta.cols() != centers.cols() {
            return Err(PatError::ShapeMismatch {
                context: "center update",
                expected: centers.len(),
                got: delta.len(),
            });
        }
        centers.add_scaled(-alpha, delta);
        for m in 0..centers.rows() {
            let n = norm(centers.row(m));
            if n <= NORM_EPS {
                return Err(PatError::DegenerateVector {
                    context: "center update",
                    norm: n,
                    floor: NORM_EPS,
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep over one trace.
    ///
    /// `feature_errors` holds the externally injected gradient at every
    /// node's output features (classification error at leaves, clustering
    /// error at non-leaf nodes). When `leaf_mass_grads` is given, the
    /// membership chain is also walked: mass gradients at the leaves flow to
    /// the softmax factors of every ancestor, yielding exact gradients with
    /// respect to node features and cluster centers through the posteriors.
    /// Affine errors then flow from the leaves back to the input.
    pub fn backward_pass(
        &self,
        trace: &MembershipTrace,
        feature_errors: &[Vec<f64>],
        leaf_mass_grads: Option<&[f64]>,
    ) -> Result<TreeBackward> {
        let n = self.nodes.len();
        assert_eq!(feature_errors.len(), n);
        let n_levels = self.n_levels();

        let mut err: Vec<Vec<f64>> = feature_errors.to_vec();
        let mut mass_grads = vec![0.0; n];
        let mut center_grads: Vec<Option<Matrix>> = vec![None; n];
        let mut weight_grads: Vec<Matrix> = Vec::with_capacity(n);
        let mut bias_grads: Vec<Vec<f64>> = Vec::with_capacity(n);
        for node in &self.nodes {
            weight_grads.push(Matrix::zeros(node.weight.rows(), node.weight.cols()));
            bias_grads.push(vec![0.0; node.bias.len()]);
        }
        let mut input_grad = vec![0.0; self.input_width()];

        if let Some(leaf_grads) = leaf_mass_grads {
            let leaf_ids = self.leaf_ids();
            assert_eq!(leaf_grads.len(), leaf_ids.len());
            for (g, id) in leaf_grads.iter().zip(leaf_ids) {
                mass_grads[id] = *g;
            }
        }

        for level in (0..n_levels).rev() {
            let walk_masses = leaf_mass_grads.is_some() && level + 1 < n_levels;
            if walk_masses {
                for id in self.level_ids(level) {
                    let node = &self.nodes[id];
                    let centers = node.centers.as_ref().unwrap();
                    let soft = &trace.soft[id];
                    let q = trace.mass[id];
                    let branching = centers.rows();

                    // children masses are q * soft[m]
                    let mut d_soft = vec![0.0; branching];
                    for m in 0..branching {
                        let child_grad = mass_grads[self.child_id(id, m)];
                        d_soft[m] = child_grad * q;
                        mass_grads[id] += child_grad * soft[m];
                    }
                    // softmax jacobian: d s_n = soft_n (d_soft_n - sum_m d_soft_m soft_m)
                    let inner: f64 = d_soft.iter().zip(soft).map(|(d, s)| d * s).sum();
                    let x = &trace.features[id];
                    let mut cg = Matrix::zeros(branching, centers.cols());
                    for m in 0..branching {
                        let d_sim = soft[m] * (d_soft[m] - inner);
                        if d_sim != 0.0 {
                            let gx = cosine_sim_grad_x(x, centers.row(m))?;
                            crate::kernels::axpy(&mut err[id], d_sim, &gx);
                            let gc = cosine_sim_grad_c(x, centers.row(m))?;
                            crate::kernels::axpy(cg.row_mut(m), d_sim, &gc);
                        }
                    }
                    center_grads[id] = Some(cg);
                }
            }

            for id in self.level_ids(level) {
                let node = &self.nodes[id];
                let parent_features = match self.parent_id(id) {
                    None => &trace.input,
                    Some(p) => &trace.features[p],
                };
                let (gw, gb, gx) =
                    affine_backward(&node.weight, parent_features, &trace.preact[id], &err[id])?;
                weight_grads[id] = gw;
                bias_grads[id] = gb;
                match self.parent_id(id) {
                    None => crate::kernels::axpy(&mut input_grad, 1.0, &gx),
                    Some(p) => crate::kernels::axpy(&mut err[p], 1.0, &gx),
                }
            }
        }

        Ok(TreeBackward {
            weight_grads,
            bias_grads,
            center_grads,
            mass_grads,
            input_grad,
        })
    }

    /// Number of trainable scalars (affine parameters and centers).
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                n.weight.len() + n.bias.len() + n.centers.as_ref().map_or(0, |c| c.len())
            })
            .sum()
    }

    /// Flat parameter access in a fixed layout (per node: weight row-major,
    /// bias, centers row-major). Used by the finite-difference checks.
    pub fn param_get(&self, mut i: usize) -> f64 {
        for node in &self.nodes {
            if i < node.weight.len() {
                return node.weight.data()[i];
            }
            i -= node.weight.len();
            if i < node.bias.len() {
                return node.bias[i];
            }
            i -= node.bias.len();
            if let Some(c) = &node.centers {
                if i < c.len() {
                    return c.data()[i];
                }
                i -= c.len();
            }
        }
        panic!("parameter index out of range");
    }

    pub fn param_set(&mut self, mut i: usize, value: f64) {
        for node in &mut self.nodes {
            if i < node.weight.len() {
                node.weight.data_mut()[i] = value;
                return;
            }
            i -= node.weight.len();
            if i < node.bias.len() {
                node.bias[i] = value;
                return;
            }
            i -= node.bias.len();
            if let Some(c) = &mut node.centers {
                if i < c.len() {
                    c.data_mut()[i] = value;
                    return;
                }
                i -= c.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Human-readable name of a flat parameter coordinate.
    pub fn param_name(&self, mut i: usize) -> String {
        for node in &self.nodes {
            if i < node.weight.len() {
                return format!(
                    "node({},{}).weight[{},{}]",
                    node.level,
                    node.index,
                    i / node.weight.cols(),
                    i % node.weight.cols()
                );
            }
            i -= node.weight.len();
            if i < node.bias.len() {
                return format!("node({},{}).bias[{}]", node.level, node.index, i);
            }
            i -= node.bias.len();
            if let Some(c) = &node.centers {
                if i < c.len() {
                    return format!(
                        "node({},{}).center[{}][{}]",
                        node.level,
                        node.index,
                        i / c.cols(),
                        i % c.cols()
                    );
                }
                i -= c.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Flattens a backward sweep into the [`PatTree::param_get`] layout.
    /// Center slots are zero when the membership chain was not walked.
    pub fn flatten_grads(&self, back: &TreeBackward) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (id, node) in self.nodes.iter().enumerate() {
            out.extend_from_slice(back.weight_grads[id].data());
            out.extend_from_slice(&back.bias_grads[id]);
            if let Some(c) = &node.centers {
                match &back.center_grads[id] {
                    Some(cg) => out.extend_from_slice(cg.data()),
                    None => out.extend(std::iter::repeat(0.0).take(c.len())),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::AttributeSchema;

    fn two_state_schema() -> AttributeSchema {
        AttributeSchema::new(vec![("a", 2)]).unwrap()
    }

    fn gender_race_schema() -> AttributeSchema {
        AttributeSchema::new(vec![("g", 2), ("r", 3)]).unwrap()
    }

    /// Tree with an identity root transform and hand-placed centers, so the
    /// root features equal the input exactly.
    fn worked_tree() -> PatTree {
        let schema = two_state_schema();
        let mut tree = build_tree(&schema, &[2, 2, 2], 9).unwrap();
        let root = tree.node_id(0, 0);
        tree.node_mut(root).weight = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        tree.node_mut(root).bias = vec![0.0, 0.0];
        tree.node_mut(root).centers =
            Some(Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        tree
    }

    fn e() -> f64 {
        std::f64::consts::E
    }

    #[test]
    fn build_node_counts() {
        let tree = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 1).unwrap();
        assert_eq!(tree.level_ids(0).len(), 1);
        assert_eq!(tree.level_ids(1).len(), 2);
        assert_eq!(tree.level_ids(2).len(), 6);
        assert!(tree.node(tree.node_id(0, 0)).centers.is_some());
        assert!(tree.node(tree.node_id(2, 3)).centers.is_none());
    }

    #[test]
    fn build_empty_schema_is_single_rootless_center_node() {
        let tree = build_tree(&AttributeSchema::empty(), &[4, 8], 1).unwrap();
        assert_eq!(tree.n_nodes(), 1);
        assert!(tree.node(0).centers.is_none());
        assert_eq!(tree.leaf_ids(), 0..1);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 77).unwrap();
        let b = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 77).unwrap();
        assert_eq!(a, b);
        let c = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn build_rejects_bad_widths() {
        assert!(build_tree(&gender_race_schema(), &[4, 8], 1).is_err());
        assert!(build_tree(&gender_race_schema(), &[4, 8, 0, 8], 1).is_err());
    }

    #[test]
    fn centers_are_unit_norm() {
        let tree = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 5).unwrap();
        for id in 0..tree.n_nodes() {
            if let Some(c) = &tree.node(id).centers {
                for m in 0..c.rows() {
                    assert!((norm(c.row(m)) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gt_path_worked_example() {
        let tree = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 1).unwrap();
        let path = AttributePath::full(vec![1, 2]);
        assert_eq!(tree.gt_path_nodes(&path).unwrap(), vec![0, 1, 5]);
    }

    #[test]
    fn gt_path_root_only_for_empty_schema() {
        let tree = build_tree(&AttributeSchema::empty(), &[4, 8], 1).unwrap();
        let path = AttributePath::full(vec![]);
        assert_eq!(tree.gt_path_nodes(&path).unwrap(), vec![0]);
    }

    #[test]
    fn gt_paths_are_a_bijection_onto_leaves() {
        let tree = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 1).unwrap();
        let mut leaves = std::collections::HashSet::new();
        for g in 0..2 {
            for r in 0..3 {
                let path = AttributePath::full(vec![g, r]);
                let nodes = tree.gt_path_nodes(&path).unwrap();
                leaves.insert(*nodes.last().unwrap());
            }
        }
        assert_eq!(leaves.len(), 6);
    }

    #[test]
    fn gt_path_requires_labels() {
        let tree = build_tree(&gender_race_schema(), &[4, 8, 8, 8], 1).unwrap();
        let path = AttributePath {
            labels: vec![Some(1), None],
        };
        assert!(matches!(
            tree.gt_path_nodes(&path).unwrap_err(),
            PatError::MissingLabel { level: 1 }
        ));
    }

    #[test]
    fn propagate_symmetric_centers_split_mass_evenly() {
        let mut tree = worked_tree();
        let root = tree.node_id(0, 0);
        // centers mirrored about the diagonal feature direction
        tree.node_mut(root).centers =
            Some(Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let trace = tree.propagate(&[1.0, 1.0]).unwrap();
        assert!((trace.post[root][0] - 0.5).abs() < 1e-12);
        assert!((trace.post[root][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn propagate_worked_posteriors() {
        let tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        assert_eq!(trace.sims[root], vec![1.0, 0.0]);
        assert!((trace.post[root][0] - e() / (e() + 1.0)).abs() < 1e-12);
        assert!((trace.post[root][1] - 1.0 / (e() + 1.0)).abs() < 1e-12);
        assert!((trace.post[root][0] - 0.73106).abs() < 1e-5);
        assert!((trace.post[root][1] - 0.26894).abs() < 1e-5);
        // children inherit the posteriors as their mass
        assert_eq!(trace.mass[tree.child_id(root, 0)], trace.post[root][0]);
        assert_eq!(trace.mass[tree.child_id(root, 1)], trace.post[root][1]);
    }

    #[test]
    fn propagate_conserves_mass_per_level() {
        let schema = gender_race_schema();
        for seed in 0..100 {
            let tree = build_tree(&schema, &[5, 7, 6, 4], seed).unwrap();
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed + 1000);
            let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if norm(&input) <= 1e-6 {
                continue;
            }
            let trace = match tree.propagate(&input) {
                Ok(t) => t,
                Err(PatError::DegenerateVector { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            for level in 0..tree.n_levels() {
                let total: f64 = tree.level_ids(level).map(|id| trace.mass[id]).sum();
                assert!((total - 1.0).abs() < 1e-9, "level {level}: {total}");
            }
            for id in 0..tree.n_nodes() {
                if !tree.is_leaf(id) {
                    let p_sum: f64 = trace.post[id].iter().sum();
                    assert!((p_sum - trace.mass[id]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn propagate_posteriors_are_scale_invariant() {
        let tree = build_tree(&gender_race_schema(), &[5, 7, 6, 4], 3).unwrap();
        let input = vec![0.4, -0.2, 0.9, 0.1, -0.5];
        let scaled: Vec<f64> = input.iter().map(|v| v * 3.7).collect();
        let a = tree.propagate(&input).unwrap();
        let b = tree.propagate(&scaled).unwrap();
        let root = tree.node_id(0, 0);
        // scaling the input scales the rectified root features, and the
        // posterior softmax is driven by cosine similarities only
        for (x, y) in a.soft[root].iter().zip(&b.soft[root]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_rejects_degenerate_input() {
        let tree = worked_tree();
        assert!(matches!(
            tree.propagate(&[0.0, 0.0]).unwrap_err(),
            PatError::DegenerateVector { .. }
        ));
    }

    #[test]
    fn hard_routing_masses_are_binary() {
        let tree = build_tree(&gender_race_schema(), &[5, 7, 6, 4], 3).unwrap();
        let input = vec![0.4, -0.2, 0.9, 0.1, -0.5];
        let trace = tree.propagate_routed(&input, Routing::Hard).unwrap();
        for id in 0..tree.n_nodes() {
            assert!(trace.mass[id] == 0.0 || trace.mass[id] == 1.0);
        }
        let leaf_total: f64 = tree.leaf_ids().map(|id| trace.mass[id]).sum();
        assert_eq!(leaf_total, 1.0);
    }

    #[test]
    fn node_loss_worked_example() {
        let tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let loss = tree.node_loss(root, &trace, Some(0));
        let expected = (1.0 / (e() + 1.0)) * (1.0 + 0.0) + (e() / (e() + 1.0)) * (1.0 - 1.0);
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn node_loss_zero_mass_node_contributes_nothing() {
        let tree = worked_tree();
        let mut trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        trace.mass[root] = 0.0;
        trace.post[root] = vec![0.0, 0.0];
        assert_eq!(tree.node_loss(root, &trace, Some(0)), 0.0);
        assert_eq!(tree.node_loss(root, &trace, None), 0.0);
    }

    #[test]
    fn node_loss_zero_at_perfect_assignment() {
        let tree = worked_tree();
        let mut trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        trace.post[root] = vec![1.0, 0.0];
        trace.sims[root] = vec![1.0, 0.0];
        assert_eq!(tree.node_loss(root, &trace, Some(0)), 0.0);
    }

    #[test]
    fn pat_loss_empty_batch_and_root_only_tree() {
        let tree = worked_tree();
        assert_eq!(tree.pat_loss(&[]).unwrap(), 0.0);

        let flat = build_tree(&AttributeSchema::empty(), &[2, 3], 1).unwrap();
        let trace = flat.propagate(&[1.0, 0.5]).unwrap();
        let path = AttributePath::full(vec![]);
        assert_eq!(flat.pat_loss(&[(&trace, &path)]).unwrap(), 0.0);
    }

    #[test]
    fn pat_loss_is_additive_over_samples() {
        let tree = build_tree(&gender_race_schema(), &[5, 7, 6, 4], 3).unwrap();
        let x1 = vec![0.4, -0.2, 0.9, 0.1, -0.5];
        let x2 = vec![-0.3, 0.8, 0.2, -0.6, 0.1];
        let t1 = tree.propagate(&x1).unwrap();
        let t2 = tree.propagate(&x2).unwrap();
        let p1 = AttributePath::full(vec![0, 2]);
        let p2 = AttributePath::full(vec![1, 1]);
        let joint = tree.pat_loss(&[(&t1, &p1), (&t2, &p2)]).unwrap();
        let split =
            tree.pat_loss(&[(&t1, &p1)]).unwrap() + tree.pat_loss(&[(&t2, &p2)]).unwrap();
        assert!((joint - split).abs() < 1e-12);
    }

    #[test]
    fn pat_loss_is_nonnegative() {
        let tree = build_tree(&gender_race_schema(), &[5, 7, 6, 4], 8).unwrap();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(99);
        for _ in 0..50 {
            let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if norm(&input) < 1e-3 {
                continue;
            }
            let trace = match tree.propagate(&input) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let path = AttributePath::full(vec![rng.gen_range(0..2), rng.gen_range(0..3)]);
            assert!(tree.pat_loss(&[(&trace, &path)]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn backward_features_worked_example() {
        let tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let grad = tree.pat_backward_features(root, &trace, Some(0)).unwrap();
        let p2 = 1.0 / (e() + 1.0);
        assert!((grad[0] - 0.0).abs() < 1e-12);
        assert!((grad[1] - p2).abs() < 1e-12);
        assert!((grad[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn backward_features_zero_mass_is_zero() {
        let tree = worked_tree();
        let mut trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        trace.mass[root] = 0.0;
        trace.post[root] = vec![0.0, 0.0];
        let grad = tree.pat_backward_features(root, &trace, Some(0)).unwrap();
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn center_delta_empty_batch_is_zero() {
        let tree = worked_tree();
        let root = tree.node_id(0, 0);
        let delta = tree.center_delta(root, &[]).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_delta_unlabeled_samples_are_skipped() {
        let tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let delta = tree.center_delta(root, &[(&trace, None)]).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_delta_worked_example_and_fixed_point() {
        let tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let delta = tree.center_delta(root, &[(&trace, Some(0))]).unwrap();
        // the sample sits exactly on its ground-truth center: no pull
        assert_eq!(delta.row(0), &[0.0, 0.0]);
        let expected = (1.0 / (e() + 1.0)) / 2.0;
        assert!((delta.at(1, 0) - expected).abs() < 1e-12);
        assert!((delta.at(1, 1) - 0.0).abs() < 1e-12);
        assert!((delta.at(1, 0) - 0.13447).abs() < 1e-5);
    }

    #[test]
    fn apply_center_update_worked_example() {
        let mut tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let delta = tree.center_delta(root, &[(&trace, Some(0))]).unwrap();
        tree.apply_center_update(root, &delta, 1.0).unwrap();
        let centers = tree.node(root).centers.as_ref().unwrap();
        let expected = -(1.0 / (e() + 1.0)) / 2.0;
        assert_eq!(centers.row(0), &[1.0, 0.0]);
        assert!((centers.at(1, 0) - expected).abs() < 1e-12);
        assert!((centers.at(1, 0) - (-0.13447)).abs() < 1e-5);
        assert!((centers.at(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_center_update_zero_rate_or_delta_is_identity() {
        let mut tree = worked_tree();
        let trace = tree.propagate(&[1.0, 0.0]).unwrap();
        let root = tree.node_id(0, 0);
        let before = tree.node(root).centers.clone().unwrap();
        let zero = Matrix::zeros(2, 2);
        tree.apply_center_update(root, &zero, 1.0).unwrap();
        assert_eq!(tree.node(root).centers.clone().unwrap(), before);
        let delta = tree.center_delta(root, &[(&trace, Some(0))]).unwrap();
        tree.apply_center_update(root, &delta, 0.0).unwrap();
        assert_eq!(tree.node(root).centers.clone().unwrap(), before);
    }

    #[test]
    fn apply_center_update_detects_annihilation() {
        let mut tree = worked_tree();
        let root = tree.node_id(0, 0);
        let annihilate = tree.node(root).centers.clone().unwrap();
        assert!(matches!(
            tree.apply_center_update(root, &annihilate, 1.0).unwrap_err(),
            PatError::DegenerateVector { .. }
        ));
    }

    #[test]
    fn center_updates_never_shrink_norms() {
        // center gradients are tangent to the center, so update steps can
        // only grow the norm
        let schema = gender_race_schema();
        let mut tree = build_tree(&schema, &[5, 7, 6, 4], 12).unwrap();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        for _ in 0..20 {
            let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let Ok(trace) = tree.propagate(&input) else { continue };
            let y0 = rng.gen_range(0..2);
            let root = tree.node_id(0, 0);
            let before: Vec<f64> = {
                let c = tree.node(root).centers.as_ref().unwrap();
                (0..c.rows()).map(|m| norm(c.row(m))).collect()
            };
            let delta = tree.center_delta(root, &[(&trace, Some(y0))]).unwrap();
            tree.apply_center_update(root, &delta, 1.0).unwrap();
            let c = tree.node(root).centers.as_ref().unwrap();
            for m in 0..c.rows() {
                assert!(norm(c.row(m)) >= before[m] - 1e-12);
            }
        }
    }

    #[test]
    fn param_roundtrip_covers_every_slot() {
        let tree = build_tree(&gender_race_schema(), &[3, 4, 3, 2], 6).unwrap();
        let n = tree.param_count();
        let mut tree2 = tree.clone();
        for i in 0..n {
            let v = tree.param_get(i);
            tree2.param_set(i, v + 1.0);
            assert_eq!(tree2.param_get(i), v + 1.0);
            tree2.param_set(i, v);
        }
        assert_eq!(tree, tree2);
        assert!(tree.param_name(0).contains("node(0,0).weight"));
    }
}
