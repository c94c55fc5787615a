//! Joint semi-supervised training: SGD on affine and classifier weights,
//! the dedicated mini-batch rule on cluster centers.
//!
//! Every step computes all gradients from the pre-step parameters, then
//! applies updates in a fixed order: classifier parameters, cluster centers,
//! affine weights. Classification gradients are averaged over the
//! class-labeled samples of the batch; clustering feature errors are
//! averaged per level over the samples labeled at that level; the center
//! rule carries its own normalization. Everything is deterministic given
//! `(dataset, config)`.

use crate::data::Dataset;
use crate::error::{PatError, Result};
use crate::head::{HeadBackward, LeafClassifiers};
use crate::kernels::{axpy, Matrix};
use crate::schema::AttributeSchema;
use crate::tree::{build_tree_with_rng, PatTree, Routing};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;

/// Hyperparameters and run controls for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema: AttributeSchema,
    /// Feature width per level (input width comes from the data).
    pub hidden_widths: Vec<usize>,
    /// Balance between the classification loss and the clustering loss.
    pub lambda: f64,
    /// Learning rate of the cluster center update rule.
    pub alpha: f64,
    /// Learning rate of the weight SGD.
    pub mu: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of attribute-labeled samples whose labels are kept.
    pub attribute_label_fraction: f64,
    pub routing: Routing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::default_for(AttributeSchema::new(vec![("a", 2), ("b", 3)]).unwrap())
    }
}

impl TrainConfig {
    pub fn default_for(schema: AttributeSchema) -> Self {
        let n_levels = schema.n_levels();
        TrainConfig {
            schema,
            hidden_widths: vec![64; n_levels],
            lambda: 0.1,
            alpha: 1.0,
            mu: 0.05,
            iterations: 3000,
            batch_size: 32,
            seed: 1,
            attribute_label_fraction: 1.0,
            routing: Routing::Soft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(PatError::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(PatError::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(PatError::InvalidConfig("mu must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(PatError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PatError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.attribute_label_fraction) {
            return Err(PatError::InvalidConfig(
                "attribute_label_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.hidden_widths.len() != self.schema.n_levels() {
            return Err(PatError::InvalidConfig(format!(
                "need {} hidden widths (one per level), got {}",
                self.schema.n_levels(),
                self.hidden_widths.len()
            )));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(PatError::InvalidConfig("widths must be positive".into()));
        }
        Ok(())
    }

    pub fn full_widths(&self, input_width: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 1);
        widths.push(input_width);
        widths.extend_from_slice(&self.hidden_widths);
        widths
    }
}

/// Tree plus leaf classifiers; one seed fixes both.
#[derive(Debug, Clone, PartialEq)]
pub struct PatModel {
    pub tree: PatTree,
    pub heads: LeafClassifiers,
}

impl PatModel {
    pub fn new(
        schema: &AttributeSchema,
        widths: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = build_tree_with_rng(schema, widths, &mut rng)?;
        let heads = LeafClassifiers::new_with_rng(
            schema.leaf_count(),
            *widths.last().unwrap(),
            n_classes,
            &mut rng,
        );
        Ok(PatModel { tree, heads })
    }

    pub fn predict_dist(&self, features: &[f64], routing: Routing) -> Result<Vec<f64>> {
        let trace = self.tree.propagate_routed(features, routing)?;
        self.heads.predict(&self.tree, &trace)
    }

    pub fn predict_class(&self, features: &[f64], routing: Routing) -> Result<usize> {
        Ok(argmax(&self.predict_dist(features, routing)?))
    }

    pub fn param_count(&self) -> usize {
        self.tree.param_count() + self.heads.param_count()
    }

    pub fn param_get(&self, i: usize) -> f64 {
        let t = self.tree.param_count();
        if i < t {
            self.tree.param_get(i)
        } else {
            self.heads.param_get(i - t)
        }
    }

    pub fn param_set(&mut self, i: usize, v: f64) {
        let t = self.tree.param_count();
        if i < t {
            self.tree.param_set(i, v);
        } else {
            self.heads.param_set(i - t, v);
        }
    }

    pub fn param_name(&self, i: usize) -> String {
        let t = self.tree.param_count();
        if i < t {
            self.tree.param_name(i)
        } else {
            self.heads.param_name(i - t)
        }
    }

    /// Sum of the marginal softmax loss over the batch.
    pub fn ms_loss_sum(&self, batch: &[(&[f64], usize)], routing: Routing) -> Result<f64> {
        let mut total = 0.0;
        for (features, label) in batch {
            let trace = self.tree.propagate_routed(features, routing)?;
            total += self
                .heads
                .marginal_softmax_loss(&self.tree, &[(&trace, *label)])?;
        }
        Ok(total)
    }

    /// Loss sum and its exact gradient over every parameter, flattened in the
    /// `param_get` layout (tree first, then classifiers). The chain through
    /// the membership masses is included, so center slots are populated.
    pub fn ms_gradients_sum(
        &self,
        batch: &[(&[f64], usize)],
        routing: Routing,
    ) -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut flat = vec![0.0; self.param_count()];
        let tree_params = self.tree.param_count();
        for (features, label) in batch {
            let trace = self.tree.propagate_routed(features, routing)?;
            let hb = self
                .heads
                .marginal_softmax_backward(&self.tree, &trace, *label, 1.0)?;
            loss += hb.loss;

            let mut inject: Vec<Vec<f64>> = self
                .tree
                .nodes()
                .iter()
                .map(|n| vec![0.0; n.bias.len()])
                .collect();
            for (offset, id) in self.tree.leaf_ids().enumerate() {
                axpy(&mut inject[id], 1.0, &hb.leaf_feature_errors[offset]);
            }
            let mass = match routing {
                Routing::Soft => Some(hb.leaf_mass_grads.as_slice()),
                Routing::Hard => None,
            };
            let back = self.tree.backward_pass(&trace, &inject, mass)?;
            let tree_flat = self.tree.flatten_grads(&back);
            for (dst, src) in flat[..tree_params].iter_mut().zip(&tree_flat) {
                *dst += src;
            }
            let mut offset = tree_params;
            for leaf in 0..self.heads.leaf_count() {
                for v in hb.weight_grads[leaf].data() {
                    flat[offset] += v;
                    offset += 1;
                }
                for v in &hb.bias_grads[leaf] {
                    flat[offset] += v;
                    offset += 1;
                }
            }
        }
        Ok((loss, flat))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One recorded iteration: total loss and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub ms: f64,
    pub pat: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: PatModel,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives independent deterministic seeds for the named streams of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_STRIP: u64 = 2;
pub const STREAM_BATCH: u64 = 3;

/// Seeded shuffle into fixed-size batches, keeping the last short batch.
///
/// When the dataset carries both sources, every batch takes `batch_size / 2`
/// (rounded down) samples from the auxiliary (attribute-labeled) source,
/// cycling it as needed, and fills the rest from the primary source.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if dataset.is_empty() {
        return Err(PatError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(PatError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, STREAM_BATCH.wrapping_add(epoch));
    let mut primary: Vec<usize> = Vec::new();
    let mut auxiliary: Vec<usize> = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        match s.source {
            crate::data::Source::Primary => primary.push(i),
            crate::data::Source::Auxiliary => auxiliary.push(i),
        }
    }

    if primary.is_empty() || auxiliary.is_empty() {
        let mut all: Vec<usize> = (0..dataset.len()).collect();
        all.shuffle(&mut rng);
        return Ok(all.chunks(batch_size).map(|c| c.to_vec()).collect());
    }

    primary.shuffle(&mut rng);
    auxiliary.shuffle(&mut rng);
    let aux_share = batch_size / 2;
    let primary_share = batch_size - aux_share;
    let mut cursor = 0usize;
    let mut batches = Vec::new();
    for chunk in primary.chunks(primary_share) {
        let mut batch = chunk.to_vec();
        for _ in 0..aux_share {
            batch.push(auxiliary[cursor % auxiliary.len()]);
            cursor += 1;
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Cycles batches across epochs with a fresh shuffle per epoch.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Self {
        BatchStream {
            dataset,
            batch_size,
            seed,
            epoch: 0,
            queue: std::collections::VecDeque::new(),
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue = make_batches(self.dataset, self.batch_size, self.seed, self.epoch)?
                .into_iter()
                .collect();
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().expect("batches are never empty"))
    }
}

/// Returns a copy with attribute labels kept on a seeded random share of the
/// attribute-labeled samples and stripped from the rest.
pub fn apply_label_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    if fraction >= 1.0 {
        return dataset.clone();
    }
    let mut working = dataset.clone();
    let candidates: Vec<usize> = working
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.attrs.iter().any(|a| a.is_some()))
        .map(|(i, _)| i)
        .collect();
    let keep = (fraction * candidates.len() as f64).round() as usize;
    let mut order = candidates;
    order.shuffle(&mut stream_rng(seed, STREAM_STRIP));
    let strip: HashSet<usize> = order[keep.min(order.len())..].iter().copied().collect();
    let n_attr = working.n_attr_levels();
    for (i, s) in working.samples_mut().iter_mut().enumerate() {
        if strip.contains(&i) {
            s.attrs = vec![None; n_attr];
        }
    }
    working
}

/// One forward-backward iteration over `batch` (indices into `dataset`).
///
/// Order: forward traces, all gradients at the pre-step parameters, loss
/// recording, then updates (classifiers, centers, weights). Aborts with a
/// diagnostic on a non-finite loss.
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<LossRecord> {
    state.iteration += 1;
    let iteration = state.iteration;
    let n_attr = config.schema.n_attr_levels();
    let lambda = config.lambda;

    let tree = &state.model.tree;
    let heads = &state.model.heads;

    // forward
    let mut traces = Vec::with_capacity(batch.len());
    let mut paths = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = dataset.sample(i);
        traces.push(tree.propagate_routed(&s.features, config.routing)?);
        paths.push(s.path());
    }

    // classification backward at pre-step parameters
    let labeled: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .filter_map(|(bi, &i)| dataset.sample(i).class.map(|y| (bi, y)))
        .collect();
    let n_e = labeled.len();
    let inv_ne = if n_e > 0 { 1.0 / n_e as f64 } else { 0.0 };

    let mut ms_sum = 0.0;
    let mut head_backs: Vec<Option<HeadBackward>> = vec![None; batch.len()];
    let mut head_w_sums: Vec<Matrix> = (0..heads.leaf_count())
        .map(|leaf| {
            let (w, _) = heads.map(leaf);
            Matrix::zeros(w.rows(), w.cols())
        })
        .collect();
    let mut head_b_sums: Vec<Vec<f64>> = vec![vec![0.0; heads.n_classes()]; heads.leaf_count()];
    for &(bi, label) in &labeled {
        let hb = heads.marginal_softmax_backward(tree, &traces[bi], label, inv_ne)?;
        ms_sum += hb.loss;
        for leaf in 0..heads.leaf_count() {
            head_w_sums[leaf].add_scaled(1.0, &hb.weight_grads[leaf]);
            axpy(&mut head_b_sums[leaf], 1.0, &hb.bias_grads[leaf]);
        }
        head_backs[bi] = Some(hb);
    }

    // clustering loss at pre-step parameters
    let pairs: Vec<(&crate::tree::MembershipTrace, &crate::schema::AttributePath)> =
        traces.iter().zip(paths.iter()).collect();
    let (level_sums, level_counts) = tree.level_losses(&pairs)?;
    let pat_recorded: f64 = level_sums
        .iter()
        .zip(&level_counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .sum();
    let ms_recorded = ms_sum * inv_ne;
    let total = ms_recorded + lambda * pat_recorded;
    if !total.is_finite() || !ms_recorded.is_finite() || !pat_recorded.is_finite() {
        let mut dump = String::new();
        let _ = writeln!(dump, "batch size {}, class-labeled {}", batch.len(), n_e);
        let _ = writeln!(dump, "level sums {level_sums:?}");
        let _ = writeln!(dump, "level counts {level_counts:?}");
        let ids: Vec<u64> = batch.iter().map(|&i| dataset.sample(i).id).collect();
        let _ = writeln!(dump, "sample ids {ids:?}");
        return Err(PatError::NonFiniteLoss {
            iteration,
            total,
            ms: ms_recorded,
            pat: pat_recorded,
            dump,
        });
    }

    // center deltas from pre-step features and posteriors
    let mut deltas: Vec<(usize, Matrix)> = Vec::new();
    if config.alpha != 0.0 {
        for level in 0..n_attr {
            let entries_for = |level: usize| -> Vec<(&crate::tree::MembershipTrace, Option<usize>)> {
                traces
                    .iter()
                    .zip(&paths)
                    .map(|(t, p)| {
                        let label = if p.labeled_prefix_len() >= level + 1 {
                            p.label(level)
                        } else {
                            None
                        };
                        (t, label)
                    })
                    .collect()
            };
            let entries = entries_for(level);
            for id in tree.level_ids(level) {
                let delta = tree.center_delta(id, &entries)?;
                deltas.push((id, delta));
            }
        }
    }

    // combined feature errors and the reverse sweep
    let mut gw_sums: Vec<Matrix> = tree
        .nodes()
        .iter()
        .map(|n| Matrix::zeros(n.weight.rows(), n.weight.cols()))
        .collect();
    let mut gb_sums: Vec<Vec<f64>> = tree.nodes().iter().map(|n| vec![0.0; n.bias.len()]).collect();
    for bi in 0..batch.len() {
        let mut inject: Vec<Vec<f64>> = tree
            .nodes()
            .iter()
            .map(|n| vec![0.0; n.bias.len()])
            .collect();
        if let Some(hb) = &head_backs[bi] {
            for (offset, id) in tree.leaf_ids().enumerate() {
                axpy(&mut inject[id], 1.0, &hb.leaf_feature_errors[offset]);
            }
        }
        if lambda != 0.0 {
            let prefix = tree.labeled_path_prefix(&paths[bi]);
            for level in 0..prefix.len() - 1 {
                let scale = lambda / level_counts[level] as f64;
                let gt_index = prefix[level];
                let gt_center = paths[bi].label(level).unwrap();
                for id in tree.level_ids(level) {
                    let gt = if tree.node(id).index == gt_index {
                        Some(gt_center)
                    } else {
                        None
                    };
                    let err = tree.pat_backward_features(id, &traces[bi], gt)?;
                    axpy(&mut inject[id], scale, &err);
                }
            }
        }
        let mass = match (config.routing, &head_backs[bi]) {
            (Routing::Soft, Some(hb)) => Some(hb.leaf_mass_grads.as_slice()),
            _ => None,
        };
        let back = tree.backward_pass(&traces[bi], &inject, mass)?;
        for id in 0..tree.n_nodes() {
            gw_sums[id].add_scaled(1.0, &back.weight_grads[id]);
            axpy(&mut gb_sums[id], 1.0, &back.bias_grads[id]);
        }
    }

    let record = LossRecord {
        iteration,
        total,
        ms: ms_recorded,
        pat: pat_recorded,
    };
    state.history.push(record);

    // apply updates: classifiers, then centers, then weights
    let mu = config.mu;
    for leaf in 0..state.model.heads.leaf_count() {
        let (w, b) = state.model.heads.map_mut(leaf);
        w.add_scaled(-mu, &head_w_sums[leaf]);
        axpy(b, -mu, &head_b_sums[leaf]);
    }
    for (id, delta) in &deltas {
        state.model.tree.apply_center_update(*id, delta, config.alpha)?;
    }
    for id in 0..state.model.tree.n_nodes() {
        let node = state.model.tree.node_mut(id);
        node.weight.add_scaled(-mu, &gw_sums[id]);
        axpy(&mut node.bias, -mu, &gb_sums[id]);
    }

    Ok(record)
}

/// Runs the full training loop on a fresh seeded model.
///
/// Applies the attribute-label fraction to a working copy of the dataset,
/// then performs `iterations` steps over cycling seeded batches.
pub fn run_training(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PatError::EmptyDataset);
    }
    dataset.check_schema(&config.schema)?;
    let n_classes = dataset
        .n_classes()
        .ok_or_else(|| PatError::InvalidConfig("dataset has no class labels".into()))?;

    let working = apply_label_fraction(dataset, config.attribute_label_fraction, config.seed);
    let widths = config.full_widths(working.feature_width());
    let model = PatModel::new(
        &config.schema,
        &widths,
        n_classes,
        stream_seed(config.seed, STREAM_INIT),
    )?;
    let mut state = TrainState {
        model,
        iteration: 0,
        history: Vec::with_capacity(config.iterations),
    };
    let mut stream = BatchStream::new(&working, config.batch_size, config.seed);
    for _ in 0..config.iterations {
        let batch = stream.next_batch()?;
        train_step(&mut state, &working, &batch, config)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Sample, Source, SynthConfig};
    use crate::kernels::norm;

    fn small_config() -> TrainConfig {
        let schema = AttributeSchema::new(vec![("a", 2), ("b", 3)]).unwrap();
        TrainConfig {
            hidden_widths: vec![8, 8, 8],
            iterations: 12,
            batch_size: 8,
            ..TrainConfig::default_for(schema)
        }
    }

    fn small_data() -> Dataset {
        let cfg = SynthConfig {
            n_train: 60,
            n_test: 10,
            input_dim: 6,
            ..SynthConfig::default()
        };
        generate(&cfg).unwrap().0
    }

    #[test]
    fn batches_cover_dataset_with_short_tail() {
        let mut ds = Dataset::new(1, 0);
        for i in 0..10 {
            ds.push(Sample {
                id: i,
                features: vec![i as f64 + 1.0],
                attrs: vec![],
                class: Some(0),
                source: Source::Primary,
            })
            .unwrap();
        }
        let batches = make_batches(&ds, 4, 1, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_deterministic_per_epoch() {
        let ds = small_data();
        assert_eq!(
            make_batches(&ds, 16, 5, 0).unwrap(),
            make_batches(&ds, 16, 5, 0).unwrap()
        );
        assert_ne!(
            make_batches(&ds, 16, 5, 0).unwrap(),
            make_batches(&ds, 16, 5, 1).unwrap()
        );
    }

    #[test]
    fn batches_draw_half_from_auxiliary_source() {
        let mut ds = Dataset::new(1, 0);
        for i in 0..20 {
            ds.push(Sample {
                id: i,
                features: vec![1.0],
                attrs: vec![],
                class: Some(0),
                source: if i < 12 {
                    Source::Primary
                } else {
                    Source::Auxiliary
                },
            })
            .unwrap();
        }
        let batches = make_batches(&ds, 6, 3, 0).unwrap();
        for batch in &batches {
            let aux = batch.iter().filter(|&&i| i >= 12).count();
            assert_eq!(aux, 3);
        }
        // primary split 12 / (6 - 3) = 4 batches
        assert_eq!(batches.len(), 4);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset::new(2, 0);
        assert!(matches!(
            make_batches(&ds, 4, 1, 0).unwrap_err(),
            PatError::EmptyDataset
        ));
    }

    #[test]
    fn label_fraction_zero_strips_everything() {
        let ds = small_data();
        let stripped = apply_label_fraction(&ds, 0.0, 9);
        assert!(stripped
            .samples()
            .iter()
            .all(|s| s.attrs.iter().all(|a| a.is_none())));
        let kept = apply_label_fraction(&ds, 1.0, 9);
        assert_eq!(kept, ds);
        let half = apply_label_fraction(&ds, 0.5, 9);
        let n = half
            .samples()
            .iter()
            .filter(|s| s.attrs.iter().any(|a| a.is_some()))
            .count();
        assert_eq!(n, 30);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data();
        let cfg = small_config();
        let a = run_training(&ds, &cfg).unwrap();
        let b = run_training(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn one_iteration_equals_one_step() {
        let ds = small_data();
        let cfg = TrainConfig {
            iterations: 1,
            ..small_config()
        };
        let auto = run_training(&ds, &cfg).unwrap();

        let widths = cfg.full_widths(ds.feature_width());
        let model = PatModel::new(
            &cfg.schema,
            &widths,
            ds.n_classes().unwrap(),
            stream_seed(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let mut state = TrainState {
            model,
            iteration: 0,
            history: Vec::new(),
        };
        let batch = make_batches(&ds, cfg.batch_size, cfg.seed, 0).unwrap()[0].clone();
        train_step(&mut state, &ds, &batch, &cfg).unwrap();
        assert_eq!(auto.model, state.model);
        assert_eq!(auto.history, state.history);
    }

    #[test]
    fn zero_rates_leave_parameters_unchanged_but_record_losses() {
        let ds = small_data();
        let cfg = TrainConfig {
            mu: 0.0,
            alpha: 0.0,
            iterations: 3,
            ..small_config()
        };
        let widths = cfg.full_widths(ds.feature_width());
        let fresh = PatModel::new(
            &cfg.schema,
            &widths,
            ds.n_classes().unwrap(),
            stream_seed(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let state = run_training(&ds, &cfg).unwrap();
        assert_eq!(state.model, fresh);
        assert_eq!(state.history.len(), 3);
        assert!(state.history.iter().all(|r| r.total > 0.0));
    }

    #[test]
    fn zero_label_fraction_freezes_centers() {
        let ds = small_data();
        let cfg = TrainConfig {
            attribute_label_fraction: 0.0,
            iterations: 8,
            ..small_config()
        };
        let widths = cfg.full_widths(ds.feature_width());
        let fresh = PatModel::new(
            &cfg.schema,
            &widths,
            ds.n_classes().unwrap(),
            stream_seed(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let state = run_training(&ds, &cfg).unwrap();
        for id in 0..fresh.tree.n_nodes() {
            assert_eq!(
                state.model.tree.node(id).centers,
                fresh.tree.node(id).centers
            );
        }
        // weights still moved
        assert_ne!(state.model.tree.node(0).weight, fresh.tree.node(0).weight);
        assert!(state.history.iter().all(|r| r.pat == 0.0));
    }

    #[test]
    fn recorded_losses_satisfy_the_joint_identity() {
        let ds = small_data();
        let state = run_training(&ds, &small_config()).unwrap();
        for r in &state.history {
            assert!(r.ms >= 0.0 && r.pat >= 0.0);
            assert!((r.total - (r.ms + 0.1 * r.pat)).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_sample_step_moves_the_pushed_center_as_worked_out() {
        // identity root transform, centers on the axes, one sample on the
        // first center: the second center moves along the feature axis by
        // its halved posterior
        let schema = AttributeSchema::new(vec![("a", 2)]).unwrap();
        let mut ds = Dataset::new(2, 1);
        ds.push(Sample {
            id: 0,
            features: vec![1.0, 0.0],
            attrs: vec![Some(0)],
            class: Some(0),
            source: Source::Primary,
        })
        .unwrap();
        let cfg = TrainConfig {
            hidden_widths: vec![2, 2],
            iterations: 1,
            batch_size: 1,
            mu: 0.0,
            alpha: 1.0,
            ..TrainConfig::default_for(schema.clone())
        };
        let mut model = PatModel::new(&cfg.schema, &[2, 2, 2], 2, 1).unwrap();
        let root = model.tree.node_id(0, 0);
        model.tree.node_mut(root).weight =
            Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        model.tree.node_mut(root).bias = vec![0.0, 0.0];
        model.tree.node_mut(root).centers =
            Some(Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let mut state = TrainState {
            model,
            iteration: 0,
            history: Vec::new(),
        };
        train_step(&mut state, &ds, &[0], &cfg).unwrap();
        let centers = state.model.tree.node(root).centers.as_ref().unwrap();
        let moved = (1.0 / (std::f64::consts::E + 1.0)) / 2.0;
        assert_eq!(centers.row(0), &[1.0, 0.0]);
        assert!((centers.at(1, 0) - (-moved)).abs() < 1e-12);
        assert!((centers.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((centers.at(1, 0) - (-0.13447)).abs() < 1e-5);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let ds = small_data();
        let cfg = small_config();
        let widths = cfg.full_widths(ds.feature_width());
        let mut model = PatModel::new(&cfg.schema, &widths, ds.n_classes().unwrap(), 3).unwrap();
        let (_, b) = model.heads.map_mut(0);
        b[0] = f64::NAN;
        let mut state = TrainState {
            model,
            iteration: 0,
            history: Vec::new(),
        };
        let batch: Vec<usize> = (0..8).collect();
        match train_step(&mut state, &ds, &batch, &cfg).unwrap_err() {
            PatError::NonFiniteLoss {
                iteration, dump, ..
            } => {
                assert_eq!(iteration, 1);
                assert!(dump.contains("sample ids"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn center_norms_grow_monotonically_during_training() {
        let ds = small_data();
        let cfg = small_config();
        let widths = cfg.full_widths(ds.feature_width());
        let fresh = PatModel::new(
            &cfg.schema,
            &widths,
            ds.n_classes().unwrap(),
            stream_seed(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        let state = run_training(&ds, &cfg).unwrap();
        for id in 0..fresh.tree.n_nodes() {
            if let (Some(before), Some(after)) = (
                &fresh.tree.node(id).centers,
                &state.model.tree.node(id).centers,
            ) {
                for m in 0..before.rows() {
                    assert!(norm(after.row(m)) >= norm(before.row(m)) - 1e-12);
                }
            }
        }
    }
}
