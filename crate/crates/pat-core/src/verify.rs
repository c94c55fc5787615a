//! Verification oracles: central finite differences, an independent naive
//! recomputation of the clustering loss formulas, the prescribed-backward
//! divergence diagnostic, and cluster purity.
//!
//! The naive oracle shares no code with the tree module: it recomputes
//! membership, losses, feature errors, and center deltas with its own plain
//! loops so the two routes can be compared at tight tolerances.

use crate::data::Dataset;
use crate::error::Result;
use crate::kernels::Matrix;
use crate::schema::{AttributePath, AttributeSchema};
use crate::trainer::{stream_rng, PatModel};
use crate::tree::{MembershipTrace, PatTree, Routing};
use rand::Rng;

/// Central finite differences of `f` at `point`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0);
    let mut buf = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        buf[i] = point[i] + h;
        let plus = f(&buf);
        buf[i] = point[i] - h;
        let minus = f(&buf);
        buf[i] = point[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error with a floor: coordinates whose gradients are tiny on both
/// routes are compared absolutely at `floor * tolerance`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const GRAD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Checks the analytic gradient of the marginal softmax loss against central
/// finite differences over every parameter of a small two-level model
/// (including the chain through membership masses and the cluster centers).
pub fn gradcheck_marginal_softmax(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let schema = AttributeSchema::new(vec![("a", 2)]).unwrap();
    let model = PatModel::new(&schema, &[4, 5, 4], 3, seed)?;

    let mut rng = stream_rng(seed, 101);
    let inputs: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.gen_range(0.2..1.2)).collect())
        .collect();
    let batch: Vec<(&[f64], usize)> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| (x.as_slice(), i % 3))
        .collect();

    let (_, analytic) = model.ms_gradients_sum(&batch, Routing::Soft)?;
    let n = model.param_count();
    let base: Vec<f64> = (0..n).map(|i| model.param_get(i)).collect();
    let mut probe = model.clone();
    let mut f = |p: &[f64]| -> f64 {
        for (i, v) in p.iter().enumerate() {
            probe.param_set(i, *v);
        }
        probe
            .ms_loss_sum(&batch, Routing::Soft)
            .expect("gradcheck forward failed")
    };
    let numeric = finite_diff_grad(&mut f, &base, 1e-5);

    let mut report = GradCheckReport {
        n_params: n,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance,
    };
    for i in 0..n {
        let e = rel_err(analytic[i], numeric[i], GRAD_REL_FLOOR);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_param = model.param_name(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric[i];
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Naive formula oracle
// ---------------------------------------------------------------------------

fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn naive_norm(a: &[f64]) -> f64 {
    naive_dot(a, a).sqrt()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    naive_dot(a, b) / (naive_norm(a) * naive_norm(b))
}

fn naive_grad_wrt_first(x: &[f64], c: &[f64]) -> Vec<f64> {
    let nx = naive_norm(x);
    let nc = naive_norm(c);
    let cx = naive_dot(c, x);
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        g[i] = c[i] / (nc * nx) - (cx / (nc * nx * nx * nx)) * x[i];
    }
    g
}

/// Plain softmax without stabilization; similarities live in `[-1, 1]`.
fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Independent recomputation: loss, prescribed feature errors, and center
/// deltas, all from the trace features alone (membership is re-derived from
/// the root down with the naive softmax).
#[derive(Debug, Clone)]
pub struct PatOracle {
    pub loss: f64,
    pub level_losses: Vec<f64>,
    /// `[sample][node id]`; empty vectors where the sample has no labels.
    pub feature_errors: Vec<Vec<Vec<f64>>>,
    /// Indexed by node id; `None` at leaves.
    pub center_deltas: Vec<Option<Matrix>>,
}

pub fn oracle_pat_formulas(
    tree: &PatTree,
    batch: &[(&MembershipTrace, &AttributePath)],
) -> PatOracle {
    let schema = tree.schema();
    let n_levels = schema.n_levels();
    let n_attr = schema.n_attr_levels();

    // node id layout recomputed from the schema alone
    let mut offsets = vec![0usize; n_levels + 1];
    for level in 0..n_levels {
        offsets[level + 1] = offsets[level] + schema.level_node_count(level);
    }
    let n_nodes = offsets[n_levels];

    // membership per sample, derived from the root down
    let mut masses: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    let mut posts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch.len());
    let mut simses: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch.len());
    for (trace, _) in batch {
        let mut mass = vec![0.0; n_nodes];
        let mut post = vec![Vec::new(); n_nodes];
        let mut sims = vec![Vec::new(); n_nodes];
        mass[0] = 1.0;
        for level in 0..n_attr {
            let states = schema.branching(level);
            for k in 0..schema.level_node_count(level) {
                let id = offsets[level] + k;
                let centers = tree.node(id).centers.as_ref().unwrap();
                let x = &trace.features[id];
                let s: Vec<f64> = (0..states).map(|m| naive_cos(x, centers.row(m))).collect();
                let soft = naive_softmax(&s);
                let p: Vec<f64> = soft.iter().map(|v| mass[id] * v).collect();
                for m in 0..states {
                    mass[offsets[level + 1] + k * states + m] = p[m];
                }
                sims[id] = s;
                post[id] = p;
            }
        }
        masses.push(mass);
        posts.push(post);
        simses.push(sims);
    }

    // per-sample ground-truth node per level (as far as labels reach)
    let gt_nodes: Vec<Vec<Option<(usize, usize)>>> = batch
        .iter()
        .map(|(_, path)| {
            let mut out = vec![None; n_attr];
            let mut k = 0usize;
            for level in 0..n_attr {
                match path.label(level) {
                    Some(y) => {
                        out[level] = Some((k, y));
                        k = k * schema.branching(level) + y;
                    }
                    None => break,
                }
            }
            out
        })
        .collect();

    // loss
    let mut level_losses = vec![0.0; n_attr];
    for level in 0..n_attr {
        for k in 0..schema.level_node_count(level) {
            let id = offsets[level] + k;
            for (si, _) in batch.iter().enumerate() {
                let Some((gt_k, gt_y)) = gt_nodes[si][level] else {
                    continue;
                };
                let p = &posts[si][id];
                let s = &simses[si][id];
                for m in 0..p.len() {
                    if k == gt_k && m == gt_y {
                        level_losses[level] += p[m] * (1.0 - s[m]);
                    } else {
                        level_losses[level] += p[m] * (1.0 + s[m]);
                    }
                }
            }
        }
    }

    // prescribed feature errors
    let mut feature_errors: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|_| vec![Vec::new(); n_nodes])
        .collect();
    for (si, (trace, _)) in batch.iter().enumerate() {
        for level in 0..n_attr {
            let Some((gt_k, gt_y)) = gt_nodes[si][level] else {
                continue;
            };
            let states = schema.branching(level);
            for k in 0..schema.level_node_count(level) {
                let id = offsets[level] + k;
                let centers = tree.node(id).centers.as_ref().unwrap();
                let x = &trace.features[id];
                let p = &posts[si][id];
                let mut err = vec![0.0; x.len()];
                if k == gt_k {
                    for m in 0..states {
                        let g = naive_grad_wrt_first(x, centers.row(m));
                        if m == gt_y {
                            for i in 0..err.len() {
                                err[i] -= p[m] * g[i];
                            }
                        } else {
                            for i in 0..err.len() {
                                err[i] += (1.0 / (states as f64 - 1.0)) * p[m] * g[i];
                            }
                        }
                    }
                } else {
                    for m in 0..states {
                        let g = naive_grad_wrt_first(x, centers.row(m));
                        for i in 0..err.len() {
                            err[i] += (1.0 / states as f64) * p[m] * g[i];
                        }
                    }
                }
                feature_errors[si][id] = err;
            }
        }
    }

    // center deltas
    let mut center_deltas: Vec<Option<Matrix>> = vec![None; n_nodes];
    for level in 0..n_attr {
        let states = schema.branching(level);
        for k in 0..schema.level_node_count(level) {
            let id = offsets[level] + k;
            let centers = tree.node(id).centers.as_ref().unwrap();
            let mut delta = Matrix::zeros(states, centers.cols());
            for m in 0..states {
                let mut pull = vec![0.0; centers.cols()];
                let mut push = vec![0.0; centers.cols()];
                let mut n_pull = 0.0;
                let mut n_push = 0.0;
                for (si, (trace, _)) in batch.iter().enumerate() {
                    let Some((_, _)) = gt_nodes[si][level] else {
                        continue;
                    };
                    let y = batch[si].1.label(level).unwrap();
                    let g = naive_grad_wrt_first(centers.row(m), &trace.features[id]);
                    let p = posts[si][id][m];
                    if y == m {
                        n_pull += 1.0;
                        for i in 0..pull.len() {
                            pull[i] += p * g[i];
                        }
                    } else {
                        n_push += 1.0;
                        for i in 0..push.len() {
                            push[i] += p * g[i];
                        }
                    }
                }
                for i in 0..centers.cols() {
                    *delta.at_mut(m, i) = -pull[i] / (1.0 + n_pull) + push[i] / (1.0 + n_push);
                }
            }
            center_deltas[id] = Some(delta);
        }
    }

    PatOracle {
        loss: level_losses.iter().sum(),
        level_losses,
        feature_errors,
        center_deltas,
    }
}

// ---------------------------------------------------------------------------
// Prescribed-backward divergence diagnostic
// ---------------------------------------------------------------------------

/// Compares the prescribed feature-error rule against the central
/// finite-difference gradient of the actual node loss (posteriors recomputed
/// under perturbation, node mass held fixed). The two differ by design; this
/// diagnostic quantifies the gap and is never used for training.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub prescribed: Vec<f64>,
    pub loss_gradient: Vec<f64>,
    pub max_abs_diff: f64,
}

pub fn backward_rule_divergence(
    tree: &PatTree,
    id: usize,
    trace: &MembershipTrace,
    gt: Option<usize>,
    h: f64,
) -> Result<DivergenceReport> {
    let prescribed = tree.pat_backward_features(id, trace, gt)?;
    let centers = tree.node(id).centers.as_ref().unwrap().clone();
    let q = trace.mass[id];

    let mut node_loss_at = |x: &[f64]| -> f64 {
        let sims: Vec<f64> = (0..centers.rows())
            .map(|m| naive_cos(x, centers.row(m)))
            .collect();
        let soft = naive_softmax(&sims);
        let mut loss = 0.0;
        for m in 0..centers.rows() {
            let p = q * soft[m];
            match gt {
                Some(g) if g == m => loss += p * (1.0 - sims[m]),
                _ => loss += p * (1.0 + sims[m]),
            }
        }
        loss
    };
    let loss_gradient = finite_diff_grad(&mut node_loss_at, &trace.features[id], h);
    let max_abs_diff = prescribed
        .iter()
        .zip(&loss_gradient)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(DivergenceReport {
        prescribed,
        loss_gradient,
        max_abs_diff,
    })
}

// ---------------------------------------------------------------------------
// Cluster purity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NodePurity {
    pub level: usize,
    pub index: usize,
    /// Mass-weighted share of samples whose argmax cluster equals their
    /// attribute state at this level.
    pub purity: f64,
    /// Total membership mass of labeled samples at this node.
    pub mass: f64,
}

/// Per non-leaf node: samples are assigned to their argmax cluster and
/// checked against the attribute state, weighted by their membership mass at
/// the node. Samples without a label at the level are skipped.
pub fn cluster_purity(
    tree: &PatTree,
    dataset: &Dataset,
    routing: Routing,
) -> Result<Vec<NodePurity>> {
    let n_attr = tree.schema().n_attr_levels();
    let mut hit = vec![0.0; tree.n_nodes()];
    let mut mass = vec![0.0; tree.n_nodes()];
    for s in dataset.samples() {
        let trace = tree.propagate_routed(&s.features, routing)?;
        for level in 0..n_attr {
            let Some(y) = s.attrs.get(level).copied().flatten() else {
                continue;
            };
            for id in tree.level_ids(level) {
                let q = trace.mass[id];
                if q == 0.0 {
                    continue;
                }
                let assigned = crate::trainer::argmax(&trace.soft[id]);
                mass[id] += q;
                if assigned == y {
                    hit[id] += q;
                }
            }
        }
    }
    let mut out = Vec::new();
    for level in 0..n_attr {
        for id in tree.level_ids(level) {
            let node = tree.node(id);
            out.push(NodePurity {
                level,
                index: node.index,
                purity: if mass[id] > 0.0 { hit[id] / mass[id] } else { 0.0 },
                mass: mass[id],
            });
        }
    }
    Ok(out)
}

/// Mass-weighted purity of one level.
pub fn level_purity(purities: &[NodePurity], level: usize) -> f64 {
    let mut hit = 0.0;
    let mut mass = 0.0;
    for p in purities.iter().filter(|p| p.level == level) {
        hit += p.purity * p.mass;
        mass += p.mass;
    }
    if mass > 0.0 {
        hit / mass
    } else {
        0.0
    }
}
