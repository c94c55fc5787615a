//! Baselines and the benchmark harness: a flat classifier (also the
//! degenerate-equivalence twin of a root-only tree), attribute-specific
//! subset models, the hard-routing ablation, the four-way comparison, and
//! the attribute-label-fraction sweep.
//!
//! The flat trainer deliberately mirrors the tree trainer operation by
//! operation (same kernels, same accumulation order, same update
//! expressions), so a root-only tree and a flat classifier of the same
//! widths and seed produce bit-identical loss traces.

use crate::data::{combo_index, combo_states, Dataset, Sample};
use crate::error::{PatError, Result};
use crate::head::MARGINAL_FLOOR;
use crate::kernels::{affine_backward, affine_preact, axpy, relu, softmax, Matrix};
use crate::schema::AttributeSchema;
use crate::trainer::{
    argmax, run_training, stream_seed, BatchStream, LossRecord, PatModel, TrainConfig,
    STREAM_INIT,
};
use crate::tree::Routing;
use crate::verify::{cluster_purity, level_purity, NodePurity};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

pub const BENCH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_SWEEP_FRACTIONS: [f64; 7] = [0.0, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0];

// ---------------------------------------------------------------------------
// Flat baseline
// ---------------------------------------------------------------------------

/// Plain rectified feed-forward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatNet {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub out: (Matrix, Vec<f64>),
    pub n_classes: usize,
}

pub struct FlatTrace {
    pub preacts: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl FlatNet {
    /// Initialization draws match a root-only tree plus classifier with the
    /// same widths and seed, draw for draw.
    pub fn new(widths: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if widths.len() < 2 {
            return Err(PatError::InvalidConfig(
                "flat net needs input and at least one hidden width".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) || n_classes == 0 {
            return Err(PatError::InvalidConfig("widths must be positive".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw_layer = |fan_in: usize, fan_out: usize| -> (Matrix, Vec<f64>) {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = rng.gen_range(-s..s);
            }
            let b: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-s..s)).collect();
            (w, b)
        };
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            layers.push(draw_layer(widths[i], widths[i + 1]));
        }
        let out = draw_layer(*widths.last().unwrap(), n_classes);
        Ok(FlatNet {
            layers,
            out,
            n_classes,
        })
    }

    pub fn forward(&self, features: &[f64]) -> Result<FlatTrace> {
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut x = features;
        for (w, b) in &self.layers {
            let z = affine_preact(w, b, x)?;
            let h = relu(&z);
            preacts.push(z);
            hidden.push(h);
            x = hidden.last().unwrap();
        }
        let logits = affine_preact(&self.out.0, &self.out.1, x)?;
        Ok(FlatTrace {
            preacts,
            hidden,
            logits,
        })
    }

    pub fn predict_dist(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(features)?.logits))
    }

    pub fn predict_class(&self, features: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_dist(features)?))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.len() + b.len())
            .sum::<usize>()
            + self.out.0.len()
            + self.out.1.len()
    }
}

/// SGD training of the flat baseline; a structural twin of the tree trainer
/// restricted to the classification path.
pub fn flat_train(
    dataset: &Dataset,
    hidden_widths: &[usize],
    mu: f64,
    iterations: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(FlatNet, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(PatError::EmptyDataset);
    }
    let n_classes = dataset
        .n_classes()
        .ok_or_else(|| PatError::InvalidConfig("dataset has no class labels".into()))?;
    let mut widths = vec![dataset.feature_width()];
    widths.extend_from_slice(hidden_widths);
    let mut net = FlatNet::new(&widths, n_classes, stream_seed(seed, STREAM_INIT))?;
    let mut stream = BatchStream::new(dataset, batch_size, seed);
    let mut history = Vec::with_capacity(iterations);

    for iteration in 1..=iterations {
        let batch = stream.next_batch()?;
        let mut traces = Vec::with_capacity(batch.len());
        for &i in &batch {
            traces.push(net.forward(&dataset.sample(i).features)?);
        }
        let labeled: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .filter_map(|(bi, &i)| dataset.sample(i).class.map(|y| (bi, y)))
            .collect();
        let n_e = labeled.len();
        let inv_ne = if n_e > 0 { 1.0 / n_e as f64 } else { 0.0 };

        let mut ms_sum = 0.0;
        let mut gw_out = Matrix::zeros(net.out.0.rows(), net.out.0.cols());
        let mut gb_out = vec![0.0; net.out.1.len()];
        let mut feature_errs: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
        for &(bi, label) in &labeled {
            let trace = &traces[bi];
            let pd = softmax(&trace.logits);
            let marginal = pd[label];
            let loss = crate::head::floored_neg_log(marginal);
            ms_sum += loss;
            let d_marginal = if marginal > MARGINAL_FLOOR {
                -1.0 / marginal
            } else {
                0.0
            };
            let base = d_marginal * pd[label];
            let coef = inv_ne * base;
            let mut d_logits = vec![0.0; n_classes];
            for e in 0..n_classes {
                let delta = if e == label { 1.0 } else { 0.0 };
                d_logits[e] = coef * (delta - pd[e]);
            }
            let last = trace.hidden.last().unwrap();
            let mut gw = Matrix::zeros(n_classes, last.len());
            gw.add_outer(1.0, &d_logits, last);
            gw_out.add_scaled(1.0, &gw);
            axpy(&mut gb_out, 1.0, &d_logits);
            feature_errs[bi] = Some(net.out.0.matvec_t(&d_logits));
        }

        let ms_recorded = ms_sum * inv_ne;
        if !ms_recorded.is_finite() {
            return Err(PatError::NonFiniteLoss {
                iteration,
                total: ms_recorded,
                ms: ms_recorded,
                pat: 0.0,
                dump: format!("flat baseline, batch size {}", batch.len()),
            });
        }

        let mut gw_layers: Vec<Matrix> = net
            .layers
            .iter()
            .map(|(w, _)| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut gb_layers: Vec<Vec<f64>> =
            net.layers.iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        for bi in 0..batch.len() {
            let Some(gx) = &feature_errs[bi] else { continue };
            let trace = &traces[bi];
            let sample = dataset.sample(batch[bi]);
            let mut err = vec![0.0; gx.len()];
            axpy(&mut err, 1.0, gx);
            for l in (0..net.layers.len()).rev() {
                let input = if l == 0 {
                    &sample.features
                } else {
                    &trace.hidden[l - 1]
                };
                let (gw, gb, gx_in) =
                    affine_backward(&net.layers[l].0, input, &trace.preacts[l], &err)?;
                gw_layers[l].add_scaled(1.0, &gw);
                axpy(&mut gb_layers[l], 1.0, &gb);
                err = gx_in;
            }
        }

        history.push(LossRecord {
            iteration,
            total: ms_recorded,
            ms: ms_recorded,
            pat: 0.0,
        });

        net.out.0.add_scaled(-mu, &gw_out);
        axpy(&mut net.out.1, -mu, &gb_out);
        for l in 0..net.layers.len() {
            net.layers[l].0.add_scaled(-mu, &gw_layers[l]);
            axpy(&mut net.layers[l].1, -mu, &gb_layers[l]);
        }
    }
    Ok((net, history))
}

// ---------------------------------------------------------------------------
// Parameter matching
// ---------------------------------------------------------------------------

pub fn pat_param_count(schema: &AttributeSchema, widths: &[usize], n_classes: usize) -> usize {
    let n_levels = schema.n_levels();
    let mut count = 0;
    for level in 0..n_levels {
        let nodes = schema.level_node_count(level);
        count += nodes * (widths[level + 1] * widths[level] + widths[level + 1]);
        if level + 1 < n_levels {
            count += nodes * schema.branching(level) * widths[level + 1];
        }
    }
    count += schema.leaf_count() * (n_classes * widths[n_levels] + n_classes);
    count
}

pub fn flat_param_count(widths: &[usize], n_classes: usize) -> usize {
    let mut count = 0;
    for i in 0..widths.len() - 1 {
        count += widths[i + 1] * widths[i] + widths[i + 1];
    }
    count + n_classes * widths[widths.len() - 1] + n_classes
}

/// Hidden widths for a flat net of the same depth whose parameter count is
/// within 2% of the tree model's, found by scaling the tree's widths.
pub fn matched_flat_widths(
    schema: &AttributeSchema,
    widths: &[usize],
    n_classes: usize,
) -> Result<Vec<usize>> {
    let target = pat_param_count(schema, widths, n_classes) as f64;
    let base: Vec<f64> = widths[1..].iter().map(|&w| w as f64).collect();
    let d0 = widths[0];
    let widths_for = |gamma: f64| -> Vec<usize> {
        let mut out = vec![d0];
        out.extend(
            base.iter()
                .map(|w| ((w * gamma).round() as usize).max(1)),
        );
        out
    };
    let count_for = |gamma: f64| flat_param_count(&widths_for(gamma), n_classes) as f64;

    let mut lo = 0.01;
    let mut hi = 1.0;
    while count_for(hi) < target {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if count_for(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let cand_lo = widths_for(lo);
    let cand_hi = widths_for(hi);
    let mut best = if (flat_param_count(&cand_lo, n_classes) as f64 - target).abs()
        <= (flat_param_count(&cand_hi, n_classes) as f64 - target).abs()
    {
        cand_lo
    } else {
        cand_hi
    };

    // nudge one layer at a time toward the target
    for _ in 0..10_000 {
        let count = flat_param_count(&best, n_classes) as f64;
        if (count - target).abs() / target <= 0.02 {
            return Ok(best[1..].to_vec());
        }
        let widest = (1..best.len()).max_by_key(|&i| best[i]).unwrap();
        if count < target {
            best[widest] += 1;
        } else if best[widest] > 1 {
            best[widest] -= 1;
        } else {
            break;
        }
    }
    Err(PatError::InvalidConfig(
        "could not match flat parameter count within 2%".into(),
    ))
}

// ---------------------------------------------------------------------------
// Attribute-specific baseline
// ---------------------------------------------------------------------------

/// One flat model per full attribute combination, routed by ground-truth
/// attributes at test time.
pub struct AttributeSpecificModels {
    pub schema: AttributeSchema,
    pub models: Vec<FlatNet>,
}

impl AttributeSpecificModels {
    pub fn predict_class(&self, sample: &Sample) -> Result<usize> {
        let states: Option<Vec<usize>> = sample.attrs.iter().copied().collect();
        let combo = match states {
            Some(states) => combo_index(&self.schema, &states),
            // unlabeled samples fall back to the first subset model
            None => 0,
        };
        self.models[combo].predict_class(&sample.features)
    }
}

pub fn train_attribute_specific(
    train: &Dataset,
    schema: &AttributeSchema,
    hidden_widths: &[usize],
    mu: f64,
    iterations: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(AttributeSpecificModels, Vec<LossRecord>)> {
    let mut models = Vec::with_capacity(schema.leaf_count());
    let mut history = Vec::new();
    for combo in 0..schema.leaf_count() {
        let states = combo_states(schema, combo);
        let mut subset = Dataset::new(train.feature_width(), train.n_attr_levels());
        for s in train.samples() {
            let matches = s
                .attrs
                .iter()
                .zip(&states)
                .all(|(a, want)| *a == Some(*want));
            if matches {
                subset.push(s.clone())?;
            }
        }
        let (net, h) = flat_train(&subset, hidden_widths, mu, iterations, batch_size, seed)?;
        models.push(net);
        history.extend(h);
    }
    Ok((
        AttributeSpecificModels {
            schema: schema.clone(),
            models,
        },
        history,
    ))
}

// ---------------------------------------------------------------------------
// Evaluation and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub n_labeled: usize,
}

fn evaluate_with(
    n_classes: usize,
    dataset: &Dataset,
    mut predict: impl FnMut(&Sample) -> Result<usize>,
) -> Result<EvalResult> {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for s in dataset.samples() {
        let Some(y) = s.class else { continue };
        if y >= n_classes {
            return Err(PatError::InvalidLabel {
                label: y,
                bound: n_classes,
            });
        }
        let pred = predict(s)?;
        confusion[y][pred] += 1;
        labeled += 1;
        if pred == y {
            correct += 1;
        }
    }
    if labeled == 0 {
        return Err(PatError::InvalidConfig(
            "evaluation dataset has no class labels".into(),
        ));
    }
    Ok(EvalResult {
        accuracy: correct as f64 / labeled as f64,
        confusion,
        n_labeled: labeled,
    })
}

pub fn evaluate_pat(model: &PatModel, dataset: &Dataset, routing: Routing) -> Result<EvalResult> {
    evaluate_with(model.heads.n_classes(), dataset, |s| {
        model.predict_class(&s.features, routing)
    })
}

pub fn evaluate_flat(net: &FlatNet, dataset: &Dataset) -> Result<EvalResult> {
    evaluate_with(net.n_classes, dataset, |s| net.predict_class(&s.features))
}

pub fn evaluate_attr_specific(
    models: &AttributeSpecificModels,
    dataset: &Dataset,
) -> Result<EvalResult> {
    evaluate_with(models.models[0].n_classes, dataset, |s| {
        models.predict_class(s)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Flat,
    AttributeSpecific,
    HardTree,
    Pat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Flat,
        Variant::AttributeSpecific,
        Variant::HardTree,
        Variant::Pat,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Flat => "flat",
            Variant::AttributeSpecific => "attr-specific",
            Variant::HardTree => "hard-at",
            Variant::Pat => "pat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_test: usize,
    pub n_classes: usize,
    pub confusion: Vec<Vec<usize>>,
    /// Mass-weighted purity per non-leaf level (empty for flat baselines).
    pub level_purity: Vec<f64>,
    pub node_purity: Vec<NodePurity>,
    pub history: Vec<LossRecord>,
    pub config_echo: String,
}

impl MetricsReport {
    pub fn root_purity(&self) -> Option<f64> {
        self.level_purity.first().copied()
    }
}

/// Resolved configuration echoed into every report.
pub fn config_echo(config: &TrainConfig, seed: u64) -> String {
    let mut out = String::new();
    let attrs: Vec<String> = config
        .schema
        .attributes()
        .iter()
        .map(|a| format!("{}:{}", a.name, a.states))
        .collect();
    let _ = writeln!(out, "schema {}", attrs.join(","));
    let widths: Vec<String> = config.hidden_widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(out, "hidden_widths {}", widths.join(" "));
    let _ = writeln!(out, "lambda {}", config.lambda);
    let _ = writeln!(out, "alpha {}", config.alpha);
    let _ = writeln!(out, "mu {}", config.mu);
    let _ = writeln!(out, "iterations {}", config.iterations);
    let _ = writeln!(out, "batch_size {}", config.batch_size);
    let _ = writeln!(
        out,
        "attribute_label_fraction {}",
        config.attribute_label_fraction
    );
    let _ = writeln!(
        out,
        "routing {}",
        match config.routing {
            Routing::Soft => "soft",
            Routing::Hard => "hard",
        }
    );
    let _ = writeln!(out, "seed {seed}");
    out
}

/// Trains and evaluates the requested variants with one seed and a shared
/// budget: parameter-matched flat baseline, attribute-specific subset
/// models, the hard-routing ablation, and the full soft tree.
pub fn run_comparison(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    seed: u64,
    variants: &[Variant],
) -> Result<Vec<MetricsReport>> {
    let n_classes = train
        .n_classes()
        .ok_or_else(|| PatError::InvalidConfig("dataset has no class labels".into()))?;
    let echo = config_echo(config, seed);
    let mut reports = Vec::with_capacity(variants.len());
    for variant in variants {
        let report = match variant {
            Variant::Pat | Variant::HardTree => {
                let routing = if *variant == Variant::Pat {
                    Routing::Soft
                } else {
                    Routing::Hard
                };
                let cfg = TrainConfig {
                    seed,
                    routing,
                    ..config.clone()
                };
                let state = run_training(train, &cfg)?;
                let eval = evaluate_pat(&state.model, test, routing)?;
                let purity = cluster_purity(&state.model.tree, test, routing)?;
                let levels: Vec<f64> = (0..config.schema.n_attr_levels())
                    .map(|l| level_purity(&purity, l))
                    .collect();
                MetricsReport {
                    variant: variant.name().to_string(),
                    seed,
                    accuracy: eval.accuracy,
                    n_test: eval.n_labeled,
                    n_classes,
                    confusion: eval.confusion,
                    level_purity: levels,
                    node_purity: purity,
                    history: state.history,
                    config_echo: echo.clone(),
                }
            }
            Variant::Flat | Variant::AttributeSpecific => {
                let full = config.full_widths(train.feature_width());
                let hidden = matched_flat_widths(&config.schema, &full, n_classes)?;
                if *variant == Variant::Flat {
                    let (net, history) = flat_train(
                        train,
                        &hidden,
                        config.mu,
                        config.iterations,
                        config.batch_size,
                        seed,
                    )?;
                    let eval = evaluate_flat(&net, test)?;
                    MetricsReport {
                        variant: variant.name().to_string(),
                        seed,
                        accuracy: eval.accuracy,
                        n_test: eval.n_labeled,
                        n_classes,
                        confusion: eval.confusion,
                        level_purity: Vec::new(),
                        node_purity: Vec::new(),
                        history,
                        config_echo: echo.clone(),
                    }
                } else {
                    let (models, history) = train_attribute_specific(
                        train,
                        &config.schema,
                        &hidden,
                        config.mu,
                        config.iterations,
                        config.batch_size,
                        seed,
                    )?;
                    let eval = evaluate_attr_specific(&models, test)?;
                    MetricsReport {
                        variant: variant.name().to_string(),
                        seed,
                        accuracy: eval.accuracy,
                        n_test: eval.n_labeled,
                        n_classes,
                        confusion: eval.confusion,
                        level_purity: Vec::new(),
                        node_purity: Vec::new(),
                        history,
                        config_echo: echo.clone(),
                    }
                }
            }
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Comparison over several seeds, parallel across seeds, in seed order.
pub fn run_comparison_over_seeds(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<Vec<MetricsReport>>> {
    seeds
        .par_iter()
        .map(|&seed| run_comparison(train, test, config, seed, variants))
        .collect()
}

pub fn mean_accuracy(reports: &[&MetricsReport]) -> f64 {
    reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub fraction: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_seed: Vec<(u64, f64)>,
}

/// Trains the soft tree at each attribute-label fraction over the given
/// seeds and reports per-fraction accuracy statistics.
pub fn label_fraction_sweep(
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(f64, u64)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    let results: Result<Vec<(f64, u64, f64)>> = jobs
        .par_iter()
        .map(|&(fraction, seed)| {
            let cfg = TrainConfig {
                attribute_label_fraction: fraction,
                seed,
                routing: Routing::Soft,
                ..config.clone()
            };
            let state = run_training(train, &cfg)?;
            let eval = evaluate_pat(&state.model, test, Routing::Soft)?;
            Ok((fraction, seed, eval.accuracy))
        })
        .collect();
    let results = results?;

    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let per_seed: Vec<(u64, f64)> = results
            .iter()
            .filter(|(f, _, _)| *f == fraction)
            .map(|(_, s, a)| (*s, *a))
            .collect();
        let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
        let var = per_seed
            .iter()
            .map(|(_, a)| (a - mean) * (a - mean))
            .sum::<f64>()
            / per_seed.len() as f64;
        rows.push(SweepRow {
            fraction,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            per_seed,
        });
    }
    Ok(rows)
}

/// Structured-text report, one per trained variant.
pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "patreport 1");
    let _ = writeln!(out, "variant {}", report.variant);
    let _ = writeln!(out, "seed {}", report.seed);
    let _ = writeln!(out, "accuracy {:.6}", report.accuracy);
    let _ = writeln!(out, "n_test {}", report.n_test);
    let _ = writeln!(out, "classes {}", report.n_classes);
    let _ = writeln!(out, "config");
    out.push_str(&report.config_echo);
    let _ = writeln!(out, "end_config");
    let _ = writeln!(out, "confusion {}", report.n_classes);
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    let _ = writeln!(out, "purity {}", report.node_purity.len());
    for p in &report.node_purity {
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6}",
            p.level, p.index, p.purity, p.mass
        );
    }
    let _ = writeln!(out, "loss_curve {}", report.history.len());
    for r in &report.history {
        let _ = writeln!(out, "{}\t{:.9}\t{:.9}\t{:.9}", r.iteration, r.total, r.ms, r.pat);
    }
    let _ = writeln!(out, "end");
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat tab-separated summary of a comparison run.
pub fn comparison_summary(reports: &[MetricsReport]) -> String {
    let mut out = String::from("variant\tseed\taccuracy\troot_purity\n");
    for r in reports {
        let purity = r
            .root_purity()
            .map(|p| format!("{p:.6}"))
            .unwrap_or_else(|| "-".to_string());
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.variant, r.seed, r.accuracy, purity);
    }
    out
}

/// Flat tab-separated summary of a label-fraction sweep.
pub fn sweep_summary(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction\tmean_accuracy\tstd_accuracy\tn_seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{}",
            r.fraction,
            r.mean_accuracy,
            r.std_accuracy,
            r.per_seed.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::trainer::TrainState;

    fn flat_synth(n_train: usize) -> (Dataset, Dataset) {
        let cfg = SynthConfig {
            schema: AttributeSchema::empty(),
            n_classes: 3,
            input_dim: 6,
            n_train,
            n_test: 40,
            ..SynthConfig::default()
        };
        generate(&cfg).unwrap()
    }

    #[test]
    fn root_only_tree_and_flat_net_train_identically() {
        let (train, _) = flat_synth(80);
        let schema = AttributeSchema::empty();
        let cfg = TrainConfig {
            hidden_widths: vec![10],
            iterations: 30,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default_for(schema)
        };
        let state = run_training(&train, &cfg).unwrap();
        let (net, history) =
            flat_train(&train, &[10], cfg.mu, cfg.iterations, cfg.batch_size, cfg.seed).unwrap();

        assert_eq!(state.history.len(), history.len());
        for (a, b) in state.history.iter().zip(&history) {
            assert_eq!(a.total, b.total, "iteration {}", a.iteration);
            assert_eq!(a.ms, b.ms);
        }
        // final parameters agree bit for bit
        let root = state.model.tree.node(0);
        assert_eq!(root.weight, net.layers[0].0);
        assert_eq!(root.bias, net.layers[0].1);
        let (hw, hb) = state.model.heads.map(0);
        assert_eq!(*hw, net.out.0);
        assert_eq!(*hb, net.out.1);
    }

    #[test]
    fn matched_widths_land_within_two_percent() {
        let schema = AttributeSchema::new(vec![("a", 2), ("b", 3)]).unwrap();
        let widths = vec![16, 64, 64, 64];
        let hidden = matched_flat_widths(&schema, &widths, 7).unwrap();
        assert_eq!(hidden.len(), 3);
        let target = pat_param_count(&schema, &widths, 7) as f64;
        let mut full = vec![16];
        full.extend(&hidden);
        let got = flat_param_count(&full, 7) as f64;
        assert!((got - target).abs() / target <= 0.02);
        // and the real models agree with the arithmetic
        let model = PatModel::new(&schema, &widths, 7, 1).unwrap();
        assert_eq!(model.param_count(), target as usize);
        let net = FlatNet::new(&full, 7, 1).unwrap();
        assert_eq!(net.param_count(), got as usize);
    }

    #[test]
    fn hard_routing_differs_from_soft() {
        let cfg_data = SynthConfig {
            n_train: 120,
            n_test: 60,
            input_dim: 8,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg_data).unwrap();
        let schema = train_schema();
        let cfg = TrainConfig {
            hidden_widths: vec![8, 8, 8],
            iterations: 25,
            batch_size: 16,
            ..TrainConfig::default_for(schema)
        };
        let reports = run_comparison(
            &train,
            &test,
            &cfg,
            1,
            &[Variant::HardTree, Variant::Pat],
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].variant, "hard-at");
        assert_eq!(reports[1].variant, "pat");
        for r in &reports {
            let rows: usize = r.confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
            assert_eq!(rows, r.n_test);
        }
    }

    fn train_schema() -> AttributeSchema {
        AttributeSchema::new(vec![("a", 2), ("b", 3)]).unwrap()
    }

    #[test]
    fn sweep_rows_follow_requested_fractions() {
        let cfg_data = SynthConfig {
            n_train: 90,
            n_test: 30,
            input_dim: 6,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg_data).unwrap();
        let cfg = TrainConfig {
            hidden_widths: vec![6, 6, 6],
            iterations: 10,
            batch_size: 16,
            ..TrainConfig::default_for(train_schema())
        };
        let rows = label_fraction_sweep(&train, &test, &cfg, &[0.0, 1.0], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fraction, 0.0);
        assert_eq!(rows[1].fraction, 1.0);
        assert_eq!(rows[0].per_seed.len(), 2);
        // fraction 1.0 with the same seed reproduces a plain training run
        let cfg_one = TrainConfig {
            attribute_label_fraction: 1.0,
            seed: 1,
            ..cfg.clone()
        };
        let state: TrainState = run_training(&train, &cfg_one).unwrap();
        let eval = evaluate_pat(&state.model, &test, Routing::Soft).unwrap();
        assert_eq!(rows[1].per_seed[0].1, eval.accuracy);
    }

    #[test]
    fn attribute_specific_models_route_by_ground_truth() {
        let cfg_data = SynthConfig {
            n_train: 120,
            n_test: 36,
            input_dim: 6,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg_data).unwrap();
        let (models, _) =
            train_attribute_specific(&train, &train_schema(), &[8, 8, 8], 0.05, 15, 16, 1)
                .unwrap();
        assert_eq!(models.models.len(), 6);
        let eval = evaluate_attr_specific(&models, &test).unwrap();
        assert!(eval.accuracy >= 0.0 && eval.accuracy <= 1.0);
        assert_eq!(eval.n_labeled, 36);
    }
}
