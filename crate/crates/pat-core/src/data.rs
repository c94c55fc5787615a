//! Synthetic attribute-confounded datasets, the dataset file format, and
//! model persistence.
//!
//! The synthetic generator places one anchor per full attribute combination
//! and one direction per class inside each combination, so attribute
//! variation dominates class variation: the regime the tree is built for.
//! Files are plain text with floats at 17 significant digits so every
//! round trip is lossless.

use crate::error::{PatError, Result};
use crate::head::LeafClassifiers;
use crate::kernels::Matrix;
use crate::schema::{AttributePath, AttributeSchema};
use crate::trainer::TrainConfig;
use crate::tree::{build_tree, PatTree, Routing};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

const MODEL_MAGIC: &str = "patmodel";
const MODEL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Primary,
    Auxiliary,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Primary => "primary",
            Source::Auxiliary => "auxiliary",
        }
    }
}

/// One sample: a feature vector, optional per-level attribute labels,
/// an optional class label, and a source tag for two-source batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub attrs: Vec<Option<usize>>,
    pub class: Option<usize>,
    pub source: Source,
}

impl Sample {
    pub fn path(&self) -> AttributePath {
        AttributePath {
            labels: self.attrs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_width: usize,
    n_attr_levels: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(feature_width: usize, n_attr_levels: usize) -> Self {
        Dataset {
            feature_width,
            n_attr_levels,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.features.len() != self.feature_width {
            return Err(PatError::ShapeMismatch {
                context: "sample features",
                expected: self.feature_width,
                got: sample.features.len(),
            });
        }
        if sample.attrs.len() != self.n_attr_levels {
            return Err(PatError::ShapeMismatch {
                context: "sample attribute labels",
                expected: self.n_attr_levels,
                got: sample.attrs.len(),
            });
        }
        if sample.features.iter().any(|v| !v.is_finite()) {
            return Err(PatError::InvalidConfig(format!(
                "sample {} has non-finite features",
                sample.id
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn n_attr_levels(&self) -> usize {
        self.n_attr_levels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    /// Smallest class count covering every class label, if any are present.
    pub fn n_classes(&self) -> Option<usize> {
        self.samples
            .iter()
            .filter_map(|s| s.class)
            .max()
            .map(|m| m + 1)
    }

    /// Errors unless every attribute label fits the schema.
    pub fn check_schema(&self, schema: &AttributeSchema) -> Result<()> {
        if self.n_attr_levels != schema.n_attr_levels() {
            return Err(PatError::SchemaMismatch(format!(
                "dataset has {} attribute levels, schema has {}",
                self.n_attr_levels,
                schema.n_attr_levels()
            )));
        }
        for s in &self.samples {
            for (level, label) in s.attrs.iter().enumerate() {
                if let Some(y) = label {
                    if *y >= schema.branching(level) {
                        return Err(PatError::SchemaMismatch(format!(
                            "sample {} has state {} at level {level}, schema allows {}",
                            s.id,
                            y,
                            schema.branching(level)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Configuration of the synthetic benchmark generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub schema: AttributeSchema,
    pub n_classes: usize,
    pub input_dim: usize,
    pub attribute_separation: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            schema: AttributeSchema::new(vec![("a", 2), ("b", 3)]).unwrap(),
            n_classes: 7,
            input_dim: 16,
            attribute_separation: 6.0,
            class_separation: 2.0,
            noise_sigma: 1.0,
            n_train: 6000,
            n_test: 2000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attribute_separation <= 0.0 || self.class_separation <= 0.0 {
            return Err(PatError::InvalidConfig(
                "separations must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(PatError::InvalidConfig(
                "noise_sigma must be nonnegative".into(),
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(PatError::InvalidConfig("sample counts must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(PatError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.input_dim == 0 {
            return Err(PatError::InvalidConfig("input_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of full attribute combinations.
    pub fn combo_count(&self) -> usize {
        self.schema.leaf_count()
    }
}

/// Attribute states of combination `combo` in lexicographic order.
pub fn combo_states(schema: &AttributeSchema, combo: usize) -> Vec<usize> {
    let mut states = vec![0; schema.n_attr_levels()];
    let mut rest = combo;
    for level in (0..schema.n_attr_levels()).rev() {
        let s = schema.branching(level);
        states[level] = rest % s;
        rest /= s;
    }
    states
}

/// Lexicographic index of a full attribute combination.
pub fn combo_index(schema: &AttributeSchema, states: &[usize]) -> usize {
    let mut idx = 0;
    for (level, &y) in states.iter().enumerate() {
        idx = idx * schema.branching(level) + y;
    }
    idx
}

/// Generates disjoint train/test datasets.
///
/// Anchors are drawn per attribute combination with coordinates scaled by
/// `attribute_separation`; each class inside a combination sits at a fixed
/// direction of length `class_separation` off the anchor; samples add
/// isotropic Gaussian noise. Combination and class assignments cycle so the
/// datasets stay balanced. Fully deterministic given the config.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, Dataset)> {
    use rand::SeedableRng;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.input_dim;
    let n_combos = config.combo_count();

    let mut anchors = Vec::with_capacity(n_combos);
    for _ in 0..n_combos {
        let a: Vec<f64> = (0..d)
            .map(|_| config.attribute_separation * rng.sample::<f64, _>(StandardNormal))
            .collect();
        anchors.push(a);
    }
    let mut class_dirs = Vec::with_capacity(n_combos);
    for _ in 0..n_combos {
        let mut dirs = Vec::with_capacity(config.n_classes);
        for _ in 0..config.n_classes {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = crate::kernels::norm(&v);
            for x in &mut v {
                *x *= config.class_separation / n;
            }
            dirs.push(v);
        }
        class_dirs.push(dirs);
    }

    let mut next_id = 0u64;
    let mut draw = |rng: &mut ChaCha8Rng, n: usize| -> Result<Dataset> {
        let mut ds = Dataset::new(d, config.schema.n_attr_levels());
        for i in 0..n {
            let pair = i % (n_combos * config.n_classes);
            let combo = pair / config.n_classes;
            let class = pair % config.n_classes;
            let mut features = anchors[combo].clone();
            for (f, dir) in features.iter_mut().zip(&class_dirs[combo][class]) {
                *f += dir + config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            ds.push(Sample {
                id: next_id,
                features,
                attrs: combo_states(&config.schema, combo)
                    .into_iter()
                    .map(Some)
                    .collect(),
                class: Some(class),
                source: Source::Primary,
            })?;
            next_id += 1;
        }
        Ok(ds)
    };

    let train = draw(&mut rng, config.n_train)?;
    let test = draw(&mut rng, config.n_test)?;
    Ok((train, test))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn label_to_str(l: Option<usize>) -> String {
    match l {
        Some(v) => v.to_string(),
        None => "-1".to_string(),
    }
}

/// Writes the comma-separated dataset format:
/// `id,f0..f{d-1},attr_0..attr_{m-1},class,source`, missing labels as `-1`.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    out.push_str("id");
    for i in 0..dataset.feature_width {
        let _ = write!(out, ",f{i}");
    }
    for i in 0..dataset.n_attr_levels {
        let _ = write!(out, ",attr_{i}");
    }
    out.push_str(",class,source\n");
    for s in &dataset.samples {
        let _ = write!(out, "{}", s.id);
        for v in &s.features {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        for a in &s.attrs {
            let _ = write!(out, ",{}", label_to_str(*a));
        }
        let _ = writeln!(out, ",{},{}", label_to_str(s.class), s.source.as_str());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> PatError {
    PatError::ParseError {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_label(field: &str, path: &Path, line: usize) -> Result<Option<usize>> {
    let v: i64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad label {field:?}")))?;
    match v {
        -1 => Ok(None),
        v if v >= 0 => Ok(Some(v as usize)),
        _ => Err(parse_err(path, line, format!("bad label {v}"))),
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") {
        return Err(parse_err(path, 1, "header must start with id"));
    }
    let n_features = cols.iter().filter(|c| c.starts_with('f')).count();
    let n_attrs = cols.iter().filter(|c| c.starts_with("attr_")).count();
    let expected_cols = 1 + n_features + n_attrs + 2;
    if cols.len() != expected_cols
        || cols.get(expected_cols - 2) != Some(&"class")
        || cols.last() != Some(&"source")
    {
        return Err(parse_err(path, 1, "malformed header"));
    }
    for (i, c) in cols[1..1 + n_features].iter().enumerate() {
        if **c != format!("f{i}") {
            return Err(parse_err(path, 1, format!("expected column f{i}, got {c}")));
        }
    }
    if n_features == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }

    let mut dataset = Dataset::new(n_features, n_attrs);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {expected_cols} fields, got {}", fields.len()),
            ));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(path, line_no, "bad id"))?;
        let mut features = Vec::with_capacity(n_features);
        for f in &fields[1..1 + n_features] {
            features.push(
                f.parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("bad float {f:?}")))?,
            );
        }
        let mut attrs = Vec::with_capacity(n_attrs);
        for f in &fields[1 + n_features..1 + n_features + n_attrs] {
            attrs.push(parse_label(f, path, line_no)?);
        }
        let class = parse_label(fields[expected_cols - 2], path, line_no)?;
        let source = match fields[expected_cols - 1] {
            "primary" => Source::Primary,
            "auxiliary" => Source::Auxiliary,
            other => return Err(parse_err(path, line_no, format!("bad source {other:?}"))),
        };
        dataset
            .push(Sample {
                id,
                features,
                attrs,
                class,
                source,
            })
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
    }
    Ok(dataset)
}

fn write_matrix(out: &mut String, m: &Matrix) {
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Saves tree, classifiers, and the training config that produced them as
/// versioned human-readable text. Saving a loaded model reproduces the file
/// byte for byte.
pub fn save_model(
    path: &Path,
    tree: &PatTree,
    heads: &LeafClassifiers,
    config: &TrainConfig,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}");
    let _ = write!(out, "schema {}", tree.schema().n_attr_levels());
    for a in tree.schema().attributes() {
        let _ = write!(out, " {} {}", a.name, a.states);
    }
    out.push('\n');
    let widths: Vec<String> = tree.widths().iter().map(|w| w.to_string()).collect();
    let _ = writeln!(out, "widths {}", widths.join(" "));
    let _ = writeln!(out, "classes {}", heads.n_classes());
    let _ = writeln!(out, "lambda {}", fmt_f64(config.lambda));
    let _ = writeln!(out, "alpha {}", fmt_f64(config.alpha));
    let _ = writeln!(out, "mu {}", fmt_f64(config.mu));
    let _ = writeln!(out, "iterations {}", config.iterations);
    let _ = writeln!(out, "batch_size {}", config.batch_size);
    let _ = writeln!(out, "seed {}", config.seed);
    let _ = writeln!(
        out,
        "attribute_label_fraction {}",
        fmt_f64(config.attribute_label_fraction)
    );
    let _ = writeln!(
        out,
        "routing {}",
        match config.routing {
            Routing::Soft => "soft",
            Routing::Hard => "hard",
        }
    );
    for id in 0..tree.n_nodes() {
        let node = tree.node(id);
        let _ = writeln!(out, "node {} {}", node.level, node.index);
        let _ = writeln!(out, "weight {} {}", node.weight.rows(), node.weight.cols());
        write_matrix(&mut out, &node.weight);
        let _ = writeln!(out, "bias");
        let row: Vec<String> = node.bias.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
        if let Some(c) = &node.centers {
            let _ = writeln!(out, "centers {} {}", c.rows(), c.cols());
            write_matrix(&mut out, c);
        }
    }
    for leaf in 0..heads.leaf_count() {
        let (w, b) = heads.map(leaf);
        let _ = writeln!(out, "head {leaf}");
        let _ = writeln!(out, "weight {} {}", w.rows(), w.cols());
        write_matrix(&mut out, w);
        let _ = writeln!(out, "bias");
        let row: Vec<String> = b.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "end");
    std::fs::write(path, out)?;
    Ok(())
}

struct LineReader<'a> {
    path: &'a Path,
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| parse_err(self.path, self.line_no, "unexpected end of file"))
    }

    fn err(&self, msg: impl Into<String>) -> PatError {
        parse_err(self.path, self.line_no, msg)
    }

    fn expect_tag<'b>(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected {tag:?}, got {line:?}")));
        }
        Ok(parts.collect())
    }

    fn parse_row(&mut self, cols: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.err("bad float row"))?;
        if vals.len() != cols {
            return Err(self.err(format!("expected {cols} values, got {}", vals.len())));
        }
        Ok(vals)
    }

    fn parse_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows);
        for _ in 0..rows {
            data.push(self.parse_row(cols)?);
        }
        Ok(Matrix::from_rows(data))
    }
}

fn parse_usize(reader: &LineReader<'_>, tok: Option<&str>) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| reader.err("expected unsigned integer"))
}

fn parse_f64(reader: &LineReader<'_>, tok: Option<&str>) -> Result<f64> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| reader.err("expected float"))
}

/// Loads a model saved by [`save_model`], reconstructing the tree, the leaf
/// classifiers, and the echoed training config.
pub fn load_model(path: &Path) -> Result<(PatTree, LeafClassifiers, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = LineReader {
        path,
        lines: text.lines(),
        line_no: 0,
    };

    let first = reader.next()?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MODEL_MAGIC) {
        return Err(reader.err("not a model file"));
    }
    let version = parts.next().unwrap_or("");
    if version != MODEL_VERSION {
        return Err(PatError::VersionMismatch {
            found: version.to_string(),
            expected: MODEL_VERSION.to_string(),
        });
    }

    let schema_toks = reader.expect_tag("schema")?;
    let n_attr = parse_usize(&reader, schema_toks.first().copied())?;
    if schema_toks.len() != 1 + 2 * n_attr {
        return Err(reader.err("malformed schema line"));
    }
    let mut attrs = Vec::with_capacity(n_attr);
    for i in 0..n_attr {
        let name = schema_toks[1 + 2 * i].to_string();
        let states = parse_usize(&reader, Some(schema_toks[2 + 2 * i]))?;
        attrs.push((name, states));
    }
    let schema = AttributeSchema::new(attrs)?;

    let width_toks = reader.expect_tag("widths")?;
    let widths: Vec<usize> = width_toks
        .iter()
        .map(|t| parse_usize(&reader, Some(t)))
        .collect::<Result<_>>()?;
    let classes_toks = reader.expect_tag("classes")?;
    let n_classes = parse_usize(&reader, classes_toks.first().copied())?;
    let tok = reader_tag(&mut reader, "lambda")?;
    let lambda = parse_f64(&reader, tok)?;
    let tok = reader_tag(&mut reader, "alpha")?;
    let alpha = parse_f64(&reader, tok)?;
    let tok = reader_tag(&mut reader, "mu")?;
    let mu = parse_f64(&reader, tok)?;
    let tok = reader_tag(&mut reader, "iterations")?;
    let iterations = parse_usize(&reader, tok)?;
    let tok = reader_tag(&mut reader, "batch_size")?;
    let batch_size = parse_usize(&reader, tok)?;
    let seed_tok = reader_tag(&mut reader, "seed")?;
    let seed: u64 = seed_tok
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| reader.err("expected seed"))?;
    let tok = reader_tag(&mut reader, "attribute_label_fraction")?;
    let fraction = parse_f64(&reader, tok)?;
    let routing = match reader_tag(&mut reader, "routing")? {
        Some("soft") => Routing::Soft,
        Some("hard") => Routing::Hard,
        other => return Err(reader.err(format!("bad routing {other:?}"))),
    };

    let mut tree = build_tree(&schema, &widths, 0)?;
    for id in 0..tree.n_nodes() {
        let toks = reader.expect_tag("node")?;
        let level = parse_usize(&reader, toks.first().copied())?;
        let index = parse_usize(&reader, toks.get(1).copied())?;
        if level != tree.node(id).level || index != tree.node(id).index {
            return Err(reader.err(format!("unexpected node ({level},{index})")));
        }
        let wt = reader.expect_tag("weight")?;
        let rows = parse_usize(&reader, wt.first().copied())?;
        let cols = parse_usize(&reader, wt.get(1).copied())?;
        if rows != tree.node(id).weight.rows() || cols != tree.node(id).weight.cols() {
            return Err(reader.err("weight shape does not match widths"));
        }
        let weight = reader.parse_matrix(rows, cols)?;
        reader.expect_tag("bias")?;
        let bias = reader.parse_row(rows)?;
        let centers = if tree.node(id).centers.is_some() {
            let ct = reader.expect_tag("centers")?;
            let crows = parse_usize(&reader, ct.first().copied())?;
            let ccols = parse_usize(&reader, ct.get(1).copied())?;
            let expect = tree.node(id).centers.as_ref().unwrap();
            if crows != expect.rows() || ccols != expect.cols() {
                return Err(reader.err("center shape does not match schema"));
            }
            Some(reader.parse_matrix(crows, ccols)?)
        } else {
            None
        };
        let node = tree.node_mut(id);
        node.weight = weight;
        node.bias = bias;
        node.centers = centers;
    }

    let leaf_count = schema.leaf_count();
    let leaf_width = *widths.last().unwrap();
    let mut maps = Vec::with_capacity(leaf_count);
    for leaf in 0..leaf_count {
        let toks = reader.expect_tag("head")?;
        let idx = parse_usize(&reader, toks.first().copied())?;
        if idx != leaf {
            return Err(reader.err(format!("unexpected head {idx}")));
        }
        let wt = reader.expect_tag("weight")?;
        let rows = parse_usize(&reader, wt.first().copied())?;
        let cols = parse_usize(&reader, wt.get(1).copied())?;
        if rows != n_classes || cols != leaf_width {
            return Err(reader.err("classifier shape mismatch"));
        }
        let w = reader.parse_matrix(rows, cols)?;
        reader.expect_tag("bias")?;
        let b = reader.parse_row(rows)?;
        maps.push((w, b));
    }
    reader.expect_tag("end")?;

    let heads = LeafClassifiers::from_parts(maps, n_classes)?;
    let config = TrainConfig {
        schema,
        hidden_widths: widths[1..].to_vec(),
        lambda,
        alpha,
        mu,
        iterations,
        batch_size,
        seed,
        attribute_label_fraction: fraction,
        routing,
    };
    Ok((tree, heads, config))
}

fn reader_tag<'a>(reader: &mut LineReader<'a>, tag: &str) -> Result<Option<&'a str>> {
    Ok(reader.expect_tag(tag)?.first().copied())
}
