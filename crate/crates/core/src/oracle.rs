//! Binary CART classifier with gini impurity, used as the oracle being explained.
//!
//! Candidate thresholds are midpoints between consecutive distinct values of a
//! feature at a node. Among equal-impurity splits the lowest feature index
//! wins, then the lowest threshold. A split is taken whenever one exists, even
//! with zero impurity decrease, so XOR-like data can still be separated at
//! depth two.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::tabular::{encode, FeatureSchema, Instance, LabeledDataset};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("dataset schema does not match the tree schema")]
    SchemaMismatch,
    #[error("tree file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 4,
            min_samples_split: 2,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.max_depth < 1 {
            return Err(OracleError::InvalidParams("max_depth must be at least 1".into()));
        }
        if self.min_samples_split < 2 {
            return Err(OracleError::InvalidParams("min_samples_split must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Class counts of the training rows that reached this node.
        counts: [usize; 2],
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        label: usize,
        counts: [usize; 2],
    },
}

impl TreeNode {
    pub fn leaf(counts: [usize; 2]) -> Self {
        TreeNode::Leaf {
            label: majority(counts),
            counts,
        }
    }

    pub fn counts(&self) -> [usize; 2] {
        match self {
            TreeNode::Split { counts, .. } | TreeNode::Leaf { counts, .. } => *counts,
        }
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn collect_thresholds(&self, feature: usize, out: &mut Vec<f64>) {
        if let TreeNode::Split {
            feature: f,
            threshold,
            left,
            right,
            ..
        } = self
        {
            if *f == feature {
                out.push(*threshold);
            }
            left.collect_thresholds(feature, out);
            right.collect_thresholds(feature, out);
        }
    }
}

/// Argmax of the class counts; ties go to class 0.
fn majority(counts: [usize; 2]) -> usize {
    usize::from(counts[1] > counts[0])
}

/// Gini impurity `1 - sum_c p_c^2` of a count pair.
pub fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

/// Size-weighted gini of a two-way split.
pub fn weighted_gini(left: [usize; 2], right: [usize; 2]) -> f64 {
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    (nl * gini(left) + nr * gini(right)) / (nl + nr)
}

#[derive(Debug, Clone)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub schema: Arc<FeatureSchema>,
    pub params: TreeParams,
}

/// Best split found at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub impurity: f64,
}

/// Scans every feature and every midpoint threshold over `rows` and returns
/// the split with minimal weighted gini, or `None` when all rows are identical.
pub fn best_split(x: &[Vec<f64>], y: &[usize], rows: &[usize]) -> Option<SplitChoice> {
    let k = x.first().map_or(0, Vec::len);
    let mut total = [0usize; 2];
    for &r in rows {
        total[y[r]] += 1;
    }
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for feature in 0..k {
        order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]));
        let mut left = [0usize; 2];
        for w in 0..order.len().saturating_sub(1) {
            let r = order[w];
            left[y[r]] += 1;
            let here = x[r][feature];
            let next = x[order[w + 1]][feature];
            if here == next {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let impurity = weighted_gini(left, right);
            let threshold = here + (next - here) / 2.0;
            // Features and thresholds are visited in increasing order, so a
            // strict comparison keeps the lowest index / threshold on ties.
            if best.map_or(true, |b| impurity < b.impurity) {
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
    }
    best
}

impl DecisionTree {
    /// Greedy top-down induction.
    pub fn train(dataset: &LabeledDataset, params: TreeParams) -> Result<Self, OracleError> {
        params.validate()?;
        if dataset.is_empty() {
            return Err(OracleError::EmptyDataset);
        }
        let x: Vec<Vec<f64>> = dataset
            .rows
            .iter()
            .map(|r| encode(r, &dataset.schema))
            .collect();
        let rows: Vec<usize> = (0..x.len()).collect();
        let root = grow(&x, &dataset.labels, &rows, 0, &params);
        Ok(Self {
            root,
            schema: Arc::clone(&dataset.schema),
            params,
        })
    }

    pub fn from_root(root: TreeNode, schema: Arc<FeatureSchema>, params: TreeParams) -> Self {
        Self { root, schema, params }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Class index for an already-encoded instance. Values `<= threshold` go left.
    pub fn predict_encoded(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { label, .. } => return *label,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, instance: &Instance) -> usize {
        self.predict_encoded(&encode(instance, &self.schema))
    }

    pub fn predict_label(&self, instance: &Instance) -> &str {
        &self.schema.target_labels[self.predict(instance)]
    }

    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64, OracleError> {
        if dataset.is_empty() {
            return Err(OracleError::EmptyDataset);
        }
        if dataset.schema.features != self.schema.features {
            return Err(OracleError::SchemaMismatch);
        }
        let hits = dataset
            .rows
            .iter()
            .zip(&dataset.labels)
            .filter(|(row, &label)| self.predict(row) == label)
            .count();
        Ok(hits as f64 / dataset.len() as f64)
    }

    /// Sorted, de-duplicated split thresholds used on `feature`.
    pub fn thresholds(&self, feature: usize) -> Vec<f64> {
        let mut out = Vec::new();
        self.root.collect_thresholds(feature, &mut out);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Pre-order text serialisation.
    ///
    /// ```text
    /// mnr-tree 1
    /// max_depth 4
    /// min_samples_split 2
    /// features <name>\t<name>...
    /// split <feature> <threshold> <count0> <count1>
    /// leaf <label> <count0> <count1>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("mnr-tree 1\n");
        let _ = writeln!(out, "max_depth {}", self.params.max_depth);
        let _ = writeln!(out, "min_samples_split {}", self.params.min_samples_split);
        let names: Vec<&str> = self.schema.features.iter().map(|f| f.name.as_str()).collect();
        let _ = writeln!(out, "features {}", names.join("\t"));
        write_node(&self.root, &mut out);
        out
    }

    pub fn from_text(text: &str, schema: Arc<FeatureSchema>) -> Result<Self, OracleError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| OracleError::Format {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (n, magic) = next("header")?;
        if magic.trim() != "mnr-tree 1" {
            return Err(format_err(n, "missing `mnr-tree 1` header"));
        }
        let max_depth = header_value(next("max_depth")?, "max_depth")?;
        let min_samples_split = header_value(next("min_samples_split")?, "min_samples_split")?;
        let (n, features) = next("features")?;
        let names = features
            .strip_prefix("features ")
            .ok_or_else(|| format_err(n, "expected `features` line"))?;
        let expected: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
        if names.split('\t').collect::<Vec<_>>() != expected {
            return Err(format_err(n, "feature names do not match the schema"));
        }
        let rest: Vec<(usize, &str)> = lines.collect();
        let mut cursor = 0;
        let root = read_node(&rest, &mut cursor, schema.len())?;
        if cursor != rest.len() {
            return Err(format_err(rest[cursor].0, "trailing nodes after a complete tree"));
        }
        let params = TreeParams {
            max_depth,
            min_samples_split,
        };
        Ok(Self { root, schema, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OracleError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| OracleError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>, schema: Arc<FeatureSchema>) -> Result<Self, OracleError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| OracleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text, schema)
    }
}

fn grow(x: &[Vec<f64>], y: &[usize], rows: &[usize], depth: usize, params: &TreeParams) -> TreeNode {
    let mut counts = [0usize; 2];
    for &r in rows {
        counts[y[r]] += 1;
    }
    let pure = counts[0] == 0 || counts[1] == 0;
    if depth >= params.max_depth || pure || rows.len() < params.min_samples_split {
        return TreeNode::leaf(counts);
    }
    let Some(split) = best_split(x, y, rows) else {
        return TreeNode::leaf(counts);
    };
    let (left, right): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|&&r| x[r][split.feature] <= split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        counts,
        left: Box::new(grow(x, y, &left, depth + 1, params)),
        right: Box::new(grow(x, y, &right, depth + 1, params)),
    }
}

fn write_node(node: &TreeNode, out: &mut String) {
    match node {
        TreeNode::Leaf { label, counts } => {
            let _ = writeln!(out, "leaf {label} {} {}", counts[0], counts[1]);
        }
        TreeNode::Split {
            feature,
            threshold,
            counts,
            left,
            right,
        } => {
            // `{:?}` prints the shortest representation that round-trips.
            let _ = writeln!(out, "split {feature} {threshold:?} {} {}", counts[0], counts[1]);
            write_node(left, out);
            write_node(right, out);
        }
    }
}

fn format_err(line: usize, message: &str) -> OracleError {
    OracleError::Format {
        line: line + 1,
        message: message.to_string(),
    }
}

fn header_value((n, line): (usize, &str), key: &str) -> Result<usize, OracleError> {
    line.strip_prefix(key)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format_err(n, &format!("expected `{key} <integer>`")))
}

fn read_node(lines: &[(usize, &str)], cursor: &mut usize, k: usize) -> Result<TreeNode, OracleError> {
    let &(n, line) = lines.get(*cursor).ok_or_else(|| OracleError::Format {
        line: 0,
        message: "tree ends before every split has two children".into(),
    })?;
    *cursor += 1;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let count = |s: &str| s.parse::<usize>().map_err(|_| format_err(n, "bad count"));
    match parts.as_slice() {
        ["leaf", label, c0, c1] => {
            let label: usize = label.parse().map_err(|_| format_err(n, "bad label"))?;
            let counts = [count(c0)?, count(c1)?];
            if label > 1 || counts[0] + counts[1] == 0 {
                return Err(format_err(n, "invalid leaf"));
            }
            Ok(TreeNode::Leaf { label, counts })
        }
        ["split", feature, threshold, c0, c1] => {
            let feature: usize = feature.parse().map_err(|_| format_err(n, "bad feature index"))?;
            if feature >= k {
                return Err(format_err(n, "feature index out of range"));
            }
            let threshold: f64 = threshold.parse().map_err(|_| format_err(n, "bad threshold"))?;
            let counts = [count(c0)?, count(c1)?];
            let left = read_node(lines, cursor, k)?;
            let right = read_node(lines, cursor, k)?;
            Ok(TreeNode::Split {
                feature,
                threshold,
                counts,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        _ => Err(format_err(n, "expected a `split` or `leaf` node")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{FeatureSpec, FeatureValue};

    fn numeric_schema(k: usize) -> Arc<FeatureSchema> {
        let features = (0..k)
            .map(|j| FeatureSpec::numeric(&format!("x{j}"), 0.0, 100.0, false))
            .collect();
        Arc::new(FeatureSchema::new(features, "y", ["0", "1"]).unwrap())
    }

    fn dataset(points: &[(&[f64], usize)]) -> LabeledDataset {
        let schema = numeric_schema(points[0].0.len());
        let rows = points
            .iter()
            .map(|(x, _)| Instance::new(x.iter().map(|&v| FeatureValue::Numeric(v)).collect()))
            .collect();
        let labels = points.iter().map(|(_, y)| *y).collect();
        LabeledDataset::new(schema, rows, labels).unwrap()
    }

    fn xor() -> LabeledDataset {
        dataset(&[(&[0.0, 0.0], 0), (&[0.0, 1.0], 1), (&[1.0, 0.0], 1), (&[1.0, 1.0], 0)])
    }

    #[test]
    fn single_class_is_a_leaf() {
        let ds = dataset(&[(&[1.0], 1), (&[2.0], 1), (&[3.0], 1)]);
        let tree = DecisionTree::train(&ds, TreeParams::default()).unwrap();
        assert_eq!(tree.depth(), 0);
        assert_eq!(tree.accuracy(&ds).unwrap(), 1.0);
    }

    #[test]
    fn xor_needs_depth_two() {
        let ds = xor();
        let tree = DecisionTree::train(&ds, TreeParams::default()).unwrap();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.accuracy(&ds).unwrap(), 1.0);
        for (row, &label) in ds.rows.iter().zip(&ds.labels) {
            assert_eq!(tree.predict(row), label);
        }
        // Every root split has weighted gini 0.5; the tie goes to feature 0.
        match &tree.root {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 0.5);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = LabeledDataset::new(numeric_schema(1), vec![], vec![]).unwrap();
        assert!(matches!(
            DecisionTree::train(&ds, TreeParams::default()),
            Err(OracleError::EmptyDataset)
        ));
        let tree = DecisionTree::from_root(TreeNode::leaf([1, 0]), numeric_schema(1), TreeParams::default());
        assert!(tree.accuracy(&ds).is_err());
    }

    #[test]
    fn invalid_params() {
        let ds = xor();
        let p = TreeParams { max_depth: 0, min_samples_split: 2 };
        assert!(DecisionTree::train(&ds, p).is_err());
        let p = TreeParams { max_depth: 3, min_samples_split: 1 };
        assert!(DecisionTree::train(&ds, p).is_err());
    }

    #[test]
    fn hand_built_single_split() {
        let schema = Arc::new(
            FeatureSchema::new(vec![FeatureSpec::numeric("hours_per_week", 0.0, 80.0, true)], "y", ["0", "1"]).unwrap(),
        );
        let root = TreeNode::Split {
            feature: 0,
            threshold: 40.0,
            counts: [1, 1],
            left: Box::new(TreeNode::leaf([1, 0])),
            right: Box::new(TreeNode::leaf([0, 1])),
        };
        let tree = DecisionTree::from_root(root, schema, TreeParams::default());
        assert_eq!(tree.predict(&Instance::new(vec![FeatureValue::Numeric(35.0)])), 0);
        assert_eq!(tree.predict(&Instance::new(vec![FeatureValue::Numeric(40.0)])), 0);
        assert_eq!(tree.predict(&Instance::new(vec![FeatureValue::Numeric(41.0)])), 1);
    }

    #[test]
    fn constant_leaf_on_balanced_set() {
        let ds = dataset(&[(&[1.0], 0), (&[2.0], 1), (&[3.0], 0), (&[4.0], 1)]);
        let tree = DecisionTree::from_root(TreeNode::leaf([2, 1]), Arc::clone(&ds.schema), TreeParams::default());
        assert_eq!(tree.accuracy(&ds).unwrap(), 0.5);
    }

    #[test]
    fn leaf_tie_goes_to_first_label() {
        assert_eq!(TreeNode::leaf([3, 3]), TreeNode::Leaf { label: 0, counts: [3, 3] });
    }

    #[test]
    fn min_samples_split_stops_growth() {
        let ds = xor();
        let p = TreeParams { max_depth: 4, min_samples_split: 5 };
        assert_eq!(DecisionTree::train(&ds, p).unwrap().depth(), 0);
    }

    #[test]
    fn text_round_trip() {
        let ds = xor();
        let tree = DecisionTree::train(&ds, TreeParams::default()).unwrap();
        let text = tree.to_text();
        let back = DecisionTree::from_text(&text, Arc::clone(&ds.schema)).unwrap();
        assert_eq!(back.root, tree.root);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn text_rejects_wrong_schema_and_truncation() {
        let ds = xor();
        let text = DecisionTree::train(&ds, TreeParams::default()).unwrap().to_text();
        assert!(DecisionTree::from_text(&text, numeric_schema(3)).is_err());
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(DecisionTree::from_text(&truncated, Arc::clone(&ds.schema)).is_err());
    }
}
