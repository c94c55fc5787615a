//! Attribute schemas and ground-truth attribute paths.
//!
//! An ordered list of categorical attributes fixes the tree topology: level
//! `j` (0-based) clusters by attribute `j`, so the number of nodes at level
//! `j` is the product of the state counts of all shallower attributes. The
//! cluster index inside a node is identified with the attribute state index,
//! which makes the ground-truth center lookup well-defined.

use crate::error::{PatError, Result};
use serde::{Deserialize, Serialize};

/// One categorical attribute: a name and the number of states it can take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub states: usize,
}

/// Ordered attribute list; the tree has `attrs.len() + 1` levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSchema {
    attrs: Vec<Attribute>,
}

impl AttributeSchema {
    /// Builds a schema from `(name, states)` pairs. Every attribute needs at
    /// least two states; an empty list is the degenerate root-only tree.
    pub fn new(attrs: Vec<(impl Into<String>, usize)>) -> Result<Self> {
        let attrs: Vec<Attribute> = attrs
            .into_iter()
            .map(|(name, states)| Attribute {
                name: name.into(),
                states,
            })
            .collect();
        Self::from_attributes(attrs)
    }

    pub fn from_attributes(attrs: Vec<Attribute>) -> Result<Self> {
        for a in &attrs {
            if a.states < 2 {
                return Err(PatError::InvalidSchema(format!(
                    "attribute {:?} has {} states; need at least 2",
                    a.name, a.states
                )));
            }
            if a.name.is_empty() || a.name.contains(char::is_whitespace) {
                return Err(PatError::InvalidSchema(format!(
                    "attribute name {:?} must be non-empty and free of whitespace",
                    a.name
                )));
            }
        }
        Ok(AttributeSchema { attrs })
    }

    pub fn empty() -> Self {
        AttributeSchema { attrs: Vec::new() }
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attrs
    }

    /// Number of tree levels (attribute count plus the leaf level).
    pub fn n_levels(&self) -> usize {
        self.attrs.len() + 1
    }

    /// Number of attribute (non-leaf) levels.
    pub fn n_attr_levels(&self) -> usize {
        self.attrs.len()
    }

    /// Branching factor at non-leaf level `level`.
    pub fn branching(&self, level: usize) -> usize {
        self.attrs[level].states
    }

    /// Number of nodes at `level`: the product of all shallower state counts.
    pub fn level_node_count(&self, level: usize) -> usize {
        self.attrs[..level].iter().map(|a| a.states).product()
    }

    pub fn leaf_count(&self) -> usize {
        self.level_node_count(self.n_levels() - 1)
    }

    pub fn total_nodes(&self) -> usize {
        (0..self.n_levels()).map(|l| self.level_node_count(l)).sum()
    }

    /// Validates per-level attribute labels against the state counts.
    pub fn check_path(&self, path: &AttributePath) -> Result<()> {
        if path.labels.len() != self.n_attr_levels() {
            return Err(PatError::SchemaMismatch(format!(
                "path has {} levels, schema has {}",
                path.labels.len(),
                self.n_attr_levels()
            )));
        }
        for (level, label) in path.labels.iter().enumerate() {
            if let Some(y) = label {
                if *y >= self.branching(level) {
                    return Err(PatError::InvalidLabel {
                        label: *y,
                        bound: self.branching(level),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-level ground-truth attribute states for one sample; `None` marks a
/// missing label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributePath {
    pub labels: Vec<Option<usize>>,
}

impl AttributePath {
    pub fn full(labels: Vec<usize>) -> Self {
        AttributePath {
            labels: labels.into_iter().map(Some).collect(),
        }
    }

    pub fn missing(levels: usize) -> Self {
        AttributePath {
            labels: vec![None; levels],
        }
    }

    /// Number of leading levels with labels present; contributions to the
    /// clustering loss stop at the first gap because deeper ground-truth
    /// nodes are undefined without the full prefix.
    pub fn labeled_prefix_len(&self) -> usize {
        self.labels.iter().take_while(|l| l.is_some()).count()
    }

    pub fn label(&self, level: usize) -> Option<usize> {
        self.labels.get(level).copied().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_counts_follow_state_products() {
        let s = AttributeSchema::new(vec![("g", 2), ("r", 3)]).unwrap();
        assert_eq!(s.n_levels(), 3);
        assert_eq!(s.level_node_count(0), 1);
        assert_eq!(s.level_node_count(1), 2);
        assert_eq!(s.level_node_count(2), 6);
        assert_eq!(s.leaf_count(), 6);
        assert_eq!(s.total_nodes(), 9);
    }

    #[test]
    fn empty_schema_is_root_only() {
        let s = AttributeSchema::empty();
        assert_eq!(s.n_levels(), 1);
        assert_eq!(s.leaf_count(), 1);
        assert_eq!(s.total_nodes(), 1);
    }

    #[test]
    fn rejects_single_state_attribute() {
        assert!(AttributeSchema::new(vec![("g", 1)]).is_err());
    }

    #[test]
    fn labeled_prefix_stops_at_first_gap() {
        let p = AttributePath {
            labels: vec![Some(1), None, Some(0)],
        };
        assert_eq!(p.labeled_prefix_len(), 1);
        assert_eq!(AttributePath::full(vec![0, 1]).labeled_prefix_len(), 2);
        assert_eq!(AttributePath::missing(2).labeled_prefix_len(), 0);
    }

    #[test]
    fn check_path_validates_ranges() {
        let s = AttributeSchema::new(vec![("g", 2), ("r", 3)]).unwrap();
        assert!(s.check_path(&AttributePath::full(vec![1, 2])).is_ok());
        assert!(s.check_path(&AttributePath::full(vec![2, 0])).is_err());
        assert!(s.check_path(&AttributePath::missing(1)).is_err());
    }
}
