//! JSON persistence for fitted trees.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so thresholds and leaf samples survive a round trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::score::Ecdf;
use crate::tree::{FeatureSpec, Node, PredictiveTree, SplitKind, SplitRule, TreeConfig};
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    config: TreeConfig,
    features: Vec<FeatureSpec>,
    root_delta: f64,
    root_n: usize,
    variance_floor: f64,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum NodeDoc {
    Internal {
        id: u64,
        feature: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        left_categories: Option<Vec<String>>,
        delta: f64,
        n: usize,
    },
    Leaf {
        id: u64,
        samples: Vec<f64>,
    },
}

pub fn model_to_json(tree: &PredictiveTree) -> Result<String> {
    let nodes = tree
        .nodes
        .iter()
        .map(|(&id, node)| match node {
            Node::Internal { split, delta, n } => {
                let (threshold, left_categories) = match &split.kind {
                    SplitKind::Threshold(s) => (Some(*s), None),
                    SplitKind::CategorySet(set) => (None, Some(set.iter().cloned().collect())),
                };
                NodeDoc::Internal {
                    id,
                    feature: split.feature,
                    threshold,
                    left_categories,
                    delta: *delta,
                    n: *n,
                }
            }
            Node::Leaf { ecdf } => NodeDoc::Leaf {
                id,
                samples: ecdf.samples().to_vec(),
            },
        })
        .collect();
    let doc = ModelDoc {
        version: MODEL_FORMAT_VERSION,
        config: tree.config.clone(),
        features: tree.features.clone(),
        root_delta: tree.root_delta,
        root_n: tree.root_n,
        variance_floor: tree.variance_floor,
        nodes,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn model_from_json(text: &str) -> Result<PredictiveTree> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::MalformedModel("missing or non-integer 'version'".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(Error::ModelVersion {
            found: version.min(u32::MAX as u64) as u32,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_value(value)?;
    doc.config.validate()?;
    let mut nodes = BTreeMap::new();
    for node in doc.nodes {
        let (id, node) = match node {
            NodeDoc::Internal {
                id,
                feature,
                threshold,
                left_categories,
                delta,
                n,
            } => {
                let kind = match (threshold, left_categories) {
                    (Some(s), None) => SplitKind::Threshold(s),
                    (None, Some(cats)) => SplitKind::CategorySet(cats.into_iter().collect()),
                    _ => {
                        return Err(Error::MalformedModel(format!(
                            "node {id} needs exactly one of 'threshold' or 'left_categories'"
                        )))
                    }
                };
                (
                    id,
                    Node::Internal {
                        split: SplitRule { feature, kind },
                        delta,
                        n,
                    },
                )
            }
            NodeDoc::Leaf { id, samples } => {
                let ecdf = Ecdf::from_samples(samples).map_err(|e| Error::MalformedModel(format!("leaf {id}: {e}")))?;
                (id, Node::Leaf { ecdf })
            }
        };
        if nodes.insert(id, node).is_some() {
            return Err(Error::MalformedModel(format!("duplicate node id {id}")));
        }
    }
    PredictiveTree::from_parts(
        nodes,
        doc.config,
        doc.features,
        doc.root_delta,
        doc.root_n,
        doc.variance_floor,
    )
}

pub fn save_model(tree: &PredictiveTree, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_json(tree)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictiveTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::score::ScoringRule;
    use crate::tree::fit;

    fn small_tree() -> (Dataset, PredictiveTree) {
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + 0.01).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v < 2.0 { v / 3.0 } else { 10.0 + v * v }).collect();
        let ds = Dataset::from_numeric(&["x"], vec![x], y, "y").unwrap();
        let tree = fit(&ds, &crate::TreeConfig::new(ScoringRule::Crps).with_min_node_size(5)).unwrap();
        (ds, tree)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, tree) = small_tree();
        assert!(tree.leaf_count() > 1);
        let back = model_from_json(&model_to_json(&tree).unwrap()).unwrap();
        assert_eq!(back, tree);
        assert_eq!(
            back.evaluate(&ds, &ScoringRule::Crps).unwrap(),
            tree.evaluate(&ds, &ScoringRule::Crps).unwrap()
        );
    }

    #[test]
    fn single_leaf_document() {
        let ds = Dataset::from_numeric(&["x"], vec![vec![1.0, 2.0]], vec![1.0, 2.0], "y").unwrap();
        let tree = fit(&ds, &crate::TreeConfig::new(ScoringRule::Sse)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&model_to_json(&tree).unwrap()).unwrap();
        let nodes = v["nodes"].as_array().unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0]["type"], "leaf");
        assert_eq!(nodes[0]["samples"], serde_json::json!([1.0, 2.0]));
    }

    #[test]
    fn version_and_shape_errors() {
        let (_, tree) = small_tree();
        let text = model_to_json(&tree).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(matches!(
            model_from_json(&v.to_string()),
            Err(Error::ModelVersion { found: 99, .. })
        ));
        assert!(matches!(model_from_json("{not json"), Err(Error::Json(_))));
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["nodes"].as_array_mut().unwrap().pop();
        assert!(model_from_json(&v.to_string()).is_err());
    }
}
