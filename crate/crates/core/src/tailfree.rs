//! The model-space tree and the dependent tail-free weight measure.
//!
//! Each internal node with two or more children turns the GP values of its
//! children into conditional probabilities with a tempered softmax. A leaf's
//! weight is the product of the conditionals along its path from the root.
//! Single-child nodes pass their probability through unchanged and own no GP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Nested tree description as written in run configs: a group maps child
/// names to sub-trees, a list names the leaf base models directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeSpec {
    Leaves(Vec<String>),
    Groups(BTreeMap<String, TreeSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub name: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Base-model column index for leaves.
    pub leaf: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeRepr {
    nodes: Vec<TreeNode>,
}

/// Rooted partition of the base models. Node 0 is the root and every parent
/// precedes its children in `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct ModelTree {
    nodes: Vec<TreeNode>,
    leaves: Vec<usize>,
    gp_nodes: Vec<usize>,
    temperature_nodes: Vec<usize>,
    gp_slot: Vec<Option<usize>>,
    temperature_slot: Vec<Option<usize>>,
}

impl From<ModelTree> for TreeRepr {
    fn from(t: ModelTree) -> Self {
        TreeRepr { nodes: t.nodes }
    }
}

impl TryFrom<TreeRepr> for ModelTree {
    type Error = Error;
    fn try_from(r: TreeRepr) -> Result<Self> {
        ModelTree::from_nodes(r.nodes)
    }
}

impl ModelTree {
    /// Depth-1 tree: every base model is a child of the root.
    pub fn flat<S: AsRef<str>>(base_models: &[S]) -> Result<Self> {
        let names: Vec<String> = base_models.iter().map(|s| s.as_ref().to_string()).collect();
        Self::from_spec(&TreeSpec::Leaves(names.clone()), &names)
    }

    /// Builds the tree from a nested spec whose leaves name entries of `base_models`.
    pub fn from_spec<S: AsRef<str>>(spec: &TreeSpec, base_models: &[S]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = base_models
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_ref(), i))
            .collect();
        if index.len() != base_models.len() {
            return Err(Error::TreeMismatch("duplicate base-model names".into()));
        }
        let mut nodes = vec![TreeNode {
            name: "root".into(),
            parent: None,
            children: vec![],
            leaf: None,
        }];
        fn walk(
            spec: &TreeSpec,
            parent: usize,
            nodes: &mut Vec<TreeNode>,
            index: &BTreeMap<&str, usize>,
        ) -> Result<()> {
            match spec {
                TreeSpec::Leaves(names) => {
                    for name in names {
                        let k = *index.get(name.as_str()).ok_or_else(|| {
                            Error::TreeMismatch(format!("leaf `{name}` is not a base-model column"))
                        })?;
                        let id = nodes.len();
                        nodes.push(TreeNode {
                            name: name.clone(),
                            parent: Some(parent),
                            children: vec![],
                            leaf: Some(k),
                        });
                        nodes[parent].children.push(id);
                    }
                }
                TreeSpec::Groups(groups) => {
                    for (name, sub) in groups {
                        let id = nodes.len();
                        nodes.push(TreeNode {
                            name: name.clone(),
                            parent: Some(parent),
                            children: vec![],
                            leaf: None,
                        });
                        nodes[parent].children.push(id);
                        walk(sub, id, nodes, index)?;
                    }
                }
            }
            Ok(())
        }
        walk(spec, 0, &mut nodes, &index)?;
        let tree = Self::from_nodes(nodes)?;
        if tree.leaves.len() != base_models.len() {
            return Err(Error::TreeMismatch(format!(
                "tree has {} leaves but there are {} base models",
                tree.leaves.len(),
                base_models.len()
            )));
        }
        Ok(tree)
    }

    fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() || nodes[0].parent.is_some() {
            return Err(Error::TreeMismatch("node 0 must be the root".into()));
        }
        let mut leaf_of = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if id > 0 {
                match node.parent {
                    Some(p) if p < id && nodes[p].children.contains(&id) => {}
                    _ => {
                        return Err(Error::TreeMismatch(format!(
                            "node `{}` has an invalid parent link",
                            node.name
                        )))
                    }
                }
            }
            for &c in &node.children {
                if c <= id || c >= nodes.len() || nodes[c].parent != Some(id) {
                    return Err(Error::TreeMismatch(format!(
                        "node `{}` has an invalid child link",
                        node.name
                    )));
                }
            }
            match (node.leaf, node.children.is_empty()) {
                (Some(k), true) => {
                    if leaf_of.insert(k, id).is_some() {
                        return Err(Error::TreeMismatch(format!(
                            "base model {k} appears at more than one leaf"
                        )));
                    }
                }
                (Some(_), false) => {
                    return Err(Error::TreeMismatch(format!(
                        "leaf `{}` has children",
                        node.name
                    )))
                }
                (None, true) => {
                    return Err(Error::TreeMismatch(format!(
                        "internal node `{}` has no children",
                        node.name
                    )))
                }
                (None, false) => {}
            }
        }
        let k = leaf_of.len();
        if leaf_of.keys().copied().ne(0..k) {
            return Err(Error::TreeMismatch("leaf indices must be 0..K".into()));
        }
        let leaves: Vec<usize> = leaf_of.into_values().collect();
        let mut gp_nodes = vec![];
        let mut gp_slot = vec![None; nodes.len()];
        let mut temperature_nodes = vec![];
        let mut temperature_slot = vec![None; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            if node.children.len() >= 2 {
                temperature_slot[id] = Some(temperature_nodes.len());
                temperature_nodes.push(id);
            }
            if let Some(p) = node.parent {
                if nodes[p].children.len() >= 2 {
                    gp_slot[id] = Some(gp_nodes.len());
                    gp_nodes.push(id);
                }
            }
        }
        Ok(Self {
            nodes,
            leaves,
            gp_nodes,
            temperature_nodes,
            gp_slot,
            temperature_slot,
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Node id of the leaf holding base model `k`.
    pub fn leaf_node(&self, k: usize) -> usize {
        self.leaves[k]
    }

    /// Nodes that own a weight GP, in slot order.
    pub fn gp_nodes(&self) -> &[usize] {
        &self.gp_nodes
    }

    /// Internal nodes that own a temperature, in slot order.
    pub fn temperature_nodes(&self) -> &[usize] {
        &self.temperature_nodes
    }

    pub fn depth(&self) -> usize {
        self.leaves
            .iter()
            .map(|&leaf| {
                let mut d = 0;
                let mut cur = leaf;
                while let Some(p) = self.nodes[cur].parent {
                    d += 1;
                    cur = p;
                }
                d
            })
            .max()
            .unwrap_or(0)
    }

    /// Names of the base models in leaf-index order.
    pub fn leaf_names(&self) -> Vec<String> {
        self.leaves.iter().map(|&n| self.nodes[n].name.clone()).collect()
    }

    /// Writes leaf weights into `out` given accessors for the GP value of each
    /// GP slot and the temperature of each temperature slot. `node_prob` is
    /// scratch space of length `nodes().len()`.
    #[inline]
    pub fn weights_into<T: Scalar>(
        &self,
        g: impl Fn(usize) -> T,
        temperature: impl Fn(usize) -> T,
        node_prob: &mut [T],
        out: &mut [T],
    ) {
        node_prob[0] = T::one();
        for (id, node) in self.nodes.iter().enumerate() {
            let p_parent = node_prob[id];
            match node.children.len() {
                0 => {}
                1 => node_prob[node.children[0]] = p_parent,
                _ => {
                    let lambda = temperature(self.temperature_slot[id].expect("slot"));
                    let mut max = T::neg_infinity();
                    for &c in &node.children {
                        let z = g(self.gp_slot[c].expect("slot")) / lambda;
                        node_prob[c] = z;
                        if z > max {
                            max = z;
                        }
                    }
                    let mut total = T::zero();
                    for &c in &node.children {
                        let e = (node_prob[c] - max).exp();
                        node_prob[c] = e;
                        total = total + e;
                    }
                    for &c in &node.children {
                        node_prob[c] = p_parent * node_prob[c] / total;
                    }
                }
            }
        }
        for (o, &leaf) in out.iter_mut().zip(&self.leaves) {
            *o = node_prob[leaf];
        }
    }
}

/// Tempered softmax `exp(g_j / lambda) / sum_j' exp(g_j' / lambda)`.
pub fn softmax_conditional<T: Scalar>(sibling_g: &[T], lambda: T) -> Result<Vec<T>> {
    if sibling_g.is_empty() {
        return Err(Error::invalid("softmax over an empty sibling set"));
    }
    if !(lambda > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {lambda}")));
    }
    let z: Vec<T> = sibling_g.iter().map(|&g| g / lambda).collect();
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSet<T> {
    /// One temperature per entry of `ModelTree::temperature_nodes`.
    pub values: Vec<T>,
}

impl<T: Scalar> TemperatureSet<T> {
    pub fn new(tree: &ModelTree, values: Vec<T>) -> Result<Self> {
        if values.len() != tree.temperature_nodes().len() {
            return Err(Error::TreeMismatch(format!(
                "{} temperatures for {} tempered nodes",
                values.len(),
                tree.temperature_nodes().len()
            )));
        }
        if values.iter().any(|&l| !(l > T::zero())) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        Ok(Self { values })
    }

    pub fn uniform(tree: &ModelTree, lambda: T) -> Result<Self> {
        Self::new(tree, vec![lambda; tree.temperature_nodes().len()])
    }
}

/// GP values per tree node (keyed by node id) at a common set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGpValues<T> {
    pub values: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> NodeGpValues<T> {
    pub fn new(values: BTreeMap<usize, Vec<T>>) -> Self {
        Self { values }
    }

    /// Builds the map from vectors given in GP-slot order.
    pub fn from_slots(tree: &ModelTree, slots: Vec<Vec<T>>) -> Result<Self> {
        if slots.len() != tree.gp_nodes().len() {
            return Err(Error::TreeMismatch(format!(
                "{} GP value vectors for {} GP nodes",
                slots.len(),
                tree.gp_nodes().len()
            )));
        }
        Ok(Self {
            values: tree.gp_nodes().iter().copied().zip(slots).collect(),
        })
    }

    pub fn n_points(&self) -> usize {
        self.values.values().next().map_or(0, Vec::len)
    }

    /// Checks that every GP node of `tree` has values covering `n_points`.
    pub fn check_covers(&self, tree: &ModelTree, n_points: usize) -> Result<()> {
        let have: BTreeSet<usize> = self.values.keys().copied().collect();
        for &id in tree.gp_nodes() {
            match self.values.get(&id) {
                None => {
                    return Err(Error::TreeMismatch(format!(
                        "no GP values for node `{}`",
                        tree.nodes()[id].name
                    )))
                }
                Some(v) if v.len() < n_points => {
                    return Err(Error::TreeMismatch(format!(
                        "GP values for node `{}` cover {} points, need {n_points}",
                        tree.nodes()[id].name,
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        let want: BTreeSet<usize> = tree.gp_nodes().iter().copied().collect();
        if let Some(extra) = have.difference(&want).next() {
            return Err(Error::TreeMismatch(format!("GP values given for non-GP node {extra}")));
        }
        Ok(())
    }
}

/// Weight vector over the K leaves at one evaluation point.
pub fn leaf_weights<T: Scalar>(
    tree: &ModelTree,
    g: &NodeGpValues<T>,
    temps: &TemperatureSet<T>,
    point_index: usize,
) -> Result<Vec<T>> {
    g.check_covers(tree, point_index + 1)?;
    if temps.values.len() != tree.temperature_nodes().len() {
        return Err(Error::TreeMismatch("temperature set does not match tree".into()));
    }
    let slots: Vec<&Vec<T>> = tree.gp_nodes().iter().map(|id| &g.values[id]).collect();
    let mut scratch = vec![T::zero(); tree.nodes().len()];
    let mut out = vec![T::zero(); tree.n_leaves()];
    tree.weights_into(
        |s| slots[s][point_index],
        |t| temps.values[t],
        &mut scratch,
        &mut out,
    );
    Ok(out)
}

/// Shannon entropy in nats.
pub fn weight_entropy<T: Scalar>(w: &[T]) -> T {
    w.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum::<T>()
        .max(T::zero())
}

/// Leaf weights at a set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMeasure<T> {
    pub tree: ModelTree,
    /// `n_points x K`, rows on the simplex.
    pub leaf_weights: Matrix<T>,
}

impl<T: Scalar> WeightMeasure<T> {
    pub fn compute(tree: &ModelTree, g: &NodeGpValues<T>, temps: &TemperatureSet<T>) -> Result<Self> {
        let n = g.n_points();
        g.check_covers(tree, n)?;
        let slots: Vec<&Vec<T>> = tree.gp_nodes().iter().map(|id| &g.values[id]).collect();
        let mut scratch = vec![T::zero(); tree.nodes().len()];
        let mut w = Matrix::zeros(n, tree.n_leaves());
        for i in 0..n {
            tree.weights_into(|s| slots[s][i], |t| temps.values[t], &mut scratch, w.row_mut(i));
        }
        Ok(Self {
            tree: tree.clone(),
            leaf_weights: w,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family_tree() -> ModelTree {
        let mut groups = BTreeMap::new();
        groups.insert("family0".into(), TreeSpec::Leaves(vec!["m00".into(), "m01".into()]));
        groups.insert("family1".into(), TreeSpec::Leaves(vec!["m10".into(), "m11".into()]));
        ModelTree::from_spec(&TreeSpec::Groups(groups), &["m00", "m01", "m10", "m11"]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_conditional(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_conditional(&[1.0f64, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        // exp(1/1000) / (exp(1/1000) + 1)
        let p = softmax_conditional(&[1.0f64, 0.0], 1000.0).unwrap();
        assert!((p[0] - 0.500_250).abs() < 1e-8 && (p[1] - 0.499_750).abs() < 1e-8);
    }

    #[test]
    fn softmax_survives_tiny_temperature() {
        let p = softmax_conditional(&[800.0f64, 799.0, -5.0], 1e-6).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        assert!(softmax_conditional::<f64>(&[], 1.0).is_err());
        assert!(softmax_conditional(&[1.0], 0.0).is_err());
    }

    #[test]
    fn depth_one_uniform() {
        let tree = ModelTree::flat(&["a", "b"]).unwrap();
        let g = NodeGpValues::from_slots(&tree, vec![vec![0.0], vec![0.0]]).unwrap();
        let t = TemperatureSet::uniform(&tree, 1.0).unwrap();
        assert_eq!(leaf_weights(&tree, &g, &t, 0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn two_level_uniform_quarter() {
        let tree = family_tree();
        assert_eq!(tree.gp_nodes().len(), 6);
        assert_eq!(tree.temperature_nodes().len(), 3);
        assert_eq!(tree.depth(), 2);
        let g = NodeGpValues::from_slots(&tree, vec![vec![0.0]; 6]).unwrap();
        let t = TemperatureSet::uniform(&tree, 1.0).unwrap();
        let w = leaf_weights(&tree, &g, &t, 0).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn two_level_product_of_conditionals() {
        let tree = family_tree();
        let mut values = BTreeMap::new();
        for &id in tree.gp_nodes() {
            let v = if tree.nodes()[id].name == "m00" { 1.0 } else { 0.0 };
            values.insert(id, vec![v]);
        }
        let g = NodeGpValues::new(values);
        let t = TemperatureSet::uniform(&tree, 1.0).unwrap();
        let w = leaf_weights(&tree, &g, &t, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - 0.5 * e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.36553).abs() < 1e-5);
    }

    #[test]
    fn missing_gp_values_is_tree_mismatch() {
        let tree = family_tree();
        let g = NodeGpValues::new(BTreeMap::from([(1usize, vec![0.0])]));
        let t = TemperatureSet::uniform(&tree, 1.0).unwrap();
        assert!(matches!(leaf_weights(&tree, &g, &t, 0), Err(Error::TreeMismatch(_))));
    }

    #[test]
    fn single_child_passes_through_without_gp() {
        let mut groups = BTreeMap::new();
        groups.insert("solo".into(), TreeSpec::Leaves(vec!["a".into()]));
        groups.insert("pair".into(), TreeSpec::Leaves(vec!["b".into(), "c".into()]));
        let tree = ModelTree::from_spec(&TreeSpec::Groups(groups), &["a", "b", "c"]).unwrap();
        // root's two children plus the pair's two children
        assert_eq!(tree.gp_nodes().len(), 4);
        let g = NodeGpValues::from_slots(&tree, vec![vec![0.0]; 4]).unwrap();
        let t = TemperatureSet::uniform(&tree, 1.0).unwrap();
        let w = leaf_weights(&tree, &g, &t, 0).unwrap();
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn bad_trees_rejected() {
        assert!(ModelTree::from_spec(&TreeSpec::Leaves(vec!["a".into()]), &["a", "b"]).is_err());
        assert!(ModelTree::from_spec(&TreeSpec::Leaves(vec!["a".into(), "z".into()]), &["a", "b"]).is_err());
        assert!(ModelTree::from_spec(&TreeSpec::Leaves(vec!["a".into(), "a".into()]), &["a"]).is_err());
        let empty = TreeSpec::Groups(BTreeMap::from([("g".to_string(), TreeSpec::Leaves(vec![]))]));
        assert!(ModelTree::from_spec(&empty, &Vec::<String>::new()).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(weight_entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!((weight_entropy(&[0.25f64; 4]) - 4f64.ln()).abs() < 1e-15);
        let e = std::f64::consts::E;
        let (p, q) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let h = weight_entropy(&[p, q]);
        assert!((h - (-p * p.ln() - q * q.ln())).abs() < 1e-15);
        assert!((h - 0.582_203).abs() < 1e-6);
    }

    #[test]
    fn tree_serde_roundtrip() {
        let tree = family_tree();
        let s = serde_json::to_string(&tree).unwrap();
        let back: ModelTree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, tree);
    }
}
