use crate::error::{shape_err, Error, Result};
use crate::numerics::{bce_with_logits_grad, BCE_EPS};

use super::{softened_kl_parts, validate_weights, DistillConfig};

/// A mixture hierarchy. Leaves refer to base-model logits by index.
#[derive(Clone, Debug, PartialEq)]
pub enum MixtureNode {
    Leaf(usize),
    Mix {
        children: Vec<MixtureNode>,
        weights: Vec<f64>,
    },
}

impl MixtureNode {
    /// Uniformly weighted tree with the given branching factors per level;
    /// `[]` is a single leaf, `[3]` a one-layer mixture, `[4, 3]` a
    /// mixture of four three-leaf mixtures. Leaves are numbered left to right.
    pub fn uniform(branching: &[usize]) -> Self {
        let mut next = 0;
        Self::build(branching, &mut next)
    }

    fn build(branching: &[usize], next: &mut usize) -> Self {
        match branching.split_first() {
            None => {
                let leaf = MixtureNode::Leaf(*next);
                *next += 1;
                leaf
            }
            Some((&n, rest)) => MixtureNode::Mix {
                children: (0..n).map(|_| Self::build(rest, next)).collect(),
                weights: vec![1.0 / n as f64; n],
            },
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            MixtureNode::Leaf(_) => 0,
            MixtureNode::Mix { children, .. } => {
                1 + children.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            MixtureNode::Leaf(_) => 1,
            MixtureNode::Mix { children, .. } => children.iter().map(|c| c.leaf_count()).sum(),
        }
    }

    /// Number of `Mix` nodes.
    pub fn mix_count(&self) -> usize {
        match self {
            MixtureNode::Leaf(_) => 0,
            MixtureNode::Mix { children, .. } => {
                1 + children.iter().map(|c| c.mix_count()).sum::<usize>()
            }
        }
    }

    /// Mixing weights of every `Mix` node, preorder.
    pub fn weights_preorder(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.collect_weights(&mut out);
        out
    }

    fn collect_weights(&self, out: &mut Vec<Vec<f64>>) {
        if let MixtureNode::Mix { children, weights } = self {
            out.push(weights.clone());
            children.iter().for_each(|c| c.collect_weights(out));
        }
    }

    /// Leaf ids under every node (leaves included), preorder. Aligned
    /// with [`TreeLoss::nodes`].
    pub fn leaves_preorder(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<Vec<usize>>) -> Vec<usize> {
        let slot = out.len();
        out.push(Vec::new());
        let ids = match self {
            MixtureNode::Leaf(i) => vec![*i],
            MixtureNode::Mix { children, .. } => {
                children.iter().flat_map(|c| c.collect_leaves(out)).collect()
            }
        };
        out[slot] = ids.clone();
        ids
    }

    /// Replaces mixing weights of every `Mix` node, preorder.
    pub fn set_weights_preorder(&mut self, weights: &[Vec<f64>]) -> Result<()> {
        let mut idx = 0;
        self.assign_weights(weights, &mut idx)?;
        if idx != weights.len() {
            return shape_err(format!("{} weight vectors for {idx} mixtures", weights.len()));
        }
        Ok(())
    }

    fn assign_weights(&mut self, all: &[Vec<f64>], idx: &mut usize) -> Result<()> {
        if let MixtureNode::Mix { children, weights } = self {
            let w = all
                .get(*idx)
                .ok_or_else(|| Error::Shape("too few weight vectors".into()))?;
            if w.len() != children.len() {
                return shape_err(format!("{} weights for {} children", w.len(), children.len()));
            }
            *weights = w.clone();
            *idx += 1;
            for c in children {
                c.assign_weights(all, idx)?;
            }
        }
        Ok(())
    }

    /// Checks weights and that leaves are exactly `0..leaf_count` once each.
    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        self.check(&mut seen)?;
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &l)| i != l) {
            return Err(Error::Config(format!("leaf indices are not 0..n: {seen:?}")));
        }
        Ok(())
    }

    fn check(&self, seen: &mut Vec<usize>) -> Result<()> {
        match self {
            MixtureNode::Leaf(i) => seen.push(*i),
            MixtureNode::Mix { children, weights } => {
                if children.is_empty() {
                    return Err(Error::Config("mixture node without children".into()));
                }
                if children.len() != weights.len() {
                    return Err(Error::Config(format!(
                        "{} children but {} weights",
                        children.len(),
                        weights.len()
                    )));
                }
                validate_weights(weights).map_err(|e| Error::Config(e.to_string()))?;
                for c in children {
                    c.check(seen)?;
                }
            }
        }
        Ok(())
    }
}

/// Loss contributions attributed to one node of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLoss {
    /// `root`, `root/0`, `root/0/2`, ...
    pub path: String,
    /// BCE of this node's logits against the labels.
    pub label_loss: f64,
    /// Distillation term with this node as teacher (0 for leaves).
    pub distill_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TreeLoss {
    pub total: f64,
    /// Per-node parts, preorder.
    pub nodes: Vec<NodeLoss>,
    /// ∂total/∂(leaf logits), indexed by leaf id. Empty unless requested.
    pub leaf_grads: Vec<Vec<f64>>,
    /// ∂total/∂(mixing weights) per `Mix` node, preorder. Empty unless requested.
    pub weight_grads: Vec<Vec<f64>>,
    /// Root logits.
    pub root_logits: Vec<f64>,
}

enum Flat {
    Leaf(usize),
    Mix { children: Vec<usize>, weights: Vec<f64> },
}

struct FlatNode {
    kind: Flat,
    path: String,
}

fn flatten(node: &MixtureNode, path: String, out: &mut Vec<FlatNode>) -> usize {
    let id = out.len();
    match node {
        MixtureNode::Leaf(i) => out.push(FlatNode {
            kind: Flat::Leaf(*i),
            path,
        }),
        MixtureNode::Mix { children, weights } => {
            out.push(FlatNode {
                kind: Flat::Mix {
                    children: Vec::new(),
                    weights: weights.clone(),
                },
                path: path.clone(),
            });
            let ids: Vec<usize> = children
                .iter()
                .enumerate()
                .map(|(c, child)| flatten(child, format!("{path}/{c}"), out))
                .collect();
            if let Flat::Mix { children, .. } = &mut out[id].kind {
                *children = ids;
            }
        }
    }
    id
}

/// Layered mixture loss: every node contributes BCE on its own logits, and
/// every mixture additionally contributes `T² Σ_c KL(Soft(z_node) ‖ Soft(z_c))`
/// over its direct children when distillation is enabled.
pub fn tree_loss(
    y: &[f64],
    tree: &MixtureNode,
    leaf_logits: &[&[f64]],
    distill: &DistillConfig,
    want_grad: bool,
) -> Result<TreeLoss> {
    tree.validate()?;
    let n_leaves = tree.leaf_count();
    if leaf_logits.len() != n_leaves {
        return shape_err(format!(
            "tree has {n_leaves} leaves but {} logit vectors were given",
            leaf_logits.len()
        ));
    }
    let classes = y.len();
    if let Some(bad) = leaf_logits.iter().find(|l| l.len() != classes) {
        return shape_err(format!("leaf logits of length {} vs {classes} labels", bad.len()));
    }

    let mut nodes = Vec::new();
    flatten(tree, "root".to_string(), &mut nodes);

    // children follow parents in preorder, so a reverse sweep sees children first
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
    for id in (0..nodes.len()).rev() {
        logits[id] = match &nodes[id].kind {
            Flat::Leaf(i) => leaf_logits[*i].to_vec(),
            Flat::Mix { children, weights } => {
                let mut z = vec![0.0; classes];
                for (&c, &w) in children.iter().zip(weights) {
                    for (o, x) in z.iter_mut().zip(&logits[c]) {
                        *o += w * x;
                    }
                }
                z
            }
        };
    }

    let t = distill.temperature;
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; classes]; nodes.len()];
    let mut parts = Vec::with_capacity(nodes.len());
    let mut total = 0.0;
    for (id, node) in nodes.iter().enumerate() {
        let (label_loss, g_bce) = bce_with_logits_grad(y, &logits[id], BCE_EPS)?;
        total += label_loss;
        add(&mut grads[id], &g_bce, 1.0);
        let mut distill_loss = 0.0;
        if let (Flat::Mix { children, .. }, true) = (&node.kind, distill.enabled()) {
            for &c in children {
                let kl = softened_kl_parts(&logits[id], &logits[c], t)?;
                distill_loss += t * t * kl.kl;
                if want_grad {
                    // ∂/∂student = T (q - p)
                    for ((g, q), p) in grads[c].iter_mut().zip(&kl.q).zip(&kl.p) {
                        *g += t * (q - p);
                    }
                    if !distill.stop_grad_teacher {
                        // ∂/∂teacher = T p ⊙ (log p - log q - KL)
                        for (j, g) in grads[id].iter_mut().enumerate() {
                            *g += t * kl.p[j] * (kl.log_p[j] - kl.log_q[j] - kl.kl);
                        }
                    }
                }
            }
            total += distill_loss;
        }
        parts.push(NodeLoss {
            path: node.path.clone(),
            label_loss,
            distill_loss,
        });
    }

    let mut leaf_grads = Vec::new();
    let mut weight_grads = Vec::new();
    if want_grad {
        leaf_grads = vec![Vec::new(); n_leaves];
        for id in 0..nodes.len() {
            match &nodes[id].kind {
                Flat::Leaf(i) => leaf_grads[*i] = grads[id].clone(),
                Flat::Mix { children, weights } => {
                    let g_node = grads[id].clone();
                    let mut gw = Vec::with_capacity(children.len());
                    for (&c, &w) in children.iter().zip(weights) {
                        gw.push(crate::numerics::dot(&logits[c], &g_node));
                        add(&mut grads[c], &g_node, w);
                    }
                    weight_grads.push(gw);
                }
            }
        }
    }

    Ok(TreeLoss {
        total,
        nodes: parts,
        leaf_grads,
        weight_grads,
        root_logits: logits.swap_remove(0),
    })
}

/// Two-layer mixture-of-mixtures loss with layer-wise distillation at a
/// shared temperature. Trees deeper than two layers are rejected.
pub fn mod_loss(
    y: &[f64],
    tree: &MixtureNode,
    leaf_logits: &[&[f64]],
    distill: &DistillConfig,
) -> Result<TreeLoss> {
    let depth = tree.depth();
    if depth > 2 {
        return Err(Error::Config(format!(
            "mixture tree of depth {depth}; at most 2 layers are supported"
        )));
    }
    tree_loss(y, tree, leaf_logits, distill, true)
}

fn add(dst: &mut [f64], src: &[f64], alpha: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}
