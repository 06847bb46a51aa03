//! A trainable hierarchy of NeXtVLAD leaves combined by logit mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::mixture::MixtureNode;
use crate::nextvlad::{ModelConfig, VideoModel};
use crate::numerics::{softmax, Matrix};
use crate::params::Parameters;

/// Everything needed to rebuild parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub model: ModelConfig,
    /// Branching factor per mixture layer: `[]` single model, `[3]`,
    /// `[4, 3]`.
    pub tree: Vec<usize>,
    pub learnable_weights: bool,
}

impl Topology {
    pub fn single(model: ModelConfig) -> Self {
        Self {
            model,
            tree: Vec::new(),
            learnable_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tree.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!("tree {:?} has an empty layer", self.tree)));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.tree.iter().product()
    }

    /// Field-by-field comparison, for error messages on checkpoint load.
    pub fn differences(&self, other: &Topology) -> Vec<String> {
        let (a, b) = (&self.model, &other.model);
        let mut out = Vec::new();
        let mut cmp = |name: &str, x: String, y: String| {
            if x != y {
                out.push(format!("{name}: {x} vs {y}"));
            }
        };
        cmp("visual_dim", a.visual_dim.to_string(), b.visual_dim.to_string());
        cmp("audio_dim", a.audio_dim.to_string(), b.audio_dim.to_string());
        cmp("expansion", a.expansion.to_string(), b.expansion.to_string());
        cmp("groups", a.groups.to_string(), b.groups.to_string());
        cmp("clusters", a.clusters.to_string(), b.clusters.to_string());
        cmp("hidden", a.hidden.to_string(), b.hidden.to_string());
        cmp("class_count", a.class_count.to_string(), b.class_count.to_string());
        cmp("global_norm", a.global_norm.to_string(), b.global_norm.to_string());
        cmp("tree", tree_to_string(&self.tree), tree_to_string(&other.tree));
        cmp(
            "learnable_weights",
            self.learnable_weights.to_string(),
            other.learnable_weights.to_string(),
        );
        out
    }

    /// Model keys as read by [`Topology::from_kv`], plus the input shapes.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("visual_dim", m.visual_dim.to_string()),
            ("audio_dim", m.audio_dim.to_string()),
            ("class_count", m.class_count.to_string()),
            ("expansion", m.expansion.to_string()),
            ("groups", m.groups.to_string()),
            ("clusters", m.clusters.to_string()),
            ("hidden", m.hidden.to_string()),
            ("global_norm", m.global_norm.to_string()),
            ("tree", tree_to_string(&self.tree)),
            ("learnable_weights", self.learnable_weights.to_string()),
        ]
    }

    /// Reads model keys (input shapes, `expansion`, `groups`, `clusters`, `hidden`,
    /// `tree`, `global_norm`, `learnable_weights`) on top of `base`.
    pub fn from_kv(kv: &mut KvConfig, base: Topology) -> Result<Self> {
        let mut t = base;
        kv.take_into("visual_dim", &mut t.model.visual_dim)?;
        kv.take_into("audio_dim", &mut t.model.audio_dim)?;
        kv.take_into("class_count", &mut t.model.class_count)?;
        kv.take_into("expansion", &mut t.model.expansion)?;
        kv.take_into("groups", &mut t.model.groups)?;
        kv.take_into("clusters", &mut t.model.clusters)?;
        kv.take_into("hidden", &mut t.model.hidden)?;
        kv.take_into("global_norm", &mut t.model.global_norm)?;
        kv.take_into("learnable_weights", &mut t.learnable_weights)?;
        if let Some(s) = kv.take_str("tree") {
            t.tree = parse_tree(&s)?;
        }
        t.validate()?;
        Ok(t)
    }
}

/// `single`, `3`, `4x3`.
pub fn parse_tree(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s == "single" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("bad tree spec `{s}`")))
        })
        .collect()
}

pub fn tree_to_string(tree: &[usize]) -> String {
    if tree.is_empty() {
        "single".into()
    } else {
        tree.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// Model presets: `tiny`, `desk` and `full` shapes.
pub fn model_preset(name: &str, visual_dim: usize, audio_dim: usize, class_count: usize) -> Result<ModelConfig> {
    let (expansion, groups, clusters, hidden) = match name {
        "tiny" => (2, 2, 4, 32),
        "desk" => (2, 4, 16, 128),
        "full" => (2, 8, 128, 2048),
        other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
    };
    Ok(ModelConfig {
        visual_dim,
        audio_dim,
        expansion,
        groups,
        clusters,
        hidden,
        class_count,
        global_norm: false,
    })
}

/// Leaves plus (optionally learnable) mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub topology: Topology,
    pub leaves: Vec<VideoModel>,
    /// Softmax-parameterized weight logits per mixture node, preorder.
    /// Empty unless `learnable_weights`.
    pub mix_logits: Vec<Matrix>,
}

impl Ensemble {
    /// Leaf `i` draws its initial weights from stream `i + 1` of `seed`.
    pub fn init(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let leaves = (0..topology.leaf_count())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                VideoModel::init(topology.model, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mix_logits = Self::zero_mix_logits(&topology);
        Ok(Self {
            topology,
            leaves,
            mix_logits,
        })
    }

    /// Zero-valued parameters of the given topology.
    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let leaves = (0..topology.leaf_count())
            .map(|_| VideoModel::zeros(topology.model))
            .collect::<Result<Vec<_>>>()?;
        let mix_logits = Self::zero_mix_logits(&topology);
        Ok(Self {
            topology,
            leaves,
            mix_logits,
        })
    }

    fn zero_mix_logits(topology: &Topology) -> Vec<Matrix> {
        if !topology.learnable_weights {
            return Vec::new();
        }
        MixtureNode::uniform(&topology.tree)
            .weights_preorder()
            .iter()
            .map(|w| Matrix::zeros(1, w.len()))
            .collect()
    }

    /// The mixing tree with current weights.
    pub fn tree(&self) -> MixtureNode {
        let mut tree = MixtureNode::uniform(&self.topology.tree);
        if self.topology.learnable_weights {
            let weights: Vec<Vec<f64>> = self
                .mix_logits
                .iter()
                .map(|l| softmax(l.data()).expect("mixing node has children"))
                .collect();
            tree.set_weights_preorder(&weights)
                .expect("mix logits match the tree");
        }
        tree
    }

    /// Eval-mode root logits.
    pub fn predict(&self, visual: &Matrix, audio: &Matrix) -> Result<Vec<f64>> {
        let leaf_logits = self
            .leaves
            .iter()
            .map(|l| l.predict(visual, audio))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = leaf_logits.iter().map(|v| v.as_slice()).collect();
        root_logits(&self.tree(), &refs)
    }

    pub fn set_dropout(&mut self, rate: f64) {
        self.leaves.iter_mut().for_each(|l| l.head.dropout_rate = rate);
    }
}

/// Mixes leaf logits up the tree.
pub fn root_logits(tree: &MixtureNode, leaves: &[&[f64]]) -> Result<Vec<f64>> {
    match tree {
        MixtureNode::Leaf(i) => leaves
            .get(*i)
            .map(|l| l.to_vec())
            .ok_or_else(|| Error::Shape(format!("missing logits for leaf {i}"))),
        MixtureNode::Mix { children, weights } => {
            let parts = children
                .iter()
                .map(|c| root_logits(c, leaves))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = parts.iter().map(|v| v.as_slice()).collect();
            crate::mixture::mix_logits(&refs, weights)
        }
    }
}

impl Parameters for Ensemble {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix)) {
        for (i, leaf) in self.leaves.iter().enumerate() {
            leaf.visit(&mut |n, m| f(&format!("leaf{i}.{n}"), m));
        }
        for (i, m) in self.mix_logits.iter().enumerate() {
            f(&format!("mix{i}.logits"), m);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, leaf) in self.leaves.iter_mut().enumerate() {
            leaf.visit_mut(&mut |n, m| f(&format!("leaf{i}.{n}"), m));
        }
        for (i, m) in self.mix_logits.iter_mut().enumerate() {
            f(&format!("mix{i}.logits"), m);
        }
    }
}
