use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Corpus, SegmentLabel, SEGMENT_FRAMES};
use crate::error::{Error, Result};
use crate::mixture::{tree_loss, DistillConfig, MixtureNode};
use crate::model::{Ensemble, Topology};
use crate::nextvlad::{video_model_backward, video_model_forward, Mode, VideoModel, VideoWorkspace};
use crate::numerics::{adam_step, softmax, AdamConfig, AdamState, Matrix};
use crate::params::{is_decayed, Parameters};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{lr_at, TrainConfig};

/// One training input: a frame sequence and its multi-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub visual: Matrix,
    pub audio: Matrix,
    pub labels: Vec<f64>,
}

/// Whole videos with their (noisy) video-level labels.
pub fn video_examples(corpus: &Corpus) -> Vec<Example> {
    let classes = corpus.header.class_count as usize;
    corpus
        .records
        .iter()
        .map(|r| Example {
            visual: r.visual.clone(),
            audio: r.audio.clone(),
            labels: r.label_vector(classes),
        })
        .collect()
}

/// One example per labeled five-frame window. Targets are the window's
/// positive classes; classes without a label row count as negatives.
pub fn segment_examples(corpus: &Corpus, labels: &[SegmentLabel]) -> Result<Vec<Example>> {
    let classes = corpus.header.class_count as usize;
    let by_id: BTreeMap<&str, usize> = corpus
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.video_id.as_str(), i))
        .collect();
    let mut windows: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for l in labels {
        let &rec = by_id.get(l.video_id.as_str()).ok_or_else(|| {
            Error::Domain(format!("segment label for unknown video `{}`", l.video_id))
        })?;
        let start = l.start_frame as usize;
        let frames = corpus.records[rec].frame_count();
        if start >= frames {
            return Err(Error::Domain(format!(
                "segment at frame {start} past the end of `{}` ({frames} frames)",
                l.video_id
            )));
        }
        if l.class_id as usize >= classes {
            return Err(Error::Domain(format!(
                "segment class {} outside 0..{classes}",
                l.class_id
            )));
        }
        let target = windows.entry((rec, start)).or_insert_with(|| vec![0.0; classes]);
        if l.positive {
            target[l.class_id as usize] = 1.0;
        }
    }
    windows
        .into_iter()
        .map(|((rec, start), labels)| {
            let r = &corpus.records[rec];
            let end = (start + SEGMENT_FRAMES).min(r.frame_count());
            Ok(Example {
                visual: r.visual.slice_rows(start, end - start)?,
                audio: r.audio.slice_rows(start, end - start)?,
                labels,
            })
        })
        .collect()
}

/// Per-step loss attribution for one node of the mixture tree.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub step: u64,
    pub node_path: String,
    pub label_loss: f64,
    pub distill_loss: f64,
    pub reg_loss: f64,
}

pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[DiagnosticRow]) -> Result<()> {
    let mut out = String::from("step,node_path,label_loss,distill_loss,reg_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.node_path, r.label_loss, r.distill_loss, r.reg_loss
        ));
    }
    crate::wire::write_atomic(path, out.as_bytes())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub diagnostics: Vec<DiagnosticRow>,
    /// Mean objective (including the weight penalty) of every step.
    pub step_losses: Vec<f64>,
}

/// Trains a freshly initialized model of the given topology.
pub fn pretrain(examples: &[Example], topology: Topology, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Ensemble::init(topology, cfg.seed)?;
    Trainer::new(model, cfg)?.run(examples)
}

/// Continues training the parameters of `checkpoint`. Optimizer moments and
/// counters start fresh.
pub fn finetune(checkpoint: &Checkpoint, examples: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    Trainer::new(checkpoint.model.clone(), cfg)?.run(examples)
}

struct Trainer<'c> {
    cfg: &'c TrainConfig,
    model: Ensemble,
    adam: Vec<AdamState>,
    leaf_rngs: Vec<ChaCha8Rng>,
    shuffle_rng: ChaCha8Rng,
    distill: DistillConfig,
    /// Leaves under each tree node, preorder.
    node_leaves: Vec<Vec<usize>>,
    step: u64,
    examples_seen: u64,
    diagnostics: Vec<DiagnosticRow>,
    step_losses: Vec<f64>,
}

impl<'c> Trainer<'c> {
    fn new(mut model: Ensemble, cfg: &'c TrainConfig) -> Result<Self> {
        model.set_dropout(cfg.dropout_rate);
        let mut adam = Vec::new();
        model.visit(&mut |_, m| adam.push(AdamState::for_param(m)));
        let leaf_rngs = (0..model.leaves.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        let node_leaves = model.tree().leaves_preorder();
        Ok(Self {
            cfg,
            distill: DistillConfig {
                temperature: cfg.temperature,
                stop_grad_teacher: cfg.stop_grad_teacher,
            },
            adam,
            leaf_rngs,
            shuffle_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            node_leaves,
            model,
            step: 0,
            examples_seen: 0,
            diagnostics: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    fn run(mut self, examples: &[Example]) -> Result<TrainOutcome> {
        let classes = self.model.topology.model.class_count;
        if let Some(bad) = examples.iter().find(|e| e.labels.len() != classes) {
            return Err(Error::Shape(format!(
                "example has {} labels, model has {classes} classes",
                bad.labels.len()
            )));
        }
        let per_epoch = examples.len().div_ceil(self.cfg.batch_size) as u64;
        let total = if self.cfg.max_steps > 0 {
            self.cfg.max_steps
        } else {
            per_epoch * self.cfg.epochs as u64
        };
        if total > 0 && examples.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut epoch = 0;
        while self.step < total {
            order.shuffle(&mut self.shuffle_rng);
            let first = self.step_losses.len();
            for batch in order.chunks(self.cfg.batch_size) {
                if self.step >= total {
                    break;
                }
                let batch: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
                self.train_step(&batch)?;
            }
            epoch += 1;
            let losses = &self.step_losses[first..];
            log::info!(
                "epoch {epoch} step {} examples {} mean loss {:.6}",
                self.step,
                self.examples_seen,
                losses.iter().sum::<f64>() / losses.len().max(1) as f64
            );
        }
        self.model.set_dropout(0.0);
        let mut rngs: Vec<RngState> = self.leaf_rngs.iter().map(RngState::capture).collect();
        rngs.push(RngState::capture(&self.shuffle_rng));
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                model: self.model,
                step: self.step,
                examples_seen: self.examples_seen,
                optimizer: Some(self.adam),
                rngs,
            },
            diagnostics: self.diagnostics,
            step_losses: self.step_losses,
        })
    }

    fn train_step(&mut self, batch: &[&Example]) -> Result<()> {
        let b = batch.len() as f64;
        let workers = self.cfg.workers;
        let leaves = &self.model.leaves;

        // phase 1: every leaf runs the whole batch forward
        let forward: Vec<Vec<(Vec<f64>, VideoWorkspace)>> = {
            let jobs: Vec<(&VideoModel, &mut ChaCha8Rng)> =
                leaves.iter().zip(self.leaf_rngs.iter_mut()).collect();
            par_map(jobs, workers, |(leaf, rng)| {
                batch
                    .iter()
                    .map(|ex| video_model_forward(&ex.visual, &ex.audio, leaf, Mode::Train, rng))
                    .collect::<Result<Vec<_>>>()
            })?
        };

        // coordinator: mixture losses and gradients with respect to leaf logits
        let tree = self.model.tree();
        let n_nodes = self.node_leaves.len();
        let mut label = vec![0.0; n_nodes];
        let mut distill = vec![0.0; n_nodes];
        let mut data_loss = 0.0;
        let mut leaf_grads: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(batch.len()); leaves.len()];
        let mut weight_grads: Vec<Vec<f64>> = tree.weights_preorder().iter().map(|w| vec![0.0; w.len()]).collect();
        for (i, ex) in batch.iter().enumerate() {
            let logits: Vec<&[f64]> = forward.iter().map(|f| f[i].0.as_slice()).collect();
            let tl = tree_loss(&ex.labels, &tree, &logits, &self.distill, true)?;
            data_loss += tl.total / b;
            for (n, part) in tl.nodes.iter().enumerate() {
                label[n] += part.label_loss / b;
                distill[n] += part.distill_loss / b;
            }
            for (l, g) in tl.leaf_grads.into_iter().enumerate() {
                leaf_grads[l].push(g.into_iter().map(|x| x / b).collect());
            }
            for (acc, g) in weight_grads.iter_mut().zip(&tl.weight_grads) {
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += x / b);
            }
        }

        let l2 = self.cfg.l2_penalty;
        let leaf_reg: Vec<f64> = leaves.iter().map(|l| l2 * l.decayed_sum_sq()).collect();
        let reg: f64 = leaf_reg.iter().sum();
        let total = data_loss + reg;
        if !total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                last_finite: self.step_losses.last().copied().unwrap_or(f64::NAN),
            });
        }

        // phase 2: every leaf backpropagates its share
        let grads: Vec<VideoModel> = {
            let jobs: Vec<(usize, &VideoModel)> = leaves.iter().enumerate().collect();
            let forward = &forward;
            let leaf_grads = &leaf_grads;
            par_map(jobs, workers, |(l, leaf)| {
                let mut g = leaf.zeros_like();
                for (gl, (_, ws)) in leaf_grads[l].iter().zip(&forward[l]) {
                    video_model_backward(gl, ws, leaf, &mut g)?;
                }
                Ok(g)
            })?
        };

        let mix_grads: Vec<Matrix> = self
            .model
            .mix_logits
            .iter()
            .zip(&weight_grads)
            .map(|(theta, gw)| {
                let w = softmax(theta.data()).expect("mixing node has children");
                let inner: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
                Matrix::row_vector(w.iter().zip(gw).map(|(wi, gi)| wi * (gi - inner)).collect())
            })
            .collect();

        self.apply_update(&grads, &mix_grads)?;

        for (n, leaves_under) in self.node_leaves.iter().enumerate() {
            self.diagnostics.push(DiagnosticRow {
                step: self.step,
                node_path: node_path(&tree, n),
                label_loss: label[n],
                distill_loss: distill[n],
                reg_loss: leaves_under.iter().map(|&l| leaf_reg[l]).sum(),
            });
        }
        self.step_losses.push(total);
        self.step += 1;
        self.examples_seen += batch.len() as u64;
        Ok(())
    }

    fn apply_update(&mut self, grads: &[VideoModel], mix_grads: &[Matrix]) -> Result<()> {
        let lr = lr_at(self.examples_seen, self.cfg);
        let l2 = self.cfg.l2_penalty;
        let precision = self.cfg.precision;
        let adam_cfg = AdamConfig::default();
        let mut flat: Vec<&Matrix> = Vec::with_capacity(self.adam.len());
        for g in grads {
            g.visit(&mut |_, m| flat.push(m));
        }
        flat.extend(mix_grads.iter());
        let mut idx = 0;
        let mut failure = None;
        let adam = &mut self.adam;
        self.model.visit_mut(&mut |name, param| {
            let i = idx;
            idx += 1;
            if failure.is_some() {
                return;
            }
            let mut g = flat[i].clone();
            if l2 > 0.0 && name.starts_with("leaf") && is_decayed(name) {
                if let Err(e) = g.add_scaled(2.0 * l2, param) {
                    failure = Some(e);
                    return;
                }
            }
            if let Err(e) = adam_step(param, &g, &mut adam[i], lr, &adam_cfg) {
                failure = Some(e);
                return;
            }
            precision.round_all(param.data_mut());
        });
        failure.map_or(Ok(()), Err)
    }
}

fn node_path(tree: &MixtureNode, preorder_index: usize) -> String {
    fn walk(node: &MixtureNode, path: String, out: &mut Vec<String>) {
        out.push(path.clone());
        if let MixtureNode::Mix { children, .. } = node {
            for (i, c) in children.iter().enumerate() {
                walk(c, format!("{path}/{i}"), out);
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, "root".into(), &mut out);
    out.swap_remove(preorder_index)
}

/// Maps `f` over `jobs` using up to `workers` threads, each owning a
/// contiguous run of jobs. Results keep the input order.
fn par_map<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> Result<Vec<R>>
where
    J: Send,
    R: Send,
    F: Fn(J) -> Result<R> + Sync,
{
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let per = jobs.len().div_ceil(workers);
    let mut groups: Vec<Vec<J>> = Vec::new();
    let mut it = jobs.into_iter().peekable();
    while it.peek().is_some() {
        groups.push(it.by_ref().take(per).collect());
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = groups
            .into_iter()
            .map(|g| s.spawn(move || g.into_iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}
