use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, sigmoid_scalar, Matrix};
use crate::params::{init_weight, Parameters};

use super::pool::{accumulate_pool_backward, nextvlad_pool_forward, PoolConfig, PoolParams, PoolingWorkspace};

/// Shape of a full single-model video classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub expansion: usize,
    pub groups: usize,
    pub clusters: usize,
    pub hidden: usize,
    pub class_count: usize,
    pub global_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual_pool()?;
        self.audio_pool()?;
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn visual_pool(&self) -> Result<PoolConfig> {
        PoolConfig::new(
            self.visual_dim,
            self.expansion,
            self.groups,
            self.clusters,
            self.global_norm,
        )
    }

    pub fn audio_pool(&self) -> Result<PoolConfig> {
        PoolConfig::new(
            self.audio_dim,
            self.expansion,
            self.groups,
            self.clusters,
            self.global_norm,
        )
    }

    /// Width of the concatenated visual + audio pooled vector.
    pub fn pooled_dim(&self) -> Result<usize> {
        Ok(self.visual_pool()?.output_dim() + self.audio_pool()?.output_dim())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// pooled x H
    pub reduce_w: Matrix,
    pub reduce_b: Matrix,
    /// H x H
    pub gate_w: Matrix,
    pub gate_b: Matrix,
    /// H x classes
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
    pub dropout_rate: f64,
}

impl HeadParams {
    pub fn zeros(pooled: usize, hidden: usize, classes: usize) -> Self {
        Self {
            reduce_w: Matrix::zeros(pooled, hidden),
            reduce_b: Matrix::zeros(1, hidden),
            gate_w: Matrix::zeros(hidden, hidden),
            gate_b: Matrix::zeros(1, hidden),
            classifier_w: Matrix::zeros(hidden, classes),
            classifier_b: Matrix::zeros(1, classes),
            dropout_rate: 0.0,
        }
    }

    pub fn init(pooled: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            reduce_w: init_weight(pooled, hidden, rng),
            reduce_b: Matrix::zeros(1, hidden),
            gate_w: init_weight(hidden, hidden, rng),
            gate_b: Matrix::zeros(1, hidden),
            classifier_w: init_weight(hidden, classes, rng),
            classifier_b: Matrix::zeros(1, classes),
            dropout_rate: 0.0,
        }
    }
}

impl Parameters for HeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix)) {
        f("reduce_w", &self.reduce_w);
        f("reduce_b", &self.reduce_b);
        f("gate_w", &self.gate_w);
        f("gate_b", &self.gate_b);
        f("classifier_w", &self.classifier_w);
        f("classifier_b", &self.classifier_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("reduce_w", &mut self.reduce_w);
        f("reduce_b", &mut self.reduce_b);
        f("gate_w", &mut self.gate_w);
        f("gate_b", &mut self.gate_b);
        f("classifier_w", &mut self.classifier_w);
        f("classifier_b", &mut self.classifier_b);
    }
}

/// One NeXtVLAD video classifier: two pooling networks and a gated head.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoModel {
    pub cfg: ModelConfig,
    pub visual: PoolParams,
    pub audio: PoolParams,
    pub head: HeadParams,
}

impl VideoModel {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let visual = PoolParams::init(cfg.visual_pool()?, rng);
        let audio = PoolParams::init(cfg.audio_pool()?, rng);
        let head = HeadParams::init(cfg.pooled_dim()?, cfg.hidden, cfg.class_count, rng);
        Ok(Self {
            cfg,
            visual,
            audio,
            head,
        })
    }

    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            visual: PoolParams::zeros(cfg.visual_pool()?),
            audio: PoolParams::zeros(cfg.audio_pool()?),
            head: HeadParams::zeros(cfg.pooled_dim()?, cfg.hidden, cfg.class_count),
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Eval-mode logits.
    pub fn predict(&self, visual: &Matrix, audio: &Matrix) -> Result<Vec<f64>> {
        let mut no_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(video_model_forward(visual, audio, self, Mode::Eval, &mut no_rng)?.0)
    }
}

impl Parameters for VideoModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Matrix)) {
        self.visual.visit(&mut |n, m| f(&format!("visual.{n}"), m));
        self.audio.visit(&mut |n, m| f(&format!("audio.{n}"), m));
        self.head.visit(&mut |n, m| f(&format!("head.{n}"), m));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visual.visit_mut(&mut |n, m| f(&format!("visual.{n}"), m));
        self.audio.visit_mut(&mut |n, m| f(&format!("audio.{n}"), m));
        self.head.visit_mut(&mut |n, m| f(&format!("head.{n}"), m));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct VideoWorkspace {
    pub visual: PoolingWorkspace,
    pub audio: PoolingWorkspace,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)); `None` when inactive.
    pub mask: Option<Vec<f64>>,
    /// Pooled vector after dropout.
    pub dropped: Vec<f64>,
    pub hidden: Vec<f64>,
    pub gate: Vec<f64>,
    pub gated: Vec<f64>,
}

/// concat(pool_v, pool_a) → dropout → FC → context gate → logistic logits.
pub fn video_model_forward(
    visual: &Matrix,
    audio: &Matrix,
    model: &VideoModel,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, VideoWorkspace)> {
    if visual.rows() != audio.rows() {
        return Err(Error::Shape(format!(
            "visual has {} frames but audio has {}",
            visual.rows(),
            audio.rows()
        )));
    }
    let head = &model.head;
    if !(0.0..1.0).contains(&head.dropout_rate) {
        return Err(Error::Config(format!(
            "dropout rate {} outside [0, 1)",
            head.dropout_rate
        )));
    }
    let (pv, ws_v) = nextvlad_pool_forward(visual, &model.visual)?;
    let (pa, ws_a) = nextvlad_pool_forward(audio, &model.audio)?;
    let mut pooled = pv;
    pooled.extend_from_slice(&pa);

    let mask = if mode == Mode::Train && head.dropout_rate > 0.0 {
        let keep_scale = 1.0 / (1.0 - head.dropout_rate);
        Some(
            (0..pooled.len())
                .map(|_| {
                    if rng.random::<f64>() < head.dropout_rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let dropped = match &mask {
        Some(mk) => pooled.iter().zip(mk).map(|(x, s)| x * s).collect(),
        None => pooled,
    };

    let mut hidden = head.reduce_w.vecmat(&dropped)?;
    add_bias(&mut hidden, &head.reduce_b);
    let mut gate = head.gate_w.vecmat(&hidden)?;
    add_bias(&mut gate, &head.gate_b);
    gate.iter_mut().for_each(|x| *x = sigmoid_scalar(*x));
    let gated: Vec<f64> = gate.iter().zip(&hidden).map(|(g, h)| g * h).collect();
    let mut logits = head.classifier_w.vecmat(&gated)?;
    add_bias(&mut logits, &head.classifier_b);

    Ok((
        logits,
        VideoWorkspace {
            visual: ws_v,
            audio: ws_a,
            mask,
            dropped,
            hidden,
            gate,
            gated,
        },
    ))
}

/// Accumulates parameter gradients of the logits into `grads`.
pub fn video_model_backward(
    grad_logits: &[f64],
    ws: &VideoWorkspace,
    model: &VideoModel,
    grads: &mut VideoModel,
) -> Result<()> {
    let head = &model.head;
    if grad_logits.len() != model.cfg.class_count || ws.gated.len() != model.cfg.hidden {
        return Err(Error::Contract(
            "video workspace does not match the model it is used with".into(),
        ));
    }
    let g = &mut grads.head;
    g.classifier_w.add_outer(&ws.gated, grad_logits)?;
    add_bias_grad(&mut g.classifier_b, grad_logits);
    let g_gated = head.classifier_w.matvec(grad_logits)?;

    let mut g_hidden: Vec<f64> = g_gated.iter().zip(&ws.gate).map(|(gg, s)| gg * s).collect();
    let g_gate_logit: Vec<f64> = g_gated
        .iter()
        .zip(&ws.hidden)
        .zip(&ws.gate)
        .map(|((gg, h), s)| gg * h * s * (1.0 - s))
        .collect();
    g.gate_w.add_outer(&ws.hidden, &g_gate_logit)?;
    add_bias_grad(&mut g.gate_b, &g_gate_logit);
    let via_gate = head.gate_w.matvec(&g_gate_logit)?;
    g_hidden.iter_mut().zip(&via_gate).for_each(|(a, b)| *a += b);

    g.reduce_w.add_outer(&ws.dropped, &g_hidden)?;
    add_bias_grad(&mut g.reduce_b, &g_hidden);
    let mut g_pooled = head.reduce_w.matvec(&g_hidden)?;
    if let Some(mask) = &ws.mask {
        g_pooled.iter_mut().zip(mask).for_each(|(a, s)| *a *= s);
    }

    let split = model.visual.cfg.output_dim();
    accumulate_pool_backward(&g_pooled[..split], &ws.visual, &model.visual, &mut grads.visual, false)?;
    accumulate_pool_backward(&g_pooled[split..], &ws.audio, &model.audio, &mut grads.audio, false)?;
    Ok(())
}

/// Segment probabilities for the "dummy" baseline: every window of the
/// video receives the video-level probabilities unchanged.
pub fn dummy_segment_predict(video_logits: &[f64], windows: usize) -> Vec<Vec<f64>> {
    let p = sigmoid(video_logits);
    vec![p; windows]
}

fn add_bias(v: &mut [f64], b: &Matrix) {
    v.iter_mut().zip(b.data()).for_each(|(x, bi)| *x += bi);
}

fn add_bias_grad(b: &mut Matrix, g: &[f64]) {
    b.data_mut().iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
}
