//! Finite-difference checks of every hand-written backward pass, run over
//! many random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::{mixture_loss_grad, mod_loss, DistillConfig, MixtureNode};
use crate::model::model_preset;
use crate::nextvlad::{
    nextvlad_pool_backward, nextvlad_pool_forward, video_model_backward, video_model_forward, Mode,
    PoolConfig, PoolParams, VideoModel,
};
use crate::numerics::{bce_with_logits_grad, finite_diff_gradcheck, Matrix, BCE_EPS, GRADCHECK_STEP};
use crate::params::Parameters;

/// Relative error threshold for a pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub suite: String,
    pub tensor: String,
    /// Worst relative error over all seeds.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    fn record(&mut self, suite: &str, tensor: &str, err: f64) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.suite == suite && e.tensor == tensor)
        {
            Some(e) => e.max_rel_err = e.max_rel_err.max(err),
            None => self.entries.push(GradcheckEntry {
                suite: suite.into(),
                tensor: tensor.into(),
                max_rel_err: err,
            }),
        }
    }
}

/// Runs the pool, video model, mixture loss and mixture-of-mixtures suites
/// with the model shapes of `preset`, seeds `0..seeds`.
pub fn run_gradcheck(preset: &str, seeds: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        seeds,
        step: GRADCHECK_STEP,
        tolerance: GRADCHECK_TOLERANCE,
        entries: Vec::new(),
    };
    let (visual_dim, audio_dim, classes) = match preset {
        "tiny" => (16, 4, 10),
        "desk" => (64, 8, 50),
        other => {
            return Err(Error::Config(format!(
                "gradcheck supports the tiny and desk presets, not `{other}`"
            )))
        }
    };
    let cfg = model_preset(preset, visual_dim, audio_dim, classes)?;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_pool(&mut report, cfg.visual_pool()?, &mut rng)?;
        check_video_model(&mut report, VideoModel::init(cfg, &mut rng)?, &mut rng)?;
        check_mixture(&mut report, classes, &mut rng)?;
        check_mod(&mut report, classes, &mut rng)?;
    }
    Ok(report)
}

fn random_frames(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_labels(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect()
}

/// Checks each tensor of `model` against central differences of `loss`.
fn check_tensors<P, F>(report: &mut GradcheckReport, suite: &str, model: &P, grads: &P, loss: F) -> Result<()>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit(&mut |name, m| tensors.push((name.to_string(), m.data().to_vec())));
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    grads.visit(&mut |_, m| analytic.push(m.data().to_vec()));
    for (t, (name, values)) in tensors.iter().enumerate() {
        let err = finite_diff_gradcheck(
            |x| {
                let mut probe = model.clone();
                let mut idx = 0;
                probe.visit_mut(&mut |_, m| {
                    if idx == t {
                        m.data_mut().copy_from_slice(x);
                    }
                    idx += 1;
                });
                loss(&probe)
            },
            values,
            &analytic[t],
            GRADCHECK_STEP,
        )?;
        report.record(suite, name, err);
    }
    Ok(())
}

fn check_pool(report: &mut GradcheckReport, cfg: PoolConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let params = PoolParams::init(cfg, rng);
    let frames = random_frames(rng.random_range(3..9), cfg.input_dim, rng);
    let r = random_vec(cfg.output_dim(), 1.0, rng);
    let objective = |p: &PoolParams, x: &Matrix| -> Result<f64> {
        let (out, _) = nextvlad_pool_forward(x, p)?;
        Ok(out.iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let (_, ws) = nextvlad_pool_forward(&frames, &params)?;
    let grads = nextvlad_pool_backward(&r, &ws, &params)?;
    check_tensors(report, "pool", &params, &grads.params, |p| objective(p, &frames))?;
    let err = finite_diff_gradcheck(
        |x| objective(&params, &Matrix::new(frames.rows(), frames.cols(), x.to_vec())?),
        frames.data(),
        grads.frames.data(),
        GRADCHECK_STEP,
    )?;
    report.record("pool", "frames", err);
    Ok(())
}

fn check_video_model(report: &mut GradcheckReport, mut model: VideoModel, rng: &mut ChaCha8Rng) -> Result<()> {
    model.head.dropout_rate = 0.5;
    let frames = rng.random_range(3..9);
    let visual = random_frames(frames, model.cfg.visual_dim, rng);
    let audio = random_frames(frames, model.cfg.audio_dim, rng);
    let y = random_labels(model.cfg.class_count, rng);
    let mask_seed: u64 = rng.random();
    // the same mask seed on every evaluation keeps the dropout mask fixed
    let objective = |m: &VideoModel| -> Result<(f64, Vec<f64>, crate::nextvlad::VideoWorkspace)> {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (z, ws) = video_model_forward(&visual, &audio, m, Mode::Train, &mut mask_rng)?;
        let (loss, g) = bce_with_logits_grad(&y, &z, BCE_EPS)?;
        Ok((loss, g, ws))
    };
    let (_, g, ws) = objective(&model)?;
    let mut grads = model.zeros_like();
    video_model_backward(&g, &ws, &model, &mut grads)?;
    check_tensors(report, "video_model", &model, &grads, |m| objective(m).map(|o| o.0))
}

fn check_mixture(report: &mut GradcheckReport, classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let m = 3;
    let children: Vec<Vec<f64>> = (0..m).map(|_| random_vec(classes, 3.0, rng)).collect();
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let weights: Vec<f64> = raw.iter().map(|w| w / raw.iter().sum::<f64>()).collect();
    let y = random_labels(classes, rng);
    let distill = DistillConfig::new(rng.random_range(1.0..20.0))?;
    let refs: Vec<&[f64]> = children.iter().map(|c| c.as_slice()).collect();
    let (_, grads) = mixture_loss_grad(&y, &refs, &weights, &distill)?;
    for c in 0..m {
        let err = finite_diff_gradcheck(
            |x| {
                let mut refs: Vec<&[f64]> = children.iter().map(|c| c.as_slice()).collect();
                refs[c] = x;
                Ok(mixture_loss_grad(&y, &refs, &weights, &distill)?.0.total)
            },
            &children[c],
            &grads[c],
            GRADCHECK_STEP,
        )?;
        report.record("mixture_loss", &format!("child{c}"), err);
    }
    Ok(())
}

fn check_mod(report: &mut GradcheckReport, classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let tree = MixtureNode::uniform(&[4, 3]);
    let leaves: Vec<Vec<f64>> = (0..12).map(|_| random_vec(classes, 3.0, rng)).collect();
    let y = random_labels(classes, rng);
    let distill = DistillConfig::new(rng.random_range(1.0..20.0))?;
    let refs: Vec<&[f64]> = leaves.iter().map(|c| c.as_slice()).collect();
    let out = mod_loss(&y, &tree, &refs, &distill)?;
    let mut worst = 0.0f64;
    for l in 0..leaves.len() {
        let err = finite_diff_gradcheck(
            |x| {
                let mut refs: Vec<&[f64]> = leaves.iter().map(|c| c.as_slice()).collect();
                refs[l] = x;
                Ok(mod_loss(&y, &tree, &refs, &distill)?.total)
            },
            &leaves[l],
            &out.leaf_grads[l],
            GRADCHECK_STEP,
        )?;
        worst = worst.max(err);
    }
    report.record("mod_loss", "leaves", worst);
    Ok(())
}
