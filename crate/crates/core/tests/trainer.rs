use modvlad::dataset::{generate_corpus, CorpusSpec};
use modvlad::model::{model_preset, Topology};
use modvlad::params::Parameters;
use modvlad::trainer::{
    finetune, pretrain, segment_examples, video_examples, Checkpoint, Stage, TrainConfig,
};
use modvlad::Error;

fn tiny_setup(tree: Vec<usize>) -> (modvlad::dataset::GeneratedCorpus, Topology) {
    let spec = CorpusSpec::preset("tiny").unwrap();
    let data = generate_corpus(&spec).unwrap();
    let h = data.train.header;
    let topology = Topology {
        model: model_preset("tiny", h.visual_dim as usize, h.audio_dim as usize, h.class_count as usize)
            .unwrap(),
        tree,
        learnable_weights: false,
    };
    (data, topology)
}

#[test]
fn pretraining_reduces_the_loss() {
    let (data, topology) = tiny_setup(vec![]);
    let examples = video_examples(&data.train);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.epochs = 6;
    let out = pretrain(&examples, topology, &cfg).unwrap();
    let n = out.step_losses.len();
    let head: f64 = out.step_losses[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = out.step_losses[n - 3..].iter().sum::<f64>() / 3.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    assert_eq!(out.checkpoint.step as usize, n);
    assert_eq!(out.checkpoint.examples_seen as usize, examples.len() * cfg.epochs);
}

#[test]
fn training_is_deterministic_and_worker_count_invariant() {
    let (data, topology) = tiny_setup(vec![3]);
    let examples = video_examples(&data.train);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 6;
    cfg.temperature = 4.0;
    let a = pretrain(&examples, topology.clone(), &cfg).unwrap();
    let b = pretrain(&examples, topology.clone(), &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    cfg.workers = 3;
    let c = pretrain(&examples, topology, &cfg).unwrap();
    let (x, y) = (a.checkpoint.model.flatten(), c.checkpoint.model.flatten());
    let max = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(max <= 1e-5, "workers changed parameters by {max}");
}

#[test]
fn zero_step_finetune_keeps_parameters() {
    let (data, topology) = tiny_setup(vec![]);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 2;
    let pre = pretrain(&video_examples(&data.train), topology, &cfg).unwrap();
    let seg = segment_examples(&data.finetune, &data.finetune_labels).unwrap();
    let mut ft = TrainConfig::preset("tiny", Stage::Finetune).unwrap();
    ft.epochs = 0;
    let out = finetune(&pre.checkpoint, &seg, &ft).unwrap();
    assert_eq!(out.checkpoint.model, pre.checkpoint.model);
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn segment_examples_use_window_targets() {
    let (data, _) = tiny_setup(vec![]);
    let seg = segment_examples(&data.finetune, &data.finetune_labels).unwrap();
    assert!(!seg.is_empty());
    for ex in &seg {
        assert!(ex.visual.rows() <= 5 && ex.visual.rows() > 0);
        assert_eq!(ex.visual.rows(), ex.audio.rows());
    }
    assert!(seg.iter().any(|e| e.labels.iter().any(|&y| y == 1.0)));
}

#[test]
fn non_finite_inputs_report_divergence() {
    let (data, topology) = tiny_setup(vec![]);
    let mut examples = video_examples(&data.train);
    for ex in examples.iter_mut() {
        ex.visual.data_mut()[0] = f64::NAN;
    }
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 3;
    match pretrain(&examples, topology, &cfg) {
        Err(Error::Divergence { step: 0, .. }) => {}
        other => panic!("{:?}", other.map(|o| o.step_losses)),
    }
}

#[test]
fn checkpoint_with_optimizer_state_round_trips() {
    let (data, topology) = tiny_setup(vec![2]);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 2;
    let out = pretrain(&video_examples(&data.train), topology, &cfg).unwrap();
    let bytes = out.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn diagnostics_cover_every_node() {
    let (data, topology) = tiny_setup(vec![2, 2]);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 2;
    cfg.temperature = 2.0;
    let out = pretrain(&video_examples(&data.train), topology, &cfg).unwrap();
    assert_eq!(out.diagnostics.len(), 2 * 7);
    let root = &out.diagnostics[0];
    assert_eq!(root.node_path, "root");
    assert!(root.distill_loss > 0.0 && root.reg_loss > 0.0);
    assert_eq!(out.diagnostics[6].node_path, "root/1/1");
    assert_eq!(out.diagnostics[6].distill_loss, 0.0);
}

#[test]
fn four_examples_can_be_memorized() {
    let (data, topology) = tiny_setup(vec![]);
    let examples = video_examples(&data.train)[..4].to_vec();
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.batch_size = 4;
    cfg.max_steps = 2000;
    cfg.dropout_rate = 0.0;
    cfg.l2_penalty = 0.0;
    cfg.lr_decay = 1.0;
    let out = pretrain(&examples, topology, &cfg).unwrap();
    let last = *out.step_losses.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn a_huge_weight_penalty_shrinks_the_weights() {
    let (data, topology) = tiny_setup(vec![]);
    let examples = video_examples(&data.train);
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.max_steps = 40;
    let norm = |l2: f64| {
        let mut c = cfg.clone();
        c.l2_penalty = l2;
        let out = pretrain(&examples, topology.clone(), &c).unwrap();
        out.checkpoint.model.decayed_sum_sq()
    };
    let init = modvlad::model::Ensemble::init(topology.clone(), cfg.seed).unwrap().decayed_sum_sq();
    let (plain, heavy) = (norm(0.0), norm(10.0));
    assert!(heavy < 0.5 * init, "{heavy} vs initial {init}");
    assert!(heavy < plain);
}

#[test]
fn fifty_steps_on_eight_videos_lower_the_loss() {
    let (data, topology) = tiny_setup(vec![]);
    let examples = video_examples(&data.train)[..8].to_vec();
    let mut cfg = TrainConfig::preset("tiny", Stage::Pretrain).unwrap();
    cfg.batch_size = 8;
    cfg.max_steps = 50;
    let out = pretrain(&examples, topology, &cfg).unwrap();
    let first = out.diagnostics.iter().find(|d| d.step == 0).unwrap().label_loss;
    let last = out.diagnostics.iter().rev().find(|d| d.step == 49).unwrap().label_loss;
    assert!(last < first, "label loss {first} -> {last}");
}
