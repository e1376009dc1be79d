mod common;

use binopt::autograd::Tape;
use binopt::binary::{BinarizeConfig, ForwardCtx};
use binopt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use binopt::config::DatasetConfig;
use binopt::data::{encode_idx_images, encode_idx_labels, load_idx, synth_dataset, SynthKind};
use binopt::model::{accuracy, ArchConfig, Network};
use binopt::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use binopt::train::{self, compare_optimizers, comparison_runs, Trainer};
use binopt::{Error, Tensor};
use common::{rng, tiny_config};
use serde_json::json;

fn two_step(order: &str) -> serde_json::Value {
    json!({"phases": {"type": "two_step", "order": order, "step1_wd": 5e-6, "step2_wd": 0.0,
        "step1_iters": 12, "step2_iters": 12}})
}

#[test]
fn one_image_idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&img, encode_idx_images(2, 2, &[0, 255, 0, 255])).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[1])).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    assert_eq!(d.images().shape(), &[1, 1, 2, 2]);
    // Pixels {0, 1} with mean ½ and std ½ standardize to ∓1.
    assert_eq!(d.images().data(), &[-1.0, 1.0, -1.0, 1.0]);
    assert_eq!(d.labels(), &[1]);
    let via_config = DatasetConfig::IdxFiles { images: img, labels: lab }.load().unwrap();
    assert_eq!(via_config.images(), d.images());
}

#[test]
fn malformed_idx_fixtures_give_named_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good_img = encode_idx_images(3, 3, &[7; 18]);
    let good_lab = encode_idx_labels(&[0, 1]);
    let mut wrong_magic = good_img.clone();
    wrong_magic[2] = 0x09;
    let cases: Vec<(&str, Vec<u8>, Vec<u8>)> = vec![
        ("magic", wrong_magic, good_lab.clone()),
        ("short_header", good_img[..7].to_vec(), good_lab.clone()),
        ("short_body", good_img[..20].to_vec(), good_lab.clone()),
        ("label_magic", good_img.clone(), good_img.clone()),
        ("short_labels", good_img.clone(), good_lab[..9].to_vec()),
        ("count_mismatch", good_img.clone(), encode_idx_labels(&[0, 1, 2])),
    ];
    for (name, img, lab) in cases {
        let (ip, lp) = (dir.path().join(format!("{name}.img")), dir.path().join(format!("{name}.lab")));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        let ok = match name {
            "magic" => matches!(err, Error::BadMagic { file: "idx images", .. }),
            "short_header" => matches!(err, Error::Truncated { section: "idx images header" }),
            "short_body" => matches!(err, Error::Truncated { section: "idx images body" }),
            "label_magic" => matches!(err, Error::BadMagic { file: "idx labels", .. }),
            "short_labels" => matches!(err, Error::Truncated { section: "idx labels body" }),
            _ => matches!(err, Error::Consistency(_)),
        };
        assert!(ok, "{name}: {err}");
    }
    let missing = load_idx(&dir.path().join("nope"), &dir.path().join("nope")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_config(two_step("BABW"))).unwrap();
    t.run_steps(15).unwrap();
    let ckpt = t.checkpoint();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().to_bytes(), ckpt.to_bytes());
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let t = Trainer::new(tiny_config(json!({}))).unwrap();
    let other = tiny_config(json!({"arch": {"channels": 6}}));
    let err = Trainer::resume(other, t.checkpoint()).err().unwrap();
    assert!(matches!(err, Error::DigestMismatch { .. }));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let config = tiny_config(two_step("BABW"));
    let full = train::train(config.clone()).unwrap();
    // Mid-phase, exactly at the phase boundary, and inside the second phase.
    for split in [5, 12, 17] {
        let mut t = Trainer::new(config.clone()).unwrap();
        t.run_steps(split).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let resumed = Trainer::resume(config.clone(), Checkpoint::from_bytes(&bytes).unwrap())
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(resumed.metrics, full.metrics, "split {split}");
        assert_eq!(resumed.final_checkpoint.to_bytes(), full.final_checkpoint.to_bytes(), "split {split}");
    }
}

#[test]
fn identical_config_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str| {
        let mut c = tiny_config(json!({}));
        c.output_dir = Some(dir.path().join(sub));
        train::train(c).unwrap();
        std::fs::read(dir.path().join(sub).join("metrics.csv")).unwrap()
    };
    let a = read("a");
    assert_eq!(a, read("b"));
    assert!(dir.path().join("a/final.ckpt").exists() && dir.path().join("a/summary.json").exists());
}

#[test]
fn two_step_second_phase_starts_from_first_phase_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(two_step("BABW"));
    config.output_dir = Some(dir.path().to_owned());
    let mut t = Trainer::new(config.clone()).unwrap();
    t.run_steps(12).unwrap();
    let step1_end: Vec<Tensor> = t.net.params().into_iter().cloned().collect();
    assert!(!t.net.binarization().binarize_weights && t.net.binarization().binarize_activations);

    let outcome = train::train(config).unwrap();
    let step1 = &outcome.phase_checkpoints[0];
    assert_eq!(step1.params, step1_end);
    assert!(!step1.binarize.binarize_weights);
    assert_eq!(load_checkpoint(&dir.path().join("step1.ckpt")).unwrap().params, step1_end);
    assert_eq!(outcome.final_checkpoint.binarize, BinarizeConfig::BINARY);
    let phases: Vec<&str> = outcome.summary.phases.iter().map(|p| p.phase.as_str()).collect();
    assert_eq!(phases, ["step1", "step2"]);

    // The first step of step 2 begins from step-1 weights: resuming from the
    // phase checkpoint reproduces the full run.
    let resumed = Trainer::resume(tiny_config(two_step("BABW")), step1.clone()).unwrap().run().unwrap();
    assert_eq!(resumed.final_checkpoint.params, outcome.final_checkpoint.params);
}

#[test]
fn bwba_binarizes_weights_first() {
    let t = Trainer::new(tiny_config(two_step("BWBA"))).unwrap();
    let b = t.net.binarization();
    assert!(b.binarize_weights && !b.binarize_activations);
}

#[test]
fn zero_gradient_and_zero_decay_leave_weights_unchanged() {
    let mut r = rng(0);
    let arch = ArchConfig {
        in_channels: 2,
        height: 4,
        width: 4,
        num_classes: 3,
        channels: 4,
        blocks: 2,
        latent_init_bound: None,
    };
    let mut net = Network::new(arch, BinarizeConfig::BINARY, &mut r).unwrap();
    let before = net.clone();
    let sizes: Vec<usize> = net.params().iter().map(|t| t.numel()).collect();
    for kind in OptimizerKind::ALL {
        let mut opt = Optimizer::new(OptimizerConfig::training_defaults(kind), &sizes).unwrap();
        let zeros: Vec<Tensor> = net.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mask = net.decay_mask();
        for _ in 0..10 {
            opt.step(&mut net.params_mut(), &zeros, &mask).unwrap();
        }
        assert_eq!(net, before, "{kind}");
    }
}

#[test]
fn real_valued_network_fits_blobs() {
    let data = synth_dataset(SynthKind::Blobs, 40, 3, 0.2, 4, 2).unwrap();
    let arch = ArchConfig {
        in_channels: 2,
        height: 4,
        width: 4,
        num_classes: 3,
        channels: 8,
        blocks: 2,
        latent_init_bound: None,
    };
    let mut r = rng(5);
    let mut net = Network::new(arch, BinarizeConfig::REAL, &mut r).unwrap();
    let sizes: Vec<usize> = net.params().iter().map(|t| t.numel()).collect();
    let mut opt = Optimizer::new(OptimizerConfig::training_defaults(OptimizerKind::Adam).with_lr(0.01), &sizes).unwrap();
    let mut cursor = binopt::data::BatchCursor::new(data.len(), &mut r);
    for _ in 0..300 {
        let idx = cursor.next_batch(16, &mut r);
        let (x, y) = data.batch(&idx).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &x, &ForwardCtx::train()).unwrap();
        let l = tape.softmax_cross_entropy(out.logits, &y).unwrap();
        tape.backward(l).unwrap();
        let grads: Vec<Tensor> = out
            .params
            .iter()
            .zip(net.params())
            .map(|(v, p)| Tensor::new(p.shape(), tape.grad_or_zeros(*v)).unwrap())
            .collect();
        let mask = net.decay_mask();
        opt.step(&mut net.params_mut(), &grads, &mask).unwrap();
    }
    let logits = net.predict_logits(data.images()).unwrap();
    let acc = accuracy(&logits, data.labels());
    assert!(acc > 0.99, "train accuracy {acc}");
}

#[test]
fn same_optimizer_twice_gives_identical_rows() {
    let rows = compare_optimizers(&tiny_config(json!({})), &[(OptimizerKind::Adam, 0.0025), (OptimizerKind::Adam, 0.0025)]).unwrap();
    assert_eq!(rows[0], rows[1]);
    assert!(compare_optimizers(&tiny_config(json!({})), &[(OptimizerKind::Sgd, 0.1)]).is_err());
}

#[test]
fn sweep_writes_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(json!({"iterations": 4, "log_interval": 2}));
    c.output_dir = Some(dir.path().to_owned());
    let runs = comparison_runs(&[OptimizerKind::Adam, OptimizerKind::Sgd], true);
    assert_eq!(runs.len(), 7);
    let rows = compare_optimizers(&c, &runs).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + runs.len());
    for ((line, row), (kind, lr)) in lines[1..].iter().zip(&rows).zip(&runs) {
        assert_eq!(*line, row.csv_row());
        assert!(line.starts_with(&format!("{kind},{lr},")));
    }
    for (i, (kind, lr)) in runs.iter().enumerate() {
        assert!(dir.path().join(format!("{i:02}_{kind}_lr{lr}")).join("metrics.csv").exists());
    }
}

#[test]
fn seed_env_override_applies() {
    let mut c = tiny_config(json!({}));
    std::env::set_var(binopt::config::SEED_ENV, "41");
    c.apply_env().unwrap();
    std::env::remove_var(binopt::config::SEED_ENV);
    assert_eq!(c.seed, 41);
}
