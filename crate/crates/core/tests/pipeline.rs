use polyseg::checkpoint::load_checkpoint;
use polyseg::data::{generate_synthetic, Split, SplitManifest};
use polyseg::layers::{conv2d, transposed_conv2d, Conv2dParams};
use polyseg::model::{ModelKind, ModelSpec};
use polyseg::saliency::{guided_backprop, saliency_intensity, SaliencyTarget};
use polyseg::train::{evaluate, train, TrainConfig, TrainRun, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use polyseg::uncertainty::{mc_predict, UncertaintyConfig};
use polyseg::{Rng, Tensor};

#[test]
fn batched_convolutions_match_per_sample() {
    let mut rng = Rng::new(1);
    let x = Tensor::<f64>::uniform(&[3, 2, 8, 8], -1.0, 1.0, &mut rng);
    let conv = Conv2dParams::new(
        Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4], -1.0, 1.0, &mut rng),
        2,
        1,
    )
    .unwrap();
    let up = Conv2dParams::new(
        Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4], -1.0, 1.0, &mut rng),
        2,
        1,
    )
    .unwrap();
    type Layer = fn(&Tensor<f64>, &Conv2dParams<f64>) -> polyseg::Result<Tensor<f64>>;
    for (layer, p) in [(conv2d as Layer, &conv), (transposed_conv2d as Layer, &up)] {
        let batched = layer(&x, p).unwrap();
        for i in 0..3 {
            let xi = x.outer(i).unwrap();
            let (c, h, w) = (xi.shape()[0], xi.shape()[1], xi.shape()[2]);
            let single = layer(&xi.reshape(&[1, c, h, w]).unwrap(), p).unwrap();
            assert_eq!(batched.outer(i).unwrap().data(), single.data(), "sample {i}");
        }
    }
}

#[test]
fn train_save_load_inspect() {
    let samples = generate_synthetic(20, (32, 32), &mut Rng::new(2)).unwrap();
    let manifest = SplitManifest::by_patient(&samples, 5, 5).unwrap();
    let pick = |split: Split| -> Vec<_> {
        let names = manifest.names(split);
        samples.iter().filter(|s| names.contains(&s.name.as_str())).cloned().collect()
    };
    let (train_set, val_set, test_set) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let spec = ModelSpec {
        base_width: 2,
        input_size: (32, 32),
        ..ModelSpec::new(ModelKind::Esegnet)
    };
    let cfg = TrainConfig {
        batch_size: 5,
        max_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = TrainRun {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainRun::default()
    };
    let outcome = train(&spec, &train_set, &val_set, &cfg, run).unwrap();
    assert_eq!(outcome.log.len(), 3);
    assert!(!outcome.stopped_early);

    let best = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.to_bytes(), outcome.best.to_bytes());
    assert_eq!(load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap().step_count, 4);
    assert_eq!(std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap().lines().count(), 3);

    // The logged validation metrics of the best epoch are reproducible from
    // the saved checkpoint.
    let best_epoch = best.train_state["epoch"].item() as usize;
    let again = evaluate(&best.params, &best.spec, &val_set).unwrap();
    assert_eq!(again, outcome.log[best_epoch].val);
    assert_eq!(again.iou_polyp, outcome.log.last().unwrap().best_val_iou);

    let test = evaluate(&best.params, &best.spec, &test_set).unwrap();
    assert!((0.0..=1.0).contains(&test.iou_mean));
    let image = &test_set[0].image;
    let r = mc_predict(&best.params, &best.spec, image, &UncertaintyConfig { samples: 4 }, &mut Rng::new(4)).unwrap();
    assert_eq!(r.std_map.shape(), [32, 32]);
    assert!(r.std_map.data().iter().all(|&s| (0.0..=0.5).contains(&s)));
    let m = guided_backprop(&best.params, &best.spec, image, SaliencyTarget::PolypChannel).unwrap();
    let intensity = saliency_intensity(&m);
    assert!(intensity.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
