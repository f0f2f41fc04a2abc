use polyseg::checkpoint::Checkpoint;
use polyseg::model::{build, ModelKind, ModelSpec};
use polyseg::Rng;
use polyseg_web::Session;

#[test]
fn sample_and_augmentation() {
    let mut s = Session::new(3, 64).unwrap();
    assert_eq!(s.size(), (64, 64));
    let image = s.image_rgba();
    assert_eq!(image.len(), 64 * 64 * 4);
    assert!(image.chunks(4).all(|p| p[3] == 255));
    assert_eq!(image, Session::new(3, 64).unwrap().image_rgba());
    assert_ne!(s.mask_rgba(), image, "mask overlay tints the polyp");

    s.augment(1).unwrap();
    let augmented = s.image_rgba();
    assert_ne!(augmented, image);
    s.augment(1).unwrap();
    assert_eq!(s.image_rgba(), augmented);
    s.reset();
    assert_eq!(s.image_rgba(), image);
    assert!(Session::new(3, 50).is_err());
}

#[test]
fn maps_need_a_model() {
    let mut s = Session::new(4, 64).unwrap();
    assert_eq!(s.prediction_rgba().unwrap_err(), "no model loaded");
    assert!(s.random_model("unet", 4, 0).is_err());
    let summary = s.random_model("esegnet", 4, 0).unwrap();
    assert!(summary.starts_with("esegnet base 4"), "{summary}");
    assert_eq!(s.prediction_rgba().unwrap().len(), 64 * 64 * 4);
    let unc = s.uncertainty_rgba(3, 0).unwrap();
    assert_eq!(unc, s.uncertainty_rgba(3, 0).unwrap());
    assert!(unc.chunks(4).all(|p| p[0] == p[1] && p[1] == p[2]));
    assert_eq!(s.saliency_rgba("channel").unwrap().len(), 64 * 64 * 4);
    assert!(s.saliency_rgba("pixel:99,0").is_err());
    assert!(s.saliency_rgba("everything").is_err());
}

#[test]
fn loads_checkpoint_bytes() {
    let spec = ModelSpec {
        base_width: 2,
        dropout_rate: 0.0,
        ..ModelSpec::new(ModelKind::Efcn8)
    };
    let bytes = Checkpoint::new(spec.clone(), build(&spec, &mut Rng::new(2)).unwrap(), 0).to_bytes();
    let mut s = Session::new(5, 64).unwrap();
    assert!(s.load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(s.load_checkpoint(&bytes).unwrap().starts_with("efcn8 base 2 dropout 0"));
    let unc = s.uncertainty_rgba(4, 1).unwrap();
    assert!(unc.chunks(4).all(|p| p[..3] == [0, 0, 0]), "no dropout, no spread");
}
