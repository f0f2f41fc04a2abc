//! Trains one architecture on a freshly generated synthetic set and reports
//! held-out metrics.
//!
//! Usage: `train_synth <efcn8|esegnet> [max_epochs] [base_width]`

use std::time::Instant;

use polyseg::data::{generate_synthetic, Dataset, Split, SplitManifest};
use polyseg::model::{ModelKind, ModelSpec};
use polyseg::train::{evaluate, train, TrainConfig, TrainRun};
use polyseg::Rng;

fn main() -> polyseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ModelKind = args.next().unwrap_or_else(|| "efcn8".into()).parse()?;
    let max_epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let base = args.next().and_then(|s| s.parse().ok()).unwrap_or(16);

    let samples = generate_synthetic(600, (64, 64), &mut Rng::new(0))?;
    let manifest = SplitManifest::by_patient(&samples, 50, 50)?;
    let ds = Dataset { samples, manifest };
    let spec = ModelSpec {
        base_width: base,
        ..ModelSpec::new(kind)
    };
    let cfg = TrainConfig {
        max_epochs,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut last = t0;
    let test = ds.split(Split::Test)?;
    let mut report = |epoch: usize, p: &polyseg::model::ModelParams| {
        let r = evaluate(p, &spec, &ds.split(Split::Val)?)?;
        let now = Instant::now();
        println!(
            "epoch {epoch:3} val iou_mean {:.4} polyp {:.4} epoch_time {:.1}s total {:.1}s",
            r.iou_mean,
            r.iou_polyp,
            (now - last).as_secs_f64(),
            (now - t0).as_secs_f64()
        );
        last = now;
        Ok(r)
    };
    let out = train(
        &spec,
        &ds.split(Split::Train)?,
        &ds.split(Split::Val)?,
        &cfg,
        TrainRun {
            validator: Some(&mut report),
            ..TrainRun::default()
        },
    )?;
    let r = evaluate(&out.best.params, &spec, &test)?;
    println!("{} test {} elapsed {:.1}s", kind.name(), r.to_json(), t0.elapsed().as_secs_f64());
    Ok(())
}
