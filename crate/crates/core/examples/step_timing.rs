//! Times one forward+backward training step per architecture.

use std::time::Instant;

use polyseg::model::{build, forward, ForwardOptions, ModelKind, ModelSpec};
use polyseg::{Graph, IntTensor, Rng, Tensor};

fn main() -> polyseg::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
        let spec = ModelSpec::new(kind);
        let mut rng = Rng::new(0);
        let params = build(&spec, &mut rng)?;
        let x = Tensor::uniform(&[batch, 3, 64, 64], 0.0, 1.0, &mut rng);
        let y = IntTensor::zeros(&[batch, 64, 64]);
        for _ in 0..3 {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let out = forward(&mut g, &params, &spec, xi, ForwardOptions::training(), &mut rng)?;
            let t1 = Instant::now();
            let loss = g.softmax_ce(out.logits, y.clone())?;
            let grads = g.backward(loss)?;
            let t2 = Instant::now();
            std::hint::black_box(&grads);
            println!(
                "{} params={} fwd={:?} bwd={:?}",
                kind.name(),
                params.num_parameters(),
                t1 - t0,
                t2 - t1
            );
        }
    }
    Ok(())
}
