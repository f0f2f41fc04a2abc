//! Monte Carlo dropout predictive distribution and standard-deviation maps.

use std::path::Path;

use crate::data::write_gray;
use crate::error::{invalid, shape_err, Result};
use crate::graph::Graph;
use crate::model::{forward, ForwardMode, ForwardOptions, ModelParams, ModelSpec};
use crate::rng::Rng;
use crate::tensor::{IntTensor, Tensor};

/// Largest number of stochastic passes stacked into one forward batch.
const PASS_CHUNK: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UncertaintyConfig {
    /// Number of stochastic forward passes.
    pub samples: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig { samples: 10 }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(invalid!("the number of MC samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    /// Mean softmax over the passes, `[K, H, W]`.
    pub mean_probs: Tensor<f64>,
    /// Population standard deviation of the polyp probability, `[H, W]`.
    pub std_map: Tensor<f64>,
    /// Argmax of `mean_probs`, ties to background.
    pub label_map: IntTensor,
    pub samples_used: usize,
}

/// Softmax probabilities of `samples` dropout passes over one image
/// `[3, H, W]`, returned as `[T, K, H, W]`. Batchnorm uses running
/// statistics; only the dropout masks vary between passes.
pub fn mc_samples(params: &ModelParams, spec: &ModelSpec, x: &Tensor, samples: usize, rng: &mut Rng) -> Result<Tensor<f64>> {
    UncertaintyConfig { samples }.validate()?;
    let x = single_image(x)?;
    let mut probs = Vec::new();
    let mut shape = Vec::new();
    let mut dropout_layers = 0;
    let mut done = 0;
    while done < samples {
        let n = PASS_CHUNK.min(samples - done);
        let mut chunk_rng = rng.fork(done as u64);
        let batch = Tensor::stack(&vec![&x; n])?;
        let mut g = Graph::new();
        let xi = g.input(batch);
        let out = forward(&mut g, params, spec, xi, ForwardOptions::new(ForwardMode::McSample), &mut chunk_rng)?;
        dropout_layers = out.dropout_layers;
        let logits = g.value(out.logits)?;
        let (_, k, h, w) = logits.dims4()?;
        shape = vec![samples, k, h, w];
        probs.extend(softmax_channels(logits.data(), n, k, h * w));
        done += n;
    }
    if samples > 1 && (dropout_layers == 0 || spec.dropout_rate == 0.0) {
        log::warn!("model has no active dropout; all {samples} MC samples are identical");
    }
    Tensor::new(&shape, probs)
}

/// Per-pixel mean and population standard deviation over the leading axis
/// of `[T, K, H, W]` probabilities.
pub fn aggregate(samples: &Tensor<f64>) -> Result<PredictiveResult> {
    let (t, k, h, w) = samples.dims4()?;
    if t == 0 {
        return Err(invalid!("cannot aggregate zero samples"));
    }
    if k < 2 {
        return Err(shape_err!("expected at least 2 classes, got {k}"));
    }
    let size = k * h * w;
    let plane = h * w;
    // Deviations from the first pass, so identical passes give exactly
    // zero spread and a mean equal to that pass.
    let data = samples.data();
    let first = &data[..size];
    let mut shift = vec![0.0f64; size];
    for s in data.chunks_exact(size) {
        for ((m, &v), &f) in shift.iter_mut().zip(s).zip(first) {
            *m += v - f;
        }
    }
    shift.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0f64; plane];
    for s in data.chunks_exact(size) {
        for (p, v) in var.iter_mut().enumerate() {
            let d = (s[plane + p] - first[plane + p]) - shift[plane + p];
            *v += d * d;
        }
    }
    let mean: Vec<f64> = first.iter().zip(&shift).map(|(f, d)| f + d).collect();
    let std: Vec<f64> = var.iter().map(|v| (v / t as f64).sqrt()).collect();
    let mean_probs = Tensor::new(&[k, h, w], mean)?;
    let label_map = crate::model::argmax_labels(&mean_probs.clone().reshape(&[1, k, h, w])?)?;
    Ok(PredictiveResult {
        mean_probs,
        std_map: Tensor::new(&[h, w], std)?,
        label_map: IntTensor::new(&[h, w], label_map.data().to_vec())?,
        samples_used: t,
    })
}

/// Monte Carlo dropout prediction for one image `[3, H, W]`.
pub fn mc_predict(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &Tensor,
    cfg: &UncertaintyConfig,
    rng: &mut Rng,
) -> Result<PredictiveResult> {
    cfg.validate()?;
    aggregate(&mc_samples(params, spec, x, cfg.samples, rng)?)
}

/// Grey level of a standard deviation: `round(255 * min(std / 0.5, 1))`,
/// halves rounded up.
pub fn uncertainty_level(std: f64) -> u8 {
    let v = 255.0 * (std / 0.5).clamp(0.0, 1.0);
    (v + 0.5).floor() as u8
}

pub fn uncertainty_pixels(r: &PredictiveResult) -> Vec<u8> {
    r.std_map.data().iter().map(|&s| uncertainty_level(s)).collect()
}

pub fn render_uncertainty(r: &PredictiveResult, path: &Path) -> Result<()> {
    let s = r.std_map.shape();
    write_gray(path, s[0], s[1], uncertainty_pixels(r))
}

/// Accepts `[3, H, W]` or `[1, 3, H, W]`.
pub(crate) fn single_image(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [_, _, _] => Ok(x.clone()),
        [1, c, h, w] => x.clone().reshape(&[*c, *h, *w]),
        s => Err(shape_err!("expected one image [3, H, W], got {s:?}")),
    }
}

fn softmax_channels(logits: &[f32], n: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * k * plane];
    for i in 0..n {
        let base = i * k * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..k).map(|c| logits[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..k {
                let e = (logits[at(c)] as f64 - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in 0..k {
                out[at(c)] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, forward_logits, ModelKind};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn setup(kind: ModelKind, rate: f64) -> (ModelSpec, ModelParams, Tensor) {
        let spec = ModelSpec {
            base_width: 2,
            input_size: (32, 32),
            dropout_rate: rate,
            ..ModelSpec::new(kind)
        };
        let params = build(&spec, &mut Rng::new(3)).unwrap();
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut Rng::new(8));
        (spec, params, x)
    }

    fn assert_rows_sum_to_one(r: &PredictiveResult) {
        let plane = 32 * 32;
        let m = r.mean_probs.data();
        for p in 0..plane {
            assert!((m[p] + m[plane + p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_sample_has_zero_std() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let (spec, params, x) = setup(kind, 0.5);
            let one = mc_samples(&params, &spec, &x, 1, &mut Rng::new(4)).unwrap();
            let r = mc_predict(&params, &spec, &x, &UncertaintyConfig { samples: 1 }, &mut Rng::new(4)).unwrap();
            assert!(r.std_map.data().iter().all(|&s| s == 0.0));
            assert_eq!(r.mean_probs.data(), one.data());
            assert_eq!(r.samples_used, 1);
            assert_rows_sum_to_one(&r);
        }
    }

    #[test]
    fn no_dropout_matches_eval_softmax() {
        let (spec, params, x) = setup(ModelKind::Esegnet, 0.0);
        let r = mc_predict(&params, &spec, &x, &UncertaintyConfig::default(), &mut Rng::new(1)).unwrap();
        assert!(r.std_map.data().iter().all(|&s| s == 0.0));
        let logits = forward_logits(&params, &spec, &x.reshape(&[1, 3, 32, 32]).unwrap(), ForwardMode::Eval, &mut Rng::new(0)).unwrap();
        let eval = softmax_channels(logits.data(), 1, 2, 32 * 32);
        for (a, b) in r.mean_probs.data().iter().zip(&eval) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ten_samples_match_two_pass_oracle() {
        let (spec, params, x) = setup(ModelKind::Efcn8, 0.5);
        let cfg = UncertaintyConfig::default();
        let r = mc_predict(&params, &spec, &x, &cfg, &mut Rng::new(21)).unwrap();
        let s = mc_samples(&params, &spec, &x, 10, &mut Rng::new(21)).unwrap();
        let plane = 32 * 32;
        let sample = |t: usize, c: usize, p: usize| s.data()[(t * 2 + c) * plane + p];
        let mut any_spread = false;
        for p in 0..plane {
            for c in 0..2 {
                let mean: f64 = (0..10).map(|t| sample(t, c, p)).sum::<f64>() / 10.0;
                assert!((r.mean_probs.data()[c * plane + p] - mean).abs() < 1e-6);
            }
            let vals: Vec<f64> = (0..10).map(|t| sample(t, 1, p)).collect();
            let mean = vals.iter().sum::<f64>() / 10.0;
            let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0).sqrt();
            assert!((r.std_map.data()[p] - std).abs() < 1e-6);
            any_spread |= std > 1e-4;
        }
        assert!(any_spread, "dropout produced identical passes");
        assert_rows_sum_to_one(&r);
        for (i, &l) in r.label_map.data().iter().enumerate() {
            assert_eq!(l, u8::from(r.mean_probs.data()[plane + i] > r.mean_probs.data()[i]));
        }
    }

    #[test]
    fn repeated_calls_are_deterministic() {
        let (spec, params, x) = setup(ModelKind::Esegnet, 0.5);
        let cfg = UncertaintyConfig { samples: 12 };
        let a = mc_predict(&params, &spec, &x, &cfg, &mut Rng::new(2)).unwrap();
        let b = mc_predict(&params, &spec, &x, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples_used, 12);
        assert!(mc_predict(&params, &spec, &x, &UncertaintyConfig { samples: 0 }, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn rendering_scale() {
        assert_eq!(uncertainty_level(0.0), 0);
        assert_eq!(uncertainty_level(0.5), 255);
        assert_eq!(uncertainty_level(0.25), 128);
        assert_eq!(uncertainty_level(0.7), 255);
        let r = PredictiveResult {
            mean_probs: Tensor::zeros(&[2, 2, 2]),
            std_map: Tensor::zeros(&[2, 2]),
            label_map: IntTensor::zeros(&[2, 2]),
            samples_used: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.png");
        render_uncertainty(&r, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn aggregate_properties(
            t in 1usize..8,
            logits in prop::collection::vec(-6.0f64..6.0, 8 * 2 * 4),
            seed in 0u64..1000,
        ) {
            let n = t * 2 * 4;
            let raw: Vec<f32> = logits[..n].iter().map(|&v| v as f32).collect();
            let probs = Tensor::new(&[t, 2, 2, 2], softmax_channels(&raw, t, 2, 4)).unwrap();
            let r = aggregate(&probs).unwrap();
            for p in 0..4 {
                prop_assert!((r.mean_probs.data()[p] + r.mean_probs.data()[4 + p] - 1.0).abs() < 1e-6);
                prop_assert!((0.0..=0.5).contains(&r.std_map.data()[p]));
            }
            // Reordering the passes leaves the statistics unchanged.
            let mut order: Vec<usize> = (0..t).collect();
            Rng::new(seed).shuffle(&mut order);
            let shuffled: Vec<f64> = order.iter().flat_map(|&i| probs.data()[i * 8..(i + 1) * 8].to_vec()).collect();
            let r2 = aggregate(&Tensor::new(&[t, 2, 2, 2], shuffled).unwrap()).unwrap();
            for (a, b) in r.std_map.data().iter().zip(r2.std_map.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(r.label_map == r2.label_map);
        }
    }
}
