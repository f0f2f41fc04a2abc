//! Guided-backpropagation saliency for the polyp class.

use std::path::Path;

use crate::data::write_gray;
use crate::error::{invalid, Error, Result};
use crate::graph::{BackwardOptions, Graph};
use crate::model::{forward, Activation, ForwardMode, ForwardOptions, ModelParams, ModelSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::uncertainty::single_image;

const POLYP: usize = 1;

/// Scalar whose input gradient is visualised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// Sum of polyp logits over pixels predicted as polyp.
    #[default]
    PredictedPolyp,
    /// Sum of polyp logits over the whole image.
    PolypChannel,
    /// Polyp logit of one pixel `(y, x)`.
    Pixel(usize, usize),
}

impl std::str::FromStr for SaliencyTarget {
    type Err = Error;

    /// `predicted`, `channel` or `pixel:Y,X`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(SaliencyTarget::PredictedPolyp),
            "channel" => Ok(SaliencyTarget::PolypChannel),
            _ => {
                let coords = s
                    .strip_prefix("pixel:")
                    .and_then(|c| c.split_once(','))
                    .and_then(|(y, x)| Some((y.trim().parse().ok()?, x.trim().parse().ok()?)));
                match coords {
                    Some((y, x)) => Ok(SaliencyTarget::Pixel(y, x)),
                    None => Err(invalid!("unknown saliency target '{s}' (expected predicted, channel or pixel:Y,X)")),
                }
            }
        }
    }
}

/// Input gradient `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grad: Tensor,
}

#[derive(Default)]
pub struct SaliencyOptions<'a> {
    /// Plain backpropagation instead of the guided ReLU rule.
    pub vanilla: bool,
    /// Replace every ReLU by the identity in the forward pass.
    pub linear: bool,
    /// Sees the gradient leaving every ReLU backward rule.
    pub relu_hook: Option<crate::graph::ReluHook<'a, f32>>,
}

/// Guided-backpropagation input gradient of `target` for one image.
pub fn guided_backprop(params: &ModelParams, spec: &ModelSpec, x: &Tensor, target: SaliencyTarget) -> Result<SaliencyMap> {
    input_gradient(params, spec, x, target, SaliencyOptions::default())
}

/// Input gradient in eval mode with configurable backward rules.
pub fn input_gradient(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &Tensor,
    target: SaliencyTarget,
    opts: SaliencyOptions<'_>,
) -> Result<SaliencyMap> {
    let x = single_image(x)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut g = Graph::new();
    let xi = g.leaf(x.clone().reshape(&[1, c, h, w])?, true);
    let mut fo = ForwardOptions::new(ForwardMode::Eval);
    if opts.linear {
        fo.activation = Activation::Identity;
    }
    let out = forward(&mut g, params, spec, xi, fo, &mut Rng::new(0))?;
    let logits = g.value(out.logits)?;
    let k = logits.shape()[1];
    let plane = h * w;
    let mut weights = Tensor::zeros(logits.shape());
    {
        let (l, wd) = (logits.data(), weights.data_mut());
        let polyp = &mut wd[POLYP * plane..(POLYP + 1) * plane];
        match target {
            SaliencyTarget::PredictedPolyp => {
                let mut any = false;
                for (p, wv) in polyp.iter_mut().enumerate() {
                    let best = (1..k).fold(0, |b, c| if l[c * plane + p] > l[b * plane + p] { c } else { b });
                    if best == POLYP {
                        *wv = 1.0;
                        any = true;
                    }
                }
                if !any {
                    return Err(Error::EmptyTarget(
                        "no pixel is predicted as polyp; use the polyp-channel target instead".into(),
                    ));
                }
            }
            SaliencyTarget::PolypChannel => polyp.fill(1.0),
            SaliencyTarget::Pixel(y, px) => {
                if y >= h || px >= w {
                    return Err(invalid!("target pixel ({y}, {px}) is outside the {h}x{w} image"));
                }
                polyp[y * w + px] = 1.0;
            }
        }
    }
    let objective = g.weighted_sum(out.logits, weights)?;
    let grads = g.backward_with(
        objective,
        BackwardOptions {
            guided: !opts.vanilla,
            relu_hook: opts.relu_hook,
        },
    )?;
    Ok(SaliencyMap {
        grad: grads.wrt(xi).reshape(&[c, h, w])?,
    })
}

/// Channel maximum clamped at zero, normalized by the image maximum.
pub fn saliency_intensity(m: &SaliencyMap) -> Vec<f64> {
    let s = m.grad.shape();
    let plane = s[1] * s[2];
    let d = m.grad.data();
    let chmax: Vec<f64> = (0..plane)
        .map(|p| (0..s[0]).map(|c| d[c * plane + p] as f64).fold(0.0, f64::max))
        .collect();
    let top = chmax.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return vec![0.0; plane];
    }
    chmax.iter().map(|v| v / top).collect()
}

pub fn saliency_pixels(m: &SaliencyMap) -> Vec<u8> {
    saliency_intensity(m).iter().map(|v| (255.0 * v).round() as u8).collect()
}

pub fn render_saliency(m: &SaliencyMap, path: &Path) -> Result<()> {
    let s = m.grad.shape();
    write_gray(path, s[1], s[2], saliency_pixels(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ModelKind};

    fn setup(kind: ModelKind) -> (ModelSpec, ModelParams, Tensor) {
        let spec = ModelSpec {
            base_width: 2,
            input_size: (32, 32),
            ..ModelSpec::new(kind)
        };
        let params = build(&spec, &mut Rng::new(6)).unwrap();
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut Rng::new(7));
        (spec, params, x)
    }

    #[test]
    fn single_relu_oracle() {
        let (w, xv) = (0.75f64, 2.0f64);
        for sign in [1.0, -1.0] {
            let run = |guided: bool| {
                let mut g = Graph::<f64>::new();
                let x = g.leaf(Tensor::new(&[1], vec![xv]).unwrap(), true);
                let wn = g.leaf(Tensor::new(&[1], vec![w]).unwrap(), false);
                let wx = g.mul(wn, x).unwrap();
                let y = g.relu(wx).unwrap();
                let obj = g.scale(y, sign).unwrap();
                let gr = g
                    .backward_with(
                        obj,
                        BackwardOptions {
                            guided,
                            relu_hook: None,
                        },
                    )
                    .unwrap();
                gr.wrt(x).data()[0]
            };
            if sign > 0.0 {
                assert_eq!((run(true), run(false)), (w, w));
            } else {
                assert_eq!((run(true), run(false)), (0.0, -w));
            }
        }
    }

    #[test]
    fn relu_free_model_matches_vanilla_bitwise() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let (spec, params, x) = setup(kind);
            let run = |vanilla| {
                input_gradient(
                    &params,
                    &spec,
                    &x,
                    SaliencyTarget::PolypChannel,
                    SaliencyOptions {
                        vanilla,
                        linear: true,
                        relu_hook: None,
                    },
                )
                .unwrap()
            };
            let (guided, vanilla) = (run(false), run(true));
            assert_eq!(guided.grad.bits(), vanilla.grad.bits());
            assert!(guided.grad.max_abs() > 0.0);
        }
    }

    #[test]
    fn guided_gradients_are_nonnegative_at_every_relu() {
        for kind in [ModelKind::Efcn8, ModelKind::Esegnet] {
            let (spec, params, x) = setup(kind);
            let (mut seen, mut negative, mut calls) = (0usize, 0usize, 0usize);
            let mut hook = |_: crate::graph::NodeId, g: &Tensor| {
                calls += 1;
                seen += g.len();
                negative += g.data().iter().filter(|&&v| v < 0.0).count();
            };
            input_gradient(
                &params,
                &spec,
                &x,
                SaliencyTarget::PolypChannel,
                SaliencyOptions {
                    relu_hook: Some(&mut hook),
                    ..SaliencyOptions::default()
                },
            )
            .unwrap();
            assert!(calls > 10 && seen > 0);
            assert_eq!(negative, 0);
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let (spec, params, x) = setup(ModelKind::Esegnet);
        let a = guided_backprop(&params, &spec, &x, SaliencyTarget::Pixel(10, 20)).unwrap();
        let b = guided_backprop(&params, &spec, &x, SaliencyTarget::Pixel(10, 20)).unwrap();
        assert_eq!(a.grad.bits(), b.grad.bits());
        assert!(guided_backprop(&params, &spec, &x, SaliencyTarget::Pixel(32, 0)).is_err());
    }

    #[test]
    fn empty_predicted_region_is_an_error() {
        let (spec, mut params, x) = setup(ModelKind::Efcn8);
        params.get_mut("up8.weight").unwrap().data_mut().fill(0.0);
        params.get_mut("up8.bias").unwrap().data_mut().copy_from_slice(&[5.0, -5.0]);
        let err = guided_backprop(&params, &spec, &x, SaliencyTarget::PredictedPolyp).unwrap_err();
        assert!(matches!(err, Error::EmptyTarget(_)));
        params.get_mut("up8.bias").unwrap().data_mut().copy_from_slice(&[-5.0, 5.0]);
        guided_backprop(&params, &spec, &x, SaliencyTarget::PredictedPolyp).unwrap();
    }

    #[test]
    fn target_parsing() {
        assert_eq!("predicted".parse::<SaliencyTarget>().unwrap(), SaliencyTarget::PredictedPolyp);
        assert_eq!("channel".parse::<SaliencyTarget>().unwrap(), SaliencyTarget::PolypChannel);
        assert_eq!("pixel:3, 4".parse::<SaliencyTarget>().unwrap(), SaliencyTarget::Pixel(3, 4));
        assert!("pixel:3".parse::<SaliencyTarget>().is_err());
    }

    #[test]
    fn rendering() {
        let zero = SaliencyMap {
            grad: Tensor::zeros(&[3, 4, 4]),
        };
        assert!(saliency_pixels(&zero).iter().all(|&p| p == 0));
        let mut one = zero.clone();
        one.grad.data_mut()[16 + 5] = 0.3;
        one.grad.data_mut()[7] = -2.0;
        let px = saliency_pixels(&one);
        assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(px[5], 255);
        assert_eq!(px.iter().filter(|&&p| p != 0).count(), 1);
        let dir = tempfile::tempdir().unwrap();
        render_saliency(&one, &dir.path().join("s.png")).unwrap();
        let img = image::open(dir.path().join("s.png")).unwrap().to_luma8();
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
    }
}
