//! Demo state independent of the browser bindings, so it also runs natively.

use polyseg::checkpoint::Checkpoint;
use polyseg::data::{augment, generate_synthetic, AugmentConfig, Sample};
use polyseg::model::{argmax_labels, build, forward_logits, ForwardMode, ModelKind, ModelParams, ModelSpec};
use polyseg::saliency::{guided_backprop, saliency_pixels, SaliencyTarget};
use polyseg::uncertainty::{mc_predict, uncertainty_pixels, UncertaintyConfig};
use polyseg::Rng;

/// Polyp pixels in overlays.
const POLYP_RGB: [u8; 3] = [255, 64, 64];

pub struct Session {
    original: Sample,
    current: Sample,
    model: Option<(ModelSpec, ModelParams)>,
}

impl Session {
    /// One synthetic sample of `size x size` pixels drawn from `seed`.
    pub fn new(seed: u64, size: usize) -> Result<Self, String> {
        let sample = generate_synthetic(1, (size, size), &mut Rng::new(seed))
            .map_err(|e| e.to_string())?
            .remove(0);
        Ok(Session {
            original: sample.clone(),
            current: sample,
            model: None,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.current.height(), self.current.width())
    }

    /// Replaces the shown sample with a random augmentation of the original.
    pub fn augment(&mut self, seed: u64) -> Result<(), String> {
        self.current = augment(&self.original, &AugmentConfig::default(), &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.current = self.original.clone();
    }

    /// Loads a checkpoint written by `polyseg train`; returns a summary.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<String, String> {
        let ckpt = Checkpoint::from_bytes(bytes).map_err(|e| e.to_string())?;
        let summary = describe(&ckpt.spec, &ckpt.params);
        self.model = Some((ckpt.spec, ckpt.params));
        Ok(summary)
    }

    /// An untrained model, for trying the maps without a checkpoint.
    pub fn random_model(&mut self, kind: &str, base_width: usize, seed: u64) -> Result<String, String> {
        let kind: ModelKind = kind.parse().map_err(|_| format!("unknown model '{kind}'"))?;
        let spec = ModelSpec {
            base_width,
            input_size: self.size(),
            ..ModelSpec::new(kind)
        };
        let params = build(&spec, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        let summary = describe(&spec, &params);
        self.model = Some((spec, params));
        Ok(summary)
    }

    fn model(&self) -> Result<&(ModelSpec, ModelParams), String> {
        self.model.as_ref().ok_or_else(|| "no model loaded".to_string())
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        let (h, w) = self.size();
        let d = self.current.image.data();
        let plane = h * w;
        (0..plane)
            .flat_map(|p| [to_u8(d[p]), to_u8(d[plane + p]), to_u8(d[2 * plane + p]), 255])
            .collect()
    }

    /// The image with polyp pixels of `labels` tinted.
    fn overlay(&self, labels: &[u8]) -> Vec<u8> {
        let mut rgba = self.image_rgba();
        for (px, &l) in rgba.chunks_mut(4).zip(labels) {
            if l == 1 {
                for (c, &t) in px.iter_mut().zip(&POLYP_RGB) {
                    *c = ((*c as u16 + t as u16) / 2) as u8;
                }
            }
        }
        rgba
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.overlay(self.current.mask.data())
    }

    pub fn prediction_rgba(&self) -> Result<Vec<u8>, String> {
        let (spec, params) = self.model()?;
        let (h, w) = self.size();
        let x = self.current.image.clone().reshape(&[1, 3, h, w]).map_err(|e| e.to_string())?;
        let logits = forward_logits(params, spec, &x, ForwardMode::Eval, &mut Rng::new(0)).map_err(|e| e.to_string())?;
        let labels = argmax_labels(&logits).map_err(|e| e.to_string())?;
        Ok(self.overlay(labels.data()))
    }

    /// Monte Carlo dropout standard deviation as gray levels.
    pub fn uncertainty_rgba(&self, samples: usize, seed: u64) -> Result<Vec<u8>, String> {
        let (spec, params) = self.model()?;
        let cfg = UncertaintyConfig { samples };
        let r = mc_predict(params, spec, &self.current.image, &cfg, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        Ok(gray_rgba(&uncertainty_pixels(&r)))
    }

    /// Guided backpropagation map; `target` is `predicted`, `channel` or
    /// `pixel:Y,X`.
    pub fn saliency_rgba(&self, target: &str) -> Result<Vec<u8>, String> {
        let (spec, params) = self.model()?;
        let target: SaliencyTarget = target.parse().map_err(|e| format!("{e}"))?;
        let m = guided_backprop(params, spec, &self.current.image, target).map_err(|e| e.to_string())?;
        Ok(gray_rgba(&saliency_pixels(&m)))
    }
}

fn describe(spec: &ModelSpec, params: &ModelParams) -> String {
    format!(
        "{} base {} dropout {}, {} parameters",
        spec.kind.name(),
        spec.base_width,
        spec.dropout_rate,
        params.num_parameters()
    )
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gray_rgba(levels: &[u8]) -> Vec<u8> {
    levels.iter().flat_map(|&v| [v, v, v, 255]).collect()
}
