//! The single-call representation path: geometry to eight modality inputs
//! (each plus its horizontal flip), per-modality CNN features, flip
//! combination, L2 normalization, concatenation, range normalization, and
//! SAE encoding.

use thiserror::Error;

use crate::fusion::{
    self, FusionError, ModalFeature, ModalityMask, ModalityTag, SaeModel,
};
use crate::geometry::{GenericMesh, GeometryError, GeometryPipeline, Landmarks5, ModalityBundle};
use crate::image::GrayImage;
use crate::nn::{NetError, Network, Tensor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// How the original-image and flipped-image features combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipMode {
    Average,
    Concat,
}

impl FlipMode {
    pub fn label(self) -> &'static str {
        match self {
            FlipMode::Average => "average",
            FlipMode::Concat => "concat",
        }
    }

    pub fn from_label(s: &str) -> Option<FlipMode> {
        match s {
            "average" => Some(FlipMode::Average),
            "concat" => Some(FlipMode::Concat),
            _ => None,
        }
    }
}

/// Loaded pipeline state: mesh, geometry configuration, one network per
/// active modality, and optionally the fusion SAE. Without an SAE the
/// signature is the raw concatenation (the identity-fusion path used for
/// diagnostics and single-modality runs).
pub struct Representer {
    pub mesh: GenericMesh,
    pub geometry: GeometryPipeline,
    pub mask: ModalityMask,
    /// Networks in canonical mask order.
    pub networks: Vec<(ModalityTag, Network<f32>)>,
    pub sae: Option<SaeModel>,
    pub flip_mode: FlipMode,
}

pub fn image_to_tensor(image: &GrayImage) -> Tensor<f32> {
    Tensor::from_vec(
        &[1, image.height(), image.width()],
        image.data().to_vec(),
    )
}

/// Extracts one modality's combined feature: the image and its horizontal
/// flip pass through the network (resized to the net input if needed),
/// the two features are flip-combined, then L2 normalized.
pub fn modality_feature(
    net: &Network<f32>,
    image: &GrayImage,
    flip_mode: FlipMode,
) -> Result<Vec<f32>, PipelineError> {
    let (h, w) = (net.spec.input_h(), net.spec.input_w());
    let sized = image.resize_bilinear(h, w);
    let f_orig = net.extract_feature(&image_to_tensor(&sized))?;
    let f_flip = net.extract_feature(&image_to_tensor(&sized.flip_horizontal()))?;
    let combined = match flip_mode {
        FlipMode::Average => fusion::flip_average(&f_orig, &f_flip)?,
        FlipMode::Concat => fusion::flip_concat(&f_orig, &f_flip)?,
    };
    Ok(fusion::l2_normalize(&combined)?)
}

fn bundle_modality(bundle: &ModalityBundle, tag: ModalityTag) -> &GrayImage {
    match tag {
        ModalityTag::H1 => &bundle.holistic,
        ModalityTag::H2 => &bundle.frontal,
        ModalityTag::P1 => &bundle.patches[0],
        ModalityTag::P2 => &bundle.patches[1],
        ModalityTag::P3 => &bundle.patches[2],
        ModalityTag::P4 => &bundle.patches[3],
        ModalityTag::P5 => &bundle.patches[4],
        ModalityTag::P6 => &bundle.patches[5],
    }
}

impl Representer {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.mask.is_empty() {
            return Err(PipelineError::Config("empty modality mask".into()));
        }
        let tags = self.mask.tags();
        if self.networks.len() != tags.len() {
            return Err(PipelineError::Config(format!(
                "mask {} needs {} networks, got {}",
                self.mask,
                tags.len(),
                self.networks.len()
            )));
        }
        for ((nt, _), want) in self.networks.iter().zip(&tags) {
            if nt != want {
                return Err(PipelineError::Config(format!(
                    "network order violation: expected {}, got {}",
                    want.label(),
                    nt.label()
                )));
            }
        }
        if let Some(sae) = &self.sae {
            if sae.mask != self.mask {
                return Err(PipelineError::Config(format!(
                    "SAE checkpoint was trained for mask {} but the pipeline uses {}",
                    sae.mask, self.mask
                )));
            }
        }
        Ok(())
    }

    /// Runs geometry once and returns the masked modality images plus
    /// whether frontalization fell back to the holistic crop.
    pub fn modality_images(
        &self,
        image: &GrayImage,
        lm: &Landmarks5,
    ) -> Result<(Vec<(ModalityTag, GrayImage)>, bool), PipelineError> {
        let (bundle, fell_back) = self.geometry.run(image, lm, &self.mesh)?;
        let out = self
            .mask
            .tags()
            .into_iter()
            .map(|tag| (tag, bundle_modality(&bundle, tag).clone()))
            .collect();
        Ok((out, fell_back))
    }

    /// Per-modality combined features in canonical order.
    pub fn modal_features(
        &self,
        image: &GrayImage,
        lm: &Landmarks5,
    ) -> Result<(Vec<ModalFeature>, bool), PipelineError> {
        self.validate()?;
        let (modalities, fell_back) = self.modality_images(image, lm)?;
        let mut features = Vec::with_capacity(modalities.len());
        for ((tag, img), (net_tag, net)) in modalities.iter().zip(&self.networks) {
            debug_assert_eq!(tag, net_tag);
            features.push(ModalFeature {
                tag: *tag,
                values: modality_feature(net, img, self.flip_mode)?,
            });
        }
        Ok((features, fell_back))
    }

    /// The compact signature: concat -> range-normalize -> SAE encode, or
    /// the raw concatenation when no SAE is loaded.
    pub fn represent(&self, image: &GrayImage, lm: &Landmarks5) -> Result<Vec<f32>, PipelineError> {
        let (features, _) = self.modal_features(image, lm)?;
        let concat = fusion::concat_features(&features, self.mask)?;
        match &self.sae {
            Some(sae) => Ok(sae.signature(&concat)?),
            None => Ok(concat),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic_face_mesh;
    use crate::nn::{build_network, tiny_spec};

    fn test_face() -> (GrayImage, Landmarks5) {
        let img = GrayImage::from_fn(96, 96, |y, x| {
            (0.4 + 0.3 * ((x as f32) / 96.0) + 0.2 * ((y as f32) / 96.0)).clamp(0.0, 1.0)
        });
        let lm = Landmarks5::new([
            [33.0, 40.0],
            [63.0, 40.0],
            [48.0, 55.0],
            [38.0, 66.0],
            [58.0, 66.0],
        ]);
        (img, lm)
    }

    fn tiny_net(seed: u64) -> Network<f32> {
        build_network(&tiny_spec(32, 24, 16, 4), seed).unwrap()
    }

    #[test]
    fn represent_is_deterministic() {
        let (img, lm) = test_face();
        let rep = Representer {
            mesh: synthetic_face_mesh(),
            geometry: GeometryPipeline::default(),
            mask: ModalityMask::parse("H1,P3").unwrap(),
            networks: vec![
                (ModalityTag::H1, tiny_net(1)),
                (ModalityTag::P3, tiny_net(2)),
            ],
            sae: None,
            flip_mode: FlipMode::Average,
        };
        let a = rep.represent(&img, &lm).unwrap();
        let b = rep.represent(&img, &lm).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32); // two modalities x feature dim 16
    }

    #[test]
    fn single_modality_identity_fusion_reduces_to_the_modality_feature() {
        let (img, lm) = test_face();
        let net = tiny_net(3);
        let rep = Representer {
            mesh: synthetic_face_mesh(),
            geometry: GeometryPipeline::default(),
            mask: ModalityMask::parse("H1").unwrap(),
            networks: vec![(ModalityTag::H1, net.clone())],
            sae: None,
            flip_mode: FlipMode::Average,
        };
        let sig = rep.represent(&img, &lm).unwrap();
        let (modalities, _) = rep.modality_images(&img, &lm).unwrap();
        let direct = modality_feature(&net, &modalities[0].1, FlipMode::Average).unwrap();
        assert_eq!(sig, direct);
    }

    #[test]
    fn network_order_must_match_mask() {
        let rep = Representer {
            mesh: synthetic_face_mesh(),
            geometry: GeometryPipeline::default(),
            mask: ModalityMask::parse("H1,P3").unwrap(),
            networks: vec![
                (ModalityTag::P3, tiny_net(1)),
                (ModalityTag::H1, tiny_net(2)),
            ],
            sae: None,
            flip_mode: FlipMode::Average,
        };
        assert!(matches!(
            rep.validate(),
            Err(PipelineError::Config(_))
        ));
    }
}
