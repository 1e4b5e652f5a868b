//! Image-level and instance-level adversarial alignment, composed with the
//! supervised detection loss into the overall unsupervised domain adaptation
//! objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParameterSet, Var};
use crate::data::{DetectionSample, Domain};
use crate::detector::{detection_loss, detector_forward, DetLoss, DetectorConfig, DetectorForward};
use crate::nn::{
    build_discriminator, image_discriminator_spec, instance_discriminator_spec, ls_domain_loss,
    DomainLabel, Mode, Network,
};
use crate::{Error, Result};

/// The two domain discriminators. Both begin with a GRL; their parameter
/// prefixes ("dimg", "dinst") are disjoint from the detector's "det".
pub struct AlignmentHeads {
    pub d_img: Network,
    pub d_inst: Network,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// Conv width of the image discriminator (full-scale stack uses 64).
    pub img_width: usize,
    /// FC width of the instance discriminator (full-scale stack uses 1024).
    pub inst_width: usize,
    pub lambda_grl: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { img_width: 8, inst_width: 32, lambda_grl: 1.0 }
    }
}

pub fn build_alignment_heads(det: &DetectorConfig, cfg: &AlignmentConfig) -> Result<AlignmentHeads> {
    Ok(AlignmentHeads {
        d_img: build_discriminator(
            "dimg",
            image_discriminator_spec(det.feature_channels(), cfg.img_width, cfg.lambda_grl),
        )?,
        d_inst: build_discriminator(
            "dinst",
            instance_discriminator_spec(det.roi_dim, cfg.inst_width, cfg.lambda_grl),
        )?,
    })
}

pub fn init_head_params(heads: &AlignmentHeads, rng: &mut rand_chacha::ChaCha8Rng) -> ParameterSet {
    let mut p = heads.d_img.init_params(rng);
    p.extend(heads.d_inst.init_params(rng));
    p
}

/// Least-squares alignment of the two encoder feature maps (source labeled 1,
/// target labeled 0).
pub fn image_alignment_loss(
    f_img_s: &Var,
    f_img_t: &Var,
    heads: &AlignmentHeads,
    bound: &BoundParams,
) -> Result<Var> {
    if f_img_s.shape() != f_img_t.shape() {
        return Err(Error::contract("image_alignment_loss: feature shape mismatch"));
    }
    let ps = heads.d_img.forward(f_img_s, bound, &mut Mode::Eval);
    let pt = heads.d_img.forward(f_img_t, bound, &mut Mode::Eval);
    let ls = ls_domain_loss(&ps, DomainLabel::Source)?;
    let lt = ls_domain_loss(&pt, DomainLabel::Target)?;
    Ok(ls.add(&lt))
}

/// Alignment of per-proposal pooled features. Either side having zero
/// proposals degenerates to zero loss with a logged warning.
pub fn instance_alignment_loss(
    f_inst_s: &Var,
    f_inst_t: &Var,
    heads: &AlignmentHeads,
    bound: &BoundParams,
) -> Result<Var> {
    if f_inst_s.shape()[0] == 0 || f_inst_t.shape()[0] == 0 {
        log::warn!(
            "instance alignment skipped: {} source / {} target proposals",
            f_inst_s.shape()[0],
            f_inst_t.shape()[0]
        );
        return Ok(Var::scalar(&bound.graph, 0.0));
    }
    let ps = heads.d_inst.forward(f_inst_s, bound, &mut Mode::Eval);
    let pt = heads.d_inst.forward(f_inst_t, bound, &mut Mode::Eval);
    let ls = ls_domain_loss(&ps, DomainLabel::Source)?;
    let lt = ls_domain_loss(&pt, DomainLabel::Target)?;
    Ok(ls.add(&lt))
}

/// Scalar snapshot of one UDA loss evaluation, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub l_det: f64,
    pub l_img: f64,
    pub l_inst: f64,
    pub l_da: f64,
    pub l_uda: f64,
}

/// The composed objective with its recorded components.
pub struct UdaLoss {
    pub det: DetLoss,
    pub l_img: Var,
    pub l_inst: Var,
    pub l_da: Var,
    pub l_uda: Var,
    pub source_fwd: DetectorForward,
    pub target_fwd: Option<DetectorForward>,
}

impl UdaLoss {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_det: self.det.total.value(),
            l_img: self.l_img.value(),
            l_inst: self.l_inst.value(),
            l_da: self.l_da.value(),
            l_uda: self.l_uda.value(),
        }
    }
}

/// L_uda = L_det(source) + lambda * (L_img + L_inst). With lambda == 0 the
/// adversarial branch is skipped entirely and L_uda is L_det exactly.
pub fn uda_loss(
    det_cfg: &DetectorConfig,
    bound: &BoundParams,
    heads: &AlignmentHeads,
    source: &DetectionSample,
    target: &DetectionSample,
    lambda: f64,
) -> Result<UdaLoss> {
    if lambda < 0.0 {
        return Err(Error::contract("uda_loss: lambda must be non-negative"));
    }
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("uda_loss: source sample must be labeled"))?;
    if source.domain != Domain::Source {
        return Err(Error::contract("uda_loss: first sample must be source-domain"));
    }
    if target.labels.is_some() {
        log::warn!("uda_loss: target sample {} carries labels; ignored", target.id);
    }
    let (img_h, img_w) = (source.height() as f64, source.width() as f64);
    let source_fwd = detector_forward(det_cfg, bound, &source.image)?;
    let det = detection_loss(det_cfg, bound, &source_fwd, labels, img_w, img_h)?;

    if lambda == 0.0 {
        let zero = Var::scalar(&bound.graph, 0.0);
        let l_uda = det.total.clone();
        bound.graph.check()?;
        return Ok(UdaLoss {
            det,
            l_img: zero.clone(),
            l_inst: zero.clone(),
            l_da: zero,
            l_uda,
            source_fwd,
            target_fwd: None,
        });
    }

    let target_fwd = detector_forward(det_cfg, bound, &target.image)?;
    let l_img = image_alignment_loss(&source_fwd.f_img, &target_fwd.f_img, heads, bound)?;
    let l_inst = instance_alignment_loss(&source_fwd.f_inst, &target_fwd.f_inst, heads, bound)?;
    let l_da = l_img.add(&l_inst);
    let l_uda = det.total.add(&l_da.scale(lambda));
    bound.graph.check()?;
    Ok(UdaLoss { det, l_img, l_inst, l_da, l_uda, source_fwd, target_fwd: Some(target_fwd) })
}
