//! The detector network: a small backbone, the dense proposal module (DPM)
//! and the aligned detection module (ADM), with a hand-written backward pass.
//!
//! ```text
//! image ─ 3 × [conv3x3, ReLU, avgpool2] ─ feat (stride 8)
//! feat ─ 2 × [conv3x3, ReLU] ─ conv3x3 → DPM logit, DPM deltas
//!                                   deltas + anchors → refined anchors
//! feat ─ align (k×k; conv / learned deform / RoIConv on refined anchors)
//!      ─ ReLU ─ conv1x1 ─ ReLU ─ conv1x1 → ADM logits (3), ADM deltas
//! ```
//!
//! Refined anchors leave the graph: they drive label assignment and the
//! RoIConv offsets, but no gradient flows back through them.

use super::config::{AdmVariant, DetectionConfig};
use super::scene::ShapeClass;
use crate::boxes::{decode, make_anchor_grid, BBox, BoxMap};
use crate::conv::{
    conv_backward, conv_forward, deform_conv_backward, deform_conv_forward, roiconv_offsets,
    ConvSpec, FeatureMap, Kernel, OffsetField,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// RNG streams for initialization. The offset predictor has its own stream
/// so every arm shares bit-identical values for all other parameters.
const INIT_STREAM: u64 = 0x1417;
const OFFSET_INIT_STREAM: u64 = 0x1418;
/// Prior foreground probability encoded in the classifier bias.
const PRIOR_PROB: f64 = 0.01;
const HEAD_INIT_STD: f64 = 0.01;
/// Standard deviation of the offset predictor's initial weights.
const OFFSET_INIT_STD: f64 = 0.01;
/// Smallest extent of a refined anchor, in pixels.
pub const MIN_ANCHOR_EXTENT: f64 = 1.0;

/// All trainable convolutions. Also used for gradients and momentum
/// buffers, which have the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub backbone: [ConvSpec; 3],
    pub dpm_trunk: [ConvSpec; 2],
    pub dpm_cls: ConvSpec,
    pub dpm_reg: ConvSpec,
    /// Offset predictor, present only for the learned deformable arm.
    pub adm_offset: Option<ConvSpec>,
    pub adm_align: ConvSpec,
    pub adm_mid: ConvSpec,
    pub adm_cls: ConvSpec,
    pub adm_reg: ConvSpec,
}

fn he(kernel: Kernel, cin: usize, cout: usize, rng: &mut Rng) -> ConvSpec {
    let std = (2.0 / (cin * kernel.taps()) as f64).sqrt();
    ConvSpec::gaussian(kernel, cin, cout, std, 0.0, rng)
}

impl Network {
    pub fn init(config: &DetectionConfig) -> Self {
        let mut rng = Rng::derive(config.seed, INIT_STREAM);
        let k3 = Kernel::square(3);
        let k1 = Kernel::square(1);
        let ka = Kernel::square(config.adm_kernel);
        let [c1, c2, c3] = config.backbone_channels;
        let ch = config.head_channels;
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let backbone = [
            he(k3, 1, c1, &mut rng),
            he(k3, c1, c2, &mut rng),
            he(k3, c2, c3, &mut rng),
        ];
        let dpm_trunk = [he(k3, c3, ch, &mut rng), he(k3, ch, ch, &mut rng)];
        let dpm_cls = ConvSpec::gaussian(k3, ch, 1, HEAD_INIT_STD, prior, &mut rng);
        let dpm_reg = ConvSpec::gaussian(k3, ch, 4, HEAD_INIT_STD, 0.0, &mut rng);
        let adm_align = he(ka, c3, ch, &mut rng);
        let adm_mid = he(k1, ch, ch, &mut rng);
        let adm_cls = ConvSpec::gaussian(k1, ch, ShapeClass::COUNT, HEAD_INIT_STD, prior, &mut rng);
        let adm_reg = ConvSpec::gaussian(k1, ch, 4, HEAD_INIT_STD, 0.0, &mut rng);
        let adm_offset = (config.adm_variant == AdmVariant::LearnedDeform).then(|| {
            let mut orng = Rng::derive(config.seed, OFFSET_INIT_STREAM);
            ConvSpec::gaussian(ka, c3, 2 * ka.taps(), OFFSET_INIT_STD, 0.0, &mut orng)
        });
        Self {
            backbone,
            dpm_trunk,
            dpm_cls,
            dpm_reg,
            adm_offset,
            adm_align,
            adm_mid,
            adm_cls,
            adm_reg,
        }
    }

    /// Same structure, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, spec) in z.layers_mut() {
            spec.weights.data_mut().fill(0.0);
            spec.bias.data_mut().fill(0.0);
        }
        z
    }

    /// Layers in a fixed order with stable names.
    pub fn layers(&self) -> Vec<(String, &ConvSpec)> {
        let mut v: Vec<(String, &ConvSpec)> = Vec::with_capacity(12);
        for (i, s) in self.backbone.iter().enumerate() {
            v.push((format!("backbone.{i}"), s));
        }
        for (i, s) in self.dpm_trunk.iter().enumerate() {
            v.push((format!("dpm.trunk.{i}"), s));
        }
        v.push(("dpm.cls".into(), &self.dpm_cls));
        v.push(("dpm.reg".into(), &self.dpm_reg));
        if let Some(s) = &self.adm_offset {
            v.push(("adm.offset".into(), s));
        }
        v.push(("adm.align".into(), &self.adm_align));
        v.push(("adm.mid".into(), &self.adm_mid));
        v.push(("adm.cls".into(), &self.adm_cls));
        v.push(("adm.reg".into(), &self.adm_reg));
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut ConvSpec)> {
        let mut v: Vec<(String, &mut ConvSpec)> = Vec::with_capacity(12);
        for (i, s) in self.backbone.iter_mut().enumerate() {
            v.push((format!("backbone.{i}"), s));
        }
        for (i, s) in self.dpm_trunk.iter_mut().enumerate() {
            v.push((format!("dpm.trunk.{i}"), s));
        }
        v.push(("dpm.cls".into(), &mut self.dpm_cls));
        v.push(("dpm.reg".into(), &mut self.dpm_reg));
        if let Some(s) = &mut self.adm_offset {
            v.push(("adm.offset".into(), s));
        }
        v.push(("adm.align".into(), &mut self.adm_align));
        v.push(("adm.mid".into(), &mut self.adm_mid));
        v.push(("adm.cls".into(), &mut self.adm_cls));
        v.push(("adm.reg".into(), &mut self.adm_reg));
        v
    }

    /// Every parameter tensor as `(name, tensor)`, weights before bias.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, s)| {
                [
                    (format!("{name}.weight"), &s.weights),
                    (format!("{name}.bias"), &s.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, s)| {
                let ConvSpec { weights, bias, .. } = s;
                [
                    (format!("{name}.weight"), weights),
                    (format!("{name}.bias"), bias),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, s)| s.param_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// `self += k · other`, tensor by tensor.
    pub fn axpy(&mut self, k: f64, other: &Network) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("networks have different layer sets".into()));
        }
        for ((_, d), (_, s)) in dst.iter_mut().zip(&src) {
            d.check_same_shape(s)?;
            for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                *a += k * b;
            }
        }
        Ok(())
    }
}

/// Pre-defined anchors for `config`, one per feature cell.
pub fn anchor_map(config: &DetectionConfig) -> Result<BoxMap> {
    let n = config.feature_size();
    Ok(make_anchor_grid(
        n,
        n,
        config.stride,
        config.anchor_scale,
        config.anchor_ratio,
    )?
    .map)
}

/// Deltas of location `loc` from a `[4, H, W]` regression map.
pub fn deltas_at(reg: &Tensor, loc: usize) -> [f64; 4] {
    let plane = reg.shape()[1] * reg.shape()[2];
    std::array::from_fn(|d| reg.data()[d * plane + loc])
}

/// Decodes DPM deltas against the anchors and clamps the result into the
/// image with a minimum extent, so RoIConv always sees a valid box.
pub fn refine_anchors(anchors: &BoxMap, dpm_reg: &Tensor, image_size: usize) -> Result<BoxMap> {
    let lim = image_size as f64;
    let boxes = anchors
        .boxes
        .iter()
        .enumerate()
        .map(|(loc, a)| decode(a, &deltas_at(dpm_reg, loc)).clamp(lim, lim, MIN_ANCHOR_EXTENT))
        .collect();
    BoxMap::new(anchors.height, anchors.width, boxes)
}

/// 2×2 average pooling with stride 2; a trailing odd row or column is dropped.
pub fn avgpool2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let (oh, ow) = (h / 2, w / 2);
    let src = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |ix| {
        let (ch, r, col) = (ix[0], 2 * ix[1], 2 * ix[2]);
        let at = |dr: usize, dc: usize| src[(ch * h + r + dr) * w + col + dc];
        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1))
    }))
}

/// Adjoint of [`avgpool2`] for an input of shape `input_shape`.
pub fn avgpool2_backward(grad: &Tensor, input_shape: (usize, usize, usize)) -> Result<Tensor> {
    let (c, h, w) = input_shape;
    let (_, oh, ow) = grad.dims3()?;
    let g = grad.data();
    Ok(Tensor::from_fn(&[c, h, w], |ix| {
        let (r, col) = (ix[1] / 2, ix[2] / 2);
        if r < oh && col < ow {
            0.25 * g[(ix[0] * oh + r) * ow + col]
        } else {
            0.0
        }
    }))
}

fn relu_backward(grad: &Tensor, pre: &Tensor) -> Result<Tensor> {
    grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Inputs of the three backbone convolutions.
    stage_inputs: Vec<FeatureMap>,
    /// Pre-activations of the three backbone convolutions.
    stage_pre: Vec<Tensor>,
    pub features: FeatureMap,
    trunk_pre: Vec<Tensor>,
    trunk_out: Vec<FeatureMap>,
    pub dpm_cls: Tensor,
    pub dpm_reg: Tensor,
    pub refined: BoxMap,
    /// Offsets used by the alignment convolution (none for plain conv).
    pub offsets: Option<OffsetField>,
    /// Output of the alignment convolution, before its ReLU.
    pub align_pre: Tensor,
    align_out: FeatureMap,
    mid_pre: Tensor,
    mid_out: FeatureMap,
    pub adm_cls: Tensor,
    pub adm_reg: Tensor,
}

/// Gradients of the loss with respect to the four prediction maps.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub dpm_cls: Tensor,
    pub dpm_reg: Tensor,
    pub adm_cls: Tensor,
    pub adm_reg: Tensor,
}

/// Runs the network on a `[1 × H × W]` image. `refined_override` replaces
/// the refined anchors (and hence the RoIConv offsets) with fixed boxes;
/// gradient checks use it to hold the non-differentiable path constant.
pub fn forward(
    net: &Network,
    config: &DetectionConfig,
    image: &Tensor,
    refined_override: Option<&BoxMap>,
) -> Result<Forward> {
    let mut stage_inputs = Vec::with_capacity(3);
    let mut stage_pre = Vec::with_capacity(3);
    let mut x = FeatureMap::new(image.clone(), 1)?;
    for spec in &net.backbone {
        let pre = conv_forward(&x, spec)?;
        let pooled = avgpool2(&pre.relu())?;
        let stride = x.stride * 2;
        stage_inputs.push(x);
        stage_pre.push(pre);
        x = FeatureMap::new(pooled, stride)?;
    }
    let features = x;

    let mut trunk_pre = Vec::with_capacity(2);
    let mut trunk_out = Vec::with_capacity(2);
    let mut t = features.clone();
    for spec in &net.dpm_trunk {
        let pre = conv_forward(&t, spec)?;
        t = FeatureMap::new(pre.relu(), features.stride)?;
        trunk_pre.push(pre);
        trunk_out.push(t.clone());
    }
    let dpm_cls = conv_forward(&t, &net.dpm_cls)?;
    let dpm_reg = conv_forward(&t, &net.dpm_reg)?;

    let refined = match refined_override {
        Some(r) => r.clone(),
        None => refine_anchors(&anchor_map(config)?, &dpm_reg, config.image_size)?,
    };

    let (offsets, align_pre) = match config.adm_variant {
        AdmVariant::VanillaConv => (None, conv_forward(&features, &net.adm_align)?),
        AdmVariant::LearnedDeform => {
            let spec = net.adm_offset.as_ref().ok_or_else(|| {
                Error::Contract("learned_deform network has no offset predictor".into())
            })?;
            let off = OffsetField::new(conv_forward(&features, spec)?, net.adm_align.kernel)?;
            let y = deform_conv_forward(&features, &net.adm_align, &off)?;
            (Some(off), y)
        }
        AdmVariant::Roiconv => {
            let off = roiconv_offsets(&refined, net.adm_align.kernel, features.stride)?;
            let y = deform_conv_forward(&features, &net.adm_align, &off)?;
            (Some(off), y)
        }
    };
    let align_out = FeatureMap::new(align_pre.relu(), features.stride)?;
    let mid_pre = conv_forward(&align_out, &net.adm_mid)?;
    let mid_out = FeatureMap::new(mid_pre.relu(), features.stride)?;
    let adm_cls = conv_forward(&mid_out, &net.adm_cls)?;
    let adm_reg = conv_forward(&mid_out, &net.adm_reg)?;
    Ok(Forward {
        stage_inputs,
        stage_pre,
        features,
        trunk_pre,
        trunk_out,
        dpm_cls,
        dpm_reg,
        refined,
        offsets,
        align_pre,
        align_out,
        mid_pre,
        mid_out,
        adm_cls,
        adm_reg,
    })
}

/// Parameter gradients given the gradients of the four prediction maps.
pub fn backward(
    net: &Network,
    config: &DetectionConfig,
    fwd: &Forward,
    grads: &HeadGrads,
) -> Result<Network> {
    let mut g = net.zeros_like();

    // ADM head
    let cls = conv_backward(&fwd.mid_out, &net.adm_cls, &grads.adm_cls)?;
    let reg = conv_backward(&fwd.mid_out, &net.adm_reg, &grads.adm_reg)?;
    (g.adm_cls.weights, g.adm_cls.bias) = (cls.weights, cls.bias);
    (g.adm_reg.weights, g.adm_reg.bias) = (reg.weights, reg.bias);
    let g_mid = relu_backward(&cls.input.add(&reg.input)?, &fwd.mid_pre)?;
    let mid = conv_backward(&fwd.align_out, &net.adm_mid, &g_mid)?;
    (g.adm_mid.weights, g.adm_mid.bias) = (mid.weights, mid.bias);
    let g_align = relu_backward(&mid.input, &fwd.align_pre)?;
    let mut g_feat = match (config.adm_variant, &fwd.offsets) {
        (AdmVariant::VanillaConv, _) => {
            let a = conv_backward(&fwd.features, &net.adm_align, &g_align)?;
            (g.adm_align.weights, g.adm_align.bias) = (a.weights, a.bias);
            a.input
        }
        (AdmVariant::LearnedDeform, Some(off)) => {
            let a = deform_conv_backward(&fwd.features, &net.adm_align, off, &g_align, true)?;
            (g.adm_align.weights, g.adm_align.bias) = (a.weights, a.bias);
            let g_off = a.offsets.expect("trainable offsets yield a gradient");
            let spec = net.adm_offset.as_ref().expect("checked in forward");
            let o = conv_backward(&fwd.features, spec, &g_off)?;
            let go = g.adm_offset.as_mut().expect("same structure as net");
            (go.weights, go.bias) = (o.weights, o.bias);
            a.input.add(&o.input)?
        }
        (AdmVariant::Roiconv, Some(off)) => {
            let a = deform_conv_backward(&fwd.features, &net.adm_align, off, &g_align, false)?;
            (g.adm_align.weights, g.adm_align.bias) = (a.weights, a.bias);
            a.input
        }
        _ => {
            return Err(Error::Contract(
                "deformable forward pass without offsets".into(),
            ))
        }
    };

    // DPM
    let t_last = &fwd.trunk_out[1];
    let cls = conv_backward(t_last, &net.dpm_cls, &grads.dpm_cls)?;
    let reg = conv_backward(t_last, &net.dpm_reg, &grads.dpm_reg)?;
    (g.dpm_cls.weights, g.dpm_cls.bias) = (cls.weights, cls.bias);
    (g.dpm_reg.weights, g.dpm_reg.bias) = (reg.weights, reg.bias);
    let mut g_t = cls.input.add(&reg.input)?;
    for k in (0..2).rev() {
        let g_pre = relu_backward(&g_t, &fwd.trunk_pre[k])?;
        let input = if k == 0 {
            &fwd.features
        } else {
            &fwd.trunk_out[0]
        };
        let c = conv_backward(input, &net.dpm_trunk[k], &g_pre)?;
        (g.dpm_trunk[k].weights, g.dpm_trunk[k].bias) = (c.weights, c.bias);
        g_t = c.input;
    }
    g_feat.add_assign(&g_t)?;

    // backbone
    for k in (0..3).rev() {
        let pre = &fwd.stage_pre[k];
        let pooled_grad = avgpool2_backward(&g_feat, pre.dims3()?)?;
        let g_pre = relu_backward(&pooled_grad, pre)?;
        let c = conv_backward(&fwd.stage_inputs[k], &net.backbone[k], &g_pre)?;
        (g.backbone[k].weights, g.backbone[k].bias) = (c.weights, c.bias);
        g_feat = c.input;
    }
    Ok(g)
}

/// Row-major box at feature cell `loc`, decoded from the ADM deltas against
/// its refined anchor.
pub fn adm_box(fwd: &Forward, loc: usize) -> BBox {
    decode(&fwd.refined.boxes[loc], &deltas_at(&fwd.adm_reg, loc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::roiconv_offsets;

    fn small_config(variant: AdmVariant) -> DetectionConfig {
        DetectionConfig {
            adm_variant: variant,
            backbone_channels: [2, 3, 4],
            head_channels: 4,
            seed: 5,
            ..Default::default()
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_vec(&[1, 64, 64], (0..4096).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        for v in AdmVariant::ALL {
            let c = small_config(v);
            let net = Network::init(&c);
            let f = forward(&net, &c, &image(1), None).unwrap();
            assert_eq!(f.features.dims(), (4, 8, 8));
            assert_eq!(f.features.stride, 8);
            assert_eq!(f.dpm_cls.shape(), &[1, 8, 8]);
            assert_eq!(f.dpm_reg.shape(), &[4, 8, 8]);
            assert_eq!(f.adm_cls.shape(), &[3, 8, 8]);
            assert_eq!(f.adm_reg.shape(), &[4, 8, 8]);
            assert_eq!(f.offsets.is_some(), v != AdmVariant::VanillaConv);
        }
    }

    #[test]
    fn arms_share_initial_parameters() {
        let nets: Vec<Network> = AdmVariant::ALL
            .iter()
            .map(|&v| Network::init(&small_config(v)))
            .collect();
        for n in &nets[1..] {
            let mut a = nets[0].clone();
            let mut b = n.clone();
            a.adm_offset = None;
            b.adm_offset = None;
            assert_eq!(a, b);
        }
        assert!(nets[1].adm_offset.is_some());
        let base = nets[0].param_count();
        assert_eq!(nets[2].param_count(), base);
    }

    #[test]
    fn roiconv_with_zero_deltas_uses_the_anchor_grid() {
        let c = small_config(AdmVariant::Roiconv);
        let mut net = Network::init(&c);
        net.dpm_reg.weights.data_mut().fill(0.0);
        net.dpm_reg.bias.data_mut().fill(0.0);
        let f = forward(&net, &c, &image(2), None).unwrap();
        // anchors that poke out of the image are clamped, as in training
        let anchors =
            refine_anchors(&anchor_map(&c).unwrap(), &Tensor::zeros(&[4, 8, 8]), 64).unwrap();
        assert_eq!(f.refined, anchors);
        let off = roiconv_offsets(&anchors, Kernel::square(3), 8).unwrap();
        assert_eq!(f.offsets.as_ref().unwrap(), &off);
        let expected = deform_conv_forward(&f.features, &net.adm_align, &off).unwrap();
        assert_eq!(f.align_pre, expected);
        // where the pre-defined anchors lie inside the image nothing was clamped
        let raw = roiconv_offsets(&anchor_map(&c).unwrap(), Kernel::square(3), 8).unwrap();
        let unclamped = deform_conv_forward(&f.features, &net.adm_align, &raw).unwrap();
        for ch in 0..4 {
            for x in 2..6 {
                for y in 2..6 {
                    assert_eq!(
                        unclamped.get(&[ch, x, y]).unwrap(),
                        f.align_pre.get(&[ch, x, y]).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn refined_anchors_are_valid_even_for_wild_deltas() {
        let anchors = anchor_map(&DetectionConfig::default()).unwrap();
        let mut rng = Rng::new(3);
        let reg =
            Tensor::from_vec(&[4, 8, 8], (0..256).map(|_| 50.0 * rng.normal()).collect()).unwrap();
        let r = refine_anchors(&anchors, &reg, 64).unwrap();
        for b in &r.boxes {
            b.validate().unwrap();
            assert!(
                b.extent_x() >= MIN_ANCHOR_EXTENT - 1e-12
                    && b.extent_y() >= MIN_ANCHOR_EXTENT - 1e-12
            );
            assert!(b.x1 >= 0.0 && b.x2 <= 64.0 && b.y1 >= 0.0 && b.y2 <= 64.0);
        }
    }

    #[test]
    fn avgpool_adjoint() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_vec(&[2, 6, 4], rng.normal_vec(48)).unwrap();
        let y = Tensor::from_vec(&[2, 3, 2], rng.normal_vec(12)).unwrap();
        let lhs = avgpool2(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&avgpool2_backward(&y, (2, 6, 4)).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tensor_names_are_unique() {
        let net = Network::init(&small_config(AdmVariant::LearnedDeform));
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert!(names.contains(&"adm.offset.weight".to_string()));
    }
}
