//! The detection-guided segmentation network.
//!
//! ```text
//! image -> conv-relu -> conv-relu -> pool -> conv-relu -> pool   (stride 4)
//!        -> RPN: conv-relu -> {1x1 objectness, 1x1 deltas} -> proposals
//!        -> ROI conv-relu (x roi_layers, gated by the proposal union)
//!        -> transposed conv (x4) -> 1x1 conv -> 2-class scores
//! ```
//!
//! With detection disabled the RPN is skipped and the ROI union is the
//! whole feature grid, which makes the ROI convolution a plain one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{masked_seg_loss, objectness_loss, regression_loss, LossReport};
use crate::optim::{sgd_update, SgdConfig};
use crate::roiconv::{
    rasterize_rois, roi_conv_backward, roi_conv_forward, same_padding, BinaryMask, RoiMask,
};
use crate::rpn::{
    assign_anchor_targets, generate_anchors, select_proposals, Anchor, AnchorLabel, AnchorTargets,
    BoxDelta, Proposal, RpnConfig,
};
use crate::tensor::{
    bilinear_kernel, conv2d_backward, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, glorot_bound, maxpool2, maxpool2_backward, relu, relu_backward,
    ConvParams, PoolIndices, Scalar, Tensor,
};

/// Product of the two 2x2 pooling strides in the backbone.
pub const BACKBONE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the three backbone convolutions.
    pub backbone_channels: [usize; 3],
    pub rpn_channels: usize,
    pub roi_channels: usize,
    pub roi_layers: usize,
    pub roi_kernel: usize,
    pub upsample_channels: usize,
    pub rpn: RpnConfig,
    pub detection_enabled: bool,
    pub sgd: SgdConfig,
    pub iterations: u64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            height: 64,
            width: 64,
            backbone_channels: [8, 16, 32],
            rpn_channels: 32,
            roi_channels: 16,
            roi_layers: 1,
            roi_kernel: 3,
            upsample_channels: 16,
            rpn: RpnConfig::default(),
            detection_enabled: true,
            sgd: SgdConfig::default(),
            iterations: 3000,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn stride(&self) -> usize {
        BACKBONE_STRIDE
    }

    pub fn feature_extents(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(self.stride())
            || !self.width.is_multiple_of(self.stride())
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of the backbone stride {}",
                self.height,
                self.width,
                self.stride()
            ));
        }
        if self.sgd.lr.is_nan() || self.sgd.lr <= 0.0 {
            return bad(format!("lr must be > 0, got {}", self.sgd.lr));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad(format!(
                "momentum must be in [0, 1), got {}",
                self.sgd.momentum
            ));
        }
        if self.roi_kernel.is_multiple_of(2) {
            return bad("roi_kernel must be odd".into());
        }
        if self.roi_layers == 0 {
            return bad("roi_layers must be >= 1".into());
        }
        if self.rpn.scales.is_empty() {
            return bad("at least one anchor scale is required".into());
        }
        if self.rpn.iou_lo >= self.rpn.iou_hi {
            return bad("iou_lo must be below iou_hi".into());
        }
        if self.backbone_channels.contains(&0)
            || [self.rpn_channels, self.roi_channels, self.upsample_channels].contains(&0)
        {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        let (fh, fw) = self.feature_extents();
        generate_anchors(fh, fw, self.stride(), &self.rpn.scales)
    }
}

/// All learnable layers. Every layer is a kernel plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub conv3: ConvParams<T>,
    pub rpn_conv: ConvParams<T>,
    pub rpn_cls: ConvParams<T>,
    pub rpn_reg: ConvParams<T>,
    pub roi: Vec<ConvParams<T>>,
    pub upsample: ConvParams<T>,
    pub score: ConvParams<T>,
}

fn conv_layer<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> ConvParams<T> {
    let kernel = Tensor::uniform(&[out_c, in_c, k, k], glorot_bound(out_c, in_c, k), rng);
    ConvParams::with_kernel(kernel, 1, same_padding(k)).expect("valid layer geometry")
}

fn zeros_like<T: Scalar>(p: &ConvParams<T>) -> ConvParams<T> {
    ConvParams {
        kernel: Tensor::zeros(p.kernel.shape()),
        bias: Tensor::zeros(p.bias.shape()),
        stride: p.stride,
        padding: p.padding,
    }
}

impl<T: Scalar> Params<T> {
    /// Glorot-uniform kernels, zero biases, bilinear upsampling kernel.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = cfg.backbone_channels;
        let n_scales = cfg.rpn.scales.len();
        let conv1 = conv_layer(&mut rng, c1, 1, 3);
        let conv2 = conv_layer(&mut rng, c2, c1, 3);
        let conv3 = conv_layer(&mut rng, c3, c2, 3);
        let rpn_conv = conv_layer(&mut rng, cfg.rpn_channels, c3, 3);
        let rpn_cls = conv_layer(&mut rng, n_scales, cfg.rpn_channels, 1);
        let rpn_reg = conv_layer(&mut rng, 4 * n_scales, cfg.rpn_channels, 1);
        let roi = (0..cfg.roi_layers)
            .map(|l| {
                let in_c = if l == 0 { c3 } else { cfg.roi_channels };
                conv_layer(&mut rng, cfg.roi_channels, in_c, cfg.roi_kernel)
            })
            .collect();
        let s = cfg.stride();
        let upsample = ConvParams::new(
            bilinear_kernel(cfg.roi_channels, cfg.upsample_channels, s),
            Tensor::zeros(&[cfg.upsample_channels]),
            s,
            s / 2,
        )
        .expect("valid upsampling geometry");
        let score = conv_layer(&mut rng, 2, cfg.upsample_channels, 1);
        Params {
            conv1,
            conv2,
            conv3,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            roi,
            upsample,
            score,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map_layers(zeros_like)
    }

    fn map_layers(&self, f: impl Fn(&ConvParams<T>) -> ConvParams<T>) -> Self {
        Params {
            conv1: f(&self.conv1),
            conv2: f(&self.conv2),
            conv3: f(&self.conv3),
            rpn_conv: f(&self.rpn_conv),
            rpn_cls: f(&self.rpn_cls),
            rpn_reg: f(&self.rpn_reg),
            roi: self.roi.iter().map(&f).collect(),
            upsample: f(&self.upsample),
            score: f(&self.score),
        }
    }

    /// Layers in canonical order with their names.
    pub fn layers(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut v = vec![
            ("conv1".to_string(), &self.conv1),
            ("conv2".to_string(), &self.conv2),
            ("conv3".to_string(), &self.conv3),
            ("rpn_conv".to_string(), &self.rpn_conv),
            ("rpn_cls".to_string(), &self.rpn_cls),
            ("rpn_reg".to_string(), &self.rpn_reg),
        ];
        v.extend(
            self.roi
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("roi_conv{}", i + 1), p)),
        );
        v.push(("upsample".to_string(), &self.upsample));
        v.push(("score".to_string(), &self.score));
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut ConvParams<T>)> {
        let mut v = vec![
            ("conv1".to_string(), &mut self.conv1),
            ("conv2".to_string(), &mut self.conv2),
            ("conv3".to_string(), &mut self.conv3),
            ("rpn_conv".to_string(), &mut self.rpn_conv),
            ("rpn_cls".to_string(), &mut self.rpn_cls),
            ("rpn_reg".to_string(), &mut self.rpn_reg),
        ];
        v.extend(
            self.roi
                .iter_mut()
                .enumerate()
                .map(|(i, p)| (format!("roi_conv{}", i + 1), p)),
        );
        v.push(("upsample".to_string(), &mut self.upsample));
        v.push(("score".to_string(), &mut self.score));
        v
    }

    /// `(name, tensor)` pairs, `<layer>.weight` then `<layer>.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), &p.kernel),
                    (format!("{name}.bias"), &p.bias),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), &mut p.kernel),
                    (format!("{name}.bias"), &mut p.bias),
                ]
            })
            .collect()
    }

    /// Rebuilds the layer set from named tensors, e.g. out of a checkpoint.
    /// Strides and paddings follow from the kernel shapes.
    pub fn from_named(mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let pos = named.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::invalid("Params::from_named", format!("missing tensor `{name}`"))
            })?;
            Ok(named.swap_remove(pos).1)
        };
        let mut conv = |name: &str| -> Result<ConvParams<T>> {
            let kernel = take(&format!("{name}.weight"))?;
            let bias = take(&format!("{name}.bias"))?;
            if kernel.rank() != 4 {
                return Err(Error::invalid(
                    "Params::from_named",
                    format!("`{name}.weight` is not 4-d"),
                ));
            }
            let k = kernel.shape()[2];
            if name == "upsample" {
                ConvParams::new(kernel, bias, k / 2, k / 4)
            } else {
                ConvParams::new(kernel, bias, 1, same_padding(k))
            }
        };
        let conv1 = conv("conv1")?;
        let conv2 = conv("conv2")?;
        let conv3 = conv("conv3")?;
        let rpn_conv = conv("rpn_conv")?;
        let rpn_cls = conv("rpn_cls")?;
        let rpn_reg = conv("rpn_reg")?;
        let mut roi = Vec::new();
        while let Ok(p) = conv(&format!("roi_conv{}", roi.len() + 1)) {
            roi.push(p);
        }
        if roi.is_empty() {
            return Err(Error::invalid("Params::from_named", "no roi_conv layers"));
        }
        let upsample = conv("upsample")?;
        let score = conv("score")?;
        Ok(Params {
            conv1,
            conv2,
            conv3,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            roi,
            upsample,
            score,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c = |p: &ConvParams<T>| ConvParams {
            kernel: p.kernel.cast(),
            bias: p.bias.cast(),
            stride: p.stride,
            padding: p.padding,
        };
        Params {
            conv1: c(&self.conv1),
            conv2: c(&self.conv2),
            conv3: c(&self.conv3),
            rpn_conv: c(&self.rpn_conv),
            rpn_cls: c(&self.rpn_cls),
            rpn_reg: c(&self.rpn_reg),
            roi: self.roi.iter().map(c).collect(),
            upsample: c(&self.upsample),
            score: c(&self.score),
        }
    }

    /// Checks that the layer shapes fit `cfg`.
    pub fn check_against(&self, cfg: &NetworkConfig) -> Result<()> {
        let want = Params::<T>::init(cfg, 0);
        let ours: Vec<_> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let theirs: Vec<_> = want
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if ours != theirs {
            return Err(Error::Config(format!(
                "parameter layout does not match the network config: {ours:?} vs {theirs:?}"
            )));
        }
        Ok(())
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: Params<T>,
    pub momentum: Params<T>,
    pub iteration: u64,
    /// Seed of the run RNG; draws at iteration `n` come from stream `n`.
    pub rng_seed: [u8; 32],
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let params = Params::init(cfg, cfg.seed);
        let momentum = params.zeros_like();
        let mut rng_seed = [0u8; 32];
        rng_seed[..8].copy_from_slice(&cfg.seed.to_le_bytes());
        rng_seed[8..16].copy_from_slice(b"roi-fcn\0");
        TrainState {
            params,
            momentum,
            iteration: 0,
            rng_seed,
        }
    }

    /// RNG for the current iteration.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.iteration);
        rng
    }
}

/// Where the ROI union of a forward pass comes from.
#[derive(Clone, Debug)]
pub enum MaskSource<'a> {
    /// Current proposals when detection is on, the full grid when off.
    Auto,
    /// A fixed feature-grid mask (used when checking gradients).
    Fixed(&'a RoiMask),
}

struct ConvTrace<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

struct Trace<T> {
    x: Tensor<T>,
    c1: ConvTrace<T>,
    c2: ConvTrace<T>,
    pool1: PoolIndices,
    c3: ConvTrace<T>,
    pool2: PoolIndices,
    rpn: Option<ConvTrace<T>>,
    rpn_out: Option<Tensor<T>>,
    roi: Vec<ConvTrace<T>>,
    up_in: Tensor<T>,
    score_in: Tensor<T>,
}

/// Output of [`forward`].
pub struct Forward<T> {
    /// One logit per anchor, empty with detection off.
    pub objectness: Vec<T>,
    pub deltas: Vec<[T; 4]>,
    pub proposals: Vec<Proposal>,
    /// `2 x H x W`, channel 0 background, channel 1 foreground.
    pub seg_scores: Tensor<T>,
    /// ROI union on the feature grid.
    pub roi_mask: RoiMask,
    trace: Trace<T>,
}

impl<T: Scalar> Forward<T> {
    pub fn roi_mask_image(&self, stride: usize) -> RoiMask {
        self.roi_mask.upscale(stride)
    }

    /// Foreground where the foreground score wins and the pixel lies in the
    /// ROI union.
    pub fn prediction(&self, stride: usize) -> BinaryMask {
        let gate = self.roi_mask_image(stride);
        let (_, h, w) = self.seg_scores.chw().expect("score map");
        let s = self.seg_scores.data();
        let plane = h * w;
        let cells = (0..plane)
            .map(|p| gate.cells()[p] && s[plane + p] > s[p])
            .collect();
        BinaryMask::from_cells(h, w, cells).expect("extents")
    }
}

fn conv_relu<T: Scalar>(x: Tensor<T>, p: &ConvParams<T>) -> Result<(Tensor<T>, ConvTrace<T>)> {
    let pre = conv2d_forward(&x, p)?;
    let out = relu(&pre);
    Ok((out, ConvTrace { input: x, pre }))
}

fn split_rpn<T: Scalar>(
    logits: &Tensor<T>,
    deltas: &Tensor<T>,
    n_scales: usize,
) -> (Vec<T>, Vec<[T; 4]>) {
    let (_, fh, fw) = deltas.chw().expect("rpn map");
    let plane = fh * fw;
    let d = deltas.data();
    let per_anchor = (0..n_scales * plane)
        .map(|a| {
            let (s, pos) = (a / plane, a % plane);
            std::array::from_fn(|c| d[(s * 4 + c) * plane + pos])
        })
        .collect();
    (logits.data().to_vec(), per_anchor)
}

fn merge_rpn_grads<T: Scalar>(dd: &[T], n_scales: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 4 * n_scales * plane];
    for a in 0..n_scales * plane {
        let (s, pos) = (a / plane, a % plane);
        for c in 0..4 {
            out[(s * 4 + c) * plane + pos] = dd[a * 4 + c];
        }
    }
    out
}

pub fn forward<T: Scalar>(
    image: &Tensor<T>,
    params: &Params<T>,
    cfg: &NetworkConfig,
    anchors: &[Anchor],
    mask_source: MaskSource<'_>,
) -> Result<Forward<T>> {
    if image.shape() != [1, cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            expected: vec![1, cfg.height, cfg.width],
            got: image.shape().to_vec(),
        });
    }
    let (fh, fw) = cfg.feature_extents();
    let (z1, c1) = conv_relu(image.clone(), &params.conv1)?;
    let (z2, c2) = conv_relu(z1, &params.conv2)?;
    let (p1, pool1) = maxpool2(&z2)?;
    let (z3, c3) = conv_relu(p1, &params.conv3)?;
    let (feat, pool2) = maxpool2(&z3)?;

    let mut objectness = Vec::new();
    let mut deltas = Vec::new();
    let mut proposals = Vec::new();
    let (mut rpn, mut rpn_out) = (None, None);
    if cfg.detection_enabled {
        let (zr, tr) = conv_relu(feat.clone(), &params.rpn_conv)?;
        let logits = conv2d_forward(&zr, &params.rpn_cls)?;
        let d = conv2d_forward(&zr, &params.rpn_reg)?;
        (objectness, deltas) = split_rpn(&logits, &d, cfg.rpn.scales.len());
        if objectness.len() != anchors.len() {
            return Err(Error::invalid(
                "forward",
                "anchor count does not match the objectness map",
            ));
        }
        if matches!(mask_source, MaskSource::Auto) {
            let scores: Vec<f64> = objectness.iter().map(|v| v.to_f64().unwrap()).collect();
            let bd: Vec<BoxDelta> = deltas
                .iter()
                .map(|d| BoxDelta::from_array(d.map(|v| v.to_f64().unwrap())))
                .collect();
            proposals = select_proposals(
                &scores,
                &bd,
                anchors,
                cfg.rpn.pre_nms_k,
                cfg.rpn.nms_thresh,
                cfg.rpn.post_nms_k,
                cfg.height,
                cfg.width,
                cfg.stride(),
            );
        }
        rpn = Some(tr);
        rpn_out = Some(zr);
    }
    let roi_mask = match mask_source {
        MaskSource::Fixed(m) => m.clone(),
        MaskSource::Auto if cfg.detection_enabled => {
            let boxes: Vec<_> = proposals.iter().map(|p| p.feature_box).collect();
            rasterize_rois(&boxes, fh, fw)?
        }
        MaskSource::Auto => RoiMask::full(fh, fw),
    };

    let mut h = feat;
    let mut roi = Vec::with_capacity(params.roi.len());
    for p in &params.roi {
        let pre = roi_conv_forward(&h, p, &roi_mask)?;
        let out = relu(&pre);
        roi.push(ConvTrace { input: h, pre });
        h = out;
    }
    let up = conv_transpose2d_forward(&h, &params.upsample)?;
    let seg_scores = conv2d_forward(&up, &params.score)?;

    Ok(Forward {
        objectness,
        deltas,
        proposals,
        seg_scores,
        roi_mask,
        trace: Trace {
            x: image.clone(),
            c1,
            c2,
            pool1,
            c3,
            pool2,
            rpn,
            rpn_out,
            roi,
            up_in: h,
            score_in: up,
        },
    })
}

/// Upstream gradients of the three heads.
pub struct HeadGrads<T> {
    pub seg_scores: Tensor<T>,
    /// Per anchor; empty with detection off.
    pub objectness: Vec<T>,
    pub deltas: Vec<T>,
}

fn accumulate<T: Scalar>(dst: &mut ConvParams<T>, g: &crate::tensor::ConvGrads<T>) {
    dst.kernel.add_assign(&g.dkernel);
    dst.bias.add_assign(&g.dbias);
}

/// Parameter gradients of the whole network given head gradients.
pub fn backward<T: Scalar>(
    fwd: &Forward<T>,
    params: &Params<T>,
    cfg: &NetworkConfig,
    heads: &HeadGrads<T>,
) -> Result<Params<T>> {
    let t = &fwd.trace;
    let mut grads = params.zeros_like();

    let g = conv2d_backward(&t.score_in, &params.score, &heads.seg_scores)?;
    accumulate(&mut grads.score, &g);
    let g = conv_transpose2d_backward(&t.up_in, &params.upsample, &g.dx)?;
    accumulate(&mut grads.upsample, &g);
    let mut dh = g.dx;
    for (l, p) in params.roi.iter().enumerate().rev() {
        let tr = &t.roi[l];
        let dpre = relu_backward(&tr.pre, &dh)?;
        let g = roi_conv_backward(&tr.input, p, &fwd.roi_mask, &dpre)?;
        accumulate(&mut grads.roi[l], &g);
        dh = g.dx;
    }
    let mut dfeat = dh;

    if let (Some(tr), Some(zr)) = (&t.rpn, &t.rpn_out) {
        if !heads.objectness.is_empty() {
            let (_, fh, fw) = zr.chw()?;
            let n_scales = cfg.rpn.scales.len();
            let dlogits = Tensor::from_vec(&[n_scales, fh, fw], heads.objectness.clone())?;
            let ddeltas = Tensor::from_vec(
                &[4 * n_scales, fh, fw],
                merge_rpn_grads(&heads.deltas, n_scales, fh * fw),
            )?;
            let gc = conv2d_backward(zr, &params.rpn_cls, &dlogits)?;
            let gr = conv2d_backward(zr, &params.rpn_reg, &ddeltas)?;
            accumulate(&mut grads.rpn_cls, &gc);
            accumulate(&mut grads.rpn_reg, &gr);
            let mut dzr = gc.dx;
            dzr.add_assign(&gr.dx);
            let dpre = relu_backward(&tr.pre, &dzr)?;
            let g = conv2d_backward(&tr.input, &params.rpn_conv, &dpre)?;
            accumulate(&mut grads.rpn_conv, &g);
            dfeat.add_assign(&g.dx);
        }
    }

    let dz3 = maxpool2_backward(&t.pool2, &dfeat)?;
    let g = conv2d_backward(&t.c3.input, &params.conv3, &relu_backward(&t.c3.pre, &dz3)?)?;
    accumulate(&mut grads.conv3, &g);
    let dz2 = maxpool2_backward(&t.pool1, &g.dx)?;
    let g = conv2d_backward(&t.c2.input, &params.conv2, &relu_backward(&t.c2.pre, &dz2)?)?;
    accumulate(&mut grads.conv2, &g);
    let g = conv2d_backward(&t.x, &params.conv1, &relu_backward(&t.c1.pre, &g.dx)?)?;
    accumulate(&mut grads.conv1, &g);
    Ok(grads)
}

/// Loss value, report and head gradients for one forward pass.
pub struct Objective<T> {
    pub report: LossReport,
    pub heads: HeadGrads<T>,
}

/// Evaluates `L = L_reg + L_cls + L_seg` on a forward pass. `targets` is
/// required when detection is enabled.
pub fn objective<T: Scalar>(
    fwd: &Forward<T>,
    gt_mask: &BinaryMask,
    targets: Option<&AnchorTargets>,
    cfg: &NetworkConfig,
) -> Result<Objective<T>> {
    let roi_img = fwd.roi_mask_image(cfg.stride());
    let seg = masked_seg_loss(&fwd.seg_scores, gt_mask, &roi_img)?;
    let mut report;
    let (mut dobj, mut ddelta) = (Vec::new(), Vec::new());
    match (cfg.detection_enabled, targets) {
        (true, Some(targets)) => {
            let cls = objectness_loss(&fwd.objectness, targets)?;
            let reg = regression_loss(&fwd.deltas, targets);
            report = LossReport::new(
                Some(reg.value.to_f64().unwrap()),
                Some(cls.loss.value.to_f64().unwrap()),
                seg.value.to_f64().unwrap(),
            );
            report.n_pos_anchors = targets.count(AnchorLabel::Positive);
            report.n_sampled_anchors = targets.n_sampled();
            report.no_sampled_anchors = cls.empty;
            dobj = cls.loss.grad;
            ddelta = reg.grad;
        }
        (true, None) => {
            return Err(Error::invalid(
                "objective",
                "anchor targets required with detection on",
            ))
        }
        (false, _) => report = LossReport::new(None, None, seg.value.to_f64().unwrap()),
    }
    report.n_inroi_pixels = roi_img.count();
    Ok(Objective {
        report,
        heads: HeadGrads {
            seg_scores: Tensor::from_vec(fwd.seg_scores.shape(), seg.grad)?,
            objectness: dobj,
            deltas: ddelta,
        },
    })
}

fn first_non_finite<T: Scalar>(named: Vec<(String, &Tensor<T>)>) -> Option<String> {
    named
        .into_iter()
        .find(|(_, t)| !t.all_finite())
        .map(|(n, _)| n)
}

/// One SGD iteration on one sample.
pub fn train_step(
    sample: &Sample,
    state: &mut TrainState<f32>,
    cfg: &NetworkConfig,
    anchors: &[Anchor],
) -> Result<LossReport> {
    let mut rng = state.step_rng();
    let fwd = forward(&sample.image, &state.params, cfg, anchors, MaskSource::Auto)?;
    if !fwd.seg_scores.all_finite() {
        return Err(Error::NonFinite {
            tensor: "seg_scores".into(),
        });
    }
    let targets = if cfg.detection_enabled {
        Some(assign_anchor_targets(
            anchors,
            &sample.gt_boxes,
            cfg.rpn.iou_hi,
            cfg.rpn.iou_lo,
            cfg.rpn.max_samples,
            &mut rng,
        )?)
    } else {
        None
    };
    let obj = objective(&fwd, &sample.gt_mask, targets.as_ref(), cfg)?;
    if !obj.report.total.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
        });
    }
    let grads = backward(&fwd, &state.params, cfg, &obj.heads)?;
    if let Some(name) = first_non_finite(grads.named_tensors()) {
        return Err(Error::NonFinite {
            tensor: format!("grad:{name}"),
        });
    }
    apply_sgd(state, &grads, &cfg.sgd);
    if let Some(name) = first_non_finite(state.params.named_tensors()) {
        return Err(Error::NonFinite { tensor: name });
    }
    Ok(obj.report)
}

/// Momentum SGD over every parameter, then advances the iteration counter.
pub fn apply_sgd<T: Scalar>(state: &mut TrainState<T>, grads: &Params<T>, sgd: &SgdConfig) {
    let lr = sgd.lr_at(state.iteration);
    let grads = grads.named_tensors();
    for (((_, p), (_, v)), (_, g)) in state
        .params
        .named_tensors_mut()
        .into_iter()
        .zip(state.momentum.named_tensors_mut())
        .zip(grads)
    {
        sgd_update(p, v, g, lr, sgd.momentum, sgd.weight_decay);
    }
    state.iteration += 1;
}

/// Inference on one image: forward pass and the ROI-gated prediction.
pub fn predict(
    image: &Tensor<f32>,
    params: &Params<f32>,
    cfg: &NetworkConfig,
    anchors: &[Anchor],
) -> Result<(BinaryMask, Forward<f32>)> {
    let fwd = forward(image, params, cfg, anchors, MaskSource::Auto)?;
    Ok((fwd.prediction(cfg.stride()), fwd))
}
