//! Spacing-adaptive convolution.
//!
//! A SPAD-conv stores the weights of an isotropic base convolution. For
//! every input it derives an adapted view from the input's degree of
//! anisotropy: depth resampling and depth aggregation are switched off by
//! sum-pooling the kernel along depth and shrinking the depth stride. The
//! stored weight never changes shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    degree_of_anisotropy, propagate_spacing, AnisotropyDegree, Dims3, Direction, Spacing,
};
use crate::tensor::{
    conv3d, conv3d_transposed, sum_pool_depth, ConvGeometry, Graph, Real, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "k", rename_all = "snake_case")]
pub enum ConvKind {
    Downsample,
    K3s1,
    Upsample,
    /// Kernel and stride `2^k`.
    GeneralizedDown(u32),
    GeneralizedUp(u32),
}

impl ConvKind {
    pub fn is_transposed(self) -> bool {
        matches!(self, ConvKind::Upsample | ConvKind::GeneralizedUp(_))
    }

    pub fn resamples_down(self) -> bool {
        matches!(self, ConvKind::Downsample | ConvKind::GeneralizedDown(_))
    }
}

/// An isotropic base convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseConvSpec {
    pub kind: ConvKind,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl BaseConvSpec {
    pub fn downsample(kernel: usize, channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(ConvKind::Downsample, kernel, 2, channels_in, channels_out)
    }

    pub fn k3s1(channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(ConvKind::K3s1, 3, 1, channels_in, channels_out)
    }

    pub fn upsample(kernel: usize, channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(ConvKind::Upsample, kernel, 2, channels_in, channels_out)
    }

    pub fn generalized_down(k: u32, channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(
            ConvKind::GeneralizedDown(k),
            pow2(k)?,
            pow2(k)?,
            channels_in,
            channels_out,
        )
    }

    pub fn generalized_up(k: u32, channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(
            ConvKind::GeneralizedUp(k),
            pow2(k)?,
            pow2(k)?,
            channels_in,
            channels_out,
        )
    }

    fn checked(kind: ConvKind, k: usize, s: usize, cin: usize, cout: usize) -> Result<Self> {
        let spec = Self {
            kind,
            kernel: [k; 3],
            stride: [s; 3],
            channels_in: cin,
            channels_out: cout,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Check the per-kind kernel/stride contract.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Adaptation(format!("{why}: {self:?}")));
        if self.kernel.iter().any(|&k| k != self.kernel[0])
            || self.stride.iter().any(|&s| s != self.stride[0])
        {
            return bad("base convolution must be isotropic");
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return bad("channel counts must be positive");
        }
        let (k, s) = (self.kernel[0], self.stride[0]);
        match self.kind {
            ConvKind::Downsample | ConvKind::Upsample if !(k == 2 || k == 3) || s != 2 => {
                bad("resampling base needs kernel 2 or 3 and stride 2")
            }
            ConvKind::K3s1 if k != 3 || s != 1 => bad("k3s1 base needs kernel 3, stride 1"),
            ConvKind::GeneralizedDown(e) | ConvKind::GeneralizedUp(e)
                if e == 0 || k != 1 << e || s != 1 << e =>
            {
                bad("generalized base needs kernel == stride == 2^k with k >= 1")
            }
            _ => Ok(()),
        }
    }

    /// Shape of the stored (base) weight.
    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        if self.kind.is_transposed() {
            [self.channels_in, self.channels_out, kd, kh, kw]
        } else {
            [self.channels_out, self.channels_in, kd, kh, kw]
        }
    }

    fn base_padding(&self) -> Dims3 {
        match self.kind {
            ConvKind::K3s1 => [1, 1, 1],
            _ => [0, 0, 0],
        }
    }
}

fn pow2(k: u32) -> Result<usize> {
    if k == 0 || k > 16 {
        return Err(Error::Adaptation(format!(
            "generalized exponent must be in 1..=16, got {k}"
        )));
    }
    Ok(1usize << k)
}

/// The per-input view of a base convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvAdaptation {
    pub effective_kernel: Dims3,
    pub effective_stride: Dims3,
    pub padding: Dims3,
    /// Sum-pooling window applied to the base weight along depth.
    pub depth_pool_window: usize,
    pub output_spacing: Spacing,
}

impl ConvAdaptation {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.effective_kernel, self.effective_stride, self.padding)
    }

    pub fn depth_resampled(&self) -> bool {
        self.effective_stride[0] > 1
    }

    /// log2 of the effective depth stride.
    pub fn depth_factor_log2(&self) -> u32 {
        self.effective_stride[0].trailing_zeros()
    }
}

/// What the symmetric encoder stage did along depth; drives decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderHistory {
    DepthResampled(bool),
    /// Effective number of depth halvings `k0` of a generalized downsampling.
    DepthFactorLog2(u32),
}

fn build(
    spec: &BaseConvSpec,
    depth_kernel: usize,
    depth_stride: usize,
    input: &Spacing,
) -> Result<ConvAdaptation> {
    let base_kd = spec.kernel[0];
    if depth_kernel == 0 || !base_kd.is_multiple_of(depth_kernel) {
        return Err(Error::Adaptation(format!(
            "depth kernel {depth_kernel} does not divide base kernel {base_kd}"
        )));
    }
    let mut padding = spec.base_padding();
    if depth_kernel == 1 {
        padding[0] = 0;
    }
    let stride = [depth_stride, spec.stride[1], spec.stride[2]];
    let direction = if spec.kind.is_transposed() {
        Direction::Upsample
    } else {
        Direction::Downsample
    };
    Ok(ConvAdaptation {
        effective_kernel: [depth_kernel, spec.kernel[1], spec.kernel[2]],
        effective_stride: stride,
        padding,
        depth_pool_window: base_kd / depth_kernel,
        output_spacing: propagate_spacing(input, stride, direction)?,
    })
}

/// Adapt a downsample / k3s1 / upsample base convolution.
///
/// `history` must be given exactly for decoder (upsampling) kinds.
pub fn adapt_conv(
    spec: &BaseConvSpec,
    da: AnisotropyDegree,
    history: Option<EncoderHistory>,
    input: &Spacing,
) -> Result<ConvAdaptation> {
    spec.validate()?;
    match (spec.kind, history) {
        (ConvKind::GeneralizedDown(k), None) => {
            adapt_generalized(spec, k, da, Direction::Downsample, None, input)
        }
        (ConvKind::GeneralizedUp(k), Some(EncoderHistory::DepthFactorLog2(k0))) => {
            adapt_generalized(spec, k, da, Direction::Upsample, Some(k0), input)
        }
        (ConvKind::Downsample, None) => {
            if da.is_anisotropic() {
                build(spec, 1, 1, input)
            } else {
                build(spec, spec.kernel[0], spec.stride[0], input)
            }
        }
        (ConvKind::K3s1, None) => {
            let kd = if da.is_anisotropic() { 1 } else { 3 };
            build(spec, kd, 1, input)
        }
        (ConvKind::Upsample, Some(EncoderHistory::DepthResampled(resampled))) => {
            if resampled {
                build(spec, spec.kernel[0], spec.stride[0], input)
            } else {
                build(spec, 1, 1, input)
            }
        }
        (kind, h) => Err(Error::Plan(format!(
            "encoder history {h:?} does not fit a {kind:?} stage (required iff upsampling)"
        ))),
    }
}

/// Adaptation computed from the input spacing alone.
pub fn adapt_conv_for(
    spec: &BaseConvSpec,
    input: &Spacing,
    history: Option<EncoderHistory>,
) -> Result<ConvAdaptation> {
    adapt_conv(spec, degree_of_anisotropy(input), history, input)
}

/// Generalized `2^k` resampling. Downsampling keeps `k0 = max(k - da, 0)`
/// depth halvings; upsampling mirrors the encoder's recorded `k0`.
pub fn adapt_generalized(
    spec: &BaseConvSpec,
    k: u32,
    da: AnisotropyDegree,
    direction: Direction,
    encoder_k0: Option<u32>,
    input: &Spacing,
) -> Result<ConvAdaptation> {
    let full = pow2(k)?;
    if spec.kernel[0] != full {
        return Err(Error::Adaptation(format!(
            "spec kernel {:?} is not 2^{k}",
            spec.kernel
        )));
    }
    let k0 = match (direction, encoder_k0) {
        (Direction::Downsample, None) => k.saturating_sub(da.get()),
        (Direction::Upsample, Some(k0)) if k0 <= k => k0,
        (Direction::Upsample, Some(k0)) => {
            return Err(Error::Plan(format!("encoder k0={k0} exceeds k={k}")));
        }
        (Direction::Upsample, None) => {
            return Err(Error::Plan(
                "generalized upsampling needs the encoder's k0".into(),
            ));
        }
        (Direction::Downsample, Some(_)) => {
            return Err(Error::Plan(
                "generalized downsampling takes no encoder history".into(),
            ));
        }
    };
    let depth = 1usize << k0;
    build(spec, depth, depth, input)
}

/// Sum contiguous depth windows of a base weight.
pub fn sum_pool_weights<T: Real>(weight: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    sum_pool_depth(weight, window)
}

/// A feature map with its physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    pub data: Tensor<T>,
    pub spacing: Spacing,
}

fn check_weight<T: Real>(spec: &BaseConvSpec, weight: &Tensor<T>) -> Result<()> {
    if weight.shape() != spec.weight_shape() {
        return Err(Error::Dimension(format!(
            "weight {:?} does not match base shape {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

/// Adapt `spec` to the input's spacing and run it with the base `weight`.
pub fn apply_spad_conv<T: Real>(
    input: &FeatureMap<T>,
    spec: &BaseConvSpec,
    weight: &Tensor<T>,
    history: Option<EncoderHistory>,
) -> Result<(FeatureMap<T>, ConvAdaptation)> {
    check_weight(spec, weight)?;
    let adaptation = adapt_conv_for(spec, &input.spacing, history)?;
    let w = sum_pool_weights(weight, adaptation.depth_pool_window)?;
    let geom = adaptation.geometry();
    let data = if spec.kind.is_transposed() {
        conv3d_transposed(&input.data, &w, &geom)?
    } else {
        conv3d(&input.data, &w, &geom)?
    };
    Ok((
        FeatureMap {
            data,
            spacing: adaptation.output_spacing,
        },
        adaptation,
    ))
}

/// Graph version of [`apply_spad_conv`] for an already computed adaptation.
pub fn apply_adapted<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    spec: &BaseConvSpec,
    adaptation: &ConvAdaptation,
) -> Result<Var> {
    check_weight(spec, g.value(weight))?;
    let w = g.sum_pool_depth(weight, adaptation.depth_pool_window)?;
    if spec.kind.is_transposed() {
        g.conv3d_transposed(x, w, adaptation.geometry())
    } else {
        g.conv3d(x, w, adaptation.geometry())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStage {
    pub index: usize,
    pub spec: BaseConvSpec,
    pub da: AnisotropyDegree,
    pub adaptation: ConvAdaptation,
    pub input_spacing: Spacing,
    pub output_spacing: Spacing,
    pub depth_resampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub input_spacing: Spacing,
    pub stages: Vec<PlanStage>,
}

impl NetworkPlan {
    pub fn output_spacing(&self) -> Spacing {
        self.stages
            .last()
            .map_or(self.input_spacing, |s| s.output_spacing)
    }

    /// Effective depth strides of the resampling stages of one direction.
    pub fn depth_strides(&self, direction: Direction) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|s| match direction {
                Direction::Downsample => s.spec.kind.resamples_down(),
                Direction::Upsample => s.spec.kind.is_transposed(),
            })
            .map(|s| s.adaptation.effective_stride[0])
            .collect()
    }
}

/// Walk `stages` in order from `input`, recomputing DA from the running
/// spacing. Decoder stages consume the encoder's records in reverse order.
pub fn plan_network(stages: &[BaseConvSpec], input: Spacing) -> Result<NetworkPlan> {
    let mut history: Vec<(ConvKind, EncoderHistory)> = Vec::new();
    let mut spacing = input;
    let mut out = Vec::with_capacity(stages.len());
    for (index, spec) in stages.iter().enumerate() {
        let da = degree_of_anisotropy(&spacing);
        let record = if spec.kind.is_transposed() {
            let (enc_kind, h) = history.pop().ok_or_else(|| {
                Error::Plan(format!(
                    "stage {index}: upsampling without a matching encoder stage"
                ))
            })?;
            let mirrored = matches!(
                (enc_kind, spec.kind),
                (ConvKind::Downsample, ConvKind::Upsample)
            ) || matches!(
                (enc_kind, spec.kind),
                (ConvKind::GeneralizedDown(a), ConvKind::GeneralizedUp(b)) if a == b
            );
            if !mirrored {
                return Err(Error::Plan(format!(
                    "stage {index}: {:?} does not mirror encoder {enc_kind:?}",
                    spec.kind
                )));
            }
            Some(h)
        } else {
            None
        };
        let adaptation = adapt_conv(spec, da, record, &spacing)?;
        match spec.kind {
            ConvKind::Downsample => history.push((
                spec.kind,
                EncoderHistory::DepthResampled(adaptation.depth_resampled()),
            )),
            ConvKind::GeneralizedDown(_) => history.push((
                spec.kind,
                EncoderHistory::DepthFactorLog2(adaptation.depth_factor_log2()),
            )),
            _ => {}
        }
        out.push(PlanStage {
            index,
            spec: *spec,
            da,
            adaptation,
            input_spacing: spacing,
            output_spacing: adaptation.output_spacing,
            depth_resampled: adaptation.depth_resampled(),
        });
        spacing = adaptation.output_spacing;
    }
    Ok(NetworkPlan {
        input_spacing: input,
        stages: out,
    })
}

/// Channel widths of the built-in four-stage U-Net.
pub const UNET4_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Encoder stages (k3s1 then k2 downsampling) for each width, followed by
/// the mirrored decoder (k2 upsampling then k3s1) back to `widths[0]`.
pub fn mirrored_stages(in_channels: usize, widths: &[usize]) -> Result<Vec<BaseConvSpec>> {
    if widths.is_empty() {
        return Err(Error::Config("at least one stage width is required".into()));
    }
    let mut stages = Vec::new();
    let mut c = in_channels;
    for &w in widths {
        stages.push(BaseConvSpec::k3s1(c, w)?);
        stages.push(BaseConvSpec::downsample(2, w, w)?);
        c = w;
    }
    for i in (0..widths.len()).rev() {
        let next = widths[i.saturating_sub(1)];
        stages.push(BaseConvSpec::upsample(2, widths[i], next)?);
        stages.push(BaseConvSpec::k3s1(next, next)?);
    }
    Ok(stages)
}

/// The built-in four-stage U-Net layout with [`UNET4_WIDTHS`].
pub fn unet4_stages(in_channels: usize) -> Vec<BaseConvSpec> {
    mirrored_stages(in_channels, &UNET4_WIDTHS).expect("valid built-in layout")
}
