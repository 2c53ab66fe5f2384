//! Pixel difference convolution: angular and radial pair sets, the exact
//! rewrite into vanilla convolution, and the two-block feature branches.
//!
//! A PDC layer applies its kernel weights to differences of pixel pairs
//! inside the window instead of raw pixels. Scattering +w to each pair's
//! sampled offset and −w to its subtracted offset produces an ordinary dense
//! kernel computing the identical map, which is the fast execution path.
//!
//! PDC layers pad by edge replication, not zeros: a replicated border keeps
//! constant inputs constant, so the difference form annihilates them at every
//! output site and shifting an image by a constant cannot leak through the
//! border.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::rng::Prng;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Offset relative to the window center, |dy|,|dx| ≤ (k−1)/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offset {
    pub dy: i8,
    pub dx: i8,
}

impl Offset {
    pub const fn new(dy: i8, dx: i8) -> Self {
        Offset { dy, dx }
    }
}

/// One sampled/subtracted pair owning a single weight slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPair {
    pub sampled: Offset,
    pub subtracted: Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Angular,
    Radial,
}

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            PairKind::Angular => "angular",
            PairKind::Radial => "radial",
        }
    }
}

/// The 3×3 ring offsets in clockwise raster-ring order, starting top-left.
const RING: [Offset; 8] = [
    Offset::new(-1, -1),
    Offset::new(-1, 0),
    Offset::new(-1, 1),
    Offset::new(0, 1),
    Offset::new(1, 1),
    Offset::new(1, 0),
    Offset::new(1, -1),
    Offset::new(0, -1),
];

/// Compass directions N, NE, E, SE, S, SW, W, NW as unit offsets.
const COMPASS: [Offset; 8] = [
    Offset::new(-1, 0),
    Offset::new(-1, 1),
    Offset::new(0, 1),
    Offset::new(1, 1),
    Offset::new(1, 0),
    Offset::new(1, -1),
    Offset::new(0, -1),
    Offset::new(-1, -1),
];

/// Ordered pair list for one PDC variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPairSet {
    kind: PairKind,
    kernel_size: usize,
    pairs: Vec<PixelPair>,
}

impl PixelPairSet {
    /// 8 pairs over the 3×3 ring: each ring offset paired with its clockwise
    /// successor, forming a single closed cycle. The center is unused.
    pub fn angular() -> Self {
        let pairs = (0..8)
            .map(|j| PixelPair {
                sampled: RING[j],
                subtracted: RING[(j + 1) % 8],
            })
            .collect();
        PixelPairSet { kind: PairKind::Angular, kernel_size: 3, pairs }
    }

    /// 8 pairs over the 5×5 window: for each compass direction d, the
    /// radius-2 position 2·d paired with the radius-1 position 1·d.
    pub fn radial() -> Self {
        let pairs = COMPASS
            .iter()
            .map(|d| PixelPair {
                sampled: Offset::new(2 * d.dy, 2 * d.dx),
                subtracted: *d,
            })
            .collect();
        PixelPairSet { kind: PairKind::Radial, kernel_size: 5, pairs }
    }

    pub fn for_kind(kind: PairKind) -> Self {
        match kind {
            PairKind::Angular => Self::angular(),
            PairKind::Radial => Self::radial(),
        }
    }

    pub fn kind(&self) -> PairKind {
        self.kind
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn pairs(&self) -> &[PixelPair] {
        &self.pairs
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Checks the structural invariants of the pair set.
    pub fn validate(&self) -> Result<()> {
        let r = ((self.kernel_size - 1) / 2) as i8;
        for p in &self.pairs {
            for o in [p.sampled, p.subtracted] {
                if o.dy.abs() > r || o.dx.abs() > r {
                    return Err(CoreError::Contract {
                        op: "PixelPairSet::validate",
                        detail: format!("offset ({}, {}) outside radius {r}", o.dy, o.dx),
                    });
                }
            }
            if p.sampled == p.subtracted {
                return Err(CoreError::Contract {
                    op: "PixelPairSet::validate",
                    detail: "pair samples and subtracts the same offset".into(),
                });
            }
        }
        match self.kind {
            PairKind::Angular => {
                // Closed cycle: every ring offset appears exactly once as
                // sampled and once as subtracted.
                for o in RING {
                    let ns = self.pairs.iter().filter(|p| p.sampled == o).count();
                    let nu = self.pairs.iter().filter(|p| p.subtracted == o).count();
                    if ns != 1 || nu != 1 {
                        return Err(CoreError::Contract {
                            op: "PixelPairSet::validate",
                            detail: format!("ring offset ({}, {}) sampled {ns}, subtracted {nu}", o.dy, o.dx),
                        });
                    }
                }
            }
            PairKind::Radial => {
                for (p, d) in self.pairs.iter().zip(COMPASS.iter()) {
                    if p.sampled != Offset::new(2 * d.dy, 2 * d.dx) || p.subtracted != *d {
                        return Err(CoreError::Contract {
                            op: "PixelPairSet::validate",
                            detail: "radial pair is not (2d, d) on a compass direction".into(),
                        });
                    }
                }
            }
        }
        if self.pairs.len() != 8 {
            return Err(CoreError::Contract {
                op: "PixelPairSet::validate",
                detail: format!("expected 8 pairs, got {}", self.pairs.len()),
            });
        }
        Ok(())
    }
}

/// A PDC kernel: one weight per (out channel, in channel, pair).
#[derive(Debug, Clone)]
pub struct PdcKernel {
    pair_set: PixelPairSet,
    weights: Tensor,
}

impl PdcKernel {
    pub fn new(pair_set: PixelPairSet, weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 3 || s[2] != pair_set.num_pairs() {
            return Err(CoreError::ShapeMismatch {
                op: "PdcKernel::new",
                detail: format!("weights {s:?}, expected [cout, cin, {}]", pair_set.num_pairs()),
            });
        }
        Ok(PdcKernel { pair_set, weights })
    }

    pub fn pair_set(&self) -> &PixelPairSet {
        &self.pair_set
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Scatters the pair weights into an equivalent dense convolution kernel.
    pub fn convert(&self) -> ConvertedKernel {
        let s = self.weights.shape();
        let k = self.pair_set.kernel_size();
        let data = kernels::scatter_pdc(self.weights.data(), s[0], s[1], k, self.pair_set.pairs());
        ConvertedKernel {
            weights: Tensor::from_vec(&[s[0], s[1], k, k], data).expect("scatter shape is consistent"),
        }
    }

    /// Direct pair-wise evaluation (value level, no tape).
    pub fn forward_direct(&self, input: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (cin, h, w) = shape3(input, "pdc_forward_direct")?;
        if cin != self.in_channels() {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_forward_direct",
                detail: format!("input channels {cin} vs kernel {}", self.in_channels()),
            });
        }
        let k = self.pair_set.kernel_size();
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if k > hp || k > wp {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_forward_direct",
                detail: format!("window {k} larger than padded input {hp}x{wp}"),
            });
        }
        let padded;
        let src = if padding > 0 {
            padded = kernels::pad_replicate(input.data(), cin, h, w, padding);
            &padded[..]
        } else {
            input.data()
        };
        let (data, ho, wo) = kernels::pdc_direct(
            src,
            cin,
            hp,
            wp,
            self.weights.data(),
            self.out_channels(),
            k,
            self.pair_set.pairs(),
            stride,
        );
        Tensor::from_vec(&[self.out_channels(), ho, wo], data)
    }

    /// Converted evaluation: replicate-pad, then vanilla convolution with the
    /// scattered kernel. Identical to `forward_direct` up to f64 rounding.
    pub fn forward_converted(&self, input: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (cin, h, w) = shape3(input, "pdc_forward_converted")?;
        if cin != self.in_channels() {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_forward_converted",
                detail: format!("input channels {cin} vs kernel {}", self.in_channels()),
            });
        }
        let k = self.pair_set.kernel_size();
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if k > hp || k > wp {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_forward_converted",
                detail: format!("window {k} larger than padded input {hp}x{wp}"),
            });
        }
        let padded;
        let src = if padding > 0 {
            padded = kernels::pad_replicate(input.data(), cin, h, w, padding);
            &padded[..]
        } else {
            input.data()
        };
        let converted = self.convert();
        let (data, ho, wo) = kernels::conv2d(
            src,
            cin,
            hp,
            wp,
            converted.weights.data(),
            self.out_channels(),
            k,
            stride,
            0,
        );
        Tensor::from_vec(&[self.out_channels(), ho, wo], data)
    }
}

/// Dense k×k kernel produced by the PDC weight conversion. Every k×k slice
/// sums to zero because each pair contributes +w and −w.
#[derive(Debug, Clone)]
pub struct ConvertedKernel {
    pub weights: Tensor,
}

fn shape3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(CoreError::ShapeMismatch { op, detail: format!("expected rank 3, got {s:?}") });
    }
    Ok((s[0], s[1], s[2]))
}

// ---------------------------------------------------------------------------
// Tape-level forward ops
// ---------------------------------------------------------------------------

/// Direct pair-wise PDC on the tape, differentiable w.r.t. input and weights.
pub fn forward_direct(
    tape: &mut GradTape,
    input: Var,
    weights: Var,
    pair_set: &PixelPairSet,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let padded = tape.pad_replicate(input, padding)?;
    tape.pdc_pairs(padded, weights, pair_set, stride)
}

/// Converted-form PDC on the tape: scatter to a dense kernel, then convolve.
pub fn forward_converted(
    tape: &mut GradTape,
    input: Var,
    weights: Var,
    pair_set: &PixelPairSet,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let padded = tape.pad_replicate(input, padding)?;
    let dense = tape.scatter_pdc(weights, pair_set)?;
    tape.conv2d(padded, dense, stride, 0)
}

// ---------------------------------------------------------------------------
// PDC blocks and the two-branch backbone
// ---------------------------------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;

/// Architecture of one PDC block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PdcLayerSpec {
    pub kind: PairKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Learned state of one PDC block: pair weights plus per-channel norm affine.
#[derive(Debug, Clone)]
pub struct PdcBlockParams {
    pub spec: PdcLayerSpec,
    pub weights: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct PdcBlockVars {
    pub weights: Var,
    pub gain: Var,
    pub bias: Var,
}

impl PdcBlockParams {
    pub fn init(spec: PdcLayerSpec, rng: &mut Prng) -> Self {
        let np = PixelPairSet::for_kind(spec.kind).num_pairs();
        PdcBlockParams {
            spec,
            weights: crate::rng::trunc_normal(&[spec.out_channels, spec.in_channels, np], 0.02, rng),
            gain: Tensor::full(&[spec.out_channels], 1.0),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> PdcBlockVars {
        let reg = |tape: &mut GradTape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.input(t.clone())
            }
        };
        PdcBlockVars {
            weights: reg(tape, &self.weights),
            gain: reg(tape, &self.gain),
            bias: reg(tape, &self.bias),
        }
    }
}

/// One block: converted-form PDC conv → per-channel standardization → ReLU.
/// Padding is (k−1)/2 so a stride of 2 exactly halves even spatial dims.
pub fn pdc_block(
    tape: &mut GradTape,
    input: Var,
    vars: &PdcBlockVars,
    spec: &PdcLayerSpec,
) -> Result<Var> {
    let pair_set = PixelPairSet::for_kind(spec.kind);
    let padding = (pair_set.kernel_size() - 1) / 2;
    let y = forward_converted(tape, input, vars.weights, &pair_set, spec.stride, padding)?;
    let y = tape.channel_norm(y, vars.gain, vars.bias, NORM_EPS)?;
    tape.relu(y)
}

/// Learned state of a two-block branch (one PDC variant).
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub blocks: [PdcBlockParams; 2],
}

impl BranchParams {
    /// Two blocks, each stride 2, so the branch downsamples 4×.
    pub fn init(kind: PairKind, in_channels: usize, width: usize, base_seed: u64, tag: &str) -> Self {
        let spec0 = PdcLayerSpec { kind, in_channels, out_channels: width, stride: 2 };
        let spec1 = PdcLayerSpec { kind, in_channels: width, out_channels: width, stride: 2 };
        let mut rng0 = crate::rng::seeded(crate::rng::component_seed(base_seed, &format!("{tag}.block0")));
        let mut rng1 = crate::rng::seeded(crate::rng::component_seed(base_seed, &format!("{tag}.block1")));
        BranchParams {
            blocks: [PdcBlockParams::init(spec0, &mut rng0), PdcBlockParams::init(spec1, &mut rng1)],
        }
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> [PdcBlockVars; 2] {
        [
            self.blocks[0].register(tape, trainable),
            self.blocks[1].register(tape, trainable),
        ]
    }
}

pub fn pdc_branch(
    tape: &mut GradTape,
    image: Var,
    params: &BranchParams,
    vars: &[PdcBlockVars; 2],
) -> Result<Var> {
    let x = pdc_block(tape, image, &vars[0], &params.blocks[0].spec)?;
    pdc_block(tape, x, &vars[1], &params.blocks[1].spec)
}

/// Which PDC branches feed the classifier: angular only, radial only, or
/// both concatenated (the full model).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Apdc,
    Rpdc,
    Pdc,
}

impl Variant {
    pub fn has_angular(self) -> bool {
        matches!(self, Variant::Apdc | Variant::Pdc)
    }

    pub fn has_radial(self) -> bool {
        matches!(self, Variant::Rpdc | Variant::Pdc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Apdc => "apdc",
            Variant::Rpdc => "rpdc",
            Variant::Pdc => "pdc",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "apdc" => Some(Variant::Apdc),
            "rpdc" => Some(Variant::Rpdc),
            "pdc" => Some(Variant::Pdc),
            _ => None,
        }
    }

    pub const ALL: [Variant; 3] = [Variant::Apdc, Variant::Rpdc, Variant::Pdc];
}

/// Feature extractor: an angular branch (two 3×3 PDC blocks, stride 2 each)
/// and/or a radial branch (two 5×5 PDC blocks, stride 2 each). Each branch
/// downsamples 4×; with both selected the outputs are concatenated along
/// channels.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub variant: Variant,
    pub angular: Option<BranchParams>,
    pub radial: Option<BranchParams>,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub angular: Option<[PdcBlockVars; 2]>,
    pub radial: Option<[PdcBlockVars; 2]>,
}

impl BackboneParams {
    /// Branch init streams are keyed by branch name, so the angular branch of
    /// a combined model is parameter-identical to an angular-only model with
    /// the same seed.
    pub fn init(variant: Variant, in_channels: usize, width: usize, base_seed: u64) -> Self {
        BackboneParams {
            variant,
            angular: variant
                .has_angular()
                .then(|| BranchParams::init(PairKind::Angular, in_channels, width, base_seed, "angular")),
            radial: variant
                .has_radial()
                .then(|| BranchParams::init(PairKind::Radial, in_channels, width, base_seed, "radial")),
        }
    }

    /// Output channels (branch width, doubled when both branches run).
    pub fn out_channels(&self) -> usize {
        let w = self
            .angular
            .as_ref()
            .or(self.radial.as_ref())
            .map(|b| b.blocks[1].spec.out_channels)
            .unwrap_or(0);
        match self.variant {
            Variant::Pdc => 2 * w,
            _ => w,
        }
    }

    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> BackboneVars {
        BackboneVars {
            angular: self.angular.as_ref().map(|b| b.register(tape, trainable)),
            radial: self.radial.as_ref().map(|b| b.register(tape, trainable)),
        }
    }
}

/// Runs the selected branches on a [c, h, w] image (h and w divisible by 4)
/// and returns a [c', h/4, w/4] feature map.
pub fn pdc_backbone(
    tape: &mut GradTape,
    image: Var,
    params: &BackboneParams,
    vars: &BackboneVars,
) -> Result<Var> {
    let s = tape.value(image).shape().to_vec();
    if s.len() != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
        return Err(CoreError::ShapeMismatch {
            op: "pdc_backbone",
            detail: format!("image {s:?} must be rank 3 with spatial dims divisible by 4"),
        });
    }
    let mut outs: Vec<Var> = Vec::new();
    if let (Some(p), Some(v)) = (&params.angular, &vars.angular) {
        outs.push(pdc_branch(tape, image, p, v)?);
    }
    if let (Some(p), Some(v)) = (&params.radial, &vars.radial) {
        outs.push(pdc_branch(tape, image, p, v)?);
    }
    match outs.len() {
        0 => Err(CoreError::Contract {
            op: "pdc_backbone",
            detail: "no branch selected".into(),
        }),
        1 => Ok(outs[0]),
        _ => {
            // Channel concatenation via a [c, h·w] view.
            let (h, w) = (s[1] / 4, s[2] / 4);
            let mut flat = Vec::with_capacity(outs.len());
            let mut total_c = 0;
            for &o in &outs {
                let os = tape.value(o).shape().to_vec();
                total_c += os[0];
                flat.push(tape.reshape(o, &[os[0], os[1] * os[2]])?);
            }
            let cat = tape.concat_rows(&flat)?;
            tape.reshape(cat, &[total_c, h, w])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    fn ring_index(o: Offset) -> usize {
        RING.iter().position(|r| *r == o).expect("offset on ring")
    }

    #[test]
    fn angular_pairs_enumeration() {
        let ps = PixelPairSet::angular();
        assert_eq!(ps.num_pairs(), 8);
        assert_eq!(ps.kernel_size(), 3);
        assert_eq!(
            ps.pairs()[0],
            PixelPair { sampled: Offset::new(-1, -1), subtracted: Offset::new(-1, 0) }
        );
        // Closed cycle: multiset of sampled == multiset of subtracted.
        let mut sampled: Vec<_> = ps.pairs().iter().map(|p| (p.sampled.dy, p.sampled.dx)).collect();
        let mut subtracted: Vec<_> = ps.pairs().iter().map(|p| (p.subtracted.dy, p.subtracted.dx)).collect();
        sampled.sort_unstable();
        subtracted.sort_unstable();
        assert_eq!(sampled, subtracted);
        // Center unused.
        assert!(ps.pairs().iter().all(|p| p.sampled != Offset::new(0, 0) && p.subtracted != Offset::new(0, 0)));
        ps.validate().unwrap();
    }

    #[test]
    fn radial_pairs_enumeration() {
        let ps = PixelPairSet::radial();
        assert_eq!(ps.num_pairs(), 8);
        assert_eq!(ps.kernel_size(), 5);
        // Direction E is compass index 2.
        assert_eq!(
            ps.pairs()[2],
            PixelPair { sampled: Offset::new(0, 2), subtracted: Offset::new(0, 1) }
        );
        assert_eq!(
            ps.pairs()[7],
            PixelPair { sampled: Offset::new(-2, -2), subtracted: Offset::new(-1, -1) }
        );
        for p in ps.pairs() {
            assert!(p.sampled.dy.abs() <= 2 && p.sampled.dx.abs() <= 2);
            assert!(p.subtracted.dy.abs() <= 2 && p.subtracted.dx.abs() <= 2);
        }
        ps.validate().unwrap();
    }

    #[test]
    fn convert_angular_ring_coefficients() {
        // Weights 1..8 in ring order: converted ring value at position j is
        // w_j − w_{j−1 mod 8}, center zero.
        let weights = Tensor::from_vec(&[1, 1, 8], (1..=8).map(|v| v as f64).collect()).unwrap();
        let kernel = PdcKernel::new(PixelPairSet::angular(), weights).unwrap();
        let conv = kernel.convert();
        let expected_ring = [-7.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        for (j, o) in RING.iter().enumerate() {
            let idx = ((o.dy + 1) * 3 + (o.dx + 1)) as usize;
            assert_eq!(conv.weights.data()[idx], expected_ring[j], "ring position {j}");
        }
        let center = conv.weights.data()[4];
        assert_eq!(center, 0.0);
        assert_eq!(ring_index(Offset::new(-1, -1)), 0);
    }

    #[test]
    fn convert_equal_angular_weights_is_zero() {
        let weights = Tensor::full(&[2, 3, 8], 0.73);
        let kernel = PdcKernel::new(PixelPairSet::angular(), weights).unwrap();
        let conv = kernel.convert();
        assert!(conv.weights.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn convert_radial_unit_weights_scatter() {
        let weights = Tensor::full(&[1, 1, 8], 1.0);
        let kernel = PdcKernel::new(PixelPairSet::radial(), weights).unwrap();
        let conv = kernel.convert();
        let d = conv.weights.data();
        for dir in COMPASS {
            let outer = ((2 * dir.dy + 2) * 5 + (2 * dir.dx + 2)) as usize;
            let inner = ((dir.dy + 2) * 5 + (dir.dx + 2)) as usize;
            assert_eq!(d[outer], 1.0);
            assert_eq!(d[inner], -1.0);
        }
        let sum: f64 = d.iter().sum();
        assert_eq!(sum, 0.0);
        // Center and off-direction cells are zero: 8 positive + 8 negative.
        assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 16);
    }

    #[test]
    fn converted_slices_sum_to_zero() {
        // Random weights: slice sums cancel up to f64 accumulation slack.
        let mut rng = seeded(11);
        for kind in [PairKind::Angular, PairKind::Radial] {
            let ps = PixelPairSet::for_kind(kind);
            let k = ps.kernel_size();
            let weights = uniform(&[3, 2, 8], -1.0, 1.0, &mut rng);
            let kernel = PdcKernel::new(ps, weights).unwrap();
            let conv = kernel.convert();
            for slice in conv.weights.data().chunks(k * k) {
                let s: f64 = slice.iter().sum();
                assert!(s.abs() <= 1e-14, "slice sum {s}");
            }
        }
    }

    #[test]
    fn direct_constant_input_is_exactly_zero() {
        let mut rng = seeded(5);
        for kind in [PairKind::Angular, PairKind::Radial] {
            let ps = PixelPairSet::for_kind(kind);
            let weights = uniform(&[2, 1, 8], -1.0, 1.0, &mut rng);
            let kernel = PdcKernel::new(ps, weights).unwrap();
            for padding in [0usize, 2] {
                let input = Tensor::full(&[1, 8, 8], 0.37);
                let out = kernel.forward_direct(&input, 1, padding).unwrap();
                assert!(out.data().iter().all(|v| *v == 0.0), "padding {padding}");
            }
        }
    }

    #[test]
    fn equal_angular_weights_telescope_on_any_input() {
        let mut rng = seeded(6);
        let weights = Tensor::full(&[1, 2, 8], 0.41);
        let kernel = PdcKernel::new(PixelPairSet::angular(), weights).unwrap();
        let input = uniform(&[2, 7, 7], -1.0, 1.0, &mut rng);
        let direct = kernel.forward_direct(&input, 1, 1).unwrap();
        for v in direct.data() {
            assert!(v.abs() <= 1e-14, "telescoped value {v}");
        }
        // Converted form is exactly zero: scattered coefficients are w − w.
        let converted = kernel.forward_converted(&input, 1, 1).unwrap();
        assert!(converted.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn direct_matches_pair_loop_oracle() {
        // Independent re-derivation: loop the pair list per output site.
        let mut rng = seeded(7);
        let input = uniform(&[1, 6, 6], -1.0, 1.0, &mut rng);
        let weights = uniform(&[2, 1, 8], -1.0, 1.0, &mut rng);
        let ps = PixelPairSet::angular();
        let kernel = PdcKernel::new(ps.clone(), weights.clone()).unwrap();
        let out = kernel.forward_direct(&input, 1, 0).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        for o in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for (p, pair) in ps.pairs().iter().enumerate() {
                        let w = weights.data()[o * 8 + p];
                        let (cy, cx) = (i as i32 + 1, j as i32 + 1);
                        let s = input.data()
                            [((cy + pair.sampled.dy as i32) * 6 + cx + pair.sampled.dx as i32) as usize];
                        let u = input.data()
                            [((cy + pair.subtracted.dy as i32) * 6 + cx + pair.subtracted.dx as i32) as usize];
                        acc += w * (s - u);
                    }
                    let got = out.data()[(o * 4 + i) * 4 + j];
                    assert!((got - acc).abs() < 1e-12, "site ({o},{i},{j}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn direct_and_converted_agree() {
        let mut rng = seeded(8);
        for kind in [PairKind::Angular, PairKind::Radial] {
            let ps = PixelPairSet::for_kind(kind);
            for (stride, padding) in [(1, 0), (1, 2), (2, 1), (2, 2)] {
                let input = uniform(&[2, 9, 9], -1.0, 1.0, &mut rng);
                let weights = uniform(&[3, 2, 8], -1.0, 1.0, &mut rng);
                let kernel = PdcKernel::new(ps.clone(), weights).unwrap();
                let a = kernel.forward_direct(&input, stride, padding).unwrap();
                let b = kernel.forward_converted(&input, stride, padding).unwrap();
                let diff = a.max_abs_diff(&b).unwrap();
                assert!(diff < 1e-10, "{kind:?} stride {stride} pad {padding}: {diff}");
            }
        }
    }

    #[test]
    fn shift_equivariance_interior() {
        // With padding 0, translating the input by the stride translates the
        // output. Compare a shifted crop against the shifted output.
        let mut rng = seeded(9);
        let big = uniform(&[1, 10, 10], -1.0, 1.0, &mut rng);
        let weights = uniform(&[1, 1, 8], -1.0, 1.0, &mut rng);
        let kernel = PdcKernel::new(PixelPairSet::angular(), weights).unwrap();
        let crop = |t: &Tensor, y0: usize, x0: usize, size: usize| {
            let mut data = Vec::with_capacity(size * size);
            for i in 0..size {
                for j in 0..size {
                    data.push(t.data()[(y0 + i) * 10 + x0 + j]);
                }
            }
            Tensor::from_vec(&[1, size, size], data).unwrap()
        };
        for stride in [1usize, 2] {
            let a = kernel.forward_direct(&crop(&big, 0, 0, 8), stride, 0).unwrap();
            let b = kernel.forward_direct(&crop(&big, stride, stride, 8), stride, 0).unwrap();
            // b's output grid is a's shifted by one output cell.
            let (ho, wo) = (a.shape()[1], a.shape()[2]);
            for i in 0..ho - 1 {
                for j in 0..wo - 1 {
                    let va = a.data()[(i + 1) * wo + j + 1];
                    let vb = b.data()[i * wo + j];
                    assert!((va - vb).abs() < 1e-12, "stride {stride} site ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn tape_paths_match_value_paths() {
        let mut rng = seeded(10);
        let input = uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let weights = uniform(&[2, 2, 8], -1.0, 1.0, &mut rng);
        let ps = PixelPairSet::radial();
        let kernel = PdcKernel::new(ps.clone(), weights.clone()).unwrap();
        let want_direct = kernel.forward_direct(&input, 2, 2).unwrap();
        let want_conv = kernel.forward_converted(&input, 2, 2).unwrap();

        let mut tape = GradTape::inference();
        let x = tape.input(input);
        let w = tape.input(weights);
        let d = forward_direct(&mut tape, x, w, &ps, 2, 2).unwrap();
        let c = forward_converted(&mut tape, x, w, &ps, 2, 2).unwrap();
        assert_eq!(tape.value(d).data(), want_direct.data());
        assert_eq!(tape.value(c).data(), want_conv.data());
    }

    #[test]
    fn block_shape_law_and_constant_input() {
        let spec = PdcLayerSpec { kind: PairKind::Angular, in_channels: 3, out_channels: 4, stride: 2 };
        let params = PdcBlockParams::init(spec, &mut seeded(12));
        let mut tape = GradTape::inference();
        let img = tape.input(Tensor::full(&[3, 16, 16], 0.63));
        let vars = params.register(&mut tape, false);
        let out = pdc_block(&mut tape, img, &vars, &spec).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 8, 8]);
        // PDC of a constant image is zero; the normalized zeros become the
        // bias, then ReLU. Every channel is a constant field independent of
        // the input constant.
        let mut tape2 = GradTape::inference();
        let img2 = tape2.input(Tensor::full(&[3, 16, 16], -2.17));
        let vars2 = params.register(&mut tape2, false);
        let out2 = pdc_block(&mut tape2, img2, &vars2, &spec).unwrap();
        assert_eq!(tape.value(out).data(), tape2.value(out2).data());
        for c in 0..4 {
            let slice = &tape.value(out).data()[c * 64..(c + 1) * 64];
            assert!(slice.iter().all(|v| *v == slice[0]));
        }
    }
}
