//! Batch-norm folding and INT-8 post-training quantization.
//!
//! Weights are quantized per tensor and symmetrically (`zero_point = 0`,
//! `scale = max|w| / 127`); activations asymmetrically from calibrated
//! min/max ranges that always include zero, so the zero point encodes real 0
//! exactly. Biases are int32 at scale `s_in * s_w`, and each layer's rescale
//! `s_in * s_w / s_out` is a fixed-point multiplier/shift pair.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::tcn::{ArchConfig, BatchNorm, Conv1d, FeatureMap, Network};

/// Affine int8 encoding `r = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

/// Half-width of the span used for an activation edge that is constantly zero.
pub const DEGENERATE_HALF_SPAN: f64 = 5e-4;

impl QuantParams {
    /// Asymmetric parameters covering `[min, max]` extended to include 0.
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::Calibration(format!("invalid range [{min}, {max}]")));
        }
        let (mut lo, mut hi) = (min.min(0.0), max.max(0.0));
        if hi - lo <= 0.0 {
            lo -= DEGENERATE_HALF_SPAN;
            hi += DEGENERATE_HALF_SPAN;
        }
        let scale = ((hi - lo) / 255.0) as f32;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Calibration(format!(
                "range [{min}, {max}] gives scale {scale}"
            )));
        }
        let zp = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i32;
        Ok(Self {
            scale,
            zero_point: zp,
        })
    }

    pub fn quantize(&self, r: f32) -> i8 {
        ((r / self.scale).round() as i64 + self.zero_point as i64).clamp(-128, 127) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }

    /// Real interval representable without clipping.
    pub fn representable(&self) -> (f32, f32) {
        (self.dequantize(-128), self.dequantize(127))
    }
}

/// Fixed-point multiplier: `ratio ~= mult * 2^-shift`, `mult` in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub mult: i32,
    pub shift: u32,
}

impl Requant {
    pub const MAX_SHIFT: u32 = 62;

    pub fn from_ratio(ratio: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::Calibration(format!(
                "rescale ratio {ratio} is not positive"
            )));
        }
        // ratio = frac * 2^exp with frac in [0.5, 1).
        let mut exp = ratio.log2().floor() as i32 + 1;
        let mut frac = ratio / 2f64.powi(exp);
        if frac < 0.5 {
            frac *= 2.0;
            exp -= 1;
        } else if frac >= 1.0 {
            frac /= 2.0;
            exp += 1;
        }
        let mut mult = (frac * (1u64 << 31) as f64).round() as i64;
        if mult == 1i64 << 31 {
            mult >>= 1;
            exp += 1;
        }
        let shift = 31 - exp;
        if shift < 1 || shift > Self::MAX_SHIFT as i32 {
            return Err(Error::Calibration(format!(
                "rescale ratio {ratio:e} needs shift {shift} outside 1..={}",
                Self::MAX_SHIFT
            )));
        }
        Ok(Self {
            mult: mult as i32,
            shift: shift as u32,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.mult as f64 / 2f64.powi(self.shift as i32)
    }
}

/// Symmetric per-tensor quantization: returns `(values, scale)`.
/// An all-zero tensor gets scale 1.
pub fn quantize_weights(w: &[f32]) -> (Vec<i8>, f32) {
    let max = w.iter().fold(0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (vec![0; w.len()], 1.0);
    }
    let scale = max / 127.0;
    let q = w
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (q, scale)
}

fn fold_pair(conv: &Conv1d<f32>, bn: &BatchNorm<f32>) -> Conv1d<f32> {
    let mut out = conv.clone();
    let per_out = conv.in_ch * conv.kernel;
    for o in 0..conv.out_ch {
        let g = bn.gamma[o] as f64;
        let inv = 1.0 / (bn.running_var[o] as f64 + bn.eps).sqrt();
        for w in &mut out.weight[o * per_out..(o + 1) * per_out] {
            *w = (*w as f64 * g * inv) as f32;
        }
        out.bias[o] = (g * (conv.bias[o] as f64 - bn.running_mean[o] as f64) * inv
            + bn.beta[o] as f64) as f32;
    }
    out
}

/// Absorbs every batch norm into the convolution that feeds it:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = gamma (b - mean) / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(net: &Network<f32>) -> Network<f32> {
    let mut out = net.clone();
    for b in &mut out.blocks {
        if let Some(bn) = b.bn1.take() {
            b.conv1 = fold_pair(&b.conv1, &bn);
        }
        if let Some(bn) = b.bn2.take() {
            b.conv2 = fold_pair(&b.conv2, &bn);
        }
        if let Some(skip) = &mut b.skip {
            if let Some(bn) = skip.bn.take() {
                skip.conv = fold_pair(&skip.conv, &bn);
            }
        }
    }
    out
}

/// Observed `[min, max]` of one activation edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Ranges for every activation edge, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranges(pub Vec<EdgeRange>);

impl Ranges {
    pub fn get(&self, name: &str) -> Result<&EdgeRange> {
        self.0
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Calibration(format!("no range for edge {name:?}")))
    }

    /// Elementwise union with another calibration result over the same edges.
    pub fn merge(&mut self, other: &Ranges) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.min = a.min.min(b.min);
            a.max = a.max.max(b.max);
        }
    }
}

fn observe_one(net: &Network<f32>, samples: &[f32]) -> Result<Ranges> {
    let mut out = Vec::new();
    net.forward_observed(&FeatureMap::from_signal(samples), &mut |name, fm| {
        let (lo, hi) = fm
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        out.push(EdgeRange {
            name: name.to_string(),
            min: lo,
            max: hi,
        });
    })?;
    Ok(Ranges(out))
}

/// Min/max of every activation edge over all calibration beats and time steps.
pub fn calibrate(net: &Network<f32>, calib: &Dataset, exec: Execution) -> Result<Ranges> {
    if calib.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    let per_beat = parallel::map(exec, &calib.beats, |b| observe_one(net, &b.samples));
    let mut it = per_beat.into_iter();
    let mut acc = it.next().unwrap()?;
    for r in it {
        acc.merge(&r?);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `[out][in][k]`, tap `K-1` is the current sample.
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_scale: f32,
    pub requant: Requant,
    pub out_qp: QuantParams,
    pub relu: bool,
}

impl QConv {
    pub fn halo(&self) -> usize {
        self.dilation * (self.kernel - 1)
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, k: usize) -> i8 {
        self.weight[(o * self.in_ch + i) * self.kernel + k]
    }

    /// Worst-case `|accumulator|` over all int8 inputs.
    pub fn accumulator_bound(&self) -> i64 {
        let max_bias = self
            .bias
            .iter()
            .map(|b| (*b as i64).abs())
            .max()
            .unwrap_or(0);
        (self.kernel * self.in_ch) as i64 * 128 * 255 + max_bias
    }
}

/// Residual add: both branches rescaled into the output scale, summed in int32.
#[derive(Debug, Clone, PartialEq)]
pub struct QAdd {
    pub requant_a: Requant,
    pub requant_b: Requant,
    pub out_qp: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub conv1: QConv,
    pub conv2: QConv,
    pub skip: Option<QConv>,
    pub add: QAdd,
}

/// Dense head producing raw int32 logits at scale `s_in * weight_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QDense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_scale: f32,
    /// Calibrated int8 view of the logit edge; reporting only.
    pub logit_qp: QuantParams,
}

impl QDense {
    pub fn accumulator_bound(&self) -> i64 {
        let max_bias = self
            .bias
            .iter()
            .map(|b| (*b as i64).abs())
            .max()
            .unwrap_or(0);
        self.in_features as i64 * 128 * 255 + max_bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub arch: ArchConfig,
    pub input_qp: QuantParams,
    pub entry: QConv,
    pub blocks: Vec<QBlock>,
    pub head: QDense,
}

/// One activation buffer of the integer program.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub qp: QuantParams,
    /// Int32 logits rather than int8 activations.
    pub wide: bool,
}

impl Edge {
    pub fn bytes(&self) -> usize {
        self.channels * self.length * if self.wide { 4 } else { 1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum QOpKind<'a> {
    Conv(&'a QConv),
    Add(&'a QAdd),
    Dense(&'a QDense),
}

/// One step of the integer program, reading and writing edges by index.
#[derive(Debug, Clone)]
pub struct QOp<'a> {
    pub name: String,
    pub kind: QOpKind<'a>,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Largest accumulator magnitude an int32 may hold.
pub const ACC_LIMIT: i64 = i32::MAX as i64;

impl QNetwork {
    /// Activation edges in execution order.
    pub fn edges(&self) -> Vec<Edge> {
        let t = self.arch.input_len;
        let e = |name: String, c: usize, qp: QuantParams| Edge {
            name,
            channels: c,
            length: t,
            qp,
            wide: false,
        };
        let mut v = vec![
            e("input".into(), 1, self.input_qp),
            e("entry".into(), self.entry.out_ch, self.entry.out_qp),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push(e(format!("block{i}.conv1"), b.conv1.out_ch, b.conv1.out_qp));
            v.push(e(format!("block{i}.conv2"), b.conv2.out_ch, b.conv2.out_qp));
            if let Some(s) = &b.skip {
                v.push(e(format!("block{i}.skip"), s.out_ch, s.out_qp));
            }
            v.push(e(format!("block{i}.out"), b.conv2.out_ch, b.add.out_qp));
        }
        v.push(Edge {
            name: "logits".into(),
            channels: self.head.out_features,
            length: 1,
            qp: self.head.logit_qp,
            wide: true,
        });
        v
    }

    /// The network as a flat program over [`QNetwork::edges`].
    pub fn ops(&self) -> Vec<QOp<'_>> {
        let mut ops = vec![QOp {
            name: "entry".into(),
            kind: QOpKind::Conv(&self.entry),
            inputs: vec![0],
            output: 1,
        }];
        let mut cur = 1;
        let mut next = 2;
        for (i, b) in self.blocks.iter().enumerate() {
            let (c1, c2) = (next, next + 1);
            next += 2;
            ops.push(QOp {
                name: format!("block{i}.conv1"),
                kind: QOpKind::Conv(&b.conv1),
                inputs: vec![cur],
                output: c1,
            });
            ops.push(QOp {
                name: format!("block{i}.conv2"),
                kind: QOpKind::Conv(&b.conv2),
                inputs: vec![c1],
                output: c2,
            });
            let skip_edge = match &b.skip {
                Some(s) => {
                    let se = next;
                    next += 1;
                    ops.push(QOp {
                        name: format!("block{i}.skip"),
                        kind: QOpKind::Conv(s),
                        inputs: vec![cur],
                        output: se,
                    });
                    se
                }
                None => cur,
            };
            ops.push(QOp {
                name: format!("block{i}.add"),
                kind: QOpKind::Add(&b.add),
                inputs: vec![c2, skip_edge],
                output: next,
            });
            cur = next;
            next += 1;
        }
        ops.push(QOp {
            name: "head".into(),
            kind: QOpKind::Dense(&self.head),
            inputs: vec![cur],
            output: next,
        });
        ops
    }

    pub fn convs(&self) -> Vec<&QConv> {
        let mut v = vec![&self.entry];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some(s) = &b.skip {
                v.push(s);
            }
        }
        v
    }

    /// Rejects any layer whose worst-case accumulator could overflow int32.
    pub fn check_bounds(&self) -> Result<()> {
        for op in self.ops() {
            let bound = match op.kind {
                QOpKind::Conv(c) => c.accumulator_bound(),
                QOpKind::Dense(d) => d.accumulator_bound(),
                QOpKind::Add(_) => continue,
            };
            if bound > ACC_LIMIT {
                return Err(Error::Capacity(format!(
                    "layer {} accumulator bound {bound} exceeds int32",
                    op.name
                )));
            }
        }
        Ok(())
    }

    /// Logit scale: real logit = scale * int logit.
    pub fn logit_scale(&self) -> f64 {
        let feat = match self.blocks.last() {
            Some(b) => b.add.out_qp.scale,
            None => self.entry.out_qp.scale,
        };
        feat as f64 * self.head.weight_scale as f64
    }
}

fn quantize_bias(b: &[f32], scale: f64) -> Result<Vec<i32>> {
    b.iter()
        .map(|&v| {
            let q = (v as f64 / scale).round();
            if q.abs() > i32::MAX as f64 {
                Err(Error::Calibration(format!(
                    "bias {v} overflows int32 at scale {scale:e}"
                )))
            } else {
                Ok(q as i32)
            }
        })
        .collect()
}

fn qparams(ranges: &Ranges, name: &str) -> Result<QuantParams> {
    let r = ranges.get(name)?;
    QuantParams::from_range(r.min, r.max)
        .map_err(|e| Error::Calibration(format!("edge {name}: {e}")))
}

fn quantize_conv(
    conv: &Conv1d<f32>,
    in_qp: QuantParams,
    out_qp: QuantParams,
    relu: bool,
) -> Result<QConv> {
    let (weight, ws) = quantize_weights(&conv.weight);
    let acc_scale = in_qp.scale as f64 * ws as f64;
    Ok(QConv {
        in_ch: conv.in_ch,
        out_ch: conv.out_ch,
        kernel: conv.kernel,
        dilation: conv.dilation,
        weight,
        bias: quantize_bias(&conv.bias, acc_scale)?,
        weight_scale: ws,
        requant: Requant::from_ratio(acc_scale / out_qp.scale as f64)?,
        out_qp,
        relu,
    })
}

/// Builds the integer network from a folded float network and its ranges.
pub fn quantize_network(net: &Network<f32>, ranges: &Ranges) -> Result<QNetwork> {
    if net.bn_count() != 0 {
        return Err(Error::Structure(
            "quantization needs a batch-norm-folded network".into(),
        ));
    }
    let input_qp = qparams(ranges, "input")?;
    let entry_qp = qparams(ranges, "entry")?;
    let entry = quantize_conv(&net.entry, input_qp, entry_qp, false)?;
    let mut cur = entry_qp;
    let mut blocks = Vec::with_capacity(net.blocks.len());
    for (i, b) in net.blocks.iter().enumerate() {
        let q1 = qparams(ranges, &format!("block{i}.conv1"))?;
        let q2 = qparams(ranges, &format!("block{i}.conv2"))?;
        let qo = qparams(ranges, &format!("block{i}.out"))?;
        let conv1 = quantize_conv(&b.conv1, cur, q1, true)?;
        let conv2 = quantize_conv(&b.conv2, q1, q2, false)?;
        let (skip, skip_qp) = match &b.skip {
            Some(s) => {
                let qs = qparams(ranges, &format!("block{i}.skip"))?;
                (Some(quantize_conv(&s.conv, cur, qs, false)?), qs)
            }
            None => (None, cur),
        };
        let add = QAdd {
            requant_a: Requant::from_ratio(q2.scale as f64 / qo.scale as f64)?,
            requant_b: Requant::from_ratio(skip_qp.scale as f64 / qo.scale as f64)?,
            out_qp: qo,
        };
        blocks.push(QBlock {
            conv1,
            conv2,
            skip,
            add,
        });
        cur = qo;
    }
    let (hw, hs) = quantize_weights(&net.head.weight);
    let head = QDense {
        in_features: net.head.in_features,
        out_features: net.head.out_features,
        weight: hw,
        bias: quantize_bias(&net.head.bias, cur.scale as f64 * hs as f64)?,
        weight_scale: hs,
        logit_qp: qparams(ranges, "logits")?,
    };
    let q = QNetwork {
        arch: net.arch.clone(),
        input_qp,
        entry,
        blocks,
        head,
    };
    q.check_bounds()?;
    Ok(q)
}

/// Fold, calibrate and quantize in one call.
pub fn quantize_from_float(
    net: &Network<f32>,
    calib: &Dataset,
    exec: Execution,
) -> Result<QNetwork> {
    let folded = fold_batchnorm(net);
    let ranges = calibrate(&folded, calib, exec)?;
    quantize_network(&folded, &ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_quantizer_examples() {
        let (q, s) = quantize_weights(&[0.0; 7]);
        assert_eq!((q, s), (vec![0; 7], 1.0));
        let (q, s) = quantize_weights(&[0.5, -0.25, 0.0]);
        assert_eq!(q, vec![127, -64, 0]);
        assert!((s - 0.5 / 127.0).abs() < 1e-9);
    }

    #[test]
    fn requant_normalization() {
        for ratio in [
            1e-6,
            3.3e-3,
            0.5,
            0.75,
            0.999_999_999_9,
            1.0,
            1.5,
            17.25,
            1e5,
        ] {
            let r = Requant::from_ratio(ratio).unwrap();
            assert!(
                (1 << 30..1i64 << 31).contains(&(r.mult as i64)),
                "{ratio}: {r:?}"
            );
            assert!(r.shift >= 1);
            assert!(
                (r.ratio() - ratio).abs() / ratio <= 2f64.powi(-24),
                "{ratio}"
            );
        }
        assert!(Requant::from_ratio(0.0).is_err());
        assert!(Requant::from_ratio(f64::NAN).is_err());
        assert!(Requant::from_ratio(2f64.powi(31)).is_err());
    }

    #[test]
    fn activation_params() {
        let q = QuantParams::from_range(0.0, 2.55).unwrap();
        assert_eq!(q.zero_point, -128);
        assert!((q.scale - 0.01).abs() < 1e-7);
        // -128 + 127.5 rounds away from zero.
        let q = QuantParams::from_range(-1.0, 1.0).unwrap();
        assert_eq!(q.zero_point, -1);
        assert_eq!(q.dequantize(q.quantize(0.0)), 0.0);
        // Constant-zero edge gets a 1e-3 span.
        let q = QuantParams::from_range(0.0, 0.0).unwrap();
        assert!((q.scale as f64 - 1e-3 / 255.0).abs() < 1e-12);
        assert!(QuantParams::from_range(f64::NAN, 1.0).is_err());
        assert!(QuantParams::from_range(f64::NEG_INFINITY, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn quantize_round_trip(min in -50.0f64..0.0, span in 1e-3f64..100.0, u in 0.0f64..1.0) {
            let q = QuantParams::from_range(min, min + span).unwrap();
            let (lo, hi) = q.representable();
            let r = lo + (hi - lo) * u as f32;
            let back = q.dequantize(q.quantize(r));
            prop_assert!((back - r).abs() <= q.scale / 2.0 * 1.0001, "r={} back={} scale={}", r, back, q.scale);
        }

        #[test]
        fn requant_relative_error(ratio in 1e-8f64..1e8) {
            let r = Requant::from_ratio(ratio).unwrap();
            prop_assert!((r.ratio() - ratio).abs() / ratio <= 2f64.powi(-24));
        }
    }
}
