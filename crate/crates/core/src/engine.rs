//! Integer-only inference.
//!
//! Every arithmetic rule here is mirrored by the emitted C code, so the two
//! must change together: zero-point padding, tap order, 64-bit rescaling with
//! round-half-up, per-branch residual rescale, argmax toward the lowest class.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::quant::{QAdd, QConv, QDense, QNetwork, QOpKind, QuantParams, Requant};

/// Channel-major int8 activations with their encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct QFeatureMap {
    pub channels: usize,
    pub length: usize,
    pub data: Vec<i8>,
    pub qp: QuantParams,
}

impl QFeatureMap {
    pub fn new(channels: usize, length: usize, data: Vec<i8>, qp: QuantParams) -> Result<Self> {
        if data.len() != channels * length {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{length} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
            qp,
        })
    }

    pub fn filled(channels: usize, length: usize, qp: QuantParams) -> Self {
        Self {
            channels,
            length,
            data: vec![qp.zero_point as i8; channels * length],
            qp,
        }
    }

    /// Quantizes one real signal as a single-channel map.
    pub fn quantize(samples: &[f32], qp: QuantParams) -> Self {
        Self {
            channels: 1,
            length: samples.len(),
            data: samples.iter().map(|&v| qp.quantize(v)).collect(),
            qp,
        }
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[i8] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.data.iter().map(|&q| self.qp.dequantize(q)).collect()
    }
}

/// Prepends `amount` columns holding the zero point (real 0).
pub fn causal_pad(x: &QFeatureMap, amount: usize) -> QFeatureMap {
    let len = x.length + amount;
    let zp = x.qp.zero_point as i8;
    let mut data = Vec::with_capacity(x.channels * len);
    for c in 0..x.channels {
        data.extend(std::iter::repeat_n(zp, amount));
        data.extend_from_slice(x.row(c));
    }
    QFeatureMap {
        channels: x.channels,
        length: len,
        data,
        qp: x.qp,
    }
}

/// `floor((v * mult + 2^(shift-1)) / 2^shift)` with exact 64-bit intermediates.
#[inline]
pub fn rescale(v: i64, r: Requant) -> i64 {
    (v * r.mult as i64 + (1i64 << (r.shift - 1))) >> r.shift
}

#[inline]
pub fn requantize(acc: i32, r: Requant, zp_out: i32) -> i8 {
    (rescale(acc as i64, r) + zp_out as i64).clamp(-128, 127) as i8
}

/// `max(x, zp)`: ReLU in the quantized domain.
pub fn qrelu(x: &QFeatureMap) -> QFeatureMap {
    let zp = x.qp.zero_point.clamp(-128, 127) as i8;
    QFeatureMap {
        data: x.data.iter().map(|&v| v.max(zp)).collect(),
        ..x.clone()
    }
}

/// Convolution over an already padded input whose column `r + halo` is
/// the current sample of output column `r`. Writes `out_len` columns.
pub(crate) fn conv_valid(
    layer: &QConv,
    input: &[i8],
    in_len: usize,
    in_zp: i32,
    out: &mut [i8],
    out_len: usize,
) {
    debug_assert_eq!(in_len, out_len + layer.halo());
    let (k_len, d) = (layer.kernel, layer.dilation);
    let zp_out = layer.out_qp.zero_point;
    let floor = if layer.relu {
        zp_out.clamp(-128, 127) as i8
    } else {
        i8::MIN
    };
    for o in 0..layer.out_ch {
        let orow = &mut out[o * out_len..(o + 1) * out_len];
        for (r, slot) in orow.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for k in 0..k_len {
                let col = r + k * d;
                for i in 0..layer.in_ch {
                    let x = input[i * in_len + col] as i32 - in_zp;
                    acc += layer.w(o, i, k) as i32 * x;
                }
            }
            *slot = requantize(acc, layer.requant, zp_out).max(floor);
        }
    }
}

/// Causal dilated convolution followed by requantization (and ReLU when the
/// layer carries one).
pub fn qconv1d_dilated(x: &QFeatureMap, layer: &QConv) -> Result<QFeatureMap> {
    if x.channels != layer.in_ch {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            layer.in_ch, x.channels
        )));
    }
    let padded = causal_pad(x, layer.halo());
    let mut out = QFeatureMap::filled(layer.out_ch, x.length, layer.out_qp);
    conv_valid(
        layer,
        &padded.data,
        padded.length,
        x.qp.zero_point,
        &mut out.data,
        x.length,
    );
    Ok(out)
}

/// Equivalent dilation-1 layer with zeros between the original taps.
pub fn zero_stuff(layer: &QConv) -> QConv {
    let d = layer.dilation;
    let k_eff = d * (layer.kernel - 1) + 1;
    let mut weight = vec![0i8; layer.out_ch * layer.in_ch * k_eff];
    for o in 0..layer.out_ch {
        for i in 0..layer.in_ch {
            for k in 0..layer.kernel {
                weight[(o * layer.in_ch + i) * k_eff + k * d] = layer.w(o, i, k);
            }
        }
    }
    QConv {
        kernel: k_eff,
        dilation: 1,
        weight,
        ..layer.clone()
    }
}

/// Every convolution of `qnet` zero-stuffed.
pub fn zero_stuff_network(qnet: &QNetwork) -> QNetwork {
    let mut out = qnet.clone();
    out.entry = zero_stuff(&out.entry);
    for b in &mut out.blocks {
        b.conv1 = zero_stuff(&b.conv1);
        b.conv2 = zero_stuff(&b.conv2);
        if let Some(s) = &mut b.skip {
            *s = zero_stuff(s);
        }
    }
    out
}

/// Residual add with per-branch rescale, int32 sum and output zero point.
/// No activation applied.
pub fn qresidual_add(
    a: &QFeatureMap,
    b: &QFeatureMap,
    ra: Requant,
    rb: Requant,
    qp_out: QuantParams,
) -> Result<QFeatureMap> {
    if a.channels != b.channels || a.length != b.length {
        return Err(Error::Shape(format!(
            "cannot add {}x{} and {}x{}",
            a.channels, a.length, b.channels, b.length
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let v = rescale((x as i32 - a.qp.zero_point) as i64, ra)
                + rescale((y as i32 - b.qp.zero_point) as i64, rb)
                + qp_out.zero_point as i64;
            v.clamp(-128, 127) as i8
        })
        .collect();
    Ok(QFeatureMap {
        channels: a.channels,
        length: a.length,
        data,
        qp: qp_out,
    })
}

/// Residual add followed by ReLU, as used at the end of every block.
pub fn qblock_add(a: &QFeatureMap, b: &QFeatureMap, add: &QAdd) -> Result<QFeatureMap> {
    Ok(qrelu(&qresidual_add(
        a,
        b,
        add.requant_a,
        add.requant_b,
        add.out_qp,
    )?))
}

/// Accumulates `x[c][t]` for `t` in `[t0, t0 + cols)` into raw dense logits.
/// `x` holds those columns only, channel-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_partial(
    head: &QDense,
    x: &[i8],
    zp: i32,
    channels: usize,
    full_len: usize,
    t0: usize,
    cols: usize,
    acc: &mut [i32],
) {
    for (o, a) in acc.iter_mut().enumerate() {
        let wrow = &head.weight[o * head.in_features..(o + 1) * head.in_features];
        for c in 0..channels {
            for r in 0..cols {
                *a += wrow[c * full_len + t0 + r] as i32 * (x[c * cols + r] as i32 - zp);
            }
        }
    }
}

/// Raw int32 logits of the dense head over a channel-major flatten.
pub fn qdense(x: &QFeatureMap, head: &QDense) -> Result<Vec<i32>> {
    if x.channels * x.length != head.in_features {
        return Err(Error::Shape(format!(
            "dense expects {} inputs, got {}",
            head.in_features,
            x.channels * x.length
        )));
    }
    let mut acc = head.bias.clone();
    dense_partial(
        head,
        &x.data,
        x.qp.zero_point,
        x.channels,
        x.length,
        0,
        x.length,
        &mut acc,
    );
    Ok(acc)
}

/// Index of the largest logit, ties toward the lowest index.
pub fn argmax_i32(logits: &[i32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Runs the whole integer program on a pre-quantized input and returns every
/// int8 edge buffer (indexed like [`QNetwork::edges`]) plus the logits.
pub fn run_program(qnet: &QNetwork, input: &QFeatureMap) -> Result<(Vec<QFeatureMap>, Vec<i32>)> {
    if input.channels != 1 || input.length != qnet.arch.input_len {
        return Err(Error::Shape(format!(
            "network expects 1x{}, got {}x{}",
            qnet.arch.input_len, input.channels, input.length
        )));
    }
    let mut bufs: Vec<QFeatureMap> = vec![input.clone()];
    let mut logits = Vec::new();
    for op in qnet.ops() {
        let out = match op.kind {
            QOpKind::Conv(c) => qconv1d_dilated(&bufs[op.inputs[0]], c)?,
            QOpKind::Add(a) => qblock_add(&bufs[op.inputs[0]], &bufs[op.inputs[1]], a)?,
            QOpKind::Dense(d) => {
                logits = qdense(&bufs[op.inputs[0]], d)?;
                continue;
            }
        };
        debug_assert_eq!(op.output, bufs.len());
        bufs.push(out);
    }
    Ok((bufs, logits))
}

/// Logits for an int8 input already encoded with the network's input parameters.
pub fn infer_quantized(qnet: &QNetwork, input: &[i8]) -> Result<Vec<i32>> {
    let x = QFeatureMap::new(1, input.len(), input.to_vec(), qnet.input_qp)?;
    Ok(run_program(qnet, &x)?.1)
}

/// Quantizes a raw beat and classifies it. Returns the 1-based class and the
/// raw int32 logits.
pub fn qpredict(qnet: &QNetwork, samples: &[f32]) -> Result<(usize, Vec<i32>)> {
    if samples.len() != qnet.arch.input_len {
        return Err(Error::Shape(format!(
            "beat has {} samples, network expects {}",
            samples.len(),
            qnet.arch.input_len
        )));
    }
    let x = QFeatureMap::quantize(samples, qnet.input_qp);
    let logits = run_program(qnet, &x)?.1;
    Ok((argmax_i32(&logits) + 1, logits))
}

/// [`qpredict`] over a dataset, in order.
pub fn qpredict_dataset(
    qnet: &QNetwork,
    ds: &Dataset,
    exec: Execution,
) -> Result<Vec<(usize, Vec<i32>)>> {
    parallel::map(exec, &ds.beats, |b| qpredict(qnet, &b.samples))
        .into_iter()
        .collect()
}

/// One golden-vector line: pre-quantized input and the expected logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenVector {
    pub input: Vec<i8>,
    pub logits: Vec<i32>,
}

pub fn format_golden(vectors: &[GoldenVector]) -> String {
    let mut out = String::new();
    for v in vectors {
        let fields: Vec<String> = v
            .input
            .iter()
            .map(|x| x.to_string())
            .chain(v.logits.iter().map(|x| x.to_string()))
            .collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_golden(text: &str, input_len: usize, n_logits: usize) -> Result<Vec<GoldenVector>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let vals: Vec<i64> = line
            .split_whitespace()
            .map(|f| {
                f.parse::<i64>()
                    .map_err(|_| parse_err(format!("bad integer {f:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != input_len + n_logits {
            return Err(parse_err(format!(
                "expected {} integers, found {}",
                input_len + n_logits,
                vals.len()
            )));
        }
        let input = vals[..input_len]
            .iter()
            .map(|&v| i8::try_from(v).map_err(|_| parse_err(format!("{v} is not int8"))))
            .collect::<Result<_>>()?;
        let logits = vals[input_len..]
            .iter()
            .map(|&v| i32::try_from(v).map_err(|_| parse_err(format!("{v} is not int32"))))
            .collect::<Result<_>>()?;
        out.push(GoldenVector { input, logits });
    }
    Ok(out)
}
