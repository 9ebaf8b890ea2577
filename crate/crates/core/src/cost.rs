//! Parameter, MAC and memory accounting.
//!
//! Conventions: parameters are learnable tensors only (BN running statistics
//! excluded); MACs are multiply-accumulates of convolutions and the dense
//! head (biases, adds and BN excluded); weight bytes are int8 weights, int32
//! biases and the int32 requantization table exactly as emitted in C.

use crate::quant::{QNetwork, QOpKind};
use crate::tcn::{Network, Real};

/// Published reference values printed next to ours.
pub mod reference {
    pub const PARAMS: usize = 14_883;
    pub const MACS_NATIVE: usize = 1_030_260;
    pub const MACS_ZERO_STUFFED: usize = 2_339_994;
    pub const MEMORY_KB: f64 = 26.63;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacMode {
    Native,
    ZeroStuffed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    pub macs_native: usize,
    pub macs_zero_stuffed: usize,
    pub weight_bytes: usize,
    pub peak_activation_bytes: usize,
}

impl CostReport {
    pub fn total_memory_bytes(&self) -> usize {
        self.weight_bytes + self.peak_activation_bytes
    }

    pub fn zero_stuff_ratio(&self) -> f64 {
        self.macs_zero_stuffed as f64 / self.macs_native.max(1) as f64
    }

    /// Aligned table with the published values beside ours.
    pub fn to_text(&self) -> String {
        let kb = |b: usize| b as f64 / 1024.0;
        let pct = |ours: f64, theirs: f64| format!("{:+.1}%", 100.0 * (ours - theirs) / theirs);
        let rows = [
            (
                "parameters",
                self.params.to_string(),
                reference::PARAMS.to_string(),
                pct(self.params as f64, reference::PARAMS as f64),
            ),
            (
                "MACs (native dilation)",
                self.macs_native.to_string(),
                reference::MACS_NATIVE.to_string(),
                pct(self.macs_native as f64, reference::MACS_NATIVE as f64),
            ),
            (
                "MACs (zero-stuffed)",
                self.macs_zero_stuffed.to_string(),
                reference::MACS_ZERO_STUFFED.to_string(),
                pct(
                    self.macs_zero_stuffed as f64,
                    reference::MACS_ZERO_STUFFED as f64,
                ),
            ),
            (
                "zero-stuffed / native",
                format!("{:.3}", self.zero_stuff_ratio()),
                format!(
                    "{:.3}",
                    reference::MACS_ZERO_STUFFED as f64 / reference::MACS_NATIVE as f64
                ),
                String::new(),
            ),
            (
                "weight bytes",
                self.weight_bytes.to_string(),
                "-".into(),
                String::new(),
            ),
            (
                "peak activation bytes",
                self.peak_activation_bytes.to_string(),
                "-".into(),
                String::new(),
            ),
            (
                "memory (weights + act.)",
                format!("{:.2} kB", kb(self.total_memory_bytes())),
                format!("{:.2} kB", reference::MEMORY_KB),
                pct(kb(self.total_memory_bytes()), reference::MEMORY_KB),
            ),
        ];
        let mut out = format!(
            "{:<26} {:>14} {:>14} {:>8}\n",
            "metric", "computed", "reference", "delta"
        );
        for (name, ours, theirs, delta) in rows {
            out.push_str(&format!("{name:<26} {ours:>14} {theirs:>14} {delta:>8}\n"));
        }
        out
    }

    pub fn to_kv(&self) -> String {
        format!(
            "params={}\nmacs_native={}\nmacs_zero_stuffed={}\nweight_bytes={}\npeak_activation_bytes={}\n",
            self.params, self.macs_native, self.macs_zero_stuffed, self.weight_bytes, self.peak_activation_bytes
        )
    }
}

/// Weights, biases, gamma and beta element counts.
pub fn count_params<T: Real>(net: &Network<T>) -> usize {
    net.param_count()
}

/// Learnable elements left after folding: conv/dense weights and biases.
pub fn count_params_quantized(q: &QNetwork) -> usize {
    q.convs()
        .iter()
        .map(|c| c.weight.len() + c.bias.len())
        .sum::<usize>()
        + q.head.weight.len()
        + q.head.bias.len()
}

/// Parameters of the float parent: folded counts plus gamma and beta of the
/// batch norm that followed every block convolution and skip projection.
pub fn count_params_with_bn(q: &QNetwork) -> usize {
    let bn: usize = q
        .blocks
        .iter()
        .map(|b| 2 * (b.conv1.out_ch + b.conv2.out_ch + b.skip.as_ref().map_or(0, |s| s.out_ch)))
        .sum();
    count_params_quantized(q) + bn
}

fn conv_macs(
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    dilation: usize,
    t: usize,
    mode: MacMode,
) -> usize {
    let k = match mode {
        MacMode::Native => kernel,
        MacMode::ZeroStuffed => dilation * (kernel - 1) + 1,
    };
    out_ch * t * in_ch * k
}

pub fn count_macs<T: Real>(net: &Network<T>, mode: MacMode) -> usize {
    let t = net.arch.input_len;
    let c = |l: &crate::tcn::Conv1d<T>| conv_macs(l.out_ch, l.in_ch, l.kernel, l.dilation, t, mode);
    let mut n = c(&net.entry);
    for b in &net.blocks {
        n += c(&b.conv1) + c(&b.conv2);
        if let Some(s) = &b.skip {
            n += c(&s.conv);
        }
    }
    n + net.head.in_features * net.head.out_features
}

pub fn count_macs_quantized(q: &QNetwork, mode: MacMode) -> usize {
    let t = q.arch.input_len;
    q.convs()
        .iter()
        .map(|l| conv_macs(l.out_ch, l.in_ch, l.kernel, l.dilation, t, mode))
        .sum::<usize>()
        + q.head.in_features * q.head.out_features
}

/// int32 words of requantization state per op: conv `[mult, shift, zp_in,
/// zp_out]`, add `[mult_a, shift_a, zp_a, mult_b, shift_b, zp_b, zp_out]`,
/// dense `[zp_in]`.
pub fn qparam_words(q: &QNetwork) -> Vec<i32> {
    let edges = q.edges();
    let zp = |e: usize| edges[e].qp.zero_point;
    let mut out = Vec::new();
    for op in q.ops() {
        match op.kind {
            QOpKind::Conv(c) => out.extend([
                c.requant.mult,
                c.requant.shift as i32,
                zp(op.inputs[0]),
                c.out_qp.zero_point,
            ]),
            QOpKind::Add(a) => out.extend([
                a.requant_a.mult,
                a.requant_a.shift as i32,
                zp(op.inputs[0]),
                a.requant_b.mult,
                a.requant_b.shift as i32,
                zp(op.inputs[1]),
                a.out_qp.zero_point,
            ]),
            QOpKind::Dense(_) => out.push(zp(op.inputs[0])),
        }
    }
    out
}

/// Words of [`qparam_words`] belonging to one op kind.
pub fn qparam_words_for(kind: &QOpKind<'_>) -> usize {
    match kind {
        QOpKind::Conv(_) => 4,
        QOpKind::Add(_) => 7,
        QOpKind::Dense(_) => 1,
    }
}

pub fn weight_bytes(q: &QNetwork) -> usize {
    let convs: usize = q
        .convs()
        .iter()
        .map(|c| c.weight.len() + 4 * c.bias.len())
        .sum();
    convs + q.head.weight.len() + 4 * q.head.bias.len() + 4 * qparam_words(q).len()
}

/// Step range `[first, last]` during which each edge buffer is live.
/// The input is live from step 0; each other edge from the op that writes
/// it to the last op that reads it.
pub fn liveness(q: &QNetwork) -> Vec<(usize, usize)> {
    let edges = q.edges();
    let mut span: Vec<(usize, usize)> = vec![(0, 0); edges.len()];
    for (s, op) in q.ops().iter().enumerate() {
        span[op.output] = (s, s);
        for &i in &op.inputs {
            span[i].1 = s;
        }
    }
    span
}

/// Largest total size of int8 buffers live at the same step (int32 logits excluded).
pub fn peak_activation_bytes(q: &QNetwork) -> usize {
    let edges = q.edges();
    let span = liveness(q);
    (0..q.ops().len())
        .map(|s| {
            edges
                .iter()
                .zip(&span)
                .filter(|(e, &(a, b))| !e.wide && a <= s && s <= b)
                .map(|(e, _)| e.bytes())
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0)
}

/// `(weight_bytes, peak_activation_bytes)`.
pub fn memory_footprint(q: &QNetwork) -> (usize, usize) {
    (weight_bytes(q), peak_activation_bytes(q))
}

pub fn cost_report(q: &QNetwork, params: usize) -> CostReport {
    let (w, a) = memory_footprint(q);
    CostReport {
        params,
        macs_native: count_macs_quantized(q, MacMode::Native),
        macs_zero_stuffed: count_macs_quantized(q, MacMode::ZeroStuffed),
        weight_bytes: w,
        peak_activation_bytes: a,
    }
}

/// Byte offsets of every int8 edge inside one shared activation arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArenaLayout {
    /// `None` for the int32 logits, which live outside the arena.
    pub offsets: Vec<Option<usize>>,
    pub size: usize,
}

/// Packs edge buffers so that buffers live at the same step never overlap.
///
/// Depth-first search over candidate offsets (0 or the end of an already
/// placed conflicting buffer) for two placement orders, production order and
/// largest first, stopping once the liveness peak is met. A node budget keeps
/// large graphs bounded; the best packing found is returned.
pub fn arena_layout(q: &QNetwork) -> ArenaLayout {
    let edges = q.edges();
    let span = liveness(q);
    let lower = peak_activation_bytes(q);
    let by_step: Vec<usize> = (0..edges.len()).filter(|&e| !edges[e].wide).collect();
    let mut by_size = by_step.clone();
    by_size.sort_by_key(|&e| std::cmp::Reverse(edges[e].bytes()));
    let mut best: Option<(usize, Vec<usize>, Vec<usize>)> = None;
    for items in [by_step, by_size] {
        let size: Vec<usize> = items.iter().map(|&e| edges[e].bytes()).collect();
        let conflict = |a: usize, b: usize| {
            let (x, y) = (span[items[a]], span[items[b]]);
            x.0 <= y.1 && y.0 <= x.1
        };
        let mut s = Search {
            size: &size,
            conflict: &conflict,
            offs: vec![0; items.len()],
            best: None,
            lower,
            nodes: 0,
        };
        s.run(0, 0);
        let (total, offs) = s.best.expect("the highest candidate always fits");
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, items, offs));
        }
    }
    let (size, items, offs) = best.expect("two orders tried");
    let mut offsets = vec![None; edges.len()];
    for (k, &e) in items.iter().enumerate() {
        offsets[e] = Some(offs[k]);
    }
    ArenaLayout { offsets, size }
}

struct Search<'a> {
    size: &'a [usize],
    conflict: &'a dyn Fn(usize, usize) -> bool,
    offs: Vec<usize>,
    best: Option<(usize, Vec<usize>)>,
    lower: usize,
    nodes: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize, top: usize) {
        self.nodes += 1;
        if let Some((b, _)) = &self.best {
            if top >= *b || *b == self.lower || self.nodes > 200_000 {
                return;
            }
        }
        if i == self.size.len() {
            self.best = Some((top, self.offs.clone()));
            return;
        }
        let mut cands: Vec<usize> = vec![0];
        for j in 0..i {
            if (self.conflict)(i, j) {
                cands.push(self.offs[j] + self.size[j]);
            }
        }
        cands.sort_unstable();
        cands.dedup();
        for off in cands {
            let end = off + self.size[i];
            let clash = (0..i).any(|j| {
                (self.conflict)(i, j) && off < self.offs[j] + self.size[j] && self.offs[j] < end
            });
            if !clash {
                self.offs[i] = off;
                self.run(i + 1, top.max(end));
            }
        }
    }
}
