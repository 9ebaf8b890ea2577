//! Tiled execution for a small fast memory (L1) backed by a large one (L2).
//!
//! Layers run one at a time. Each layer's time axis is cut into equal tiles,
//! the longest whose working set fits the budget. A conv tile needs its
//! output range widened left by the halo `d (K - 1)`; columns before time 0
//! are padding generated in L1, never transferred. The dense head is tiled
//! along time too: each tile streams its weight columns and adds into int32
//! partial sums that stay resident.

use std::fmt::Write as _;

use crate::cost::qparam_words_for;
use crate::engine::{conv_valid, dense_partial, QFeatureMap};
use crate::error::{Error, Result};
use crate::quant::{QNetwork, QOpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Add,
    Dense,
}

impl LayerKind {
    fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Add => "add",
            LayerKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    /// Output columns `[start, end)`.
    pub out: (usize, usize),
    /// Input columns `[start, end)`; `start` is negative inside the causal pad.
    pub input: (isize, usize),
    pub in_bytes: usize,
    pub weight_bytes: usize,
    pub out_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub tile_len: usize,
    /// L1 bytes at `tile_len`, double buffers included.
    pub working_set: usize,
    /// Weights, biases and requant words loaded once per layer.
    pub resident_bytes: usize,
    pub tiles: Vec<Tile>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub budget: usize,
    pub double_buffer: bool,
    pub layers: Vec<LayerPlan>,
    pub peak_working_set: usize,
    pub bytes_l2_to_l1: usize,
    pub bytes_l1_to_l2: usize,
}

/// Per-layer geometry the planner needs.
struct Geometry {
    name: String,
    kind: LayerKind,
    in_ch: usize,
    out_ch: usize,
    halo: usize,
    /// Operand count streamed per column (2 for an add).
    inputs: usize,
    /// Resident bytes (weights/biases/requant words, or dense bias + partial sums).
    resident: usize,
    /// Dense weight bytes per time column.
    weight_per_col: usize,
}

impl Geometry {
    fn streamed(&self, n: usize) -> (usize, usize, usize) {
        let input = self.inputs * self.in_ch * (n + self.halo);
        let weight = self.weight_per_col * n;
        let out = if self.kind == LayerKind::Dense {
            0
        } else {
            self.out_ch * n
        };
        (input, weight, out)
    }

    fn working_set(&self, n: usize, double: bool) -> usize {
        let (i, w, o) = self.streamed(n);
        self.resident + (i + w + o) * if double { 2 } else { 1 }
    }
}

fn geometries(q: &QNetwork) -> Vec<Geometry> {
    let edges = q.edges();
    q.ops()
        .iter()
        .map(|op| {
            let words = 4 * qparam_words_for(&op.kind);
            match op.kind {
                QOpKind::Conv(c) => Geometry {
                    name: op.name.clone(),
                    kind: LayerKind::Conv,
                    in_ch: c.in_ch,
                    out_ch: c.out_ch,
                    halo: c.halo(),
                    inputs: 1,
                    resident: c.weight.len() + 4 * c.bias.len() + words,
                    weight_per_col: 0,
                },
                QOpKind::Add(_) => {
                    let ch = edges[op.output].channels;
                    Geometry {
                        name: op.name.clone(),
                        kind: LayerKind::Add,
                        in_ch: ch,
                        out_ch: ch,
                        halo: 0,
                        inputs: 2,
                        resident: words,
                        weight_per_col: 0,
                    }
                }
                QOpKind::Dense(d) => {
                    let ch = edges[op.inputs[0]].channels;
                    Geometry {
                        name: op.name.clone(),
                        kind: LayerKind::Dense,
                        in_ch: ch,
                        out_ch: d.out_features,
                        halo: 0,
                        inputs: 1,
                        // bias + partial sums
                        resident: 8 * d.out_features + words,
                        weight_per_col: d.out_features * ch,
                    }
                }
            }
        })
        .collect()
}

/// Greedy plan: for every layer the longest tile that fits `budget`.
pub fn plan_tiles(q: &QNetwork, budget: usize, double_buffer: bool) -> Result<TilePlan> {
    let t = q.arch.input_len;
    let mut layers = Vec::new();
    let (mut l2_l1, mut l1_l2, mut peak) = (0, 0, 0);
    for g in geometries(q) {
        let fits = |n: usize| g.working_set(n, double_buffer) <= budget;
        if !fits(1) {
            return Err(Error::Capacity(format!(
                "layer {} needs {} bytes of L1 for a one-column tile, budget is {budget}",
                g.name,
                g.working_set(1, double_buffer)
            )));
        }
        // Working set grows with n, so binary search the largest fit.
        let (mut lo, mut hi) = (1, t);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let n = lo;
        let mut tiles = Vec::new();
        let mut t0 = 0;
        while t0 < t {
            let t1 = (t0 + n).min(t);
            let len = t1 - t0;
            let start = t0 as isize - g.halo as isize;
            let fetched_cols = t1 - t0.saturating_sub(g.halo);
            let tile = Tile {
                out: (t0, t1),
                input: (start, t1),
                in_bytes: g.inputs * g.in_ch * fetched_cols,
                weight_bytes: g.weight_per_col * len,
                out_bytes: if g.kind == LayerKind::Dense {
                    0
                } else {
                    g.out_ch * len
                },
            };
            l2_l1 += tile.in_bytes + tile.weight_bytes;
            l1_l2 += tile.out_bytes;
            tiles.push(tile);
            t0 = t1;
        }
        l2_l1 += g.resident_load();
        if g.kind == LayerKind::Dense {
            l1_l2 += 4 * g.out_ch;
        }
        let ws = g.working_set(n, double_buffer);
        peak = peak.max(ws);
        layers.push(LayerPlan {
            name: g.name.clone(),
            kind: g.kind,
            tile_len: n,
            working_set: ws,
            resident_bytes: g.resident,
            tiles,
        });
    }
    Ok(TilePlan {
        budget,
        double_buffer,
        layers,
        peak_working_set: peak,
        bytes_l2_to_l1: l2_l1,
        bytes_l1_to_l2: l1_l2,
    })
}

impl Geometry {
    /// Bytes of the resident part that come from L2 (partial sums start in L1).
    fn resident_load(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.resident - 4 * self.out_ch,
            _ => self.resident,
        }
    }
}

impl TilePlan {
    /// Output tiles of every layer partition `[0, T)` in order.
    pub fn check_coverage(&self, t: usize) -> Result<()> {
        for l in &self.layers {
            let mut next = 0;
            for tile in &l.tiles {
                if tile.out.0 != next || tile.out.1 <= tile.out.0 {
                    return Err(Error::Structure(format!(
                        "layer {} tiles do not partition the time axis",
                        l.name
                    )));
                }
                next = tile.out.1;
            }
            if next != t {
                return Err(Error::Structure(format!(
                    "layer {} tiles stop at {next} of {t}",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "L1 budget {} bytes, double buffering {}",
            self.budget,
            if self.double_buffer { "on" } else { "off" }
        );
        let _ = writeln!(
            s,
            "{:<16} {:<6} {:>6} {:>9} {:>12}",
            "layer", "kind", "tiles", "tile_len", "working_set"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:<6} {:>6} {:>9} {:>12}",
                l.name,
                l.kind.as_str(),
                l.tiles.len(),
                l.tile_len,
                l.working_set
            );
        }
        let _ = writeln!(s, "peak working set {} bytes", self.peak_working_set);
        let _ = writeln!(
            s,
            "L2->L1 {} bytes, L1->L2 {} bytes",
            self.bytes_l2_to_l1, self.bytes_l1_to_l2
        );
        s
    }

    /// One `key=value` line per plan property, then one line per tile.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "budget={}", self.budget);
        let _ = writeln!(s, "double_buffer={}", self.double_buffer as u8);
        let _ = writeln!(s, "peak_working_set={}", self.peak_working_set);
        let _ = writeln!(s, "bytes_l2_to_l1={}", self.bytes_l2_to_l1);
        let _ = writeln!(s, "bytes_l1_to_l2={}", self.bytes_l1_to_l2);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer name={} kind={} tiles={} tile_len={} working_set={} resident_bytes={}",
                l.name,
                l.kind.as_str(),
                l.tiles.len(),
                l.tile_len,
                l.working_set,
                l.resident_bytes
            );
            for t in &l.tiles {
                let _ = writeln!(
                    s,
                    "tile layer={} out={}..{} in={}..{} in_bytes={} weight_bytes={} out_bytes={}",
                    l.name,
                    t.out.0,
                    t.out.1,
                    t.input.0,
                    t.input.1,
                    t.in_bytes,
                    t.weight_bytes,
                    t.out_bytes
                );
            }
        }
        s
    }
}

/// Bytes from a budget string: plain bytes, or a `k`/`kB`/`KiB` suffix
/// meaning 1024 bytes (`"80kB"` is 81920).
pub fn parse_budget(s: &str) -> Result<usize> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (num, mult) = ["kib", "kb", "k"]
        .iter()
        .find_map(|suf| {
            lower
                .strip_suffix(suf)
                .map(|n| (n.trim().to_string(), 1024.0))
        })
        .unwrap_or_else(|| {
            (
                lower.strip_suffix('b').unwrap_or(&lower).trim().to_string(),
                1.0,
            )
        });
    let v: f64 = num.parse().map_err(|_| {
        Error::Usage(format!(
            "budget {s:?} is not a byte count like 8192 or 80kB"
        ))
    })?;
    let bytes = v * mult;
    if !(bytes.is_finite() && bytes >= 1.0) {
        return Err(Error::Usage(format!("budget {s:?} must be positive")));
    }
    Ok(bytes.round() as usize)
}

/// Runs `plan` tile by tile through L1-sized scratch buffers; the logits are
/// bit-identical to the untiled engine.
pub fn execute_tiled(q: &QNetwork, samples: &[f32], plan: &TilePlan) -> Result<Vec<i32>> {
    let t = q.arch.input_len;
    if samples.len() != t {
        return Err(Error::Shape(format!(
            "beat has {} samples, network expects {t}",
            samples.len()
        )));
    }
    let ops = q.ops();
    if plan.layers.len() != ops.len() || plan.layers.iter().zip(&ops).any(|(l, o)| l.name != o.name)
    {
        return Err(Error::Structure(
            "tile plan does not match the network".into(),
        ));
    }
    plan.check_coverage(t)?;
    let edges = q.edges();
    // L2: one full buffer per int8 edge.
    let mut l2: Vec<Option<QFeatureMap>> = vec![None; edges.len()];
    l2[0] = Some(QFeatureMap::quantize(samples, q.input_qp));
    let mut logits = Vec::new();
    for (op, lp) in ops.iter().zip(&plan.layers) {
        let src = |i: usize| l2[op.inputs[i]].as_ref().expect("schedule order");
        match op.kind {
            QOpKind::Conv(c) => {
                let x = src(0);
                let mut out = QFeatureMap::filled(c.out_ch, t, c.out_qp);
                for tile in &lp.tiles {
                    let (t0, t1) = tile.out;
                    if tile.input != (t0 as isize - c.halo() as isize, t1) {
                        return Err(Error::Structure(format!(
                            "layer {} tile has a wrong halo",
                            lp.name
                        )));
                    }
                    let n = t1 - t0;
                    let in_len = n + c.halo();
                    let mut l1_in = vec![x.qp.zero_point as i8; c.in_ch * in_len];
                    let pad = c.halo().saturating_sub(t0);
                    let from = t0 + pad - c.halo();
                    for ch in 0..c.in_ch {
                        l1_in[ch * in_len + pad..(ch + 1) * in_len]
                            .copy_from_slice(&x.row(ch)[from..t1]);
                    }
                    let mut l1_out = vec![0i8; c.out_ch * n];
                    conv_valid(c, &l1_in, in_len, x.qp.zero_point, &mut l1_out, n);
                    for ch in 0..c.out_ch {
                        out.data[ch * t + t0..ch * t + t1]
                            .copy_from_slice(&l1_out[ch * n..(ch + 1) * n]);
                    }
                }
                l2[op.output] = Some(out);
            }
            QOpKind::Add(a) => {
                let (x, y) = (src(0), src(1));
                let mut out = QFeatureMap::filled(x.channels, t, a.out_qp);
                for tile in &lp.tiles {
                    let (t0, t1) = tile.out;
                    let n = t1 - t0;
                    let cut = |m: &QFeatureMap| {
                        let mut v = Vec::with_capacity(m.channels * n);
                        for ch in 0..m.channels {
                            v.extend_from_slice(&m.row(ch)[t0..t1]);
                        }
                        QFeatureMap::new(m.channels, n, v, m.qp)
                    };
                    let r = crate::engine::qblock_add(&cut(x)?, &cut(y)?, a)?;
                    for ch in 0..x.channels {
                        out.data[ch * t + t0..ch * t + t1].copy_from_slice(r.row(ch));
                    }
                }
                l2[op.output] = Some(out);
            }
            QOpKind::Dense(d) => {
                let x = src(0);
                let mut acc = d.bias.clone();
                for tile in &lp.tiles {
                    let (t0, t1) = tile.out;
                    let n = t1 - t0;
                    let mut l1 = Vec::with_capacity(x.channels * n);
                    for ch in 0..x.channels {
                        l1.extend_from_slice(&x.row(ch)[t0..t1]);
                    }
                    dense_partial(d, &l1, x.qp.zero_point, x.channels, t, t0, n, &mut acc);
                }
                logits = acc;
            }
        }
    }
    Ok(logits)
}
