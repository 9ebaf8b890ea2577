//! Emission of a self-contained C99 implementation of a [`QNetwork`].
//!
//! The generated `net.c` holds three flat constant tables (int8 weights,
//! int32 biases, int32 requantization words) and a handful of generic
//! kernels that replay the engine's arithmetic. Activations share one arena
//! laid out by [`crate::cost::arena_layout`]. `main.c` is a test harness that
//! reads golden-vector lines on stdin and prints `l0 .. l4 class` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{arena_layout, qparam_words, qparam_words_for};
use crate::data::Dataset;
use crate::engine::{infer_quantized, zero_stuff_network, GoldenVector, QFeatureMap};
use crate::error::{Error, Result};
use crate::quant::{QNetwork, QOpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmitOptions {
    /// Emit dilated kernels as-is; otherwise zero-stuff them first.
    pub native_dilation: bool,
    /// Provide `etcn_infer` over a static arena in addition to `etcn_infer_ws`.
    pub static_buffers: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            native_dilation: true,
            static_buffers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBundle {
    pub header: String,
    pub implementation: String,
    pub harness: String,
    /// Bytes of constant tables in `implementation`.
    pub const_bytes: usize,
    pub arena_bytes: usize,
}

impl SourceBundle {
    pub const FILES: [&'static str; 3] = ["net.h", "net.c", "main.c"];

    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in
            Self::FILES
                .iter()
                .zip([&self.header, &self.implementation, &self.harness])
        {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn table<T: std::fmt::Display>(out: &mut String, ty: &str, name: &str, vals: &[T]) {
    let _ = writeln!(out, "static const {ty} {name}[{}] = {{", vals.len());
    for chunk in vals.chunks(16) {
        let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "    {},", line.join(", "));
    }
    out.push_str("};\n\n");
}

const KERNELS: &str = r#"/* floor((v * mult + 2^(shift-1)) / 2^shift) without relying on the
   implementation-defined right shift of negative values. */
static int64_t rescale(int64_t v, int32_t mult, int32_t shift)
{
    int64_t p = v * (int64_t)mult + ((int64_t)1 << (shift - 1));
    if (p >= 0)
        return p >> shift;
    return -((-p - 1) >> shift) - 1;
}

static int8_t saturate(int64_t v, int64_t lo)
{
    if (v < lo)
        return (int8_t)lo;
    if (v > 127)
        return 127;
    return (int8_t)v;
}

/* q: mult, shift, zp_in, zp_out. Tap k reads x[t - (kernel-1-k)*dil];
   columns before 0 are the input zero point. */
static void conv(const int8_t *x, int8_t *y, int32_t cin, int32_t cout,
                 int32_t kernel, int32_t dil, int32_t len,
                 const int8_t *w, const int32_t *b, const int32_t *q, int relu)
{
    int32_t o, t, k, i;
    for (o = 0; o < cout; ++o) {
        for (t = 0; t < len; ++t) {
            int32_t acc = b[o];
            for (k = 0; k < kernel; ++k) {
                int32_t src = t - (kernel - 1 - k) * dil;
                if (src < 0)
                    continue;
                for (i = 0; i < cin; ++i)
                    acc += (int32_t)w[(o * cin + i) * kernel + k] * ((int32_t)x[i * len + src] - q[2]);
            }
            y[o * len + t] = saturate(rescale(acc, q[0], q[1]) + q[3], relu ? q[3] : -128);
        }
    }
}

/* q: zp_in. Raw int32 logits over the channel-major flatten. */
static void dense(const int8_t *x, int32_t *out, int32_t in, int32_t nout,
                  const int8_t *w, const int32_t *b, const int32_t *q)
{
    int32_t o, j;
    for (o = 0; o < nout; ++o) {
        int32_t acc = b[o];
        for (j = 0; j < in; ++j)
            acc += (int32_t)w[o * in + j] * ((int32_t)x[j] - q[0]);
        out[o] = acc;
    }
}

"#;

const ADD_KERNEL: &str = r#"/* q: mult_a, shift_a, zp_a, mult_b, shift_b, zp_b, zp_out; ReLU applied. */
static void add_relu(const int8_t *a, const int8_t *b, int8_t *y, int32_t n, const int32_t *q)
{
    int32_t i;
    for (i = 0; i < n; ++i) {
        int64_t v = rescale((int32_t)a[i] - q[2], q[0], q[1])
                  + rescale((int32_t)b[i] - q[5], q[3], q[4]) + q[6];
        y[i] = saturate(v, q[6]);
    }
}

"#;

/// Renders the network as `net.h`, `net.c` and `main.c`.
pub fn emit_source(qnet: &QNetwork, opts: EmitOptions) -> Result<SourceBundle> {
    qnet.check_bounds()
        .map_err(|e| Error::Emission(e.to_string()))?;
    let stuffed;
    let q = if opts.native_dilation {
        qnet
    } else {
        stuffed = zero_stuff_network(qnet);
        &stuffed
    };
    let t = q.arch.input_len;
    let n_cls = q.arch.n_classes;
    let edges = q.edges();
    let ops = q.ops();
    let arena = arena_layout(q);
    let qwords = qparam_words(q);
    let off = |e: usize| {
        arena.offsets[e]
            .ok_or_else(|| Error::Emission(format!("edge {} has no arena slot", edges[e].name)))
    };

    let mut weights: Vec<i8> = Vec::new();
    let mut biases: Vec<i32> = Vec::new();
    let mut calls = String::new();
    let mut index_map = String::new();
    let mut qoff = 0;
    for op in &ops {
        let (w0, b0) = (weights.len(), biases.len());
        let qn = qparam_words_for(&op.kind);
        match op.kind {
            QOpKind::Conv(c) => {
                weights.extend_from_slice(&c.weight);
                biases.extend_from_slice(&c.bias);
                let _ = writeln!(
                    calls,
                    "    conv(ws + {}, ws + {}, {}, {}, {}, {}, {t}, W + {w0}, B + {b0}, Q + {qoff}, {}); /* {} */",
                    off(op.inputs[0])?,
                    off(op.output)?,
                    c.in_ch,
                    c.out_ch,
                    c.kernel,
                    c.dilation,
                    c.relu as u8,
                    op.name
                );
            }
            QOpKind::Add(_) => {
                let _ = writeln!(
                    calls,
                    "    add_relu(ws + {}, ws + {}, ws + {}, {}, Q + {qoff}); /* {} */",
                    off(op.inputs[0])?,
                    off(op.inputs[1])?,
                    off(op.output)?,
                    edges[op.output].channels * t,
                    op.name
                );
            }
            QOpKind::Dense(d) => {
                weights.extend_from_slice(&d.weight);
                biases.extend_from_slice(&d.bias);
                let _ = writeln!(
                    calls,
                    "    dense(ws + {}, logits, {}, {}, W + {w0}, B + {b0}, Q + {qoff}); /* {} */",
                    off(op.inputs[0])?,
                    d.in_features,
                    d.out_features,
                    op.name
                );
            }
        }
        let _ = writeln!(
            index_map,
            " * {:<16} W[{w0}..{}) B[{b0}..{}) Q[{qoff}..{})",
            op.name,
            weights.len(),
            biases.len(),
            qoff + qn
        );
        qoff += qn;
    }
    debug_assert_eq!(qoff, qwords.len());
    if weights.len() > i32::MAX as usize || arena.size > i32::MAX as usize {
        return Err(Error::Emission(
            "network too large for 32-bit indexing".into(),
        ));
    }

    let mut header = String::new();
    header.push_str("#ifndef ETCN_NET_H\n#define ETCN_NET_H\n\n#include <stdint.h>\n\n");
    let _ = writeln!(header, "#define ETCN_INPUT_LEN {t}");
    let _ = writeln!(header, "#define ETCN_N_CLASSES {n_cls}");
    let _ = writeln!(header, "#define ETCN_ARENA_BYTES {}\n", arena.size);
    header.push_str(
        "/* Runs the network on int8 input already encoded with the input\n   \
         quantization parameters. Writes raw int32 logits and returns the\n   \
         0-based index of the largest one (lowest index on ties).\n   \
         workspace must hold ETCN_ARENA_BYTES bytes. */\n\
         int etcn_infer_ws(int8_t *workspace, const int8_t input[ETCN_INPUT_LEN],\n                  \
         int32_t logits[ETCN_N_CLASSES]);\n",
    );
    if opts.static_buffers {
        header.push_str(
            "\n/* Same, over a static workspace; not reentrant. */\n\
             int etcn_infer(const int8_t input[ETCN_INPUT_LEN], int32_t logits[ETCN_N_CLASSES]);\n",
        );
    }
    header.push_str("\n#endif\n");

    let mut c = String::new();
    c.push_str("#include \"net.h\"\n\n");
    let _ = writeln!(
        c,
        "/* Dilation: {}. Table offsets per layer:\n{index_map} */\n",
        if opts.native_dilation {
            "native"
        } else {
            "zero-stuffed"
        }
    );
    table(&mut c, "int8_t", "W", &weights);
    table(&mut c, "int32_t", "B", &biases);
    table(&mut c, "int32_t", "Q", &qwords);
    c.push_str(KERNELS);
    if !q.blocks.is_empty() {
        c.push_str(ADD_KERNEL);
    }
    c.push_str(
        "int etcn_infer_ws(int8_t *ws, const int8_t input[ETCN_INPUT_LEN],\n                  \
         int32_t logits[ETCN_N_CLASSES])\n{\n    int32_t i;\n    int best = 0;\n",
    );
    let _ = writeln!(
        c,
        "    for (i = 0; i < ETCN_INPUT_LEN; ++i)\n        ws[{} + i] = input[i];",
        off(0)?
    );
    c.push_str(&calls);
    c.push_str(
        "    for (i = 1; i < ETCN_N_CLASSES; ++i)\n        if (logits[i] > logits[best])\n            best = (int)i;\n    \
         return best;\n}\n",
    );
    if opts.static_buffers {
        c.push_str(
            "\nstatic int8_t arena[ETCN_ARENA_BYTES];\n\n\
             int etcn_infer(const int8_t input[ETCN_INPUT_LEN], int32_t logits[ETCN_N_CLASSES])\n{\n    \
             return etcn_infer_ws(arena, input, logits);\n}\n",
        );
    }

    let call = if opts.static_buffers {
        "etcn_infer(input, logits)"
    } else {
        "etcn_infer_ws(workspace, input, logits)"
    };
    let workspace = if opts.static_buffers {
        ""
    } else {
        "static int8_t workspace[ETCN_ARENA_BYTES];\n\n"
    };
    let harness = format!(
        r#"#include <stdio.h>
#include "net.h"

/* Reads golden-vector lines (ETCN_INPUT_LEN int8 inputs, then ETCN_N_CLASSES
   expected logits) and prints "l0 .. lN class" per line, class 1-based.
   Exit status 1 if any logit differs from the expectation. */
{workspace}int main(void)
{{
    int8_t input[ETCN_INPUT_LEN];
    int32_t logits[ETCN_N_CLASSES];
    long expect[ETCN_N_CLASSES];
    long v;
    long lines = 0, mismatches = 0;
    int i, cls, r;
    for (;;) {{
        for (i = 0; i < ETCN_INPUT_LEN; ++i) {{
            r = scanf("%ld", &v);
            if (r != 1) {{
                if (i == 0 && r == EOF)
                    goto done;
                fprintf(stderr, "line %ld: malformed input\n", lines + 1);
                return 2;
            }}
            input[i] = (int8_t)v;
        }}
        for (i = 0; i < ETCN_N_CLASSES; ++i) {{
            if (scanf("%ld", &expect[i]) != 1) {{
                fprintf(stderr, "line %ld: missing expected logits\n", lines + 1);
                return 2;
            }}
        }}
        cls = {call};
        for (i = 0; i < ETCN_N_CLASSES; ++i) {{
            printf("%ld ", (long)logits[i]);
            if ((long)logits[i] != expect[i])
                ++mismatches;
        }}
        printf("%d\n", cls + 1);
        ++lines;
    }}
done:
    fprintf(stderr, "%ld lines, %ld mismatching logits\n", lines, mismatches);
    return mismatches ? 1 : 0;
}}
"#
    );

    Ok(SourceBundle {
        header,
        implementation: c,
        harness,
        const_bytes: weights.len() + 4 * biases.len() + 4 * qwords.len(),
        arena_bytes: arena.size,
    })
}

/// `n` beats drawn without replacement (deterministic in `seed`), quantized
/// with the network's input parameters, with their engine logits.
pub fn emit_golden_vectors(
    qnet: &QNetwork,
    ds: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<GoldenVector>> {
    if ds.is_empty() {
        return Err(Error::Usage(
            "golden vectors need a nonempty dataset".into(),
        ));
    }
    if n > ds.len() {
        return Err(Error::Usage(format!(
            "{n} golden vectors requested from {} beats",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, ds.len(), n)
        .into_iter()
        .map(|i| {
            let input = QFeatureMap::quantize(&ds.beats[i].samples, qnet.input_qp).data;
            let logits = infer_quantized(qnet, &input)?;
            Ok(GoldenVector { input, logits })
        })
        .collect()
}

/// Default compiler command; `{out}` is the executable, `{sources}` the C files.
pub const DEFAULT_CC: &str = "cc -std=c99 -O2 -Wall -Wextra -Werror -pedantic -o {out} {sources}";

/// Environment variable overriding [`DEFAULT_CC`].
pub const CC_ENV: &str = "ETCN_CC";

pub fn compiler_template() -> String {
    std::env::var(CC_ENV).unwrap_or_else(|_| DEFAULT_CC.to_string())
}

/// Compiles a bundle written to `dir`; returns the harness executable.
/// Compiler diagnostics are returned as an error, since warnings are errors.
pub fn compile_bundle(dir: &Path, template: &str) -> Result<PathBuf> {
    let exe = dir.join("etcn_harness");
    let mut parts = template.split_whitespace();
    let prog = parts
        .next()
        .ok_or_else(|| Error::Usage("empty compiler command".into()))?;
    let mut cmd = Command::new(prog);
    for p in parts {
        match p {
            "{out}" => {
                cmd.arg(&exe);
            }
            "{sources}" => {
                cmd.arg(dir.join("net.c")).arg(dir.join("main.c"));
            }
            other => {
                cmd.arg(other);
            }
        }
    }
    let out = cmd
        .current_dir(dir)
        .output()
        .map_err(|e| Error::Emission(format!("cannot run {prog}: {e}")))?;
    let diag = String::from_utf8_lossy(&out.stderr);
    if !out.status.success() || !diag.trim().is_empty() {
        return Err(Error::Emission(format!("compiler reported:\n{diag}")));
    }
    Ok(exe)
}

/// Logits and 1-based class for each golden line, as printed by the harness.
pub fn run_harness(exe: &Path, golden: &str) -> Result<Vec<(Vec<i32>, usize)>> {
    use std::io::Write as _;
    let mut child = Command::new(exe)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Emission(format!("cannot run {}: {e}", exe.display())))?;
    child
        .stdin
        .take()
        .expect("piped")
        .write_all(golden.as_bytes())
        .map_err(|e| Error::io(exe, e))?;
    let out = child.wait_with_output().map_err(|e| Error::io(exe, e))?;
    if out.status.code() == Some(2) || out.status.code().is_none() {
        return Err(Error::Emission(format!(
            "harness failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| {
            let v: Vec<i64> = l
                .split_whitespace()
                .map(|f| {
                    f.parse()
                        .map_err(|_| Error::Emission(format!("harness printed {l:?}")))
                })
                .collect::<Result<_>>()?;
            let (cls, logits) = v
                .split_last()
                .ok_or_else(|| Error::Emission("empty harness line".into()))?;
            Ok((logits.iter().map(|&x| x as i32).collect(), *cls as usize))
        })
        .collect()
}
