mod common;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use ecg_tcn::codegen::{
    compile_bundle, compiler_template, emit_golden_vectors, emit_source, run_harness, EmitOptions,
};
use ecg_tcn::cost::weight_bytes;
use ecg_tcn::engine::{
    format_golden, infer_quantized, parse_golden, zero_stuff_network, GoldenVector,
};
use ecg_tcn::quant::QNetwork;
use ecg_tcn::synthetic::{synthetic_dataset, ECG5000_TRAIN_SHARES};
use ecg_tcn::Error;

fn build(q: &QNetwork, opts: EmitOptions) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    emit_source(q, opts).unwrap().write_to(dir.path()).unwrap();
    let exe = compile_bundle(dir.path(), &compiler_template()).unwrap();
    (dir, exe)
}

/// Element count of each `static const <ty> NAME[n]` table, checked against its initializer.
fn table_bytes(c: &str) -> usize {
    let mut total = 0;
    let mut lines = c.lines();
    while let Some(line) = lines.next() {
        let Some(rest) = line.strip_prefix("static const ") else {
            continue;
        };
        let width = if rest.starts_with("int8_t") { 1 } else { 4 };
        let declared: usize = rest[rest.find('[').unwrap() + 1..rest.find(']').unwrap()]
            .parse()
            .unwrap();
        let mut count = 0;
        for body in lines.by_ref() {
            if body.starts_with("};") {
                break;
            }
            count += body.split(',').filter(|f| !f.trim().is_empty()).count();
        }
        assert_eq!(count, declared, "{line}");
        total += width * declared;
    }
    total
}

#[test]
fn compiled_c_reproduces_golden_vectors() {
    let q = common::full_qnet(21);
    let ds = synthetic_dataset(300, &ECG5000_TRAIN_SHARES, 21);
    let golden = emit_golden_vectors(&q, &ds, 100, 5).unwrap();
    let text = format_golden(&golden);
    for native_dilation in [true, false] {
        let (_dir, exe) = build(
            &q,
            EmitOptions {
                native_dilation,
                static_buffers: true,
            },
        );
        let out = run_harness(&exe, &text).unwrap();
        assert_eq!(out.len(), 100);
        for (g, (logits, cls)) in golden.iter().zip(&out) {
            assert_eq!(&g.logits, logits, "native_dilation={native_dilation}");
            let want = ecg_tcn::engine::argmax_i32(&g.logits) + 1;
            assert_eq!(*cls, want);
        }
    }
}

#[test]
fn workspace_variant_compiles_and_agrees() {
    let q = common::full_qnet(22);
    let ds = synthetic_dataset(40, &ECG5000_TRAIN_SHARES, 22);
    let golden = emit_golden_vectors(&q, &ds, 20, 1).unwrap();
    let opts = EmitOptions {
        native_dilation: true,
        static_buffers: false,
    };
    let bundle = emit_source(&q, opts).unwrap();
    assert!(!bundle.header.contains("etcn_infer("));
    let (_dir, exe) = build(&q, opts);
    let out = run_harness(&exe, &format_golden(&golden)).unwrap();
    assert!(golden.iter().zip(&out).all(|(g, (l, _))| &g.logits == l));
}

#[test]
fn identity_network_echoes_input() {
    let q = common::identity_qnet(5, 5);
    let (_dir, exe) = build(&q, EmitOptions::default());
    let vectors: Vec<GoldenVector> = [[1i8, -2, 3, -128, 127], [0, 0, 0, 0, 0], [9, 9, 9, 9, 10]]
        .iter()
        .map(|x| GoldenVector {
            input: x.to_vec(),
            logits: x.iter().map(|&v| v as i32).collect(),
        })
        .collect();
    let out = run_harness(&exe, &format_golden(&vectors)).unwrap();
    for (v, (l, cls)) in vectors.iter().zip(&out) {
        assert_eq!(&v.logits, l);
        assert_eq!(infer_quantized(&q, &v.input).unwrap(), *l);
        assert!((1..=5).contains(cls));
    }
    assert_eq!(out[0].1, 5);
    assert_eq!(out[1].1, 1);
}

#[test]
fn harness_exit_status_reports_mismatch_and_bad_input() {
    let q = common::identity_qnet(5, 5);
    let (_dir, exe) = build(&q, EmitOptions::default());
    let run = |stdin: &str| {
        let mut child = Command::new(&exe)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        child
            .stdin
            .take()
            .unwrap()
            .write_all(stdin.as_bytes())
            .unwrap();
        child.wait().unwrap().code()
    };
    assert_eq!(run("1 2 3 4 5 1 2 3 4 5\n"), Some(0));
    assert_eq!(run("1 2 3 4 5 1 2 3 4 6\n"), Some(1));
    assert_eq!(run("1 2 x\n"), Some(2));
    assert_eq!(run("1 2 3 4 5 1 2\n"), Some(2));
    assert_eq!(run(""), Some(0));
}

#[test]
fn constant_tables_match_weight_bytes() {
    let q = common::full_qnet(23);
    let native = emit_source(&q, EmitOptions::default()).unwrap();
    assert_eq!(table_bytes(&native.implementation), weight_bytes(&q));
    assert_eq!(native.const_bytes, weight_bytes(&q));
    let stuffed = emit_source(
        &q,
        EmitOptions {
            native_dilation: false,
            static_buffers: true,
        },
    )
    .unwrap();
    assert_eq!(
        table_bytes(&stuffed.implementation),
        weight_bytes(&zero_stuff_network(&q))
    );
    assert!(stuffed.const_bytes > native.const_bytes);
    assert_eq!(native.arena_bytes, ecg_tcn::cost::peak_activation_bytes(&q));
    assert!(native
        .header
        .contains(&format!("#define ETCN_ARENA_BYTES {}", native.arena_bytes)));
}

#[test]
fn generated_code_is_freestanding() {
    let q = common::full_qnet(24);
    let b = emit_source(&q, EmitOptions::default()).unwrap();
    let includes: Vec<&str> = [&b.header, &b.implementation, &b.harness]
        .iter()
        .flat_map(|s| s.lines())
        .filter(|l| l.starts_with("#include"))
        .collect();
    assert_eq!(
        includes,
        [
            "#include <stdint.h>",
            "#include \"net.h\"",
            "#include <stdio.h>",
            "#include \"net.h\""
        ]
    );
    for src in [&b.header, &b.implementation, &b.harness] {
        for banned in ["malloc", "free(", "float", "double"] {
            assert!(!src.contains(banned), "{banned}");
        }
    }
    assert!(!b.implementation.contains("stdio"));
}

#[test]
fn golden_vectors_are_deterministic_and_well_formed() {
    let q = common::full_qnet(25);
    let ds = synthetic_dataset(50, &ECG5000_TRAIN_SHARES, 25);
    let a = emit_golden_vectors(&q, &ds, 10, 3).unwrap();
    assert_eq!(a, emit_golden_vectors(&q, &ds, 10, 3).unwrap());
    assert_ne!(a, emit_golden_vectors(&q, &ds, 10, 4).unwrap());
    let text = format_golden(&a);
    assert!(text.lines().all(|l| l.split_whitespace().count() == 145));
    assert_eq!(parse_golden(&text, 140, 5).unwrap(), a);
    for g in &a {
        assert_eq!(infer_quantized(&q, &g.input).unwrap(), g.logits);
    }
    assert!(emit_golden_vectors(&q, &ds, 51, 3).is_err());
    assert!(parse_golden("1 2 3\n", 140, 5).is_err());
}

#[test]
fn compiler_failure_is_an_emission_error() {
    let q = common::identity_qnet(5, 5);
    let dir = tempfile::tempdir().unwrap();
    emit_source(&q, EmitOptions::default())
        .unwrap()
        .write_to(dir.path())
        .unwrap();
    assert!(matches!(
        compile_bundle(dir.path(), "definitely-not-a-compiler -o {out} {sources}"),
        Err(Error::Emission(_))
    ));
    // Diagnostics on stderr fail the build even when the compiler succeeds.
    assert!(matches!(
        compile_bundle(dir.path(), "cc -std=c99 -Wstack-usage=1 -o {out} {sources}"),
        Err(Error::Emission(_))
    ));
}
