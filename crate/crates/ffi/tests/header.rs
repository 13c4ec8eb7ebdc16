use std::path::Path;
use std::process::Command;

const HEADER: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/include/slr.h");

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(HEADER).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from slr.h");
    }
    assert!(header.contains("typedef struct SlrModel SlrModel;"));
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("main.c");
    std::fs::write(
        &main,
        r#"#include "slr.h"
int main(void) {
    SlrModel *m = 0;
    SlrStatus st = slr_model_build("tiny", 32, 3, 0, &m);
    if (st != SLR_STATUS_OK) return (int)st;
    SlrMetrics metrics;
    size_t t[2] = {0, 1};
    st = slr_metrics(t, t, 2, 2, SLR_AVERAGE_MACRO, &metrics);
    slr_model_free(m);
    return st == SLR_STATUS_OK && slr_last_error() == 0 ? 0 : 1;
}
"#,
    )
    .unwrap();
    let include = Path::new(HEADER).parent().unwrap();
    let status = match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include)
        .arg(&main)
        .status()
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("skipping: no C compiler ({cc}: {e})");
            return;
        }
    };
    assert!(status.success());
}
