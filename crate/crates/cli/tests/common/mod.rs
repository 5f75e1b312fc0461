//! Golden-file cases shared by the golden and acceptance targets. Set
//! `HSA_BLESS=1` to rewrite the committed outputs.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub struct Case {
    pub name: &'static str,
    pub args: &'static [&'static str],
    /// Files the command writes into the scratch directory.
    pub files: &'static [&'static str],
    pub exit: i32,
}

/// `{F}` expands to the fixture directory and `{T}` to a scratch directory.
pub const CASES: &[Case] = &[
    Case {
        name: "attend",
        args: &["attend", "--input", "{F}/small.json", "--payload", "values", "--threads", "1", "--verify", "--out", "{T}/attend.json"],
        files: &["attend.json"],
        exit: 0,
    },
    Case {
        name: "attend_causal",
        args: &["attend", "--input", "{F}/small.json", "--causal", "--include-self", "false", "--threads", "1", "--verify", "--out", "{T}/attend_causal.json"],
        files: &["attend_causal.json"],
        exit: 0,
    },
    Case {
        name: "matrix",
        args: &["matrix", "--input", "{F}/small.json", "--out", "{T}/matrix.csv", "--flat-out", "{T}/matrix_flat.csv"],
        files: &["matrix.csv", "matrix_flat.csv"],
        exit: 0,
    },
    Case {
        name: "matrix_identical",
        args: &["matrix", "--input", "{F}/flat3.json", "--out", "{T}/matrix_identical.csv"],
        files: &["matrix_identical.csv"],
        exit: 0,
    },
    Case {
        name: "compare",
        args: &["compare", "--input", "{F}/small.json", "--verify"],
        files: &[],
        exit: 0,
    },
    Case {
        name: "compare_flat",
        args: &["compare", "--input", "{F}/flat3.json"],
        files: &[],
        exit: 0,
    },
    Case {
        name: "bench",
        args: &["bench", "--n", "16,32,64", "--branching", "2,4", "--dim", "8", "--threads", "1", "--out", "{T}/bench.csv"],
        files: &["bench.csv"],
        exit: 0,
    },
    Case {
        name: "generate",
        args: &["generate", "--policy", "fixed:2,2", "--tokens", "128", "--dim", "8", "--seed", "3", "--verify", "--out", "{T}/generate.csv"],
        files: &["generate.csv"],
        exit: 0,
    },
    Case {
        name: "generate_text",
        args: &["generate", "--policy", "text", "--text", "{F}/doc.txt", "--dim", "8", "--pos-dim", "2", "--out", "{T}/generate_text.csv"],
        files: &["generate_text.csv"],
        exit: 0,
    },
    Case {
        name: "build_fixed",
        args: &["build", "--mode", "fixed", "--input", "{F}/vectors.txt", "--branching", "2,2", "--pos-dim", "2", "--out", "{T}/build_fixed.json"],
        files: &["build_fixed.json"],
        exit: 0,
    },
    Case {
        name: "build_text",
        args: &["build", "--mode", "text", "--input", "{F}/doc.txt", "--dim", "4", "--pos-dim", "2", "--out", "{T}/build_text.json"],
        files: &["build_text.json"],
        exit: 0,
    },
    Case {
        name: "schema_error",
        args: &["attend", "--input", "{F}/bad.json"],
        files: &[],
        exit: 2,
    },
];

pub fn dir(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(sub)
}

fn blessing() -> bool {
    std::env::var_os("HSA_BLESS").is_some_and(|v| v == "1")
}

/// Runs one case and compares stdout and every written file with its
/// golden copy.
pub fn check(case: &Case) -> Result<(), String> {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = dir("fixtures");
    let mut argv = vec!["hsa".to_string()];
    argv.extend(case.args.iter().map(|a| {
        a.replace("{F}", fixtures.to_str().expect("utf-8 path"))
            .replace("{T}", scratch.path().to_str().expect("utf-8 path"))
    }));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = hsa_cli::run(&argv, &mut out, &mut err);
    if code != case.exit {
        return Err(format!("{}: exit {code}, expected {}: {}", case.name, case.exit, String::from_utf8_lossy(&err)));
    }
    let golden = dir("golden");
    let mut produced = vec![(format!("{}.stdout", case.name), out)];
    for f in case.files {
        let bytes = fs::read(scratch.path().join(f)).map_err(|e| format!("{}: {f} not written: {e}", case.name))?;
        produced.push((f.to_string(), bytes));
    }
    for (name, bytes) in produced {
        let path = golden.join(&name);
        if blessing() {
            fs::write(&path, &bytes).map_err(|e| e.to_string())?;
            continue;
        }
        let want = fs::read(&path).map_err(|e| format!("missing golden {name}: {e}"))?;
        if want != bytes {
            return Err(format!("{name} differs from its golden copy"));
        }
    }
    Ok(())
}

/// Checks every case; returns the failures.
pub fn check_all() -> Vec<String> {
    CASES.iter().filter_map(|c| check(c).err()).collect()
}
