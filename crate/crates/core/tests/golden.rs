mod common;

use std::fs;

use cclforge_core::IrProgram;
use common::{golden_configs, golden_dir, schema_mutations};

/// Set to rewrite the golden files from the current compiler.
const BLESS: &str = "CCLFORGE_BLESS";

#[test]
fn compiled_programs_match_golden_files() {
    let bless = std::env::var_os(BLESS).is_some();
    let dir = golden_dir();
    for (stem, c) in golden_configs() {
        let path = dir.join(format!("{stem}.ir.json"));
        let text = c.compile(true).ir.to_json();
        if bless {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &text).unwrap();
            continue;
        }
        let golden = fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("{}: {e} (run with {BLESS}=1 to create it)", path.display()));
        assert!(golden == text, "{stem} differs from {}; rerun with {BLESS}=1 if intended", path.display());
    }
}

#[test]
fn golden_files_round_trip() {
    for (stem, _) in golden_configs() {
        let text = fs::read_to_string(golden_dir().join(format!("{stem}.ir.json"))).unwrap();
        let ir = IrProgram::from_json(&text).unwrap();
        assert_eq!(ir.to_json(), text, "{stem}");
        assert_eq!(IrProgram::from_json(&ir.to_json()).unwrap(), ir, "{stem}");
    }
}

#[test]
fn schema_mutations_name_their_path() {
    let text = fs::read_to_string(golden_dir().join("ring_allreduce_r4.ir.json")).unwrap();
    let base: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mutations = schema_mutations();
    assert!(mutations.len() >= 20);
    for m in mutations {
        let mut v = base.clone();
        (m.apply)(&mut v);
        let err = IrProgram::from_json(&v.to_string()).expect_err(m.label);
        assert_eq!(err.path(), Some(m.path), "{}: {err}", m.label);
    }
}

#[test]
fn malformed_json_is_not_a_schema_error() {
    let err = IrProgram::from_json("{\"name\": ").unwrap_err();
    assert_eq!(err.path(), None);
}
