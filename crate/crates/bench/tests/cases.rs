use std::path::Path;

use prompt_artisan_bench::fixtures::{shipped_cases_dir, write_synthetic_cases};
use prompt_artisan_bench::{load_cases, CASE_SCHEMA};

fn copy_case(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join("case.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn empty_directory_has_no_cases() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_cases(dir.path()).unwrap();
    assert!(loaded.cases.is_empty() && loaded.errors.is_empty());
}

#[test]
fn shipped_cases_load_in_id_order() {
    let loaded = load_cases(shipped_cases_dir()).unwrap();
    assert!(loaded.errors.is_empty(), "{:?}", loaded.errors);
    let ids: Vec<_> = loaded.cases.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(
        ids,
        ["disjoint-pair", "overlap-order", "shared-boundary", "shared-group", "triple-intersection"]
    );
    let shared = &loaded.cases[3];
    assert_eq!(shared.edits[0].group, shared.edits[1].group);
    assert_eq!(shared.scoring_prompt(), "add a red apple, add a red apple");
    for case in &loaded.cases {
        let req = case.request(&Default::default()).unwrap();
        req.validate().unwrap();
        assert_eq!(req.config.steps, 10);
    }
}

#[test]
fn shipped_cases_match_generator() {
    let dir = tempfile::tempdir().unwrap();
    let ids = write_synthetic_cases(dir.path()).unwrap();
    assert_eq!(ids.len(), 5);
    for id in ids {
        for entry in std::fs::read_dir(dir.path().join(&id)).unwrap() {
            let p = entry.unwrap().path();
            let shipped = shipped_cases_dir().join(&id).join(p.file_name().unwrap());
            assert_eq!(
                std::fs::read(&p).unwrap(),
                std::fs::read(&shipped).unwrap(),
                "{} is stale; rerun the make_fixtures example",
                shipped.display()
            );
        }
    }
}

#[test]
fn shipped_manifests_satisfy_schema() {
    let schema: serde_json::Value = serde_json::from_str(CASE_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for entry in std::fs::read_dir(shipped_cases_dir()).unwrap() {
        let path = entry.unwrap().path().join("case.json");
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(validator.is_valid(&v), "{}", path.display());
    }
    let bad = serde_json::json!({"id": "x", "image": "i.png", "edits": [{"mask": "m.png", "prompt": "p", "order": "high", "group": 1}]});
    assert!(!validator.is_valid(&bad));
}

#[test]
fn schema_violation_reports_json_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("bad");
    copy_case(&shipped_cases_dir().join("disjoint-pair"), &case);
    edit_manifest(&case, |v| v["edits"][1]["order"] = "high".into());
    copy_case(&shipped_cases_dir().join("shared-group"), &dir.path().join("good"));
    let loaded = load_cases(dir.path()).unwrap();
    assert_eq!(loaded.cases.len(), 1);
    assert_eq!(loaded.errors.len(), 1);
    assert_eq!(loaded.errors[0].pointer.as_deref(), Some("/edits/1/order"));
    assert!(loaded.errors[0].to_string().contains("/edits/1/order"));
}

#[test]
fn missing_file_and_size_mismatch_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    copy_case(&shipped_cases_dir().join("disjoint-pair"), &missing);
    std::fs::remove_file(missing.join("mask-2.png")).unwrap();

    let mismatch = dir.path().join("mismatch");
    copy_case(&shipped_cases_dir().join("overlap-order"), &mismatch);
    let small = image::GrayImage::new(32, 32);
    small.save(mismatch.join("mask-1.png")).unwrap();
    edit_manifest(&mismatch, |v| v["id"] = "mismatch".into());

    let loaded = load_cases(dir.path()).unwrap();
    assert!(loaded.cases.is_empty());
    let pointers: Vec<_> = loaded.errors.iter().map(|e| e.pointer.clone().unwrap()).collect();
    assert_eq!(pointers, ["/edits/0/mask", "/edits/1/mask"]);
    assert!(loaded.errors[0].message.contains("32x32"));
}

#[test]
fn empty_edits_and_duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    copy_case(&shipped_cases_dir().join("disjoint-pair"), &a);
    edit_manifest(&a, |v| v["edits"] = serde_json::json!([]));
    copy_case(&shipped_cases_dir().join("shared-group"), &dir.path().join("b"));
    copy_case(&shipped_cases_dir().join("shared-group"), &dir.path().join("c"));
    let loaded = load_cases(dir.path()).unwrap();
    assert!(loaded.cases.is_empty());
    assert_eq!(loaded.errors.len(), 3);
    assert!(loaded.errors.iter().any(|e| e.pointer.as_deref() == Some("/edits")));
    assert_eq!(loaded.errors.iter().filter(|e| e.message.contains("duplicate")).count(), 2);
}
