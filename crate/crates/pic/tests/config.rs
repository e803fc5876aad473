use pic::config::{parse_config, RunConfig};
use pic_core::Variant;

#[test]
fn cat_variant_gets_its_own_mask_ratio() {
    let c = parse_config(r#"{"variant": "cat"}"#).unwrap().resolve(Some(0)).unwrap();
    assert_eq!(c.variant, Variant::Cat);
    assert_eq!(c.mask_ratio, Some(0.6));
    assert_eq!(c.model_config().mask_ratio, 0.6);
}

#[test]
fn explicit_seed_beats_file_seed() {
    let c = parse_config(r#"{"seed": 7}"#).unwrap();
    assert_eq!(c.clone().resolve(Some(3)).unwrap().seed(), 3);
    assert_eq!(c.resolve(None).unwrap().seed(), 7);
}

#[test]
fn invalid_model_is_rejected() {
    // width 10 does not split over 3 heads
    let c = parse_config(r#"{"model": {"dim": 10, "heads": 3}}"#).unwrap();
    assert!(c.resolve(Some(0)).is_err());
    assert!(parse_config(r#"{"optimizer": {"lr": "fast"}}"#).is_err());
}

#[test]
fn hash_tracks_content() {
    let a = RunConfig::default().resolve(Some(1)).unwrap();
    let b = RunConfig::default().resolve(Some(2)).unwrap();
    assert_eq!(a.hash(), a.clone().hash());
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    let round: RunConfig = serde_json::from_value(a.to_json()).unwrap();
    assert_eq!(round, a);
}

#[test]
fn readme_example_parses() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```json\n").unwrap() + 8;
    let end = start + readme[start..].find("```").unwrap();
    let c = parse_config(&readme[start..end]).unwrap().resolve(None).unwrap();
    assert_eq!(c.seed(), 1);
    assert_eq!(c.model.dim, 128);
}
