use dxgen::tokenizer::*;

#[test]
fn cap_keeps_exactly_max_plus_specials() {
    let texts: Vec<String> = (0..5000).map(|i| format!("w{i} ").repeat(1 + i % 7)).collect();
    let v = Vocabulary::build(&texts, 1000).unwrap();
    assert_eq!(v.len(), 1000 + NUM_SPECIAL as usize);
    // word i occurs 1 + i % 7 times: all 714 seven-count words fit, one-count words do not
    assert!((0..5000).filter(|i| i % 7 == 6).all(|i| v.id(&format!("w{i}")).is_some()));
    assert!((0..5000).filter(|i| i % 7 == 0).all(|i| v.id(&format!("w{i}")).is_none()));
}

#[test]
fn frequency_order_and_rebuild() {
    let v = Vocabulary::build(&["a a b"], 8).unwrap();
    assert!(v.id("a").unwrap() < v.id("b").unwrap());
    assert_eq!(v.len(), 2 + NUM_SPECIAL as usize);
    assert_eq!(Vocabulary::build(&["a a b"], 8).unwrap(), v);
}

#[test]
fn encode_edges() {
    let v = Vocabulary::build(&["macular hole"], 8).unwrap();
    assert!(v.encode("").is_empty());
    let ids = v.encode("macular cyst");
    assert_eq!(ids[1], UNK);
    assert_eq!(v.decode(&[v.id("macular").unwrap(), v.id("hole").unwrap()]).unwrap(), "macular hole");
    assert!(v.decode(&[v.len() as u32]).is_err());
}

#[test]
fn cjk_is_split_per_codepoint() {
    assert_eq!(segment("视网膜 detachment"), vec!["视", "网", "膜", "detachment"]);
    let v = Vocabulary::build(&["视网膜脱离"], 16).unwrap();
    assert_eq!(v.encode("视网膜脱离").len(), 5);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.json");
    let v = Vocabulary::build(&["optic disc pallor", "disc edema"], 64).unwrap();
    v.save(&p).unwrap();
    assert_eq!(Vocabulary::load(&p).unwrap(), v);
}
