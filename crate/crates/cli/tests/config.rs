use cns_cli::{ConfigError, RunConfig};

#[test]
fn resolved_text_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.set("clip_eps", "0.25").unwrap();
    cfg.set("hidden", "16,8").unwrap();
    cfg.set("switch_probs", "0.1,0.2,0.3,0.4").unwrap();
    let mut again = RunConfig::default();
    again.apply_text("resolved.cfg", &cfg.resolved()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.resolved(), cfg.resolved());
}

#[test]
fn every_key_reads_back_what_it_wrote() {
    let cfg = RunConfig::default();
    for key in RunConfig::keys() {
        let value = cfg.get(key).unwrap();
        let mut copy = RunConfig::default();
        copy.set(key, &value).unwrap_or_else(|e| panic!("{key}={value}: {e}"));
        assert_eq!(copy, cfg, "{key}");
    }
}

#[test]
fn malformed_files_are_rejected_with_location() {
    let mut cfg = RunConfig::default();
    assert_eq!(cfg.set("colour", "1"), Err(ConfigError::UnknownKey("colour".into())));
    assert!(matches!(
        cfg.apply_text("a.cfg", "# note\nseed 3\n"),
        Err(ConfigError::Syntax { line: 2, .. })
    ));
    assert!(matches!(
        cfg.apply_text("a.cfg", "seed=1\nseed=2\n"),
        Err(ConfigError::Duplicate { line: 2, .. })
    ));
    assert!(matches!(cfg.set("lr", "fast"), Err(ConfigError::BadValue { .. })));
    assert!(matches!(cfg.set("seeds", ""), Err(ConfigError::BadValue { .. })));
}

#[test]
fn overrides_take_both_spellings() {
    let mut cfg = RunConfig::default();
    let args: Vec<String> = ["--seed", "9", "--clip_block=2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg.apply_overrides(&args).unwrap();
    assert_eq!(
        (
            cfg.get("seed").unwrap().as_str(),
            cfg.get("clip_block").unwrap().as_str()
        ),
        ("9", "2")
    );
    assert_eq!(
        cfg.apply_overrides(&["--lr".into()]),
        Err(ConfigError::MissingValue("--lr".into()))
    );
}

#[test]
fn file_values_yield_to_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "seed = 3\nclip_eps = 0.1\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &["--seed".into(), "4".into()]).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.get("clip_eps").unwrap(), "0.1");
}

#[test]
fn command_flags_are_not_config_keys() {
    let (rest, overrides) = cns_cli::split_overrides(
        ["cns", "train", "--out", "o", "--lr", "0.2", "--bundle=b", "--seed=5"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );
    assert_eq!(rest, vec!["cns", "train", "--out", "o", "--bundle=b"]);
    assert_eq!(overrides, vec!["--lr", "0.2", "--seed=5"]);
}
