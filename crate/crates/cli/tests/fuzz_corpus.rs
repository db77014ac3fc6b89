use std::path::PathBuf;

#[test]
fn config_corpus() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/config");
    let mut accepted = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let data = std::fs::read(entry.unwrap().path()).unwrap();
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(cfg) = lgc_cli::parse_str(text, "corpus") {
            let echoed = cfg.resolved().to_toml_string().unwrap();
            assert_eq!(lgc_cli::parse_str(&echoed, "echo").unwrap(), cfg.resolved());
            accepted += 1;
        }
    }
    assert!(accepted > 0);
}
