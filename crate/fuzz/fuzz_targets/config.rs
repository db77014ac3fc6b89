#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = lgc_cli::parse_str(text, "fuzz") {
        let echoed = cfg.resolved().to_toml_string().expect("valid configs serialize");
        assert_eq!(lgc_cli::parse_str(&echoed, "echo").expect("echo parses"), cfg.resolved());
    }
});
