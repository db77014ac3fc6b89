#![no_main]

use lgc::infoplane::GradientDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dump) = GradientDump::parse(data) {
        assert_eq!(dump.to_bytes(), data);
    }
});
