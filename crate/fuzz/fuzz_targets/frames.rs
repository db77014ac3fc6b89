#![no_main]

use lgc::comms::{read_frame, split_frames, write_frame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let max = 1 << 16;
    if let Ok(frames) = split_frames(data, max) {
        let mut out = Vec::new();
        for f in &frames {
            write_frame(&mut out, f).unwrap();
        }
        assert_eq!(out, data);
    }
    let mut cursor = data;
    while let Ok(f) = read_frame(&mut cursor, max) {
        assert!(f.len() <= max);
    }
});
