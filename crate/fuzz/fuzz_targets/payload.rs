#![no_main]

use lgc::codec::payload::unpack_payload_prefix;
use lgc::codec::{pack_payload, unpack_bundle, unpack_payload};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = unpack_payload(data) {
        let again = pack_payload(&p).expect("a decoded payload packs");
        let back = unpack_payload(&again).expect("repacked payload decodes");
        assert_eq!(pack_payload(&back).unwrap(), again);
    }
    if let Ok((p, used)) = unpack_payload_prefix(data) {
        assert!(used <= data.len());
        let whole = unpack_payload(&data[..used]).expect("the consumed prefix decodes alone");
        assert_eq!(pack_payload(&whole).unwrap(), pack_payload(&p).unwrap());
    }
    let _ = unpack_bundle(data);
});
