#![no_main]

use lgc::codec::payload::{decode_index_block, encode_index_block, leb128_decode, leb128_encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = decode_index_block(data) {
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let block = encode_index_block(&idx).expect("sorted indices encode");
        assert_eq!(decode_index_block(&block).unwrap(), idx);
    }
    if let Ok(v) = leb128_decode(data) {
        assert_eq!(leb128_decode(&leb128_encode(&v)).unwrap(), v);
    }
});
