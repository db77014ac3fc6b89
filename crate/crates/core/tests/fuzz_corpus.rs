//! Replays the checked-in fuzz corpora through the same properties the fuzz targets assert.

use std::path::PathBuf;

use lgc::codec::payload::{decode_index_block, encode_index_block, leb128_decode, leb128_encode, unpack_payload_prefix};
use lgc::codec::{pack_payload, unpack_bundle, unpack_payload};
use lgc::comms::{read_frame, split_frames, write_frame, RateLedger};
use lgc::infoplane::GradientDump;
use lgc::trainer::MetricsSeries;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {}", dir.display());
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

#[test]
fn payload_corpus() {
    let mut decoded = 0;
    for data in corpus("payload") {
        if let Ok(p) = unpack_payload(&data) {
            let again = pack_payload(&p).unwrap();
            assert_eq!(pack_payload(&unpack_payload(&again).unwrap()).unwrap(), again);
            decoded += 1;
        }
        if let Ok((p, used)) = unpack_payload_prefix(&data) {
            let whole = unpack_payload(&data[..used]).unwrap();
            assert_eq!(pack_payload(&whole).unwrap(), pack_payload(&p).unwrap());
        }
        let _ = unpack_bundle(&data);
    }
    assert!(decoded > 0);
}

#[test]
fn index_block_corpus() {
    for data in corpus("index_block") {
        if let Ok(idx) = decode_index_block(&data) {
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(decode_index_block(&encode_index_block(&idx).unwrap()).unwrap(), idx);
        }
        if let Ok(v) = leb128_decode(&data) {
            assert_eq!(leb128_decode(&leb128_encode(&v)).unwrap(), v);
        }
    }
}

#[test]
fn frames_corpus() {
    for data in corpus("frames") {
        if let Ok(frames) = split_frames(&data, 1 << 16) {
            let mut out = Vec::new();
            for f in &frames {
                write_frame(&mut out, f).unwrap();
            }
            assert_eq!(out, data);
        }
        let mut cursor = data.as_slice();
        while let Ok(f) = read_frame(&mut cursor, 1 << 16) {
            assert!(f.len() <= 1 << 16);
        }
    }
}

#[test]
fn gradient_dump_corpus() {
    for data in corpus("gradient_dump") {
        if let Ok(dump) = GradientDump::parse(&data) {
            assert_eq!(dump.to_bytes(), data);
        }
    }
}

#[test]
fn csv_corpus() {
    for data in corpus("csv") {
        if let Ok(l) = RateLedger::read_csv(data.as_slice()) {
            let text = l.to_csv_string().unwrap();
            assert_eq!(RateLedger::read_csv(text.as_bytes()).unwrap().to_csv_string().unwrap(), text);
        }
        if let Ok(m) = MetricsSeries::read_csv(data.as_slice()) {
            let _ = m.to_csv_string();
        }
    }
}
