use std::io::Read;

use flate2::read::DeflateDecoder;
use lgc::codec::payload::{decode_index_block, encode_index_block, HEADER_LEN, MAGIC};
use lgc::codec::{pack_payload, payload_sizes, unpack_bundle, unpack_payload, CompressedPayload, PayloadKind, ValueWidth};
use lgc::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_inflate(block: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    DeflateDecoder::new(block).read_to_end(&mut out).expect("zlib inflates the block");
    out
}

/// LEB128 varints of first index, then gaps minus one.
fn reference_indices(raw: &[u8]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut acc, mut shift) = (0u64, 0);
    for &b in raw {
        acc |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            let next = match out.last() {
                None => acc as usize,
                Some(&p) => p + 1 + acc as usize,
            };
            out.push(next);
            acc = 0;
            shift = 0;
        } else {
            shift += 7;
        }
    }
    out
}

fn random_indices(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(1..200_000usize);
    let density = [0.0005, 0.01, 0.2, 0.9][rng.random_range(0..4)];
    let mut v: Vec<usize> = (0..n).filter(|_| rng.random_bool(density)).collect();
    if rng.random_bool(0.1) {
        v.clear();
    }
    v
}

#[test]
fn index_blocks_inflate_with_the_reference_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..100 {
        let idx = random_indices(&mut rng);
        let block = encode_index_block(&idx).unwrap();
        assert_eq!(reference_indices(&reference_inflate(&block)), idx);
        assert_eq!(decode_index_block(&block).unwrap(), idx);
    }
}

fn random_payload(rng: &mut ChaCha8Rng, kind: PayloadKind) -> CompressedPayload {
    let width = if rng.random_bool(0.5) { ValueWidth::F32 } else { ValueWidth::F64 };
    let mut p = CompressedPayload::new(kind, rng.random(), rng.random()).with_width(width);
    let n = rng.random_range(0..3000usize);
    if kind.is_dense() {
        p.values = (0..n).map(|_| width.round(rng.random_range(-10.0..10.0))).collect();
    } else {
        p.indices = (0..n * 8).filter(|_| rng.random_bool(0.125)).collect();
        if kind != PayloadKind::Innovation || rng.random_bool(0.5) {
            p.values = p.indices.iter().map(|_| width.round(rng.random_range(-10.0..10.0))).collect();
        }
    }
    p
}

#[test]
fn every_kind_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for t in 0..1000 {
        let kind = PayloadKind::ALL[t % 5];
        let p = random_payload(&mut rng, kind);
        let bytes = pack_payload(&p).unwrap();
        assert_eq!(bytes.len(), payload_sizes(&p).unwrap().total());
        assert_eq!(&bytes[..4], &MAGIC);
        assert_eq!(unpack_payload(&bytes).unwrap(), p, "kind {kind}");
    }
}

#[test]
fn header_layout_is_little_endian() {
    let p = CompressedPayload::new(PayloadKind::Topk, 0x0102_0304, 0x0506)
        .with_values(vec![1.5, -2.0])
        .with_indices(vec![3, 9]);
    let b = pack_payload(&p).unwrap();
    assert_eq!(b[4], 0x01);
    assert_eq!(&b[5..9], &[4, 3, 2, 1]);
    assert_eq!(&b[9..11], &[6, 5]);
    assert_eq!(b[11], 1);
    assert_eq!(&b[12..16], &2u32.to_le_bytes());
    let idx_len = u32::from_le_bytes(b[16..20].try_into().unwrap()) as usize;
    assert_eq!(b.len(), HEADER_LEN + 8 + idx_len);
    let crc = u32::from_le_bytes(b[20..24].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&b[HEADER_LEN..]));
    assert_eq!(&b[24..28], &1.5f32.to_le_bytes());
    assert_eq!(reference_indices(&reference_inflate(&b[32..])), vec![3, 9]);
}

#[test]
fn corruption_is_detected() {
    let p = CompressedPayload::new(PayloadKind::Dense, 1, 2).with_values(vec![1.0, 2.0, 3.0]);
    let mut b = pack_payload(&p).unwrap();
    b[HEADER_LEN + 1] ^= 0x10;
    assert!(matches!(unpack_payload(&b), Err(Error::Corruption { .. })));
}

#[test]
fn bundles_split_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let ps: Vec<_> = PayloadKind::ALL.iter().map(|&k| random_payload(&mut rng, k)).collect();
    let bytes: Vec<u8> = ps.iter().flat_map(|p| pack_payload(p).unwrap()).collect();
    assert_eq!(unpack_bundle(&bytes).unwrap(), ps);
    assert!(unpack_bundle(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn unsorted_indices_rejected() {
    let p = CompressedPayload::new(PayloadKind::Topk, 0, 0).with_values(vec![1.0, 2.0]).with_indices(vec![5, 5]);
    assert!(pack_payload(&p).is_err());
    let d = CompressedPayload::new(PayloadKind::Dense, 0, 0).with_indices(vec![1]);
    assert!(pack_payload(&d).is_err());
}

proptest! {
    #[test]
    fn truncation_never_panics(seed in any::<u64>(), cut in 0usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = PayloadKind::ALL[(seed % 5) as usize];
        let bytes = pack_payload(&random_payload(&mut rng, kind)).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(unpack_payload(&bytes[..bytes.len() - cut]).is_ok() == (cut == 0));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = unpack_payload(&bytes);
        let _ = decode_index_block(&bytes);
    }

    #[test]
    fn index_sets_round_trip(mut idx in proptest::collection::btree_set(0usize..1 << 31, 0..300)) {
        let idx: Vec<usize> = std::mem::take(&mut idx).into_iter().collect();
        let block = encode_index_block(&idx).unwrap();
        prop_assert_eq!(reference_indices(&reference_inflate(&block)), idx.clone());
        prop_assert_eq!(decode_index_block(&block).unwrap(), idx);
    }
}
