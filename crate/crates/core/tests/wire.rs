mod common;

use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use randstream::shard::{ShardError, ShardReader, ShardWriter, read_shard};
use randstream::wire::{
    Message, Tensor, Value, WireError, decode_message, encode_message, read_frame, validate_stream_header, write_frame,
};

use common::{expected_fixtures, fixture_dir, random_message, same_message};

#[test]
fn golden_fixtures_decode_and_reencode_byte_exactly() {
    for (name, expected) in expected_fixtures() {
        let bytes = fs::read(fixture_dir().join("wire").join(format!("{name}.bin"))).unwrap();
        let decoded = decode_message(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(decoded, expected, "{name}");
        assert_eq!(encode_message(&expected).unwrap(), bytes, "{name}");
    }
}

#[test]
fn header_only_prefix() {
    let bytes = encode_message(&Message::with_header(7, 0)).unwrap();
    assert_eq!(&bytes[..5], &[0x44, 0x52, 0x01, 0x02, 0x00]);
    assert_eq!(&bytes[5..19], &[4, b'b', b't', b'i', b'd', 1, 7, 0, 0, 0, 0, 0, 0, 0]);
    // magic 2 + version 1 + count 2 + two entries of (1 + 4|5 + 1 + 8)
    assert_eq!(bytes.len(), 5 + 14 + 15);
}

#[test]
fn validate_header_cases() {
    assert_eq!(validate_stream_header(&Message::with_header(1, 9)).unwrap(), (1, 9));
    let mut m = Message::new();
    m.insert("frame", Value::U64(9));
    assert!(matches!(validate_stream_header(&m), Err(WireError::MissingHeader("btid"))));
    let mut m = Message::new();
    m.insert("btid", Value::Str("x".into()));
    m.insert("frame", Value::U64(0));
    assert!(matches!(validate_stream_header(&m), Err(WireError::MissingHeader("btid"))));
}

#[test]
fn decode_errors() {
    let good = encode_message(&expected_fixtures()[2].1).unwrap();
    let mut bad = good.clone();
    bad[0] = 0;
    bad[1] = 0;
    assert!(matches!(decode_message(&bad), Err(WireError::BadMagic(0, 0))));
    let mut bad = good.clone();
    bad[2] = 2;
    assert!(matches!(decode_message(&bad), Err(WireError::BadVersion(2))));
    for cut in [3, 6, 20, good.len() - 1] {
        assert!(matches!(decode_message(&good[..cut]), Err(WireError::Truncated)), "cut {cut}");
    }
}

#[test]
fn thousand_random_messages_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD25);
    for _ in 0..1000 {
        let m = random_message(&mut rng);
        let bytes = encode_message(&m).unwrap();
        let back = decode_message(&bytes).unwrap();
        assert!(same_message(&m, &back));
        assert_eq!(encode_message(&back).unwrap(), bytes);
    }
}

#[test]
fn framing_over_a_byte_stream() {
    let mut buf = Vec::new();
    let msgs: Vec<Message> = (0..5).map(|i| Message::with_header(1, i)).collect();
    for m in &msgs {
        write_frame(&mut buf, &encode_message(m).unwrap()).unwrap();
    }
    let mut r = &buf[..];
    let mut got = Vec::new();
    while let Some(p) = read_frame(&mut r).unwrap() {
        got.push(decode_message(&p).unwrap());
    }
    assert_eq!(got, msgs);
    let mut partial = &buf[..buf.len() - 3];
    let mut n = 0;
    let err = loop {
        match read_frame(&mut partial) {
            Ok(Some(_)) => n += 1,
            Ok(None) => panic!("partial frame read as clean end"),
            Err(e) => break e,
        }
    };
    assert_eq!(n, 4);
    assert_eq!(err.kind(), std::io::ErrorKind::UnexpectedEof);
}

#[test]
fn golden_shard() {
    let msgs = read_shard(fixture_dir().join("shards/golden.drsh")).unwrap();
    assert_eq!(msgs.len(), 3);
    for (i, m) in msgs.iter().enumerate() {
        assert_eq!(validate_stream_header(m).unwrap(), (0, i as u64));
        let t = m.tensor("image").unwrap();
        assert_eq!(t.dims(), &[1, 2, 3]);
        assert_eq!(t.data(), &[i as u8; 6]);
    }
    let mut w = ShardWriter::new(Vec::new()).unwrap();
    for m in &msgs {
        w.append(m).unwrap();
    }
    let bytes = w.finish().unwrap();
    assert_eq!(bytes, fs::read(fixture_dir().join("shards/golden.drsh")).unwrap());
}

#[test]
fn corrupt_shard_is_truncated() {
    let bytes = fs::read(fixture_dir().join("shards/golden.drsh")).unwrap();
    let cut = &bytes[..bytes.len() - 20];
    let results: Vec<_> = ShardReader::new(cut).unwrap().collect();
    assert!(matches!(results.last(), Some(Err(ShardError::Truncated))));
}

fn arb_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<u64>().prop_map(Value::U64),
        any::<i64>().prop_map(Value::I64),
        any::<f64>().prop_filter("NaN has no equality", |x| !x.is_nan()).prop_map(Value::F64),
        ".{0,16}".prop_map(Value::Str),
        prop::collection::vec(any::<u8>(), 0..32).prop_map(Value::Blob),
        (prop::collection::vec(0u32..4, 1..4), any::<u64>()).prop_map(|(dims, seed)| {
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let data: Vec<i64> = (0..n as i64).map(|i| i.wrapping_mul(seed as i64)).collect();
            Value::Tensor(Tensor::from_i64(dims, &data).unwrap())
        }),
    ]
}

proptest! {
    #[test]
    fn prop_roundtrip(btid: u64, frame: u64, extra in prop::collection::vec(("[a-z]{1,12}", arb_value()), 0..6)) {
        let mut m = Message::with_header(btid, frame);
        for (k, v) in extra {
            if k != "btid" && k != "frame" {
                m.insert(k, v);
            }
        }
        let bytes = encode_message(&m).unwrap();
        prop_assert_eq!(decode_message(&bytes).unwrap(), m.clone());
        prop_assert_eq!(encode_message(&m).unwrap(), bytes);
    }
}
