#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use rand::Rng;
use randstream::wire::{Message, Tensor, Value};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn producer_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_randstream"))
}

/// Messages the golden fixtures must decode to, keyed by file stem.
pub fn expected_fixtures() -> Vec<(&'static str, Message)> {
    let header_only = Message::with_header(7, 0);

    let mut tensor_u8 = Message::with_header(0, 1);
    tensor_u8.insert("image", Value::Tensor(Tensor::from_u8(vec![2, 2], vec![1, 2, 3, 4]).unwrap()));

    let mut all = Message::with_header(3, 42);
    all.insert("offset", Value::I64(-5));
    all.insert("scale", Value::F64(1.5));
    all.insert("scene", Value::Str("cube".into()));
    all.insert("raw", Value::Blob(vec![0, 255, 16]));
    all.insert("probs", Value::Tensor(Tensor::from_f32(vec![3], &[0.25, 0.25, 0.5]).unwrap()));
    all.insert("cids", Value::Tensor(Tensor::from_i64(vec![2], &[1, -1]).unwrap()));

    let mut control = Message::with_header(u64::MAX, 0);
    control.insert("cmd", Value::Str("set_class_probs".into()));
    control.insert("class_probs", Value::Tensor(Tensor::from_f32(vec![2], &[0.25, 0.75]).unwrap()));

    let mut empty = Message::with_header(1, 5);
    empty.insert("image", Value::Tensor(Tensor::from_u8(vec![2, 3, 3], (0..18).collect()).unwrap()));
    empty.insert("bboxes", Value::Tensor(Tensor::from_f32(vec![0, 4], &[]).unwrap()));
    empty.insert("cids", Value::Tensor(Tensor::from_i64(vec![0], &[]).unwrap()));
    empty.insert("vis", Value::Tensor(Tensor::from_f32(vec![0], &[]).unwrap()));

    let mut unicode = Message::with_header(0, 0);
    unicode.insert("größe", Value::Str("µm".into()));

    vec![
        ("header_only", header_only),
        ("tensor_u8", tensor_u8),
        ("all_types", all),
        ("control", control),
        ("empty_annotations", empty),
        ("unicode_key", unicode),
    ]
}

fn random_tensor<R: Rng>(rng: &mut R) -> Tensor {
    let rank = rng.random_range(1..=4);
    let dims: Vec<u32> = (0..rank).map(|_| rng.random_range(0..4)).collect();
    let n: usize = dims.iter().map(|&d| d as usize).product();
    match rng.random_range(0..3) {
        0 => Tensor::from_u8(dims, (0..n).map(|_| rng.random()).collect()).unwrap(),
        1 => {
            let v: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
            Tensor::from_f32(dims, &v).unwrap()
        }
        _ => {
            let v: Vec<i64> = (0..n).map(|_| rng.random()).collect();
            Tensor::from_i64(dims, &v).unwrap()
        }
    }
}

/// Message with valid header and up to 8 random extra entries.
pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    let mut m = Message::with_header(rng.random(), rng.random());
    let extra = rng.random_range(0..8);
    for i in 0..extra {
        let klen = rng.random_range(1..40);
        let key: String = format!("k{i}_") + &(0..klen).map(|_| rng.random_range('a'..='z')).collect::<String>();
        let v = match rng.random_range(0..6) {
            0 => Value::U64(rng.random()),
            1 => Value::I64(rng.random()),
            // Arbitrary bit patterns, NaNs included; equality is checked on bytes.
            2 => Value::F64(f64::from_bits(rng.random())),
            3 => Value::Str((0..rng.random_range(0..20)).map(|_| rng.random::<char>()).collect()),
            4 => Value::Blob((0..rng.random_range(0..64)).map(|_| rng.random()).collect()),
            _ => Value::Tensor(random_tensor(rng)),
        };
        m.insert(key, v);
    }
    m
}

/// Entry-wise equality with floats compared by bit pattern.
pub fn same_message(a: &Message, b: &Message) -> bool {
    a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|((ka, va), (kb, vb))| {
            ka == kb
                && match (va, vb) {
                    (Value::F64(x), Value::F64(y)) => x.to_bits() == y.to_bits(),
                    _ => va == vb,
                }
        })
}
