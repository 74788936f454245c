//! Bit-packed payload layout.
//!
//! Bits are written LSB-first into little-endian bytes. Floats are IEEE-754
//! binary32. The packed length in bits equals [`CompressedPayload::bit_cost`]
//! exactly; the final byte is zero-padded.
//!
//! | encoding          | layout                                                      |
//! |-------------------|-------------------------------------------------------------|
//! | dense             | `d × f32`                                                   |
//! | sparse            | `k × (index: ⌈log2 d⌉ bits, value: f32)`, ascending index   |
//! | sparse_quantized  | `norm: f32`, then `k × (index, sign: 1 bit, level: ⌈log2(s+1)⌉ bits)` |
//! | sign_vector       | `scale: f32`, then `d` sign bits (1 = negative)             |
//!
//! The encoding kind, `d`, `k` and `s` travel out of band with the
//! [`CompressorSpec`](super::CompressorSpec).

use super::{index_bits, level_bits, CompressedPayload, CompressorSpec, Encoding};
use crate::error::{Error, Result};

struct BitWriter {
    bytes: Vec<u8>,
    bit: u64,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn put(&mut self, value: u64, width: u32) {
        for b in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                let last = self.bytes.len() - 1;
                self.bytes[last] |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    fn put_f32(&mut self, v: f64) {
        self.put((v as f32).to_bits() as u64, 32);
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: u64,
}

impl BitReader<'_> {
    fn get(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for b in 0..width {
            let byte = (self.bit / 8) as usize;
            let Some(&raw) = self.bytes.get(byte) else {
                return Err(Error::Payload("truncated payload".into()));
            };
            if (raw >> (self.bit % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            self.bit += 1;
        }
        Ok(v)
    }

    fn get_f32(&mut self) -> Result<f64> {
        Ok(f32::from_bits(self.get(32)? as u32) as f64)
    }
}

pub(super) fn encode(p: &CompressedPayload) -> Vec<u8> {
    let d = p.dim();
    let ib = index_bits(d);
    let mut w = BitWriter::new();
    match p.encoding() {
        Encoding::Dense(values) => values.iter().for_each(|&v| w.put_f32(v)),
        Encoding::Sparse { indices, values } => {
            for (&i, &v) in indices.iter().zip(values) {
                w.put(i as u64, ib);
                w.put_f32(v);
            }
        }
        Encoding::SparseQuantized {
            norm,
            s,
            indices,
            negative,
            levels,
        } => {
            let lb = level_bits(*s);
            w.put_f32(*norm);
            for ((&i, &neg), &l) in indices.iter().zip(negative).zip(levels) {
                w.put(i as u64, ib);
                w.put(neg as u64, 1);
                w.put(l as u64, lb);
            }
        }
        Encoding::SignVector { scale, negative } => {
            w.put_f32(*scale);
            negative.iter().for_each(|&neg| w.put(neg as u64, 1));
        }
    }
    debug_assert_eq!(w.bit, p.bit_cost());
    w.bytes
}

pub(super) fn decode(bytes: &[u8], spec: &CompressorSpec, d: usize) -> Result<CompressedPayload> {
    spec.validate(d)?;
    let ib = index_bits(d);
    let mut r = BitReader { bytes, bit: 0 };
    let read_index = |r: &mut BitReader| -> Result<u32> {
        let i = r.get(ib)?;
        if i as usize >= d {
            return Err(Error::Payload(format!(
                "index {i} out of range for d = {d}"
            )));
        }
        Ok(i as u32)
    };
    let encoding = match *spec {
        CompressorSpec::Identity => {
            Encoding::Dense((0..d).map(|_| r.get_f32()).collect::<Result<_>>()?)
        }
        CompressorSpec::Topk { k } => {
            let mut indices = Vec::with_capacity(k);
            let mut values = Vec::with_capacity(k);
            for _ in 0..k {
                indices.push(read_index(&mut r)?);
                values.push(r.get_f32()?);
            }
            Encoding::Sparse { indices, values }
        }
        CompressorSpec::Qsgd { s } | CompressorSpec::TopkThenQsgd { s, .. } => {
            let k = match *spec {
                CompressorSpec::TopkThenQsgd { k, .. } => k,
                _ => d,
            };
            let lb = level_bits(s);
            let norm = r.get_f32()?;
            let mut indices = Vec::with_capacity(k);
            let mut negative = Vec::with_capacity(k);
            let mut levels = Vec::with_capacity(k);
            for _ in 0..k {
                indices.push(read_index(&mut r)?);
                negative.push(r.get(1)? == 1);
                let l = r.get(lb)? as u32;
                if l > s {
                    return Err(Error::Payload(format!("level {l} exceeds s = {s}")));
                }
                levels.push(l);
            }
            Encoding::SparseQuantized {
                norm,
                s,
                indices,
                negative,
                levels,
            }
        }
        CompressorSpec::SignScaled | CompressorSpec::SignRaw => {
            let scale = r.get_f32()?;
            let negative = (0..d)
                .map(|_| r.get(1).map(|b| b == 1))
                .collect::<Result<_>>()?;
            Encoding::SignVector { scale, negative }
        }
    };
    let expected_bytes = r.bit.div_ceil(8) as usize;
    if bytes.len() != expected_bytes {
        return Err(Error::Payload(format!(
            "expected {expected_bytes} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(CompressedPayload::new(d, encoding))
}
