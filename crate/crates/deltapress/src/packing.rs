//! Bit-exact code packing for quantized entries. Codes are signed and
//! symmetric (range ±(2^{bits-1}-1)).
//!
//! - 2-bit: 4 codes per byte, LSB-first, two's complement in each 2-bit lane
//! - 3-bit: 10 codes per little-endian u32 word, bits 0..30, top 2 bits zero
//! - 4-bit: 2 codes per byte, low nibble first
//! - 8-bit: one two's-complement byte per code

pub fn pack(codes: &[i8], bits: u8) -> Vec<u8> {
    match bits {
        2 => {
            let mut out = vec![0u8; codes.len().div_ceil(4)];
            for (i, &c) in codes.iter().enumerate() {
                out[i / 4] |= ((c as u8) & 0b11) << ((i % 4) * 2);
            }
            out
        }
        3 => {
            let words = codes.len().div_ceil(10);
            let mut out = Vec::with_capacity(words * 4);
            for w in 0..words {
                let mut word = 0u32;
                for slot in 0..10 {
                    let idx = w * 10 + slot;
                    if idx < codes.len() {
                        word |= ((codes[idx] as u8 as u32) & 0b111) << (slot * 3);
                    }
                }
                out.extend_from_slice(&word.to_le_bytes());
            }
            out
        }
        4 => {
            let mut out = vec![0u8; codes.len().div_ceil(2)];
            for (i, &c) in codes.iter().enumerate() {
                out[i / 2] |= ((c as u8) & 0x0F) << ((i % 2) * 4);
            }
            out
        }
        8 => codes.iter().map(|&c| c as u8).collect(),
        _ => panic!("unsupported packing width {bits}"),
    }
}

pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(count);
    match bits {
        2 => {
            for i in 0..count {
                let raw = (bytes[i / 4] >> ((i % 4) * 2)) & 0b11;
                out.push(sign_extend(raw, 2));
            }
        }
        3 => {
            for i in 0..count {
                let word = u32::from_le_bytes(bytes[(i / 10) * 4..(i / 10) * 4 + 4].try_into().unwrap());
                let raw = ((word >> ((i % 10) * 3)) & 0b111) as u8;
                out.push(sign_extend(raw, 3));
            }
        }
        4 => {
            for i in 0..count {
                let raw = (bytes[i / 2] >> ((i % 2) * 4)) & 0x0F;
                out.push(sign_extend(raw, 4));
            }
        }
        8 => {
            for i in 0..count {
                out.push(bytes[i] as i8);
            }
        }
        _ => panic!("unsupported packing width {bits}"),
    }
    out
}

#[inline]
fn sign_extend(raw: u8, bits: u8) -> i8 {
    let shift = 8 - bits;
    ((raw << shift) as i8) >> shift
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    match bits {
        2 => count.div_ceil(4),
        3 => count.div_ceil(10) * 4,
        4 => count.div_ceil(2),
        8 => count,
        _ => panic!("unsupported packing width {bits}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code_range(bits: u8) -> std::ops::RangeInclusive<i8> {
        let hi = ((1i16 << (bits - 1)) - 1) as i8;
        -hi..=hi
    }

    #[test]
    fn roundtrip_all_values_all_widths() {
        for bits in [2u8, 3, 4, 8] {
            for len in [0usize, 1, 3, 9, 10, 11, 31, 40] {
                let codes: Vec<i8> = (0..len)
                    .map(|i| {
                        let r = code_range(bits);
                        let span = (*r.end() as i16 - *r.start() as i16 + 1) as usize;
                        (*r.start() as i16 + (i % span) as i16) as i8
                    })
                    .collect();
                let packed = pack(&codes, bits);
                assert_eq!(packed.len(), packed_len(len, bits));
                assert_eq!(unpack(&packed, bits, len), codes, "bits {bits} len {len}");
            }
        }
    }

    #[test]
    fn three_bit_pad_bits_zero() {
        let codes = vec![3i8, -3, 1, -1, 2, -2, 0, 3, -3, 1];
        let packed = pack(&codes, 3);
        let word = u32::from_le_bytes(packed[0..4].try_into().unwrap());
        assert_eq!(word >> 30, 0, "top two bits must stay clear");
    }

    #[test]
    fn two_bit_layout_lsb_first() {
        // codes 1, -1, 0, 1 -> lanes 01, 11, 00, 01 -> byte 0b01_00_11_01
        assert_eq!(pack(&[1, -1, 0, 1], 2), vec![0b01_00_11_01]);
    }
}
