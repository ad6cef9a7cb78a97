//! LSB-first bit packing of unsigned codes.

/// Bits needed to index `count` entries: `ceil(log2 count)`, 0 for one entry.
pub fn index_bits(count: usize) -> u8 {
    if count <= 1 {
        0
    } else {
        (usize::BITS - (count - 1).leading_zeros()) as u8
    }
}

/// Appends fixed-width codes to a byte buffer, least significant bit first.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    pub fn write(&mut self, value: u32, width: u8) {
        debug_assert!(width == 32 || value >> width == 0, "{value} does not fit {width} bits");
        for b in 0..width {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    pub fn write_all(&mut self, values: impl IntoIterator<Item = u32>, width: u8) {
        for v in values {
            self.write(v, width);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// Reads fixed-width codes written by [`BitWriter`].
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, bit: 0 }
    }

    /// `None` once the buffer is exhausted.
    pub fn read(&mut self, width: u8) -> Option<u32> {
        if self.bit + width as usize > self.bytes.len() * 8 {
            return None;
        }
        let mut v = 0u32;
        for b in 0..width {
            let bit = (self.bytes[self.bit / 8] >> (self.bit % 8)) & 1;
            v |= (bit as u32) << b;
            self.bit += 1;
        }
        Some(v)
    }
}

/// Packed length in bytes of `count` codes of `width` bits.
pub fn packed_len(count: usize, width: u8) -> usize {
    (count * width as usize).div_ceil(8)
}
