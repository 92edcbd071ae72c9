use super::check_shape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskWidth {
    One,
    Two,
}

impl MaskWidth {
    pub fn bits(self) -> usize {
        match self {
            MaskWidth::One => 1,
            MaskWidth::Two => 2,
        }
    }

    fn max_code(self) -> u8 {
        (1u8 << self.bits()) - 1
    }
}

/// Bit-packed mask with 1 or 2 bits per element, padded to whole bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: MaskWidth,
    shape: Vec<usize>,
    len: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(shape: &[usize], width: MaskWidth) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Mask {
            width,
            shape: shape.to_vec(),
            len,
            bits: vec![0; (len * width.bits()).div_ceil(8)],
        })
    }

    pub fn full(shape: &[usize], width: MaskWidth, code: u8) -> Result<Self> {
        let mut m = Self::zeros(shape, width)?;
        if code > width.max_code() {
            return Err(Error::value(format!(
                "code {code} does not fit in {} bit(s)",
                width.bits()
            )));
        }
        if code != 0 {
            for i in 0..m.len {
                m.set(i, code);
            }
        }
        Ok(m)
    }

    /// Builds a mask from per-element codes.
    pub fn from_codes(shape: &[usize], width: MaskWidth, codes: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut m = Self::zeros(shape, width)?;
        let mut count = 0;
        for (i, c) in codes.into_iter().enumerate() {
            if i >= m.len || c > width.max_code() {
                return Err(Error::value("mask code out of range or too many codes"));
            }
            m.set(i, c);
            count += 1;
        }
        if count != m.len {
            return Err(Error::shape(format!("mask of {} elements got {count} codes", m.len)));
        }
        Ok(m)
    }

    pub fn width(&self) -> MaskWidth {
        self.width
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte_len(&self) -> usize {
        self.bits.len()
    }

    pub fn raw(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        let w = self.width.bits();
        let bit = i * w;
        (self.bits[bit / 8] >> (bit % 8)) & self.width.max_code()
    }

    #[inline]
    pub fn set(&mut self, i: usize, code: u8) {
        let w = self.width.bits();
        let bit = i * w;
        let byte = &mut self.bits[bit / 8];
        let shift = bit % 8;
        *byte = (*byte & !(self.width.max_code() << shift)) | ((code & self.width.max_code()) << shift);
    }
}
