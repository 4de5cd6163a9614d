use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Bit-packed ±1 vector; bit 1 stores +1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfiguration {
    len: usize,
    words: Vec<u64>,
}

impl SpinConfiguration {
    pub fn all(len: usize, spin: i8) -> Self {
        let fill = if spin > 0 { u64::MAX } else { 0 };
        let mut s = SpinConfiguration {
            len,
            words: vec![fill; len.div_ceil(64)],
        };
        s.mask_tail();
        s
    }

    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        let mut s = SpinConfiguration::all(spins.len(), -1);
        for (i, &x) in spins.iter().enumerate() {
            match x {
                1 => s.words[i / 64] |= 1 << (i % 64),
                -1 => {}
                _ => return Err(Error::InvalidArgument(format!("spin {x} at {i} is not ±1"))),
            }
        }
        Ok(s)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = SpinConfiguration::all(bits.len(), -1);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.words[i / 64] |= 1 << (i % 64);
            }
        }
        s
    }

    /// Configuration whose vertex `i` is +1 iff bit `i` of `index` is set.
    pub fn from_index(len: usize, index: u64) -> Self {
        assert!(len <= 64);
        let mut s = SpinConfiguration::all(len, -1);
        if len > 0 {
            s.words[0] = index;
            s.mask_tail();
        }
        s
    }

    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        check_len(len.div_ceil(64), words.len())?;
        let mut s = SpinConfiguration { len, words };
        s.mask_tail();
        Ok(s)
    }

    fn mask_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn index(&self) -> u64 {
        assert!(self.len <= 64);
        self.words.first().copied().unwrap_or(0)
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn get(&self, i: usize) -> i8 {
        if self.bit(i) {
            1
        } else {
            -1
        }
    }

    pub fn set(&mut self, i: usize, spin: i8) {
        if spin > 0 {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.bit(i)).collect()
    }

    pub fn flipped(&self) -> Self {
        let mut s = SpinConfiguration {
            len: self.len,
            words: self.words.iter().map(|w| !w).collect(),
        };
        s.mask_tail();
        s
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        let mut s = SpinConfiguration::all(end - start, -1);
        for i in start..end {
            if self.bit(i) {
                s.set(i - start, 1);
            }
        }
        s
    }

    pub fn magnetization(&self, start: usize, end: usize) -> i64 {
        let ones = (start..end).filter(|&i| self.bit(i)).count() as i64;
        2 * ones - (end - start) as i64
    }
}
