//! Hashing and pseudo-random primitives shared by every deterministic component.
//!
//! Both are fixed, documented algorithms so that independent implementations of
//! the mock backends and the split sampler agree bit for bit:
//!
//! * FNV-1a, 64 bit: offset basis `0xcbf29ce484222325`, prime `0x100000001b3`,
//!   applied to the UTF-8 bytes of the input.
//! * SplitMix64: increment `0x9e3779b97f4a7c15`, mix multipliers
//!   `0xbf58476d1ce4e5b9` and `0x94d049bb133111eb`, shifts 30/27/31.

use serde::{Deserialize, Serialize};

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a sequence of byte slices, hashed as if concatenated.
pub fn fnv1a_parts(parts: &[&[u8]]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    }
    hash
}

pub fn fnv1a(text: &str) -> u64 {
    fnv1a_parts(&[text.as_bytes()])
}

/// Stable identifier of a prompt: FNV-1a of its raw text, as 16 hex digits.
pub fn prompt_id(raw: &str) -> String {
    format!("{:016x}", fnv1a(raw))
}

/// SplitMix64 generator. The whole state is one `u64`, which makes it
/// trivial to checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Index in `0..bound` computed as `next_u64() % bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// In-place Fisher–Yates: for `i` from `len-1` down to 1, swap `i` with `below(i+1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
