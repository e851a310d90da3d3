//! Lexicographically sortable identifiers.
//!
//! 26 Crockford base32 characters: 10 for a 48-bit millisecond timestamp,
//! 16 for 80 bits of entropy. Within one generator ids strictly increase even
//! when the clock stalls or steps back: the entropy half is incremented.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

const ALPHABET: &[u8; 32] = b"0123456789ABCDEFGHJKMNPQRSTVWXYZ";
const RANDOM_BITS: u32 = 80;
const RANDOM_MASK: u128 = (1u128 << RANDOM_BITS) - 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SortableId(String);

impl SortableId {
    pub fn encode(millis: u64, random: u128) -> Self {
        let value = ((millis as u128 & 0xFFFF_FFFF_FFFF) << RANDOM_BITS) | (random & RANDOM_MASK);
        let mut out = [0u8; 26];
        for (i, slot) in out.iter_mut().enumerate() {
            let shift = 5 * (25 - i);
            *slot = ALPHABET[((value >> shift) & 0x1F) as usize];
        }
        Self(out.iter().map(|b| *b as char).collect())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for SortableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IdGenerator {
    last_millis: u64,
    last_random: u128,
}

impl IdGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next id given the current time and fresh entropy.
    pub fn next(&mut self, now_millis: u64, entropy: u128) -> SortableId {
        if now_millis > self.last_millis {
            self.last_millis = now_millis;
            self.last_random = entropy & RANDOM_MASK;
        } else {
            self.last_random = (self.last_random + 1) & RANDOM_MASK;
            if self.last_random == 0 {
                self.last_millis += 1;
            }
        }
        SortableId::encode(self.last_millis, self.last_random)
    }

    /// Ensures later ids sort after `id`; used when resuming from persisted state.
    pub fn observe(&mut self, id: &str) {
        if let Some((millis, random)) = decode(id) {
            if (millis, random) > (self.last_millis, self.last_random) {
                self.last_millis = millis;
                self.last_random = random;
            }
        }
    }
}

fn decode(id: &str) -> Option<(u64, u128)> {
    if id.len() != 26 {
        return None;
    }
    let mut value: u128 = 0;
    for b in id.bytes() {
        let digit = ALPHABET.iter().position(|a| *a == b)? as u128;
        value = (value << 5) | digit;
    }
    Some(((value >> RANDOM_BITS) as u64, value & RANDOM_MASK))
}
