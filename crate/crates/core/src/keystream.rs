//! Keyed, bit-exact generation of permutations and masks.
//!
//! Everything here is built on SplitMix64 so that a ciphertext produced by
//! this crate can be reproduced by any other implementation from the master
//! key alone. Subkeys are never stored; they are re-derived on demand.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator. The state is a plain value; copying it forks the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
        let (next, value) = next_u64(self.state);
        self.state = next;
        value
    }
}

/// One SplitMix64 step: returns `(value, new_state)`.
#[inline]
pub fn next_u64(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

/// A bijection on `0..n`; `map[i]` is the destination index of element `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermutationVec {
    map: Vec<usize>,
}

impl PermutationVec {
    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect() }
    }

    /// Validates that `map` is a bijection.
    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &d in &map {
            if d >= map.len() || seen[d] {
                return Err(invalid(format!("not a permutation of 0..{}", map.len())));
            }
            seen[d] = true;
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn dest(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &d)| i == d)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &d) in self.map.iter().enumerate() {
            inv[d] = i;
        }
        Self { map: inv }
    }

    /// `self` after `first`: element `i` goes to `self[first[i]]`.
    pub fn compose(&self, first: &PermutationVec) -> Self {
        Self { map: first.map.iter().map(|&d| self.map[d]).collect() }
    }

    /// Moves each element of `items` to its destination.
    pub fn scatter<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.map.len());
        let mut out = items.to_vec();
        for (i, &d) in self.map.iter().enumerate() {
            out[d] = items[i].clone();
        }
        out
    }
}

/// Fisher-Yates shuffle of the identity, descending, with modulo draws.
pub fn gen_permutation(seed: u64, n: usize) -> Result<PermutationVec> {
    if n == 0 {
        return Err(invalid("permutation length must be at least 1"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut map: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        map.swap(i, j);
    }
    Ok(PermutationVec { map })
}

/// Fixed-length sequence of booleans.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    bits: Vec<bool>,
}

impl BitMask {
    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn ones(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One `u64` per 64 bits, consumed least-significant bit first.
pub fn gen_mask(seed: u64, n: usize) -> Result<BitMask> {
    if n == 0 {
        return Err(invalid("mask length must be at least 1"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut bits = Vec::with_capacity(n);
    let mut word = 0u64;
    for i in 0..n {
        if i % 64 == 0 {
            word = rng.next_u64();
        }
        bits.push((word >> (i % 64)) & 1 == 1);
    }
    Ok(BitMask { bits })
}

/// 256-bit master key, stored big-endian (`bytes[31]` is the lowest byte).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MasterKey([u8; 32]);

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Four SplitMix64 outputs from `seed`, most significant word first.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&rng.next_u64().to_be_bytes());
        }
        Self(bytes)
    }

    pub fn low_u64(&self) -> u64 {
        let mut low = [0u8; 8];
        low.copy_from_slice(&self.0[24..]);
        u64::from_be_bytes(low)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn flip_bit(&self, bit: usize) -> Self {
        let mut bytes = self.0;
        bytes[31 - bit / 8] ^= 1 << (bit % 8);
        Self(bytes)
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MasterKey({})", self.to_hex())
    }
}

impl FromStr for MasterKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 64 || !s.is_ascii() {
            return Err(Error::Parse(format!("master key must be 64 hex characters, got {}", s.len())));
        }
        let mut bytes = [0u8; 32];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Parse(format!("invalid hex in master key: {s:?}")))?;
        }
        Ok(Self(bytes))
    }
}

/// Master key plus the three derived subkey seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecretKey {
    pub master: MasterKey,
    /// Block permutation seed.
    pub k1: u64,
    /// Pixel shuffle seed.
    pub k2: u64,
    /// Negative-positive mask seed.
    pub k3: u64,
}

impl SecretKey {
    pub fn new(master: MasterKey) -> Self {
        let [k1, k2, k3] = derive_subkeys(&master);
        Self { master, k1, k2, k3 }
    }

    pub fn from_hex(hex: &str) -> Result<Self> {
        Ok(Self::new(hex.parse()?))
    }
}

/// `k_i = splitmix64_step(low64(master) ^ i)` for `i = 1, 2, 3`.
pub fn derive_subkeys(master: &MasterKey) -> [u64; 3] {
    let low = master.low_u64();
    [1u64, 2, 3].map(|i| next_u64(low ^ i).1)
}

/// Contents of a key file: `master=`, `block_size=`, `version=1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFile {
    pub master: MasterKey,
    pub block_size: usize,
}

impl KeyFile {
    pub const VERSION: u32 = 1;

    pub fn secret_key(&self) -> SecretKey {
        SecretKey::new(self.master)
    }

    pub fn to_text(&self) -> String {
        format!("master={}\nblock_size={}\nversion={}\n", self.master.to_hex(), self.block_size, Self::VERSION)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut master, mut block_size, mut version) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("key file line without '=': {line:?}")))?;
            match k.trim() {
                "master" => master = Some(v.parse::<MasterKey>()?),
                "block_size" => {
                    block_size =
                        Some(v.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad block_size {v:?}")))?)
                }
                "version" => {
                    version = Some(v.trim().parse::<u32>().map_err(|_| Error::Parse(format!("bad version {v:?}")))?)
                }
                other => return Err(Error::Parse(format!("unknown key file field {other:?}"))),
            }
        }
        match version {
            Some(Self::VERSION) => {}
            Some(v) => return Err(Error::Parse(format!("unsupported key file version {v}"))),
            None => return Err(Error::Parse("key file missing version".into())),
        }
        let master = master.ok_or_else(|| Error::Parse("key file missing master".into()))?;
        let block_size = block_size.ok_or_else(|| Error::Parse("key file missing block_size".into()))?;
        if block_size == 0 {
            return Err(Error::Parse("block_size must be positive".into()));
        }
        Ok(Self { master, block_size })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn splitmix_reference_stream() {
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = SplitMix64::new(0xDEAD_BEEF);
        let mut b = SplitMix64::new(0xDEAD_BEEF);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn subkeys_of_zero_master() {
        let keys = derive_subkeys(&MasterKey::from_bytes([0; 32]));
        assert_eq!(keys, [0x910A_2DEC_8902_5CC1, 0x9758_35DE_1C97_56CE, 0x1D0B_14E4_DB01_8FED]);
        assert_eq!(keys, derive_subkeys(&MasterKey::from_bytes([0; 32])));
    }

    #[test]
    fn subkeys_of_master_one_differ() {
        let mut one = [0u8; 32];
        one[31] = 1;
        let keys = derive_subkeys(&MasterKey::from_bytes(one));
        // low word 1: 1^1 = 0, 1^2 = 3, 1^3 = 2
        assert_eq!(keys, [0xE220_A839_7B1D_CDAF, 0x1D0B_14E4_DB01_8FED, 0x9758_35DE_1C97_56CE]);
        assert_ne!(keys[0], derive_subkeys(&MasterKey::from_bytes([0; 32]))[0]);
    }

    #[test]
    fn subkey_seeds_do_not_collide() {
        let mut rng = SplitMix64::new(42);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let master = MasterKey::from_seed(rng.next_u64());
            for k in derive_subkeys(&master) {
                assert!(seen.insert(k));
            }
        }
        assert_eq!(seen.len(), 30_000);
    }

    #[test]
    fn permutation_vectors() {
        assert_eq!(gen_permutation(99, 1).unwrap().as_slice(), &[0]);
        assert_eq!(gen_permutation(0, 4).unwrap().as_slice(), &[2, 1, 0, 3]);
        assert_eq!(gen_permutation(0, 10).unwrap().as_slice(), &[6, 3, 2, 9, 8, 1, 4, 7, 0, 5]);
        assert_eq!(gen_permutation(12345, 8).unwrap().as_slice(), &[2, 4, 1, 5, 7, 6, 3, 0]);
        assert!(matches!(gen_permutation(0, 0), Err(Error::InvalidArgument(_))));
    }

    fn bits_of(s: &str) -> Vec<bool> {
        s.bytes().map(|b| b == b'1').collect()
    }

    #[test]
    fn mask_vectors() {
        let m = gen_mask(0, 64).unwrap();
        let word = 0xE220_A839_7B1D_CDAFu64;
        for i in 0..64 {
            assert_eq!(m.get(i), (word >> i) & 1 == 1);
        }
        assert_eq!(gen_mask(0, 16).unwrap().as_slice(), bits_of("1111010110110011").as_slice());
        let expected = bits_of("1110101110110000010011001001101000100111100001111101001111000110001110");
        assert_eq!(gen_mask(7, 70).unwrap().as_slice(), expected.as_slice());
        assert_eq!(gen_mask(7, 70).unwrap(), gen_mask(7, 70).unwrap());
        assert!(gen_mask(0, 0).is_err());
    }

    #[test]
    fn mask_density() {
        let m = gen_mask(2024, 1_000_000).unwrap();
        let frac = m.count_ones() as f64 / 1e6;
        assert!((0.495..=0.505).contains(&frac), "density {frac}");
    }

    #[test]
    fn key_file_round_trip_and_errors() {
        let kf = KeyFile { master: MasterKey::from_seed(0), block_size: 4 };
        let text = kf.to_text();
        assert!(text.starts_with("master="));
        assert_eq!(KeyFile::parse(&text).unwrap(), kf);
        assert!(KeyFile::parse("master=zz\nblock_size=4\nversion=1\n").is_err());
        assert!(KeyFile::parse(&text.replace("version=1", "version=2")).is_err());
        assert!(SecretKey::from_hex("0g").is_err());
    }

    #[test]
    fn permutation_inverse_and_compose() {
        let p = gen_permutation(5, 9).unwrap();
        assert!(p.compose(&p.inverse()).is_identity());
        assert!(p.inverse().compose(&p).is_identity());
        assert!(PermutationVec::from_vec(vec![0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_is_bijection(seed in any::<u64>(), n in 1usize..10_000) {
            let p = gen_permutation(seed, n).unwrap();
            let mut sorted = p.as_slice().to_vec();
            sorted.sort_unstable();
            prop_assert!(sorted.iter().enumerate().all(|(i, &v)| i == v));
        }

        #[test]
        fn master_hex_round_trip(bytes in any::<[u8; 32]>()) {
            let m = MasterKey::from_bytes(bytes);
            prop_assert_eq!(m.to_hex().parse::<MasterKey>().unwrap(), m);
        }
    }
}
