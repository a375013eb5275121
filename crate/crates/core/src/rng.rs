//! Seed derivation and the named random streams used across the toolkit.
//!
//! Every random draw in a run descends from one master seed. Each stage gets
//! its own stream so that changing how one stage consumes randomness never
//! shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, index)`.
///
/// `mix_seed(s, i) = splitmix64(s ^ splitmix64(i))`. Used for per-stack seeds
/// in corpus generation and for per-stage seeds in the pipeline.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DataGen,
    Init,
    Crop,
    Augment,
    Mixing,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataGen => 0xD47A_6E00,
            Stream::Init => 0x1417_0000,
            Stream::Crop => 0xC409_0000,
            Stream::Augment => 0xA064_0000,
            Stream::Mixing => 0x0313_1E00,
        }
    }
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    mix_seed(seed, stream.tag())
}

pub fn stream_rng(seed: u64, stream: Stream) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(seed, stream))
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Serde adapter for seeds in text formats whose integers are signed 64-bit.
/// Values above `i64::MAX` are written as `"0x..."` strings; both forms are
/// accepted on input.
pub mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&format!("{seed:#018x}")),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => {
                u64::try_from(v).map_err(|_| de::Error::custom("seed must be non-negative"))
            }
            Repr::Text(t) => {
                let parsed = match t.strip_prefix("0x") {
                    Some(hex) => u64::from_str_radix(hex, 16),
                    None => t.parse(),
                };
                parsed.map_err(|_| de::Error::custom(format!("invalid seed {t:?}")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0,
        // where state advances by the golden gamma before each finalization.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = stream_rng(7, Stream::Crop);
        let mut b = stream_rng(7, Stream::Augment);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn mix_seed_separates_indices() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| mix_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "seed_serde")]
        seed: u64,
    }

    #[test]
    fn seeds_round_trip_through_toml() {
        for seed in [0, 7, i64::MAX as u64, i64::MAX as u64 + 1, u64::MAX] {
            let text = toml::to_string(&Holder { seed }).unwrap();
            assert_eq!(toml::from_str::<Holder>(&text).unwrap(), Holder { seed });
        }
        assert_eq!(toml::from_str::<Holder>("seed = \"12\"").unwrap().seed, 12);
        assert!(toml::from_str::<Holder>("seed = -1").is_err());
    }
}
