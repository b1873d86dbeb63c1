//! Lossless serde encoding of real vectors as their IEEE-754 bit patterns.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::real::Real;

pub fn serialize<T: Real, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    let bits: Vec<u64> = v.iter().map(|x| x.to_bits_u64()).collect();
    bits.serialize(s)
}

pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<Vec<T>, D::Error> {
    let bits = Vec::<u64>::deserialize(d)?;
    Ok(bits.into_iter().map(T::from_bits_u64).collect())
}

/// Same encoding for a single value.
pub mod scalar {
    use super::*;

    pub fn serialize<T: Real, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        v.to_bits_u64().serialize(s)
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        Ok(T::from_bits_u64(u64::deserialize(d)?))
    }
}
