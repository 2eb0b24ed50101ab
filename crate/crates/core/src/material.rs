//! Secret key bytes.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use zeroize::Zeroize;

/// Key material. Serialized as standard base64, never printed by `Debug`,
/// and wiped from memory on drop or [`KeyMaterial::erase`].
#[derive(Clone, PartialEq, Eq, Default)]
pub struct KeyMaterial(Vec<u8>);

impl KeyMaterial {
    pub fn new(bytes: Vec<u8>) -> Self {
        KeyMaterial(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> u64 {
        self.0.len() as u64 * 8
    }

    /// Bytewise XOR. Both sides must have the same length.
    pub fn xor(&self, pad: &KeyMaterial) -> KeyMaterial {
        assert_eq!(self.len(), pad.len(), "one-time pad length mismatch");
        KeyMaterial(self.0.iter().zip(&pad.0).map(|(a, b)| a ^ b).collect())
    }

    /// Zero the bytes and release them.
    pub fn erase(&mut self) {
        self.0.zeroize();
        self.0 = Vec::new();
    }

    pub fn to_base64(&self) -> String {
        STANDARD.encode(&self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, base64::DecodeError> {
        STANDARD.decode(s).map(KeyMaterial)
    }
}

impl Drop for KeyMaterial {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl From<Vec<u8>> for KeyMaterial {
    fn from(v: Vec<u8>) -> Self {
        KeyMaterial(v)
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial({} bytes)", self.0.len())
    }
}

impl Serialize for KeyMaterial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for KeyMaterial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        KeyMaterial::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_examples() {
        let k = KeyMaterial::new(vec![0xAA]);
        assert_eq!(k.xor(&KeyMaterial::new(vec![0xFF])).as_bytes(), &[0x55]);
        assert_eq!(k.xor(&KeyMaterial::new(vec![0x00])), k);
    }

    #[test]
    fn erase_leaves_nothing() {
        let mut k = KeyMaterial::new(vec![1, 2, 3]);
        k.erase();
        assert!(k.is_empty());
    }

    #[test]
    fn base64_json() {
        let k = KeyMaterial::new(vec![0xde, 0xad, 0xbe, 0xef]);
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(s, "\"3q2+7w==\"");
        assert_eq!(serde_json::from_str::<KeyMaterial>(&s).unwrap(), k);
        assert_eq!(format!("{k:?}"), "KeyMaterial(4 bytes)");
    }
}
