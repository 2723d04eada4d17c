//! FNV-1a hashes used for mock colors, mock embedding seeds and per-pass seeds.

const FNV32_OFFSET: u32 = 0x811c_9dc5;
const FNV32_PRIME: u32 = 0x0100_0193;
const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV64_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(FNV32_OFFSET, |h, &b| {
        (h ^ u32::from(b)).wrapping_mul(FNV32_PRIME)
    })
}

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    fnv1a_64_extend(FNV64_OFFSET, bytes)
}

/// Continue an FNV-1a-64 state over more bytes, so that
/// `fnv1a_64_extend(fnv1a_64(a), b) == fnv1a_64(a ++ b)`.
pub fn fnv1a_64_extend(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV64_PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_vectors() {
        assert_eq!(fnv1a_32(b""), 0x811c_9dc5);
        assert_eq!(fnv1a_32(b"a"), 0xe40c_292c);
        assert_eq!(fnv1a_64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn dog_hashes() {
        assert_eq!(fnv1a_32(b"dog"), 0xe668_bd09);
        assert_eq!(fnv1a_64(b"dog"), 0xcaaf_3b18_f474_78e9);
    }

    #[test]
    fn extend_is_concatenation() {
        assert_eq!(fnv1a_64_extend(fnv1a_64(b"ho"), b"rse"), fnv1a_64(b"horse"));
    }
}
