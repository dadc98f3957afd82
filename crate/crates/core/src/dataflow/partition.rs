use super::record::Record;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Finalizer from MurmurHash3; spreads FNV output across the low bits.
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^ (k >> 33)
}

/// Partition index of a key text for `n` partitions.
pub fn partition_of_key(key: &str, n: usize) -> usize {
    assert!(n > 0, "partition count must be positive");
    (fmix64(fnv1a(key.as_bytes())) % n as u64) as usize
}

/// Partition index of a record by its key field; `None` when the field is
/// missing or null.
pub fn hash_partition(record: &Record, key_field: &str, n: usize) -> Option<usize> {
    record.key_text(key_field).map(|k| partition_of_key(&k, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_partition_is_zero() {
        let r = Record::from_json(r#"{"id":"anything"}"#).unwrap();
        assert_eq!(hash_partition(&r, "id", 1), Some(0));
        assert_eq!(hash_partition(&r, "missing", 4), None);
    }

    #[test]
    fn balance_over_synthetic_keys() {
        let mut counts = [0usize; 4];
        for g in 0..4 {
            for s in 0..2500 {
                counts[partition_of_key(&format!("{g}-{s}"), 4)] += 1;
            }
        }
        for c in counts {
            let share = c as f64 / 10_000.0;
            assert!((0.15..=0.35).contains(&share), "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn stable_and_in_range(key in ".{0,20}", n in 1usize..16) {
            let a = partition_of_key(&key, n);
            prop_assert!(a < n);
            prop_assert_eq!(a, partition_of_key(&key, n));
        }
    }
}
