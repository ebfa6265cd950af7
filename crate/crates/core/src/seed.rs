//! Seed derivation for independent, order-free random streams.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` under `base`. Distinct `(base, index)` pairs give
/// unrelated seeds, so any item can be regenerated on its own.
pub fn derive(base: u64, index: u64) -> u64 {
    mix(base ^ mix(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}
