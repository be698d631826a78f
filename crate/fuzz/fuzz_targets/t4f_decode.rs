#![no_main]
use dirmask_core::t4f::{decode_t4f, encode_t4f};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_t4f(data) {
        // payload values are f32, so re-encoding is lossless
        assert_eq!(encode_t4f(&t), data);
    }
});
