#![no_main]

use fedcsd_core::engine::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&model), data);
    }
});
