#![no_main]

use fedcsd_core::fedcsd::PrototypeMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(proto) = PrototypeMatrix::decode(data) {
        assert_eq!(proto.encode(), data);
    }
});
