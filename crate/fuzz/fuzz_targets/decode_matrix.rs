#![no_main]

use libfuzzer_sys::fuzz_target;
use otrcl::data::io::{decode_matrix, encode_matrix};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_matrix(data) {
        assert_eq!(encode_matrix(&m), data);
    }
});
