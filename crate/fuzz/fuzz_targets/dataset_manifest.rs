#![no_main]

use libfuzzer_sys::fuzz_target;
use otrcl::data::io::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::parse(text) {
        assert_eq!(DatasetManifest::parse(&m.to_toml()).unwrap(), m);
    }
});
