#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = nvde::io::decode_png(data) {
        let bytes = nvde::io::encode_png(&img).expect("three channels");
        assert_eq!(nvde::io::decode_png(&bytes).expect("round trip"), img);
    }
});
