#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = nvde::io::decode_pfm(data) {
        let bytes = nvde::io::encode_pfm(&img).expect("single channel");
        let again = nvde::io::decode_pfm(&bytes).expect("round trip");
        assert_eq!(again.data().len(), img.data().len());
    }
});
