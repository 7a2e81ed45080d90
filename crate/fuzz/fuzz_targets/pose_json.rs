#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = nvde::io::PoseFile::parse(text) {
            let poses = file.decoded().expect("parse validated the poses");
            assert_eq!(poses.len(), file.poses.len());
        }
    }
});
