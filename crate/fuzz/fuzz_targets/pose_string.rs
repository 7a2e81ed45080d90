#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pose) = nvde::io::parse_pose_string(text) {
            assert!(pose.rotation.iter().all(|v| v.is_finite()));
        }
    }
});
