#![no_main]

use libfuzzer_sys::fuzz_target;
use nvde::io::{Checkpoint, TensorArchive};

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = TensorArchive::decode(data) {
        let bytes = archive.encode().expect("decoded archives re-encode");
        assert_eq!(TensorArchive::decode(&bytes).expect("round trip"), archive);
    }
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode().expect("decoded checkpoints re-encode");
        assert_eq!(Checkpoint::decode(&bytes).expect("round trip"), ckpt);
    }
});
