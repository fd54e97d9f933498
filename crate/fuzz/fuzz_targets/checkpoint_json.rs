#![no_main]

use factornet::training::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        // A checkpoint that loads must rebuild a network.
        ckpt.network().unwrap();
    }
});
