#![no_main]

use factornet::dataio::read_macro_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(panel) = read_macro_csv(data) {
        let _ = panel.transformed();
    }
});
