#![no_main]

use factornet::dataio::{read_prices_csv, write_prices_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything accepted must survive a write/read round trip unchanged.
    if let Ok(panel) = read_prices_csv(data) {
        let mut buf = Vec::new();
        write_prices_csv(&panel, &mut buf).unwrap();
        assert_eq!(read_prices_csv(buf.as_slice()).unwrap(), panel);
    }
});
